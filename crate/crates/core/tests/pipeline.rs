use mts2graph::artifacts::ArtifactStore;
use mts2graph::dataset::{load_dataset, make_folds, write_per_sample, znormalize, DatasetFormat, MtsDataset, PadPolicy};
use mts2graph::nn::{CnnConfig, ConvSpec, Window};
use mts2graph::pipeline::{
    explain_from_run, fold_dir, run_pipeline, run_pipeline_with, sweep, sweep_table, ExplainedMhap, Explanation, FoldRunner, PipelineConfig, Stage, SweepParam,
};
use mts2graph::{synthetic, Error};

fn small_config() -> PipelineConfig {
    let mut cfg = PipelineConfig {
        seed: 21,
        cnn: CnnConfig {
            conv_layers: vec![
                ConvSpec { filters: 4, kernel: 8 },
                ConvSpec { filters: 4, kernel: 5 },
                ConvSpec { filters: 4, kernel: 3 },
            ],
            epochs: 4,
            batch_size: 16,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
        },
        cluster_counts: vec![4, 4, 4],
        ..Default::default()
    };
    cfg.kshape.restarts = 1;
    cfg.kshape.max_iter = 20;
    cfg.kshape.fit_cap = Some(300);
    cfg.embedding.dim = 8;
    cfg.embedding.walks_per_node = 5;
    cfg.gbdt.rounds = 10;
    cfg.folds.k = 3;
    cfg.folds.limit = Some(1);
    cfg
}

fn small_data() -> MtsDataset {
    znormalize(&synthetic::order_motif_dataset(36, 100, 0.1, 4).unwrap())
}

#[test]
fn repeated_runs_are_identical_apart_from_timing() {
    let data = small_data();
    let cfg = small_config();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_pipeline_with(&cfg, &data, Some(a.path())).unwrap();
    let rb = run_pipeline_with(&cfg, &data, Some(b.path())).unwrap();
    let memory = run_pipeline_with(&cfg, &data, None).unwrap();
    assert_eq!(ra.without_timing(), rb.without_timing());
    assert_eq!(ra.without_timing(), memory.without_timing());
    for file in ["checkpoint.bin", "clusters.bin", "graph.tsv", "embeddings.txt", "classifier.txt", "features_test.txt"] {
        let x = std::fs::read(fold_dir(a.path(), 0).join(file)).unwrap();
        let y = std::fs::read(fold_dir(b.path(), 0).join(file)).unwrap();
        assert!(x == y, "{file} differs between runs");
    }
    for file in ["config.toml", "folds.json", "metrics.json", "metrics.txt"] {
        assert!(a.path().join(file).exists(), "{file} missing");
    }
}

#[test]
fn tampered_upstream_artifact_is_rejected_on_resume() {
    let data = small_data();
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    run_pipeline_with(&cfg, &data, Some(dir.path())).unwrap();
    let fold = fold_dir(dir.path(), 0);
    let plan = make_folds(&data, 3, cfg.fold_seed()).unwrap();

    let mut clean = FoldRunner::new(&cfg, &data, &plan, 0, Some(ArtifactStore::open(&fold).unwrap())).unwrap();
    clean.resume = true;
    clean.ensure(Stage::Embed).unwrap();

    let graph = fold.join("graph.tsv");
    let mut text = std::fs::read_to_string(&graph).unwrap();
    text.push_str("0\t0\t1\tintra\n");
    std::fs::write(&graph, text).unwrap();
    let mut runner = FoldRunner::new(&cfg, &data, &plan, 0, Some(ArtifactStore::open(&fold).unwrap())).unwrap();
    runner.resume = true;
    let err = runner.ensure(Stage::Embed).unwrap_err();
    assert!(matches!(err, Error::Stage { .. } | Error::Provenance(_)), "{err}");
    assert!(err.to_string().contains("graph.tsv"), "{err}");
}

#[test]
fn resumed_stages_match_a_fresh_run() {
    let data = small_data();
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let plan = make_folds(&data, 3, cfg.fold_seed()).unwrap();
    let fold = fold_dir(dir.path(), 0);
    let mut first = FoldRunner::new(&cfg, &data, &plan, 0, Some(ArtifactStore::open(&fold).unwrap())).unwrap();
    first.run(Stage::Cluster).unwrap();
    let mut second = FoldRunner::new(&cfg, &data, &plan, 0, Some(ArtifactStore::open(&fold).unwrap())).unwrap();
    second.resume = true;
    let resumed = second.metrics().unwrap();
    let fresh = FoldRunner::new(&cfg, &data, &plan, 0, None).unwrap().metrics().unwrap();
    assert_eq!(resumed.accuracy, fresh.accuracy);
    assert_eq!(resumed.graph, fresh.graph);
}

#[test]
fn explanation_windows_reach_their_thresholds() {
    let raw = synthetic::order_motif_dataset(36, 100, 0.1, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    write_per_sample(&raw, &data_dir).unwrap();
    let mut cfg = small_config();
    cfg.dataset.path = data_dir;
    cfg.out = dir.path().join("run");
    run_pipeline(&cfg).unwrap();
    let loaded = load_dataset(&cfg.dataset.path, DatasetFormat::PerSample, PadPolicy::Zero).unwrap();
    let folds: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(cfg.out.join("folds.json")).unwrap()).unwrap();
    let test_idx = folds["folds"][0]["test"][0].as_u64().unwrap() as usize;
    let id = loaded.samples[test_idx].id.clone();
    let exp = explain_from_run(&cfg.out, 0, &id).unwrap();
    assert_eq!(exp.sample_id, id);
    assert!(exp.predicted.is_some());
    assert!(!exp.mhaps.is_empty());
    for m in &exp.mhaps {
        assert!(m.recomputed >= m.threshold && m.recomputed > 0.0);
        assert!((m.recomputed - m.peak).abs() <= 1e-9 * m.peak.abs().max(1.0));
        assert!(m.window.end < 100 && m.window.start <= m.window.end);
    }
    assert!(exp.mhaps.windows(2).all(|w| w[0].window.start <= w[1].window.start));
    assert!(exp.dot.starts_with("digraph"));
    assert!(exp.to_text().contains("path layer 0"));
    assert!(explain_from_run(&cfg.out, 0, "no-such-sample").is_err());
}

#[test]
fn both_loader_formats_agree() {
    let raw = synthetic::order_motif_dataset(6, 100, 0.1, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_per_sample(&raw, dir.path()).unwrap();
    let per_sample = load_dataset(dir.path(), DatasetFormat::PerSample, PadPolicy::Zero).unwrap();

    let single = dir.path().join("single");
    std::fs::create_dir(&single).unwrap();
    std::fs::write(single.join("meta.json"), r#"{"d": 2, "class_names": ["ab", "ba"]}"#).unwrap();
    let mut csv = String::new();
    for s in &raw.samples {
        let vals: Vec<String> = s.values.iter().map(f64::to_string).collect();
        csv.push_str(&format!("{},{}\n", raw.class_names[s.label], vals.join(",")));
    }
    std::fs::write(single.join("data.csv"), csv).unwrap();
    let single_file = load_dataset(&single, DatasetFormat::SingleFile, PadPolicy::Zero).unwrap();

    assert_eq!(per_sample.len(), 6);
    assert_eq!(single_file.class_names, per_sample.class_names);
    let mut a: Vec<_> = per_sample.samples.iter().map(|s| (s.values.clone(), s.label)).collect();
    let mut b: Vec<_> = single_file.samples.iter().map(|s| (s.values.clone(), s.label)).collect();
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    assert_eq!(a, b);

    std::fs::write(single.join("data.csv"), "ab,1,2,3\n").unwrap();
    let err = load_dataset(&single, DatasetFormat::SingleFile, PadPolicy::Zero).unwrap_err();
    assert!(matches!(err, Error::Format { line: 1, .. }), "{err}");
}

#[test]
fn invalid_configs_are_rejected_before_any_work() {
    let data = small_data();
    let mut cfg = small_config();
    cfg.cluster_counts = vec![4, 4];
    assert!(matches!(run_pipeline_with(&cfg, &data, None), Err(Error::Config(_))));
    let mut cfg = small_config();
    cfg.quantile = 1.0;
    assert!(matches!(run_pipeline_with(&cfg, &data, None), Err(Error::Config(_))));
    let mut cfg = small_config();
    cfg.folds.k = 2;
    assert!(run_pipeline_with(&cfg, &data, None).is_err());
    assert!(PipelineConfig::from_toml("nonsense_key = 3").is_err());
}

#[test]
fn embedding_dimension_sweep_gives_one_row_per_value() {
    let data = small_data();
    let rows = sweep(&small_config(), &data, &SweepParam::EmbeddingDim(vec![32, 64, 100, 128])).unwrap();
    let table = sweep_table("embedding_dim", &rows);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 5, "{table}");
    assert_eq!(lines[0], "embedding_dim\taccuracy");
    for (line, d) in lines[1..].iter().zip(["32", "64", "100", "128"]) {
        assert!(line.starts_with(&format!("{d}\t")), "{line}");
    }
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.accuracy)));
}

#[test]
fn explanation_lists_node_paths_in_order() {
    let item = |start: usize, node: usize| ExplainedMhap {
        layer: 0,
        channel: 0,
        mask: "1".into(),
        active_channels: vec![0],
        neuron: start,
        window: Window { start, end: start + 4 },
        node,
        label: format!("L0C{node}"),
        peak: 1.0,
        threshold: 0.5,
        recomputed: 1.0,
    };
    let mut exp = Explanation {
        sample_id: "s".into(),
        class: "ab".into(),
        predicted: None,
        mhaps: vec![item(3, 29), item(20, 25), item(41, 10)],
        paths: vec![vec![29, 25, 10]],
        dot: String::new(),
    };
    let text = exp.to_text();
    assert!(text.contains("path layer 0: 29 -> 25 -> 10"), "{text}");
    let p29 = text.find("(L0C29)").unwrap();
    let p25 = text.find("(L0C25)").unwrap();
    let p10 = text.find("(L0C10)").unwrap();
    assert!(p29 < p25 && p25 < p10);
    exp.mhaps.clear();
    assert!(exp.to_text().contains("no highly activated periods"));
}
