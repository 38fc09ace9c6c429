//! End-to-end runs: configuration, per-fold stage execution with persisted
//! artifacts, cross-validated metrics, explanations and parameter sweeps.
//!
//! Stage seeds derive from the root seed as `seed::derive(root, stage, fold)`
//! with stage labels `cnn`, `kshape`, `embedding` and `gbdt`; the fold plan
//! uses `seed::derive(root, "folds", 0)` unless `folds.seed` is set.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::artifacts::ArtifactStore;
use crate::dataset::{load_dataset, make_folds, znormalize, DatasetFormat, Fold, FoldPlan, InputSetPolicy, MtsDataset, MtsSample, PadPolicy};
use crate::embedding::{embed_graph, EmbeddingConfig, NodeEmbeddings};
use crate::error::{Error, Result};
use crate::evograph::{build_layer_graph, graph_stats, layer_sequences, merge_graphs, read_adjacency, to_dot, write_adjacency, GraphStats, MergedGraph};
use crate::gbdt::{self, GbdtConfig, GbdtModel};
use crate::kshape::{kshape_cluster, ClusterModel, KShapeConfig};
use crate::mhap::{compute_thresholds_with, extract_mhaps, extract_sample_mhaps, read_dump, write_dump, ActivationThresholds, MhapSet, ThresholdPool};
use crate::nn::{train_cnn, CnnConfig, TrainedCnn, Window};
use crate::representation::{represent_dataset, represent_sample, FeatureMatrix, Placed};
use crate::seed;
use crate::util::{mean_std, sha256_hex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: PathBuf,
    pub format: DatasetFormat,
    pub pad: PadPolicy,
    /// Per-sample, per-channel z-normalization before anything else.
    pub znormalize: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            path: PathBuf::new(),
            format: DatasetFormat::default(),
            pad: PadPolicy::default(),
            znormalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoldConfig {
    pub k: usize,
    pub seed: Option<u64>,
    /// Run only the first `limit` folds.
    pub limit: Option<usize>,
}

impl Default for FoldConfig {
    fn default() -> Self {
        Self { k: 10, seed: None, limit: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    pub cnn: CnnConfig,
    pub quantile: f64,
    pub nms: bool,
    pub input_set: InputSetPolicy,
    pub threshold_pool: ThresholdPool,
    /// One cluster count per convolutional layer.
    pub cluster_counts: Vec<usize>,
    pub kshape: KShapeConfig,
    pub embedding: EmbeddingConfig,
    pub segment_length: usize,
    pub gbdt: GbdtConfig,
    pub folds: FoldConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("run"),
            dataset: DatasetConfig::default(),
            cnn: CnnConfig::default(),
            quantile: 0.95,
            nms: true,
            input_set: InputSetPolicy::default(),
            threshold_pool: ThresholdPool::default(),
            cluster_counts: vec![38, 28, 18],
            kshape: KShapeConfig::default(),
            embedding: EmbeddingConfig::default(),
            segment_length: 10,
            gbdt: GbdtConfig::default(),
            folds: FoldConfig::default(),
        }
    }
}

/// Parses a command-line override value as a TOML value, falling back to a
/// plain string.
fn parse_override(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `key` (dotted path) in `root` to the parsed `raw` value.
pub fn apply_override(root: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: `{p}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_override(raw));
    Ok(())
}

impl PipelineConfig {
    /// Parses TOML text, applies dotted-key overrides and validates.
    pub fn from_toml_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for (k, v) in overrides {
            apply_override(&mut table, k, v)?;
        }
        let cfg: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let layers = self.cnn.conv_layers.len();
        if layers < 2 {
            return Err(Error::Config("cnn.conv_layers needs at least 2 layers".into()));
        }
        if self.cluster_counts.len() != layers {
            return Err(Error::Config(format!(
                "cluster_counts has {} entries for a {layers}-layer network",
                self.cluster_counts.len()
            )));
        }
        if self.cluster_counts.contains(&0) {
            return Err(Error::Config("cluster counts must be at least 1".into()));
        }
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return Err(Error::Config("quantile must lie in (0, 1)".into()));
        }
        if self.segment_length == 0 {
            return Err(Error::Config("segment_length must be at least 1".into()));
        }
        if self.folds.k < 3 {
            return Err(Error::Config("folds.k must be at least 3".into()));
        }
        self.embedding.validate()?;
        self.gbdt.validate()?;
        Ok(())
    }

    pub fn fold_seed(&self) -> u64 {
        self.folds.seed.unwrap_or_else(|| seed::derive(self.seed, "folds", 0))
    }

    /// Copy with every stage seed derived for `fold`.
    pub fn for_fold(&self, fold: usize) -> Self {
        let mut c = self.clone();
        let f = fold as u64;
        c.cnn.seed = seed::derive(self.seed, "cnn", f);
        c.kshape.seed = seed::derive(self.seed, "kshape", f);
        c.embedding.seed = seed::derive(self.seed, "embedding", f);
        c.gbdt.seed = seed::derive(self.seed, "gbdt", f);
        c
    }
}

/// Loads the configured dataset, z-normalized if requested.
pub fn load_prepared(cfg: &DatasetConfig) -> Result<MtsDataset> {
    let ds = load_dataset(&cfg.path, cfg.format, cfg.pad)?;
    Ok(if cfg.znormalize { znormalize(&ds) } else { ds })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Train,
    Extract,
    Cluster,
    Graph,
    Embed,
    Represent,
    Fit,
    Evaluate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Train => "train",
            Stage::Extract => "extract",
            Stage::Cluster => "cluster",
            Stage::Graph => "graph",
            Stage::Embed => "embed",
            Stage::Represent => "represent",
            Stage::Fit => "fit",
            Stage::Evaluate => "evaluate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub accuracy: f64,
    pub cnn_val_accuracy: f64,
    pub cnn_test_accuracy: f64,
    pub train_mhaps_per_layer: Vec<usize>,
    pub graph: GraphStats,
    /// Seconds per stage; excluded from determinism comparisons.
    pub timings: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default)]
pub struct FoldState {
    pub split: Option<Fold>,
    pub model: Option<TrainedCnn>,
    pub thresholds: Option<ActivationThresholds>,
    pub train_mhaps: Option<MhapSet>,
    pub test_mhaps: Option<MhapSet>,
    pub clusters: Option<ClusterModel>,
    pub graph: Option<MergedGraph>,
    pub embeddings: Option<NodeEmbeddings>,
    pub train_features: Option<FeatureMatrix>,
    pub test_features: Option<FeatureMatrix>,
    pub classifier: Option<GbdtModel>,
    pub metrics: Option<FoldMetrics>,
}

/// Runs the stages of one fold in memory, optionally persisting each one.
///
/// With `resume` set, a missing upstream result is loaded from the store when
/// its chain verifies; otherwise it is recomputed.
pub struct FoldRunner<'a> {
    pub cfg: PipelineConfig,
    pub fold: usize,
    data: &'a MtsDataset,
    split: Fold,
    pub train: MtsDataset,
    pub val: MtsDataset,
    pub test: MtsDataset,
    pub store: Option<ArtifactStore>,
    pub resume: bool,
    pub state: FoldState,
    pub timings: BTreeMap<String, f64>,
}

fn split_json(fold: usize, split: &Fold, data: &MtsDataset) -> Result<Vec<u8>> {
    let ids = |idx: &[usize]| idx.iter().map(|&i| data.samples[i].id.clone()).collect::<Vec<_>>();
    let mut bytes = Vec::new();
    for s in &data.samples {
        s.values.iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
        bytes.extend_from_slice(&(s.label as u64).to_le_bytes());
    }
    let doc = serde_json::json!({
        "fold": fold,
        "dataset_sha256": sha256_hex(&bytes),
        "train": ids(&split.train),
        "val": ids(&split.val),
        "test": ids(&split.test),
    });
    Ok(serde_json::to_vec_pretty(&doc)?)
}

impl<'a> FoldRunner<'a> {
    pub fn new(cfg: &PipelineConfig, data: &'a MtsDataset, plan: &FoldPlan, fold: usize, store: Option<ArtifactStore>) -> Result<Self> {
        let split = plan
            .folds
            .get(fold)
            .ok_or(Error::OutOfRange {
                what: "fold",
                index: fold,
                len: plan.folds.len(),
            })?
            .clone();
        let mut runner = Self {
            cfg: cfg.for_fold(fold),
            fold,
            data,
            train: data.subset(&split.train),
            val: data.subset(&split.val),
            test: data.subset(&split.test),
            split: split.clone(),
            store,
            resume: false,
            state: FoldState::default(),
            timings: BTreeMap::new(),
        };
        let bytes = split_json(fold, &split, data)?;
        if let Some(store) = &mut runner.store {
            store.write("split", "split.json", &bytes, &[])?;
        }
        runner.state.split = Some(split);
        Ok(runner)
    }

    fn save(&mut self, stage: &str, file: &str, bytes: &[u8], inputs: &[&str]) -> Result<()> {
        if let Some(store) = &mut self.store {
            store.write(stage, file, bytes, inputs)?;
        }
        Ok(())
    }

    fn stored(&self, stage: &str) -> Option<&ArtifactStore> {
        self.store.as_ref().filter(|s| self.resume && s.has(stage))
    }

    fn time<T>(&mut self, stage: Stage, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let t0 = Instant::now();
        log::info!("fold {}: {}", self.fold, stage.name());
        let out = f(self).map_err(|e| e.in_stage(stage.name()))?;
        *self.timings.entry(stage.name().to_string()).or_insert(0.0) += t0.elapsed().as_secs_f64();
        Ok(out)
    }

    /// Computes `stage` (and whatever it needs), replacing any earlier result
    /// of that stage and everything downstream of it.
    pub fn run(&mut self, stage: Stage) -> Result<()> {
        self.invalidate(stage);
        self.ensure(stage)
    }

    /// Drops in-memory results of `stage` and later stages.
    pub fn invalidate(&mut self, stage: Stage) {
        let s = &mut self.state;
        if stage <= Stage::Train {
            s.model = None;
        }
        if stage <= Stage::Extract {
            s.thresholds = None;
            s.train_mhaps = None;
            s.test_mhaps = None;
        }
        if stage <= Stage::Cluster {
            s.clusters = None;
        }
        if stage <= Stage::Graph {
            s.graph = None;
        }
        if stage <= Stage::Embed {
            s.embeddings = None;
        }
        if stage <= Stage::Represent {
            s.train_features = None;
            s.test_features = None;
        }
        if stage <= Stage::Fit {
            s.classifier = None;
        }
        s.metrics = None;
    }

    pub fn ensure(&mut self, stage: Stage) -> Result<()> {
        self.ensure_model()?;
        if stage >= Stage::Extract {
            self.ensure_mhaps()?;
        }
        if stage >= Stage::Cluster {
            self.ensure_clusters()?;
        }
        if stage >= Stage::Graph {
            self.ensure_graph()?;
        }
        if stage >= Stage::Embed {
            self.ensure_embeddings()?;
        }
        if stage >= Stage::Represent {
            self.ensure_features()?;
        }
        if stage >= Stage::Fit {
            self.ensure_classifier()?;
        }
        if stage >= Stage::Evaluate {
            self.ensure_metrics()?;
        }
        Ok(())
    }

    fn ensure_model(&mut self) -> Result<()> {
        if self.state.model.is_some() {
            return Ok(());
        }
        if let Some(store) = self.stored("checkpoint") {
            self.state.model = Some(TrainedCnn::from_bytes(&store.read("checkpoint")?).map_err(|e| e.in_stage("train"))?);
            return Ok(());
        }
        let model = self.time(Stage::Train, |r| train_cnn(&r.train, &r.val, &r.cfg.cnn))?;
        self.save("checkpoint", "checkpoint.bin", &model.to_bytes()?, &["split"])?;
        self.state.model = Some(model);
        Ok(())
    }

    fn ensure_mhaps(&mut self) -> Result<()> {
        if self.state.train_mhaps.is_some() {
            return Ok(());
        }
        if let Some(store) = self.stored("mhaps-test") {
            let thr: ActivationThresholds = serde_json::from_slice(&store.read("thresholds")?)?;
            let train = read_dump(&store.read_string("mhaps-train")?)?;
            let test = read_dump(&store.read_string("mhaps-test")?)?;
            self.state.thresholds = Some(thr);
            self.state.train_mhaps = Some(train);
            self.state.test_mhaps = Some(test);
            return Ok(());
        }
        let (thr, train, test) = self.time(Stage::Extract, |r| {
            let model = r.state.model.as_ref().expect("model is ensured");
            let c = &r.cfg;
            let thr = compute_thresholds_with(model, &r.train, c.quantile, c.threshold_pool, c.input_set)?;
            let train = extract_mhaps(model, &r.train, &thr, c.input_set, c.nms)?;
            let test = extract_mhaps(model, &r.test, &thr, c.input_set, c.nms)?;
            Ok((thr, train, test))
        })?;
        self.save("thresholds", "thresholds.json", &serde_json::to_vec_pretty(&thr)?, &["checkpoint"])?;
        self.save("mhaps-train", "mhaps_train.tsv", write_dump(&train).as_bytes(), &["checkpoint", "thresholds"])?;
        self.save("mhaps-test", "mhaps_test.tsv", write_dump(&test).as_bytes(), &["checkpoint", "thresholds"])?;
        self.state.thresholds = Some(thr);
        self.state.train_mhaps = Some(train);
        self.state.test_mhaps = Some(test);
        Ok(())
    }

    fn ensure_clusters(&mut self) -> Result<()> {
        if self.state.clusters.is_some() {
            return Ok(());
        }
        if let Some(store) = self.stored("clusters") {
            self.state.clusters = Some(ClusterModel::from_container(&crate::container::Container::from_bytes(&store.read("clusters")?)?)?);
            return Ok(());
        }
        let model = self.time(Stage::Cluster, |r| {
            let mhaps = r.state.train_mhaps.as_ref().expect("mhaps are ensured");
            let layers = mhaps
                .layers
                .iter()
                .zip(&r.cfg.cluster_counts)
                .enumerate()
                .map(|(l, (list, &k))| {
                    let vectors: Vec<Vec<f64>> = list.iter().map(|m| m.values.clone()).collect();
                    if vectors.is_empty() {
                        return Err(Error::Config(format!("layer {l} produced no MHAPs on the training split")));
                    }
                    let mut lc = kshape_cluster(&vectors, k, &r.cfg.kshape)?;
                    // Stored centroids are f32; use the stored values from here on.
                    for c in &mut lc.centroids {
                        c.iter_mut().for_each(|v| *v = *v as f32 as f64);
                    }
                    Ok(lc)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ClusterModel {
                seed: r.cfg.kshape.seed,
                layers,
            })
        })?;
        self.save("clusters", "clusters.bin", &model.to_container().to_bytes()?, &["mhaps-train"])?;
        self.state.clusters = Some(model);
        Ok(())
    }

    fn train_assignments(&self) -> Vec<Vec<usize>> {
        let clusters = self.state.clusters.as_ref().expect("clusters are ensured");
        clusters.layers.iter().map(|l| l.assignments.clone()).collect()
    }

    fn ensure_graph(&mut self) -> Result<()> {
        if self.state.graph.is_some() {
            return Ok(());
        }
        if let Some(store) = self.stored("graph") {
            self.state.graph = Some(read_adjacency(&store.read_string("graph")?)?);
            return Ok(());
        }
        let graph = self.time(Stage::Graph, |r| {
            let mhaps = r.state.train_mhaps.as_ref().expect("mhaps are ensured");
            let clusters = r.state.clusters.as_ref().expect("clusters are ensured");
            let assign = r.train_assignments();
            let graphs = (0..mhaps.layers.len())
                .map(|l| build_layer_graph(l, &layer_sequences(mhaps, l, &assign[l], r.train.len())?, clusters.layers[l].k))
                .collect::<Result<Vec<_>>>()?;
            merge_graphs(&graphs, mhaps, &assign, &r.cfg.cnn.kernels())
        })?;
        self.save("graph", "graph.tsv", write_adjacency(&graph).as_bytes(), &["clusters", "mhaps-train"])?;
        self.state.graph = Some(graph);
        Ok(())
    }

    fn ensure_embeddings(&mut self) -> Result<()> {
        if self.state.embeddings.is_some() {
            return Ok(());
        }
        if let Some(store) = self.stored("embeddings") {
            self.state.embeddings = Some(NodeEmbeddings::from_text(&store.read_string("embeddings")?)?);
            return Ok(());
        }
        let emb = self.time(Stage::Embed, |r| Ok(embed_graph(r.state.graph.as_ref().expect("graph is ensured"), &r.cfg.embedding)?.0))?;
        self.save("embeddings", "embeddings.txt", emb.to_text().as_bytes(), &["graph"])?;
        self.state.embeddings = Some(emb);
        Ok(())
    }

    fn placements(&self, mhaps: &MhapSet, assign: &[Vec<usize>], samples: usize) -> Result<Vec<Vec<Placed>>> {
        let graph = self.state.graph.as_ref().expect("graph is ensured");
        let mut out = vec![Vec::new(); samples];
        for (l, list) in mhaps.layers.iter().enumerate() {
            for (m, &a) in list.iter().zip(&assign[l]) {
                out[m.sample].push(Placed {
                    start: m.window.start,
                    node: graph.node_id(l, a)?,
                });
            }
        }
        Ok(out)
    }

    fn test_assignments(&self) -> Result<Vec<Vec<usize>>> {
        let clusters = self.state.clusters.as_ref().expect("clusters are ensured");
        let mhaps = self.state.test_mhaps.as_ref().expect("mhaps are ensured");
        mhaps
            .layers
            .iter()
            .zip(&clusters.layers)
            .map(|(list, lc)| list.iter().map(|m| Ok(lc.assign(&m.values)?.0)).collect())
            .collect()
    }

    fn ensure_features(&mut self) -> Result<()> {
        if self.state.train_features.is_some() {
            return Ok(());
        }
        if let Some(store) = self.stored("features-test") {
            let train = FeatureMatrix::from_text(&store.read_string("features-train")?)?;
            let test = FeatureMatrix::from_text(&store.read_string("features-test")?)?;
            self.state.train_features = Some(train);
            self.state.test_features = Some(test);
            return Ok(());
        }
        let (train, test) = self.time(Stage::Represent, |r| {
            let emb = r.state.embeddings.as_ref().expect("embeddings are ensured");
            let s = r.cfg.segment_length;
            let t = r.data.len;
            let train_p = r.placements(r.state.train_mhaps.as_ref().expect("ensured"), &r.train_assignments(), r.train.len())?;
            let test_p = r.placements(r.state.test_mhaps.as_ref().expect("ensured"), &r.test_assignments()?, r.test.len())?;
            Ok((
                represent_dataset(&train_p, &r.train.labels(), emb, s, t)?,
                represent_dataset(&test_p, &r.test.labels(), emb, s, t)?,
            ))
        })?;
        let inputs = ["embeddings", "clusters", "mhaps-train", "mhaps-test"];
        self.save("features-train", "features_train.txt", train.to_text().as_bytes(), &inputs)?;
        self.save("features-test", "features_test.txt", test.to_text().as_bytes(), &inputs)?;
        self.state.train_features = Some(train);
        self.state.test_features = Some(test);
        Ok(())
    }

    fn ensure_classifier(&mut self) -> Result<()> {
        if self.state.classifier.is_some() {
            return Ok(());
        }
        if let Some(store) = self.stored("classifier") {
            self.state.classifier = Some(GbdtModel::from_text(&store.read_string("classifier")?)?);
            return Ok(());
        }
        let model = self.time(Stage::Fit, |r| {
            let f = r.state.train_features.as_ref().expect("features are ensured");
            gbdt::fit(&f.data, f.cols, &f.labels, r.data.classes, &r.cfg.gbdt)
        })?;
        self.save("classifier", "classifier.txt", model.to_text().as_bytes(), &["features-train"])?;
        self.state.classifier = Some(model);
        Ok(())
    }

    fn ensure_metrics(&mut self) -> Result<()> {
        if self.state.metrics.is_some() {
            return Ok(());
        }
        let (accuracy, cnn_test_accuracy) = self.time(Stage::Evaluate, |r| {
            let f = r.state.test_features.as_ref().expect("features are ensured");
            let model = r.state.classifier.as_ref().expect("classifier is ensured");
            let acc = gbdt::evaluate(model, &f.data, f.cols, &f.labels)?;
            let cnn = r.state.model.as_ref().expect("model is ensured");
            Ok((acc, cnn.predict(&r.test)?.1))
        })?;
        let model = self.state.model.as_ref().expect("model is ensured");
        let metrics = FoldMetrics {
            fold: self.fold,
            accuracy,
            cnn_val_accuracy: model.history.best_val_accuracy,
            cnn_test_accuracy,
            train_mhaps_per_layer: self.state.train_mhaps.as_ref().expect("ensured").layers.iter().map(Vec::len).collect(),
            graph: graph_stats(self.state.graph.as_ref().expect("ensured")),
            timings: self.timings.clone(),
        };
        let mut doc = metrics.clone();
        doc.timings.clear();
        self.save("evaluation", "evaluation.json", &serde_json::to_vec_pretty(&doc)?, &["classifier", "features-test"])?;
        self.state.metrics = Some(metrics);
        Ok(())
    }

    /// Changes the segment length and drops features and everything after.
    pub fn set_segment_length(&mut self, s: usize) {
        self.cfg.segment_length = s;
        self.invalidate(Stage::Represent);
    }

    pub fn metrics(&mut self) -> Result<FoldMetrics> {
        self.ensure(Stage::Evaluate)?;
        Ok(self.state.metrics.clone().expect("metrics are ensured"))
    }

    pub fn split(&self) -> &Fold {
        &self.split
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub folds: Vec<FoldMetrics>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub total_timings: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn from_folds(folds: Vec<FoldMetrics>) -> Self {
        let accs: Vec<f64> = folds.iter().map(|f| f.accuracy).collect();
        let (mean, std) = mean_std(&accs);
        let mut total = BTreeMap::new();
        for f in &folds {
            for (k, v) in &f.timings {
                *total.entry(k.clone()).or_insert(0.0) += v;
            }
        }
        Self {
            folds,
            mean_accuracy: mean,
            std_accuracy: std,
            total_timings: total,
        }
    }

    /// Copy with all timings removed, for run-to-run comparison.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.total_timings.clear();
        r.folds.iter_mut().for_each(|f| f.timings.clear());
        r
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "accuracy: {:.4} +/- {:.4} over {} folds", self.mean_accuracy, self.std_accuracy, self.folds.len());
        for f in &self.folds {
            let _ = writeln!(
                out,
                "fold {:>2}: accuracy {:.4}  cnn test {:.4}  nodes {}  edges {}  mhaps {:?}",
                f.fold, f.accuracy, f.cnn_test_accuracy, f.graph.nodes, f.graph.edges, f.train_mhaps_per_layer
            );
        }
        let total: f64 = self.total_timings.values().sum();
        if total > 0.0 {
            out.push_str("time per stage:\n");
            for (k, v) in &self.total_timings {
                let _ = writeln!(out, "  {k:<10} {v:>9.2}s {:>5.1}%", 100.0 * v / total);
            }
        }
        out
    }
}

pub fn fold_dir(out: &Path, fold: usize) -> PathBuf {
    out.join(format!("fold_{fold:02}"))
}

/// Cross-validated run over an already loaded dataset. With `out` set, each
/// fold persists its artifacts and the run writes `config.toml`,
/// `folds.json`, `metrics.json` and `metrics.txt`.
pub fn run_pipeline_with(cfg: &PipelineConfig, data: &MtsDataset, out: Option<&Path>) -> Result<MetricsReport> {
    cfg.validate()?;
    let plan = make_folds(data, cfg.folds.k, cfg.fold_seed()).map_err(|e| e.in_stage("dataset"))?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
        write_file(&dir.join("folds.json"), &serde_json::to_vec_pretty(&plan)?)?;
    }
    let limit = cfg.folds.limit.unwrap_or(plan.k).min(plan.k);
    let mut folds = Vec::with_capacity(limit);
    for f in 0..limit {
        let store = out.map(|d| ArtifactStore::open(&fold_dir(d, f))).transpose()?;
        let mut runner = FoldRunner::new(cfg, data, &plan, f, store)?;
        folds.push(runner.metrics()?);
    }
    let report = MetricsReport::from_folds(folds);
    if let Some(dir) = out {
        write_file(&dir.join("metrics.json"), &serde_json::to_vec_pretty(&report)?)?;
        write_file(&dir.join("metrics.txt"), report.to_text().as_bytes())?;
    }
    Ok(report)
}

/// Loads `cfg.dataset` and runs [`run_pipeline_with`] into `cfg.out`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<MetricsReport> {
    let data = load_prepared(&cfg.dataset).map_err(|e| e.in_stage("dataset"))?;
    run_pipeline_with(cfg, &data, Some(&cfg.out))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExplainedMhap {
    pub layer: usize,
    pub channel: usize,
    pub mask: String,
    pub active_channels: Vec<usize>,
    pub neuron: usize,
    pub window: Window,
    pub node: usize,
    pub label: String,
    pub peak: f64,
    pub threshold: f64,
    /// Activation recomputed from the masked input.
    pub recomputed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Explanation {
    pub sample_id: String,
    pub class: String,
    pub predicted: Option<String>,
    /// In order of (window start, layer, channel, mask).
    pub mhaps: Vec<ExplainedMhap>,
    /// Per layer, the node sequence used for that layer's graph edges.
    pub paths: Vec<Vec<usize>>,
    pub dot: String,
}

impl Explanation {
    pub fn to_text(&self) -> String {
        let mut out = format!("sample {} (class {})\n", self.sample_id, self.class);
        if let Some(p) = &self.predicted {
            let _ = writeln!(out, "predicted: {p}");
        }
        if self.mhaps.is_empty() {
            out.push_str("no highly activated periods\n");
            return out;
        }
        out.push_str("highly activated periods in temporal order:\n");
        for m in &self.mhaps {
            let _ = writeln!(
                out,
                "  t=[{:>4},{:>4}]  layer {}  filter {:>3}  channels {:?}  node {:>4} ({})  peak {:.4} >= {:.4}",
                m.window.start, m.window.end, m.layer, m.channel, m.active_channels, m.node, m.label, m.peak, m.threshold
            );
        }
        for (l, p) in self.paths.iter().enumerate() {
            let path: Vec<String> = p.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "path layer {l}: {}", if path.is_empty() { "-".into() } else { path.join(" -> ") });
        }
        out
    }
}

/// Everything a sample explanation needs from one fold.
pub struct ExplainContext<'a> {
    pub model: &'a TrainedCnn,
    pub thresholds: &'a ActivationThresholds,
    pub clusters: &'a ClusterModel,
    pub graph: &'a MergedGraph,
    pub classifier: Option<(&'a NodeEmbeddings, &'a GbdtModel, usize)>,
    pub class_names: &'a [String],
    pub input_set: InputSetPolicy,
    pub nms: bool,
}

/// Lists the MHAPs of `sample`, their graph nodes and per-layer node paths,
/// and renders the sample's subgraph with its paths highlighted.
pub fn explain_sample(ctx: &ExplainContext<'_>, sample: &MtsSample) -> Result<Explanation> {
    let layers = extract_sample_mhaps(ctx.model, 0, sample, ctx.thresholds, ctx.input_set, ctx.nms)?;
    let mut items = Vec::new();
    let mut paths = Vec::with_capacity(layers.len());
    let mut placed = Vec::new();
    for (l, list) in layers.iter().enumerate() {
        let lc = ctx.clusters.layers.get(l).ok_or_else(|| Error::Provenance("cluster model has fewer layers than the network".into()))?;
        let mut path = Vec::with_capacity(list.len());
        for m in list {
            let node = ctx.graph.node_id(l, lc.assign(&m.values)?.0)?;
            path.push(node);
            placed.push(Placed {
                start: m.window.start,
                node,
            });
            let fw = ctx.model.forward_with_activations(&sample.masked(&m.mask))?;
            items.push(ExplainedMhap {
                layer: l,
                channel: m.channel,
                mask: m.mask.to_string(),
                active_channels: m.mask.active_indices(),
                neuron: m.neuron,
                window: m.window,
                node,
                label: ctx.graph.label(node)?,
                peak: m.peak,
                threshold: ctx.thresholds.get(l, m.channel),
                recomputed: fw.activations[l].get(m.channel, m.neuron),
            });
        }
        paths.push(path);
    }
    items.sort_by(|a, b| (a.window.start, a.layer, a.channel, &a.mask).cmp(&(b.window.start, b.layer, b.channel, &b.mask)));
    let predicted = match ctx.classifier {
        Some((emb, model, segment)) => {
            let row = represent_sample(&placed, emb, segment, sample.len)?;
            let (_, labels) = model.predict(&row, row.len())?;
            Some(ctx.class_names.get(labels[0]).cloned().unwrap_or_else(|| labels[0].to_string()))
        }
        None => None,
    };
    let mut nodes: Vec<usize> = paths.iter().flatten().copied().collect();
    nodes.sort_unstable();
    nodes.dedup();
    let edges: Vec<(usize, usize)> = paths.iter().flat_map(|p| p.windows(2).map(|w| (w[0], w[1]))).collect();
    Ok(Explanation {
        sample_id: sample.id.clone(),
        class: ctx.class_names.get(sample.label).cloned().unwrap_or_else(|| sample.label.to_string()),
        predicted,
        mhaps: items,
        paths,
        dot: to_dot(ctx.graph, Some(&nodes), &nodes, &edges),
    })
}

/// Explains `sample_id` with the verified artifacts of `fold` under `run_dir`.
/// The run's `config.toml` locates the dataset.
pub fn explain_from_run(run_dir: &Path, fold: usize, sample_id: &str) -> Result<Explanation> {
    let cfg_path = run_dir.join("config.toml");
    let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let cfg = PipelineConfig::from_toml(&text)?;
    let data = load_prepared(&cfg.dataset)?;
    let sample = data
        .samples
        .iter()
        .find(|s| s.id == sample_id)
        .ok_or_else(|| Error::UnknownLabel(format!("sample id {sample_id}")))?;
    let store = ArtifactStore::open(&fold_dir(run_dir, fold))?;
    let model = TrainedCnn::from_bytes(&store.read("checkpoint")?)?;
    let thresholds: ActivationThresholds = serde_json::from_slice(&store.read("thresholds")?)?;
    let clusters = ClusterModel::from_container(&crate::container::Container::from_bytes(&store.read("clusters")?)?)?;
    let graph = read_adjacency(&store.read_string("graph")?)?;
    let emb = if store.has("embeddings") { Some(NodeEmbeddings::from_text(&store.read_string("embeddings")?)?) } else { None };
    let classifier = if store.has("classifier") { Some(GbdtModel::from_text(&store.read_string("classifier")?)?) } else { None };
    let ctx = ExplainContext {
        model: &model,
        thresholds: &thresholds,
        clusters: &clusters,
        graph: &graph,
        classifier: emb.as_ref().zip(classifier.as_ref()).map(|(e, c)| (e, c, cfg.segment_length)),
        class_names: &data.class_names,
        input_set: cfg.input_set,
        nms: cfg.nms,
    };
    explain_sample(&ctx, sample)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    EmbeddingDim(Vec<usize>),
    SegmentLength(Vec<usize>),
    ClusterCounts(Vec<Vec<usize>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub accuracy: f64,
}

/// One evaluation per grid point on fold 0. Stages upstream of the swept
/// parameter are computed once and shared.
pub fn sweep(cfg: &PipelineConfig, data: &MtsDataset, param: &SweepParam) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let empty = match param {
        SweepParam::EmbeddingDim(g) => g.is_empty(),
        SweepParam::SegmentLength(g) => g.is_empty(),
        SweepParam::ClusterCounts(g) => g.is_empty(),
    };
    if empty {
        return Ok(Vec::new());
    }
    let plan = make_folds(data, cfg.folds.k, cfg.fold_seed())?;
    let mut runner = FoldRunner::new(cfg, data, &plan, 0, None)?;
    let mut rows = Vec::new();
    match param {
        SweepParam::EmbeddingDim(grid) => {
            for &d in grid {
                runner.invalidate(Stage::Embed);
                runner.cfg.embedding.dim = d;
                runner.cfg.embedding.validate()?;
                rows.push(SweepRow {
                    value: d.to_string(),
                    accuracy: runner.metrics()?.accuracy,
                });
            }
        }
        SweepParam::SegmentLength(grid) => {
            for &s in grid {
                if s == 0 {
                    return Err(Error::Config("segment_length must be at least 1".into()));
                }
                runner.set_segment_length(s);
                rows.push(SweepRow {
                    value: s.to_string(),
                    accuracy: runner.metrics()?.accuracy,
                });
            }
        }
        SweepParam::ClusterCounts(grid) => {
            for counts in grid {
                runner.invalidate(Stage::Cluster);
                runner.cfg.cluster_counts = counts.clone();
                runner.cfg.validate()?;
                let v: Vec<String> = counts.iter().map(usize::to_string).collect();
                rows.push(SweepRow {
                    value: v.join(","),
                    accuracy: runner.metrics()?.accuracy,
                });
            }
        }
    }
    Ok(rows)
}

pub fn sweep_table(name: &str, rows: &[SweepRow]) -> String {
    let mut out = format!("{name}\taccuracy\n");
    for r in rows {
        let _ = writeln!(out, "{}\t{:.4}", r.value, r.accuracy);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip_and_overrides() {
        let cfg = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let o = vec![
            ("embedding.dim".to_string(), "32".to_string()),
            ("segment_length".to_string(), "5".to_string()),
            ("dataset.path".to_string(), "data/x".to_string()),
            ("cluster_counts".to_string(), "[4, 4, 4]".to_string()),
            ("nms".to_string(), "false".to_string()),
        ];
        let c = PipelineConfig::from_toml_with_overrides("", &o).unwrap();
        assert_eq!(c.embedding.dim, 32);
        assert_eq!(c.segment_length, 5);
        assert_eq!(c.dataset.path, PathBuf::from("data/x"));
        assert_eq!(c.cluster_counts, vec![4, 4, 4]);
        assert!(!c.nms);
    }

    #[test]
    fn layer_count_mismatch_is_rejected() {
        let err = PipelineConfig::from_toml("cluster_counts = [5, 5]").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        assert!(PipelineConfig::from_toml("bogus = 1").is_err());
        assert!(PipelineConfig::from_toml("quantile = 1.0").is_err());
    }

    #[test]
    fn stage_seeds_differ_per_fold() {
        let c = PipelineConfig::default();
        assert_ne!(c.for_fold(0).cnn.seed, c.for_fold(1).cnn.seed);
        assert_ne!(c.for_fold(0).cnn.seed, c.for_fold(0).gbdt.seed);
        assert_eq!(c.for_fold(3), c.for_fold(3));
    }

    #[test]
    fn empty_sweep_grid() {
        let data = crate::synthetic::bump_sign_dataset(30, 20, 1).unwrap();
        assert!(sweep(&PipelineConfig::default(), &data, &SweepParam::EmbeddingDim(vec![])).unwrap().is_empty());
    }
}
