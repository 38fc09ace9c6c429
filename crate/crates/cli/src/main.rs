use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mts2graph::artifacts::ArtifactStore;
use mts2graph::dataset::make_folds;
use mts2graph::evograph::{graph_stats, read_adjacency, to_dot};
use mts2graph::pipeline::{
    explain_from_run, fold_dir, load_prepared, run_pipeline, sweep, sweep_table, FoldRunner, PipelineConfig, Stage, SweepParam,
};

/// Multivariate time-series classification through CNN activation evolution graphs.
///
/// Any config field can be set with a flag of its dotted name, for example
/// `--embedding.dim 64` or `--cnn.epochs=50`.
#[derive(Parser, Debug)]
#[command(name = "mts2graph", version)]
struct Cli {
    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML config file. Stage commands fall back to `<out>/config.toml`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset path (directory, or csv file for the single-file format).
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct StageArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 0)]
    fold: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SweepKind {
    EmbeddingDim,
    SegmentLength,
    ClusterCounts,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Cross-validated run of every stage; --seed, --out and --dataset are required.
    Pipeline(Common),
    /// Train the CNN of one fold.
    Train(StageArgs),
    /// Compute thresholds and extract highly activated periods.
    Extract(StageArgs),
    /// Cluster the periods of each layer.
    Cluster(StageArgs),
    /// Build the merged evolution graph.
    Graph(StageArgs),
    /// Embed graph nodes.
    Embed(StageArgs),
    /// Build train and test feature matrices.
    Represent(StageArgs),
    /// Fit the boosted-tree classifier.
    Fit(StageArgs),
    /// Score the classifier on the fold's test split.
    Evaluate(StageArgs),
    /// Report the highly activated periods and graph path of one sample.
    Explain {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long)]
        sample: String,
        /// Also write the highlighted subgraph as DOT to this file.
        #[arg(long)]
        dot: Option<PathBuf>,
    },
    /// Accuracy on fold 0 for each value of one parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        param: SweepKind,
        /// Comma-separated values; for cluster counts separate settings with `;`.
        #[arg(long, allow_hyphen_values = true)]
        grid: String,
    },
    /// Write a fold's merged graph as Graphviz DOT.
    ExportDot {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// Destination file; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

const CLAP_FLAGS: &[&str] = &["log", "config", "out", "seed", "dataset", "fold", "sample", "dot", "param", "grid", "output", "help", "version"];

type Overrides = Vec<(String, String)>;

/// Pulls `--dotted.name value` / `--name=value` pairs that are not clap flags
/// out of the argument list.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides)> {
    let mut keep = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter().peekable();
    while let Some(a) = it.next() {
        let Some(body) = a.strip_prefix("--") else {
            keep.push(a);
            continue;
        };
        let (name, inline) = match body.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        if name.is_empty() || CLAP_FLAGS.contains(&name.as_str()) {
            keep.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().with_context(|| format!("flag --{name} needs a value"))?,
        };
        overrides.push((name.replace('-', "_"), value));
    }
    Ok((keep, overrides))
}

fn load_config(common: &Common, overrides: &[(String, String)]) -> Result<PipelineConfig> {
    let text = match (&common.config, &common.out) {
        (Some(p), _) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        (None, Some(out)) if out.join("config.toml").exists() => std::fs::read_to_string(out.join("config.toml"))?,
        _ => String::new(),
    };
    let mut all: Vec<(String, String)> = overrides.to_vec();
    if let Some(s) = common.seed {
        all.push(("seed".into(), s.to_string()));
    }
    if let Some(o) = &common.out {
        all.push(("out".into(), toml_string(o)));
    }
    if let Some(d) = &common.dataset {
        all.push(("dataset.path".into(), toml_string(d)));
    }
    Ok(PipelineConfig::from_toml_with_overrides(&text, &all)?)
}

fn toml_string(p: &Path) -> String {
    toml::Value::String(p.display().to_string()).to_string()
}

fn run_stage(args: &StageArgs, stage: Stage, overrides: &[(String, String)]) -> Result<()> {
    let cfg = load_config(&args.common, overrides)?;
    if cfg.dataset.path.as_os_str().is_empty() {
        bail!("no dataset configured; pass --dataset or a config with dataset.path");
    }
    let data = load_prepared(&cfg.dataset)?;
    let plan = make_folds(&data, cfg.folds.k, cfg.fold_seed())?;
    std::fs::create_dir_all(&cfg.out)?;
    std::fs::write(cfg.out.join("config.toml"), cfg.to_toml())?;
    std::fs::write(cfg.out.join("folds.json"), serde_json_pretty(&plan)?)?;
    let store = ArtifactStore::open(&fold_dir(&cfg.out, args.fold))?;
    let mut runner = FoldRunner::new(&cfg, &data, &plan, args.fold, Some(store))?;
    runner.resume = true;
    runner.run(stage)?;
    let s = &runner.state;
    match stage {
        Stage::Train => {
            let m = s.model.as_ref().expect("trained");
            println!("fold {}: best validation accuracy {:.4} at epoch {}", args.fold, m.history.best_val_accuracy, m.history.best_epoch);
        }
        Stage::Extract => {
            let counts: Vec<usize> = s.train_mhaps.as_ref().expect("extracted").layers.iter().map(Vec::len).collect();
            println!("fold {}: training MHAPs per layer {counts:?}", args.fold);
        }
        Stage::Cluster => {
            for (l, lc) in s.clusters.as_ref().expect("clustered").layers.iter().enumerate() {
                println!("layer {l}: k {} inertia {:.4} after {} iterations", lc.k, lc.inertia, lc.iterations);
            }
        }
        Stage::Graph => {
            let st = graph_stats(s.graph.as_ref().expect("built"));
            println!("nodes {} edges {} total weight {}", st.nodes, st.edges, st.total_weight);
        }
        Stage::Embed => {
            let e = s.embeddings.as_ref().expect("embedded");
            println!("{} node vectors of dimension {}", e.vectors.len(), e.dim);
        }
        Stage::Represent => {
            let f = s.train_features.as_ref().expect("represented");
            println!("train features {} x {}", f.rows, f.cols);
        }
        Stage::Fit => {
            let m = s.classifier.as_ref().expect("fitted");
            println!("training loss {:.6}", m.loss_history.last().copied().unwrap_or_default());
        }
        Stage::Evaluate => {
            let m = s.metrics.as_ref().expect("evaluated");
            println!("fold {}: accuracy {:.4}", args.fold, m.accuracy);
        }
    }
    Ok(())
}

fn serde_json_pretty<T: serde::Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)?)
}

fn parse_grid(kind: SweepKind, grid: &str) -> Result<SweepParam> {
    let nums = |s: &str| -> Result<Vec<usize>> {
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<usize>().with_context(|| format!("bad grid value {t:?}")))
            .collect()
    };
    Ok(match kind {
        SweepKind::EmbeddingDim => SweepParam::EmbeddingDim(nums(grid)?),
        SweepKind::SegmentLength => SweepParam::SegmentLength(nums(grid)?),
        SweepKind::ClusterCounts => SweepParam::ClusterCounts(
            grid.split(';').map(str::trim).filter(|t| !t.is_empty()).map(nums).collect::<Result<_>>()?,
        ),
    })
}

fn main() -> Result<()> {
    let (args, overrides) = split_overrides(std::env::args().collect())?;
    let cli = Cli::parse_from(args);
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp(None).init();

    match &cli.command {
        Command::Pipeline(common) => {
            if common.seed.is_none() || common.out.is_none() || common.dataset.is_none() {
                bail!("pipeline requires --seed, --out and --dataset");
            }
            let cfg = load_config(common, &overrides)?;
            let report = run_pipeline(&cfg)?;
            print!("{}", report.to_text());
        }
        Command::Train(a) => run_stage(a, Stage::Train, &overrides)?,
        Command::Extract(a) => run_stage(a, Stage::Extract, &overrides)?,
        Command::Cluster(a) => run_stage(a, Stage::Cluster, &overrides)?,
        Command::Graph(a) => run_stage(a, Stage::Graph, &overrides)?,
        Command::Embed(a) => run_stage(a, Stage::Embed, &overrides)?,
        Command::Represent(a) => run_stage(a, Stage::Represent, &overrides)?,
        Command::Fit(a) => run_stage(a, Stage::Fit, &overrides)?,
        Command::Evaluate(a) => run_stage(a, Stage::Evaluate, &overrides)?,
        Command::Explain { out, fold, sample, dot } => {
            let e = explain_from_run(out, *fold, sample)?;
            print!("{}", e.to_text());
            if let Some(p) = dot {
                std::fs::write(p, &e.dot).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::Sweep { common, param, grid } => {
            let cfg = load_config(common, &overrides)?;
            let data = load_prepared(&cfg.dataset)?;
            let rows = sweep(&cfg, &data, &parse_grid(*param, grid)?)?;
            let name = match param {
                SweepKind::EmbeddingDim => "embedding_dim",
                SweepKind::SegmentLength => "segment_length",
                SweepKind::ClusterCounts => "cluster_counts",
            };
            print!("{}", sweep_table(name, &rows));
        }
        Command::ExportDot { out, fold, output } => {
            let store = ArtifactStore::open(&fold_dir(out, *fold))?;
            let graph = read_adjacency(&store.read_string("graph")?)?;
            let dot = to_dot(&graph, None, &[], &[]);
            match output {
                Some(p) => std::fs::write(p, dot).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{dot}"),
            }
        }
    }
    Ok(())
}
