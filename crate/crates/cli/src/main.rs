//! `graphvec`: pre-training, embedding and evaluation driver.

mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use graphvec_core::align::align_dataset_scales;
use graphvec_core::container::Container;
use graphvec_core::eval::{
    cluster_metrics, fewshot_accuracy, fewshot_embed, mean_std, spectral_cluster, write_results, ResultRecord,
};
use graphvec_core::graph::GraphDataset;
use graphvec_core::kernel::multi_scale_embed;
use graphvec_core::train::{pretrain, write_log, Checkpoint, TrainMode};

use config::RunConfig;

/// Outcome of a failed command, mapped to the process exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad configuration or input data: exit 2.
    Usage(String),
    /// Numeric or I/O failure while running: exit 1.
    Runtime(String),
}

impl From<graphvec_core::Error> for Failure {
    fn from(e: graphvec_core::Error) -> Self {
        use graphvec_core::Error::*;
        match e {
            Ingestion { .. } | Malformed(_) | Parameter(_) | Contract(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "graphvec", version, about = "Cross-domain graph vectorization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train on the configured datasets; writes checkpoint.gvec and train_log.jsonl.
    Pretrain(Common),
    /// Write graph vectors of the downstream dataset to vectors.gvec.
    Embed(Common),
    /// Few-shot classification on the downstream dataset; writes fewshot.jsonl and fewshot.txt.
    Fewshot(Common),
    /// Spectral clustering of the downstream dataset; writes cluster.jsonl and cluster.txt.
    Cluster(Common),
    /// Alignment objective trace per kernel scale; writes align_trace.tsv.
    AlignDiag(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Supervised,
    Unsupervised,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Checkpoint to write or read; defaults to <out>/checkpoint.gvec.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Output directory; overrides the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Base seed; overrides the config.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Pre-training objective; overrides the config.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
}

struct Run {
    cfg: RunConfig,
    base: PathBuf,
    out: PathBuf,
    checkpoint: PathBuf,
}

impl Run {
    fn new(args: &Common, need_sources: bool, need_downstream: bool) -> Result<Self, Failure> {
        let (mut cfg, base) = RunConfig::read(&args.config)?;
        cfg.apply_seed(args.seed.unwrap_or(cfg.seed));
        if let Some(mode) = args.mode {
            cfg.train.mode = match mode {
                Mode::Supervised => TrainMode::Supervised,
                Mode::Unsupervised => TrainMode::Unsupervised,
            };
        }
        if let Some(out) = &args.out {
            cfg.out = out.clone();
        }
        cfg.sync_shapes();
        cfg.validate(&base, need_sources, need_downstream)?;
        fs::create_dir_all(&cfg.out)?;
        let checkpoint = args.checkpoint.clone().unwrap_or_else(|| cfg.out.join("checkpoint.gvec"));
        Ok(Run {
            out: cfg.out.clone(),
            cfg,
            base,
            checkpoint,
        })
    }

    fn sources(&self) -> Result<Vec<GraphDataset>, Failure> {
        self.cfg.datasets.iter().map(|d| d.load(&self.base)).collect()
    }

    fn downstream(&self) -> Result<GraphDataset, Failure> {
        self.cfg
            .downstream
            .as_ref()
            .expect("validated")
            .load(&self.base)
    }

    fn load_checkpoint(&self) -> Result<Checkpoint, Failure> {
        if !self.checkpoint.is_file() {
            return Err(Failure::Usage(format!("checkpoint {} does not exist", self.checkpoint.display())));
        }
        Ok(Checkpoint::load(&self.checkpoint)?)
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>, Failure> {
        Ok(BufWriter::new(File::create(self.out.join(name))?))
    }
}

fn cmd_pretrain(args: &Common) -> Result<(), Failure> {
    let run = Run::new(args, true, false)?;
    let sources = run.sources()?;
    let c = &run.cfg;
    let out = pretrain(&sources, &c.scale, &c.align, &c.model, &c.train, |_| {})?;
    out.checkpoint.save(&run.checkpoint)?;
    let mut log = run.create("train_log.jsonl")?;
    write_log(&out.log, &mut log)?;
    log.flush()?;
    log::info!("checkpoint written to {}", run.checkpoint.display());
    Ok(())
}

fn cmd_embed(args: &Common) -> Result<(), Failure> {
    let run = Run::new(args, false, true)?;
    let ck = run.load_checkpoint()?;
    let ds = run.downstream()?;
    let v = fewshot_embed(&ck, ds.graphs(), &[])?;
    let meta = serde_json::json!({
        "dataset": ds.name,
        "graphs": ds.len(),
        "width": v.train.ncols(),
        "similarity_len": ck.model.reference.similarity_len(),
    });
    let mut c = Container::new("graph-vectors", &meta)?;
    c.push_matrix("vectors", &v.train);
    if let Some(labels) = ds.labels() {
        c.push_i32("labels", labels.len(), 1, labels.iter().map(|&l| l as i32).collect());
    }
    c.write(run.out.join("vectors.gvec"))?;
    Ok(())
}

fn write_table(run: &Run, name: &str, task: &str, records: &[ResultRecord]) -> Result<(), Failure> {
    let mut metrics: Vec<&str> = Vec::new();
    for r in records {
        if !metrics.contains(&r.metric.as_str()) {
            metrics.push(&r.metric);
        }
    }
    let mut text = format!("{task}\n");
    for m in metrics {
        let values: Vec<f64> = records.iter().filter(|r| r.metric == m).map(|r| r.value).collect();
        let (mean, std) = mean_std(&values);
        text.push_str(&format!("{m}\t{mean:.4} ± {std:.4}\t(n = {})\n", values.len()));
    }
    print!("{text}");
    fs::write(run.out.join(name), text)?;
    Ok(())
}

fn cmd_fewshot(args: &Common) -> Result<(), Failure> {
    let run = Run::new(args, false, true)?;
    let ck = run.load_checkpoint()?;
    let ds = run.downstream()?;
    let task = format!("fewshot/{}/{}-shot", ds.name, run.cfg.fewshot.shots);
    let records = run
        .cfg
        .seeds()
        .into_iter()
        .map(|seed| {
            Ok(ResultRecord {
                task: task.clone(),
                seed,
                metric: "accuracy".into(),
                value: fewshot_accuracy(&ck, &ds, &run.cfg.fewshot, seed)?,
            })
        })
        .collect::<Result<Vec<_>, Failure>>()?;
    let mut out = run.create("fewshot.jsonl")?;
    write_results(&records, &mut out)?;
    out.flush()?;
    write_table(&run, "fewshot.txt", &task, &records)
}

fn cmd_cluster(args: &Common) -> Result<(), Failure> {
    let run = Run::new(args, false, true)?;
    let ck = run.load_checkpoint()?;
    let ds = run.downstream()?;
    let truth = ds
        .labels()
        .ok_or_else(|| Failure::Usage(format!("clustering metrics need labels on `{}`", ds.name)))?;
    let k = run.cfg.cluster.clusters.unwrap_or(ds.num_classes());
    let vectors = fewshot_embed(&ck, ds.graphs(), &[])?.train;
    let task = format!("cluster/{}/k={k}", ds.name);
    let mut records = Vec::new();
    for seed in run.cfg.seeds() {
        let pred = spectral_cluster(vectors.view(), k, &run.cfg.cluster.method, seed)?;
        let m = cluster_metrics(&pred, &truth)?;
        for (metric, value) in [("acc", m.acc), ("nmi", m.nmi), ("ari", m.ari)] {
            records.push(ResultRecord {
                task: task.clone(),
                seed,
                metric: metric.into(),
                value,
            });
        }
    }
    let mut out = run.create("cluster.jsonl")?;
    write_results(&records, &mut out)?;
    out.flush()?;
    write_table(&run, "cluster.txt", &task, &records)
}

fn cmd_align_diag(args: &Common) -> Result<(), Failure> {
    let run = Run::new(args, true, false)?;
    let embeddings = run
        .sources()?
        .iter()
        .map(|d| multi_scale_embed(d, &run.cfg.scale))
        .collect::<Result<Vec<_>, _>>()?;
    let aligned = align_dataset_scales(&embeddings, &run.cfg.align)?;
    let mut out = run.create("align_trace.tsv")?;
    writeln!(out, "scale\tlambda\titeration\tobjective")?;
    for (q, trace) in aligned.traces.iter().enumerate() {
        for (t, v) in trace.iter().enumerate() {
            writeln!(out, "{q}\t{}\t{t}\t{v:.17e}", run.cfg.scale.lambdas[q])?;
        }
    }
    out.flush()?;
    Ok(())
}

fn init_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("GRAPHVEC_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("GRAPHVEC_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(e.to_string()))
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    init_threads()?;
    match &cli.command {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Embed(a) => cmd_embed(a),
        Command::Fewshot(a) => cmd_fewshot(a),
        Command::Cluster(a) => cmd_cluster(a),
        Command::AlignDiag(a) => cmd_align_diag(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
