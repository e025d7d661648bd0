//! Command implementations behind the `relkg` binary.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;
use sha2::{Digest, Sha256};

use relkg::evalrank::{self, Protocol, RankingReport};
use relkg::kgdata::{load_dataset, load_triples, DatasetSplit, EvalSplit, SplitMode};
use relkg::model::{Ablation, Model};
use relkg::relgraph::{lift_as, Interaction, RelGraphKind};
use relkg::synth::{self, SynthConfig};
use relkg::training::{self, parse_kv, Checkpoint, Schedule, TrainConfig, TrainDataset, TrainOptions};
use relkg::{Error, ErrorKind};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numeric => 3,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "relkg", version, about = "Link prediction on arbitrary knowledge graphs")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Random seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Single-threaded execution with fixed reduction order.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Worker threads for scoring and evaluation.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON-lines file that receives one manifest per run.
    #[arg(long, global = true, default_value = "relkg-runs.jsonl")]
    pub manifest: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Lift a triple file into its typed graph of relations.
    Lift(LiftArgs),
    /// Train a model from scratch on a mixture of datasets.
    Pretrain(TrainArgs),
    /// Continue training a checkpoint on one dataset.
    Finetune(FinetuneArgs),
    /// Rank held-out queries with a checkpoint, without updating it.
    Eval(EvalArgs),
    /// Write a synthetic compositional dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct LiftArgs {
    pub graph: PathBuf,
    pub out: PathBuf,
    #[arg(long, default_value = "none")]
    pub ablation: String,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output checkpoint; overrides the `output` key.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub ablation: Option<String>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "transductive")]
    pub mode: String,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "transductive")]
    pub mode: String,
    #[arg(long, default_value = "full")]
    pub protocol: String,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Include per-query ranks in the report.
    #[arg(long)]
    pub ranks: bool,
    /// Report path; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub entities: usize,
    #[arg(long, default_value_t = 20)]
    pub relations: usize,
    #[arg(long, default_value = "a")]
    pub prefix: String,
    /// Also sample a second graph with this seed and write an inductive
    /// split whose test graph comes from it.
    #[arg(long)]
    pub transfer_seed: Option<u64>,
}

/// One line of the run log.
#[derive(Debug, Clone, Serialize, Default)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub checkpoint_hashes: BTreeMap<String, String>,
    pub outputs: Vec<PathBuf>,
    pub timings_secs: BTreeMap<String, f64>,
    pub started_unix: u64,
    pub status: String,
}

impl RunManifest {
    fn new(command: &str) -> Self {
        Self {
            command: command.to_owned(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            ..Self::default()
        }
    }

    fn hash(&mut self, path: &Path) -> CliResult<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.checkpoint_hashes
            .insert(path.display().to_string(), hex::encode(Sha256::digest(&bytes)));
        Ok(())
    }

    fn time(&mut self, phase: &str, since: Instant) {
        self.timings_secs.insert(phase.to_owned(), since.elapsed().as_secs_f64());
    }

    pub fn append_to(&self, path: &Path) -> CliResult<()> {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let line = serde_json::to_string(self).map_err(|e| CliError::Usage(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Per-type edge counts of a lifted relation graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LiftStats {
    pub nodes: usize,
    pub counts: BTreeMap<String, usize>,
}

pub fn cmd_lift(args: &LiftArgs, manifest: &mut RunManifest) -> CliResult<LiftStats> {
    let ablation: Ablation = args.ablation.parse()?;
    manifest.inputs.push(args.graph.clone());
    manifest.config = serde_json::json!({ "ablation": ablation.as_str() });
    let t = Instant::now();
    let g = load_triples(&args.graph, None, None)?.add_inverse_relations()?;
    let rg = lift_as(&g, ablation.relgraph_kind())?;
    let mut out = Vec::new();
    rg.write_tsv(&mut out).map_err(|e| Error::io(&args.out, e))?;
    fs::write(&args.out, out).map_err(|e| Error::io(&args.out, e))?;
    manifest.outputs.push(args.out.clone());
    manifest.time("lift", t);
    let counts = match rg.kind() {
        RelGraphKind::Typed => Interaction::ALL
            .iter()
            .map(|&i| (i.as_str().to_owned(), rg.edges(i).map_or(0, <[_]>::len)))
            .collect(),
        RelGraphKind::Homogeneous => [("any".to_owned(), rg.num_edges())].into_iter().collect(),
    };
    Ok(LiftStats {
        nodes: rg.num_nodes(),
        counts,
    })
}

fn split_mode(s: &str) -> CliResult<SplitMode> {
    Ok(s.parse::<SplitMode>()?)
}

/// Config file contents after flag overrides, plus the keys owned by the
/// command line layer.
struct ResolvedTrain {
    config: TrainConfig,
    output: PathBuf,
    dataset_mode: SplitMode,
    max_valid_queries: Option<usize>,
    snapshot: BTreeMap<String, String>,
}

fn resolve_train(args: &TrainArgs, common: &CommonArgs) -> CliResult<ResolvedTrain> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", args.config.display())))?;
    let mut kv = parse_kv(&text)?;
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override `{o}` is not KEY=VALUE")))?;
        kv.insert(k.trim().to_owned(), v.trim().to_owned());
    }
    if let Some(seed) = common.seed {
        kv.insert("seed".into(), seed.to_string());
    }
    if common.deterministic {
        kv.insert("deterministic".into(), "true".into());
    }
    if let Some(a) = &args.ablation {
        kv.insert("ablation".into(), a.clone());
    }
    if let Some(out) = &args.out {
        kv.insert("output".into(), out.display().to_string());
    }
    let mut config = TrainConfig::default();
    let mut output = None;
    let mut dataset_mode = SplitMode::Transductive;
    let mut max_valid_queries = None;
    for (k, v) in &kv {
        if config.set(k, v)? {
            continue;
        }
        match k.as_str() {
            "output" => output = Some(PathBuf::from(v)),
            "dataset_mode" => dataset_mode = split_mode(v)?,
            "max_valid_queries" => {
                max_valid_queries = Some(
                    v.parse()
                        .map_err(|_| CliError::Usage(format!("invalid value `{v}` for `{k}`")))?,
                )
            }
            _ => return Err(CliError::Usage(format!("unknown config key `{k}`"))),
        }
    }
    config.validate()?;
    let output = output.ok_or_else(|| CliError::Usage("no output checkpoint (set `output` or --out)".into()))?;
    Ok(ResolvedTrain {
        config,
        output,
        dataset_mode,
        max_valid_queries,
        snapshot: kv,
    })
}

fn finish_training(
    resolved: &ResolvedTrain,
    datasets: &[TrainDataset],
    initial: Option<&Checkpoint>,
    manifest: &mut RunManifest,
) -> CliResult<Checkpoint> {
    let t = Instant::now();
    let opts = TrainOptions {
        checkpoint_path: Some(resolved.output.with_extension("last.ukgr")),
        max_valid_queries: resolved.max_valid_queries,
    };
    let outcome = training::train(&resolved.config, datasets, initial, &opts)?;
    manifest.time("train", t);
    for log in &outcome.history {
        println!(
            "step {}: loss {:.5}{}",
            log.step,
            log.mean_train_loss,
            log.valid_mrr.map(|m| format!(", valid mrr {m:.4}")).unwrap_or_default()
        );
    }
    outcome.checkpoint.save(&resolved.output)?;
    manifest.outputs.push(resolved.output.clone());
    manifest.hash(&resolved.output)?;
    println!("wrote {}", resolved.output.display());
    Ok(outcome.checkpoint)
}

pub fn cmd_pretrain(args: &TrainArgs, common: &CommonArgs, manifest: &mut RunManifest) -> CliResult<Checkpoint> {
    let resolved = resolve_train(args, common)?;
    manifest.config = serde_json::to_value(&resolved.snapshot).unwrap_or_default();
    manifest.seed = Some(resolved.config.seed);
    if resolved.config.mixture.is_empty() {
        return Err(CliError::Usage("config lists no datasets (`mixture`)".into()));
    }
    let counts = Model::new(resolved.config.model, resolved.config.seed)?.param_counts();
    println!(
        "parameters: relation encoder {}, entity predictor {}, total {}",
        counts.relation_encoder, counts.entity_predictor, counts.total
    );
    let t = Instant::now();
    let datasets = resolved
        .config
        .mixture
        .iter()
        .map(|dir| {
            manifest.inputs.push(PathBuf::from(dir));
            Ok(TrainDataset {
                name: dir.clone(),
                split: load_dataset(dir, resolved.dataset_mode)?,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    manifest.time("load", t);
    finish_training(&resolved, &datasets, None, manifest)
}

pub fn cmd_finetune(args: &FinetuneArgs, common: &CommonArgs, manifest: &mut RunManifest) -> CliResult<Checkpoint> {
    let mut resolved = resolve_train(&args.train, common)?;
    let initial = Checkpoint::load(&args.checkpoint)?;
    // architecture comes from the checkpoint
    resolved.config.model = initial.model;
    if let Schedule::Steps(_) = resolved.config.schedule {
        if !resolved.snapshot.contains_key("steps") {
            resolved.config.schedule = Schedule::Epochs(1);
        }
    }
    resolved.config.mixture = vec![args.dataset.display().to_string()];
    manifest.config = serde_json::to_value(&resolved.snapshot).unwrap_or_default();
    manifest.seed = Some(resolved.config.seed);
    manifest.inputs.extend([args.checkpoint.clone(), args.dataset.clone()]);
    manifest.hash(&args.checkpoint)?;
    let split = load_dataset(&args.dataset, split_mode(&args.mode)?)?;
    let datasets = [TrainDataset {
        name: args.dataset.display().to_string(),
        split,
    }];
    finish_training(&resolved, &datasets, Some(&initial), manifest)
}

pub fn cmd_eval(args: &EvalArgs, common: &CommonArgs, manifest: &mut RunManifest) -> CliResult<RankingReport> {
    let protocol = Protocol::from_name(&args.protocol)?;
    let which = match args.split.as_str() {
        "test" => EvalSplit::Test,
        "valid" => EvalSplit::Valid,
        other => return Err(CliError::Usage(format!("unknown split `{other}`"))),
    };
    let seed = common.seed.unwrap_or(0);
    manifest.seed = Some(seed);
    manifest.config = serde_json::json!({
        "protocol": args.protocol,
        "mode": args.mode,
        "split": args.split,
        "ranks": args.ranks,
    });
    manifest.inputs.extend([args.checkpoint.clone(), args.dataset.clone()]);
    manifest.hash(&args.checkpoint)?;
    let t = Instant::now();
    let model = Checkpoint::load(&args.checkpoint)?.to_model()?;
    let split: DatasetSplit = load_dataset(&args.dataset, split_mode(&args.mode)?)?;
    manifest.time("load", t);
    let t = Instant::now();
    let report = evalrank::evaluate(&model, &split, which, &protocol, seed)?;
    manifest.time("eval", t);
    let json = report.to_json(args.ranks);
    match &args.out {
        Some(path) => {
            fs::write(path, format!("{json}\n")).map_err(|e| Error::io(path, e))?;
            manifest.outputs.push(path.clone());
            println!("mrr {:.4}, wrote {}", report.mrr, path.display());
        }
        None => println!("{json}"),
    }
    Ok(report)
}

pub fn cmd_synth(args: &SynthArgs, common: &CommonArgs, manifest: &mut RunManifest) -> CliResult<()> {
    let cfg = SynthConfig {
        num_entities: args.entities,
        num_relations: args.relations,
        seed: common.seed.unwrap_or(0),
        prefix: args.prefix.clone(),
        ..SynthConfig::default()
    };
    manifest.seed = Some(cfg.seed);
    manifest.config = serde_json::to_value(&cfg).unwrap_or_default();
    let split = match args.transfer_seed {
        Some(seed) => {
            let target = SynthConfig {
                seed,
                prefix: format!("{}_t{seed}", args.prefix),
                ..cfg.clone()
            };
            synth::generate_transfer(&cfg, &target)?
        }
        None => synth::generate(&cfg)?.split,
    };
    synth::write_dataset(&split, &args.out)?;
    manifest.outputs.push(args.out.clone());
    println!(
        "wrote {} ({} training edges, {} test queries)",
        args.out.display(),
        split.train_graph.num_edges() / 2,
        split.test_queries.len()
    );
    Ok(())
}

fn configure_threads(common: &CommonArgs) -> CliResult<()> {
    let threads = if common.deterministic { Some(1) } else { common.threads };
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be ≥ 1".into()));
        }
        // a pool may already exist when commands run in-process
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            info!("thread pool already initialized");
        }
    }
    Ok(())
}

/// Runs one command and appends its manifest, whatever the outcome.
pub fn run(cli: &Cli) -> CliResult<()> {
    configure_threads(&cli.common)?;
    let name = match &cli.command {
        Command::Lift(_) => "lift",
        Command::Pretrain(_) => "pretrain",
        Command::Finetune(_) => "finetune",
        Command::Eval(_) => "eval",
        Command::Synth(_) => "synth",
    };
    let mut manifest = RunManifest::new(name);
    let t = Instant::now();
    let result = match &cli.command {
        Command::Lift(a) => cmd_lift(a, &mut manifest).map(|stats| {
            println!("relation graph: {} nodes", stats.nodes);
            for (k, v) in &stats.counts {
                println!("{k}\t{v}");
            }
        }),
        Command::Pretrain(a) => cmd_pretrain(a, &cli.common, &mut manifest).map(drop),
        Command::Finetune(a) => cmd_finetune(a, &cli.common, &mut manifest).map(drop),
        Command::Eval(a) => cmd_eval(a, &cli.common, &mut manifest).map(drop),
        Command::Synth(a) => cmd_synth(a, &cli.common, &mut manifest),
    };
    manifest.time("total", t);
    manifest.status = match &result {
        Ok(()) => "ok".into(),
        Err(e) => format!("error: {e}"),
    };
    manifest.append_to(&cli.common.manifest)?;
    result
}
