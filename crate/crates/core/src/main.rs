use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dualglance::attention::AggregationMode;
use dualglance::data::synth::write_dataset;
use dualglance::data::{generate_synthetic, SplitKind, SyntheticSpec};
use dualglance::harness::eval::{score_split, write_attention_artifacts};
use dualglance::harness::{self, evaluate_run, load_run_data, Checkpoint, RunConfig, SweepAxis};
use dualglance::losses::LossKind;
use dualglance::types::RelationshipTaxonomy;

#[derive(Parser)]
#[command(name = "dualglance", version, about = "Pair-relationship recognition: train, evaluate, sweep, synthesize data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train both stages, then evaluate on the configured split.
    Train(Common),
    /// Evaluate a checkpoint; writes metrics.json, confusion.png and overlays.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to <out>/checkpoint.bin.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// One sub-run per value along one axis; writes sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// tau_u, m, gamma, loss or aggregation.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Generate a synthetic dataset on disk.
    Synth(SynthArgs),
    /// Dump attention JSON and overlays for a split.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Only the first N samples.
        #[arg(long)]
        limit: Option<usize>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Single-threaded execution for bitwise-reproducible output.
    #[arg(long)]
    deterministic: bool,
    #[arg(long = "tau-u")]
    tau_u: Option<f64>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, value_parser = ["ce", "fl", "kl", "adafl"])]
    loss: Option<String>,
    #[arg(long, value_parser = ["attention", "avg", "max"])]
    agg: Option<String>,
    /// train_consistent, train_ambiguous, val or test.
    #[arg(long)]
    split: Option<String>,
    /// Any config field, e.g. `--set stage1.max_epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config).with_context(|| format!("loading {}", self.config.display()))?;
        for assignment in &self.set {
            cfg.set(assignment)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        cfg.deterministic |= self.deterministic;
        if let Some(t) = self.tau_u {
            cfg.regions.tau_u = t;
        }
        if let Some(m) = self.m {
            cfg.regions.m = m;
        }
        if let Some(g) = self.gamma {
            cfg.loss.gamma = Some(g);
        }
        if let Some(l) = &self.loss {
            cfg.loss.kind = l.parse::<LossKind>()?;
        }
        if let Some(a) = &self.agg {
            cfg.aggregation = a.parse::<AggregationMode>()?;
        }
        if let Some(s) = &self.split {
            cfg.eval.split = s.parse::<SplitKind>()?;
        }
        cfg.check()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// TOML file with a full synthetic spec; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    num_images: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    context_fraction: Option<f64>,
    #[arg(long)]
    ambiguous_fraction: Option<f64>,
}

fn checkpoint_path(cfg: &RunConfig, explicit: &Option<PathBuf>) -> PathBuf {
    explicit.clone().unwrap_or_else(|| cfg.out_dir.join("checkpoint.bin"))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Train(common) => {
            let cfg = common.load()?;
            let outcome = harness::with_pool(&cfg, || -> Result<_> {
                let data = load_run_data(&cfg)?;
                Ok(harness::run(&cfg, &data)?)
            })??;
            println!(
                "{}: mAP {:.4} accuracy {:.4} (first glance {:.4}); outputs in {}",
                cfg.eval.split,
                outcome.metrics.relationship.map,
                outcome.metrics.accuracy,
                outcome.metrics.first_glance_accuracy,
                cfg.out_dir.display()
            );
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.load()?;
            let ck = Checkpoint::load(&checkpoint_path(&cfg, &checkpoint))?;
            let report = harness::with_pool(&cfg, || -> Result<_> {
                let data = load_run_data(&cfg)?;
                Ok(evaluate_run(&cfg, &data, &ck, cfg.eval.split, &cfg.out_dir)?)
            })??;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Sweep { common, axis, values } => {
            let cfg = common.load()?;
            let axis: SweepAxis = axis.parse()?;
            let table = harness::with_pool(&cfg, || -> Result<_> {
                let data = load_run_data(&cfg)?;
                Ok(harness::sweep(&cfg, &data, axis, &values, &cfg.out_dir)?)
            })??;
            print!("{}", table.to_csv(&cfg.taxonomy.relationships));
        }
        Command::Synth(args) => {
            let mut spec = match &args.config {
                Some(path) => {
                    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                    toml::from_str::<SyntheticSpec>(&text)?
                }
                None => SyntheticSpec::default(),
            };
            if let Some(v) = args.seed {
                spec.seed = v;
            }
            if let Some(v) = args.num_images {
                spec.num_images = v;
            }
            if let Some(v) = args.image_size {
                spec.image_size = v;
            }
            if let Some(v) = args.context_fraction {
                spec.context_informative_fraction = v;
            }
            if let Some(v) = args.ambiguous_fraction {
                spec.ambiguous_fraction = v;
            }
            let dataset = generate_synthetic(&spec, &RelationshipTaxonomy::default())?;
            let paths = write_dataset(&dataset, &args.out)?;
            println!("{} records, {} images written to {}", dataset.records.len(), dataset.entries.len(), args.out.display());
            println!("annotations: {}", paths.annotations.display());
        }
        Command::Inspect { common, checkpoint, limit } => {
            let cfg = common.load()?;
            let ck = Checkpoint::load(&checkpoint_path(&cfg, &checkpoint))?;
            let dir = cfg.out_dir.join("attention");
            let count = harness::with_pool(&cfg, || -> Result<_> {
                let data = load_run_data(&cfg)?;
                let (report, outputs) = score_split(&cfg, &data, &ck, cfg.eval.split)?;
                let outputs = &outputs[..outputs.len().min(limit.unwrap_or(usize::MAX))];
                if outputs.is_empty() {
                    bail!("nothing to inspect");
                }
                write_attention_artifacts(&dir, &data, outputs, &report)?;
                Ok(outputs.len())
            })??;
            println!("{count} attention dumps written to {}", dir.display());
        }
    }
    Ok(())
}
