//! Configuration, two-stage training, evaluation, sweeps and artifacts.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod pipeline;
pub mod sweep;
pub mod train;

use std::fs;
use std::path::Path;

use log::info;

use crate::data::{generate_synthetic, load_dataset, read_split_manifest, split_records, write_split_manifest, Dataset, SplitManifest};
use crate::error::{Error, Result};

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use eval::{evaluate_run, MetricsReport};
pub use sweep::{sweep, SweepAxis, SweepTable};
pub use train::{train_stage1, train_stage2, StageReport};

/// Crate name and version, embedded in every artifact.
pub fn version_string() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

/// A loaded dataset and its split membership.
#[derive(Debug, Clone)]
pub struct RunData {
    pub dataset: Dataset,
    pub manifest: SplitManifest,
}

/// Loads or generates the dataset and reads or computes the splits.
pub fn load_run_data(cfg: &RunConfig) -> Result<RunData> {
    let dataset = match (&cfg.data.synthetic, cfg.data.paths()?) {
        (Some(spec), _) => generate_synthetic(spec, &cfg.taxonomy)?,
        (None, Some(paths)) => load_dataset(&paths, &cfg.taxonomy, cfg.workers.max(1))?,
        (None, None) => return Err(Error::Config("no data source".into())),
    };
    let manifest = match &cfg.data.splits {
        Some(path) => read_split_manifest(path)?,
        None => split_records(&dataset.records, cfg.data.fractions, cfg.seed)?,
    };
    Ok(RunData { dataset, manifest })
}

/// Runs `f` on a dedicated pool: one thread when deterministic, otherwise
/// `workers` threads (0 lets rayon choose).
pub fn with_pool<T: Send>(cfg: &RunConfig, f: impl FnOnce() -> T + Send) -> Result<T> {
    let threads = if cfg.deterministic { 1 } else { cfg.workers };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Outcome of [`run`].
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub stage1: StageReport,
    pub stage2: StageReport,
    pub checkpoint: Checkpoint,
    pub metrics: MetricsReport,
}

/// Full pipeline: both training stages, checkpoints, then evaluation on the
/// configured split. Writes `config.toml`, `splits.json`,
/// `checkpoint_stage1.bin`, `checkpoint.bin`, `stages.json` and the
/// evaluation artifacts under `cfg.out_dir`.
pub fn run(cfg: &RunConfig, data: &RunData) -> Result<RunOutcome> {
    let out = cfg.out_dir.as_path();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join("config.toml"), &cfg.to_toml_string()?)?;
    write_split_manifest(&out.join("splits.json"), &data.manifest)?;

    info!("stage 1: pair branch");
    let (stage1_ck, stage1) = train_stage1(cfg, data)?;
    stage1_ck.save(&out.join("checkpoint_stage1.bin"))?;
    info!("stage 2: context branch");
    let (checkpoint, stage2) = train_stage2(cfg, data, &stage1_ck)?;
    checkpoint.save(&out.join("checkpoint.bin"))?;
    write_text(&out.join("stages.json"), &(serde_json::to_string_pretty(&[&stage1, &stage2])? + "\n"))?;

    let metrics = evaluate_run(cfg, data, &checkpoint, cfg.eval.split, out)?;
    Ok(RunOutcome { stage1, stage2, checkpoint, metrics })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
