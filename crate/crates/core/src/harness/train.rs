//! Two-stage SGD training.

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{annotation_class_counts, materialize_split, PairSample};
use crate::error::{Error, Result};
use crate::geometry::GeometryNormStats;
use crate::losses::{class_alpha, ClassFrequency, LossConfig};
use crate::model::{DualGlance, ParamStore, TrainStage, FIRST_GLANCE_PREFIX, SECOND_GLANCE_PREFIXES};

use super::checkpoint::Checkpoint;
use super::config::{RunConfig, StageConfig};
use super::pipeline::{fit_geometry, prepare, samples_for, target_of, FrozenFirst};
use super::RunData;

/// Samples per sequential gradient chunk. Chunks are summed in a fixed
/// order, so results do not depend on the thread count.
const CHUNK: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: TrainStage,
    pub epochs: usize,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub converged: bool,
    /// First-branch parameter hash before and after the stage.
    pub first_glance_hash_before: String,
    pub first_glance_hash_after: String,
}

/// Tracks relative loss improvement against the best epoch so far.
#[derive(Debug, Clone)]
pub struct Convergence {
    tolerance: f64,
    patience: usize,
    best: f64,
    stalled: usize,
}

impl Convergence {
    pub fn new(tolerance: f64, patience: usize) -> Self {
        Self { tolerance, patience, best: f64::INFINITY, stalled: 0 }
    }

    /// Records one evaluation; true once `patience` consecutive evaluations
    /// improved on the best by less than `tolerance` relative.
    pub fn update(&mut self, loss: f64) -> bool {
        let improved = if self.best.is_finite() {
            (self.best - loss) / self.best.abs().max(f64::MIN_POSITIVE) >= self.tolerance
        } else {
            true
        };
        if improved {
            self.stalled = 0;
        } else {
            self.stalled += 1;
        }
        self.best = self.best.min(loss);
        self.stalled >= self.patience
    }
}

fn trainable(stage: TrainStage, name: &str) -> bool {
    match stage {
        TrainStage::FirstGlance => name.starts_with(FIRST_GLANCE_PREFIX),
        TrainStage::SecondGlance => SECOND_GLANCE_PREFIXES.iter().any(|p| name.starts_with(p)),
        TrainStage::Joint => true,
    }
}

/// SGD with heavy-ball momentum on the parameters of one stage.
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: ParamStore,
    stage: TrainStage,
}

impl Sgd {
    pub fn new(params: &ParamStore, learning_rate: f64, momentum: f64, stage: TrainStage) -> Self {
        Self { learning_rate, momentum, velocity: params.zeros_like(), stage }
    }

    /// `v = momentum * v + g; theta -= lr * v` for trainable tensors.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) {
        let (lr, mu) = (self.learning_rate, self.momentum);
        for (name, v) in self.velocity.iter_mut() {
            if !trainable(self.stage, name) {
                continue;
            }
            let g = grads.get(name);
            v.zip_mut_with(g, |v, &g| *v = mu * *v + g);
            params.get_mut(name).scaled_add(-lr, v);
        }
    }
}

/// Everything a stage needs besides the model.
pub struct StageInputs<'a> {
    pub cfg: &'a RunConfig,
    pub data: &'a RunData,
    pub samples: &'a [PairSample],
    pub geometry: &'a GeometryNormStats,
    pub loss: &'a LossConfig,
}

/// Mean loss and summed gradient over `batch`.
fn batch_gradient(
    model: &DualGlance,
    inputs: &StageInputs<'_>,
    batch: &[usize],
    stage: TrainStage,
    frozen: Option<&[FrozenFirst]>,
) -> Result<(f64, ParamStore)> {
    let soft = inputs.loss.kind.uses_soft_label();
    let chunks: Vec<Result<(f64, ParamStore)>> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grads = model.params.zeros_like();
            let mut total = 0.0;
            for &i in chunk {
                let sample = &inputs.samples[i];
                let input = prepare(
                    &inputs.data.dataset,
                    sample,
                    inputs.geometry,
                    model.spec.first_glance.patch_size,
                    &inputs.cfg.regions,
                )?;
                let first = frozen.map(|f| (f[i].s1.view(), f[i].v_top.view()));
                total += model.accumulate_loss_grad(
                    &input,
                    inputs.loss,
                    target_of(sample, soft),
                    stage,
                    inputs.cfg.aggregation,
                    first,
                    &mut grads,
                )?;
            }
            Ok((total, grads))
        })
        .collect();
    let mut sum = model.params.zeros_like();
    let mut loss = 0.0;
    for chunk in chunks {
        let (l, g) = chunk?;
        loss += l;
        sum.add_scaled(&g, 1.0);
    }
    let n = batch.len() as f64;
    for (_, g) in sum.iter_mut() {
        g.mapv_inplace(|v| v / n);
    }
    Ok((loss / n, sum))
}

/// Pair-branch outputs for every sample, for the frozen stage.
pub fn freeze_first(model: &DualGlance, inputs: &StageInputs<'_>) -> Result<Vec<FrozenFirst>> {
    inputs
        .samples
        .par_iter()
        .map(|sample| {
            let input =
                prepare(&inputs.data.dataset, sample, inputs.geometry, model.spec.first_glance.patch_size, &inputs.cfg.regions)?;
            let out = model.first_glance_forward(&input.pair)?;
            Ok(FrozenFirst { s1: out.s1, v_top: out.v_top })
        })
        .collect()
}

/// Epoch loop with shuffling, momentum SGD and the convergence rule.
pub fn run_stage(
    model: &mut DualGlance,
    inputs: &StageInputs<'_>,
    stage: TrainStage,
    budget: &StageConfig,
    seed: u64,
) -> Result<StageReport> {
    let hash_before = model.params.hash_prefix(FIRST_GLANCE_PREFIX);
    let frozen = match stage {
        TrainStage::SecondGlance => Some(freeze_first(model, inputs)?),
        _ => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Sgd::new(&model.params, inputs.cfg.optimizer.learning_rate, inputs.cfg.optimizer.momentum, stage);
    let mut order: Vec<usize> = (0..inputs.samples.len()).collect();
    let mut convergence = Convergence::new(budget.tolerance, budget.patience);
    let mut epoch_losses = Vec::new();
    let mut converged = false;
    for epoch in 0..budget.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(inputs.cfg.optimizer.batch_size) {
            let (loss, grads) = batch_gradient(model, inputs, batch, stage, frozen.as_deref())?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::DivergenceDetected(epoch));
            }
            opt.step(&mut model.params, &grads);
            total += loss * batch.len() as f64;
        }
        let mean = total / inputs.samples.len() as f64;
        info!("{stage:?} epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
        if convergence.update(mean) {
            converged = true;
            break;
        }
    }
    Ok(StageReport {
        stage,
        epochs: epoch_losses.len(),
        epoch_losses,
        converged,
        first_glance_hash_before: hash_before,
        first_glance_hash_after: model.params.hash_prefix(FIRST_GLANCE_PREFIX),
    })
}

/// Training samples (augmented), geometry statistics and the loss with
/// class weights derived from the training split.
pub fn training_setup(cfg: &RunConfig, data: &RunData) -> Result<(Vec<PairSample>, GeometryNormStats, LossConfig)> {
    let split = materialize_split(&data.dataset, &data.manifest, cfg.train_split)?;
    if split.records.is_empty() {
        return Err(Error::EmptySplit);
    }
    let samples = samples_for(&data.dataset, &split.records, true)?;
    let geometry = fit_geometry(&samples)?;
    let alpha = if cfg.loss.alpha_balance {
        let counts = annotation_class_counts(&split.records)?;
        Some(class_alpha(&ClassFrequency { counts: counts.counts, beta: cfg.loss.beta }, Some(&cfg.taxonomy))?)
    } else {
        None
    };
    Ok((samples, geometry, cfg.loss_config(alpha)))
}

/// Trains the pair branch from a seeded initialization.
pub fn train_stage1(cfg: &RunConfig, data: &RunData) -> Result<(Checkpoint, StageReport)> {
    let (samples, geometry, loss) = training_setup(cfg, data)?;
    let mut model = DualGlance::new(cfg.model.clone(), cfg.seed)?;
    let inputs = StageInputs { cfg, data, samples: &samples, geometry: &geometry, loss: &loss };
    let report = run_stage(&mut model, &inputs, TrainStage::FirstGlance, &cfg.stage1, cfg.seed.wrapping_add(1))?;
    let ck = Checkpoint::new(&model, 1, &cfg.taxonomy, &geometry, &loss, &cfg.hash());
    Ok((ck, report))
}

/// Trains the context branch and fusion weights on top of a frozen pair
/// branch.
pub fn train_stage2(cfg: &RunConfig, data: &RunData, stage1: &Checkpoint) -> Result<(Checkpoint, StageReport)> {
    stage1.ensure_compatible(&cfg.taxonomy, &cfg.model)?;
    let (samples, _, loss) = training_setup(cfg, data)?;
    let geometry = stage1.header.geometry.clone();
    let mut model = stage1.model()?;
    let inputs = StageInputs { cfg, data, samples: &samples, geometry: &geometry, loss: &loss };
    let report = run_stage(&mut model, &inputs, TrainStage::SecondGlance, &cfg.stage2, cfg.seed.wrapping_add(2))?;
    if report.first_glance_hash_before != report.first_glance_hash_after {
        return Err(Error::Data("first-glance parameters changed during the frozen stage".into()));
    }
    let ck = Checkpoint::new(&model, 2, &cfg.taxonomy, &geometry, &loss, &cfg.hash());
    Ok((ck, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn convergence_needs_patience_stalls() {
        let mut c = Convergence::new(1e-3, 3);
        assert!(!c.update(1.0));
        assert!(!c.update(0.5));
        assert!(!c.update(0.49999));
        assert!(!c.update(0.49998));
        assert!(c.update(0.49997));

        let mut c = Convergence::new(1e-3, 3);
        for loss in [1.0, 0.9999, 0.9998, 0.5, 0.4999] {
            assert!(!c.update(loss));
        }
    }

    #[test]
    fn momentum_update_matches_hand_computation() {
        let mut params = ParamStore::new();
        params.insert("first.a", ndarray::arr1(&[1.0]).into_dyn());
        params.insert("second.b", ndarray::arr1(&[1.0]).into_dyn());
        let mut grads = params.zeros_like();
        grads.get_mut("first.a").fill(2.0);
        grads.get_mut("second.b").fill(2.0);
        let mut opt = Sgd::new(&params, 0.1, 0.9, TrainStage::FirstGlance);
        opt.step(&mut params, &grads);
        opt.step(&mut params, &grads);
        // v1 = 2, v2 = 0.9 * 2 + 2 = 3.8; theta = 1 - 0.1 * (2 + 3.8)
        assert!((params.get("first.a")[0] - 0.42).abs() < 1e-15);
        assert_eq!(params.get("second.b")[0], 1.0);
    }
}
