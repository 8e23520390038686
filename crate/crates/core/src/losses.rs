//! Cross entropy, focal, KL-divergence and adaptive focal losses over a
//! softmax output, with their gradients with respect to the pre-softmax
//! scores.
//!
//! Every `log` is taken of `max(p, epsilon)`. Where the clamp is active the
//! probability is treated as the constant `epsilon`, so its derivative is 0.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{RelationshipTaxonomy, SoftLabel};

pub const DEFAULT_EPSILON: f64 = 1e-12;
pub const DEFAULT_FOCAL_GAMMA: f64 = 2.0;
pub const DEFAULT_ADAPTIVE_GAMMA: f64 = 1.0;
pub const DEFAULT_BETA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Focal,
    KlDivergence,
    AdaptiveFocal,
}

impl LossKind {
    pub fn default_gamma(self) -> f64 {
        match self {
            LossKind::Focal => DEFAULT_FOCAL_GAMMA,
            LossKind::AdaptiveFocal => DEFAULT_ADAPTIVE_GAMMA,
            LossKind::CrossEntropy | LossKind::KlDivergence => 0.0,
        }
    }

    /// Whether the loss is supervised by a soft label rather than a class index.
    pub fn uses_soft_label(self) -> bool {
        matches!(self, LossKind::KlDivergence | LossKind::AdaptiveFocal)
    }

    pub fn short_name(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "ce",
            LossKind::Focal => "fl",
            LossKind::KlDivergence => "kl",
            LossKind::AdaptiveFocal => "adafl",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" | "cross_entropy" => Ok(LossKind::CrossEntropy),
            "fl" | "focal" => Ok(LossKind::Focal),
            "kl" | "kl_divergence" => Ok(LossKind::KlDivergence),
            "adafl" | "adaptive_focal" => Ok(LossKind::AdaptiveFocal),
            other => Err(Error::Config(format!("unknown loss `{other}`"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.short_name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub gamma: f64,
    /// Per-class balancing weights; `None` means all ones.
    #[serde(default)]
    pub alpha: Option<Vec<f64>>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

impl LossConfig {
    pub fn new(kind: LossKind) -> Self {
        Self { kind, gamma: kind.default_gamma(), alpha: None, epsilon: DEFAULT_EPSILON }
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn with_alpha(mut self, alpha: Vec<f64>) -> Self {
        self.alpha = Some(alpha);
        self
    }

    pub fn check(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if let Some(alpha) = &self.alpha {
            if alpha.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(Error::Config("alpha entries must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::new(LossKind::AdaptiveFocal)
    }
}

/// Supervision for one sample.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Hard(usize),
    Soft(&'a SoftLabel),
}

/// Annotation totals per class plus the smoothing exponent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassFrequency {
    pub counts: Vec<u64>,
    pub beta: f64,
}

impl ClassFrequency {
    pub fn new(counts: Vec<u64>) -> Self {
        Self { counts, beta: DEFAULT_BETA }
    }
}

/// Inverse-frequency weights `(min L / L_r)^beta`.
pub fn class_alpha(freq: &ClassFrequency, taxonomy: Option<&RelationshipTaxonomy>) -> Result<Vec<f64>> {
    if let Some(r) = freq.counts.iter().position(|&c| c == 0) {
        let name = taxonomy.map_or_else(|| format!("#{r}"), |t| t.name(r).to_string());
        return Err(Error::ZeroCount(name));
    }
    let min = *freq.counts.iter().min().ok_or(Error::EmptySplit)? as f64;
    Ok(freq.counts.iter().map(|&c| (min / c as f64).powf(freq.beta)).collect())
}

/// Numerically stable softmax.
pub fn softmax(scores: ArrayView1<f64>) -> Array1<f64> {
    let max = scores.fold(f64::NEG_INFINITY, |m, &s| m.max(s));
    let exp = scores.mapv(|s| (s - max).exp());
    let total = exp.sum();
    exp / total
}

fn alpha_at(alpha: Option<&[f64]>, r: usize) -> f64 {
    alpha.map_or(1.0, |a| a[r])
}

fn clamped_log(p: f64, eps: f64) -> f64 {
    p.max(eps).ln()
}

/// `-alpha_t * log p_t`.
pub fn cross_entropy(p: ArrayView1<f64>, target: usize, alpha: Option<&[f64]>, eps: f64) -> f64 {
    -alpha_at(alpha, target) * clamped_log(p[target], eps)
}

/// `-alpha_t * (1 - p_t)^gamma * log p_t`.
pub fn focal_loss(p: ArrayView1<f64>, target: usize, gamma: f64, alpha: Option<&[f64]>, eps: f64) -> f64 {
    let pt = p[target];
    -alpha_at(alpha, target) * (1.0 - pt).max(0.0).powf(gamma) * clamped_log(pt, eps)
}

/// `-sum_r alpha_r * max(y_r - p_r, 0)^gamma * log p_r`, where classes
/// predicted at or above their label share contribute nothing.
pub fn adaptive_focal_loss(
    p: ArrayView1<f64>,
    label: &SoftLabel,
    gamma: f64,
    alpha: Option<&[f64]>,
    eps: f64,
) -> f64 {
    let mut loss = 0.0;
    for (r, &y) in label.probs().iter().enumerate() {
        let gap = y - p[r];
        if gap > 0.0 {
            loss -= alpha_at(alpha, r) * gap.powf(gamma) * clamped_log(p[r], eps);
        }
    }
    loss
}

/// `sum_r alpha_r * y_r * log(y_r / p_r)` with `0 log 0 = 0`.
pub fn kl_divergence_loss(p: ArrayView1<f64>, label: &SoftLabel, alpha: Option<&[f64]>, eps: f64) -> f64 {
    label
        .probs()
        .iter()
        .enumerate()
        .filter(|(_, &y)| y > 0.0)
        .map(|(r, &y)| alpha_at(alpha, r) * y * (y.ln() - clamped_log(p[r], eps)))
        .sum()
}

/// Cross entropy between a label distribution and a prediction,
/// `-sum_r y_r log p_r`.
pub fn soft_cross_entropy(p: ArrayView1<f64>, label: &SoftLabel, eps: f64) -> f64 {
    -label
        .probs()
        .iter()
        .enumerate()
        .filter(|(_, &y)| y > 0.0)
        .map(|(r, &y)| y * clamped_log(p[r], eps))
        .sum::<f64>()
}

/// Shannon entropy of a label distribution in nats.
pub fn entropy(label: &SoftLabel) -> f64 {
    -label.probs().iter().filter(|&&y| y > 0.0).map(|&y| y * y.ln()).sum::<f64>()
}

fn check_target(kind: LossKind, target: &Target<'_>, num_classes: usize) -> Result<()> {
    match (kind.uses_soft_label(), target) {
        (false, Target::Soft(_)) => {
            return Err(Error::MismatchedTarget { loss: kind.short_name(), expected: "class index" })
        }
        (true, Target::Hard(_)) => {
            return Err(Error::MismatchedTarget { loss: kind.short_name(), expected: "soft label" })
        }
        _ => {}
    }
    match target {
        Target::Hard(t) if *t >= num_classes => {
            Err(Error::DimensionMismatch(format!("class {t} with {num_classes} scores")))
        }
        Target::Soft(y) if y.len() != num_classes => {
            Err(Error::DimensionMismatch(format!("soft label of length {} with {num_classes} scores", y.len())))
        }
        _ => Ok(()),
    }
}

/// Loss value given the probability vector.
pub fn loss_from_probs(config: &LossConfig, p: ArrayView1<f64>, target: Target<'_>) -> Result<f64> {
    check_target(config.kind, &target, p.len())?;
    let alpha = config.alpha.as_deref();
    let eps = config.epsilon;
    Ok(match (config.kind, target) {
        (LossKind::CrossEntropy, Target::Hard(t)) => cross_entropy(p, t, alpha, eps),
        (LossKind::Focal, Target::Hard(t)) => focal_loss(p, t, config.gamma, alpha, eps),
        (LossKind::KlDivergence, Target::Soft(y)) => kl_divergence_loss(p, y, alpha, eps),
        (LossKind::AdaptiveFocal, Target::Soft(y)) => adaptive_focal_loss(p, y, config.gamma, alpha, eps),
        _ => unreachable!("target kind checked above"),
    })
}

/// Loss value given pre-softmax scores.
pub fn loss_value(config: &LossConfig, scores: ArrayView1<f64>, target: Target<'_>) -> Result<f64> {
    loss_from_probs(config, softmax(scores).view(), target)
}

/// Derivative of `-w * m(p)^gamma * log p` in `p`, where `m(p)` is the
/// modulating base (`1 - p` or `y - p`, both with slope -1).
fn modulated_log_grad(weight: f64, base: f64, gamma: f64, p: f64, eps: f64) -> f64 {
    let log_p = clamped_log(p, eps);
    let dlog = if p > eps { 1.0 / p } else { 0.0 };
    let factor = base.powf(gamma);
    // d/dp base^gamma = -gamma * base^(gamma - 1); zero when gamma is 0
    let dfactor = if gamma == 0.0 || base <= 0.0 { 0.0 } else { -gamma * base.powf(gamma - 1.0) };
    -weight * (dfactor * log_p + factor * dlog)
}

/// Gradient of the loss with respect to the probability vector.
fn grad_wrt_probs(config: &LossConfig, p: ArrayView1<f64>, target: Target<'_>) -> Array1<f64> {
    let alpha = config.alpha.as_deref();
    let eps = config.epsilon;
    let mut g = Array1::zeros(p.len());
    match (config.kind, target) {
        (LossKind::CrossEntropy, Target::Hard(t)) => {
            g[t] = modulated_log_grad(alpha_at(alpha, t), 1.0, 0.0, p[t], eps);
        }
        (LossKind::Focal, Target::Hard(t)) => {
            let base = (1.0 - p[t]).max(0.0);
            g[t] = modulated_log_grad(alpha_at(alpha, t), base, config.gamma, p[t], eps);
        }
        (LossKind::KlDivergence, Target::Soft(y)) => {
            for (r, &yr) in y.probs().iter().enumerate() {
                if yr > 0.0 {
                    g[r] = modulated_log_grad(alpha_at(alpha, r) * yr, 1.0, 0.0, p[r], eps);
                }
            }
        }
        (LossKind::AdaptiveFocal, Target::Soft(y)) => {
            for (r, &yr) in y.probs().iter().enumerate() {
                let gap = yr - p[r];
                if gap > 0.0 {
                    g[r] = modulated_log_grad(alpha_at(alpha, r), gap, config.gamma, p[r], eps);
                }
            }
        }
        _ => unreachable!("target kind checked by caller"),
    }
    g
}

/// Pulls a gradient with respect to softmax outputs back to the scores:
/// `dL/ds_j = p_j * (g_j - sum_i p_i g_i)`.
pub fn softmax_backward(p: ArrayView1<f64>, grad_p: ArrayView1<f64>) -> Array1<f64> {
    let dot = p.dot(&grad_p);
    let mut out = grad_p.to_owned();
    out.zip_mut_with(&p, |g, &pj| *g = pj * (*g - dot));
    out
}

/// Loss value and its exact gradient with respect to the pre-softmax scores.
pub fn loss_and_gradient(config: &LossConfig, scores: ArrayView1<f64>, target: Target<'_>) -> Result<(f64, Array1<f64>)> {
    let p = softmax(scores);
    let loss = loss_from_probs(config, p.view(), target)?;
    let grad_p = grad_wrt_probs(config, p.view(), target);
    Ok((loss, softmax_backward(p.view(), grad_p.view())))
}

pub fn loss_gradient(config: &LossConfig, scores: ArrayView1<f64>, target: Target<'_>) -> Result<Array1<f64>> {
    Ok(loss_and_gradient(config, scores, target)?.1)
}
