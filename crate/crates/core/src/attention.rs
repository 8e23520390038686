//! Regional scoring and top-down gated attention over a bag of contextual
//! region features.
//!
//! For region features `v_i` and the pair feature `v_top`:
//!
//! ```text
//! s_i = W_s v_i + b_s
//! h_i = relu(v_i + w_top * v_top)
//! a_i = sigmoid(w_a . h_i + b_a)
//! S2  = (1/N) sum_i a_i s_i
//! ```
//!
//! The attention weights are independent sigmoids and the sum is divided by
//! `N`, not by the total attention.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    #[default]
    Attention,
    Avg,
    Max,
}

impl std::str::FromStr for AggregationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(Self::Attention),
            "avg" => Ok(Self::Avg),
            "max" => Ok(Self::Max),
            other => Err(Error::Config(format!("unknown aggregation `{other}`"))),
        }
    }
}

impl std::fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Attention => "attention",
            Self::Avg => "avg",
            Self::Max => "max",
        })
    }
}

/// Borrowed view of the attention head's parameters.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams<'a> {
    /// `R x k`
    pub score_w: ArrayView2<'a, f64>,
    pub score_b: ArrayView1<'a, f64>,
    /// Top-down gate `w_top`, length `k`.
    pub gate: ArrayView1<'a, f64>,
    /// Attention projection `W_{h,a}`, length `k`.
    pub attn_w: ArrayView1<'a, f64>,
    pub attn_b: f64,
}

impl AttentionParams<'_> {
    pub fn feature_dim(&self) -> usize {
        self.gate.len()
    }

    pub fn num_classes(&self) -> usize {
        self.score_b.len()
    }

    fn check(&self) -> Result<()> {
        let k = self.feature_dim();
        if self.score_w.dim() != (self.num_classes(), k) || self.attn_w.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "attention head: W_s {:?}, b_s {}, w_top {k}, W_ha {}",
                self.score_w.dim(),
                self.score_b.len(),
                self.attn_w.len()
            )));
        }
        Ok(())
    }
}

/// `N x k` regional features.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionBag {
    pub features: Array2<f64>,
}

impl RegionBag {
    pub fn new(features: Array2<f64>) -> Self {
        Self { features }
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Row `i` is `W_s v_i + b_s`.
pub fn regional_scores(bag: &RegionBag, params: &AttentionParams<'_>) -> Result<Array2<f64>> {
    params.check()?;
    if bag.is_empty() {
        return Err(Error::EmptyBag);
    }
    if bag.features.ncols() != params.feature_dim() {
        return Err(Error::DimensionMismatch(format!(
            "region features have {} dims, head expects {}",
            bag.features.ncols(),
            params.feature_dim()
        )));
    }
    Ok(bag.features.dot(&params.score_w.t()) + &params.score_b)
}

/// Pre-activation `v_i + w_top * v_top` for every region.
fn gate_input(bag: &RegionBag, v_top: ArrayView1<f64>, w_top: ArrayView1<f64>) -> Result<Array2<f64>> {
    let k = bag.features.ncols();
    if v_top.len() != k || w_top.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "features {k}, v_top {}, w_top {}",
            v_top.len(),
            w_top.len()
        )));
    }
    let top = &v_top * &w_top;
    Ok(&bag.features + &top)
}

/// `h_i = relu(v_i + w_top * v_top)`.
pub fn gated_features(bag: &RegionBag, v_top: ArrayView1<f64>, w_top: ArrayView1<f64>) -> Result<Array2<f64>> {
    Ok(gate_input(bag, v_top, w_top)?.mapv_into(|u| u.max(0.0)))
}

/// Logistic function, kept strictly inside `(0, 1)`.
pub fn sigmoid(z: f64) -> f64 {
    let s = if z >= 0.0 { 1.0 / (1.0 + (-z).exp()) } else { z.exp() / (1.0 + z.exp()) };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Derivative of the logistic function, accurate in both tails.
fn sigmoid_slope(z: f64) -> f64 {
    let e = (-z.abs()).exp();
    e / ((1.0 + e) * (1.0 + e))
}

/// `a_i = sigmoid(W_ha . h_i + b_a)`.
pub fn attention_weights(gated: ArrayView2<f64>, attn_w: ArrayView1<f64>, attn_b: f64) -> Result<Array1<f64>> {
    if gated.ncols() != attn_w.len() {
        return Err(Error::DimensionMismatch(format!(
            "gated features have {} dims, W_ha has {}",
            gated.ncols(),
            attn_w.len()
        )));
    }
    Ok(gated.dot(&attn_w).mapv_into(|z| sigmoid(z + attn_b)))
}

/// Collapses `N x R` regional scores into one score vector.
pub fn aggregate(scores: ArrayView2<f64>, weights: ArrayView1<f64>, mode: AggregationMode) -> Result<Array1<f64>> {
    let n = scores.nrows();
    if n == 0 {
        return Err(Error::EmptyBag);
    }
    match mode {
        AggregationMode::Attention => {
            if weights.len() != n {
                return Err(Error::DimensionMismatch(format!("{} weights for {n} regions", weights.len())));
            }
            let mut out = Array1::zeros(scores.ncols());
            for (row, &a) in scores.outer_iter().zip(weights) {
                out.scaled_add(a, &row);
            }
            Ok(out / n as f64)
        }
        AggregationMode::Avg => {
            let mut out = Array1::zeros(scores.ncols());
            for row in scores.outer_iter() {
                out += &row;
            }
            Ok(out / n as f64)
        }
        AggregationMode::Max => Ok(scores.fold_axis(Axis(0), f64::NEG_INFINITY, |&m, &s| m.max(s))),
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct AttentionForward {
    pub scores: Array2<f64>,
    pub gate_input: Array2<f64>,
    pub gated: Array2<f64>,
    pub logits: Array1<f64>,
    pub weights: Array1<f64>,
    pub output: Array1<f64>,
}

pub fn forward(
    bag: &RegionBag,
    v_top: ArrayView1<f64>,
    params: &AttentionParams<'_>,
    mode: AggregationMode,
) -> Result<AttentionForward> {
    let scores = regional_scores(bag, params)?;
    let gate_input = gate_input(bag, v_top, params.gate)?;
    let gated = gate_input.mapv(|u| u.max(0.0));
    let logits = gated.dot(&params.attn_w) + params.attn_b;
    let weights = logits.mapv(sigmoid);
    let output = aggregate(scores.view(), weights.view(), mode)?;
    Ok(AttentionForward { scores, gate_input, gated, logits, weights, output })
}

/// Gradients of a scalar loss through the attention head.
#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub features: Array2<f64>,
    pub v_top: Array1<f64>,
    pub score_w: Array2<f64>,
    pub score_b: Array1<f64>,
    pub gate: Array1<f64>,
    pub attn_w: Array1<f64>,
    pub attn_b: f64,
}

/// Backpropagates `d_output` (gradient with respect to the aggregated score)
/// to the region features, `v_top` and every head parameter.
pub fn backward(
    bag: &RegionBag,
    v_top: ArrayView1<f64>,
    params: &AttentionParams<'_>,
    fwd: &AttentionForward,
    mode: AggregationMode,
    d_output: ArrayView1<f64>,
) -> AttentionGrads {
    let n = bag.len();
    let k = params.feature_dim();
    let inv_n = 1.0 / n as f64;

    // gradient with respect to each regional score row
    let mut d_scores = Array2::<f64>::zeros(fwd.scores.dim());
    let mut d_logits = Array1::<f64>::zeros(n);
    match mode {
        AggregationMode::Attention => {
            for i in 0..n {
                d_scores.row_mut(i).assign(&(&d_output * (fwd.weights[i] * inv_n)));
                let d_a = fwd.scores.row(i).dot(&d_output) * inv_n;
                d_logits[i] = d_a * sigmoid_slope(fwd.logits[i]);
            }
        }
        AggregationMode::Avg => {
            for mut row in d_scores.outer_iter_mut() {
                row.assign(&(&d_output * inv_n));
            }
        }
        AggregationMode::Max => {
            for (r, &g) in d_output.iter().enumerate() {
                let col = fwd.scores.column(r);
                let mut best = 0;
                for i in 1..n {
                    if col[i] > col[best] {
                        best = i;
                    }
                }
                d_scores[[best, r]] = g;
            }
        }
    }

    let score_w = d_scores.t().dot(&bag.features);
    let score_b = d_scores.sum_axis(Axis(0));
    let mut features = d_scores.dot(&params.score_w);

    let attn_w = fwd.gated.t().dot(&d_logits);
    let attn_b = d_logits.sum();
    let mut d_gate_input = Array2::<f64>::zeros((n, k));
    for i in 0..n {
        if d_logits[i] == 0.0 {
            continue;
        }
        for j in 0..k {
            if fwd.gate_input[[i, j]] > 0.0 {
                d_gate_input[[i, j]] = d_logits[i] * params.attn_w[j];
            }
        }
    }
    features += &d_gate_input;
    let d_top = d_gate_input.sum_axis(Axis(0));
    let gate = &d_top * &v_top;
    let v_top_grad = &d_top * &params.gate;

    AttentionGrads { features, v_top: v_top_grad, score_w, score_b, gate, attn_w, attn_b }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn regional_score_examples() {
        let bag = RegionBag::new(array![[1.0, -2.0, 0.5], [0.0, 0.0, 0.0]]);
        let zero_w = Array2::zeros((2, 3));
        let b = array![0.3, -0.7];
        let gate = Array1::zeros(3);
        let params = AttentionParams {
            score_w: zero_w.view(),
            score_b: b.view(),
            gate: gate.view(),
            attn_w: gate.view(),
            attn_b: 0.0,
        };
        let s = regional_scores(&bag, &params).unwrap();
        assert_eq!(s.row(0), b);
        assert_eq!(s.row(1), b);

        let w = array![[0.5, 1.0, -1.0], [2.0, 0.0, 3.0]];
        let params = AttentionParams { score_w: w.view(), ..params };
        let s = regional_scores(&bag, &params).unwrap();
        // zero features give the bias exactly
        assert_eq!(s.row(1), b);
        // naive loop
        for r in 0..2 {
            let mut acc = b[r];
            for j in 0..3 {
                acc += w[[r, j]] * bag.features[[0, j]];
            }
            assert!((s[[0, r]] - acc).abs() < 1e-15);
        }
        let empty = RegionBag::new(Array2::zeros((0, 3)));
        assert!(matches!(regional_scores(&empty, &params), Err(Error::EmptyBag)));
    }

    #[test]
    fn gating_examples() {
        let bag = RegionBag::new(array![[1.0, -2.0], [-0.5, 3.0]]);
        let v_top = array![4.0, 1.0];
        let h = gated_features(&bag, v_top.view(), Array1::zeros(2).view()).unwrap();
        assert_eq!(h, array![[1.0, 0.0], [0.0, 3.0]]);
        let h = gated_features(&bag, v_top.view(), array![-1.0, -10.0].view()).unwrap();
        assert_eq!(h, array![[0.0, 0.0], [0.0, 0.0]]);
        let w_top = array![0.5, -0.25];
        let h = gated_features(&bag, v_top.view(), w_top.view()).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let expected = f64::max(0.0, bag.features[[i, j]] + w_top[j] * v_top[j]);
                assert_eq!(h[[i, j]], expected);
            }
        }
        assert!(matches!(
            gated_features(&bag, array![1.0].view(), w_top.view()),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn attention_weight_examples() {
        let h = array![[1.0, 2.0], [0.0, 5.0]];
        let a = attention_weights(h.view(), Array1::zeros(2).view(), 0.0).unwrap();
        assert_eq!(a, array![0.5, 0.5]);
        let a = attention_weights(h.view(), Array1::zeros(2).view(), 50.0).unwrap();
        assert!(a.iter().all(|&v| v > 1.0 - 1e-9 && v < 1.0));
        let w = array![0.3, -0.2];
        let a = attention_weights(h.view(), w.view(), 0.1).unwrap();
        for i in 0..2 {
            let z = h[[i, 0]] * w[0] + h[[i, 1]] * w[1] + 0.1;
            assert!((a[i] - 1.0 / (1.0 + (-z).exp())).abs() < 1e-15);
        }
        assert!(sigmoid(-800.0) > 0.0);
    }

    #[test]
    fn aggregation_examples() {
        let s = array![[1.0, 2.0], [3.0, 4.0]];
        let out = aggregate(s.view(), array![1.0, 0.0].view(), AggregationMode::Attention).unwrap();
        assert_eq!(out, array![0.5, 1.0]);
        let ones = aggregate(s.view(), array![1.0, 1.0].view(), AggregationMode::Attention).unwrap();
        let avg = aggregate(s.view(), array![0.3, 0.1].view(), AggregationMode::Avg).unwrap();
        assert_eq!(ones, avg);
        let m = aggregate(array![[1.0, 4.0], [3.0, 2.0]].view(), array![].view(), AggregationMode::Max).unwrap();
        assert_eq!(m, array![3.0, 4.0]);
        assert!(matches!(
            aggregate(Array2::zeros((0, 2)).view(), array![].view(), AggregationMode::Avg),
            Err(Error::EmptyBag)
        ));
    }
}
