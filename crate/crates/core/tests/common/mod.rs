//! Checks shared by the per-module integration tests and the acceptance
//! report. Each returns `Ok(summary)` or `Err(first failure)`.

#![allow(dead_code)]

use std::time::{Duration, Instant};

use ndarray::{arr1, Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dualglance::attention::{self, aggregate, AggregationMode, AttentionParams, RegionBag};
use dualglance::geometry::{iou, select_contextual_regions, RegionProposal};
use dualglance::losses::{
    adaptive_focal_loss, cross_entropy, entropy, focal_loss, kl_divergence_loss, loss_and_gradient, loss_value,
    soft_cross_entropy, softmax, LossConfig, LossKind, Target, DEFAULT_EPSILON,
};
use dualglance::metrics::{average_precision, evaluate};
use dualglance::types::{BoundingBox, SoftLabel};

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn timed(limit: Duration, f: impl FnOnce() -> Check) -> Check {
    let start = Instant::now();
    let out = f()?;
    let elapsed = start.elapsed();
    if elapsed > limit {
        return Err(format!("{out}, but took {elapsed:.2?} (limit {limit:?})"));
    }
    Ok(format!("{out} in {elapsed:.2?}"))
}

pub fn random_scores(rng: &mut impl Rng, n: usize, spread: f64) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.gen_range(-spread..spread))
}

pub fn random_distribution(rng: &mut impl Rng, n: usize, zero_prob: f64) -> Vec<f64> {
    loop {
        let raw: Vec<f64> = (0..n).map(|_| if rng.gen_bool(zero_prob) { 0.0 } else { rng.gen::<f64>() }).collect();
        let total: f64 = raw.iter().sum();
        if total > 0.0 {
            return raw.iter().map(|v| v / total).collect();
        }
    }
}

pub fn random_alpha(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(0.05..=1.0)).collect()
}

/// `|a - b| <= tol * max(|a|, |b|, floor)`.
pub fn close(a: f64, b: f64, tol: f64, floor: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(floor)
}

// ---- losses ----

pub fn loss_identities(draws: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    for i in 0..draws {
        let n = rng.gen_range(2..=12);
        let p = arr1(&random_distribution(&mut rng, n, 0.0));
        let t = rng.gen_range(0..n);
        let alpha = rng.gen_bool(0.5).then(|| random_alpha(&mut rng, n));
        let a = alpha.as_deref();
        let ce = cross_entropy(p.view(), t, a, DEFAULT_EPSILON);
        let fl0 = focal_loss(p.view(), t, 0.0, a, DEFAULT_EPSILON);
        worst = worst.max((ce - fl0).abs());
        if (ce - fl0).abs() > 1e-12 {
            return Err(format!("draw {i}: focal(gamma=0) {fl0} vs cross entropy {ce}"));
        }
        let one_hot = SoftLabel::one_hot(n, t);
        for gamma in [0.0, 0.5, 1.0, 2.0, rng.gen_range(0.0..5.0)] {
            let fl = focal_loss(p.view(), t, gamma, a, DEFAULT_EPSILON);
            let ada = adaptive_focal_loss(p.view(), &one_hot, gamma, a, DEFAULT_EPSILON);
            worst = worst.max((fl - ada).abs());
            if (fl - ada).abs() > 1e-12 {
                return Err(format!("draw {i}, gamma {gamma}: adaptive(one-hot) {ada} vs focal {fl}"));
            }
        }
    }
    Ok(format!("{draws} draws, max deviation {worst:.1e}"))
}

pub fn kl_entropy_decomposition(draws: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    for i in 0..draws {
        let n = rng.gen_range(2..=12);
        let p = arr1(&random_distribution(&mut rng, n, 0.0));
        let y = SoftLabel::from_probs(random_distribution(&mut rng, n, 0.3));
        let kl = kl_divergence_loss(p.view(), &y, None, DEFAULT_EPSILON);
        let h = entropy(&y);
        let ce = soft_cross_entropy(p.view(), &y, DEFAULT_EPSILON);
        worst = worst.max((kl + h - ce).abs());
        if (kl + h - ce).abs() > 1e-9 {
            return Err(format!("draw {i}: KL {kl} + H {h} != CE {ce}"));
        }
    }
    Ok(format!("{draws} draws, max deviation {worst:.1e}"))
}

/// Distance from the nearest Ada-FL kink (`y_r = p_r`) over all classes.
fn adaptive_margin(scores: ArrayView1<f64>, y: &SoftLabel) -> f64 {
    let p = softmax(scores);
    y.probs().iter().zip(&p).map(|(yr, pr)| (yr - pr).abs()).fold(f64::INFINITY, f64::min)
}

fn central_difference(f: impl Fn(&Array1<f64>) -> f64, x: &Array1<f64>, h: f64) -> Array1<f64> {
    let mut out = Array1::zeros(x.len());
    for j in 0..x.len() {
        let mut up = x.clone();
        up[j] += h;
        let mut down = x.clone();
        down[j] -= h;
        out[j] = (f(&up) - f(&down)) / (2.0 * h);
    }
    out
}

pub const GRAD_TOL: f64 = 1e-5;
/// Magnitude below which a gradient entry is compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-3;
/// Finite-difference step; entries must also agree within `GRAD_ABS_TOL`.
const FD_STEP: f64 = 1e-5;
pub const GRAD_ABS_TOL: f64 = 1e-6;

/// Every loss kind, gamma in {0, 1, 2}, with and without alpha.
pub fn loss_gradients(instances: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut checked = 0usize;
    let mut skipped = 0usize;
    let mut worst = 0.0f64;
    for kind in [LossKind::CrossEntropy, LossKind::Focal, LossKind::KlDivergence, LossKind::AdaptiveFocal] {
        for gamma in [0.0, 1.0, 2.0] {
            for with_alpha in [false, true] {
                let mut done = 0;
                while done < instances {
                    let n = rng.gen_range(2..=8);
                    let scores = random_scores(&mut rng, n, 3.0);
                    let mut config = LossConfig::new(kind).with_gamma(gamma);
                    if with_alpha {
                        config = config.with_alpha(random_alpha(&mut rng, n));
                    }
                    let soft = SoftLabel::from_probs(random_distribution(&mut rng, n, 0.3));
                    let target = if kind.uses_soft_label() { Target::Soft(&soft) } else { Target::Hard(rng.gen_range(0..n)) };
                    if kind == LossKind::AdaptiveFocal && adaptive_margin(scores.view(), &soft) < 1e-4 {
                        skipped += 1;
                        continue;
                    }
                    let (_, analytic) = loss_and_gradient(&config, scores.view(), target).map_err(|e| e.to_string())?;
                    let numeric = central_difference(|s| loss_value(&config, s.view(), target).unwrap(), &scores, FD_STEP);
                    for j in 0..n {
                        let err = (analytic[j] - numeric[j]).abs() / analytic[j].abs().max(numeric[j].abs()).max(GRAD_FLOOR);
                        worst = worst.max(err);
                        if err > GRAD_TOL || (analytic[j] - numeric[j]).abs() > GRAD_ABS_TOL {
                            return Err(format!(
                                "{kind} gamma {gamma} alpha {with_alpha}: d/ds{j} analytic {} numeric {} (scores {scores})",
                                analytic[j], numeric[j]
                            ));
                        }
                    }
                    done += 1;
                    checked += 1;
                }
            }
        }
    }
    Ok(format!("{checked} loss instances, max relative error {worst:.1e}, {skipped} near-kink draws redrawn"))
}

/// Toy attention head plus fusion and a loss; parameters flattened so one
/// finite-difference routine covers every input.
struct AttentionInstance {
    n: usize,
    k: usize,
    r: usize,
    s1: Array1<f64>,
    target: usize,
}

impl AttentionInstance {
    fn sizes(&self) -> [usize; 8] {
        let (n, k, r) = (self.n, self.k, self.r);
        // features, v_top, score_w, score_b, gate, attn_w, attn_b, fusion
        [n * k, k, r * k, r, k, k, 1, r]
    }

    fn split<'a>(&self, x: &'a Array1<f64>) -> Vec<ArrayView1<'a, f64>> {
        let mut out = Vec::new();
        let mut at = 0;
        for len in self.sizes() {
            out.push(x.slice(ndarray::s![at..at + len]));
            at += len;
        }
        out
    }

    fn forward(&self, x: &Array1<f64>) -> (attention::AttentionForward, Array1<f64>) {
        let parts = self.split(x);
        let (n, k, r) = (self.n, self.k, self.r);
        let bag = RegionBag::new(parts[0].to_owned().into_shape_with_order((n, k)).unwrap());
        let score_w = parts[2].to_owned().into_shape_with_order((r, k)).unwrap();
        let params = AttentionParams {
            score_w: score_w.view(),
            score_b: parts[3],
            gate: parts[4],
            attn_w: parts[5],
            attn_b: parts[6][0],
        };
        let fwd = attention::forward(&bag, parts[1], &params, AggregationMode::Attention).unwrap();
        let fused = &self.s1 + &(&parts[7] * &fwd.output);
        (fwd, fused)
    }

    fn loss(&self, x: &Array1<f64>) -> f64 {
        let (_, fused) = self.forward(x);
        loss_value(&LossConfig::new(LossKind::CrossEntropy), fused.view(), Target::Hard(self.target)).unwrap()
    }

    fn gradient(&self, x: &Array1<f64>) -> Array1<f64> {
        let parts = self.split(x);
        let (n, k, r) = (self.n, self.k, self.r);
        let (fwd, fused) = self.forward(x);
        let (_, d_fused) =
            loss_and_gradient(&LossConfig::new(LossKind::CrossEntropy), fused.view(), Target::Hard(self.target)).unwrap();
        let d_out = &d_fused * &parts[7];
        let d_fusion = &d_fused * &fwd.output;
        let bag = RegionBag::new(parts[0].to_owned().into_shape_with_order((n, k)).unwrap());
        let score_w = parts[2].to_owned().into_shape_with_order((r, k)).unwrap();
        let params = AttentionParams {
            score_w: score_w.view(),
            score_b: parts[3],
            gate: parts[4],
            attn_w: parts[5],
            attn_b: parts[6][0],
        };
        let g = attention::backward(&bag, parts[1], &params, &fwd, AggregationMode::Attention, d_out.view());
        let mut out = Vec::with_capacity(x.len());
        out.extend(g.features.iter());
        out.extend(g.v_top.iter());
        out.extend(g.score_w.iter());
        out.extend(g.score_b.iter());
        out.extend(g.gate.iter());
        out.extend(g.attn_w.iter());
        out.push(g.attn_b);
        out.extend(d_fusion.iter());
        Array1::from(out)
    }

    /// Smallest |pre-activation| of the gating ReLU.
    fn relu_margin(&self, x: &Array1<f64>) -> f64 {
        self.forward(x).0.gate_input.fold(f64::INFINITY, |m, &u| m.min(u.abs()))
    }
}

/// Region scores, gated sigmoid attention, aggregation, fusion and softmax
/// cross entropy against central differences.
pub fn attention_chain_gradients(instances: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    let mut done = 0;
    let mut redrawn = 0;
    while done < instances {
        let r = rng.gen_range(2..=5);
        let inst = AttentionInstance {
            n: rng.gen_range(1..=6),
            k: rng.gen_range(1..=5),
            r,
            s1: random_scores(&mut rng, r, 1.0),
            target: rng.gen_range(0..r),
        };
        let len: usize = inst.sizes().iter().sum();
        let x = random_scores(&mut rng, len, 1.5);
        if inst.relu_margin(&x) < 1e-4 {
            redrawn += 1;
            continue;
        }
        let analytic = inst.gradient(&x);
        let numeric = central_difference(|v| inst.loss(v), &x, FD_STEP);
        for j in 0..len {
            let err = (analytic[j] - numeric[j]).abs() / analytic[j].abs().max(numeric[j].abs()).max(GRAD_FLOOR);
            worst = worst.max(err);
            if err > GRAD_TOL || (analytic[j] - numeric[j]).abs() > GRAD_ABS_TOL {
                return Err(format!("instance {done}: entry {j} analytic {} numeric {}", analytic[j], numeric[j]));
            }
        }
        done += 1;
    }
    Ok(format!("{instances} attention chains, max relative error {worst:.1e}, {redrawn} near-kink draws redrawn"))
}

// ---- geometry ----

pub fn random_box(rng: &mut impl Rng, extent: f64) -> BoundingBox {
    let (a, b) = (rng.gen_range(0.0..extent), rng.gen_range(0.0..extent));
    let (c, d) = (rng.gen_range(0.0..extent), rng.gen_range(0.0..extent));
    BoundingBox::from([a.min(b), c.min(d), a.max(b), c.max(d)])
}

fn random_grid_box(rng: &mut impl Rng, extent: i64) -> [i64; 4] {
    let x0 = rng.gen_range(0..extent);
    let y0 = rng.gen_range(0..extent);
    [x0, y0, rng.gen_range(x0 + 1..=extent), rng.gen_range(y0 + 1..=extent)]
}

/// IoU by counting unit cells covered by each box.
pub fn rasterized_iou(a: [i64; 4], b: [i64; 4], extent: i64) -> f64 {
    let inside = |bx: [i64; 4], x: i64, y: i64| x >= bx[0] && x < bx[2] && y >= bx[1] && y < bx[3];
    let (mut inter, mut union) = (0u64, 0u64);
    for y in 0..=extent {
        for x in 0..=extent {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn to_box(b: [i64; 4]) -> BoundingBox {
    BoundingBox::from([b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64])
}

pub fn iou_properties(pairs: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    for i in 0..pairs {
        let (a, b) = (random_box(&mut rng, 100.0), random_box(&mut rng, 100.0));
        let (ab, ba) = (iou(&a, &b), iou(&b, &a));
        if ab != ba || !(0.0..=1.0).contains(&ab) {
            return Err(format!("pair {i}: iou {ab} / {ba} for {a:?} {b:?}"));
        }
        if a.area() > 0.0 && (iou(&a, &a) - 1.0).abs() > 1e-12 {
            return Err(format!("pair {i}: self-iou {} for {a:?}", iou(&a, &a)));
        }
    }
    const EXTENT: i64 = 24;
    let mut worst = 0.0f64;
    for i in 0..pairs {
        let (a, b) = (random_grid_box(&mut rng, EXTENT), random_grid_box(&mut rng, EXTENT));
        let exact = iou(&to_box(a), &to_box(b));
        let counted = rasterized_iou(a, b, EXTENT);
        worst = worst.max((exact - counted).abs());
        if (exact - counted).abs() > 1e-6 {
            return Err(format!("grid pair {i}: iou {exact} vs rasterized {counted} for {a:?} {b:?}"));
        }
    }
    Ok(format!("{pairs} continuous pairs symmetric and bounded, {pairs} grid pairs within {worst:.1e} of the raster count"))
}

pub fn random_proposals(rng: &mut impl Rng, count: usize, extent: f64) -> Vec<RegionProposal> {
    (0..count)
        .map(|_| RegionProposal { bbox: random_box(rng, extent), objectness: (rng.gen_range(0..20) as f64) / 20.0 })
        .collect()
}

pub fn selection_properties(trials: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    for trial in 0..trials {
        let (b1, b2) = (random_box(&mut rng, 60.0), random_box(&mut rng, 60.0));
        let count = rng.gen_range(0..40);
        let mut proposals = random_proposals(&mut rng, count, 60.0);
        // some near-duplicates of the persons so high overlaps occur
        for _ in 0..rng.gen_range(0..5) {
            let jitter = |v: f64, rng: &mut ChaCha8Rng| v + rng.gen_range(-3.0..3.0);
            let src = if rng.gen_bool(0.5) { b1 } else { b2 };
            let (x0, y0) = (jitter(src.x_min, &mut rng), jitter(src.y_min, &mut rng));
            let (x1, y1) = (jitter(src.x_max, &mut rng), jitter(src.y_max, &mut rng));
            proposals.push(RegionProposal {
                bbox: BoundingBox::from([x0.min(x1), y0.min(y1), x0.max(x1), y0.max(y1)]),
                objectness: rng.gen(),
            });
        }
        let m = rng.gen_range(0..35);
        let mut taus: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..=1.0)).collect();
        taus.push(0.7);
        taus.sort_by(f64::total_cmp);
        let mut previous_all: Option<Vec<RegionProposal>> = None;
        let mut previous_count = 0;
        for &tau in &taus {
            let kept = select_contextual_regions(&proposals, &b1, &b2, tau, m);
            if kept.len() > m {
                return Err(format!("trial {trial}: kept {} > m {m}", kept.len()));
            }
            if let Some(c) = kept.iter().find(|c| iou(&c.bbox, &b1).max(iou(&c.bbox, &b2)) >= tau) {
                return Err(format!("trial {trial}: kept {c:?} violates tau {tau}"));
            }
            if kept.windows(2).any(|w| w[0].objectness < w[1].objectness) {
                return Err(format!("trial {trial}: output not sorted by objectness"));
            }
            if kept.len() < previous_count {
                return Err(format!("trial {trial}: count fell from {previous_count} to {} as tau rose to {tau}", kept.len()));
            }
            previous_count = kept.len();
            let all = select_contextual_regions(&proposals, &b1, &b2, tau, usize::MAX);
            if let Some(prev) = &previous_all {
                if prev.iter().any(|c| !all.contains(c)) {
                    return Err(format!("trial {trial}: raising tau to {tau} dropped a region"));
                }
            }
            previous_all = Some(all);
        }
    }
    Ok(format!("{trials} selections respect tau_u and m, monotone in tau_u"))
}

// ---- aggregation ----

pub fn worked_example() -> Check {
    let scores = ndarray::array![[1.0, 2.0], [3.0, 4.0]];
    let out = aggregate(scores.view(), arr1(&[1.0, 0.0]).view(), AggregationMode::Attention).map_err(|e| e.to_string())?;
    if out != arr1(&[0.5, 1.0]) {
        return Err(format!("N=2 example gave {out}"));
    }
    Ok("N=2 example gives (0.5, 1.0) exactly".into())
}

pub fn unit_weights_match_avg(trials: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    for t in 0..trials {
        let (n, r) = (rng.gen_range(1..=30), rng.gen_range(1..=10));
        let scores = Array2::from_shape_fn((n, r), |_| rng.gen_range(-1e3..1e3));
        let ones = Array1::ones(n);
        let att = aggregate(scores.view(), ones.view(), AggregationMode::Attention).map_err(|e| e.to_string())?;
        let avg = aggregate(scores.view(), ones.view(), AggregationMode::Avg).map_err(|e| e.to_string())?;
        if att.iter().zip(&avg).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(format!("trial {t}: attention {att} vs avg {avg}"));
        }
    }
    Ok(format!("{trials} bags: unit-weight attention equals avg bitwise"))
}

/// Shuffling the bag leaves every mode's output unchanged (max exactly,
/// the sums up to reassociation).
pub fn permutation_invariance(shuffles: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    let (n, k, r) = (12, 6, 5);
    let features = Array2::from_shape_fn((n, k), |_| rng.gen_range(-1.0..1.0));
    let v_top = random_scores(&mut rng, k, 1.0);
    let score_w = Array2::from_shape_fn((r, k), |_| rng.gen_range(-1.0..1.0));
    let score_b = random_scores(&mut rng, r, 0.5);
    let gate = random_scores(&mut rng, k, 1.0);
    let attn_w = random_scores(&mut rng, k, 1.0);
    let params = AttentionParams {
        score_w: score_w.view(),
        score_b: score_b.view(),
        gate: gate.view(),
        attn_w: attn_w.view(),
        attn_b: 0.1,
    };
    let modes = [AggregationMode::Attention, AggregationMode::Avg, AggregationMode::Max];
    let reference: Vec<Array1<f64>> = modes
        .iter()
        .map(|&m| attention::forward(&RegionBag::new(features.clone()), v_top.view(), &params, m).unwrap().output)
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    for s in 0..shuffles {
        order.shuffle(&mut rng);
        let shuffled = features.select(ndarray::Axis(0), &order);
        for (mode, expected) in modes.iter().zip(&reference) {
            let out = attention::forward(&RegionBag::new(shuffled.clone()), v_top.view(), &params, *mode).unwrap().output;
            let ok = out.iter().zip(expected).all(|(a, b)| match mode {
                AggregationMode::Max => a.to_bits() == b.to_bits(),
                _ => close(*a, *b, 1e-12, 1.0),
            });
            if !ok {
                return Err(format!("shuffle {s}, {mode}: {out} vs {expected}"));
            }
        }
    }
    Ok(format!("{shuffles} shuffles leave attention, avg and max outputs unchanged"))
}

// ---- metrics ----

/// AP as the sum of precision times recall increment over every cutoff of
/// the ranking, ties broken by input position.
pub fn brute_force_ap(scores: &[f64], positives: &[bool]) -> f64 {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    // insertion sort: descending score, earlier index first on ties
    for i in 1..n {
        let mut j = i;
        while j > 0 && scores[order[j - 1]] < scores[order[j]] {
            order.swap(j - 1, j);
            j -= 1;
        }
    }
    let total = positives.iter().filter(|&&p| p).count() as f64;
    let mut ap = 0.0;
    let mut previous_recall = 0.0;
    for cutoff in 1..=n {
        let hits = order[..cutoff].iter().filter(|&&i| positives[i]).count() as f64;
        let precision = hits / cutoff as f64;
        let recall = hits / total;
        ap += precision * (recall - previous_recall);
        previous_recall = recall;
    }
    ap
}

/// Every labelling of up to 10 ranked samples with distinct scores, and
/// every score vector over three tie levels for up to 7 samples.
pub fn ap_oracle() -> Check {
    let mut datasets = 0u64;
    let mut compare = |scores: &[f64], positives: &[bool]| -> std::result::Result<(), String> {
        datasets += 1;
        let got = average_precision(scores, positives).map_err(|e| e.to_string())?;
        let want = brute_force_ap(scores, positives);
        if (got - want).abs() > 1e-12 {
            return Err(format!("scores {scores:?} positives {positives:?}: {got} vs oracle {want}"));
        }
        Ok(())
    };
    for n in 1..=10usize {
        let scores: Vec<f64> = (0..n).map(|i| (n - i) as f64 * 0.1).collect();
        for mask in 1u32..(1 << n) {
            let positives: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
            compare(&scores, &positives)?;
        }
    }
    for n in 1..=7usize {
        for code in 0..3u32.pow(n as u32) {
            let scores: Vec<f64> = (0..n).map(|i| (code / 3u32.pow(i as u32) % 3) as f64).collect();
            for mask in 1u32..(1 << n) {
                let positives: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
                compare(&scores, &positives)?;
            }
        }
    }
    Ok(format!("{datasets} datasets match the precision/recall sweep"))
}

pub fn perfect_predictions_map(seed: u64) -> Check {
    let mut rng = rng(seed);
    let r = 6;
    let truths: Vec<usize> = (0..60).map(|i| if i < r { i } else { rng.gen_range(0..r) }).collect();
    let preds: Vec<Array1<f64>> = truths
        .iter()
        .map(|&t| {
            let mut p = Array1::from_shape_fn(r, |_| rng.gen_range(0.0..0.1));
            p[t] = 0.5;
            p
        })
        .collect();
    let result = evaluate(&preds, &truths, r).map_err(|e| e.to_string())?;
    if result.map != 1.0 {
        return Err(format!("perfect predictions gave mAP {}", result.map));
    }
    Ok("perfect predictions give mAP 1.0".into())
}
