//! The two-branch pair model.
//!
//! The first branch looks at the pair itself: both person crops go through
//! one shared tower, the union crop through a second tower, the normalized
//! box geometry through a small fc layer, and two fc layers on top produce
//! the pair score `S1` and the penultimate activation `v_top`. The second
//! branch runs a convolutional network over the whole image, ROI-pools every
//! contextual region, projects it to a `k`-dimensional feature and feeds the
//! bag to the attention head. Scores are fused as `S = S1 + w * S2`.

pub mod nn;
pub mod roi;

use std::any::Any;

use ndarray::{concatenate, s, Array1, Array2, Array3, ArrayD, ArrayView1, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, AggregationMode, AttentionForward, AttentionParams, RegionBag};
use crate::error::{Error, Result};
use crate::geometry::GEOMETRY_DIM;
use crate::losses::{self, LossConfig, Target};
use crate::types::BoundingBox;

pub use nn::{Backbone, BackboneKind, BackboneSpec, ParamStore, ToyCnn};
pub use roi::{crop_patches, roi_pool, to_feature_coords};

/// Name prefixes of the two parameter groups.
pub const FIRST_GLANCE_PREFIX: &str = "first.";
pub const SECOND_GLANCE_PREFIXES: [&str; 2] = ["second.", "fusion."];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub num_classes: usize,
    #[serde(default = "default_channels")]
    pub in_channels: usize,
    /// Architecture shared by the person tower and the union tower (their
    /// weights are separate).
    pub first_glance: BackboneSpec,
    pub second_glance: BackboneSpec,
    pub geometry_hidden: usize,
    /// Width `k` of `v_top` and of each regional feature.
    pub feature_dim: usize,
    pub roi_grid: (usize, usize),
}

fn default_channels() -> usize {
    3
}

impl ModelSpec {
    /// Desk-scale defaults for small synthetic images.
    pub fn toy(num_classes: usize) -> Self {
        Self {
            num_classes,
            in_channels: 3,
            first_glance: BackboneSpec::toy(16, &[(8, 3), (16, 3)]),
            second_glance: BackboneSpec::toy(16, &[(8, 3), (16, 3)]),
            geometry_hidden: 16,
            feature_dim: 32,
            roi_grid: (2, 2),
        }
    }

    pub fn check(&self) -> Result<()> {
        self.first_glance.check()?;
        self.second_glance.check()?;
        if self.num_classes == 0 || self.feature_dim == 0 || self.geometry_hidden == 0 || self.in_channels == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.roi_grid.0 == 0 || self.roi_grid.1 == 0 {
            return Err(Error::Config("roi_grid must be positive".into()));
        }
        let (_, h, w) = ToyCnn { layers: self.first_glance.layers.clone() }
            .output_dims((self.in_channels, self.first_glance.patch_size, self.first_glance.patch_size));
        if h == 0 || w == 0 {
            return Err(Error::Config("patch_size too small for the first-glance tower depth".into()));
        }
        Ok(())
    }
}

/// Inputs of the first branch for one pair.
#[derive(Debug, Clone)]
pub struct PairInput {
    /// Person 1, person 2 and union crops.
    pub patches: [Array3<f64>; 3],
    /// Normalized geometry of box 1 followed by box 2.
    pub geometry: [f64; 2 * GEOMETRY_DIM],
}

/// Everything the model consumes for one sample.
#[derive(Debug, Clone)]
pub struct SampleInput {
    pub pair: PairInput,
    /// Full image, channels x height x width.
    pub image: Array3<f64>,
    /// Contextual regions in image coordinates, already filtered and capped.
    pub regions: Vec<BoundingBox>,
}

pub struct FirstGlanceOutput {
    pub s1: Array1<f64>,
    pub v_top: Array1<f64>,
    tower_caches: Vec<(Box<dyn Any + Send>, (usize, usize, usize))>,
    geom_pre: Array1<f64>,
    concat: Array1<f64>,
    top_pre: Array1<f64>,
}

pub struct ContextFeatures {
    pub map: Array3<f64>,
    cache: Box<dyn Any + Send>,
}

pub struct SecondGlanceOutput {
    pub s2: Array1<f64>,
    /// Per-region attention, aligned with `kept`.
    pub attention: Array1<f64>,
    /// Indices into the input region list that fell inside the feature map.
    pub kept: Vec<usize>,
    pooled: Vec<roi::RoiPooled>,
    region_in: Array2<f64>,
    region_pre: Array2<f64>,
    bag: RegionBag,
    head: AttentionForward,
}

/// Final scores of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub s1: Array1<f64>,
    pub s2: Option<Array1<f64>>,
    pub scores: Array1<f64>,
    pub probs: Array1<f64>,
    /// Attention per input region; `None` where a region was skipped or the
    /// bag was empty.
    pub attention: Vec<Option<f64>>,
}

/// Which parameters a training step updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStage {
    /// Pair branch alone, supervised through `softmax(S1)`.
    FirstGlance,
    /// Context branch and fusion weights with the pair branch frozen;
    /// `v_top` is a constant input.
    SecondGlance,
    /// Both branches end to end.
    Joint,
}

/// `S = S1 + w * S2`, or `S1` alone when the context branch has nothing to
/// look at. Returns scores and their softmax.
pub fn fuse_and_predict(s1: ArrayView1<f64>, s2: Option<ArrayView1<f64>>, fusion_w: ArrayView1<f64>) -> (Array1<f64>, Array1<f64>) {
    let scores = match s2 {
        Some(s2) => &s1 + &(&fusion_w * &s2),
        None => s1.to_owned(),
    };
    let probs = losses::softmax(scores.view());
    (scores, probs)
}

pub struct DualGlance {
    pub spec: ModelSpec,
    pub params: ParamStore,
    person: Box<dyn Backbone>,
    union: Box<dyn Backbone>,
    context: Box<dyn Backbone>,
}

impl std::fmt::Debug for DualGlance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DualGlance").field("spec", &self.spec).field("params", &self.params.num_values()).finish()
    }
}

impl Clone for DualGlance {
    fn clone(&self) -> Self {
        // external backbones are not clonable; only toy towers are rebuilt
        Self::from_params(self.spec.clone(), self.params.clone()).expect("spec already validated")
    }
}

impl DualGlance {
    /// Toy towers with seeded random initialization.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.check()?;
        let person = Box::new(ToyCnn::from_spec(&spec.first_glance)?);
        let union = Box::new(ToyCnn::from_spec(&spec.first_glance)?);
        let context = Box::new(ToyCnn::from_spec(&spec.second_glance)?);
        Self::with_backbones(spec, person, union, context, seed)
    }

    /// Custom towers; they must register their parameters under the given
    /// prefixes in `init_params`.
    pub fn with_backbones(
        spec: ModelSpec,
        person: Box<dyn Backbone>,
        union: Box<dyn Backbone>,
        context: Box<dyn Backbone>,
        seed: u64,
    ) -> Result<Self> {
        let mut model = Self { spec, params: ParamStore::new(), person, union, context };
        model.init(seed);
        Ok(model)
    }

    /// Toy towers around existing parameters, e.g. from a checkpoint.
    pub fn from_params(spec: ModelSpec, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(spec, 0)?;
        let expected = model.params.zeros_like();
        for (name, t) in expected.iter() {
            match params.try_get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::IncompatibleCheckpoint(format!(
                        "`{name}` has shape {:?}, model expects {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::IncompatibleCheckpoint(format!("missing tensor `{name}`"))),
            }
        }
        if params.len() != expected.len() {
            return Err(Error::IncompatibleCheckpoint("checkpoint has extra tensors".into()));
        }
        model.params = params;
        Ok(model)
    }

    fn tower_output(&self, tower: &dyn Backbone) -> usize {
        let p = self.spec.first_glance.patch_size;
        let (c, h, w) = tower.output_dims((self.spec.in_channels, p, p));
        c * h * w
    }

    fn region_input_len(&self) -> usize {
        let c = self.context.output_dims((self.spec.in_channels, 64, 64)).0;
        c * self.spec.roi_grid.0 * self.spec.roi_grid.1
    }

    fn init(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = self.spec.clone();
        let (r, k, g) = (spec.num_classes, spec.feature_dim, spec.geometry_hidden);
        let mut store = ParamStore::new();
        let relu_gain = std::f64::consts::SQRT_2;

        self.person.init_params("first.person", spec.in_channels, &mut rng, &mut store);
        self.union.init_params("first.union", spec.in_channels, &mut rng, &mut store);
        let concat = 2 * self.tower_output(self.person.as_ref()) + self.tower_output(self.union.as_ref()) + g;
        store.insert("first.geom.w", nn::init_normal(&mut rng, &[g, 2 * GEOMETRY_DIM], 2 * GEOMETRY_DIM, relu_gain));
        store.insert("first.geom.b", ArrayD::zeros(IxDyn(&[g])));
        store.insert("first.top.w", nn::init_normal(&mut rng, &[k, concat], concat, relu_gain));
        store.insert("first.top.b", ArrayD::zeros(IxDyn(&[k])));
        store.insert("first.score.w", nn::init_normal(&mut rng, &[r, k], k, 1.0));
        store.insert("first.score.b", ArrayD::zeros(IxDyn(&[r])));

        self.context.init_params("second.context", spec.in_channels, &mut rng, &mut store);
        let region_in = self.region_input_len();
        store.insert("second.region.w", nn::init_normal(&mut rng, &[k, region_in], region_in, relu_gain));
        store.insert("second.region.b", ArrayD::zeros(IxDyn(&[k])));
        store.insert("second.score.w", nn::init_normal(&mut rng, &[r, k], k, 1.0));
        store.insert("second.score.b", ArrayD::zeros(IxDyn(&[r])));
        store.insert("second.gate", ArrayD::zeros(IxDyn(&[k])));
        store.insert("second.attn.w", nn::init_normal(&mut rng, &[k], k, 1.0));
        store.insert("second.attn.b", ArrayD::zeros(IxDyn(&[1])));
        store.insert("fusion.w", ArrayD::from_elem(IxDyn(&[r]), 1.0));
        self.params = store;
    }

    pub fn feature_stride(&self) -> usize {
        self.context.feature_stride()
    }

    pub fn first_glance_forward(&self, input: &PairInput) -> Result<FirstGlanceOutput> {
        let p = self.spec.first_glance.patch_size;
        let expected = (self.spec.in_channels, p, p);
        if let Some(bad) = input.patches.iter().find(|x| x.dim() != expected) {
            return Err(Error::DimensionMismatch(format!("patch {:?}, expected {expected:?}", bad.dim())));
        }
        let store = &self.params;
        let mut tower_caches = Vec::with_capacity(3);
        let mut parts = Vec::with_capacity(4);
        for (i, patch) in input.patches.iter().enumerate() {
            let (tower, prefix) = self.tower(i);
            let (out, cache) = tower.forward(store, prefix, patch);
            tower_caches.push((cache, out.dim()));
            parts.push(out.into_shape_with_order(out_len_of(&tower_caches[i].1)).expect("flatten"));
        }
        let geom = ArrayView1::from(&input.geometry[..]);
        let geom_pre = nn::linear(store.matrix("first.geom.w"), store.vector("first.geom.b"), geom);
        parts.push(geom_pre.mapv(|v| v.max(0.0)));
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        let concat = concatenate(Axis(0), &views).expect("1-d parts");
        if concat.len() != store.matrix("first.top.w").ncols() {
            return Err(Error::DimensionMismatch(format!(
                "first-glance features {} vs fc input {}",
                concat.len(),
                store.matrix("first.top.w").ncols()
            )));
        }
        let top_pre = nn::linear(store.matrix("first.top.w"), store.vector("first.top.b"), concat.view());
        let v_top = top_pre.mapv(|v| v.max(0.0));
        let s1 = nn::linear(store.matrix("first.score.w"), store.vector("first.score.b"), v_top.view());
        Ok(FirstGlanceOutput { s1, v_top, tower_caches, geom_pre, concat, top_pre })
    }

    fn tower(&self, i: usize) -> (&dyn Backbone, &'static str) {
        match i {
            0 | 1 => (self.person.as_ref(), "first.person"),
            _ => (self.union.as_ref(), "first.union"),
        }
    }

    /// Accumulates first-branch parameter gradients for upstream gradients
    /// on `S1` and (optionally) `v_top`.
    pub fn first_glance_backward(
        &self,
        out: &FirstGlanceOutput,
        input: &PairInput,
        d_s1: ArrayView1<f64>,
        d_v_top: Option<ArrayView1<f64>>,
        grads: &mut ParamStore,
    ) {
        let store = &self.params;
        let (dw, db, mut dv) = nn::linear_backward(store.matrix("first.score.w"), out.v_top.view(), d_s1);
        grads.accumulate("first.score.w", &dw);
        grads.accumulate("first.score.b", &db);
        if let Some(extra) = d_v_top {
            dv += &extra;
        }
        dv.zip_mut_with(&out.top_pre, |g, &p| {
            if p <= 0.0 {
                *g = 0.0;
            }
        });
        let (dw, db, d_concat) = nn::linear_backward(store.matrix("first.top.w"), out.concat.view(), dv.view());
        grads.accumulate("first.top.w", &dw);
        grads.accumulate("first.top.b", &db);

        let mut offset = 0;
        for (i, (cache, dims)) in out.tower_caches.iter().enumerate() {
            let len = dims.0 * dims.1 * dims.2;
            let d_out = d_concat.slice(s![offset..offset + len]).to_owned().into_shape_with_order(*dims).expect("tower grad");
            let (tower, prefix) = self.tower(i);
            tower.backward(store, prefix, cache.as_ref(), &d_out, grads, false);
            offset += len;
        }
        let mut d_geom = d_concat.slice(s![offset..]).to_owned();
        d_geom.zip_mut_with(&out.geom_pre, |g, &p| {
            if p <= 0.0 {
                *g = 0.0;
            }
        });
        let geom = ArrayView1::from(&input.geometry[..]);
        let (dw, db, _) = nn::linear_backward(store.matrix("first.geom.w"), geom, d_geom.view());
        grads.accumulate("first.geom.w", &dw);
        grads.accumulate("first.geom.b", &db);
    }

    pub fn context_forward(&self, image: &Array3<f64>) -> ContextFeatures {
        let (map, cache) = self.context.forward(&self.params, "second.context", image);
        ContextFeatures { map, cache }
    }

    fn attention_params(&self) -> AttentionParams<'_> {
        let store = &self.params;
        AttentionParams {
            score_w: store.matrix("second.score.w"),
            score_b: store.vector("second.score.b"),
            gate: store.vector("second.gate"),
            attn_w: store.vector("second.attn.w"),
            attn_b: store.scalar("second.attn.b"),
        }
    }

    /// Scores the bag of contextual regions. Regions that do not overlap the
    /// feature map are skipped; `EmptyBag` when none remain.
    pub fn second_glance_forward(
        &self,
        ctx: &ContextFeatures,
        regions: &[BoundingBox],
        v_top: ArrayView1<f64>,
        mode: AggregationMode,
    ) -> Result<SecondGlanceOutput> {
        let stride = self.feature_stride();
        let mut pooled = Vec::with_capacity(regions.len());
        let mut kept = Vec::with_capacity(regions.len());
        for (i, region) in regions.iter().enumerate() {
            match roi_pool(ctx.map.view(), &to_feature_coords(region, stride), self.spec.roi_grid) {
                Ok(p) => {
                    pooled.push(p);
                    kept.push(i);
                }
                Err(Error::RegionOutsideMap) => continue,
                Err(e) => return Err(e),
            }
        }
        if pooled.is_empty() {
            return Err(Error::EmptyBag);
        }
        let in_len = pooled[0].values.len();
        let mut region_in = Array2::zeros((pooled.len(), in_len));
        for (mut row, p) in region_in.outer_iter_mut().zip(&pooled) {
            row.assign(&ArrayView1::from(p.values.as_slice().expect("standard layout")));
        }
        let w = self.params.matrix("second.region.w");
        if w.ncols() != in_len {
            return Err(Error::DimensionMismatch(format!("pooled region {in_len} vs fc input {}", w.ncols())));
        }
        let region_pre = region_in.dot(&w.t()) + &self.params.vector("second.region.b");
        let bag = RegionBag::new(region_pre.mapv(|v| v.max(0.0)));
        let head = attention::forward(&bag, v_top, &self.attention_params(), mode)?;
        Ok(SecondGlanceOutput {
            s2: head.output.clone(),
            attention: head.weights.clone(),
            kept,
            pooled,
            region_in,
            region_pre,
            bag,
            head,
        })
    }

    /// Accumulates context-branch parameter gradients; returns the gradient
    /// with respect to `v_top`.
    pub fn second_glance_backward(
        &self,
        ctx: &ContextFeatures,
        out: &SecondGlanceOutput,
        v_top: ArrayView1<f64>,
        mode: AggregationMode,
        d_s2: ArrayView1<f64>,
        grads: &mut ParamStore,
    ) -> Array1<f64> {
        let g = attention::backward(&out.bag, v_top, &self.attention_params(), &out.head, mode, d_s2);
        grads.accumulate("second.score.w", &g.score_w);
        grads.accumulate("second.score.b", &g.score_b);
        grads.accumulate("second.gate", &g.gate);
        grads.accumulate("second.attn.w", &g.attn_w);
        grads.accumulate("second.attn.b", &Array1::from_elem(1, g.attn_b));

        let mut d_pre = g.features;
        d_pre.zip_mut_with(&out.region_pre, |d, &p| {
            if p <= 0.0 {
                *d = 0.0;
            }
        });
        grads.accumulate("second.region.w", &d_pre.t().dot(&out.region_in));
        grads.accumulate("second.region.b", &d_pre.sum_axis(Axis(0)));
        let d_in = d_pre.dot(&self.params.matrix("second.region.w"));
        let mut d_map = Array3::zeros(ctx.map.dim());
        for (row, p) in d_in.outer_iter().zip(&out.pooled) {
            roi::roi_pool_backward(row.as_slice().expect("row-major"), &p.argmax, &mut d_map);
        }
        self.context.backward(&self.params, "second.context", ctx.cache.as_ref(), &d_map, grads, false);
        g.v_top
    }

    /// Full forward pass; falls back to `S1` when no region survives.
    pub fn predict(&self, input: &SampleInput, mode: AggregationMode) -> Result<Prediction> {
        let first = self.first_glance_forward(&input.pair)?;
        self.predict_with_first(first.s1.view(), first.v_top.view(), input, mode)
    }

    /// Like [`predict`](Self::predict) with the pair branch already evaluated.
    pub fn predict_with_first(
        &self,
        s1: ArrayView1<f64>,
        v_top: ArrayView1<f64>,
        input: &SampleInput,
        mode: AggregationMode,
    ) -> Result<Prediction> {
        let mut attention = vec![None; input.regions.len()];
        let s2 = if input.regions.is_empty() {
            None
        } else {
            let ctx = self.context_forward(&input.image);
            match self.second_glance_forward(&ctx, &input.regions, v_top, mode) {
                Ok(out) => {
                    for (&i, &a) in out.kept.iter().zip(&out.attention) {
                        attention[i] = Some(a);
                    }
                    Some(out.s2)
                }
                Err(Error::EmptyBag) => None,
                Err(e) => return Err(e),
            }
        };
        let (scores, probs) = fuse_and_predict(s1, s2.as_ref().map(|s| s.view()), self.params.vector("fusion.w"));
        Ok(Prediction { s1: s1.to_owned(), s2, scores, probs, attention })
    }

    /// Pair-branch-only probabilities.
    pub fn predict_first_glance(&self, pair: &PairInput) -> Result<Array1<f64>> {
        Ok(losses::softmax(self.first_glance_forward(pair)?.s1.view()))
    }

    /// Loss of one sample and gradients for every parameter. Parameters
    /// outside `stage` get zero gradient. `first` supplies a precomputed
    /// pair-branch output for [`TrainStage::SecondGlance`].
    pub fn loss_and_grad(
        &self,
        input: &SampleInput,
        loss: &LossConfig,
        target: Target<'_>,
        stage: TrainStage,
        mode: AggregationMode,
        first: Option<(ArrayView1<f64>, ArrayView1<f64>)>,
    ) -> Result<(f64, ParamStore)> {
        let mut grads = self.params.zeros_like();
        let value = self.accumulate_loss_grad(input, loss, target, stage, mode, first, &mut grads)?;
        Ok((value, grads))
    }

    /// Like [`loss_and_grad`](Self::loss_and_grad), adding into `grads`.
    #[allow(clippy::too_many_arguments)]
    pub fn accumulate_loss_grad(
        &self,
        input: &SampleInput,
        loss: &LossConfig,
        target: Target<'_>,
        stage: TrainStage,
        mode: AggregationMode,
        first: Option<(ArrayView1<f64>, ArrayView1<f64>)>,
        grads: &mut ParamStore,
    ) -> Result<f64> {
        match stage {
            TrainStage::FirstGlance => {
                let out = self.first_glance_forward(&input.pair)?;
                let (value, d_s1) = losses::loss_and_gradient(loss, out.s1.view(), target)?;
                self.first_glance_backward(&out, &input.pair, d_s1.view(), None, grads);
                Ok(value)
            }
            TrainStage::SecondGlance => match first {
                Some((s1, v_top)) => Ok(self.fused_backward(s1, v_top, input, loss, target, mode, grads)?.0),
                None => {
                    let out = self.first_glance_forward(&input.pair)?;
                    Ok(self.fused_backward(out.s1.view(), out.v_top.view(), input, loss, target, mode, grads)?.0)
                }
            },
            TrainStage::Joint => {
                let out = self.first_glance_forward(&input.pair)?;
                let (value, d_s1, d_v_top) =
                    self.fused_backward(out.s1.view(), out.v_top.view(), input, loss, target, mode, grads)?;
                self.first_glance_backward(&out, &input.pair, d_s1.view(), d_v_top.as_ref().map(|d| d.view()), grads);
                Ok(value)
            }
        }
    }

    /// Loss through fusion and the context branch. Returns the loss and the
    /// gradients reaching `S1` and `v_top`.
    #[allow(clippy::too_many_arguments)]
    fn fused_backward(
        &self,
        s1: ArrayView1<f64>,
        v_top: ArrayView1<f64>,
        input: &SampleInput,
        loss: &LossConfig,
        target: Target<'_>,
        mode: AggregationMode,
        grads: &mut ParamStore,
    ) -> Result<(f64, Array1<f64>, Option<Array1<f64>>)> {
        let second = if input.regions.is_empty() {
            None
        } else {
            let ctx = self.context_forward(&input.image);
            match self.second_glance_forward(&ctx, &input.regions, v_top, mode) {
                Ok(out) => Some((ctx, out)),
                Err(Error::EmptyBag) => None,
                Err(e) => return Err(e),
            }
        };
        let fusion_w = self.params.vector("fusion.w");
        let (scores, _) = fuse_and_predict(s1, second.as_ref().map(|(_, o)| o.s2.view()), fusion_w);
        let (value, d_scores) = losses::loss_and_gradient(loss, scores.view(), target)?;
        let Some((ctx, out)) = second else {
            return Ok((value, d_scores, None));
        };
        grads.accumulate("fusion.w", &(&d_scores * &out.s2));
        let d_s2 = &d_scores * &fusion_w;
        let d_v_top = self.second_glance_backward(&ctx, &out, v_top, mode, d_s2.view(), grads);
        Ok((value, d_scores, Some(d_v_top)))
    }
}

fn out_len_of(dims: &(usize, usize, usize)) -> usize {
    dims.0 * dims.1 * dims.2
}
