//! Minimal layers with hand-written backward passes.

use std::any::Any;
use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView1, ArrayView2, ArrayView3, ArrayView4, Axis, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Named parameter tensors. Names are canonical dotted paths such as
/// `first.person.conv0.w`; two towers that share weights share names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ArrayD<f64>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.tensors.get(name).unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn try_get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.tensors.get_mut(name).unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn vector(&self, name: &str) -> ArrayView1<'_, f64> {
        self.get(name).view().into_dimensionality().expect("rank-1 parameter")
    }

    pub fn matrix(&self, name: &str) -> ArrayView2<'_, f64> {
        self.get(name).view().into_dimensionality().expect("rank-2 parameter")
    }

    pub fn kernel(&self, name: &str) -> ArrayView4<'_, f64> {
        self.get(name).view().into_dimensionality().expect("rank-4 parameter")
    }

    pub fn scalar(&self, name: &str) -> f64 {
        self.get(name).iter().next().copied().expect("scalar parameter")
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(ArrayD::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), ArrayD::zeros(v.raw_dim()))).collect() }
    }

    /// Accumulates `scale * other` into matching entries.
    pub fn add_scaled(&mut self, other: &ParamStore, scale: f64) {
        for (name, g) in &other.tensors {
            self.get_mut(name).scaled_add(scale, g);
        }
    }

    /// Adds into the named tensor.
    pub fn accumulate<D: ndarray::Dimension>(&mut self, name: &str, grad: &ndarray::Array<f64, D>) {
        let target = self.get_mut(name);
        let grad = grad.view().into_dyn();
        assert_eq!(target.shape(), grad.shape(), "gradient shape for `{name}`");
        *target += &grad;
    }

    /// SHA-256 over names, shapes and little-endian values of every tensor
    /// whose name starts with `prefix`.
    pub fn hash_prefix(&self, prefix: &str) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.tensors.iter().filter(|(k, _)| k.starts_with(prefix)) {
            hasher.update(name.as_bytes());
            for &d in t.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for v in t.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn into_inner(self) -> BTreeMap<String, ArrayD<f64>> {
        self.tensors
    }

    pub fn from_map(tensors: BTreeMap<String, ArrayD<f64>>) -> Self {
        Self { tensors }
    }
}

/// Gaussian weights with standard deviation `gain / sqrt(fan_in)`.
pub fn init_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize, gain: f64) -> ArrayD<f64> {
    let std = gain / (fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || normal.sample(rng))
}

pub fn relu_inplace(x: &mut ArrayD<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// `W x + b` for `W: out x in`.
pub fn linear(w: ArrayView2<f64>, b: ArrayView1<f64>, x: ArrayView1<f64>) -> Array1<f64> {
    w.dot(&x) + &b
}

/// Gradients of `W x + b`: returns `(dW, db, dx)`.
pub fn linear_backward(w: ArrayView2<f64>, x: ArrayView1<f64>, dy: ArrayView1<f64>) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let dw = outer(dy, x);
    let dx = w.t().dot(&dy);
    (dw, dy.to_owned(), dx)
}

pub fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let a2 = a.insert_axis(Axis(1));
    let b2 = b.insert_axis(Axis(0));
    a2.dot(&b2)
}

/// Unrolls `k x k` neighbourhoods with zero padding `k / 2` into a
/// `(C k k) x (H W)` matrix.
fn im2col(input: ArrayView3<f64>, k: usize) -> Array2<f64> {
    let (c, h, w) = input.dim();
    let pad = (k / 2) as isize;
    let mut cols = Array2::zeros((c * k * k, h * w));
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let mut dst = cols.row_mut(row);
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + kx as isize - pad;
                        if sx >= 0 && sx < w as isize {
                            dst[y * w + x] = input[[ch, sy as usize, sx as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: ArrayView2<f64>, c: usize, h: usize, w: usize, k: usize) -> Array3<f64> {
    let pad = (k / 2) as isize;
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let src = cols.row((ch * k + ky) * k + kx);
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + kx as isize - pad;
                        if sx >= 0 && sx < w as isize {
                            out[[ch, sy as usize, sx as usize]] += src[y * w + x];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Same-padded stride-1 convolution. Returns the output and the unrolled
/// input for the backward pass.
pub fn conv2d(input: ArrayView3<f64>, w: ArrayView4<f64>, b: ArrayView1<f64>) -> (Array3<f64>, Array2<f64>) {
    let (o, c, k, _) = w.dim();
    let (_, h, wd) = input.dim();
    let cols = im2col(input, k);
    let w2 = w.to_shape((o, c * k * k)).expect("contiguous kernel");
    let mut out = w2.dot(&cols);
    for (mut row, &bias) in out.outer_iter_mut().zip(b) {
        row += bias;
    }
    (out.into_shape_with_order((o, h, wd)).expect("conv output shape"), cols)
}

/// Returns `(dW, db, dinput)` with `dW` flattened to `O x (C k k)`;
/// `dinput` is skipped when not needed.
pub fn conv2d_backward(
    cols: ArrayView2<f64>,
    w: ArrayView4<f64>,
    d_out: ArrayView3<f64>,
    input_dims: (usize, usize, usize),
    need_input: bool,
) -> (Array2<f64>, Array1<f64>, Option<Array3<f64>>) {
    let (o, c, k, _) = w.dim();
    let (oc, h, wd) = d_out.dim();
    debug_assert_eq!(oc, o);
    let d2 = d_out.to_shape((o, h * wd)).expect("contiguous gradient");
    let dw = d2.dot(&cols.t());
    let db = d2.sum_axis(Axis(1));
    let d_in = need_input.then(|| {
        let w2 = w.to_shape((o, c * k * k)).expect("contiguous kernel");
        let dcols = w2.t().dot(&d2);
        col2im(dcols.view(), input_dims.0, input_dims.1, input_dims.2, k)
    });
    (dw, db, d_in)
}

/// 2x2 max pooling with stride 2 (odd trailing rows/columns dropped).
/// Returns the output and the flat argmax index of each output cell.
pub fn max_pool2(input: ArrayView3<f64>) -> (Array3<f64>, Vec<usize>) {
    let (c, h, w) = input.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::zeros((c, oh, ow));
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut best = (2 * y, 2 * x);
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = (2 * y + dy, 2 * x + dx);
                    if input[[ch, cand.0, cand.1]] > input[[ch, best.0, best.1]] {
                        best = cand;
                    }
                }
                out[[ch, y, x]] = input[[ch, best.0, best.1]];
                arg.push((ch * h + best.0) * w + best.1);
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward(d_out: ArrayView3<f64>, arg: &[usize], input_dims: (usize, usize, usize)) -> Array3<f64> {
    let mut d_in = Array3::<f64>::zeros(input_dims);
    let flat = d_in.as_slice_mut().expect("standard layout");
    for (g, &i) in d_out.iter().zip(arg) {
        flat[i] += g;
    }
    d_in
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    ToyCnn,
    /// Supplied programmatically through [`Backbone`]; cannot be built from
    /// configuration alone.
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub channels: usize,
    pub kernel: usize,
}

/// Architecture of one convolutional tower.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    /// Side of the square input patches (first-glance towers only).
    #[serde(default = "default_patch_size")]
    pub patch_size: usize,
    /// Each layer is conv, relu, then 2x2 max pooling.
    pub layers: Vec<ConvLayerSpec>,
}

fn default_patch_size() -> usize {
    224
}

impl BackboneSpec {
    pub fn toy(patch_size: usize, layers: &[(usize, usize)]) -> Self {
        Self {
            kind: BackboneKind::ToyCnn,
            patch_size,
            layers: layers.iter().map(|&(channels, kernel)| ConvLayerSpec { channels, kernel }).collect(),
        }
    }

    pub fn output_channels(&self, in_channels: usize) -> usize {
        self.layers.last().map_or(in_channels, |l| l.channels)
    }

    /// Input pixels per output cell along each axis.
    pub fn feature_stride(&self) -> usize {
        1 << self.layers.len()
    }

    pub fn check(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::Config("patch_size must be positive".into()));
        }
        if self.layers.iter().any(|l| l.channels == 0 || l.kernel == 0 || l.kernel % 2 == 0) {
            return Err(Error::Config("conv layers need positive widths and odd kernels".into()));
        }
        Ok(())
    }
}

/// Feature extractor contract shared by the patch towers and the context
/// feature-map network.
pub trait Backbone: Send + Sync {
    fn init_params(&self, prefix: &str, in_channels: usize, rng: &mut dyn rand::RngCore, store: &mut ParamStore);

    /// Output `(channels, height, width)` for an input of the given shape.
    fn output_dims(&self, input: (usize, usize, usize)) -> (usize, usize, usize);

    fn feature_stride(&self) -> usize;

    fn forward(&self, store: &ParamStore, prefix: &str, input: &Array3<f64>) -> (Array3<f64>, Box<dyn Any + Send>);

    /// Adds parameter gradients into `grads`; returns the input gradient
    /// when `need_input` is set.
    fn backward(
        &self,
        store: &ParamStore,
        prefix: &str,
        cache: &(dyn Any + Send),
        d_out: &Array3<f64>,
        grads: &mut ParamStore,
        need_input: bool,
    ) -> Option<Array3<f64>>;
}

/// Stack of conv, relu, 2x2 max-pool blocks.
#[derive(Debug, Clone)]
pub struct ToyCnn {
    pub layers: Vec<ConvLayerSpec>,
}

struct ToyCnnCache {
    /// Per layer: input dims, unrolled input, pre-pool activation dims,
    /// relu mask source (pre-activation), pool argmax.
    layers: Vec<(Array2<f64>, (usize, usize, usize), Array3<f64>, Vec<usize>)>,
}

impl ToyCnn {
    pub fn from_spec(spec: &BackboneSpec) -> Result<Self> {
        spec.check()?;
        match spec.kind {
            BackboneKind::ToyCnn => Ok(Self { layers: spec.layers.clone() }),
            BackboneKind::External => Err(Error::Config(
                "backbone kind `external` must be supplied through the library API".into(),
            )),
        }
    }
}

impl Backbone for ToyCnn {
    fn init_params(&self, prefix: &str, in_channels: usize, rng: &mut dyn rand::RngCore, store: &mut ParamStore) {
        let mut c = in_channels;
        for (i, l) in self.layers.iter().enumerate() {
            let fan_in = c * l.kernel * l.kernel;
            store.insert(
                format!("{prefix}.conv{i}.w"),
                init_normal(rng, &[l.channels, c, l.kernel, l.kernel], fan_in, std::f64::consts::SQRT_2),
            );
            store.insert(format!("{prefix}.conv{i}.b"), ArrayD::zeros(IxDyn(&[l.channels])));
            c = l.channels;
        }
    }

    fn output_dims(&self, (c, mut h, mut w): (usize, usize, usize)) -> (usize, usize, usize) {
        for _ in &self.layers {
            h /= 2;
            w /= 2;
        }
        (self.layers.last().map_or(c, |l| l.channels), h, w)
    }

    fn feature_stride(&self) -> usize {
        1 << self.layers.len()
    }

    fn forward(&self, store: &ParamStore, prefix: &str, input: &Array3<f64>) -> (Array3<f64>, Box<dyn Any + Send>) {
        let mut x = input.clone();
        let mut cache = ToyCnnCache { layers: Vec::with_capacity(self.layers.len()) };
        for i in 0..self.layers.len() {
            let dims = x.dim();
            let (pre, cols) = conv2d(x.view(), store.kernel(&format!("{prefix}.conv{i}.w")), store.vector(&format!("{prefix}.conv{i}.b")));
            let act = pre.mapv(|v| v.max(0.0));
            let (pooled, arg) = max_pool2(act.view());
            cache.layers.push((cols, dims, pre, arg));
            x = pooled;
        }
        (x, Box::new(cache))
    }

    fn backward(
        &self,
        store: &ParamStore,
        prefix: &str,
        cache: &(dyn Any + Send),
        d_out: &Array3<f64>,
        grads: &mut ParamStore,
        need_input: bool,
    ) -> Option<Array3<f64>> {
        let cache = cache.downcast_ref::<ToyCnnCache>().expect("cache from ToyCnn::forward");
        let mut d = d_out.clone();
        for i in (0..self.layers.len()).rev() {
            let (cols, in_dims, pre, arg) = &cache.layers[i];
            let mut d_act = max_pool2_backward(d.view(), arg, pre.dim());
            d_act.zip_mut_with(pre, |g, &p| {
                if p <= 0.0 {
                    *g = 0.0;
                }
            });
            let w_name = format!("{prefix}.conv{i}.w");
            let w = store.kernel(&w_name);
            let (dw, db, d_in) = conv2d_backward(cols.view(), w, d_act.view(), *in_dims, i > 0 || need_input);
            let dw = dw.into_shape_with_order(w.raw_dim()).expect("kernel grad");
            grads.accumulate(&w_name, &dw);
            grads.accumulate(&format!("{prefix}.conv{i}.b"), &db);
            match d_in {
                Some(g) => d = g,
                None => return None,
            }
        }
        Some(d)
    }
}
