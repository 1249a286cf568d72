//! Small convolutional regression network with a Euclidean loss head.
//!
//! Layer sequence: conv 3×3 + activation + 2×2 pool, twice, then a hidden
//! dense layer and a linear head with one output per PCA coefficient. All
//! arithmetic is f64; matrix products go through `matrixmultiply`.

use crate::encode::{deinterlace, denormalize, EncodedSample, OutputPcaModel, RgbImage, N_CHANNELS};
use crate::hash::sha256_hex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("expected length {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("prediction and target batches differ in shape")]
    ShapeMismatch,
    #[error("no training samples")]
    EmptyDataset,
    #[error("sample {trial_id} has {actual} target values, network has {expected} outputs")]
    KMismatch { trial_id: String, expected: usize, actual: usize },
    #[error("sample {0} carries no target")]
    MissingTarget(String),
    #[error("output PCA checksum {actual} does not match the model's {expected}")]
    ChecksumMismatch { expected: String, actual: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Max,
    Average,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_size: usize,
    pub conv_widths: [usize; 2],
    pub dense_width: usize,
    pub k_outputs: usize,
    pub activation: Activation,
    pub pooling: Pooling,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            input_size: 64,
            conv_widths: [16, 32],
            dense_width: 128,
            k_outputs: 1,
            activation: Activation::Relu,
            pooling: Pooling::Max,
        }
    }
}

pub const LAYER_NAMES: [&str; 4] = ["conv1", "conv2", "dense", "head"];

#[derive(Debug, Clone, Copy)]
struct Dims {
    s0: usize,
    c1: usize,
    p1: usize,
    c2: usize,
    p2: usize,
    flat: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub weight_offset: usize,
    pub weight_len: usize,
    pub bias_offset: usize,
    pub bias_len: usize,
    pub fan_in: usize,
}

impl NetworkSpec {
    pub fn new(input_size: usize, k_outputs: usize) -> Self {
        NetworkSpec { input_size, k_outputs, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.into()));
        if self.input_size < 10 {
            return bad("input_size must be at least 10");
        }
        if self.conv_widths.contains(&0) || self.dense_width == 0 || self.k_outputs == 0 {
            return bad("layer widths and k_outputs must be positive");
        }
        Ok(())
    }

    fn dims(&self) -> Dims {
        let s0 = self.input_size;
        let c1 = s0 - 2;
        let p1 = c1 / 2;
        let c2 = p1 - 2;
        let p2 = c2 / 2;
        Dims { s0, c1, p1, c2, p2, flat: self.conv_widths[1] * p2 * p2 }
    }

    /// Offsets into the flat parameter vector, in [`LAYER_NAMES`] order.
    pub fn layers(&self) -> [LayerShape; 4] {
        let d = self.dims();
        let [w1, w2] = self.conv_widths;
        let sizes = [
            (w1, 3 * 9),
            (w2, w1 * 9),
            (self.dense_width, d.flat),
            (self.k_outputs, self.dense_width),
        ];
        let mut offset = 0;
        sizes.map(|(out, fan_in)| {
            let shape = LayerShape {
                weight_offset: offset,
                weight_len: out * fan_in,
                bias_offset: offset + out * fan_in,
                bias_len: out,
                fan_in,
            };
            offset += out * fan_in + out;
            shape
        })
    }

    pub fn param_count(&self) -> usize {
        let last = self.layers()[3];
        last.bias_offset + last.bias_len
    }

    fn same_body(&self, other: &NetworkSpec) -> bool {
        self.input_size == other.input_size
            && self.conv_widths == other.conv_widths
            && self.dense_width == other.dense_width
            && self.activation == other.activation
            && self.pooling == other.pooling
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub parent_id: String,
    pub copied_layers: Vec<String>,
    pub head_reinitialized: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightBundle {
    pub spec: NetworkSpec,
    pub params: Vec<f64>,
    pub rng_seed: u64,
    pub history: Vec<EpochRecord>,
    pub pca_checksum: Option<String>,
    pub lineage: Option<Lineage>,
    /// Epoch whose weights were retained (best validation loss).
    pub best_epoch: Option<usize>,
}

impl WeightBundle {
    pub fn weights(&self, layer: usize) -> &[f64] {
        let s = self.spec.layers()[layer];
        &self.params[s.weight_offset..s.weight_offset + s.weight_len]
    }

    pub fn biases(&self, layer: usize) -> &[f64] {
        let s = self.spec.layers()[layer];
        &self.params[s.bias_offset..s.bias_offset + s.bias_len]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        let s = self.spec.layers()[layer];
        &mut self.params[s.weight_offset..s.weight_offset + s.weight_len]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.params.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    /// Content id of the parameters.
    pub fn checksum(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }
}

fn he_uniform(rng: &mut ChaCha8Rng, out: &mut [f64], fan_in: usize) {
    let limit = (6.0 / fan_in as f64).sqrt();
    for w in out {
        *w = rng.random_range(-limit..limit);
    }
}

/// He-uniform weights and zero biases; each layer draws from its own stream of
/// the seed. With a parent, every layer but the head is copied, and the head
/// is copied too when the output counts agree.
pub fn init_network(spec: &NetworkSpec, seed: u64, parent: Option<&WeightBundle>) -> Result<WeightBundle, ModelError> {
    spec.validate()?;
    let mut params = vec![0.0; spec.param_count()];
    for (i, layer) in spec.layers().iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        he_uniform(&mut rng, &mut params[layer.weight_offset..layer.weight_offset + layer.weight_len], layer.fan_in);
    }
    let mut lineage = None;
    if let Some(parent) = parent {
        if !spec.same_body(&parent.spec) {
            return Err(ModelError::ArchitectureMismatch(format!("parent {:?} vs child {:?}", parent.spec, spec)));
        }
        let copy_head = parent.spec.k_outputs == spec.k_outputs;
        let n_copy = if copy_head { 4 } else { 3 };
        let end = spec.layers()[n_copy - 1];
        let end = end.bias_offset + end.bias_len;
        params[..end].copy_from_slice(&parent.params[..end]);
        lineage = Some(Lineage {
            parent_id: parent.checksum(),
            copied_layers: LAYER_NAMES[..n_copy].iter().map(|s| s.to_string()).collect(),
            head_reinitialized: !copy_head,
        });
    }
    Ok(WeightBundle {
        spec: spec.clone(),
        params,
        rng_seed: seed,
        history: Vec::new(),
        pca_checksum: None,
        lineage,
        best_epoch: None,
    })
}

/// `c = a·b + beta·c` for an `m×k` by `k×n` product with arbitrary strides on
/// `a` and `b`; `c` is dense row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_strides: (usize, usize), b: &[f64], b_strides: (usize, usize), beta: f64, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    let reach = |rows: usize, cols: usize, (rs, cs): (usize, usize)| (rows - 1) * rs + (cols - 1) * cs + 1;
    assert!(k == 0 || a.len() >= reach(m, k, a_strides), "gemm: lhs out of bounds");
    assert!(k == 0 || b.len() >= reach(k, n, b_strides), "gemm: rhs out of bounds");
    assert!(c.len() >= m * n, "gemm: output out of bounds");
    // SAFETY: the assertions above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 3×3 valid patches of a `c×h×w` input as a `(c·9) × (ho·wo)` matrix.
fn im2col(input: &[f64], c: usize, h: usize, w: usize, cols: &mut [f64]) {
    let (ho, wo) = (h - 2, w - 2);
    let hw = ho * wo;
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for oy in 0..ho {
                    let src = ci * h * w + (oy + ky) * w + kx;
                    row[oy * wo..(oy + 1) * wo].copy_from_slice(&input[src..src + wo]);
                }
            }
        }
    }
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    let (ho, wo) = (h - 2, w - 2);
    let hw = ho * wo;
    out.fill(0.0);
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for oy in 0..ho {
                    let dst = ci * h * w + (oy + ky) * w + kx;
                    for (o, v) in out[dst..dst + wo].iter_mut().zip(&row[oy * wo..(oy + 1) * wo]) {
                        *o += v;
                    }
                }
            }
        }
    }
}

fn activate(act: Activation, xs: &mut [f64]) {
    if act == Activation::Relu {
        for x in xs {
            *x = x.max(0.0);
        }
    }
}

/// Multiplies `grad` by the activation derivative, read off the activated output.
fn activate_backward(act: Activation, out: &[f64], grad: &mut [f64]) {
    if act == Activation::Relu {
        for (g, o) in grad.iter_mut().zip(out) {
            if *o <= 0.0 {
                *g = 0.0;
            }
        }
    }
}

/// 2×2 stride-2 pooling of `c×s×s` onto `c×(s/2)×(s/2)`; for max pooling
/// `arg` receives the source index of each output (first maximum wins).
fn pool_forward(kind: Pooling, input: &[f64], c: usize, s: usize, out: &mut [f64], arg: &mut [usize]) {
    let p = s / 2;
    for ch in 0..c {
        for py in 0..p {
            for px in 0..p {
                let base = ch * s * s + 2 * py * s + 2 * px;
                let idx = [base, base + 1, base + s, base + s + 1];
                let o = ch * p * p + py * p + px;
                match kind {
                    Pooling::Max => {
                        let mut best = idx[0];
                        for &i in &idx[1..] {
                            if input[i] > input[best] {
                                best = i;
                            }
                        }
                        out[o] = input[best];
                        arg[o] = best;
                    }
                    Pooling::Average => out[o] = idx.iter().map(|&i| input[i]).sum::<f64>() / 4.0,
                }
            }
        }
    }
}

fn pool_backward(kind: Pooling, grad_out: &[f64], c: usize, s: usize, arg: &[usize], grad_in: &mut [f64]) {
    grad_in.fill(0.0);
    let p = s / 2;
    match kind {
        Pooling::Max => {
            for (g, &i) in grad_out.iter().zip(arg) {
                grad_in[i] += g;
            }
        }
        Pooling::Average => {
            for ch in 0..c {
                for py in 0..p {
                    for px in 0..p {
                        let g = grad_out[ch * p * p + py * p + px] / 4.0;
                        let base = ch * s * s + 2 * py * s + 2 * px;
                        for i in [base, base + 1, base + s, base + s + 1] {
                            grad_in[i] += g;
                        }
                    }
                }
            }
        }
    }
}

/// Per-sample activations kept for the backward pass.
struct ConvCache {
    cols1: Vec<f64>,
    a1: Vec<f64>,
    arg1: Vec<usize>,
    cols2: Vec<f64>,
    a2: Vec<f64>,
    arg2: Vec<usize>,
}

struct BatchCache {
    conv: Vec<ConvCache>,
    /// `B × flat` pooled features.
    flat: Vec<f64>,
    /// `B × dense_width` activated hidden layer.
    hidden: Vec<f64>,
    /// `B × K` outputs.
    out: Vec<f64>,
}

/// Deliberate backward-pass defects used to show that [`grad_check`] catches them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardFault {
    /// Pass gradients through the hidden activation as if it were identity.
    IgnoreHiddenMask,
    /// Drop the gradient of the head biases.
    DropHeadBias,
}

struct Network<'a> {
    spec: &'a NetworkSpec,
    params: &'a [f64],
    layers: [LayerShape; 4],
    d: Dims,
}

impl<'a> Network<'a> {
    fn new(spec: &'a NetworkSpec, params: &'a [f64]) -> Self {
        Network { spec, params, layers: spec.layers(), d: spec.dims() }
    }

    fn w(&self, l: usize) -> &[f64] {
        let s = self.layers[l];
        &self.params[s.weight_offset..s.weight_offset + s.weight_len]
    }

    fn b(&self, l: usize) -> &[f64] {
        let s = self.layers[l];
        &self.params[s.bias_offset..s.bias_offset + s.bias_len]
    }

    fn conv_forward(&self, input: &[f64], flat: &mut [f64]) -> ConvCache {
        let Dims { s0, c1, p1, c2, p2, .. } = self.d;
        let [w1, w2] = self.spec.conv_widths;
        let act = self.spec.activation;

        let hw1 = c1 * c1;
        let mut cols1 = vec![0.0; 27 * hw1];
        im2col(input, 3, s0, s0, &mut cols1);
        let mut a1 = vec![0.0; w1 * hw1];
        for (row, b) in a1.chunks_exact_mut(hw1).zip(self.b(0)) {
            row.fill(*b);
        }
        gemm(w1, 27, hw1, self.w(0), (27, 1), &cols1, (hw1, 1), 1.0, &mut a1);
        activate(act, &mut a1);
        let mut pooled1 = vec![0.0; w1 * p1 * p1];
        let mut arg1 = vec![0; w1 * p1 * p1];
        pool_forward(self.spec.pooling, &a1, w1, c1, &mut pooled1, &mut arg1);

        let hw2 = c2 * c2;
        let k2 = w1 * 9;
        let mut cols2 = vec![0.0; k2 * hw2];
        im2col(&pooled1, w1, p1, p1, &mut cols2);
        let mut a2 = vec![0.0; w2 * hw2];
        for (row, b) in a2.chunks_exact_mut(hw2).zip(self.b(1)) {
            row.fill(*b);
        }
        gemm(w2, k2, hw2, self.w(1), (k2, 1), &cols2, (hw2, 1), 1.0, &mut a2);
        activate(act, &mut a2);
        let mut arg2 = vec![0; w2 * p2 * p2];
        pool_forward(self.spec.pooling, &a2, w2, c2, flat, &mut arg2);
        ConvCache { cols1, a1, arg1, cols2, a2, arg2 }
    }

    fn forward(&self, inputs: &[&[f64]]) -> BatchCache {
        let bsz = inputs.len();
        let Dims { flat: nf, .. } = self.d;
        let (dw, k) = (self.spec.dense_width, self.spec.k_outputs);
        let mut flat = vec![0.0; bsz * nf];
        let conv = inputs.iter().zip(flat.chunks_exact_mut(nf)).map(|(x, f)| self.conv_forward(x, f)).collect();

        let mut hidden: Vec<f64> = (0..bsz).flat_map(|_| self.b(2).iter().copied()).collect();
        gemm(bsz, nf, dw, &flat, (nf, 1), self.w(2), (1, nf), 1.0, &mut hidden);
        activate(self.spec.activation, &mut hidden);
        let mut out: Vec<f64> = (0..bsz).flat_map(|_| self.b(3).iter().copied()).collect();
        gemm(bsz, dw, k, &hidden, (dw, 1), self.w(3), (1, dw), 1.0, &mut out);
        BatchCache { conv, flat, hidden, out }
    }

    /// Accumulates into `grad` the parameter gradient of `Σ_n ½‖out_n − target_n‖²`
    /// and returns that sum.
    fn backward(&self, cache: &BatchCache, targets: &[&[f64]], grad: &mut [f64], fault: Option<BackwardFault>) -> f64 {
        let bsz = targets.len();
        let Dims { c1, p1, c2, p2, flat: nf, .. } = self.d;
        let [w1, w2] = self.spec.conv_widths;
        let (dw, k) = (self.spec.dense_width, self.spec.k_outputs);
        let act = self.spec.activation;
        let l = self.layers;

        let mut d_out = cache.out.clone();
        let mut loss = 0.0;
        for (row, t) in d_out.chunks_exact_mut(k).zip(targets) {
            for (e, t) in row.iter_mut().zip(*t) {
                *e -= t;
                loss += 0.5 * *e * *e;
            }
        }

        // head
        gemm(k, bsz, dw, &d_out, (1, k), &cache.hidden, (dw, 1), 1.0, &mut grad[l[3].weight_offset..][..l[3].weight_len]);
        if fault != Some(BackwardFault::DropHeadBias) {
            let gb = &mut grad[l[3].bias_offset..][..k];
            for row in d_out.chunks_exact(k) {
                for (g, e) in gb.iter_mut().zip(row) {
                    *g += e;
                }
            }
        }
        let mut d_hidden = vec![0.0; bsz * dw];
        gemm(bsz, k, dw, &d_out, (k, 1), self.w(3), (dw, 1), 0.0, &mut d_hidden);
        if fault != Some(BackwardFault::IgnoreHiddenMask) {
            activate_backward(act, &cache.hidden, &mut d_hidden);
        }

        // hidden dense
        gemm(dw, bsz, nf, &d_hidden, (1, dw), &cache.flat, (nf, 1), 1.0, &mut grad[l[2].weight_offset..][..l[2].weight_len]);
        {
            let gb = &mut grad[l[2].bias_offset..][..dw];
            for row in d_hidden.chunks_exact(dw) {
                for (g, e) in gb.iter_mut().zip(row) {
                    *g += e;
                }
            }
        }
        let mut d_flat = vec![0.0; bsz * nf];
        gemm(bsz, dw, nf, &d_hidden, (dw, 1), self.w(2), (nf, 1), 0.0, &mut d_flat);

        // convolutions, sample by sample
        let (hw1, hw2, k2) = (c1 * c1, c2 * c2, w1 * 9);
        let mut d_a2 = vec![0.0; w2 * hw2];
        let mut d_cols2 = vec![0.0; k2 * hw2];
        let mut d_p1 = vec![0.0; w1 * p1 * p1];
        let mut d_a1 = vec![0.0; w1 * hw1];
        debug_assert_eq!(nf, w2 * p2 * p2);
        for (cc, df) in cache.conv.iter().zip(d_flat.chunks_exact(nf)) {
            pool_backward(self.spec.pooling, df, w2, c2, &cc.arg2, &mut d_a2);
            activate_backward(act, &cc.a2, &mut d_a2);
            gemm(w2, hw2, k2, &d_a2, (hw2, 1), &cc.cols2, (1, hw2), 1.0, &mut grad[l[1].weight_offset..][..l[1].weight_len]);
            for (g, row) in grad[l[1].bias_offset..][..w2].iter_mut().zip(d_a2.chunks_exact(hw2)) {
                *g += row.iter().sum::<f64>();
            }
            gemm(k2, w2, hw2, self.w(1), (1, k2), &d_a2, (hw2, 1), 0.0, &mut d_cols2);
            col2im(&d_cols2, w1, p1, p1, &mut d_p1);

            pool_backward(self.spec.pooling, &d_p1, w1, c1, &cc.arg1, &mut d_a1);
            activate_backward(act, &cc.a1, &mut d_a1);
            gemm(w1, hw1, 27, &d_a1, (hw1, 1), &cc.cols1, (1, hw1), 1.0, &mut grad[l[0].weight_offset..][..l[0].weight_len]);
            for (g, row) in grad[l[0].bias_offset..][..w1].iter_mut().zip(d_a1.chunks_exact(hw1)) {
                *g += row.iter().sum::<f64>();
            }
        }
        loss
    }
}

/// Bytes in `[0, 255]` to reals in `[0, 1]`, interleaved HWC to planar CHW.
pub fn image_to_input(image: &RgbImage) -> Vec<f64> {
    let hw = image.size * image.size;
    let mut out = vec![0.0; 3 * hw];
    for (i, px) in image.pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * hw + i] = f64::from(px[c]) / 255.0;
        }
    }
    out
}

/// Forward pass on planar `3 × size × size` reals.
pub fn forward_real(bundle: &WeightBundle, input: &[f64]) -> Result<Vec<f64>, ModelError> {
    let expected = 3 * bundle.spec.input_size * bundle.spec.input_size;
    if input.len() != expected {
        return Err(ModelError::DimensionMismatch { expected, actual: input.len() });
    }
    Ok(Network::new(&bundle.spec, &bundle.params).forward(&[input]).out)
}

pub fn forward(bundle: &WeightBundle, image: &RgbImage) -> Result<Vec<f64>, ModelError> {
    if image.size != bundle.spec.input_size || image.pixels.len() != 3 * image.size * image.size {
        return Err(ModelError::DimensionMismatch { expected: bundle.spec.input_size, actual: image.size });
    }
    forward_real(bundle, &image_to_input(image))
}

/// `L = (1/2N) Σ_n ‖pred_n − target_n‖²`.
pub fn euclidean_loss(pred: &[Vec<f64>], target: &[Vec<f64>]) -> Result<f64, ModelError> {
    if pred.is_empty() || pred.len() != target.len() || pred.iter().zip(target).any(|(p, t)| p.len() != t.len()) {
        return Err(ModelError::ShapeMismatch);
    }
    let sum: f64 = pred.iter().zip(target).flat_map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b) * (a - b))).sum();
    Ok(sum / (2.0 * pred.len() as f64))
}

/// Loss and its gradient with respect to every parameter, both averaged over the batch.
pub fn loss_and_gradient(bundle: &WeightBundle, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> (f64, Vec<f64>) {
    gradient_inner(bundle, inputs, targets, None)
}

fn gradient_inner(bundle: &WeightBundle, inputs: &[Vec<f64>], targets: &[Vec<f64>], fault: Option<BackwardFault>) -> (f64, Vec<f64>) {
    let net = Network::new(&bundle.spec, &bundle.params);
    let xs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
    let ts: Vec<&[f64]> = targets.iter().map(Vec::as_slice).collect();
    let cache = net.forward(&xs);
    let mut grad = vec![0.0; bundle.params.len()];
    let loss = net.backward(&cache, &ts, &mut grad, fault);
    let n = inputs.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad)
}

fn batch_loss(bundle: &WeightBundle, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> f64 {
    let net = Network::new(&bundle.spec, &bundle.params);
    let xs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
    let out = net.forward(&xs).out;
    let k = bundle.spec.k_outputs;
    let sum: f64 = out.chunks_exact(k).zip(targets).flat_map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b) * (a - b))).sum();
    sum / (2.0 * inputs.len() as f64)
}

/// Largest relative disagreement `|g_a − g_f| / max(|g_a|, |g_f|, 1e-8)`
/// between the analytic gradient and central differences with step `h`.
pub fn grad_check(bundle: &WeightBundle, inputs: &[Vec<f64>], targets: &[Vec<f64>], h: f64) -> f64 {
    grad_check_inner(bundle, inputs, targets, h, None)
}

/// [`grad_check`] against a deliberately broken backward pass.
pub fn grad_check_with_fault(bundle: &WeightBundle, inputs: &[Vec<f64>], targets: &[Vec<f64>], h: f64, fault: BackwardFault) -> f64 {
    grad_check_inner(bundle, inputs, targets, h, Some(fault))
}

fn grad_check_inner(bundle: &WeightBundle, inputs: &[Vec<f64>], targets: &[Vec<f64>], h: f64, fault: Option<BackwardFault>) -> f64 {
    let (_, analytic) = gradient_inner(bundle, inputs, targets, fault);
    let mut probe = bundle.clone();
    let mut worst = 0.0f64;
    for i in 0..bundle.params.len() {
        let orig = probe.params[i];
        probe.params[i] = orig + h;
        let up = batch_loss(&probe, inputs, targets);
        probe.params[i] = orig - h;
        let down = batch_loss(&probe, inputs, targets);
        probe.params[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let ga = analytic[i];
        let rel = (ga - numeric).abs() / ga.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub val_fraction: f64,
    /// Compute per-sample gradients on the rayon pool and sum them in index order.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: 1e-3, momentum: 0.9, batch_size: 16, epochs: 30, seed: 0, val_fraction: 0.1, parallel: false }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Seeded permutation of `0..n`; the first `floor(val_fraction·n)` indices are
/// held out for validation.
pub fn split_validation(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    idx.shuffle(&mut rng);
    let n_val = (val_fraction * n as f64).floor() as usize;
    let val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    train.sort_unstable();
    (train, val)
}

fn sample_tensors(spec: &NetworkSpec, samples: &[EncodedSample]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), ModelError> {
    let mut inputs = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len());
    for s in samples {
        let t = s.target.as_ref().ok_or_else(|| ModelError::MissingTarget(s.trial_id.clone()))?;
        if t.len() != spec.k_outputs {
            return Err(ModelError::KMismatch { trial_id: s.trial_id.clone(), expected: spec.k_outputs, actual: t.len() });
        }
        if s.image.size != spec.input_size {
            return Err(ModelError::DimensionMismatch { expected: spec.input_size, actual: s.image.size });
        }
        inputs.push(image_to_input(&s.image));
        targets.push(t.clone());
    }
    Ok((inputs, targets))
}

fn mean_loss(bundle: &WeightBundle, inputs: &[Vec<f64>], targets: &[Vec<f64>], idx: &[usize]) -> f64 {
    let mut sum = 0.0;
    for chunk in idx.chunks(32) {
        let xs: Vec<Vec<f64>> = chunk.iter().map(|&i| inputs[i].clone()).collect();
        let ts: Vec<Vec<f64>> = chunk.iter().map(|&i| targets[i].clone()).collect();
        sum += batch_loss(bundle, &xs, &ts) * chunk.len() as f64;
    }
    sum / idx.len() as f64
}

/// Mini-batch SGD with momentum on the Euclidean loss.
///
/// The epoch's training loss is the sample-weighted mean of its batch losses.
/// When a validation split exists the weights with the lowest validation
/// loss are returned; otherwise the final weights.
pub fn train(bundle: &WeightBundle, samples: &[EncodedSample], cfg: &TrainConfig) -> Result<WeightBundle, ModelError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let (inputs, targets) = sample_tensors(&bundle.spec, samples)?;
    let (mut train_idx, val_idx) = split_validation(samples.len(), cfg.val_fraction, cfg.seed);
    if train_idx.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut current = bundle.clone();
    let mut velocity = vec![0.0; current.params.len()];
    let mut best: Option<(f64, Vec<f64>, usize)> = None;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start_epoch = current.history.last().map_or(0, |r| r.epoch);

    for epoch in 1..=cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in train_idx.chunks(cfg.batch_size) {
            let xs: Vec<Vec<f64>> = batch.iter().map(|&i| inputs[i].clone()).collect();
            let ts: Vec<Vec<f64>> = batch.iter().map(|&i| targets[i].clone()).collect();
            let (loss, grad) = if cfg.parallel {
                parallel_gradient(&current, &xs, &ts)
            } else {
                loss_and_gradient(&current, &xs, &ts)
            };
            loss_sum += loss * batch.len() as f64;
            for ((p, v), g) in current.params.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = cfg.momentum * *v - cfg.lr * g;
                *p += *v;
            }
        }
        let train_loss = loss_sum / train_idx.len() as f64;
        let val_loss = (!val_idx.is_empty()).then(|| mean_loss(&current, &inputs, &targets, &val_idx));
        log::debug!("epoch {epoch}: train {train_loss:.6} val {val_loss:?}");
        current.history.push(EpochRecord { epoch: start_epoch + epoch, train_loss, val_loss });
        if let Some(v) = val_loss {
            if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                best = Some((v, current.params.clone(), start_epoch + epoch));
            }
        }
    }
    if let Some((_, params, epoch)) = best {
        current.params = params;
        current.best_epoch = Some(epoch);
    }
    Ok(current)
}

fn parallel_gradient(bundle: &WeightBundle, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> (f64, Vec<f64>) {
    let parts: Vec<(f64, Vec<f64>)> = inputs
        .par_iter()
        .zip(targets)
        .map(|(x, t)| loss_and_gradient(bundle, std::slice::from_ref(x), std::slice::from_ref(t)))
        .collect();
    let n = inputs.len() as f64;
    let mut grad = vec![0.0; bundle.params.len()];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad)
}

/// Reconstructs six named waveforms in N and N·m from PCA coefficients.
pub fn waveforms_from_coefficients(pca: &OutputPcaModel, coeffs: &[f64], subject: &crate::SubjectMeta) -> Result<[Vec<f64>; N_CHANNELS], ModelError> {
    let target = pca
        .reconstruct(coeffs)
        .map_err(|_| ModelError::DimensionMismatch { expected: pca.k(), actual: coeffs.len() })?;
    Ok(denormalize(&deinterlace(&target), subject))
}

/// Network output reconstructed, de-interlaced and converted back to physical units.
pub fn predict_waveforms(bundle: &WeightBundle, pca: &OutputPcaModel, sample: &EncodedSample) -> Result<[Vec<f64>; N_CHANNELS], ModelError> {
    let actual = pca.checksum();
    match &bundle.pca_checksum {
        Some(expected) if *expected == actual => {}
        expected => {
            return Err(ModelError::ChecksumMismatch { expected: expected.clone().unwrap_or_default(), actual });
        }
    }
    if pca.k() != bundle.spec.k_outputs {
        return Err(ModelError::DimensionMismatch { expected: bundle.spec.k_outputs, actual: pca.k() });
    }
    let coeffs = forward(bundle, &sample.image)?;
    waveforms_from_coefficients(pca, &coeffs, &sample.subject)
}

pub const MODEL_BIN: &str = "model.bin";
pub const MODEL_JSON: &str = "model.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelManifest {
    spec: NetworkSpec,
    rng_seed: u64,
    param_count: usize,
    layout: String,
    checksum: String,
    pca_checksum: Option<String>,
    lineage: Option<Lineage>,
    best_epoch: Option<usize>,
    history: Vec<EpochRecord>,
}

impl WeightBundle {
    /// Writes `model.bin` (little-endian f64 in layer order) and `model.json`.
    pub fn save(&self, dir: &Path) -> Result<String, ModelError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| ModelError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let bytes = self.to_bytes();
        let checksum = sha256_hex(&bytes);
        let bin = dir.join(MODEL_BIN);
        fs::write(&bin, &bytes).map_err(io(&bin))?;
        let manifest = ModelManifest {
            spec: self.spec.clone(),
            rng_seed: self.rng_seed,
            param_count: self.params.len(),
            layout: format!("f64 little-endian, layers {} as weights then biases", LAYER_NAMES.join(", ")),
            checksum: checksum.clone(),
            pca_checksum: self.pca_checksum.clone(),
            lineage: self.lineage.clone(),
            best_epoch: self.best_epoch,
            history: self.history.clone(),
        };
        let json = dir.join(MODEL_JSON);
        fs::write(&json, serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n").map_err(io(&json))?;
        Ok(checksum)
    }

    pub fn load(dir: &Path) -> Result<WeightBundle, ModelError> {
        let json = dir.join(MODEL_JSON);
        let text = fs::read_to_string(&json).map_err(|source| ModelError::Io { path: json.clone(), source })?;
        let m: ModelManifest = serde_json::from_str(&text).map_err(|e| ModelError::Format { path: json.clone(), detail: e.to_string() })?;
        m.spec.validate()?;
        let bin = dir.join(MODEL_BIN);
        let bytes = fs::read(&bin).map_err(|source| ModelError::Io { path: bin.clone(), source })?;
        let actual = sha256_hex(&bytes);
        if actual != m.checksum {
            return Err(ModelError::ChecksumMismatch { expected: m.checksum, actual });
        }
        if bytes.len() != 8 * m.spec.param_count() {
            return Err(ModelError::DimensionMismatch { expected: 8 * m.spec.param_count(), actual: bytes.len() });
        }
        Ok(WeightBundle {
            params: bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect(),
            spec: m.spec,
            rng_seed: m.rng_seed,
            history: m.history,
            pca_checksum: m.pca_checksum,
            lineage: m.lineage,
            best_epoch: m.best_epoch,
        })
    }
}
