//! Pre-norm transformer building blocks with hand-written backward passes.
//!
//! Only gradients with respect to block *inputs* are produced: the weights
//! are frozen, and prompt learning needs nothing else.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Draws an f32-representable Gaussian matrix so that checkpoints round-trip
/// exactly.
pub(crate) fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_fn((rows, cols), |_| normal.sample(rng) as f32 as f64)
}

pub(crate) fn gaussian_vector<R: Rng>(rng: &mut R, len: usize, std: f64) -> Array1<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Array1::from_shape_fn(len, |_| normal.sample(rng) as f32 as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in × out`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub(crate) fn init<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: gaussian_matrix(rng, fan_in, fan_out, (fan_in as f64).powf(-0.5)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Gradient with respect to the input.
    pub fn backward_input(&self, grad_out: &ArrayView2<f64>) -> Array2<f64> {
        grad_out.dot(&self.weight.t())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

/// Per-row normalized input and reciprocal standard deviation.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub(crate) fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> (Array2<f64>, LayerNormCache) {
        let dim = x.ncols() as f64;
        let mut normalized = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, inv) in normalized.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / dim;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / dim;
            *inv = 1.0 / (var + LN_EPS).sqrt();
            let r = *inv;
            row.mapv_inplace(|v| v * r);
        }
        let out = &normalized * &self.gamma + &self.beta;
        (out, LayerNormCache { normalized, inv_std })
    }

    pub fn backward_input(&self, cache: &LayerNormCache, grad_out: &ArrayView2<f64>) -> Array2<f64> {
        let dim = grad_out.ncols() as f64;
        let scaled = grad_out * &self.gamma;
        let mut grad = Array2::zeros(scaled.raw_dim());
        for (i, mut out_row) in grad.rows_mut().into_iter().enumerate() {
            let g = scaled.row(i);
            let xhat = cache.normalized.row(i);
            let mean_g = g.sum() / dim;
            let mean_gx = g.dot(&xhat) / dim;
            let inv = cache.inv_std[i];
            for ((o, &gv), &xv) in out_row.iter_mut().zip(g.iter()).zip(xhat.iter()) {
                *o = inv * (gv - mean_g - xv * mean_gx);
            }
        }
        grad
    }
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

/// One pre-norm block: `x + Attn(LN(x))` followed by `x + MLP(LN(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub heads: usize,
    pub ln_attn: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub attn_out: Linear,
    pub ln_mlp: LayerNorm,
    pub fc_in: Linear,
    pub fc_out: Linear,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BlockCache {
    ln_attn: LayerNormCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// One `T × T` probability matrix per head.
    probs: Vec<Array2<f64>>,
    ln_mlp: LayerNormCache,
    pre_act: Array2<f64>,
}

impl BlockCache {
    /// Sequence length the block attended over.
    pub fn seq_len(&self) -> usize {
        self.q.nrows()
    }
}

impl Block {
    pub(crate) fn init<R: Rng>(rng: &mut R, dim: usize, heads: usize) -> Self {
        let hidden = 4 * dim;
        Block {
            heads,
            ln_attn: LayerNorm::new(dim),
            query: Linear::init(rng, dim, dim),
            key: Linear::init(rng, dim, dim),
            value: Linear::init(rng, dim, dim),
            attn_out: Linear::init(rng, dim, dim),
            ln_mlp: LayerNorm::new(dim),
            fc_in: Linear::init(rng, dim, hidden),
            fc_out: Linear::init(rng, hidden, dim),
        }
    }

    pub fn forward(&self, x: &ArrayView2<f64>, causal: bool) -> Array2<f64> {
        self.forward_cached(x, causal).0
    }

    pub fn forward_cached(&self, x: &ArrayView2<f64>, causal: bool) -> (Array2<f64>, BlockCache) {
        let len = x.nrows();
        let dim = x.ncols();
        let head_dim = dim / self.heads;
        let scale = (head_dim as f64).powf(-0.5);

        let (a, ln_attn) = self.ln_attn.forward(x);
        let q = self.query.forward(&a.view());
        let k = self.key.forward(&a.view());
        let v = self.value.forward(&a.view());

        let mut mixed = Array2::zeros((len, dim));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * head_dim..(h + 1) * head_dim];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
                if causal {
                    row.slice_mut(s![i + 1..]).fill(f64::NEG_INFINITY);
                }
                softmax_in_place(row.as_slice_mut().expect("contiguous row"));
            }
            mixed.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }
        let x1 = x + &self.attn_out.forward(&mixed.view());

        let (b, ln_mlp) = self.ln_mlp.forward(&x1.view());
        let pre_act = self.fc_in.forward(&b.view());
        let hidden = pre_act.mapv(gelu);
        let out = &x1 + &self.fc_out.forward(&hidden.view());

        let cache = BlockCache {
            ln_attn,
            q,
            k,
            v,
            probs,
            ln_mlp,
            pre_act,
        };
        (out, cache)
    }

    /// Gradient of the block output with respect to its input.
    pub fn backward_input(&self, cache: &BlockCache, grad_out: &ArrayView2<f64>) -> Array2<f64> {
        let dim = grad_out.ncols();
        let head_dim = dim / self.heads;
        let scale = (head_dim as f64).powf(-0.5);

        // MLP branch
        let grad_hidden = self.fc_out.backward_input(grad_out);
        let grad_pre = &grad_hidden * &cache.pre_act.mapv(gelu_grad);
        let grad_b = self.fc_in.backward_input(&grad_pre.view());
        let grad_x1 = grad_out + &self.ln_mlp.backward_input(&cache.ln_mlp, &grad_b.view());

        // attention branch
        let grad_mixed = self.attn_out.backward_input(&grad_x1.view());
        let mut grad_q = Array2::zeros(cache.q.raw_dim());
        let mut grad_k = Array2::zeros(cache.k.raw_dim());
        let mut grad_v = Array2::zeros(cache.v.raw_dim());
        for (h, probs) in cache.probs.iter().enumerate() {
            let cols = s![.., h * head_dim..(h + 1) * head_dim];
            let g_head = grad_mixed.slice(cols);
            let grad_probs = g_head.dot(&cache.v.slice(cols).t());
            grad_v.slice_mut(cols).assign(&probs.t().dot(&g_head));
            let row_dots = (&grad_probs * probs).sum_axis(Axis(1)).insert_axis(Axis(1));
            let grad_scores = probs * &(&grad_probs - &row_dots) * scale;
            grad_q.slice_mut(cols).assign(&grad_scores.dot(&cache.k.slice(cols)));
            grad_k.slice_mut(cols).assign(&grad_scores.t().dot(&cache.q.slice(cols)));
        }
        let grad_a = self.query.backward_input(&grad_q.view())
            + self.key.backward_input(&grad_k.view())
            + self.value.backward_input(&grad_v.view());
        grad_x1 + self.ln_attn.backward_input(&cache.ln_attn, &grad_a.view())
    }

    pub(crate) fn params(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("ln_attn.gamma", self.ln_attn.gamma.as_slice().unwrap()),
            ("ln_attn.beta", self.ln_attn.beta.as_slice().unwrap()),
            ("query.weight", self.query.weight.as_slice().unwrap()),
            ("query.bias", self.query.bias.as_slice().unwrap()),
            ("key.weight", self.key.weight.as_slice().unwrap()),
            ("key.bias", self.key.bias.as_slice().unwrap()),
            ("value.weight", self.value.weight.as_slice().unwrap()),
            ("value.bias", self.value.bias.as_slice().unwrap()),
            ("attn_out.weight", self.attn_out.weight.as_slice().unwrap()),
            ("attn_out.bias", self.attn_out.bias.as_slice().unwrap()),
            ("ln_mlp.gamma", self.ln_mlp.gamma.as_slice().unwrap()),
            ("ln_mlp.beta", self.ln_mlp.beta.as_slice().unwrap()),
            ("fc_in.weight", self.fc_in.weight.as_slice().unwrap()),
            ("fc_in.bias", self.fc_in.bias.as_slice().unwrap()),
            ("fc_out.weight", self.fc_out.weight.as_slice().unwrap()),
            ("fc_out.bias", self.fc_out.bias.as_slice().unwrap()),
        ]
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.ln_attn.gamma.as_slice_mut().unwrap(),
            self.ln_attn.beta.as_slice_mut().unwrap(),
            self.query.weight.as_slice_mut().unwrap(),
            self.query.bias.as_slice_mut().unwrap(),
            self.key.weight.as_slice_mut().unwrap(),
            self.key.bias.as_slice_mut().unwrap(),
            self.value.weight.as_slice_mut().unwrap(),
            self.value.bias.as_slice_mut().unwrap(),
            self.attn_out.weight.as_slice_mut().unwrap(),
            self.attn_out.bias.as_slice_mut().unwrap(),
            self.ln_mlp.gamma.as_slice_mut().unwrap(),
            self.ln_mlp.beta.as_slice_mut().unwrap(),
            self.fc_in.weight.as_slice_mut().unwrap(),
            self.fc_in.bias.as_slice_mut().unwrap(),
            self.fc_out.weight.as_slice_mut().unwrap(),
            self.fc_out.bias.as_slice_mut().unwrap(),
        ]
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Returns `v / ‖v‖` and the norm.
pub(crate) fn l2_normalize(v: &Array1<f64>) -> (Array1<f64>, f64) {
    // same summation order as Embedding::normalized
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (v.mapv(|x| x / norm), norm)
}

/// Backward of `z = v / ‖v‖` given `z`, `‖v‖` and `∂L/∂z`.
pub(crate) fn l2_normalize_backward(z: &Array1<f64>, norm: f64, grad_z: &Array1<f64>) -> Array1<f64> {
    (grad_z - &(z * z.dot(grad_z))) / norm
}
