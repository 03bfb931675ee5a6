//! One post-norm transformer layer (self-attention + GELU feed-forward) and
//! its hand-derived backward pass. Everything operates on a single
//! sequence of shape `[N, H]`.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::RngExt;
use rand_chacha::ChaCha8Rng;

pub type Mat = Array2<f64>;

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Xavier-style uniform initialisation in `[-a, a]`, `a = sqrt(6 / (fan_in + fan_out))`.
pub(crate) fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Mat {
    Mat::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

pub(crate) fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Mat {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, fan_in, fan_out, bound)
}

/// Row vector of zeros, used for every bias.
pub(crate) fn zeros_row(n: usize) -> Mat {
    Mat::zeros((1, n))
}

pub(crate) fn ones_row(n: usize) -> Mat {
    Mat::ones((1, n))
}

/// `x · w + b` with `b` broadcast over rows.
pub(crate) fn affine(x: &ArrayView2<f64>, w: &Mat, b: &Mat) -> Mat {
    let mut y = x.dot(w);
    y += b;
    y
}

/// Learned scale and shift of a layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gamma: Mat,
    pub beta: Mat,
}

impl NormParams {
    pub fn new(h: usize) -> Self {
        Self {
            gamma: ones_row(h),
            beta: zeros_row(h),
        }
    }

    pub fn zeros(h: usize) -> Self {
        Self {
            gamma: zeros_row(h),
            beta: zeros_row(h),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct NormCache {
    xhat: Mat,
    inv_std: Array1<f64>,
}

pub(crate) fn layer_norm(x: &Mat, p: &NormParams) -> (Mat, NormCache) {
    let h = x.ncols() as f64;
    let mean = x.sum_axis(Axis(1)) / h;
    let centered = x - &mean.view().insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / h;
    let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = centered * inv_std.view().insert_axis(Axis(1));
    let y = &xhat * &p.gamma + &p.beta;
    (y, NormCache { xhat, inv_std })
}

pub(crate) fn layer_norm_backward(dy: &Mat, p: &NormParams, c: &NormCache, g: &mut NormParams) -> Mat {
    let h = dy.ncols() as f64;
    g.gamma += &(dy * &c.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    g.beta += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dxhat = dy * &p.gamma;
    let sum_dxhat = dxhat.sum_axis(Axis(1));
    let sum_dxhat_xhat = (&dxhat * &c.xhat).sum_axis(Axis(1));
    let mut dx = dxhat * h;
    dx -= &sum_dxhat.insert_axis(Axis(1));
    dx -= &(&c.xhat * &sum_dxhat_xhat.insert_axis(Axis(1)));
    dx *= &(c.inv_std.mapv(|v| v / h)).insert_axis(Axis(1));
    dx
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Parameters of one transformer layer. Weights are `[in, out]`, biases `[1, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Mat,
    pub bq: Mat,
    pub wk: Mat,
    pub bk: Mat,
    pub wv: Mat,
    pub bv: Mat,
    pub wo: Mat,
    pub bo: Mat,
    pub attn_norm: NormParams,
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
    pub ffn_norm: NormParams,
}

pub(crate) const LAYER_TENSOR_NAMES: [&str; 16] = [
    "attn.wq",
    "attn.bq",
    "attn.wk",
    "attn.bk",
    "attn.wv",
    "attn.bv",
    "attn.wo",
    "attn.bo",
    "attn_norm.gamma",
    "attn_norm.beta",
    "ffn.w1",
    "ffn.b1",
    "ffn.w2",
    "ffn.b2",
    "ffn_norm.gamma",
    "ffn_norm.beta",
];

impl LayerParams {
    pub fn init(rng: &mut ChaCha8Rng, h: usize, ffn: usize) -> Self {
        Self {
            wq: xavier(rng, h, h),
            bq: zeros_row(h),
            wk: xavier(rng, h, h),
            bk: zeros_row(h),
            wv: xavier(rng, h, h),
            bv: zeros_row(h),
            wo: xavier(rng, h, h),
            bo: zeros_row(h),
            attn_norm: NormParams::new(h),
            w1: xavier(rng, h, ffn),
            b1: zeros_row(ffn),
            w2: xavier(rng, ffn, h),
            b2: zeros_row(h),
            ffn_norm: NormParams::new(h),
        }
    }

    pub fn zeros(h: usize, ffn: usize) -> Self {
        Self {
            wq: Mat::zeros((h, h)),
            bq: zeros_row(h),
            wk: Mat::zeros((h, h)),
            bk: zeros_row(h),
            wv: Mat::zeros((h, h)),
            bv: zeros_row(h),
            wo: Mat::zeros((h, h)),
            bo: zeros_row(h),
            attn_norm: NormParams::zeros(h),
            w1: Mat::zeros((h, ffn)),
            b1: zeros_row(ffn),
            w2: Mat::zeros((ffn, h)),
            b2: zeros_row(h),
            ffn_norm: NormParams::zeros(h),
        }
    }

    /// Closed-form parameter count for hidden size `h` and FFN width `f`.
    pub fn count(h: usize, f: usize) -> usize {
        4 * (h * h + h) + (h * f + f) + (f * h + h) + 2 * (2 * h)
    }

    /// Tensors in `LAYER_TENSOR_NAMES` order.
    pub fn tensors(&self) -> [&Mat; 16] {
        [
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.attn_norm.gamma,
            &self.attn_norm.beta,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.ffn_norm.gamma,
            &self.ffn_norm.beta,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Mat; 16] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.attn_norm.gamma,
            &mut self.attn_norm.beta,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ffn_norm.gamma,
            &mut self.ffn_norm.beta,
        ]
    }

    pub(crate) fn add_assign(&mut self, other: &LayerParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    x: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    probs: Vec<Mat>,
    ctx: Mat,
    attn_norm: NormCache,
    h1: Mat,
    f1: Mat,
    g: Mat,
    ffn_norm: NormCache,
}

/// Row-wise softmax restricted to keys with `mask == 1`; masked keys get 0.
fn masked_softmax(scores: &mut Mat, mask: &[u8]) {
    for mut row in scores.rows_mut() {
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if mask[j] == 1 && v > max {
                max = v;
            }
        }
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if mask[j] == 1 {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        if sum > 0.0 {
            row.mapv_inplace(|v| v / sum);
        }
    }
}

pub(crate) fn layer_forward(p: &LayerParams, x: &Mat, mask: &[u8], heads: usize) -> (Mat, LayerCache) {
    let (n, h) = x.dim();
    let dh = h / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let xv = x.view();
    let q = affine(&xv, &p.wq, &p.bq);
    let k = affine(&xv, &p.wk, &p.bk);
    let v = affine(&xv, &p.wv, &p.bv);

    let mut ctx = Mat::zeros((n, h));
    let mut probs = Vec::with_capacity(heads);
    for hd in 0..heads {
        let cols = s![.., hd * dh..(hd + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        masked_softmax(&mut scores, mask);
        ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    let attn = affine(&ctx.view(), &p.wo, &p.bo);
    let (h1, attn_norm) = layer_norm(&(x + &attn), &p.attn_norm);
    let f1 = affine(&h1.view(), &p.w1, &p.b1);
    let g = f1.mapv(gelu);
    let f2 = affine(&g.view(), &p.w2, &p.b2);
    let (y, ffn_norm) = layer_norm(&(&h1 + &f2), &p.ffn_norm);
    let cache = LayerCache {
        x: x.clone(),
        q,
        k,
        v,
        probs,
        ctx,
        attn_norm,
        h1,
        f1,
        g,
        ffn_norm,
    };
    (y, cache)
}

/// Accumulates parameter gradients into `grads` and returns `dL/dx`.
pub(crate) fn layer_backward(p: &LayerParams, c: &LayerCache, dy: &Mat, heads: usize, grads: &mut LayerParams) -> Mat {
    let (n, h) = c.x.dim();
    let dh = h / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // Feed-forward block.
    let dr2 = layer_norm_backward(dy, &p.ffn_norm, &c.ffn_norm, &mut grads.ffn_norm);
    grads.w2 += &c.g.t().dot(&dr2);
    grads.b2 += &dr2.sum_axis(Axis(0)).insert_axis(Axis(0));
    let mut df1 = dr2.dot(&p.w2.t());
    Zip::from(&mut df1).and(&c.f1).for_each(|d, &f| *d *= gelu_grad(f));
    grads.w1 += &c.h1.t().dot(&df1);
    grads.b1 += &df1.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dh1 = dr2 + df1.dot(&p.w1.t());

    // Attention block.
    let dr1 = layer_norm_backward(&dh1, &p.attn_norm, &c.attn_norm, &mut grads.attn_norm);
    grads.wo += &c.ctx.t().dot(&dr1);
    grads.bo += &dr1.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dctx = dr1.dot(&p.wo.t());

    let mut dq = Mat::zeros((n, h));
    let mut dk = Mat::zeros((n, h));
    let mut dv = Mat::zeros((n, h));
    for hd in 0..heads {
        let cols = s![.., hd * dh..(hd + 1) * dh];
        let pr = &c.probs[hd];
        let dctx_h = dctx.slice(cols);
        let dp = dctx_h.dot(&c.v.slice(cols).t());
        dv.slice_mut(cols).assign(&pr.t().dot(&dctx_h));
        let row_dot = (&dp * pr).sum_axis(Axis(1));
        let ds = (dp - &row_dot.insert_axis(Axis(1))) * pr * scale;
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    let xt = c.x.t();
    grads.wq += &xt.dot(&dq);
    grads.bq += &dq.sum_axis(Axis(0)).insert_axis(Axis(0));
    grads.wk += &xt.dot(&dk);
    grads.bk += &dk.sum_axis(Axis(0)).insert_axis(Axis(0));
    grads.wv += &xt.dot(&dv);
    grads.bv += &dv.sum_axis(Axis(0)).insert_axis(Axis(0));

    let mut dx = dr1;
    dx += &dq.dot(&p.wq.t());
    dx += &dk.dot(&p.wk.t());
    dx += &dv.dot(&p.wv.t());
    dx
}
