//! Dense building blocks with explicit backward passes.
//!
//! Activations are row-major `(tokens, features)` matrices. Every `backward`
//! accumulates parameter gradients into a same-shaped gradient struct and
//! returns the gradient with respect to the layer input.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub type Mat = Array2<f64>;

const LN_EPS: f64 = 1e-6;

/// `y = x W + b` with `W` stored as `(in, out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Mat,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Mat::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    /// Xavier-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        Self {
            weight: Mat::from_shape_fn((input, output), |_| rng.random_range(-bound..bound)),
            bias: Array1::zeros(output),
        }
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    pub fn backward(&self, x: &Mat, dy: &Mat, grad: &mut Linear) -> Mat {
        general_mat_mul(1.0, &x.t(), dy, 1.0, &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

pub struct LayerNormCache {
    xhat: Mat,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            gamma: Array1::zeros(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, LayerNormCache) {
        let d = x.ncols() as f64;
        let mean = x.sum_axis(Axis(1)) / d;
        let centered = x - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|c| c * c).sum_axis(Axis(1)) / d;
        let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
        let xhat = centered * inv_std.view().insert_axis(Axis(1));
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Mat, grad: &mut LayerNorm) -> Mat {
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let dxhat = dy * &self.gamma;
        let d = dy.ncols() as f64;
        let mean_d = dxhat.sum_axis(Axis(1)) / d;
        let mean_dx = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / d;
        let mut dx = dxhat;
        for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
            let xh = cache.xhat.row(i);
            let (m, mx, s) = (mean_d[i], mean_dx[i], cache.inv_std[i]);
            row.zip_mut_with(&xh, |g, &h| *g = s * (*g - m - h * mx));
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Multi-head self-attention with a fused `(C, 3C)` query/key/value projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
}

pub struct AttentionCache {
    input: Mat,
    qkv: Mat,
    probs: Vec<Mat>,
    context: Mat,
}

impl Attention {
    pub fn forward(&self, x: &Mat, heads: usize) -> (Mat, AttentionCache) {
        let c = x.ncols();
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qkv = self.qkv.forward(x);
        let mut context = Mat::zeros((x.nrows(), c));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., c + h * dh..c + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * c + h * dh..2 * c + (h + 1) * dh]);
            let mut p = q.dot(&k.t()) * scale;
            softmax_rows(&mut p);
            context.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&p.dot(&v));
            probs.push(p);
        }
        let out = self.proj.forward(&context);
        (
            out,
            AttentionCache {
                input: x.clone(),
                qkv,
                probs,
                context,
            },
        )
    }

    pub fn backward(&self, cache: &AttentionCache, dy: &Mat, heads: usize, grad: &mut Attention) -> Mat {
        let c = cache.input.ncols();
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let dcontext = self.proj.backward(&cache.context, dy, &mut grad.proj);
        let mut dqkv = Mat::zeros(cache.qkv.raw_dim());
        for (h, p) in cache.probs.iter().enumerate() {
            let (qs, ks, vs) = (h * dh, c + h * dh, 2 * c + h * dh);
            let q = cache.qkv.slice(s![.., qs..qs + dh]);
            let k = cache.qkv.slice(s![.., ks..ks + dh]);
            let v = cache.qkv.slice(s![.., vs..vs + dh]);
            let dctx = dcontext.slice(s![.., h * dh..(h + 1) * dh]);
            let dp = dctx.dot(&v.t());
            dqkv.slice_mut(s![.., vs..vs + dh]).assign(&p.t().dot(&dctx));
            // softmax backward, row-wise
            let row_dot = (&dp * p).sum_axis(Axis(1));
            let mut ds = dp;
            ds -= &row_dot.view().insert_axis(Axis(1));
            ds *= p;
            ds *= scale;
            dqkv.slice_mut(s![.., qs..qs + dh]).assign(&ds.dot(&k));
            dqkv.slice_mut(s![.., ks..ks + dh]).assign(&ds.t().dot(&q));
        }
        self.qkv.backward(&cache.input, &dqkv, &mut grad.qkv)
    }
}

pub fn softmax_rows(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - max).exp());
        let total = row.sum();
        row.mapv_inplace(|x| x / total);
    }
}

/// Pre-norm transformer block: `h = x + attn(ln1(x)); y = h + mlp(ln2(h))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct BlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    normed2: Mat,
    pre_act: Mat,
    act: Mat,
}

impl Block {
    pub fn init<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            norm1: LayerNorm::new(dim),
            attn: Attention {
                qkv: Linear::init(dim, 3 * dim, rng),
                proj: Linear::init(dim, dim, rng),
            },
            norm2: LayerNorm::new(dim),
            fc1: Linear::init(dim, hidden, rng),
            fc2: Linear::init(hidden, dim, rng),
        }
    }

    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            norm1: LayerNorm::zeros(dim),
            attn: Attention {
                qkv: Linear::zeros(dim, 3 * dim),
                proj: Linear::zeros(dim, dim),
            },
            norm2: LayerNorm::zeros(dim),
            fc1: Linear::zeros(dim, hidden),
            fc2: Linear::zeros(hidden, dim),
        }
    }

    pub fn forward(&self, x: &Mat, heads: usize) -> (Mat, BlockCache) {
        let (a, ln1) = self.norm1.forward(x);
        let (attn_out, attn) = self.attn.forward(&a, heads);
        let h = x + &attn_out;
        let (normed2, ln2) = self.norm2.forward(&h);
        let pre_act = self.fc1.forward(&normed2);
        let act = pre_act.mapv(gelu);
        let y = &h + &self.fc2.forward(&act);
        (
            y,
            BlockCache {
                ln1,
                attn,
                ln2,
                normed2,
                pre_act,
                act,
            },
        )
    }

    pub fn backward(&self, cache: &BlockCache, dy: &Mat, heads: usize, grad: &mut Block) -> Mat {
        let dact = self.fc2.backward(&cache.act, dy, &mut grad.fc2);
        let mut dpre = dact;
        dpre.zip_mut_with(&cache.pre_act, |d, &u| *d *= gelu_grad(u));
        let dnormed2 = self.fc1.backward(&cache.normed2, &dpre, &mut grad.fc1);
        let dh = dy + &self.norm2.backward(&cache.ln2, &dnormed2, &mut grad.norm2);
        let da = self.attn.backward(&cache.attn, &dh, heads, &mut grad.attn);
        &dh + &self.norm1.backward(&cache.ln1, &da, &mut grad.norm1)
    }
}

/// Truncated normal (two standard deviations) initializer.
pub fn trunc_normal<R: Rng + ?Sized>(shape: (usize, usize), std: f64, rng: &mut R) -> Mat {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Mat::from_shape_fn(shape, |_| loop {
        let z: f64 = normal.sample(rng);
        if z.abs() <= 2.0 {
            break z * std;
        }
    })
}
