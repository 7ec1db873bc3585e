use ndarray::{Array1, Array2, Array4, ArrayD, ArrayViewD, ArrayViewMutD, Ix2, Ix4};
use rand_chacha::ChaCha8Rng;

use super::conv::Conv2d;
use super::init::{he_std, trunc_normal};
use super::params::GradStore;

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Train,
    Eval,
}

/// Fully connected layer, weight layout `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = trunc_normal(&[out_dim, in_dim], he_std(in_dim), rng)
            .into_dimensionality::<Ix2>()
            .unwrap();
        Self {
            w,
            b: Array1::zeros(out_dim),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            w: Array2::zeros((out_dim, in_dim)),
            b: Array1::zeros(out_dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }

    /// Returns `grad_input` and records `w`/`b` gradients under `prefix`.
    pub fn backward(
        &self,
        x: &Array2<f64>,
        gy: &Array2<f64>,
        prefix: &str,
        grads: &mut GradStore,
    ) -> Array2<f64> {
        grads.add(&format!("{prefix}/w"), gy.t().dot(x).into_dyn());
        grads.add(
            &format!("{prefix}/b"),
            gy.sum_axis(ndarray::Axis(0)).into_dyn(),
        );
        gy.dot(&self.w)
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Shared layer-norm math on a `[rows, features]` matrix.
fn ln_forward(
    x: &Array2<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let d = x.shape()[1] as f64;
    let mut xhat = Array2::<f64>::zeros(x.raw_dim());
    let mut inv_std = Array1::<f64>::zeros(x.shape()[0]);
    let mut y = Array2::<f64>::zeros(x.raw_dim());
    for (r, row) in x.outer_iter().enumerate() {
        let m = row.sum() / d;
        let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / d;
        let inv = 1.0 / (v + LN_EPS).sqrt();
        inv_std[r] = inv;
        for (c, &xv) in row.iter().enumerate() {
            let h = (xv - m) * inv;
            xhat[[r, c]] = h;
            y[[r, c]] = h * gamma[c] + beta[c];
        }
    }
    (y, xhat, inv_std)
}

fn ln_backward(
    gy: &Array2<f64>,
    xhat: &Array2<f64>,
    inv_std: &Array1<f64>,
    gamma: &Array1<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let d = gy.shape()[1];
    let df = d as f64;
    let mut gx = Array2::<f64>::zeros(gy.raw_dim());
    let mut ggamma = Array1::<f64>::zeros(d);
    let mut gbeta = Array1::<f64>::zeros(d);
    for r in 0..gy.shape()[0] {
        let mut sum1 = 0.0;
        let mut sum2 = 0.0;
        for c in 0..d {
            let dxhat = gy[[r, c]] * gamma[c];
            sum1 += dxhat;
            sum2 += dxhat * xhat[[r, c]];
            ggamma[c] += gy[[r, c]] * xhat[[r, c]];
            gbeta[c] += gy[[r, c]];
        }
        let inv = inv_std[r];
        for c in 0..d {
            let dxhat = gy[[r, c]] * gamma[c];
            gx[[r, c]] = inv / df * (df * dxhat - sum1 - xhat[[r, c]] * sum2);
        }
    }
    (gx, ggamma, gbeta)
}

/// Layer norm over the trailing feature axis of a `[N, D]` tensor.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }
}

/// Layer norm over the channel axis of an NCHW tensor, applied independently
/// at every spatial position (channels-first convention).
#[derive(Debug, Clone)]
pub struct LayerNorm2d {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl LayerNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
        }
    }
}

fn nchw_to_rows(x: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = Array2::<f64>::zeros((n * h * w, c));
    for ni in 0..n {
        for i in 0..h {
            for j in 0..w {
                let r = (ni * h + i) * w + j;
                for ci in 0..c {
                    out[[r, ci]] = x[[ni, ci, i, j]];
                }
            }
        }
    }
    out
}

fn rows_to_nchw(rows: &Array2<f64>, dims: (usize, usize, usize, usize)) -> Array4<f64> {
    let (n, c, h, w) = dims;
    let mut out = Array4::<f64>::zeros((n, c, h, w));
    for ni in 0..n {
        for i in 0..h {
            for j in 0..w {
                let r = (ni * h + i) * w + j;
                for ci in 0..c {
                    out[[ni, ci, i, j]] = rows[[r, ci]];
                }
            }
        }
    }
    out
}

/// Learnable per-channel scaling of an NCHW tensor.
#[derive(Debug, Clone)]
pub struct LayerScale {
    pub gamma: Array1<f64>,
}

impl LayerScale {
    pub fn new(channels: usize, init: f64) -> Self {
        Self {
            gamma: Array1::from_elem(channels, init),
        }
    }
}

const GELU_C1: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C2: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C1 * (x + GELU_C2 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C1 * (x + GELU_C2 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C1 * (1.0 + 3.0 * GELU_C2 * x * x)
}

/// One network layer. Composite models are built as `Block`s of these.
#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    Linear(Linear),
    Norm2d(LayerNorm2d),
    Norm(LayerNorm),
    Scale(LayerScale),
    Gelu,
    Relu,
    Sigmoid,
    /// Global average pool: NCHW -> [N, C].
    AvgPoolAll,
    /// Nearest-neighbour upsampling by an integer factor.
    Upsample(usize),
    Dropout(f64),
    /// Reshape the per-sample trailing dimensions to the given shape.
    ReshapeTo(Vec<usize>),
    /// `y = x + f(x)` with `f` the inner block.
    Residual(Block),
}

/// Per-layer state captured during forward, consumed once by backward.
#[derive(Debug)]
pub enum Cache {
    Conv {
        x: Array4<f64>,
    },
    Linear {
        x: Array2<f64>,
    },
    Norm2d {
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
        dims: (usize, usize, usize, usize),
    },
    Norm {
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    Scale {
        x: Array4<f64>,
    },
    Gelu {
        x: ArrayD<f64>,
    },
    Relu {
        x: ArrayD<f64>,
    },
    Sigmoid {
        y: ArrayD<f64>,
    },
    AvgPool {
        dims: (usize, usize, usize, usize),
    },
    Upsample {
        in_hw: (usize, usize),
    },
    Dropout {
        mask: Option<ArrayD<f64>>,
    },
    Reshape {
        shape: Vec<usize>,
    },
    Residual {
        inner: Vec<Cache>,
    },
}

fn as4(x: ArrayD<f64>) -> Array4<f64> {
    x.into_dimensionality::<Ix4>()
        .expect("expected NCHW tensor")
}

fn as2(x: ArrayD<f64>) -> Array2<f64> {
    x.into_dimensionality::<Ix2>()
        .expect("expected [N, D] tensor")
}

impl Layer {
    fn forward(
        &self,
        x: ArrayD<f64>,
        mode: RunMode,
        rng: &mut Option<&mut ChaCha8Rng>,
        caches: &mut Vec<Cache>,
    ) -> ArrayD<f64> {
        match self {
            Layer::Conv(conv) => {
                let x4 = as4(x);
                let y = conv.forward(&x4);
                caches.push(Cache::Conv { x: x4 });
                y.into_dyn()
            }
            Layer::Linear(lin) => {
                let x2 = as2(x);
                let y = lin.forward(&x2);
                caches.push(Cache::Linear { x: x2 });
                y.into_dyn()
            }
            Layer::Norm2d(norm) => {
                let x4 = as4(x);
                let dims = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
                let rows = nchw_to_rows(&x4);
                let (y, xhat, inv_std) = ln_forward(&rows, &norm.gamma, &norm.beta);
                caches.push(Cache::Norm2d {
                    xhat,
                    inv_std,
                    dims,
                });
                rows_to_nchw(&y, dims).into_dyn()
            }
            Layer::Norm(norm) => {
                let x2 = as2(x);
                let (y, xhat, inv_std) = ln_forward(&x2, &norm.gamma, &norm.beta);
                caches.push(Cache::Norm { xhat, inv_std });
                y.into_dyn()
            }
            Layer::Scale(scale) => {
                let x4 = as4(x);
                let mut y = x4.clone();
                for ((_, c, _, _), v) in y.indexed_iter_mut() {
                    *v *= scale.gamma[c];
                }
                caches.push(Cache::Scale { x: x4 });
                y.into_dyn()
            }
            Layer::Gelu => {
                let y = x.mapv(gelu);
                caches.push(Cache::Gelu { x });
                y
            }
            Layer::Relu => {
                let y = x.mapv(|v| v.max(0.0));
                caches.push(Cache::Relu { x });
                y
            }
            Layer::Sigmoid => {
                let y = x.mapv(|v| 1.0 / (1.0 + (-v).exp()));
                caches.push(Cache::Sigmoid { y: y.clone() });
                y
            }
            Layer::AvgPoolAll => {
                let x4 = as4(x);
                let dims = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
                let (n, c, h, w) = dims;
                let mut y = Array2::<f64>::zeros((n, c));
                let scale = 1.0 / (h * w) as f64;
                for ni in 0..n {
                    for ci in 0..c {
                        let mut acc = 0.0;
                        for i in 0..h {
                            for j in 0..w {
                                acc += x4[[ni, ci, i, j]];
                            }
                        }
                        y[[ni, ci]] = acc * scale;
                    }
                }
                caches.push(Cache::AvgPool { dims });
                y.into_dyn()
            }
            Layer::Upsample(f) => {
                let x4 = as4(x);
                let (n, c, h, w) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
                let mut y = Array4::<f64>::zeros((n, c, h * f, w * f));
                for ni in 0..n {
                    for ci in 0..c {
                        for i in 0..h * f {
                            for j in 0..w * f {
                                y[[ni, ci, i, j]] = x4[[ni, ci, i / f, j / f]];
                            }
                        }
                    }
                }
                caches.push(Cache::Upsample { in_hw: (h, w) });
                y.into_dyn()
            }
            Layer::Dropout(rate) => {
                if mode == RunMode::Train && *rate > 0.0 {
                    let rng = rng
                        .as_deref_mut()
                        .expect("dropout in train mode requires an rng");
                    let keep = 1.0 - rate;
                    let mask = x.mapv(|_| {
                        if rand::Rng::random::<f64>(rng) < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    let y = &x * &mask;
                    caches.push(Cache::Dropout { mask: Some(mask) });
                    y
                } else {
                    caches.push(Cache::Dropout { mask: None });
                    x
                }
            }
            Layer::ReshapeTo(target) => {
                let n = x.shape()[0];
                let shape = x.shape().to_vec();
                let mut new_shape = vec![n];
                new_shape.extend_from_slice(target);
                let y = x
                    .to_shape(new_shape.clone())
                    .expect("reshape element count")
                    .to_owned();
                caches.push(Cache::Reshape { shape });
                y
            }
            Layer::Residual(block) => {
                let skip = x.clone();
                let mut inner = Vec::new();
                let y = block.forward_cached(x, mode, rng.as_deref_mut(), &mut inner);
                caches.push(Cache::Residual { inner });
                y + skip
            }
        }
    }

    fn backward(
        &self,
        gy: ArrayD<f64>,
        cache: Cache,
        prefix: &str,
        grads: &mut GradStore,
    ) -> ArrayD<f64> {
        match (self, cache) {
            (Layer::Conv(conv), Cache::Conv { x }) => {
                let gy4 = as4(gy);
                let (gx, gw, gb) = conv.backward(&x, &gy4);
                grads.add(&format!("{prefix}/w"), gw.into_dyn());
                grads.add(&format!("{prefix}/b"), gb.into_dyn());
                gx.into_dyn()
            }
            (Layer::Linear(lin), Cache::Linear { x }) => {
                let gy2 = as2(gy);
                lin.backward(&x, &gy2, prefix, grads).into_dyn()
            }
            (
                Layer::Norm2d(norm),
                Cache::Norm2d {
                    xhat,
                    inv_std,
                    dims,
                },
            ) => {
                let gy_rows = nchw_to_rows(&as4(gy));
                let (gx, ggamma, gbeta) = ln_backward(&gy_rows, &xhat, &inv_std, &norm.gamma);
                grads.add(&format!("{prefix}/g"), ggamma.into_dyn());
                grads.add(&format!("{prefix}/b"), gbeta.into_dyn());
                rows_to_nchw(&gx, dims).into_dyn()
            }
            (Layer::Norm(norm), Cache::Norm { xhat, inv_std }) => {
                let gy2 = as2(gy);
                let (gx, ggamma, gbeta) = ln_backward(&gy2, &xhat, &inv_std, &norm.gamma);
                grads.add(&format!("{prefix}/g"), ggamma.into_dyn());
                grads.add(&format!("{prefix}/b"), gbeta.into_dyn());
                gx.into_dyn()
            }
            (Layer::Scale(scale), Cache::Scale { x }) => {
                let gy4 = as4(gy);
                let mut ggamma = Array1::<f64>::zeros(scale.gamma.len());
                let mut gx = Array4::<f64>::zeros(x.raw_dim());
                for ((n, c, i, j), v) in gy4.indexed_iter() {
                    ggamma[c] += v * x[[n, c, i, j]];
                    gx[[n, c, i, j]] = v * scale.gamma[c];
                }
                grads.add(&format!("{prefix}/g"), ggamma.into_dyn());
                gx.into_dyn()
            }
            (Layer::Gelu, Cache::Gelu { x }) => gy * x.mapv(gelu_grad),
            (Layer::Relu, Cache::Relu { x }) => gy * x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }),
            (Layer::Sigmoid, Cache::Sigmoid { y }) => gy * y.mapv(|v| v * (1.0 - v)),
            (Layer::AvgPoolAll, Cache::AvgPool { dims }) => {
                let gy2 = as2(gy);
                let (n, c, h, w) = dims;
                let scale = 1.0 / (h * w) as f64;
                let mut gx = Array4::<f64>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        let g = gy2[[ni, ci]] * scale;
                        for i in 0..h {
                            for j in 0..w {
                                gx[[ni, ci, i, j]] = g;
                            }
                        }
                    }
                }
                gx.into_dyn()
            }
            (Layer::Upsample(f), Cache::Upsample { in_hw }) => {
                let gy4 = as4(gy);
                let (n, c) = (gy4.shape()[0], gy4.shape()[1]);
                let (h, w) = in_hw;
                let mut gx = Array4::<f64>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        for i in 0..h * f {
                            for j in 0..w * f {
                                gx[[ni, ci, i / f, j / f]] += gy4[[ni, ci, i, j]];
                            }
                        }
                    }
                }
                gx.into_dyn()
            }
            (Layer::Dropout(_), Cache::Dropout { mask }) => match mask {
                Some(m) => gy * &m,
                None => gy,
            },
            (Layer::ReshapeTo(_), Cache::Reshape { shape }) => {
                gy.to_shape(shape).expect("reshape back").to_owned()
            }
            (Layer::Residual(block), Cache::Residual { mut inner }) => {
                let gx_inner = block.backward_cached(gy.clone(), &mut inner, prefix, grads);
                gy + gx_inner
            }
            _ => unreachable!("layer/cache mismatch"),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<f64>)) {
        match self {
            Layer::Conv(c) => {
                f(&format!("{prefix}/w"), c.w.view().into_dyn());
                f(&format!("{prefix}/b"), c.b.view().into_dyn());
            }
            Layer::Linear(l) => {
                f(&format!("{prefix}/w"), l.w.view().into_dyn());
                f(&format!("{prefix}/b"), l.b.view().into_dyn());
            }
            Layer::Norm2d(n) => {
                f(&format!("{prefix}/g"), n.gamma.view().into_dyn());
                f(&format!("{prefix}/b"), n.beta.view().into_dyn());
            }
            Layer::Norm(n) => {
                f(&format!("{prefix}/g"), n.gamma.view().into_dyn());
                f(&format!("{prefix}/b"), n.beta.view().into_dyn());
            }
            Layer::Scale(s) => f(&format!("{prefix}/g"), s.gamma.view().into_dyn()),
            Layer::Residual(b) => b.visit(prefix, f),
            _ => {}
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<f64>)) {
        match self {
            Layer::Conv(c) => {
                f(&format!("{prefix}/w"), c.w.view_mut().into_dyn());
                f(&format!("{prefix}/b"), c.b.view_mut().into_dyn());
            }
            Layer::Linear(l) => {
                f(&format!("{prefix}/w"), l.w.view_mut().into_dyn());
                f(&format!("{prefix}/b"), l.b.view_mut().into_dyn());
            }
            Layer::Norm2d(n) => {
                f(&format!("{prefix}/g"), n.gamma.view_mut().into_dyn());
                f(&format!("{prefix}/b"), n.beta.view_mut().into_dyn());
            }
            Layer::Norm(n) => {
                f(&format!("{prefix}/g"), n.gamma.view_mut().into_dyn());
                f(&format!("{prefix}/b"), n.beta.view_mut().into_dyn());
            }
            Layer::Scale(s) => f(&format!("{prefix}/g"), s.gamma.view_mut().into_dyn()),
            Layer::Residual(b) => b.visit_mut(prefix, f),
            _ => {}
        }
    }
}

/// A sequential stack of layers.
#[derive(Debug, Clone, Default)]
pub struct Block {
    pub layers: Vec<Layer>,
}

impl Block {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    /// Forward pass that appends one cache entry per layer to `caches`.
    pub fn forward_cached(
        &self,
        mut x: ArrayD<f64>,
        mode: RunMode,
        mut rng: Option<&mut ChaCha8Rng>,
        caches: &mut Vec<Cache>,
    ) -> ArrayD<f64> {
        for layer in &self.layers {
            x = layer.forward(x, mode, &mut rng, caches);
        }
        x
    }

    /// Inference-only forward; no caches are retained.
    pub fn forward(
        &self,
        x: ArrayD<f64>,
        mode: RunMode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> ArrayD<f64> {
        let mut caches = Vec::new();
        self.forward_cached(x, mode, rng, &mut caches)
    }

    /// Backward pass; pops this block's caches from the tail of `caches`.
    pub fn backward_cached(
        &self,
        mut gy: ArrayD<f64>,
        caches: &mut Vec<Cache>,
        prefix: &str,
        grads: &mut GradStore,
    ) -> ArrayD<f64> {
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let cache = caches.pop().expect("cache stack underflow");
            gy = layer.backward(gy, cache, &format!("{prefix}/{i}"), grads);
        }
        gy
    }

    /// Number of cache entries this block pushes per forward pass.
    pub fn cache_len(&self) -> usize {
        self.layers.len()
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<f64>)) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("{prefix}/{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<f64>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("{prefix}/{i}"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init::standard_normal;
    use rand::SeedableRng;

    fn loss_of(block: &Block, x: &ArrayD<f64>, c: &ArrayD<f64>) -> f64 {
        let y = block.forward(x.clone(), RunMode::Eval, None);
        (&y * c).sum()
    }

    fn perturb(block: &mut Block, path: &str, idx: usize, delta: f64) {
        block.visit_mut("m", &mut |p, mut v| {
            if p == path {
                v.as_slice_mut().unwrap()[idx] += delta;
            }
        });
    }

    /// Checks every parameter gradient and the input gradient against
    /// central differences on the scalar loss sum(y * c).
    fn fd_check(block: &mut Block, x: ArrayD<f64>) {
        let y0 = block.forward(x.clone(), RunMode::Eval, None);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = standard_normal(y0.shape(), &mut rng);

        let mut caches = Vec::new();
        let _ = block.forward_cached(x.clone(), RunMode::Eval, None, &mut caches);
        let mut grads = GradStore::new();
        let gx = block.backward_cached(c.clone(), &mut caches, "m", &mut grads);

        let h = 1e-5;
        let tol = 1e-4;
        let mut paths: Vec<(String, usize)> = Vec::new();
        block.visit("m", &mut |p, v| paths.push((p.to_string(), v.len())));
        assert!(!paths.is_empty());
        for (path, len) in &paths {
            let analytic = grads.get(path).unwrap().clone();
            let flat = analytic.as_slice().unwrap();
            for (i, &ana) in flat.iter().enumerate().take(*len) {
                perturb(block, path, i, h);
                let lp = loss_of(block, &x, &c);
                perturb(block, path, i, -2.0 * h);
                let lm = loss_of(block, &x, &c);
                perturb(block, path, i, h);
                let num = (lp - lm) / (2.0 * h);
                let denom = num.abs().max(ana.abs()).max(1e-6);
                assert!(
                    (num - ana).abs() / denom < tol,
                    "{path}[{i}]: numeric {num} vs analytic {ana}"
                );
            }
        }

        let mut xp = x.clone();
        let gx_flat = gx.as_standard_layout();
        let gx_flat = gx_flat.as_slice().unwrap();
        for i in 0..x.len().min(12) {
            let xs = xp.as_slice_mut().unwrap();
            xs[i] += h;
            let lp = loss_of(block, &xp, &c);
            let xs = xp.as_slice_mut().unwrap();
            xs[i] -= 2.0 * h;
            let lm = loss_of(block, &xp, &c);
            let xs = xp.as_slice_mut().unwrap();
            xs[i] += h;
            let num = (lp - lm) / (2.0 * h);
            let denom = num.abs().max(gx_flat[i].abs()).max(1e-6);
            assert!(
                (num - gx_flat[i]).abs() / denom < tol,
                "input[{i}]: numeric {num} vs analytic {}",
                gx_flat[i]
            );
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn conv_gelu_grads_match_finite_differences() {
        let mut r = rng();
        let block = Block::new(vec![
            Layer::Conv(Conv2d::new(2, 3, 3, 2, 1, 1, 0.2, &mut r)),
            Layer::Gelu,
        ]);
        let x = standard_normal(&[2, 2, 6, 6], &mut r);
        fd_check(&mut block.clone(), x);
    }

    #[test]
    fn depthwise_conv_norm_scale_grads_match_finite_differences() {
        let mut r = rng();
        let block = Block::new(vec![
            Layer::Conv(Conv2d::new(4, 4, 3, 1, 1, 4, 0.2, &mut r)),
            Layer::Norm2d(LayerNorm2d::new(4)),
            Layer::Scale(LayerScale::new(4, 0.5)),
        ]);
        let x = standard_normal(&[2, 4, 4, 4], &mut r);
        fd_check(&mut block.clone(), x);
    }

    #[test]
    fn mlp_grads_match_finite_differences() {
        let mut r = rng();
        let block = Block::new(vec![
            Layer::Linear(Linear::new(5, 7, &mut r)),
            Layer::Relu,
            Layer::Linear(Linear::new(7, 3, &mut r)),
        ]);
        let x = standard_normal(&[4, 5], &mut r);
        fd_check(&mut block.clone(), x);
    }

    #[test]
    fn residual_block_grads_match_finite_differences() {
        let mut r = rng();
        let inner = Block::new(vec![
            Layer::Conv(Conv2d::new(3, 6, 1, 1, 0, 1, 0.3, &mut r)),
            Layer::Gelu,
            Layer::Conv(Conv2d::new(6, 3, 1, 1, 0, 1, 0.3, &mut r)),
        ]);
        let block = Block::new(vec![Layer::Residual(inner)]);
        let x = standard_normal(&[2, 3, 3, 3], &mut r);
        fd_check(&mut block.clone(), x);
    }

    #[test]
    fn upsample_conv_sigmoid_grads_match_finite_differences() {
        let mut r = rng();
        let block = Block::new(vec![
            Layer::Upsample(2),
            Layer::Conv(Conv2d::new(2, 2, 3, 1, 1, 1, 0.3, &mut r)),
            Layer::Sigmoid,
        ]);
        let x = standard_normal(&[1, 2, 3, 3], &mut r);
        fd_check(&mut block.clone(), x);
    }

    #[test]
    fn pool_norm_linear_grads_match_finite_differences() {
        let mut r = rng();
        let block = Block::new(vec![
            Layer::AvgPoolAll,
            Layer::Norm(LayerNorm::new(3)),
            Layer::Linear(Linear::new(3, 2, &mut r)),
        ]);
        let x = standard_normal(&[3, 3, 4, 4], &mut r);
        fd_check(&mut block.clone(), x);
    }

    #[test]
    fn linear_reshape_conv_grads_match_finite_differences() {
        let mut r = rng();
        let block = Block::new(vec![
            Layer::Linear(Linear::new(4, 2 * 3 * 3, &mut r)),
            Layer::ReshapeTo(vec![2, 3, 3]),
            Layer::Conv(Conv2d::new(2, 1, 3, 1, 1, 1, 0.3, &mut r)),
        ]);
        let x = standard_normal(&[2, 4], &mut r);
        fd_check(&mut block.clone(), x);
    }

    #[test]
    fn channel_norm_on_single_pixel_matches_feature_norm() {
        let mut r = rng();
        let x2 = standard_normal(&[5, 6], &mut r)
            .into_dimensionality::<Ix2>()
            .unwrap();
        let x4 = x2
            .clone()
            .into_shape_with_order((5, 6, 1, 1))
            .unwrap()
            .into_dyn();
        let norm = Block::new(vec![Layer::Norm(LayerNorm::new(6))]);
        let norm2d = Block::new(vec![Layer::Norm2d(LayerNorm2d::new(6))]);
        let a = norm.forward(x2.into_dyn(), RunMode::Eval, None);
        let b = norm2d.forward(x4, RunMode::Eval, None);
        let b2 = b.to_shape(vec![5, 6]).unwrap().to_owned();
        for (av, bv) in a.iter().zip(b2.iter()) {
            assert!((av - bv).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_is_identity_in_eval_and_scales_in_train() {
        let block = Block::new(vec![Layer::Dropout(0.5)]);
        let x = ArrayD::from_elem(ndarray::IxDyn(&[1000]), 1.0);
        let eval = block.forward(x.clone(), RunMode::Eval, None);
        assert_eq!(eval, x);

        let mut r = rng();
        let train = block.forward(x.clone(), RunMode::Train, Some(&mut r));
        let kept = train.iter().filter(|v| **v > 0.0).count();
        assert!(kept > 400 && kept < 600, "kept {kept} of 1000");
        for v in train.iter() {
            assert!(*v == 0.0 || (*v - 2.0).abs() < 1e-12);
        }

        let mut r1 = rng();
        let mut r2 = rng();
        let a = block.forward(x.clone(), RunMode::Train, Some(&mut r1));
        let b = block.forward(x, RunMode::Train, Some(&mut r2));
        assert_eq!(a, b);
    }

    #[test]
    fn dropout_backward_reuses_forward_mask() {
        let block = Block::new(vec![Layer::Dropout(0.3)]);
        let x = ArrayD::from_elem(ndarray::IxDyn(&[64]), 3.0);
        let mut r = rng();
        let mut caches = Vec::new();
        let y = block.forward_cached(x.clone(), RunMode::Train, Some(&mut r), &mut caches);
        let mut grads = GradStore::new();
        let gx = block.backward_cached(
            ArrayD::ones(ndarray::IxDyn(&[64])),
            &mut caches,
            "m",
            &mut grads,
        );
        for (yv, gv) in y.iter().zip(gx.iter()) {
            // same elements dropped, same 1/keep scaling
            assert!((yv / 3.0 - gv).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_preserves_shape_and_adds_skip() {
        let mut r = rng();
        let inner = Block::new(vec![Layer::Conv(Conv2d::new(
            2, 2, 3, 1, 1, 1, 0.0, &mut r,
        ))]);
        // zero-weight inner branch means the residual output equals the input
        let block = Block::new(vec![Layer::Residual(inner)]);
        let x = standard_normal(&[1, 2, 4, 4], &mut r);
        let y = block.forward(x.clone(), RunMode::Eval, None);
        for (xv, yv) in x.iter().zip(y.iter()) {
            assert!((xv - yv).abs() < 1e-12);
        }
    }
}
