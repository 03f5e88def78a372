//! Minimal dense neural network layers with explicit backward passes:
//! linear, layer norm, SiLU, two-layer perceptrons and multi-head
//! self-attention blocks. Everything is f64 and deterministic; gradients
//! are exact and validated against finite differences in the test suites.

use ndarray::{s, Array1, Array2};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;

pub fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

pub fn silu_derivative(z: f64) -> f64 {
    let s = 1.0 / (1.0 + (-z).exp());
    s * (1.0 + z * (1.0 - s))
}

/// Sinusoidal embedding of a scalar position (timestep or frame index).
pub fn sinusoidal_embedding(pos: f64, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    let half = dim / 2;
    for i in 0..half {
        let freq = (10_000.0_f64).powf(-(i as f64) / half.max(1) as f64);
        out[2 * i] = (pos * freq).sin();
        out[2 * i + 1] = (pos * freq).cos();
    }
    out
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Dense layer `y = x W + b` with `x: L x in`, `W: in x out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn init(in_dim: usize, out_dim: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = rand_distr::StandardNormal;
        let std = scale / (in_dim as f64).sqrt();
        Linear {
            w: Array2::from_shape_fn((in_dim, out_dim), |_| {
                let z: f64 = normal.sample(rng);
                z * std
            }),
            b: Array1::zeros(out_dim),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            w: Array2::zeros((in_dim, out_dim)),
            b: Array1::zeros(out_dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(ndarray::Axis(0));
        dy.dot(&self.w.t())
    }

    /// Parameter gradients only, for layers whose inputs are data.
    pub fn backward_params_only(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(ndarray::Axis(0));
    }
}

// ---------------------------------------------------------------------------
// LayerNorm
// ---------------------------------------------------------------------------

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

pub struct LayerNormCache {
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn identity(dim: usize) -> Self {
        LayerNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        LayerNorm {
            gamma: Array1::zeros(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let l = x.nrows();
        let d = x.ncols() as f64;
        let mut normalized = Array2::zeros(x.raw_dim());
        let mut inv_std = Array1::zeros(l);
        let mut out = Array2::zeros(x.raw_dim());
        for r in 0..l {
            let row = x.row(r);
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let istd = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = istd;
            for c in 0..x.ncols() {
                let n = (x[(r, c)] - mean) * istd;
                normalized[(r, c)] = n;
                out[(r, c)] = self.gamma[c] * n + self.beta[c];
            }
        }
        (out, LayerNormCache {
            normalized,
            inv_std,
        })
    }

    pub fn backward(
        &self,
        cache: &LayerNormCache,
        dy: &Array2<f64>,
        grad: &mut LayerNorm,
    ) -> Array2<f64> {
        let l = dy.nrows();
        let d = dy.ncols();
        let dn = d as f64;
        let mut dx = Array2::zeros(dy.raw_dim());
        for r in 0..l {
            let mut mean_dxhat = 0.0;
            let mut mean_dxhat_xhat = 0.0;
            for c in 0..d {
                let xhat = cache.normalized[(r, c)];
                let dyv = dy[(r, c)];
                grad.gamma[c] += dyv * xhat;
                grad.beta[c] += dyv;
                let dxhat = dyv * self.gamma[c];
                mean_dxhat += dxhat;
                mean_dxhat_xhat += dxhat * xhat;
            }
            mean_dxhat /= dn;
            mean_dxhat_xhat /= dn;
            for c in 0..d {
                let xhat = cache.normalized[(r, c)];
                let dxhat = dy[(r, c)] * self.gamma[c];
                dx[(r, c)] = cache.inv_std[r] * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Two-layer perceptron (SiLU between)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Mlp2 {
    pub l1: Linear,
    pub l2: Linear,
}

pub struct Mlp2Cache {
    x: Array2<f64>,
    pre_act: Array2<f64>,
    post_act: Array2<f64>,
}

impl Mlp2 {
    pub fn init(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Mlp2 {
            l1: Linear::init(in_dim, hidden, 1.0, rng),
            l2: Linear::init(hidden, out_dim, 1.0, rng),
        }
    }

    pub fn zeros_like(&self) -> Mlp2 {
        Mlp2 {
            l1: Linear::zeros(self.l1.w.nrows(), self.l1.w.ncols()),
            l2: Linear::zeros(self.l2.w.nrows(), self.l2.w.ncols()),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, Mlp2Cache) {
        let pre_act = self.l1.forward(x);
        let post_act = pre_act.mapv(silu);
        let out = self.l2.forward(&post_act);
        (out, Mlp2Cache {
            x: x.clone(),
            pre_act,
            post_act,
        })
    }

    /// Parameter gradients only (encoder inputs are data, not activations).
    pub fn backward_params_only(&self, cache: &Mlp2Cache, dy: &Array2<f64>, grad: &mut Mlp2) {
        let d_post = self.l2.backward(&cache.post_act, dy, &mut grad.l2);
        let d_pre = &d_post * &cache.pre_act.mapv(silu_derivative);
        self.l1.backward_params_only(&cache.x, &d_pre, &mut grad.l1);
    }
}

// ---------------------------------------------------------------------------
// Multi-head self-attention block (pre-norm, residual, feed-forward)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub heads: usize,
}

pub struct AttentionBlockCache {
    ln1_out: Array2<f64>,
    ln1_cache: LayerNormCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Softmax weights per head, each L x L.
    attn: Vec<Array2<f64>>,
    context: Array2<f64>,
    ln2_out: Array2<f64>,
    ln2_cache: LayerNormCache,
    ff_pre: Array2<f64>,
    ff_post: Array2<f64>,
}

impl AttentionBlock {
    pub fn init(width: usize, heads: usize, ff_hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(width % heads == 0, "width must be divisible by heads");
        AttentionBlock {
            ln1: LayerNorm::identity(width),
            wq: Linear::init(width, width, 1.0, rng),
            wk: Linear::init(width, width, 1.0, rng),
            wv: Linear::init(width, width, 1.0, rng),
            wo: Linear::init(width, width, 1.0, rng),
            ln2: LayerNorm::identity(width),
            ff1: Linear::init(width, ff_hidden, 1.0, rng),
            ff2: Linear::init(ff_hidden, width, 1.0, rng),
            heads,
        }
    }

    pub fn zeros_like(&self) -> AttentionBlock {
        AttentionBlock {
            ln1: LayerNorm::zeros(self.ln1.gamma.len()),
            wq: Linear::zeros(self.wq.w.nrows(), self.wq.w.ncols()),
            wk: Linear::zeros(self.wk.w.nrows(), self.wk.w.ncols()),
            wv: Linear::zeros(self.wv.w.nrows(), self.wv.w.ncols()),
            wo: Linear::zeros(self.wo.w.nrows(), self.wo.w.ncols()),
            ln2: LayerNorm::zeros(self.ln2.gamma.len()),
            ff1: Linear::zeros(self.ff1.w.nrows(), self.ff1.w.ncols()),
            ff2: Linear::zeros(self.ff2.w.nrows(), self.ff2.w.ncols()),
            heads: self.heads,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, AttentionBlockCache) {
        let l = x.nrows();
        let width = x.ncols();
        let head_dim = width / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();

        let (ln1_out, ln1_cache) = self.ln1.forward(x);
        let q = self.wq.forward(&ln1_out);
        let k = self.wk.forward(&ln1_out);
        let v = self.wv.forward(&ln1_out);

        let mut attn = Vec::with_capacity(self.heads);
        let mut context = Array2::zeros((l, width));
        for h in 0..self.heads {
            let cols = s![.., h * head_dim..(h + 1) * head_dim];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = qh.dot(&kh.t());
            scores *= scale;
            // Row-wise stable softmax.
            for mut row in scores.rows_mut() {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for val in row.iter_mut() {
                    *val = (*val - max).exp();
                    sum += *val;
                }
                for val in row.iter_mut() {
                    *val /= sum;
                }
            }
            let ctx_h = scores.dot(&vh);
            context.slice_mut(cols).assign(&ctx_h);
            attn.push(scores);
        }
        let attn_out = self.wo.forward(&context);
        let after_attn = x + &attn_out;

        let (ln2_out, ln2_cache) = self.ln2.forward(&after_attn);
        let ff_pre = self.ff1.forward(&ln2_out);
        let ff_post = ff_pre.mapv(silu);
        let ff_out = self.ff2.forward(&ff_post);
        let out = &after_attn + &ff_out;

        (out, AttentionBlockCache {
            ln1_out,
            ln1_cache,
            q,
            k,
            v,
            attn,
            context,
            ln2_out,
            ln2_cache,
            ff_pre,
            ff_post,
        })
    }

    pub fn backward(
        &self,
        cache: &AttentionBlockCache,
        dy: &Array2<f64>,
        grad: &mut AttentionBlock,
    ) -> Array2<f64> {
        let width = dy.ncols();
        let head_dim = width / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();

        // Feed-forward branch.
        let d_ff_post = self.ff2.backward(&cache.ff_post, dy, &mut grad.ff2);
        let d_ff_pre = &d_ff_post * &cache.ff_pre.mapv(silu_derivative);
        let d_ln2_out = self.ff1.backward(&cache.ln2_out, &d_ff_pre, &mut grad.ff1);
        let mut d_after_attn =
            self.ln2.backward(&cache.ln2_cache, &d_ln2_out, &mut grad.ln2);
        d_after_attn += dy; // residual skip

        // Attention branch.
        let d_context = self
            .wo
            .backward(&cache.context, &d_after_attn, &mut grad.wo);
        let mut dq = Array2::zeros((dy.nrows(), width));
        let mut dk = Array2::zeros((dy.nrows(), width));
        let mut dv = Array2::zeros((dy.nrows(), width));
        for h in 0..self.heads {
            let cols = s![.., h * head_dim..(h + 1) * head_dim];
            let qh = cache.q.slice(cols);
            let kh = cache.k.slice(cols);
            let vh = cache.v.slice(cols);
            let a = &cache.attn[h];
            let d_ctx_h = d_context.slice(cols);

            let mut da = d_ctx_h.dot(&vh.t());
            let dvh = a.t().dot(&d_ctx_h);
            // Softmax backward row by row: ds = a * (da - sum(da * a)).
            for r in 0..da.nrows() {
                let mut dot = 0.0;
                for c in 0..da.ncols() {
                    dot += da[(r, c)] * a[(r, c)];
                }
                for c in 0..da.ncols() {
                    da[(r, c)] = a[(r, c)] * (da[(r, c)] - dot);
                }
            }
            let ds = da;
            let dqh = ds.dot(&kh) * scale;
            let dkh = ds.t().dot(&qh) * scale;
            dq.slice_mut(cols).assign(&dqh);
            dk.slice_mut(cols).assign(&dkh);
            dv.slice_mut(cols).assign(&dvh);
        }
        let mut d_ln1_out = self.wq.backward(&cache.ln1_out, &dq, &mut grad.wq);
        d_ln1_out += &self.wk.backward(&cache.ln1_out, &dk, &mut grad.wk);
        d_ln1_out += &self.wv.backward(&cache.ln1_out, &dv, &mut grad.wv);
        let mut dx = self.ln1.backward(&cache.ln1_cache, &d_ln1_out, &mut grad.ln1);
        dx += &d_after_attn; // residual skip
        dx
    }
}

// ---------------------------------------------------------------------------
// Flat parameter access (checkpoints, Adam, finite differences)
// ---------------------------------------------------------------------------

/// Visits every parameter array of a layer collection in a fixed order.
pub trait FlatParams {
    fn visit(&self, f: &mut dyn FnMut(&[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |s| n += s.len());
        n
    }

    fn write_flat(&self, out: &mut Vec<f64>) {
        self.visit(&mut |s| out.extend_from_slice(s));
    }

    fn read_flat(&mut self, src: &[f64]) {
        let mut offset = 0;
        self.visit_mut(&mut |s| {
            s.copy_from_slice(&src[offset..offset + s.len()]);
            offset += s.len();
        });
        assert_eq!(offset, src.len(), "flat parameter length mismatch");
    }
}

impl FlatParams for Linear {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(self.w.as_slice().expect("contiguous"));
        f(self.b.as_slice().expect("contiguous"));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.w.as_slice_mut().expect("contiguous"));
        f(self.b.as_slice_mut().expect("contiguous"));
    }
}

impl FlatParams for LayerNorm {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(self.gamma.as_slice().expect("contiguous"));
        f(self.beta.as_slice().expect("contiguous"));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.gamma.as_slice_mut().expect("contiguous"));
        f(self.beta.as_slice_mut().expect("contiguous"));
    }
}

impl FlatParams for Mlp2 {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.l1.visit(f);
        self.l2.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.l1.visit_mut(f);
        self.l2.visit_mut(f);
    }
}

impl FlatParams for AttentionBlock {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.ln1.visit(f);
        self.wq.visit(f);
        self.wk.visit(f);
        self.wv.visit(f);
        self.wo.visit(f);
        self.ln2.visit(f);
        self.ff1.visit(f);
        self.ff2.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.ln1.visit_mut(f);
        self.wq.visit_mut(f);
        self.wk.visit_mut(f);
        self.wv.visit_mut(f);
        self.wo.visit_mut(f);
        self.ln2.visit_mut(f);
        self.ff1.visit_mut(f);
        self.ff2.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        use rand::Rng;
        Array2::from_shape_fn((r, c), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Finite-difference check of a (params, input) -> scalar pipeline.
    fn check_param_gradients<P: FlatParams>(
        params: &mut P,
        analytic: &P,
        mut loss: impl FnMut(&P) -> f64,
        tol: f64,
    ) {
        let mut flat = Vec::new();
        params.write_flat(&mut flat);
        let mut grad_flat = Vec::new();
        analytic.write_flat(&mut grad_flat);
        let h = 1e-5;
        for idx in 0..flat.len() {
            let orig = flat[idx];
            flat[idx] = orig + h;
            params.read_flat(&flat);
            let plus = loss(params);
            flat[idx] = orig - h;
            params.read_flat(&flat);
            let minus = loss(params);
            flat[idx] = orig;
            params.read_flat(&flat);
            let fd = (plus - minus) / (2.0 * h);
            let denom = grad_flat[idx].abs().max(fd.abs()).max(1e-4);
            assert!(
                ((grad_flat[idx] - fd) / denom).abs() < tol,
                "param {idx}: analytic {} vs fd {fd}",
                grad_flat[idx]
            );
        }
    }

    #[test]
    fn linear_gradients() {
        let mut r = rng(1);
        let mut lin = Linear::init(5, 4, 1.0, &mut r);
        let x = random_matrix(3, 5, &mut r);
        let target = random_matrix(3, 4, &mut r);

        let y = lin.forward(&x);
        let dy = &y - &target;
        let mut grad = Linear::zeros(5, 4);
        let dx = lin.backward(&x, &dy, &mut grad);

        check_param_gradients(
            &mut lin,
            &grad,
            |l| {
                let y = l.forward(&x);
                0.5 * (&y - &target).mapv(|v| v * v).sum()
            },
            1e-6,
        );
        // Input gradient via FD on one entry.
        let h = 1e-6;
        let mut xp = x.clone();
        xp[(1, 2)] += h;
        let lp = 0.5 * (&lin.forward(&xp) - &target).mapv(|v| v * v).sum();
        let mut xm = x.clone();
        xm[(1, 2)] -= h;
        let lm = 0.5 * (&lin.forward(&xm) - &target).mapv(|v| v * v).sum();
        assert_abs_diff_eq!(dx[(1, 2)], (lp - lm) / (2.0 * h), epsilon = 1e-5);
    }

    #[test]
    fn layer_norm_gradients() {
        let mut r = rng(2);
        let mut ln = LayerNorm::identity(6);
        // Non-trivial gamma/beta.
        for i in 0..6 {
            ln.gamma[i] = 0.5 + 0.2 * i as f64;
            ln.beta[i] = -0.3 + 0.1 * i as f64;
        }
        let x = random_matrix(4, 6, &mut r);
        let target = random_matrix(4, 6, &mut r);

        let (y, cache) = ln.forward(&x);
        let dy = &y - &target;
        let mut grad = LayerNorm::zeros(6);
        let dx = ln.backward(&cache, &dy, &mut grad);

        check_param_gradients(
            &mut ln,
            &grad,
            |l| {
                let (y, _) = l.forward(&x);
                0.5 * (&y - &target).mapv(|v| v * v).sum()
            },
            1e-6,
        );
        let h = 1e-6;
        for (r_i, c_i) in [(0, 0), (2, 3), (3, 5)] {
            let mut xp = x.clone();
            xp[(r_i, c_i)] += h;
            let lp = 0.5 * (&ln.forward(&xp).0 - &target).mapv(|v| v * v).sum();
            let mut xm = x.clone();
            xm[(r_i, c_i)] -= h;
            let lm = 0.5 * (&ln.forward(&xm).0 - &target).mapv(|v| v * v).sum();
            assert_abs_diff_eq!(dx[(r_i, c_i)], (lp - lm) / (2.0 * h), epsilon = 1e-5);
        }
    }

    #[test]
    fn attention_block_gradients() {
        let mut r = rng(3);
        let mut block = AttentionBlock::init(8, 2, 16, &mut r);
        let x = random_matrix(5, 8, &mut r);
        let target = random_matrix(5, 8, &mut r);

        let (y, cache) = block.forward(&x);
        let dy = &y - &target;
        let mut grad = block.zeros_like();
        let dx = block.backward(&cache, &dy, &mut grad);

        check_param_gradients(
            &mut block,
            &grad,
            |b| {
                let (y, _) = b.forward(&x);
                0.5 * (&y - &target).mapv(|v| v * v).sum()
            },
            1e-5,
        );
        let h = 1e-6;
        for (r_i, c_i) in [(0, 0), (2, 5), (4, 7)] {
            let mut xp = x.clone();
            xp[(r_i, c_i)] += h;
            let lp = 0.5 * (&block.forward(&xp).0 - &target).mapv(|v| v * v).sum();
            let mut xm = x.clone();
            xm[(r_i, c_i)] -= h;
            let lm = 0.5 * (&block.forward(&xm).0 - &target).mapv(|v| v * v).sum();
            assert_abs_diff_eq!(dx[(r_i, c_i)], (lp - lm) / (2.0 * h), epsilon = 1e-4);
        }
    }

    #[test]
    fn mlp2_gradients() {
        let mut r = rng(4);
        let mut mlp = Mlp2::init(7, 9, 5, &mut r);
        let x = random_matrix(3, 7, &mut r);
        let target = random_matrix(3, 5, &mut r);

        let (y, cache) = mlp.forward(&x);
        let dy = &y - &target;
        let mut grad = mlp.zeros_like();
        mlp.backward_params_only(&cache, &dy, &mut grad);

        check_param_gradients(
            &mut mlp,
            &grad,
            |m| {
                let (y, _) = m.forward(&x);
                0.5 * (&y - &target).mapv(|v| v * v).sum()
            },
            1e-6,
        );
    }

    #[test]
    fn sinusoidal_embedding_shape_and_range() {
        let e = sinusoidal_embedding(37.0, 16);
        assert_eq!(e.len(), 16);
        assert!(e.iter().all(|v| v.abs() <= 1.0));
        // Distinct positions embed differently.
        let e2 = sinusoidal_embedding(38.0, 16);
        assert!(e.iter().zip(&e2).any(|(a, b)| (a - b).abs() > 1e-3));
    }
}
