//! DDPM schedule and sampling with x0-prediction, the conditional
//! self-attention denoiser, and the residual-guided second-stage sampling
//! loop.
//!
//! The denoiser predicts the clean signal (not the noise) so geometric
//! losses can act on decoded poses and maps. Per frame it consumes the
//! noisy signal, one encoded feature per condition group, and a sinusoidal
//! timestep embedding; a stack of pre-norm self-attention blocks mixes
//! information along the time axis.

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::contact::ContactSequence;
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::hand::{forward_kinematics, BimanualPose, HandRig, BIMANUAL_DIM};
use crate::nn::{
    sinusoidal_embedding, silu, silu_derivative, AttentionBlock, AttentionBlockCache, FlatParams,
    LayerNorm, LayerNormCache, Linear, Mlp2, Mlp2Cache,
};
use crate::residual::compute_residual;

// ---------------------------------------------------------------------------
// Noise schedule
// ---------------------------------------------------------------------------

/// Forward-process variances and everything derived from them.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta schedule; the standard motion-diffusion setting.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidParameter("schedule needs steps >= 1".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut prod = 1.0;
        for a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        Ok(NoiseSchedule {
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// Cumulative product at timestep t with the convention alpha_bar(0) = 1.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps() {
            return Err(Error::TimestepRange {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }
}

/// Closed-form forward noising `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn forward_noise(
    x0: &Array2<f64>,
    t: usize,
    noise: &Array2<f64>,
    schedule: &NoiseSchedule,
) -> Result<Array2<f64>> {
    schedule.check_t(t)?;
    if x0.raw_dim() != noise.raw_dim() {
        return Err(Error::ShapeMismatch(format!(
            "x0 {:?} vs noise {:?}",
            x0.shape(),
            noise.shape()
        )));
    }
    let ab = schedule.alpha_bar_at(t);
    Ok(x0 * ab.sqrt() + noise * (1.0 - ab).sqrt())
}

/// One reverse step of the x0-parameterized DDPM posterior from timestep
/// `t` to `t_prev` (usually `t - 1`; strided sampling skips further).
/// No noise is added when `t_prev` is 0, and the mean there is exactly
/// the predicted x0.
pub fn posterior_step_between(
    x_t: &Array2<f64>,
    x0_hat: &Array2<f64>,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
    noise: Option<&Array2<f64>>,
) -> Result<Array2<f64>> {
    schedule.check_t(t)?;
    if t_prev >= t {
        return Err(Error::InvalidParameter(format!(
            "t_prev {t_prev} must be below t {t}"
        )));
    }
    let ab_t = schedule.alpha_bar_at(t);
    let ab_prev = schedule.alpha_bar_at(t_prev);
    let beta_eff = 1.0 - ab_t / ab_prev;
    let denom = 1.0 - ab_t;
    let coef_x0 = ab_prev.sqrt() * beta_eff / denom;
    let coef_xt = (ab_t / ab_prev).sqrt() * (1.0 - ab_prev) / denom;
    let mut out = x0_hat * coef_x0 + x_t * coef_xt;
    if t_prev > 0 {
        let var = (1.0 - ab_prev) / denom * beta_eff;
        if let Some(eps) = noise {
            if eps.raw_dim() != x_t.raw_dim() {
                return Err(Error::ShapeMismatch("posterior noise shape".into()));
            }
            out += &(eps * var.max(0.0).sqrt());
        }
    }
    Ok(out)
}

/// Standard single-step posterior (`t -> t - 1`).
pub fn posterior_step(
    x_t: &Array2<f64>,
    x0_hat: &Array2<f64>,
    t: usize,
    schedule: &NoiseSchedule,
    noise: Option<&Array2<f64>>,
) -> Result<Array2<f64>> {
    posterior_step_between(x_t, x0_hat, t, t - 1, schedule, noise)
}

/// Descending timestep ladder for (optionally strided) sampling; always
/// starts at T and the final transition lands on 0.
pub fn sampling_timesteps(total: usize, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    let mut ts = Vec::new();
    let mut t = total;
    while t >= 1 {
        ts.push(t);
        if t <= stride {
            break;
        }
        t -= stride;
    }
    ts
}

pub fn standard_normal(shape: (usize, usize), rng: &mut ChaCha8Rng) -> Array2<f64> {
    let normal = rand_distr::StandardNormal;
    Array2::from_shape_fn(shape, |_| normal.sample(rng))
}

// ---------------------------------------------------------------------------
// Denoiser
// ---------------------------------------------------------------------------

/// One named condition group with its per-frame flattened width.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CondGroup {
    pub name: String,
    pub dim: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DenoiserConfig {
    /// Per-frame signal width (198 for poses, n*2*(1+d) for maps).
    pub x_dim: usize,
    pub cond_groups: Vec<CondGroup>,
    /// Whether the pooled residual condition is present (stage 2).
    pub has_residual_cond: bool,
    /// Per-hand residual feature width after pooling + projection.
    pub residual_feat: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Output width of each condition group encoder.
    pub enc_width: usize,
    pub time_dim: usize,
    pub ff_hidden: usize,
}

impl DenoiserConfig {
    pub fn feature_dim(&self) -> usize {
        self.x_dim
            + self.cond_groups.len() * self.enc_width
            + if self.has_residual_cond {
                2 * self.residual_feat
            } else {
                0
            }
            + self.time_dim
    }
}

/// Per-frame conditions for one sequence; group order must match the
/// denoiser config. Masked conditions are zero arrays, never absent.
#[derive(Debug, Clone)]
pub struct ConditionBundle {
    /// Each entry is L x group_dim.
    pub groups: Vec<Array2<f64>>,
    /// Pooled residual features, L x 6 (mean residual per hand), stage 2.
    pub residual_pooled: Option<Array2<f64>>,
}

/// The conditional denoiser: per-group MLP encoders, an input projection
/// with additive sinusoidal frame positions, a stack of self-attention
/// blocks and a linear head back to the signal width.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    cond_encoders: Vec<Mlp2>,
    residual_encoder: Option<Mlp2>,
    input_proj: Linear,
    blocks: Vec<AttentionBlock>,
    final_norm: LayerNorm,
    output_proj: Linear,
}

pub struct DenoiserCache {
    features: Array2<f64>,
    enc_caches: Vec<Mlp2Cache>,
    res_caches: Option<[Mlp2Cache; 2]>,
    block_caches: Vec<AttentionBlockCache>,
    final_cache: LayerNormCache,
    final_out: Array2<f64>,
}

impl Denoiser {
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        if config.width % config.heads != 0 {
            return Err(Error::InvalidParameter(format!(
                "width {} not divisible by heads {}",
                config.width, config.heads
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cond_encoders = config
            .cond_groups
            .iter()
            .map(|g| Mlp2::init(g.dim, config.enc_width, config.enc_width, &mut rng))
            .collect();
        let residual_encoder = if config.has_residual_cond {
            Some(Mlp2::init(3, config.residual_feat, config.residual_feat, &mut rng))
        } else {
            None
        };
        let input_proj = Linear::init(config.feature_dim(), config.width, 1.0, &mut rng);
        let blocks = (0..config.blocks)
            .map(|_| AttentionBlock::init(config.width, config.heads, config.ff_hidden, &mut rng))
            .collect();
        let final_norm = LayerNorm::identity(config.width);
        // Small head so the initial prediction starts near zero.
        let output_proj = Linear::init(config.width, config.x_dim, 0.01, &mut rng);
        Ok(Denoiser {
            config,
            cond_encoders,
            residual_encoder,
            input_proj,
            blocks,
            final_norm,
            output_proj,
        })
    }

    pub fn zeros_like(&self) -> Denoiser {
        Denoiser {
            config: self.config.clone(),
            cond_encoders: self.cond_encoders.iter().map(Mlp2::zeros_like).collect(),
            residual_encoder: self.residual_encoder.as_ref().map(Mlp2::zeros_like),
            input_proj: Linear::zeros(self.input_proj.w.nrows(), self.input_proj.w.ncols()),
            blocks: self.blocks.iter().map(AttentionBlock::zeros_like).collect(),
            final_norm: LayerNorm::zeros(self.final_norm.gamma.len()),
            output_proj: Linear::zeros(self.output_proj.w.nrows(), self.output_proj.w.ncols()),
        }
    }

    fn check_shapes(&self, x: &Array2<f64>, cond: &ConditionBundle) -> Result<()> {
        if x.ncols() != self.config.x_dim {
            return Err(Error::ShapeMismatch(format!(
                "x width {} vs config x_dim {}",
                x.ncols(),
                self.config.x_dim
            )));
        }
        if cond.groups.len() != self.config.cond_groups.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} condition groups vs config {}",
                cond.groups.len(),
                self.config.cond_groups.len()
            )));
        }
        for (g, spec) in cond.groups.iter().zip(&self.config.cond_groups) {
            if g.nrows() != x.nrows() || g.ncols() != spec.dim {
                return Err(Error::ShapeMismatch(format!(
                    "condition group '{}': got {:?}, want [{}, {}]",
                    spec.name,
                    g.shape(),
                    x.nrows(),
                    spec.dim
                )));
            }
        }
        match (&cond.residual_pooled, self.config.has_residual_cond) {
            (Some(r), true) => {
                if r.nrows() != x.nrows() || r.ncols() != 6 {
                    return Err(Error::ShapeMismatch(format!(
                        "residual condition: got {:?}, want [{}, 6]",
                        r.shape(),
                        x.nrows()
                    )));
                }
            }
            (None, true) => {
                return Err(Error::ShapeMismatch(
                    "config expects a residual condition, none provided".into(),
                ))
            }
            (Some(_), false) => {
                return Err(Error::ShapeMismatch(
                    "residual condition provided but config has none".into(),
                ))
            }
            (None, false) => {}
        }
        Ok(())
    }

    /// Predicts x0 from the noisy signal and conditions at timestep `t`.
    pub fn apply(&self, x: &Array2<f64>, cond: &ConditionBundle, t: usize) -> Result<Array2<f64>> {
        Ok(self.apply_cached(x, cond, t)?.0)
    }

    pub fn apply_cached(
        &self,
        x: &Array2<f64>,
        cond: &ConditionBundle,
        t: usize,
    ) -> Result<(Array2<f64>, DenoiserCache)> {
        self.check_shapes(x, cond)?;
        let l = x.nrows();
        let cfg = &self.config;

        let mut features = Array2::zeros((l, cfg.feature_dim()));
        features.slice_mut(s![.., 0..cfg.x_dim]).assign(x);
        let mut offset = cfg.x_dim;

        let mut enc_caches = Vec::with_capacity(self.cond_encoders.len());
        for (enc, g) in self.cond_encoders.iter().zip(&cond.groups) {
            let (out, cache) = enc.forward(g);
            features
                .slice_mut(s![.., offset..offset + cfg.enc_width])
                .assign(&out);
            offset += cfg.enc_width;
            enc_caches.push(cache);
        }

        let res_caches = if let (Some(enc), Some(pooled)) =
            (&self.residual_encoder, &cond.residual_pooled)
        {
            let left = pooled.slice(s![.., 0..3]).to_owned();
            let right = pooled.slice(s![.., 3..6]).to_owned();
            let (out_l, cache_l) = enc.forward(&left);
            let (out_r, cache_r) = enc.forward(&right);
            features
                .slice_mut(s![.., offset..offset + cfg.residual_feat])
                .assign(&out_l);
            offset += cfg.residual_feat;
            features
                .slice_mut(s![.., offset..offset + cfg.residual_feat])
                .assign(&out_r);
            offset += cfg.residual_feat;
            Some([cache_l, cache_r])
        } else {
            None
        };

        let temb = sinusoidal_embedding(t as f64, cfg.time_dim);
        for r in 0..l {
            for (k, &v) in temb.iter().enumerate() {
                features[(r, offset + k)] = v;
            }
        }

        let mut projected = self.input_proj.forward(&features);
        // Frame positions, so attention can use temporal order.
        for r in 0..l {
            let pos = sinusoidal_embedding(r as f64, cfg.width);
            for (c, &v) in pos.iter().enumerate() {
                projected[(r, c)] += v;
            }
        }

        let mut h = projected;
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(&h);
            h = next;
            block_caches.push(cache);
        }
        let (final_out, final_cache) = self.final_norm.forward(&h);
        let out = self.output_proj.forward(&final_out);

        Ok((out, DenoiserCache {
            features,
            enc_caches,
            res_caches,
            block_caches,
            final_cache,
            final_out,
        }))
    }

    /// Backpropagates a gradient on the prediction into parameter space.
    pub fn backward(&self, cache: &DenoiserCache, d_out: &Array2<f64>) -> Denoiser {
        let mut grad = self.zeros_like();
        let cfg = &self.config;

        let d_final_out = self
            .output_proj
            .backward(&cache.final_out, d_out, &mut grad.output_proj);
        let mut dh = self
            .final_norm
            .backward(&cache.final_cache, &d_final_out, &mut grad.final_norm);
        for (block, (bcache, bgrad)) in self
            .blocks
            .iter()
            .zip(cache.block_caches.iter().zip(&mut grad.blocks))
            .rev()
        {
            dh = block.backward(bcache, &dh, bgrad);
        }
        // Positional encoding is additive, so the gradient passes through.
        let d_features =
            self.input_proj
                .backward(&cache.features, &dh, &mut grad.input_proj);

        let mut offset = cfg.x_dim;
        for ((enc, ecache), egrad) in self
            .cond_encoders
            .iter()
            .zip(&cache.enc_caches)
            .zip(&mut grad.cond_encoders)
        {
            let slice = d_features
                .slice(s![.., offset..offset + cfg.enc_width])
                .to_owned();
            enc.backward_params_only(ecache, &slice, egrad);
            offset += cfg.enc_width;
        }
        if let (Some(enc), Some(caches), Some(egrad)) = (
            &self.residual_encoder,
            &cache.res_caches,
            grad.residual_encoder.as_mut(),
        ) {
            for cache_h in caches {
                let slice = d_features
                    .slice(s![.., offset..offset + cfg.residual_feat])
                    .to_owned();
                enc.backward_params_only(cache_h, &slice, egrad);
                offset += cfg.residual_feat;
            }
        }
        grad
    }

    /// Adds another parameter set (gradient accumulation across a batch).
    pub fn accumulate(&mut self, other: &Denoiser) {
        let mut flat = Vec::with_capacity(self.param_count());
        other.write_flat(&mut flat);
        let mut idx = 0;
        self.visit_mut(&mut |sl| {
            for v in sl.iter_mut() {
                *v += flat[idx];
                idx += 1;
            }
        });
    }
}

impl FlatParams for Denoiser {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        for enc in &self.cond_encoders {
            enc.visit(f);
        }
        if let Some(enc) = &self.residual_encoder {
            enc.visit(f);
        }
        self.input_proj.visit(f);
        for block in &self.blocks {
            block.visit(f);
        }
        self.final_norm.visit(f);
        self.output_proj.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for enc in &mut self.cond_encoders {
            enc.visit_mut(f);
        }
        if let Some(enc) = &mut self.residual_encoder {
            enc.visit_mut(f);
        }
        self.input_proj.visit_mut(f);
        for block in &mut self.blocks {
            block.visit_mut(f);
        }
        self.final_norm.visit_mut(f);
        self.output_proj.visit_mut(f);
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Writes `<stem>.bin` (flat parameters) and `<stem>.json` (manifest with
/// config, step and seed).
pub fn save_checkpoint(
    denoiser: &Denoiser,
    step: usize,
    seed: u64,
    stem: &std::path::Path,
) -> Result<()> {
    let mut flat = Vec::with_capacity(denoiser.param_count());
    denoiser.write_flat(&mut flat);
    let params = ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[flat.len()]), flat)
        .expect("flat params");
    let manifest = serde_json::json!({
        "kind": "denoiser_checkpoint",
        "config": denoiser.config,
        "step": step,
        "seed": seed,
        "param_count": denoiser.param_count(),
    });
    crate::io::write_arrays(&stem.with_extension("bin"), &manifest, &[("params", &params)])?;
    crate::io::write_json_pretty(&stem.with_extension("json"), &manifest)
}

pub fn load_checkpoint(stem: &std::path::Path) -> Result<(Denoiser, usize, u64)> {
    let file = crate::io::read_arrays(&stem.with_extension("bin"))?;
    let config: DenoiserConfig = serde_json::from_value(file.meta["config"].clone())?;
    let step = file.meta["step"].as_u64().unwrap_or(0) as usize;
    let seed = file.meta["seed"].as_u64().unwrap_or(0);
    let mut denoiser = Denoiser::init(config, 0)?;
    let params = file.get("params")?;
    let flat: Vec<f64> = params.iter().cloned().collect();
    if flat.len() != denoiser.param_count() {
        return Err(Error::Format(format!(
            "checkpoint has {} params, config wants {}",
            flat.len(),
            denoiser.param_count()
        )));
    }
    denoiser.read_flat(&flat);
    Ok((denoiser, step, seed))
}

// ---------------------------------------------------------------------------
// Sampling loops
// ---------------------------------------------------------------------------

/// Runs the reverse chain for contact maps. Returns the raw signal
/// (L x n*2*(1+d)); the contact channels are clamped to [0, 1] at the end
/// by the map decoding in [`crate::contact`] helpers. Deterministic given
/// the seed.
pub fn sample_stage1(
    denoiser: &Denoiser,
    cond: &ConditionBundle,
    frames: usize,
    schedule: &NoiseSchedule,
    seed: u64,
    stride: usize,
) -> Result<Array2<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = standard_normal((frames, denoiser.config.x_dim), &mut rng);
    let ladder = sampling_timesteps(schedule.steps(), stride);
    for (i, &t) in ladder.iter().enumerate() {
        let t_prev = ladder.get(i + 1).copied().unwrap_or(0);
        let x0_hat = denoiser.apply(&x, cond, t)?;
        let noise = if t_prev > 0 {
            Some(standard_normal((x.nrows(), x.ncols()), &mut rng))
        } else {
            None
        };
        x = posterior_step_between(&x, &x0_hat, t, t_prev, schedule, noise.as_ref())?;
    }
    Ok(x)
}

/// Geometry the second stage needs to rebuild residuals at every step.
pub struct Stage2Scene<'a> {
    pub left_rig: &'a HandRig,
    pub right_rig: &'a HandRig,
    pub table: &'a EmbeddingTable,
    pub maps: &'a ContactSequence,
}

/// Pools a residual field into the per-frame 6-vector condition
/// (mean residual per hand).
pub fn pooled_residual_row(field: &crate::residual::ResidualField) -> [f64; 6] {
    let left = field.mean_per_hand(0);
    let right = field.mean_per_hand(1);
    [left.x, left.y, left.z, right.x, right.y, right.z]
}

/// Computes the pooled residual condition for every frame of a noisy pose
/// signal by posing both hands and matching against the maps.
pub fn residual_condition(
    x: &Array2<f64>,
    scene: &Stage2Scene<'_>,
) -> Result<Array2<f64>> {
    let l = x.nrows();
    if scene.maps.len() != l {
        return Err(Error::ShapeMismatch(format!(
            "{l} pose frames vs {} map frames",
            scene.maps.len()
        )));
    }
    let mut pooled = Array2::zeros((l, 6));
    for f in 0..l {
        let row = x.row(f);
        let pose = BimanualPose::from_slice(row.as_slice().expect("contiguous row"))?;
        let left = forward_kinematics(scene.left_rig, &pose.left);
        let right = forward_kinematics(scene.right_rig, &pose.right);
        let field = compute_residual(
            [&left.vertices, &right.vertices],
            scene.table,
            &scene.maps.frames[f],
        )?;
        for (k, v) in pooled_residual_row(&field).iter().enumerate() {
            pooled[(f, k)] = *v;
        }
    }
    Ok(pooled)
}

/// Runs the residual-guided reverse chain for hand poses: at every step the
/// current noisy poses are decoded, residuals against the maps recomputed
/// and fed back as a condition. Returns the L x 198 pose signal.
pub fn sample_stage2(
    denoiser: &Denoiser,
    base_cond: &ConditionBundle,
    scene: &Stage2Scene<'_>,
    schedule: &NoiseSchedule,
    seed: u64,
    stride: usize,
) -> Result<Array2<f64>> {
    let frames = scene.maps.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = standard_normal((frames, BIMANUAL_DIM), &mut rng);
    let ladder = sampling_timesteps(schedule.steps(), stride);
    let mut cond = base_cond.clone();
    for (i, &t) in ladder.iter().enumerate() {
        let t_prev = ladder.get(i + 1).copied().unwrap_or(0);
        cond.residual_pooled = Some(residual_condition(&x, scene)?);
        let x0_hat = denoiser.apply(&x, &cond, t)?;
        let noise = if t_prev > 0 {
            Some(standard_normal((x.nrows(), x.ncols()), &mut rng))
        } else {
            None
        };
        x = posterior_step_between(&x, &x0_hat, t, t_prev, schedule, noise.as_ref())?;
    }
    Ok(x)
}

/// Adam over a denoiser's flat parameter vector.
pub struct DenoiserOptimizer {
    adam: crate::embedding::Adam,
    scratch_params: Vec<f64>,
    scratch_grads: Vec<f64>,
}

impl DenoiserOptimizer {
    pub fn new(denoiser: &Denoiser, lr: f64) -> Self {
        DenoiserOptimizer {
            adam: crate::embedding::Adam::new(denoiser.param_count(), lr),
            scratch_params: Vec::new(),
            scratch_grads: Vec::new(),
        }
    }

    pub fn step(&mut self, denoiser: &mut Denoiser, grads: &Denoiser) {
        self.scratch_params.clear();
        self.scratch_grads.clear();
        denoiser.write_flat(&mut self.scratch_params);
        grads.write_flat(&mut self.scratch_grads);
        self.adam.step(&mut self.scratch_params, &self.scratch_grads);
        denoiser.read_flat(&self.scratch_params);
    }
}

// ---------------------------------------------------------------------------
// Helpers shared by configs
// ---------------------------------------------------------------------------

impl Denoiser {
    /// An always-usable silu sanity probe: mean activation response of the
    /// first encoder for diagnostics. Exists mostly so the nonlinearity and
    /// its derivative stay exercised together in release builds.
    pub fn activation_probe(&self, z: f64) -> (f64, f64) {
        (silu(z), silu_derivative(z))
    }
}
