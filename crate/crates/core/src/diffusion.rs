//! Latent diffusion: the noise schedule, the conditional denoiser and
//! ancestral sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::{
    tokens_to_volume, volume_to_tokens, Binder, Conv3d, ConvTranspose3d, Cscb, CylinderMambaBlock, Ddcb, LayerNorm, Linear,
    MambaConfig, Mode, ParamStore,
};
use crate::tensor::{Conv3dSpec, Tape, Tensor, Var};
use crate::vae::Lmn;
use crate::{invalid, Error, Result};

/// Linear variance schedule `β_t`, `t = 0..T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("noise schedule", "needs at least one step"));
        }
        if !(0.0 < beta_start && beta_start < 1.0 && 0.0 < beta_end && beta_end < 1.0) {
            return Err(invalid("noise schedule", format!("betas {beta_start}, {beta_end} must lie in (0, 1)")));
        }
        if steps > 1 && beta_end <= beta_start {
            return Err(invalid("noise schedule", "beta_end must exceed beta_start"));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|t| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Ok(Self::from_betas(betas))
    }

    fn from_betas(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Self {
            betas,
            alphas,
            alpha_bars,
        }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(invalid("timestep", format!("{t} outside 0..{}", self.steps())));
        }
        Ok(())
    }

    /// `sqrt(ᾱ_t)·x0 + sqrt(1 − ᾱ_t)·eps`.
    pub fn q_sample(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        let ab = self.alpha_bars[t];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x0.zip_map(eps, |x, e| a * x + b * e)?)
    }

    /// Closed-form inverse of [`NoiseSchedule::q_sample`] given the noise.
    pub fn predict_x0(&self, xt: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        let ab = self.alpha_bars[t];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(xt.zip_map(eps, |x, e| (x - b * e) / a)?)
    }

    /// One ancestral step from `x_t` to `x_{t-1}`; `z` is ignored at `t = 0`.
    pub fn p_step(&self, xt: &Tensor, t: usize, eps: &Tensor, z: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        let (a, b) = (self.alphas[t], self.betas[t]);
        let k = b / (1.0 - self.alpha_bars[t]).sqrt();
        let mean = xt.zip_map(eps, |x, e| (x - k * e) / a.sqrt())?;
        if t == 0 {
            return Ok(mean);
        }
        let sigma = b.sqrt();
        Ok(mean.zip_map(z, |m, n| m + sigma * n)?)
    }
}

/// `E‖ε − ε̂‖²` averaged over every element.
pub fn ldm_loss<'t>(pred: Var<'t>, eps: Var<'t>) -> Result<Var<'t>> {
    Ok(pred.sub(eps)?.square().mean())
}

/// Sinusoidal embeddings of timesteps, one row of width `dim` per entry.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    Tensor::from_fn([ts.len(), dim], |i| {
        let (row, col) = (i / dim, i % dim);
        if col >= 2 * half {
            return 0.0;
        }
        let k = col % half;
        let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
        let arg = ts[row] as f64 * freq;
        if col < half {
            arg.sin()
        } else {
            arg.cos()
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    /// Channels of the condition features (LMN output plus SSEN logits).
    pub cond_channels: usize,
    pub latent_dims: [usize; 3],
    pub widths: [usize; 3],
    pub blocks_per_stage: usize,
    /// Drop the cylinder-order layer from every block.
    pub cartesian_only: bool,
    pub d_state: usize,
}

impl DenoiserConfig {
    pub fn new(latent_channels: usize, cond_channels: usize, latent_dims: [usize; 3]) -> Self {
        Self {
            latent_channels,
            cond_channels,
            latent_dims,
            widths: [32, 64, 128],
            blocks_per_stage: 2,
            cartesian_only: false,
            d_state: 16,
        }
    }

    /// Halves every axis that is still even and above 1.
    fn stride(dims: [usize; 3]) -> [usize; 3] {
        dims.map(|d| if d >= 2 && d % 2 == 0 { 2 } else { 1 })
    }

    /// Spatial dims of each stage.
    pub fn stage_dims(&self) -> [[usize; 3]; 3] {
        let mut out = [self.latent_dims; 3];
        for i in 1..3 {
            let s = Self::stride(out[i - 1]);
            out[i] = [0, 1, 2].map(|a| out[i - 1][a] / s[a]);
        }
        out
    }
}

/// Cylinder mamba blocks, each fed a channel-normalized input. The scans are
/// cubic in their input scale, so unnormalized features grow without bound
/// across blocks.
#[derive(Clone, Debug)]
struct Stage {
    norms: Vec<LayerNorm>,
    blocks: Vec<CylinderMambaBlock>,
    dims: [usize; 3],
}

impl Stage {
    fn forward<'t>(&self, p: &Binder<'t, '_>, mut h: Var<'t>) -> Result<Var<'t>> {
        for (norm, b) in self.norms.iter().zip(&self.blocks) {
            let f = tokens_to_volume(norm.forward(p, volume_to_tokens(h)?)?, self.dims)?;
            h = b.forward(p, f)?;
        }
        Ok(h)
    }
}

/// U-shaped noise predictor over latent volumes.
///
/// `concat(x_t, cond) → conv → + MLP(sinusoid(t)) → CSCB → DDCB`, then three
/// stages of cylinder mamba blocks with strided-conv downsampling, a
/// transposed-conv decoder with skip connections, and a zero-initialized
/// output projection.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    conv_in: Conv3d,
    time: [Linear; 2],
    cscb: Cscb,
    ddcb: Ddcb,
    stages: Vec<Stage>,
    downs: Vec<Conv3d>,
    ups: Vec<ConvTranspose3d>,
    fuse: Vec<Conv3d>,
    conv_out: Conv3d,
}

impl Denoiser {
    pub fn new(store: &mut ParamStore, name: &str, cfg: DenoiserConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.widths.contains(&0) || cfg.latent_channels == 0 || cfg.latent_dims.contains(&0) {
            return Err(invalid("denoiser config", format!("{cfg:?}")));
        }
        let w = cfg.widths;
        let dims = cfg.stage_dims();
        let cin = cfg.latent_channels + cfg.cond_channels;
        let conv_in = Conv3d::same(store, &format!("{name}.conv_in"), cin, w[0], 3, rng);
        let time = [
            Linear::new(store, &format!("{name}.time.fc1"), w[0], w[0], true, rng),
            Linear::new(store, &format!("{name}.time.fc2"), w[0], w[0], true, rng),
        ];
        let cscb = Cscb::new(store, &format!("{name}.cscb"), w[0], rng);
        let ddcb = Ddcb::new(store, &format!("{name}.ddcb"), w[0], rng);
        let mut stages = Vec::new();
        let mut layer = 0;
        for (i, (&c, &d)) in w.iter().zip(&dims).enumerate() {
            let mut mc = MambaConfig::new(c);
            mc.d_state = cfg.d_state;
            let mut blocks = Vec::new();
            let mut norms = Vec::new();
            for j in 0..cfg.blocks_per_stage {
                norms.push(LayerNorm::new(store, &format!("{name}.stage{i}.norm{j}"), c));
                blocks.push(CylinderMambaBlock::new(
                    store,
                    &format!("{name}.stage{i}.block{j}"),
                    mc,
                    d,
                    layer,
                    !cfg.cartesian_only,
                    rng,
                )?);
                layer += 2;
            }
            stages.push(Stage { norms, blocks, dims: d });
        }
        let mut downs = Vec::new();
        let mut ups = Vec::new();
        let mut fuse = Vec::new();
        for i in 0..2 {
            let s = DenoiserConfig::stride(dims[i]);
            downs.push(Conv3d::new(
                store,
                &format!("{name}.down{i}"),
                w[i],
                w[i + 1],
                s,
                Conv3dSpec::strided(s),
                true,
                rng,
            ));
            ups.push(ConvTranspose3d::upsample(store, &format!("{name}.up{i}"), w[i + 1], w[i], s, rng));
            fuse.push(Conv3d::same(store, &format!("{name}.fuse{i}"), 2 * w[i], w[i], 3, rng));
        }
        let conv_out = Conv3d::same(store, &format!("{name}.conv_out"), w[0], cfg.latent_channels, 3, rng);
        conv_out.zero(store)?;
        Ok(Self {
            cfg,
            conv_in,
            time,
            cscb,
            ddcb,
            stages,
            downs,
            ups,
            fuse,
            conv_out,
        })
    }

    /// Predicted noise for `x_t` `(N, c_z, l, w, h)` at per-sample timesteps,
    /// given condition features `(N, cond_channels, l, w, h)`.
    pub fn forward<'t>(&self, p: &Binder<'t, '_>, xt: Var<'t>, ts: &[usize], cond: Var<'t>) -> Result<Var<'t>> {
        let (s, cs) = (xt.shape(), cond.shape());
        let want = [self.cfg.latent_dims[0], self.cfg.latent_dims[1], self.cfg.latent_dims[2]];
        if s.len() != 5 || s[1] != self.cfg.latent_channels || s[2..] != want || ts.len() != s[0] {
            return Err(invalid("denoiser input", format!("x_t {s:?} with {} timesteps", ts.len())));
        }
        if cs.len() != 5 || cs[0] != s[0] || cs[1] != self.cfg.cond_channels || cs[2..] != want {
            return Err(invalid("denoiser condition", format!("{cs:?} for x_t {s:?}")));
        }
        let tape = p.tape();
        let x = Var::concat(&[xt, cond], 1)?;
        let emb = tape.constant(timestep_embedding(ts, self.cfg.widths[0]));
        let temb = self.time[1].forward(p, self.time[0].forward(p, emb)?.silu())?;
        let h = self.conv_in.forward(p, x)?.add_per_channel(temb)?;
        let mut h = self.ddcb.forward(p, self.cscb.forward(p, h)?)?;

        let mut skips = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            h = stage.forward(p, h)?;
            if i < 2 {
                skips.push(h);
                h = self.downs[i].forward(p, h)?.silu();
            }
        }
        for i in (0..2).rev() {
            let up = self.ups[i].forward(p, h)?;
            h = self.fuse[i].forward(p, Var::concat(&[up, skips[i]], 1)?)?.silu();
        }
        self.conv_out.forward(p, h)
    }
}

/// Stacks equally shaped tensors along a new leading batch axis.
pub fn stack(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| invalid("stack", "nothing to stack"))?;
    let mut data = Vec::with_capacity(first.numel() * parts.len());
    for t in parts {
        if t.shape() != first.shape() {
            return Err(invalid("stack", format!("shape {:?} vs {:?}", t.shape(), first.shape())));
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(first.shape());
    Ok(Tensor::new(shape, data)?)
}

/// Ancestral sampling from `x_T ~ N(0, I)` down to `x_0`.
///
/// `cond` is `(1, cond_channels, l, w, h)`. All noise comes from a generator
/// seeded with `seed`, so equal inputs give bit-identical samples.
pub fn p_sample_loop(
    denoiser: &Denoiser,
    store: &ParamStore,
    schedule: &NoiseSchedule,
    cond: &Tensor,
    seed: u64,
) -> Result<Tensor> {
    let d = denoiser.cfg.latent_dims;
    let shape = [1, denoiser.cfg.latent_channels, d[0], d[1], d[2]];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Tensor::randn(shape, 1.0, &mut rng);
    for t in (0..schedule.steps()).rev() {
        let tape = Tape::new();
        let p = Binder::frozen(&tape, store, Mode::Eval);
        let eps = denoiser
            .forward(&p, tape.constant(x.clone()), &[t], tape.constant(cond.clone()))?
            .value();
        let z = if t > 0 {
            Tensor::randn(shape, 1.0, &mut rng)
        } else {
            Tensor::zeros(shape)
        };
        x = schedule.p_step(&x, t, &eps, &z)?;
    }
    Ok(x)
}

/// `1 / std` over every latent entry, so scaled latents have unit variance.
pub fn latent_scale(latents: &[Tensor]) -> Result<f64> {
    let n: usize = latents.iter().map(Tensor::numel).sum();
    if n < 2 {
        return Err(invalid("latent scale", "needs at least two latent values"));
    }
    let mean = latents.iter().map(Tensor::sum).sum::<f64>() / n as f64;
    let var = latents
        .iter()
        .flat_map(|t| t.data())
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / (n - 1) as f64;
    if !(var > 0.0) || !var.is_finite() {
        return Err(Error::Numeric(format!("latent variance {var}")));
    }
    Ok(1.0 / var.sqrt())
}

/// The trainable half of the generator: the latent mapping network and the
/// denoiser, with the schedule they are trained under.
#[derive(Clone, Debug)]
pub struct LatentDiffusion {
    pub lmn: Lmn,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
}

impl LatentDiffusion {
    /// `concat(LMN(lifted), softmax(ssen_logits))` along channels.
    ///
    /// Trained SSEN logits reach magnitudes near 100, which drowns `x_t` at the
    /// input convolution; class probabilities keep both on a unit scale.
    pub fn condition<'t>(&self, p: &Binder<'t, '_>, lifted: Var<'t>, ssen_logits: Var<'t>) -> Result<Var<'t>> {
        let s = ssen_logits.shape();
        if s.len() != 5 {
            return Err(invalid("ssen logits", format!("{s:?}")));
        }
        let probs = tokens_to_volume(volume_to_tokens(ssen_logits)?.softmax()?, [s[2], s[3], s[4]])?;
        let f = self.lmn.forward(p, lifted)?;
        Ok(Var::concat(&[f, probs], 1)?)
    }

    /// Noise-prediction loss for a batch of clean latents at random timesteps.
    pub fn loss<'t>(
        &self,
        p: &Binder<'t, '_>,
        x0: &Tensor,
        lifted: Var<'t>,
        ssen_logits: Var<'t>,
        rng: &mut impl Rng,
    ) -> Result<Var<'t>> {
        let n = x0.shape()[0];
        let per = x0.numel() / n.max(1);
        let ts: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.schedule.steps())).collect();
        let eps = Tensor::randn(x0.shape(), 1.0, rng);
        let mut xt = Vec::with_capacity(x0.numel());
        for (i, &t) in ts.iter().enumerate() {
            let r = i * per..(i + 1) * per;
            let a = Tensor::new([per], x0.data()[r.clone()].to_vec())?;
            let e = Tensor::new([per], eps.data()[r].to_vec())?;
            xt.extend(self.schedule.q_sample(&a, t, &e)?.into_vec());
        }
        let tape = p.tape();
        let xt = tape.constant(Tensor::new(x0.shape(), xt)?);
        let cond = self.condition(p, lifted, ssen_logits)?;
        let pred = self.denoiser.forward(p, xt, &ts, cond)?;
        ldm_loss(pred, tape.constant(eps))
    }

    /// A scaled latent sample for one condition `(1, 1 + C, L, W, H)`.
    pub fn sample(&self, store: &ParamStore, lifted: &Tensor, ssen_logits: &Tensor, seed: u64) -> Result<Tensor> {
        let tape = Tape::new();
        let p = Binder::frozen(&tape, store, Mode::Eval);
        let cond = self
            .condition(&p, tape.constant(lifted.clone()), tape.constant(ssen_logits.clone()))?
            .value();
        p_sample_loop(&self.denoiser, store, &self.schedule, &cond, seed)
    }
}
