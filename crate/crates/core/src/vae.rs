//! 3D variational autoencoder over one-hot voxel labels, the latent mapping
//! network that shares the encoder architecture, and the reconstruction losses.
//!
//! The encoder halves each spatial extent twice, so latents live at a quarter
//! of the voxel resolution.

use rand::Rng;

use crate::nn::{class_rows, cross_entropy, BatchNorm3d, Binder, Conv3d, ConvTranspose3d, ParamStore};
use crate::tensor::{Conv3dSpec, Tensor, Var};
use crate::voxel::{ConditionPair, VoxelGrid};
use crate::{invalid, Result};

/// Spatial reduction factor of the encoder.
pub const DOWNSAMPLE: usize = 4;

/// Log-variance clamp keeping `exp(0.5·logvar)` finite.
pub const LOGVAR_RANGE: (f64, f64) = (-30.0, 20.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VaeConfig {
    pub num_classes: u16,
    pub latent_channels: usize,
    /// Widths of the full-resolution and half-resolution stages.
    pub widths: [usize; 2],
}

impl VaeConfig {
    pub fn new(num_classes: u16) -> Self {
        Self {
            num_classes,
            latent_channels: 4,
            widths: [8, 16],
        }
    }

    /// Latent shape for a voxel grid of `dims`, without the batch axis.
    pub fn latent_shape(&self, dims: [usize; 3]) -> Result<[usize; 4]> {
        check_dims(dims)?;
        Ok([
            self.latent_channels,
            dims[0] / DOWNSAMPLE,
            dims[1] / DOWNSAMPLE,
            dims[2] / DOWNSAMPLE,
        ])
    }
}

fn check_dims(dims: [usize; 3]) -> Result<()> {
    if dims.iter().any(|&d| d == 0 || d % DOWNSAMPLE != 0) {
        return Err(invalid("dims", format!("{dims:?} must be positive multiples of {DOWNSAMPLE}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeLossWeights {
    /// Lovász-Softmax weight.
    pub gamma: f64,
    /// KL weight.
    pub beta: f64,
}

impl Default for VaeLossWeights {
    fn default() -> Self {
        Self { gamma: 1.0, beta: 0.001 }
    }
}

impl VaeLossWeights {
    pub fn new(gamma: f64, beta: f64) -> Result<Self> {
        if !(gamma >= 0.0 && beta >= 0.0) {
            return Err(invalid("loss weights", format!("gamma {gamma} and beta {beta} must be non-negative")));
        }
        Ok(Self { gamma, beta })
    }
}

/// Posterior parameters, each `(N, c_z, L/4, W/4, H/4)`.
#[derive(Clone, Copy, Debug)]
pub struct Latent<'t> {
    pub mean: Var<'t>,
    pub logvar: Var<'t>,
}

impl<'t> Latent<'t> {
    /// `mean + exp(0.5·logvar)·eps`.
    pub fn reparameterize(&self, eps: &Tensor) -> Result<Var<'t>> {
        let std = self.logvar.scale(0.5).exp();
        let eps = self.mean.tape().constant(eps.clone());
        Ok(self.mean.add(std.mul(eps)?)?)
    }

    /// A posterior draw while training, the mean otherwise.
    pub fn sample(&self, training: bool, rng: &mut impl Rng) -> Result<Var<'t>> {
        if training {
            self.reparameterize(&Tensor::randn(self.mean.shape(), 1.0, rng))
        } else {
            Ok(self.mean)
        }
    }
}

/// Two 3³ convolutions, each followed by batch norm and a ReLU.
#[derive(Clone, Debug)]
struct ConvPair {
    convs: [Conv3d; 2],
    bns: [BatchNorm3d; 2],
}

impl ConvPair {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let conv = |store: &mut ParamStore, i: usize, ci: usize, rng: &mut _| {
            Conv3d::new(
                store,
                &format!("{name}.conv{i}"),
                ci,
                cout,
                [3; 3],
                Conv3dSpec::same([3; 3], 1),
                false,
                rng,
            )
        };
        let a = conv(store, 0, cin, rng);
        let bn0 = BatchNorm3d::new(store, &format!("{name}.bn0"), cout);
        let b = conv(store, 1, cout, rng);
        let bn1 = BatchNorm3d::new(store, &format!("{name}.bn1"), cout);
        Self {
            convs: [a, b],
            bns: [bn0, bn1],
        }
    }

    fn forward<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let mut h = x;
        for (conv, bn) in self.convs.iter().zip(&self.bns) {
            h = bn.forward(p, conv.forward(p, h)?)?.relu();
        }
        Ok(h)
    }
}

/// Resampling layer followed by batch norm and ReLU.
#[derive(Clone, Debug)]
enum Resample {
    Down(Conv3d),
    Up(ConvTranspose3d),
}

#[derive(Clone, Debug)]
struct ResampleBn {
    op: Resample,
    bn: BatchNorm3d,
}

impl ResampleBn {
    fn down(store: &mut ParamStore, name: &str, c: usize, rng: &mut impl Rng) -> Self {
        Self {
            op: Resample::Down(Conv3d::new(
                store,
                &format!("{name}.conv"),
                c,
                c,
                [2; 3],
                Conv3dSpec::strided([2; 3]),
                false,
                rng,
            )),
            bn: BatchNorm3d::new(store, &format!("{name}.bn"), c),
        }
    }

    fn up(store: &mut ParamStore, name: &str, c: usize, rng: &mut impl Rng) -> Self {
        Self {
            op: Resample::Up(ConvTranspose3d::upsample(store, &format!("{name}.conv"), c, c, [2; 3], rng)),
            bn: BatchNorm3d::new(store, &format!("{name}.bn"), c),
        }
    }

    fn forward<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let h = match &self.op {
            Resample::Down(c) => c.forward(p, x)?,
            Resample::Up(c) => c.forward(p, x)?,
        };
        Ok(self.bn.forward(p, h)?.relu())
    }
}

/// Four convolutions (batch norm and ReLU after each pair) then a resampling step.
#[derive(Clone, Debug)]
struct DownBlock {
    pairs: [ConvPair; 2],
    down: ResampleBn,
}

/// `(N, Cin, L, W, H)` to the posterior at quarter resolution.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub in_channels: usize,
    pub latent_channels: usize,
    blocks: [DownBlock; 2],
    mean_head: Conv3d,
    logvar_head: Conv3d,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        widths: [usize; 2],
        latent_channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut block = |store: &mut ParamStore, i: usize, cin: usize, c: usize| DownBlock {
            pairs: [
                ConvPair::new(store, &format!("{name}.block{i}.pair0"), cin, c, rng),
                ConvPair::new(store, &format!("{name}.block{i}.pair1"), c, c, rng),
            ],
            down: ResampleBn::down(store, &format!("{name}.block{i}.down"), c, rng),
        };
        let b0 = block(store, 0, in_channels, widths[0]);
        let b1 = block(store, 1, widths[0], widths[1]);
        let head = |store: &mut ParamStore, h: &str, rng: &mut _| {
            Conv3d::new(
                store,
                &format!("{name}.{h}"),
                widths[1],
                latent_channels,
                [1; 3],
                Conv3dSpec::default(),
                true,
                rng,
            )
        };
        let mean_head = head(store, "mean", rng);
        let logvar_head = head(store, "logvar", rng);
        Self {
            in_channels,
            latent_channels,
            blocks: [b0, b1],
            mean_head,
            logvar_head,
        }
    }

    pub fn forward<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>) -> Result<Latent<'t>> {
        let s = x.shape();
        if s.len() != 5 || s[1] != self.in_channels {
            return Err(invalid(
                "encoder input",
                format!("expected (N, {}, L, W, H), got {s:?}", self.in_channels),
            ));
        }
        check_dims([s[2], s[3], s[4]])?;
        let mut h = x;
        for b in &self.blocks {
            for pair in &b.pairs {
                h = pair.forward(p, h)?;
            }
            h = b.down.forward(p, h)?;
        }
        Ok(Latent {
            mean: self.mean_head.forward(p, h)?,
            logvar: self.logvar_head.forward(p, h)?.clamp(LOGVAR_RANGE.0, LOGVAR_RANGE.1),
        })
    }
}

/// Latent to per-voxel class logits, mirroring [`Encoder`].
#[derive(Clone, Debug)]
pub struct Decoder {
    pub latent_channels: usize,
    pub num_classes: u16,
    input: Conv3d,
    ups: [ResampleBn; 2],
    blocks: [[ConvPair; 2]; 2],
    head: Conv3d,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: VaeConfig, rng: &mut impl Rng) -> Self {
        let [c1, c2] = cfg.widths;
        let input = Conv3d::new(
            store,
            &format!("{name}.input"),
            cfg.latent_channels,
            c2,
            [1; 3],
            Conv3dSpec::default(),
            true,
            rng,
        );
        let up0 = ResampleBn::up(store, &format!("{name}.up0"), c2, rng);
        let b0 = [
            ConvPair::new(store, &format!("{name}.block0.pair0"), c2, c2, rng),
            ConvPair::new(store, &format!("{name}.block0.pair1"), c2, c1, rng),
        ];
        let up1 = ResampleBn::up(store, &format!("{name}.up1"), c1, rng);
        let b1 = [
            ConvPair::new(store, &format!("{name}.block1.pair0"), c1, c1, rng),
            ConvPair::new(store, &format!("{name}.block1.pair1"), c1, c1, rng),
        ];
        let head = Conv3d::new(
            store,
            &format!("{name}.head"),
            c1,
            cfg.num_classes as usize,
            [1; 3],
            Conv3dSpec::default(),
            true,
            rng,
        );
        Self {
            latent_channels: cfg.latent_channels,
            num_classes: cfg.num_classes,
            input,
            ups: [up0, up1],
            blocks: [b0, b1],
            head,
        }
    }

    pub fn forward<'t>(&self, p: &Binder<'t, '_>, z: Var<'t>) -> Result<Var<'t>> {
        let s = z.shape();
        if s.len() != 5 || s[1] != self.latent_channels {
            return Err(invalid(
                "latent",
                format!("expected (N, {}, l, w, h), got {s:?}", self.latent_channels),
            ));
        }
        let mut h = self.input.forward(p, z)?.relu();
        for (up, pairs) in self.ups.iter().zip(&self.blocks) {
            h = up.forward(p, h)?;
            for pair in pairs {
                h = pair.forward(p, h)?;
            }
        }
        self.head.forward(p, h)
    }
}

#[derive(Clone, Debug)]
pub struct Vae {
    pub cfg: VaeConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Vae {
    pub fn new(store: &mut ParamStore, name: &str, cfg: VaeConfig, rng: &mut impl Rng) -> Self {
        Self {
            cfg,
            encoder: Encoder::new(
                store,
                &format!("{name}.encoder"),
                cfg.num_classes as usize,
                cfg.widths,
                cfg.latent_channels,
                rng,
            ),
            decoder: Decoder::new(store, &format!("{name}.decoder"), cfg, rng),
        }
    }

    pub fn encode<'t>(&self, p: &Binder<'t, '_>, one_hot: Var<'t>) -> Result<Latent<'t>> {
        self.encoder.forward(p, one_hot)
    }

    pub fn decode<'t>(&self, p: &Binder<'t, '_>, z: Var<'t>) -> Result<Var<'t>> {
        self.decoder.forward(p, z)
    }

    /// Encode, sample (mean in evaluation) and decode.
    pub fn forward<'t>(
        &self,
        p: &Binder<'t, '_>,
        one_hot: Var<'t>,
        rng: &mut impl Rng,
    ) -> Result<(Latent<'t>, Var<'t>)> {
        let latent = self.encode(p, one_hot)?;
        let z = latent.sample(p.training(), rng)?;
        Ok((latent, self.decode(p, z)?))
    }
}

/// Latent mapping network: encoder architecture over the lifted condition,
/// returning the posterior mean as latent-shaped features.
#[derive(Clone, Debug)]
pub struct Lmn {
    pub encoder: Encoder,
}

impl Lmn {
    pub fn new(store: &mut ParamStore, name: &str, cfg: VaeConfig, rng: &mut impl Rng) -> Self {
        Self {
            encoder: Encoder::new(
                store,
                name,
                ConditionPair::lifted_channels(cfg.num_classes),
                cfg.widths,
                cfg.latent_channels,
                rng,
            ),
        }
    }

    pub fn forward<'t>(&self, p: &Binder<'t, '_>, cond: Var<'t>) -> Result<Var<'t>> {
        Ok(self.encoder.forward(p, cond)?.mean)
    }
}

/// Stacks grids into a one-hot batch `(N, C, L, W, H)`.
pub fn one_hot_batch(grids: &[&VoxelGrid]) -> Result<Tensor> {
    let first = grids.first().ok_or_else(|| invalid("batch", "no grids"))?;
    let (dims, c) = (first.dims(), first.num_classes());
    let mut data = Vec::with_capacity(grids.len() * c as usize * first.len());
    for g in grids {
        if g.dims() != dims || g.num_classes() != c {
            return Err(invalid("batch", "grids differ in dims or class count"));
        }
        data.extend_from_slice(g.one_hot().data());
    }
    Ok(Tensor::new(
        vec![grids.len(), c as usize, dims[0], dims[1], dims[2]],
        data,
    )?)
}

/// Labels of all grids, sample-major, matching [`class_rows`] order.
pub fn batch_targets(grids: &[&VoxelGrid]) -> Vec<u16> {
    grids.iter().flat_map(|g| g.labels().iter().copied()).collect()
}

/// Per-voxel argmax of logits `(N, C, L, W, H)`.
pub fn argmax_grids(logits: &Tensor) -> Result<Vec<VoxelGrid>> {
    let s = logits.shape();
    let [n, c, l, w, h] = s[..] else {
        return Err(invalid("logits", format!("expected (N, C, L, W, H), got {s:?}")));
    };
    let vol = l * w * h;
    (0..n)
        .map(|b| {
            let x = &logits.data()[b * c * vol..(b + 1) * c * vol];
            let labels = (0..vol)
                .map(|i| {
                    let mut best = 0;
                    for k in 1..c {
                        if x[k * vol + i] > x[best * vol + i] {
                            best = k;
                        }
                    }
                    best as u16
                })
                .collect();
            VoxelGrid::new([l, w, h], labels, c as u16)
        })
        .collect()
}

/// `0.5·Σ(μ² + e^logvar − 1 − logvar)` over latent elements, averaged over the batch.
pub fn kl_divergence<'t>(latent: &Latent<'t>) -> Result<Var<'t>> {
    let (m, lv) = (latent.mean, latent.logvar);
    if m.shape() != lv.shape() || m.shape().is_empty() {
        return Err(invalid("kl", format!("mean {:?} vs logvar {:?}", m.shape(), lv.shape())));
    }
    let n = m.shape()[0].max(1) as f64;
    let per = m.square().add(lv.exp())?.sub(lv)?.add_scalar(-1.0);
    Ok(per.sum().scale(0.5 / n))
}

/// Lovász-Softmax over class logits `(N, C, ...)`.
pub fn lovasz_softmax<'t>(logits: Var<'t>, targets: &[u16]) -> Result<Var<'t>> {
    lovasz_from_probs(class_rows(logits)?.softmax()?, targets)
}

/// Lovász extension of the per-class Jaccard loss for probability rows `(R, C)`,
/// averaged over the classes present in `targets`.
pub fn lovasz_from_probs<'t>(probs: Var<'t>, targets: &[u16]) -> Result<Var<'t>> {
    let p = probs.value();
    let [r, c] = p.shape()[..] else {
        return Err(invalid("lovasz", format!("expected (R, C) probabilities, got {:?}", p.shape())));
    };
    if targets.len() != r {
        return Err(invalid("lovasz", format!("{} targets for {r} rows", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= c) {
        return Err(invalid("lovasz", format!("target {bad} with {c} classes")));
    }
    let mut grad = vec![0.0; r * c];
    let mut total = 0.0;
    let mut present = 0usize;
    let mut order: Vec<usize> = (0..r).collect();
    let mut errors = vec![0.0; r];
    for k in 0..c {
        let fg = |i: usize| targets[i] as usize == k;
        let gts = (0..r).filter(|&i| fg(i)).count();
        if gts == 0 {
            continue;
        }
        present += 1;
        for (i, e) in errors.iter_mut().enumerate() {
            let pk = p.data()[i * c + k];
            *e = if fg(i) { 1.0 - pk } else { pk };
        }
        order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]));
        // Jaccard loss of the first j+1 sorted voxels, differenced.
        let (mut hit, mut miss) = (0usize, 0usize);
        let mut prev = 0.0;
        for &i in &order {
            if fg(i) {
                hit += 1;
            } else {
                miss += 1;
            }
            let inter = (gts - hit) as f64;
            let union = (gts + miss) as f64;
            let jac = 1.0 - inter / union;
            let w = jac - prev;
            prev = jac;
            total += errors[i] * w;
            grad[i * c + k] = if fg(i) { -w } else { w };
        }
    }
    let scale = 1.0 / present as f64;
    for g in &mut grad {
        *g *= scale;
    }
    let shape = p.shape().to_vec();
    Ok(probs.tape().record(
        Tensor::scalar(total * scale),
        &[probs],
        Box::new(move |g, _| {
            let g = g.item()?;
            Ok(vec![Some(Tensor::new(shape.clone(), grad.iter().map(|d| d * g).collect())?)])
        }),
    ))
}

/// The terms of the VAE objective.
#[derive(Clone, Copy, Debug)]
pub struct VaeLoss<'t> {
    pub ce: Var<'t>,
    pub lovasz: Var<'t>,
    pub kl: Var<'t>,
    pub total: Var<'t>,
}

/// `CE + γ·Lovász + β·KL/V` with `V` the voxel count of one sample.
///
/// CE and Lovász are per-voxel means while `kl` is a per-sample sum, so the
/// KL term is brought to the same per-voxel scale before weighting. Without
/// that, any `β` above roughly `1/V` makes an unused latent the cheapest
/// solution.
pub fn vae_loss<'t>(logits: Var<'t>, targets: &[u16], latent: &Latent<'t>, w: VaeLossWeights) -> Result<VaeLoss<'t>> {
    let ce = cross_entropy(logits, targets, None)?;
    let lovasz = lovasz_softmax(logits, targets)?;
    let kl = kl_divergence(latent)?;
    let voxels: usize = logits.shape()[2..].iter().product();
    let total = ce
        .add(lovasz.scale(w.gamma))?
        .add(kl.scale(w.beta / voxels.max(1) as f64))?;
    Ok(VaeLoss { ce, lovasz, kl, total })
}
