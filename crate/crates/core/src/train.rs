//! Epoch loops with per-epoch seeding, CSV loss logs and resumable checkpoints.
//!
//! Every epoch draws its randomness (batch order, posterior noise, diffusion
//! timesteps) from a generator seeded by `(seed, epoch)` alone, and the
//! checkpoint written after each epoch carries the optimizer state. Resuming
//! from any checkpoint therefore replays the remaining epochs exactly.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{stack, LatentDiffusion};
use crate::nn::{class_weights, cross_entropy, load_checkpoint, save_checkpoint, Binder, Mode, ParamStore, Ssen};
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig, WarmupCosine};
use crate::tensor::{Tape, Tensor};
use crate::toy::scene_seed;
use crate::vae::{batch_targets, one_hot_batch, vae_loss, Vae, VaeLossWeights, DOWNSAMPLE};
use crate::voxel::{ConditionPair, VoxelGrid};
use crate::{file_err, invalid, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Fraction of all updates spent in linear warmup.
    pub warmup: f64,
    /// Global gradient-norm cap.
    pub clip: Option<f64>,
    pub seed: u64,
    /// Ends the call after this epoch, as an interruption would. The schedule
    /// still spans `epochs`.
    pub stop_after: Option<usize>,
}

impl TrainOptions {
    pub fn new(epochs: usize, batch_size: usize, lr: f64, seed: u64) -> Self {
        Self {
            epochs,
            batch_size,
            lr,
            weight_decay: 1e-4,
            warmup: 0.05,
            clip: Some(5.0),
            seed,
            stop_after: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || !(0.0..1.0).contains(&self.warmup) {
            return Err(invalid("training options", format!("{self:?}")));
        }
        Ok(())
    }
}

/// Where a stage keeps its checkpoint and loss log.
#[derive(Clone, Debug, PartialEq)]
pub struct StagePaths {
    /// Name used in errors about a missing checkpoint.
    pub stage: String,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

impl StagePaths {
    pub fn in_dir(dir: impl AsRef<Path>, stage: &str) -> Self {
        let dir = dir.as_ref();
        Self {
            stage: stage.to_string(),
            checkpoint: dir.join(format!("{stage}.ckpt")),
            log: dir.join(format!("{stage}_loss.csv")),
        }
    }
}

/// Optimizer plus schedule, advanced once per batch.
pub struct Stepper {
    pub opt: AdamW,
    pub schedule: WarmupCosine,
    pub clip: Option<f64>,
}

impl Stepper {
    pub fn apply(&mut self, store: &mut ParamStore, mut grads: Vec<Option<Tensor>>) -> Result<()> {
        if let Some(c) = self.clip {
            let norm = clip_grad_norm(&mut grads, c);
            if !norm.is_finite() {
                return Err(Error::Numeric(format!("gradient norm {norm} at step {}", self.opt.steps())));
            }
        }
        let lr = self.schedule.lr(self.opt.steps());
        self.opt.step(store, &grads, lr)
    }
}

const EPOCH_KEY: &str = "meta.epoch";

/// Keeps the header plus the first `rows` data lines of a CSV log.
fn truncate_log(path: &Path, header: &str, rows: usize) -> Result<()> {
    let kept: Vec<String> = match std::fs::read_to_string(path) {
        Ok(text) => text.lines().skip(1).take(rows).map(str::to_string).collect(),
        Err(_) => Vec::new(),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(file_err(dir))?;
    }
    let mut text = format!("{header}\n");
    for line in kept {
        text.push_str(&line);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(file_err(path))
}

fn append_row(path: &Path, epoch: usize, values: &[f64]) -> Result<()> {
    let mut f = OpenOptions::new().append(true).open(path).map_err(file_err(path))?;
    let cells: Vec<String> = values.iter().map(|v| format!("{v:.10e}")).collect();
    writeln!(f, "{epoch},{}", cells.join(",")).map_err(file_err(path))
}

/// Reads a loss log back as `(epoch, values)` rows.
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<(usize, Vec<f64>)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(file_err(path))?;
    let bad = |i: usize| Error::Format {
        path: path.to_path_buf(),
        msg: format!("line {}", i + 2),
    };
    text.lines()
        .skip(1)
        .enumerate()
        .map(|(i, line)| {
            let mut cells = line.split(',');
            let epoch = cells.next().and_then(|c| c.parse().ok()).ok_or_else(|| bad(i))?;
            let vals = cells.map(|c| c.parse().map_err(|_| bad(i))).collect::<Result<_>>()?;
            Ok((epoch, vals))
        })
        .collect()
}

/// Runs epochs `1..=opts.epochs`, resuming after the epoch stored in an
/// existing checkpoint when `resume` is set.
///
/// `epoch_fn` trains one epoch and returns the values logged for it. `extra`
/// tensors are stored in every checkpoint. Returns the rows logged by this call.
pub fn run_epochs<F>(
    opts: &TrainOptions,
    paths: &StagePaths,
    columns: &[&str],
    store: &mut ParamStore,
    batches_per_epoch: usize,
    extra: &[(String, Tensor)],
    resume: bool,
    mut epoch_fn: F,
) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(usize, &mut ParamStore, &mut Stepper, &mut ChaCha8Rng) -> Result<Vec<f64>>,
{
    opts.validate()?;
    let total = (opts.epochs * batches_per_epoch.max(1)) as u64;
    let mut stepper = Stepper {
        opt: AdamW::new(
            store,
            AdamWConfig {
                weight_decay: opts.weight_decay,
                ..AdamWConfig::default()
            },
        ),
        schedule: WarmupCosine::new(opts.lr, (opts.warmup * total as f64) as u64, total),
        clip: opts.clip,
    };
    let mut done = 0;
    if resume && paths.checkpoint.exists() {
        let state = load_checkpoint(&paths.checkpoint, &paths.stage, store)?;
        stepper.opt.load_state(store, &state)?;
        done = state
            .iter()
            .find(|(n, _)| n == EPOCH_KEY)
            .ok_or_else(|| invalid("checkpoint", format!("{} has no epoch counter", paths.checkpoint.display())))?
            .1
            .item()? as usize;
    }
    let header = format!("epoch,{}", columns.join(","));
    truncate_log(&paths.log, &header, done)?;
    let mut rows = Vec::new();
    let last = opts.stop_after.map_or(opts.epochs, |s| s.min(opts.epochs));
    for epoch in done + 1..=last {
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(opts.seed, epoch));
        let values = epoch_fn(epoch, store, &mut stepper, &mut rng)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("{} epoch {epoch}: non-finite loss {values:?}", paths.stage)));
        }
        let mut state = stepper.opt.state(store);
        state.push((EPOCH_KEY.to_string(), Tensor::scalar(epoch as f64)));
        state.extend(extra.iter().cloned());
        save_checkpoint(&paths.checkpoint, store, &state)?;
        append_row(&paths.log, epoch, &values)?;
        rows.push(values);
    }
    Ok(rows)
}

/// Shuffled mini-batches of indices `0..n`.
pub fn shuffled_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Columns of the VAE loss log.
pub const VAE_COLUMNS: [&str; 4] = ["ce", "lovasz", "kl", "total"];

/// Trains the VAE on `scenes`; each logged row is the epoch mean of
/// [`VAE_COLUMNS`].
pub fn train_vae(
    vae: &Vae,
    store: &mut ParamStore,
    scenes: &[VoxelGrid],
    weights: VaeLossWeights,
    opts: &TrainOptions,
    paths: &StagePaths,
    resume: bool,
) -> Result<Vec<Vec<f64>>> {
    if scenes.is_empty() {
        return Err(invalid("training set", "no scenes"));
    }
    let nb = scenes.len().div_ceil(opts.batch_size.max(1));
    run_epochs(opts, paths, &VAE_COLUMNS, store, nb, &[], resume, |epoch, store, stepper, rng| {
        let mut sums = [0.0; 4];
        let batches = shuffled_batches(scenes.len(), opts.batch_size, rng);
        for batch in &batches {
            let grids: Vec<&VoxelGrid> = batch.iter().map(|&i| &scenes[i]).collect();
            let tape = Tape::new();
            let p = Binder::new(&tape, store, Mode::Train { epoch });
            let (latent, logits) = vae.forward(&p, tape.constant(one_hot_batch(&grids)?), rng)?;
            let loss = vae_loss(logits, &batch_targets(&grids), &latent, weights)?;
            for (s, v) in sums.iter_mut().zip([loss.ce, loss.lovasz, loss.kl, loss.total]) {
                *s += v.value().item()?;
            }
            let g = tape.backward(loss.total)?;
            let grads = p.grads(&g);
            let updates = p.finish();
            store.apply_buffer_updates(updates);
            stepper.apply(store, grads)?;
        }
        Ok(sums.iter().map(|s| s / batches.len() as f64).collect())
    })
}

/// Lifted conditions stacked into `(N, 1 + C, L, W, H)`.
pub fn lift_batch(conds: &[&ConditionPair], height: usize) -> Result<Tensor> {
    let first = conds.first().ok_or_else(|| invalid("batch", "no conditions"))?;
    let one = first.lift(height);
    let mut shape = vec![conds.len()];
    shape.extend_from_slice(one.shape());
    let mut data = Vec::with_capacity(one.numel() * conds.len());
    for c in conds {
        let t = c.lift(height);
        if t.shape() != one.shape() {
            return Err(invalid("batch", "conditions differ in size or class count"));
        }
        data.extend_from_slice(t.data());
    }
    Ok(Tensor::new(shape, data)?)
}

/// Majority-pooled scene labels at latent resolution, the SSEN target.
pub fn coarse_targets(grids: &[&VoxelGrid]) -> Result<Vec<u16>> {
    let mut out = Vec::new();
    for g in grids {
        out.extend_from_slice(g.majority_pool(DOWNSAMPLE)?.labels());
    }
    Ok(out)
}

/// Trains SSEN to predict the pooled scene from its condition, with
/// inverse-log-frequency class weights. Logs the epoch-mean loss.
pub fn train_ssen(
    ssen: &Ssen,
    store: &mut ParamStore,
    scenes: &[VoxelGrid],
    conds: &[ConditionPair],
    opts: &TrainOptions,
    paths: &StagePaths,
    resume: bool,
) -> Result<Vec<Vec<f64>>> {
    if scenes.is_empty() || scenes.len() != conds.len() {
        return Err(invalid("training set", format!("{} scenes, {} conditions", scenes.len(), conds.len())));
    }
    let height = scenes[0].dims()[2];
    let mut hist = vec![0usize; ssen.cfg.num_classes as usize];
    for g in scenes {
        for (h, c) in hist.iter_mut().zip(g.majority_pool(DOWNSAMPLE)?.histogram()) {
            *h += c;
        }
    }
    let weights = class_weights(&hist);
    let nb = scenes.len().div_ceil(opts.batch_size.max(1));
    run_epochs(opts, paths, &["ce"], store, nb, &[], resume, |epoch, store, stepper, rng| {
        let mut sum = 0.0;
        let batches = shuffled_batches(scenes.len(), opts.batch_size, rng);
        for batch in &batches {
            let grids: Vec<&VoxelGrid> = batch.iter().map(|&i| &scenes[i]).collect();
            let cs: Vec<&ConditionPair> = batch.iter().map(|&i| &conds[i]).collect();
            let tape = Tape::new();
            let p = Binder::new(&tape, store, Mode::Train { epoch });
            let logits = ssen.forward(&p, tape.constant(lift_batch(&cs, height)?))?;
            let loss = cross_entropy(logits, &coarse_targets(&grids)?, Some(&weights))?;
            sum += loss.value().item()?;
            let g = tape.backward(loss)?;
            let grads = p.grads(&g);
            let updates = p.finish();
            store.apply_buffer_updates(updates);
            stepper.apply(store, grads)?;
        }
        Ok(vec![sum / batches.len() as f64])
    })
}

/// Columns of the diffusion loss log.
pub const DIFFUSION_COLUMNS: [&str; 1] = ["ldm"];

/// Trains the latent mapping network and denoiser on frozen inputs: scaled
/// clean latents `(c_z, l, w, h)`, lifted conditions `(1 + C, L, W, H)` and
/// SSEN logits `(C, l, w, h)`, one of each per scene.
#[allow(clippy::too_many_arguments)]
pub fn train_diffusion(
    model: &LatentDiffusion,
    store: &mut ParamStore,
    latents: &[Tensor],
    lifted: &[Tensor],
    ssen_logits: &[Tensor],
    opts: &TrainOptions,
    paths: &StagePaths,
    extra: &[(String, Tensor)],
    resume: bool,
) -> Result<Vec<Vec<f64>>> {
    let n = latents.len();
    if n == 0 || lifted.len() != n || ssen_logits.len() != n {
        return Err(invalid(
            "training set",
            format!("{n} latents, {} conditions, {} SSEN outputs", lifted.len(), ssen_logits.len()),
        ));
    }
    let nb = n.div_ceil(opts.batch_size.max(1));
    run_epochs(opts, paths, &DIFFUSION_COLUMNS, store, nb, extra, resume, |epoch, store, stepper, rng| {
        let mut sum = 0.0;
        let batches = shuffled_batches(n, opts.batch_size, rng);
        for batch in &batches {
            let pick = |v: &[Tensor]| stack(&batch.iter().map(|&i| &v[i]).collect::<Vec<_>>());
            let x0 = pick(latents)?;
            let tape = Tape::new();
            let p = Binder::new(&tape, store, Mode::Train { epoch });
            let loss = model.loss(&p, &x0, tape.constant(pick(lifted)?), tape.constant(pick(ssen_logits)?), rng)?;
            sum += loss.value().item()?;
            let g = tape.backward(loss)?;
            let grads = p.grads(&g);
            let updates = p.finish();
            store.apply_buffer_updates(updates);
            stepper.apply(store, grads)?;
        }
        Ok(vec![sum / batches.len() as f64])
    })
}
