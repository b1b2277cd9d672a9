//! End-to-end plumbing over a [`RunConfig`]: datasets on disk, the three
//! training stages, scene generation, sampling runs and evaluation.
//!
//! A data directory holds `<stem>.lbl` label volumes with their conditions in
//! `<stem>_sketch.pgm` and `<stem>_psa.pgm`. Checkpoints and loss logs go to
//! `checkpoint_dir` as `<stage>.ckpt` and `<stage>_loss.csv`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::diffusion::{latent_scale, Denoiser, LatentDiffusion};
use crate::metrics::{extract_features, fid, mmd, Bandwidth, IouAccumulator};
use crate::nn::{load_checkpoint, Binder, Mode, ParamStore, Ssen};
use crate::tensor::{Tape, Tensor};
use crate::toy::generate_dataset;
use crate::train::{train_diffusion, train_ssen, train_vae, StagePaths};
use crate::vae::{argmax_grids, one_hot_batch, Lmn, Vae};
use crate::voxel::{
    read_condition_pair, read_voxel_labels, synthetic_condition, write_pgm, write_voxel_labels, ConditionPair, VoxelGrid,
};
use crate::{file_err, invalid, Error, Result};

pub const VAE_STAGE: &str = "vae";
pub const SSEN_STAGE: &str = "ssen";
pub const DIFFUSION_STAGE: &str = "diffusion";
/// Extra tensor in the diffusion checkpoint holding the latent scale factor.
pub const LATENT_SCALE_KEY: &str = "meta.latent_scale";
pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// A labeled scene with its condition.
#[derive(Clone, Debug)]
pub struct Scene {
    pub name: String,
    pub grid: VoxelGrid,
    pub condition: ConditionPair,
}

pub fn condition_paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{stem}_sketch.pgm")), dir.join(format!("{stem}_psa.pgm")))
}

/// Writes the sketch and the PSA map (class IDs as gray levels).
pub fn write_condition(dir: &Path, stem: &str, cond: &ConditionPair) -> Result<(PathBuf, PathBuf)> {
    let (s, p) = condition_paths(dir, stem);
    write_pgm(&s, cond.sketch())?;
    write_pgm(&p, &cond.psa().map(|c| c as u8))?;
    Ok((s, p))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(file_err(dir))
}

/// Sorted `.lbl` files of a directory.
pub fn label_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(file_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "lbl"))
        .collect();
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Generates `n` toy scenes into `dir` with their synthetic conditions and
/// returns the label paths.
pub fn write_toy_dataset(cfg: &RunConfig, n: usize, seed: u64, dir: &Path) -> Result<Vec<PathBuf>> {
    let scenes = generate_dataset(&cfg.toy_config(), n, seed)?;
    create_dir(dir)?;
    let mut out = Vec::with_capacity(n);
    for (i, s) in scenes.iter().enumerate() {
        let name = format!("scene_{i:04}");
        let path = dir.join(format!("{name}.lbl"));
        write_voxel_labels(&path, &s.grid)?;
        write_condition(dir, &name, &synthetic_condition(&s.grid, cfg.canny())?)?;
        out.push(path);
    }
    Ok(out)
}

/// Reads every scene of `dir` with its condition files.
pub fn load_scenes(cfg: &RunConfig, dir: &Path) -> Result<Vec<Scene>> {
    let files = label_files(dir)?;
    if files.is_empty() {
        return Err(invalid("data directory", format!("no .lbl files in {}", dir.display())));
    }
    files
        .iter()
        .map(|f| {
            let name = stem(f);
            let grid = read_voxel_labels(f, cfg.dims, cfg.num_classes)?;
            let (s, p) = condition_paths(dir, &name);
            let condition = read_condition_pair(&s, &p, cfg.num_classes)?;
            Ok(Scene { name, grid, condition })
        })
        .collect()
}

pub fn stage_paths(cfg: &RunConfig, stage: &str) -> StagePaths {
    StagePaths::in_dir(&cfg.checkpoint_dir, stage)
}

/// Freshly initialized networks. Each stage draws from its own generator, so
/// building one never shifts another's initialization.
pub struct Models {
    pub vae: Vae,
    pub vae_store: ParamStore,
    pub ssen: Ssen,
    pub ssen_store: ParamStore,
    pub diffusion: LatentDiffusion,
    pub diffusion_store: ParamStore,
}

impl Models {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let rng = |k: u64| ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(k));
        let mut vae_store = ParamStore::new();
        let vae = Vae::new(&mut vae_store, VAE_STAGE, cfg.vae_config(), &mut rng(1));
        let mut ssen_store = ParamStore::new();
        let ssen = Ssen::new(&mut ssen_store, SSEN_STAGE, cfg.ssen_config(), &mut rng(2));
        let mut diffusion_store = ParamStore::new();
        let mut r = rng(3);
        let lmn = Lmn::new(&mut diffusion_store, "lmn", cfg.vae_config(), &mut r);
        let denoiser = Denoiser::new(&mut diffusion_store, "denoiser", cfg.denoiser_config(), &mut r)?;
        Ok(Self {
            vae,
            vae_store,
            ssen,
            ssen_store,
            diffusion: LatentDiffusion {
                lmn,
                denoiser,
                schedule: cfg.noise_schedule(),
            },
            diffusion_store,
        })
    }
}

pub fn train_vae_stage(cfg: &RunConfig, resume: bool) -> Result<Vec<Vec<f64>>> {
    let scenes = load_scenes(cfg, &cfg.data_dir)?;
    let mut m = Models::new(cfg)?;
    let grids: Vec<VoxelGrid> = scenes.into_iter().map(|s| s.grid).collect();
    let opts = cfg.vae.options(cfg.seed);
    train_vae(&m.vae, &mut m.vae_store, &grids, cfg.vae_weights(), &opts, &stage_paths(cfg, VAE_STAGE), resume)
}

pub fn train_ssen_stage(cfg: &RunConfig, resume: bool) -> Result<Vec<Vec<f64>>> {
    let scenes = load_scenes(cfg, &cfg.data_dir)?;
    let mut m = Models::new(cfg)?;
    let (grids, conds): (Vec<_>, Vec<_>) = scenes.into_iter().map(|s| (s.grid, s.condition)).unzip();
    let opts = cfg.ssen.options(cfg.seed);
    train_ssen(&m.ssen, &mut m.ssen_store, &grids, &conds, &opts, &stage_paths(cfg, SSEN_STAGE), resume)
}

fn lifted(cfg: &RunConfig, cond: &ConditionPair) -> Result<Tensor> {
    let [l, w, h] = cfg.dims;
    if cond.psa().rows() != l || cond.psa().cols() != w {
        return Err(invalid(
            "condition",
            format!("{}x{} maps for a {l}x{w} grid", cond.psa().rows(), cond.psa().cols()),
        ));
    }
    Ok(cond.lift(h))
}

fn with_batch(t: Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    Ok(t.reshape(shape)?)
}

fn without_batch(t: Tensor) -> Result<Tensor> {
    let shape = t.shape()[1..].to_vec();
    Ok(t.reshape(shape)?)
}

fn encode_mean(vae: &Vae, store: &ParamStore, grid: &VoxelGrid) -> Result<Tensor> {
    let tape = Tape::new();
    let p = Binder::frozen(&tape, store, Mode::Eval);
    without_batch(vae.encode(&p, tape.constant(one_hot_batch(&[grid])?))?.mean.value())
}

fn ssen_logits(ssen: &Ssen, store: &ParamStore, lifted: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let p = Binder::frozen(&tape, store, Mode::Eval);
    without_batch(ssen.forward(&p, tape.constant(with_batch(lifted.clone())?))?.value())
}

/// Trains the LMN and denoiser against the frozen VAE and SSEN, which must
/// have been trained first.
pub fn train_diffusion_stage(cfg: &RunConfig, resume: bool) -> Result<Vec<Vec<f64>>> {
    let scenes = load_scenes(cfg, &cfg.data_dir)?;
    let mut m = Models::new(cfg)?;
    load_checkpoint(stage_paths(cfg, VAE_STAGE).checkpoint, VAE_STAGE, &mut m.vae_store)?;
    load_checkpoint(stage_paths(cfg, SSEN_STAGE).checkpoint, SSEN_STAGE, &mut m.ssen_store)?;
    let mut latents = Vec::with_capacity(scenes.len());
    let mut lifts = Vec::with_capacity(scenes.len());
    let mut logits = Vec::with_capacity(scenes.len());
    for s in &scenes {
        latents.push(encode_mean(&m.vae, &m.vae_store, &s.grid)?);
        let l = lifted(cfg, &s.condition)?;
        logits.push(ssen_logits(&m.ssen, &m.ssen_store, &l)?);
        lifts.push(l);
    }
    let scale = latent_scale(&latents)?;
    let scaled: Vec<Tensor> = latents.iter().map(|t| t.map(|v| v * scale)).collect();
    let extra = [(LATENT_SCALE_KEY.to_string(), Tensor::full([1], scale))];
    let opts = cfg.diffusion.options(cfg.seed);
    train_diffusion(
        &m.diffusion,
        &mut m.diffusion_store,
        &scaled,
        &lifts,
        &logits,
        &opts,
        &stage_paths(cfg, DIFFUSION_STAGE),
        &extra,
        resume,
    )
}

/// Trained networks ready for sampling.
pub struct Generator {
    cfg: RunConfig,
    models: Models,
    latent_scale: f64,
}

impl Generator {
    /// Loads all three checkpoints; a missing one fails with its stage name.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let mut models = Models::new(cfg)?;
        load_checkpoint(stage_paths(cfg, VAE_STAGE).checkpoint, VAE_STAGE, &mut models.vae_store)?;
        load_checkpoint(stage_paths(cfg, SSEN_STAGE).checkpoint, SSEN_STAGE, &mut models.ssen_store)?;
        let path = stage_paths(cfg, DIFFUSION_STAGE).checkpoint;
        let extra = load_checkpoint(&path, DIFFUSION_STAGE, &mut models.diffusion_store)?;
        let latent_scale = extra
            .iter()
            .find(|(k, _)| k == LATENT_SCALE_KEY)
            .map(|(_, t)| t.data()[0])
            .filter(|s| s.is_finite() && *s > 0.0)
            .ok_or_else(|| Error::Format {
                path: path.clone(),
                msg: format!("no valid {LATENT_SCALE_KEY}"),
            })?;
        Ok(Self {
            cfg: cfg.clone(),
            models,
            latent_scale,
        })
    }

    pub fn latent_scale(&self) -> f64 {
        self.latent_scale
    }

    /// Samples a scene for `cond`: condition features, ancestral sampling in
    /// latent space, decoding and a per-voxel argmax.
    pub fn generate_scene(&self, cond: &ConditionPair, seed: u64) -> Result<VoxelGrid> {
        if cond.num_classes() != self.cfg.num_classes {
            return Err(invalid(
                "condition",
                format!("{} classes for a {}-class model", cond.num_classes(), self.cfg.num_classes),
            ));
        }
        let m = &self.models;
        let l = lifted(&self.cfg, cond)?;
        let logits = ssen_logits(&m.ssen, &m.ssen_store, &l)?;
        let z = m
            .diffusion
            .sample(&m.diffusion_store, &with_batch(l)?, &with_batch(logits)?, seed)?;
        let z = z.map(|v| v / self.latent_scale);
        let tape = Tape::new();
        let p = Binder::frozen(&tape, &m.vae_store, Mode::Eval);
        let out = m.vae.decode(&p, tape.constant(z))?.value();
        Ok(argmax_grids(&out)?.remove(0))
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(file_err(path))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// One line of the sampling manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub seed: u64,
    pub sketch: PathBuf,
    pub psa: PathBuf,
    pub output: PathBuf,
    /// SHA-256 of each stage checkpoint, keyed by stage.
    pub checkpoints: BTreeMap<String, String>,
}

/// Output stem for a condition: the sketch stem without its `_sketch` suffix.
fn output_stem(sketch: &Path) -> String {
    let s = stem(sketch);
    s.strip_suffix("_sketch").map(str::to_string).unwrap_or(s)
}

/// Generates one `.lbl` per (condition, seed) into `out_dir` and writes the
/// JSON-lines manifest next to them.
pub fn sample(cfg: &RunConfig, conditions: &[(PathBuf, PathBuf)], seeds: &[u64], out_dir: &Path) -> Result<Vec<SampleRecord>> {
    if conditions.is_empty() || seeds.is_empty() {
        return Err(invalid("sample", "needs at least one condition and one seed"));
    }
    let conds = conditions
        .iter()
        .map(|(s, p)| read_condition_pair(s, p, cfg.num_classes))
        .collect::<Result<Vec<_>>>()?;
    let generator = Generator::load(cfg)?;
    let mut hashes = BTreeMap::new();
    for stage in [VAE_STAGE, SSEN_STAGE, DIFFUSION_STAGE] {
        hashes.insert(stage.to_string(), sha256_file(&stage_paths(cfg, stage).checkpoint)?);
    }
    create_dir(out_dir)?;
    let mut records = Vec::new();
    for ((sketch, psa), cond) in conditions.iter().zip(&conds) {
        for &seed in seeds {
            let grid = generator.generate_scene(cond, seed)?;
            let output = out_dir.join(format!("{}_seed{seed}.lbl", output_stem(sketch)));
            write_voxel_labels(&output, &grid)?;
            records.push(SampleRecord {
                seed,
                sketch: sketch.clone(),
                psa: psa.clone(),
                output,
                checkpoints: hashes.clone(),
            });
        }
    }
    let path = out_dir.join(MANIFEST_NAME);
    let mut f = std::fs::File::create(&path).map_err(file_err(&path))?;
    for r in &records {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(file_err(&path))?;
    }
    Ok(records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fid: f64,
    pub mmd: f64,
    /// Occupancy IoU over matched pairs; `None` when no file pairs up.
    pub iou: Option<f64>,
    pub miou: Option<f64>,
    /// Entry `k` is class `k + 1`.
    pub per_class_iou: Vec<Option<f64>>,
    /// Real scenes.
    pub m: usize,
    pub m_gen: usize,
    pub d: usize,
    pub bandwidth: f64,
}

/// Real file whose stem is `g`, or the longest stem that `g` extends with `_`.
fn match_real<'a>(g: &str, real: &'a [(String, VoxelGrid)]) -> Option<&'a VoxelGrid> {
    real.iter()
        .filter(|(r, _)| g == r || g.strip_prefix(r.as_str()).is_some_and(|rest| rest.starts_with('_')))
        .max_by_key(|(r, _)| r.len())
        .map(|(_, grid)| grid)
}

/// FID and MMD between the two directories' feature sets. IoU compares each
/// generated volume with the real one it was sampled for, matched by name
/// (`scene_0003_seed7` pairs with `scene_0003`).
pub fn evaluate(cfg: &RunConfig, real_dir: &Path, gen_dir: &Path) -> Result<EvalReport> {
    let read_all = |dir: &Path| -> Result<Vec<(String, VoxelGrid)>> {
        let files = label_files(dir)?;
        if files.is_empty() {
            return Err(invalid("evaluation set", format!("no .lbl files in {}", dir.display())));
        }
        files
            .iter()
            .map(|f| Ok((stem(f), read_voxel_labels(f, cfg.dims, cfg.num_classes)?)))
            .collect()
    };
    let real = read_all(real_dir)?;
    let gen = read_all(gen_dir)?;
    let mut m = Models::new(cfg)?;
    load_checkpoint(stage_paths(cfg, VAE_STAGE).checkpoint, VAE_STAGE, &mut m.vae_store)?;
    let fr = extract_features(&m.vae, &m.vae_store, &real.iter().map(|(_, g)| g).collect::<Vec<_>>())?;
    let fg = extract_features(&m.vae, &m.vae_store, &gen.iter().map(|(_, g)| g).collect::<Vec<_>>())?;
    let f = fid(&fr, &fg)?;
    let (mmd2, bandwidth) = mmd(&fr, &fg, Bandwidth::Median)?;
    let mut acc = IouAccumulator::new(cfg.num_classes);
    let mut pairs = 0;
    for (name, g) in &gen {
        if let Some(r) = match_real(name, &real) {
            acc.add(g, r)?;
            pairs += 1;
        }
    }
    let ious = (pairs > 0).then(|| acc.report());
    Ok(EvalReport {
        fid: f,
        mmd: mmd2,
        iou: ious.as_ref().map(|r| r.iou),
        miou: ious.as_ref().map(|r| r.miou),
        per_class_iou: ious.map(|r| r.per_class).unwrap_or_default(),
        m: fr.len(),
        m_gen: fg.len(),
        d: fr.dim(),
        bandwidth,
    })
}
