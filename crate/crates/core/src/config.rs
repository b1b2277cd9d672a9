//! Run configuration, read from TOML. Every key is optional; missing keys
//! take the toy defaults below.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{DenoiserConfig, NoiseSchedule};
use crate::nn::SsenConfig;
use crate::toy::ToyConfig;
use crate::train::TrainOptions;
use crate::vae::{VaeConfig, VaeLossWeights, DOWNSAMPLE};
use crate::voxel::CannyThresholds;
use crate::{file_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup: f64,
    pub clip: Option<f64>,
}

impl StageConfig {
    fn new(epochs: usize, batch_size: usize, lr: f64) -> Self {
        Self {
            epochs,
            batch_size,
            lr,
            weight_decay: 1e-4,
            warmup: 0.05,
            clip: Some(5.0),
        }
    }

    pub fn options(&self, seed: u64) -> TrainOptions {
        let mut o = TrainOptions::new(self.epochs, self.batch_size, self.lr, seed);
        o.weight_decay = self.weight_decay;
        o.warmup = self.warmup;
        o.clip = self.clip;
        o
    }
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::new(30, 1, 1e-3)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Grid size `(L, W, H)`.
    pub dims: [usize; 3],
    pub num_classes: u16,
    pub latent_channels: usize,
    pub vae_widths: [usize; 2],
    pub ssen_mix_channels: usize,
    pub ssen_channels: usize,
    pub denoiser_widths: [usize; 3],
    pub blocks_per_stage: usize,
    pub d_state: usize,
    pub cartesian_only: bool,
    pub schedule: ScheduleConfig,
    pub seed: u64,
    /// Scenes written by `gen-toy`.
    pub toy_scenes: usize,
    pub canny_low: f64,
    pub canny_high: f64,
    pub kl_weight: f64,
    pub lovasz_weight: f64,
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub out_dir: PathBuf,
    pub vae: StageConfig,
    pub ssen: StageConfig,
    pub diffusion: StageConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dims: [64, 64, 8],
            num_classes: 8,
            latent_channels: 4,
            vae_widths: [8, 16],
            ssen_mix_channels: 8,
            ssen_channels: 16,
            denoiser_widths: [32, 64, 128],
            blocks_per_stage: 2,
            d_state: 16,
            cartesian_only: false,
            schedule: ScheduleConfig::default(),
            seed: 0,
            toy_scenes: 16,
            canny_low: 50.0,
            canny_high: 100.0,
            kl_weight: VaeLossWeights::default().beta,
            lovasz_weight: VaeLossWeights::default().gamma,
            data_dir: PathBuf::from("data"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            out_dir: PathBuf::from("out"),
            vae: StageConfig::new(30, 1, 5e-3),
            ssen: StageConfig::new(30, 4, 5e-3),
            diffusion: StageConfig::new(50, 4, 1e-3),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(file_err(path))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dims.iter().any(|&d| d == 0 || d % DOWNSAMPLE != 0) {
            return bad(format!("dims {:?} must be positive multiples of {DOWNSAMPLE}", self.dims));
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2".into());
        }
        if self.latent_channels == 0
            || self.vae_widths.contains(&0)
            || self.denoiser_widths.contains(&0)
            || self.ssen_channels == 0
            || self.ssen_mix_channels == 0
            || self.blocks_per_stage == 0
            || self.d_state == 0
        {
            return bad("network widths must be positive".into());
        }
        NoiseSchedule::linear(self.schedule.steps, self.schedule.beta_start, self.schedule.beta_end)
            .map_err(|e| Error::Config(e.to_string()))?;
        if !(0.0..=255.0).contains(&self.canny_low) || self.canny_low > self.canny_high {
            return bad(format!("canny thresholds {} / {}", self.canny_low, self.canny_high));
        }
        if !(self.kl_weight >= 0.0 && self.lovasz_weight >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        for (name, s) in [("vae", &self.vae), ("ssen", &self.ssen), ("diffusion", &self.diffusion)] {
            if s.epochs == 0 || s.batch_size == 0 || !(s.lr > 0.0) || !(0.0..1.0).contains(&s.warmup) || !(s.weight_decay >= 0.0) {
                return bad(format!("[{name}] needs epochs, batch_size, lr > 0 and warmup in [0, 1)"));
            }
            if s.clip.is_some_and(|c| !(c > 0.0)) {
                return bad(format!("[{name}] clip must be positive"));
            }
        }
        for (name, p) in [("data_dir", &self.data_dir), ("checkpoint_dir", &self.checkpoint_dir), ("out_dir", &self.out_dir)] {
            if p.as_os_str().is_empty() {
                return bad(format!("{name} is empty"));
            }
        }
        Ok(())
    }

    pub fn latent_dims(&self) -> [usize; 3] {
        self.dims.map(|d| d / DOWNSAMPLE)
    }

    pub fn vae_config(&self) -> VaeConfig {
        VaeConfig {
            num_classes: self.num_classes,
            latent_channels: self.latent_channels,
            widths: self.vae_widths,
        }
    }

    pub fn vae_weights(&self) -> VaeLossWeights {
        VaeLossWeights {
            beta: self.kl_weight,
            gamma: self.lovasz_weight,
        }
    }

    pub fn ssen_config(&self) -> SsenConfig {
        SsenConfig {
            num_classes: self.num_classes,
            mix_channels: self.ssen_mix_channels,
            channels: self.ssen_channels,
        }
    }

    /// Condition channels: the LMN latent plus one probability per class.
    pub fn denoiser_config(&self) -> DenoiserConfig {
        let mut c = DenoiserConfig::new(
            self.latent_channels,
            self.latent_channels + self.num_classes as usize,
            self.latent_dims(),
        );
        c.widths = self.denoiser_widths;
        c.blocks_per_stage = self.blocks_per_stage;
        c.d_state = self.d_state;
        c.cartesian_only = self.cartesian_only;
        c
    }

    pub fn noise_schedule(&self) -> NoiseSchedule {
        NoiseSchedule::linear(self.schedule.steps, self.schedule.beta_start, self.schedule.beta_end)
            .expect("validated schedule")
    }

    pub fn toy_config(&self) -> ToyConfig {
        ToyConfig::new(self.dims, self.num_classes)
    }

    pub fn canny(&self) -> CannyThresholds {
        CannyThresholds {
            low: self.canny_low,
            high: self.canny_high,
        }
    }
}
