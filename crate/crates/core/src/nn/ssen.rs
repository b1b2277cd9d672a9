//! Coarse scene-structure estimation from the lifted sketch and PSA maps.

use rand::Rng;

use super::{Binder, Conv3d, DdrResidual, MultiScale, ParamStore};
use crate::tensor::{Conv3dSpec, Var};
use crate::voxel::ConditionPair;
use crate::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SsenConfig {
    pub num_classes: u16,
    /// Width after the input channel mix.
    pub mix_channels: usize,
    /// Width at latent resolution.
    pub channels: usize,
}

impl SsenConfig {
    pub fn new(num_classes: u16) -> Self {
        Self {
            num_classes,
            mix_channels: 8,
            channels: 16,
        }
    }
}

/// Lifted condition `(N, 1 + C, L, W, H)` to class logits `(N, C, L/4, W/4, H/4)`.
#[derive(Clone, Debug)]
pub struct Ssen {
    pub cfg: SsenConfig,
    pub mix: Conv3d,
    pub down: [Conv3d; 2],
    pub multi_scale: MultiScale,
    pub ddr: DdrResidual,
    pub head: Conv3d,
}

impl Ssen {
    pub fn new(store: &mut ParamStore, name: &str, cfg: SsenConfig, rng: &mut impl Rng) -> Self {
        let cin = ConditionPair::lifted_channels(cfg.num_classes);
        let (m, c) = (cfg.mix_channels, cfg.channels);
        let down = |store: &mut ParamStore, i: usize, ci: usize, rng: &mut _| {
            Conv3d::new(
                store,
                &format!("{name}.down{i}"),
                ci,
                c,
                [2; 3],
                Conv3dSpec::strided([2; 3]),
                true,
                rng,
            )
        };
        let mix = Conv3d::new(store, &format!("{name}.mix"), cin, m, [1; 3], Conv3dSpec::default(), true, rng);
        let d0 = down(store, 0, m, rng);
        let d1 = down(store, 1, c, rng);
        Self {
            cfg,
            mix,
            down: [d0, d1],
            multi_scale: MultiScale::new(store, &format!("{name}.multi_scale"), c, rng),
            ddr: DdrResidual::new(store, &format!("{name}.ddr"), c, rng),
            head: Conv3d::new(
                store,
                &format!("{name}.head"),
                c,
                cfg.num_classes as usize,
                [1; 3],
                Conv3dSpec::default(),
                true,
                rng,
            ),
        }
    }

    pub fn forward<'t>(&self, p: &Binder<'t, '_>, cond: Var<'t>) -> Result<Var<'t>> {
        let s = cond.shape();
        if s.len() != 5 || s[2..].iter().any(|d| d % 4 != 0) {
            return Err(invalid("ssen", format!("condition {s:?} must be (N, C, L, W, H) with dims divisible by 4")));
        }
        let mut h = self.mix.forward(p, cond)?.relu();
        for d in &self.down {
            h = d.forward(p, h)?.relu();
        }
        let h = self.multi_scale.forward(p, h)?;
        let h = self.ddr.forward(p, h)?;
        self.head.forward(p, h)
    }
}
