//! Selective-scan sequence mixing over voxel volumes.
//!
//! A [`MambaLayer`] flattens a volume into tokens along a [`ScanOrder`] and
//! mixes them with three directional scans (forward, backward, inter-slice).
//! A [`CylinderMambaBlock`] adds a Cartesian-order layer and a cylinder-order
//! layer.

use rand::Rng;

use super::{tokens_to_volume, volume_to_tokens, Binder, LayerNorm, Linear, Mlp, Mode, ParamStore};
use crate::scan_order::{cartesian_order, cylinder_order, inter_slice_seed, ScanDirection, ScanOrder};
use crate::ssm::scan;
use crate::tensor::{Tensor, Var};
use crate::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MambaConfig {
    pub d_model: usize,
    /// Inner width as a multiple of `d_model`.
    pub expand: usize,
    pub d_state: usize,
    pub mlp_ratio: usize,
}

impl MambaConfig {
    pub fn new(d_model: usize) -> Self {
        Self {
            d_model,
            expand: 1,
            d_state: 16,
            mlp_ratio: 2,
        }
    }

    pub fn inner(&self) -> usize {
        self.d_model * self.expand
    }
}

/// Initial step size is `softplus(bias)`.
pub const INITIAL_STEP: f64 = 0.1;

/// One directional selective-scan module over tokens `(N, S, d)`.
#[derive(Clone, Debug)]
pub struct MambaDirection {
    pub in_x: Linear,
    pub in_gate: Linear,
    pub dt: Linear,
    pub b_proj: Linear,
    pub c_proj: Linear,
    pub out: Linear,
    a_log: String,
}

impl MambaDirection {
    pub fn new(store: &mut ParamStore, name: &str, cfg: MambaConfig, rng: &mut impl Rng) -> Self {
        let (d, e, n) = (cfg.d_model, cfg.inner(), cfg.d_state);
        let dt = Linear::new(store, &format!("{name}.dt"), e, e, true, rng);
        // Small step-size weights so softplus(bias) sets the initial Δ.
        let w = store.get(dt.weight_name()).expect("dt weight").map(|v| v * 0.1);
        store.set(dt.weight_name(), w).expect("dt weight shape");
        let bias = INITIAL_STEP.exp_m1().ln();
        store
            .set(dt.bias_name().expect("dt bias"), Tensor::full([e], bias))
            .expect("dt bias shape");
        let a_log = store.insert(
            format!("{name}.a_log"),
            Tensor::from_fn([e, n], |i| ((i % n) as f64 + 1.0).ln()),
            true,
        );
        Self {
            in_x: Linear::new(store, &format!("{name}.in_x"), d, e, true, rng),
            in_gate: Linear::new(store, &format!("{name}.in_gate"), d, e, true, rng),
            dt,
            b_proj: Linear::new(store, &format!("{name}.b_proj"), e, n, false, rng),
            c_proj: Linear::new(store, &format!("{name}.c_proj"), e, n, false, rng),
            out: Linear::new(store, &format!("{name}.out"), e, d, false, rng),
            a_log,
        }
    }

    pub fn a_log_name(&self) -> &str {
        &self.a_log
    }

    pub fn forward<'t>(&self, p: &Binder<'t, '_>, u: Var<'t>) -> Result<Var<'t>> {
        let xa = self.in_x.forward(p, u)?.silu();
        let gate = self.in_gate.forward(p, u)?.silu();
        let delta = self.dt.forward(p, xa)?.softplus();
        let b = self.b_proj.forward(p, xa)?;
        let c = self.c_proj.forward(p, xa)?;
        let a = p.param(&self.a_log)?.exp().neg();
        let y = scan(xa, delta, a, b, c, None)?;
        self.out.forward(p, y.mul(gate)?)
    }
}

/// Three directional scans over one ordering, with pre-norm residuals and an MLP.
///
/// With tokens `f`: `z = LN(f) + f`, `ψ = z + Σ_dir unroute(scan_dir(route(z)))`,
/// output `MLP(LN(ψ)) + ψ`.
#[derive(Clone, Debug)]
pub struct MambaLayer {
    pub norm_in: LayerNorm,
    pub dirs: [MambaDirection; 3],
    pub norm_mlp: LayerNorm,
    pub mlp: Mlp,
    pub order: ScanOrder,
    /// Distinguishes the inter-slice seeds of different layers.
    pub layer_index: usize,
}

impl MambaLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: MambaConfig,
        order: ScanOrder,
        layer_index: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let d = cfg.d_model;
        Self {
            norm_in: LayerNorm::new(store, &format!("{name}.norm_in"), d),
            dirs: [
                MambaDirection::new(store, &format!("{name}.forward"), cfg, rng),
                MambaDirection::new(store, &format!("{name}.backward"), cfg, rng),
                MambaDirection::new(store, &format!("{name}.inter_slice"), cfg, rng),
            ],
            norm_mlp: LayerNorm::new(store, &format!("{name}.norm_mlp"), d),
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, d * cfg.mlp_ratio, rng),
            order,
            layer_index,
        }
    }

    /// The three scan directions used in `mode`.
    pub fn directions(&self, mode: Mode) -> [ScanDirection; 3] {
        let seed = match mode {
            Mode::Train { epoch } => inter_slice_seed(self.layer_index, epoch),
            Mode::Eval => 0,
        };
        [
            ScanDirection::Forward,
            ScanDirection::Backward,
            ScanDirection::InterSlice { seed },
        ]
    }

    /// Tokens `(N, S, d)` in Cartesian storage order to tokens of the same shape.
    pub fn forward_tokens<'t>(&self, p: &Binder<'t, '_>, f: Var<'t>) -> Result<Var<'t>> {
        let z = self.norm_in.forward(p, f)?.add(f)?;
        let mut psi = z;
        for (module, dir) in self.dirs.iter().zip(self.directions(p.mode())) {
            let routed = self.order.apply_var(z, 1, dir)?;
            let mixed = module.forward(p, routed)?;
            psi = psi.add(self.order.restore_var(mixed, 1, dir)?)?;
        }
        let h = self.mlp.forward(p, self.norm_mlp.forward(p, psi)?)?;
        Ok(h.add(psi)?)
    }

    /// Volume `(N, d, L, W, H)` to a volume of the same shape.
    pub fn forward<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 5 || s[2..] != self.order.dims() {
            return Err(invalid(
                "mamba layer",
                format!("input {s:?} does not match scan dims {:?}", self.order.dims()),
            ));
        }
        let t = self.forward_tokens(p, volume_to_tokens(x)?)?;
        tokens_to_volume(t, self.order.dims())
    }

    /// Zeroes every output projection `C`, silencing the scans.
    pub fn zero_scans(&self, store: &mut ParamStore) -> Result<()> {
        for d in &self.dirs {
            let name = d.c_proj.weight_name();
            let shape = store.get(name).map(|t| t.shape().to_vec()).unwrap_or_default();
            store.set(name, Tensor::zeros(shape))?;
        }
        Ok(())
    }
}

/// Sum of a Cartesian-order layer and (unless ablated) a cylinder-order layer.
#[derive(Clone, Debug)]
pub struct CylinderMambaBlock {
    pub triple: MambaLayer,
    pub cylinder: Option<MambaLayer>,
}

impl CylinderMambaBlock {
    /// `layer_index` and `layer_index + 1` seed the two layers.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: MambaConfig,
        dims: [usize; 3],
        layer_index: usize,
        with_cylinder: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let triple = MambaLayer::new(
            store,
            &format!("{name}.triple"),
            cfg,
            cartesian_order(dims)?,
            layer_index,
            rng,
        );
        let cylinder = if with_cylinder {
            Some(MambaLayer::new(
                store,
                &format!("{name}.cylinder"),
                cfg,
                cylinder_order(dims)?,
                layer_index + 1,
                rng,
            ))
        } else {
            None
        };
        Ok(Self { triple, cylinder })
    }

    pub fn from_layers(triple: MambaLayer, cylinder: Option<MambaLayer>) -> Self {
        Self { triple, cylinder }
    }

    pub fn forward<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let phi = self.triple.forward(p, x)?;
        match &self.cylinder {
            Some(c) => Ok(phi.add(c.forward(p, x)?)?),
            None => Ok(phi),
        }
    }
}
