//! Convolutional blocks: factored DDR convolutions and the residual context blocks.

use rand::Rng;

use super::{Binder, Conv3d, ParamStore};
use crate::tensor::{Conv3dSpec, Var};
use crate::Result;

/// A `k³` convolution factored into `1×1×k`, `1×k×1` and `k×1×1` passes.
#[derive(Clone, Debug)]
pub struct DdrConv {
    pub convs: [Conv3d; 3],
    pub dilation: usize,
}

impl DdrConv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        dilation: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let kernels = [[1, 1, k], [1, k, 1], [k, 1, 1]];
        let mut make = |i: usize, ci: usize| {
            let kern = kernels[i];
            Conv3d::new(
                store,
                &format!("{name}.conv{i}"),
                ci,
                cout,
                kern,
                Conv3dSpec::same(kern, dilation),
                true,
                rng,
            )
        };
        let c0 = make(0, cin);
        let c1 = make(1, cout);
        let c2 = make(2, cout);
        Self {
            convs: [c0, c1, c2],
            dilation,
        }
    }

    pub fn forward<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let mut h = x;
        for c in &self.convs {
            h = c.forward(p, h)?;
        }
        Ok(h)
    }

    /// Zeroes the last factor so the whole path outputs zero.
    pub fn zero(&self, store: &mut ParamStore) -> Result<()> {
        self.convs[2].zero(store)
    }
}

/// `x + ddr_b(relu(ddr_a(x)))`.
#[derive(Clone, Debug)]
pub struct DdrResidual {
    pub a: DdrConv,
    pub b: DdrConv,
}

impl DdrResidual {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            a: DdrConv::new(store, &format!("{name}.a"), channels, channels, 3, 1, rng),
            b: DdrConv::new(store, &format!("{name}.b"), channels, channels, 3, 1, rng),
        }
    }

    pub fn forward<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.b.forward(p, self.a.forward(p, x)?.relu())?;
        x.add(h).map_err(Into::into)
    }

    pub fn zero_branch(&self, store: &mut ParamStore) -> Result<()> {
        self.b.zero(store)
    }
}

/// Parallel stacks of one, two and three `3³` convolutions, summed onto the input.
#[derive(Clone, Debug)]
pub struct MultiScale {
    pub branches: Vec<Vec<Conv3d>>,
}

impl MultiScale {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let branches = (1..=3)
            .map(|depth| {
                (0..depth)
                    .map(|i| Conv3d::same(store, &format!("{name}.branch{depth}.conv{i}"), channels, channels, 3, rng))
                    .collect()
            })
            .collect();
        Self { branches }
    }

    pub fn forward<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let mut acc = x;
        for branch in &self.branches {
            let mut h = x;
            for (i, c) in branch.iter().enumerate() {
                if i > 0 {
                    h = h.relu();
                }
                h = c.forward(p, h)?;
            }
            acc = acc.add(h)?;
        }
        Ok(acc.relu())
    }
}

/// Cascaded sparse-context block: conv, two skip-connected conv stages, conv, plus the input.
#[derive(Clone, Debug)]
pub struct Cscb {
    pub conv_in: Conv3d,
    pub cascade: [Conv3d; 2],
    pub conv_out: Conv3d,
}

impl Cscb {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv_in: Conv3d::same(store, &format!("{name}.conv_in"), channels, channels, 3, rng),
            cascade: [
                Conv3d::same(store, &format!("{name}.cascade0"), channels, channels, 3, rng),
                Conv3d::same(store, &format!("{name}.cascade1"), channels, channels, 3, rng),
            ],
            conv_out: Conv3d::same(store, &format!("{name}.conv_out"), channels, channels, 3, rng),
        }
    }

    pub fn forward<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let mut h = self.conv_in.forward(p, x)?.relu();
        for c in &self.cascade {
            h = h.add(c.forward(p, h)?.relu())?;
        }
        Ok(x.add(self.conv_out.forward(p, h)?)?)
    }

    pub fn zero_branch(&self, store: &mut ParamStore) -> Result<()> {
        self.conv_out.zero(store)
    }
}

/// Dilated DDR paths at rates 1, 2 and 3, summed onto the input.
#[derive(Clone, Debug)]
pub struct Ddcb {
    pub paths: [DdrConv; 3],
}

impl Ddcb {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let mut path = |d: usize| DdrConv::new(store, &format!("{name}.dil{d}"), channels, channels, 3, d, rng);
        let (a, b, c) = (path(1), path(2), path(3));
        Self { paths: [a, b, c] }
    }

    pub fn forward<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let mut acc = x;
        for path in &self.paths {
            acc = acc.add(path.forward(p, x)?.relu())?;
        }
        Ok(acc)
    }

    pub fn zero_branch(&self, store: &mut ParamStore) -> Result<()> {
        self.paths.iter().try_for_each(|p| p.zero(store))
    }
}
