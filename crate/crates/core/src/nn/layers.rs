use rand::Rng;

use super::{init_uniform, Binder, ParamStore};
use crate::tensor::{Conv3dSpec, Tensor, Var};
use crate::Result;

#[derive(Clone, Debug)]
pub struct Linear {
    w: String,
    b: Option<String>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.insert(
            format!("{name}.weight"),
            init_uniform([out_features, in_features], in_features, rng),
            true,
        );
        let b = bias.then(|| {
            store.insert(
                format!("{name}.bias"),
                init_uniform([out_features], in_features, rng),
                true,
            )
        });
        Self {
            w,
            b,
            in_features,
            out_features,
        }
    }

    pub fn weight_name(&self) -> &str {
        &self.w
    }

    pub fn bias_name(&self) -> Option<&str> {
        self.b.as_deref()
    }

    pub fn forward<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let b = self.b.as_deref().map(|b| p.param(b)).transpose()?;
        Ok(x.linear(p.param(&self.w)?, b)?)
    }
}

#[derive(Clone, Debug)]
pub struct Conv3d {
    w: String,
    b: Option<String>,
    pub spec: Conv3dSpec,
    pub kernel: [usize; 3],
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        spec: Conv3dSpec,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * kernel.iter().product::<usize>();
        let w = store.insert(
            format!("{name}.weight"),
            init_uniform([cout, cin, kernel[0], kernel[1], kernel[2]], fan_in, rng),
            true,
        );
        let b = bias.then(|| store.insert(format!("{name}.bias"), init_uniform([cout], fan_in, rng), true));
        Self { w, b, spec, kernel }
    }

    /// Cubic kernel with "same" padding.
    pub fn same(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, rng: &mut impl Rng) -> Self {
        Self::new(store, name, cin, cout, [k; 3], Conv3dSpec::same([k; 3], 1), true, rng)
    }

    pub fn weight_name(&self) -> &str {
        &self.w
    }

    pub fn bias_name(&self) -> Option<&str> {
        self.b.as_deref()
    }

    /// Sets every weight and bias of this layer to zero.
    pub fn zero(&self, store: &mut ParamStore) -> Result<()> {
        for n in std::iter::once(&self.w).chain(&self.b) {
            let shape = store.get(n).map(|t| t.shape().to_vec()).unwrap_or_default();
            store.set(n, Tensor::zeros(shape))?;
        }
        Ok(())
    }

    pub fn forward<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let b = self.b.as_deref().map(|b| p.param(b)).transpose()?;
        Ok(x.conv3d(p.param(&self.w)?, b, self.spec)?)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose3d {
    w: String,
    b: Option<String>,
    pub spec: Conv3dSpec,
}

impl ConvTranspose3d {
    /// Kernel equal to stride and no padding, so extents scale exactly by the stride.
    pub fn upsample(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        stride: [usize; 3],
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * stride.iter().product::<usize>();
        let w = store.insert(
            format!("{name}.weight"),
            init_uniform([cin, cout, stride[0], stride[1], stride[2]], fan_in, rng),
            true,
        );
        let b = Some(store.insert(format!("{name}.bias"), init_uniform([cout], fan_in, rng), true));
        Self {
            w,
            b,
            spec: Conv3dSpec::strided(stride),
        }
    }

    pub fn forward<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let b = self.b.as_deref().map(|b| p.param(b)).transpose()?;
        Ok(x.conv_transpose3d(p.param(&self.w)?, b, self.spec)?)
    }
}

/// Batch normalization over `(N, C, ...)` with running statistics for evaluation.
#[derive(Clone, Debug)]
pub struct BatchNorm3d {
    gamma: String,
    beta: String,
    mean: String,
    var: String,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm3d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.insert(format!("{name}.gamma"), Tensor::ones([channels]), true),
            beta: store.insert(format!("{name}.beta"), Tensor::zeros([channels]), true),
            mean: store.insert(format!("{name}.running_mean"), Tensor::zeros([channels]), false),
            var: store.insert(format!("{name}.running_var"), Tensor::ones([channels]), false),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let (gamma, beta) = (p.param(&self.gamma)?, p.param(&self.beta)?);
        if p.training() {
            let (y, stats) = x.batch_norm(gamma, beta, self.eps)?;
            let m = self.momentum;
            let unbias = stats.count as f64 / (stats.count.max(2) - 1) as f64;
            let rm = p.value(&self.mean)?;
            let rv = p.value(&self.var)?;
            let new_mean = Tensor::from_fn(rm.shape(), |c| (1.0 - m) * rm.data()[c] + m * stats.mean[c]);
            let new_var = Tensor::from_fn(rv.shape(), |c| (1.0 - m) * rv.data()[c] + m * stats.var[c] * unbias);
            p.update_buffer(&self.mean, new_mean)?;
            p.update_buffer(&self.var, new_var)?;
            Ok(y)
        } else {
            let tape = p.tape();
            let rm = p.value(&self.mean)?;
            let inv_std = p.value(&self.var)?.map(|v| 1.0 / (v + self.eps).sqrt());
            let scale = gamma.mul(tape.constant(inv_std))?;
            let shift = beta.sub(scale.mul(tape.constant(rm.clone()))?)?;
            Ok(x.channel_affine(scale, shift)?)
        }
    }
}

/// Layer normalization over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: String,
    beta: String,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.insert(format!("{name}.gamma"), Tensor::ones([dim]), true),
            beta: store.insert(format!("{name}.beta"), Tensor::zeros([dim]), true),
            eps: 1e-5,
        }
    }

    pub fn forward<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.layer_norm(Some(p.param(&self.gamma)?), Some(p.param(&self.beta)?), self.eps)?)
    }
}

/// Two linear maps with a GELU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, rng),
        }
    }

    pub fn forward<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        self.fc2.forward(p, self.fc1.forward(p, x)?.gelu())
    }
}
