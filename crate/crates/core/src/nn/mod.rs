//! Parameters, layers and the network blocks built from them.
//!
//! A network is split in two: a plain struct describing its architecture
//! (layer sizes and the names of its parameters) and a [`ParamStore`] holding
//! the values. Forward passes bind the store onto a [`Tape`] through a
//! [`Binder`], which hands out one tape variable per parameter.

mod blocks;
mod checkpoint;
mod layers;
mod loss;
mod mamba;
mod ssen;

use std::cell::RefCell;
use std::collections::HashMap;

pub use blocks::{Cscb, Ddcb, DdrConv, DdrResidual, MultiScale};
pub use checkpoint::{load_checkpoint, manifest_path, read_manifest, save_checkpoint, ManifestEntry};
pub use layers::{BatchNorm3d, Conv3d, ConvTranspose3d, LayerNorm, Linear, Mlp};
pub use loss::{class_rows, class_weights, cross_entropy};
pub use mamba::{CylinderMambaBlock, MambaConfig, MambaDirection, MambaLayer};
pub use ssen::{Ssen, SsenConfig};

use rand::Rng;

use crate::tensor::{Gradients, Tape, Tensor, Var};
use crate::{invalid, Result};

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Buffers such as batch-norm running statistics are not trainable.
    pub trainable: bool,
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> String {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name: name.clone(),
            value,
            trainable,
        });
        name
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.params[i].value)
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self
            .position(name)
            .ok_or_else(|| invalid("parameter", format!("no parameter named {name}")))?;
        if value.shape() != self.params[i].value.shape() {
            return Err(invalid(
                "parameter",
                format!("{name} has shape {:?}, got {:?}", self.params[i].value.shape(), value.shape()),
            ));
        }
        self.params[i].value = value;
        Ok(())
    }

    pub fn set_at(&mut self, i: usize, value: Tensor) {
        debug_assert_eq!(value.shape(), self.params[i].value.shape());
        self.params[i].value = value;
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    /// Sum of the element counts of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable && p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }
}

/// Uniform `±1/sqrt(fan_in)` initialization.
pub(crate) fn init_uniform(shape: impl Into<Vec<usize>>, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(shape, 1.0 / (fan_in.max(1) as f64).sqrt(), rng)
}

/// How a forward pass should behave.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, stochastic sampling, running-stat updates.
    Train { epoch: usize },
    Eval,
}

/// Binds a [`ParamStore`] onto a tape for one forward/backward pass.
pub struct Binder<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    mode: Mode,
    frozen: bool,
    vars: RefCell<Vec<Option<Var<'t>>>>,
    buffer_updates: RefCell<Vec<(usize, Tensor)>>,
}

impl<'t, 's> Binder<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore, mode: Mode) -> Self {
        Self {
            tape,
            store,
            mode,
            frozen: false,
            vars: RefCell::new(vec![None; store.len()]),
            buffer_updates: RefCell::new(Vec::new()),
        }
    }

    /// Parameters enter the tape as constants: gradients still flow through
    /// the network to its inputs but not into its weights.
    pub fn frozen(tape: &'t Tape, store: &'s ParamStore, mode: Mode) -> Self {
        Self {
            frozen: true,
            ..Self::new(tape, store, mode)
        }
    }

    /// Uses caller-made variables, one per store entry in order, instead of
    /// creating them. Lets a gradient check perturb weights directly.
    pub fn with_vars(tape: &'t Tape, store: &'s ParamStore, mode: Mode, vars: Vec<Var<'t>>) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(invalid("binder", format!("{} variables for {} parameters", vars.len(), store.len())));
        }
        let b = Self::new(tape, store, mode);
        *b.vars.borrow_mut() = vars.into_iter().map(Some).collect();
        Ok(b)
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn training(&self) -> bool {
        matches!(self.mode, Mode::Train { .. })
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// Tape variable for a named parameter, created on first use.
    pub fn param(&self, name: &str) -> Result<Var<'t>> {
        let i = self
            .store
            .position(name)
            .ok_or_else(|| invalid("parameter", format!("no parameter named {name}")))?;
        let mut vars = self.vars.borrow_mut();
        if let Some(v) = vars[i] {
            return Ok(v);
        }
        let p = &self.store.params[i];
        let v = if p.trainable && !self.frozen {
            self.tape.var(p.value.clone())
        } else {
            self.tape.constant(p.value.clone())
        };
        vars[i] = Some(v);
        Ok(v)
    }

    pub fn value(&self, name: &str) -> Result<&'s Tensor> {
        self.store
            .get(name)
            .ok_or_else(|| invalid("parameter", format!("no parameter named {name}")))
    }

    /// Queues a new value for a buffer, applied by [`Binder::finish`].
    pub fn update_buffer(&self, name: &str, value: Tensor) -> Result<()> {
        let i = self
            .store
            .position(name)
            .ok_or_else(|| invalid("parameter", format!("no buffer named {name}")))?;
        self.buffer_updates.borrow_mut().push((i, value));
        Ok(())
    }

    /// Gradients for every bound trainable parameter, aligned with the store.
    pub fn grads(&self, g: &Gradients) -> Vec<Option<Tensor>> {
        self.vars
            .borrow()
            .iter()
            .map(|v| v.and_then(|v| if v.requires_grad() { g.get(&v).cloned() } else { None }))
            .collect()
    }

    /// Buffer updates recorded during the pass.
    pub fn finish(self) -> Vec<(usize, Tensor)> {
        self.buffer_updates.into_inner()
    }
}

impl ParamStore {
    pub fn apply_buffer_updates(&mut self, updates: Vec<(usize, Tensor)>) {
        for (i, t) in updates {
            self.set_at(i, t);
        }
    }
}

/// Channels-first volume `(N, C, L, W, H)` to tokens `(N, L·W·H, C)`.
pub fn volume_to_tokens(x: Var<'_>) -> Result<Var<'_>> {
    let s = x.shape();
    let [n, c, l, w, h] = s[..] else {
        return Err(invalid("tokens", format!("expected (N, C, L, W, H), got {s:?}")));
    };
    Ok(x.reshape([n, c, l * w * h])?.permute(&[0, 2, 1])?)
}

/// Inverse of [`volume_to_tokens`].
pub fn tokens_to_volume(x: Var<'_>, dims: [usize; 3]) -> Result<Var<'_>> {
    let s = x.shape();
    let [n, len, c] = s[..] else {
        return Err(invalid("tokens", format!("expected (N, S, C), got {s:?}")));
    };
    if len != dims.iter().product::<usize>() {
        return Err(invalid("tokens", format!("{len} tokens for dims {dims:?}")));
    }
    Ok(x.permute(&[0, 2, 1])?.reshape([n, c, dims[0], dims[1], dims[2]])?)
}
