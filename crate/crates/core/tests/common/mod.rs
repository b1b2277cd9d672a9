#![allow(dead_code)]

use cymba_core::nn::{Binder, Mode, ParamStore};
use cymba_core::tensor::gradcheck::{self, GradCheckReport};
use cymba_core::{Error, Tape, Tensor, Var};

/// Finite-difference check over `inputs` and every trainable tensor in `store`.
pub fn check_with_params<F>(store: &ParamStore, mode: Mode, inputs: &[Tensor], probes: usize, seed: u64, f: F) -> GradCheckReport
where
    F: for<'t> Fn(&Binder<'t, '_>, &[Var<'t>]) -> Result<Var<'t>, Error>,
{
    let trainable: Vec<usize> = (0..store.len()).filter(|&i| store.params()[i].trainable).collect();
    let mut all = inputs.to_vec();
    all.extend(trainable.iter().map(|&i| store.params()[i].value.clone()));
    let n_in = inputs.len();
    gradcheck::check::<Error, _>(&all, probes, 1e-6, seed, |tape: &Tape, vars| {
        let mut bound = Vec::with_capacity(store.len());
        let mut k = n_in;
        for (i, p) in store.params().iter().enumerate() {
            if trainable.contains(&i) {
                bound.push(vars[k]);
                k += 1;
            } else {
                bound.push(tape.constant(p.value.clone()));
            }
        }
        let b = Binder::with_vars(tape, store, mode, bound)?;
        f(&b, &vars[..n_in])
    })
    .expect("gradient check ran")
}

pub fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    let d = a.max_abs_diff(b).unwrap();
    assert!(d < tol, "max abs diff {d} >= {tol}");
}
