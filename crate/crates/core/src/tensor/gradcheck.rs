//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, TensorError, Var};

/// Outcome of a [`check`] run.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub probes: usize,
    pub max_rel_err: f64,
    /// `(input, element, analytic, numeric)` of the worst probe.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.probes > 0 && self.max_rel_err < tol
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
///
/// Central differences of an O(1) loss carry roundoff near `ε·|f|/h ≈ 1e-10`
/// at `h = 1e-6`, so gradients below the floor are compared in absolute terms.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-5;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compares tape gradients of `f` against central differences with step `h`.
///
/// Non-scalar outputs are reduced to a scalar by a fixed random projection so
/// every output element contributes. `probes` elements are sampled uniformly
/// across all inputs.
pub fn check<E, F>(inputs: &[Tensor], probes: usize, h: f64, seed: u64, f: F) -> Result<GradCheckReport, E>
where
    E: From<TensorError>,
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, E>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut projection: Option<Tensor> = None;

    let mut eval = |vals: &[Tensor], grad: bool| -> Result<(f64, Vec<Tensor>), E> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = vals
            .iter()
            .map(|t| if grad { tape.var(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        let out = f(&tape, &vars)?;
        let loss = if out.numel() == 1 {
            out
        } else {
            let w = projection
                .get_or_insert_with(|| {
                    let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
                    Tensor::uniform(out.shape(), 1.0, &mut prng)
                })
                .clone();
            out.mul(tape.constant(w))?.sum()
        };
        let value = loss.value().item()?;
        if !grad {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(loss)?;
        Ok((value, vars.iter().map(|v| grads.wrt(v)).collect()))
    };

    let (_, analytic) = eval(inputs, true)?;
    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let mut report = GradCheckReport {
        probes: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    if total == 0 {
        return Ok(report);
    }
    for _ in 0..probes {
        let mut flat = rng.random_range(0..total);
        let mut which = 0;
        while flat >= inputs[which].numel() {
            flat -= inputs[which].numel();
            which += 1;
        }
        let perturbed = |delta: f64| -> Vec<Tensor> {
            let mut vals = inputs.to_vec();
            let mut d = vals[which].to_vec();
            d[flat] += delta;
            vals[which] = Tensor::new(inputs[which].shape(), d).expect("same shape");
            vals
        };
        let (fp, _) = eval(&perturbed(h), false)?;
        let (fm, _) = eval(&perturbed(-h), false)?;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[which].data()[flat];
        let err = relative_error(a, numeric);
        report.probes += 1;
        if err >= report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some((which, flat, a, numeric));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Conv3dSpec;
    use std::sync::Arc;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape.to_vec(), 1.0, &mut rng)
    }

    fn assert_passes(r: GradCheckReport) {
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn elementwise_ops() {
        for seed in 0..10 {
            let a = rand_tensor(&[3, 4], seed);
            let b = rand_tensor(&[4], seed + 100);
            let pos = a.map(|v| v.abs() + 0.5);
            let r = check::<TensorError, _>(&[a.clone(), b.clone(), pos], 10, 1e-5, seed, |_, v| {
                let x = v[0].mul(v[1])?.add(v[0].exp())?;
                let y = v[2].ln().add(v[2].reciprocal())?.add(v[2].sqrt())?;
                let z = v[0].silu().add(v[0].gelu())?.add(v[0].softplus())?.add(v[0].tanh())?;
                x.add(y)?.add(z)?.sub(v[0].sigmoid().square())
            })
            .unwrap();
            assert_passes(r);
        }
    }

    #[test]
    fn matmul_linear_and_layout_ops() {
        for seed in 0..10 {
            let a = rand_tensor(&[3, 5], seed);
            let w = rand_tensor(&[4, 5], seed + 1);
            let b = rand_tensor(&[4], seed + 2);
            let m = rand_tensor(&[5, 2], seed + 3);
            let r = check::<TensorError, _>(&[a, w, b, m], 12, 1e-5, seed, |_, v| {
                let l = v[0].linear(v[1], Some(v[2]))?; // 3x4
                let p = v[0].matmul(v[3])?; // 3x2
                let cat = Var::concat(&[l, p], 1)?; // 3x6
                let t = cat.transpose()?.narrow(0, 1, 4)?; // 4x3
                let g = t.index_select(1, Arc::new(vec![2, 0, 2]))?;
                g.reshape(vec![12])?.softmax()?.log_softmax()?.sum().add(t.mean())
            })
            .unwrap();
            assert_passes(r);
        }
    }

    #[test]
    fn normalization_ops() {
        for seed in 0..10 {
            let x = rand_tensor(&[2, 3, 2, 2, 1], seed);
            let g = rand_tensor(&[3], seed + 1);
            let b = rand_tensor(&[3], seed + 2);
            let r = check::<TensorError, _>(&[x, g, b], 12, 1e-5, seed, |_, v| {
                let (bn, _) = v[0].batch_norm(v[1], v[2], 1e-5)?;
                let ca = v[0].channel_affine(v[1], v[2])?.add_per_channel(v[2])?;
                let ln = v[0].permute(&[0, 2, 3, 4, 1])?.layer_norm(Some(v[1]), Some(v[2]), 1e-5)?;
                bn.add(ca)?.sum().add(ln.square().sum())
            })
            .unwrap();
            assert_passes(r);
        }
    }

    #[test]
    fn convolutions() {
        for seed in 0..10 {
            let x = rand_tensor(&[2, 2, 4, 3, 3], seed);
            let w = rand_tensor(&[3, 2, 3, 1, 2], seed + 1);
            let b = rand_tensor(&[3], seed + 2);
            let wt = rand_tensor(&[2, 3, 2, 2, 1], seed + 3);
            let spec = Conv3dSpec {
                stride: [1, 2, 1],
                padding: [1, 0, 1],
                dilation: [2, 1, 1],
            };
            let r = check::<TensorError, _>(&[x, w, b, wt], 12, 1e-5, seed, |_, v| {
                let y = v[0].conv3d(v[1], Some(v[2]), spec)?;
                v[0].conv_transpose3d(v[3], Some(v[2]), Conv3dSpec::strided([2, 2, 1]))?
                    .sum()
                    .add(y.square().sum())
            })
            .unwrap();
            assert_passes(r);
        }
    }

    #[test]
    fn pick_and_relu() {
        let x = rand_tensor(&[4, 3], 7);
        let idx = Arc::new(vec![0, 2, 1, 1]);
        let r = check::<TensorError, _>(&[x], 12, 1e-5, 1, |_, v| {
            Ok(v[0].relu().add(v[0].scale(0.3).add_scalar(1.0))?.log_softmax()?.pick_last(idx.clone())?.neg().mean())
        })
        .unwrap();
        assert_passes(r);
    }
}
