//! Diagonal state-space models: zero-order-hold discretization and the
//! sequential selective scan.
//!
//! Continuous system `h' = A h + B x`, `y = C h` with diagonal `A`. Holding the
//! input constant over a step of length `Δ` gives
//! `ā = exp(Δa)` and `b̄ = (exp(Δa) - 1) / a · b`, then
//! `h_t = ā ⊙ h_{t-1} + b̄ x_t`, `y_t = c · h_t`.

use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::{invalid, Error, Result};

/// Below this `|Δa|` the input gain uses its Taylor series
/// `Δ(1 + u/2 + u²/6 + u³/24)`, whose truncation error is under `u⁴/120`.
pub const SERIES_THRESHOLD: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams {
    /// Diagonal of `A`.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSsm {
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
    pub c_bar: Vec<f64>,
}

impl DiscreteSsm {
    pub fn state_dim(&self) -> usize {
        self.a_bar.len()
    }
}

/// `(ā, g)` with `b̄ = g · b`.
#[inline]
pub fn zoh(a: f64, delta: f64) -> (f64, f64) {
    let u = delta * a;
    let g = if u.abs() < SERIES_THRESHOLD {
        delta * (1.0 + u * (0.5 + u * (1.0 / 6.0 + u / 24.0)))
    } else {
        u.exp_m1() / a
    };
    (u.exp(), g)
}

/// `d/da` of the input gain `g(Δ, a) = (exp(Δa) - 1) / a`, which is `Δ² ψ(Δa)`.
#[inline]
fn dgain_da(a: f64, delta: f64) -> f64 {
    let u = delta * a;
    // ψ(u) = (e^u (u - 1) + 1) / u² cancels badly near 0.
    let psi = if u.abs() < 1e-3 {
        0.5 + u * (1.0 / 3.0 + u * (0.125 + u / 30.0))
    } else {
        (u.exp() * (u - 1.0) + 1.0) / (u * u)
    };
    delta * delta * psi
}

pub fn discretize(p: &SsmParams) -> Result<DiscreteSsm> {
    let n = p.a.len();
    if p.b.len() != n || p.c.len() != n {
        return Err(invalid(
            "discretize",
            format!("a, b, c lengths {}, {}, {} differ", n, p.b.len(), p.c.len()),
        ));
    }
    if !(p.delta > 0.0 && p.delta.is_finite()) {
        return Err(invalid("discretize", format!("delta must be positive, got {}", p.delta)));
    }
    let mut a_bar = Vec::with_capacity(n);
    let mut b_bar = Vec::with_capacity(n);
    for i in 0..n {
        if !p.a[i].is_finite() {
            return Err(invalid("discretize", format!("a[{i}] = {} is not finite", p.a[i])));
        }
        let (ab, g) = zoh(p.a[i], p.delta);
        let bb = g * p.b[i];
        if !ab.is_finite() || !bb.is_finite() {
            return Err(Error::Numeric(format!(
                "discretization of state {i} overflowed (delta * a = {})",
                p.delta * p.a[i]
            )));
        }
        a_bar.push(ab);
        b_bar.push(bb);
    }
    Ok(DiscreteSsm {
        a_bar,
        b_bar,
        c_bar: p.c.clone(),
    })
}

/// Runs the recurrence over a scalar input sequence.
pub fn selective_scan(seq: &[f64], d: &DiscreteSsm, h0: &[f64]) -> Result<Vec<f64>> {
    let n = d.state_dim();
    if seq.is_empty() {
        return Err(invalid("selective_scan", "empty sequence"));
    }
    if h0.len() != n || d.b_bar.len() != n || d.c_bar.len() != n {
        return Err(invalid("selective_scan", format!("state size {n} but h0 has {}", h0.len())));
    }
    let mut h = h0.to_vec();
    Ok(seq
        .iter()
        .map(|&x| {
            let mut y = 0.0;
            for i in 0..n {
                h[i] = d.a_bar[i] * h[i] + d.b_bar[i] * x;
                y += d.c_bar[i] * h[i];
            }
            y
        })
        .collect())
}

/// Selective variant: a separate step size per position, discretized on the fly.
pub fn selective_scan_varying(seq: &[f64], p: &SsmParams, deltas: &[f64], h0: &[f64]) -> Result<Vec<f64>> {
    if deltas.len() != seq.len() {
        return Err(invalid(
            "selective_scan",
            format!("{} step sizes for {} inputs", deltas.len(), seq.len()),
        ));
    }
    let mut h = h0.to_vec();
    let mut out = Vec::with_capacity(seq.len());
    for (&x, &delta) in seq.iter().zip(deltas) {
        let d = discretize(&SsmParams { delta, ..p.clone() })?;
        let y = selective_scan(&[x], &d, &h)?[0];
        for i in 0..h.len() {
            h[i] = d.a_bar[i] * h[i] + d.b_bar[i] * x;
        }
        out.push(y);
    }
    Ok(out)
}

/// Batched selective scan on the tape.
///
/// Shapes: `x`, `delta`: `(Bt, T, E)`; `a`: `(E, N)`; `b`, `c`: `(Bt, T, N)`
/// or `(N)` when shared by every step; `h0`: `(Bt, E, N)`. Each of the `E`
/// channels runs its own `N`-state recurrence with gains from `a[e]`,
/// `delta[.., e]` and the step's `b`. Returns `y` of shape `(Bt, T, E)`.
pub fn scan<'t>(
    x: Var<'t>,
    delta: Var<'t>,
    a: Var<'t>,
    b: Var<'t>,
    c: Var<'t>,
    h0: Option<Var<'t>>,
) -> Result<Var<'t>> {
    let xs = x.shape();
    let [bt, t, e] = xs[..] else {
        return Err(invalid("scan", format!("x must be (batch, steps, channels), got {xs:?}")));
    };
    if delta.shape() != xs {
        return Err(TensorError::ShapeMismatch {
            op: "scan",
            lhs: xs,
            rhs: delta.shape(),
        }
        .into());
    }
    let [ae, n] = a.shape()[..] else {
        return Err(invalid("scan", format!("a must be (channels, state), got {:?}", a.shape())));
    };
    if ae != e || t == 0 || n == 0 {
        return Err(invalid("scan", format!("a is {:?} for x {xs:?}", a.shape())));
    }
    let per_step = |v: &Var<'t>, name: &str| -> Result<bool> {
        let s = v.shape();
        if s == [bt, t, n] {
            Ok(true)
        } else if s == [n] {
            Ok(false)
        } else {
            Err(invalid("scan", format!("{name} must be ({bt}, {t}, {n}) or ({n}), got {s:?}")))
        }
    };
    let b_step = per_step(&b, "b")?;
    let c_step = per_step(&c, "c")?;
    if let Some(h) = &h0 {
        if h.shape() != [bt, e, n] {
            return Err(invalid("scan", format!("h0 must be ({bt}, {e}, {n}), got {:?}", h.shape())));
        }
    }

    let (xv, dv, av, bv, cv) = (x.value(), delta.value(), a.value(), b.value(), c.value());
    let h0v = h0.map(|h| h.value());
    if dv.data().iter().any(|&d| !(d > 0.0)) {
        return Err(invalid("scan", "step sizes must be positive"));
    }
    // states[((bi * (t + 1) + s) * e + ei) * n + k]; slot 0 holds h0.
    let mut states = vec![0.0; bt * (t + 1) * e * n];
    let mut y = vec![0.0; bt * t * e];
    for bi in 0..bt {
        if let Some(h) = &h0v {
            let src = &h.data()[bi * e * n..(bi + 1) * e * n];
            states[bi * (t + 1) * e * n..][..e * n].copy_from_slice(src);
        }
        for s in 0..t {
            let row = (bi * t + s) * n;
            let bs = if b_step { &bv.data()[row..row + n] } else { bv.data() };
            let cs = if c_step { &cv.data()[row..row + n] } else { cv.data() };
            let (prev, cur) = states[(bi * (t + 1) + s) * e * n..].split_at_mut(e * n);
            for ei in 0..e {
                let xi = xv.data()[(bi * t + s) * e + ei];
                let di = dv.data()[(bi * t + s) * e + ei];
                let arow = &av.data()[ei * n..(ei + 1) * n];
                let mut acc = 0.0;
                for k in 0..n {
                    let (ab, g) = zoh(arow[k], di);
                    let h = ab * prev[ei * n + k] + g * bs[k] * xi;
                    cur[ei * n + k] = h;
                    acc += cs[k] * h;
                }
                y[(bi * t + s) * e + ei] = acc;
            }
        }
    }

    let mut parents = vec![x, delta, a, b, c];
    parents.extend(h0);
    let has_h0 = h0v.is_some();
    let tape: &'t Tape = x.tape();
    Ok(tape.record(
        Tensor::new(xs.clone(), y)?,
        &parents,
        Box::new(move |gy, _need| {
            let gy = gy.data();
            let mut dx = vec![0.0; bt * t * e];
            let mut dd = vec![0.0; bt * t * e];
            let mut da = vec![0.0; e * n];
            let mut db = vec![0.0; bv.numel()];
            let mut dc = vec![0.0; cv.numel()];
            let mut dh0 = vec![0.0; bt * e * n];
            // Adjoint of the state carried backwards through time.
            let mut dh = vec![0.0; e * n];
            for bi in 0..bt {
                dh.fill(0.0);
                for s in (0..t).rev() {
                    let row = (bi * t + s) * n;
                    let bs = if b_step { &bv.data()[row..row + n] } else { bv.data() };
                    let cs = if c_step { &cv.data()[row..row + n] } else { cv.data() };
                    let base = (bi * (t + 1) + s) * e * n;
                    let prev = &states[base..base + e * n];
                    let cur = &states[base + e * n..base + 2 * e * n];
                    let db_off = if b_step { row } else { 0 };
                    let dc_off = if c_step { row } else { 0 };
                    for ei in 0..e {
                        let idx = (bi * t + s) * e + ei;
                        let (xi, di, gyi) = (xv.data()[idx], dv.data()[idx], gy[idx]);
                        let arow = &av.data()[ei * n..(ei + 1) * n];
                        let (mut gx, mut gd) = (0.0, 0.0);
                        for k in 0..n {
                            let j = ei * n + k;
                            dc[dc_off + k] += gyi * cur[j];
                            let g_h = dh[j] + cs[k] * gyi;
                            let (ab, g) = zoh(arow[k], di);
                            let bk = bs[k];
                            // h = ab * prev + g * bk * xi
                            let g_ab = g_h * prev[j];
                            let g_g = g_h * bk * xi;
                            gx += g_h * g * bk;
                            db[db_off + k] += g_h * g * xi;
                            // dab/dΔ = a·ab, dg/dΔ = ab; dab/da = Δ·ab, dg/da = Δ²ψ(Δa)
                            gd += g_ab * arow[k] * ab + g_g * ab;
                            da[j] += g_ab * di * ab + g_g * dgain_da(arow[k], di);
                            dh[j] = g_h * ab;
                        }
                        dx[idx] = gx;
                        dd[idx] = gd;
                    }
                }
                dh0[bi * e * n..(bi + 1) * e * n].copy_from_slice(&dh);
            }
            let mut out = vec![
                Some(Tensor::new(vec![bt, t, e], dx)?),
                Some(Tensor::new(vec![bt, t, e], dd)?),
                Some(Tensor::new(vec![e, n], da)?),
                Some(Tensor::new(bv.shape(), db)?),
                Some(Tensor::new(cv.shape(), dc)?),
            ];
            if has_h0 {
                out.push(Some(Tensor::new(vec![bt, e, n], dh0)?));
            }
            Ok(out)
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decaying_scalar_system() {
        let d = discretize(&SsmParams {
            a: vec![-1.0],
            b: vec![1.0],
            c: vec![3.0],
            delta: 0.1,
        })
        .unwrap();
        assert!((d.a_bar[0] - 0.904_837_418_035_959_6).abs() < 1e-12);
        assert!((d.b_bar[0] - 0.095_162_581_964_040_4).abs() < 1e-12);
        assert_eq!(d.c_bar, vec![3.0]);
    }

    #[test]
    fn zero_rate_uses_series_limit() {
        let d = discretize(&SsmParams {
            a: vec![0.0, 1e-12],
            b: vec![2.0, 2.0],
            c: vec![1.0, 1.0],
            delta: 0.1,
        })
        .unwrap();
        assert_eq!(d.a_bar[0], 1.0);
        assert!((d.b_bar[0] - 0.2).abs() < 1e-15);
        assert!((d.b_bar[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_delta_and_overflow() {
        let p = SsmParams {
            a: vec![1.0],
            b: vec![1.0],
            c: vec![1.0],
            delta: 0.0,
        };
        assert!(discretize(&p).is_err());
        let err = discretize(&SsmParams { a: vec![-1.0, 1e4], delta: 1.0, b: vec![1.0; 2], c: vec![1.0; 2] })
            .unwrap_err()
            .to_string();
        assert!(err.contains("state 1"), "{err}");
    }

    #[test]
    fn gain_derivative_series_joins_closed_form() {
        for u in [-2e-3, -1.0001e-3, 1.0001e-3, 2e-3] {
            let inside = 0.5 + u * (1.0 / 3.0 + u * (0.125 + u / 30.0));
            let closed = (f64::exp(u) * (u - 1.0) + 1.0) / (u * u);
            assert!((inside - closed).abs() < 1e-9, "{u}");
        }
        assert!((dgain_da(0.0, 0.5) - 0.125).abs() < 1e-15);
    }
}
