//! Normalization and per-channel ops.

use super::{invalid, mismatch, Result, Tensor, Var};

/// Per-channel batch statistics from a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance.
    pub var: Vec<f64>,
    /// Number of values each statistic was taken over.
    pub count: usize,
}

fn channel_layout(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(invalid(op, format!("expected (N, C, ...), got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn param_vec(op: &'static str, v: Option<Var<'_>>, n: usize, fill: f64) -> Result<Vec<f64>> {
    match v {
        Some(v) => {
            let t = v.value();
            if t.shape() != [n] {
                return Err(mismatch(op, t.shape(), &[n]));
            }
            Ok(t.to_vec())
        }
        None => Ok(vec![fill; n]),
    }
}

impl<'t> Var<'t> {
    /// Layer normalization over the last axis with optional affine parameters.
    pub fn layer_norm(self, gamma: Option<Var<'t>>, beta: Option<Var<'t>>, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let n = *x.shape().last().ok_or_else(|| invalid("layer_norm", "scalar input"))?;
        let gv = param_vec("layer_norm gamma", gamma, n, 1.0)?;
        let bv = param_vec("layer_norm beta", beta, n, 0.0)?;
        let rows = x.numel() / n;
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x.data()[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in xhat[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (v - mu) * is;
            }
        }
        let y: Vec<f64> = xhat.iter().enumerate().map(|(i, h)| h * gv[i % n] + bv[i % n]).collect();
        let shape = x.shape().to_vec();
        let mut parents = vec![self];
        parents.extend(gamma);
        parents.extend(beta);
        let (has_g, has_b) = (gamma.is_some(), beta.is_some());
        Ok(self.tape().record(
            Tensor::new(shape.clone(), y)?,
            &parents,
            Box::new(move |g, need| {
                let gd = g.data();
                let mut out = Vec::with_capacity(need.len());
                if need[0] {
                    let mut dx = vec![0.0; gd.len()];
                    for r in 0..rows {
                        let sl = r * n..(r + 1) * n;
                        let dh: Vec<f64> = gd[sl.clone()].iter().enumerate().map(|(i, g)| g * gv[i]).collect();
                        let xh = &xhat[sl.clone()];
                        let m1 = dh.iter().sum::<f64>() / n as f64;
                        let m2 = dh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for ((o, d), h) in dx[sl].iter_mut().zip(&dh).zip(xh) {
                            *o = inv_std[r] * (d - m1 - h * m2);
                        }
                    }
                    out.push(Some(Tensor::new(shape.clone(), dx)?));
                } else {
                    out.push(None);
                }
                if has_g {
                    let mut dg = vec![0.0; n];
                    for (i, (g, h)) in gd.iter().zip(&xhat).enumerate() {
                        dg[i % n] += g * h;
                    }
                    out.push(Some(Tensor::new(vec![n], dg)?));
                }
                if has_b {
                    let mut db = vec![0.0; n];
                    for (i, g) in gd.iter().enumerate() {
                        db[i % n] += g;
                    }
                    out.push(Some(Tensor::new(vec![n], db)?));
                }
                Ok(out)
            }),
        ))
    }

    /// Training-mode batch norm over axis 1 of `(N, C, ...)`, using batch statistics.
    pub fn batch_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<(Var<'t>, BatchStats)> {
        let x = self.value();
        let (n, c, s) = channel_layout("batch_norm", x.shape())?;
        let gv = param_vec("batch_norm gamma", Some(gamma), c, 1.0)?;
        let bv = param_vec("batch_norm beta", Some(beta), c, 0.0)?;
        let count = n * s;
        let xd = x.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                mean[ch] += xd[(b * c + ch) * s..(b * c + ch + 1) * s].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for b in 0..n {
            for ch in 0..c {
                var[ch] += xd[(b * c + ch) * s..(b * c + ch + 1) * s]
                    .iter()
                    .map(|v| (v - mean[ch]) * (v - mean[ch]))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        let mut y = vec![0.0; xd.len()];
        for (i, &v) in xd.iter().enumerate() {
            let ch = (i / s) % c;
            xhat[i] = (v - mean[ch]) * inv_std[ch];
            y[i] = xhat[i] * gv[ch] + bv[ch];
        }
        let shape = x.shape().to_vec();
        let stats = BatchStats {
            mean: mean.clone(),
            var: var.clone(),
            count,
        };
        let out = self.tape().record(
            Tensor::new(shape.clone(), y)?,
            &[self, gamma, beta],
            Box::new(move |g, need| {
                let gd = g.data();
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for (i, &gi) in gd.iter().enumerate() {
                    let ch = (i / s) % c;
                    dg[ch] += gi * xhat[i];
                    db[ch] += gi;
                }
                let dx = if need[0] {
                    let mut dx = vec![0.0; gd.len()];
                    for (i, &gi) in gd.iter().enumerate() {
                        let ch = (i / s) % c;
                        let m1 = db[ch] / count as f64;
                        let m2 = dg[ch] / count as f64;
                        dx[i] = gv[ch] * inv_std[ch] * (gi - m1 - xhat[i] * m2);
                    }
                    Some(Tensor::new(shape.clone(), dx)?)
                } else {
                    None
                };
                Ok(vec![dx, Some(Tensor::new(vec![c], dg)?), Some(Tensor::new(vec![c], db)?)])
            }),
        );
        Ok((out, stats))
    }

    /// `y[n, c, ..] = x[n, c, ..] * scale[c] + shift[c]`.
    pub fn channel_affine(self, scale: Var<'t>, shift: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let (_, c, s) = channel_layout("channel_affine", x.shape())?;
        let sc = param_vec("channel_affine scale", Some(scale), c, 1.0)?;
        let sh = param_vec("channel_affine shift", Some(shift), c, 0.0)?;
        let y: Vec<f64> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let ch = (i / s) % c;
                v * sc[ch] + sh[ch]
            })
            .collect();
        let xc = x.clone();
        Ok(self.tape().record(
            Tensor::new(x.shape(), y)?,
            &[self, scale, shift],
            Box::new(move |g, _| {
                let mut dx = vec![0.0; g.numel()];
                let mut ds = vec![0.0; c];
                let mut dt = vec![0.0; c];
                for (i, (&gi, &xi)) in g.data().iter().zip(xc.data()).enumerate() {
                    let ch = (i / s) % c;
                    dx[i] = gi * sc[ch];
                    ds[ch] += gi * xi;
                    dt[ch] += gi;
                }
                Ok(vec![
                    Some(Tensor::new(xc.shape(), dx)?),
                    Some(Tensor::new(vec![c], ds)?),
                    Some(Tensor::new(vec![c], dt)?),
                ])
            }),
        ))
    }

    /// Adds `b` of shape `(C)` or `(N, C)` to every spatial position of `(N, C, ...)`.
    pub fn add_per_channel(self, b: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let (n, c, s) = channel_layout("add_per_channel", x.shape())?;
        let bt = b.value();
        let per_sample = match bt.shape() {
            [cc] if *cc == c => false,
            [nn, cc] if *nn == n && *cc == c => true,
            other => return Err(mismatch("add_per_channel", x.shape(), other)),
        };
        let bshape = bt.shape().to_vec();
        let bidx = move |i: usize| {
            let ch = (i / s) % c;
            if per_sample {
                (i / (s * c)) * c + ch
            } else {
                ch
            }
        };
        let y: Vec<f64> = x.data().iter().enumerate().map(|(i, v)| v + bt.data()[bidx(i)]).collect();
        Ok(self.tape().record(
            Tensor::new(x.shape(), y)?,
            &[self, b],
            Box::new(move |g, _| {
                let mut db = vec![0.0; bshape.iter().product()];
                for (i, gi) in g.data().iter().enumerate() {
                    db[bidx(i)] += gi;
                }
                Ok(vec![Some(g.clone()), Some(Tensor::new(bshape.clone(), db)?)])
            }),
        ))
    }
}
