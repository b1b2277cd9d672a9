//! 3D convolution and transposed convolution via im2col + GEMM.

use super::kernels::gemm_ld;
use super::{invalid, mismatch, Result, Tensor, Var};

/// Stride, zero padding and dilation per spatial axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub dilation: [usize; 3],
}

impl Default for Conv3dSpec {
    fn default() -> Self {
        Self {
            stride: [1; 3],
            padding: [0; 3],
            dilation: [1; 3],
        }
    }
}

impl Conv3dSpec {
    /// Stride 1 with "same" padding for an odd kernel.
    pub fn same(kernel: [usize; 3], dilation: usize) -> Self {
        Self {
            stride: [1; 3],
            padding: kernel.map(|k| dilation * (k - 1) / 2),
            dilation: [dilation; 3],
        }
    }

    pub fn strided(stride: [usize; 3]) -> Self {
        Self {
            stride,
            ..Self::default()
        }
    }

    fn output_dims(&self, input: [usize; 3], kernel: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for i in 0..3 {
            let span = self.dilation[i] * (kernel[i] - 1) + 1;
            let padded = input[i] + 2 * self.padding[i];
            if padded < span || self.stride[i] == 0 {
                return None;
            }
            out[i] = (padded - span) / self.stride[i] + 1;
        }
        Some(out)
    }
}

/// Relation between a large volume and the positions of a kernel sliding over it.
struct Geom {
    channels: usize,
    vol: [usize; 3],
    kernel: [usize; 3],
    spec: Conv3dSpec,
    pos: [usize; 3],
}

impl Geom {
    fn rows(&self) -> usize {
        self.channels * self.kernel.iter().product::<usize>()
    }

    fn positions(&self) -> usize {
        self.pos.iter().product()
    }

    fn vol_len(&self) -> usize {
        self.vol.iter().product()
    }

    /// Visits every in-bounds run of taps as (row, first position, first
    /// volume offset, length); within a run both offsets advance together,
    /// positions by one and the volume by the innermost stride.
    fn for_each_run(&self, slab: std::ops::Range<usize>, mut f: impl FnMut(usize, usize, usize, usize)) {
        let [v0, v1, v2] = self.vol;
        let [k0, k1, k2] = self.kernel;
        let [_, p1, p2] = self.pos;
        let s = self.spec;
        let mut row = 0;
        for c in 0..self.channels {
            let cbase = c * v0 * v1 * v2;
            for a in 0..k0 {
                for b in 0..k1 {
                    for e in 0..k2 {
                        // Output range along the innermost axis whose tap lands inside.
                        let off = (e * s.dilation[2]) as isize - s.padding[2] as isize;
                        let st = s.stride[2] as isize;
                        let lo = if off >= 0 { 0 } else { ((-off + st - 1) / st) as usize };
                        let hi = if (v2 as isize) <= off {
                            0
                        } else {
                            (((v2 as isize - off + st - 1) / st) as usize).min(p2)
                        };
                        if lo < hi {
                            for o0 in slab.clone() {
                                let i0 = (o0 * s.stride[0] + a * s.dilation[0]) as isize - s.padding[0] as isize;
                                if i0 < 0 || i0 >= v0 as isize {
                                    continue;
                                }
                                for o1 in 0..p1 {
                                    let i1 = (o1 * s.stride[1] + b * s.dilation[1]) as isize - s.padding[1] as isize;
                                    if i1 < 0 || i1 >= v1 as isize {
                                        continue;
                                    }
                                    let pbase = ((o0 - slab.start) * p1 + o1) * p2;
                                    let vbase = cbase + (i0 as usize * v1 + i1 as usize) * v2;
                                    let i2 = (lo as isize * st + off) as usize;
                                    f(row, pbase + lo, vbase + i2, hi - lo);
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Output slabs along the outermost axis, sized so one slab of columns
    /// stays cache resident.
    fn slabs(&self) -> Vec<std::ops::Range<usize>> {
        // Unit tests use tiny slabs so the multi-slab paths get exercised.
        const TARGET: usize = if cfg!(test) { 64 } else { 1 << 15 };
        let per = self.rows() * self.pos[1] * self.pos[2];
        let step = (TARGET / per.max(1)).max(1);
        (0..self.pos[0]).step_by(step).map(|a| a..(a + step).min(self.pos[0])).collect()
    }

    fn slab_positions(&self, slab: &std::ops::Range<usize>) -> (usize, usize) {
        let plane = self.pos[1] * self.pos[2];
        (slab.start * plane, slab.len() * plane)
    }

    /// Columns for the positions of `slab`: `rows × slab positions`.
    fn im2col(&self, vol: &[f64], slab: &std::ops::Range<usize>, cols: &mut Vec<f64>) {
        let (_, p) = self.slab_positions(slab);
        let st = self.spec.stride[2];
        cols.clear();
        cols.resize(self.rows() * p, 0.0);
        self.for_each_run(slab.clone(), |r, o, i, n| {
            let dst = &mut cols[r * p + o..r * p + o + n];
            if st == 1 {
                dst.copy_from_slice(&vol[i..i + n]);
            } else {
                for (k, d) in dst.iter_mut().enumerate() {
                    *d = vol[i + k * st];
                }
            }
        });
    }

    fn col2im_add(&self, cols: &[f64], slab: &std::ops::Range<usize>, vol: &mut [f64]) {
        let (_, p) = self.slab_positions(slab);
        let st = self.spec.stride[2];
        self.for_each_run(slab.clone(), |r, o, i, n| {
            let src = &cols[r * p + o..r * p + o + n];
            if st == 1 {
                for (d, s) in vol[i..i + n].iter_mut().zip(src) {
                    *d += s;
                }
            } else {
                for (k, s) in src.iter().enumerate() {
                    vol[i + k * st] += s;
                }
            }
        });
    }
}

fn dims5(op: &'static str, shape: &[usize]) -> Result<(usize, usize, [usize; 3])> {
    match *shape {
        [n, c, a, b, d] => Ok((n, c, [a, b, d])),
        _ => Err(invalid(op, format!("expected (N, C, X, Y, Z), got {shape:?}"))),
    }
}

fn check_bias(op: &'static str, bias: &Option<Tensor>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [channels] => Err(mismatch(op, b.shape(), &[channels])),
        _ => Ok(()),
    }
}

impl<'t> Var<'t> {
    /// 3D cross-correlation. `self`: `(N, Cin, X, Y, Z)`, `weight`: `(Cout, Cin, kx, ky, kz)`.
    pub fn conv3d(self, weight: Var<'t>, bias: Option<Var<'t>>, spec: Conv3dSpec) -> Result<Var<'t>> {
        let (x, w) = (self.value(), weight.value());
        let (n, cin, vol) = dims5("conv3d", x.shape())?;
        let (cout, wcin, kernel) = dims5("conv3d", w.shape())?;
        if wcin != cin {
            return Err(mismatch("conv3d", x.shape(), w.shape()));
        }
        let pos = spec
            .output_dims(vol, kernel)
            .ok_or_else(|| invalid("conv3d", format!("kernel {kernel:?} with {spec:?} does not fit input {vol:?}")))?;
        let bv = bias.map(|b| b.value());
        check_bias("conv3d bias", &bv, cout)?;
        let geom = Geom {
            channels: cin,
            vol,
            kernel,
            spec,
            pos,
        };
        let (k, p, vlen) = (geom.rows(), geom.positions(), geom.vol_len());
        let slabs = geom.slabs();
        let mut out = vec![0.0; n * cout * p];
        let mut cols = Vec::new();
        for s in 0..n {
            let xs = &x.data()[s * cin * vlen..(s + 1) * cin * vlen];
            let o = &mut out[s * cout * p..(s + 1) * cout * p];
            if let Some(b) = &bv {
                for (row, &bval) in o.chunks_exact_mut(p).zip(b.data()) {
                    row.fill(bval);
                }
            }
            for slab in &slabs {
                let (start, len) = geom.slab_positions(slab);
                geom.im2col(xs, slab, &mut cols);
                gemm_ld(cout, k, len, w.data(), k, false, &cols, len, false, &mut o[start..], p, bv.is_some());
            }
        }
        let out = Tensor::new(vec![n, cout, pos[0], pos[1], pos[2]], out)?;
        let mut parents = vec![self, weight];
        parents.extend(bias);
        Ok(self.tape().record(
            out,
            &parents,
            Box::new(move |g, need| {
                let mut dx = need[0].then(|| vec![0.0; x.numel()]);
                let mut dw = need[1].then(|| vec![0.0; w.numel()]);
                let (mut cols, mut dcols) = (Vec::new(), Vec::new());
                for s in 0..n {
                    let gs = &g.data()[s * cout * p..(s + 1) * cout * p];
                    for slab in &slabs {
                        let (start, len) = geom.slab_positions(slab);
                        if let Some(dw) = &mut dw {
                            geom.im2col(&x.data()[s * cin * vlen..(s + 1) * cin * vlen], slab, &mut cols);
                            gemm_ld(cout, len, k, &gs[start..], p, false, &cols, len, true, dw, k, true);
                        }
                        if let Some(dx) = &mut dx {
                            dcols.resize(k * len, 0.0);
                            gemm_ld(k, cout, len, w.data(), k, true, &gs[start..], p, false, &mut dcols, len, false);
                            geom.col2im_add(&dcols, slab, &mut dx[s * cin * vlen..(s + 1) * cin * vlen]);
                        }
                    }
                }
                let mut res = vec![
                    dx.map(|d| Tensor::new(x.shape(), d)).transpose()?,
                    dw.map(|d| Tensor::new(w.shape(), d)).transpose()?,
                ];
                if need.len() > 2 {
                    res.push(if need[2] { Some(channel_sums(g.data(), n, cout, p)?) } else { None });
                }
                Ok(res)
            }),
        ))
    }

    /// Transposed 3D convolution. `self`: `(N, Cin, X, Y, Z)`, `weight`: `(Cin, Cout, kx, ky, kz)`.
    ///
    /// Output extent per axis is `(in - 1) * stride - 2 * padding + dilation * (k - 1) + 1`.
    pub fn conv_transpose3d(self, weight: Var<'t>, bias: Option<Var<'t>>, spec: Conv3dSpec) -> Result<Var<'t>> {
        let (x, w) = (self.value(), weight.value());
        let (n, cin, pos) = dims5("conv_transpose3d", x.shape())?;
        let (wcin, cout, kernel) = dims5("conv_transpose3d", w.shape())?;
        if wcin != cin {
            return Err(mismatch("conv_transpose3d", x.shape(), w.shape()));
        }
        let mut vol = [0usize; 3];
        for i in 0..3 {
            let full = (pos[i] - 1) * spec.stride[i] + spec.dilation[i] * (kernel[i] - 1) + 1;
            vol[i] = full
                .checked_sub(2 * spec.padding[i])
                .filter(|&v| v > 0)
                .ok_or_else(|| invalid("conv_transpose3d", format!("padding {:?} too large", spec.padding)))?;
        }
        let bv = bias.map(|b| b.value());
        check_bias("conv_transpose3d bias", &bv, cout)?;
        let geom = Geom {
            channels: cout,
            vol,
            kernel,
            spec,
            pos,
        };
        let (k, p, vlen) = (geom.rows(), geom.positions(), geom.vol_len());
        let slabs = geom.slabs();
        let mut out = vec![0.0; n * cout * vlen];
        let mut cols = Vec::new();
        for s in 0..n {
            let xs = &x.data()[s * cin * p..(s + 1) * cin * p];
            let o = &mut out[s * cout * vlen..(s + 1) * cout * vlen];
            for slab in &slabs {
                let (start, len) = geom.slab_positions(slab);
                cols.resize(k * len, 0.0);
                gemm_ld(k, cin, len, w.data(), k, true, &xs[start..], p, false, &mut cols, len, false);
                geom.col2im_add(&cols, slab, o);
            }
            if let Some(b) = &bv {
                for (ch, &bval) in o.chunks_exact_mut(vlen).zip(b.data()) {
                    ch.iter_mut().for_each(|v| *v += bval);
                }
            }
        }
        let out = Tensor::new(vec![n, cout, vol[0], vol[1], vol[2]], out)?;
        let mut parents = vec![self, weight];
        parents.extend(bias);
        Ok(self.tape().record(
            out,
            &parents,
            Box::new(move |g, need| {
                let mut dx = need[0].then(|| vec![0.0; x.numel()]);
                let mut dw = need[1].then(|| vec![0.0; w.numel()]);
                let mut gcols = Vec::new();
                for s in 0..n {
                    let gs = &g.data()[s * cout * vlen..(s + 1) * cout * vlen];
                    let xs = &x.data()[s * cin * p..(s + 1) * cin * p];
                    for slab in &slabs {
                        let (start, len) = geom.slab_positions(slab);
                        geom.im2col(gs, slab, &mut gcols);
                        if let Some(dx) = &mut dx {
                            let d = &mut dx[s * cin * p + start..];
                            gemm_ld(cin, k, len, w.data(), k, false, &gcols, len, false, d, p, false);
                        }
                        if let Some(dw) = &mut dw {
                            gemm_ld(cin, len, k, &xs[start..], p, false, &gcols, len, true, dw, k, true);
                        }
                    }
                }
                let mut res = vec![
                    dx.map(|d| Tensor::new(x.shape(), d)).transpose()?,
                    dw.map(|d| Tensor::new(w.shape(), d)).transpose()?,
                ];
                if need.len() > 2 {
                    res.push(if need[2] { Some(channel_sums(g.data(), n, cout, vlen)?) } else { None });
                }
                Ok(res)
            }),
        ))
    }
}

fn channel_sums(g: &[f64], n: usize, c: usize, p: usize) -> Result<Tensor> {
    let mut db = vec![0.0; c];
    for s in 0..n {
        for (ch, d) in db.iter_mut().enumerate() {
            *d += g[(s * c + ch) * p..(s * c + ch + 1) * p].iter().sum::<f64>();
        }
    }
    Tensor::new(vec![c], db)
}
