//! Distribution metrics over scene features (FID, MMD) and voxel IoU.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::nn::{Binder, Mode, ParamStore};
use crate::tensor::Tape;
use crate::vae::{one_hot_batch, Vae};
use crate::voxel::VoxelGrid;
use crate::{invalid, Error, Result};

/// Eigenvalues in `[-EIG_TOL, 0)` are rounding noise and clipped to zero.
pub const EIG_TOL: f64 = 1e-6;

/// `m` feature vectors of a common dimension `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    rows: Vec<Vec<f64>>,
}

impl FeatureSet {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let d = rows.first().map(Vec::len).ok_or_else(|| invalid("features", "empty set"))?;
        if d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(invalid("features", "rows must share a non-zero dimension"));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid("features", "non-finite entry"));
        }
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

/// Mean and unbiased covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSummary {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianSummary {
    pub fn from_features(f: &FeatureSet) -> Result<Self> {
        let (m, d) = (f.len(), f.dim());
        if m < 2 {
            return Err(invalid("features", format!("covariance needs at least 2 vectors, got {m}")));
        }
        let x = DMatrix::from_fn(m, d, |i, j| f.rows[i][j]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
        let centered = DMatrix::from_fn(m, d, |i, j| x[(i, j)] - mean[j]);
        let mut cov = centered.transpose() * &centered / (m - 1) as f64;
        symmetrize(&mut cov);
        Ok(Self { mean, cov })
    }
}

fn symmetrize(a: &mut DMatrix<f64>) {
    let t = a.transpose();
    *a = (&*a + t) * 0.5;
}

/// Eigenvalues of a symmetric matrix with small negatives clipped; errors
/// below `-EIG_TOL`.
fn clipped_eigen(a: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut e = SymmetricEigen::new(a);
    let min = e.eigenvalues.min();
    if min < -EIG_TOL {
        return Err(Error::Numeric(format!("{what} is not positive semidefinite: minimum eigenvalue {min:e}")));
    }
    e.eigenvalues.apply(|v| *v = v.max(0.0));
    Ok(e)
}

fn psd_sqrt(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let e = clipped_eigen(a.clone(), what)?;
    let s = DMatrix::from_diagonal(&e.eigenvalues.map(f64::sqrt));
    Ok(&e.eigenvectors * s * e.eigenvectors.transpose())
}

/// `‖M_t − M_g‖² + Tr(C_t + C_g − 2 (C_t C_g)^½)`.
///
/// The trace of the square root is taken through the symmetric matrix
/// `C_t^½ C_g C_t^½`, which has the same eigenvalues as `C_t C_g`.
pub fn fid_from_summaries(real: &GaussianSummary, gen: &GaussianSummary) -> Result<f64> {
    if real.mean.len() != gen.mean.len() {
        return Err(invalid("fid", format!("dimension {} vs {}", real.mean.len(), gen.mean.len())));
    }
    let st = psd_sqrt(&real.cov, "real covariance")?;
    let mut prod = &st * &gen.cov * &st;
    symmetrize(&mut prod);
    let e = clipped_eigen(prod, "covariance product")?;
    let tr_sqrt: f64 = e.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let d = (&real.mean - &gen.mean).norm_squared() + real.cov.trace() + gen.cov.trace() - 2.0 * tr_sqrt;
    if d < -EIG_TOL {
        return Err(Error::Numeric(format!("negative distance {d:e}")));
    }
    Ok(d.max(0.0))
}

pub fn fid(real: &FeatureSet, gen: &FeatureSet) -> Result<f64> {
    fid_from_summaries(&GaussianSummary::from_features(real)?, &GaussianSummary::from_features(gen)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise distance over the pooled sets.
    Median,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median of the distances between distinct pooled vectors; 1 if all coincide.
pub fn median_bandwidth(x: &FeatureSet, y: &FeatureSet) -> f64 {
    let pooled: Vec<&Vec<f64>> = x.rows.iter().chain(&y.rows).collect();
    let mut d = Vec::new();
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let med = if n % 2 == 1 { d[n / 2] } else { 0.5 * (d[n / 2 - 1] + d[n / 2]) };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// Biased (V-statistic) MMD² with kernel `exp(−‖a−b‖² / (2·bw²))`, clipped at
/// zero. Returns the value and the bandwidth used.
pub fn mmd(x: &FeatureSet, y: &FeatureSet, bw: Bandwidth) -> Result<(f64, f64)> {
    if x.dim() != y.dim() {
        return Err(invalid("mmd", format!("dimension {} vs {}", x.dim(), y.dim())));
    }
    let bw = match bw {
        Bandwidth::Fixed(b) if b > 0.0 && b.is_finite() => b,
        Bandwidth::Fixed(b) => return Err(invalid("mmd", format!("bandwidth {b} must be positive"))),
        Bandwidth::Median => median_bandwidth(x, y),
    };
    let g = -1.0 / (2.0 * bw * bw);
    let mean_k = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        let s: f64 = a.iter().map(|u| b.iter().map(|v| (g * sq_dist(u, v)).exp()).sum::<f64>()).sum();
        s / (a.len() * b.len()) as f64
    };
    let v = mean_k(&x.rows, &x.rows) + mean_k(&y.rows, &y.rows) - 2.0 * mean_k(&x.rows, &y.rows);
    Ok((v.max(0.0), bw))
}

/// Occupancy IoU, per-class IoU for classes `1..C` and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct IouReport {
    pub iou: f64,
    /// Index `k` holds class `k + 1`; `None` when the class is in neither volume.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// Confusion counts accumulated over any number of volume pairs.
#[derive(Clone, Debug)]
pub struct IouAccumulator {
    num_classes: u16,
    occ: [usize; 3],
    tp: Vec<usize>,
    fp: Vec<usize>,
    fn_: Vec<usize>,
}

impl IouAccumulator {
    pub fn new(num_classes: u16) -> Self {
        let c = num_classes as usize;
        Self {
            num_classes,
            occ: [0; 3],
            tp: vec![0; c],
            fp: vec![0; c],
            fn_: vec![0; c],
        }
    }

    pub fn add(&mut self, pred: &VoxelGrid, gt: &VoxelGrid) -> Result<()> {
        if pred.dims() != gt.dims() {
            return Err(invalid("iou", format!("dims {:?} vs {:?}", pred.dims(), gt.dims())));
        }
        if pred.num_classes() != self.num_classes || gt.num_classes() != self.num_classes {
            return Err(invalid("iou", "class count mismatch"));
        }
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            match (p != 0, g != 0) {
                (true, true) => self.occ[0] += 1,
                (true, false) => self.occ[1] += 1,
                (false, true) => self.occ[2] += 1,
                _ => {}
            }
            if p == g {
                self.tp[p as usize] += 1;
            } else {
                self.fp[p as usize] += 1;
                self.fn_[g as usize] += 1;
            }
        }
        Ok(())
    }

    /// An empty union counts as perfect agreement.
    pub fn report(&self) -> IouReport {
        let ratio = |tp: usize, rest: usize| if tp + rest == 0 { None } else { Some(tp as f64 / (tp + rest) as f64) };
        let iou = ratio(self.occ[0], self.occ[1] + self.occ[2]).unwrap_or(1.0);
        let per_class: Vec<Option<f64>> = (1..self.num_classes as usize)
            .map(|k| ratio(self.tp[k], self.fp[k] + self.fn_[k]))
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            1.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        IouReport { iou, per_class, miou }
    }
}

pub fn iou_miou(pred: &VoxelGrid, gt: &VoxelGrid) -> Result<IouReport> {
    let mut acc = IouAccumulator::new(gt.num_classes());
    acc.add(pred, gt)?;
    Ok(acc.report())
}

/// Spatially averaged encoder mean (evaluation mode), one vector per grid.
pub fn extract_features(vae: &Vae, store: &ParamStore, grids: &[&VoxelGrid]) -> Result<FeatureSet> {
    let mut rows = Vec::with_capacity(grids.len());
    for g in grids {
        let tape = Tape::new();
        let p = Binder::frozen(&tape, store, Mode::Eval);
        let mean = vae.encode(&p, tape.constant(one_hot_batch(&[g])?))?.mean.value();
        let c = mean.shape()[1];
        let vol = mean.numel() / c;
        rows.push(
            mean.data()
                .chunks(vol)
                .map(|ch| ch.iter().sum::<f64>() / vol as f64)
                .collect(),
        );
    }
    FeatureSet::new(rows)
}
