//! Bijective linearizations of a 3D grid into a token sequence.
//!
//! A [`ScanOrder`] maps sequence position to flat voxel index, with the flat
//! index of `(x, y, z)` being `(x * W + y) * H + z`. A [`ScanDirection`] then
//! rearranges that sequence once more before a state-space scan reads it.

use std::f64::consts::TAU;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Tensor, TensorError, Var};
use crate::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanOrder {
    dims: [usize; 3],
    perm: Arc<Vec<usize>>,
    inverse: Arc<Vec<usize>>,
}

/// How the sequence produced by a [`ScanOrder`] is traversed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanDirection {
    Forward,
    /// Exact reverse of `Forward`.
    Backward,
    /// z-slices visited in a seeded random order; within a slice the order is kept.
    InterSlice { seed: u64 },
}

/// Sort priority after the slice index for [`cylinder_order_with`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CylinderPriority {
    /// `(z, θ, r)`
    #[default]
    AngleFirst,
    /// `(z, r, θ)`
    RadiusFirst,
}

fn check_dims(dims: [usize; 3]) -> Result<usize> {
    if dims.contains(&0) {
        return Err(invalid("scan order", format!("dims {dims:?} must be positive")));
    }
    Ok(dims.iter().product())
}

fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

impl ScanOrder {
    /// Wraps an explicit permutation, checking it is a bijection on the grid.
    pub fn from_perm(dims: [usize; 3], perm: Vec<usize>) -> Result<Self> {
        let n = check_dims(dims)?;
        if perm.len() != n {
            return Err(invalid("scan order", format!("{} entries for {n} voxels", perm.len())));
        }
        let mut seen = vec![false; n];
        for &p in &perm {
            if p >= n || std::mem::replace(&mut seen[p], true) {
                return Err(invalid("scan order", format!("entry {p} repeats or is out of range")));
            }
        }
        let inverse = invert(&perm);
        Ok(Self {
            dims,
            perm: Arc::new(perm),
            inverse: Arc::new(inverse),
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    /// Sequence position to flat voxel index.
    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    /// Flat voxel index to sequence position.
    pub fn inverse_perm(&self) -> &[usize] {
        &self.inverse
    }

    /// The composed route: `route[i]` is the flat index read at step `i` of a scan in `dir`.
    pub fn route(&self, dir: ScanDirection) -> Arc<Vec<usize>> {
        match dir {
            ScanDirection::Forward => Arc::clone(&self.perm),
            ScanDirection::Backward => Arc::new(self.perm.iter().rev().copied().collect()),
            ScanDirection::InterSlice { seed } => {
                let h = self.dims[2];
                let mut slices = vec![Vec::new(); h];
                for &p in self.perm.iter() {
                    slices[p % h].push(p);
                }
                let mut visit: Vec<usize> = (0..h).collect();
                visit.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                Arc::new(visit.into_iter().flat_map(|z| std::mem::take(&mut slices[z])).collect())
            }
        }
    }

    /// Reorders `axis` of `x` (extent `L·W·H`) into scan sequence order.
    pub fn apply(&self, x: &Tensor, axis: usize, dir: ScanDirection) -> Result<Tensor> {
        self.check_extent(x.shape(), axis)?;
        Ok(permute_axis(x, axis, &self.route(dir)))
    }

    /// Inverse of [`ScanOrder::apply`]: puts a sequence back into voxel order.
    pub fn restore(&self, x: &Tensor, axis: usize, dir: ScanDirection) -> Result<Tensor> {
        self.check_extent(x.shape(), axis)?;
        Ok(permute_axis(x, axis, &invert(&self.route(dir))))
    }

    /// Differentiable [`ScanOrder::apply`].
    pub fn apply_var<'t>(&self, x: Var<'t>, axis: usize, dir: ScanDirection) -> Result<Var<'t>> {
        self.check_extent(&x.shape(), axis)?;
        Ok(x.gather(axis, &self.route(dir))?)
    }

    /// Differentiable [`ScanOrder::restore`].
    pub fn restore_var<'t>(&self, x: Var<'t>, axis: usize, dir: ScanDirection) -> Result<Var<'t>> {
        self.check_extent(&x.shape(), axis)?;
        Ok(x.scatter(axis, &self.route(dir))?)
    }

    fn check_extent(&self, shape: &[usize], axis: usize) -> Result<()> {
        match shape.get(axis) {
            Some(&e) if e == self.len() => Ok(()),
            _ => Err(TensorError::Invalid {
                op: "scan order",
                msg: format!("axis {axis} of shape {shape:?} must have extent {}", self.len()),
            }
            .into()),
        }
    }
}

fn permute_axis(x: &Tensor, axis: usize, route: &[usize]) -> Tensor {
    let shape = x.shape();
    let ext = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(x.numel());
    for o in 0..outer {
        for &i in route {
            let b = (o * ext + i) * inner;
            out.extend_from_slice(&x.data()[b..b + inner]);
        }
    }
    Tensor::new(shape, out).expect("permuted shape")
}

/// Raster order matching the storage layout: x outermost, z innermost.
pub fn cartesian_order(dims: [usize; 3]) -> Result<ScanOrder> {
    let n = check_dims(dims)?;
    ScanOrder::from_perm(dims, (0..n).collect())
}

/// Cylindrical `(θ, r, z)` order around the grid centre, slice by slice.
pub fn cylinder_order(dims: [usize; 3]) -> Result<ScanOrder> {
    cylinder_order_with(dims, CylinderPriority::AngleFirst)
}

/// Polar angle in `[0, 2π)` and radius of cell `(i, j)` about `(L/2, W/2)`.
pub fn cylinder_coords(dims: [usize; 3], i: usize, j: usize) -> (f64, f64) {
    let dx = i as f64 + 0.5 - dims[0] as f64 / 2.0;
    let dy = j as f64 + 0.5 - dims[1] as f64 / 2.0;
    let mut theta = dy.atan2(dx);
    if theta < 0.0 {
        theta += TAU;
    }
    // atan2 of a tiny negative value can round up to exactly 2π.
    if theta >= TAU {
        theta = 0.0;
    }
    (theta, dx.hypot(dy))
}

pub fn cylinder_order_with(dims: [usize; 3], priority: CylinderPriority) -> Result<ScanOrder> {
    let n = check_dims(dims)?;
    let [l, w, h] = dims;
    let polar: Vec<(f64, f64)> = (0..l * w).map(|c| cylinder_coords(dims, c / w, c % w)).collect();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.sort_by(|&a, &b| {
        let (pa, pb) = (polar[a / h], polar[b / h]);
        let (ka, kb) = match priority {
            CylinderPriority::AngleFirst => (pa, pb),
            CylinderPriority::RadiusFirst => ((pa.1, pa.0), (pb.1, pb.0)),
        };
        (a % h)
            .cmp(&(b % h))
            .then(ka.0.total_cmp(&kb.0))
            .then(ka.1.total_cmp(&kb.1))
            .then(a.cmp(&b))
    });
    ScanOrder::from_perm(dims, perm)
}

/// Inter-slice seed for a given layer and training epoch. Inference uses seed 0.
pub fn inter_slice_seed(layer: usize, epoch: usize) -> u64 {
    // splitmix64 of the packed pair keeps nearby (layer, epoch) seeds unrelated.
    let mut z = ((layer as u64) << 32 ^ epoch as u64).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (z ^ (z >> 31)).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cartesian_small_is_identity() {
        assert_eq!(cartesian_order([2, 2, 1]).unwrap().perm(), &[0, 1, 2, 3]);
        assert_eq!(cartesian_order([1, 1, 5]).unwrap().perm(), &[0, 1, 2, 3, 4]);
    }

    #[test]
    fn cylinder_quadrants_go_counterclockwise() {
        let o = cylinder_order([2, 2, 1]).unwrap();
        // flat index of (x, y) is x * 2 + y
        assert_eq!(o.perm(), &[3, 1, 0, 2]);
    }

    #[test]
    fn single_column_is_ordered_by_height() {
        assert_eq!(cylinder_order([1, 1, 4]).unwrap().perm(), &[0, 1, 2, 3]);
    }

    #[test]
    fn rejects_zero_dims_and_bad_extent() {
        assert!(cartesian_order([0, 2, 2]).is_err());
        let o = cartesian_order([2, 2, 2]).unwrap();
        assert!(o.apply(&Tensor::zeros([3, 7]), 1, ScanDirection::Forward).is_err());
    }

    #[test]
    fn seeds_differ_across_layers_and_epochs() {
        assert_ne!(inter_slice_seed(0, 0), inter_slice_seed(1, 0));
        assert_ne!(inter_slice_seed(0, 1), inter_slice_seed(1, 0));
        assert_eq!(inter_slice_seed(3, 4), inter_slice_seed(3, 4));
    }
}
