//! Semantic voxel scenes and their 2D condition maps.
//!
//! Label files are headerless little-endian `u16` arrays stored with x
//! outermost, then y, with z innermost. The flat index of `(x, y, z)` is
//! `(x * W + y) * H + z`.

mod bev;
mod canny;
mod palette;
mod pgm;

use std::path::Path;

pub use bev::bev_project;
pub use canny::{canny_sketch, class_map_to_gray, CannyThresholds};
pub use palette::SemanticPalette;
pub use pgm::{read_condition_pair, read_pgm, write_pgm, ConditionPair};

use crate::{file_err, invalid, Error, Result, Tensor};

/// Dense 3D array of semantic class IDs. Label 0 is empty space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoxelGrid {
    dims: [usize; 3],
    labels: Vec<u16>,
    num_classes: u16,
}

impl VoxelGrid {
    pub fn new(dims: [usize; 3], labels: Vec<u16>, num_classes: u16) -> Result<Self> {
        if dims.contains(&0) {
            return Err(invalid("voxel grid", format!("dims {dims:?} must be positive")));
        }
        let n: usize = dims.iter().product();
        if labels.len() != n {
            return Err(invalid(
                "voxel grid",
                format!("{} labels for dims {dims:?} ({n} voxels)", labels.len()),
            ));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(invalid(
                "voxel grid",
                format!("label {l} at index {i} is not below num_classes {num_classes}"),
            ));
        }
        Ok(Self {
            dims,
            labels,
            num_classes,
        })
    }

    pub fn empty(dims: [usize; 3], num_classes: u16) -> Self {
        Self {
            dims,
            labels: vec![0; dims.iter().product()],
            num_classes,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn num_classes(&self) -> u16 {
        self.num_classes
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u16 {
        self.labels[self.index(x, y, z)]
    }

    /// Sets one voxel. Panics if `label` is not a valid class.
    pub fn set(&mut self, x: usize, y: usize, z: usize, label: u16) {
        assert!(label < self.num_classes, "label {label} >= {}", self.num_classes);
        let i = self.index(x, y, z);
        self.labels[i] = label;
    }

    pub fn occupied(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    /// Voxel count per class.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes as usize];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    /// One-hot encoding of shape `(C, L, W, H)`.
    pub fn one_hot(&self) -> Tensor {
        let n = self.labels.len();
        let mut data = vec![0.0; self.num_classes as usize * n];
        for (i, &l) in self.labels.iter().enumerate() {
            data[l as usize * n + i] = 1.0;
        }
        Tensor::new(
            vec![self.num_classes as usize, self.dims[0], self.dims[1], self.dims[2]],
            data,
        )
        .expect("one-hot shape")
    }

    /// Majority label of each `f×f×f` block (ties go to the smaller ID).
    pub fn majority_pool(&self, f: usize) -> Result<VoxelGrid> {
        if f == 0 || self.dims.iter().any(|d| d % f != 0) {
            return Err(invalid("pool factor", format!("{f} does not divide dims {:?}", self.dims)));
        }
        let out = self.dims.map(|d| d / f);
        let mut labels = Vec::with_capacity(out.iter().product());
        let mut counts = vec![0usize; self.num_classes as usize];
        for x in 0..out[0] {
            for y in 0..out[1] {
                for z in 0..out[2] {
                    counts.fill(0);
                    for a in 0..f {
                        for b in 0..f {
                            for c in 0..f {
                                counts[self.get(x * f + a, y * f + b, z * f + c) as usize] += 1;
                            }
                        }
                    }
                    let best = counts
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                        .map(|(i, _)| i as u16)
                        .unwrap_or(0);
                    labels.push(best);
                }
            }
        }
        VoxelGrid::new(out, labels, self.num_classes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.labels.iter().flat_map(|l| l.to_le_bytes()).collect()
    }

    pub fn from_bytes(bytes: &[u8], dims: [usize; 3], num_classes: u16) -> Result<Self> {
        let expected = 2 * dims.iter().product::<usize>();
        if bytes.len() != expected {
            return Err(invalid(
                "label file",
                format!("expected {expected} bytes for dims {dims:?}, found {}", bytes.len()),
            ));
        }
        let labels = bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
        VoxelGrid::new(dims, labels, num_classes)
    }
}

/// Reads a headerless little-endian `u16` label file.
pub fn read_voxel_labels(path: impl AsRef<Path>, dims: [usize; 3], num_classes: u16) -> Result<VoxelGrid> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(file_err(path))?;
    VoxelGrid::from_bytes(&bytes, dims, num_classes).map_err(|e| match e {
        Error::Invalid { msg, .. } => Error::Format {
            path: path.to_path_buf(),
            msg,
        },
        e => e,
    })
}

/// Sketch and stand-in PSA for a scene: Canny edges of its BEV projection,
/// with the BEV class map itself as the PSA.
pub fn synthetic_condition(grid: &VoxelGrid, th: CannyThresholds) -> Result<ConditionPair> {
    let bev = bev_project(grid);
    let sketch = canny_sketch(&class_map_to_gray(&bev, grid.num_classes()), th)?;
    ConditionPair::new(sketch, bev, grid.num_classes())
}

pub fn write_voxel_labels(path: impl AsRef<Path>, grid: &VoxelGrid) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, grid.to_bytes()).map_err(file_err(path))
}

/// Row-major 2D map indexed `(x, y)` over an `L×W` footprint.
#[derive(Clone, Debug, PartialEq)]
pub struct Map2<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

pub type ClassMap = Map2<u16>;

impl<T: Copy> Map2<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid("map", format!("{} values for {rows}x{cols}", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[x * self.cols + y]
    }

    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[x * self.cols + y] = v;
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Map2<U> {
        Map2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}
