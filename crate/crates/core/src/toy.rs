//! Procedural toy scenes: a ground plane crossed by road strips, with box
//! buildings and pole columns standing on it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::voxel::VoxelGrid;
use crate::{invalid, Result};

pub const GROUND: u16 = 1;
pub const ROAD: u16 = 2;
pub const BUILDING: u16 = 3;
pub const POLE: u16 = 4;

/// Generator parameters. Ranges are inclusive; horizontal positions and sizes
/// are multiples of `snap`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub dims: [usize; 3],
    pub num_classes: u16,
    pub roads: (usize, usize),
    pub road_width: (usize, usize),
    pub buildings: (usize, usize),
    pub building_size: (usize, usize),
    pub building_height: (usize, usize),
    pub poles: (usize, usize),
    pub pole_height: (usize, usize),
    /// Square pole footprint; poles sit on a grid of this pitch.
    pub pole_width: usize,
    pub snap: usize,
}

impl ToyConfig {
    pub fn new(dims: [usize; 3], num_classes: u16) -> Self {
        let h = dims[2];
        Self {
            dims,
            num_classes,
            roads: (1, 2),
            road_width: (4, 8),
            buildings: (2, 4),
            building_size: (8, 16),
            building_height: (2.min(h - 1), (h * 5 / 8).max(2).min(h - 1)),
            poles: (2, 5),
            pole_height: (3.min(h - 1), (h * 3 / 4).max(3).min(h - 1)),
            pole_width: 4,
            snap: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [l, w, h] = self.dims;
        let bad = |m: &str| Err(invalid("toy config", m.to_string()));
        if self.num_classes <= POLE {
            return bad("needs at least 5 classes");
        }
        if h < 2 || l < 8 || w < 8 {
            return bad("dims too small");
        }
        if self.snap == 0 || l % self.snap != 0 || w % self.snap != 0 {
            return bad("snap must divide the horizontal dims");
        }
        for (name, (a, b)) in [
            ("roads", self.roads),
            ("road_width", self.road_width),
            ("buildings", self.buildings),
            ("building_size", self.building_size),
            ("building_height", self.building_height),
            ("poles", self.poles),
            ("pole_height", self.pole_height),
        ] {
            if a > b {
                return bad(&format!("{name} range is empty"));
            }
        }
        if self.building_height.1 >= h || self.pole_height.1 >= h || self.building_height.0 == 0 {
            return bad("heights must fit above the ground layer");
        }
        if self.pole_width == 0 || self.pole_width > l.min(w) {
            return bad("pole width must be in 1..=min(l, w)");
        }
        if self.building_size.1 > l.min(w) || self.road_width.1 > l.min(w) || self.road_width.0 == 0 {
            return bad("horizontal sizes exceed the grid");
        }
        Ok(())
    }
}

/// Axis-aligned half-open box `[lo, hi)` in voxel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Box3 {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl Box3 {
    pub fn volume(&self) -> usize {
        (0..3).map(|a| self.hi[a] - self.lo[a]).product()
    }

    /// Footprints overlap after growing `self` by `gap` cells on each side.
    fn near(&self, o: &Box3, gap: usize) -> bool {
        (0..2).all(|a| self.lo[a] < o.hi[a] + gap && o.lo[a] < self.hi[a] + gap)
    }
}

/// A full-length road strip across the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Road {
    /// 0: runs along x (spans all x, occupies `start..start+width` in y); 1: along y.
    pub axis: usize,
    pub start: usize,
    pub width: usize,
}

impl Road {
    fn covers(&self, x: usize, y: usize) -> bool {
        let c = if self.axis == 0 { y } else { x };
        c >= self.start && c < self.start + self.width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyScene {
    pub grid: VoxelGrid,
    pub roads: Vec<Road>,
    pub buildings: Vec<Box3>,
    pub poles: Vec<Box3>,
}

fn snapped(rng: &mut impl Rng, (a, b): (usize, usize), snap: usize) -> usize {
    let lo = a.div_ceil(snap);
    let hi = (b / snap).max(lo);
    rng.random_range(lo..=hi) * snap
}

const PLACEMENT_TRIES: usize = 64;

pub fn generate(cfg: &ToyConfig, rng: &mut impl Rng) -> Result<ToyScene> {
    cfg.validate()?;
    let [l, w, h] = cfg.dims;
    let s = cfg.snap;
    let mut grid = VoxelGrid::empty(cfg.dims, cfg.num_classes);

    let mut roads = Vec::new();
    for _ in 0..rng.random_range(cfg.roads.0..=cfg.roads.1) {
        let axis = rng.random_range(0..2);
        let width = snapped(rng, cfg.road_width, s);
        let span = if axis == 0 { w } else { l };
        let start = rng.random_range(0..=(span - width) / s) * s;
        roads.push(Road { axis, start, width });
    }
    let on_road = |x: usize, y: usize| roads.iter().any(|r| r.covers(x, y));
    let footprint_clear = |b: &Box3| (b.lo[0]..b.hi[0]).all(|x| (b.lo[1]..b.hi[1]).all(|y| !on_road(x, y)));

    let mut buildings: Vec<Box3> = Vec::new();
    for _ in 0..rng.random_range(cfg.buildings.0..=cfg.buildings.1) {
        for _ in 0..PLACEMENT_TRIES {
            let (sx, sy) = (snapped(rng, cfg.building_size, s), snapped(rng, cfg.building_size, s));
            let x0 = rng.random_range(0..=(l - sx) / s) * s;
            let y0 = rng.random_range(0..=(w - sy) / s) * s;
            let top = rng.random_range(cfg.building_height.0..=cfg.building_height.1);
            let b = Box3 {
                lo: [x0, y0, 1],
                hi: [x0 + sx, y0 + sy, 1 + top],
            };
            if footprint_clear(&b) && buildings.iter().all(|o| !b.near(o, s)) {
                buildings.push(b);
                break;
            }
        }
    }

    let mut poles: Vec<Box3> = Vec::new();
    for _ in 0..rng.random_range(cfg.poles.0..=cfg.poles.1) {
        for _ in 0..PLACEMENT_TRIES {
            let pw = cfg.pole_width;
            let x0 = rng.random_range(0..l / pw) * pw;
            let y0 = rng.random_range(0..w / pw) * pw;
            let top = rng.random_range(cfg.pole_height.0..=cfg.pole_height.1);
            let p = Box3 {
                lo: [x0, y0, 1],
                hi: [x0 + pw, y0 + pw, 1 + top],
            };
            if footprint_clear(&p)
                && buildings.iter().all(|o| !p.near(o, s))
                && poles.iter().all(|o| !p.near(o, s))
            {
                poles.push(p);
                break;
            }
        }
    }

    for x in 0..l {
        for y in 0..w {
            grid.set(x, y, 0, if on_road(x, y) { ROAD } else { GROUND });
        }
    }
    for (b, class) in buildings.iter().map(|b| (b, BUILDING)).chain(poles.iter().map(|p| (p, POLE))) {
        for x in b.lo[0]..b.hi[0] {
            for y in b.lo[1]..b.hi[1] {
                for z in b.lo[2]..b.hi[2].min(h) {
                    grid.set(x, y, z, class);
                }
            }
        }
    }
    Ok(ToyScene {
        grid,
        roads,
        buildings,
        poles,
    })
}

/// Per-scene seed, so any scene of a dataset can be regenerated alone.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn generate_dataset(cfg: &ToyConfig, n: usize, seed: u64) -> Result<Vec<ToyScene>> {
    (0..n)
        .map(|i| generate(cfg, &mut ChaCha8Rng::seed_from_u64(scene_seed(seed, i))))
        .collect()
}
