use super::{ClassMap, VoxelGrid};

/// Bird's-eye view: the label of the highest occupied voxel in each column, 0 if none.
pub fn bev_project(grid: &VoxelGrid) -> ClassMap {
    let [l, w, h] = grid.dims();
    let mut map = ClassMap::filled(l, w, 0);
    let labels = grid.labels();
    for x in 0..l {
        for y in 0..w {
            let col = &labels[(x * w + y) * h..(x * w + y + 1) * h];
            if let Some(&top) = col.iter().rev().find(|&&v| v != 0) {
                map.set(x, y, top);
            }
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_voxel() {
        let mut g = VoxelGrid::empty([4, 3, 5], 8);
        g.set(2, 1, 3, 5);
        let m = bev_project(&g);
        for x in 0..4 {
            for y in 0..3 {
                assert_eq!(m.get(x, y), if (x, y) == (2, 1) { 5 } else { 0 });
            }
        }
    }

    #[test]
    fn top_most_wins() {
        let mut g = VoxelGrid::empty([1, 1, 6], 8);
        g.set(0, 0, 1, 3);
        g.set(0, 0, 4, 7);
        assert_eq!(bev_project(&g).get(0, 0), 7);
    }

    fn grid_strategy() -> impl Strategy<Value = VoxelGrid> {
        (1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(l, w, h)| {
            proptest::collection::vec(prop_oneof![3 => Just(0u16), 1 => 1u16..8], l * w * h)
                .prop_map(move |labels| VoxelGrid::new([l, w, h], labels, 8).unwrap())
        })
    }

    proptest! {
        #[test]
        fn matches_column_scan(g in grid_strategy()) {
            let m = bev_project(&g);
            let [l, w, h] = g.dims();
            for x in 0..l {
                for y in 0..w {
                    let mut expect = 0;
                    for z in 0..h {
                        if g.get(x, y, z) != 0 {
                            expect = g.get(x, y, z);
                        }
                    }
                    prop_assert_eq!(m.get(x, y), expect);
                }
            }
        }

        #[test]
        fn filling_below_the_top_changes_nothing(g in grid_strategy()) {
            let before = bev_project(&g);
            let mut filled = g.clone();
            let [l, w, h] = g.dims();
            for x in 0..l {
                for y in 0..w {
                    if let Some(top) = (0..h).rev().find(|&z| g.get(x, y, z) != 0) {
                        for z in 0..top {
                            if g.get(x, y, z) == 0 {
                                filled.set(x, y, z, 1);
                            }
                        }
                    }
                }
            }
            prop_assert_eq!(bev_project(&filled), before);
        }
    }
}
