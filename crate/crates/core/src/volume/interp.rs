use super::Volume;

// Points within half a voxel of the outermost centers are treated as inside
// the volume and clamped to the edge voxel; anything beyond is zero.
const EXTENT_SLACK: f64 = 1e-9;

#[inline]
fn inside_extent(p: f64, n: usize) -> bool {
    p >= -0.5 - EXTENT_SLACK && p <= n as f64 - 0.5 + EXTENT_SLACK
}

/// Trilinear interpolation at a continuous voxel-index position.
pub fn sample_trilinear(v: &Volume, p: [f64; 3]) -> f64 {
    let dims = v.dims();
    if !(0..3).all(|a| inside_extent(p[a], dims[a])) {
        return 0.0;
    }
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut t = [0.0f64; 3];
    for a in 0..3 {
        let max = (dims[a] - 1) as f64;
        let c = p[a].clamp(0.0, max);
        let f = c.floor();
        lo[a] = f as usize;
        hi[a] = (lo[a] + 1).min(dims[a] - 1);
        t[a] = c - f;
    }
    let data = v.data();
    let at = |x: usize, y: usize, z: usize| data[v.index(x, y, z)];
    let mut acc = 0.0;
    for (dz, wz) in [(lo[2], 1.0 - t[2]), (hi[2], t[2])] {
        if wz == 0.0 {
            continue;
        }
        for (dy, wy) in [(lo[1], 1.0 - t[1]), (hi[1], t[1])] {
            if wy == 0.0 {
                continue;
            }
            for (dx, wx) in [(lo[0], 1.0 - t[0]), (hi[0], t[0])] {
                if wx == 0.0 {
                    continue;
                }
                acc += wx * wy * wz * at(dx, dy, dz);
            }
        }
    }
    acc
}

/// Nearest-neighbour lookup at a continuous voxel-index position.
pub fn sample_nearest(v: &Volume, p: [f64; 3]) -> f64 {
    let dims = v.dims();
    if !(0..3).all(|a| inside_extent(p[a], dims[a])) {
        return 0.0;
    }
    let mut idx = [0usize; 3];
    for a in 0..3 {
        idx[a] = (p[a].round().max(0.0) as usize).min(dims[a] - 1);
    }
    v.get(idx[0], idx[1], idx[2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VolumeKind;

    #[test]
    fn trilinear_hits_grid_values_exactly() {
        let v = Volume::intensity_from_fn([3, 3, 3], [1.0; 3], |x, y, z| (x + 3 * y + 9 * z) as f64)
            .unwrap();
        for z in 0..3 {
            for y in 0..3 {
                for x in 0..3 {
                    let s = sample_trilinear(&v, [x as f64, y as f64, z as f64]);
                    assert_eq!(s, v.get(x, y, z));
                }
            }
        }
        // linear field is reproduced between centers
        let s = sample_trilinear(&v, [0.5, 1.25, 1.0]);
        assert!((s - (0.5 + 3.0 * 1.25 + 9.0)).abs() < 1e-12);
    }

    #[test]
    fn outside_extent_is_zero_and_edges_clamp() {
        let v = Volume::filled([2, 2, 2], [1.0; 3], 3.0, VolumeKind::Intensity).unwrap();
        assert_eq!(sample_trilinear(&v, [-0.4, 0.0, 0.0]), 3.0);
        assert_eq!(sample_trilinear(&v, [1.5, 1.5, 1.5]), 3.0);
        assert_eq!(sample_trilinear(&v, [-0.6, 0.0, 0.0]), 0.0);
        assert_eq!(sample_nearest(&v, [2.0, 0.0, 0.0]), 0.0);
        assert_eq!(sample_nearest(&v, [1.4, 0.0, 0.0]), 3.0);
    }
}
