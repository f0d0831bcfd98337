use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::volume::{sample_nearest, sample_trilinear, Dims, Volume};

use super::intensity::gaussian_smooth;

/// Backward warp: output voxel `p` takes the value at `source(p)` (continuous
/// voxel indices). Image trilinear, labels nearest neighbour, zero outside.
pub fn warp(
    img: &Volume,
    labels: &[Volume],
    source: impl Fn([usize; 3]) -> [f64; 3],
) -> Result<(Volume, Vec<Volume>)> {
    let dims = img.dims();
    let n = img.len();
    let mut out = Vec::with_capacity(n);
    let mut out_labels: Vec<Vec<f64>> = labels.iter().map(|_| Vec::with_capacity(n)).collect();
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = source([x, y, z]);
                out.push(sample_trilinear(img, p));
                for (dst, l) in out_labels.iter_mut().zip(labels) {
                    dst.push(sample_nearest(l, p));
                }
            }
        }
    }
    let img_out = img.with_data(out, img.kind())?;
    let labels_out = labels
        .iter()
        .zip(out_labels)
        .map(|(l, d)| l.with_data(d, l.kind()))
        .collect::<Result<Vec<_>>>()?;
    Ok((img_out, labels_out))
}

fn center(dims: Dims) -> [f64; 3] {
    [
        (dims[0] as f64 - 1.0) / 2.0,
        (dims[1] as f64 - 1.0) / 2.0,
        (dims[2] as f64 - 1.0) / 2.0,
    ]
}

/// In-plane rotation by `degrees` about the slice axis through the volume
/// center.
pub fn t_rotation(img: &Volume, labels: &[Volume], degrees: f64) -> Result<(Volume, Vec<Volume>)> {
    t_rotation_3d(img, labels, [0.0, 0.0, degrees])
}

/// Rotation `Rz * Ry * Rx` about the volume center, in physical space.
pub fn t_rotation_3d(
    img: &Volume,
    labels: &[Volume],
    degrees: [f64; 3],
) -> Result<(Volume, Vec<Volume>)> {
    if degrees.iter().all(|&a| a == 0.0) {
        return Ok((img.clone(), labels.to_vec()));
    }
    let [ax, ay, az] = degrees.map(f64::to_radians);
    let (sx, cx) = ax.sin_cos();
    let (sy, cy) = ay.sin_cos();
    let (sz, cz) = az.sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    let r = matmul(&rz, &matmul(&ry, &rx));
    let c = center(img.dims());
    let s = img.spacing();
    warp(img, labels, |p| {
        let d = [
            (p[0] as f64 - c[0]) * s[0],
            (p[1] as f64 - c[1]) * s[1],
            (p[2] as f64 - c[2]) * s[2],
        ];
        // inverse rotation = transpose
        let mut q = [0.0; 3];
        for (i, qi) in q.iter_mut().enumerate() {
            *qi = r[0][i] * d[0] + r[1][i] * d[1] + r[2][i] * d[2];
        }
        [c[0] + q[0] / s[0], c[1] + q[1] / s[1], c[2] + q[2] / s[2]]
    })
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    m
}

/// Isotropic in-plane scaling by `factor` about the volume center; factors
/// below 1 shrink the content. Samples falling outside the volume replicate
/// the edge voxel, so constant images stay constant.
pub fn t_zoom(img: &Volume, labels: &[Volume], factor: f64) -> Result<(Volume, Vec<Volume>)> {
    if factor == 1.0 {
        return Ok((img.clone(), labels.to_vec()));
    }
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(crate::Error::invalid(format!("zoom factor must be > 0, got {factor}")));
    }
    let dims = img.dims();
    let c = center(dims);
    let edge = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64);
    warp(img, labels, |p| {
        [
            edge(c[0] + (p[0] as f64 - c[0]) / factor, dims[0]),
            edge(c[1] + (p[1] as f64 - c[1]) / factor, dims[1]),
            p[2] as f64,
        ]
    })
}

/// Random smooth displacement field: per axis, `U(-1, 1)` white noise
/// smoothed by a Gaussian of `sigma` voxels, then scaled so the largest
/// absolute displacement equals `amp[axis]` voxels.
pub fn elastic_field(dims: Dims, sigma: f64, amp: [f64; 3], seed: u64) -> [Vec<f64>; 3] {
    let n: usize = dims.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut field: [Vec<f64>; 3] = Default::default();
    for (axis, f) in field.iter_mut().enumerate() {
        let noise: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
        if amp[axis] == 0.0 {
            *f = vec![0.0; n];
            continue;
        }
        let mut smooth = gaussian_smooth(&noise, dims, [sigma; 3]);
        let peak = smooth.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = if peak > 0.0 { amp[axis] / peak } else { 0.0 };
        smooth.iter_mut().for_each(|v| *v *= scale);
        *f = smooth;
    }
    field
}

pub fn t_elastic(
    img: &Volume,
    labels: &[Volume],
    sigma: f64,
    amp: [f64; 3],
    seed: u64,
) -> Result<(Volume, Vec<Volume>)> {
    if amp.iter().all(|&a| a == 0.0) {
        return Ok((img.clone(), labels.to_vec()));
    }
    let dims = img.dims();
    let [dx, dy, dz] = elastic_field(dims, sigma, amp, seed);
    warp(img, labels, |p| {
        let i = p[0] + dims[0] * (p[1] + dims[1] * p[2]);
        [p[0] as f64 + dx[i], p[1] as f64 + dy[i], p[2] as f64 + dz[i]]
    })
}
