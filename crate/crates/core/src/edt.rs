//! Exact Euclidean distance transform on anisotropic grids.
//!
//! Separable lower-envelope-of-parabolas algorithm (Felzenszwalb and
//! Huttenlocher): one 1D pass per axis over squared distances, each axis
//! scaled by its spacing squared. Distances are measured between voxel
//! centers in mm. The square root is taken once, at the end.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, Spacing, Volume, VolumeKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceSource {
    /// Distance to the nearest foreground voxel; zero on foreground.
    ToForeground,
    /// Distance to the nearest background voxel; zero on background.
    ToBackground,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField {
    dims: Dims,
    spacing: Spacing,
    values: Vec<f64>,
    source: DistanceSource,
}

impl DistanceField {
    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn source(&self) -> DistanceSource {
        self.source
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[x + self.dims[0] * (y + self.dims[1] * z)]
    }

    pub fn into_volume(self) -> Volume {
        Volume::from_parts_unchecked(self.dims, self.spacing, self.values, VolumeKind::Intensity)
    }
}

/// Distance transform of a binary mask using the mask's own spacing.
pub fn edt(mask: &Volume, source: DistanceSource) -> Result<DistanceField> {
    mask.ensure_kind(VolumeKind::Label, "edt")?;
    let seeds: Vec<bool> = match source {
        DistanceSource::ToForeground => mask.data().iter().map(|&v| v != 0.0).collect(),
        DistanceSource::ToBackground => mask.data().iter().map(|&v| v == 0.0).collect(),
    };
    let values = edt_from_seeds(mask.dims(), mask.spacing(), &seeds)?;
    Ok(DistanceField {
        dims: mask.dims(),
        spacing: mask.spacing(),
        values,
        source,
    })
}

/// Euclidean distance (mm) from every voxel to the nearest `true` seed.
pub fn edt_from_seeds(dims: Dims, spacing: Spacing, seeds: &[bool]) -> Result<Vec<f64>> {
    let mut d = squared_edt_from_seeds(dims, spacing, seeds)?;
    for v in &mut d {
        *v = v.sqrt();
    }
    Ok(d)
}

/// Squared Euclidean distance (mm^2) to the nearest `true` seed.
pub fn squared_edt_from_seeds(dims: Dims, spacing: Spacing, seeds: &[bool]) -> Result<Vec<f64>> {
    let n: usize = dims.iter().product();
    if seeds.len() != n {
        return Err(Error::invalid(format!(
            "seed mask has {} entries, grid {dims:?} has {n}",
            seeds.len()
        )));
    }
    if !seeds.iter().any(|&s| s) {
        return Err(Error::NoSeeds);
    }
    let mut f: Vec<f64> = seeds
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();

    let [nx, ny, nz] = dims;
    let longest = nx.max(ny).max(nz);
    let mut scratch = Envelope::with_capacity(longest);
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];

    let strides = [1, nx, nx * ny];
    for axis in 0..3 {
        let len = dims[axis];
        if len == 1 {
            continue;
        }
        let w = spacing[axis] * spacing[axis];
        let stride = strides[axis];
        // enumerate the start index of every line along `axis`
        let (oa, ob) = match axis {
            0 => ((ny, nx), (nz, nx * ny)),
            1 => ((nx, 1), (nz, nx * ny)),
            _ => ((nx, 1), (ny, nx)),
        };
        for b in 0..ob.0 {
            for a in 0..oa.0 {
                let start = a * oa.1 + b * ob.1;
                for i in 0..len {
                    line[i] = f[start + i * stride];
                }
                scratch.transform(&line[..len], w, &mut out[..len]);
                for i in 0..len {
                    f[start + i * stride] = out[i];
                }
            }
        }
    }
    Ok(f)
}

/// Reusable buffers for the 1D lower-envelope transform.
struct Envelope {
    vertices: Vec<usize>,
    bounds: Vec<f64>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Envelope {
            vertices: Vec::with_capacity(n),
            bounds: Vec::with_capacity(n + 1),
        }
    }

    /// out[q] = min_p w * (q - p)^2 + f[p], skipping infinite f[p].
    fn transform(&mut self, f: &[f64], w: f64, out: &mut [f64]) {
        let v = &mut self.vertices;
        let z = &mut self.bounds;
        v.clear();
        z.clear();
        let parabola_cut = |p: usize, q: usize| {
            let (pf, qf) = (p as f64, q as f64);
            ((f[q] + w * qf * qf) - (f[p] + w * pf * pf)) / (2.0 * w * (qf - pf))
        };
        for q in 0..f.len() {
            if f[q].is_infinite() {
                continue;
            }
            if v.is_empty() {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                continue;
            }
            let mut s = parabola_cut(*v.last().unwrap(), q);
            while s <= *z.last().unwrap() {
                v.pop();
                z.pop();
                if v.is_empty() {
                    break;
                }
                s = parabola_cut(*v.last().unwrap(), q);
            }
            if v.is_empty() {
                v.push(q);
                z.push(f64::NEG_INFINITY);
            } else {
                v.push(q);
                z.push(s);
            }
        }
        if v.is_empty() {
            out.fill(f64::INFINITY);
            return;
        }
        let mut k = 0;
        for (q, o) in out.iter_mut().enumerate() {
            let qf = q as f64;
            while k + 1 < v.len() && z[k + 1] < qf {
                k += 1;
            }
            let d = qf - v[k] as f64;
            *o = w * d * d + f[v[k]];
        }
    }
}
