use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::volume::{Dims, Volume, VolumeKind};

use super::monomial_count;

/// Separable Gaussian smoothing with per-axis `sigma` in voxels.
/// Kernels are truncated at `ceil(3 sigma)` and renormalized; borders
/// replicate the edge value. Axes with `sigma <= 0` are left alone.
pub fn gaussian_smooth(data: &[f64], dims: Dims, sigma: [f64; 3]) -> Vec<f64> {
    let mut cur = data.to_vec();
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut line = Vec::new();
    for axis in 0..3 {
        let s = sigma[axis];
        let len = dims[axis];
        if s <= 0.0 || len == 1 {
            continue;
        }
        let radius = (3.0 * s).ceil() as isize;
        let mut kernel: Vec<f64> = (-radius..=radius)
            .map(|k| (-(k * k) as f64 / (2.0 * s * s)).exp())
            .collect();
        let mass: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= mass);

        let stride = strides[axis];
        let n_lines = cur.len() / len;
        let mut next = vec![0.0; cur.len()];
        line.resize(len, 0.0);
        for l in 0..n_lines {
            // decompose the line number into the two other coordinates
            let start = match axis {
                0 => l * len,
                1 => (l % dims[0]) + (l / dims[0]) * dims[0] * dims[1],
                _ => l,
            };
            for i in 0..len {
                line[i] = cur[start + i * stride];
            }
            for i in 0..len {
                let mut acc = 0.0;
                for (j, &k) in kernel.iter().enumerate() {
                    let src = (i as isize + j as isize - radius).clamp(0, len as isize - 1);
                    acc += k * line[src as usize];
                }
                next[start + i * stride] = acc;
            }
        }
        cur = next;
    }
    cur
}

/// `exp(P(x, y, z))` with `P` the polynomial of total degree `order` on
/// coordinates normalized to [-1, 1]. Coefficients are ordered by total
/// degree, then by powers of x, then y.
pub fn bias_field(dims: Dims, order: u32, coeffs: &[f64]) -> Result<Vec<f64>> {
    if coeffs.len() != monomial_count(order) {
        return Err(Error::invalid(format!(
            "bias of order {order} needs {} coefficients, got {}",
            monomial_count(order),
            coeffs.len()
        )));
    }
    let mut powers = Vec::with_capacity(coeffs.len());
    for deg in 0..=order {
        for i in (0..=deg).rev() {
            for j in (0..=deg - i).rev() {
                powers.push((i as i32, j as i32, (deg - i - j) as i32));
            }
        }
    }
    let norm = |i: usize, n: usize| {
        if n == 1 {
            0.0
        } else {
            2.0 * i as f64 / (n - 1) as f64 - 1.0
        }
    };
    let mut field = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[2] {
        let zn = norm(z, dims[2]);
        for y in 0..dims[1] {
            let yn = norm(y, dims[1]);
            for x in 0..dims[0] {
                let xn = norm(x, dims[0]);
                let p: f64 = powers
                    .iter()
                    .zip(coeffs)
                    .map(|(&(i, j, k), c)| c * xn.powi(i) * yn.powi(j) * zn.powi(k))
                    .sum();
                field.push(p.exp());
            }
        }
    }
    Ok(field)
}

/// Multiplicative smooth bias field; see [`bias_field`].
pub fn t_bias(img: &Volume, order: u32, coeffs: &[f64]) -> Result<Volume> {
    if coeffs.iter().all(|&c| c == 0.0) && coeffs.len() == monomial_count(order) {
        return Ok(img.clone());
    }
    let field = bias_field(img.dims(), order, coeffs)?;
    let data = img.data().iter().zip(&field).map(|(v, f)| v * f).collect();
    img.with_data(data, VolumeKind::Intensity)
}

pub fn t_blur(img: &Volume, sigma: f64) -> Result<Volume> {
    if sigma < 0.0 {
        return Err(Error::invalid(format!("blur sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let data = gaussian_smooth(img.data(), img.dims(), [sigma; 3]);
    img.with_data(data, VolumeKind::Intensity)
}

/// Power remap `u -> sign(u) |u|^gamma` of min-max normalized intensities,
/// mapped back to the original range.
pub fn t_contrast(img: &Volume, gamma: f64) -> Result<Volume> {
    if !(gamma > 0.0) {
        return Err(Error::invalid(format!("contrast gamma must be > 0, got {gamma}")));
    }
    let (lo, hi) = img
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if gamma == 1.0 || hi <= lo {
        return Ok(img.clone());
    }
    let span = hi - lo;
    let data = img
        .data()
        .iter()
        .map(|&v| {
            let u = (v - lo) / span;
            u.signum() * u.abs().powf(gamma) * span + lo
        })
        .collect();
    img.with_data(data, VolumeKind::Intensity)
}

pub fn t_shift(img: &Volume, delta: f64) -> Result<Volume> {
    if delta == 0.0 {
        return Ok(img.clone());
    }
    let data = img.data().iter().map(|v| v + delta).collect();
    img.with_data(data, VolumeKind::Intensity)
}

/// Adds i.i.d. `N(mu, sigma^2)` noise.
pub fn t_noise(img: &Volume, mu: f64, sigma: f64, seed: u64) -> Result<Volume> {
    if mu == 0.0 && sigma == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(mu, sigma)
        .map_err(|e| Error::invalid(format!("noise parameters: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = img
        .data()
        .iter()
        .map(|v| v + normal.sample(&mut rng))
        .collect();
    img.with_data(data, VolumeKind::Intensity)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_img(dims: Dims, seed: u64) -> Volume {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::intensity_from_fn(dims, [1.0; 3], |_, _, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn tiny_blur_is_identity() {
        let img = random_img([8, 8, 8], 1);
        let out = t_blur(&img, 0.05).unwrap();
        let dev = img
            .data()
            .iter()
            .zip(out.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(dev < 1e-6, "{dev}");
    }

    #[test]
    fn blur_preserves_constants_and_mass_interior() {
        let c = Volume::filled([9, 7, 5], [1.0; 3], 2.0, VolumeKind::Intensity).unwrap();
        let out = t_blur(&c, 1.5).unwrap();
        assert!(out.data().iter().all(|v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn shift_moves_mean() {
        let img = random_img([6, 6, 6], 2);
        let out = t_shift(&img, 0.1).unwrap();
        let mean = |v: &Volume| v.data().iter().sum::<f64>() / v.len() as f64;
        assert!((mean(&out) - mean(&img) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn noise_is_centered() {
        let img = Volume::zeros([32, 32, 32], [1.0; 3], VolumeKind::Intensity).unwrap();
        let out = t_noise(&img, 0.0, 0.02, 9).unwrap();
        let n = out.len() as f64;
        let mean = out.data().iter().sum::<f64>() / n;
        assert!(mean.abs() < 3.0 * 0.02 / n.sqrt(), "{mean}");
        assert_eq!(out, t_noise(&img, 0.0, 0.02, 9).unwrap());
    }

    #[test]
    fn bias_field_bounds() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let coeffs: Vec<f64> = (0..20).map(|_| rng.random_range(-0.06..=0.06)).collect();
        let bound: f64 = coeffs.iter().map(|c: &f64| c.abs()).sum();
        let field = bias_field([9, 8, 7], 3, &coeffs).unwrap();
        for f in &field {
            assert!(*f >= (-bound).exp() - 1e-15 && *f <= bound.exp() + 1e-15);
        }
        let c = Volume::filled([9, 8, 7], [1.0; 3], 1.0, VolumeKind::Intensity).unwrap();
        let out = t_bias(&c, 3, &coeffs).unwrap();
        let (lo, hi) = out
            .data()
            .iter()
            .fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(hi - lo > 1e-3);
        assert_eq!(t_bias(&c, 3, &[0.0; 20]).unwrap(), c);
        assert!(t_bias(&c, 3, &[0.1; 4]).is_err());
    }

    #[test]
    fn contrast_keeps_range() {
        let img = random_img([6, 6, 6], 3);
        let out = t_contrast(&img, 1.3).unwrap();
        let range = |v: &Volume| {
            v.data()
                .iter()
                .fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)))
        };
        let (a, b) = range(&img);
        let (c, d) = range(&out);
        assert!((a - c).abs() < 1e-12 && (b - d).abs() < 1e-12);
        assert_eq!(t_contrast(&img, 1.0).unwrap(), img);
    }
}
