//! Channel-major 3D activations and the layer kernels of the network.
//!
//! A [`Tensor`] stores `channels` volumes back to back, each x-fastest like
//! [`crate::Volume`]. Convolutions use zero padding `k / 2`.

use crate::volume::Dims;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub dims: Dims,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, dims: Dims) -> Self {
        let n = channels * dims.iter().product::<usize>();
        Tensor {
            channels,
            dims,
            data: vec![0.0; n],
        }
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }
}

/// Shape of one convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.kernel.pow(3)
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_dims(&self, d: Dims) -> Dims {
        let (k, s, p) = (self.kernel, self.stride, self.pad());
        d.map(|n| (n + 2 * p - k) / s + 1)
    }
}

/// Output indices `o` in `lo..hi` whose input tap `o * s + kk - p` is inside
/// `0..n_in`.
fn valid(n_in: usize, n_out: usize, s: usize, kk: usize, p: usize) -> (usize, usize) {
    let lo = if kk >= p { 0 } else { (p - kk).div_ceil(s) };
    let hi = if n_in + p < kk + 1 {
        0
    } else {
        ((n_in - 1 + p - kk) / s + 1).min(n_out)
    };
    (lo, hi.max(lo))
}

struct Taps {
    z: (usize, usize),
    y: (usize, usize),
    x: (usize, usize),
}

fn taps(sh: &ConvShape, din: Dims, dout: Dims, kz: usize, ky: usize, kx: usize) -> Taps {
    let (s, p) = (sh.stride, sh.pad());
    Taps {
        z: valid(din[2], dout[2], s, kz, p),
        y: valid(din[1], dout[1], s, ky, p),
        x: valid(din[0], dout[0], s, kx, p),
    }
}

pub fn conv_forward(x: &Tensor, w: &[f64], b: &[f64], sh: &ConvShape) -> Tensor {
    debug_assert_eq!(x.channels, sh.cin);
    debug_assert_eq!(w.len(), sh.weight_len());
    let din = x.dims;
    let dout = sh.out_dims(din);
    let (nin, nout) = (x.voxels(), dout.iter().product::<usize>());
    let (k, s, p) = (sh.kernel, sh.stride, sh.pad());
    let mut out = Tensor::zeros(sh.cout, dout);
    for co in 0..sh.cout {
        let o = &mut out.data[co * nout..(co + 1) * nout];
        o.iter_mut().for_each(|v| *v = b[co]);
        for ci in 0..sh.cin {
            let inp = &x.data[ci * nin..(ci + 1) * nin];
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w[(((co * sh.cin + ci) * k + kz) * k + ky) * k + kx];
                        let t = taps(sh, din, dout, kz, ky, kx);
                        for oz in t.z.0..t.z.1 {
                            let iz = oz * s + kz - p;
                            for oy in t.y.0..t.y.1 {
                                let iy = oy * s + ky - p;
                                let orow = (oz * dout[1] + oy) * dout[0];
                                let irow = (iz * din[1] + iy) * din[0];
                                let (xl, xh) = t.x;
                                if s == 1 {
                                    let src = &inp[irow + xl + kx - p..irow + xh + kx - p];
                                    let dst = &mut o[orow + xl..orow + xh];
                                    for (d, v) in dst.iter_mut().zip(src) {
                                        *d += wv * v;
                                    }
                                } else {
                                    for ox in xl..xh {
                                        o[orow + ox] += wv * inp[irow + ox * s + kx - p];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients into `dw`, `db`; returns the input
/// gradient when `need_dx`.
pub fn conv_backward(
    x: &Tensor,
    w: &[f64],
    dout: &Tensor,
    sh: &ConvShape,
    dw: &mut [f64],
    db: &mut [f64],
    need_dx: bool,
) -> Option<Tensor> {
    let din = x.dims;
    let dd = dout.dims;
    let (nin, nout) = (x.voxels(), dout.voxels());
    let (k, s, p) = (sh.kernel, sh.stride, sh.pad());
    let mut dx = need_dx.then(|| Tensor::zeros(sh.cin, din));
    for co in 0..sh.cout {
        let g = &dout.data[co * nout..(co + 1) * nout];
        db[co] += g.iter().sum::<f64>();
        for ci in 0..sh.cin {
            let inp = &x.data[ci * nin..(ci + 1) * nin];
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let wi = (((co * sh.cin + ci) * k + kz) * k + ky) * k + kx;
                        let wv = w[wi];
                        let t = taps(sh, din, dd, kz, ky, kx);
                        let mut acc = 0.0;
                        for oz in t.z.0..t.z.1 {
                            let iz = oz * s + kz - p;
                            for oy in t.y.0..t.y.1 {
                                let iy = oy * s + ky - p;
                                let orow = (oz * dd[1] + oy) * dd[0];
                                let irow = (iz * din[1] + iy) * din[0];
                                let (xl, xh) = t.x;
                                if s == 1 {
                                    let a = irow + xl + kx - p;
                                    let src = &inp[a..a + (xh - xl)];
                                    let gr = &g[orow + xl..orow + xh];
                                    acc += src.iter().zip(gr).map(|(u, v)| u * v).sum::<f64>();
                                    if let Some(dx) = dx.as_mut() {
                                        let dst = &mut dx.data[ci * nin + a..ci * nin + a + (xh - xl)];
                                        for (d, v) in dst.iter_mut().zip(gr) {
                                            *d += wv * v;
                                        }
                                    }
                                } else {
                                    for ox in xl..xh {
                                        let ii = irow + ox * s + kx - p;
                                        let gv = g[orow + ox];
                                        acc += inp[ii] * gv;
                                        if let Some(dx) = dx.as_mut() {
                                            dx.data[ci * nin + ii] += wv * gv;
                                        }
                                    }
                                }
                            }
                        }
                        dw[wi] += acc;
                    }
                }
            }
        }
    }
    dx
}

pub fn relu_inplace(t: &mut Tensor) {
    t.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes `grad` where the ReLU output was not positive.
pub fn relu_backward(out: &Tensor, grad: &mut Tensor) {
    for (g, &o) in grad.data.iter_mut().zip(&out.data) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Nearest-neighbour upsampling by 2 along every axis.
pub fn upsample2(t: &Tensor) -> Tensor {
    let d = t.dims;
    let od = d.map(|n| 2 * n);
    let (n, on) = (t.voxels(), od.iter().product::<usize>());
    let mut out = Tensor::zeros(t.channels, od);
    for c in 0..t.channels {
        let src = &t.data[c * n..(c + 1) * n];
        let dst = &mut out.data[c * on..(c + 1) * on];
        for z in 0..od[2] {
            for y in 0..od[1] {
                let srow = ((z / 2) * d[1] + y / 2) * d[0];
                let drow = (z * od[1] + y) * od[0];
                for x in 0..od[0] {
                    dst[drow + x] = src[srow + x / 2];
                }
            }
        }
    }
    out
}

pub fn upsample2_backward(grad: &Tensor) -> Tensor {
    let od = grad.dims;
    let d = od.map(|n| n / 2);
    let (n, on) = (d.iter().product::<usize>(), grad.voxels());
    let mut out = Tensor::zeros(grad.channels, d);
    for c in 0..grad.channels {
        let src = &grad.data[c * on..(c + 1) * on];
        let dst = &mut out.data[c * n..(c + 1) * n];
        for z in 0..od[2] {
            for y in 0..od[1] {
                let drow = ((z / 2) * d[1] + y / 2) * d[0];
                let srow = (z * od[1] + y) * od[0];
                for x in 0..od[0] {
                    dst[drow + x / 2] += src[srow + x];
                }
            }
        }
    }
    out
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(c: usize, d: Dims, rng: &mut ChaCha8Rng) -> Tensor {
        let mut t = Tensor::zeros(c, d);
        t.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        t
    }

    /// Direct definition of a zero-padded strided convolution.
    fn naive(x: &Tensor, w: &[f64], b: &[f64], sh: &ConvShape) -> Tensor {
        let d = x.dims;
        let od = sh.out_dims(d);
        let k = sh.kernel as isize;
        let p = (sh.kernel / 2) as isize;
        let mut out = Tensor::zeros(sh.cout, od);
        let on: usize = od.iter().product();
        for co in 0..sh.cout {
            for oz in 0..od[2] {
                for oy in 0..od[1] {
                    for ox in 0..od[0] {
                        let mut acc = b[co];
                        for ci in 0..sh.cin {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iz = (oz * sh.stride) as isize + kz - p;
                                        let iy = (oy * sh.stride) as isize + ky - p;
                                        let ix = (ox * sh.stride) as isize + kx - p;
                                        if iz < 0 || iy < 0 || ix < 0 {
                                            continue;
                                        }
                                        let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                        if iz >= d[2] || iy >= d[1] || ix >= d[0] {
                                            continue;
                                        }
                                        let wi = ((((co * sh.cin + ci) as isize * k + kz) * k + ky) * k
                                            + kx) as usize;
                                        acc += w[wi] * x.channel(ci)[ix + d[0] * (iy + d[1] * iz)];
                                    }
                                }
                            }
                        }
                        out.data[co * on + ox + od[0] * (oy + od[1] * oz)] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, s) in [(3, 1), (3, 2), (1, 1)] {
            let sh = ConvShape {
                cin: 2,
                cout: 3,
                kernel: k,
                stride: s,
            };
            let x = rand_tensor(2, [6, 4, 4], &mut rng);
            let w: Vec<f64> = (0..sh.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b = vec![0.1, -0.2, 0.3];
            let fast = conv_forward(&x, &w, &b, &sh);
            let slow = naive(&x, &w, &b, &sh);
            assert_eq!(fast.dims, slow.dims);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_the_adjoint() {
        // <conv(x), g> is linear in x and w, so its gradients are exact
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for s in [1, 2] {
            let sh = ConvShape {
                cin: 2,
                cout: 2,
                kernel: 3,
                stride: s,
            };
            let x = rand_tensor(2, [4, 4, 4], &mut rng);
            let w: Vec<f64> = (0..sh.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b = vec![0.0; 2];
            let g = rand_tensor(2, sh.out_dims(x.dims), &mut rng);
            let inner = |x: &Tensor, w: &[f64]| -> f64 {
                conv_forward(x, w, &b, &sh).data.iter().zip(&g.data).map(|(a, b)| a * b).sum()
            };
            let mut dw = vec![0.0; w.len()];
            let mut db = vec![0.0; 2];
            let dx = conv_backward(&x, &w, &g, &sh, &mut dw, &mut db, true).unwrap();
            for i in [0, 7, 30, x.data.len() - 1] {
                let mut xp = x.clone();
                xp.data[i] += 1.0;
                assert!((inner(&xp, &w) - inner(&x, &w) - dx.data[i]).abs() < 1e-10);
            }
            for i in [0, 13, w.len() - 1] {
                let mut wp = w.clone();
                wp[i] += 1.0;
                assert!((inner(&x, &wp) - inner(&x, &w) - dw[i]).abs() < 1e-10);
            }
            assert!((db[1] - g.channel(1).iter().sum::<f64>()).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = rand_tensor(2, [2, 3, 2], &mut rng);
        let u = upsample2(&t);
        assert_eq!(u.dims, [4, 6, 4]);
        let back = upsample2_backward(&u);
        for (a, b) in back.data.iter().zip(&t.data) {
            assert!((a - 8.0 * b).abs() < 1e-12);
        }
    }
}
