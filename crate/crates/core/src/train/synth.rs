//! Synthetic training volumes: a few anisotropic Gaussian blobs over a
//! constant background, plus band-limited noise that is smoother along some
//! axes than others.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::volume::Volume;

/// Separable Gaussian blur of a z-major volume with one sigma per axis.
fn blur(data: &mut [f64], dims: [usize; 3], sigma: [f64; 3]) {
    let [d, h, w] = dims;
    let strides = [h * w, w, 1];
    for axis in 0..3 {
        let s = sigma[axis];
        if s <= 0.0 {
            continue;
        }
        let r = (3.0 * s).ceil() as isize;
        let kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * s * s)).exp()).collect();
        let norm: f64 = kernel.iter().sum();
        let n = dims[axis] as isize;
        let stride = strides[axis];
        let src = data.to_vec();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let i = (z * h + y) * w + x;
                    let pos = [z, y, x][axis] as isize;
                    let mut acc = 0.0;
                    for (k, kv) in kernel.iter().enumerate() {
                        let p = (pos + k as isize - r).clamp(0, n - 1);
                        acc += kv * src[(i as isize + (p - pos) * stride as isize) as usize];
                    }
                    data[i] = acc / norm;
                }
            }
        }
    }
}

/// One 8-bit synthetic volume.
pub fn synthetic_volume(dims: [usize; 3], rng: &mut impl Rng) -> Volume {
    let n: usize = dims.iter().product();
    let mut data = vec![rng.gen_range(20.0..70.0); n];
    let blobs = rng.gen_range(2..=5);
    for _ in 0..blobs {
        let centre: [f64; 3] = std::array::from_fn(|a| rng.gen_range(0.0..dims[a] as f64));
        let sigma: [f64; 3] = std::array::from_fn(|a| rng.gen_range(0.08..0.35) * dims[a] as f64);
        let amp = rng.gen_range(50.0..150.0) * if rng.gen_bool(0.25) { -0.5 } else { 1.0 };
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let p = [z as f64, y as f64, x as f64];
                    let r2: f64 = (0..3).map(|a| ((p[a] - centre[a]) / sigma[a]).powi(2)).sum();
                    data[(z * dims[1] + y) * dims[2] + x] += amp * (-0.5 * r2).exp();
                }
            }
        }
    }
    let mut noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let sigma: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.5..2.5));
    blur(&mut noise, dims, sigma);
    let sd = (noise.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt().max(1e-12);
    let amp = rng.gen_range(3.0..10.0);
    for (v, e) in data.iter_mut().zip(&noise) {
        *v = (*v + amp * e / sd).round().clamp(0.0, 255.0);
    }
    Volume::from_vec(dims, data, 8, false).expect("valid synthetic geometry")
}

/// Random `edge^3` crop of `v` as a `(1, e, e, e)` tensor.
pub fn random_crop(v: &Volume, edge: [usize; 3], rng: &mut impl Rng) -> crate::nn::Tensor {
    let dims = v.dims();
    let o: [usize; 3] = std::array::from_fn(|a| rng.gen_range(0..=dims[a] - edge[a]));
    crop(v, o, edge)
}

pub fn crop(v: &Volume, origin: [usize; 3], edge: [usize; 3]) -> crate::nn::Tensor {
    let dims = v.dims();
    let mut out = Vec::with_capacity(edge.iter().product());
    for z in 0..edge[0] {
        for y in 0..edge[1] {
            let row = ((origin[0] + z) * dims[1] + origin[1] + y) * dims[2] + origin[2];
            out.extend_from_slice(&v.data()[row..row + edge[2]]);
        }
    }
    crate::nn::Tensor::from_volume_data(edge, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn volumes_are_integer_8bit_and_seeded() {
        let a = synthetic_volume([12, 10, 8], &mut ChaCha8Rng::seed_from_u64(3));
        let b = synthetic_volume([12, 10, 8], &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.fract() == 0.0 && (0.0..=255.0).contains(v)));
        let (lo, hi) = a.data().iter().fold((255.0f64, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
        assert!(hi - lo > 20.0);
    }

    #[test]
    fn blur_preserves_constants_and_smooths() {
        let mut c = vec![4.0; 5 * 6 * 7];
        blur(&mut c, [5, 6, 7], [1.0, 2.0, 0.5]);
        assert!(c.iter().all(|v| (v - 4.0).abs() < 1e-12));
        let mut imp = vec![0.0; 9 * 9 * 9];
        imp[4 * 81 + 4 * 9 + 4] = 1.0;
        blur(&mut imp, [9, 9, 9], [1.0, 1.0, 1.0]);
        assert!(imp[4 * 81 + 4 * 9 + 4] < 0.1);
        assert!((imp.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn crops_read_the_right_samples() {
        let v = Volume::from_vec([3, 4, 5], (0..60).map(f64::from).collect(), 8, false).unwrap();
        let t = crop(&v, [1, 2, 3], [2, 2, 2]);
        assert_eq!(t.data(), &[33.0, 34.0, 38.0, 39.0, 53.0, 54.0, 58.0, 59.0]);
    }
}
