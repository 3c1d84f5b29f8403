//! Uniform scalar quantization and its training-time surrogates.

use rand::Rng;

use crate::error::{Error, Result};

/// Round half away from zero. The one rounding rule used by every integer
/// path in the codec.
#[inline]
pub fn round_half_away(v: f64) -> f64 {
    v.round()
}

/// Relaxation used in place of rounding while training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Surrogate {
    #[default]
    UniformNoise,
    StraightThrough,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantConfig {
    qs: f64,
    pub surrogate: Surrogate,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig { qs: 1.0, surrogate: Surrogate::UniformNoise }
    }
}

impl QuantConfig {
    pub fn new(qs: f64, surrogate: Surrogate) -> Result<Self> {
        if !(qs > 0.0 && qs.is_finite()) {
            return Err(Error::config(format!("quantization step must be positive, got {qs}")));
        }
        Ok(QuantConfig { qs, surrogate })
    }

    pub fn qs(&self) -> f64 {
        self.qs
    }
}

pub fn quantize_value(y: f64, qs: f64) -> i64 {
    round_half_away(y / qs) as i64
}

pub fn quantize(y: &[f64], cfg: &QuantConfig) -> Vec<i64> {
    y.iter().map(|&v| quantize_value(v, cfg.qs)).collect()
}

pub fn dequantize(q: &[i64], cfg: &QuantConfig) -> Vec<f64> {
    q.iter().map(|&v| v as f64 * cfg.qs).collect()
}

/// Additive noise drawn uniformly from `[-qs/2, qs/2]`, one value per element.
pub fn uniform_noise(n: usize, qs: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-0.5..=0.5) * qs).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rounding_examples() {
        let unit = QuantConfig::default();
        assert_eq!(quantize(&[3.7, -2.5, 2.5, -0.4], &unit), vec![4, -3, 3, 0]);
        let four = QuantConfig::new(4.0, Surrogate::UniformNoise).unwrap();
        assert_eq!(quantize(&[10.2], &four), vec![3]);
        assert_eq!(dequantize(&[3], &four), vec![12.0]);
        assert_eq!(dequantize(&[4], &unit), vec![4.0]);
    }

    #[test]
    fn unit_step_is_identity_on_integers() {
        let unit = QuantConfig::default();
        let ints: Vec<f64> = (-50..50).map(f64::from).collect();
        assert_eq!(dequantize(&quantize(&ints, &unit), &unit), ints);
    }

    #[test]
    fn rejects_bad_step() {
        assert!(QuantConfig::new(0.0, Surrogate::UniformNoise).is_err());
        assert!(QuantConfig::new(f64::NAN, Surrogate::UniformNoise).is_err());
    }

    #[test]
    fn noise_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = uniform_noise(10_000, 4.0, &mut rng);
        assert!(n.iter().all(|v| v.abs() <= 2.0));
        assert!(n.iter().any(|v| v.abs() > 1.9));
    }

    proptest! {
        #[test]
        fn error_bounded_by_half_step(y in -1e6f64..1e6, qs in 1e-3f64..100.0) {
            let q = quantize_value(y, qs);
            prop_assert!((q as f64 * qs - y).abs() <= qs / 2.0 + 1e-12 * y.abs().max(1.0));
        }

        #[test]
        fn monotone(a in -1e4f64..1e4, d in 0.0f64..100.0, qs in 1e-2f64..10.0) {
            prop_assert!(quantize_value(a, qs) <= quantize_value(a + d, qs));
        }
    }
}
