//! Distortion and rate measurements.

use crate::error::{Error, Result};
use crate::volume::Volume;

pub fn mse(x: &Volume, y: &Volume) -> Result<f64> {
    if !x.same_geometry(y) {
        return Err(Error::shape(format!("volumes differ in dims: {:?} vs {:?}", x.dims(), y.dims())));
    }
    let sum: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / x.len() as f64)
}

/// `10 log10(peak^2 / mse)` with `peak = 2^bit_depth - 1`; infinite when the
/// volumes are identical.
pub fn psnr_from_mse(mse: f64, bit_depth: u8) -> f64 {
    if mse == 0.0 {
        return f64::INFINITY;
    }
    let peak = ((1u64 << bit_depth) - 1) as f64;
    10.0 * (peak * peak / mse).log10()
}

pub fn psnr(x: &Volume, y: &Volume) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, y)?, x.bit_depth()))
}

/// Bits per sample of a stream of `bytes` bytes.
pub fn bpp(bytes: usize, samples: usize) -> f64 {
    8.0 * bytes as f64 / samples as f64
}

pub fn format_psnr(p: f64) -> String {
    if p.is_infinite() {
        "inf".to_string()
    } else {
        format!("{p:.2}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_values() {
        let x = Volume::zeros([2, 2, 2], 8, false);
        assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);
        assert_eq!(format_psnr(psnr(&x, &x).unwrap()), "inf");
        let y = Volume::from_vec([2, 2, 2], vec![1.0; 8], 8, false).unwrap();
        let p = psnr(&x, &y).unwrap();
        assert!((p - 48.1308).abs() < 1e-3, "{p}");
        assert_eq!(format_psnr(p), "48.13");
        assert_eq!(bpp(32768, 64 * 64 * 64), 1.0);
        let z = Volume::zeros([2, 2, 3], 8, false);
        assert!(matches!(psnr(&x, &z), Err(Error::Shape(_))));
    }
}
