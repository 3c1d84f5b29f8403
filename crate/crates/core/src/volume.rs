//! Volumetric sample containers, raw file I/O, min-max normalization and
//! block tiling.
//!
//! Samples are held as `f64` in z-major order (`index = (z * H + y) * W + x`).
//! Two on-disk layouts are supported: headerless little-endian raw data whose
//! geometry is supplied by the caller, and the self-describing `VXW0` layout
//! with a 32-byte header.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const VXW_MAGIC: &[u8; 4] = b"VXW0";
pub const VXW_HEADER_LEN: usize = 32;

/// Default block edge, matching the 64^3 training crops.
pub const DEFAULT_BLOCK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    data: Vec<f64>,
    bit_depth: u8,
    signed: bool,
    provenance_scale: Option<(f64, f64)>,
}

impl Volume {
    pub fn zeros(dims: [usize; 3], bit_depth: u8, signed: bool) -> Self {
        let n = dims.iter().product();
        Volume { dims, data: vec![0.0; n], bit_depth, signed, provenance_scale: None }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<f64>, bit_depth: u8, signed: bool) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Geometry(format!("volume dims must be positive, got {dims:?}")));
        }
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::shape(format!(
                "volume data has {} samples, dims {dims:?} need {}",
                data.len(),
                dims.iter().product::<usize>()
            )));
        }
        check_depth(bit_depth)?;
        Ok(Volume { dims, data, bit_depth, signed, provenance_scale: None })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn bit_depth(&self) -> u8 {
        self.bit_depth
    }

    pub fn signed(&self) -> bool {
        self.signed
    }

    pub fn provenance_scale(&self) -> Option<(f64, f64)> {
        self.provenance_scale
    }

    pub fn with_provenance_scale(mut self, scale: Option<(f64, f64)>) -> Self {
        self.provenance_scale = scale;
        self
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, v: f64) {
        let i = self.index(z, y, x);
        self.data[i] = v;
    }

    /// Representable sample interval for this volume's bit depth and signedness.
    pub fn sample_range(&self) -> (f64, f64) {
        sample_range(self.bit_depth, self.signed)
    }

    /// Peak value used for PSNR: `2^bit_depth - 1`.
    pub fn peak(&self) -> f64 {
        ((1u64 << self.bit_depth) - 1) as f64
    }

    /// Rounds and clamps every sample into the representable range.
    pub fn quantize_samples(&mut self) {
        let (lo, hi) = self.sample_range();
        for v in &mut self.data {
            *v = crate::quant::round_half_away(*v).clamp(lo, hi);
        }
    }

    pub fn same_geometry(&self, other: &Volume) -> bool {
        self.dims == other.dims
    }
}

pub fn sample_range(bit_depth: u8, signed: bool) -> (f64, f64) {
    let b = u32::from(bit_depth);
    if signed {
        (-((1i64 << (b - 1)) as f64), ((1i64 << (b - 1)) - 1) as f64)
    } else {
        (0.0, ((1u64 << b) - 1) as f64)
    }
}

fn check_depth(bit_depth: u8) -> Result<()> {
    match bit_depth {
        8 | 16 | 32 => Ok(()),
        other => Err(Error::config(format!("unsupported bit depth {other}; expected 8, 16 or 32"))),
    }
}

fn decode_samples(bytes: &[u8], bit_depth: u8, signed: bool) -> Vec<f64> {
    match (bit_depth, signed) {
        (8, false) => bytes.iter().map(|&b| f64::from(b)).collect(),
        (8, true) => bytes.iter().map(|&b| f64::from(b as i8)).collect(),
        (16, false) => bytes.chunks_exact(2).map(|c| f64::from(u16::from_le_bytes([c[0], c[1]]))).collect(),
        (16, true) => bytes.chunks_exact(2).map(|c| f64::from(i16::from_le_bytes([c[0], c[1]]))).collect(),
        (32, false) => bytes
            .chunks_exact(4)
            .map(|c| f64::from(u32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect(),
        (32, true) => bytes
            .chunks_exact(4)
            .map(|c| f64::from(i32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect(),
        _ => unreachable!("bit depth validated by caller"),
    }
}

fn encode_samples(v: &Volume, out: &mut Vec<u8>) {
    let (lo, hi) = v.sample_range();
    for &s in &v.data {
        let s = crate::quant::round_half_away(s).clamp(lo, hi);
        match (v.bit_depth, v.signed) {
            (8, false) => out.push(s as u8),
            (8, true) => out.push(s as i8 as u8),
            (16, false) => out.extend_from_slice(&(s as u16).to_le_bytes()),
            (16, true) => out.extend_from_slice(&(s as i16).to_le_bytes()),
            (32, false) => out.extend_from_slice(&(s as u32).to_le_bytes()),
            (32, true) => out.extend_from_slice(&(s as i32).to_le_bytes()),
            _ => unreachable!(),
        }
    }
}

/// Parses headerless little-endian samples with caller-supplied geometry.
pub fn parse_raw(bytes: &[u8], dims: [usize; 3], bit_depth: u8, signed: bool) -> Result<Volume> {
    check_depth(bit_depth)?;
    let expected = dims.iter().product::<usize>() * usize::from(bit_depth / 8);
    if bytes.len() != expected {
        return Err(Error::format(format!(
            "raw payload is {} bytes, dims {dims:?} at {bit_depth} bits need {expected}",
            bytes.len()
        )));
    }
    Volume::from_vec(dims, decode_samples(bytes, bit_depth, signed), bit_depth, signed)
}

pub fn load_raw(path: impl AsRef<Path>, dims: [usize; 3], bit_depth: u8, signed: bool) -> Result<Volume> {
    check_depth(bit_depth)?;
    let bytes = fs::read(path)?;
    parse_raw(&bytes, dims, bit_depth, signed)
}

pub fn save_raw(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    let mut out = Vec::with_capacity(v.len() * usize::from(v.bit_depth / 8));
    encode_samples(v, &mut out);
    fs::write(path, out)?;
    Ok(())
}

/// Serializes a volume with the 32-byte `VXW0` header.
pub fn to_vxw_bytes(v: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(VXW_HEADER_LEN + v.len() * usize::from(v.bit_depth / 8));
    out.extend_from_slice(VXW_MAGIC);
    for d in v.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(v.bit_depth);
    out.push(u8::from(v.signed));
    out.extend_from_slice(&[0u8; 14]);
    encode_samples(v, &mut out);
    out
}

pub fn from_vxw_bytes(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < VXW_HEADER_LEN || &bytes[..4] != VXW_MAGIC {
        return Err(Error::format("missing VXW0 header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize;
    let dims = [u32_at(4), u32_at(8), u32_at(12)];
    let bit_depth = bytes[16];
    let signed = match bytes[17] {
        0 => false,
        1 => true,
        f => return Err(Error::format(format!("invalid signedness flag {f}"))),
    };
    parse_raw(&bytes[VXW_HEADER_LEN..], dims, bit_depth, signed)
}

pub fn read_vxw(path: impl AsRef<Path>) -> Result<Volume> {
    from_vxw_bytes(&fs::read(path)?)
}

pub fn write_vxw(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    fs::write(path, to_vxw_bytes(v))?;
    Ok(())
}

const NORM_PEAK: f64 = 65535.0;

/// Rescales samples to `[0, 65535]`, rounds, and records the original
/// `(min, max)` so the mapping can be undone.
pub fn normalize_minmax(v: &Volume) -> Volume {
    let (min, max) = v
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| (lo.min(s), hi.max(s)));
    let span = max - min;
    let data = v
        .data
        .iter()
        .map(|&s| if span > 0.0 { crate::quant::round_half_away((s - min) / span * NORM_PEAK) } else { 0.0 })
        .collect();
    Volume { dims: v.dims, data, bit_depth: 16, signed: false, provenance_scale: Some((min, max)) }
}

/// Inverse of [`normalize_minmax`]; the result keeps real values and carries
/// no provenance scale. Volumes without a recorded scale are returned as-is.
pub fn denormalize(v: &Volume) -> Volume {
    match v.provenance_scale {
        None => v.clone(),
        Some((min, max)) => {
            let span = max - min;
            let data = v.data.iter().map(|&s| min + s / NORM_PEAK * span).collect();
            Volume { dims: v.dims, data, bit_depth: 32, signed: min < 0.0, provenance_scale: None }
        }
    }
}

/// Partition of a volume into equally sized blocks, with replicate padding on
/// the high side of each axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockGrid {
    pub block_dims: [usize; 3],
    pub counts: [usize; 3],
    pub padding: [usize; 3],
}

impl BlockGrid {
    /// Builds the grid covering `dims`; every block edge must be divisible by
    /// `2^levels`.
    pub fn new(dims: [usize; 3], block_dims: [usize; 3], levels: usize) -> Result<Self> {
        let unit = 1usize << levels;
        for (&b, axis) in block_dims.iter().zip(["z", "y", "x"]) {
            if b == 0 || b % unit != 0 {
                return Err(Error::Geometry(format!(
                    "block edge {b} along {axis} is not a positive multiple of 2^{levels}"
                )));
            }
        }
        if dims.contains(&0) {
            return Err(Error::Geometry(format!("volume dims must be positive, got {dims:?}")));
        }
        let counts = [0, 1, 2].map(|a| dims[a].div_ceil(block_dims[a]));
        let padding = [0, 1, 2].map(|a| counts[a] * block_dims[a] - dims[a]);
        Ok(BlockGrid { block_dims, counts, padding })
    }

    pub fn block_count(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn padded_dims(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.counts[a] * self.block_dims[a])
    }

    /// Block origins in z-major block order.
    pub fn origins(&self) -> Vec<[usize; 3]> {
        let mut out = Vec::with_capacity(self.block_count());
        for bz in 0..self.counts[0] {
            for by in 0..self.counts[1] {
                for bx in 0..self.counts[2] {
                    out.push([bz * self.block_dims[0], by * self.block_dims[1], bx * self.block_dims[2]]);
                }
            }
        }
        out
    }
}

/// Cuts `v` into blocks, replicating the last sample along each axis into the
/// padded region.
pub fn tile(v: &Volume, grid: &BlockGrid) -> Vec<Volume> {
    let [d, h, w] = v.dims;
    let [bd, bh, bw] = grid.block_dims;
    grid.origins()
        .into_iter()
        .map(|[oz, oy, ox]| {
            let mut data = Vec::with_capacity(bd * bh * bw);
            for z in 0..bd {
                let sz = (oz + z).min(d - 1);
                for y in 0..bh {
                    let sy = (oy + y).min(h - 1);
                    let row = (sz * h + sy) * w;
                    for x in 0..bw {
                        data.push(v.data[row + (ox + x).min(w - 1)]);
                    }
                }
            }
            Volume { dims: grid.block_dims, data, bit_depth: v.bit_depth, signed: v.signed, provenance_scale: None }
        })
        .collect()
}

/// Reassembles blocks produced by [`tile`] and crops the padding away.
pub fn untile(blocks: &[Volume], grid: &BlockGrid, dims: [usize; 3]) -> Result<Volume> {
    if blocks.len() != grid.block_count() {
        return Err(Error::Geometry(format!("expected {} blocks, got {}", grid.block_count(), blocks.len())));
    }
    let first = blocks.first().ok_or_else(|| Error::Geometry("no blocks".into()))?;
    let [d, h, w] = dims;
    let [bd, bh, bw] = grid.block_dims;
    let mut out = Volume::zeros(dims, first.bit_depth, first.signed);
    for (block, [oz, oy, ox]) in blocks.iter().zip(grid.origins()) {
        if block.dims != grid.block_dims {
            return Err(Error::Geometry(format!("block dims {:?} != grid {:?}", block.dims, grid.block_dims)));
        }
        for z in 0..bd.min(d.saturating_sub(oz)) {
            for y in 0..bh.min(h.saturating_sub(oy)) {
                let src = (z * bh + y) * bw;
                let dst = ((oz + z) * h + oy + y) * w + ox;
                let n = bw.min(w - ox);
                out.data[dst..dst + n].copy_from_slice(&block.data[src..src + n]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn load_raw_maps_bytes_directly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.raw");
        fs::write(&p, [0u8, 1, 2, 3, 4, 5, 6, 255]).unwrap();
        let v = load_raw(&p, [2, 2, 2], 8, false).unwrap();
        assert_eq!(v.data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 255.0]);
    }

    #[test]
    fn load_raw_full_block() {
        let bytes = vec![7u8; 64 * 64 * 64];
        let v = parse_raw(&bytes, [64, 64, 64], 8, false).unwrap();
        assert_eq!(v.dims(), [64, 64, 64]);
    }

    #[test]
    fn load_raw_size_mismatch_is_format_error() {
        let err = parse_raw(&[0u8; 7], [2, 2, 2], 8, false).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        let err = parse_raw(&[0u8; 8], [2, 2, 2], 12, false).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn signed_sixteen_bit_decoding() {
        let bytes: Vec<u8> = [-2i16, 300].iter().flat_map(|s| s.to_le_bytes()).collect();
        let v = parse_raw(&bytes, [1, 1, 2], 16, true).unwrap();
        assert_eq!(v.data(), &[-2.0, 300.0]);
    }

    #[test]
    fn vxw_header_roundtrip() {
        let v = Volume::from_vec([1, 2, 3], vec![-5.0, 0.0, 1.0, 2.0, 3.0, 40000.0], 32, true).unwrap();
        let bytes = to_vxw_bytes(&v);
        assert_eq!(&bytes[..4], b"VXW0");
        assert_eq!(bytes.len(), 32 + 6 * 4);
        assert_eq!(from_vxw_bytes(&bytes).unwrap(), v);
    }

    #[test]
    fn normalize_endpoints() {
        let v = Volume::from_vec([1, 1, 2], vec![0.0, 100.0], 32, false).unwrap();
        let n = normalize_minmax(&v);
        assert_eq!(n.data(), &[0.0, 65535.0]);
        assert_eq!(n.bit_depth(), 16);
        assert_eq!(n.provenance_scale(), Some((0.0, 100.0)));
    }

    #[test]
    fn normalize_constant_volume() {
        let v = Volume::from_vec([1, 1, 3], vec![5.0; 3], 32, false).unwrap();
        let n = normalize_minmax(&v);
        assert_eq!(n.data(), &[0.0, 0.0, 0.0]);
        assert_eq!(n.provenance_scale(), Some((5.0, 5.0)));
    }

    #[test]
    fn normalize_signed_midpoint() {
        // (0 - (-10)) / 20 * 65535 = 32767.5 rounds away from zero.
        let v = Volume::from_vec([1, 1, 3], vec![-10.0, 0.0, 10.0], 32, true).unwrap();
        assert_eq!(normalize_minmax(&v).data(), &[0.0, 32768.0, 65535.0]);
    }

    #[test]
    fn single_block_grid() {
        let g = BlockGrid::new([64, 64, 64], [64, 64, 64], 3).unwrap();
        assert_eq!(g.block_count(), 1);
        assert_eq!(g.padding, [0, 0, 0]);
    }

    #[test]
    fn partial_block_along_z() {
        let g = BlockGrid::new([65, 64, 64], [64, 64, 64], 3).unwrap();
        assert_eq!(g.counts, [2, 1, 1]);
        assert_eq!(g.padding, [63, 0, 0]);
        let mut v = Volume::zeros([65, 64, 64], 8, false);
        for (i, s) in v.data_mut().iter_mut().enumerate() {
            *s = (i % 251) as f64;
        }
        let blocks = tile(&v, &g);
        assert_eq!(blocks.len(), 2);
        // replicated last slice
        assert_eq!(blocks[1].get(63, 5, 7), v.get(64, 5, 7));
        assert_eq!(untile(&blocks, &g, v.dims()).unwrap(), v);
    }

    #[test]
    fn grid_rejects_indivisible_blocks() {
        assert!(matches!(BlockGrid::new([8, 8, 8], [12, 8, 8], 3), Err(Error::Geometry(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn tile_untile_identity(d in 1usize..=128, h in 1usize..=40, w in 1usize..=40, seed in any::<u64>()) {
            let n = d * h * w;
            let data: Vec<f64> = (0..n).map(|i| ((i as u64).wrapping_mul(seed | 1) % 65536) as f64).collect();
            let v = Volume::from_vec([d, h, w], data, 16, false).unwrap();
            let g = BlockGrid::new(v.dims(), [16, 8, 8], 3).unwrap();
            prop_assert_eq!(untile(&tile(&v, &g), &g, v.dims()).unwrap(), v);
        }

        #[test]
        fn normalization_inverse_within_half_step(vals in proptest::collection::vec(-1.0e6f64..1.0e6, 2..64)) {
            let n = vals.len();
            let v = Volume::from_vec([1, 1, n], vals.clone(), 32, true).unwrap();
            let (min, max) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &s| (a.min(s), b.max(s)));
            let back = denormalize(&normalize_minmax(&v));
            let tol = 0.5 * (max - min) / 65535.0 + 1e-9 * (max.abs() + min.abs());
            for (a, b) in back.data().iter().zip(&vals) {
                prop_assert!((a - b).abs() <= tol);
            }
        }
    }
}
