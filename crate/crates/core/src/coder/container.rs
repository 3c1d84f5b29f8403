//! Self-describing stream container.
//!
//! ```text
//! header
//! records   {band id u8, payload length u32, payload}  block-major, serialization order within a block
//! crc32     over everything before it
//! ```
//!
//! All integers are little-endian.

use crate::entropy::EntropyKind;
use crate::error::{Error, Result};
use crate::lifting::AffineGranularity;
use crate::transform::{Sharing, TransformKind};

pub const STREAM_MAGIC: &[u8; 4] = b"VXWS";
pub const STREAM_VERSION: u8 = 1;
/// The only rounding rule in use: halves round away from zero.
pub const ROUND_HALF_AWAY: u8 = 0;
/// Axes are lifted z, then y, then x.
pub const AXIS_ORDER_ZYX: [u8; 3] = [0, 1, 2];

#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub version: u8,
    pub lossless: bool,
    pub transform: TransformKind,
    pub sharing: Sharing,
    pub granularity: AffineGranularity,
    pub entropy: EntropyKind,
    pub rounding: u8,
    pub levels: u8,
    pub axis_order: [u8; 3],
    pub bit_depth: u8,
    pub signed: bool,
    pub block_dims: [u32; 3],
    pub dims: [u32; 3],
    pub lifting_steps: u8,
    pub transform_width: u16,
    pub context_width: u16,
    pub post_width: u16,
    pub qs: f64,
    pub support_cap: u32,
    /// `(min, max)` of the original data when samples were min-max normalized.
    pub norm_scale: Option<(f64, f64)>,
    pub model_hash: [u8; 32],
}

pub fn granularity_code(g: AffineGranularity) -> u8 {
    match g {
        AffineGranularity::Fine => 0,
        AffineGranularity::Coarse => 1,
    }
}

pub fn granularity_from_code(c: u8) -> Result<AffineGranularity> {
    match c {
        0 => Ok(AffineGranularity::Fine),
        1 => Ok(AffineGranularity::Coarse),
        _ => Err(Error::format(format!("unknown affine granularity {c}"))),
    }
}

impl Header {
    pub const LEN: usize = 4 + 12 + 12 + 12 + 8 + 8 + 4 + 17 + 32;

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(Self::LEN);
        b.extend_from_slice(STREAM_MAGIC);
        b.push(self.version);
        b.push(u8::from(self.lossless) | (u8::from(self.signed) << 1));
        b.push(self.transform.code());
        b.push(self.sharing.code());
        b.push(granularity_code(self.granularity));
        b.push(self.entropy.code());
        b.push(self.rounding);
        b.push(self.levels);
        b.extend_from_slice(&self.axis_order);
        b.push(self.bit_depth);
        for v in self.block_dims.iter().chain(&self.dims) {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.push(self.lifting_steps);
        b.push(0);
        for v in [self.transform_width, self.context_width, self.post_width] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&self.qs.to_le_bytes());
        b.extend_from_slice(&self.support_cap.to_le_bytes());
        let (lo, hi) = self.norm_scale.unwrap_or((0.0, 0.0));
        b.push(u8::from(self.norm_scale.is_some()));
        b.extend_from_slice(&lo.to_le_bytes());
        b.extend_from_slice(&hi.to_le_bytes());
        b.extend_from_slice(&self.model_hash);
        debug_assert_eq!(b.len(), Self::LEN);
        b
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < Self::LEN {
            return Err(Error::format(format!("stream header needs {} bytes, got {}", Self::LEN, bytes.len())));
        }
        if &bytes[..4] != STREAM_MAGIC {
            return Err(Error::format("not a voxwave stream (bad magic)"));
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u8();
        if version != STREAM_VERSION {
            return Err(Error::format(format!("unsupported stream version {version}")));
        }
        let flags = r.u8();
        if flags > 3 {
            return Err(Error::format(format!("unknown header flags {flags:#04x}")));
        }
        let transform = TransformKind::from_code(r.u8())?;
        let sharing = Sharing::from_code(r.u8())?;
        let granularity = granularity_from_code(r.u8())?;
        let entropy = EntropyKind::from_code(r.u8())?;
        let rounding = r.u8();
        if rounding != ROUND_HALF_AWAY {
            return Err(Error::format(format!("unknown rounding rule {rounding}")));
        }
        let levels = r.u8();
        let axis_order = [r.u8(), r.u8(), r.u8()];
        if axis_order != AXIS_ORDER_ZYX {
            return Err(Error::format(format!("unsupported axis order {axis_order:?}")));
        }
        let bit_depth = r.u8();
        let block_dims = [r.u32(), r.u32(), r.u32()];
        let dims = [r.u32(), r.u32(), r.u32()];
        let lifting_steps = r.u8();
        r.u8();
        let transform_width = r.u16();
        let context_width = r.u16();
        let post_width = r.u16();
        let qs = r.f64();
        let support_cap = r.u32();
        let has_norm = r.u8();
        let norm = (r.f64(), r.f64());
        let mut model_hash = [0u8; 32];
        model_hash.copy_from_slice(&bytes[r.pos..r.pos + 32]);

        if !(1..=8).contains(&levels) {
            return Err(Error::format(format!("invalid level count {levels}")));
        }
        if !(qs.is_finite() && qs > 0.0) {
            return Err(Error::format(format!("invalid quantization step {qs}")));
        }
        if block_dims.iter().chain(&dims).any(|&d| d == 0) {
            return Err(Error::format("zero-sized block or volume dims"));
        }
        if support_cap < 3 || has_norm > 1 {
            return Err(Error::format("invalid support cap or normalization flag"));
        }
        Ok(Header {
            version,
            lossless: flags & 1 != 0,
            signed: flags & 2 != 0,
            transform,
            sharing,
            granularity,
            entropy,
            rounding,
            levels,
            axis_order,
            bit_depth,
            block_dims,
            dims,
            lifting_steps,
            transform_width,
            context_width,
            post_width,
            qs,
            support_cap,
            norm_scale: (has_norm == 1).then_some(norm),
            model_hash,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out = self.bytes[self.pos..self.pos + N].try_into().expect("length checked by caller");
        self.pos += N;
        out
    }
    fn u8(&mut self) -> u8 {
        self.take::<1>()[0]
    }
    fn u16(&mut self) -> u16 {
        u16::from_le_bytes(self.take())
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }
    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub band: u8,
    pub payload: Vec<u8>,
}

pub fn write_stream(header: &Header, records: &[Record]) -> Vec<u8> {
    let mut out = header.to_bytes();
    for r in records {
        out.push(r.band);
        out.extend_from_slice(&(r.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&r.payload);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Verifies the checksum and splits a stream into its header and exactly
/// `expected(header)` records.
pub fn read_stream(bytes: &[u8], expected: impl Fn(&Header) -> usize) -> Result<(Header, Vec<Record>)> {
    if bytes.len() < Header::LEN + 4 {
        return Err(Error::format(format!("stream of {} bytes is too short", bytes.len())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let header = Header::parse(body)?;
    let count = expected(&header);
    let mut pos = Header::LEN;
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        if pos + 5 > body.len() {
            return Err(Error::format(format!("stream ends before record {i} of {count}")));
        }
        let band = body[pos];
        let len = u32::from_le_bytes(body[pos + 1..pos + 5].try_into().expect("4 bytes")) as usize;
        pos += 5;
        if pos + len > body.len() {
            return Err(Error::format(format!("record {i} claims {len} bytes past the end of the stream")));
        }
        records.push(Record { band, payload: body[pos..pos + len].to_vec() });
        pos += len;
    }
    if pos != body.len() {
        return Err(Error::format(format!("{} trailing bytes after the last record", body.len() - pos)));
    }
    Ok((header, records))
}
