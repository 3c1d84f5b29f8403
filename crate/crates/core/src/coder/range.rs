//! Byte-oriented range coder with carry propagation (the LZMA construction)
//! over 16-bit cumulative frequencies, plus escape coding for symbols outside
//! a model's support.
//!
//! Coder state is integer-only, so streams are byte-identical everywhere.

use crate::entropy::pmf::{SymbolModel, FREQ_BITS};
use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;

pub struct Encoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    skip_first: bool,
    out: Vec<u8>,
}

impl Default for Encoder {
    fn default() -> Self {
        Self::new()
    }
}

impl Encoder {
    pub fn new() -> Self {
        Encoder { low: 0, range: u32::MAX, cache: 0, cache_size: 1, skip_first: true, out: Vec::new() }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                // The very first byte is always zero and carries no information.
                if self.skip_first {
                    self.skip_first = false;
                } else {
                    self.out.push(temp.wrapping_add(carry));
                }
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    fn normalize(&mut self) {
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    /// Codes the interval `[cum, cum + freq)` of a `2^16` total.
    pub fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= 1 << FREQ_BITS);
        let r = self.range >> FREQ_BITS;
        self.low += u64::from(r) * u64::from(cum);
        self.range = r * freq;
        self.normalize();
    }

    /// Codes the low `n` bits of `value` (most significant first) at one bit each.
    pub fn encode_bits(&mut self, value: u64, n: u32) {
        for i in (0..n).rev() {
            self.range >>= 1;
            if (value >> i) & 1 == 1 {
                self.low += u64::from(self.range);
            }
            self.normalize();
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct Decoder<'a> {
    code: u32,
    range: u32,
    data: &'a [u8],
    pos: usize,
    symbols: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        if data.len() < 4 {
            return Err(Error::Truncated { position: 0 });
        }
        let code = u32::from_be_bytes(data[..4].try_into().expect("4 bytes"));
        Ok(Decoder { code, range: u32::MAX, data, pos: 4, symbols: 0 })
    }

    fn normalize(&mut self) -> Result<()> {
        while self.range < TOP {
            let Some(&b) = self.data.get(self.pos) else {
                return Err(Error::Truncated { position: self.symbols });
            };
            self.pos += 1;
            self.code = (self.code << 8) | u32::from(b);
            self.range <<= 8;
        }
        Ok(())
    }

    /// Frequency slot the next symbol falls into.
    pub fn target(&self) -> u32 {
        let r = self.range >> FREQ_BITS;
        (self.code / r).min((1 << FREQ_BITS) - 1)
    }

    pub fn consume(&mut self, cum: u32, freq: u32) -> Result<()> {
        let r = self.range >> FREQ_BITS;
        self.code = self.code.wrapping_sub(r * cum);
        self.range = r * freq;
        self.symbols += 1;
        self.normalize()
    }

    pub fn decode_bits(&mut self, n: u32) -> Result<u64> {
        let mut v = 0u64;
        for _ in 0..n {
            self.range >>= 1;
            let bit = self.code >= self.range;
            if bit {
                self.code -= self.range;
            }
            v = (v << 1) | u64::from(bit);
            self.normalize()?;
        }
        Ok(v)
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn is_exhausted(&self) -> bool {
        self.pos == self.data.len()
    }
}

pub fn encode_symbol(enc: &mut Encoder, model: &impl SymbolModel, s: usize) {
    let (c, f) = model.interval(s);
    enc.encode(c, f);
}

pub fn decode_symbol(dec: &mut Decoder, model: &impl SymbolModel) -> Result<usize> {
    let (s, c, f) = model.lookup(dec.target());
    dec.consume(c, f)?;
    Ok(s)
}

/// Order-0 Exp-Golomb code of `v` as bypass bits.
pub fn encode_exp_golomb(enc: &mut Encoder, v: u64) {
    let x = v + 1;
    let k = 63 - x.leading_zeros();
    enc.encode_bits(0, k);
    enc.encode_bits(x, k + 1);
}

pub fn decode_exp_golomb(dec: &mut Decoder) -> Result<u64> {
    let mut k = 0;
    while dec.decode_bits(1)? == 0 {
        k += 1;
        if k > 63 {
            return Err(Error::format("malformed escape code"));
        }
    }
    let rest = dec.decode_bits(k)?;
    Ok(((1u64 << k) | rest) - 1)
}

/// Codes integer `v` with a model over `q_min..q_min + model.len()`. The two
/// end symbols always carry an Exp-Golomb suffix giving the distance beyond
/// the support, so any `i64` value round-trips.
pub fn encode_value(enc: &mut Encoder, model: &impl SymbolModel, q_min: i64, v: i64) {
    let n = model.len() as i64;
    let q_max = q_min + n - 1;
    let s = (v.clamp(q_min, q_max) - q_min) as usize;
    encode_symbol(enc, model, s);
    if s == 0 {
        encode_exp_golomb(enc, q_min.abs_diff(v));
    } else if s as i64 == n - 1 {
        encode_exp_golomb(enc, v.abs_diff(q_max));
    }
}

pub fn decode_value(dec: &mut Decoder, model: &impl SymbolModel, q_min: i64) -> Result<i64> {
    let n = model.len() as i64;
    let s = decode_symbol(dec, model)? as i64;
    let v = if s == 0 {
        q_min.checked_sub_unsigned(decode_exp_golomb(dec)?)
    } else if s == n - 1 {
        (q_min + n - 1).checked_add_unsigned(decode_exp_golomb(dec)?)
    } else {
        Some(q_min + s)
    };
    v.ok_or_else(|| Error::format("escaped value overflows"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::pmf::{DiscretePmf, FreqTable, TOTAL};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_stream_is_tiny_and_decodes() {
        let bytes = Encoder::new().finish();
        assert!(bytes.len() <= 8);
        let dec = Decoder::new(&bytes).unwrap();
        assert!(dec.is_exhausted());
    }

    #[test]
    fn uniform_256_costs_eight_bits_per_symbol() {
        let table = DiscretePmf::uniform(0, 255).unwrap().freq_table();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let syms: Vec<usize> = (0..1000).map(|_| rng.gen_range(0..256)).collect();
        let mut enc = Encoder::new();
        syms.iter().for_each(|&s| encode_symbol(&mut enc, &table, s));
        let bytes = enc.finish();
        assert!((1000..=1010).contains(&bytes.len()), "{} bytes", bytes.len());
        let mut dec = Decoder::new(&bytes).unwrap();
        let back: Vec<usize> = (0..1000).map(|_| decode_symbol(&mut dec, &table).unwrap()).collect();
        assert_eq!(back, syms);
        assert!(dec.is_exhausted());
    }

    #[test]
    fn skewed_frequencies_and_bits_roundtrip() {
        let table = FreqTable::build(0, 3, |k| [0.0, 0.9999, 0.99995][k]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let syms: Vec<(usize, u64)> = (0..5000).map(|_| (rng.gen_range(0..3), rng.gen_range(0..1 << 20))).collect();
        let mut enc = Encoder::new();
        for &(s, b) in &syms {
            encode_symbol(&mut enc, &table, s);
            enc.encode_bits(b, 20);
        }
        let bytes = enc.finish();
        let mut dec = Decoder::new(&bytes).unwrap();
        for &(s, b) in &syms {
            assert_eq!(decode_symbol(&mut dec, &table).unwrap(), s);
            assert_eq!(dec.decode_bits(20).unwrap(), b);
        }
        assert!(dec.is_exhausted());
        assert_eq!(table.cum()[3], TOTAL);
    }

    #[test]
    fn escapes_reach_extreme_values() {
        let table = DiscretePmf::uniform(-4, 4).unwrap().freq_table();
        let vals = [0, -4, 4, -5, 5, -1000, 1_000_000, i64::MAX, i64::MIN, 3];
        let mut enc = Encoder::new();
        vals.iter().for_each(|&v| encode_value(&mut enc, &table, -4, v));
        let bytes = enc.finish();
        let mut dec = Decoder::new(&bytes).unwrap();
        for &v in &vals {
            assert_eq!(decode_value(&mut dec, &table, -4).unwrap(), v);
        }
    }

    #[test]
    fn every_truncation_is_reported() {
        let table = DiscretePmf::uniform(0, 15).unwrap().freq_table();
        let mut enc = Encoder::new();
        (0..200).for_each(|i| encode_symbol(&mut enc, &table, i % 16));
        let bytes = enc.finish();
        for cut in 0..bytes.len() {
            let res = Decoder::new(&bytes[..cut])
                .and_then(|mut d| (0..200).try_for_each(|_| decode_symbol(&mut d, &table).map(|_| ())));
            assert!(matches!(res, Err(Error::Truncated { .. })), "cut {cut} decoded");
        }
    }
}
