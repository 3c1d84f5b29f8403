//! Probability models for quantized coefficients.

pub mod context;
pub mod cumulative;
pub mod factorized;
pub mod pmf;

use crate::error::{Error, Result};

/// Which model codes the bands of a stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EntropyKind {
    #[default]
    Factorized,
    Context,
}

impl EntropyKind {
    pub fn code(self) -> u8 {
        match self {
            EntropyKind::Factorized => 0,
            EntropyKind::Context => 1,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(EntropyKind::Factorized),
            1 => Ok(EntropyKind::Context),
            _ => Err(Error::format(format!("unknown entropy model selector {c}"))),
        }
    }
}

/// The shared value of a non-empty band whose symbols are all equal. Such
/// bands are stored as the support `[v, v]` with no coded data.
pub(crate) fn constant_value(q: &[i64]) -> Option<i64> {
    let first = *q.first()?;
    q.iter().all(|&v| v == first).then_some(first)
}

/// Band payload prefix: the in-range support `[lo, hi]` as a signed LEB128
/// `lo` followed by an unsigned LEB128 `hi - lo`.
pub(crate) fn write_support(lo: i64, hi: i64) -> Vec<u8> {
    let mut out = Vec::with_capacity(6);
    leb128::write::signed(&mut out, lo).expect("writing to a Vec cannot fail");
    leb128::write::unsigned(&mut out, hi.abs_diff(lo)).expect("writing to a Vec cannot fail");
    out
}

pub(crate) fn read_support(payload: &[u8]) -> Result<(i64, i64, &[u8])> {
    let mut rest = payload;
    let bad = |e: leb128::read::Error| match e {
        leb128::read::Error::IoError(_) => Error::Truncated { position: 0 },
        leb128::read::Error::Overflow => Error::format("band support overflows 64 bits"),
    };
    let lo = leb128::read::signed(&mut rest).map_err(bad)?;
    let span = leb128::read::unsigned(&mut rest).map_err(bad)?;
    if span >= u64::from(pmf::TOTAL) {
        return Err(Error::format(format!("band support of {} symbols is too wide", span as u128 + 1)));
    }
    let hi = lo
        .checked_add(span as i64)
        .ok_or_else(|| Error::format(format!("band support [{lo}, {lo} + {span}] overflows")))?;
    if span == 0 && !rest.is_empty() {
        return Err(Error::format("constant band carries coded data"));
    }
    Ok((lo, hi, rest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn support_prefix_roundtrip_and_validation() {
        for (lo, hi) in [(0, 0), (-3, 6), (i64::MIN, i64::MIN + 65535), (i64::MAX - 2, i64::MAX)] {
            let mut p = write_support(lo, hi);
            if lo != hi {
                p.push(0xAB);
            }
            let (l, h, body) = read_support(&p).unwrap();
            assert_eq!((l, h), (lo, hi));
            assert_eq!(body.len(), usize::from(lo != hi));
        }
        assert_eq!(write_support(-3, 6).len(), 2);
        assert!(matches!(read_support(&[]), Err(Error::Truncated { .. })));
        assert!(matches!(read_support(&write_support(0, 70000)), Err(Error::Format(_))));
        let mut c = write_support(4, 4);
        c.push(1);
        assert!(matches!(read_support(&c), Err(Error::Format(_))));
    }
}
