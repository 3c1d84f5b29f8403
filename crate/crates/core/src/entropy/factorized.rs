//! Per-band factorized model: every band has its own cumulative model and
//! its symbols are coded independently of all other bands.

use super::cumulative::{CumulativeModel, Prepared, PARAM_COUNT};
use super::pmf::{choose_support, DiscretePmf, FreqTable};
use super::{constant_value, read_support, write_support};
use crate::coder::range::{decode_value, encode_value, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::nn::{Backend, ParamId, ParamStore, Tensor};

#[derive(Clone, Debug)]
pub struct FactorizedModel {
    pub thetas: Vec<ParamId>,
}

fn name(band: usize) -> String {
    format!("entropy/factorized/b{band}/theta")
}

impl FactorizedModel {
    /// One broad model per band, centred at zero.
    pub fn build(store: &mut ParamStore, bands: usize, init_scale: f64) -> Self {
        let thetas = (0..bands)
            .map(|b| {
                let m = CumulativeModel::with_scale(init_scale, 0.0);
                store.add(name(b), Tensor::from_vec(&[PARAM_COUNT], m.theta.to_vec()).expect("shape"))
            })
            .collect();
        FactorizedModel { thetas }
    }

    pub fn find(store: &ParamStore, bands: usize) -> Result<Self> {
        let thetas = (0..bands)
            .map(|b| store.find(&name(b)).ok_or_else(|| Error::format(format!("model lacks {}", name(b)))))
            .collect::<Result<_>>()?;
        Ok(FactorizedModel { thetas })
    }

    /// Re-centres band `band` on a density of the given mean and spread.
    pub fn reset_band(&self, store: &mut ParamStore, band: usize, mean: f64, spread: f64) {
        let m = CumulativeModel::with_scale(spread.max(0.5), mean);
        store.get_mut(self.thetas[band]).data_mut().copy_from_slice(&m.theta);
    }

    pub fn cumulative(&self, store: &ParamStore, band: usize) -> CumulativeModel {
        CumulativeModel::from_slice(store.get(self.thetas[band]).data())
    }

    /// Differentiable bits of `y` (in quantization-step units) in band `band`.
    pub fn rate<B: Backend>(&self, be: &mut B, band: usize, y: &B::V) -> B::V {
        let theta = be.param(self.thetas[band]);
        be.factorized_bits(y, &theta)
    }

    /// Exact PMF bits of integer symbols over the support the coder would use.
    pub fn band_rate(&self, store: &ParamStore, band: usize, q: &[i64], cap: usize) -> f64 {
        let (lo, hi) = choose_support(q, cap);
        let p = self.cumulative(store, band).prepare();
        let pmf = DiscretePmf::from_cdf(lo, hi, |x| p.cdf(x)).expect("support is non-empty");
        q.iter().map(|&v| pmf.bits(v)).sum()
    }

    fn table(&self, store: &ParamStore, band: usize, lo: i64, hi: i64) -> FreqTable {
        let p = Prepared::new(store.get(self.thetas[band]).data());
        FreqTable::build(lo, (hi - lo + 1) as usize, |k| p.cdf((lo + k as i64) as f64 - 0.5))
    }

    /// Band payload: support bounds followed by the range-coded symbols.
    pub fn encode_band(&self, store: &ParamStore, band: usize, q: &[i64], cap: usize) -> Vec<u8> {
        if let Some(v) = constant_value(q) {
            return write_support(v, v);
        }
        let (lo, hi) = choose_support(q, cap);
        let table = self.table(store, band, lo, hi);
        let mut enc = Encoder::new();
        for &v in q {
            encode_value(&mut enc, &table, lo, v);
        }
        let mut out = write_support(lo, hi);
        out.extend(enc.finish());
        out
    }

    pub fn decode_band(&self, store: &ParamStore, band: usize, payload: &[u8], count: usize) -> Result<Vec<i64>> {
        let (lo, hi, body) = read_support(payload)?;
        if lo == hi {
            return Ok(vec![lo; count]);
        }
        let table = self.table(store, band, lo, hi);
        let mut dec = Decoder::new(body)?;
        (0..count).map(|_| decode_value(&mut dec, &table, lo)).collect()
    }
}
