//! Rate-distortion objective on one crop.
//!
//! `loss = (bits + lambda * sse) / samples`, with bits measured in symbol
//! units and the squared error in sample units. Lossy training replaces
//! rounding by additive uniform noise (or a straight-through round); lossless
//! training runs the integer transform with straight-through rounding and has
//! no distortion term.

use rand::Rng;

use crate::codec::{CodecModel, EntropyModel};
use crate::entropy::context::ContextModel;
use crate::lifting::Mode;
use crate::nn::{Backend, Tensor};
use crate::quant::{uniform_noise, Surrogate};
use crate::transform::{band_count, band_info};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSpec {
    pub lambda: f64,
    pub qs: f64,
    pub lossless: bool,
    pub surrogate: Surrogate,
}

impl LossSpec {
    pub fn mode(&self) -> Mode {
        if self.lossless {
            Mode::IntegerLossless
        } else {
            Mode::FloatLossy
        }
    }
}

/// Scalar terms of one crop: total bits, sum of squared errors, and the
/// per-sample loss.
pub struct LossTerms<V> {
    pub rate: V,
    pub sse: V,
    pub loss: V,
}

/// Differentiable bits of all bands. `syms` are in symbol units, `recon` are
/// the matching reconstructions in sample units.
pub fn entropy_rate<B: Backend>(be: &mut B, model: &CodecModel, syms: &[B::V], recon: &[B::V], mode: Mode) -> B::V {
    match &model.entropy {
        EntropyModel::Factorized(f) => {
            let mut total: Option<B::V> = None;
            for (i, s) in syms.iter().enumerate() {
                let r = f.rate(be, i, s);
                total = Some(match total {
                    None => r,
                    Some(t) => be.add(&t, &r),
                });
            }
            total.expect("at least one band")
        }
        EntropyModel::Context(c) => context_rate(be, model, c, syms, recon, mode),
    }
}

fn context_rate<B: Backend>(
    be: &mut B,
    model: &CodecModel,
    c: &ContextModel,
    syms: &[B::V],
    recon: &[B::V],
    mode: Mode,
) -> B::V {
    let levels = model.levels();
    assert_eq!(syms.len(), band_count(levels));
    let mut total: Option<B::V> = None;
    let mut low: Option<B::V> = None;
    let mut highs: Vec<B::V> = Vec::with_capacity(7);
    for idx in 0..syms.len() {
        let (level, label) = band_info(levels, idx);
        let dims = be.value(&recon[idx]).spatial();
        let zero = be.constant(Tensor::zeros(&[1, dims[0], dims[1], dims[2]]));
        let mut parts = vec![low.clone().unwrap_or_else(|| zero.clone())];
        parts.extend((0..7).map(|j| highs.get(j).cloned().unwrap_or_else(|| zero.clone())));
        let ctx = be.concat(&parts);
        let r = c.rate(be, label, &ctx, &recon[idx], &syms[idx]);
        total = Some(match total {
            None => r,
            Some(t) => be.add(&t, &r),
        });
        if label == 0 {
            low = Some(recon[idx].clone());
        } else {
            highs.push(recon[idx].clone());
        }
        if label == 7 {
            if level > 1 {
                let l = low.take().expect("low band precedes its level");
                low = Some(model.transform.reconstruct_low(be, &l, &highs, mode));
            }
            highs.clear();
        }
    }
    total.expect("at least one band")
}

/// Loss terms of one `(1, D, H, W)` crop.
pub fn crop_loss<B: Backend>(
    be: &mut B,
    model: &CodecModel,
    x: &Tensor,
    spec: &LossSpec,
    rng: &mut impl Rng,
) -> LossTerms<B::V> {
    let n = x.len() as f64;
    let xv = be.constant(x.clone());
    let mode = spec.mode();
    let bands = model.transform.forward(be, &xv, mode);
    let (syms, recon) = if spec.lossless {
        (bands.clone(), bands)
    } else {
        let mut syms = Vec::with_capacity(bands.len());
        let mut recon = Vec::with_capacity(bands.len());
        for b in &bands {
            let y = be.scale(b, 1.0 / spec.qs);
            let q = match spec.surrogate {
                Surrogate::UniformNoise => {
                    let shape = be.value(&y).shape().to_vec();
                    let noise = uniform_noise(be.value(&y).len(), 1.0, rng);
                    let nv = be.constant(Tensor::from_vec(&shape, noise).expect("noise shape"));
                    be.add(&y, &nv)
                }
                Surrogate::StraightThrough => be.round(&y),
            };
            recon.push(be.scale(&q, spec.qs));
            syms.push(q);
        }
        (syms, recon)
    };
    let rate = entropy_rate(be, model, &syms, &recon, mode);
    let sse = if spec.lossless {
        be.constant(Tensor::scalar(0.0))
    } else {
        let xr = model.transform.inverse(be, &recon, mode);
        let xh = model.post.forward(be, &xr);
        be.sq_err(&xh, &xv)
    };
    let weighted = be.scale(&sse, spec.lambda);
    let total = be.add(&rate, &weighted);
    let loss = be.scale(&total, 1.0 / n);
    LossTerms { rate, sse, loss }
}
