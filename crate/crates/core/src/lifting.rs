//! One-dimensional lifting along the z axis of a `(1, D, H, W)` activation.
//!
//! A step maps the even/odd halves `(e, o)` to `(l, h)`:
//!
//! ```text
//! h = A(e) * (o - P(e))          l = B(h) * (e + U(h))            (float)
//! h = o - round(P(e))            l = e + round(U(h))              (integer)
//! ```
//!
//! and several steps chain by feeding `(l, h)` back in as `(e, o)`. Other axes
//! are handled by the transform module, which permutes the lifting axis to z.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::layers::ConvNet;
use crate::nn::{Backend, ParamId, ParamStore, Tensor};

/// Lower bound applied to every affine gain after the sigmoid.
pub const AFFINE_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    FloatLossy,
    IntegerLossless,
}

/// Fixed FIR taps `(offset, weight)` applied with half-sample reflection at
/// the ends of the subsequence.
pub type Taps = Vec<(isize, f64)>;

/// CDF 5/3 prediction: `P(e)[n] = (e[n] + e[n+1]) / 2`.
pub fn cdf53_predict() -> Taps {
    vec![(0, 0.5), (1, 0.5)]
}

/// CDF 5/3 update: `U(h)[n] = (h[n-1] + h[n]) / 4`.
pub fn cdf53_update() -> Taps {
    vec![(-1, 0.25), (0, 0.25)]
}

/// Factored CDF 9/7 constants: two predict/update pairs and a final scaling
/// of the low band by `zeta` and the high band by `1/zeta`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cdf97 {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub zeta: f64,
}

pub fn cdf97_step_params() -> Cdf97 {
    Cdf97 {
        alpha: -1.586_134_342_059_924,
        beta: -0.052_980_118_572_961,
        gamma: 0.882_911_075_530_934,
        delta: 0.443_506_852_043_971,
        zeta: 1.149_604_398_860_241,
    }
}

/// Prediction or update operator.
#[derive(Clone, Debug)]
pub enum Operator {
    Fixed(Taps),
    /// `base(x) + s * net(x / s)` with `s = value_scale`.
    Learned { base: Option<Taps>, net: ConvNet, value_scale: f64 },
}

impl Operator {
    pub fn apply<B: Backend>(&self, be: &mut B, x: &B::V) -> B::V {
        match self {
            Operator::Fixed(taps) => be.axis_filter(x, taps),
            Operator::Learned { base, net, value_scale } => {
                let xin = be.scale(x, 1.0 / value_scale);
                let r = net.forward(be, &xin);
                let r = be.scale(&r, *value_scale);
                match base {
                    Some(taps) => {
                        let b = be.axis_filter(x, taps);
                        be.add(&b, &r)
                    }
                    None => r,
                }
            }
        }
    }
}

/// Multiplicative gain of an affine lifting step.
#[derive(Clone, Debug)]
pub enum Gain {
    One,
    Const(f64),
    /// One trainable scalar `s`, giving `max(2 sigmoid(s), floor)`.
    Scalar(ParamId),
    /// Per-voxel map `max(2 sigmoid(net(x / s)), floor)`.
    Net { net: ConvNet, value_scale: f64 },
}

impl Gain {
    /// The gain for input `x`, or `None` when it is identically one.
    pub fn apply<B: Backend>(&self, be: &mut B, x: &B::V) -> Option<GainValue<B::V>> {
        match self {
            Gain::One => None,
            Gain::Const(c) => Some(GainValue::Const(*c)),
            Gain::Scalar(id) => {
                let s = be.param(*id);
                let s = be.sigmoid(&s);
                let s = be.scale(&s, 2.0);
                Some(GainValue::Scalar(be.clamp_min(&s, AFFINE_FLOOR)))
            }
            Gain::Net { net, value_scale } => {
                let xin = be.scale(x, 1.0 / value_scale);
                let g = net.forward(be, &xin);
                let g = be.sigmoid(&g);
                let g = be.scale(&g, 2.0);
                Some(GainValue::Map(be.clamp_min(&g, AFFINE_FLOOR)))
            }
        }
    }
}

/// Evaluated gain.
pub enum GainValue<V> {
    Const(f64),
    Scalar(V),
    Map(V),
}

impl<V: Clone> GainValue<V> {
    fn mul<B: Backend<V = V>>(&self, be: &mut B, x: &V) -> V {
        match self {
            GainValue::Const(c) => be.scale(x, *c),
            GainValue::Scalar(s) => be.mul_scalar(x, s),
            GainValue::Map(m) => be.mul(x, m),
        }
    }

    fn div<B: Backend<V = V>>(&self, be: &mut B, x: &V) -> V {
        match self {
            GainValue::Const(c) => be.scale(x, 1.0 / c),
            GainValue::Scalar(s) => {
                let one = be.constant(Tensor::scalar(1.0));
                let inv = be.div(&one, s);
                be.mul_scalar(x, &inv)
            }
            GainValue::Map(m) => be.div(x, m),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LiftingStep {
    pub predict: Operator,
    pub update: Operator,
    pub gain_a: Gain,
    pub gain_b: Gain,
}

impl LiftingStep {
    pub fn cdf53() -> Self {
        LiftingStep {
            predict: Operator::Fixed(cdf53_predict()),
            update: Operator::Fixed(cdf53_update()),
            gain_a: Gain::One,
            gain_b: Gain::One,
        }
    }

    /// The two steps of CDF 9/7, with the final scaling folded into the
    /// second step's gains (the second update taps absorb `zeta` because they
    /// see the already scaled high band).
    pub fn cdf97() -> [Self; 2] {
        let c = cdf97_step_params();
        let sym = |w: f64, fwd: bool| if fwd { vec![(0, w), (1, w)] } else { vec![(-1, w), (0, w)] };
        [
            LiftingStep {
                predict: Operator::Fixed(sym(-c.alpha, true)),
                update: Operator::Fixed(sym(c.beta, false)),
                gain_a: Gain::One,
                gain_b: Gain::One,
            },
            LiftingStep {
                predict: Operator::Fixed(sym(-c.gamma, true)),
                update: Operator::Fixed(sym(c.delta * c.zeta, false)),
                gain_a: Gain::Const(1.0 / c.zeta),
                gain_b: Gain::Const(c.zeta),
            },
        ]
    }

    /// Additive version of this step (both gains replaced by one).
    pub fn without_gains(&self) -> Self {
        LiftingStep { gain_a: Gain::One, gain_b: Gain::One, ..self.clone() }
    }

    fn predict<B: Backend>(&self, be: &mut B, e: &B::V, mode: Mode) -> B::V {
        let p = self.predict.apply(be, e);
        if mode == Mode::IntegerLossless {
            be.round(&p)
        } else {
            p
        }
    }

    fn update<B: Backend>(&self, be: &mut B, h: &B::V, mode: Mode) -> B::V {
        let u = self.update.apply(be, h);
        if mode == Mode::IntegerLossless {
            be.round(&u)
        } else {
            u
        }
    }

    fn gains_active(&self, mode: Mode) -> bool {
        // Lossless mode forces both affine maps to the constant 1.
        mode == Mode::FloatLossy
    }

    /// `(e, o) -> (l, h)`.
    pub fn forward<B: Backend>(&self, be: &mut B, e: &B::V, o: &B::V, mode: Mode) -> (B::V, B::V) {
        let p = self.predict(be, e, mode);
        let mut h = be.sub(o, &p);
        if self.gains_active(mode) {
            if let Some(a) = self.gain_a.apply(be, e) {
                h = a.mul(be, &h);
            }
        }
        let u = self.update(be, &h, mode);
        let mut l = be.add(e, &u);
        if self.gains_active(mode) {
            if let Some(b) = self.gain_b.apply(be, &h) {
                l = b.mul(be, &l);
            }
        }
        (l, h)
    }

    /// `(l, h) -> (e, o)`.
    pub fn inverse<B: Backend>(&self, be: &mut B, l: &B::V, h: &B::V, mode: Mode) -> (B::V, B::V) {
        let mut l = l.clone();
        if self.gains_active(mode) {
            if let Some(b) = self.gain_b.apply(be, h) {
                l = b.div(be, &l);
            }
        }
        let u = self.update(be, h, mode);
        let e = be.sub(&l, &u);
        let mut h = h.clone();
        if self.gains_active(mode) {
            if let Some(a) = self.gain_a.apply(be, &e) {
                h = a.div(be, &h);
            }
        }
        let p = self.predict(be, &e, mode);
        let o = be.add(&h, &p);
        (e, o)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for op in [&self.predict, &self.update] {
            if let Operator::Learned { net, .. } = op {
                ids.extend(net.layers.iter().flat_map(|l| l.ids()));
            }
        }
        for g in [&self.gain_a, &self.gain_b] {
            match g {
                Gain::Scalar(id) => ids.push(*id),
                Gain::Net { net, .. } => ids.extend(net.layers.iter().flat_map(|l| l.ids())),
                Gain::One | Gain::Const(_) => {}
            }
        }
        ids
    }
}

/// How an affine gain is parameterized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AffineGranularity {
    #[default]
    Fine,
    Coarse,
}

/// Registers one learned step under `prefix`. The first step of a chain
/// (`index == 0`) carries the CDF 5/3 filters as its fixed base; the residual
/// networks' output layers and the affine maps' output layers start at zero,
/// so an untrained chain is CDF 5/3 with unit gains.
pub fn learned_step(
    store: &mut ParamStore,
    prefix: &str,
    index: usize,
    width: usize,
    value_scale: f64,
    granularity: AffineGranularity,
    rng: &mut impl Rng,
) -> LiftingStep {
    let name = |part: &str| format!("{prefix}/s{index}-{part}");
    let p = ConvNet::new(store, &name("p"), width, rng);
    let u = ConvNet::new(store, &name("u"), width, rng);
    p.zero_output(store);
    u.zero_output(store);
    let mut gain = |part: &str, store: &mut ParamStore| match granularity {
        AffineGranularity::Fine => {
            let net = ConvNet::new(store, &name(part), width, rng);
            net.zero_output(store);
            Gain::Net { net, value_scale }
        }
        AffineGranularity::Coarse => Gain::Scalar(store.add(name(part) + "/scalar", Tensor::scalar(0.0))),
    };
    let gain_a = gain("a", store);
    let gain_b = gain("b", store);
    assemble_learned(index, p, u, gain_a, gain_b, value_scale)
}

fn assemble_learned(index: usize, p: ConvNet, u: ConvNet, gain_a: Gain, gain_b: Gain, value_scale: f64) -> LiftingStep {
    let (pb, ub) = if index == 0 { (Some(cdf53_predict()), Some(cdf53_update())) } else { (None, None) };
    LiftingStep {
        predict: Operator::Learned { base: pb, net: p, value_scale },
        update: Operator::Learned { base: ub, net: u, value_scale },
        gain_a,
        gain_b,
    }
}

/// Rebuilds a step registered by [`learned_step`] from a loaded store.
pub fn find_learned_step(
    store: &ParamStore,
    prefix: &str,
    index: usize,
    value_scale: f64,
    granularity: AffineGranularity,
) -> Result<LiftingStep> {
    let name = |part: &str| format!("{prefix}/s{index}-{part}");
    let missing = |what: String| Error::format(format!("model lacks {what}"));
    let net = |part: &str| ConvNet::find(store, &name(part)).ok_or_else(|| missing(name(part)));
    let gain = |part: &str| -> Result<Gain> {
        Ok(match granularity {
            AffineGranularity::Fine => Gain::Net { net: net(part)?, value_scale },
            AffineGranularity::Coarse => {
                let n = name(part) + "/scalar";
                Gain::Scalar(store.find(&n).ok_or_else(|| missing(n))?)
            }
        })
    };
    Ok(assemble_learned(index, net("p")?, net("u")?, gain("a")?, gain("b")?, value_scale))
}

/// Trainable scalars in one learned step.
pub fn learned_step_parameter_count(width: usize, granularity: AffineGranularity) -> usize {
    let net = ConvNet::parameter_count(width);
    let affine = match granularity {
        AffineGranularity::Fine => net,
        AffineGranularity::Coarse => 1,
    };
    2 * net + 2 * affine
}

/// Runs `steps` forward on a `(1, D, H, W)` input along z.
pub fn lift_forward<B: Backend>(be: &mut B, steps: &[LiftingStep], x: &B::V, mode: Mode) -> (B::V, B::V) {
    let (mut l, mut h) = be.split_z(x);
    for s in steps {
        (l, h) = s.forward(be, &l, &h, mode);
    }
    (l, h)
}

/// Inverse of [`lift_forward`].
pub fn lift_inverse<B: Backend>(be: &mut B, steps: &[LiftingStep], l: &B::V, h: &B::V, mode: Mode) -> B::V {
    let (mut e, mut o) = (l.clone(), h.clone());
    for s in steps.iter().rev() {
        (e, o) = s.inverse(be, &e, &o, mode);
    }
    be.merge_z(&e, &o)
}

/// Even/odd split of a `(C, D, H, W)` tensor along spatial `axis` (0 = z).
pub fn split(t: &Tensor, axis: usize) -> Result<(Tensor, Tensor)> {
    let n = t.spatial()[axis];
    if !n.is_multiple_of(2) {
        return Err(Error::Geometry(format!("axis {axis} has odd length {n}")));
    }
    let perm = axis_perm(axis);
    let (e, o) = t.permute_spatial(perm).split_z();
    let inv = crate::nn::tensor::invert_perm(perm);
    Ok((e.permute_spatial(inv), o.permute_spatial(inv)))
}

pub fn merge(even: &Tensor, odd: &Tensor, axis: usize) -> Tensor {
    let perm = axis_perm(axis);
    let m = Tensor::merge_z(&even.permute_spatial(perm), &odd.permute_spatial(perm));
    m.permute_spatial(crate::nn::tensor::invert_perm(perm))
}

/// Spatial permutation bringing `axis` to the front, others kept in order.
pub fn axis_perm(axis: usize) -> [usize; 3] {
    match axis {
        0 => [0, 1, 2],
        1 => [1, 0, 2],
        2 => [2, 0, 1],
        _ => panic!("axis {axis} out of range"),
    }
}
