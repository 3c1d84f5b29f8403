//! Operation set shared by inference and training.
//!
//! Model code is written once against [`Backend`]. [`Infer`] evaluates eagerly
//! and keeps nothing; [`super::tape::Tape`] records a graph for reverse-mode
//! differentiation. Both produce bit-identical forward values.

use std::rc::Rc;

use super::conv::{conv3d_forward, MaskKind};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::entropy::cumulative::{Prepared, PARAM_COUNT};
use crate::quant::round_half_away;

/// Floor on the per-symbol code length used by the rate terms (`2^-16`).
pub const MAX_SYMBOL_BITS: f64 = 16.0;

pub trait Backend {
    type V: Clone;

    fn store(&self) -> &ParamStore;
    fn param(&mut self, id: ParamId) -> Self::V;
    fn constant(&mut self, t: Tensor) -> Self::V;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor;

    fn conv3d(&mut self, x: &Self::V, w: &Self::V, b: &Self::V, mask: Option<MaskKind>) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn div(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    /// Multiplies every element of `a` by the single element of `s`.
    fn mul_scalar(&mut self, a: &Self::V, s: &Self::V) -> Self::V;
    fn scale(&mut self, a: &Self::V, c: f64) -> Self::V;
    fn relu(&mut self, a: &Self::V) -> Self::V;
    fn sigmoid(&mut self, a: &Self::V) -> Self::V;
    fn tanh(&mut self, a: &Self::V) -> Self::V;
    fn clamp_min(&mut self, a: &Self::V, lo: f64) -> Self::V;
    /// Round half away from zero; straight-through gradient when recorded.
    fn round(&mut self, a: &Self::V) -> Self::V;
    /// Fixed FIR filter along z: `out[n] = sum w * a[reflect(n + off)]`.
    fn axis_filter(&mut self, a: &Self::V, taps: &[(isize, f64)]) -> Self::V;
    fn split_z(&mut self, a: &Self::V) -> (Self::V, Self::V);
    fn merge_z(&mut self, even: &Self::V, odd: &Self::V) -> Self::V;
    fn permute(&mut self, a: &Self::V, perm: [usize; 3]) -> Self::V;
    fn concat(&mut self, parts: &[Self::V]) -> Self::V;
    fn sum(&mut self, a: &Self::V) -> Self::V;
    /// `sum((a - b)^2)`.
    fn sq_err(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    /// Total bits of every element of `y` under one 58-parameter model `theta`.
    fn factorized_bits(&mut self, y: &Self::V, theta: &Self::V) -> Self::V;
    /// Total bits of `y` (1 channel) under per-voxel parameters `psi` (58 channels).
    fn context_bits(&mut self, y: &Self::V, psi: &Self::V) -> Self::V;
}

/// Half-sample reflection of an index into `[0, n)`.
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

pub(crate) fn axis_filter_forward(a: &Tensor, taps: &[(isize, f64)]) -> Tensor {
    let [c, d, h, w] = a.dims4();
    let plane = h * w;
    let mut out = Tensor::zeros(a.shape());
    let src = a.data();
    let dst = out.data_mut();
    for ch in 0..c {
        for z in 0..d {
            let o = (ch * d + z) * plane;
            for &(off, wt) in taps {
                let s = (ch * d + reflect(z as isize + off, d)) * plane;
                for k in 0..plane {
                    dst[o + k] += wt * src[s + k];
                }
            }
        }
    }
    out
}

pub(crate) fn axis_filter_transpose(g: &Tensor, taps: &[(isize, f64)]) -> Tensor {
    let [c, d, h, w] = g.dims4();
    let plane = h * w;
    let mut out = Tensor::zeros(g.shape());
    let src = g.data();
    let dst = out.data_mut();
    for ch in 0..c {
        for z in 0..d {
            let o = (ch * d + z) * plane;
            for &(off, wt) in taps {
                let s = (ch * d + reflect(z as isize + off, d)) * plane;
                for k in 0..plane {
                    dst[s + k] += wt * src[o + k];
                }
            }
        }
    }
    out
}

pub(crate) fn factorized_bits_forward(y: &Tensor, theta: &Tensor) -> f64 {
    let p = Prepared::new(theta.data());
    y.data().iter().map(|&v| p.bits(v, MAX_SYMBOL_BITS)).sum()
}

pub(crate) fn context_theta(psi: &Tensor, i: usize, n: usize) -> [f64; PARAM_COUNT] {
    let mut theta = [0.0; PARAM_COUNT];
    for (k, t) in theta.iter_mut().enumerate() {
        *t = psi.data()[k * n + i];
    }
    theta
}

pub(crate) fn context_bits_forward(y: &Tensor, psi: &Tensor) -> f64 {
    let n = y.len();
    assert_eq!(psi.len(), n * PARAM_COUNT, "psi must carry {PARAM_COUNT} channels per voxel");
    (0..n).map(|i| Prepared::new(&context_theta(psi, i, n)).bits(y.data()[i], MAX_SYMBOL_BITS)).sum()
}

/// Eager evaluation without gradient bookkeeping.
pub struct Infer<'s> {
    store: &'s ParamStore,
}

impl<'s> Infer<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Infer { store }
    }
}

impl Backend for Infer<'_> {
    type V = Rc<Tensor>;

    fn store(&self) -> &ParamStore {
        self.store
    }

    fn param(&mut self, id: ParamId) -> Self::V {
        Rc::new(self.store.get(id).clone())
    }

    fn constant(&mut self, t: Tensor) -> Self::V {
        Rc::new(t)
    }

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor {
        v
    }

    fn conv3d(&mut self, x: &Self::V, w: &Self::V, b: &Self::V, mask: Option<MaskKind>) -> Self::V {
        Rc::new(conv3d_forward(x, w, b, mask))
    }

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V {
        Rc::new(a.zip_map(b, |x, y| x + y))
    }

    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Self::V {
        Rc::new(a.zip_map(b, |x, y| x - y))
    }

    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Self::V {
        Rc::new(a.zip_map(b, |x, y| x * y))
    }

    fn div(&mut self, a: &Self::V, b: &Self::V) -> Self::V {
        Rc::new(a.zip_map(b, |x, y| x / y))
    }

    fn mul_scalar(&mut self, a: &Self::V, s: &Self::V) -> Self::V {
        let s = s.item();
        Rc::new(a.map(|x| x * s))
    }

    fn scale(&mut self, a: &Self::V, c: f64) -> Self::V {
        Rc::new(a.map(|x| x * c))
    }

    fn relu(&mut self, a: &Self::V) -> Self::V {
        Rc::new(a.map(|x| x.max(0.0)))
    }

    fn sigmoid(&mut self, a: &Self::V) -> Self::V {
        Rc::new(a.map(crate::entropy::cumulative::sigmoid))
    }

    fn tanh(&mut self, a: &Self::V) -> Self::V {
        Rc::new(a.map(f64::tanh))
    }

    fn clamp_min(&mut self, a: &Self::V, lo: f64) -> Self::V {
        Rc::new(a.map(|x| x.max(lo)))
    }

    fn round(&mut self, a: &Self::V) -> Self::V {
        Rc::new(a.map(round_half_away))
    }

    fn axis_filter(&mut self, a: &Self::V, taps: &[(isize, f64)]) -> Self::V {
        Rc::new(axis_filter_forward(a, taps))
    }

    fn split_z(&mut self, a: &Self::V) -> (Self::V, Self::V) {
        let (e, o) = a.split_z();
        (Rc::new(e), Rc::new(o))
    }

    fn merge_z(&mut self, even: &Self::V, odd: &Self::V) -> Self::V {
        Rc::new(Tensor::merge_z(even, odd))
    }

    fn permute(&mut self, a: &Self::V, perm: [usize; 3]) -> Self::V {
        if perm == [0, 1, 2] {
            return a.clone();
        }
        Rc::new(a.permute_spatial(perm))
    }

    fn concat(&mut self, parts: &[Self::V]) -> Self::V {
        let refs: Vec<&Tensor> = parts.iter().map(|p| p.as_ref()).collect();
        Rc::new(Tensor::concat(&refs))
    }

    fn sum(&mut self, a: &Self::V) -> Self::V {
        Rc::new(Tensor::scalar(a.sum()))
    }

    fn sq_err(&mut self, a: &Self::V, b: &Self::V) -> Self::V {
        Rc::new(Tensor::scalar(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum()))
    }

    fn factorized_bits(&mut self, y: &Self::V, theta: &Self::V) -> Self::V {
        Rc::new(Tensor::scalar(factorized_bits_forward(y, theta)))
    }

    fn context_bits(&mut self, y: &Self::V, psi: &Self::V) -> Self::V {
        Rc::new(Tensor::scalar(context_bits_forward(y, psi)))
    }
}
