//! Monotone cumulative distribution built as a composition of five small
//! layers, parameterized by 58 raw scalars:
//!
//! ```text
//! layer 1 : z = softplus(H1) * x + b1,      u = z + tanh(a1) * tanh(z)   (H1, b1, a1 in R^3)
//! layer 2-4: z = softplus(Hk) u + bk,        u = z + tanh(ak) * tanh(z)   (Hk in R^3x3)
//! layer 5 : c = sigmoid(softplus(H5) u + b5)                              (H5 in R^1x3)
//! ```
//!
//! `softplus` keeps every mixing weight positive and `tanh` keeps the gates in
//! `(-1, 1)`, so each layer is nondecreasing and `c` is a valid CDF.

#![allow(clippy::needless_range_loop)]

use std::f64::consts::LN_2;

pub const PARAM_COUNT: usize = 58;
pub const LAYERS: usize = 5;
const WIDTH: usize = 3;

/// Offsets of `(H, b, a)` for hidden layers 0..4; the output layer uses
/// `H5 = [54, 57)` and `b5 = 57`.
const fn hidden_offsets(j: usize) -> (usize, usize, usize) {
    if j == 0 {
        (0, 3, 6)
    } else {
        let base = 9 + 15 * (j - 1);
        (base, base + 9, base + 12)
    }
}
const OUT_H: usize = 54;
const OUT_B: usize = 57;

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))`, stable for large `|x|`.
#[inline]
fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

#[inline]
fn inv_softplus(y: f64) -> f64 {
    // log(exp(y) - 1)
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Raw parameter vector of one cumulative model.
#[derive(Clone, Debug, PartialEq)]
pub struct CumulativeModel {
    pub theta: [f64; PARAM_COUNT],
}

impl CumulativeModel {
    /// Initialization giving a broad logistic-like density of width roughly
    /// `init_scale` centred at `centre`.
    pub fn with_scale(init_scale: f64, centre: f64) -> Self {
        let mut theta = [0.0; PARAM_COUNT];
        let per_layer = init_scale.powf(1.0 / LAYERS as f64);
        for j in 0..4 {
            let (h, _, _) = hidden_offsets(j);
            let n = if j == 0 { WIDTH } else { WIDTH * WIDTH };
            for v in &mut theta[h..h + n] {
                *v = inv_softplus(1.0 / (per_layer * WIDTH as f64));
            }
        }
        for v in &mut theta[OUT_H..OUT_H + WIDTH] {
            *v = inv_softplus(1.0 / per_layer);
        }
        let mut m = CumulativeModel { theta };
        // Shift so that c(centre) = 1/2.
        let shift = m.prepare().logit(centre);
        m.theta[OUT_B] -= shift;
        m
    }

    pub fn from_slice(s: &[f64]) -> Self {
        let mut theta = [0.0; PARAM_COUNT];
        theta.copy_from_slice(s);
        CumulativeModel { theta }
    }

    pub fn prepare(&self) -> Prepared {
        Prepared::new(&self.theta)
    }

    /// `c(x)` in `[0, 1]`.
    pub fn eval(&self, x: f64) -> f64 {
        sigmoid(self.prepare().logit(x))
    }
}

/// Reparameterized weights, computed once per parameter vector.
#[derive(Clone, Debug)]
pub struct Prepared {
    sp: [f64; PARAM_COUNT],
    dsp: [f64; PARAM_COUNT],
    gate: [f64; PARAM_COUNT],
    theta: [f64; PARAM_COUNT],
}

struct Trace {
    z: [[f64; WIDTH]; 4],
    tz: [[f64; WIDTH]; 4],
    u: [[f64; WIDTH]; 4],
}

impl Prepared {
    pub fn new(theta: &[f64]) -> Self {
        assert_eq!(theta.len(), PARAM_COUNT);
        let mut p = Prepared { sp: [0.0; PARAM_COUNT], dsp: [0.0; PARAM_COUNT], gate: [0.0; PARAM_COUNT], theta: [0.0; PARAM_COUNT] };
        p.theta.copy_from_slice(theta);
        for j in 0..4 {
            let (h, _, a) = hidden_offsets(j);
            let n = if j == 0 { WIDTH } else { WIDTH * WIDTH };
            for i in h..h + n {
                p.sp[i] = softplus(theta[i]);
                p.dsp[i] = sigmoid(theta[i]);
            }
            for i in a..a + WIDTH {
                p.gate[i] = theta[i].tanh();
            }
        }
        for i in OUT_H..OUT_H + WIDTH {
            p.sp[i] = softplus(theta[i]);
            p.dsp[i] = sigmoid(theta[i]);
        }
        p
    }

    fn forward(&self, x: f64) -> (Trace, f64) {
        let mut t = Trace { z: [[0.0; WIDTH]; 4], tz: [[0.0; WIDTH]; 4], u: [[0.0; WIDTH]; 4] };
        for j in 0..4 {
            let (h, b, a) = hidden_offsets(j);
            for i in 0..WIDTH {
                let mut z = self.theta[b + i];
                if j == 0 {
                    z += self.sp[h + i] * x;
                } else {
                    for m in 0..WIDTH {
                        z += self.sp[h + WIDTH * i + m] * t.u[j - 1][m];
                    }
                }
                let tz = z.tanh();
                t.z[j][i] = z;
                t.tz[j][i] = tz;
                t.u[j][i] = z + self.gate[a + i] * tz;
            }
        }
        let mut out = self.theta[OUT_B];
        for m in 0..WIDTH {
            out += self.sp[OUT_H + m] * t.u[3][m];
        }
        (t, out)
    }

    /// Pre-sigmoid value of the CDF at `x`.
    pub fn logit(&self, x: f64) -> f64 {
        self.forward(x).1
    }

    pub fn cdf(&self, x: f64) -> f64 {
        sigmoid(self.logit(x))
    }

    /// Logit at `x`; adds `scale * dlogit/dtheta` into `dtheta` and returns
    /// `(logit, dlogit/dx)`.
    pub fn logit_backward(&self, x: f64, scale: f64, dtheta: &mut [f64]) -> (f64, f64) {
        let (t, out) = self.forward(x);
        let mut gu = [0.0; WIDTH];
        for m in 0..WIDTH {
            gu[m] = scale * self.sp[OUT_H + m];
            dtheta[OUT_H + m] += scale * self.dsp[OUT_H + m] * t.u[3][m];
        }
        dtheta[OUT_B] += scale;
        let mut gx = 0.0;
        for j in (0..4).rev() {
            let (h, b, a) = hidden_offsets(j);
            let mut gz = [0.0; WIDTH];
            for i in 0..WIDTH {
                let g = self.gate[a + i];
                gz[i] = gu[i] * (1.0 + g * (1.0 - t.tz[j][i] * t.tz[j][i]));
                dtheta[a + i] += gu[i] * t.tz[j][i] * (1.0 - g * g);
                dtheta[b + i] += gz[i];
            }
            if j == 0 {
                for i in 0..WIDTH {
                    dtheta[h + i] += gz[i] * self.dsp[h + i] * x;
                    gx += gz[i] * self.sp[h + i];
                }
            } else {
                let mut prev = [0.0; WIDTH];
                for i in 0..WIDTH {
                    for m in 0..WIDTH {
                        let k = h + WIDTH * i + m;
                        dtheta[k] += gz[i] * self.dsp[k] * t.u[j - 1][m];
                        prev[m] += gz[i] * self.sp[k];
                    }
                }
                gu = prev;
            }
        }
        (out, if scale != 0.0 { gx / scale } else { 0.0 })
    }

    /// Bits of the unit interval `[y - 1/2, y + 1/2]`, floored at `max_bits`.
    pub fn bits(&self, y: f64, max_bits: f64) -> f64 {
        let (hi, lo) = (self.logit(y + 0.5), self.logit(y - 0.5));
        interval_bits(hi, lo).min(max_bits)
    }

    /// Bits of `[y - 1/2, y + 1/2]` plus gradients. `dtheta` accumulates
    /// `upstream * dbits/dtheta`; returns `(bits, dbits/dy)`. The gradient is
    /// that of the unfloored `-log2 p`, so saturated tails still train.
    pub fn bits_backward(&self, y: f64, max_bits: f64, upstream: f64, dtheta: &mut [f64]) -> (f64, f64) {
        let (hi, lo) = (self.logit(y + 0.5), self.logit(y - 0.5));
        let (bits, ghi, glo) = interval_bits_grad(hi, lo);
        if ghi == 0.0 && glo == 0.0 {
            return (bits.min(max_bits), 0.0);
        }
        let (_, dhi_dy) = self.logit_backward(y + 0.5, upstream * ghi, dtheta);
        let (_, dlo_dy) = self.logit_backward(y - 0.5, upstream * glo, dtheta);
        (bits.min(max_bits), ghi * dhi_dy + glo * dlo_dy)
    }
}

/// `-log2(sigmoid(hi) - sigmoid(lo))`, evaluated in the tail that avoids
/// cancellation.
pub fn interval_bits(hi: f64, lo: f64) -> f64 {
    -log_interval(hi, lo) / LN_2
}

fn log_interval(hi: f64, lo: f64) -> f64 {
    // sigmoid(hi) - sigmoid(lo) == sigmoid(-lo) - sigmoid(-hi); pick the side
    // where both arguments are mostly negative.
    let (a, b) = if hi + lo > 0.0 { (-lo, -hi) } else { (hi, lo) };
    if a <= b {
        return f64::NEG_INFINITY;
    }
    let la = log_sigmoid(a);
    let lb = log_sigmoid(b);
    la + (-(lb - la).exp()).ln_1p()
}

/// Returns `(bits, dbits/dhi, dbits/dlo)`.
fn interval_bits_grad(hi: f64, lo: f64) -> (f64, f64, f64) {
    let lp = log_interval(hi, lo);
    if !lp.is_finite() {
        return (f64::INFINITY, 0.0, 0.0);
    }
    // dp/dz = sigmoid'(z) = exp(log_sigmoid(z) + log_sigmoid(-z))
    let r = |z: f64| (log_sigmoid(z) + log_sigmoid(-z) - lp).exp();
    (-lp / LN_2, -r(hi) / LN_2, r(lo) / LN_2)
}
