//! Reverse-mode automatic differentiation over a linear tape.

use std::collections::HashMap;

use super::backend::{
    axis_filter_forward, axis_filter_transpose, context_bits_forward, context_theta, factorized_bits_forward,
    Backend, MAX_SYMBOL_BITS,
};
use super::conv::{conv3d_backward, conv3d_forward, MaskKind};
use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{invert_perm, Tensor};
use crate::entropy::cumulative::{sigmoid, Prepared, PARAM_COUNT};
use crate::error::{Error, Result};
use crate::quant::round_half_away;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf(Option<ParamId>),
    Conv { x: Var, w: Var, b: Var, mask: Option<MaskKind> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    ClampMin(Var, f64),
    Round(Var),
    AxisFilter(Var, Vec<(isize, f64)>),
    SplitEven(Var),
    SplitOdd(Var),
    Merge(Var, Var),
    Permute(Var, [usize; 3]),
    Concat(Vec<Var>),
    Sum(Var),
    SqErr(Var, Var),
    FactorizedBits(Var, Var),
    ContextBits(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording backend. Parameters become leaves on first use; constants never
/// receive gradients.
pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    leaves: HashMap<ParamId, Var>,
    frozen: Box<dyn Fn(ParamId) -> bool + 's>,
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Tape { store, nodes: Vec::new(), leaves: HashMap::new(), frozen: Box::new(|_| false) }
    }

    /// Parameters for which `frozen` returns true are recorded as constants.
    pub fn with_frozen(store: &'s ParamStore, frozen: impl Fn(ParamId) -> bool + 's) -> Self {
        Tape { store, nodes: Vec::new(), leaves: HashMap::new(), frozen: Box::new(frozen) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradients of the scalar `root` with respect to every parameter.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.val(root).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.val(root).shape()
            )));
        }
        let mut out = Gradients::zeros_like(self.store);
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.val(root).shape(), 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let mut send = |v: Var, t: Tensor| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf(Some(p)) => out.accumulate(*p, &g),
                Op::Leaf(None) => {}
                Op::Conv { x, w, b, mask } => {
                    let need_x = self.nodes[x.0].needs_grad;
                    let (gx, gw, gb) = conv3d_backward(self.val(*x), self.val(*w), *mask, &g, need_x);
                    if let Some(gx) = gx {
                        send(*x, gx);
                    }
                    send(*w, gw);
                    send(*b, gb);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    send(*a, g.zip_map(self.val(*b), |gv, bv| gv * bv));
                    send(*b, g.zip_map(self.val(*a), |gv, av| gv * av));
                }
                Op::Div(a, b) => {
                    let bv = self.val(*b);
                    send(*a, g.zip_map(bv, |gv, d| gv / d));
                    let num = self.val(*a).zip_map(bv, |n, d| n / (d * d));
                    send(*b, g.zip_map(&num, |gv, q| -gv * q));
                }
                Op::MulScalar(a, s) => {
                    let sv = self.val(*s).item();
                    let dot: f64 = g.data().iter().zip(self.val(*a).data()).map(|(x, y)| x * y).sum();
                    send(*a, g.map(|v| v * sv));
                    send(*s, Tensor::full(self.val(*s).shape(), dot));
                }
                Op::Scale(a, c) => send(*a, g.map(|v| v * c)),
                Op::Relu(a) => send(*a, g.zip_map(self.val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })),
                Op::Sigmoid(a) => send(*a, g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y))),
                Op::Tanh(a) => send(*a, g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y))),
                Op::ClampMin(a, lo) => {
                    let lo = *lo;
                    send(*a, g.zip_map(self.val(*a), |gv, x| if x >= lo { gv } else { 0.0 }))
                }
                Op::Round(a) => send(*a, g),
                Op::AxisFilter(a, taps) => send(*a, axis_filter_transpose(&g, taps)),
                Op::SplitEven(a) | Op::SplitOdd(a) => {
                    let zeros = Tensor::zeros(g.shape());
                    let full = if matches!(node.op, Op::SplitEven(_)) {
                        Tensor::merge_z(&g, &zeros)
                    } else {
                        Tensor::merge_z(&zeros, &g)
                    };
                    send(*a, full);
                }
                Op::Merge(e, o) => {
                    let (ge, go) = g.split_z();
                    send(*e, ge);
                    send(*o, go);
                }
                Op::Permute(a, perm) => send(*a, g.permute_spatial(invert_perm(*perm))),
                Op::Concat(parts) => {
                    let mut c0 = 0;
                    for p in parts {
                        let c = self.val(*p).dims4()[0];
                        let slices: Vec<Tensor> = (c0..c0 + c).map(|k| g.channel(k)).collect();
                        let refs: Vec<&Tensor> = slices.iter().collect();
                        send(*p, Tensor::concat(&refs));
                        c0 += c;
                    }
                }
                Op::Sum(a) => {
                    let gv = g.item();
                    send(*a, Tensor::full(self.val(*a).shape(), gv));
                }
                Op::SqErr(a, b) => {
                    let gv = g.item();
                    let diff = self.val(*a).zip_map(self.val(*b), |x, y| 2.0 * gv * (x - y));
                    send(*b, diff.map(|v| -v));
                    send(*a, diff);
                }
                Op::FactorizedBits(y, theta) => {
                    let gv = g.item();
                    let p = Prepared::new(self.val(*theta).data());
                    let mut gt = vec![0.0; PARAM_COUNT];
                    let gy: Vec<f64> = self
                        .val(*y)
                        .data()
                        .iter()
                        .map(|&v| gv * p.bits_backward(v, MAX_SYMBOL_BITS, gv, &mut gt).1)
                        .collect();
                    let gy = Tensor::from_vec(self.val(*y).shape(), gy).expect("shape");
                    send(*y, gy);
                    send(*theta, Tensor::from_vec(self.val(*theta).shape(), gt).expect("shape"));
                }
                Op::ContextBits(y, psi) => {
                    let gv = g.item();
                    let yv = self.val(*y);
                    let pv = self.val(*psi);
                    let n = yv.len();
                    let mut gy = Tensor::zeros(yv.shape());
                    let mut gp = Tensor::zeros(pv.shape());
                    let mut gt = [0.0; PARAM_COUNT];
                    for i in 0..n {
                        let p = Prepared::new(&context_theta(pv, i, n));
                        gt.iter_mut().for_each(|v| *v = 0.0);
                        let (_, dy) = p.bits_backward(yv.data()[i], MAX_SYMBOL_BITS, gv, &mut gt);
                        gy.data_mut()[i] = gv * dy;
                        for (k, v) in gt.iter().enumerate() {
                            gp.data_mut()[k * n + i] = *v;
                        }
                    }
                    send(*y, gy);
                    send(*psi, gp);
                }
            }
        }
        Ok(out)
    }
}

impl Backend for Tape<'_> {
    type V = Var;

    fn store(&self) -> &ParamStore {
        self.store
    }

    fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.leaves.get(&id) {
            return *v;
        }
        let needs_grad = !(self.frozen)(id);
        self.nodes.push(Node { value: self.store.get(id).clone(), op: Op::Leaf(Some(id)), needs_grad });
        let v = Var(self.nodes.len() - 1);
        self.leaves.insert(id, v);
        v
    }

    fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf(None), needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        self.val(*v)
    }

    fn conv3d(&mut self, x: &Var, w: &Var, b: &Var, mask: Option<MaskKind>) -> Var {
        let y = conv3d_forward(self.val(*x), self.val(*w), self.val(*b), mask);
        self.push(y, Op::Conv { x: *x, w: *w, b: *b, mask }, &[*x, *w, *b])
    }

    fn add(&mut self, a: &Var, b: &Var) -> Var {
        let y = self.val(*a).zip_map(self.val(*b), |x, y| x + y);
        self.push(y, Op::Add(*a, *b), &[*a, *b])
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Var {
        let y = self.val(*a).zip_map(self.val(*b), |x, y| x - y);
        self.push(y, Op::Sub(*a, *b), &[*a, *b])
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Var {
        let y = self.val(*a).zip_map(self.val(*b), |x, y| x * y);
        self.push(y, Op::Mul(*a, *b), &[*a, *b])
    }

    fn div(&mut self, a: &Var, b: &Var) -> Var {
        let y = self.val(*a).zip_map(self.val(*b), |x, y| x / y);
        self.push(y, Op::Div(*a, *b), &[*a, *b])
    }

    fn mul_scalar(&mut self, a: &Var, s: &Var) -> Var {
        let sv = self.val(*s).item();
        let y = self.val(*a).map(|x| x * sv);
        self.push(y, Op::MulScalar(*a, *s), &[*a, *s])
    }

    fn scale(&mut self, a: &Var, c: f64) -> Var {
        let y = self.val(*a).map(|x| x * c);
        self.push(y, Op::Scale(*a, c), &[*a])
    }

    fn relu(&mut self, a: &Var) -> Var {
        let y = self.val(*a).map(|x| x.max(0.0));
        self.push(y, Op::Relu(*a), &[*a])
    }

    fn sigmoid(&mut self, a: &Var) -> Var {
        let y = self.val(*a).map(sigmoid);
        self.push(y, Op::Sigmoid(*a), &[*a])
    }

    fn tanh(&mut self, a: &Var) -> Var {
        let y = self.val(*a).map(f64::tanh);
        self.push(y, Op::Tanh(*a), &[*a])
    }

    fn clamp_min(&mut self, a: &Var, lo: f64) -> Var {
        let y = self.val(*a).map(|x| x.max(lo));
        self.push(y, Op::ClampMin(*a, lo), &[*a])
    }

    fn round(&mut self, a: &Var) -> Var {
        let y = self.val(*a).map(round_half_away);
        self.push(y, Op::Round(*a), &[*a])
    }

    fn axis_filter(&mut self, a: &Var, taps: &[(isize, f64)]) -> Var {
        let y = axis_filter_forward(self.val(*a), taps);
        self.push(y, Op::AxisFilter(*a, taps.to_vec()), &[*a])
    }

    fn split_z(&mut self, a: &Var) -> (Var, Var) {
        let (e, o) = self.val(*a).split_z();
        let ev = self.push(e, Op::SplitEven(*a), &[*a]);
        let ov = self.push(o, Op::SplitOdd(*a), &[*a]);
        (ev, ov)
    }

    fn merge_z(&mut self, even: &Var, odd: &Var) -> Var {
        let y = Tensor::merge_z(self.val(*even), self.val(*odd));
        self.push(y, Op::Merge(*even, *odd), &[*even, *odd])
    }

    fn permute(&mut self, a: &Var, perm: [usize; 3]) -> Var {
        if perm == [0, 1, 2] {
            return *a;
        }
        let y = self.val(*a).permute_spatial(perm);
        self.push(y, Op::Permute(*a, perm), &[*a])
    }

    fn concat(&mut self, parts: &[Var]) -> Var {
        let refs: Vec<&Tensor> = parts.iter().map(|p| self.val(*p)).collect();
        let y = Tensor::concat(&refs);
        self.push(y, Op::Concat(parts.to_vec()), parts)
    }

    fn sum(&mut self, a: &Var) -> Var {
        let y = Tensor::scalar(self.val(*a).sum());
        self.push(y, Op::Sum(*a), &[*a])
    }

    fn sq_err(&mut self, a: &Var, b: &Var) -> Var {
        let s = self.val(*a).data().iter().zip(self.val(*b).data()).map(|(x, y)| (x - y) * (x - y)).sum();
        self.push(Tensor::scalar(s), Op::SqErr(*a, *b), &[*a, *b])
    }

    fn factorized_bits(&mut self, y: &Var, theta: &Var) -> Var {
        let s = factorized_bits_forward(self.val(*y), self.val(*theta));
        self.push(Tensor::scalar(s), Op::FactorizedBits(*y, *theta), &[*y, *theta])
    }

    fn context_bits(&mut self, y: &Var, psi: &Var) -> Var {
        let s = context_bits_forward(self.val(*y), self.val(*psi));
        self.push(Tensor::scalar(s), Op::ContextBits(*y, *psi), &[*y, *psi])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::backend::Infer;
    use crate::nn::gradcheck::check_params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::full(&[1, 2, 2, 2], 3.0));
        let mut t = Tape::new(&store);
        let x = t.param(id);
        let s = t.sum(&x);
        let g = t.backward(s).unwrap();
        assert!(g.get(id).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn dead_relu_has_zero_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::full(&[1, 2, 2, 2], -0.5));
        let mut t = Tape::new(&store);
        let x = t.param(id);
        let r = t.relu(&x);
        let s = t.sum(&r);
        let g = t.backward(s).unwrap();
        assert!(g.get(id).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_root_is_usage_error() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::full(&[1, 2, 2, 2], 1.0));
        let mut t = Tape::new(&store);
        let x = t.param(id);
        assert!(matches!(t.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::full(&[1, 1, 1, 2], 2.0));
        let b = store.add("b", Tensor::full(&[1, 1, 1, 2], 3.0));
        let mut t = Tape::with_frozen(&store, move |p| p == b);
        let (va, vb) = (t.param(a), t.param(b));
        let m = t.mul(&va, &vb);
        let s = t.sum(&m);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).data(), &[3.0, 3.0]);
        assert_eq!(g.get(b).data(), &[0.0, 0.0]);
    }

    /// Every elementwise and structural op against central differences.
    #[test]
    fn elementwise_ops_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let a = store.add("a", random(&[2, 4, 3, 2], &mut rng, -1.0, 1.0));
        let b = store.add("b", random(&[2, 4, 3, 2], &mut rng, 0.5, 1.5));
        let s = store.add("s", Tensor::scalar(0.7));
        let r = random(&[4, 4, 3, 2], &mut rng, -1.0, 1.0);
        let f = |store: &ParamStore| -> f64 {
            let mut be = Infer::new(store);
            forward(&mut be, a, b, s, &r)
        };
        let mut tape = Tape::new(&store);
        let root = forward_tape(&mut tape, a, b, s, &r);
        let g = tape.backward(root).unwrap();
        let err = check_params(&store, &g, &[a, b, s], 1e-3, f);
        assert!(err < 1e-4, "relative error {err}");
    }

    fn forward<B: Backend>(be: &mut B, a: ParamId, b: ParamId, s: ParamId, r: &Tensor) -> f64 {
        let out = build(be, a, b, s, r);
        be.value(&out).item()
    }

    fn forward_tape(t: &mut Tape, a: ParamId, b: ParamId, s: ParamId, r: &Tensor) -> Var {
        build(t, a, b, s, r)
    }

    fn build<B: Backend>(be: &mut B, a: ParamId, b: ParamId, s: ParamId, r: &Tensor) -> B::V {
        let (va, vb, vs) = (be.param(a), be.param(b), be.param(s));
        let x1 = be.mul(&va, &vb);
        let x2 = be.div(&x1, &vb);
        let x3 = be.sub(&x2, &vb);
        let x4 = be.tanh(&x3);
        let x5 = be.sigmoid(&x1);
        let x6 = be.add(&x4, &x5);
        let x7 = be.mul_scalar(&x6, &vs);
        let x8 = be.clamp_min(&x7, -0.9);
        let x9 = be.axis_filter(&x8, &[(-1, 0.3), (1, -0.6)]);
        let (e, o) = be.split_z(&x9);
        let eo = be.mul(&e, &o);
        let m = be.merge_z(&eo, &o);
        let p = be.permute(&m, [2, 0, 1]);
        let q = be.permute(&p, [1, 2, 0]);
        let c = be.concat(&[q.clone(), va.clone()]);
        let rc = be.constant(r.clone());
        let d = be.sq_err(&c, &rc);
        let relu = be.relu(&x3);
        let sr = be.sum(&relu);
        let sc = be.scale(&sr, 0.5);
        be.add(&d, &sc)
    }

    #[test]
    fn conv_tanh_network_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let w1 = store.add("w1", random(&[3, 1, 3, 3, 3], &mut rng, -0.5, 0.5));
        let b1 = store.add("b1", random(&[3], &mut rng, -0.5, 0.5));
        let w2 = store.add("w2", random(&[1, 3, 3, 3, 3], &mut rng, -0.5, 0.5));
        let b2 = store.add("b2", random(&[1], &mut rng, -0.5, 0.5));
        let x = random(&[1, 3, 4, 3], &mut rng, -1.0, 1.0);
        fn net<B: Backend>(be: &mut B, ids: [ParamId; 4], x: &Tensor) -> B::V {
            let xin = be.constant(x.clone());
            let (w1, b1, w2, b2) = (be.param(ids[0]), be.param(ids[1]), be.param(ids[2]), be.param(ids[3]));
            let h = be.conv3d(&xin, &w1, &b1, None);
            let h = be.tanh(&h);
            let y = be.conv3d(&h, &w2, &b2, Some(MaskKind::B));
            let y = be.tanh(&y);
            let y2 = be.mul(&y, &y);
            be.sum(&y2)
        }
        let ids = [w1, b1, w2, b2];
        let mut tape = Tape::new(&store);
        let root = net(&mut tape, ids, &x);
        let g = tape.backward(root).unwrap();
        let err = check_params(&store, &g, &ids, 1e-3, |s| {
            let mut be = Infer::new(s);
            let v = net(&mut be, ids, &x);
            v.item()
        });
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn entropy_bit_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut store = ParamStore::new();
        let base = crate::entropy::cumulative::CumulativeModel::with_scale(3.0, 0.0);
        let mut th = base.theta.to_vec();
        th.iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
        let theta = store.add("theta", Tensor::from_vec(&[PARAM_COUNT], th).unwrap());
        let y = store.add("y", random(&[1, 2, 2, 3], &mut rng, -3.0, 3.0));
        let mut psi = Tensor::zeros(&[PARAM_COUNT, 2, 2, 3]);
        for k in 0..PARAM_COUNT {
            for i in 0..12 {
                psi.data_mut()[k * 12 + i] = base.theta[k] + rng.gen_range(-0.2..0.2);
            }
        }
        let psi = store.add("psi", psi);
        fn net<B: Backend>(be: &mut B, ids: [ParamId; 3]) -> B::V {
            let (t, y, p) = (be.param(ids[0]), be.param(ids[1]), be.param(ids[2]));
            let a = be.factorized_bits(&y, &t);
            let b = be.context_bits(&y, &p);
            be.add(&a, &b)
        }
        let ids = [theta, y, psi];
        let mut tape = Tape::new(&store);
        let root = net(&mut tape, ids);
        let g = tape.backward(root).unwrap();
        let err = check_params(&store, &g, &ids, 1e-4, |s| net(&mut Infer::new(s), ids).item());
        assert!(err < 1e-4, "relative error {err}");
    }
}
