use crate::nn::{Gradients, ParamId, ParamStore};

/// Adam with bias correction. Moments and step counts are kept per
/// parameter, so a parameter that starts training in a later stage begins
/// with fresh statistics.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: Vec<Option<Moments>>,
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, state: Vec::new() }
    }

    /// Updates exactly the parameters in `ids`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, ids: &[ParamId]) {
        for &id in ids {
            let g = grads.get(id).data();
            if self.state.len() <= id.index() {
                self.state.resize(id.index() + 1, None);
            }
            let s = self.state[id.index()].get_or_insert_with(|| Moments { m: vec![0.0; g.len()], v: vec![0.0; g.len()], t: 0 });
            s.t += 1;
            let c1 = 1.0 - self.beta1.powi(s.t);
            let c2 = 1.0 - self.beta2.powi(s.t);
            let p = store.get_mut(id).data_mut();
            for i in 0..g.len() {
                s.m[i] = self.beta1 * s.m[i] + (1.0 - self.beta1) * g[i];
                s.v[i] = self.beta2 * s.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = s.m[i] / c1;
                let vh = s.v[i] / c2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Backend, Tape, Tensor};

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap());
        let mut adam = Adam::new(0.1);
        for _ in 0..300 {
            let grads = {
                let mut t = Tape::new(&store);
                let x = t.param(id);
                let z = t.constant(Tensor::zeros(&[2]));
                let l = t.sq_err(&x, &z);
                t.backward(l).unwrap()
            };
            adam.step(&mut store, &grads, &[id]);
        }
        assert!(store.get(id).max_abs() < 0.05, "{:?}", store.get(id));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::from_vec(&[1], vec![1.0]).unwrap());
        let other = store.add("y", Tensor::from_vec(&[1], vec![5.0]).unwrap());
        let grads = {
            let mut t = Tape::new(&store);
            let x = t.param(id);
            let y = t.param(other);
            let s = t.add(&x, &y);
            let l = t.sum(&s);
            t.backward(l).unwrap()
        };
        let mut adam = Adam::new(0.01);
        adam.step(&mut store, &grads, &[id]);
        assert!((store.get(id).item() - 0.99).abs() < 1e-9);
        assert_eq!(store.get(other).item(), 5.0);
    }
}
