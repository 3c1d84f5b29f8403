//! Convolutional building blocks registered in a [`ParamStore`].

use rand::Rng;

use super::backend::Backend;
use super::conv::MaskKind;
use super::params::{uniform_fan_in, ParamId, ParamStore};
use super::tensor::Tensor;

/// One 3-D convolution with its own weight and bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub mask: Option<MaskKind>,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        (cin, cout, k): (usize, usize, usize),
        mask: Option<MaskKind>,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * k * k * k;
        let weight = store.add(format!("{name}/weight"), uniform_fan_in(&[cout, cin, k, k, k], fan_in, rng));
        let bias = store.add(format!("{name}/bias"), uniform_fan_in(&[cout], fan_in, rng));
        Conv { weight, bias, mask }
    }

    /// Looks up an existing layer by name.
    pub fn find(store: &ParamStore, name: &str, mask: Option<MaskKind>) -> Option<Self> {
        Some(Conv { weight: store.find(&format!("{name}/weight"))?, bias: store.find(&format!("{name}/bias"))?, mask })
    }

    pub fn forward<B: Backend>(&self, be: &mut B, x: &B::V) -> B::V {
        let w = be.param(self.weight);
        let b = be.param(self.bias);
        be.conv3d(x, &w, &b, self.mask)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        for id in [self.weight, self.bias] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn in_channels(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape()[1]
    }

    pub fn out_channels(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape()[0]
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// `conv(1->w) -> relu -> conv(w->w) -> relu -> conv(w->1)`, all 3x3x3.
#[derive(Clone, Debug)]
pub struct ConvNet {
    pub layers: [Conv; 3],
}

impl ConvNet {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut impl Rng) -> Self {
        let layers = [
            Conv::new(store, &format!("{name}/l0"), (1, width, 3), None, rng),
            Conv::new(store, &format!("{name}/l1"), (width, width, 3), None, rng),
            Conv::new(store, &format!("{name}/l2"), (width, 1, 3), None, rng),
        ];
        ConvNet { layers }
    }

    pub fn find(store: &ParamStore, name: &str) -> Option<Self> {
        let l = |i: usize| Conv::find(store, &format!("{name}/l{i}"), None);
        Some(ConvNet { layers: [l(0)?, l(1)?, l(2)?] })
    }

    pub fn forward<B: Backend>(&self, be: &mut B, x: &B::V) -> B::V {
        let h = self.layers[0].forward(be, x);
        let h = be.relu(&h);
        let h = self.layers[1].forward(be, &h);
        let h = be.relu(&h);
        self.layers[2].forward(be, &h)
    }

    /// Zeroes the output layer so the network starts as the constant 0.
    pub fn zero_output(&self, store: &mut ParamStore) {
        self.layers[2].zero(store);
    }

    pub fn parameter_count(width: usize) -> usize {
        (27 * width + width) + (27 * width * width + width) + (27 * width + 1)
    }
}

/// `x + conv(relu(conv(x)))` at constant width.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub c1: Conv,
    pub c2: Conv,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut impl Rng) -> Self {
        ResBlock {
            c1: Conv::new(store, &format!("{name}/c1"), (width, width, 3), None, rng),
            c2: Conv::new(store, &format!("{name}/c2"), (width, width, 3), None, rng),
        }
    }

    pub fn find(store: &ParamStore, name: &str) -> Option<Self> {
        Some(ResBlock {
            c1: Conv::find(store, &format!("{name}/c1"), None)?,
            c2: Conv::find(store, &format!("{name}/c2"), None)?,
        })
    }

    pub fn forward<B: Backend>(&self, be: &mut B, x: &B::V) -> B::V {
        let h = self.c1.forward(be, x);
        let h = be.relu(&h);
        let f = self.c2.forward(be, &h);
        be.add(x, &f)
    }
}

/// Re-draws every parameter whose name starts with `prefix` from the
/// fan-in uniform distribution. Biases use the fan-in of their sibling weight.
pub fn randomize(store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) {
    let ids: Vec<ParamId> = store.iter().filter(|(_, n, _)| n.starts_with(prefix)).map(|(id, _, _)| id).collect();
    for id in ids {
        let name = store.name(id).to_string();
        let fan_in = if let Some(stem) = name.strip_suffix("/bias") {
            match store.find(&format!("{stem}/weight")) {
                Some(w) => store.get(w).shape()[1..].iter().product(),
                None => 1,
            }
        } else {
            store.get(id).shape().get(1..).map_or(1, |s| s.iter().product::<usize>().max(1))
        };
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = uniform_fan_in(&shape, fan_in, rng);
    }
}

/// Convenience used by tests: a rank-4 tensor filled from `rng` in `[lo, hi)`.
pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::backend::Infer;
    use crate::nn::conv::conv3d_forward;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_residual_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let rb = ResBlock::new(&mut store, "rb", 4, &mut rng);
        rb.c2.zero(&mut store);
        let x = random_tensor(&[4, 3, 4, 5], -1.0, 1.0, &mut rng);
        let mut be = Infer::new(&store);
        let xv = be.constant(x.clone());
        let y = rb.forward(&mut be, &xv);
        assert_eq!(*y, x);
    }

    #[test]
    fn residual_block_preserves_shape_and_matches_manual_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let rb = ResBlock::new(&mut store, "rb", 16, &mut rng);
        let x = random_tensor(&[16, 8, 8, 8], -1.0, 1.0, &mut rng);
        let mut be = Infer::new(&store);
        let xv = be.constant(x.clone());
        let y = rb.forward(&mut be, &xv);
        assert_eq!(y.shape(), &[16, 8, 8, 8]);

        let h = conv3d_forward(&x, store.get(rb.c1.weight), store.get(rb.c1.bias), None).map(|v| v.max(0.0));
        let f = conv3d_forward(&h, store.get(rb.c2.weight), store.get(rb.c2.bias), None);
        let manual = x.zip_map(&f, |a, b| a + b);
        assert_eq!(*y, manual);
    }

    #[test]
    fn convnet_counts_and_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let net = ConvNet::new(&mut store, "p", 16, &mut rng);
        assert_eq!(store.count_with_prefix("p/"), ConvNet::parameter_count(16));
        net.zero_output(&mut store);
        let mut be = Infer::new(&store);
        let x = be.constant(random_tensor(&[1, 4, 4, 4], 0.0, 1.0, &mut rng));
        assert_eq!(net.forward(&mut be, &x).max_abs(), 0.0);
        assert!(ConvNet::find(&store, "p").is_some());
    }

    #[test]
    fn randomize_touches_only_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let a = ConvNet::new(&mut store, "a", 2, &mut rng);
        let b = ConvNet::new(&mut store, "b", 2, &mut rng);
        a.zero_output(&mut store);
        b.zero_output(&mut store);
        randomize(&mut store, "a/", &mut rng);
        assert!(store.get(a.layers[2].weight).max_abs() > 0.0);
        assert_eq!(store.get(b.layers[2].weight).max_abs(), 0.0);
        let bound = 1.0 / (27.0f64 * 2.0).sqrt();
        assert!(store.get(a.layers[2].bias).max_abs() <= bound);
    }
}
