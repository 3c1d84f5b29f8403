//! Post-processing enhancer applied to lossy reconstructions:
//! `x + tail(res^6(head(x)))` with a global skip.

use rand::Rng;

use crate::nn::layers::{Conv, ResBlock};
use crate::nn::{Backend, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct PostProcess {
    pub head: Conv,
    pub blocks: Vec<ResBlock>,
    pub tail: Conv,
    pub value_scale: f64,
}

impl PostProcess {
    /// The tail starts at zero, so a fresh enhancer is the identity.
    pub fn build(store: &mut ParamStore, width: usize, blocks: usize, value_scale: f64, rng: &mut impl Rng) -> Self {
        let head = Conv::new(store, "post/head", (1, width, 3), None, rng);
        let blocks = (0..blocks).map(|i| ResBlock::new(store, &format!("post/res{i}"), width, rng)).collect();
        let tail = Conv::new(store, "post/tail", (width, 1, 3), None, rng);
        tail.zero(store);
        PostProcess { head, blocks, tail, value_scale }
    }

    pub fn find(store: &ParamStore, blocks: usize, value_scale: f64) -> Option<Self> {
        Some(PostProcess {
            head: Conv::find(store, "post/head", None)?,
            blocks: (0..blocks).map(|i| ResBlock::find(store, &format!("post/res{i}"))).collect::<Option<_>>()?,
            tail: Conv::find(store, "post/tail", None)?,
            value_scale,
        })
    }

    pub fn forward<B: Backend>(&self, be: &mut B, x: &B::V) -> B::V {
        let xs = be.scale(x, 1.0 / self.value_scale);
        let mut h = self.head.forward(be, &xs);
        for b in &self.blocks {
            h = b.forward(be, &h);
        }
        let r = self.tail.forward(be, &h);
        let r = be.scale(&r, self.value_scale);
        be.add(x, &r)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.head.ids().to_vec();
        for b in &self.blocks {
            ids.extend(b.c1.ids());
            ids.extend(b.c2.ids());
        }
        ids.extend(self.tail.ids());
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::{random_tensor, randomize};
    use crate::nn::Infer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zeroed_residual_path_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let p = PostProcess::build(&mut store, 4, 6, 255.0, &mut rng);
        assert_eq!(p.blocks.len(), 6);
        randomize(&mut store, "post/", &mut rng);
        for b in &p.blocks {
            b.c2.zero(&mut store);
        }
        p.tail.zero(&mut store);
        let x = random_tensor(&[1, 4, 4, 4], 0.0, 255.0, &mut rng);
        let mut be = Infer::new(&store);
        let xv = be.constant(x.clone());
        assert_eq!(*p.forward(&mut be, &xv), x);
    }

    #[test]
    fn trained_path_changes_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let p = PostProcess::build(&mut store, 4, 2, 255.0, &mut rng);
        randomize(&mut store, "post/", &mut rng);
        let x = random_tensor(&[1, 4, 4, 4], 0.0, 255.0, &mut rng);
        let mut be = Infer::new(&store);
        let xv = be.constant(x.clone());
        assert_ne!(*p.forward(&mut be, &xv), x);
        assert_eq!(p.param_ids().len(), 2 + 2 * 4 + 2);
    }
}
