//! Multi-level separable 3-D decomposition built from 1-D lifting passes.
//!
//! Each level lifts along z, then y, then x, and recurses on the low band.
//! Band labels carry one letter per axis in (z, y, x) order, so label index
//! `j` has bit 0 set when the band is high-pass along z, bit 1 for y and bit 2
//! for x. Bands are serialized deepest `LLL` first, then for each level from
//! deepest to shallowest the labels `1..=7`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::lifting::{
    axis_perm, find_learned_step, learned_step, learned_step_parameter_count, lift_forward, lift_inverse,
    AffineGranularity, LiftingStep, Mode,
};
use crate::nn::tensor::invert_perm;
use crate::nn::{Backend, ParamId, ParamStore, Tensor};

pub const LABELS: [&str; 8] = ["LLL", "HLL", "LHL", "HHL", "LLH", "HLH", "LHH", "HHH"];

/// Axes that share one set of lifting parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Sharing {
    All,
    #[default]
    Xy,
    Xz,
    Yz,
    None,
}

impl Sharing {
    pub const ALL: [Sharing; 5] = [Sharing::All, Sharing::Xy, Sharing::Xz, Sharing::Yz, Sharing::None];

    /// Parameter-group name used by axis `axis` (0 = z, 1 = y, 2 = x).
    pub fn group(self, axis: usize) -> &'static str {
        let own = ["z", "y", "x"][axis];
        match (self, axis) {
            (Sharing::All, _) => "zyx",
            (Sharing::Xy, 1 | 2) => "yx",
            (Sharing::Xz, 0 | 2) => "zx",
            (Sharing::Yz, 0 | 1) => "zy",
            _ => own,
        }
    }

    pub fn group_count(self) -> usize {
        match self {
            Sharing::All => 1,
            Sharing::None => 3,
            _ => 2,
        }
    }

    pub fn code(self) -> u8 {
        Sharing::ALL.iter().position(|&s| s == self).expect("listed") as u8
    }

    pub fn from_code(c: u8) -> Result<Self> {
        Sharing::ALL.get(c as usize).copied().ok_or_else(|| Error::format(format!("unknown sharing mode {c}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Sharing::All => "all",
            Sharing::Xy => "xy",
            Sharing::Xz => "xz",
            Sharing::Yz => "yz",
            Sharing::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Sharing::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown sharing mode '{s}' (all, xy, xz, yz, none)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TransformKind {
    Cdf53,
    Cdf97,
    #[default]
    Learned,
}

impl TransformKind {
    pub fn code(self) -> u8 {
        match self {
            TransformKind::Cdf53 => 0,
            TransformKind::Cdf97 => 1,
            TransformKind::Learned => 2,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(TransformKind::Cdf53),
            1 => Ok(TransformKind::Cdf97),
            2 => Ok(TransformKind::Learned),
            _ => Err(Error::format(format!("unknown transform kind {c}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformConfig {
    pub kind: TransformKind,
    pub levels: usize,
    pub sharing: Sharing,
    pub granularity: AffineGranularity,
    /// Lifting steps per 1-D pass (learned kind only).
    pub steps: usize,
    pub width: usize,
    /// Typical sample magnitude; network inputs are divided by it.
    pub value_scale: f64,
}

impl Default for TransformConfig {
    fn default() -> Self {
        TransformConfig {
            kind: TransformKind::Learned,
            levels: 3,
            sharing: Sharing::Xy,
            granularity: AffineGranularity::Fine,
            steps: 2,
            width: 16,
            value_scale: 255.0,
        }
    }
}

/// Number of trainable scalars of a learned transform.
pub fn parameter_count(sharing: Sharing, granularity: AffineGranularity, width: usize, steps: usize) -> usize {
    sharing.group_count() * steps * learned_step_parameter_count(width, granularity)
}

pub fn band_count(levels: usize) -> usize {
    7 * levels + 1
}

/// `(level, label)` of serialized band `index`; the deepest `LLL` has label 0.
pub fn band_info(levels: usize, index: usize) -> (usize, usize) {
    if index == 0 {
        (levels, 0)
    } else {
        (levels - (index - 1) / 7, (index - 1) % 7 + 1)
    }
}

/// Serialization index of `(level, label)`.
pub fn band_index(levels: usize, level: usize, label: usize) -> usize {
    if label == 0 {
        assert_eq!(level, levels, "only the deepest level keeps its LLL band");
        0
    } else {
        1 + (levels - level) * 7 + (label - 1)
    }
}

pub fn band_dims(block: [usize; 3], level: usize) -> [usize; 3] {
    block.map(|d| d >> level)
}

/// Labeled bands of one decomposed block, in serialization order.
#[derive(Clone, Debug, PartialEq)]
pub struct SubbandSet {
    pub levels: usize,
    pub bands: Vec<Tensor>,
}

impl SubbandSet {
    pub fn new(levels: usize, bands: Vec<Tensor>) -> Result<Self> {
        if bands.len() != band_count(levels) {
            return Err(Error::format(format!("expected {} bands, got {}", band_count(levels), bands.len())));
        }
        let block = bands[0].spatial().map(|d| d << levels);
        for (i, b) in bands.iter().enumerate() {
            let (level, _) = band_info(levels, i);
            if b.spatial() != band_dims(block, level) {
                return Err(Error::format(format!("band {i} has dims {:?}", b.spatial())));
            }
        }
        Ok(SubbandSet { levels, bands })
    }

    pub fn label(&self, index: usize) -> String {
        let (level, label) = band_info(self.levels, index);
        format!("{}{level}", LABELS[label])
    }

    pub fn sample_count(&self) -> usize {
        self.bands.iter().map(Tensor::len).sum()
    }
}

/// Lifting steps for each of the three axes; levels share them.
#[derive(Clone, Debug)]
pub struct Transform {
    pub levels: usize,
    axes: [Vec<LiftingStep>; 3],
}

impl Transform {
    pub fn fixed(kind: TransformKind, levels: usize) -> Self {
        let steps = match kind {
            TransformKind::Cdf53 => vec![LiftingStep::cdf53()],
            TransformKind::Cdf97 => LiftingStep::cdf97().to_vec(),
            TransformKind::Learned => panic!("learned transforms are built from a parameter store"),
        };
        Transform { levels, axes: [steps.clone(), steps.clone(), steps] }
    }

    /// Registers a fresh learned transform in `store`, or returns the fixed one.
    pub fn build(store: &mut ParamStore, cfg: &TransformConfig, rng: &mut impl Rng) -> Self {
        if cfg.kind != TransformKind::Learned {
            return Self::fixed(cfg.kind, cfg.levels);
        }
        let mut groups: Vec<(&str, Vec<LiftingStep>)> = Vec::new();
        let axes = [0, 1, 2].map(|axis| {
            let g = cfg.sharing.group(axis);
            if let Some((_, steps)) = groups.iter().find(|(n, _)| *n == g) {
                return steps.clone();
            }
            let prefix = format!("transform/{g}");
            let steps: Vec<_> = (0..cfg.steps)
                .map(|i| learned_step(store, &prefix, i, cfg.width, cfg.value_scale, cfg.granularity, rng))
                .collect();
            groups.push((g, steps.clone()));
            steps
        });
        Transform { levels: cfg.levels, axes }
    }

    pub fn find(store: &ParamStore, cfg: &TransformConfig) -> Result<Self> {
        if cfg.kind != TransformKind::Learned {
            return Ok(Self::fixed(cfg.kind, cfg.levels));
        }
        let mut axes: [Vec<LiftingStep>; 3] = Default::default();
        for (axis, slot) in axes.iter_mut().enumerate() {
            let prefix = format!("transform/{}", cfg.sharing.group(axis));
            *slot = (0..cfg.steps)
                .map(|i| find_learned_step(store, &prefix, i, cfg.value_scale, cfg.granularity))
                .collect::<Result<_>>()?;
        }
        Ok(Transform { levels: cfg.levels, axes })
    }

    pub fn axis_steps(&self, axis: usize) -> &[LiftingStep] {
        &self.axes[axis]
    }

    /// Distinct trainable parameters.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.axes.iter().flatten().flat_map(LiftingStep::param_ids).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn check_dims(&self, dims: [usize; 3]) -> Result<()> {
        let unit = 1usize << self.levels;
        if dims.iter().any(|&d| d == 0 || d % unit != 0) {
            return Err(Error::Geometry(format!("block dims {dims:?} are not divisible by 2^{}", self.levels)));
        }
        Ok(())
    }

    fn lift_axis<B: Backend>(&self, be: &mut B, axis: usize, x: &B::V, mode: Mode) -> (B::V, B::V) {
        let perm = axis_perm(axis);
        let xp = be.permute(x, perm);
        let (l, h) = lift_forward(be, &self.axes[axis], &xp, mode);
        let inv = invert_perm(perm);
        (be.permute(&l, inv), be.permute(&h, inv))
    }

    fn unlift_axis<B: Backend>(&self, be: &mut B, axis: usize, l: &B::V, h: &B::V, mode: Mode) -> B::V {
        let perm = axis_perm(axis);
        let lp = be.permute(l, perm);
        let hp = be.permute(h, perm);
        let x = lift_inverse(be, &self.axes[axis], &lp, &hp, mode);
        be.permute(&x, invert_perm(perm))
    }

    /// One level: the eight bands of `x`, indexed by label.
    pub fn forward_level<B: Backend>(&self, be: &mut B, x: &B::V, mode: Mode) -> Vec<B::V> {
        let mut bands = vec![(0usize, x.clone())];
        for axis in 0..3 {
            let mut next = Vec::with_capacity(bands.len() * 2);
            for (label, t) in &bands {
                let (l, h) = self.lift_axis(be, axis, t, mode);
                next.push((*label, l));
                next.push((label | (1 << axis), h));
            }
            bands = next;
        }
        bands.sort_by_key(|(l, _)| *l);
        bands.into_iter().map(|(_, t)| t).collect()
    }

    /// Inverse of [`Transform::forward_level`].
    pub fn inverse_level<B: Backend>(&self, be: &mut B, bands: &[B::V], mode: Mode) -> B::V {
        assert_eq!(bands.len(), 8);
        let mut cur: Vec<B::V> = bands.to_vec();
        for axis in (0..3).rev() {
            let bit = 1 << axis;
            let mut next: Vec<Option<B::V>> = vec![None; 8];
            for label in (0..8).filter(|l| l & bit == 0 && l >> (axis + 1) == 0) {
                next[label] = Some(self.unlift_axis(be, axis, &cur[label], &cur[label | bit], mode));
            }
            cur = next.into_iter().map(|v| v.unwrap_or_else(|| cur[0].clone())).collect();
        }
        cur.swap_remove(0)
    }

    /// All `7N + 1` bands in serialization order.
    pub fn forward<B: Backend>(&self, be: &mut B, x: &B::V, mode: Mode) -> Vec<B::V> {
        let mut highs: Vec<Vec<B::V>> = Vec::with_capacity(self.levels);
        let mut low = x.clone();
        for _ in 0..self.levels {
            let mut b = self.forward_level(be, &low, mode);
            low = b.remove(0);
            highs.push(b);
        }
        let mut out = vec![low];
        for level_highs in highs.into_iter().rev() {
            out.extend(level_highs);
        }
        out
    }

    /// Low band of `level - 1` from the low band and seven high bands of `level`.
    pub fn reconstruct_low<B: Backend>(&self, be: &mut B, low: &B::V, highs: &[B::V], mode: Mode) -> B::V {
        let mut all = Vec::with_capacity(8);
        all.push(low.clone());
        all.extend_from_slice(highs);
        self.inverse_level(be, &all, mode)
    }

    /// Inverse of [`Transform::forward`].
    pub fn inverse<B: Backend>(&self, be: &mut B, bands: &[B::V], mode: Mode) -> B::V {
        assert_eq!(bands.len(), band_count(self.levels));
        let mut low = bands[0].clone();
        for level in (1..=self.levels).rev() {
            let start = band_index(self.levels, level, 1);
            low = self.reconstruct_low(be, &low, &bands[start..start + 7], mode);
        }
        low
    }

    /// Convenience wrapper evaluating [`Transform::forward`] eagerly.
    pub fn analyze(&self, store: &ParamStore, block: &Tensor, mode: Mode) -> Result<SubbandSet> {
        self.check_dims(block.spatial())?;
        let mut be = crate::nn::Infer::new(store);
        let x = be.constant(block.clone());
        let bands = self.forward(&mut be, &x, mode);
        SubbandSet::new(self.levels, bands.into_iter().map(|b| (*b).clone()).collect())
    }

    /// Convenience wrapper evaluating [`Transform::inverse`] eagerly.
    pub fn synthesize(&self, store: &ParamStore, set: &SubbandSet, mode: Mode) -> Result<Tensor> {
        if set.levels != self.levels || set.bands.len() != band_count(self.levels) {
            return Err(Error::format("subband set does not match the transform depth"));
        }
        let mut be = crate::nn::Infer::new(store);
        let bands: Vec<_> = set.bands.iter().map(|b| be.constant(b.clone())).collect();
        Ok((*self.inverse(&mut be, &bands, mode)).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::{random_tensor, randomize};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn learned(seed: u64, sharing: Sharing, levels: usize) -> (ParamStore, Transform) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = TransformConfig { levels, sharing, width: 2, ..Default::default() };
        let t = Transform::build(&mut store, &cfg, &mut rng);
        randomize(&mut store, "transform/", &mut rng);
        (store, t)
    }

    #[test]
    fn band_bookkeeping() {
        for levels in 1..=4 {
            let t = Transform::fixed(TransformKind::Cdf53, levels);
            let x = random_tensor(&[1, 16, 32, 16], 0.0, 255.0, &mut ChaCha8Rng::seed_from_u64(1));
            let set = t.analyze(&ParamStore::new(), &x, Mode::FloatLossy).unwrap();
            assert_eq!(set.bands.len(), 7 * levels + 1);
            assert_eq!(set.sample_count(), x.len());
            for (i, b) in set.bands.iter().enumerate() {
                let (level, _) = band_info(levels, i);
                assert_eq!(b.spatial(), band_dims([16, 32, 16], level));
                let (lv, lb) = band_info(levels, i);
                if lb != 0 {
                    assert_eq!(band_index(levels, lv, lb), i);
                }
            }
        }
        assert_eq!(band_count(3), 22);
        assert_eq!(band_info(3, 1), (3, 1));
        assert_eq!(band_info(3, 21), (1, 7));
    }

    #[test]
    fn serialization_order_labels() {
        let t = Transform::fixed(TransformKind::Cdf53, 2);
        let set = t.analyze(&ParamStore::new(), &Tensor::zeros(&[1, 8, 8, 8]), Mode::FloatLossy).unwrap();
        let labels: Vec<String> = (0..set.bands.len()).map(|i| set.label(i)).collect();
        assert_eq!(&labels[..3], &["LLL2", "HLL2", "LHL2"]);
        assert_eq!(labels.last().unwrap(), "HHH1");
    }

    #[test]
    fn indivisible_dims_rejected() {
        let t = Transform::fixed(TransformKind::Cdf53, 3);
        let r = t.analyze(&ParamStore::new(), &Tensor::zeros(&[1, 8, 12, 8]), Mode::FloatLossy);
        assert!(matches!(r, Err(Error::Geometry(_))));
    }

    #[test]
    fn lossless_roundtrip_all_sharing_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (i, sharing) in Sharing::ALL.into_iter().enumerate() {
            let (store, t) = learned(10 + i as u64, sharing, 2);
            let x = random_tensor(&[1, 8, 4, 8], 0.0, 65536.0, &mut rng).map(f64::floor);
            let set = t.analyze(&store, &x, Mode::IntegerLossless).unwrap();
            assert!(set.bands.iter().all(|b| b.data().iter().all(|v| v.fract() == 0.0)));
            assert_eq!(t.synthesize(&store, &set, Mode::IntegerLossless).unwrap(), x);
        }
    }

    #[test]
    fn float_roundtrip_and_nondegenerate_inverse() {
        let (store, t) = learned(3, Sharing::Xy, 2);
        let x = random_tensor(&[1, 8, 8, 8], 0.0, 255.0, &mut ChaCha8Rng::seed_from_u64(4));
        let mut set = t.analyze(&store, &x, Mode::FloatLossy).unwrap();
        let back = t.synthesize(&store, &set, Mode::FloatLossy).unwrap();
        assert!(back.zip_map(&x, |a, b| (a - b).abs()).max_abs() < 1e-3);
        let last = set.bands.len() - 1;
        set.bands[last] = Tensor::zeros(set.bands[last].shape());
        let changed = t.synthesize(&store, &set, Mode::FloatLossy).unwrap();
        assert!(changed.zip_map(&x, |a, b| (a - b).abs()).max_abs() > 1e-3);
    }

    #[test]
    fn parameter_counts_follow_sharing() {
        for g in [AffineGranularity::Fine, AffineGranularity::Coarse] {
            let none = parameter_count(Sharing::None, g, 16, 2);
            assert_eq!(parameter_count(Sharing::All, g, 16, 2) * 3, none);
            let xy = parameter_count(Sharing::Xy, g, 16, 2);
            assert_eq!(xy, parameter_count(Sharing::Xz, g, 16, 2));
            assert_eq!(xy, parameter_count(Sharing::Yz, g, 16, 2));
        }
        let net = crate::nn::layers::ConvNet::parameter_count(16);
        let fine = parameter_count(Sharing::All, AffineGranularity::Fine, 16, 2);
        let coarse = parameter_count(Sharing::All, AffineGranularity::Coarse, 16, 2);
        assert_eq!(fine - coarse, 2 * 2 * (net - 1));
        for sharing in Sharing::ALL {
            let (store, t) = learned(5, sharing, 1);
            let n: usize = t.param_ids().iter().map(|&id| store.get(id).len()).sum();
            assert_eq!(n, parameter_count(sharing, AffineGranularity::Fine, 2, 2));
            assert_eq!(store.count_with_prefix("transform/"), n);
        }
    }

    #[test]
    fn full_sharing_commutes_with_axis_permutation() {
        // Linear separable passes commute, so permuting the input permutes the
        // band labels and the band contents alike.
        let t = Transform::fixed(TransformKind::Cdf97, 1);
        let x = random_tensor(&[1, 8, 8, 8], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(6));
        let store = ParamStore::new();
        let perm = [2, 0, 1];
        let a = t.analyze(&store, &x, Mode::FloatLossy).unwrap();
        let b = t.analyze(&store, &x.permute_spatial(perm), Mode::FloatLossy).unwrap();
        for label in 0..8usize {
            // Output axis i of the permuted volume is input axis perm[i].
            let src: usize = (0..3).filter(|&i| label & (1 << i) != 0).map(|i| 1 << perm[i]).sum();
            let diff = b.bands[label].zip_map(&a.bands[src].permute_spatial(perm), |p, q| (p - q).abs());
            assert!(diff.max_abs() < 1e-9, "label {label}");
        }
    }

    #[test]
    fn levels_share_weights() {
        let (store, t) = learned(7, Sharing::None, 2);
        let x = random_tensor(&[1, 8, 8, 8], 0.0, 255.0, &mut ChaCha8Rng::seed_from_u64(8));
        let set = t.analyze(&store, &x, Mode::FloatLossy).unwrap();
        // Level 2 is exactly level 1 applied to the level-1 low band.
        let mut be = crate::nn::Infer::new(&store);
        let xv = be.constant(x);
        let l1 = t.forward_level(&mut be, &xv, Mode::FloatLossy);
        let l2 = t.forward_level(&mut be, &l1[0], Mode::FloatLossy);
        assert_eq!(*l2[0], set.bands[0]);
        assert_eq!(*l2[7], set.bands[7]);
        assert_eq!(*l1[7], set.bands[14]);
    }

    #[test]
    fn cdf97_compacts_smooth_energy() {
        let n = 16;
        let mut x = Tensor::zeros(&[1, n, n, n]);
        for z in 0..n {
            for y in 0..n {
                for xx in 0..n {
                    let r2 = [z, y, xx].iter().map(|&c| (c as f64 - 7.3).powi(2)).sum::<f64>();
                    x.data_mut()[(z * n + y) * n + xx] = 200.0 * (-r2 / 30.0).exp();
                }
            }
        }
        let set = Transform::fixed(TransformKind::Cdf97, 1).analyze(&ParamStore::new(), &x, Mode::FloatLossy).unwrap();
        let energy: Vec<f64> = set.bands.iter().map(|b| b.data().iter().map(|v| v * v).sum()).collect();
        let frac = energy[0] / energy.iter().sum::<f64>();
        assert!(frac >= 0.9, "{frac}");
    }
}
