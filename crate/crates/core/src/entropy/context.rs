//! Context model: per-voxel cumulative-model parameters `psi` predicted from
//! already coded bands and from raster-earlier voxels of the current band.
//!
//! For a band `S` of label `t` at level `k` the context tensor has eight
//! channels: the low band of level `k` (reconstructed from deeper levels) and
//! the seven high bands of level `k`, with every band not yet coded set to
//! zero. Per label there is one network:
//!
//! ```text
//! C_t = conv(context)                         coarse context, 8 -> w
//! C_b = res(res(C_t))                         between-band features
//! C_w = maskB(relu(maskA(S) + C_t))           within-band features, causal in S
//! psi = conv1(relu(conv1(C_b ++ C_w)))        2w -> 2w -> 58
//! ```
//!
//! The deepest `LLL` band sees an all-zero context, so its `C_t` is the
//! learned bias of the first convolution.

use rand::Rng;

use super::cumulative::{CumulativeModel, Prepared, PARAM_COUNT};
use super::pmf::{choose_support, TreeCdf};
use super::{constant_value, read_support, write_support};
use crate::coder::range::{decode_value, encode_value, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::nn::conv::{mask_taps, MaskKind};
use crate::nn::layers::{Conv, ResBlock};
use crate::nn::{Backend, Infer, ParamId, ParamStore, Tensor};

/// Number of context channels (low band plus seven high bands).
pub const CONTEXT_CHANNELS: usize = 8;
/// One network per band label; label 0 is the deepest `LLL`.
pub const BAND_TYPES: usize = 8;

#[derive(Clone, Debug)]
pub struct ContextNet {
    pub extract: Conv,
    pub between: [ResBlock; 2],
    pub within_a: Conv,
    pub within_b: Conv,
    pub merge1: Conv,
    pub merge2: Conv,
}

impl ContextNet {
    fn names(prefix: &str) -> [String; 7] {
        ["extract", "between0", "between1", "within-a", "within-b", "merge1", "merge2"].map(|n| format!("{prefix}/{n}"))
    }

    fn build(store: &mut ParamStore, prefix: &str, width: usize, rng: &mut impl Rng) -> Self {
        let n = Self::names(prefix);
        let net = ContextNet {
            extract: Conv::new(store, &n[0], (CONTEXT_CHANNELS, width, 3), None, rng),
            between: [ResBlock::new(store, &n[1], width, rng), ResBlock::new(store, &n[2], width, rng)],
            within_a: Conv::new(store, &n[3], (1, width, 3), Some(MaskKind::A), rng),
            within_b: Conv::new(store, &n[4], (width, width, 3), Some(MaskKind::B), rng),
            merge1: Conv::new(store, &n[5], (2 * width, 2 * width, 1), None, rng),
            merge2: Conv::new(store, &n[6], (2 * width, PARAM_COUNT, 1), None, rng),
        };
        net.reset_output(store, &CumulativeModel::with_scale(4.0, 0.0));
        net
    }

    fn find(store: &ParamStore, prefix: &str) -> Option<Self> {
        let n = Self::names(prefix);
        Some(ContextNet {
            extract: Conv::find(store, &n[0], None)?,
            between: [ResBlock::find(store, &n[1])?, ResBlock::find(store, &n[2])?],
            within_a: Conv::find(store, &n[3], Some(MaskKind::A))?,
            within_b: Conv::find(store, &n[4], Some(MaskKind::B))?,
            merge1: Conv::find(store, &n[5], None)?,
            merge2: Conv::find(store, &n[6], None)?,
        })
    }

    /// Zeroes the output weights and sets the output bias to `m`, so `psi`
    /// starts as the constant `m` everywhere.
    pub fn reset_output(&self, store: &mut ParamStore, m: &CumulativeModel) {
        self.merge2.zero(store);
        store.get_mut(self.merge2.bias).data_mut().copy_from_slice(&m.theta);
    }

    pub fn width(&self, store: &ParamStore) -> usize {
        self.extract.out_channels(store)
    }

    /// Batched `psi` (58 channels) for a context and a current band, both
    /// already divided by the value scale.
    pub fn forward<B: Backend>(&self, be: &mut B, ctx: &B::V, s: &B::V) -> B::V {
        let ct = self.extract.forward(be, ctx);
        let cb = self.between[0].forward(be, &ct);
        let cb = self.between[1].forward(be, &cb);
        let a = self.within_a.forward(be, s);
        let h = be.add(&a, &ct);
        let h = be.relu(&h);
        let cw = self.within_b.forward(be, &h);
        let m = be.concat(&[cb, cw]);
        let m = self.merge1.forward(be, &m);
        let m = be.relu(&m);
        self.merge2.forward(be, &m)
    }
}

#[derive(Clone, Debug)]
pub struct ContextModel {
    pub nets: Vec<ContextNet>,
    pub input_scale: f64,
}

impl ContextModel {
    pub fn build(store: &mut ParamStore, width: usize, input_scale: f64, rng: &mut impl Rng) -> Self {
        let nets = (0..BAND_TYPES).map(|t| ContextNet::build(store, &format!("entropy/context/t{t}"), width, rng)).collect();
        ContextModel { nets, input_scale }
    }

    pub fn find(store: &ParamStore, input_scale: f64) -> Result<Self> {
        let nets = (0..BAND_TYPES)
            .map(|t| {
                ContextNet::find(store, &format!("entropy/context/t{t}"))
                    .ok_or_else(|| Error::format(format!("model lacks context network {t}")))
            })
            .collect::<Result<_>>()?;
        Ok(ContextModel { nets, input_scale })
    }

    pub fn param_ids(store: &ParamStore) -> Vec<ParamId> {
        store.iter().filter(|(_, n, _)| n.starts_with("entropy/context/")).map(|(id, _, _)| id).collect()
    }

    /// Eight-channel context from the low band and the high bands of one
    /// level; absent bands are zero.
    pub fn context_tensor(dims: [usize; 3], low: Option<&Tensor>, highs: &[Option<&Tensor>]) -> Tensor {
        let zero = Tensor::zeros(&[1, dims[0], dims[1], dims[2]]);
        let mut parts: Vec<&Tensor> = vec![low.unwrap_or(&zero)];
        parts.extend(highs.iter().map(|h| h.unwrap_or(&zero)));
        assert_eq!(parts.len(), CONTEXT_CHANNELS);
        Tensor::concat(&parts)
    }

    /// Batched `psi` for band label `label`. `ctx` and `s` are in sample units.
    pub fn psi<B: Backend>(&self, be: &mut B, label: usize, ctx: &B::V, s: &B::V) -> B::V {
        let inv = 1.0 / self.input_scale;
        let ctx = be.scale(ctx, inv);
        let s = be.scale(s, inv);
        self.nets[label].forward(be, &ctx, &s)
    }

    /// Differentiable bits of `q` (quantization-step units) given the
    /// reconstructed band `s = q * qs` and its context.
    pub fn rate<B: Backend>(&self, be: &mut B, label: usize, ctx: &B::V, s: &B::V, q: &B::V) -> B::V {
        let psi = self.psi(be, label, ctx, s);
        be.context_bits(q, &psi)
    }

    pub fn voxel_context<'a>(&self, store: &'a ParamStore, label: usize, ctx: &Tensor) -> VoxelContext<'a> {
        VoxelContext::new(store, &self.nets[label], ctx, self.input_scale)
    }

    /// Codes `q` voxel by voxel in raster order. `trace`, when given, absorbs
    /// the bits of every `psi` used.
    #[allow(clippy::too_many_arguments)]
    pub fn encode_band(
        &self,
        store: &ParamStore,
        label: usize,
        ctx: &Tensor,
        q: &[i64],
        qs: f64,
        cap: usize,
        mut trace: Option<&mut crc32fast::Hasher>,
    ) -> Vec<u8> {
        if let Some(v) = constant_value(q) {
            return write_support(v, v);
        }
        let (lo, hi) = choose_support(q, cap);
        let n = (hi - lo + 1) as usize;
        let mut vc = self.voxel_context(store, label, ctx);
        let mut enc = Encoder::new();
        for (i, &v) in q.iter().enumerate() {
            let psi = vc.psi(i);
            if let Some(t) = trace.as_deref_mut() {
                psi.iter().for_each(|p| t.update(&p.to_le_bytes()));
            }
            let p = Prepared::new(&psi);
            let tree = TreeCdf::new(n, |k| p.cdf((lo + k as i64) as f64 - 0.5));
            encode_value(&mut enc, &tree, lo, v);
            vc.set(i, v as f64 * qs);
        }
        let mut out = write_support(lo, hi);
        out.extend(enc.finish());
        out
    }

    #[allow(clippy::too_many_arguments)]
    pub fn decode_band(
        &self,
        store: &ParamStore,
        label: usize,
        ctx: &Tensor,
        payload: &[u8],
        qs: f64,
        mut trace: Option<&mut crc32fast::Hasher>,
    ) -> Result<Vec<i64>> {
        let (lo, hi, body) = read_support(payload)?;
        if lo == hi {
            return Ok(vec![lo; ctx.spatial().iter().product()]);
        }
        let n = (hi - lo + 1) as usize;
        let mut vc = self.voxel_context(store, label, ctx);
        let mut dec = Decoder::new(body)?;
        let count = vc.len();
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let psi = vc.psi(i);
            if let Some(t) = trace.as_deref_mut() {
                psi.iter().for_each(|p| t.update(&p.to_le_bytes()));
            }
            let p = Prepared::new(&psi);
            let tree = TreeCdf::new(n, |k| p.cdf((lo + k as i64) as f64 - 0.5));
            let v = decode_value(&mut dec, &tree, lo)?;
            vc.set(i, v as f64 * qs);
            out.push(v);
        }
        Ok(out)
    }
}

/// Incremental evaluation of `psi` in raster order. Reproduces the batched
/// arithmetic operation for operation, and reads the current band only at
/// positions already visited.
pub struct VoxelContext<'a> {
    dims: [usize; 3],
    width: usize,
    inv_scale: f64,
    ct: Tensor,
    cb: Tensor,
    s: Vec<f64>,
    hidden: Vec<f64>,
    taps_a: Vec<(usize, [isize; 3])>,
    taps_b: Vec<(usize, [isize; 3])>,
    wa: &'a [f64],
    ba: &'a [f64],
    wb: &'a [f64],
    bb: &'a [f64],
    m1w: &'a [f64],
    m1b: &'a [f64],
    m2w: &'a [f64],
    m2b: &'a [f64],
}

fn active_taps(mask: MaskKind) -> Vec<(usize, [isize; 3])> {
    mask_taps(Some(mask), 3)
        .into_iter()
        .enumerate()
        .filter(|(_, on)| *on)
        .map(|(t, _)| (t, [(t / 9) as isize - 1, ((t / 3) % 3) as isize - 1, (t % 3) as isize - 1]))
        .collect()
}

impl<'a> VoxelContext<'a> {
    fn new(store: &'a ParamStore, net: &ContextNet, ctx: &Tensor, input_scale: f64) -> Self {
        let dims = ctx.spatial();
        let n = dims.iter().product();
        let width = net.width(store);
        let inv_scale = 1.0 / input_scale;
        let mut be = Infer::new(store);
        let c = be.constant(ctx.clone());
        let c = be.scale(&c, inv_scale);
        let ct = net.extract.forward(&mut be, &c);
        let cb = net.between[0].forward(&mut be, &ct);
        let cb = net.between[1].forward(&mut be, &cb);
        let d = |id: ParamId| store.get(id).data();
        VoxelContext {
            dims,
            width,
            inv_scale,
            ct: (*ct).clone(),
            cb: (*cb).clone(),
            s: vec![0.0; n],
            hidden: vec![0.0; width * n],
            taps_a: active_taps(MaskKind::A),
            taps_b: active_taps(MaskKind::B),
            wa: d(net.within_a.weight),
            ba: d(net.within_a.bias),
            wb: d(net.within_b.weight),
            bb: d(net.within_b.bias),
            m1w: d(net.merge1.weight),
            m1b: d(net.merge1.bias),
            m2w: d(net.merge2.weight),
            m2b: d(net.merge2.bias),
        }
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    /// Records the reconstructed value (sample units) of voxel `i`.
    pub fn set(&mut self, i: usize, value: f64) {
        self.s[i] = value * self.inv_scale;
    }

    fn neighbour(&self, i: usize, off: [isize; 3]) -> Option<usize> {
        let [d, h, w] = self.dims;
        let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
        let nz = z as isize + off[0];
        let ny = y as isize + off[1];
        let nx = x as isize + off[2];
        if nz < 0 || ny < 0 || nx < 0 || nz >= d as isize || ny >= h as isize || nx >= w as isize {
            return None;
        }
        Some((nz as usize * h + ny as usize) * w + nx as usize)
    }

    /// `psi` at voxel `i`; every voxel before `i` must have been [`set`](Self::set).
    pub fn psi(&mut self, i: usize) -> [f64; PARAM_COUNT] {
        let n = self.s.len();
        let w = self.width;
        let nb_a: Vec<(usize, Option<usize>)> = self.taps_a.iter().map(|&(t, o)| (t, self.neighbour(i, o))).collect();
        for c in 0..w {
            let mut acc = self.ba[c];
            for &(t, nb) in &nb_a {
                if let Some(j) = nb {
                    acc += self.wa[c * 27 + t] * self.s[j];
                }
            }
            self.hidden[c * n + i] = (acc + self.ct.data()[c * n + i]).max(0.0);
        }
        let nb_b: Vec<(usize, Option<usize>)> = self.taps_b.iter().map(|&(t, o)| (t, self.neighbour(i, o))).collect();
        let mut merged = vec![0.0; 2 * w];
        for c in 0..w {
            merged[c] = self.cb.data()[c * n + i];
            let mut acc = self.bb[c];
            for ci in 0..w {
                let base = (c * w + ci) * 27;
                for &(t, nb) in &nb_b {
                    if let Some(j) = nb {
                        acc += self.wb[base + t] * self.hidden[ci * n + j];
                    }
                }
            }
            merged[w + c] = acc;
        }
        let mut m1 = vec![0.0; 2 * w];
        for (c, out) in m1.iter_mut().enumerate() {
            let mut acc = self.m1b[c];
            for (ci, v) in merged.iter().enumerate() {
                acc += self.m1w[c * 2 * w + ci] * v;
            }
            *out = acc.max(0.0);
        }
        let mut psi = [0.0; PARAM_COUNT];
        for (c, out) in psi.iter_mut().enumerate() {
            let mut acc = self.m2b[c];
            for (ci, v) in m1.iter().enumerate() {
                acc += self.m2w[c * 2 * w + ci] * v;
            }
            *out = acc;
        }
        psi
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::{random_tensor, randomize};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_model(seed: u64, width: usize) -> (ParamStore, ContextModel) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let m = ContextModel::build(&mut store, width, 10.0, &mut rng);
        randomize(&mut store, "entropy/context/", &mut rng);
        (store, m)
    }

    fn batched(store: &ParamStore, m: &ContextModel, label: usize, ctx: &Tensor, s: &Tensor) -> Tensor {
        let mut be = Infer::new(store);
        let c = be.constant(ctx.clone());
        let sv = be.constant(s.clone());
        (*m.psi(&mut be, label, &c, &sv)).clone()
    }

    #[test]
    fn psi_has_58_channels_and_empty_context_is_defined() {
        let (store, m) = random_model(1, 4);
        let dims = [4, 4, 4];
        let ctx = ContextModel::context_tensor(dims, None, &[None; 7]);
        let s = Tensor::zeros(&[1, 4, 4, 4]);
        let psi = batched(&store, &m, 0, &ctx, &s);
        assert_eq!(psi.dims4(), [PARAM_COUNT, 4, 4, 4]);
        assert!(psi.all_finite());
    }

    #[test]
    fn voxel_routine_matches_batched() {
        let (store, m) = random_model(2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ctx = random_tensor(&[8, 3, 4, 5], -20.0, 20.0, &mut rng);
        let s = random_tensor(&[1, 3, 4, 5], -20.0, 20.0, &mut rng).map(f64::round);
        let full = batched(&store, &m, 3, &ctx, &s);
        let mut vc = m.voxel_context(&store, 3, &ctx);
        let n = s.len();
        for i in 0..n {
            let psi = vc.psi(i);
            for (k, v) in psi.iter().enumerate() {
                let b = full.data()[k * n + i];
                assert!((v - b).abs() <= 1e-9 * b.abs().max(1.0), "voxel {i} channel {k}: {v} vs {b}");
            }
            vc.set(i, s.data()[i]);
        }
    }

    #[test]
    fn psi_is_causal_in_the_current_band() {
        let (store, m) = random_model(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ctx = random_tensor(&[8, 4, 4, 4], -5.0, 5.0, &mut rng);
        let s = random_tensor(&[1, 4, 4, 4], -5.0, 5.0, &mut rng);
        let base = batched(&store, &m, 5, &ctx, &s);
        let n = s.len();
        for _ in 0..20 {
            let p = rand::Rng::gen_range(&mut rng, 0..n);
            let mut t = s.clone();
            for j in p..n {
                t.data_mut()[j] += rand::Rng::gen_range(&mut rng, -50.0..50.0);
            }
            let out = batched(&store, &m, 5, &ctx, &t);
            for k in 0..PARAM_COUNT {
                assert_eq!(out.data()[k * n + p], base.data()[k * n + p]);
            }
        }
    }

    #[test]
    fn band_roundtrip_with_matching_traces() {
        let (store, m) = random_model(6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ctx = random_tensor(&[8, 4, 4, 4], -5.0, 5.0, &mut rng);
        let q: Vec<i64> = (0..64).map(|_| rand::Rng::gen_range(&mut rng, -30..30)).collect();
        let mut te = crc32fast::Hasher::new();
        let payload = m.encode_band(&store, 2, &ctx, &q, 0.5, 1024, Some(&mut te));
        let mut td = crc32fast::Hasher::new();
        let back = m.decode_band(&store, 2, &ctx, &payload, 0.5, Some(&mut td)).unwrap();
        assert_eq!(back, q);
        assert_eq!(te.finalize(), td.finalize());
    }
}
