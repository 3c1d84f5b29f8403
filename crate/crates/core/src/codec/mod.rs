//! Encode and decode pipelines.
//!
//! Lossy: forward transform, uniform quantization with step `qs`, entropy
//! coding; the decoder dequantizes, inverts the transform and runs the
//! post-processing enhancer. Lossless: the integer transform is coded
//! directly and neither quantization nor post-processing takes part.
//!
//! Volumes are cut into butt-jointed blocks that are coded independently.

pub mod metrics;
pub mod post;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::coder::container::{self, Header, Record, AXIS_ORDER_ZYX, ROUND_HALF_AWAY, STREAM_VERSION};
use crate::entropy::context::ContextModel;
use crate::entropy::factorized::FactorizedModel;
use crate::entropy::pmf::DEFAULT_SUPPORT_CAP;
use crate::entropy::EntropyKind;
use crate::error::{Error, Result};
use crate::lifting::Mode;
use crate::nn::{weights, Backend, Infer, ParamId, ParamStore, Tensor};
use crate::par;
use crate::quant::quantize_value;
use crate::transform::{band_count, band_dims, band_info, Sharing, Transform, TransformConfig, TransformKind};
use crate::volume::{self, BlockGrid, Volume, DEFAULT_BLOCK};
use post::PostProcess;

/// Architecture of a [`CodecModel`]. Stored next to the weights as rank-0
/// `config/...` tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub transform: TransformConfig,
    pub entropy: EntropyKind,
    pub context_width: usize,
    /// Context network inputs are divided by this.
    pub context_scale: f64,
    pub post_width: usize,
    pub post_blocks: usize,
    pub support_cap: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            transform: TransformConfig::default(),
            entropy: EntropyKind::Factorized,
            context_width: 16,
            context_scale: 16.0,
            post_width: 16,
            post_blocks: 6,
            support_cap: DEFAULT_SUPPORT_CAP,
        }
    }
}

impl ModelConfig {
    /// Narrow networks for single-core experiments.
    pub fn desk(width: usize) -> Self {
        let mut c = ModelConfig::default();
        c.transform.width = width;
        c.context_width = width;
        c.post_width = width;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.transform;
        if !(1..=8).contains(&t.levels) {
            return Err(Error::config(format!("levels must be in 1..=8, got {}", t.levels)));
        }
        if t.kind == TransformKind::Learned && (t.steps == 0 || t.width == 0) {
            return Err(Error::config("learned transforms need at least one step and positive width"));
        }
        if !(t.value_scale.is_finite() && t.value_scale > 0.0) {
            return Err(Error::config(format!("value scale must be positive, got {}", t.value_scale)));
        }
        if !(self.context_scale.is_finite() && self.context_scale > 0.0) {
            return Err(Error::config(format!("context scale must be positive, got {}", self.context_scale)));
        }
        if self.context_width == 0 || self.post_width == 0 {
            return Err(Error::config("network widths must be positive"));
        }
        if !(3..=65536).contains(&self.support_cap) {
            return Err(Error::config(format!("support cap must be in 3..=65536, got {}", self.support_cap)));
        }
        if t.width > u16::MAX as usize || self.context_width > u16::MAX as usize || self.post_width > u16::MAX as usize {
            return Err(Error::config("network width exceeds 65535"));
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, f64)> {
        let t = &self.transform;
        vec![
            ("transform-kind", f64::from(t.kind.code())),
            ("levels", t.levels as f64),
            ("sharing", f64::from(t.sharing.code())),
            ("granularity", f64::from(container::granularity_code(t.granularity))),
            ("steps", t.steps as f64),
            ("width", t.width as f64),
            ("value-scale", t.value_scale),
            ("entropy", f64::from(self.entropy.code())),
            ("context-width", self.context_width as f64),
            ("context-scale", self.context_scale),
            ("post-width", self.post_width as f64),
            ("post-blocks", self.post_blocks as f64),
            ("support-cap", self.support_cap as f64),
        ]
    }

    fn write(&self, store: &mut ParamStore) {
        for (k, v) in self.entries() {
            store.add(format!("config/{k}"), Tensor::scalar(v));
        }
    }

    fn read(store: &ParamStore) -> Result<Self> {
        let get = |k: &str| -> Result<f64> {
            let id = store.find(&format!("config/{k}")).ok_or_else(|| Error::format(format!("model lacks config/{k}")))?;
            Ok(store.get(id).item())
        };
        let int = |k: &str| -> Result<usize> {
            let v = get(k)?;
            if v < 0.0 || v.fract() != 0.0 || v > 1e9 {
                return Err(Error::format(format!("config/{k} is not a count: {v}")));
            }
            Ok(v as usize)
        };
        let code = |k: &str| -> Result<u8> {
            u8::try_from(int(k)?).map_err(|_| Error::format(format!("config/{k} is not a code")))
        };
        let cfg = ModelConfig {
            transform: TransformConfig {
                kind: TransformKind::from_code(code("transform-kind")?)?,
                levels: int("levels")?,
                sharing: Sharing::from_code(code("sharing")?)?,
                granularity: container::granularity_from_code(code("granularity")?)?,
                steps: int("steps")?,
                width: int("width")?,
                value_scale: get("value-scale")?,
            },
            entropy: EntropyKind::from_code(code("entropy")?)?,
            context_width: int("context-width")?,
            context_scale: get("context-scale")?,
            post_width: int("post-width")?,
            post_blocks: int("post-blocks")?,
            support_cap: int("support-cap")?,
        };
        cfg.validate().map_err(|e| Error::format(format!("stored model config is invalid: {e}")))?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
pub enum EntropyModel {
    Factorized(FactorizedModel),
    Context(ContextModel),
}

/// Trainable groups of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Module {
    Transform,
    Entropy,
    Post,
}

impl Module {
    pub const ALL: [Module; 3] = [Module::Transform, Module::Entropy, Module::Post];

    fn prefix(self) -> &'static str {
        match self {
            Module::Transform => "transform/",
            Module::Entropy => "entropy/",
            Module::Post => "post/",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Module::Transform => "transform",
            Module::Entropy => "entropy",
            Module::Post => "post",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Module::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown module {s:?}; expected transform, entropy or post")))
    }
}

#[derive(Clone, Debug)]
pub struct CodecModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub transform: Transform,
    pub entropy: EntropyModel,
    pub post: PostProcess,
}

impl CodecModel {
    /// Fresh model with seeded random networks. Parameters are rounded to
    /// `f32` so the in-memory model matches its saved form.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        config.write(&mut store);
        let t = &config.transform;
        let transform = Transform::build(&mut store, t, &mut rng);
        let entropy = match config.entropy {
            EntropyKind::Factorized => EntropyModel::Factorized(FactorizedModel::build(&mut store, band_count(t.levels), 8.0)),
            EntropyKind::Context => {
                EntropyModel::Context(ContextModel::build(&mut store, config.context_width, config.context_scale, &mut rng))
            }
        };
        let post = PostProcess::build(&mut store, config.post_width, config.post_blocks, t.value_scale, &mut rng);
        store.round_to_f32();
        Ok(CodecModel { config, store, transform, entropy, post })
    }

    pub fn from_store(store: ParamStore) -> Result<Self> {
        let config = ModelConfig::read(&store)?;
        let t = &config.transform;
        let transform = Transform::find(&store, t)?;
        let entropy = match config.entropy {
            EntropyKind::Factorized => EntropyModel::Factorized(FactorizedModel::find(&store, band_count(t.levels))?),
            EntropyKind::Context => EntropyModel::Context(ContextModel::find(&store, config.context_scale)?),
        };
        let post = PostProcess::find(&store, config.post_blocks, t.value_scale)
            .ok_or_else(|| Error::format("model lacks post-processing weights"))?;
        Ok(CodecModel { config, store, transform, entropy, post })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        weights::to_bytes(&self.store)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_store(weights::from_bytes(bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        weights::save(path, &self.store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_store(weights::load(path)?)
    }

    /// SHA-256 of the serialized weights.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }

    pub fn levels(&self) -> usize {
        self.config.transform.levels
    }

    pub fn params(&self, module: Module) -> Vec<ParamId> {
        self.store.iter().filter(|(_, n, _)| n.starts_with(module.prefix())).map(|(id, _, _)| id).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncodeOptions {
    pub lossless: bool,
    pub qs: f64,
    pub block: [usize; 3],
}

impl Default for EncodeOptions {
    fn default() -> Self {
        EncodeOptions { lossless: false, qs: 1.0, block: [DEFAULT_BLOCK; 3] }
    }
}

impl EncodeOptions {
    pub fn lossless() -> Self {
        EncodeOptions { lossless: true, ..Default::default() }
    }

    pub fn lossy(qs: f64) -> Self {
        EncodeOptions { qs, ..Default::default() }
    }

    pub fn with_block(self, block: [usize; 3]) -> Self {
        EncodeOptions { block, ..self }
    }

    fn mode(&self) -> Mode {
        if self.lossless {
            Mode::IntegerLossless
        } else {
            Mode::FloatLossy
        }
    }

    /// Reconstruction value of one symbol.
    fn step(&self) -> f64 {
        if self.lossless {
            1.0
        } else {
            self.qs
        }
    }
}

/// Bands of one block as integer symbols, in serialization order.
pub fn block_symbols(model: &CodecModel, block: &Tensor, opts: &EncodeOptions) -> Vec<Vec<i64>> {
    let mut be = Infer::new(&model.store);
    let x = be.constant(block.clone());
    let bands = model.transform.forward(&mut be, &x, opts.mode());
    bands
        .iter()
        .map(|b| {
            if opts.lossless {
                b.data().iter().map(|&v| v as i64).collect()
            } else {
                b.data().iter().map(|&v| quantize_value(v, opts.qs)).collect()
            }
        })
        .collect()
}

fn band_tensor(q: &[i64], dims: [usize; 3], step: f64) -> Tensor {
    Tensor::from_volume_data(dims, q.iter().map(|&v| v as f64 * step).collect())
}

/// Visits the bands of one block in serialization order, handing the coder
/// callback the context tensor each band is coded under. The callback returns
/// the band's symbols; their reconstructions feed later contexts.
fn walk_context_bands(
    model: &CodecModel,
    block: [usize; 3],
    opts: &EncodeOptions,
    mut code: impl FnMut(usize, usize, &Tensor) -> Result<Vec<i64>>,
) -> Result<Vec<Vec<i64>>> {
    let levels = model.levels();
    let mut out = Vec::with_capacity(band_count(levels));
    let mut low: Option<Tensor> = None;
    let mut highs: Vec<Tensor> = Vec::with_capacity(7);
    for idx in 0..band_count(levels) {
        let (level, label) = band_info(levels, idx);
        let dims = band_dims(block, level);
        let hs: Vec<Option<&Tensor>> = (0..7).map(|j| highs.get(j)).collect();
        let ctx = ContextModel::context_tensor(dims, low.as_ref(), &hs);
        let q = code(idx, label, &ctx)?;
        let y = band_tensor(&q, dims, opts.step());
        if label == 0 {
            low = Some(y);
        } else {
            highs.push(y);
        }
        if label == 7 {
            if level > 1 {
                let mut be = Infer::new(&model.store);
                let l = be.constant(low.take().expect("low band precedes its level"));
                let h: Vec<_> = highs.drain(..).map(|t| be.constant(t)).collect();
                low = Some((*model.transform.reconstruct_low(&mut be, &l, &h, opts.mode())).clone());
            }
            highs.clear();
        }
        out.push(q);
    }
    Ok(out)
}

fn encode_block(
    model: &CodecModel,
    block: &Tensor,
    opts: &EncodeOptions,
    trace: bool,
) -> (Vec<Vec<u8>>, u32) {
    let symbols = block_symbols(model, block, opts);
    let cap = model.config.support_cap;
    match &model.entropy {
        EntropyModel::Factorized(f) => {
            let payloads = par::map(&symbols, |i, q| f.encode_band(&model.store, i, q, cap));
            (payloads, 0)
        }
        EntropyModel::Context(c) => {
            let mut hasher = trace.then(crc32fast::Hasher::new);
            let mut payloads = Vec::with_capacity(symbols.len());
            walk_context_bands(model, block.spatial(), opts, |idx, label, ctx| {
                let q = &symbols[idx];
                payloads.push(c.encode_band(&model.store, label, ctx, q, opts.step(), cap, hasher.as_mut()));
                Ok(q.clone())
            })
            .expect("encoding never fails");
            (payloads, hasher.map_or(0, |h| h.finalize()))
        }
    }
}

fn decode_block(
    model: &CodecModel,
    block: [usize; 3],
    payloads: &[&[u8]],
    opts: &EncodeOptions,
    trace: bool,
) -> Result<(Tensor, u32)> {
    let levels = model.levels();
    let (symbols, hash) = match &model.entropy {
        EntropyModel::Factorized(f) => {
            let decoded = par::map(payloads, |i, p| {
                let count: usize = band_dims(block, band_info(levels, i).0).iter().product();
                f.decode_band(&model.store, i, p, count)
            });
            (decoded.into_iter().collect::<Result<Vec<_>>>()?, 0)
        }
        EntropyModel::Context(c) => {
            let mut hasher = trace.then(crc32fast::Hasher::new);
            let symbols = walk_context_bands(model, block, opts, |idx, label, ctx| {
                c.decode_band(&model.store, label, ctx, payloads[idx], opts.step(), hasher.as_mut())
            })?;
            (symbols, hasher.map_or(0, |h| h.finalize()))
        }
    };
    let mut be = Infer::new(&model.store);
    let bands: Vec<_> = symbols
        .iter()
        .enumerate()
        .map(|(i, q)| be.constant(band_tensor(q, band_dims(block, band_info(levels, i).0), opts.step())))
        .collect();
    let mut x = model.transform.inverse(&mut be, &bands, opts.mode());
    if !opts.lossless {
        x = model.post.forward(&mut be, &x);
    }
    Ok(((*x).clone(), hash))
}

fn header_for(model: &CodecModel, v: &Volume, opts: &EncodeOptions) -> Result<Header> {
    let to_u32 = |d: usize| u32::try_from(d).map_err(|_| Error::Geometry(format!("dimension {d} exceeds u32")));
    let c = &model.config;
    Ok(Header {
        version: STREAM_VERSION,
        lossless: opts.lossless,
        transform: c.transform.kind,
        sharing: c.transform.sharing,
        granularity: c.transform.granularity,
        entropy: c.entropy,
        rounding: ROUND_HALF_AWAY,
        levels: c.transform.levels as u8,
        axis_order: AXIS_ORDER_ZYX,
        bit_depth: v.bit_depth(),
        signed: v.signed(),
        block_dims: [to_u32(opts.block[0])?, to_u32(opts.block[1])?, to_u32(opts.block[2])?],
        dims: [to_u32(v.dims()[0])?, to_u32(v.dims()[1])?, to_u32(v.dims()[2])?],
        lifting_steps: if c.transform.kind == TransformKind::Learned { c.transform.steps as u8 } else { 0 },
        transform_width: c.transform.width as u16,
        context_width: c.context_width as u16,
        post_width: c.post_width as u16,
        qs: opts.qs,
        support_cap: c.support_cap as u32,
        norm_scale: v.provenance_scale(),
        model_hash: model.hash(),
    })
}

pub fn encode_volume(model: &CodecModel, v: &Volume, opts: &EncodeOptions) -> Result<Vec<u8>> {
    Ok(encode_volume_traced(model, v, opts, false)?.0)
}

/// Encodes `v` and, when `trace` is set, returns one CRC per block of every
/// context-model parameter vector the coder used (zero for factorized
/// models).
pub fn encode_volume_traced(model: &CodecModel, v: &Volume, opts: &EncodeOptions, trace: bool) -> Result<(Vec<u8>, Vec<u32>)> {
    if !(opts.qs.is_finite() && opts.qs > 0.0) {
        return Err(Error::config(format!("quantization step must be positive and finite, got {}", opts.qs)));
    }
    if opts.lossless && v.data().iter().any(|s| s.fract() != 0.0 || !s.is_finite()) {
        return Err(Error::config("lossless coding needs integer samples"));
    }
    let grid = BlockGrid::new(v.dims(), opts.block, model.levels())?;
    let header = header_for(model, v, opts)?;
    let blocks = volume::tile(v, &grid);
    let coded = par::map(&blocks, |_, b| {
        let t = Tensor::from_volume_data(b.dims(), b.data().to_vec());
        encode_block(model, &t, opts, trace)
    });
    let mut records = Vec::with_capacity(blocks.len() * band_count(model.levels()));
    let mut hashes = Vec::with_capacity(blocks.len());
    for (payloads, h) in coded {
        hashes.push(h);
        records.extend(payloads.into_iter().enumerate().map(|(i, payload)| Record { band: i as u8, payload }));
    }
    Ok((container::write_stream(&header, &records), hashes))
}

pub fn decode_volume(model: &CodecModel, bytes: &[u8]) -> Result<Volume> {
    Ok(decode_volume_traced(model, bytes, false)?.0)
}

pub fn decode_volume_traced(model: &CodecModel, bytes: &[u8], trace: bool) -> Result<(Volume, Vec<u32>)> {
    let levels = model.levels();
    let (header, records) = container::read_stream(bytes, |h| {
        let blocks: usize = (0..3)
            .map(|a| (h.dims[a] as usize).div_ceil(h.block_dims[a] as usize))
            .product();
        blocks * band_count(h.levels as usize)
    })?;
    if header.model_hash != model.hash() {
        return Err(Error::ModelMismatch);
    }
    if header.levels as usize != levels || header.entropy != model.config.entropy {
        return Err(Error::config("stream header disagrees with the model configuration"));
    }
    let dims = header.dims.map(|d| d as usize);
    let opts = EncodeOptions { lossless: header.lossless, qs: header.qs, block: header.block_dims.map(|d| d as usize) };
    let grid = BlockGrid::new(dims, opts.block, levels)?;
    let per_block = band_count(levels);
    for (i, r) in records.iter().enumerate() {
        if r.band as usize != i % per_block {
            return Err(Error::format(format!("record {i} carries band id {}, expected {}", r.band, i % per_block)));
        }
    }
    let chunks: Vec<Vec<&[u8]>> =
        records.chunks(per_block).map(|c| c.iter().map(|r| r.payload.as_slice()).collect()).collect();
    let decoded = par::map(&chunks, |_, payloads| decode_block(model, opts.block, payloads, &opts, trace));
    let mut blocks = Vec::with_capacity(decoded.len());
    let mut hashes = Vec::with_capacity(decoded.len());
    for d in decoded {
        let (t, h) = d?;
        blocks.push(Volume::from_vec(opts.block, t.into_data(), header.bit_depth, header.signed)?);
        hashes.push(h);
    }
    let mut out = volume::untile(&blocks, &grid, dims)?;
    if !header.lossless {
        let (lo, hi) = out.sample_range();
        out.data_mut().iter_mut().for_each(|s| *s = s.clamp(lo, hi));
    }
    Ok((out.with_provenance_scale(header.norm_scale), hashes))
}
