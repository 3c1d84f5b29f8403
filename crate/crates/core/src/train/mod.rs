//! Desk-scale training under the rate-distortion loss.
//!
//! Training runs a list of stages. Each stage updates a chosen set of modules
//! with Adam and leaves all others untouched. The default schedule first fits
//! the entropy model and post-processing with the transform fixed, then the
//! transform alone, then everything jointly. Validation loss is measured on a
//! fixed set of crops and the best model seen is kept.

pub mod adam;
pub mod loss;
pub mod synth;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{CodecModel, EntropyModel, Module};
use crate::entropy::cumulative::CumulativeModel;
use crate::error::{Error, Result};
use crate::nn::{Backend, Infer, Tape, Tensor};
use crate::quant::Surrogate;
use crate::transform::band_info;
use crate::volume::Volume;
use adam::Adam;
use loss::{crop_loss, LossSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    /// Modules updated in this stage; every other module is frozen.
    pub train: Vec<Module>,
    pub steps: usize,
}

impl Stage {
    pub fn new(name: &str, train: &[Module], steps: usize) -> Self {
        Stage { name: name.to_string(), train: train.to_vec(), steps }
    }
}

/// Entropy and post-processing, then transform, then all modules.
pub fn default_stages(steps: [usize; 3]) -> Vec<Stage> {
    vec![
        Stage::new("entropy+post", &[Module::Entropy, Module::Post], steps[0]),
        Stage::new("transform", &[Module::Transform], steps[1]),
        Stage::new("joint", &Module::ALL, steps[2]),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr: f64,
    pub stages: Vec<Stage>,
    /// Crops per step.
    pub batch: usize,
    /// Crop edge length.
    pub crop: usize,
    pub seed: u64,
    pub lossless: bool,
    /// Quantization step used by the lossy objective.
    pub qs: f64,
    pub validate_every: usize,
    /// Re-centre the entropy models on band statistics before the first step.
    pub calibrate: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 16.0,
            lr: 1e-4,
            stages: default_stages([2000, 2000, 6000]),
            batch: 1,
            crop: 64,
            seed: 0,
            lossless: false,
            qs: 8.0,
            validate_every: 100,
            calibrate: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.qs > 0.0 && self.qs.is_finite()) {
            return Err(Error::config(format!("quantization step must be positive, got {}", self.qs)));
        }
        if self.batch == 0 || self.crop == 0 || self.validate_every == 0 {
            return Err(Error::config("batch, crop and validation interval must be positive"));
        }
        for s in &self.stages {
            if s.train.is_empty() {
                return Err(Error::config(format!("stage {:?} trains no module", s.name)));
            }
            let mut seen = s.train.clone();
            seen.sort_by_key(|m| m.name());
            seen.dedup();
            if seen.len() != s.train.len() {
                return Err(Error::config(format!("stage {:?} lists a module twice", s.name)));
            }
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.stages.iter().map(|s| s.steps).sum()
    }

    fn loss_spec(&self) -> LossSpec {
        LossSpec {
            lambda: self.lambda,
            qs: self.qs,
            lossless: self.lossless,
            surrogate: if self.lossless { Surrogate::StraightThrough } else { Surrogate::UniformNoise },
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<Volume>,
    pub valid: Vec<Volume>,
}

impl Dataset {
    /// `train + valid` seeded synthetic volumes of the given dims.
    pub fn synthetic(dims: [usize; 3], train: usize, valid: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut make = |n| (0..n).map(|_| synth::synthetic_volume(dims, &mut rng)).collect();
        Dataset { train: make(train), valid: make(valid) }
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    /// Bits per sample.
    pub rate_bits: f64,
    pub mse: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Validation loss of the model as it was handed to the trainer.
    pub initial_valid: f64,
    pub best_valid: f64,
    pub best_step: usize,
    pub steps: usize,
    pub history: Vec<LogRow>,
    pub valid_history: Vec<(usize, f64)>,
}

fn centre_crops(vols: &[Volume], edge: usize) -> Result<Vec<Tensor>> {
    vols.iter()
        .map(|v| {
            let d = v.dims();
            if d.iter().any(|&x| x < edge) {
                return Err(Error::config(format!("volume {d:?} is smaller than the {edge}^3 crop")));
            }
            Ok(synth::crop(v, d.map(|x| (x - edge) / 2), [edge; 3]))
        })
        .collect()
}

/// Mean per-sample loss of `crops`, with a fixed noise seed.
pub fn evaluate(model: &CodecModel, crops: &[Tensor], spec: &LossSpec, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut be = Infer::new(&model.store);
    let total: f64 = crops.iter().map(|c| crop_loss(&mut be, model, c, spec, &mut rng).loss.item()).sum();
    total / crops.len() as f64
}

/// Re-centres the entropy models on the mean and spread of each band's
/// symbols over `crops`. Context models get one estimate per band label,
/// pooled across levels.
pub fn calibrate(model: &mut CodecModel, crops: &[Tensor], spec: &LossSpec) {
    let levels = model.levels();
    let bands: Vec<Vec<Tensor>> = crops
        .iter()
        .map(|c| {
            let mut be = Infer::new(&model.store);
            let x = be.constant(c.clone());
            model.transform.forward(&mut be, &x, spec.mode()).into_iter().map(|t| (*t).clone()).collect()
        })
        .collect();
    let scale = if spec.lossless { 1.0 } else { 1.0 / spec.qs };
    let stats = |values: &mut dyn Iterator<Item = f64>| {
        let (mut n, mut s, mut s2) = (0.0, 0.0, 0.0);
        for v in values {
            let v = v * scale;
            n += 1.0;
            s += v;
            s2 += v * v;
        }
        let mean = s / n;
        (mean, (s2 / n - mean * mean).max(0.0).sqrt())
    };
    let count = bands[0].len();
    match &model.entropy {
        EntropyModel::Factorized(f) => {
            for b in 0..count {
                let (mean, sd) = stats(&mut bands.iter().flat_map(|bs| bs[b].data().iter().copied()));
                f.reset_band(&mut model.store, b, mean, sd);
            }
        }
        EntropyModel::Context(c) => {
            for (label, net) in c.nets.iter().enumerate() {
                let idx: Vec<usize> = (0..count).filter(|&i| band_info(levels, i).1 == label).collect();
                let (mean, sd) =
                    stats(&mut bands.iter().flat_map(|bs| idx.iter().flat_map(move |&i| bs[i].data().iter().copied())));
                net.reset_output(&mut model.store, &CumulativeModel::with_scale(sd.max(0.5), mean));
            }
        }
    }
}

/// Fails once the loss has stayed above ten times the first observed loss
/// for 100 consecutive steps.
#[derive(Clone, Debug, Default)]
pub struct DivergenceGuard {
    initial: Option<f64>,
    over: usize,
}

impl DivergenceGuard {
    pub const PATIENCE: usize = 100;

    pub fn observe(&mut self, step: usize, loss: f64) -> Result<()> {
        let initial = *self.initial.get_or_insert(loss);
        if loss > 10.0 * initial {
            self.over += 1;
            if self.over >= Self::PATIENCE {
                return Err(Error::Divergence { step, loss, initial });
            }
        } else {
            self.over = 0;
        }
        Ok(())
    }
}

/// Trains `model` in place and leaves it at the best validation loss seen,
/// rounded to `f32`. When `log` is given, one CSV row per step is written.
pub fn train(model: &mut CodecModel, data: &Dataset, cfg: &TrainConfig, log: Option<&mut dyn Write>) -> Result<TrainReport> {
    cfg.validate()?;
    model.transform.check_dims([cfg.crop; 3])?;
    if data.train.is_empty() || data.valid.is_empty() {
        return Err(Error::config("training needs at least one training and one validation volume"));
    }
    if data.train.iter().any(|v| v.dims().iter().any(|&d| d < cfg.crop)) {
        return Err(Error::config(format!("every training volume must be at least {}^3", cfg.crop)));
    }
    let spec = cfg.loss_spec();
    let valid = centre_crops(&data.valid, cfg.crop)?;
    let valid_seed = cfg.seed ^ 0x9e37_79b9_7f4a_7c15;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sample = |rng: &mut ChaCha8Rng| -> Vec<Tensor> {
        (0..cfg.batch)
            .map(|_| {
                let v = &data.train[rng.gen_range(0..data.train.len())];
                synth::random_crop(v, [cfg.crop; 3], rng)
            })
            .collect()
    };
    let mut writer = log.map(csv::Writer::from_writer);

    let initial_valid = evaluate(model, &valid, &spec, valid_seed);
    if cfg.calibrate {
        let crops: Vec<Tensor> = (0..4).flat_map(|_| sample(&mut rng)).collect();
        calibrate(model, &crops, &spec);
    }
    let mut best_valid = evaluate(model, &valid, &spec, valid_seed);
    let mut best_store = model.store.clone();
    let mut best_step = 0;
    let mut valid_history = vec![(0, best_valid)];
    let mut history = Vec::with_capacity(cfg.total_steps());

    let mut adam = Adam::new(cfg.lr);
    let mut step = 0;
    let mut guard = DivergenceGuard::default();
    let total = cfg.total_steps();
    for stage in &cfg.stages {
        let mut trainable = vec![false; model.store.len()];
        let ids: Vec<_> = stage.train.iter().flat_map(|&m| model.params(m)).collect();
        for id in &ids {
            trainable[id.index()] = true;
        }
        for _ in 0..stage.steps {
            step += 1;
            let crops = sample(&mut rng);
            let (grads, row) = {
                let mask = trainable.clone();
                let mut tape = Tape::with_frozen(&model.store, move |id| !mask[id.index()]);
                let mut rate = 0.0;
                let mut sse = 0.0;
                let mut terms = Vec::with_capacity(crops.len());
                for c in &crops {
                    let t = crop_loss(&mut tape, model, c, &spec, &mut rng);
                    rate += tape.value(&t.rate).item() / c.len() as f64;
                    sse += tape.value(&t.sse).item() / c.len() as f64;
                    terms.push(t.loss);
                }
                let mut summed = terms[0];
                for t in &terms[1..] {
                    summed = tape.add(&summed, t);
                }
                let mean = tape.scale(&summed, 1.0 / crops.len() as f64);
                let loss = tape.value(&mean).item();
                let b = crops.len() as f64;
                let row = LogRow { step, rate_bits: rate / b, mse: sse / b, loss };
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!("non-finite loss {loss} at step {step}")));
                }
                (tape.backward(mean)?, row)
            };
            if !grads.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient at step {step}")));
            }
            guard.observe(step, row.loss)?;
            adam.step(&mut model.store, &grads, &ids);
            if let Some(w) = writer.as_mut() {
                w.serialize(row).map_err(|e| Error::Io(e.into()))?;
            }
            history.push(row);
            if step % cfg.validate_every == 0 || step == total {
                let v = evaluate(model, &valid, &spec, valid_seed);
                valid_history.push((step, v));
                if v < best_valid {
                    best_valid = v;
                    best_store = model.store.clone();
                    best_step = step;
                }
            }
        }
    }
    if let Some(mut w) = writer {
        w.flush()?;
    }
    model.store = best_store;
    model.store.round_to_f32();
    Ok(TrainReport { initial_valid, best_valid, best_step, steps: step, history, valid_history })
}

/// Path of the configuration echo written next to a checkpoint.
pub fn config_echo_path(weights: &Path) -> PathBuf {
    let mut s = weights.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the weight file and a JSON copy of the training configuration.
pub fn save_checkpoint(model: &CodecModel, cfg: &TrainConfig, path: &Path) -> Result<()> {
    model.save(path)?;
    let json = serde_json::to_string_pretty(cfg).map_err(|e| Error::Io(e.into()))?;
    std::fs::write(config_echo_path(path), json)?;
    Ok(())
}

pub fn load_config_echo(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(config_echo_path(path))?;
    serde_json::from_str(&text).map_err(|e| Error::format(format!("bad training config echo: {e}")))
}
