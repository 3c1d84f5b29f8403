use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context};
use voxwave::codec::{self, metrics, CodecModel, EncodeOptions, ModelConfig};
use voxwave::entropy::EntropyKind;
use voxwave::lifting::AffineGranularity;
use voxwave::train::{self, default_stages, Dataset, TrainConfig};
use voxwave::transform::{Sharing, TransformKind};
use voxwave::{par, volume, Volume};

use crate::args::{
    Cli, Command, DecodeArgs, EncodeArgs, EntropyArg, EvalArgs, GranularityArg, InputArgs, ModeArgs, ModelArgs,
    RdCurveArgs, SharingArg, TrainArgs, TransformArg, VerifyArgs,
};

/// An error together with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub const USAGE: u8 = 1;
    pub const IO: u8 = 2;
    pub const INTEGRITY: u8 = 3;
    pub const DIVERGENCE: u8 = 4;

    fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Failure { code, error: error.into() }
    }

    fn usage(msg: impl Into<String>) -> Self {
        Failure::new(Self::USAGE, anyhow!(msg.into()))
    }
}

impl From<voxwave::Error> for Failure {
    fn from(e: voxwave::Error) -> Self {
        let code = match &e {
            voxwave::Error::Io(_) => Self::IO,
            voxwave::Error::Divergence { .. } | voxwave::Error::Numeric(_) => Self::DIVERGENCE,
            e if e.is_integrity() => Self::INTEGRITY,
            _ => Self::USAGE,
        };
        Failure::new(code, e)
    }
}

type Outcome<T = ()> = Result<T, Failure>;

/// Attaches a path to any error raised while reading or writing it and
/// classifies it as an I/O failure.
fn io<T>(path: &Path, r: voxwave::Result<T>) -> Outcome<T> {
    r.map_err(|e| Failure::new(Failure::IO, anyhow::Error::new(e).context(path.display().to_string())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Outcome {
    fs::write(path, bytes).with_context(|| path.display().to_string()).map_err(|e| Failure::new(Failure::IO, e))
}

pub fn run(cli: Cli) -> Outcome {
    let jobs = cli.jobs;
    par::with_jobs(jobs, move || match cli.command {
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::RdCurve(a) => rd_curve(a),
        Command::Verify(a) => verify(a),
    })
}

fn seed(flag: u64) -> Outcome<u64> {
    match std::env::var("VOXWAVE_SEED") {
        Ok(s) if !s.trim().is_empty() => {
            s.trim().parse().map_err(|_| Failure::usage(format!("VOXWAVE_SEED must be an unsigned integer, got {s:?}")))
        }
        _ => Ok(flag),
    }
}

fn model_config(m: &ModelArgs) -> ModelConfig {
    let mut c = match m.width {
        Some(w) => ModelConfig::desk(w.into()),
        None => ModelConfig::default(),
    };
    let t = &mut c.transform;
    if let Some(k) = m.transform {
        t.kind = match k {
            TransformArg::Cdf53 => TransformKind::Cdf53,
            TransformArg::Cdf97 => TransformKind::Cdf97,
            TransformArg::Learned => TransformKind::Learned,
        };
    }
    if let Some(l) = m.levels {
        t.levels = l.into();
    }
    if let Some(s) = m.sharing {
        t.sharing = match s {
            SharingArg::All => Sharing::All,
            SharingArg::Xy => Sharing::Xy,
            SharingArg::Xz => Sharing::Xz,
            SharingArg::Yz => Sharing::Yz,
            SharingArg::None => Sharing::None,
        };
    }
    if let Some(g) = m.granularity {
        t.granularity = match g {
            GranularityArg::Fine => AffineGranularity::Fine,
            GranularityArg::Coarse => AffineGranularity::Coarse,
        };
    }
    if let Some(e) = m.entropy {
        c.entropy = match e {
            EntropyArg::Factorized => EntropyKind::Factorized,
            EntropyArg::Context => EntropyKind::Context,
        };
    }
    c
}

/// Checks that the architecture flags describe a valid model and that the
/// block edge fits its level count. Runs before any file is touched; a
/// `--model` file is only checked after loading.
fn precheck(m: &ModelArgs, block: Option<u32>) -> Outcome<Option<ModelConfig>> {
    if m.model.is_some() {
        return Ok(None);
    }
    let cfg = model_config(m);
    cfg.validate()?;
    if let Some(b) = block {
        check_block(b, cfg.transform.levels)?;
    }
    Ok(Some(cfg))
}

fn check_block(block: u32, levels: usize) -> Outcome {
    let unit = 1u32 << levels;
    if !block.is_multiple_of(unit) {
        return Err(Failure::usage(format!("--block {block} is not a multiple of 2^{levels}")));
    }
    Ok(())
}

fn load_model(m: &ModelArgs, cfg: Option<ModelConfig>) -> Outcome<CodecModel> {
    match (&m.model, cfg) {
        (Some(path), _) => io(path, CodecModel::load(path)),
        (None, Some(cfg)) => Ok(CodecModel::new(cfg, seed(m.seed)?)?),
        (None, None) => unreachable!("precheck returns a config when no model file is given"),
    }
}

fn read_volume(a: &InputArgs) -> Outcome<Volume> {
    let r = match a.dims {
        Some(dims) => volume::load_raw(&a.input, dims, a.bits, a.signed),
        None => volume::read_vxw(&a.input),
    };
    io(&a.input, r)
}

fn options(mode: &ModeArgs) -> EncodeOptions {
    let opts = match mode.qs {
        Some(qs) if !mode.lossless => EncodeOptions::lossy(qs),
        _ => EncodeOptions::lossless(),
    };
    opts.with_block([mode.block as usize; 3])
}

fn encode(a: EncodeArgs) -> Outcome {
    let cfg = precheck(&a.model, Some(a.mode.block))?;
    let v = read_volume(&a.input)?;
    let model = load_model(&a.model, cfg)?;
    check_block(a.mode.block, model.levels())?;
    let bytes = codec::encode_volume(&model, &v, &options(&a.mode))?;
    write_file(&a.output, &bytes)?;
    println!("{} bytes, {:.4} bpp", bytes.len(), metrics::bpp(bytes.len(), v.len()));
    Ok(())
}

fn decode(a: DecodeArgs) -> Outcome {
    let cfg = precheck(&a.model, None)?;
    let bytes = fs::read(&a.input).with_context(|| a.input.display().to_string()).map_err(|e| Failure::new(Failure::IO, e))?;
    let model = load_model(&a.model, cfg)?;
    let v = codec::decode_volume(&model, &bytes)?;
    io(&a.output, volume::write_vxw(&a.output, &v))?;
    let [d, h, w] = v.dims();
    println!("decoded {d}x{h}x{w} volume, {} bits", v.bit_depth());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Outcome {
    let cfg = precheck(&a.model, Some(a.crop))?;
    if !a.input.is_empty() && a.input.len() <= a.valid as usize {
        return Err(Failure::usage(format!(
            "{} input volumes leave none for training after holding out {}",
            a.input.len(),
            a.valid
        )));
    }
    let tc = TrainConfig {
        lambda: a.lambda,
        lr: a.lr,
        stages: default_stages(a.steps),
        batch: a.batch as usize,
        crop: a.crop as usize,
        seed: seed(a.model.seed)?,
        lossless: a.lossless,
        qs: a.qs,
        validate_every: a.validate_every as usize,
        calibrate: true,
    };
    tc.validate()?;

    let data = if a.input.is_empty() {
        let edge = a.crop as usize + a.crop as usize / 2;
        Dataset::synthetic([edge; 3], a.synthetic as usize, a.valid as usize, tc.seed)
    } else {
        let vols = a.input.iter().map(|p| io(p, volume::read_vxw(p))).collect::<Outcome<Vec<_>>>()?;
        let split = vols.len() - a.valid as usize;
        Dataset { train: vols[..split].to_vec(), valid: vols[split..].to_vec() }
    };
    let mut model = load_model(&a.model, cfg)?;
    check_block(a.crop, model.levels())?;

    let mut log = match &a.log {
        Some(p) => Some(
            fs::File::create(p)
                .map(std::io::BufWriter::new)
                .with_context(|| p.display().to_string())
                .map_err(|e| Failure::new(Failure::IO, e))?,
        ),
        None => None,
    };
    let report = train::train(&mut model, &data, &tc, log.as_mut().map(|w| w as &mut dyn std::io::Write))?;
    io(&a.output, train::save_checkpoint(&model, &tc, &a.output))?;
    println!(
        "trained {} steps: validation loss {:.4} -> {:.4} (best at step {})",
        report.steps, report.initial_valid, report.best_valid, report.best_step
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Outcome {
    if let Some(out) = &a.output {
        let x = read_volume(&a.input)?;
        let y = io(out, volume::read_vxw(out))?;
        let mse = metrics::mse(&x, &y)?;
        println!("PSNR: {}", metrics::format_psnr(metrics::psnr_from_mse(mse, x.bit_depth())));
        println!("MSE: {mse:.6}");
        if let Some(s) = &a.stream {
            let len = fs::metadata(s).with_context(|| s.display().to_string()).map_err(|e| Failure::new(Failure::IO, e))?.len();
            println!("bpp: {:.4}", metrics::bpp(len as usize, x.len()));
        }
        return Ok(());
    }
    if !a.lossless && a.qs.is_none() {
        return Err(Failure::usage("eval needs --output, --lossless or --qs"));
    }
    let mode = ModeArgs { lossless: a.lossless, qs: a.qs, block: a.block };
    let cfg = precheck(&a.model, Some(a.block))?;
    let x = read_volume(&a.input)?;
    let model = load_model(&a.model, cfg)?;
    check_block(a.block, model.levels())?;
    let (bytes, y) = roundtrip(&model, &x, &options(&mode))?;
    let mse = metrics::mse(&x, &y)?;
    println!("PSNR: {}", metrics::format_psnr(metrics::psnr_from_mse(mse, x.bit_depth())));
    println!("MSE: {mse:.6}");
    println!("bpp: {:.4}", metrics::bpp(bytes.len(), x.len()));
    Ok(())
}

fn roundtrip(model: &CodecModel, x: &Volume, opts: &EncodeOptions) -> Outcome<(Vec<u8>, Volume)> {
    let bytes = codec::encode_volume(model, x, opts)?;
    let y = codec::decode_volume(model, &bytes)?;
    Ok((bytes, y))
}

fn rd_curve(a: RdCurveArgs) -> Outcome {
    let cfg = precheck(&a.model, Some(a.block))?;
    let x = read_volume(&a.input)?;
    let model = load_model(&a.model, cfg)?;
    check_block(a.block, model.levels())?;
    let mut csv = String::from("qs,bpp,psnr\n");
    for &qs in &a.qs {
        let opts = EncodeOptions::lossy(qs).with_block([a.block as usize; 3]);
        let (bytes, y) = roundtrip(&model, &x, &opts)?;
        let bpp = metrics::bpp(bytes.len(), x.len());
        let psnr = metrics::format_psnr(metrics::psnr(&x, &y)?);
        writeln!(csv, "{qs},{bpp:.6},{psnr}").expect("writing to a String");
        println!("qs {qs}: {bpp:.4} bpp, PSNR {psnr}");
    }
    write_file(&a.output, csv.as_bytes())
}

fn verify(a: VerifyArgs) -> Outcome {
    let cfg = precheck(&a.model, Some(a.mode.block))?;
    let x = read_volume(&a.input)?;
    let model = load_model(&a.model, cfg)?;
    let (bytes, y) = match &a.stream {
        Some(p) => {
            let bytes = fs::read(p).with_context(|| p.display().to_string()).map_err(|e| Failure::new(Failure::IO, e))?;
            let y = codec::decode_volume(&model, &bytes)?;
            (bytes, y)
        }
        None => {
            check_block(a.mode.block, model.levels())?;
            roundtrip(&model, &x, &options(&a.mode))?
        }
    };
    if !x.same_geometry(&y) {
        return Err(Failure::new(
            Failure::INTEGRITY,
            anyhow!("decoded dims {:?} differ from input dims {:?}", y.dims(), x.dims()),
        ));
    }
    let bpp = metrics::bpp(bytes.len(), x.len());
    if a.mode.lossless {
        let differing = x.data().iter().zip(y.data()).filter(|(p, q)| p != q).count();
        if differing > 0 {
            return Err(Failure::new(Failure::INTEGRITY, anyhow!("{differing} samples differ after lossless decoding")));
        }
        println!("bit-exact: {} samples, {bpp:.4} bpp", x.len());
    } else {
        let psnr = metrics::format_psnr(metrics::psnr(&x, &y)?);
        println!("decoded: {} samples, {bpp:.4} bpp, PSNR {psnr}", x.len());
    }
    Ok(())
}
