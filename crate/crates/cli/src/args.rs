use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

/// Volumetric image codec with learned lifting transforms.
#[derive(Debug, Parser)]
#[command(name = "voxwave", version)]
pub struct Cli {
    /// Worker threads for per-block work; 0 uses every logical core.
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compress a volume into a stream.
    Encode(EncodeArgs),
    /// Reconstruct a volume from a stream.
    Decode(DecodeArgs),
    /// Train a model and write its weights plus a JSON config echo.
    Train(TrainArgs),
    /// Report PSNR and bpp.
    Eval(EvalArgs),
    /// Write a CSV of (qs, bpp, psnr) over several quantization steps.
    RdCurve(RdCurveArgs),
    /// Encode, decode and compare against the input.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TransformArg {
    Cdf53,
    Cdf97,
    Learned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EntropyArg {
    Factorized,
    Context,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SharingArg {
    All,
    Xy,
    Xz,
    Yz,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GranularityArg {
    Fine,
    Coarse,
}

/// Where the model comes from: a weight file, or a fresh seeded model built
/// from architecture flags. Decoding needs the same model that encoded.
#[derive(Clone, Debug, Args)]
pub struct ModelArgs {
    /// Weight file written by `train`.
    #[arg(long, conflicts_with_all = ["transform", "entropy", "levels", "sharing", "granularity", "width"])]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub transform: Option<TransformArg>,
    #[arg(long, value_enum)]
    pub entropy: Option<EntropyArg>,
    /// Decomposition levels.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=8))]
    pub levels: Option<u8>,
    #[arg(long, value_enum)]
    pub sharing: Option<SharingArg>,
    #[arg(long, value_enum)]
    pub granularity: Option<GranularityArg>,
    /// Hidden width of every network.
    #[arg(long, value_parser = clap::value_parser!(u16).range(1..))]
    pub width: Option<u16>,
    /// Seed for model initialization; VOXWAVE_SEED takes precedence.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// A volume on disk: `VXW0` by default, headerless little-endian raw data
/// when `--dims` is given.
#[derive(Clone, Debug, Args)]
pub struct InputArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    /// Raw input geometry as DxHxW.
    #[arg(long, value_parser = parse_dims)]
    pub dims: Option<[usize; 3]>,
    /// Raw sample width in bits.
    #[arg(long, default_value_t = 8, requires = "dims", value_parser = parse_bits)]
    pub bits: u8,
    /// Raw samples are two's-complement signed.
    #[arg(long, requires = "dims")]
    pub signed: bool,
}

#[derive(Clone, Debug, Args)]
#[command(group(ArgGroup::new("mode").required(true).args(["lossless", "qs"])))]
pub struct ModeArgs {
    /// Integer transform, exact reconstruction.
    #[arg(long)]
    pub lossless: bool,
    /// Quantization step of lossy coding.
    #[arg(long, value_parser = parse_positive)]
    pub qs: Option<f64>,
    /// Block edge length.
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u32).range(1..=4096))]
    pub block: u32,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, short)]
    pub output: PathBuf,
    #[command(flatten)]
    pub mode: ModeArgs,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Stream written by `encode`.
    #[arg(long, short)]
    pub input: PathBuf,
    /// Reconstructed volume, written as `VXW0`.
    #[arg(long, short)]
    pub output: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training volumes; the last `--valid` of them are held out. Without
    /// inputs, seeded synthetic volumes are generated.
    #[arg(long, short, num_args = 1..)]
    pub input: Vec<PathBuf>,
    /// Weight file to write.
    #[arg(long, short)]
    pub output: PathBuf,
    /// Per-step CSV log (step, rate_bits, mse, loss).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value_t = 16.0, value_parser = parse_positive)]
    pub lambda: f64,
    /// Train the lossless objective.
    #[arg(long)]
    pub lossless: bool,
    #[arg(long, default_value_t = 8.0, value_parser = parse_positive, conflicts_with = "lossless")]
    pub qs: f64,
    /// Steps of the three stages: entropy+post, transform, joint.
    #[arg(long, default_value = "2000,2000,6000", value_parser = parse_steps)]
    pub steps: [usize; 3],
    #[arg(long, default_value_t = 1e-4, value_parser = parse_positive)]
    pub lr: f64,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub batch: u32,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u32).range(1..))]
    pub crop: u32,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u32).range(1..))]
    pub validate_every: u32,
    /// Held-out validation volumes.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub valid: u32,
    /// Synthetic training volumes when no input is given.
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u32).range(1..))]
    pub synthetic: u32,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Reconstruction to compare against the input. Without it, the input is
    /// encoded and decoded in memory.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    /// Stream whose size gives the bpp of `--output`.
    #[arg(long, requires = "output")]
    pub stream: Option<PathBuf>,
    #[arg(long, conflicts_with_all = ["output", "qs"])]
    pub lossless: bool,
    #[arg(long, value_parser = parse_positive, conflicts_with = "output")]
    pub qs: Option<f64>,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u32).range(1..=4096))]
    pub block: u32,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct RdCurveArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// CSV file to write.
    #[arg(long, short)]
    pub output: PathBuf,
    /// Comma-separated quantization steps.
    #[arg(long, default_value = "1,2,4,8,16", value_delimiter = ',', value_parser = parse_positive)]
    pub qs: Vec<f64>,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u32).range(1..=4096))]
    pub block: u32,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Existing stream to check instead of encoding a fresh one.
    #[arg(long)]
    pub stream: Option<PathBuf>,
    #[command(flatten)]
    pub mode: ModeArgs,
    #[command(flatten)]
    pub model: ModelArgs,
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    let [d, h, w] = parts.as_slice() else {
        return Err(format!("expected DxHxW, got {s:?}"));
    };
    let one = |p: &str| match p.trim().parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(format!("invalid dimension {p:?}")),
    };
    Ok([one(d)?, one(h)?, one(w)?])
}

fn parse_bits(s: &str) -> Result<u8, String> {
    match s.parse::<u8>() {
        Ok(b @ (8 | 16 | 32)) => Ok(b),
        _ => Err(format!("bit depth must be 8, 16 or 32, got {s:?}")),
    }
}

fn parse_positive(s: &str) -> Result<f64, String> {
    match s.trim().parse::<f64>() {
        Ok(v) if v.is_finite() && v > 0.0 => Ok(v),
        _ => Err(format!("expected a positive number, got {s:?}")),
    }
}

fn parse_steps(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("invalid step count {p:?}")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| format!("expected three comma-separated step counts, got {s:?}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn value_parsers() {
        assert_eq!(parse_dims("4x5X6"), Ok([4, 5, 6]));
        assert!(parse_dims("4x5").is_err());
        assert!(parse_dims("0x5x6").is_err());
        assert_eq!(parse_bits("16"), Ok(16));
        assert!(parse_bits("12").is_err());
        assert!(parse_positive("-1").is_err());
        assert!(parse_positive("inf").is_err());
        assert_eq!(parse_steps("1, 2,3"), Ok([1, 2, 3]));
        assert!(parse_steps("1,2").is_err());
    }
}
