use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use voxwave::{volume, Volume};

/// Small architecture shared by every test: 2 levels fit 16^3 blocks.
const ARCH: &[&str] = &["--width", "2", "--levels", "2", "--entropy", "factorized", "--block", "16"];

fn voxwave(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxwave"))
        .args(args)
        .env_remove("VOXWAVE_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn assert_code(o: &Output, code: i32) {
    assert_eq!(
        o.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        stdout(o),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn textured(dims: [usize; 3]) -> Volume {
    let [d, h, w] = dims;
    let data = (0..d * h * w)
        .map(|i| {
            let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
            let smooth = 100.0 + 40.0 * ((x as f64) * 0.3).sin() * ((y as f64) * 0.2).cos() + 3.0 * z as f64;
            let jitter = ((i as u64).wrapping_mul(2_654_435_761) >> 7) % 9;
            (smooth + jitter as f64).round().clamp(0.0, 255.0)
        })
        .collect();
    Volume::from_vec(dims, data, 8, false).unwrap()
}

struct Scratch {
    dir: TempDir,
}

impl Scratch {
    fn new() -> Self {
        Scratch { dir: TempDir::new().unwrap() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_string()
    }

    fn volume(&self, name: &str, v: &Volume) -> String {
        volume::write_vxw(self.path(name), v).unwrap();
        self.arg(name)
    }
}

fn with_arch<'a>(base: &[&'a str]) -> Vec<&'a str> {
    let mut v = base.to_vec();
    v.extend_from_slice(ARCH);
    v
}

#[test]
fn lossless_encode_decode_eval() {
    let s = Scratch::new();
    let x = textured([20, 16, 24]);
    let input = s.volume("in.vxw", &x);
    let (stream, out) = (s.arg("s.vxs"), s.arg("out.vxw"));

    let o = voxwave(&with_arch(&["encode", "-i", &input, "-o", &stream, "--lossless"]));
    assert_code(&o, 0);
    assert!(stdout(&o).contains("bpp"));

    let mut dec = vec!["decode", "-i", stream.as_str(), "-o", out.as_str()];
    dec.extend_from_slice(&ARCH[..ARCH.len() - 2]);
    assert_code(&voxwave(&dec), 0);
    assert_eq!(volume::read_vxw(s.path("out.vxw")).unwrap(), x);

    let o = voxwave(&["eval", "-i", &input, "-o", &out, "--stream", &stream]);
    assert_code(&o, 0);
    let text = stdout(&o);
    assert!(text.contains("PSNR: inf"), "{text}");
    let bytes = fs::metadata(s.path("s.vxs")).unwrap().len() as f64;
    assert!(text.contains(&format!("bpp: {:.4}", 8.0 * bytes / x.len() as f64)), "{text}");
}

#[test]
fn verify_lossless_reports_bit_exact() {
    let s = Scratch::new();
    let input = s.volume("in.vxw", &textured([16, 16, 16]));
    let o = voxwave(&with_arch(&["verify", "-i", &input, "--lossless"]));
    assert_code(&o, 0);
    assert!(stdout(&o).contains("bit-exact"));

    let o = voxwave(&with_arch(&["verify", "-i", &input, "--qs", "4"]));
    assert_code(&o, 0);
    assert!(stdout(&o).contains("PSNR"));
}

#[test]
fn verify_checks_an_existing_stream() {
    let s = Scratch::new();
    let input = s.volume("in.vxw", &textured([16, 16, 16]));
    let other = s.volume("other.vxw", &Volume::zeros([16, 16, 16], 8, false));
    let stream = s.arg("s.vxs");
    assert_code(&voxwave(&with_arch(&["encode", "-i", &input, "-o", &stream, "--lossless"])), 0);
    assert_code(&voxwave(&with_arch(&["verify", "-i", &input, "--stream", &stream, "--lossless"])), 0);
    assert_code(&voxwave(&with_arch(&["verify", "-i", &other, "--stream", &stream, "--lossless"])), 3);
}

#[test]
fn eval_without_reconstruction_runs_the_codec() {
    let s = Scratch::new();
    let input = s.volume("in.vxw", &textured([16, 16, 16]));
    let o = voxwave(&with_arch(&["eval", "-i", &input, "--lossless"]));
    assert_code(&o, 0);
    assert!(stdout(&o).contains("PSNR: inf"));
    let o = voxwave(&with_arch(&["eval", "-i", &input, "--qs", "8"]));
    assert_code(&o, 0);
    assert!(!stdout(&o).contains("PSNR: inf") && stdout(&o).contains("bpp: "));
}

#[test]
fn rd_curve_writes_monotone_csv() {
    let s = Scratch::new();
    let input = s.volume("in.vxw", &textured([32, 32, 32]));
    let csv = s.arg("rd.csv");
    let o = voxwave(&with_arch(&["rd-curve", "-i", &input, "-o", &csv, "--transform", "cdf97", "--qs", "1,2,4,8,16"]));
    assert_code(&o, 0);
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("qs,bpp,psnr"));
    let rows: Vec<(f64, f64, f64)> = lines
        .map(|l| {
            let f: Vec<f64> = l.split(',').map(|c| c.parse().unwrap()).collect();
            (f[0], f[1], f[2])
        })
        .collect();
    assert_eq!(rows.len(), 5);
    for w in rows.windows(2) {
        assert!(w[1].0 > w[0].0);
        assert!(w[1].1 < w[0].1, "bpp must fall as qs grows: {rows:?}");
        assert!(w[1].2 < w[0].2, "psnr must fall as qs grows: {rows:?}");
    }
}

#[test]
fn train_then_code_with_the_checkpoint() {
    let s = Scratch::new();
    let (model, log) = (s.arg("m.vxm"), s.arg("log.csv"));
    let o = voxwave(&[
        "train", "-o", &model, "--log", &log, "--crop", "16", "--steps", "2,2,2", "--lr", "1e-3", "--width", "2",
        "--levels", "2", "--synthetic", "2", "--validate-every", "3", "--lambda", "4",
    ]);
    assert_code(&o, 0);
    assert!(stdout(&o).contains("trained 6 steps"));
    let log_text = fs::read_to_string(&log).unwrap();
    assert!(log_text.starts_with("step,rate_bits,mse,loss\n"));
    assert_eq!(log_text.lines().count(), 7);
    assert!(Path::new(&format!("{model}.json")).exists());
    let echo = voxwave::train::load_config_echo(Path::new(&model)).unwrap();
    assert_eq!((echo.lambda, echo.crop, echo.total_steps()), (4.0, 16, 6));

    let input = s.volume("in.vxw", &textured([16, 32, 16]));
    let (stream, out) = (s.arg("s.vxs"), s.arg("out.vxw"));
    let m = ["--model", model.as_str()];
    assert_code(&voxwave(&[&["encode", "-i", &input, "-o", &stream, "--qs", "2", "--block", "16"][..], &m].concat()), 0);
    assert_code(&voxwave(&[&["decode", "-i", &stream, "-o", &out][..], &m].concat()), 0);
    let y = volume::read_vxw(&out).unwrap();
    assert_eq!(y.dims(), [16, 32, 16]);
    assert_code(&voxwave(&[&["verify", "-i", &input, "--lossless", "--block", "16"][..], &m].concat()), 0);
}

#[test]
fn training_on_files_holds_out_the_last_volumes() {
    let s = Scratch::new();
    let a = s.volume("a.vxw", &textured([16, 16, 16]));
    let b = s.volume("b.vxw", &textured([16, 16, 20]));
    let model = s.arg("m.vxm");
    let base = ["train", "-o", &model, "--crop", "16", "--steps", "1,0,1", "--width", "2", "--levels", "2"];
    assert_code(&voxwave(&[&base[..], &["-i", &a, &b, "--lossless"]].concat()), 0);
    assert!(Path::new(&model).exists());
    assert_code(&voxwave(&[&base[..], &["-i", &a]].concat()), 1);
}

#[test]
fn raw_input_and_job_count_do_not_change_the_stream() {
    let s = Scratch::new();
    let x = textured([16, 16, 32]);
    volume::save_raw(s.path("in.raw"), &x).unwrap();
    let raw = s.arg("in.raw");
    let (s1, s2) = (s.arg("a.vxs"), s.arg("b.vxs"));
    let enc = |jobs: &str, out: &str| {
        voxwave(&with_arch(&["--jobs", jobs, "encode", "-i", &raw, "--dims", "16x16x32", "-o", out, "--qs", "3"]))
    };
    assert_code(&enc("1", &s1), 0);
    assert_code(&enc("2", &s2), 0);
    assert_eq!(fs::read(&s1).unwrap(), fs::read(&s2).unwrap());
}

#[test]
fn seed_environment_variable_overrides_the_flag() {
    let s = Scratch::new();
    let input = s.volume("in.vxw", &textured([16, 16, 16]));
    let (stream, out) = (s.arg("s.vxs"), s.arg("out.vxw"));
    let run = |args: &[&str], env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_voxwave"));
        c.args(args).args(ARCH[..ARCH.len() - 2].iter()).args(["--transform", "learned"]);
        match env {
            Some(v) => c.env("VOXWAVE_SEED", v),
            None => c.env_remove("VOXWAVE_SEED"),
        };
        c.output().unwrap()
    };
    assert_code(&run(&["encode", "-i", &input, "-o", &stream, "--lossless", "--seed", "1"], Some("5")), 0);
    assert_code(&run(&["decode", "-i", &stream, "-o", &out, "--seed", "5"], None), 0);
    assert_code(&run(&["decode", "-i", &stream, "-o", &out, "--seed", "5"], Some("6")), 3);
    assert_code(&run(&["decode", "-i", &stream, "-o", &out], Some("x")), 1);
}

#[test]
fn usage_errors_exit_1() {
    let s = Scratch::new();
    let input = s.volume("in.vxw", &textured([16, 16, 16]));
    let out = s.arg("o.vxs");
    assert_code(&voxwave(&[]), 1);
    assert_code(&voxwave(&["encode", "-i", &input, "-o", &out]), 1);
    assert_code(&voxwave(&["encode", "-i", &input, "-o", &out, "--lossless", "--qs", "2"]), 1);
    assert_code(&voxwave(&["encode", "-i", &input, "-o", &out, "--qs", "-2"]), 1);
    assert_code(&voxwave(&["encode", "-i", &input, "-o", &out, "--lossless", "--model", "m", "--levels", "2"]), 1);
    assert_code(&voxwave(&["encode", "-i", &input, "-o", &out, "--lossless", "--levels", "3", "--block", "12"]), 1);
    assert_code(&voxwave(&["encode", "-i", &input, "-o", &out, "--lossless", "--bits", "16"]), 1);
    assert_code(&voxwave(&["train", "-o", &out, "--steps", "1,2"]), 1);
    assert_code(&voxwave(&["eval", "-i", &input]), 1);
    assert!(!Path::new(&out).exists(), "usage errors must not touch files");
    assert_code(&voxwave(&["--help"]), 0);
}

#[test]
fn io_errors_exit_2() {
    let s = Scratch::new();
    let missing = s.arg("missing.vxw");
    let out = s.arg("o.vxs");
    assert_code(&voxwave(&with_arch(&["encode", "-i", &missing, "-o", &out, "--lossless"])), 2);
    assert_code(&voxwave(&["decode", "-i", &missing, "-o", &out, "--levels", "2"]), 2);
    let input = s.volume("in.vxw", &textured([16, 16, 16]));
    assert_code(&voxwave(&["encode", "-i", &input, "-o", &out, "--lossless", "--model", &missing]), 2);
    fs::write(s.path("junk.vxw"), b"not a volume").unwrap();
    assert_code(&voxwave(&with_arch(&["verify", "-i", &s.arg("junk.vxw"), "--lossless"])), 2);
    let dir_out = s.dir.path().to_str().unwrap().to_string();
    assert_code(&voxwave(&with_arch(&["encode", "-i", &input, "-o", &dir_out, "--lossless"])), 2);
}

#[test]
fn corrupted_or_mismatched_streams_exit_3() {
    let s = Scratch::new();
    let input = s.volume("in.vxw", &textured([16, 16, 16]));
    let stream = s.arg("s.vxs");
    let out = s.arg("out.vxw");
    assert_code(&voxwave(&with_arch(&["encode", "-i", &input, "-o", &stream, "--qs", "2"])), 0);
    let dec_arch = &ARCH[..ARCH.len() - 2];

    let mut bytes = fs::read(&stream).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(s.path("bad.vxs"), &bytes).unwrap();
    let o = voxwave(&[&["decode", "-i", &s.arg("bad.vxs"), "-o", &out][..], dec_arch].concat());
    assert_code(&o, 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("checksum"));

    fs::write(s.path("short.vxs"), &fs::read(&stream).unwrap()[..40]).unwrap();
    assert_code(&voxwave(&[&["decode", "-i", &s.arg("short.vxs"), "-o", &out][..], dec_arch].concat()), 3);

    let o = voxwave(&[&["decode", "-i", &stream, "-o", &out, "--seed", "9"][..], dec_arch].concat());
    assert_code(&o, 3);
    assert!(!Path::new(&out).exists());
}

#[test]
fn diverging_training_exits_4() {
    let s = Scratch::new();
    let o = voxwave(&[
        "train", "-o", &s.arg("m.vxm"), "--crop", "16", "--steps", "0,0,150", "--lr", "5", "--width", "2", "--levels",
        "2", "--synthetic", "2",
    ]);
    assert_code(&o, 4);
    assert!(!s.path("m.vxm").exists());
}
