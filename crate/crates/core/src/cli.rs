//! The `tseg` command line.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::eval::{aggregate, read_frames_csv, write_text, EvalReport};
use crate::gradsuite::{self, SuiteOptions, TOLERANCE};
use crate::loocv::{prepare, run_loocv, LoocvConfig};
use crate::nets::{save_checkpoint, Model, NetConfig};
use crate::pgm::{self, PgmImage};
use crate::phantom::{frame_file_name, generate_dataset, read_dataset, write_dataset};
use crate::prep::{crop_gray8, preprocess, Gray8Frame, ThermalFrame};
use crate::rng::derive_seed;
use crate::train::{train_with, TrainConfig, TrainPair};

mod config;

pub use config::{RunConfig, KEYS};

/// Flag groups. Each field is also a config-file key of the same name.
macro_rules! knobs {
    ($name:ident { $($field:ident: $help:literal),* $(,)? }) => {
        #[derive(Args, Clone, Debug, Default)]
        pub struct $name {
            $(
                #[arg(long, value_name = "VALUE", help = $help)]
                $field: Option<String>,
            )*
        }

        impl $name {
            const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            fn values(&self) -> Vals<'_> {
                vec![$((stringify!($field), self.$field.as_deref())),*]
            }
        }
    };
}

knobs!(SeedArgs { seed: "Master seed" });
knobs!(PhantomArgs {
    patients: "Number of patients",
    volunteers: "Number of volunteers",
    image_hw: "Frame width and height in pixels",
    frames: "Frames per subject",
    background_level: "Background level in raw counts",
    body_level: "Body level at the first frame",
    breast_excess: "Breast excess over the body level",
    hotspot_excess: "Peak patient hotspot excess (0 disables)",
    noise_sigma: "Sensor noise standard deviation",
    cooldown_rate: "Per-frame loss of body excess",
    small_breast_prob: "Small-breast chance for standalone subjects",
});
knobs!(PrepArgs {
    smooth_kernel: "Box filter size, or auto to scale with the frame height",
    compensation: "Offset added to the Otsu threshold",
    crop: "Crop x0,y0,x1,y1, or none",
    remap_source: "Frame remapped to 8 bits: original or smoothed",
});
knobs!(NetArgs {
    arch: "Architecture(s): cdcnn, unet, multiresunet (comma separated for loocv)",
    depth: "Pooling levels of the U-Net family",
    base_width: "Channels at the top level",
});
knobs!(TrainArgs {
    epochs: "Training epochs",
    batch_size: "Mini-batch size",
    learning_rate: "Adam learning rate",
    beta1: "Adam beta1",
    beta2: "Adam beta2",
    epsilon: "Adam epsilon",
});
knobs!(OutArg { out: "Output path" });
knobs!(InputArg { input: "Input path" });
knobs!(SubjectsArg { subjects_dir: "Dataset directory written by synth" });
knobs!(PairsArg { pairs: "Training list: one `image.pgm mask.pgm` pair per line" });

#[derive(Parser, Debug)]
#[command(name = "tseg", version, about = "Breast-region segmentation of thermal image sequences")]
struct Cli {
    /// key=value settings file; flags given on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Synth {
        #[command(flatten)]
        seed: SeedArgs,
        #[command(flatten)]
        phantom: PhantomArgs,
        #[command(flatten)]
        out: OutArg,
    },
    /// Convert raw 16-bit frames to background-free 8-bit images.
    Preprocess {
        #[command(flatten)]
        prep: PrepArgs,
        #[command(flatten)]
        input: InputArg,
        #[command(flatten)]
        out: OutArg,
    },
    /// Train one model on an explicit list of image/mask pairs.
    Train {
        #[command(flatten)]
        seed: SeedArgs,
        #[command(flatten)]
        net: NetArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        pairs: PairsArg,
        #[command(flatten)]
        out: OutArg,
    },
    /// Leave-one-subject-out cross-validation.
    Loocv {
        #[command(flatten)]
        seed: SeedArgs,
        #[command(flatten)]
        prep: PrepArgs,
        #[command(flatten)]
        net: NetArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        subjects: SubjectsArg,
        #[command(flatten)]
        out: OutArg,
        /// Run folds one after another on the calling thread.
        #[arg(long)]
        single_thread: bool,
    },
    /// Summarize a loocv output directory.
    Report {
        #[command(flatten)]
        input: InputArg,
        #[command(flatten)]
        out: OutArg,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[command(flatten)]
        seed: SeedArgs,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(Failure::Usage(msg.into()))
}

type Vals<'a> = Vec<(&'static str, Option<&'a str>)>;

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Preprocess { .. } => "preprocess",
            Command::Train { .. } => "train",
            Command::Loocv { .. } => "loocv",
            Command::Report { .. } => "report",
            Command::Gradcheck { .. } => "gradcheck",
        }
    }

    /// Keys this subcommand reads and the flag values given for them.
    fn flags<'a>(&'a self) -> (Vec<&'static str>, Vals<'a>) {
        let mut keys = Vec::new();
        let mut vals: Vals<'a> = Vec::new();
        let mut add = |k: &'static [&'static str], v: Vals<'a>| {
            keys.extend_from_slice(k);
            vals.extend(v);
        };
        match self {
            Command::Synth { seed, phantom, out } => {
                add(SeedArgs::KEYS, seed.values());
                add(PhantomArgs::KEYS, phantom.values());
                add(OutArg::KEYS, out.values());
            }
            Command::Preprocess { prep, input, out } => {
                add(PrepArgs::KEYS, prep.values());
                add(InputArg::KEYS, input.values());
                add(OutArg::KEYS, out.values());
            }
            Command::Train { seed, net, train, pairs, out } => {
                add(SeedArgs::KEYS, seed.values());
                add(NetArgs::KEYS, net.values());
                add(TrainArgs::KEYS, train.values());
                add(PairsArg::KEYS, pairs.values());
                add(OutArg::KEYS, out.values());
            }
            Command::Loocv { seed, prep, net, train, subjects, out, single_thread } => {
                add(SeedArgs::KEYS, seed.values());
                add(PrepArgs::KEYS, prep.values());
                add(NetArgs::KEYS, net.values());
                add(TrainArgs::KEYS, train.values());
                add(SubjectsArg::KEYS, subjects.values());
                add(OutArg::KEYS, out.values());
                add(&["single_thread"], vec![("single_thread", single_thread.then_some("true"))]);
            }
            Command::Report { input, out } => {
                add(InputArg::KEYS, input.values());
                add(OutArg::KEYS, out.values());
            }
            Command::Gradcheck { seed } => add(SeedArgs::KEYS, seed.values()),
        }
        (keys, vals)
    }
}

/// Runs `tseg` with `args` (including the program name) and returns the
/// process exit code: 0 on success, 2 for usage errors, 1 for failures.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("tseg {}: {msg}", cli.command.name());
            eprintln!("try `tseg {} --help`", cli.command.name());
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("tseg {}: error: {e}", cli.command.name());
            1
        }
    }
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    let (keys, flags) = cli.command.flags();
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path).map_err(Failure::Usage)?;
    }
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, v).map_err(Failure::Usage)?;
        }
    }
    eprintln!("# tseg {}", cli.command.name());
    eprint!("{}", cfg.render(&keys));

    match cli.command {
        Command::Synth { .. } => synth(&cfg),
        Command::Preprocess { .. } => preprocess_cmd(&cfg),
        Command::Train { .. } => train_cmd(&cfg),
        Command::Loocv { .. } => loocv_cmd(&cfg),
        Command::Report { .. } => report_cmd(&cfg),
        Command::Gradcheck { .. } => gradcheck_cmd(&cfg),
    }
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> CliResult<&'a Path> {
    match p {
        Some(p) => Ok(p),
        None => usage(format!("missing --{}", key.replace('_', "-"))),
    }
}

fn existing<'a>(p: &'a Option<PathBuf>, key: &str) -> CliResult<&'a Path> {
    let path = required(p, key)?;
    if !path.exists() {
        return usage(format!("{} does not exist", path.display()));
    }
    Ok(path)
}

fn synth(cfg: &RunConfig) -> CliResult<()> {
    let out = required(&cfg.out, "out")?;
    if cfg.patients == 0 || cfg.volunteers == 0 {
        return usage("patients and volunteers must both be at least 1");
    }
    cfg.phantom.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let subjects = generate_dataset(cfg.patients, cfg.volunteers, cfg.seed, &cfg.phantom)?;
    write_dataset(out, &subjects)?;
    println!("wrote {} subjects to {}", subjects.len(), out.display());
    Ok(())
}

fn read_raw(path: &Path) -> Result<ThermalFrame> {
    match pgm::read(path)? {
        PgmImage::Gray16 { width, height, pixels } => ThermalFrame::new(width, height, pixels),
        PgmImage::Gray8 { width, height, pixels } => Ok(Gray8Frame::new(width, height, pixels)?.to_thermal()),
    }
}

fn read_gray8(path: &Path) -> Result<Gray8Frame> {
    match pgm::read(path)? {
        PgmImage::Gray8 { width, height, pixels } => Gray8Frame::new(width, height, pixels),
        PgmImage::Gray16 { .. } => Err(Error::format("PGM", format!("{}: expected an 8-bit image", path.display()))),
    }
}

/// A single `.pgm` becomes one 8-bit file. A dataset directory becomes a
/// tree of 8-bit frames and masks plus `thresholds.csv` and a `pairs.txt`
/// training list.
fn preprocess_cmd(cfg: &RunConfig) -> CliResult<()> {
    let input = existing(&cfg.input, "input")?;
    let out = required(&cfg.out, "out")?;
    if input.is_file() {
        let frame = read_raw(input)?;
        let p = preprocess(&frame, &cfg.preprocess_for(frame.height))?;
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        pgm::write_gray8(out, p.image.width, p.image.height, &p.image.pixels)?;
        println!("threshold={} t_effective={} degenerate={}", p.otsu.threshold, p.t_effective, p.otsu.degenerate);
        return Ok(());
    }

    let subjects = read_dataset(input)?;
    let mut thresholds = String::from("subject_id,frame,threshold,t_effective,degenerate\n");
    let mut pairs = String::new();
    for s in &subjects {
        let pcfg = cfg.preprocess_for(s.height());
        let dir = out.join(&s.subject_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mask = match &pcfg.crop {
            Some(r) => crop_gray8(&s.mask, r)?,
            None => s.mask.clone(),
        };
        pgm::write_gray8(dir.join("mask.pgm"), mask.width, mask.height, &mask.pixels)?;
        for f in &s.frames {
            let p = preprocess(f, &pcfg)?;
            let name = frame_file_name(f.minute_index);
            pgm::write_gray8(dir.join(&name), p.image.width, p.image.height, &p.image.pixels)?;
            let _ = writeln!(
                thresholds,
                "{},{},{},{},{}",
                s.subject_id,
                f.minute_index,
                p.otsu.threshold,
                p.t_effective,
                u8::from(p.otsu.degenerate)
            );
            let _ = writeln!(pairs, "{0}/{name} {0}/mask.pgm", s.subject_id);
        }
    }
    write_text(&out.join("thresholds.csv"), &thresholds)?;
    write_text(&out.join("pairs.txt"), &pairs)?;
    println!("preprocessed {} subjects into {}", subjects.len(), out.display());
    Ok(())
}

/// Reads a pairs list. Paths are relative to the list's directory; blank
/// lines and `#` comments are skipped.
pub fn read_pairs(path: &Path) -> Result<Vec<TrainPair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [image, mask] = parts[..] else {
            return Err(Error::format("pairs list", format!("line {}: expected `image mask`", n + 1)));
        };
        pairs.push(TrainPair {
            image: read_gray8(&base.join(image))?,
            mask: read_gray8(&base.join(mask))?,
        });
    }
    if pairs.is_empty() {
        return Err(Error::format("pairs list", format!("{}: no pairs", path.display())));
    }
    Ok(pairs)
}

fn square_side(width: usize, height: usize) -> Result<usize> {
    if width != height {
        return Err(Error::InvalidArgument(format!("networks need square images, got {width}x{height}")));
    }
    Ok(width)
}

/// Writes `model.tseg` and `history.csv` into the output directory.
fn train_cmd(cfg: &RunConfig) -> CliResult<()> {
    let list = existing(&cfg.pairs, "pairs")?;
    let out = required(&cfg.out, "out")?;
    let [arch] = cfg.archs[..] else {
        return usage("train takes exactly one --arch");
    };
    cfg.train.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let pairs = read_pairs(list)?;
    let hw = square_side(pairs[0].image.width, pairs[0].image.height)?;
    let net = NetConfig {
        arch,
        input_hw: hw,
        seed: derive_seed(cfg.seed, "init"),
        ..cfg.net.clone()
    };
    let mut model = Model::from_config(&net)?;
    let tc = TrainConfig {
        seed: derive_seed(cfg.seed, "train"),
        ..cfg.train.clone()
    };
    let history = train_with(&mut model, &pairs, &tc, |e| {
        eprintln!("epoch {:>4}  loss {:.6}  {:.2}s", e.epoch, e.loss, e.seconds);
    })?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    save_checkpoint(out.join("model.tseg"), &model.params)?;
    history.write_csv(out.join("history.csv"))?;
    println!(
        "trained {} on {} pairs: final loss {:.6}",
        arch.label(),
        pairs.len(),
        history.final_loss().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn loocv_cmd(cfg: &RunConfig) -> CliResult<()> {
    let dir = existing(&cfg.subjects_dir, "subjects_dir")?;
    let out = required(&cfg.out, "out")?;
    cfg.train.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    if cfg.prep.crop.is_some() {
        return usage("crop cannot be combined with loocv");
    }
    let subjects = read_dataset(dir)?;
    let hw = square_side(subjects[0].width(), subjects[0].height())?;
    let data = prepare(&subjects, &cfg.preprocess_for(hw))?;
    let lc = LoocvConfig {
        archs: cfg.archs.clone(),
        net: NetConfig {
            input_hw: hw,
            ..cfg.net.clone()
        },
        train: cfg.train.clone(),
        seed: cfg.seed,
        single_thread: cfg.single_thread,
    };
    let outcome = run_loocv(&data, &lc, &|f| {
        let mean = f.scores.iter().map(|s| s.tanimoto).sum::<f64>() / f.scores.len().max(1) as f64;
        eprintln!(
            "{:<12} test {:<4} loss {:.6}  tanimoto {:.4}  {:.1}s",
            f.arch.name(),
            f.subject_id,
            f.history.final_loss().unwrap_or(f64::NAN),
            mean,
            f.seconds
        );
    })?;
    outcome.write(out)?;
    print!("{}", table1(&outcome.report, &parse_timing(&outcome.timing_text())));
    println!("wrote {} in {:.1}s", out.display(), outcome.seconds);
    Ok(())
}

/// Mean fold and epoch seconds per model, parsed from `timing.txt`.
fn parse_timing(timing: &str) -> Vec<Timing> {
    let mut acc: Vec<(Timing, usize)> = Vec::new();
    for line in timing.lines().filter(|l| !l.starts_with('#')) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [model, _, fold, epoch] = parts[..] else { continue };
        let (Ok(fold), Ok(epoch)) = (fold.parse::<f64>(), epoch.parse::<f64>()) else { continue };
        match acc.iter_mut().find(|(t, _)| t.model == model) {
            Some((t, n)) => {
                t.fold_seconds += fold;
                t.epoch_seconds += epoch;
                *n += 1;
            }
            None => acc.push((Timing { model: model.to_string(), fold_seconds: fold, epoch_seconds: epoch }, 1)),
        }
    }
    acc.into_iter()
        .map(|(t, n)| Timing {
            fold_seconds: t.fold_seconds / n as f64,
            epoch_seconds: t.epoch_seconds / n as f64,
            ..t
        })
        .collect()
}

/// Mean wall-clock cost of one model's folds.
#[derive(Clone, Debug, PartialEq)]
pub struct Timing {
    pub model: String,
    pub fold_seconds: f64,
    pub epoch_seconds: f64,
}

/// Table-1 layout: mean accuracies per model, then mean seconds per epoch
/// and per fold (blank when no timing is known).
pub fn table1(report: &EvalReport, timing: &[Timing]) -> String {
    let mut out = String::from("model,subjects,mean_tanimoto,mean_iou,seconds_per_epoch,seconds_per_fold\n");
    for m in &report.models {
        let secs = timing
            .iter()
            .find(|t| t.model == m.model)
            .map_or_else(|| ",".to_string(), |t| format!("{:.3},{:.3}", t.epoch_seconds, t.fold_seconds));
        let _ = writeln!(out, "{},{},{:.6},{:.6},{secs}", m.model, m.subjects, m.tanimoto, m.iou);
    }
    out
}

/// Reads `frames.csv` (and `timing.txt` if present) from a loocv directory
/// and writes `table1.csv` and `per_subject.csv`.
fn report_cmd(cfg: &RunConfig) -> CliResult<()> {
    let input = existing(&cfg.input, "input")?;
    let (frames, timing) = if input.is_dir() {
        (input.join("frames.csv"), input.join("timing.txt"))
    } else {
        (input.to_path_buf(), input.with_file_name("timing.txt"))
    };
    let out = cfg.out.clone().unwrap_or_else(|| frames.parent().unwrap_or(Path::new(".")).to_path_buf());
    let report = aggregate(&read_frames_csv(&frames)?);
    let seconds = match fs::read_to_string(&timing) {
        Ok(t) => parse_timing(&t),
        Err(_) => Vec::new(),
    };
    let table = table1(&report, &seconds);
    write_text(&out.join("table1.csv"), &table)?;
    write_text(&out.join("per_subject.csv"), &report.per_subject_csv())?;
    print!("{table}");
    Ok(())
}

fn gradcheck_cmd(cfg: &RunConfig) -> CliResult<()> {
    let opts = SuiteOptions {
        seed: cfg.seed,
        ..SuiteOptions::default()
    };
    let cases = gradsuite::run(&opts)?;
    let mut worst: f64 = 0.0;
    for c in &cases {
        worst = worst.max(c.report.max_rel_error);
        println!(
            "{:<4} {:<48} max_rel_error={:.3e} checked={} skipped={}",
            if c.passed() { "ok" } else { "FAIL" },
            c.name,
            c.report.max_rel_error,
            c.report.checked,
            c.report.skipped
        );
    }
    println!("max relative error: {worst:.3e} (tolerance {TOLERANCE:e})");
    if let Some(c) = cases.iter().find(|c| !c.passed()) {
        return Err(Failure::Runtime(Error::InvalidArgument(format!("gradient check failed for {}", c.name))));
    }
    Ok(())
}
