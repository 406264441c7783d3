//! Merged run settings: built-in defaults, then a `key=value` file, then flags.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::nets::{Arch, NetConfig};
use crate::phantom::PhantomParams;
use crate::prep::{PreprocessConfig, Rect, RemapSource};
use crate::train::TrainConfig;

/// Every key a config file may contain. Flags use the same names with
/// dashes (`image_hw` becomes `--image-hw`).
pub const KEYS: &[&str] = &[
    "seed",
    "patients",
    "volunteers",
    "image_hw",
    "frames",
    "background_level",
    "body_level",
    "breast_excess",
    "hotspot_excess",
    "noise_sigma",
    "cooldown_rate",
    "small_breast_prob",
    "smooth_kernel",
    "compensation",
    "crop",
    "remap_source",
    "arch",
    "depth",
    "base_width",
    "epochs",
    "batch_size",
    "learning_rate",
    "beta1",
    "beta2",
    "epsilon",
    "single_thread",
    "subjects_dir",
    "input",
    "pairs",
    "out",
];

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub patients: usize,
    pub volunteers: usize,
    pub phantom: PhantomParams,
    /// `None` scales the kernel to the frame height.
    pub smooth_kernel: Option<usize>,
    pub prep: PreprocessConfig,
    pub archs: Vec<Arch>,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub single_thread: bool,
    pub subjects_dir: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            patients: 14,
            volunteers: 16,
            phantom: PhantomParams::default(),
            smooth_kernel: None,
            prep: PreprocessConfig::default(),
            archs: vec![Arch::MultiResUnet],
            net: NetConfig::default(),
            train: TrainConfig::default(),
            single_thread: false,
            subjects_dir: None,
            input: None,
            pairs: None,
            out: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: Display,
{
    value.parse().map_err(|e| format!("bad value `{value}` for {key}: {e}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("bad value `{value}` for {key}: expected true or false")),
    }
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "-".to_string(), |p| p.display().to_string())
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        let p = &mut self.phantom;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "patients" => self.patients = parse(key, v)?,
            "volunteers" => self.volunteers = parse(key, v)?,
            "image_hw" => p.image_hw = parse(key, v)?,
            "frames" => p.frames_per_subject = parse(key, v)?,
            "background_level" => p.background_level = parse(key, v)?,
            "body_level" => p.body_level = parse(key, v)?,
            "breast_excess" => p.breast_excess = parse(key, v)?,
            "hotspot_excess" => p.hotspot_excess = parse(key, v)?,
            "noise_sigma" => p.noise_sigma = parse(key, v)?,
            "cooldown_rate" => p.cooldown_rate = parse(key, v)?,
            "small_breast_prob" => p.small_breast_prob = parse(key, v)?,
            "smooth_kernel" => {
                self.smooth_kernel = if v == "auto" { None } else { Some(parse(key, v)?) };
            }
            "compensation" => self.prep.compensation = parse(key, v)?,
            "crop" => {
                self.prep.crop = if v == "none" { None } else { Some(parse::<Rect>(key, v)?) };
            }
            "remap_source" => self.prep.remap_source = parse::<RemapSource>(key, v)?,
            "arch" => {
                let archs: Vec<Arch> = v
                    .split(',')
                    .map(|a| parse(key, a.trim()))
                    .collect::<Result<_, _>>()?;
                let unique: BTreeSet<Arch> = archs.iter().copied().collect();
                if archs.is_empty() || unique.len() != archs.len() {
                    return Err(format!("bad value `{v}` for arch: expected distinct names"));
                }
                self.archs = archs;
            }
            "depth" => self.net.depth = parse(key, v)?,
            "base_width" => self.net.base_width = parse(key, v)?,
            "epochs" => self.train.epochs = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "learning_rate" => self.train.learning_rate = parse(key, v)?,
            "beta1" => self.train.beta1 = parse(key, v)?,
            "beta2" => self.train.beta2 = parse(key, v)?,
            "epsilon" => self.train.epsilon = parse(key, v)?,
            "single_thread" => self.single_thread = parse_bool(key, v)?,
            "subjects_dir" => self.subjects_dir = Some(PathBuf::from(v)),
            "input" => self.input = Some(PathBuf::from(v)),
            "pairs" => self.pairs = Some(PathBuf::from(v)),
            "out" => self.out = Some(PathBuf::from(v)),
            _ => return Err(format!("unknown config key `{key}`")),
        }
        Ok(())
    }

    /// Current value of `key` in the same syntax [`RunConfig::set`] accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        let p = &self.phantom;
        Some(match key {
            "seed" => self.seed.to_string(),
            "patients" => self.patients.to_string(),
            "volunteers" => self.volunteers.to_string(),
            "image_hw" => p.image_hw.to_string(),
            "frames" => p.frames_per_subject.to_string(),
            "background_level" => p.background_level.to_string(),
            "body_level" => p.body_level.to_string(),
            "breast_excess" => p.breast_excess.to_string(),
            "hotspot_excess" => p.hotspot_excess.to_string(),
            "noise_sigma" => p.noise_sigma.to_string(),
            "cooldown_rate" => p.cooldown_rate.to_string(),
            "small_breast_prob" => p.small_breast_prob.to_string(),
            "smooth_kernel" => self.smooth_kernel.map_or_else(|| "auto".into(), |k| k.to_string()),
            "compensation" => self.prep.compensation.to_string(),
            "crop" => self.prep.crop.as_ref().map_or_else(|| "none".into(), |r| r.to_string()),
            "remap_source" => self.prep.remap_source.to_string(),
            "arch" => self.archs.iter().map(|a| a.name()).collect::<Vec<_>>().join(","),
            "depth" => self.net.depth.to_string(),
            "base_width" => self.net.base_width.to_string(),
            "epochs" => self.train.epochs.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "learning_rate" => self.train.learning_rate.to_string(),
            "beta1" => self.train.beta1.to_string(),
            "beta2" => self.train.beta2.to_string(),
            "epsilon" => self.train.epsilon.to_string(),
            "single_thread" => self.single_thread.to_string(),
            "subjects_dir" => show_path(&self.subjects_dir),
            "input" => show_path(&self.input),
            "pairs" => show_path(&self.pairs),
            "out" => show_path(&self.out),
            _ => return None,
        })
    }

    /// Applies a config file. Blank lines and lines starting with `#` are
    /// skipped; a key may appear once.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = |msg: String| format!("{origin}:{}: {msg}", n + 1);
            let Some((key, value)) = line.split_once('=') else {
                return Err(at(format!("expected key=value, got `{line}`")));
            };
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(at(format!("duplicate key `{key}`")));
            }
            self.set(key, value).map_err(at)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), String> {
        let text = fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// `key=value` lines for `keys`, in that order.
    pub fn render(&self, keys: &[&str]) -> String {
        keys.iter()
            .map(|k| format!("{k}={}\n", self.get(k).expect("known key")))
            .collect()
    }

    pub fn preprocess_for(&self, height: usize) -> PreprocessConfig {
        PreprocessConfig {
            smooth_kernel: self.smooth_kernel.unwrap_or_else(|| crate::prep::desk_scale_kernel(height)),
            ..self.prep.clone()
        }
    }
}
