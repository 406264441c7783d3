//! Leave-one-subject-out experiment runner.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval::{aggregate, evaluate, loocv_plan, write_text, EvalReport, Fold, FoldPlan, FrameScore, SubjectInfo};
use crate::nets::{save_checkpoint, Arch, Model, NetConfig, ParamSet};
use crate::phantom::Subject;
use crate::prep::{preprocess, Gray8Frame, PreprocessConfig};
use crate::rng::derive_indexed;
use crate::train::{train, TrainConfig, TrainHistory, TrainPair};

/// A subject after preprocessing: its 8-bit frames and mask.
#[derive(Clone, Debug)]
pub struct PreparedSubject {
    pub info: SubjectInfo,
    pub images: Vec<Gray8Frame>,
    pub mask: Gray8Frame,
}

/// Runs the preprocessing pipeline on every frame. Cropping is left to the
/// caller because the networks need a fixed square input.
pub fn prepare(subjects: &[Subject], cfg: &PreprocessConfig) -> Result<Vec<PreparedSubject>> {
    if cfg.crop.is_some() {
        return Err(Error::config("crop changes the frame size and cannot be used for training"));
    }
    subjects
        .iter()
        .map(|s| {
            let images = s
                .frames
                .iter()
                .map(|f| preprocess(f, cfg).map(|p| p.image))
                .collect::<Result<Vec<_>>>()?;
            Ok(PreparedSubject {
                info: SubjectInfo {
                    id: s.subject_id.clone(),
                    kind: s.kind,
                    frame_count: images.len(),
                },
                images,
                mask: s.mask.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct LoocvConfig {
    pub archs: Vec<Arch>,
    /// Template for every fold; `arch` and `seed` are set per fold.
    pub net: NetConfig,
    /// Template for every fold; `seed` is set per fold.
    pub train: TrainConfig,
    pub seed: u64,
    pub single_thread: bool,
}

impl LoocvConfig {
    /// Parameter-init and shuffle seeds of fold `fold` for `arch`.
    pub fn fold_seeds(&self, arch: Arch, fold: usize) -> (u64, u64) {
        (
            derive_indexed(self.seed, &format!("init/{arch}"), fold as u64),
            derive_indexed(self.seed, &format!("train/{arch}"), fold as u64),
        )
    }
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub arch: Arch,
    pub fold: usize,
    pub subject_id: String,
    pub params: ParamSet,
    pub history: TrainHistory,
    pub scores: Vec<FrameScore>,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct LoocvOutcome {
    pub plan: FoldPlan,
    pub folds: Vec<FoldResult>,
    pub report: EvalReport,
    pub seconds: f64,
}

fn run_fold(
    arch: Arch,
    fold: &Fold,
    plan: &FoldPlan,
    data: &[PreparedSubject],
    cfg: &LoocvConfig,
) -> Result<FoldResult> {
    let start = Instant::now();
    let (init_seed, train_seed) = cfg.fold_seeds(arch, fold.index);
    let net = NetConfig {
        arch,
        seed: init_seed,
        ..cfg.net.clone()
    };
    let mut model = Model::from_config(&net)?;

    // plan indices refer to the id-sorted subject list
    let by_plan: Vec<&PreparedSubject> = plan
        .subjects
        .iter()
        .map(|info| data.iter().find(|d| d.info.id == info.id).expect("planned subject exists"))
        .collect();
    let pairs: Vec<TrainPair> = fold
        .train
        .iter()
        .map(|r| TrainPair {
            image: by_plan[r.subject].images[r.frame].clone(),
            mask: by_plan[r.subject].mask.clone(),
        })
        .collect();
    let tc = TrainConfig {
        seed: train_seed,
        ..cfg.train.clone()
    };
    let history = train(&mut model, &pairs, &tc)?;

    let test = by_plan[fold.test_subject];
    let scores = evaluate(&model, arch.name(), &test.info, &test.images, &test.mask)?;
    Ok(FoldResult {
        arch,
        fold: fold.index,
        subject_id: fold.test_id.clone(),
        params: model.params,
        history,
        scores,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Trains and scores one model per (architecture, held-out subject).
///
/// Folds run on the rayon pool unless `single_thread` is set. Every fold
/// draws its seeds from [`LoocvConfig::fold_seeds`], so results do not
/// depend on scheduling.
pub fn run_loocv(
    data: &[PreparedSubject],
    cfg: &LoocvConfig,
    on_fold: &(dyn Fn(&FoldResult) + Sync),
) -> Result<LoocvOutcome> {
    if cfg.archs.is_empty() {
        return Err(Error::config("no architecture selected"));
    }
    let start = Instant::now();
    let infos: Vec<SubjectInfo> = data.iter().map(|d| d.info.clone()).collect();
    let plan = loocv_plan(&infos)?;
    let jobs: Vec<(Arch, &Fold)> = cfg
        .archs
        .iter()
        .flat_map(|&a| plan.folds.iter().map(move |f| (a, f)))
        .collect();
    let job = |&(arch, fold): &(Arch, &Fold)| {
        let r = run_fold(arch, fold, &plan, data, cfg)?;
        on_fold(&r);
        Ok(r)
    };
    let folds: Vec<FoldResult> = if cfg.single_thread {
        jobs.iter().map(job).collect::<Result<_>>()?
    } else {
        jobs.par_iter().map(job).collect::<Result<_>>()?
    };
    let scores: Vec<FrameScore> = folds.iter().flat_map(|f| f.scores.iter().cloned()).collect();
    let report = aggregate(&scores);
    Ok(LoocvOutcome {
        plan,
        folds,
        report,
        seconds: start.elapsed().as_secs_f64(),
    })
}

impl LoocvOutcome {
    /// Writes `frames.csv`, `summary.csv`, `per_subject.csv`,
    /// `checkpoints/<model>_<subject>.tseg`, `history/<model>_<subject>.csv`
    /// and `timing.txt`. Everything except `timing.txt` is a pure function
    /// of the data and the config.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for sub in ["checkpoints", "history"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        write_text(&dir.join("frames.csv"), &self.report.frames_csv())?;
        write_text(&dir.join("summary.csv"), &self.report.summary_csv())?;
        write_text(&dir.join("per_subject.csv"), &self.report.per_subject_csv())?;
        for f in &self.folds {
            let stem = format!("{}_{}", f.arch.name(), f.subject_id);
            save_checkpoint(dir.join("checkpoints").join(format!("{stem}.tseg")), &f.params)?;
            f.history.write_loss_csv(dir.join("history").join(format!("{stem}.csv")))?;
        }
        write_text(&dir.join("timing.txt"), &self.timing_text())
    }

    /// One `model subject_id fold_seconds epoch_seconds` line per fold.
    pub fn timing_text(&self) -> String {
        let mut out = String::from("# model subject_id fold_seconds epoch_seconds\n");
        for f in &self.folds {
            out.push_str(&format!(
                "{} {} {:.3} {:.3}\n",
                f.arch.name(),
                f.subject_id,
                f.seconds,
                f.history.mean_seconds()
            ));
        }
        out
    }
}
