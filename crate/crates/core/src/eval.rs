//! Segmentation scores, leave-one-subject-out planning and reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nets::Model;
use crate::phantom::{natural_cmp, SubjectKind};
use crate::prep::Gray8Frame;
use crate::train::{image_batch, mask_batch};

fn same_len(a: &[f64], b: &[f64], op: &'static str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op,
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    Ok(())
}

/// Continuous Tanimoto coefficient `Σab / (Σa² + Σb² − Σab)`.
///
/// Two all-zero inputs are identical and score 1.
pub fn tanimoto(a: &[f64], b: &[f64]) -> Result<f64> {
    same_len(a, b, "tanimoto")?;
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    let denom = aa + bb - ab;
    if denom <= 0.0 {
        return Ok(1.0);
    }
    Ok((ab / denom).clamp(0.0, 1.0))
}

/// Intersection over union after binarizing both inputs with `v > threshold`.
/// Two empty masks score 1.
pub fn iou(a: &[f64], b: &[f64], threshold: f64) -> Result<f64> {
    same_len(a, b, "iou")?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        let (p, q) = (x > threshold, y > threshold);
        inter += usize::from(p && q);
        union += usize::from(p || q);
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Rounds to the 6 decimals printed in the CSV reports, so every mean
/// recomputes exactly from the written rows.
pub fn quantize(v: f64) -> f64 {
    format!("{v:.6}").parse().expect("formatted float parses")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubjectInfo {
    pub id: String,
    pub kind: SubjectKind,
    pub frame_count: usize,
}

/// Frame `frame` of subject `subject` (indices into the planned list).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FrameRef {
    pub subject: usize,
    pub frame: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub index: usize,
    pub test_subject: usize,
    pub test_id: String,
    pub test: Vec<FrameRef>,
    pub train: Vec<FrameRef>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldPlan {
    /// Subjects sorted by id; `FrameRef::subject` indexes this list.
    pub subjects: Vec<SubjectInfo>,
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    /// Confirms the test sets partition the dataset and each train set is
    /// its complement.
    pub fn check_partition(&self) -> Result<()> {
        let all: Vec<FrameRef> = self
            .subjects
            .iter()
            .enumerate()
            .flat_map(|(s, info)| (0..info.frame_count).map(move |f| FrameRef { subject: s, frame: f }))
            .collect();
        let mut seen: Vec<FrameRef> = self.folds.iter().flat_map(|f| f.test.iter().copied()).collect();
        seen.sort_unstable();
        if seen != all {
            return Err(Error::InvalidArgument("test sets do not partition the dataset".into()));
        }
        if self.folds.len() != self.subjects.len() {
            return Err(Error::InvalidArgument("fold count differs from subject count".into()));
        }
        for fold in &self.folds {
            let mut joined: Vec<FrameRef> = fold.test.iter().chain(&fold.train).copied().collect();
            joined.sort_unstable();
            if joined != all || fold.train.iter().any(|r| r.subject == fold.test_subject) {
                return Err(Error::InvalidArgument(format!("fold {} is not train/test complementary", fold.index)));
            }
        }
        Ok(())
    }
}

pub fn loocv_plan(subjects: &[SubjectInfo]) -> Result<FoldPlan> {
    if subjects.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "leave-one-out needs at least 2 subjects, got {}",
            subjects.len()
        )));
    }
    let mut sorted = subjects.to_vec();
    sorted.sort_by(|a, b| natural_cmp(&a.id, &b.id));
    if let Some(w) = sorted.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(Error::InvalidArgument(format!("duplicate subject id {}", w[0].id)));
    }
    let refs = |s: usize| (0..sorted[s].frame_count).map(move |f| FrameRef { subject: s, frame: f });
    let folds = (0..sorted.len())
        .map(|t| Fold {
            index: t,
            test_subject: t,
            test_id: sorted[t].id.clone(),
            test: refs(t).collect(),
            train: (0..sorted.len()).filter(|&s| s != t).flat_map(refs).collect(),
        })
        .collect();
    Ok(FoldPlan { subjects: sorted, folds })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameScore {
    pub subject_id: String,
    pub kind: SubjectKind,
    pub model: String,
    pub frame: usize,
    pub tanimoto: f64,
    pub iou: f64,
}

/// Scores the raw sigmoid output of `model` on every frame of one subject.
pub fn evaluate(
    model: &Model,
    model_name: &str,
    subject: &SubjectInfo,
    images: &[Gray8Frame],
    mask: &Gray8Frame,
) -> Result<Vec<FrameScore>> {
    let truth = mask_batch(&[mask])?;
    let mut scores = Vec::with_capacity(images.len());
    for (frame, image) in images.iter().enumerate() {
        let pred = model.predict(&image_batch(&[image])?)?;
        if pred.len() != truth.len() {
            return Err(Error::ShapeMismatch {
                op: "evaluate",
                left: pred.shape().to_vec(),
                right: truth.shape().to_vec(),
            });
        }
        scores.push(FrameScore {
            subject_id: subject.id.clone(),
            kind: subject.kind,
            model: model_name.to_string(),
            frame,
            tanimoto: quantize(tanimoto(pred.data(), truth.data())?),
            iou: quantize(iou(pred.data(), truth.data(), 0.5)?),
        });
    }
    Ok(scores)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectSummary {
    pub subject_id: String,
    pub kind: SubjectKind,
    pub model: String,
    pub frames: usize,
    pub tanimoto: f64,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSummary {
    pub model: String,
    pub subjects: usize,
    /// Mean over subjects of the per-subject means.
    pub tanimoto: f64,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub frames: Vec<FrameScore>,
    pub subjects: Vec<SubjectSummary>,
    pub models: Vec<ModelSummary>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Canonical order: model name, then natural subject id, then frame.
fn sort_scores(scores: &mut [FrameScore]) {
    scores.sort_by(|a, b| {
        a.model
            .cmp(&b.model)
            .then_with(|| natural_cmp(&a.subject_id, &b.subject_id))
            .then(a.frame.cmp(&b.frame))
    });
}

pub fn aggregate(scores: &[FrameScore]) -> EvalReport {
    let mut frames = scores.to_vec();
    sort_scores(&mut frames);

    let mut subjects = Vec::new();
    for group in frames.chunk_by(|a, b| a.model == b.model && a.subject_id == b.subject_id) {
        let first = &group[0];
        subjects.push(SubjectSummary {
            subject_id: first.subject_id.clone(),
            kind: first.kind,
            model: first.model.clone(),
            frames: group.len(),
            tanimoto: mean(group.iter().map(|s| s.tanimoto)),
            iou: mean(group.iter().map(|s| s.iou)),
        });
    }
    let models = subjects
        .chunk_by(|a, b| a.model == b.model)
        .map(|group| ModelSummary {
            model: group[0].model.clone(),
            subjects: group.len(),
            tanimoto: mean(group.iter().map(|s| s.tanimoto)),
            iou: mean(group.iter().map(|s| s.iou)),
        })
        .collect();
    EvalReport { frames, subjects, models }
}

pub const FRAMES_HEADER: &str = "subject_id,kind,model,frame,tanimoto,iou";
pub const SUMMARY_HEADER: &str = "model,subjects,mean_tanimoto,mean_iou";

impl EvalReport {
    pub fn model(&self, name: &str) -> Option<&ModelSummary> {
        self.models.iter().find(|m| m.model == name)
    }

    pub fn frames_csv(&self) -> String {
        let mut out = format!("{FRAMES_HEADER}\n");
        for s in &self.frames {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6},{:.6}",
                s.subject_id, s.kind, s.model, s.frame, s.tanimoto, s.iou
            );
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = format!("{SUMMARY_HEADER}\n");
        for m in &self.models {
            let _ = writeln!(out, "{},{},{:.6},{:.6}", m.model, m.subjects, m.tanimoto, m.iou);
        }
        out
    }

    /// One row per subject, one Tanimoto column per model.
    pub fn per_subject_csv(&self) -> String {
        let models: Vec<&str> = self.models.iter().map(|m| m.model.as_str()).collect();
        type Row = (SubjectKind, Vec<Option<f64>>);
        let mut rows: BTreeMap<(usize, String), Row> = BTreeMap::new();
        let mut order: Vec<String> = self.subjects.iter().map(|s| s.subject_id.clone()).collect();
        order.sort_by(|a, b| natural_cmp(a, b));
        order.dedup();
        for s in &self.subjects {
            let rank = order.iter().position(|id| id == &s.subject_id).expect("id listed");
            let col = models.iter().position(|m| *m == s.model).expect("model listed");
            let entry = rows
                .entry((rank, s.subject_id.clone()))
                .or_insert_with(|| (s.kind, vec![None; models.len()]));
            entry.1[col] = Some(s.tanimoto);
        }
        let mut out = String::from("subject_id,kind");
        for m in &models {
            let _ = write!(out, ",{m}");
        }
        out.push('\n');
        for ((_, id), (kind, vals)) in rows {
            let _ = write!(out, "{id},{kind}");
            for v in vals {
                match v {
                    Some(v) => {
                        let _ = write!(out, ",{v:.6}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write_frames_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_text(path.as_ref(), &self.frames_csv())
    }

    pub fn write_summary_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_text(path.as_ref(), &self.summary_csv())
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn parse_frames_csv(text: &str) -> Result<Vec<FrameScore>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(FRAMES_HEADER) {
        return Err(Error::format("frames CSV", format!("expected header `{FRAMES_HEADER}`")));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let bad = || Error::format("frames CSV", format!("bad row `{l}`"));
            let cols: Vec<&str> = l.split(',').map(str::trim).collect();
            let [id, kind, model, frame, t, i] = cols[..] else {
                return Err(bad());
            };
            Ok(FrameScore {
                subject_id: id.to_string(),
                kind: kind.parse().map_err(|_| bad())?,
                model: model.to_string(),
                frame: frame.parse().map_err(|_| bad())?,
                tanimoto: t.parse().map_err(|_| bad())?,
                iou: i.parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn read_frames_csv(path: impl AsRef<Path>) -> Result<Vec<FrameScore>> {
    let path = path.as_ref();
    parse_frames_csv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}
