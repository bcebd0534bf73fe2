//! Detection scoring.
//!
//! Detections and ground truth are paired one-to-one by greedy nearest-first
//! matching within a radius; precision, recall and F-measure follow from the
//! matched counts, with every `0/0` defined as 0.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{AnnotatedImage, Annotation};
use crate::error::{Error, Result};
use crate::imaging::{extract_patch, PatchLabel};
use crate::logdetect::{detect_in_stack, response_stack, Detection, ScaleBank};
use crate::sda::{predict_many, SdaModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub detection: usize,
    pub annotation: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub pairs: Vec<MatchPair>,
}

/// Greedy one-to-one matching of points closer than `radius`.
///
/// Candidate pairs are taken in ascending distance (ties by detection index,
/// then annotation index) and accepted while both endpoints are free.
pub fn match_points(dets: &[(f64, f64)], gts: &[(f64, f64)], radius: f64) -> MatchResult {
    let mut candidates = Vec::new();
    for (i, d) in dets.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let dist = (d.0 - g.0).hypot(d.1 - g.1);
            if dist < radius {
                candidates.push(MatchPair {
                    detection: i,
                    annotation: j,
                    distance: dist,
                });
            }
        }
    }
    candidates.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then(a.detection.cmp(&b.detection))
            .then(a.annotation.cmp(&b.annotation))
    });
    let mut det_used = vec![false; dets.len()];
    let mut gt_used = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for c in candidates {
        if !det_used[c.detection] && !gt_used[c.annotation] {
            det_used[c.detection] = true;
            gt_used[c.annotation] = true;
            pairs.push(c);
        }
    }
    MatchResult {
        tp: pairs.len(),
        fp: dets.len() - pairs.len(),
        fn_: gts.len() - pairs.len(),
        pairs,
    }
}

pub fn match_detections(dets: &[Detection], gts: &[Annotation], radius: f64) -> Result<MatchResult> {
    if !(radius > 0.0) {
        return Err(Error::param("match_radius", "must be positive"));
    }
    let d: Vec<(f64, f64)> = dets.iter().map(|d| (d.x, d.y)).collect();
    let g: Vec<(f64, f64)> = gts.iter().map(|a| (a.x, a.y)).collect();
    Ok(match_points(&d, &g, radius))
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `(TP / (TP + FP), TP / (TP + FN))`.
pub fn precision_recall_counts(tp: usize, fp: usize, fn_: usize) -> (f64, f64) {
    (ratio(tp, tp + fp), ratio(tp, tp + fn_))
}

pub fn precision_recall(m: &MatchResult) -> (f64, f64) {
    precision_recall_counts(m.tp, m.fp, m.fn_)
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f_measure(precision: f64, recall: f64) -> Result<f64> {
    for (name, v) in [("precision", precision), ("recall", recall)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::param(name, format!("{v} outside [0, 1]")));
        }
    }
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl PrPoint {
    pub fn from_counts(threshold: f64, tp: usize, fp: usize, fn_: usize) -> Self {
        let (precision, recall) = precision_recall_counts(tp, fp, fn_);
        Self {
            threshold,
            precision,
            recall,
            f_measure: f_measure(precision, recall).expect("ratios lie in [0, 1]"),
            tp,
            fp,
            fn_,
        }
    }
}

/// The point with the highest F-measure (lowest threshold on ties).
pub fn best_f(curve: &[PrPoint]) -> Option<&PrPoint> {
    curve.iter().reduce(|best, p| if p.f_measure > best.f_measure { p } else { best })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub match_radius: f64,
    /// Side of the patches handed to the classifier.
    pub patch_side: usize,
}

/// Candidates of one image at the lowest threshold, with the classifier's verdict.
#[derive(Debug, Clone)]
pub struct ScoredDetections {
    pub detections: Vec<Detection>,
    /// `Some(label, particle probability)` when a classifier was applied.
    pub verdicts: Option<Vec<(PatchLabel, f64)>>,
}

impl ScoredDetections {
    /// Detections at `threshold` that the classifier (if any) keeps.
    pub fn kept(&self, threshold: f64) -> Vec<Detection> {
        self.detections
            .iter()
            .enumerate()
            .filter(|(i, d)| {
                d.response >= threshold
                    && self
                        .verdicts
                        .as_ref()
                        .is_none_or(|v| v[*i].0 == PatchLabel::Particle)
            })
            .map(|(_, d)| *d)
            .collect()
    }
}

/// Detects once at `min_threshold` and, optionally, classifies every candidate.
///
/// Detections at any higher threshold are the subset with `response >= τ`.
pub fn score_image(
    img: &AnnotatedImage,
    bank: &ScaleBank,
    min_threshold: f64,
    classifier: Option<&SdaModel>,
    patch_side: usize,
) -> Result<ScoredDetections> {
    let stack = response_stack(img.image.as_plane(), bank)?;
    let detections = detect_in_stack(&stack, min_threshold);
    let verdicts = classifier
        .map(|model| {
            let patches: Vec<_> = detections
                .iter()
                .map(|d| extract_patch(&img.image, (d.x, d.y), patch_side))
                .collect();
            predict_many(model, &patches)
        })
        .transpose()?;
    Ok(ScoredDetections {
        detections,
        verdicts,
    })
}

/// Precision/recall per threshold, pooled over all images, sorted by threshold.
///
/// With a classifier, candidates whose patch is classified as background are
/// dropped before matching.
pub fn pr_sweep(
    images: &[AnnotatedImage],
    bank: &ScaleBank,
    thresholds: &[f64],
    classifier: Option<&SdaModel>,
    opts: &SweepOptions,
) -> Result<Vec<PrPoint>> {
    if thresholds.is_empty() {
        return Err(Error::Empty("threshold list"));
    }
    if !(opts.match_radius > 0.0) {
        return Err(Error::param("match_radius", "must be positive"));
    }
    let mut sorted = thresholds.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let scored: Vec<ScoredDetections> = images
        .par_iter()
        .map(|img| score_image(img, bank, sorted[0], classifier, opts.patch_side))
        .collect::<Result<_>>()?;
    Ok(curve_from_scored(images, &scored, &sorted, opts.match_radius))
}

pub fn curve_from_scored(
    images: &[AnnotatedImage],
    scored: &[ScoredDetections],
    thresholds: &[f64],
    match_radius: f64,
) -> Vec<PrPoint> {
    thresholds
        .iter()
        .map(|&t| {
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for (img, s) in images.iter().zip(scored) {
                let kept = s.kept(t);
                let d: Vec<(f64, f64)> = kept.iter().map(|d| (d.x, d.y)).collect();
                let g: Vec<(f64, f64)> = img.annotations.iter().map(|a| (a.x, a.y)).collect();
                let m = match_points(&d, &g, match_radius);
                tp += m.tp;
                fp += m.fp;
                fn_ += m.fn_;
            }
            PrPoint::from_counts(t, tp, fp, fn_)
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub accuracy: Option<f64>,
    pub pr_curve: Vec<PrPoint>,
}

impl EvalReport {
    /// Report at the best-F operating point of `curve`.
    pub fn from_curve(curve: Vec<PrPoint>) -> Self {
        let best = best_f(&curve).copied();
        Self {
            precision: best.map_or(0.0, |b| b.precision),
            recall: best.map_or(0.0, |b| b.recall),
            f_measure: best.map_or(0.0, |b| b.f_measure),
            accuracy: None,
            pr_curve: curve,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample mean and standard deviation (n − 1 denominator; 0 for one value).
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("values to aggregate"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Ok(Self { mean, std })
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub repetitions: usize,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f_measure: MeanStd,
    pub accuracy: Option<MeanStd>,
    /// Pointwise mean curve, present when every report swept the same thresholds.
    pub mean_pr_curve: Option<Vec<(f64, MeanStd, MeanStd)>>,
}

pub fn aggregate(reports: &[EvalReport]) -> Result<AggregateReport> {
    if reports.is_empty() {
        return Err(Error::Empty("reports to aggregate"));
    }
    let col = |f: fn(&EvalReport) -> f64| -> Result<MeanStd> {
        MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>())
    };
    let accuracy = reports
        .iter()
        .map(|r| r.accuracy)
        .collect::<Option<Vec<f64>>>()
        .map(|v| MeanStd::of(&v))
        .transpose()?;
    let thresholds: Vec<f64> = reports[0].pr_curve.iter().map(|p| p.threshold).collect();
    let same_grid = !thresholds.is_empty()
        && reports.iter().all(|r| {
            r.pr_curve.len() == thresholds.len()
                && r.pr_curve.iter().zip(&thresholds).all(|(p, t)| p.threshold == *t)
        });
    let mean_pr_curve = same_grid
        .then(|| {
            thresholds
                .iter()
                .enumerate()
                .map(|(i, &t)| {
                    let p: Vec<f64> = reports.iter().map(|r| r.pr_curve[i].precision).collect();
                    let r: Vec<f64> = reports.iter().map(|r| r.pr_curve[i].recall).collect();
                    Ok((t, MeanStd::of(&p)?, MeanStd::of(&r)?))
                })
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    Ok(AggregateReport {
        repetitions: reports.len(),
        precision: col(|r| r.precision)?,
        recall: col(|r| r.recall)?,
        f_measure: col(|r| r.f_measure)?,
        accuracy,
        mean_pr_curve,
    })
}

/// `%g`-style rendering with `digits` significant digits.
pub fn format_sig(v: f64, digits: usize) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let digits = digits.max(1);
    let sci = format!("{:.*e}", digits - 1, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= digits as i32 {
        let m = trim_zeros(mantissa);
        format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{v:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn write_pr_curve_csv(curve: &[PrPoint], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("threshold,precision,recall,f_measure\n");
    for p in curve {
        out.push_str(&format!(
            "{},{},{},{}\n",
            format_sig(p.threshold, 6),
            format_sig(p.precision, 6),
            format_sig(p.recall, 6),
            format_sig(p.f_measure, 6)
        ));
    }
    write_text(path, &out)
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
