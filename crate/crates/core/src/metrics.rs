//! Known/unknown prediction rule with optional five-crop averaging, and the
//! two reported metrics: accuracy on ground-truth-known samples and AUROC
//! for ranking unknowns above knowns.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::data::{center_crop, five_crops, Image, Label, LabeledImage};
use crate::error::{Error, Result};
use crate::net::{
    argmax, closed_forward, extractor_forward, open_forward, scores_from_row, stack_images,
    ModelParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicted {
    Class(usize),
    Unknown,
}

impl Predicted {
    pub fn to_code(self) -> i64 {
        match self {
            Predicted::Class(c) => c as i64,
            Predicted::Unknown => -1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub predicted: Predicted,
    pub unknown_score: f64,
    /// Closed-set softmax probabilities averaged over crops.
    pub closed_probs: Vec<f64>,
    /// One-vs-all known probabilities averaged over crops.
    pub known_probs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub threshold: f64,
    pub use_five_crop: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            use_five_crop: true,
        }
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Averages per-crop outputs in probability space, then decides:
/// `y = argmax(mean closed)`, `score = 1 - mean known[y]`, unknown iff
/// `score >= threshold`.
pub fn aggregate_crops(closed: &[Vec<f64>], known: &[Vec<f64>], threshold: f64) -> Prediction {
    // shifted by the first crop so identical crops average to themselves exactly
    let mean = |rows: &[Vec<f64>]| -> Vec<f64> {
        let n = rows.len() as f64;
        let first = &rows[0];
        let mut dev = vec![0.0; first.len()];
        for r in &rows[1..] {
            dev.iter_mut().zip(r).zip(first).for_each(|((d, v), f)| *d += v - f);
        }
        first.iter().zip(dev).map(|(f, d)| f + d / n).collect()
    };
    let closed_probs = mean(closed);
    let known_probs = mean(known);
    let class = argmax(&closed_probs);
    let unknown_score = 1.0 - known_probs[class];
    let predicted = if unknown_score >= threshold {
        Predicted::Unknown
    } else {
        Predicted::Class(class)
    };
    Prediction {
        predicted,
        unknown_score,
        closed_probs,
        known_probs,
    }
}

fn check_params(params: &ModelParams) -> Result<()> {
    if !params.is_finite() {
        return Err(Error::NonFinite {
            what: "model parameters".into(),
            stage: 0,
            step: 0,
        });
    }
    Ok(())
}

const PREDICT_CHUNK: usize = 256;

/// Batched [`predict`]; every image yields one prediction.
pub fn predict_many(
    params: &ModelParams,
    images: &[&Image],
    crop_side: usize,
    opts: &EvalOptions,
) -> Result<Vec<Prediction>> {
    check_params(params)?;
    let per_image = if opts.use_five_crop { 5 } else { 1 };
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(PREDICT_CHUNK) {
        let mut crops = Vec::with_capacity(chunk.len() * per_image);
        for img in chunk {
            if opts.use_five_crop {
                crops.extend(five_crops(img, crop_side)?);
            } else {
                crops.push(center_crop(img, crop_side)?);
            }
        }
        let x = stack_images(&crops, params.dims().input)?;
        let (features, _) = extractor_forward(params, x);
        let closed = closed_forward(params, &features.view());
        let open = open_forward(params, &features.view());
        for i in 0..chunk.len() {
            let rows = i * per_image..(i + 1) * per_image;
            let closed_rows: Vec<Vec<f64>> = rows
                .clone()
                .map(|r| softmax(&closed.index_axis(Axis(0), r).to_vec()))
                .collect();
            let known_rows: Vec<Vec<f64>> = rows
                .map(|r| scores_from_row(open.index_axis(Axis(0), r)).known_prob().to_vec())
                .collect();
            out.push(aggregate_crops(&closed_rows, &known_rows, opts.threshold));
        }
    }
    Ok(out)
}

pub fn predict(
    params: &ModelParams,
    image: &Image,
    crop_side: usize,
    opts: &EvalOptions,
) -> Result<Prediction> {
    Ok(predict_many(params, &[image], crop_side, opts)?.remove(0))
}

/// Percentage of ground-truth-known samples predicted as their class.
/// Samples whose truth is not a class are ignored; predicting `Unknown` for a
/// known sample counts as an error.
pub fn accuracy_known(predictions: &[Predicted], truth: &[Label]) -> Result<f64> {
    let (correct, total) = known_counts(predictions, truth)?;
    if total == 0 {
        return Err(Error::Degenerate("no ground-truth-known samples".into()));
    }
    Ok(100.0 * correct as f64 / total as f64)
}

fn known_counts(predictions: &[Predicted], truth: &[Label]) -> Result<(usize, usize)> {
    if predictions.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: truth.len(),
        });
    }
    let mut correct = 0;
    let mut total = 0;
    for (p, t) in predictions.iter().zip(truth) {
        if let Label::Class(c) = t {
            total += 1;
            if *p == Predicted::Class(*c) {
                correct += 1;
            }
        }
    }
    Ok((correct, total))
}

/// Probability that a random unknown outscores a random known, ties counting
/// one half. Computed from midranks in `O(n log n)`.
pub fn auroc(scores: &[f64], is_unknown: &[bool]) -> Result<f64> {
    if scores.len() != is_unknown.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: is_unknown.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Degenerate("NaN score".into()));
    }
    let n_unknown = is_unknown.iter().filter(|&&u| u).count();
    let n_known = scores.len() - n_unknown;
    if n_unknown == 0 || n_known == 0 {
        return Err(Error::Degenerate(format!(
            "AUROC needs both classes ({n_unknown} unknown, {n_known} known)"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start..end (1-based: start+1..=end) share their mean
        let midrank = (start + 1 + end) as f64 / 2.0;
        let unknown_in_group = order[start..end].iter().filter(|&&i| is_unknown[i]).count();
        rank_sum += midrank * unknown_in_group as f64;
        start = end;
    }
    let nu = n_unknown as f64;
    let u_stat = rank_sum - nu * (nu + 1.0) / 2.0;
    Ok(u_stat / (nu * n_known as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub known_correct: usize,
    pub known_total: usize,
    pub unknown_total: usize,
    /// Ground-truth unknowns predicted as unknown.
    pub unknown_rejected: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassBreakdown {
    pub class: usize,
    pub correct: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Percentage in `[0, 100]`.
    pub acc: f64,
    /// In `[0, 1]`.
    pub auroc: f64,
    /// Closed-set argmax accuracy on known samples, ignoring rejection.
    pub closed_acc: f64,
    pub counts: Counts,
    pub threshold: f64,
    pub five_crop: bool,
    pub per_class: Vec<ClassBreakdown>,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str =
        "acc,auroc,closed_acc,known_correct,known_total,unknown_total,unknown_rejected,threshold,five_crop";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.acc,
            self.auroc,
            self.closed_acc,
            self.counts.known_correct,
            self.counts.known_total,
            self.counts.unknown_total,
            self.counts.unknown_rejected,
            self.threshold,
            self.five_crop
        )
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Predictions plus the report computed from them.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub predictions: Vec<Prediction>,
    pub truth: Vec<Label>,
}

impl Evaluation {
    /// `id,unknown_score,predicted,ground_truth`, with -1 for unknown.
    pub fn scores_csv(&self) -> String {
        let mut out = String::from("id,unknown_score,predicted,ground_truth\n");
        for (i, (p, t)) in self.predictions.iter().zip(&self.truth).enumerate() {
            let _ = writeln!(
                out,
                "{i},{},{},{}",
                p.unknown_score,
                p.predicted.to_code(),
                t.to_code()
            );
        }
        out
    }
}

pub fn evaluate(
    params: &ModelParams,
    test: &[LabeledImage],
    crop_side: usize,
    opts: &EvalOptions,
) -> Result<Evaluation> {
    let images: Vec<&Image> = test.iter().map(|x| &x.image).collect();
    let predictions = predict_many(params, &images, crop_side, opts)?;
    let truth: Vec<Label> = test.iter().map(|x| x.label).collect();
    if truth.contains(&Label::Hidden) {
        return Err(Error::InvalidArgument(
            "evaluation set has hidden labels".into(),
        ));
    }

    let predicted: Vec<Predicted> = predictions.iter().map(|p| p.predicted).collect();
    let acc = accuracy_known(&predicted, &truth)?;
    let (known_correct, known_total) = known_counts(&predicted, &truth)?;
    let scores: Vec<f64> = predictions.iter().map(|p| p.unknown_score).collect();
    let flags: Vec<bool> = truth.iter().map(|t| *t == Label::Unknown).collect();
    let auroc = auroc(&scores, &flags)?;

    let unknown_total = flags.iter().filter(|&&u| u).count();
    let unknown_rejected = predicted
        .iter()
        .zip(&flags)
        .filter(|(p, &u)| u && **p == Predicted::Unknown)
        .count();

    let mut classes: Vec<usize> = truth.iter().filter_map(|t| t.class()).collect();
    classes.sort_unstable();
    classes.dedup();
    let per_class = classes
        .into_iter()
        .map(|class| {
            let mut b = ClassBreakdown {
                class,
                correct: 0,
                total: 0,
            };
            for (p, t) in predicted.iter().zip(&truth) {
                if *t == Label::Class(class) {
                    b.total += 1;
                    b.correct += usize::from(*p == Predicted::Class(class));
                }
            }
            b
        })
        .collect();

    let closed_hits = predictions
        .iter()
        .zip(&truth)
        .filter(|(p, t)| t.class().is_some_and(|c| argmax(&p.closed_probs) == c))
        .count();
    let closed_acc = 100.0 * closed_hits as f64 / known_total as f64;

    Ok(Evaluation {
        report: MetricsReport {
            acc,
            auroc,
            closed_acc,
            counts: Counts {
                known_correct,
                known_total,
                unknown_total,
                unknown_rejected,
            },
            threshold: opts.threshold,
            five_crop: opts.use_five_crop,
            per_class,
        },
        predictions,
        truth,
    })
}
