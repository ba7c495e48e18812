//! Discrimination, uncertainty, calibration and net-benefit metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boosting::StumpEnsemble;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

fn check_pairs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("scores contain NaN".into()));
    }
    Ok(())
}

/// Mann-Whitney AUROC: the fraction of (positive, negative) pairs where the
/// positive scores higher, with ties counting one half.
///
/// Sorts once and walks tie groups; the pair count is kept in doubled
/// integer units so the result is exact.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_pairs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    auroc_sorted(&order, scores, labels)
}

fn auroc_sorted(order: &[usize], scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (mut neg_below, mut n_pos, mut doubled) = (0u64, 0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut pos_g, mut neg_g) = (0u64, 0u64);
        // -0.0 and 0.0 compare equal and form one tie group
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                pos_g += 1;
            } else {
                neg_g += 1;
            }
            i += 1;
        }
        doubled += 2 * pos_g * neg_below + pos_g * neg_g;
        neg_below += neg_g;
        n_pos += pos_g;
    }
    if n_pos == 0 || neg_below == 0 {
        return Err(Error::UndefinedAuroc);
    }
    Ok(doubled as f64 / (2 * n_pos * neg_below) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AurocResult {
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_boot: usize,
    pub n_degenerate_resamples: usize,
}

/// Linear-interpolation percentile of sorted data, `q` in [0, 1].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Point AUROC with a percentile bootstrap interval.
///
/// Resample `i` draws from its own ChaCha stream `(seed, i)`, so the result
/// does not depend on how iterations are scheduled across threads.
/// Resamples lacking a class are skipped and counted.
pub fn bootstrap_auroc(
    scores: &[f64],
    labels: &[bool],
    n_boot: usize,
    alpha: f64,
    seed: u64,
) -> Result<AurocResult> {
    if n_boot == 0 {
        return Err(Error::InvalidArgument("n_boot must be positive".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument("alpha must lie in (0, 1)".into()));
    }
    let point = auroc(scores, labels)?;
    let n = scores.len();
    let resampled: Vec<Option<f64>> = (0..n_boot)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let picks: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let s: Vec<f64> = picks.iter().map(|&k| scores[k]).collect();
            let l: Vec<bool> = picks.iter().map(|&k| labels[k]).collect();
            auroc(&s, &l).ok()
        })
        .collect();

    let mut kept: Vec<f64> = resampled.into_iter().flatten().collect();
    let degenerate = n_boot - kept.len();
    if 2 * degenerate > n_boot {
        return Err(Error::UnstableBootstrap {
            degenerate,
            total: n_boot,
        });
    }
    kept.sort_by(f64::total_cmp);
    Ok(AurocResult {
        point,
        ci_low: percentile(&kept, alpha / 2.0),
        ci_high: percentile(&kept, 1.0 - alpha / 2.0),
        n_boot,
        n_degenerate_resamples: degenerate,
    })
}

/// Monotone non-decreasing step function from scores to probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotonicModel {
    pub breakpoints: Vec<f64>,
    pub values: Vec<f64>,
}

impl IsotonicModel {
    /// Value at the largest breakpoint not above `score`; scores outside the
    /// fitted range take the nearest end value.
    pub fn apply(&self, score: f64) -> f64 {
        let idx = self.breakpoints.partition_point(|&b| b <= score);
        self.values[idx.saturating_sub(1)]
    }

    pub fn apply_all(&self, scores: &[f64]) -> Vec<f64> {
        scores.iter().map(|&s| self.apply(s)).collect()
    }
}

/// Weighted least-squares monotone fit by pool-adjacent-violators.
///
/// Observations sharing an `x` are pooled first, so they receive one fitted
/// value. Returns one breakpoint per distinct `x`.
pub fn isotonic_regression(xs: &[f64], ys: &[f64], weights: Option<&[f64]>) -> Result<IsotonicModel> {
    if xs.len() != ys.len() || weights.is_some_and(|w| w.len() != xs.len()) {
        return Err(Error::InvalidArgument("isotonic inputs differ in length".into()));
    }
    if xs.is_empty() {
        return Err(Error::InvalidArgument("isotonic regression needs data".into()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("isotonic inputs must be finite".into()));
    }
    let weight = |i: usize| weights.map_or(1.0, |w| w[i]);
    if (0..xs.len()).any(|i| !(weight(i) > 0.0)) {
        return Err(Error::InvalidArgument("isotonic weights must be positive".into()));
    }

    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));

    // (x, weighted sum, weight) per distinct x
    let mut groups: Vec<(f64, f64, f64)> = Vec::new();
    for &i in &order {
        match groups.last_mut() {
            Some(g) if g.0 == xs[i] => {
                g.1 += weight(i) * ys[i];
                g.2 += weight(i);
            }
            _ => groups.push((xs[i], weight(i) * ys[i], weight(i))),
        }
    }

    // blocks of (weighted sum, weight, number of groups)
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(groups.len());
    for &(_, sum, w) in &groups {
        blocks.push((sum, w, 1));
        while blocks.len() > 1 {
            let (s1, w1, c1) = blocks[blocks.len() - 1];
            let (s0, w0, c0) = blocks[blocks.len() - 2];
            if s0 / w0 <= s1 / w1 {
                break;
            }
            blocks.pop();
            *blocks.last_mut().unwrap() = (s0 + s1, w0 + w1, c0 + c1);
        }
    }

    let values = blocks
        .iter()
        .flat_map(|&(s, w, c)| std::iter::repeat_n(s / w, c))
        .collect();
    Ok(IsotonicModel {
        breakpoints: groups.iter().map(|g| g.0).collect(),
        values,
    })
}

/// Isotonic calibrator mapping scores to event probabilities.
pub fn fit_isotonic(scores: &[f64], labels: &[bool]) -> Result<IsotonicModel> {
    check_pairs(scores, labels)?;
    if scores.len() < 2 {
        return Err(Error::InvalidArgument("isotonic calibration needs at least two samples".into()));
    }
    let ys: Vec<f64> = labels.iter().map(|&y| if y { 1.0 } else { 0.0 }).collect();
    isotonic_regression(scores, &ys, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub mean_pred: f64,
    pub obs_freq: f64,
    pub count: usize,
}

impl CalibrationBin {
    pub fn mid(&self) -> f64 {
        (self.lower + self.upper) / 2.0
    }
}

/// Reliability curve over equal-width bins; empty bins are omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub edges: Vec<f64>,
    pub bins: Vec<CalibrationBin>,
}

impl CalibrationCurve {
    pub fn max_deviation(&self) -> f64 {
        self.bins
            .iter()
            .map(|b| (b.obs_freq - b.mean_pred).abs())
            .fold(0.0, f64::max)
    }

    pub fn total_count(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }
}

/// Probabilities are clamped into [0, 1]; 1.0 falls in the last bin.
pub fn calibration_curve(probs: &[f64], labels: &[bool], n_bins: usize) -> Result<CalibrationCurve> {
    check_pairs(probs, labels)?;
    if n_bins == 0 {
        return Err(Error::InvalidArgument("calibration needs at least one bin".into()));
    }
    let edges: Vec<f64> = (0..=n_bins).map(|i| i as f64 / n_bins as f64).collect();
    let mut acc = vec![(0.0f64, 0usize, 0usize); n_bins];
    for (&p, &y) in probs.iter().zip(labels) {
        let p = p.clamp(0.0, 1.0);
        let b = ((p * n_bins as f64) as usize).min(n_bins - 1);
        acc[b].0 += p;
        acc[b].1 += y as usize;
        acc[b].2 += 1;
    }
    let bins = acc
        .iter()
        .enumerate()
        .filter(|(_, a)| a.2 > 0)
        .map(|(b, &(sum, pos, count))| CalibrationBin {
            lower: edges[b],
            upper: edges[b + 1],
            mean_pred: sum / count as f64,
            obs_freq: pos as f64 / count as f64,
            count,
        })
        .collect();
    Ok(CalibrationCurve { edges, bins })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionPoint {
    pub threshold: f64,
    pub nb_model: f64,
    pub nb_all: f64,
    pub nb_none: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionCurve {
    pub prevalence: f64,
    pub points: Vec<DecisionPoint>,
}

/// Net benefit per capita of acting on `tp` true and `fp` false positives at
/// threshold probability `t`.
pub fn net_benefit(tp: usize, fp: usize, n: usize, t: f64) -> f64 {
    let n = n as f64;
    tp as f64 / n - fp as f64 / n * (t / (1.0 - t))
}

/// Model net benefit at each threshold against treat-all and treat-none.
/// A sample is treated when its probability is at least the threshold.
pub fn decision_curve(probs: &[f64], labels: &[bool], thresholds: &[f64]) -> Result<DecisionCurve> {
    check_pairs(probs, labels)?;
    if probs.is_empty() {
        return Err(Error::InvalidArgument("decision curve needs data".into()));
    }
    if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(Error::InvalidArgument(format!("threshold {t} outside (0, 1)")));
    }
    let n = probs.len();
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = n - n_pos;
    let points = thresholds
        .iter()
        .map(|&t| {
            let (mut tp, mut fp) = (0, 0);
            for (&p, &y) in probs.iter().zip(labels) {
                if p >= t {
                    if y {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
            DecisionPoint {
                threshold: t,
                nb_model: net_benefit(tp, fp, n, t),
                nb_all: net_benefit(n_pos, n_neg, n, t),
                nb_none: 0.0,
            }
        })
        .collect();
    Ok(DecisionCurve {
        prevalence: n_pos as f64 / n as f64,
        points,
    })
}

/// Evenly spaced thresholds from `start` to `stop` inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdGrid {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        Self {
            start: 0.01,
            stop: 0.50,
            step: 0.01,
        }
    }
}

impl ThresholdGrid {
    pub fn values(&self) -> Result<Vec<f64>> {
        let ok = self.step > 0.0
            && self.start > 0.0
            && self.stop < 1.0
            && self.start <= self.stop;
        if !ok {
            return Err(Error::config(
                "evaluation.thresholds",
                "need 0 < start <= stop < 1 and step > 0",
            ));
        }
        let count = ((self.stop - self.start) / self.step + 1e-9).floor() as usize + 1;
        // rounded to 12 decimals so 0.01 + 2 * 0.01 prints as 0.03
        Ok((0..count)
            .map(|i| ((self.start + i as f64 * self.step) * 1e12).round() / 1e12)
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_boot: usize,
    pub alpha: f64,
    pub calibration_bins: usize,
    pub thresholds: ThresholdGrid,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_boot: 1000,
            alpha: 0.05,
            calibration_bins: 10,
            thresholds: ThresholdGrid::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_boot == 0 {
            return Err(Error::config("evaluation.n_boot", "must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config("evaluation.alpha", "must lie in (0, 1)"));
        }
        if self.calibration_bins == 0 {
            return Err(Error::config("evaluation.calibration_bins", "must be at least 1"));
        }
        self.thresholds.values().map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub label: String,
    pub n_pos: usize,
    pub n_neg: usize,
    pub auroc: AurocResult,
    pub calibration: CalibrationCurve,
    pub decision: DecisionCurve,
}

/// Scores the test fold: AUROC on raw probabilities, reliability and
/// decision curves on calibrated ones.
pub fn evaluate_label(
    label: &str,
    model: &StumpEnsemble,
    calibrator: &IsotonicModel,
    test: &FeatureMatrix,
    labels: &[bool],
    config: &EvalConfig,
    seed: u64,
) -> Result<EvaluationReport> {
    config.validate()?;
    let raw = model.predict_probas(test)?;
    if raw.len() != labels.len() {
        return Err(Error::InvalidArgument("test labels do not match rows".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(Error::DegenerateTarget(format!("test fold of {label} has one class")));
    }
    let auroc = bootstrap_auroc(&raw, labels, config.n_boot, config.alpha, seed)?;
    let calibrated = calibrator.apply_all(&raw);
    Ok(EvaluationReport {
        label: label.to_string(),
        n_pos,
        n_neg: labels.len() - n_pos,
        auroc,
        calibration: calibration_curve(&calibrated, labels, config.calibration_bins)?,
        decision: decision_curve(&calibrated, labels, &config.thresholds.values()?)?,
    })
}
