//! Exact Shapley attributions for stump ensembles.
//!
//! Every stump reads a single feature, so the ensemble margin is a sum of
//! per-feature functions. Under background-mean (interventional)
//! marginalization the Shapley value of a feature is then just its summed
//! leaf values minus their background means; no coalition enumeration is
//! needed. Attributions are on the margin (log-odds) scale.

use std::cmp::Ordering;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boosting::{logit, StumpEnsemble};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapExplanation {
    /// Mean background margin.
    pub base_value: f64,
    /// Per-feature contribution, aligned with the model's feature names.
    pub contributions: Vec<f64>,
    pub margin: f64,
}

impl ShapExplanation {
    pub fn residual(&self) -> f64 {
        self.base_value + self.contributions.iter().sum::<f64>() - self.margin
    }
}

/// Model plus per-stump background statistics.
pub struct ShapExplainer<'m> {
    model: &'m StumpEnsemble,
    /// Mean leaf value of each stump over the background rows.
    stump_means: Vec<f64>,
    base_value: f64,
}

impl<'m> ShapExplainer<'m> {
    pub fn new(model: &'m StumpEnsemble, background: &FeatureMatrix) -> Result<Self> {
        if background.n_rows() == 0 {
            return Err(Error::InvalidArgument("background is empty".into()));
        }
        if background.names() != model.feature_names.as_slice() {
            return Err(Error::InvalidArgument(
                "background columns differ from the model's feature names".into(),
            ));
        }
        let n = background.n_rows() as f64;
        let stump_means: Vec<f64> = model
            .stumps
            .iter()
            .map(|s| background.column(s.feature).map(|v| s.leaf(v)).sum::<f64>() / n)
            .collect();
        let base_value = logit(model.base_score) + stump_means.iter().sum::<f64>();
        Ok(Self {
            model,
            stump_means,
            base_value,
        })
    }

    pub fn base_value(&self) -> f64 {
        self.base_value
    }

    pub fn explain_row(&self, row: &[Option<f64>]) -> Result<ShapExplanation> {
        let margin = self.model.predict_margin(row)?;
        let mut contributions = vec![0.0; self.model.n_features()];
        for (s, mean) in self.model.stumps.iter().zip(&self.stump_means) {
            contributions[s.feature] += s.leaf(row[s.feature]) - mean;
        }
        Ok(ShapExplanation {
            base_value: self.base_value,
            contributions,
            margin,
        })
    }
}

pub fn explain_row(
    model: &StumpEnsemble,
    row: &[Option<f64>],
    background: &FeatureMatrix,
) -> Result<ShapExplanation> {
    ShapExplainer::new(model, background)?.explain_row(row)
}

/// Deterministic subsample of at most `max_rows` background rows, kept in
/// their original order.
pub fn background_sample(matrix: &FeatureMatrix, max_rows: usize, seed: u64) -> Result<FeatureMatrix> {
    if matrix.n_rows() <= max_rows {
        return Ok(matrix.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = sample(&mut rng, matrix.n_rows(), max_rows).into_vec();
    rows.sort_unstable();
    matrix.select_rows(&rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureShap {
    pub feature: String,
    pub mean_abs_shap: f64,
    /// 1 for the most influential feature.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapRecord {
    pub sample: usize,
    pub feature: String,
    pub value: Option<f64>,
    pub shap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapSummary {
    pub base_value: f64,
    /// Sorted by descending mean |shap|, ties by feature name.
    pub ranking: Vec<FeatureShap>,
    /// One record per (sample, feature), samples in dataset order.
    pub records: Vec<ShapRecord>,
}

impl ShapSummary {
    pub fn rank_of(&self, feature: &str) -> Option<usize> {
        self.ranking.iter().find(|f| f.feature == feature).map(|f| f.rank)
    }
}

/// Explains every row of `dataset` and ranks features by mean absolute
/// contribution.
pub fn summarize(
    model: &StumpEnsemble,
    dataset: &FeatureMatrix,
    background: &FeatureMatrix,
) -> Result<ShapSummary> {
    if dataset.n_rows() == 0 {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    let explainer = ShapExplainer::new(model, background)?;
    let names = &model.feature_names;
    let mut abs_sum = vec![0.0; names.len()];
    let mut records = Vec::with_capacity(dataset.n_rows() * names.len());
    for (i, row) in dataset.rows().enumerate() {
        let e = explainer.explain_row(row)?;
        for (j, &c) in e.contributions.iter().enumerate() {
            abs_sum[j] += c.abs();
            records.push(ShapRecord {
                sample: i,
                feature: names[j].clone(),
                value: row[j],
                shap: c,
            });
        }
    }
    let n = dataset.n_rows() as f64;
    let mut ranking: Vec<FeatureShap> = names
        .iter()
        .zip(&abs_sum)
        .map(|(name, s)| FeatureShap {
            feature: name.clone(),
            mean_abs_shap: s / n,
            rank: 0,
        })
        .collect();
    ranking.sort_by(|a, b| {
        b.mean_abs_shap
            .partial_cmp(&a.mean_abs_shap)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.feature.cmp(&b.feature))
    });
    for (k, f) in ranking.iter_mut().enumerate() {
        f.rank = k + 1;
    }
    Ok(ShapSummary {
        base_value: explainer.base_value(),
        ranking,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boosting::{BoostConfig, Side, Stump};

    fn names(d: usize) -> Vec<String> {
        (0..d).map(|j| format!("f{j}")).collect()
    }

    fn stump(feature: usize, threshold: f64, left: f64, right: f64) -> Stump {
        Stump {
            feature,
            threshold,
            left_value: left,
            right_value: right,
            default_side: Side::Left,
            gain: 1.0,
        }
    }

    #[test]
    fn symmetric_background_single_stump() {
        let mut model = StumpEnsemble::empty(0.5, names(2), BoostConfig::default());
        model.stumps.push(stump(0, 0.0, -1.0, 1.0));
        let bg = FeatureMatrix::new(names(2), vec![vec![Some(-1.0), Some(0.0)], vec![Some(1.0), Some(5.0)]])
            .unwrap();
        let e = explain_row(&model, &[Some(2.0), Some(3.0)], &bg).unwrap();
        assert_eq!(e.contributions, vec![1.0, 0.0]);
        assert_eq!(e.base_value, 0.0);
        assert_eq!(e.margin, 1.0);
    }

    #[test]
    fn empty_ensemble_has_no_attribution() {
        let model = StumpEnsemble::empty(0.2, names(3), BoostConfig::default());
        let bg = FeatureMatrix::new(names(3), vec![vec![Some(1.0), None, Some(2.0)]]).unwrap();
        let e = explain_row(&model, &[None, None, None], &bg).unwrap();
        assert_eq!(e.contributions, vec![0.0; 3]);
        assert_eq!(e.base_value, logit(0.2));
        let s = summarize(&model, &bg, &bg).unwrap();
        assert!(s.ranking.iter().all(|f| f.mean_abs_shap == 0.0));
        assert_eq!(s.ranking[0].feature, "f0");
    }

    #[test]
    fn mismatched_background_rejected() {
        let model = StumpEnsemble::empty(0.2, names(2), BoostConfig::default());
        let bg = FeatureMatrix::new(names(1), vec![vec![None]]).unwrap();
        assert!(explain_row(&model, &[None, None], &bg).is_err());
    }

    #[test]
    fn missing_values_route_by_default_side() {
        let mut model = StumpEnsemble::empty(0.5, names(1), BoostConfig::default());
        model.stumps.push(Stump {
            default_side: Side::Right,
            ..stump(0, 0.0, -1.0, 3.0)
        });
        let bg = FeatureMatrix::new(names(1), vec![vec![None], vec![Some(-1.0)]]).unwrap();
        let e = explain_row(&model, &[None], &bg).unwrap();
        assert_eq!(e.base_value, 1.0);
        assert_eq!(e.contributions, vec![2.0]);
    }

    #[test]
    fn background_sample_is_deterministic_and_bounded() {
        let rows: Vec<Vec<Option<f64>>> = (0..100).map(|i| vec![Some(i as f64)]).collect();
        let m = FeatureMatrix::new(names(1), rows).unwrap();
        let a = background_sample(&m, 10, 42).unwrap();
        assert_eq!(a.n_rows(), 10);
        assert_eq!(a, background_sample(&m, 10, 42).unwrap());
        assert_eq!(background_sample(&m, 1000, 42).unwrap(), m);
    }
}
