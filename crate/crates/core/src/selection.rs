//! Recursive feature elimination driven by total split gain.

use serde::{Deserialize, Serialize};

use crate::boosting::{train_model, BoostConfig, StumpEnsemble};
use crate::error::{Error, Result};
use crate::evaluate::auroc;
use crate::features::FeatureMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfeStep {
    pub active: Vec<String>,
    pub val_auroc: f64,
    /// Feature removed after this step; `None` on the last step.
    pub dropped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfeTrace {
    pub steps: Vec<RfeStep>,
    pub selected: Vec<String>,
    pub selected_auroc: f64,
}

impl RfeTrace {
    pub fn full_set_auroc(&self) -> f64 {
        self.steps[0].val_auroc
    }
}

#[derive(Debug, Clone)]
pub struct RfeResult {
    pub trace: RfeTrace,
    /// Model trained on the selected features.
    pub model: StumpEnsemble,
}

/// Trains on the active set, scores it on the validation fold, and drops
/// the feature with the least total gain (the later column on ties) until
/// `min_features` remain. The step with the highest validation AUROC wins,
/// the smaller set on ties.
pub fn run_rfe(
    train_x: &FeatureMatrix,
    train_y: &[bool],
    valid_x: &FeatureMatrix,
    valid_y: &[bool],
    config: &BoostConfig,
    min_features: usize,
) -> Result<RfeResult> {
    let d = train_x.n_cols();
    if min_features == 0 || min_features > d {
        return Err(Error::config(
            "rfe.min_features",
            format!("must lie in 1..={d}"),
        ));
    }
    if valid_x.names() != train_x.names() {
        return Err(Error::InvalidArgument("validation columns differ from training".into()));
    }
    let pos = valid_y.iter().filter(|&&y| y).count();
    if pos == 0 || pos == valid_y.len() {
        return Err(Error::DegenerateTarget("validation labels contain a single class".into()));
    }

    let mut active: Vec<usize> = (0..d).collect();
    let mut steps = Vec::with_capacity(d - min_features + 1);
    let mut best: Option<(f64, usize, StumpEnsemble)> = None;
    loop {
        let tx = train_x.select_columns(&active);
        let vx = valid_x.select_columns(&active);
        let model = train_model(&tx, train_y, config)?;
        let val_auroc = auroc(&model.predict_probas(&vx)?, valid_y)?;
        let names: Vec<String> = tx.names().to_vec();
        log::debug!("rfe step {} n_features {} val_auroc {val_auroc:.4}", steps.len(), active.len());

        let dropped = (active.len() > min_features).then(|| {
            let importance = model.feature_importance();
            let (pos, _) = importance
                .iter()
                .enumerate()
                .fold((0, f64::INFINITY), |(bi, bv), (i, &v)| if v <= bv { (i, v) } else { (bi, bv) });
            pos
        });

        if best.as_ref().is_none_or(|(b, _, _)| val_auroc >= *b) {
            best = Some((val_auroc, steps.len(), model));
        }
        steps.push(RfeStep {
            active: names,
            val_auroc,
            dropped: dropped.map(|p| train_x.names()[active[p]].clone()),
        });
        match dropped {
            Some(p) => {
                active.remove(p);
            }
            None => break,
        }
    }

    let (selected_auroc, step, model) = best.expect("at least one step");
    Ok(RfeResult {
        trace: RfeTrace {
            selected: steps[step].active.clone(),
            selected_auroc,
            steps,
        },
        model,
    })
}
