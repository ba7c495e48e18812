//! Second-order gradient boosting of depth-one trees on logistic loss.
//!
//! Split search is exact greedy: every midpoint between consecutive distinct
//! values of every feature is tried, and rows with a missing value are sent
//! to whichever side scores better.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoostConfig {
    pub rounds: usize,
    pub learning_rate: f64,
    /// L2 penalty on leaf values.
    pub l2_reg: f64,
    /// Gain a split must exceed.
    pub min_split_gain: f64,
    /// Only feeds tie-breaking among equal-gain splits, which is already fixed
    /// by feature and threshold order.
    pub seed: u64,
    pub min_child_hessian: f64,
}

impl Default for BoostConfig {
    fn default() -> Self {
        Self {
            rounds: 1000,
            learning_rate: 0.3,
            l2_reg: 1.0,
            min_split_gain: 0.0,
            seed: 42,
            min_child_hessian: 1.0,
        }
    }
}

impl BoostConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("boost.rounds", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("boost.learning_rate", "must be positive"));
        }
        if !(self.l2_reg >= 0.0) {
            return Err(Error::config("boost.l2_reg", "must be non-negative"));
        }
        if !(self.min_split_gain >= 0.0) {
            return Err(Error::config("boost.min_split_gain", "must be non-negative"));
        }
        if !(self.min_child_hessian >= 0.0) {
            return Err(Error::config("boost.min_child_hessian", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

/// A depth-one tree. Values below `threshold` go left, the rest right and
/// missing values to `default_side`. Leaf values already include the
/// learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stump {
    pub feature: usize,
    pub threshold: f64,
    pub left_value: f64,
    pub right_value: f64,
    pub default_side: Side,
    pub gain: f64,
}

impl Stump {
    pub fn side(&self, value: Option<f64>) -> Side {
        match value {
            None => self.default_side,
            Some(v) if v < self.threshold => Side::Left,
            Some(_) => Side::Right,
        }
    }

    pub fn leaf(&self, value: Option<f64>) -> f64 {
        match self.side(value) {
            Side::Left => self.left_value,
            Side::Right => self.right_value,
        }
    }
}

/// Smallest probability `predict_proba` returns; keeps outputs strictly
/// inside (0, 1) for saturated margins.
pub const PROB_FLOOR: f64 = 1e-15;

pub fn sigmoid(margin: f64) -> f64 {
    (1.0 / (1.0 + (-margin).exp())).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Mean logistic loss of margins against labels, computed without forming
/// probabilities.
pub fn log_loss(margins: &[f64], labels: &[bool]) -> f64 {
    let total: f64 = margins
        .iter()
        .zip(labels)
        .map(|(&m, &y)| {
            let softplus = m.max(0.0) + (-m.abs()).exp().ln_1p();
            if y {
                softplus - m
            } else {
                softplus
            }
        })
        .sum();
    total / margins.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StumpEnsemble {
    pub base_score: f64,
    pub learning_rate: f64,
    pub feature_names: Vec<String>,
    pub config: BoostConfig,
    pub stumps: Vec<Stump>,
}

const MODEL_SCHEMA: &str = "ecgcxr/stump-ensemble";
const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelFile {
    schema: String,
    version: u32,
    #[serde(flatten)]
    model: StumpEnsemble,
}

impl StumpEnsemble {
    pub fn empty(base_score: f64, feature_names: Vec<String>, config: BoostConfig) -> Self {
        Self {
            base_score,
            learning_rate: config.learning_rate,
            feature_names,
            config,
            stumps: Vec::new(),
        }
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    fn margin_unchecked(&self, row: &[Option<f64>]) -> f64 {
        logit(self.base_score)
            + self
                .stumps
                .iter()
                .map(|s| s.leaf(row[s.feature]))
                .sum::<f64>()
    }

    pub fn predict_margin(&self, row: &[Option<f64>]) -> Result<f64> {
        if row.len() != self.n_features() {
            return Err(Error::ArityMismatch {
                expected: self.n_features(),
                got: row.len(),
            });
        }
        Ok(self.margin_unchecked(row))
    }

    pub fn predict_proba(&self, row: &[Option<f64>]) -> Result<f64> {
        self.predict_margin(row).map(sigmoid)
    }

    fn check_columns(&self, matrix: &FeatureMatrix) -> Result<()> {
        if matrix.n_cols() != self.n_features() {
            return Err(Error::ArityMismatch {
                expected: self.n_features(),
                got: matrix.n_cols(),
            });
        }
        if matrix.names() != self.feature_names.as_slice() {
            return Err(Error::InvalidArgument(
                "matrix columns differ from the model's feature names".into(),
            ));
        }
        Ok(())
    }

    pub fn predict_margins(&self, matrix: &FeatureMatrix) -> Result<Vec<f64>> {
        self.check_columns(matrix)?;
        Ok(matrix.rows().map(|r| self.margin_unchecked(r)).collect())
    }

    pub fn predict_probas(&self, matrix: &FeatureMatrix) -> Result<Vec<f64>> {
        Ok(self.predict_margins(matrix)?.into_iter().map(sigmoid).collect())
    }

    /// Total split gain per feature, aligned with `feature_names`.
    pub fn feature_importance(&self) -> Vec<f64> {
        let mut gains = vec![0.0; self.n_features()];
        for s in &self.stumps {
            gains[s.feature] += s.gain;
        }
        gains
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            schema: MODEL_SCHEMA.into(),
            version: MODEL_VERSION,
            model: self.clone(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("model serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if file.schema != MODEL_SCHEMA {
            return Err(format!("unexpected schema `{}`", file.schema));
        }
        if file.version != MODEL_VERSION {
            return Err(format!("unsupported model version {}", file.version));
        }
        let m = file.model;
        if let Some(s) = m.stumps.iter().find(|s| s.feature >= m.feature_names.len()) {
            return Err(format!("stump references feature {} out of range", s.feature));
        }
        if !(m.base_score > 0.0 && m.base_score < 1.0) {
            return Err("base_score must lie in (0, 1)".into());
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|message| Error::Format {
            path: path.to_path_buf(),
            message,
        })
    }
}

/// Per-feature row order by value, built once per training matrix.
struct SortedColumn {
    /// Present rows ordered by value.
    rows: Vec<u32>,
    /// Positions `k` in `rows` where the value strictly increases between
    /// `k` and `k + 1`, each with its midpoint threshold.
    boundaries: Vec<(u32, f64)>,
    missing: Vec<u32>,
}

/// Presorted view of a feature matrix for repeated split searches.
pub struct SplitFinder {
    columns: Vec<SortedColumn>,
    n_rows: usize,
}

#[derive(Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
    side: Side,
    left: (f64, f64),
    right: (f64, f64),
}

impl SplitFinder {
    pub fn new(matrix: &FeatureMatrix) -> Self {
        let columns = (0..matrix.n_cols())
            .map(|c| {
                let mut present: Vec<(f64, u32)> = Vec::new();
                let mut missing = Vec::new();
                for (i, v) in matrix.column(c).enumerate() {
                    match v.filter(|x| x.is_finite()) {
                        Some(x) => present.push((x, i as u32)),
                        None => missing.push(i as u32),
                    }
                }
                present.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let boundaries = present
                    .windows(2)
                    .enumerate()
                    .filter(|(_, w)| w[0].0 != w[1].0)
                    .map(|(k, w)| {
                        let (lo, hi) = (w[0].0, w[1].0);
                        let mut threshold = lo + (hi - lo) / 2.0;
                        if threshold <= lo {
                            threshold = hi;
                        }
                        (k as u32, threshold)
                    })
                    .collect();
                SortedColumn {
                    rows: present.iter().map(|p| p.1).collect(),
                    boundaries,
                    missing,
                }
            })
            .collect();
        Self {
            columns,
            n_rows: matrix.n_rows(),
        }
    }

    /// Highest-gain admissible stump, or `None` when no candidate has
    /// positive gain. Ties keep the lowest feature, then the lowest threshold,
    /// then the left default side.
    pub fn best_stump(&self, grad: &[f64], hess: &[f64], config: &BoostConfig) -> Option<Stump> {
        assert_eq!(grad.len(), self.n_rows, "gradient length");
        assert_eq!(hess.len(), self.n_rows, "hessian length");
        let lambda = config.l2_reg;
        let gamma = config.min_split_gain;
        let min_h = config.min_child_hessian;
        let score = |g: f64, h: f64| g * g / (h + lambda);
        let gh: Vec<(f64, f64)> = grad.iter().zip(hess).map(|(&g, &h)| (g, h)).collect();
        let (g_total, h_total) = gh.iter().fold((0.0, 0.0), |(g, h), &(a, b)| (g + a, h + b));
        let mut best: Option<Candidate> = None;
        // child hessian sums plus lambda stay positive, so the
        // multiplication-only screen is sound
        let screen_valid = lambda > 0.0 || min_h > 0.0;
        let mut prefix: Vec<(f64, f64)> = Vec::new();

        for (feature, col) in self.columns.iter().enumerate() {
            if col.boundaries.is_empty() {
                continue;
            }
            let (gm, hm) = col.missing.iter().fold((0.0, 0.0), |(g, h), &r| {
                let (a, b) = gh[r as usize];
                (g + a, h + b)
            });
            let (gp, hp) = (g_total - gm, h_total - hm);
            let parent = score(g_total, h_total);
            let sides: &[Side] = if col.missing.is_empty() {
                &[Side::Left]
            } else {
                &[Side::Left, Side::Right]
            };

            // A candidate can only win if its child score sum exceeds this
            // bar. The bar is loosened slightly so the screen never rejects
            // a candidate the exact gain comparison below would accept.
            let bar = |best: &Option<Candidate>| match best {
                Some(b) => {
                    let t = 2.0 * (b.gain + gamma) + parent;
                    t - 1e-9 * t.abs().max(1.0)
                }
                None => f64::NEG_INFINITY,
            };
            let mut screen = bar(&best);

            prefix.clear();
            let (mut gl, mut hl) = (0.0, 0.0);
            let mut k = 0usize;
            for &(end, _) in &col.boundaries {
                for &r in &col.rows[k..=end as usize] {
                    let (a, b) = gh[r as usize];
                    gl += a;
                    hl += b;
                }
                k = end as usize + 1;
                prefix.push((gl, hl));
            }

            for start in (0..prefix.len()).step_by(SCREEN_BLOCK) {
                let block = start..(start + SCREEN_BLOCK).min(prefix.len());
                if screen_valid && !block_may_win(&prefix[block.clone()], (gp, hp), (gm, hm), sides.len() == 2, screen, lambda, min_h) {
                    continue;
                }
                for i in block {
                    let (gl, hl) = prefix[i];
                    let (gr, hr) = (gp - gl, hp - hl);
                    for &side in sides {
                        let ((g_left, h_left), (g_right, h_right)) = match side {
                            Side::Left => ((gl + gm, hl + hm), (gr, hr)),
                            Side::Right => ((gl, hl), (gr + gm, hr + hm)),
                        };
                        if h_left < min_h || h_right < min_h {
                            continue;
                        }
                        let (dl, dr) = (h_left + lambda, h_right + lambda);
                        if screen_valid {
                            let num = g_left * g_left * dr + g_right * g_right * dl;
                            if num <= screen * (dl * dr) {
                                continue;
                            }
                        }
                        let gain = 0.5 * (score(g_left, h_left) + score(g_right, h_right) - parent) - gamma;
                        if best.as_ref().is_some_and(|b| gain <= b.gain) {
                            continue;
                        }
                        best = Some(Candidate {
                            gain,
                            feature,
                            threshold: col.boundaries[i].1,
                            side,
                            left: (g_left, h_left),
                            right: (g_right, h_right),
                        });
                        screen = bar(&best);
                    }
                }
            }
        }
        best.filter(|c| c.gain > 0.0).map(|c| Stump {
            feature: c.feature,
            threshold: c.threshold,
            left_value: -c.left.0 / (c.left.1 + lambda) * config.learning_rate,
            right_value: -c.right.0 / (c.right.1 + lambda) * config.learning_rate,
            default_side: c.side,
            gain: c.gain,
        })
    }
}

const SCREEN_BLOCK: usize = 64;

/// Branch-free check whether any candidate in a block of boundaries could
/// clear the screen; only such blocks get the exact scan.
fn block_may_win(
    prefix: &[(f64, f64)],
    (gp, hp): (f64, f64),
    (gm, hm): (f64, f64),
    two_sides: bool,
    screen: f64,
    lambda: f64,
    min_h: f64,
) -> bool {
    let mut any = false;
    for &(gl, hl) in prefix {
        let (gr, hr) = (gp - gl, hp - hl);
        let (a_g, a_h, b_g, b_h) = (gl + gm, hl + hm, gr, hr);
        let (dl, dr) = (a_h + lambda, b_h + lambda);
        let pass = a_g * a_g * dr + b_g * b_g * dl > screen * (dl * dr);
        any |= pass & (a_h >= min_h) & (b_h >= min_h);
        if two_sides {
            let (a_g, a_h, b_g, b_h) = (gl, hl, gr + gm, hr + hm);
            let (dl, dr) = (a_h + lambda, b_h + lambda);
            let pass = a_g * a_g * dr + b_g * b_g * dl > screen * (dl * dr);
            any |= pass & (a_h >= min_h) & (b_h >= min_h);
        }
    }
    any
}

/// One-off split search over a matrix; see [`SplitFinder::best_stump`].
pub fn fit_best_stump(
    matrix: &FeatureMatrix,
    grad: &[f64],
    hess: &[f64],
    config: &BoostConfig,
) -> Option<Stump> {
    SplitFinder::new(matrix).best_stump(grad, hess, config)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundLoss {
    pub round: usize,
    pub added: bool,
    pub train: f64,
    pub watch: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: StumpEnsemble,
    pub trace: Vec<RoundLoss>,
}

fn check_labels(labels: &[bool], what: &str) -> Result<()> {
    let pos = labels.iter().filter(|&&y| y).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::DegenerateTarget(format!(
            "{what} labels contain a single class"
        )));
    }
    Ok(())
}

/// Fits a stump ensemble. Rounds that find no admissible split add nothing
/// but still count; once one occurs every later round would repeat it, so
/// the remaining trace is filled directly.
pub fn train(
    matrix: &FeatureMatrix,
    labels: &[bool],
    config: &BoostConfig,
    watch: Option<(&FeatureMatrix, &[bool])>,
) -> Result<TrainOutput> {
    fit(matrix, labels, config, watch, true)
}

/// Same model as [`train`] without the per-round loss trace.
pub(crate) fn train_model(matrix: &FeatureMatrix, labels: &[bool], config: &BoostConfig) -> Result<StumpEnsemble> {
    fit(matrix, labels, config, None, false).map(|out| out.model)
}

fn fit(
    matrix: &FeatureMatrix,
    labels: &[bool],
    config: &BoostConfig,
    watch: Option<(&FeatureMatrix, &[bool])>,
    record_loss: bool,
) -> Result<TrainOutput> {
    config.validate()?;
    if labels.len() != matrix.n_rows() {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {} rows",
            labels.len(),
            matrix.n_rows()
        )));
    }
    check_labels(labels, "training")?;
    if let Some((wm, wl)) = watch {
        if wm.names() != matrix.names() || wl.len() != wm.n_rows() {
            return Err(Error::InvalidArgument("watch set does not match training columns".into()));
        }
    }

    let base_score = labels.iter().filter(|&&y| y).count() as f64 / labels.len() as f64;
    let mut model = StumpEnsemble::empty(base_score, matrix.names().to_vec(), *config);
    let base_margin = logit(base_score);
    let finder = SplitFinder::new(matrix);
    let mut margins = vec![base_margin; matrix.n_rows()];
    let mut watch_margins = watch.map(|(wm, _)| vec![base_margin; wm.n_rows()]);
    let mut grad = vec![0.0; matrix.n_rows()];
    let mut hess = vec![0.0; matrix.n_rows()];
    let mut trace = Vec::with_capacity(config.rounds);

    for round in 0..config.rounds {
        for i in 0..margins.len() {
            let p = sigmoid(margins[i]);
            grad[i] = p - if labels[i] { 1.0 } else { 0.0 };
            hess[i] = p * (1.0 - p);
        }
        let Some(stump) = finder.best_stump(&grad, &hess, config) else {
            if !record_loss {
                break;
            }
            let last = RoundLoss {
                round,
                added: false,
                train: log_loss(&margins, labels),
                watch: watch
                    .zip(watch_margins.as_ref())
                    .map(|((_, wl), wmg)| log_loss(wmg, wl)),
            };
            trace.extend((round..config.rounds).map(|r| RoundLoss { round: r, ..last }));
            break;
        };
        for (i, m) in margins.iter_mut().enumerate() {
            *m += stump.leaf(matrix.get(i, stump.feature));
        }
        if let (Some((wm, _)), Some(wmg)) = (watch, watch_margins.as_mut()) {
            for (i, m) in wmg.iter_mut().enumerate() {
                *m += stump.leaf(wm.get(i, stump.feature));
            }
        }
        model.stumps.push(stump);
        if !record_loss {
            continue;
        }
        trace.push(RoundLoss {
            round,
            added: true,
            train: log_loss(&margins, labels),
            watch: watch
                .zip(watch_margins.as_ref())
                .map(|((_, wl), wmg)| log_loss(wmg, wl)),
        });
    }
    Ok(TrainOutput { model, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluate::auroc;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_column(xs: &[Option<f64>]) -> FeatureMatrix {
        FeatureMatrix::new(vec!["x".into()], xs.iter().map(|&x| vec![x]).collect()).unwrap()
    }

    fn permissive() -> BoostConfig {
        BoostConfig {
            min_child_hessian: 0.0,
            ..BoostConfig::default()
        }
    }

    /// Direct enumeration of every (feature, threshold, default side).
    fn brute_force_gain(m: &FeatureMatrix, g: &[f64], h: &[f64], cfg: &BoostConfig) -> Option<f64> {
        let mut best: Option<f64> = None;
        for f in 0..m.n_cols() {
            let mut vals: Vec<f64> = m.column(f).flatten().collect();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            for w in vals.windows(2) {
                let thr = (w[0] + w[1]) / 2.0;
                for side in [Side::Left, Side::Right] {
                    let (mut gl, mut hl, mut gr, mut hr) = (0.0, 0.0, 0.0, 0.0);
                    for i in 0..m.n_rows() {
                        let left = match m.get(i, f) {
                            None => side == Side::Left,
                            Some(v) => v < thr,
                        };
                        if left {
                            gl += g[i];
                            hl += h[i];
                        } else {
                            gr += g[i];
                            hr += h[i];
                        }
                    }
                    if hl < cfg.min_child_hessian || hr < cfg.min_child_hessian {
                        continue;
                    }
                    let l = cfg.l2_reg;
                    let gain = 0.5
                        * (gl * gl / (hl + l) + gr * gr / (hr + l)
                            - (gl + gr).powi(2) / (hl + hr + l))
                        - cfg.min_split_gain;
                    best = Some(best.map_or(gain, |b: f64| b.max(gain)));
                }
            }
        }
        best.filter(|g| *g > 0.0)
    }

    #[test]
    fn first_round_split_on_ordered_toy() {
        let m = one_column(&[Some(1.0), Some(2.0), Some(3.0), Some(4.0)]);
        let y = [0.0, 0.0, 1.0, 1.0];
        let g: Vec<f64> = y.iter().map(|y| 0.5 - y).collect();
        let h = vec![0.25; 4];
        let s = fit_best_stump(&m, &g, &h, &permissive()).unwrap();
        assert_eq!(s.threshold, 2.5);
        assert!(s.left_value < 0.0 && 0.0 < s.right_value);
        assert_eq!(s.default_side, Side::Left);
        let oracle = brute_force_gain(&m, &g, &h, &permissive()).unwrap();
        assert!((s.gain - oracle).abs() < 1e-12);
        assert!((s.gain - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn default_hessian_floor_blocks_tiny_children() {
        let m = one_column(&[Some(1.0), Some(2.0), Some(3.0), Some(4.0)]);
        let g = [0.5, 0.5, -0.5, -0.5];
        assert!(fit_best_stump(&m, &g, &[0.25; 4], &BoostConfig::default()).is_none());
    }

    #[test]
    fn all_missing_gives_no_split() {
        let m = one_column(&[None, None, None]);
        assert!(fit_best_stump(&m, &[0.5, -0.5, 0.5], &[0.25; 3], &permissive()).is_none());
    }

    #[test]
    fn saturated_constant_label_gives_no_split() {
        let m = one_column(&[Some(1.0), Some(2.0), Some(3.0), Some(4.0)]);
        // y = 1 everywhere with margins driven to saturation: g = p - 1 identical
        let p = sigmoid(12.0);
        let g = vec![p - 1.0; 4];
        let h = vec![p * (1.0 - p); 4];
        assert!(fit_best_stump(&m, &g, &h, &permissive()).is_none());
        assert!(brute_force_gain(&m, &g, &h, &permissive()).is_none());
    }

    #[test]
    fn missing_rows_follow_better_side() {
        // missing rows look like the high-x rows, so they should go right
        let m = one_column(&[Some(1.0), Some(2.0), Some(3.0), Some(4.0), None, None]);
        let g = [0.5, 0.5, -0.5, -0.5, -0.5, -0.5];
        let s = fit_best_stump(&m, &g, &[0.25; 6], &permissive()).unwrap();
        assert_eq!(s.default_side, Side::Right);
        assert_eq!(s.threshold, 2.5);
    }

    #[test]
    fn brute_force_agreement_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let n = rng.random_range(2..=60);
            let d = rng.random_range(1..=4);
            let rows = (0..n)
                .map(|_| {
                    (0..d)
                        .map(|_| {
                            (rng.random::<f64>() > 0.3).then(|| rng.random_range(0..8) as f64)
                        })
                        .collect()
                })
                .collect();
            let m = FeatureMatrix::new((0..d).map(|j| format!("f{j}")).collect(), rows).unwrap();
            let g: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let h: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.25)).collect();
            let cfg = BoostConfig {
                min_child_hessian: rng.random_range(0.0..0.5),
                ..BoostConfig::default()
            };
            let got = fit_best_stump(&m, &g, &h, &cfg).map(|s| s.gain);
            let want = brute_force_gain(&m, &g, &h, &cfg);
            match (got, want) {
                (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-9 * b.abs().max(a.abs())),
                (None, None) => {}
                other => panic!("mismatch {other:?}"),
            }
        }
    }

    #[test]
    fn separable_data_drives_loss_to_zero() {
        let xs: Vec<Option<f64>> = (0..200).map(|i| Some(i as f64 - 99.5)).collect();
        let y: Vec<bool> = xs.iter().map(|x| x.unwrap() > 0.0).collect();
        let out = train(&one_column(&xs), &y, &BoostConfig::default(), None).unwrap();
        assert!(out.trace.last().unwrap().train < 0.01);
        assert_eq!(out.trace.len(), 1000);
        assert!(out.model.stumps.len() <= 1000);
    }

    #[test]
    fn loss_trace_non_increasing_when_stumps_added() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<Vec<Option<f64>>> = (0..400)
            .map(|_| vec![Some(rng.random::<f64>()), (rng.random::<f64>() > 0.2).then(|| rng.random())])
            .collect();
        let y: Vec<bool> = rows
            .iter()
            .map(|r| rng.random::<f64>() < 0.2 + 0.6 * r[0].unwrap())
            .collect();
        let m = FeatureMatrix::new(vec!["a".into(), "b".into()], rows).unwrap();
        let cfg = BoostConfig {
            rounds: 200,
            ..BoostConfig::default()
        };
        let out = train(&m, &y, &cfg, None).unwrap();
        let base = log_loss(&vec![logit(out.model.base_score); 400], &y);
        let mut prev = base;
        for r in &out.trace {
            if r.added {
                assert!(r.train <= prev + 1e-12, "round {} {} > {}", r.round, r.train, prev);
            }
            prev = r.train;
        }
    }

    #[test]
    fn coin_flip_labels_stay_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gen_rows = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Vec<Option<f64>>> {
            (0..n)
                .map(|_| (0..3).map(|_| Some(rng.random::<f64>())).collect())
                .collect()
        };
        let names: Vec<String> = (0..3).map(|j| format!("f{j}")).collect();
        let m = FeatureMatrix::new(names.clone(), gen_rows(&mut rng, 1000)).unwrap();
        let y: Vec<bool> = (0..1000).map(|_| rng.random()).collect();
        let hold = FeatureMatrix::new(names, gen_rows(&mut rng, 1000)).unwrap();
        let hy: Vec<bool> = (0..1000).map(|_| rng.random()).collect();
        let out = train(&m, &y, &BoostConfig::default(), None).unwrap();
        let train_auc = auroc(&out.model.predict_probas(&m).unwrap(), &y).unwrap();
        let hold_auc = auroc(&out.model.predict_probas(&hold).unwrap(), &hy).unwrap();
        // 1000 stumps memorize part of the noise; that gain must not carry over
        assert!(train_auc > hold_auc, "train {train_auc} held-out {hold_auc}");
        assert!((0.4..=0.6).contains(&hold_auc), "held-out {hold_auc}");
    }

    #[test]
    fn training_is_deterministic() {
        let xs: Vec<Option<f64>> = (0..100).map(|i| (i % 7 != 0).then_some((i * 37 % 101) as f64)).collect();
        let y: Vec<bool> = (0..100).map(|i| (i * 37 % 101) > 50 || i % 11 == 0).collect();
        let cfg = BoostConfig {
            rounds: 50,
            ..BoostConfig::default()
        };
        let a = train(&one_column(&xs), &y, &cfg, None).unwrap().model.to_json();
        let b = train(&one_column(&xs), &y, &cfg, None).unwrap().model.to_json();
        assert_eq!(a, b);
    }

    #[test]
    fn single_class_is_degenerate() {
        let m = one_column(&[Some(1.0), Some(2.0)]);
        let err = train(&m, &[true, true], &BoostConfig::default(), None).unwrap_err();
        assert!(err.to_string().contains("degenerate target"));
    }

    #[test]
    fn watch_set_trace_recorded() {
        let xs: Vec<Option<f64>> = (0..50).map(|i| Some(i as f64)).collect();
        let y: Vec<bool> = (0..50).map(|i| i >= 25).collect();
        let m = one_column(&xs);
        let cfg = BoostConfig {
            rounds: 5,
            ..BoostConfig::default()
        };
        let out = train(&m, &y, &cfg, Some((&m, &y))).unwrap();
        for r in &out.trace {
            assert!((r.watch.unwrap() - r.train).abs() < 1e-12);
        }
    }

    fn stump(feature: usize, threshold: f64, left: f64, right: f64, side: Side) -> Stump {
        Stump {
            feature,
            threshold,
            left_value: left,
            right_value: right,
            default_side: side,
            gain: 1.0,
        }
    }

    #[test]
    fn margin_examples() {
        let names = vec!["a".to_string(), "b".to_string()];
        let mut model = StumpEnsemble::empty(0.5, names, BoostConfig::default());
        assert_eq!(model.predict_margin(&[Some(1.0), None]).unwrap(), 0.0);
        assert_eq!(model.predict_proba(&[Some(1.0), None]).unwrap(), 0.5);
        model.stumps.push(stump(0, 2.0, -0.4, 0.7, Side::Left));
        assert_eq!(model.predict_margin(&[Some(3.0), None]).unwrap(), 0.7);
        model.stumps.push(stump(1, 0.0, 0.25, -0.5, Side::Right));
        assert_eq!(model.predict_margin(&[None, None]).unwrap(), -0.4 + -0.5);
        let err = model.predict_margin(&[None]).unwrap_err();
        assert!(matches!(err, Error::ArityMismatch { expected: 2, got: 1 }));
    }

    #[test]
    fn sigmoid_properties() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(50.0) < 1.0);
        assert!(sigmoid(-50.0) > 0.0);
        for m in [-3.0, -0.7, 0.2, 1.5, 4.0] {
            assert!((sigmoid(-m) - (1.0 - sigmoid(m))).abs() < 1e-15);
        }
    }

    #[test]
    fn importance_sums_gain_per_feature() {
        let names = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let mut model = StumpEnsemble::empty(0.3, names, BoostConfig::default());
        assert_eq!(model.feature_importance(), vec![0.0; 3]);
        model.stumps.push(stump(1, 0.0, 1.0, -1.0, Side::Left));
        model.stumps.push(stump(1, 1.0, 1.0, -1.0, Side::Left));
        assert_eq!(model.feature_importance(), vec![0.0, 2.0, 0.0]);
    }

    #[test]
    fn planted_feature_dominates_importance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<Vec<Option<f64>>> = (0..2000)
            .map(|_| vec![Some(rng.random_range(-2.0..2.0)), Some(rng.random_range(-2.0..2.0))])
            .collect();
        let y: Vec<bool> = rows
            .iter()
            .map(|r| rng.random::<f64>() < sigmoid(2.5 * r[0].unwrap()))
            .collect();
        let m = FeatureMatrix::new(vec!["signal".into(), "noise".into()], rows).unwrap();
        let cfg = BoostConfig {
            rounds: 200,
            ..BoostConfig::default()
        };
        let imp = train(&m, &y, &cfg, None).unwrap().model.feature_importance();
        assert!(imp[0] / (imp[0] + imp[1]) > 0.9, "{imp:?}");
    }

    /// Finite differences of the regularized leaf loss recover the gradient
    /// and hessian sums, and the minimizer of that quadratic is -G/(H+l).
    #[test]
    fn leaf_value_minimizes_second_order_objective() {
        let margins = [-0.3, 0.1, 0.4, 1.2, -1.0];
        let labels = [false, false, true, true, true];
        let lambda = 1.0;
        let loss = |w: f64| -> f64 {
            let shifted: Vec<f64> = margins.iter().map(|m| m + w).collect();
            log_loss(&shifted, &labels) * margins.len() as f64 + 0.5 * lambda * w * w
        };
        let (g, h): (f64, f64) = margins.iter().zip(&labels).fold((0.0, 0.0), |(g, h), (&m, &y)| {
            let p = sigmoid(m);
            (g + p - if y { 1.0 } else { 0.0 }, h + p * (1.0 - p))
        });
        let eps = 1e-4;
        let d1 = (loss(eps) - loss(-eps)) / (2.0 * eps);
        let d2 = (loss(eps) - 2.0 * loss(0.0) + loss(-eps)) / (eps * eps);
        assert!((d1 - g).abs() < 1e-4, "{d1} vs {g}");
        assert!((d2 - (h + lambda)).abs() < 1e-4, "{d2} vs {}", h + lambda);

        // golden-section search on the quadratic built from finite differences
        let quad = |w: f64| d1 * w + 0.5 * d2 * w * w;
        let (mut a, mut b) = (-10.0f64, 10.0f64);
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let c = b - phi * (b - a);
            let d = a + phi * (b - a);
            if quad(c) < quad(d) {
                b = d;
            } else {
                a = c;
            }
        }
        let w_star = (a + b) / 2.0;
        assert!((w_star - (-g / (h + lambda))).abs() < 1e-4);
    }

    #[test]
    fn model_json_round_trip_and_validation() {
        let mut model = StumpEnsemble::empty(0.2, vec!["a".into()], BoostConfig::default());
        model.stumps.push(stump(0, 0.1 + 0.2, 1.0 / 3.0, -2.0 / 7.0, Side::Right));
        let text = model.to_json();
        assert!(text.contains("\"schema\": \"ecgcxr/stump-ensemble\""));
        assert_eq!(StumpEnsemble::from_json(&text).unwrap(), model);
        let bad = text.replace("\"feature\": 0", "\"feature\": 3");
        assert!(StumpEnsemble::from_json(&bad).is_err());
        let bad = text.replace("\"version\": 1", "\"version\": 9");
        assert!(StumpEnsemble::from_json(&bad).is_err());
    }
}
