//! Cleaning of raw ECG fiducials and derivation of interval, ratio, axis and
//! demographic features.


use crate::error::{Error, Result};
use crate::ingestion::{RawEcgMeasurement, Sex};

/// Model features in their fixed column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Feature {
    RrInterval,
    PAxis,
    QrsAxis,
    TAxis,
    PDuration,
    QrsDuration,
    PrInterval,
    QtInterval,
    QrstInterval,
    PtInterval,
    Qtc,
    PRrRatio,
    QrsRrRatio,
    QtRrRatio,
    PrQtRatio,
    PQrsAxisDiff,
    QrsTAxisDiff,
    PTAxisDiff,
    Age,
    AgeBin,
    Sex,
}

pub const N_FEATURES: usize = 21;

impl Feature {
    pub const ALL: [Feature; N_FEATURES] = [
        Feature::RrInterval,
        Feature::PAxis,
        Feature::QrsAxis,
        Feature::TAxis,
        Feature::PDuration,
        Feature::QrsDuration,
        Feature::PrInterval,
        Feature::QtInterval,
        Feature::QrstInterval,
        Feature::PtInterval,
        Feature::Qtc,
        Feature::PRrRatio,
        Feature::QrsRrRatio,
        Feature::QtRrRatio,
        Feature::PrQtRatio,
        Feature::PQrsAxisDiff,
        Feature::QrsTAxisDiff,
        Feature::PTAxisDiff,
        Feature::Age,
        Feature::AgeBin,
        Feature::Sex,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Feature::RrInterval => "rr_interval",
            Feature::PAxis => "p_axis",
            Feature::QrsAxis => "qrs_axis",
            Feature::TAxis => "t_axis",
            Feature::PDuration => "p_duration",
            Feature::QrsDuration => "qrs_duration",
            Feature::PrInterval => "pr_interval",
            Feature::QtInterval => "qt_interval",
            Feature::QrstInterval => "qrst_interval",
            Feature::PtInterval => "pt_interval",
            Feature::Qtc => "qtc",
            Feature::PRrRatio => "p_rr_ratio",
            Feature::QrsRrRatio => "qrs_rr_ratio",
            Feature::QtRrRatio => "qt_rr_ratio",
            Feature::PrQtRatio => "pr_qt_ratio",
            Feature::PQrsAxisDiff => "p_qrs_axis_diff",
            Feature::QrsTAxisDiff => "qrs_t_axis_diff",
            Feature::PTAxisDiff => "p_t_axis_diff",
            Feature::Age => "age",
            Feature::AgeBin => "age_bin",
            Feature::Sex => "sex",
        }
    }

    pub fn from_name(name: &str) -> Option<Feature> {
        Feature::ALL.into_iter().find(|f| f.name() == name)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

pub fn feature_names() -> Vec<String> {
    Feature::ALL.iter().map(|f| f.name().to_string()).collect()
}

/// Axis readings outside this range (degrees) are implausible.
pub const AXIS_LIMIT: f64 = 360.0;
/// Onset, end and RR readings outside `[0, TIME_LIMIT_MS]` are implausible.
pub const TIME_LIMIT_MS: f64 = 5000.0;

fn keep_within(v: Option<f64>, lo: f64, hi: f64) -> Option<f64> {
    v.filter(|x| x.is_finite() && *x >= lo && *x <= hi)
}

/// Sets implausible axis and timing readings to missing.
pub fn clean_measurements(raw: &RawEcgMeasurement) -> RawEcgMeasurement {
    let time = |v| keep_within(v, 0.0, TIME_LIMIT_MS);
    let axis = |v| keep_within(v, -AXIS_LIMIT, AXIS_LIMIT);
    RawEcgMeasurement {
        rr_interval: time(raw.rr_interval),
        p_onset: time(raw.p_onset),
        p_end: time(raw.p_end),
        qrs_onset: time(raw.qrs_onset),
        qrs_end: time(raw.qrs_end),
        t_end: time(raw.t_end),
        p_axis: axis(raw.p_axis),
        qrs_axis: axis(raw.qrs_axis),
        t_axis: axis(raw.t_axis),
    }
}

/// Absolute angular difference folded into `[0, 180]` degrees.
pub fn axis_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).abs().rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Bazett-corrected QT: QT (ms) over the square root of RR in seconds.
pub fn bazett_qtc(qt_ms: f64, rr_ms: f64) -> Option<f64> {
    (qt_ms > 0.0 && rr_ms > 0.0).then(|| qt_ms / (rr_ms / 1000.0).sqrt())
}

/// Age bins `[18,53) [53,66) [66,78) [78,99]`; ages outside 18..=99 have no bin.
pub fn age_bin(age: f64) -> Option<u8> {
    match age {
        a if !(18.0..=99.0).contains(&a) => None,
        a if a < 53.0 => Some(0),
        a if a < 66.0 => Some(1),
        a if a < 78.0 => Some(2),
        _ => Some(3),
    }
}

pub fn encode_demographics(age: Option<f64>) -> (Option<f64>, Option<u8>) {
    let age = age.filter(|a| a.is_finite() && *a >= 0.0);
    (age, age.and_then(age_bin))
}

/// One sample's features; any entry may be missing.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FeatureVector {
    pub values: [Option<f64>; N_FEATURES],
}

impl FeatureVector {
    pub fn get(&self, f: Feature) -> Option<f64> {
        self.values[f.index()]
    }

    fn set(&mut self, f: Feature, v: Option<f64>) {
        self.values[f.index()] = v;
    }
}

fn positive_diff(end: Option<f64>, start: Option<f64>) -> Option<f64> {
    let d = end? - start?;
    (d > 0.0).then_some(d)
}

fn ratio(num: Option<f64>, den: Option<f64>) -> Option<f64> {
    let (n, d) = (num?, den?);
    (d > 0.0).then(|| n / d)
}

/// Derives the full feature vector from cleaned fiducials and demographics.
///
/// Intervals are differences of fiducial times; any non-positive duration,
/// or a non-positive RR used as a denominator, becomes missing.
pub fn derive_features(raw: &RawEcgMeasurement, age: Option<f64>, sex: Option<Sex>) -> FeatureVector {
    let rr = raw.rr_interval.filter(|v| *v > 0.0);
    let p_duration = positive_diff(raw.p_end, raw.p_onset);
    let pr = positive_diff(raw.qrs_onset, raw.p_onset);
    let qrs = positive_diff(raw.qrs_end, raw.qrs_onset);
    let qt = positive_diff(raw.t_end, raw.qrs_onset);
    let qrst = positive_diff(raw.t_end, raw.qrs_end);
    let pt = positive_diff(raw.t_end, raw.p_onset);
    let qtc = qt.zip(rr).and_then(|(q, r)| bazett_qtc(q, r));
    let diff = |a: Option<f64>, b: Option<f64>| Some(axis_diff(a?, b?));
    let (age, bin) = encode_demographics(age);

    let mut fv = FeatureVector::default();
    fv.set(Feature::RrInterval, raw.rr_interval);
    fv.set(Feature::PAxis, raw.p_axis);
    fv.set(Feature::QrsAxis, raw.qrs_axis);
    fv.set(Feature::TAxis, raw.t_axis);
    fv.set(Feature::PDuration, p_duration);
    fv.set(Feature::QrsDuration, qrs);
    fv.set(Feature::PrInterval, pr);
    fv.set(Feature::QtInterval, qt);
    fv.set(Feature::QrstInterval, qrst);
    fv.set(Feature::PtInterval, pt);
    fv.set(Feature::Qtc, qtc);
    fv.set(Feature::PRrRatio, ratio(p_duration, rr));
    fv.set(Feature::QrsRrRatio, ratio(qrs, rr));
    fv.set(Feature::QtRrRatio, ratio(qt, rr));
    fv.set(Feature::PrQtRatio, ratio(pr, qt));
    fv.set(Feature::PQrsAxisDiff, diff(raw.p_axis, raw.qrs_axis));
    fv.set(Feature::QrsTAxisDiff, diff(raw.qrs_axis, raw.t_axis));
    fv.set(Feature::PTAxisDiff, diff(raw.p_axis, raw.t_axis));
    fv.set(Feature::Age, age);
    fv.set(Feature::AgeBin, bin.map(f64::from));
    fv.set(Feature::Sex, sex.map(Sex::code));
    fv
}

/// Row-major table of optional values with named columns.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    names: Vec<String>,
    n_rows: usize,
    data: Vec<Option<f64>>,
}

impl FeatureMatrix {
    pub fn new(names: Vec<String>, rows: Vec<Vec<Option<f64>>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("feature matrix needs at least one row".into()));
        }
        let d = names.len();
        let mut data = Vec::with_capacity(rows.len() * d);
        for row in &rows {
            if row.len() != d {
                return Err(Error::ArityMismatch {
                    expected: d,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            names,
            n_rows: rows.len(),
            data,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.names.len()
    }

    pub fn row(&self, i: usize) -> &[Option<f64>] {
        let d = self.n_cols();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.data[row * self.n_cols() + col]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[Option<f64>]> + '_ {
        (0..self.n_rows).map(move |i| self.row(i))
    }

    pub fn column(&self, col: usize) -> impl Iterator<Item = Option<f64>> + '_ {
        (0..self.n_rows).map(move |i| self.get(i, col))
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// New matrix with the given columns, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> FeatureMatrix {
        let names = cols.iter().map(|&c| self.names[c].clone()).collect();
        let data = (0..self.n_rows)
            .flat_map(|i| cols.iter().map(move |&c| self.get(i, c)))
            .collect();
        FeatureMatrix {
            names,
            n_rows: self.n_rows,
            data,
        }
    }

    /// Looks up columns by name, failing on the first unknown one.
    pub fn select_named(&self, names: &[String]) -> Result<FeatureMatrix> {
        let cols = names
            .iter()
            .map(|n| {
                self.column_index(n)
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown feature column `{n}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.select_columns(&cols))
    }

    /// New matrix with the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<FeatureMatrix> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("row selection is empty".into()));
        }
        let data = rows.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        Ok(FeatureMatrix {
            names: self.names.clone(),
            n_rows: rows.len(),
            data,
        })
    }
}

/// Stacks per-sample feature vectors under the fixed column order.
pub fn build_matrix(features: &[FeatureVector]) -> Result<FeatureMatrix> {
    FeatureMatrix::new(
        feature_names(),
        features.iter().map(|fv| fv.values.to_vec()).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn complete() -> RawEcgMeasurement {
        RawEcgMeasurement {
            rr_interval: Some(740.0),
            p_onset: Some(40.0),
            p_end: Some(150.0),
            qrs_onset: Some(196.0),
            qrs_end: Some(289.0),
            t_end: Some(580.0),
            p_axis: Some(52.0),
            qrs_axis: Some(14.0),
            t_axis: Some(43.0),
        }
    }

    #[test]
    fn implausible_values_are_masked() {
        let raw = RawEcgMeasurement {
            qrs_axis: Some(400.0),
            rr_interval: Some(6000.0),
            p_axis: Some(-360.0),
            p_onset: Some(-1.0),
            ..complete()
        };
        let c = clean_measurements(&raw);
        assert_eq!(c.qrs_axis, None);
        assert_eq!(c.rr_interval, None);
        assert_eq!(c.p_onset, None);
        assert_eq!(c.p_axis, Some(-360.0));
        assert_eq!(clean_measurements(&complete()), complete());
        assert_eq!(c.t_end, Some(580.0));
    }

    #[test]
    fn bazett_on_table_medians() {
        let qtc = bazett_qtc(384.0, 740.0).unwrap();
        assert!((qtc - 446.39).abs() < 0.01, "{qtc}");
        assert!((qtc - 445.0).abs() < 1.5);
        assert_eq!(bazett_qtc(400.0, 1000.0), Some(400.0));
    }

    #[test]
    fn axis_difference_examples() {
        assert_eq!(axis_diff(52.0, 14.0), 38.0);
        assert_eq!(axis_diff(350.0, -350.0), 20.0);
        assert_eq!(axis_diff(-90.0, 90.0), 180.0);
        assert_eq!(axis_diff(10.0, 10.0), 0.0);
    }

    #[test]
    fn derived_intervals() {
        let fv = derive_features(&complete(), Some(66.0), Some(Sex::Male));
        assert_eq!(fv.get(Feature::PDuration), Some(110.0));
        assert_eq!(fv.get(Feature::PrInterval), Some(156.0));
        assert_eq!(fv.get(Feature::QrsDuration), Some(93.0));
        assert_eq!(fv.get(Feature::QtInterval), Some(384.0));
        assert_eq!(fv.get(Feature::QrstInterval), Some(291.0));
        assert_eq!(fv.get(Feature::PtInterval), Some(540.0));
        assert_eq!(fv.get(Feature::PrQtRatio), Some(156.0 / 384.0));
        assert_eq!(fv.get(Feature::PQrsAxisDiff), Some(38.0));
        assert_eq!(fv.get(Feature::AgeBin), Some(2.0));
        assert_eq!(fv.get(Feature::Sex), Some(1.0));
    }

    #[test]
    fn missing_qrs_onset_propagates() {
        let raw = RawEcgMeasurement {
            qrs_onset: None,
            ..complete()
        };
        let fv = derive_features(&raw, None, None);
        for f in [
            Feature::PrInterval,
            Feature::QrsDuration,
            Feature::QtInterval,
            Feature::Qtc,
            Feature::QtRrRatio,
            Feature::PrQtRatio,
            Feature::QrsRrRatio,
        ] {
            assert_eq!(fv.get(f), None, "{}", f.name());
        }
        assert_eq!(fv.get(Feature::PDuration), Some(110.0));
        assert_eq!(fv.get(Feature::QrstInterval), Some(291.0));
    }

    #[test]
    fn negative_duration_becomes_missing() {
        let raw = RawEcgMeasurement {
            t_end: Some(100.0),
            ..complete()
        };
        let fv = derive_features(&raw, None, None);
        assert_eq!(fv.get(Feature::QtInterval), None);
        assert_eq!(fv.get(Feature::Qtc), None);
        let raw = RawEcgMeasurement {
            rr_interval: Some(0.0),
            ..complete()
        };
        let fv = derive_features(&raw, None, None);
        assert_eq!(fv.get(Feature::Qtc), None);
        assert_eq!(fv.get(Feature::PRrRatio), None);
    }

    #[test]
    fn age_bin_edges() {
        assert_eq!(age_bin(66.0), Some(2));
        assert_eq!(age_bin(18.0), Some(0));
        assert_eq!(age_bin(52.999), Some(0));
        assert_eq!(age_bin(53.0), Some(1));
        assert_eq!(age_bin(78.0), Some(3));
        assert_eq!(age_bin(99.0), Some(3));
        assert_eq!(age_bin(17.9), None);
        assert_eq!(encode_demographics(Some(105.0)), (Some(105.0), None));
        assert_eq!(encode_demographics(None), (None, None));
    }

    #[test]
    fn matrix_shape_and_order() {
        let fvs = vec![derive_features(&complete(), Some(60.0), None); 3];
        let m = build_matrix(&fvs).unwrap();
        assert_eq!((m.n_rows(), m.n_cols()), (3, 21));
        assert_eq!(m.names(), build_matrix(&fvs).unwrap().names());
        assert_eq!(m.names()[10], "qtc");
        assert!(build_matrix(&[]).is_err());
    }

    #[test]
    fn arity_mismatch_rejected() {
        let err = FeatureMatrix::new(vec!["a".into(), "b".into()], vec![vec![Some(1.0)]]).unwrap_err();
        assert!(matches!(err, Error::ArityMismatch { expected: 2, got: 1 }));
    }

    #[test]
    fn column_and_row_selection() {
        let m = FeatureMatrix::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![vec![Some(1.0), None, Some(3.0)], vec![Some(4.0), Some(5.0), None]],
        )
        .unwrap();
        let s = m.select_columns(&[2, 0]);
        assert_eq!(s.names(), ["c", "a"]);
        assert_eq!(s.row(1), [None, Some(4.0)]);
        let r = m.select_rows(&[1]).unwrap();
        assert_eq!(r.row(0), m.row(1));
        assert!(m.select_named(&["z".into()]).is_err());
    }

    fn opt(lo: f64, hi: f64) -> impl Strategy<Value = Option<f64>> {
        prop::option::weighted(0.8, lo..hi)
    }

    prop_compose! {
        fn raw_strategy()(
            rr in opt(-500.0, 7000.0), po in opt(-100.0, 6000.0), pe in opt(-100.0, 6000.0),
            qo in opt(-100.0, 6000.0), qe in opt(-100.0, 6000.0), te in opt(-100.0, 6000.0),
            pa in opt(-500.0, 500.0), qa in opt(-500.0, 500.0), ta in opt(-500.0, 500.0),
        ) -> RawEcgMeasurement {
            RawEcgMeasurement {
                rr_interval: rr, p_onset: po, p_end: pe, qrs_onset: qo, qrs_end: qe,
                t_end: te, p_axis: pa, qrs_axis: qa, t_axis: ta,
            }
        }
    }

    proptest! {
        #[test]
        fn cleaning_is_idempotent(raw in raw_strategy()) {
            let once = clean_measurements(&raw);
            prop_assert_eq!(clean_measurements(&once), once);
        }

        #[test]
        fn axis_diff_symmetric_bounded_periodic(a in -720.0f64..720.0, b in -720.0f64..720.0) {
            let d = axis_diff(a, b);
            prop_assert!((0.0..=180.0).contains(&d));
            prop_assert_eq!(d, axis_diff(b, a));
            prop_assert!((axis_diff(a + 360.0, b) - d).abs() < 1e-9);
        }

        #[test]
        fn pt_telescopes(po in 0u32..200, pd in 1u32..200, pq in 1u32..200, qrs in 1u32..200, qrst in 1u32..600) {
            let p_onset = po as f64;
            let qrs_onset = p_onset + pd as f64 + pq as f64;
            let qrs_end = qrs_onset + qrs as f64;
            let raw = RawEcgMeasurement {
                p_onset: Some(p_onset),
                p_end: Some(p_onset + pd as f64),
                qrs_onset: Some(qrs_onset),
                qrs_end: Some(qrs_end),
                t_end: Some(qrs_end + qrst as f64),
                ..complete()
            };
            let fv = derive_features(&raw, None, None);
            let sum = fv.get(Feature::PrInterval).unwrap()
                + fv.get(Feature::QrsDuration).unwrap()
                + fv.get(Feature::QrstInterval).unwrap();
            prop_assert_eq!(fv.get(Feature::PtInterval).unwrap(), sum);
        }

        #[test]
        fn derived_missing_when_ingredient_missing(raw in raw_strategy()) {
            let fv = derive_features(&clean_measurements(&raw), None, None);
            if let Some(qtc) = fv.get(Feature::Qtc) {
                prop_assert!(qtc > 0.0);
            }
            if raw.qrs_onset.is_none() {
                prop_assert!(fv.get(Feature::QtInterval).is_none());
            }
            if raw.t_axis.is_none() {
                prop_assert!(fv.get(Feature::QrsTAxisDiff).is_none());
                prop_assert!(fv.get(Feature::PTAxisDiff).is_none());
            }
        }

        #[test]
        fn qtc_identity_at_one_second(qt in 1.0f64..1000.0) {
            prop_assert_eq!(bazett_qtc(qt, 1000.0), Some(qt));
        }
    }
}
