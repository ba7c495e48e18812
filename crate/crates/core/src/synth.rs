//! Synthetic cohorts with known feature→label mechanisms.
//!
//! Raw fiducials are drawn so the derived features land near the study
//! population's medians and IQRs. Planted labels are logistic in
//! standardized derived features, computed before any masking, so the
//! ground truth is exact and missingness is independent of the labels.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boosting::sigmoid;
use crate::error::{Error, Result};
use crate::features::{derive_features, Feature, FeatureMatrix, FeatureVector, N_FEATURES};
use crate::ingestion::{format_timestamp, CxrStudy, Demographics, EcgStudy, RawEcgMeasurement, Sex};

/// Median and IQR width of each feature in the reference population, in
/// [`Feature::ALL`] order. Planted coefficients act on `(x - median) / iqr`.
pub const REFERENCE_SCALE: [(f64, f64); N_FEATURES] = [
    (740.0, 258.0), // rr_interval
    (52.0, 31.0),   // p_axis
    (14.0, 63.0),   // qrs_axis
    (43.0, 54.0),   // t_axis
    (110.0, 24.0),  // p_duration
    (93.0, 22.0),   // qrs_duration
    (156.0, 38.0),  // pr_interval
    (384.0, 68.0),  // qt_interval
    (284.0, 62.0),  // qrst_interval
    (542.0, 86.0),  // pt_interval
    (445.0, 48.0),  // qtc
    (0.14, 0.05),   // p_rr_ratio
    (0.13, 0.05),   // qrs_rr_ratio
    (0.53, 0.11),   // qt_rr_ratio
    (0.41, 0.11),   // pr_qt_ratio
    (34.0, 47.0),   // p_qrs_axis_diff
    (43.0, 83.0),   // qrs_t_axis_diff
    (25.0, 38.0),   // p_t_axis_diff
    (66.0, 25.0),   // age
    (1.5, 2.0),     // age_bin
    (0.5, 1.0),     // sex
];

/// Value written in place of a measurement to mimic a machine-read outlier.
pub const IMPLAUSIBLE_VALUE: f64 = 29999.0;

const RAW_FIELDS: [&str; 9] = [
    "rr_interval",
    "p_onset",
    "p_end",
    "qrs_onset",
    "qrs_end",
    "t_end",
    "p_axis",
    "qrs_axis",
    "t_axis",
];

const PATIENT_BASE: u64 = 10_000_000;
const ECG_BASE: u64 = 40_000_000;
const CXR_BASE: u64 = 50_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LabelSpec {
    /// Bernoulli(sigmoid(intercept + Σ β·z)) over standardized features.
    Planted {
        name: String,
        intercept: f64,
        #[serde(default)]
        coefficients: BTreeMap<String, f64>,
    },
    /// Bernoulli(prevalence), independent of everything else.
    Noise { name: String, prevalence: f64 },
}

impl LabelSpec {
    pub fn name(&self) -> &str {
        match self {
            LabelSpec::Planted { name, .. } | LabelSpec::Noise { name, .. } => name,
        }
    }
}

/// Labels with a strong planted signal plus one pure-noise label.
pub fn strong_signal_presets() -> Vec<LabelSpec> {
    let planted = |name: &str, intercept: f64, coefs: &[(&str, f64)]| LabelSpec::Planted {
        name: name.into(),
        intercept,
        coefficients: coefs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
    };
    vec![
        planted(
            "Osteopenia",
            -1.5,
            &[("age", 3.0), ("pr_qt_ratio", -1.5), ("qrs_t_axis_diff", -1.5)],
        ),
        planted("Kyphosis", -1.5, &[("age", 2.5), ("sex", -2.0), ("qtc", 1.5)]),
        planted(
            "Emphysema",
            -1.5,
            &[("p_axis", 2.5), ("rr_interval", -2.0), ("qrs_duration", -1.0)],
        ),
        planted(
            "Calcification of the Aorta",
            -1.5,
            &[("age", 3.5), ("qt_interval", 1.0), ("p_t_axis_diff", 1.0)],
        ),
        LabelSpec::Noise {
            name: "Fissure".into(),
            prevalence: 0.2,
        },
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountRange {
    pub min: usize,
    pub max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub seed: u64,
    pub ecgs_per_patient: CountRange,
    pub cxrs_per_patient: CountRange,
    /// Share of radiographs placed within 20 h after an ECG; the rest fall
    /// 30 h to 6 days after one.
    pub paired_fraction: f64,
    /// Per raw measurement probability of being blank.
    pub missingness: BTreeMap<String, f64>,
    /// Per measurement probability of an out-of-range value.
    pub implausible_rate: f64,
    pub labels: Vec<LabelSpec>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let missingness = RAW_FIELDS
            .iter()
            .map(|f| {
                let rate = if f.starts_with("p_") { 0.05 } else { 0.02 };
                (f.to_string(), rate)
            })
            .collect();
        Self {
            n_patients: 10_000,
            seed: 42,
            ecgs_per_patient: CountRange { min: 1, max: 3 },
            cxrs_per_patient: CountRange { min: 1, max: 3 },
            paired_fraction: 0.9,
            missingness,
            implausible_rate: 0.002,
            labels: strong_signal_presets(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let rate = |field: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(field, "must lie in [0, 1)"))
            }
        };
        if self.n_patients < 20 {
            return Err(Error::config("synth.n_patients", "needs at least 20 patients"));
        }
        for (field, r) in [
            ("synth.ecgs_per_patient", self.ecgs_per_patient),
            ("synth.cxrs_per_patient", self.cxrs_per_patient),
        ] {
            if r.min == 0 || r.min > r.max {
                return Err(Error::config(field, "needs 1 <= min <= max"));
            }
        }
        if !(0.0..=1.0).contains(&self.paired_fraction) {
            return Err(Error::config("synth.paired_fraction", "must lie in [0, 1]"));
        }
        for (field, &r) in &self.missingness {
            if !RAW_FIELDS.contains(&field.as_str()) {
                return Err(Error::config(
                    format!("synth.missingness.{field}"),
                    "not a raw measurement",
                ));
            }
            rate(&format!("synth.missingness.{field}"), r)?;
        }
        rate("synth.implausible_rate", self.implausible_rate)?;
        if self.labels.is_empty() {
            return Err(Error::config("synth.labels", "at least one label is required"));
        }
        let mut seen = BTreeSet::new();
        for (i, label) in self.labels.iter().enumerate() {
            let at = format!("synth.labels[{i}]");
            if label.name().trim().is_empty() || !seen.insert(label.name()) {
                return Err(Error::config(at, "label names must be non-empty and unique"));
            }
            match label {
                LabelSpec::Planted {
                    intercept,
                    coefficients,
                    ..
                } => {
                    if !intercept.is_finite() {
                        return Err(Error::config(format!("{at}.intercept"), "must be finite"));
                    }
                    for (f, b) in coefficients {
                        if Feature::from_name(f).is_none() {
                            return Err(Error::config(format!("{at}.coefficients.{f}"), "unknown feature"));
                        }
                        if !b.is_finite() {
                            return Err(Error::config(format!("{at}.coefficients.{f}"), "must be finite"));
                        }
                    }
                }
                LabelSpec::Noise { prevalence, .. } => {
                    if !(*prevalence > 0.0 && *prevalence < 1.0) {
                        return Err(Error::config(
                            format!("{at}.prevalence"),
                            "unsatisfiable: prevalence must lie in (0, 1)",
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn label_names(&self) -> Vec<String> {
        self.labels.iter().map(|l| l.name().to_string()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestLabel {
    pub name: String,
    pub kind: String,
    pub intercept: Option<f64>,
    pub coefficients: BTreeMap<String, f64>,
    pub prevalence: Option<f64>,
    pub empirical_prevalence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub feature: String,
    pub center: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub seed: u64,
    pub n_patients: usize,
    pub n_ecgs: usize,
    pub n_cxrs: usize,
    pub labels: Vec<ManifestLabel>,
    pub standardization: Vec<Standardization>,
}

#[derive(Debug, Clone)]
pub struct SynthCohort {
    pub ecgs: Vec<EcgStudy>,
    pub cxrs: Vec<CxrStudy>,
    pub demographics: BTreeMap<String, Demographics>,
    /// Unmasked features of each radiograph's anchor ECG, aligned with `cxrs`.
    pub true_features: Vec<FeatureVector>,
    pub manifest: SynthManifest,
}

/// File names written by [`SynthCohort::write`].
pub const ECG_FILE: &str = "ecg.csv";
pub const CXR_FILE: &str = "cxr_labels.csv";
pub const DEMOGRAPHICS_FILE: &str = "demographics.csv";
pub const MANIFEST_FILE: &str = "synth_manifest.json";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthPaths {
    pub ecg: PathBuf,
    pub cxr: PathBuf,
    pub demographics: PathBuf,
    pub manifest: PathBuf,
}

impl SynthPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            ecg: dir.join(ECG_FILE),
            cxr: dir.join(CXR_FILE),
            demographics: dir.join(DEMOGRAPHICS_FILE),
            manifest: dir.join(MANIFEST_FILE),
        }
    }
}

/// Standardized planted score for one label on a feature vector; missing
/// inputs contribute nothing.
pub fn planted_margin(intercept: f64, coefficients: &BTreeMap<String, f64>, fv: &FeatureVector) -> f64 {
    coefficients.iter().fold(intercept, |acc, (name, beta)| {
        let f = Feature::from_name(name).expect("validated feature name");
        let (center, scale) = REFERENCE_SCALE[f.index()];
        match fv.get(f) {
            Some(x) => acc + beta * (x - center) / scale,
            None => acc,
        }
    })
}

struct PatientDraw {
    demo: Demographics,
    ecgs: Vec<(DateTime<Utc>, RawEcgMeasurement)>,
    /// (anchor ecg index, time, labels)
    cxrs: Vec<(usize, DateTime<Utc>, Vec<bool>)>,
    truth: Vec<FeatureVector>,
}

struct Fiducials {
    rr: LogNormal<f64>,
    p_onset: Normal<f64>,
    p_duration: Normal<f64>,
    pr: Normal<f64>,
    qrs: LogNormal<f64>,
    qtc: Normal<f64>,
    p_axis: Normal<f64>,
    qrs_axis: Normal<f64>,
    t_axis: Normal<f64>,
    age: Normal<f64>,
}

impl Fiducials {
    fn new() -> Self {
        let n = |m, s| Normal::new(m, s).expect("valid normal");
        let ln = |median: f64, s| LogNormal::new(median.ln(), s).expect("valid lognormal");
        Self {
            rr: ln(740.0, 0.26),
            p_onset: n(40.0, 8.0),
            p_duration: n(108.0, 18.0),
            pr: n(157.0, 28.0),
            qrs: ln(94.0, 0.17),
            qtc: n(447.0, 36.0),
            p_axis: n(51.0, 23.0),
            qrs_axis: n(15.0, 47.0),
            t_axis: n(43.0, 40.0),
            age: n(65.5, 18.5),
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> RawEcgMeasurement {
        let rr = self.rr.sample(rng).round().max(250.0);
        let p_onset = self.p_onset.sample(rng).round().max(0.0);
        let p_duration = self.p_duration.sample(rng).round().max(20.0);
        let pr = self.pr.sample(rng).round().max(60.0);
        let qrs = self.qrs.sample(rng).round().max(40.0);
        let qt = (self.qtc.sample(rng).max(250.0) * (rr / 1000.0).sqrt()).round();
        let qrs_onset = p_onset + pr;
        RawEcgMeasurement {
            rr_interval: Some(rr),
            p_onset: Some(p_onset),
            p_end: Some(p_onset + p_duration),
            qrs_onset: Some(qrs_onset),
            qrs_end: Some(qrs_onset + qrs),
            t_end: Some(qrs_onset + qt.max(qrs + 40.0)),
            p_axis: Some(self.p_axis.sample(rng).round()),
            qrs_axis: Some(self.qrs_axis.sample(rng).round()),
            t_axis: Some(self.t_axis.sample(rng).round()),
        }
    }

    fn age(&self, rng: &mut ChaCha8Rng) -> f64 {
        loop {
            let a = self.age.sample(rng).round();
            if (18.0..=99.0).contains(&a) {
                return a;
            }
        }
    }
}

fn field_mut<'r>(raw: &'r mut RawEcgMeasurement, name: &str) -> &'r mut Option<f64> {
    match name {
        "rr_interval" => &mut raw.rr_interval,
        "p_onset" => &mut raw.p_onset,
        "p_end" => &mut raw.p_end,
        "qrs_onset" => &mut raw.qrs_onset,
        "qrs_end" => &mut raw.qrs_end,
        "t_end" => &mut raw.t_end,
        "p_axis" => &mut raw.p_axis,
        "qrs_axis" => &mut raw.qrs_axis,
        "t_axis" => &mut raw.t_axis,
        _ => unreachable!("validated raw field"),
    }
}

fn draw_label(spec: &LabelSpec, fv: &FeatureVector, rng: &mut ChaCha8Rng) -> bool {
    let p = match spec {
        LabelSpec::Planted {
            intercept,
            coefficients,
            ..
        } => sigmoid(planted_margin(*intercept, coefficients, fv)),
        LabelSpec::Noise { prevalence, .. } => *prevalence,
    };
    rng.random::<f64>() < p
}

fn draw_patient(config: &SynthConfig, fid: &Fiducials, index: u64) -> PatientDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index);

    let demo = Demographics {
        age: Some(fid.age(&mut rng)),
        sex: Some(if rng.random::<f64>() < 0.528 { Sex::Male } else { Sex::Female }),
    };
    let n_ecg = rng.random_range(config.ecgs_per_patient.min..=config.ecgs_per_patient.max);
    let n_cxr = rng.random_range(config.cxrs_per_patient.min..=config.cxrs_per_patient.max);

    let origin = Utc.with_ymd_and_hms(2150, 1, 1, 0, 0, 0).unwrap();
    let mut t = origin + Duration::seconds(rng.random_range(0..3650 * 86_400));
    let mut ecgs = Vec::with_capacity(n_ecg);
    let mut truth = Vec::with_capacity(n_ecg);
    for _ in 0..n_ecg {
        let clean = fid.draw(&mut rng);
        truth.push(derive_features(&clean, demo.age, demo.sex));
        let mut raw = clean;
        for field in RAW_FIELDS {
            let slot = field_mut(&mut raw, field);
            let miss = config.missingness.get(field).copied().unwrap_or(0.0);
            if rng.random::<f64>() < miss {
                *slot = None;
            } else if rng.random::<f64>() < config.implausible_rate {
                *slot = Some(IMPLAUSIBLE_VALUE);
            }
        }
        ecgs.push((t, raw));
        // gaps of at least a week keep each radiograph's anchor unambiguous
        t += Duration::seconds(rng.random_range(7 * 86_400..180 * 86_400));
    }

    let mut cxrs = Vec::with_capacity(n_cxr);
    let mut cxr_truth = Vec::with_capacity(n_cxr);
    for _ in 0..n_cxr {
        let anchor = rng.random_range(0..n_ecg);
        let offset = if rng.random::<f64>() < config.paired_fraction {
            rng.random_range(0..20 * 3600)
        } else {
            rng.random_range(30 * 3600..6 * 86_400)
        };
        let fv = truth[anchor];
        let labels = config.labels.iter().map(|l| draw_label(l, &fv, &mut rng)).collect();
        cxrs.push((anchor, ecgs[anchor].0 + Duration::seconds(offset), labels));
        cxr_truth.push(fv);
    }
    PatientDraw {
        demo,
        ecgs,
        cxrs,
        truth: cxr_truth,
    }
}

/// Draws a cohort. Each patient uses its own random stream, so the output
/// does not depend on thread scheduling.
pub fn generate(config: &SynthConfig) -> Result<SynthCohort> {
    config.validate()?;
    let fid = Fiducials::new();
    let draws: Vec<PatientDraw> = (0..config.n_patients as u64)
        .into_par_iter()
        .map(|i| draw_patient(config, &fid, i))
        .collect();

    let names = config.label_names();
    let mut ecgs = Vec::new();
    let mut cxrs = Vec::new();
    let mut true_features = Vec::new();
    let mut demographics = BTreeMap::new();
    let mut positives = vec![0usize; names.len()];
    for (i, draw) in draws.into_iter().enumerate() {
        let patient_id = (PATIENT_BASE + i as u64).to_string();
        let first_ecg = ecgs.len();
        for (at, raw) in draw.ecgs {
            ecgs.push(EcgStudy {
                patient_id: patient_id.clone(),
                study_id: (ECG_BASE + ecgs.len() as u64).to_string(),
                acquired_at: at,
                raw,
            });
        }
        debug_assert!(ecgs.len() > first_ecg);
        for ((_, at, flags), fv) in draw.cxrs.into_iter().zip(draw.truth) {
            for (k, &f) in flags.iter().enumerate() {
                positives[k] += f as usize;
            }
            cxrs.push(CxrStudy {
                patient_id: patient_id.clone(),
                study_id: (CXR_BASE + cxrs.len() as u64).to_string(),
                reported_at: at,
                labels: names.iter().cloned().zip(flags).collect(),
            });
            true_features.push(fv);
        }
        demographics.insert(patient_id, draw.demo);
    }

    let labels = config
        .labels
        .iter()
        .zip(&positives)
        .map(|(spec, &pos)| {
            let empirical_prevalence = pos as f64 / cxrs.len() as f64;
            match spec {
                LabelSpec::Planted {
                    name,
                    intercept,
                    coefficients,
                } => ManifestLabel {
                    name: name.clone(),
                    kind: "planted".into(),
                    intercept: Some(*intercept),
                    coefficients: coefficients.clone(),
                    prevalence: None,
                    empirical_prevalence,
                },
                LabelSpec::Noise { name, prevalence } => ManifestLabel {
                    name: name.clone(),
                    kind: "noise".into(),
                    intercept: None,
                    coefficients: BTreeMap::new(),
                    prevalence: Some(*prevalence),
                    empirical_prevalence,
                },
            }
        })
        .collect();
    let standardization = Feature::ALL
        .iter()
        .map(|f| Standardization {
            feature: f.name().to_string(),
            center: REFERENCE_SCALE[f.index()].0,
            scale: REFERENCE_SCALE[f.index()].1,
        })
        .collect();
    let manifest = SynthManifest {
        seed: config.seed,
        n_patients: config.n_patients,
        n_ecgs: ecgs.len(),
        n_cxrs: cxrs.len(),
        labels,
        standardization,
    };
    Ok(SynthCohort {
        ecgs,
        cxrs,
        demographics,
        true_features,
        manifest,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))
}

impl SynthCohort {
    /// Writes the tables in the default ingestion column layout.
    pub fn write(&self, dir: &Path) -> Result<SynthPaths> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = SynthPaths::in_dir(dir);

        let mut w = csv_writer(&paths.ecg)?;
        let mut header = vec!["subject_id", "study_id", "ecg_time"];
        header.extend(RAW_FIELDS);
        w.write_record(&header).map_err(|e| Error::csv(&paths.ecg, e))?;
        for e in &self.ecgs {
            let r = &e.raw;
            let mut rec = vec![e.patient_id.clone(), e.study_id.clone(), format_timestamp(&e.acquired_at)];
            rec.extend(
                [
                    r.rr_interval,
                    r.p_onset,
                    r.p_end,
                    r.qrs_onset,
                    r.qrs_end,
                    r.t_end,
                    r.p_axis,
                    r.qrs_axis,
                    r.t_axis,
                ]
                .map(fmt_opt),
            );
            w.write_record(&rec).map_err(|e| Error::csv(&paths.ecg, e))?;
        }
        w.flush().map_err(|e| Error::io(&paths.ecg, e))?;

        let names: Vec<String> = self.manifest.labels.iter().map(|l| l.name.clone()).collect();
        let mut w = csv_writer(&paths.cxr)?;
        let mut header = vec!["subject_id".to_string(), "study_id".into(), "study_time".into()];
        header.extend(names.iter().cloned());
        w.write_record(&header).map_err(|e| Error::csv(&paths.cxr, e))?;
        for c in &self.cxrs {
            let mut rec = vec![c.patient_id.clone(), c.study_id.clone(), format_timestamp(&c.reported_at)];
            rec.extend(names.iter().map(|n| if c.labels[n] { "1" } else { "0" }.to_string()));
            w.write_record(&rec).map_err(|e| Error::csv(&paths.cxr, e))?;
        }
        w.flush().map_err(|e| Error::io(&paths.cxr, e))?;

        let mut w = csv_writer(&paths.demographics)?;
        w.write_record(["subject_id", "anchor_age", "gender"])
            .map_err(|e| Error::csv(&paths.demographics, e))?;
        for (id, d) in &self.demographics {
            w.write_record([
                id.clone(),
                fmt_opt(d.age),
                d.sex.map(|s| s.as_str().to_string()).unwrap_or_default(),
            ])
            .map_err(|e| Error::csv(&paths.demographics, e))?;
        }
        w.flush().map_err(|e| Error::io(&paths.demographics, e))?;

        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes") + "\n";
        fs::write(&paths.manifest, json).map_err(|e| Error::io(&paths.manifest, e))?;
        Ok(paths)
    }
}

/// Generic planted design: `n_informative` standard-normal columns with
/// unit logistic weight, `n_noise` independent ones, shuffled into a
/// seed-determined column order.
pub struct PlantedMatrix {
    pub matrix: FeatureMatrix,
    pub labels: Vec<bool>,
    pub informative: Vec<String>,
}

pub fn planted_matrix(n: usize, n_informative: usize, n_noise: usize, seed: u64) -> Result<PlantedMatrix> {
    if n == 0 || n_informative + n_noise == 0 {
        return Err(Error::InvalidArgument("planted matrix needs rows and columns".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names: Vec<String> = (0..n_informative)
        .map(|k| format!("informative_{k}"))
        .chain((0..n_noise).map(|k| format!("noise_{k}")))
        .collect();
    rand::seq::SliceRandom::shuffle(names.as_mut_slice(), &mut rng);
    let weights: Vec<f64> = names
        .iter()
        .map(|n| if n.starts_with("informative") { 1.0 } else { 0.0 })
        .collect();
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = (0..names.len()).map(|_| std_normal.sample(&mut rng)).collect();
        let eta: f64 = row.iter().zip(&weights).map(|(x, w)| x * w).sum();
        labels.push(rng.random::<f64>() < sigmoid(eta - 0.5));
        rows.push(row.into_iter().map(Some).collect());
    }
    let informative = names.iter().filter(|n| n.starts_with("informative")).cloned().collect();
    Ok(PlantedMatrix {
        matrix: FeatureMatrix::new(names, rows)?,
        labels,
        informative,
    })
}

/// Looks up rows of a cohort by patient id; convenient for oracle tests.
pub fn index_by_patient(cohort: &SynthCohort) -> HashMap<&str, Vec<usize>> {
    let mut map: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, c) in cohort.cxrs.iter().enumerate() {
        map.entry(c.patient_id.as_str()).or_default().push(i);
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluate::auroc;
    use crate::features::clean_measurements;
    use crate::ingestion::{pair_ecg_cxr, parse_cxr_labels, parse_demographics, parse_ecg_table, Delimiter};

    fn small(n: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            n_patients: n,
            seed,
            ..SynthConfig::default()
        }
    }

    fn median(mut v: Vec<f64>) -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let m = v.len() / 2;
        if v.len().is_multiple_of(2) {
            (v[m - 1] + v[m]) / 2.0
        } else {
            v[m]
        }
    }

    #[test]
    fn derived_medians_fall_inside_reference_iqrs() {
        let cohort = generate(&small(10_000, 42)).unwrap();
        let fvs: Vec<FeatureVector> = cohort
            .ecgs
            .iter()
            .map(|e| {
                let d = &cohort.demographics[&e.patient_id];
                derive_features(&clean_measurements(&e.raw), d.age, d.sex)
            })
            .collect();
        let iqr = |f: Feature| -> (f64, f64) {
            match f {
                Feature::RrInterval => (612.0, 870.0),
                Feature::PAxis => (34.0, 65.0),
                Feature::QrsAxis => (-15.0, 48.0),
                Feature::TAxis => (16.0, 70.0),
                Feature::PDuration => (96.0, 120.0),
                Feature::QrsDuration => (84.0, 106.0),
                Feature::PrInterval => (138.0, 176.0),
                Feature::QtInterval => (350.0, 418.0),
                Feature::QrstInterval => (254.0, 316.0),
                Feature::PtInterval => (500.0, 586.0),
                Feature::Qtc => (424.0, 472.0),
                Feature::PRrRatio => (0.12, 0.17),
                Feature::QrsRrRatio => (0.11, 0.16),
                Feature::QtRrRatio => (0.47, 0.58),
                Feature::PrQtRatio => (0.36, 0.47),
                Feature::PQrsAxisDiff => (15.0, 62.0),
                Feature::QrsTAxisDiff => (18.0, 101.0),
                Feature::PTAxisDiff => (11.0, 49.0),
                Feature::Age => (53.0, 78.0),
                Feature::AgeBin => (0.0, 3.0),
                Feature::Sex => (0.0, 1.0),
            }
        };
        for f in Feature::ALL {
            let v: Vec<f64> = fvs.iter().filter_map(|fv| fv.get(f)).collect();
            let m = median(v);
            let (lo, hi) = iqr(f);
            assert!((lo..=hi).contains(&m), "{} median {m} outside [{lo}, {hi}]", f.name());
        }
        let males = cohort.demographics.values().filter(|d| d.sex == Some(Sex::Male)).count();
        assert!((males as f64 / 10_000.0 - 0.528).abs() < 0.02);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&small(200, 7)).unwrap();
        let b = generate(&small(200, 7)).unwrap();
        assert_eq!(a.ecgs, b.ecgs);
        assert_eq!(a.cxrs, b.cxrs);
        assert_eq!(a.manifest, b.manifest);
        let c = generate(&small(200, 8)).unwrap();
        assert_ne!(a.ecgs, c.ecgs);
    }

    #[test]
    fn zero_coefficients_give_intercept_prevalence() {
        let mut cfg = small(20_000, 3);
        cfg.cxrs_per_patient = CountRange { min: 1, max: 1 };
        cfg.labels = vec![LabelSpec::Planted {
            name: "flat".into(),
            intercept: -1.0,
            coefficients: [("age".to_string(), 0.0)].into(),
        }];
        let cohort = generate(&cfg).unwrap();
        let p = cohort.manifest.labels[0].empirical_prevalence;
        assert!((p - sigmoid(-1.0)).abs() < 0.02, "{p}");
    }

    #[test]
    fn unsatisfiable_configs_rejected() {
        let mut cfg = small(100, 1);
        cfg.labels = vec![LabelSpec::Noise {
            name: "x".into(),
            prevalence: 0.0,
        }];
        let err = generate(&cfg).unwrap_err();
        assert!(err.to_string().contains("prevalence"), "{err}");
        assert!(generate(&small(19, 1)).is_err());
        let mut cfg = small(100, 1);
        cfg.missingness.insert("qrs_onset".into(), 1.0);
        assert!(generate(&cfg).is_err());
        let mut cfg = small(100, 1);
        cfg.labels = vec![LabelSpec::Planted {
            name: "x".into(),
            intercept: 0.0,
            coefficients: [("heart_rate".to_string(), 1.0)].into(),
        }];
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn pairing_fraction_matches_design() {
        let cohort = generate(&small(2_000, 11)).unwrap();
        let pairing = pair_ecg_cxr(&cohort.ecgs, &cohort.cxrs, Duration::hours(24)).unwrap();
        let frac = pairing.samples.len() as f64 / cohort.cxrs.len() as f64;
        assert!((frac - 0.9).abs() < 0.03, "{frac}");
        assert!(pairing.samples.iter().all(|s| s.delta_seconds < 20 * 3600));
    }

    #[test]
    fn written_tables_round_trip_through_ingestion() {
        let cohort = generate(&small(60, 5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = cohort.write(dir.path()).unwrap();
        let ecg = parse_ecg_table(&paths.ecg, &Default::default(), Delimiter::Comma).unwrap();
        assert_eq!(ecg.studies, cohort.ecgs);
        let schema: Vec<String> = cohort.manifest.labels.iter().map(|l| l.name.clone()).collect();
        let cxr = parse_cxr_labels(&paths.cxr, &schema, &Default::default(), Delimiter::Comma).unwrap();
        assert_eq!(cxr.studies, cohort.cxrs);
        let demo = parse_demographics(&paths.demographics, &Default::default(), Delimiter::Comma).unwrap();
        assert_eq!(demo.patients.len(), 60);
        for (id, d) in &cohort.demographics {
            assert_eq!(&demo.patients[id], d);
        }
        let m: SynthManifest = serde_json::from_str(&fs::read_to_string(&paths.manifest).unwrap()).unwrap();
        assert_eq!(m, cohort.manifest);
    }

    /// Newton-Raphson logistic regression on a handful of columns.
    fn fit_logistic(x: &[Vec<f64>], y: &[bool]) -> Vec<f64> {
        let k = x[0].len() + 1;
        let mut w = vec![0.0; k];
        for _ in 0..25 {
            let mut grad = vec![0.0; k];
            let mut hess = vec![vec![0.0; k]; k];
            for (row, &t) in x.iter().zip(y) {
                let z: Vec<f64> = std::iter::once(1.0).chain(row.iter().copied()).collect();
                let p = sigmoid(z.iter().zip(&w).map(|(a, b)| a * b).sum());
                for i in 0..k {
                    grad[i] += (p - t as u8 as f64) * z[i];
                    for j in 0..k {
                        hess[i][j] += p * (1.0 - p) * z[i] * z[j];
                    }
                }
            }
            // Gaussian elimination on hess * step = grad
            let mut a: Vec<Vec<f64>> = hess.iter().zip(&grad).map(|(r, g)| {
                let mut r = r.clone();
                r.push(*g);
                r
            }).collect();
            for c in 0..k {
                let p = (c..k).max_by(|&i, &j| a[i][c].abs().partial_cmp(&a[j][c].abs()).unwrap()).unwrap();
                a.swap(c, p);
                for r in 0..k {
                    if r != c {
                        let f = a[r][c] / a[c][c];
                        let pivot = a[c].clone();
                        for (dst, src) in a[r][c..=k].iter_mut().zip(&pivot[c..=k]) {
                            *dst -= f * src;
                        }
                    }
                }
            }
            for i in 0..k {
                w[i] -= a[i][k] / a[i][i];
            }
        }
        w
    }

    #[test]
    fn strong_presets_have_a_learnable_ceiling() {
        let cohort = generate(&small(10_000, 42)).unwrap();
        let by_patient = index_by_patient(&cohort);
        let mut patients: Vec<&str> = by_patient.keys().copied().collect();
        patients.sort_unstable();
        let (fit_p, hold_p) = patients.split_at(patients.len() / 2);
        let rows = |ps: &[&str]| -> Vec<usize> {
            ps.iter().flat_map(|p| by_patient[p].iter().copied()).collect()
        };
        let (fit_rows, hold_rows) = (rows(fit_p), rows(hold_p));
        for spec in &cohort.manifest.labels {
            if spec.kind != "planted" {
                continue;
            }
            let feats: Vec<Feature> = spec.coefficients.keys().map(|n| Feature::from_name(n).unwrap()).collect();
            let design = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<bool>) {
                idx.iter()
                    .map(|&i| {
                        let fv = &cohort.true_features[i];
                        let x = feats
                            .iter()
                            .map(|&f| {
                                let (c, s) = REFERENCE_SCALE[f.index()];
                                (fv.get(f).unwrap() - c) / s
                            })
                            .collect();
                        (x, cohort.cxrs[i].labels[&spec.name])
                    })
                    .unzip()
            };
            let (fx, fy) = design(&fit_rows);
            let (hx, hy) = design(&hold_rows);
            let w = fit_logistic(&fx, &fy);
            let scores: Vec<f64> = hx
                .iter()
                .map(|r| w[0] + r.iter().zip(&w[1..]).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let a = auroc(&scores, &hy).unwrap();
            assert!(a >= 0.80, "{} ceiling {a}", spec.name);
        }
    }

    #[test]
    fn planted_matrix_layout() {
        let pm = planted_matrix(500, 5, 15, 1).unwrap();
        assert_eq!(pm.matrix.n_cols(), 20);
        assert_eq!(pm.informative.len(), 5);
        let pos = pm.labels.iter().filter(|&&y| y).count();
        assert!(pos > 100 && pos < 400);
        let again = planted_matrix(500, 5, 15, 1).unwrap();
        assert_eq!(pm.matrix, again.matrix);
    }
}
