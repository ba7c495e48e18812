//! Reading ECG measurement and radiograph label tables, pairing each
//! radiograph with its closest preceding ECG, and assigning patients to
//! train/validation/test folds.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::path::Path;

use chrono::{DateTime, Duration, NaiveDateTime, Timelike, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::age_bin;

/// The nine machine-read fiducial measurements of one ECG.
///
/// Times are in milliseconds on a common per-beat axis, axes in degrees.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RawEcgMeasurement {
    pub rr_interval: Option<f64>,
    pub p_onset: Option<f64>,
    pub p_end: Option<f64>,
    pub qrs_onset: Option<f64>,
    pub qrs_end: Option<f64>,
    pub t_end: Option<f64>,
    pub p_axis: Option<f64>,
    pub qrs_axis: Option<f64>,
    pub t_axis: Option<f64>,
}

impl RawEcgMeasurement {
    pub fn populated(&self) -> usize {
        [
            self.rr_interval,
            self.p_onset,
            self.p_end,
            self.qrs_onset,
            self.qrs_end,
            self.t_end,
            self.p_axis,
            self.qrs_axis,
            self.t_axis,
        ]
        .iter()
        .filter(|v| v.is_some())
        .count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EcgStudy {
    pub patient_id: String,
    pub study_id: String,
    pub acquired_at: DateTime<Utc>,
    pub raw: RawEcgMeasurement,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CxrStudy {
    pub patient_id: String,
    pub study_id: String,
    pub reported_at: DateTime<Utc>,
    /// Presence of every label in the schema.
    pub labels: BTreeMap<String, bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Female,
    Male,
}

impl Sex {
    pub fn parse(cell: &str) -> Option<Sex> {
        match cell.trim().to_ascii_lowercase().as_str() {
            "f" | "female" | "0" => Some(Sex::Female),
            "m" | "male" | "1" => Some(Sex::Male),
            _ => None,
        }
    }

    pub fn code(self) -> f64 {
        match self {
            Sex::Female => 0.0,
            Sex::Male => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Sex::Female => "F",
            Sex::Male => "M",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Demographics {
    pub age: Option<f64>,
    pub sex: Option<Sex>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Delimiter {
    #[default]
    Comma,
    Tab,
}

impl Delimiter {
    pub fn byte(self) -> u8 {
        match self {
            Delimiter::Comma => b',',
            Delimiter::Tab => b'\t',
        }
    }
}

/// Header names of the ECG measurement table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EcgColumns {
    pub patient_id: String,
    pub study_id: String,
    pub time: String,
    pub rr_interval: String,
    pub p_onset: String,
    pub p_end: String,
    pub qrs_onset: String,
    pub qrs_end: String,
    pub t_end: String,
    pub p_axis: String,
    pub qrs_axis: String,
    pub t_axis: String,
}

impl Default for EcgColumns {
    fn default() -> Self {
        Self {
            patient_id: "subject_id".into(),
            study_id: "study_id".into(),
            time: "ecg_time".into(),
            rr_interval: "rr_interval".into(),
            p_onset: "p_onset".into(),
            p_end: "p_end".into(),
            qrs_onset: "qrs_onset".into(),
            qrs_end: "qrs_end".into(),
            t_end: "t_end".into(),
            p_axis: "p_axis".into(),
            qrs_axis: "qrs_axis".into(),
            t_axis: "t_axis".into(),
        }
    }
}

/// Header names of the radiograph table. Label columns are named after the
/// labels themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CxrColumns {
    pub patient_id: String,
    pub study_id: String,
    pub time: String,
}

impl Default for CxrColumns {
    fn default() -> Self {
        Self {
            patient_id: "subject_id".into(),
            study_id: "study_id".into(),
            time: "study_time".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemographicsColumns {
    pub patient_id: String,
    pub age: String,
    pub sex: String,
}

impl Default for DemographicsColumns {
    fn default() -> Self {
        Self {
            patient_id: "subject_id".into(),
            age: "anchor_age".into(),
            sex: "gender".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EcgTable {
    pub studies: Vec<EcgStudy>,
    pub dropped: usize,
}

#[derive(Debug, Clone)]
pub struct CxrTable {
    pub studies: Vec<CxrStudy>,
    pub dropped: usize,
}

#[derive(Debug, Clone)]
pub struct DemographicsTable {
    pub patients: HashMap<String, Demographics>,
    pub dropped: usize,
}

/// Parses a timestamp in `YYYY-MM-DD HH:MM:SS` (optionally `T`-separated,
/// with fractional seconds) or RFC 3339 form, truncated to whole seconds.
pub fn parse_timestamp(cell: &str) -> Option<DateTime<Utc>> {
    let cell = cell.trim();
    if cell.is_empty() {
        return None;
    }
    let parsed = DateTime::parse_from_rfc3339(cell)
        .map(|dt| dt.with_timezone(&Utc))
        .ok()
        .or_else(|| {
            ["%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M"]
                .iter()
                .find_map(|fmt| NaiveDateTime::parse_from_str(cell, fmt).ok())
                .map(|naive| naive.and_utc())
        })?;
    parsed.with_nanosecond(0)
}

pub fn format_timestamp(ts: &DateTime<Utc>) -> String {
    ts.format("%Y-%m-%d %H:%M:%S").to_string()
}

fn parse_measure(cell: &str) -> Option<f64> {
    cell.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

fn open_reader(path: &Path, delimiter: Delimiter) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .delimiter(delimiter.byte())
        .has_headers(true)
        .flexible(true)
        .from_reader(file))
}

struct Header {
    index: HashMap<String, usize>,
}

impl Header {
    fn read(reader: &mut csv::Reader<File>, path: &Path) -> Result<Self> {
        let headers = reader.headers().map_err(|e| Error::csv(path, e))?;
        let index = headers
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim().to_string(), i))
            .collect();
        Ok(Self { index })
    }

    fn require(&self, path: &Path, field: &str, column: &str) -> Result<usize> {
        self.index
            .get(column)
            .copied()
            .ok_or_else(|| Error::MissingColumn {
                path: path.to_path_buf(),
                field: field.to_string(),
                column: column.to_string(),
            })
    }
}

fn cell(record: &csv::StringRecord, idx: usize) -> &str {
    record.get(idx).map(str::trim).unwrap_or("")
}

/// Reads the ECG measurement table.
///
/// Unparseable numeric cells become missing fields; rows without a patient
/// id or a valid timestamp are dropped and counted.
pub fn parse_ecg_table(path: &Path, columns: &EcgColumns, delimiter: Delimiter) -> Result<EcgTable> {
    let mut reader = open_reader(path, delimiter)?;
    let header = Header::read(&mut reader, path)?;
    let patient = header.require(path, "patient_id", &columns.patient_id)?;
    let study = header.require(path, "study_id", &columns.study_id)?;
    let time = header.require(path, "time", &columns.time)?;
    let measures = [
        ("rr_interval", &columns.rr_interval),
        ("p_onset", &columns.p_onset),
        ("p_end", &columns.p_end),
        ("qrs_onset", &columns.qrs_onset),
        ("qrs_end", &columns.qrs_end),
        ("t_end", &columns.t_end),
        ("p_axis", &columns.p_axis),
        ("qrs_axis", &columns.qrs_axis),
        ("t_axis", &columns.t_axis),
    ]
    .iter()
    .map(|(field, column)| header.require(path, field, column))
    .collect::<Result<Vec<_>>>()?;

    let mut studies = Vec::new();
    let mut dropped = 0;
    let mut seen = HashSet::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::csv(path, e))?;
        let patient_id = cell(&record, patient);
        let acquired_at = parse_timestamp(cell(&record, time));
        let (Some(acquired_at), false) = (acquired_at, patient_id.is_empty()) else {
            dropped += 1;
            continue;
        };
        let m = |k: usize| parse_measure(cell(&record, measures[k]));
        let raw = RawEcgMeasurement {
            rr_interval: m(0),
            p_onset: m(1),
            p_end: m(2),
            qrs_onset: m(3),
            qrs_end: m(4),
            t_end: m(5),
            p_axis: m(6),
            qrs_axis: m(7),
            t_axis: m(8),
        };
        let study_id = cell(&record, study).to_string();
        if !seen.insert((patient_id.to_string(), study_id.clone())) {
            return Err(Error::DuplicateStudy {
                patient_id: patient_id.to_string(),
                study_id,
            });
        }
        studies.push(EcgStudy {
            patient_id: patient_id.to_string(),
            study_id,
            acquired_at,
            raw,
        });
    }
    if studies.is_empty() {
        return Err(Error::NoRows {
            path: path.to_path_buf(),
            dropped,
        });
    }
    Ok(EcgTable { studies, dropped })
}

fn parse_flag(cell: &str) -> Option<bool> {
    match cell.trim() {
        "1" | "1.0" => Some(true),
        "0" | "0.0" => Some(false),
        _ => None,
    }
}

/// Reads the radiograph label table; label columns must hold 0 or 1.
///
/// Rows with any label outside {0, 1}, a missing patient id or an invalid
/// timestamp are dropped and counted.
pub fn parse_cxr_labels(
    path: &Path,
    schema: &[String],
    columns: &CxrColumns,
    delimiter: Delimiter,
) -> Result<CxrTable> {
    let mut reader = open_reader(path, delimiter)?;
    let header = Header::read(&mut reader, path)?;
    let patient = header.require(path, "patient_id", &columns.patient_id)?;
    let study = header.require(path, "study_id", &columns.study_id)?;
    let time = header.require(path, "time", &columns.time)?;
    let label_cols = schema
        .iter()
        .map(|label| header.require(path, "label", label))
        .collect::<Result<Vec<_>>>()?;

    let mut studies = Vec::new();
    let mut dropped = 0;
    let mut seen = HashSet::new();
    'rows: for record in reader.records() {
        let record = record.map_err(|e| Error::csv(path, e))?;
        let patient_id = cell(&record, patient);
        let Some(reported_at) = parse_timestamp(cell(&record, time)) else {
            dropped += 1;
            continue;
        };
        if patient_id.is_empty() {
            dropped += 1;
            continue;
        }
        let mut labels = BTreeMap::new();
        for (name, &col) in schema.iter().zip(&label_cols) {
            match parse_flag(cell(&record, col)) {
                Some(v) => {
                    labels.insert(name.clone(), v);
                }
                None => {
                    dropped += 1;
                    continue 'rows;
                }
            }
        }
        let study_id = cell(&record, study).to_string();
        if !seen.insert((patient_id.to_string(), study_id.clone())) {
            return Err(Error::DuplicateStudy {
                patient_id: patient_id.to_string(),
                study_id,
            });
        }
        studies.push(CxrStudy {
            patient_id: patient_id.to_string(),
            study_id,
            reported_at,
            labels,
        });
    }
    if studies.is_empty() {
        return Err(Error::NoRows {
            path: path.to_path_buf(),
            dropped,
        });
    }
    Ok(CxrTable { studies, dropped })
}

/// Reads per-patient age and sex. Unknown values are kept as missing; rows
/// without a patient id are dropped.
pub fn parse_demographics(
    path: &Path,
    columns: &DemographicsColumns,
    delimiter: Delimiter,
) -> Result<DemographicsTable> {
    let mut reader = open_reader(path, delimiter)?;
    let header = Header::read(&mut reader, path)?;
    let patient = header.require(path, "patient_id", &columns.patient_id)?;
    let age = header.require(path, "age", &columns.age)?;
    let sex = header.require(path, "sex", &columns.sex)?;

    let mut patients = HashMap::new();
    let mut dropped = 0;
    for record in reader.records() {
        let record = record.map_err(|e| Error::csv(path, e))?;
        let patient_id = cell(&record, patient);
        if patient_id.is_empty() {
            dropped += 1;
            continue;
        }
        let demo = Demographics {
            age: parse_measure(cell(&record, age)).filter(|a| *a >= 0.0),
            sex: Sex::parse(cell(&record, sex)),
        };
        patients.insert(patient_id.to_string(), demo);
    }
    if patients.is_empty() {
        return Err(Error::NoRows {
            path: path.to_path_buf(),
            dropped,
        });
    }
    Ok(DemographicsTable { patients, dropped })
}

/// One radiograph matched with an ECG of the same patient, by index into
/// the ECG and radiograph lists.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairedSample {
    pub ecg: usize,
    pub cxr: usize,
    /// Radiograph time minus ECG time, in seconds.
    pub delta_seconds: i64,
}

#[derive(Debug, Clone)]
pub struct Pairing {
    /// Ordered by radiograph (patient id, time, study id).
    pub samples: Vec<PairedSample>,
    pub unmatched: usize,
}

/// Pairs each radiograph with the same patient's latest ECG taken at or
/// before it and no more than `tolerance` earlier. Equidistant ECGs resolve
/// to the smaller study id. One ECG may serve several radiographs.
pub fn pair_ecg_cxr(ecgs: &[EcgStudy], cxrs: &[CxrStudy], tolerance: Duration) -> Result<Pairing> {
    if tolerance <= Duration::zero() {
        return Err(Error::InvalidArgument("pairing tolerance must be positive".into()));
    }
    if ecgs.is_empty() || cxrs.is_empty() {
        return Err(Error::InvalidArgument("pairing needs non-empty ECG and CXR lists".into()));
    }

    let mut by_patient: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, ecg) in ecgs.iter().enumerate() {
        by_patient.entry(ecg.patient_id.as_str()).or_default().push(i);
    }
    for list in by_patient.values_mut() {
        list.sort_by(|&a, &b| {
            (ecgs[a].acquired_at, &ecgs[a].study_id).cmp(&(ecgs[b].acquired_at, &ecgs[b].study_id))
        });
    }

    let mut order: Vec<usize> = (0..cxrs.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&cxrs[a], &cxrs[b]);
        (&x.patient_id, x.reported_at, &x.study_id).cmp(&(&y.patient_id, y.reported_at, &y.study_id))
    });

    let mut samples = Vec::new();
    let mut unmatched = 0;
    for ci in order {
        let cxr = &cxrs[ci];
        let matched = by_patient.get(cxr.patient_id.as_str()).and_then(|list| {
            // First ECG strictly after the radiograph; the one before it has
            // the latest admissible time.
            let after = list.partition_point(|&e| ecgs[e].acquired_at <= cxr.reported_at);
            if after == 0 {
                return None;
            }
            let latest = ecgs[list[after - 1]].acquired_at;
            // Earliest entry sharing that time has the smallest study id.
            let first = list[..after].partition_point(|&e| ecgs[e].acquired_at < latest);
            let ei = list[first];
            let delta = cxr.reported_at - ecgs[ei].acquired_at;
            (delta <= tolerance).then_some((ei, delta.num_seconds()))
        });
        match matched {
            Some((ecg, delta_seconds)) => samples.push(PairedSample {
                ecg,
                cxr: ci,
                delta_seconds,
            }),
            None => unmatched += 1,
        }
    }
    Ok(Pairing { samples, unmatched })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fold {
    Train,
    Validation,
    Test,
}

impl Fold {
    pub const ALL: [Fold; 3] = [Fold::Train, Fold::Validation, Fold::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Fold::Train => "train",
            Fold::Validation => "validation",
            Fold::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Fold> {
        Fold::ALL.into_iter().find(|f| f.as_str() == s.trim())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitRatios {
    pub train: u32,
    pub validation: u32,
    pub test: u32,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 18,
            validation: 1,
            test: 1,
        }
    }
}

impl SplitRatios {
    fn weights(&self) -> [u32; 3] {
        [self.train, self.validation, self.test]
    }

    pub fn total(&self) -> u32 {
        self.train + self.validation + self.test
    }

    /// One cycle of fold assignments realizing the ratios exactly, with the
    /// minority folds spread through the cycle rather than bunched at the end.
    fn cycle(&self) -> Vec<Fold> {
        let weights = self.weights();
        let total = self.total() as i64;
        let mut counts = [0i64; 3];
        (1..=total)
            .map(|k| {
                let pick = (0..3)
                    .max_by_key(|&f| {
                        // deficit scaled by total: weight*k - count*total
                        (weights[f] as i64 * k - counts[f] * total, std::cmp::Reverse(f))
                    })
                    .unwrap();
                counts[pick] += 1;
                Fold::ALL[pick]
            })
            .collect()
    }
}

/// Number of demographic strata: four age bins by two sexes, plus one for
/// patients with unknown age bin or sex.
pub const N_STRATA: usize = 9;

pub fn stratum(demo: &Demographics) -> usize {
    match (demo.age.and_then(age_bin), demo.sex) {
        (Some(bin), Some(sex)) => bin as usize * 2 + sex.code() as usize,
        _ => N_STRATA - 1,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    /// Fold per sample, aligned with the input order.
    pub folds: Vec<Fold>,
    pub patient_folds: BTreeMap<String, Fold>,
}

impl SplitAssignment {
    pub fn count(&self, fold: Fold) -> usize {
        self.folds.iter().filter(|&&f| f == fold).count()
    }
}

/// Patient-level split stratified by age bin and sex.
///
/// Patients within each stratum are ordered by id, shuffled with a seeded
/// generator, then dealt into folds following a fixed cycle of the ratios.
/// The cycle position carries over from one stratum to the next, so global
/// patient counts follow the ratios to within one cycle.
pub fn stratified_split<S: AsRef<str>>(
    sample_patients: &[S],
    demographics: &HashMap<String, Demographics>,
    ratios: SplitRatios,
    seed: u64,
) -> Result<SplitAssignment> {
    if ratios.weights().contains(&0) {
        return Err(Error::InvalidArgument("split ratios must be positive".into()));
    }
    let patients: BTreeSet<&str> = sample_patients.iter().map(AsRef::as_ref).collect();
    let required = ratios.total() as usize;
    if patients.len() < required {
        return Err(Error::TooFewPatients {
            found: patients.len(),
            required,
        });
    }

    let mut strata: Vec<Vec<&str>> = vec![Vec::new(); N_STRATA];
    for &p in &patients {
        let demo = demographics
            .get(p)
            .ok_or_else(|| Error::MissingDemographics(p.to_string()))?;
        strata[stratum(demo)].push(p);
    }

    let cycle = ratios.cycle();
    let mut position = 0usize;
    let mut patient_folds = BTreeMap::new();
    for (idx, members) in strata.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(idx as u64);
        members.shuffle(&mut rng);
        for &p in members.iter() {
            patient_folds.insert(p.to_string(), cycle[position % cycle.len()]);
            position += 1;
        }
    }

    let folds = sample_patients
        .iter()
        .map(|p| patient_folds[p.as_ref()])
        .collect();
    Ok(SplitAssignment {
        folds,
        patient_folds,
    })
}
