//! Staged, config-driven runs from raw tables to report tables.
//!
//! Every stage reads its upstream artifacts from the output directory,
//! writes its own, and leaves a manifest with content hashes. Per-label
//! stages run on a worker pool; results are gathered in schema order before
//! anything is written, so outputs do not depend on the worker count.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::Duration;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::boosting::{train, BoostConfig, StumpEnsemble};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_label, fit_isotonic, EvalConfig, EvaluationReport, IsotonicModel};
use crate::explain::{background_sample, summarize, ShapSummary};
use crate::features::{clean_measurements, derive_features, feature_names, FeatureMatrix};
use crate::ingestion::{
    pair_ecg_cxr, parse_cxr_labels, parse_demographics, parse_ecg_table, stratified_split, CxrColumns,
    Delimiter, DemographicsColumns, EcgColumns, Fold, SplitRatios,
};
use crate::selection::{run_rfe, RfeTrace};
use crate::synth::{generate, SynthConfig, SynthPaths};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    pub ecg: PathBuf,
    pub cxr: PathBuf,
    pub demographics: PathBuf,
    #[serde(default)]
    pub delimiter: Delimiter,
    #[serde(default)]
    pub ecg_columns: EcgColumns,
    #[serde(default)]
    pub cxr_columns: CxrColumns,
    #[serde(default)]
    pub demographics_columns: DemographicsColumns,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairingConfig {
    pub tolerance_hours: f64,
}

impl Default for PairingConfig {
    fn default() -> Self {
        Self { tolerance_hours: 24.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RfeConfig {
    pub enabled: bool,
    pub min_features: usize,
}

impl Default for RfeConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            min_features: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    /// Cap on training rows used as the attribution background.
    pub background_max: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self { background_max: 10_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    /// Relative paths resolve against the config file's directory.
    pub output_dir: PathBuf,
    /// Seeds the split, bootstrap and attribution background.
    pub seed: u64,
    /// Radiograph findings to model. Empty means every synthetic label.
    pub labels: Vec<String>,
    /// Worker threads for per-label stages; 0 uses every core.
    pub jobs: usize,
    pub input: Option<InputConfig>,
    pub synth: Option<SynthConfig>,
    pub pairing: PairingConfig,
    pub split: SplitRatios,
    pub boost: BoostConfig,
    pub rfe: RfeConfig,
    pub evaluation: EvalConfig,
    pub explain: ExplainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            output_dir: PathBuf::from("outputs"),
            seed: 42,
            labels: Vec::new(),
            jobs: 0,
            input: None,
            synth: None,
            pairing: PairingConfig::default(),
            split: SplitRatios::default(),
            boost: BoostConfig::default(),
            rfe: RfeConfig::default(),
            evaluation: EvalConfig::default(),
            explain: ExplainConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Synthetic-cohort run with every default spelled out.
    pub fn demo() -> Self {
        let synth = SynthConfig::default();
        Self {
            labels: synth.label_names(),
            synth: Some(synth),
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let config: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            Error::config(if field == "." { "config".into() } else { field }, e.into_inner().message())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Label schema after defaulting.
    pub fn schema(&self) -> Vec<String> {
        if self.labels.is_empty() {
            self.synth.as_ref().map(SynthConfig::label_names).unwrap_or_default()
        } else {
            self.labels.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(
                "version",
                format!("unsupported version {}; expected {CONFIG_VERSION}", self.version),
            ));
        }
        match (&self.input, &self.synth) {
            (Some(_), Some(_)) => {
                return Err(Error::config("input", "[input] and [synth] are mutually exclusive"))
            }
            (None, None) => return Err(Error::config("input", "either [input] or [synth] is required")),
            _ => {}
        }
        let schema = self.schema();
        if schema.is_empty() {
            return Err(Error::config("labels", "label schema is empty"));
        }
        let mut slugs = BTreeMap::new();
        for (i, label) in schema.iter().enumerate() {
            if label.trim().is_empty() {
                return Err(Error::config(format!("labels[{i}]"), "empty label name"));
            }
            if let Some(other) = slugs.insert(label_slug(label), label) {
                return Err(Error::config(
                    format!("labels[{i}]"),
                    format!("`{label}` collides with `{other}` as a directory name"),
                ));
            }
        }
        if let Some(synth) = &self.synth {
            synth.validate()?;
            let names = synth.label_names();
            if let Some(missing) = schema.iter().find(|l| !names.contains(l)) {
                return Err(Error::config("labels", format!("`{missing}` is not a synthetic label")));
            }
        }
        if !(self.pairing.tolerance_hours > 0.0 && self.pairing.tolerance_hours.is_finite()) {
            return Err(Error::config("pairing.tolerance_hours", "must be positive"));
        }
        if [self.split.train, self.split.validation, self.split.test].contains(&0) {
            return Err(Error::config("split", "every fold ratio must be positive"));
        }
        self.boost.validate()?;
        if self.rfe.min_features == 0 || self.rfe.min_features > feature_names().len() {
            return Err(Error::config(
                "rfe.min_features",
                format!("must lie in 1..={}", feature_names().len()),
            ));
        }
        self.evaluation.validate()?;
        if self.explain.background_max == 0 {
            return Err(Error::config("explain.background_max", "must be at least 1"));
        }
        Ok(())
    }
}

/// Commented template with every default explicit.
pub fn config_template() -> String {
    let mut text = String::from(
        "# ecgcxr pipeline configuration\n\
         # Relative paths resolve against this file's directory.\n\
         # Replace [synth] with an [input] table to run on real extracts:\n\
         #\n\
         # [input]\n\
         # ecg = \"machine_measurements.csv\"\n\
         # cxr = \"cxr_labels.csv\"\n\
         # demographics = \"patients.csv\"\n\
         # delimiter = \"comma\"\n\
         # [input.ecg_columns]\n\
         # patient_id = \"subject_id\"\n\
         # study_id = \"study_id\"\n\
         # time = \"ecg_time\"\n\n",
    );
    text.push_str(&PipelineConfig::demo().to_toml());
    text
}

/// Directory-safe form of a label name.
pub fn label_slug(label: &str) -> String {
    let mut slug = String::with_capacity(label.len());
    for c in label.trim().chars() {
        if c.is_ascii_alphanumeric() {
            slug.push(c.to_ascii_lowercase());
        } else if !slug.ends_with('_') {
            slug.push('_');
        }
    }
    slug.trim_matches('_').to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Pair,
    Split,
    Featurize,
    Train,
    Evaluate,
    Explain,
    Report,
    All,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Synth,
        Stage::Pair,
        Stage::Split,
        Stage::Featurize,
        Stage::Train,
        Stage::Evaluate,
        Stage::Explain,
        Stage::Report,
        Stage::All,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Pair => "pair",
            Stage::Split => "split",
            Stage::Featurize => "featurize",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Explain => "explain",
            Stage::Report => "report",
            Stage::All => "all",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.as_str() == s)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Artifact locations under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn pairs(&self) -> PathBuf {
        self.root.join("pairs.csv")
    }
    pub fn split(&self) -> PathBuf {
        self.root.join("split.csv")
    }
    pub fn features(&self) -> PathBuf {
        self.root.join("features.csv")
    }
    pub fn labels(&self) -> PathBuf {
        self.root.join("labels.csv")
    }
    pub fn model_dir(&self, label: &str) -> PathBuf {
        self.root.join("models").join(label_slug(label))
    }
    pub fn model(&self, label: &str) -> PathBuf {
        self.model_dir(label).join("model.json")
    }
    pub fn calibrator(&self, label: &str) -> PathBuf {
        self.model_dir(label).join("calibrator.json")
    }
    pub fn rfe_trace(&self, label: &str) -> PathBuf {
        self.model_dir(label).join("rfe_trace.csv")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }
    pub fn calibration_curve(&self, label: &str) -> PathBuf {
        self.root.join("curves").join(format!("{}_calibration.csv", label_slug(label)))
    }
    pub fn decision_curve(&self, label: &str) -> PathBuf {
        self.root.join("curves").join(format!("{}_dca.csv", label_slug(label)))
    }
    pub fn shap_values(&self, label: &str) -> PathBuf {
        self.root.join("explain").join(format!("{}_shap_values.csv", label_slug(label)))
    }
    pub fn shap_summary(&self, label: &str) -> PathBuf {
        self.root.join("explain").join(format!("{}_shap_summary.csv", label_slug(label)))
    }
    pub fn auroc_table(&self) -> PathBuf {
        self.root.join("report").join("auroc_table.csv")
    }
    pub fn top_features(&self) -> PathBuf {
        self.root.join("report").join("top_features.csv")
    }
    pub fn manifest(&self, stage: Stage) -> PathBuf {
        self.root.join("manifests").join(format!("{stage}.json"))
    }
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub labels: Option<Vec<String>>,
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub version: String,
    pub config_sha256: String,
    pub labels: Vec<String>,
    pub jobs: usize,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_seconds: f64,
}

struct Inputs {
    ecg: PathBuf,
    cxr: PathBuf,
    demographics: PathBuf,
    delimiter: Delimiter,
    ecg_columns: EcgColumns,
    cxr_columns: CxrColumns,
    demographics_columns: DemographicsColumns,
}

/// Feature matrix with fold membership and per-label targets.
struct Dataset {
    sample_ids: Vec<String>,
    folds: [FeatureMatrix; 3],
    rows: [Vec<usize>; 3],
    labels: BTreeMap<String, Vec<bool>>,
}

impl Dataset {
    fn x(&self, fold: Fold) -> &FeatureMatrix {
        &self.folds[fold_index(fold)]
    }

    fn y(&self, fold: Fold, label: &str) -> Vec<bool> {
        let all = &self.labels[label];
        self.rows[fold_index(fold)].iter().map(|&i| all[i]).collect()
    }
}

fn fold_index(fold: Fold) -> usize {
    match fold {
        Fold::Train => 0,
        Fold::Validation => 1,
        Fold::Test => 2,
    }
}

struct TrainedLabel {
    model: StumpEnsemble,
    calibrator: IsotonicModel,
    trace: Option<RfeTrace>,
}

pub struct Pipeline {
    config: PipelineConfig,
    base_dir: PathBuf,
    layout: Layout,
    schema: Vec<String>,
    active: Vec<String>,
    jobs: usize,
    config_hash: String,
}

impl Pipeline {
    pub fn from_file(path: &Path, overrides: Overrides) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| {
            Error::config("--config", format!("cannot read {}: {e}", path.display()))
        })?;
        let text = String::from_utf8(bytes.clone())
            .map_err(|_| Error::config("--config", "config file is not UTF-8"))?;
        let config = PipelineConfig::from_toml(&text)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(config, &base_dir, &sha256_hex(&bytes), overrides)
    }

    pub fn new(config: PipelineConfig, base_dir: &Path, config_hash: &str, overrides: Overrides) -> Result<Self> {
        config.validate()?;
        let schema = config.schema();
        let active = match overrides.labels {
            Some(subset) => {
                if subset.is_empty() {
                    return Err(Error::config("--labels", "empty label subset"));
                }
                if let Some(bad) = subset.iter().find(|l| !schema.contains(l)) {
                    return Err(Error::config("--labels", format!("`{bad}` is not in the label schema")));
                }
                // keep schema order so outputs do not depend on flag order
                schema.iter().filter(|l| subset.contains(l)).cloned().collect()
            }
            None => schema.clone(),
        };
        let root = match overrides.output_dir {
            Some(dir) => dir,
            None => base_dir.join(&config.output_dir),
        };
        Ok(Self {
            jobs: overrides.jobs.unwrap_or(config.jobs),
            base_dir: base_dir.to_path_buf(),
            layout: Layout { root },
            schema,
            active,
            config_hash: config_hash.to_string(),
            config,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn active_labels(&self) -> &[String] {
        &self.active
    }

    pub fn run(&self, stage: Stage) -> Result<()> {
        match stage {
            Stage::All => {
                if self.config.synth.is_some() {
                    self.run(Stage::Synth)?;
                }
                for s in [
                    Stage::Pair,
                    Stage::Split,
                    Stage::Featurize,
                    Stage::Train,
                    Stage::Evaluate,
                    Stage::Explain,
                    Stage::Report,
                ] {
                    self.run(s)?;
                }
                Ok(())
            }
            _ => {
                let started = Instant::now();
                log::info!("stage={stage} status=start");
                let (inputs, outputs) = match stage {
                    Stage::Synth => self.synth()?,
                    Stage::Pair => self.pair()?,
                    Stage::Split => self.split()?,
                    Stage::Featurize => self.featurize()?,
                    Stage::Train => self.train()?,
                    Stage::Evaluate => self.evaluate()?,
                    Stage::Explain => self.explain()?,
                    Stage::Report => self.report()?,
                    Stage::All => unreachable!(),
                };
                self.write_manifest(stage, started, &inputs, &outputs)?;
                log::info!("stage={stage} status=done seconds={:.3}", started.elapsed().as_secs_f64());
                Ok(())
            }
        }
    }

    fn inputs(&self) -> Result<Inputs> {
        if self.config.synth.is_some() {
            let paths = SynthPaths::in_dir(&self.layout.data_dir());
            for p in [&paths.ecg, &paths.cxr, &paths.demographics] {
                require(p)?;
            }
            return Ok(Inputs {
                ecg: paths.ecg,
                cxr: paths.cxr,
                demographics: paths.demographics,
                delimiter: Delimiter::Comma,
                ecg_columns: EcgColumns::default(),
                cxr_columns: CxrColumns::default(),
                demographics_columns: DemographicsColumns::default(),
            });
        }
        let input = self.config.input.as_ref().expect("validated config");
        let resolve = |field: &str, p: &Path| -> Result<PathBuf> {
            let path = self.base_dir.join(p);
            if path.is_file() {
                Ok(path)
            } else {
                Err(Error::config(format!("input.{field}"), format!("file not found: {}", path.display())))
            }
        };
        Ok(Inputs {
            ecg: resolve("ecg", &input.ecg)?,
            cxr: resolve("cxr", &input.cxr)?,
            demographics: resolve("demographics", &input.demographics)?,
            delimiter: input.delimiter,
            ecg_columns: input.ecg_columns.clone(),
            cxr_columns: input.cxr_columns.clone(),
            demographics_columns: input.demographics_columns.clone(),
        })
    }

    fn per_label<T: Send>(&self, work: impl Fn(&str) -> Result<T> + Sync) -> Result<Vec<T>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
        pool.install(|| self.active.par_iter().map(|l| work(l)).collect())
    }

    fn synth(&self) -> Result<(Vec<PathBuf>, Vec<PathBuf>)> {
        let Some(synth) = &self.config.synth else {
            return Err(Error::config("synth", "the synth stage needs a [synth] table"));
        };
        let cohort = generate(synth)?;
        let paths = cohort.write(&self.layout.data_dir())?;
        metric(Stage::Synth, "-", "n_ecgs", cohort.ecgs.len());
        metric(Stage::Synth, "-", "n_cxrs", cohort.cxrs.len());
        for l in &cohort.manifest.labels {
            metric(Stage::Synth, &l.name, "prevalence", l.empirical_prevalence);
        }
        Ok((vec![], vec![paths.ecg, paths.cxr, paths.demographics, paths.manifest]))
    }

    fn pair(&self) -> Result<(Vec<PathBuf>, Vec<PathBuf>)> {
        let inp = self.inputs()?;
        let ecg = parse_ecg_table(&inp.ecg, &inp.ecg_columns, inp.delimiter)?;
        let cxr = parse_cxr_labels(&inp.cxr, &self.schema, &inp.cxr_columns, inp.delimiter)?;
        let tolerance = Duration::milliseconds((self.config.pairing.tolerance_hours * 3_600_000.0).round() as i64);
        let pairing = pair_ecg_cxr(&ecg.studies, &cxr.studies, tolerance)?;
        metric(Stage::Pair, "-", "ecg_rows_dropped", ecg.dropped);
        metric(Stage::Pair, "-", "cxr_rows_dropped", cxr.dropped);
        metric(Stage::Pair, "-", "pairs", pairing.samples.len());
        metric(Stage::Pair, "-", "unmatched_cxrs", pairing.unmatched);

        let path = self.layout.pairs();
        let rows = pairing.samples.iter().enumerate().map(|(i, s)| {
            let (e, c) = (&ecg.studies[s.ecg], &cxr.studies[s.cxr]);
            vec![
                i.to_string(),
                c.patient_id.clone(),
                e.study_id.clone(),
                c.study_id.clone(),
                s.delta_seconds.to_string(),
            ]
        });
        write_csv(
            &path,
            &["sample_id", "patient_id", "ecg_study_id", "cxr_study_id", "delta_seconds"],
            rows,
        )?;
        Ok((vec![inp.ecg, inp.cxr], vec![path]))
    }

    fn split(&self) -> Result<(Vec<PathBuf>, Vec<PathBuf>)> {
        let inp = self.inputs()?;
        let pairs_path = self.layout.pairs();
        let pairs = read_csv(&pairs_path)?;
        let ids = pairs.column("sample_id")?;
        let patients = pairs.column("patient_id")?;
        let demo = parse_demographics(&inp.demographics, &inp.demographics_columns, inp.delimiter)?;
        let assignment = stratified_split(&patients, &demo.patients, self.config.split, self.config.seed)?;
        for fold in Fold::ALL {
            let n_patients = assignment.patient_folds.values().filter(|&&f| f == fold).count();
            metric(Stage::Split, "-", &format!("{}_patients", fold.as_str()), n_patients);
            metric(Stage::Split, "-", &format!("{}_samples", fold.as_str()), assignment.count(fold));
        }
        let path = self.layout.split();
        let rows = ids
            .iter()
            .zip(&patients)
            .zip(&assignment.folds)
            .map(|((id, p), f)| vec![id.clone(), p.clone(), f.as_str().to_string()]);
        write_csv(&path, &["sample_id", "patient_id", "fold"], rows)?;
        Ok((vec![pairs_path, inp.demographics], vec![path]))
    }

    fn featurize(&self) -> Result<(Vec<PathBuf>, Vec<PathBuf>)> {
        let inp = self.inputs()?;
        let (pairs_path, split_path) = (self.layout.pairs(), self.layout.split());
        let pairs = read_csv(&pairs_path)?;
        let split = read_csv(&split_path)?;
        let ids = pairs.column("sample_id")?;
        if split.column("sample_id")? != ids {
            return Err(Error::Format {
                path: split_path,
                message: "sample ids differ from the pairing table; rerun split".into(),
            });
        }
        let folds = split.column("fold")?;
        let patients = pairs.column("patient_id")?;
        let ecg_ids = pairs.column("ecg_study_id")?;
        let cxr_ids = pairs.column("cxr_study_id")?;

        let ecg = parse_ecg_table(&inp.ecg, &inp.ecg_columns, inp.delimiter)?;
        let cxr = parse_cxr_labels(&inp.cxr, &self.schema, &inp.cxr_columns, inp.delimiter)?;
        let demo = parse_demographics(&inp.demographics, &inp.demographics_columns, inp.delimiter)?;
        let ecg_index: HashMap<(&str, &str), usize> = ecg
            .studies
            .iter()
            .enumerate()
            .map(|(i, s)| ((s.patient_id.as_str(), s.study_id.as_str()), i))
            .collect();
        let cxr_index: HashMap<(&str, &str), usize> = cxr
            .studies
            .iter()
            .enumerate()
            .map(|(i, s)| ((s.patient_id.as_str(), s.study_id.as_str()), i))
            .collect();

        let names = feature_names();
        let mut feature_rows = Vec::with_capacity(ids.len());
        let mut label_rows = Vec::with_capacity(ids.len());
        for i in 0..ids.len() {
            let p = patients[i].as_str();
            let missing = |what: &str, id: &str| Error::Format {
                path: pairs_path.clone(),
                message: format!("{what} study {id} of patient {p} not found in the input tables"),
            };
            let e = *ecg_index.get(&(p, ecg_ids[i].as_str())).ok_or_else(|| missing("ECG", &ecg_ids[i]))?;
            let c = *cxr_index.get(&(p, cxr_ids[i].as_str())).ok_or_else(|| missing("CXR", &cxr_ids[i]))?;
            let d = demo.patients.get(p).copied().unwrap_or_default();
            let fv = derive_features(&clean_measurements(&ecg.studies[e].raw), d.age, d.sex);
            let mut row = vec![ids[i].clone(), folds[i].clone()];
            row.extend(fv.values.iter().map(|v| v.map(num).unwrap_or_default()));
            feature_rows.push(row);
            let mut row = vec![ids[i].clone(), folds[i].clone()];
            row.extend(
                self.schema
                    .iter()
                    .map(|l| if cxr.studies[c].labels[l] { "1" } else { "0" }.to_string()),
            );
            label_rows.push(row);
        }
        let (fpath, lpath) = (self.layout.features(), self.layout.labels());
        let mut header: Vec<&str> = vec!["sample_id", "fold"];
        header.extend(names.iter().map(String::as_str));
        write_csv(&fpath, &header, feature_rows.into_iter())?;
        let mut header: Vec<&str> = vec!["sample_id", "fold"];
        header.extend(self.schema.iter().map(String::as_str));
        write_csv(&lpath, &header, label_rows.into_iter())?;
        metric(Stage::Featurize, "-", "samples", ids.len());
        Ok((vec![pairs_path, split_path, inp.ecg, inp.cxr, inp.demographics], vec![fpath, lpath]))
    }

    fn load_dataset(&self) -> Result<Dataset> {
        let (fpath, lpath) = (self.layout.features(), self.layout.labels());
        let feats = read_csv(&fpath)?;
        let labs = read_csv(&lpath)?;
        let sample_ids = feats.column("sample_id")?;
        if labs.column("sample_id")? != sample_ids {
            return Err(Error::Format {
                path: lpath,
                message: "sample ids differ from the feature table; rerun featurize".into(),
            });
        }
        let names = feature_names();
        let cols = names.iter().map(|n| feats.index(n)).collect::<Result<Vec<_>>>()?;
        let mut rows: [Vec<usize>; 3] = Default::default();
        for (i, f) in feats.column("fold")?.iter().enumerate() {
            let fold = Fold::parse(f).ok_or_else(|| Error::Format {
                path: fpath.clone(),
                message: format!("row {i}: unknown fold `{f}`"),
            })?;
            rows[fold_index(fold)].push(i);
        }
        let mut values = Vec::with_capacity(feats.records.len());
        for (i, rec) in feats.records.iter().enumerate() {
            let row = cols
                .iter()
                .map(|&c| {
                    let cell = rec.get(c).unwrap_or("").trim();
                    if cell.is_empty() {
                        Ok(None)
                    } else {
                        cell.parse::<f64>().map(Some).map_err(|_| Error::Format {
                            path: fpath.clone(),
                            message: format!("row {i}: `{cell}` is not a number"),
                        })
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            values.push(row);
        }
        let matrix = FeatureMatrix::new(names, values)?;
        let mut labels = BTreeMap::new();
        for label in &self.active {
            let flags = labs
                .column(label)?
                .iter()
                .enumerate()
                .map(|(i, v)| match v.as_str() {
                    "1" => Ok(true),
                    "0" => Ok(false),
                    _ => Err(Error::Format {
                        path: lpath.clone(),
                        message: format!("row {i}: label `{label}` has value `{v}`"),
                    }),
                })
                .collect::<Result<Vec<_>>>()?;
            labels.insert(label.clone(), flags);
        }
        let fold_matrix = |fold: Fold| -> Result<FeatureMatrix> {
            matrix.select_rows(&rows[fold_index(fold)]).map_err(|_| Error::Format {
                path: fpath.clone(),
                message: format!("the {} fold is empty", fold.as_str()),
            })
        };
        Ok(Dataset {
            folds: [fold_matrix(Fold::Train)?, fold_matrix(Fold::Validation)?, fold_matrix(Fold::Test)?],
            sample_ids,
            rows,
            labels,
        })
    }

    fn train(&self) -> Result<(Vec<PathBuf>, Vec<PathBuf>)> {
        let data = self.load_dataset()?;
        let trained = self.per_label(|label| self.train_label(&data, label))?;
        let mut outputs = Vec::new();
        for (label, t) in self.active.iter().zip(trained) {
            let dir = self.layout.model_dir(label);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let path = self.layout.model(label);
            t.model.save(&path)?;
            outputs.push(path);
            let path = self.layout.calibrator(label);
            write_json(&path, &t.calibrator)?;
            outputs.push(path);
            let path = self.layout.rfe_trace(label);
            match &t.trace {
                Some(trace) => {
                    let rows = trace.steps.iter().enumerate().map(|(k, s)| {
                        vec![
                            k.to_string(),
                            s.active.len().to_string(),
                            s.dropped.clone().unwrap_or_default(),
                            num(s.val_auroc),
                        ]
                    });
                    write_csv(&path, &["step", "n_features", "dropped", "val_auroc"], rows)?;
                    outputs.push(path);
                }
                None if path.exists() => fs::remove_file(&path).map_err(|e| Error::io(&path, e))?,
                None => {}
            }
        }
        Ok((vec![self.layout.features(), self.layout.labels()], outputs))
    }

    fn train_label(&self, data: &Dataset, label: &str) -> Result<TrainedLabel> {
        let (tx, ty) = (data.x(Fold::Train), data.y(Fold::Train, label));
        let (vx, vy) = (data.x(Fold::Validation), data.y(Fold::Validation, label));
        for (fold, y) in [("training", &ty), ("validation", &vy)] {
            let pos = y.iter().filter(|&&v| v).count();
            if pos == 0 || pos == y.len() {
                return Err(Error::DegenerateTarget(format!("{label}: the {fold} fold has one class")));
            }
        }
        let (model, trace) = if self.config.rfe.enabled {
            let r = run_rfe(tx, &ty, vx, &vy, &self.config.boost, self.config.rfe.min_features)?;
            metric(Stage::Train, label, "selected_features", r.trace.selected.len());
            metric(Stage::Train, label, "full_set_val_auroc", r.trace.full_set_auroc());
            metric(Stage::Train, label, "selected_val_auroc", r.trace.selected_auroc);
            (r.model, Some(r.trace))
        } else {
            (train(tx, &ty, &self.config.boost, None)?.model, None)
        };
        let valid_scores = model.predict_probas(&vx.select_named(&model.feature_names)?)?;
        let calibrator = fit_isotonic(&valid_scores, &vy)?;
        Ok(TrainedLabel {
            model,
            calibrator,
            trace,
        })
    }

    fn load_model(&self, label: &str) -> Result<(StumpEnsemble, IsotonicModel)> {
        let model = StumpEnsemble::load(&require(&self.layout.model(label))?)?;
        let path = require(&self.layout.calibrator(label))?;
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let calibrator = serde_json::from_str(&text).map_err(|e| Error::Format {
            path,
            message: e.to_string(),
        })?;
        Ok((model, calibrator))
    }

    fn model_paths(&self) -> Vec<PathBuf> {
        self.active
            .iter()
            .flat_map(|l| [self.layout.model(l), self.layout.calibrator(l)])
            .collect()
    }

    fn evaluate(&self) -> Result<(Vec<PathBuf>, Vec<PathBuf>)> {
        let data = self.load_dataset()?;
        for l in &self.active {
            self.load_model(l)?;
        }
        let reports: Vec<EvaluationReport> = self.per_label(|label| {
            let (model, calibrator) = self.load_model(label)?;
            let test = data.x(Fold::Test).select_named(&model.feature_names)?;
            let report = evaluate_label(
                label,
                &model,
                &calibrator,
                &test,
                &data.y(Fold::Test, label),
                &self.config.evaluation,
                self.config.seed,
            )?;
            metric(Stage::Evaluate, label, "auroc", report.auroc.point);
            metric(Stage::Evaluate, label, "ci_low", report.auroc.ci_low);
            metric(Stage::Evaluate, label, "ci_high", report.auroc.ci_high);
            Ok(report)
        })?;

        let mut outputs = vec![self.layout.metrics()];
        let rows = reports.iter().map(|r| {
            vec![
                r.label.clone(),
                num(r.auroc.point),
                num(r.auroc.ci_low),
                num(r.auroc.ci_high),
                r.n_pos.to_string(),
                r.n_neg.to_string(),
                r.auroc.n_degenerate_resamples.to_string(),
            ]
        });
        write_csv(
            &self.layout.metrics(),
            &["label", "auroc", "ci_low", "ci_high", "n_pos", "n_neg", "n_degenerate"],
            rows,
        )?;
        for r in &reports {
            let path = self.layout.calibration_curve(&r.label);
            let rows = r.calibration.bins.iter().map(|b| {
                vec![num(b.mid()), num(b.mean_pred), num(b.obs_freq), b.count.to_string()]
            });
            write_csv(&path, &["bin_mid", "mean_pred", "obs_freq", "count"], rows)?;
            outputs.push(path);
            let path = self.layout.decision_curve(&r.label);
            let rows = r.decision.points.iter().map(|p| {
                vec![num(p.threshold), num(p.nb_model), num(p.nb_all), num(p.nb_none)]
            });
            write_csv(&path, &["threshold", "nb_model", "nb_all", "nb_none"], rows)?;
            outputs.push(path);
        }
        let mut inputs = vec![self.layout.features(), self.layout.labels()];
        inputs.extend(self.model_paths());
        Ok((inputs, outputs))
    }

    fn explain(&self) -> Result<(Vec<PathBuf>, Vec<PathBuf>)> {
        let data = self.load_dataset()?;
        for l in &self.active {
            self.load_model(l)?;
        }
        let test_ids: Vec<&String> = data.rows[fold_index(Fold::Test)]
            .iter()
            .map(|&i| &data.sample_ids[i])
            .collect();
        let summaries: Vec<ShapSummary> = self.per_label(|label| {
            let (model, _) = self.load_model(label)?;
            let train_x = data.x(Fold::Train).select_named(&model.feature_names)?;
            let background = background_sample(&train_x, self.config.explain.background_max, self.config.seed)?;
            let test = data.x(Fold::Test).select_named(&model.feature_names)?;
            let summary = summarize(&model, &test, &background)?;
            if let Some(top) = summary.ranking.first() {
                metric(Stage::Explain, label, "top_feature", &top.feature);
            }
            Ok(summary)
        })?;

        let mut outputs = Vec::new();
        for (label, s) in self.active.iter().zip(&summaries) {
            let path = self.layout.shap_values(label);
            let rows = s.records.iter().map(|r| {
                vec![
                    test_ids[r.sample].clone(),
                    r.feature.clone(),
                    r.value.map(num).unwrap_or_default(),
                    num(r.shap),
                ]
            });
            write_csv(&path, &["sample_id", "feature", "value", "shap"], rows)?;
            outputs.push(path);
            let path = self.layout.shap_summary(label);
            let rows = s
                .ranking
                .iter()
                .map(|f| vec![f.feature.clone(), num(f.mean_abs_shap), f.rank.to_string()]);
            write_csv(&path, &["feature", "mean_abs_shap", "rank"], rows)?;
            outputs.push(path);
        }
        let mut inputs = vec![self.layout.features(), self.layout.labels()];
        inputs.extend(self.model_paths());
        Ok((inputs, outputs))
    }

    fn report(&self) -> Result<(Vec<PathBuf>, Vec<PathBuf>)> {
        let metrics_path = self.layout.metrics();
        let metrics = read_csv(&metrics_path)?;
        let labels = metrics.column("label")?;
        let auroc = metrics.column("auroc")?;
        let lo = metrics.column("ci_low")?;
        let hi = metrics.column("ci_high")?;
        let pos = metrics.column("n_pos")?;
        let neg = metrics.column("n_neg")?;
        let parse = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Format {
                path: metrics_path.clone(),
                message: format!("`{s}` is not a number"),
            })
        };

        let mut inputs = vec![metrics_path.clone()];
        let mut rows = Vec::new();
        for label in &self.active {
            let i = labels.iter().position(|l| l == label).ok_or_else(|| Error::Format {
                path: metrics_path.clone(),
                message: format!("no row for label `{label}`; rerun evaluate"),
            })?;
            rows.push((parse(&auroc[i])?, label.clone(), i));
        }
        rows.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));

        let table = rows.iter().enumerate().map(|(rank, (a, label, i))| {
            let (l, h) = (parse(&lo[*i]).unwrap_or(f64::NAN), parse(&hi[*i]).unwrap_or(f64::NAN));
            vec![
                (rank + 1).to_string(),
                label.clone(),
                format!("{a:.3}"),
                format!("{l:.3}"),
                format!("{h:.3}"),
                format!("{a:.3} ({l:.3}-{h:.3})"),
                pos[*i].clone(),
                neg[*i].clone(),
            ]
        });
        let table_path = self.layout.auroc_table();
        ensure_parent(&table_path)?;
        write_csv(
            &table_path,
            &["rank", "label", "auroc", "ci_low", "ci_high", "auroc_95ci", "n_pos", "n_neg"],
            table,
        )?;

        let mut top = Vec::new();
        for (_, label, _) in &rows {
            let path = self.layout.shap_summary(label);
            let summary = read_csv(&path)?;
            let feats = summary.column("feature")?;
            let vals = summary.column("mean_abs_shap")?;
            for (k, (f, v)) in feats.iter().zip(&vals).take(5).enumerate() {
                top.push(vec![label.clone(), (k + 1).to_string(), f.clone(), v.clone()]);
            }
            inputs.push(path);
        }
        let top_path = self.layout.top_features();
        write_csv(&top_path, &["label", "rank", "feature", "mean_abs_shap"], top.into_iter())?;
        Ok((inputs, vec![table_path, top_path]))
    }

    fn write_manifest(&self, stage: Stage, started: Instant, inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<()> {
        let hash_all = |paths: &[PathBuf]| -> Result<BTreeMap<String, String>> {
            paths
                .iter()
                .map(|p| {
                    let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
                    let key = p.strip_prefix(&self.layout.root).unwrap_or(p).display().to_string();
                    Ok((key, sha256_hex(&bytes)))
                })
                .collect()
        };
        let manifest = StageManifest {
            stage: stage.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: self.config_hash.clone(),
            labels: self.active.clone(),
            jobs: self.jobs,
            inputs: hash_all(inputs)?,
            outputs: hash_all(outputs)?,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        write_json(&self.layout.manifest(stage), &manifest)
    }
}

fn metric(stage: Stage, label: &str, name: &str, value: impl fmt::Display) {
    log::info!("stage={stage} label={label} metric={name} value={value}");
}

fn num(x: f64) -> String {
    x.to_string()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn require(path: &Path) -> Result<PathBuf> {
    if path.exists() {
        Ok(path.to_path_buf())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
        })
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value).expect("artifact serializes") + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_csv(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(header).map_err(|e| Error::csv(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

struct CsvTable {
    path: PathBuf,
    header: Vec<String>,
    records: Vec<csv::StringRecord>,
}

impl CsvTable {
    fn index(&self, column: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == column)
            .ok_or_else(|| Error::MissingColumn {
                path: self.path.clone(),
                field: column.to_string(),
                column: column.to_string(),
            })
    }

    fn column(&self, column: &str) -> Result<Vec<String>> {
        let idx = self.index(column)?;
        Ok(self
            .records
            .iter()
            .map(|r| r.get(idx).unwrap_or("").to_string())
            .collect())
    }
}

fn read_csv(path: &Path) -> Result<CsvTable> {
    require(path)?;
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let header = reader
        .headers()
        .map_err(|e| Error::csv(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let records = reader
        .records()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::csv(path, e))?;
    Ok(CsvTable {
        path: path.to_path_buf(),
        header,
        records,
    })
}
