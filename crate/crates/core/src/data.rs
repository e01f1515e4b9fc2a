//! Cohort ingestion and covariate treatment.
//!
//! Two UTF-8 CSV files with a header row feed a [`Cohort`]:
//!
//! - longitudinal: `patient_id,biomarker,time,value` (biomarker is 1 or 2,
//!   time in years since first-line start, value in g/L);
//! - baseline: `patient_id,<covariates...>,treatment` (treatment in `1..=J`).
//!
//! Continuous covariates are log-shifted (`log(x + 0.1)`), standardized on the
//! observed entries and mean-imputed, which after standardization means missing
//! entries become exactly zero. Factors are reference-coded into dummy blocks
//! that stay grouped for variable importance.
//!
//! Internally biomarkers and treatment categories are zero-based; the files
//! are one-based.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{stats, Error, Result, NUM_BIOMARKERS};

/// Shift applied before the log transform so that zeros stay finite.
pub const LOG_SHIFT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalObservation {
    /// Index into [`Cohort::patients`].
    pub patient: usize,
    /// Zero-based biomarker index.
    pub biomarker: usize,
    pub time: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    /// Preprocessed covariate row (no intercept).
    pub covariates: Vec<f64>,
    /// Zero-based treatment category.
    pub treatment: usize,
}

/// Columns of the design matrix that belong to one original variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateGroup {
    pub name: String,
    pub columns: Vec<usize>,
}

/// What was done to one input column during ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PreprocessEntry {
    Continuous {
        name: String,
        transform: ContinuousTransform,
        /// Location and scale used for standardization (after any log).
        center: f64,
        scale: f64,
        n_missing: usize,
        n_total: usize,
    },
    Factor {
        name: String,
        reference: String,
        levels: Vec<String>,
        n_missing: usize,
        n_total: usize,
    },
}

/// Immutable analysis-ready cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    patients: Vec<PatientRecord>,
    observations: Vec<LongitudinalObservation>,
    covariate_names: Vec<String>,
    groups: Vec<CovariateGroup>,
    preprocessing: Vec<PreprocessEntry>,
    num_categories: usize,
}

impl Cohort {
    /// Validate and assemble a cohort.
    pub fn new(
        patients: Vec<PatientRecord>,
        observations: Vec<LongitudinalObservation>,
        covariate_names: Vec<String>,
        groups: Vec<CovariateGroup>,
        num_categories: usize,
    ) -> Result<Self> {
        if num_categories < 2 {
            return Err(Error::Cohort("at least two categories are required".into()));
        }
        let p = covariate_names.len();
        let mut seen = vec![false; p];
        for g in &groups {
            if g.columns.is_empty() {
                return Err(Error::Cohort(format!(
                    "covariate group `{}` is empty",
                    g.name
                )));
            }
            for &c in &g.columns {
                if c >= p || seen[c] {
                    return Err(Error::Cohort(format!(
                        "covariate group `{}` does not partition the columns",
                        g.name
                    )));
                }
                seen[c] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Cohort(
                "some covariate columns belong to no group".into(),
            ));
        }
        let mut ids = HashSet::new();
        for pat in &patients {
            if !ids.insert(pat.id.as_str()) {
                return Err(Error::Cohort(format!("duplicate patient `{}`", pat.id)));
            }
            if pat.covariates.len() != p {
                return Err(Error::Dimension(format!(
                    "patient `{}` has {} covariates, expected {p}",
                    pat.id,
                    pat.covariates.len()
                )));
            }
            if pat.treatment >= num_categories {
                return Err(Error::Cohort(format!(
                    "patient `{}` has treatment {} outside 1..={num_categories}",
                    pat.id,
                    pat.treatment + 1
                )));
            }
        }
        let mut has_obs = vec![false; patients.len()];
        for o in &observations {
            if o.patient >= patients.len() {
                return Err(Error::Cohort(format!(
                    "observation refers to unknown patient index {}",
                    o.patient
                )));
            }
            if o.biomarker >= NUM_BIOMARKERS {
                return Err(Error::Cohort(format!(
                    "biomarker index {} out of range",
                    o.biomarker + 1
                )));
            }
            if !(o.time.is_finite() && o.time >= 0.0) || !o.value.is_finite() {
                return Err(Error::Cohort(format!(
                    "patient `{}`: invalid observation at t = {}",
                    patients[o.patient].id, o.time
                )));
            }
            has_obs[o.patient] = true;
        }
        if let Some(i) = has_obs.iter().position(|h| !h) {
            return Err(Error::Cohort(format!(
                "patient `{}` has no longitudinal observations",
                patients[i].id
            )));
        }
        Ok(Cohort {
            patients,
            observations,
            covariate_names,
            groups,
            preprocessing: Vec::new(),
            num_categories,
        })
    }

    pub fn with_preprocessing(mut self, log: Vec<PreprocessEntry>) -> Self {
        self.preprocessing = log;
        self
    }

    pub fn patients(&self) -> &[PatientRecord] {
        &self.patients
    }

    pub fn observations(&self) -> &[LongitudinalObservation] {
        &self.observations
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn groups(&self) -> &[CovariateGroup] {
        &self.groups
    }

    pub fn preprocessing(&self) -> &[PreprocessEntry] {
        &self.preprocessing
    }

    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    pub fn n_patients(&self) -> usize {
        self.patients.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn patient_index(&self, id: &str) -> Option<usize> {
        self.patients.iter().position(|p| p.id == id)
    }

    /// Latest observation time of a patient across biomarkers.
    pub fn max_time(&self, patient: usize) -> f64 {
        self.observations
            .iter()
            .filter(|o| o.patient == patient)
            .map(|o| o.time)
            .fold(0.0, f64::max)
    }

    pub fn count_observations(&self, biomarker: usize) -> usize {
        self.observations
            .iter()
            .filter(|o| o.biomarker == biomarker)
            .count()
    }

    pub fn preprocessing_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.preprocessing)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContinuousTransform {
    /// `log(x + 0.1)` followed by z-scoring and zero imputation.
    #[default]
    LogStandardize,
    /// z-scoring and zero imputation only.
    Standardize,
    /// Values used as given; missing entries become zero.
    Identity,
}

/// How "Not reported" factor entries (and empty factor cells) enter the design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NotReportedPolicy {
    /// A dummy column of its own.
    #[default]
    OwnLevel,
    /// No column; coded like the reference level.
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateSpec {
    Continuous {
        column: String,
        #[serde(default)]
        transform: ContinuousTransform,
    },
    Factor {
        column: String,
        reference: String,
        /// Optional explicit level order; sorted observed levels otherwise.
        #[serde(default)]
        levels: Option<Vec<String>>,
    },
}

impl CovariateSpec {
    pub fn column(&self) -> &str {
        match self {
            CovariateSpec::Continuous { column, .. } | CovariateSpec::Factor { column, .. } => {
                column
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LongitudinalColumns {
    pub id: String,
    pub biomarker: String,
    pub time: String,
    pub value: String,
}

impl Default for LongitudinalColumns {
    fn default() -> Self {
        LongitudinalColumns {
            id: "patient_id".into(),
            biomarker: "biomarker".into(),
            time: "time".into(),
            value: "value".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineColumns {
    pub id: String,
    pub treatment: String,
    /// Covariates in design order. Empty means: every other column, numeric
    /// ones as continuous and the rest as factors.
    pub covariates: Vec<CovariateSpec>,
}

impl Default for BaselineColumns {
    fn default() -> Self {
        BaselineColumns {
            id: "patient_id".into(),
            treatment: "treatment".into(),
            covariates: Vec::new(),
        }
    }
}

/// Column map and ingestion options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schema {
    pub longitudinal: LongitudinalColumns,
    pub baseline: BaselineColumns,
    /// Cell contents treated as missing (compared after trimming).
    pub missing_tokens: Vec<String>,
    pub not_reported_label: String,
    pub not_reported: NotReportedPolicy,
    pub num_categories: usize,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            longitudinal: LongitudinalColumns::default(),
            baseline: BaselineColumns::default(),
            missing_tokens: vec![String::new(), "NA".into()],
            not_reported_label: "Not reported".into(),
            not_reported: NotReportedPolicy::OwnLevel,
            num_categories: 3,
        }
    }
}

impl Schema {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn is_missing(&self, cell: &str) -> bool {
        let cell = cell.trim();
        self.missing_tokens.iter().any(|t| t.trim() == cell)
    }
}

/// Location/scale bookkeeping of a continuous transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuousSummary {
    pub center: f64,
    pub scale: f64,
    pub n_missing: usize,
}

/// Log-shift, standardize and zero-impute one continuous covariate.
///
/// Standardization uses the sample mean and the `n - 1` standard deviation of
/// the non-missing log values.
pub fn preprocess_continuous(raw: &[Option<f64>]) -> Result<(Vec<f64>, ContinuousSummary)> {
    if let Some(x) = raw.iter().flatten().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "log transform needs finite non-negative values, got {x}"
        )));
    }
    let logged: Vec<Option<f64>> = raw
        .iter()
        .map(|x| x.map(|v| (v + LOG_SHIFT).ln()))
        .collect();
    standardize(&logged)
}

/// z-score the observed entries and set missing entries to zero.
pub fn standardize(raw: &[Option<f64>]) -> Result<(Vec<f64>, ContinuousSummary)> {
    let observed: Vec<f64> = raw.iter().flatten().copied().collect();
    if observed.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 observed values, got {}",
            observed.len()
        )));
    }
    if observed.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("non-finite value".into()));
    }
    let center = stats::mean(&observed);
    let scale = stats::sample_sd(&observed);
    if !(scale > 0.0) {
        return Err(Error::InvalidArgument("zero variance".into()));
    }
    let treated = raw
        .iter()
        .map(|x| x.map_or(0.0, |v| (v - center) / scale))
        .collect();
    Ok((
        treated,
        ContinuousSummary {
            center,
            scale,
            n_missing: raw.len() - observed.len(),
        },
    ))
}

/// Reference coding for one factor, reusable on new labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorEncoder {
    pub name: String,
    pub reference: String,
    /// Non-reference levels in column order.
    pub levels: Vec<String>,
    not_reported_label: String,
    policy: NotReportedPolicy,
}

impl FactorEncoder {
    pub fn column_names(&self) -> Vec<String> {
        self.levels
            .iter()
            .map(|l| format!("{}={}", self.name, l))
            .collect()
    }

    /// Dummy row for one label; `None` is a missing cell.
    pub fn encode(&self, label: Option<&str>) -> Result<Vec<f64>> {
        let label = label.map(str::trim).unwrap_or(&self.not_reported_label);
        let mut row = vec![0.0; self.levels.len()];
        if label == self.reference {
            return Ok(row);
        }
        if label == self.not_reported_label && self.policy == NotReportedPolicy::Reference {
            return Ok(row);
        }
        match self.levels.iter().position(|l| l == label) {
            Some(j) => {
                row[j] = 1.0;
                Ok(row)
            }
            None => Err(Error::UnseenLevel {
                factor: self.name.clone(),
                level: label.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorEncoding {
    pub encoder: FactorEncoder,
    /// One 0/1 column per non-reference level.
    pub columns: Vec<Vec<f64>>,
    pub n_missing: usize,
}

/// Reference-code a factor into dummy columns.
///
/// `declared` fixes the level order (and may list levels absent from the
/// data); otherwise observed levels are sorted. Missing cells take the
/// "Not reported" label.
pub fn encode_factors(
    name: &str,
    labels: &[Option<&str>],
    reference: &str,
    declared: Option<&[String]>,
    not_reported_label: &str,
    policy: NotReportedPolicy,
) -> Result<FactorEncoding> {
    let observed: BTreeSet<&str> = labels
        .iter()
        .map(|l| l.map(str::trim).unwrap_or(not_reported_label))
        .collect();
    let all: Vec<String> = match declared {
        Some(d) => {
            if let Some(extra) = observed
                .iter()
                .find(|o| **o != not_reported_label && !d.iter().any(|l| l == *o))
            {
                return Err(Error::UnseenLevel {
                    factor: name.into(),
                    level: extra.to_string(),
                });
            }
            let mut all = d.to_vec();
            if observed.contains(not_reported_label) && !all.iter().any(|l| l == not_reported_label)
            {
                all.push(not_reported_label.to_string());
            }
            all
        }
        None => observed.iter().map(|s| s.to_string()).collect(),
    };
    if !all.iter().any(|l| l == reference) {
        return Err(Error::Covariate {
            name: name.into(),
            message: format!("reference level `{reference}` is neither observed nor declared"),
        });
    }
    let levels: Vec<String> = all
        .into_iter()
        .filter(|l| {
            l != reference && !(l == not_reported_label && policy == NotReportedPolicy::Reference)
        })
        .collect();
    if levels.is_empty() {
        return Err(Error::Covariate {
            name: name.into(),
            message: "degenerate factor: no non-reference levels".into(),
        });
    }
    let encoder = FactorEncoder {
        name: name.into(),
        reference: reference.into(),
        levels,
        not_reported_label: not_reported_label.into(),
        policy,
    };
    let mut columns = vec![Vec::with_capacity(labels.len()); encoder.levels.len()];
    for label in labels {
        for (col, x) in columns.iter_mut().zip(encoder.encode(*label)?) {
            col.push(x);
        }
    }
    Ok(FactorEncoding {
        encoder,
        columns,
        n_missing: labels.iter().filter(|l| l.is_none()).count(),
    })
}

fn open_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file))
}

fn column_index(headers: &csv::StringRecord, file: &str, column: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == column)
        .ok_or_else(|| Error::MissingColumn {
            file: file.into(),
            column: column.into(),
        })
}

fn row_error(file: &str, record: &csv::StringRecord, message: impl Into<String>) -> Error {
    Error::Row {
        file: file.into(),
        line: record.position().map_or(0, |p| p.line()),
        message: message.into(),
    }
}

fn parse_real(file: &str, record: &csv::StringRecord, idx: usize, what: &str) -> Result<f64> {
    let cell = record.get(idx).unwrap_or("").trim();
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(row_error(
            file,
            record,
            format!("cannot parse {what} `{cell}`"),
        )),
    }
}

/// Read, validate and preprocess the two cohort files.
pub fn load_cohort(longitudinal: &Path, baseline: &Path, schema: &Schema) -> Result<Cohort> {
    let base_name = baseline.display().to_string();
    let mut reader = open_reader(baseline)?;
    let headers = reader
        .headers()
        .map_err(|e| Error::csv(baseline, e))?
        .clone();
    let id_col = column_index(&headers, &base_name, &schema.baseline.id)?;
    let treat_col = column_index(&headers, &base_name, &schema.baseline.treatment)?;

    let mut ids: Vec<String> = Vec::new();
    let mut treatments = Vec::new();
    let mut rows: Vec<csv::StringRecord> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::csv(baseline, e))?;
        let id = record.get(id_col).unwrap_or("").trim().to_string();
        if schema.is_missing(&id) {
            return Err(row_error(&base_name, &record, "missing patient id"));
        }
        if index.insert(id.clone(), ids.len()).is_some() {
            return Err(row_error(
                &base_name,
                &record,
                format!("duplicate patient `{id}`"),
            ));
        }
        let cell = record.get(treat_col).unwrap_or("").trim();
        let treatment = match cell.parse::<usize>() {
            Ok(z) if (1..=schema.num_categories).contains(&z) => z - 1,
            _ => {
                return Err(row_error(
                    &base_name,
                    &record,
                    format!("treatment `{cell}` outside 1..={}", schema.num_categories),
                ))
            }
        };
        ids.push(id);
        treatments.push(treatment);
        rows.push(record);
    }

    let specs: Vec<CovariateSpec> = if schema.baseline.covariates.is_empty() {
        infer_covariates(&headers, &rows, &[id_col, treat_col], schema)
    } else {
        schema.baseline.covariates.clone()
    };

    let n = ids.len();
    let mut design: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut names = Vec::new();
    let mut groups = Vec::new();
    let mut log = Vec::new();
    for spec in &specs {
        let col = column_index(&headers, &base_name, spec.column())?;
        let cells: Vec<Option<&str>> = rows
            .iter()
            .map(|r| {
                let c = r.get(col).unwrap_or("").trim();
                (!schema.is_missing(c)).then_some(c)
            })
            .collect();
        let first = names.len();
        match spec {
            CovariateSpec::Continuous { column, transform } => {
                let mut raw = Vec::with_capacity(n);
                for (cell, record) in cells.iter().zip(&rows) {
                    raw.push(match cell {
                        None => None,
                        Some(c) => match c.parse::<f64>() {
                            Ok(v) if v.is_finite() => Some(v),
                            _ => {
                                return Err(row_error(
                                    &base_name,
                                    record,
                                    format!("cannot parse `{column}` value `{c}`"),
                                ))
                            }
                        },
                    });
                }
                let wrap = |e: Error| Error::Covariate {
                    name: column.clone(),
                    message: e.to_string(),
                };
                let (values, summary) = match transform {
                    ContinuousTransform::LogStandardize => {
                        preprocess_continuous(&raw).map_err(wrap)?
                    }
                    ContinuousTransform::Standardize => standardize(&raw).map_err(wrap)?,
                    ContinuousTransform::Identity => (
                        raw.iter().map(|x| x.unwrap_or(0.0)).collect(),
                        ContinuousSummary {
                            center: 0.0,
                            scale: 1.0,
                            n_missing: raw.iter().filter(|x| x.is_none()).count(),
                        },
                    ),
                };
                for (row, v) in design.iter_mut().zip(values) {
                    row.push(v);
                }
                names.push(column.clone());
                log.push(PreprocessEntry::Continuous {
                    name: column.clone(),
                    transform: *transform,
                    center: summary.center,
                    scale: summary.scale,
                    n_missing: summary.n_missing,
                    n_total: n,
                });
            }
            CovariateSpec::Factor {
                column,
                reference,
                levels,
            } => {
                let enc = encode_factors(
                    column,
                    &cells,
                    reference,
                    levels.as_deref(),
                    &schema.not_reported_label,
                    schema.not_reported,
                )?;
                for dummy in &enc.columns {
                    for (row, v) in design.iter_mut().zip(dummy) {
                        row.push(*v);
                    }
                }
                names.extend(enc.encoder.column_names());
                log.push(PreprocessEntry::Factor {
                    name: column.clone(),
                    reference: reference.clone(),
                    levels: enc.encoder.levels.clone(),
                    n_missing: enc.n_missing,
                    n_total: n,
                });
            }
        }
        groups.push(CovariateGroup {
            name: spec.column().to_string(),
            columns: (first..names.len()).collect(),
        });
    }

    let patients: Vec<PatientRecord> = ids
        .into_iter()
        .zip(design)
        .zip(treatments)
        .map(|((id, covariates), treatment)| PatientRecord {
            id,
            covariates,
            treatment,
        })
        .collect();

    let observations = read_observations(longitudinal, schema, &index)?;
    Ok(
        Cohort::new(patients, observations, names, groups, schema.num_categories)?
            .with_preprocessing(log),
    )
}

fn infer_covariates(
    headers: &csv::StringRecord,
    rows: &[csv::StringRecord],
    skip: &[usize],
    schema: &Schema,
) -> Vec<CovariateSpec> {
    headers
        .iter()
        .enumerate()
        .filter(|(i, _)| !skip.contains(i))
        .map(|(i, name)| {
            let cells: Vec<&str> = rows
                .iter()
                .map(|r| r.get(i).unwrap_or("").trim())
                .filter(|c| !schema.is_missing(c))
                .collect();
            let numeric = !cells.is_empty() && cells.iter().all(|c| c.parse::<f64>().is_ok());
            if numeric {
                CovariateSpec::Continuous {
                    column: name.trim().into(),
                    transform: ContinuousTransform::LogStandardize,
                }
            } else {
                let reference = cells
                    .iter()
                    .filter(|c| **c != schema.not_reported_label)
                    .min()
                    .copied()
                    .unwrap_or_default();
                CovariateSpec::Factor {
                    column: name.trim().into(),
                    reference: reference.into(),
                    levels: None,
                }
            }
        })
        .collect()
}

fn read_observations(
    path: &Path,
    schema: &Schema,
    index: &HashMap<String, usize>,
) -> Result<Vec<LongitudinalObservation>> {
    let name = path.display().to_string();
    let mut reader = open_reader(path)?;
    let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    let cols = &schema.longitudinal;
    let id_col = column_index(&headers, &name, &cols.id)?;
    let bm_col = column_index(&headers, &name, &cols.biomarker)?;
    let t_col = column_index(&headers, &name, &cols.time)?;
    let y_col = column_index(&headers, &name, &cols.value)?;

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::csv(path, e))?;
        let id = record.get(id_col).unwrap_or("").trim();
        let patient = *index
            .get(id)
            .ok_or_else(|| row_error(&name, &record, format!("unknown patient `{id}`")))?;
        let bm_cell = record.get(bm_col).unwrap_or("").trim();
        let biomarker = match bm_cell.parse::<usize>() {
            Ok(k) if (1..=NUM_BIOMARKERS).contains(&k) => k - 1,
            _ => {
                return Err(row_error(
                    &name,
                    &record,
                    format!("biomarker `{bm_cell}` must be 1 or 2"),
                ))
            }
        };
        let time = parse_real(&name, &record, t_col, "time")?;
        if time < 0.0 {
            return Err(row_error(&name, &record, format!("negative time {time}")));
        }
        let value = parse_real(&name, &record, y_col, "value")?;
        if !seen.insert((patient, biomarker, time.to_bits())) {
            return Err(row_error(
                &name,
                &record,
                format!(
                    "duplicate observation for `{id}`, biomarker {}, t = {time}",
                    biomarker + 1
                ),
            ));
        }
        out.push(LongitudinalObservation {
            patient,
            biomarker,
            time,
            value,
        });
    }
    Ok(out)
}

/// Write observations in the longitudinal input format.
pub fn write_longitudinal_csv(path: &Path, cohort: &Cohort) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["patient_id", "biomarker", "time", "value"])
        .map_err(|e| Error::csv(path, e))?;
    for o in cohort.observations() {
        w.write_record([
            cohort.patients()[o.patient].id.clone(),
            (o.biomarker + 1).to_string(),
            o.time.to_string(),
            o.value.to_string(),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))
}
