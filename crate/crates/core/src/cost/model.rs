//! Cost models, profiling datasets, model files, and error CDFs.

use std::fmt;
use std::io;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::topology::HardwareProfile;

use super::features::{AttentionFeatures, GroupedGemmFeatures, ATTENTION_FEATURES, GROUPED_GEMM_FEATURES};
use super::forest::{ensemble_predict, grow_forest, Hyperparams, TargetScale, Tree};
use super::{roofline, CostError};

pub const MIN_TRAINING_ROWS: usize = 50;
const MODEL_FORMAT: &str = "stagesim-cost-model/1";

/// Feature layout of a dataset or learned model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Schema {
    #[serde(rename = "attention_v1")]
    AttentionV1,
    #[serde(rename = "grouped_gemm_v1")]
    GroupedGemmV1,
    /// Single-feature proxy-length attention baseline.
    #[serde(rename = "sqrt_proxy_v1")]
    SqrtProxyV1,
}

impl Schema {
    pub fn id(self) -> &'static str {
        match self {
            Schema::AttentionV1 => "attention_v1",
            Schema::GroupedGemmV1 => "grouped_gemm_v1",
            Schema::SqrtProxyV1 => "sqrt_proxy_v1",
        }
    }

    pub fn feature_names(self) -> &'static [&'static str] {
        match self {
            Schema::AttentionV1 => &ATTENTION_FEATURES,
            Schema::GroupedGemmV1 => &GROUPED_GEMM_FEATURES,
            Schema::SqrtProxyV1 => &["sqrt_sum_sq_context"],
        }
    }
}

impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Schema {
    type Err = CostError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Schema::AttentionV1, Schema::GroupedGemmV1, Schema::SqrtProxyV1]
            .into_iter()
            .find(|x| x.id() == s)
            .ok_or_else(|| CostError::UnknownSchema(s.to_string()))
    }
}

/// Rows of `(feature vector, runtime_us)` under one schema.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: Schema,
    pub rows: Vec<Vec<f64>>,
    pub runtimes_us: Vec<f64>,
}

impl Dataset {
    pub fn new(schema: Schema) -> Self {
        Dataset { schema, rows: Vec::new(), runtimes_us: Vec::new() }
    }

    pub fn push(&mut self, features: Vec<f64>, runtime_us: f64) {
        assert_eq!(features.len(), self.schema.feature_names().len(), "feature arity");
        self.rows.push(features);
        self.runtimes_us.push(runtime_us);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Deterministic shuffle-split; returns `(train, held_out)`.
    pub fn split_holdout(&self, held_out_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = ((self.len() as f64) * held_out_fraction).round() as usize;
        let pick = |ids: &[usize]| Dataset {
            schema: self.schema,
            rows: ids.iter().map(|&i| self.rows[i].clone()).collect(),
            runtimes_us: ids.iter().map(|&i| self.runtimes_us[i]).collect(),
        };
        (pick(&idx[n_test..]), pick(&idx[..n_test]))
    }

    /// Profiling CSV: `#schema=<id>` line, header of feature names plus
    /// `runtime_us`, one row per measurement.
    pub fn write_csv<W: io::Write>(&self, mut w: W) -> Result<(), CostError> {
        writeln!(w, "#schema={}", self.schema.id())?;
        let mut cw = csv::Writer::from_writer(w);
        let mut header: Vec<&str> = self.schema.feature_names().to_vec();
        header.push("runtime_us");
        cw.write_record(&header).map_err(csv_io)?;
        for (row, y) in self.rows.iter().zip(&self.runtimes_us) {
            let rec: Vec<String> = row.iter().chain(std::iter::once(y)).map(|v| v.to_string()).collect();
            cw.write_record(&rec).map_err(csv_io)?;
        }
        cw.flush()?;
        Ok(())
    }

    pub fn read_csv<R: io::BufRead>(mut r: R, expected: Option<Schema>) -> Result<Dataset, CostError> {
        let mut first = String::new();
        r.read_line(&mut first)?;
        let id = first
            .trim()
            .strip_prefix("#schema=")
            .ok_or_else(|| CostError::Parse { line: 1, msg: "missing `#schema=` line".into() })?;
        let schema: Schema = id.parse()?;
        if let Some(want) = expected {
            if want != schema {
                return Err(CostError::SchemaMismatch { expected: want.id().into(), found: schema.id().into() });
            }
        }
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let headers = rdr.headers().map_err(|e| CostError::Parse { line: 2, msg: e.to_string() })?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let mut cols = Vec::new();
        for name in schema.feature_names() {
            cols.push(col(name).ok_or_else(|| CostError::Parse {
                line: 2,
                msg: format!("missing column `{name}` for schema {schema}"),
            })?);
        }
        let y_col =
            col("runtime_us").ok_or_else(|| CostError::Parse { line: 2, msg: "missing column `runtime_us`".into() })?;
        let mut ds = Dataset::new(schema);
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 3;
            let rec = rec.map_err(|e| CostError::Parse { line, msg: e.to_string() })?;
            let num = |c: usize| -> Result<f64, CostError> {
                let raw = rec.get(c).unwrap_or("");
                raw.trim().parse::<f64>().map_err(|e| CostError::Parse { line, msg: format!("`{raw}`: {e}") })
            };
            let row = cols.iter().map(|&c| num(c)).collect::<Result<Vec<_>, _>>()?;
            ds.push(row, num(y_col)?);
        }
        Ok(ds)
    }

    pub fn load(path: impl AsRef<Path>, expected: Option<Schema>) -> Result<Dataset, CostError> {
        let f = std::fs::File::open(path)?;
        Dataset::read_csv(io::BufReader::new(f), expected)
    }
}

fn csv_io(e: csv::Error) -> CostError {
    CostError::Io(io::Error::other(e))
}

/// Sorted relative errors `|pred - true| / true`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCdf {
    errors: Vec<f64>,
}

impl ErrorCdf {
    pub fn from_errors(mut errors: Vec<f64>) -> Result<Self, CostError> {
        if errors.is_empty() {
            return Err(CostError::EmptyDataset);
        }
        errors.sort_by(f64::total_cmp);
        Ok(ErrorCdf { errors })
    }

    pub fn from_pairs(predicted: &[f64], actual: &[f64]) -> Result<Self, CostError> {
        assert_eq!(predicted.len(), actual.len());
        Self::from_errors(predicted.iter().zip(actual).map(|(p, t)| (p - t).abs() / t).collect())
    }

    /// Fraction of samples with relative error at most `threshold`.
    pub fn cdf(&self, threshold: f64) -> f64 {
        self.errors.partition_point(|&e| e <= threshold) as f64 / self.errors.len() as f64
    }

    /// Nearest-rank quantile, `q` in `[0, 1]`.
    pub fn quantile(&self, q: f64) -> f64 {
        let n = self.errors.len();
        let rank = ((q.clamp(0.0, 1.0) * n as f64).ceil() as usize).clamp(1, n);
        self.errors[rank - 1]
    }

    pub fn len(&self) -> usize {
        self.errors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.errors.is_empty()
    }

    pub fn errors(&self) -> &[f64] {
        &self.errors
    }
}

/// A fitted tree ensemble plus the metadata needed to use it safely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Forest {
    pub format: String,
    pub schema: Schema,
    pub feature_names: Vec<String>,
    pub hyperparams: Hyperparams,
    pub trees: Vec<Tree>,
}

impl Forest {
    pub fn predict(&self, x: &[f64]) -> f64 {
        ensemble_predict(&self.trees, x)
    }

    pub fn predict_checked(&self, schema: Schema, x: &[f64]) -> Result<f64, CostError> {
        if schema != self.schema {
            return Err(CostError::SchemaMismatch { expected: schema.id().into(), found: self.schema.id().into() });
        }
        Ok(self.predict(x))
    }

    /// JSON document followed by a `#hash=<sha256 hex>` footer line.
    pub fn to_file_string(&self) -> String {
        let mut body = serde_json::to_string(self).expect("forest serializes");
        body.push('\n');
        let hash = hex::encode(Sha256::digest(body.as_bytes()));
        body.push_str("#hash=");
        body.push_str(&hash);
        body.push('\n');
        body
    }

    pub fn from_file_str(text: &str) -> Result<Forest, CostError> {
        let at = text.rfind("#hash=").ok_or_else(|| CostError::ModelFile("missing hash footer".into()))?;
        let (body, footer) = text.split_at(at);
        let expected = footer["#hash=".len()..].trim();
        let actual = hex::encode(Sha256::digest(body.as_bytes()));
        if expected != actual {
            return Err(CostError::ModelFile(format!("hash mismatch: footer {expected}, content {actual}")));
        }
        let forest: Forest = serde_json::from_str(body).map_err(|e| CostError::ModelFile(e.to_string()))?;
        if forest.format != MODEL_FORMAT {
            return Err(CostError::ModelFile(format!("unsupported format `{}`", forest.format)));
        }
        let names: Vec<&str> = forest.feature_names.iter().map(String::as_str).collect();
        if names != forest.schema.feature_names() {
            return Err(CostError::SchemaMismatch {
                expected: forest.schema.feature_names().join(","),
                found: names.join(","),
            });
        }
        if forest.trees.is_empty() {
            return Err(CostError::ModelFile("no trees".into()));
        }
        for (i, t) in forest.trees.iter().enumerate() {
            t.check(names.len()).map_err(|e| CostError::ModelFile(format!("tree {i}: {e}")))?;
        }
        Ok(forest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CostError> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Forest, CostError> {
        Forest::from_file_str(&std::fs::read_to_string(path)?)
    }
}

/// Out-of-bag and in-bag error summaries from [`fit_model`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// Each row scored only by trees that did not see it; rows in every
    /// bag are skipped.
    pub out_of_bag: Option<ErrorCdf>,
    pub in_bag: ErrorCdf,
}

/// Fits a bagged CART ensemble to `dataset`.
pub fn fit_model(dataset: &Dataset, hp: &Hyperparams) -> Result<(Forest, FitReport), CostError> {
    if dataset.len() < MIN_TRAINING_ROWS {
        return Err(CostError::InsufficientData { rows: dataset.len(), min: MIN_TRAINING_ROWS });
    }
    if hp.n_trees == 0 || hp.min_samples_leaf == 0 {
        return Err(CostError::InvalidFeatures("n_trees and min_samples_leaf must be >= 1".into()));
    }
    if let Some(bad) = dataset.runtimes_us.iter().find(|y| !(y.is_finite() && **y > 0.0)) {
        return Err(CostError::DegenerateTarget(format!("runtime {bad} is not a positive finite value")));
    }
    let arity = dataset.schema.feature_names().len();
    if dataset.rows.iter().any(|r| r.len() != arity || r.iter().any(|v| !v.is_finite())) {
        return Err(CostError::InvalidFeatures(format!("rows must hold {arity} finite features")));
    }
    let y: Vec<f64> = match hp.target_scale {
        TargetScale::Linear => dataset.runtimes_us.clone(),
        TargetScale::Log => dataset.runtimes_us.iter().map(|v| v.ln()).collect(),
    };
    let grown = grow_forest(&dataset.rows, &y, hp);

    let mut oob_errors = Vec::new();
    for (i, row) in dataset.rows.iter().enumerate() {
        let (sum, n) =
            grown.iter().filter(|g| !g.in_bag[i]).fold((0.0, 0usize), |(s, n), g| (s + g.tree.predict(row), n + 1));
        if n > 0 {
            let truth = dataset.runtimes_us[i];
            oob_errors.push((sum / n as f64 - truth).abs() / truth);
        }
    }
    let forest = Forest {
        format: MODEL_FORMAT.to_string(),
        schema: dataset.schema,
        feature_names: dataset.schema.feature_names().iter().map(|s| s.to_string()).collect(),
        hyperparams: hp.clone(),
        trees: grown.into_iter().map(|g| g.tree).collect(),
    };
    let in_bag = eval_model(&forest, dataset)?;
    let out_of_bag = ErrorCdf::from_errors(oob_errors).ok();
    Ok((forest, FitReport { out_of_bag, in_bag }))
}

pub fn eval_model(forest: &Forest, dataset: &Dataset) -> Result<ErrorCdf, CostError> {
    if dataset.is_empty() {
        return Err(CostError::EmptyDataset);
    }
    if forest.schema != dataset.schema {
        return Err(CostError::SchemaMismatch {
            expected: forest.schema.id().into(),
            found: dataset.schema.id().into(),
        });
    }
    let predicted: Vec<f64> = dataset.rows.iter().map(|r| forest.predict(r)).collect();
    ErrorCdf::from_pairs(&predicted, &dataset.runtimes_us)
}

/// Runtime prediction for the operators a layer is built from. All
/// durations are microseconds.
pub trait OpPredictor: Sync {
    fn attention(&self, f: &AttentionFeatures) -> Result<f64, CostError>;
    fn grouped_gemm(&self, f: &GroupedGemmFeatures) -> Result<f64, CostError>;
    /// `[m, k] x [k, n]` GEMM.
    fn linear(&self, m: u64, n: u64, k: u64) -> Result<f64, CostError>;
    fn elementwise(&self, bytes: u64) -> Result<f64, CostError>;
}

/// Predicts the same duration for every operator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantPredictor {
    pub us: f64,
}

impl OpPredictor for ConstantPredictor {
    fn attention(&self, _: &AttentionFeatures) -> Result<f64, CostError> {
        Ok(self.us)
    }

    fn grouped_gemm(&self, _: &GroupedGemmFeatures) -> Result<f64, CostError> {
        Ok(self.us)
    }

    fn linear(&self, _: u64, _: u64, _: u64) -> Result<f64, CostError> {
        Ok(self.us)
    }

    fn elementwise(&self, _: u64) -> Result<f64, CostError> {
        Ok(self.us)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predictor {
    Analytic,
    Learned(Arc<Forest>),
}

/// Per-operator predictors bound to one GPU type. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    pub hardware: HardwareProfile,
    pub dtype_bytes: u32,
    pub attention: Predictor,
    pub grouped_gemm: Predictor,
}

impl CostModel {
    pub fn analytic(hardware: HardwareProfile, dtype_bytes: u32) -> Self {
        CostModel { hardware, dtype_bytes, attention: Predictor::Analytic, grouped_gemm: Predictor::Analytic }
    }

    pub fn with_attention_model(mut self, forest: Arc<Forest>) -> Result<Self, CostError> {
        if forest.schema != Schema::AttentionV1 {
            return Err(CostError::SchemaMismatch {
                expected: "attention_v1".into(),
                found: forest.schema.id().into(),
            });
        }
        self.attention = Predictor::Learned(forest);
        Ok(self)
    }

    pub fn with_grouped_gemm_model(mut self, forest: Arc<Forest>) -> Result<Self, CostError> {
        if forest.schema != Schema::GroupedGemmV1 {
            return Err(CostError::SchemaMismatch {
                expected: "grouped_gemm_v1".into(),
                found: forest.schema.id().into(),
            });
        }
        self.grouped_gemm = Predictor::Learned(forest);
        Ok(self)
    }

    pub fn predict_attention(&self, f: &AttentionFeatures) -> Result<f64, CostError> {
        match &self.attention {
            Predictor::Analytic => Ok(roofline::attention(&self.hardware, f, self.dtype_bytes) * 1e6),
            Predictor::Learned(m) => m.predict_checked(Schema::AttentionV1, &f.to_vector()),
        }
    }

    pub fn predict_grouped_gemm(&self, f: &GroupedGemmFeatures) -> Result<f64, CostError> {
        match &self.grouped_gemm {
            Predictor::Analytic => Ok(roofline::grouped_gemm(&self.hardware, f, self.dtype_bytes) * 1e6),
            Predictor::Learned(m) => m.predict_checked(Schema::GroupedGemmV1, &f.to_vector()),
        }
    }

    pub fn predict_linear(&self, m: u64, n: u64, k: u64) -> Result<f64, CostError> {
        if m == 0 || n == 0 || k == 0 {
            return Err(CostError::NonPositiveDim { m, n, k });
        }
        Ok(roofline::linear(&self.hardware, m, n, k, self.dtype_bytes) * 1e6)
    }

    pub fn predict_elementwise(&self, bytes: u64) -> Result<f64, CostError> {
        Ok(roofline::elementwise(&self.hardware, bytes) * 1e6)
    }
}

impl OpPredictor for CostModel {
    fn attention(&self, f: &AttentionFeatures) -> Result<f64, CostError> {
        self.predict_attention(f)
    }

    fn grouped_gemm(&self, f: &GroupedGemmFeatures) -> Result<f64, CostError> {
        self.predict_grouped_gemm(f)
    }

    fn linear(&self, m: u64, n: u64, k: u64) -> Result<f64, CostError> {
        self.predict_linear(m, n, k)
    }

    fn elementwise(&self, bytes: u64) -> Result<f64, CostError> {
        self.predict_elementwise(bytes)
    }
}
