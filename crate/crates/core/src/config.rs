//! Run configuration: one strict JSON document describing the deployment,
//! scheduling policy, cost models, and workload.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cluster::{derive_seed, SchedulerPolicy};
use crate::cost::{CostModel, Forest, OpPredictor, RoutingPolicy, Schema};
use crate::metrics::MetricsBundle;
use crate::orchestrator::{run, AfConfig, OrchestratorError, RunResult, RunSetup};
use crate::topology::{validate, Deployment};
use crate::workload::{generate, load_trace, Request, WorkloadSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}:{column}: {msg}")]
    Parse { path: PathBuf, line: usize, column: usize, msg: String },
    #[error("validation failed: {0}")]
    Validation(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CostModelConfig {
    #[default]
    Analytic,
    /// Learned models per operator; an omitted operator stays analytic.
    /// Relative paths resolve against the config file's directory.
    Learned {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        attention: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        grouped_gemm: Option<PathBuf>,
    },
}

/// Exactly one of `generate` and `trace`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generate: Option<WorkloadSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: default_out_dir() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub deployment: Deployment,
    #[serde(default)]
    pub policy: SchedulerPolicy,
    #[serde(default)]
    pub af: AfConfig,
    #[serde(default)]
    pub routing: RoutingPolicy,
    #[serde(default)]
    pub cost_model: CostModelConfig,
    pub workload: WorkloadSource,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: OutputConfig,
    /// Directory relative paths resolve against. Not part of the document.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn parse_error(path: &Path, e: serde_json::Error) -> ConfigError {
    ConfigError::Parse { path: path.to_path_buf(), line: e.line(), column: e.column(), msg: e.to_string() }
}

/// Reads, defaults, and validates a config file.
pub fn load_config(path: impl AsRef<Path>) -> Result<SimConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_config(&text, path, base)
}

/// Parses and validates config text. `path` only labels errors.
pub fn parse_config(text: &str, path: &Path, base_dir: PathBuf) -> Result<SimConfig, ConfigError> {
    let mut cfg: SimConfig = serde_json::from_str(text).map_err(|e| parse_error(path, e))?;
    cfg.base_dir = base_dir;
    cfg.validate()?;
    Ok(cfg)
}

impl SimConfig {
    /// Checks every cross-field rule and fills derived topology fields.
    pub fn validate(&mut self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Validation(e.to_string());
        self.deployment = validate(&self.deployment).map_err(|e| invalid(&e))?;
        self.policy.validate().map_err(|e| invalid(&e))?;
        if self.af.micro_batches == 0 {
            return Err(ConfigError::Validation("af.micro_batches must be >= 1".into()));
        }
        if let RoutingPolicy::DirichletSkew { alpha } = self.routing {
            if !(alpha.is_finite() && alpha > 0.0) {
                return Err(ConfigError::Validation(format!("routing alpha must be > 0, got {alpha}")));
            }
        }
        match (&self.workload.generate, &self.workload.trace) {
            (Some(spec), None) => spec.validate().map_err(|e| invalid(&e))?,
            (None, Some(p)) => self.require_file(p)?,
            _ => return Err(ConfigError::Validation("workload needs exactly one of generate, trace".into())),
        }
        if let CostModelConfig::Learned { attention, grouped_gemm } = &self.cost_model {
            for p in attention.iter().chain(grouped_gemm) {
                self.require_file(p)?;
            }
        }
        Ok(())
    }

    fn require_file(&self, p: &Path) -> Result<(), ConfigError> {
        let full = self.resolve(p);
        if full.is_file() {
            Ok(())
        } else {
            Err(ConfigError::Validation(format!("referenced file {} does not exist", full.display())))
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Canonical JSON of the document, the input to [`SimConfig::hash`].
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_string(self).expect("config serializes").as_bytes()))
    }

    /// Requests for this run. Generated workloads mix the run seed into
    /// the workload's own seed.
    pub fn requests(&self, run_seed: u64) -> Result<Vec<Request>, OrchestratorError> {
        match (&self.workload.generate, &self.workload.trace) {
            (Some(spec), _) => {
                let spec = WorkloadSpec { seed: derive_seed(&[run_seed, spec.seed]), ..spec.clone() };
                Ok(generate(&spec)?)
            }
            (None, Some(p)) => Ok(load_trace(self.resolve(p))?),
            (None, None) => Err(OrchestratorError::Setup("no workload configured".into())),
        }
    }

    /// Builds a run setup; learned models are loaded here.
    pub fn setup(&self, run_seed: u64) -> Result<RunSetup, OrchestratorError> {
        let mut setup = RunSetup::new(self.deployment.clone())?;
        setup.policy = self.policy;
        setup.routing = self.routing.clone();
        setup.af = self.af;
        setup.seed = run_seed;
        if let CostModelConfig::Learned { attention, grouped_gemm } = &self.cost_model {
            let load = |p: &Option<PathBuf>, schema: Schema| -> Result<Option<Arc<Forest>>, OrchestratorError> {
                let Some(p) = p else { return Ok(None) };
                let f = Forest::load(self.resolve(p))?;
                if f.schema != schema {
                    return Err(OrchestratorError::Setup(format!(
                        "{} holds a {} model, expected {}",
                        p.display(),
                        f.schema.id(),
                        schema.id()
                    )));
                }
                Ok(Some(Arc::new(f)))
            };
            let attn = load(attention, Schema::AttentionV1)?;
            let gg = load(grouped_gemm, Schema::GroupedGemmV1)?;
            let mut predictors: BTreeMap<u32, Arc<dyn OpPredictor + Send + Sync>> = BTreeMap::new();
            for c in &self.deployment.clusters {
                let mut m = CostModel::analytic(c.hardware.profile(), self.deployment.model.dtype_bytes);
                if let Some(f) = &attn {
                    m = m.with_attention_model(f.clone())?;
                }
                if let Some(f) = &gg {
                    m = m.with_grouped_gemm_model(f.clone())?;
                }
                predictors.insert(c.id, Arc::new(m));
            }
            setup.predictors = predictors;
        }
        Ok(setup)
    }

    /// Runs the simulation. The run seed is `derive_seed([seed, point])`,
    /// with a plain run being point 0 of a one-point sweep.
    pub fn execute(&self, point: u64) -> Result<RunResult, OrchestratorError> {
        let run_seed = derive_seed(&[self.seed, point]);
        let setup = self.setup(run_seed)?;
        run(&setup, self.requests(run_seed)?)
    }
}

pub const TRACE_FILE: &str = "trace.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const THROUGHPUT_FILE: &str = "throughput.csv";

/// Writes `bytes` to `path` through a temp file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Writes the trace, metrics JSON, summary CSV, and throughput table.
pub fn write_artifacts(dir: &Path, config_hash: &str, result: &RunResult) -> Result<(), OrchestratorError> {
    let io = |e: std::io::Error| OrchestratorError::Setup(format!("writing artifacts to {}: {e}", dir.display()));
    write_atomic(&dir.join(TRACE_FILE), result.trace.to_export_string().as_bytes()).map_err(io)?;
    write_atomic(&dir.join(METRICS_FILE), result.metrics.to_json().as_bytes()).map_err(io)?;
    write_atomic(&dir.join(SUMMARY_FILE), &csv_bytes(|w| result.metrics.write_summary_csv(config_hash, w))?)
        .map_err(io)?;
    write_atomic(&dir.join(THROUGHPUT_FILE), &csv_bytes(|w| result.metrics.write_throughput_table(w))?).map_err(io)?;
    Ok(())
}

fn csv_bytes(
    f: impl FnOnce(&mut Vec<u8>) -> Result<(), crate::metrics::MetricsError>,
) -> Result<Vec<u8>, OrchestratorError> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

/// Sets `value` at a dotted path (`af.micro_batches`,
/// `deployment.clusters.0.num_replicas`) in a JSON document. The path must
/// already exist.
pub fn set_path(doc: &mut serde_json::Value, path: &str, value: serde_json::Value) -> Result<(), ConfigError> {
    let mut cur = doc;
    for key in path.split('.') {
        let next = match cur {
            serde_json::Value::Object(map) => map.get_mut(key),
            serde_json::Value::Array(items) => key.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        };
        cur = next.ok_or_else(|| ConfigError::Validation(format!("grid key {path:?} is not a config path")))?;
    }
    *cur = value;
    Ok(())
}

/// Summary of one finished run, for reporting without the full trace.
pub fn headline(m: &MetricsBundle) -> String {
    format!(
        "{} requests, {} tokens on {} GPUs in {:.6}s: {:.3} tok/s/GPU, ttft p90 {:.6}s, tpot p90 {:.6}s",
        m.num_requests,
        m.total_tokens,
        m.total_gpus,
        m.makespan_s,
        m.throughput_tokens_per_s_per_gpu,
        m.ttft_s.p90,
        m.tpot_s.p90
    )
}
