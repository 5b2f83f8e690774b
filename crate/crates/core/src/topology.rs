//! Model architecture, parallel layout, memory accounting, and alpha-beta
//! network costs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The expert-parallel sharding equation every MoE/AF layout must satisfy.
pub const EP_EQUATION: &str = "attn_dp*attn_tp == moe_tp*moe_ep";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TopologyError {
    #[error("topology constraint violated: {equation} ({detail})")]
    TopologyConstraintViolated { equation: String, detail: String },
    #[error("invalid role set: {0}")]
    RoleSetInvalid(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

fn violated(equation: &str, detail: String) -> TopologyError {
    TopologyError::TopologyConstraintViolated { equation: equation.to_string(), detail }
}

fn default_dtype_bytes() -> u32 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeConfig {
    pub num_experts: u32,
    pub top_k: u32,
    pub expert_d_ff: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: u32,
    pub d_model: u64,
    pub d_ff: u64,
    pub num_query_heads: u32,
    pub num_kv_heads: u32,
    pub head_dim: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moe: Option<MoeConfig>,
    #[serde(default = "default_dtype_bytes")]
    pub dtype_bytes: u32,
    /// Gated FFN (gate + up + down) instead of up + down.
    #[serde(default)]
    pub gated_ffn: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), TopologyError> {
        let dims = [
            ("num_layers", self.num_layers as u64),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("num_query_heads", self.num_query_heads as u64),
            ("num_kv_heads", self.num_kv_heads as u64),
            ("head_dim", self.head_dim),
            ("dtype_bytes", self.dtype_bytes as u64),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(TopologyError::Invalid(format!("model.{name} must be positive")));
        }
        if self.d_model != self.num_query_heads as u64 * self.head_dim {
            return Err(violated(
                "d_model == num_query_heads*head_dim",
                format!("{} != {}*{}", self.d_model, self.num_query_heads, self.head_dim),
            ));
        }
        if !self.num_query_heads.is_multiple_of(self.num_kv_heads) {
            return Err(TopologyError::Invalid("num_query_heads must be a multiple of num_kv_heads".into()));
        }
        if let Some(moe) = &self.moe {
            if moe.num_experts == 0 || moe.expert_d_ff == 0 {
                return Err(TopologyError::Invalid("moe dims must be positive".into()));
            }
            if moe.top_k == 0 || moe.top_k > moe.num_experts {
                return Err(TopologyError::Invalid(format!(
                    "moe.top_k must be in [1, {}], got {}",
                    moe.num_experts, moe.top_k
                )));
            }
        }
        Ok(())
    }

    /// Number of GEMMs in one (expert) FFN.
    pub fn ffn_gemms(&self) -> u64 {
        if self.gated_ffn {
            3
        } else {
            2
        }
    }

    pub fn q_dim(&self) -> u64 {
        self.num_query_heads as u64 * self.head_dim
    }

    pub fn kv_dim(&self) -> u64 {
        self.num_kv_heads as u64 * self.head_dim
    }

    /// Attention weight elements of one layer (Q, K, V, O projections).
    pub fn attn_layer_params(&self) -> u64 {
        2 * self.d_model * self.q_dim() + 2 * self.d_model * self.kv_dim()
    }

    /// FFN (dense) or expert-plus-router weight elements of one layer.
    pub fn ffn_layer_params(&self) -> u64 {
        match &self.moe {
            None => self.ffn_gemms() * self.d_model * self.d_ff,
            Some(m) => {
                m.num_experts as u64 * self.ffn_gemms() * self.d_model * m.expert_d_ff
                    + self.d_model * m.num_experts as u64
            }
        }
    }

    pub fn weight_bytes(&self) -> u64 {
        self.num_layers as u64 * (self.attn_layer_params() + self.ffn_layer_params()) * self.dtype_bytes as u64
    }
}

/// KV-cache bytes stored per token across all layers.
pub fn kv_bytes_per_token(model: &ModelConfig) -> u64 {
    2 * model.num_layers as u64 * model.num_kv_heads as u64 * model.head_dim * model.dtype_bytes as u64
}

/// Splits `total` bytes across `tp` shards; the first `total % tp` shards
/// carry one extra byte so the shards sum to `total`.
pub fn shard_bytes(total: u64, tp: u32) -> Vec<u64> {
    let tp = tp.max(1) as u64;
    (0..tp).map(|r| total / tp + u64::from(r < total % tp)).collect()
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelismConfig {
    #[serde(default = "one")]
    pub tp: u32,
    #[serde(default = "one")]
    pub pp: u32,
    #[serde(default = "one")]
    pub dp: u32,
    #[serde(default = "one")]
    pub ep: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attn_tp: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attn_dp: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moe_tp: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moe_ep: Option<u32>,
}

impl Default for ParallelismConfig {
    fn default() -> Self {
        ParallelismConfig { tp: 1, pp: 1, dp: 1, ep: 1, attn_tp: None, attn_dp: None, moe_tp: None, moe_ep: None }
    }
}

/// Resolved attention/expert sharding of one replica.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeSplit {
    pub attn_tp: u32,
    pub attn_dp: u32,
    pub moe_tp: u32,
    pub moe_ep: u32,
}

impl MoeSplit {
    /// Checks `attn_dp*attn_tp == moe_tp*moe_ep` and positivity.
    pub fn check(&self) -> Result<(), TopologyError> {
        if [self.attn_tp, self.attn_dp, self.moe_tp, self.moe_ep].contains(&0) {
            return Err(TopologyError::Invalid("parallelism degrees must be >= 1".into()));
        }
        let lhs = self.attn_dp as u64 * self.attn_tp as u64;
        let rhs = self.moe_tp as u64 * self.moe_ep as u64;
        if lhs != rhs {
            return Err(violated(
                EP_EQUATION,
                format!("{}*{} = {lhs} but {}*{} = {rhs}", self.attn_dp, self.attn_tp, self.moe_tp, self.moe_ep),
            ));
        }
        Ok(())
    }

    pub fn gpus(&self) -> u32 {
        self.attn_dp * self.attn_tp
    }
}

impl ParallelismConfig {
    /// Resolves the attention/expert split. When none of the four split
    /// fields is given, attention uses `tp` with no DP and experts use
    /// `ep`-way expert parallelism with `tp/ep`-way expert TP.
    pub fn split(&self) -> Result<MoeSplit, TopologyError> {
        if [self.tp, self.pp, self.dp, self.ep].contains(&0) {
            return Err(TopologyError::Invalid("parallelism degrees must be >= 1".into()));
        }
        let split = match (self.attn_tp, self.attn_dp, self.moe_tp, self.moe_ep) {
            (Some(attn_tp), Some(attn_dp), Some(moe_tp), Some(moe_ep)) => MoeSplit { attn_tp, attn_dp, moe_tp, moe_ep },
            (None, None, None, None) => {
                if !self.tp.is_multiple_of(self.ep) {
                    return Err(violated("tp % ep == 0", format!("{} % {} != 0", self.tp, self.ep)));
                }
                MoeSplit { attn_tp: self.tp, attn_dp: 1, moe_tp: self.tp / self.ep, moe_ep: self.ep }
            }
            _ => {
                return Err(TopologyError::Invalid("attn_tp, attn_dp, moe_tp and moe_ep must be given together".into()))
            }
        };
        split.check()?;
        Ok(split)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageRole {
    Colocated,
    Prefill,
    Decode,
    Attention,
    Ffn,
}

impl StageRole {
    pub fn holds_kv(self) -> bool {
        !matches!(self, StageRole::Ffn)
    }
}

/// Roofline parameters of one GPU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareProfile {
    /// FLOP/s.
    pub peak_flops: f64,
    /// Bytes/s.
    pub mem_bw: f64,
    /// Seconds per kernel launch.
    pub kernel_overhead: f64,
}

impl HardwareProfile {
    pub fn validate(&self) -> Result<(), TopologyError> {
        if !(self.peak_flops > 0.0 && self.mem_bw > 0.0 && self.kernel_overhead >= 0.0)
            || !(self.peak_flops.is_finite() && self.mem_bw.is_finite() && self.kernel_overhead.is_finite())
        {
            return Err(TopologyError::Invalid(
                "hardware needs peak_flops > 0, mem_bw > 0, kernel_overhead >= 0".into(),
            ));
        }
        Ok(())
    }
}

fn default_kernel_overhead() -> f64 {
    5e-6
}

fn default_reserve() -> f64 {
    0.1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareSpec {
    pub peak_flops: f64,
    pub mem_bw: f64,
    pub hbm_capacity_bytes: u64,
    #[serde(default = "default_kernel_overhead")]
    pub kernel_overhead: f64,
}

impl HardwareSpec {
    pub fn profile(&self) -> HardwareProfile {
        HardwareProfile { peak_flops: self.peak_flops, mem_bw: self.mem_bw, kernel_overhead: self.kernel_overhead }
    }
}

/// Fields filled in by [`validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DerivedCluster {
    pub split: MoeSplit,
    pub weight_bytes_per_replica: u64,
    pub kv_bytes_per_token: u64,
    pub kv_capacity_tokens: u64,
}

fn default_replicas() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub id: u32,
    pub role: StageRole,
    #[serde(default = "default_replicas")]
    pub num_replicas: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gpus_per_replica: Option<u32>,
    pub hardware: HardwareSpec,
    #[serde(default)]
    pub parallelism: ParallelismConfig,
    /// Replaces the HBM-derived KV pool size when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kv_capacity_tokens: Option<u64>,
    /// Fraction of HBM held back for activations.
    #[serde(default = "default_reserve")]
    pub activation_reserve: f64,
    /// Filled by [`validate`]; never read from or written to config files.
    #[serde(skip)]
    pub derived: Option<DerivedCluster>,
}

impl ClusterSpec {
    pub fn derived(&self) -> &DerivedCluster {
        self.derived.as_ref().expect("cluster used before topology::validate")
    }

    pub fn gpus(&self) -> u32 {
        self.gpus_per_replica.expect("cluster used before topology::validate")
    }

    pub fn total_gpus(&self) -> u64 {
        self.gpus() as u64 * self.num_replicas as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Link {
    /// Latency, seconds.
    pub alpha: f64,
    /// Bandwidth, bytes/s.
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectiveKind {
    AllToAll,
    AllReduce,
    AllGather,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectiveOverride {
    pub kind: CollectiveKind,
    pub n_ranks: u32,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub intra_replica: Link,
    pub inter_cluster: Link,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub collective_overrides: Vec<CollectiveOverride>,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<(), TopologyError> {
        for (name, l) in [("intra_replica", &self.intra_replica), ("inter_cluster", &self.inter_cluster)] {
            if !(l.alpha >= 0.0 && l.alpha.is_finite() && l.beta > 0.0) {
                return Err(TopologyError::Invalid(format!("network.{name} needs alpha >= 0 and beta > 0")));
            }
        }
        Ok(())
    }

    /// Intra-replica collective cost, honoring the calibration table.
    pub fn collective(&self, kind: CollectiveKind, bytes_per_rank: u64, n_ranks: u32) -> f64 {
        self.collective_overrides
            .iter()
            .find(|o| o.kind == kind && o.n_ranks == n_ranks)
            .map(|o| o.duration_s)
            .unwrap_or_else(|| collective_time(kind, bytes_per_rank, n_ranks, &self.intra_replica))
    }
}

/// Point-to-point transfer seconds: `alpha + bytes/beta`.
pub fn transfer_time(bytes: u64, link: &Link) -> f64 {
    link.alpha + bytes as f64 / link.beta
}

/// Ring-model collective seconds. A single rank communicates nothing.
pub fn collective_time(kind: CollectiveKind, bytes_per_rank: u64, n_ranks: u32, link: &Link) -> f64 {
    if n_ranks <= 1 {
        return 0.0;
    }
    let n = n_ranks as f64;
    let share = bytes_per_rank as f64 * (n - 1.0) / n;
    match kind {
        CollectiveKind::AllToAll | CollectiveKind::AllGather => link.alpha + share / link.beta,
        CollectiveKind::AllReduce => 2.0 * link.alpha + 2.0 * share / link.beta,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServingMode {
    Colocated,
    Pd,
    Af,
}

/// Everything [`validate`] looks at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Deployment {
    pub mode: ServingMode,
    pub model: ModelConfig,
    pub clusters: Vec<ClusterSpec>,
    pub network: NetworkSpec,
}

impl Deployment {
    pub fn clusters_with_role(&self, role: StageRole) -> impl Iterator<Item = &ClusterSpec> {
        self.clusters.iter().filter(move |c| c.role == role)
    }

    pub fn cluster(&self, id: u32) -> Option<&ClusterSpec> {
        self.clusters.iter().find(|c| c.id == id)
    }

    pub fn total_gpus(&self) -> u64 {
        self.clusters.iter().map(ClusterSpec::total_gpus).sum()
    }
}

fn check_roles(mode: ServingMode, clusters: &[ClusterSpec]) -> Result<(), TopologyError> {
    let count = |r: StageRole| clusters.iter().filter(|c| c.role == r).count();
    let others = |allowed: &[StageRole]| clusters.iter().any(|c| !allowed.contains(&c.role));
    match mode {
        ServingMode::Colocated => {
            if count(StageRole::Colocated) == 0 || others(&[StageRole::Colocated]) {
                return Err(TopologyError::RoleSetInvalid(
                    "colocated mode needs one or more colocated clusters and nothing else".into(),
                ));
            }
        }
        ServingMode::Pd => {
            if count(StageRole::Prefill) == 0 || count(StageRole::Decode) == 0 {
                return Err(TopologyError::RoleSetInvalid(
                    "pd mode needs at least one prefill and one decode cluster".into(),
                ));
            }
            if others(&[StageRole::Prefill, StageRole::Decode]) {
                return Err(TopologyError::RoleSetInvalid("pd mode admits only prefill and decode clusters".into()));
            }
        }
        ServingMode::Af => {
            if count(StageRole::Attention) != 1 || count(StageRole::Ffn) != 1 || clusters.len() != 2 {
                return Err(TopologyError::RoleSetInvalid(
                    "af mode needs exactly one attention and one ffn cluster".into(),
                ));
            }
        }
    }
    Ok(())
}

fn derive_cluster(c: &ClusterSpec, model: &ModelConfig) -> Result<(u32, DerivedCluster), TopologyError> {
    let p = &c.parallelism;
    let split = p.split()?;
    let (gpus, weights) = match c.role {
        StageRole::Colocated | StageRole::Prefill | StageRole::Decode => {
            if split.gpus() != p.tp {
                return Err(violated(
                    "attn_dp*attn_tp == tp",
                    format!("cluster {}: {} != {}", c.id, split.gpus(), p.tp),
                ));
            }
            let attn = split.attn_dp as u64 * model.attn_layer_params();
            let bytes = model.num_layers as u64 * (attn + model.ffn_layer_params()) * model.dtype_bytes as u64;
            (p.tp * p.pp, bytes)
        }
        StageRole::Attention | StageRole::Ffn => {
            if p.pp != 1 {
                return Err(TopologyError::Invalid(format!(
                    "cluster {}: attention/ffn clusters do not support pp > 1",
                    c.id
                )));
            }
            let per_layer = if c.role == StageRole::Attention {
                split.attn_dp as u64 * model.attn_layer_params()
            } else {
                model.ffn_layer_params()
            };
            (split.gpus(), model.num_layers as u64 * per_layer * model.dtype_bytes as u64)
        }
    };
    if let Some(given) = c.gpus_per_replica {
        if given != gpus {
            return Err(violated(
                "gpus_per_replica == role parallelism product",
                format!("cluster {}: {given} != {gpus}", c.id),
            ));
        }
    }
    let kv_per_token = kv_bytes_per_token(model);
    let kv_capacity_tokens = if !c.role.holds_kv() {
        0
    } else if let Some(tokens) = c.kv_capacity_tokens {
        tokens
    } else {
        let capacity = gpus as u64 * c.hardware.hbm_capacity_bytes;
        let reserve = (capacity as f64 * c.activation_reserve).ceil() as u64;
        let pool = capacity.checked_sub(weights).and_then(|v| v.checked_sub(reserve)).ok_or_else(|| {
            TopologyError::Invalid(format!(
                "cluster {}: weights ({weights} B) plus activation reserve exceed HBM ({capacity} B)",
                c.id
            ))
        })?;
        pool / kv_per_token
    };
    Ok((
        gpus,
        DerivedCluster {
            split,
            weight_bytes_per_replica: weights,
            kv_bytes_per_token: kv_per_token,
            kv_capacity_tokens,
        },
    ))
}

/// Checks role sets and sharding constraints and fills derived fields.
/// Idempotent.
pub fn validate(deployment: &Deployment) -> Result<Deployment, TopologyError> {
    deployment.model.validate()?;
    deployment.network.validate()?;
    check_roles(deployment.mode, &deployment.clusters)?;
    let mut ids: Vec<u32> = deployment.clusters.iter().map(|c| c.id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(TopologyError::Invalid("cluster ids must be unique".into()));
    }
    let mut out = deployment.clone();
    for c in &mut out.clusters {
        if c.num_replicas == 0 {
            return Err(TopologyError::Invalid(format!("cluster {}: num_replicas must be >= 1", c.id)));
        }
        if !(0.0..1.0).contains(&c.activation_reserve) {
            return Err(TopologyError::Invalid(format!("cluster {}: activation_reserve must be in [0, 1)", c.id)));
        }
        c.hardware.profile().validate()?;
        let (gpus, derived) = derive_cluster(c, &deployment.model)?;
        if c.role.holds_kv() && derived.kv_capacity_tokens == 0 {
            return Err(TopologyError::Invalid(format!("cluster {}: KV pool is empty", c.id)));
        }
        c.gpus_per_replica = Some(gpus);
        c.derived = Some(derived);
    }
    if deployment.mode == ServingMode::Af {
        let attn = out.clusters_with_role(StageRole::Attention).next().expect("role checked");
        let ffn = out.clusters_with_role(StageRole::Ffn).next().expect("role checked");
        let (a, f) = (attn.derived().split, ffn.derived().split);
        MoeSplit { attn_tp: a.attn_tp, attn_dp: a.attn_dp, moe_tp: f.moe_tp, moe_ep: f.moe_ep }.check()?;
    }
    Ok(out)
}
