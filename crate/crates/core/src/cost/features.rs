//! Operator feature extraction.
//!
//! Attention features summarize the whole length distribution of a batch
//! rather than one proxy length; GroupedGEMM features describe how routed
//! tokens spread over the local experts.

use serde::{Deserialize, Serialize};

use super::CostError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Prefill,
    Decode,
}

/// Per-shard attention head layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttnDims {
    pub num_query_heads: u32,
    pub num_kv_heads: u32,
    pub head_dim: u64,
}

/// Aggregate statistics of a length list. `std` is the population standard
/// deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub sum: u64,
    pub sum_sq: u64,
    pub max: u32,
    pub min: u32,
    pub mean: f64,
    pub std: f64,
}

impl LengthStats {
    pub fn of(lens: &[u32]) -> Option<Self> {
        if lens.is_empty() {
            return None;
        }
        let sum: u64 = lens.iter().map(|&l| l as u64).sum();
        let sum_sq: u64 = lens.iter().map(|&l| (l as u64) * (l as u64)).sum();
        let n = lens.len() as f64;
        let mean = sum as f64 / n;
        // Integer sums keep the result independent of element order.
        let var = (sum_sq as f64 / n - mean * mean).max(0.0);
        Some(LengthStats {
            sum,
            sum_sq,
            max: *lens.iter().max().expect("non-empty"),
            min: *lens.iter().min().expect("non-empty"),
            mean,
            std: var.sqrt(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionFeatures {
    pub phase: Phase,
    pub query_lens: Vec<u32>,
    pub context_lens: Vec<u32>,
    pub query: LengthStats,
    pub context: LengthStats,
    /// Sum over requests of query length times context length.
    pub qc_sum: u64,
    pub dims: AttnDims,
}

pub const ATTENTION_FEATURES: [&str; 18] = [
    "is_decode",
    "batch_size",
    "q_sum",
    "q_sum_sq",
    "q_max",
    "q_min",
    "q_mean",
    "q_std",
    "c_sum",
    "c_sum_sq",
    "c_max",
    "c_min",
    "c_mean",
    "c_std",
    "qc_sum",
    "num_query_heads",
    "num_kv_heads",
    "head_dim",
];

/// Builds attention features from raw per-request lengths.
pub fn attention_features(
    query_lens: &[u32],
    context_lens: &[u32],
    phase: Phase,
    dims: AttnDims,
) -> Result<AttentionFeatures, CostError> {
    if query_lens.is_empty() {
        return Err(CostError::EmptyBatch);
    }
    if query_lens.len() != context_lens.len() {
        return Err(CostError::InvalidFeatures(format!(
            "{} query lengths but {} context lengths",
            query_lens.len(),
            context_lens.len()
        )));
    }
    for (&l, &c) in query_lens.iter().zip(context_lens) {
        if l == 0 || c < l {
            return Err(CostError::InvalidFeatures(format!("need 1 <= query <= context, got ({l}, {c})")));
        }
        if phase == Phase::Decode && l != 1 {
            return Err(CostError::InvalidFeatures(format!("decode query length must be 1, got {l}")));
        }
    }
    if dims.num_query_heads == 0 || dims.num_kv_heads == 0 || dims.head_dim == 0 {
        return Err(CostError::InvalidFeatures("attention dims must be positive".into()));
    }
    Ok(AttentionFeatures {
        phase,
        query_lens: query_lens.to_vec(),
        context_lens: context_lens.to_vec(),
        query: LengthStats::of(query_lens).expect("non-empty"),
        context: LengthStats::of(context_lens).expect("non-empty"),
        qc_sum: query_lens.iter().zip(context_lens).map(|(&l, &c)| l as u64 * c as u64).sum(),
        dims,
    })
}

impl AttentionFeatures {
    /// Prefill with no prior context (context length equals query length).
    pub fn prefill(lens: &[u32], dims: AttnDims) -> Result<Self, CostError> {
        attention_features(lens, lens, Phase::Prefill, dims)
    }

    pub fn decode(context_lens: &[u32], dims: AttnDims) -> Result<Self, CostError> {
        attention_features(&vec![1; context_lens.len()], context_lens, Phase::Decode, dims)
    }

    pub fn batch_size(&self) -> usize {
        self.query_lens.len()
    }

    /// Feature vector in [`ATTENTION_FEATURES`] order.
    pub fn to_vector(&self) -> Vec<f64> {
        let (q, c) = (&self.query, &self.context);
        vec![
            f64::from(u8::from(self.phase == Phase::Decode)),
            self.batch_size() as f64,
            q.sum as f64,
            q.sum_sq as f64,
            q.max as f64,
            q.min as f64,
            q.mean,
            q.std,
            c.sum as f64,
            c.sum_sq as f64,
            c.max as f64,
            c.min as f64,
            c.mean,
            c.std,
            self.qc_sum as f64,
            self.dims.num_query_heads as f64,
            self.dims.num_kv_heads as f64,
            self.dims.head_dim as f64,
        ]
    }

    /// The single-length summary `sqrt(sum of squared context lengths)`
    /// used by proxy-length attention models.
    pub fn sqrt_proxy(&self) -> f64 {
        (self.context.sum_sq as f64).sqrt()
    }
}

/// How per-expert counts relate to `total_tokens`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountMode {
    /// Counts cover every routed copy: sum = total_tokens * top_k.
    Replicated,
    /// Counts are the token copies arriving at one shard: sum = total_tokens.
    LocalShard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedGemmFeatures {
    pub total_tokens: u64,
    pub d_model: u64,
    pub d_ff: u64,
    pub top_k: u32,
    pub gemms_per_expert: u32,
    pub mode: CountMode,
    pub counts: Vec<u64>,
    pub active_experts: u32,
    pub selection_ratio: f64,
    pub max_tokens: u64,
    pub min_active_tokens: u64,
    /// max(n_e) / mean(n_e over active experts).
    pub max_over_mean: f64,
    /// Coefficient of variation over all local experts.
    pub cv: f64,
    /// Shannon entropy of the count distribution divided by ln(E).
    pub entropy: f64,
}

pub const GROUPED_GEMM_FEATURES: [&str; 15] = [
    "total_tokens",
    "num_local_experts",
    "d_model",
    "d_ff",
    "top_k",
    "gemms_per_expert",
    "routed_tokens",
    "active_experts",
    "selection_ratio",
    "max_tokens",
    "min_active_tokens",
    "max_over_mean",
    "cv",
    "entropy",
    "straggler_load",
];

impl GroupedGemmFeatures {
    pub fn new(
        counts: &[u64],
        total_tokens: u64,
        top_k: u32,
        mode: CountMode,
        d_model: u64,
        d_ff: u64,
        gemms_per_expert: u32,
    ) -> Result<Self, CostError> {
        if total_tokens == 0 {
            return Err(CostError::EmptyBatch);
        }
        if counts.is_empty() || d_model == 0 || d_ff == 0 || top_k == 0 || gemms_per_expert == 0 {
            return Err(CostError::InvalidFeatures("grouped GEMM dims must be positive".into()));
        }
        let routed: u64 = counts.iter().sum();
        let expected = match mode {
            CountMode::Replicated => total_tokens * top_k as u64,
            CountMode::LocalShard => total_tokens,
        };
        if routed != expected {
            return Err(CostError::InvalidFeatures(format!(
                "expert counts sum to {routed}, expected {expected} for {mode:?}"
            )));
        }
        let e = counts.len() as f64;
        let active: Vec<u64> = counts.iter().copied().filter(|&n| n > 0).collect();
        let max_tokens = *counts.iter().max().expect("non-empty");
        let mean_all = routed as f64 / e;
        let mean_active = routed as f64 / active.len() as f64;
        let var = counts.iter().map(|&n| (n as f64 - mean_all).powi(2)).sum::<f64>() / e;
        let entropy = if counts.len() == 1 {
            1.0
        } else {
            let h: f64 = active
                .iter()
                .map(|&n| {
                    let p = n as f64 / routed as f64;
                    -p * p.ln()
                })
                .sum();
            h / e.ln()
        };
        Ok(GroupedGemmFeatures {
            total_tokens,
            d_model,
            d_ff,
            top_k,
            gemms_per_expert,
            mode,
            counts: counts.to_vec(),
            active_experts: active.len() as u32,
            selection_ratio: active.len() as f64 / e,
            max_tokens,
            min_active_tokens: *active.iter().min().expect("routed > 0"),
            max_over_mean: max_tokens as f64 / mean_active,
            cv: var.sqrt() / mean_all,
            entropy,
        })
    }

    pub fn num_local_experts(&self) -> usize {
        self.counts.len()
    }

    pub fn routed_tokens(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Feature vector in [`GROUPED_GEMM_FEATURES`] order.
    pub fn to_vector(&self) -> Vec<f64> {
        vec![
            self.total_tokens as f64,
            self.num_local_experts() as f64,
            self.d_model as f64,
            self.d_ff as f64,
            self.top_k as f64,
            self.gemms_per_expert as f64,
            self.routed_tokens() as f64,
            self.active_experts as f64,
            self.selection_ratio,
            self.max_tokens as f64,
            self.min_active_tokens as f64,
            self.max_over_mean,
            self.cv,
            self.entropy,
            (self.max_tokens * self.counts.len() as u64) as f64,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DIMS: AttnDims = AttnDims { num_query_heads: 28, num_kv_heads: 4, head_dim: 128 };

    #[test]
    fn uniform_lengths() {
        let f = AttentionFeatures::prefill(&[4, 4, 4, 4], DIMS).unwrap();
        assert_eq!(f.query.mean, 4.0);
        assert_eq!(f.query.std, 0.0);
        assert_eq!(f.query.max, 4);
        assert_eq!(f.query.sum_sq, 64);
    }

    #[test]
    fn two_lengths() {
        let f = AttentionFeatures::prefill(&[1, 100], DIMS).unwrap();
        assert_eq!(f.query.mean, 50.5);
        assert_eq!(f.query.max, 100);
        assert_eq!(f.query.sum, 101);
        assert_eq!(f.qc_sum, 10_001);
    }

    #[test]
    fn skewed_batch_is_not_collapsed_by_proxy() {
        // 72 requests: a few long, many short, versus a uniform batch chosen
        // to have the same sqrt(sum of squares).
        let mut skewed = vec![16u32; 68];
        skewed.extend([2048, 2048, 1024, 1024]);
        let s = AttentionFeatures::prefill(&skewed, DIMS).unwrap();
        let target = s.sqrt_proxy();
        let uniform_len = (target * target / 72.0).sqrt().round() as u32;
        let u = AttentionFeatures::prefill(&vec![uniform_len; 72], DIMS).unwrap();
        assert!((u.sqrt_proxy() - target).abs() / target < 0.01);
        assert_ne!(s.to_vector(), u.to_vector());
        assert!(s.query.std > 100.0 && u.query.std == 0.0);
    }

    #[test]
    fn errors() {
        assert!(matches!(AttentionFeatures::prefill(&[], DIMS), Err(CostError::EmptyBatch)));
        assert!(attention_features(&[2], &[1], Phase::Prefill, DIMS).is_err());
        assert!(attention_features(&[2], &[5], Phase::Decode, DIMS).is_err());
    }

    #[test]
    fn grouped_gemm_metrics() {
        let f = GroupedGemmFeatures::new(&[6, 2, 0, 0], 4, 2, CountMode::Replicated, 8, 16, 2).unwrap();
        assert_eq!(f.active_experts, 2);
        assert_eq!(f.selection_ratio, 0.5);
        assert_eq!(f.max_over_mean, 1.5);
        assert_eq!(f.min_active_tokens, 2);
        let cv = (((6.0f64 - 2.0).powi(2) + 0.0 + 4.0 + 4.0) / 4.0).sqrt() / 2.0;
        assert!((f.cv - cv).abs() < 1e-12);
        let h = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln()) / 4f64.ln();
        assert!((f.entropy - h).abs() < 1e-12);
        let bal = GroupedGemmFeatures::new(&[3, 3, 3, 3], 12, 1, CountMode::LocalShard, 8, 16, 2).unwrap();
        assert!((bal.entropy - 1.0).abs() < 1e-12);
        assert_eq!(bal.cv, 0.0);
    }

    #[test]
    fn grouped_gemm_sum_rule_and_empty() {
        assert!(matches!(
            GroupedGemmFeatures::new(&[0, 0], 0, 1, CountMode::LocalShard, 8, 8, 2),
            Err(CostError::EmptyBatch)
        ));
        assert!(GroupedGemmFeatures::new(&[1, 1], 3, 1, CountMode::LocalShard, 8, 8, 2).is_err());
        assert!(GroupedGemmFeatures::new(&[3, 3], 3, 2, CountMode::Replicated, 8, 8, 2).is_ok());
    }
}
