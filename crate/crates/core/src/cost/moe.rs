//! MoE layer latency under expert parallelism.
//!
//! The expert phase finishes when the slowest EP rank finishes, so the
//! layer costs `gate + dispatch + max_r(expert_r) + combine`.

use serde::{Deserialize, Serialize};

use crate::topology::{CollectiveKind, ModelConfig, MoeSplit, NetworkSpec};

use super::features::{CountMode, GroupedGemmFeatures};
use super::model::OpPredictor;
use super::routing::ExpertAssignment;
use super::CostError;

/// Shape of one MoE layer as laid out over its EP group.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayout {
    pub d_model: u64,
    pub expert_d_ff: u64,
    pub gemms_per_expert: u32,
    pub dtype_bytes: u32,
    pub moe_tp: u32,
    pub moe_ep: u32,
    pub network: NetworkSpec,
}

impl MoeLayout {
    pub fn new(model: &ModelConfig, split: &MoeSplit, network: &NetworkSpec) -> Result<Self, CostError> {
        let moe = model.moe.as_ref().ok_or_else(|| CostError::TopologyMismatch("model has no MoE config".into()))?;
        Ok(MoeLayout {
            d_model: model.d_model,
            expert_d_ff: moe.expert_d_ff,
            gemms_per_expert: model.ffn_gemms() as u32,
            dtype_bytes: model.dtype_bytes,
            moe_tp: split.moe_tp,
            moe_ep: split.moe_ep,
            network: network.clone(),
        })
    }

    /// All-to-all time in µs for one direction of `tokens * top_k` hidden
    /// vectors spread over the EP group.
    pub fn all_to_all_us(&self, total_tokens: u64, top_k: u32) -> f64 {
        if self.moe_ep <= 1 {
            return 0.0;
        }
        let bytes = total_tokens * top_k as u64 * self.d_model * self.dtype_bytes as u64;
        let per_rank = bytes.div_ceil(self.moe_ep as u64);
        self.network.collective(CollectiveKind::AllToAll, per_rank, self.moe_ep) * 1e6
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeBreakdown {
    pub gate_us: f64,
    pub dispatch_us: f64,
    /// Grouped GEMM time of each EP rank; idle ranks cost 0.
    pub per_rank_us: Vec<f64>,
    /// Exactly the maximum of `per_rank_us`.
    pub expert_us: f64,
    /// 1-based rank with the largest time; lowest rank wins ties.
    pub straggler_rank: u32,
    pub combine_us: f64,
    /// Routed tokens per rank divided by the mean over ranks.
    pub rank_imbalance: Vec<f64>,
}

impl MoeBreakdown {
    pub fn total_us(&self) -> f64 {
        self.gate_us + self.dispatch_us + self.expert_us + self.combine_us
    }
}

pub fn moe_layer_latency<P: OpPredictor + ?Sized>(
    assignment: &ExpertAssignment,
    layout: &MoeLayout,
    predictor: &P,
) -> Result<(f64, MoeBreakdown), CostError> {
    let ranks = assignment.rank_counts(layout.moe_ep)?;
    if layout.moe_tp == 0 || !layout.expert_d_ff.is_multiple_of(layout.moe_tp as u64) {
        return Err(CostError::TopologyMismatch(format!(
            "expert_d_ff {} not divisible by moe_tp {}",
            layout.expert_d_ff, layout.moe_tp
        )));
    }
    let t = assignment.total_tokens;
    let gate_us = predictor.linear(t, assignment.num_experts() as u64, layout.d_model)?;
    let comm_us = layout.all_to_all_us(t, assignment.top_k);
    let local_ff = layout.expert_d_ff / layout.moe_tp as u64;

    let mut per_rank_us = Vec::with_capacity(ranks.len());
    let mut loads = Vec::with_capacity(ranks.len());
    for counts in &ranks {
        let routed: u64 = counts.iter().sum();
        loads.push(routed as f64);
        per_rank_us.push(if routed == 0 {
            0.0
        } else {
            let f = GroupedGemmFeatures::new(
                counts,
                routed,
                assignment.top_k,
                CountMode::LocalShard,
                layout.d_model,
                local_ff,
                layout.gemms_per_expert,
            )?;
            predictor.grouped_gemm(&f)?
        });
    }
    let mut straggler = 0usize;
    for (i, &v) in per_rank_us.iter().enumerate() {
        if v > per_rank_us[straggler] {
            straggler = i;
        }
    }
    let mean_load = loads.iter().sum::<f64>() / loads.len() as f64;
    let b = MoeBreakdown {
        gate_us,
        dispatch_us: comm_us,
        expert_us: per_rank_us[straggler],
        straggler_rank: straggler as u32 + 1,
        per_rank_us,
        combine_us: comm_us,
        rank_imbalance: loads.iter().map(|l| if mean_load > 0.0 { l / mean_load } else { 0.0 }).collect(),
    };
    Ok((b.total_us(), b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::features::AttentionFeatures;
    use crate::cost::routing::RoutingPolicy;
    use crate::cost::ConstantPredictor;
    use crate::topology::Link;

    /// Per-rank time is a fixed function of the local routed count.
    struct Stub;

    impl OpPredictor for Stub {
        fn attention(&self, _: &AttentionFeatures) -> Result<f64, CostError> {
            Ok(1.0)
        }
        fn grouped_gemm(&self, f: &GroupedGemmFeatures) -> Result<f64, CostError> {
            Ok(f.routed_tokens() as f64 * 10.0)
        }
        fn linear(&self, _: u64, _: u64, _: u64) -> Result<f64, CostError> {
            Ok(5.0)
        }
        fn elementwise(&self, _: u64) -> Result<f64, CostError> {
            Ok(1.0)
        }
    }

    fn layout(ep: u32) -> MoeLayout {
        // 10µs all-to-all at any size.
        let link = Link { alpha: 10e-6, beta: f64::INFINITY };
        MoeLayout {
            d_model: 16,
            expert_d_ff: 32,
            gemms_per_expert: 2,
            dtype_bytes: 2,
            moe_tp: 1,
            moe_ep: ep,
            network: NetworkSpec { intra_replica: link, inter_cluster: link, collective_overrides: vec![] },
        }
    }

    fn trace(t: u64, k: u32, counts: Vec<u64>) -> ExpertAssignment {
        crate::cost::route_tokens(t, counts.len() as u32, k, &RoutingPolicy::Trace { counts }, 0).unwrap()
    }

    #[test]
    fn two_rank_hand_sum() {
        // Rank 1 routes 4 copies (40µs), rank 2 routes 9 (90µs).
        let a = trace(13, 1, vec![4, 0, 5, 4]);
        let (d, b) = moe_layer_latency(&a, &layout(2), &Stub).unwrap();
        assert_eq!(b.per_rank_us, vec![40.0, 90.0]);
        assert!((b.dispatch_us - 10.0).abs() < 1e-9);
        assert!((d - 115.0).abs() < 1e-9);
        assert_eq!(b.straggler_rank, 2);
    }

    #[test]
    fn single_rank_is_its_own_max() {
        let a = trace(6, 2, vec![4, 5, 3]);
        let (_, b) = moe_layer_latency(&a, &layout(1), &ConstantPredictor { us: 7.0 }).unwrap();
        assert_eq!(b.expert_us, 7.0);
        assert_eq!(b.dispatch_us, 0.0);
    }

    #[test]
    fn skew_is_not_faster() {
        let bal = trace(8, 1, vec![2, 2, 2, 2]);
        let skew = trace(8, 1, vec![4, 2, 0, 2]);
        let (a, _) = moe_layer_latency(&bal, &layout(2), &Stub).unwrap();
        let (b, _) = moe_layer_latency(&skew, &layout(2), &Stub).unwrap();
        assert!(b >= a);
    }

    #[test]
    fn ep_must_divide_experts() {
        let a = trace(4, 1, vec![1, 1, 1, 1]);
        assert!(matches!(moe_layer_latency(&a, &layout(3), &Stub), Err(CostError::TopologyMismatch(_))));
    }
}
