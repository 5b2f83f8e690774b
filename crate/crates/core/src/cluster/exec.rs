use std::sync::Arc;

use crate::cost::{
    moe_layer_latency, route_tokens, AttentionFeatures, AttnDims, MoeBreakdown, MoeLayout, OpPredictor, RoutingPolicy,
};
use crate::sim::SimDuration;
use crate::topology::{transfer_time, CollectiveKind, ModelConfig, MoeSplit, NetworkSpec};

use super::batch::{BatchMember, BatchPlan};
use super::ClusterError;

/// Everything needed to cost a batch on one replica.
#[derive(Clone)]
pub struct ExecContext {
    pub model: ModelConfig,
    pub predictor: Arc<dyn OpPredictor + Send + Sync>,
    pub split: MoeSplit,
    pub tp: u32,
    pub pp: u32,
    pub network: NetworkSpec,
    pub routing: RoutingPolicy,
    pub moe: Option<MoeLayout>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecOutcome {
    pub duration: SimDuration,
    pub attention_us: f64,
    pub ffn_us: f64,
    /// Per MoE layer: routed tokens on the busiest EP rank over the mean.
    pub rank_imbalance: Vec<f64>,
}

/// Mixes `parts` into one 64-bit seed (splitmix64 finalizer per part).
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x9E37_79B9_7F4A_7C15u64, |acc, &p| {
        let mut z = acc ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(acc << 6);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    })
}

impl ExecContext {
    pub fn new(
        model: ModelConfig,
        predictor: Arc<dyn OpPredictor + Send + Sync>,
        split: MoeSplit,
        tp: u32,
        pp: u32,
        network: NetworkSpec,
        routing: RoutingPolicy,
    ) -> Result<Self, ClusterError> {
        let moe = match model.moe {
            Some(_) => Some(MoeLayout::new(&model, &split, &network)?),
            None => None,
        };
        Ok(ExecContext { model, predictor, split, tp, pp, network, routing, moe })
    }

    fn act_bytes(&self, tokens: u64) -> u64 {
        tokens * self.model.d_model * self.model.dtype_bytes as u64
    }

    fn all_reduce_us(&self, tokens: u64, ranks: u32) -> f64 {
        if ranks <= 1 {
            return 0.0;
        }
        self.network.collective(CollectiveKind::AllReduce, self.act_bytes(tokens), ranks) * 1e6
    }

    fn shard_dims(&self) -> AttnDims {
        let tp = self.split.attn_tp;
        AttnDims {
            num_query_heads: self.model.num_query_heads.div_ceil(tp),
            num_kv_heads: self.model.num_kv_heads.div_ceil(tp),
            head_dim: self.model.head_dim,
        }
    }

    /// One layer's attention block for one attention-DP group: norm, QKV
    /// projection, attention kernels, output projection, TP all-reduce.
    fn attention_group_us(&self, members: &[&BatchMember]) -> Result<f64, ClusterError> {
        if members.is_empty() {
            return Ok(0.0);
        }
        let p = &*self.predictor;
        let tp = self.split.attn_tp as u64;
        let m = &self.model;
        let n: u64 = members.iter().map(|b| b.query_len as u64).sum();
        let mut us = p.elementwise(2 * self.act_bytes(n))?;
        us += p.linear(n, (m.q_dim() + 2 * m.kv_dim()).div_ceil(tp), m.d_model)?;
        let dims = self.shard_dims();
        let pre: Vec<&&BatchMember> = members.iter().filter(|b| b.prefill).collect();
        if !pre.is_empty() {
            let q: Vec<u32> = pre.iter().map(|b| b.query_len).collect();
            let c: Vec<u32> = pre.iter().map(|b| b.context_len).collect();
            let f = crate::cost::attention_features(&q, &c, crate::cost::Phase::Prefill, dims)?;
            us += p.attention(&f)?;
        }
        let dec: Vec<u32> = members.iter().filter(|b| !b.prefill).map(|b| b.context_len).collect();
        if !dec.is_empty() {
            us += p.attention(&AttentionFeatures::decode(&dec, dims)?)?;
        }
        us += p.linear(n, m.d_model, m.q_dim().div_ceil(tp))?;
        Ok(us + self.all_reduce_us(n, self.split.attn_tp))
    }

    /// One layer's attention block; members spread round-robin over the
    /// attention-DP groups, and the slowest group gates the layer.
    pub fn attention_layer_us(&self, members: &[BatchMember]) -> Result<f64, ClusterError> {
        let dp = self.split.attn_dp.max(1) as usize;
        let mut worst = 0.0f64;
        for g in 0..dp {
            let group: Vec<&BatchMember> = members.iter().skip(g).step_by(dp).collect();
            worst = worst.max(self.attention_group_us(&group)?);
        }
        Ok(worst)
    }

    /// One layer's FFN block over `tokens` tokens. MoE layers route with
    /// `seed` and return their breakdown.
    pub fn ffn_layer_us(&self, tokens: u64, seed: u64) -> Result<(f64, Option<MoeBreakdown>), ClusterError> {
        let m = &self.model;
        match (&m.moe, &self.moe) {
            (Some(cfg), Some(layout)) => {
                let a = route_tokens(tokens, cfg.num_experts, cfg.top_k, &self.routing, seed)?;
                let (us, b) = moe_layer_latency(&a, layout, &*self.predictor)?;
                Ok((us, Some(b)))
            }
            _ => {
                let p = &*self.predictor;
                let ff = m.d_ff.div_ceil(self.tp as u64);
                let mut us = 0.0;
                for _ in 1..m.ffn_gemms() {
                    us += p.linear(tokens, ff, m.d_model)?;
                }
                us += p.linear(tokens, m.d_model, ff)?;
                Ok((us + self.all_reduce_us(tokens, self.tp), None))
            }
        }
    }

    /// Costs one iteration of `plan` through every layer. `seed` drives MoE
    /// routing; each layer derives its own stream from it.
    pub fn execute_batch(&self, plan: &BatchPlan, seed: u64) -> Result<ExecOutcome, ClusterError> {
        if plan.is_empty() {
            return Ok(ExecOutcome {
                duration: SimDuration(0),
                attention_us: 0.0,
                ffn_us: 0.0,
                rank_imbalance: vec![],
            });
        }
        let layers = self.model.num_layers as f64;
        let attention_us = self.attention_layer_us(&plan.members)? * layers;
        let mut ffn_us = 0.0;
        let mut rank_imbalance = Vec::new();
        if self.model.moe.is_some() {
            for layer in 0..self.model.num_layers {
                let (us, b) = self.ffn_layer_us(plan.tokens, derive_seed(&[seed, layer as u64]))?;
                ffn_us += us;
                if let Some(b) = b {
                    rank_imbalance.push(b.rank_imbalance.iter().copied().fold(0.0, f64::max));
                }
            }
        } else {
            ffn_us = self.ffn_layer_us(plan.tokens, seed)?.0 * layers;
        }
        let pp_us = if self.pp > 1 {
            (self.pp - 1) as f64 * transfer_time(self.act_bytes(plan.tokens), &self.network.intra_replica) * 1e6
        } else {
            0.0
        };
        Ok(ExecOutcome {
            duration: SimDuration::from_micros(attention_us + ffn_us + pp_us),
            attention_us,
            ffn_us,
            rank_imbalance,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{ConstantPredictor, CostError, GroupedGemmFeatures};
    use crate::topology::{Link, MoeConfig};

    fn model(layers: u32) -> ModelConfig {
        ModelConfig {
            num_layers: layers,
            d_model: 64,
            d_ff: 256,
            num_query_heads: 4,
            num_kv_heads: 2,
            head_dim: 16,
            moe: None,
            dtype_bytes: 2,
            gated_ffn: false,
        }
    }

    fn net() -> NetworkSpec {
        let l = Link { alpha: 1e-6, beta: 1e11 };
        NetworkSpec { intra_replica: l, inter_cluster: l, collective_overrides: vec![] }
    }

    fn split(tp: u32) -> MoeSplit {
        MoeSplit { attn_tp: tp, attn_dp: 1, moe_tp: tp, moe_ep: 1 }
    }

    fn ctx(m: ModelConfig, p: Arc<dyn OpPredictor + Send + Sync>) -> ExecContext {
        ExecContext::new(m, p, split(1), 1, 1, net(), RoutingPolicy::Uniform).unwrap()
    }

    fn decode_plan(ctx_len: u32) -> BatchPlan {
        BatchPlan {
            members: vec![BatchMember { request: 0, query_len: 1, context_len: ctx_len, prefill: false, kv_charge: 0 }],
            admitted: vec![],
            tokens: 1,
        }
    }

    #[test]
    fn stub_counts_six_ops_per_layer() {
        let c = ctx(model(2), Arc::new(ConstantPredictor { us: 1.0 }));
        let out = c.execute_batch(&decode_plan(10), 0).unwrap();
        assert_eq!(out.duration, SimDuration::from_micros(12.0));
    }

    #[test]
    fn doubling_layers_doubles_duration() {
        let p: Arc<dyn OpPredictor + Send + Sync> = Arc::new(ConstantPredictor { us: 3.5 });
        let a = ctx(model(3), p.clone()).execute_batch(&decode_plan(10), 0).unwrap();
        let b = ctx(model(6), p).execute_batch(&decode_plan(10), 0).unwrap();
        assert_eq!(b.duration.as_nanos(), 2 * a.duration.as_nanos());
    }

    struct Tagged;

    impl OpPredictor for Tagged {
        fn attention(&self, _: &AttentionFeatures) -> Result<f64, CostError> {
            Ok(1.0)
        }
        fn grouped_gemm(&self, f: &GroupedGemmFeatures) -> Result<f64, CostError> {
            Ok(f.routed_tokens() as f64)
        }
        fn linear(&self, _: u64, _: u64, _: u64) -> Result<f64, CostError> {
            Ok(1.0)
        }
        fn elementwise(&self, _: u64) -> Result<f64, CostError> {
            Ok(1.0)
        }
    }

    #[test]
    fn moe_ffn_delegates_to_layer_latency() {
        let mut m = model(2);
        m.moe = Some(MoeConfig { num_experts: 4, top_k: 2, expert_d_ff: 128 });
        let c = ctx(m, Arc::new(Tagged));
        let plan = decode_plan(10);
        let out = c.execute_batch(&plan, 77).unwrap();
        let mut expected = 0.0;
        for layer in 0..2 {
            let a = route_tokens(1, 4, 2, &RoutingPolicy::Uniform, derive_seed(&[77, layer])).unwrap();
            expected += moe_layer_latency(&a, c.moe.as_ref().unwrap(), &Tagged).unwrap().0;
        }
        assert_eq!(out.ffn_us, expected);
    }
}
