//! Ready-made models, hardware, and deployments for examples and tests.
//! Deployments are returned unvalidated.

use crate::topology::{
    ClusterSpec, Deployment, HardwareSpec, Link, ModelConfig, MoeConfig, NetworkSpec, ParallelismConfig, ServingMode,
    StageRole,
};

/// 7B dense decoder with grouped-query attention.
pub fn dense_7b() -> ModelConfig {
    ModelConfig {
        num_layers: 28,
        d_model: 3584,
        d_ff: 18944,
        num_query_heads: 28,
        num_kv_heads: 4,
        head_dim: 128,
        moe: None,
        dtype_bytes: 2,
        gated_ffn: true,
    }
}

/// 16B MoE decoder: 64 experts, top-6 routing.
pub fn moe_16b() -> ModelConfig {
    ModelConfig {
        num_layers: 28,
        d_model: 2048,
        d_ff: 10944,
        num_query_heads: 16,
        num_kv_heads: 16,
        head_dim: 128,
        moe: Some(MoeConfig { num_experts: 64, top_k: 6, expert_d_ff: 1408 }),
        dtype_bytes: 2,
        gated_ffn: true,
    }
}

/// 80 GB datacenter GPU, 312 TFLOP/s dense half precision.
pub fn a800() -> HardwareSpec {
    HardwareSpec { peak_flops: 312e12, mem_bw: 2.039e12, hbm_capacity_bytes: 80_000_000_000, kernel_overhead: 5e-6 }
}

pub fn default_network() -> NetworkSpec {
    NetworkSpec {
        intra_replica: Link { alpha: 5e-6, beta: 300e9 },
        inter_cluster: Link { alpha: 10e-6, beta: 25e9 },
        collective_overrides: vec![],
    }
}

pub fn cluster(id: u32, role: StageRole, replicas: u32, parallelism: ParallelismConfig) -> ClusterSpec {
    ClusterSpec {
        id,
        role,
        num_replicas: replicas,
        gpus_per_replica: None,
        hardware: a800(),
        parallelism,
        kv_capacity_tokens: None,
        activation_reserve: 0.1,
        derived: None,
    }
}

pub fn tp(tp: u32) -> ParallelismConfig {
    ParallelismConfig { tp, ..Default::default() }
}

pub fn colocated(model: ModelConfig, replicas: u32, tensor_parallel: u32) -> Deployment {
    Deployment {
        mode: ServingMode::Colocated,
        model,
        clusters: vec![cluster(0, StageRole::Colocated, replicas, tp(tensor_parallel))],
        network: default_network(),
    }
}

pub fn pd(model: ModelConfig, prefill_replicas: u32, decode_replicas: u32, tensor_parallel: u32) -> Deployment {
    Deployment {
        mode: ServingMode::Pd,
        model,
        clusters: vec![
            cluster(0, StageRole::Prefill, prefill_replicas, tp(tensor_parallel)),
            cluster(1, StageRole::Decode, decode_replicas, tp(tensor_parallel)),
        ],
        network: default_network(),
    }
}

/// One attention replica (`attn_dp x attn_tp` GPUs) paired with one FFN
/// replica (`moe_tp x moe_ep` GPUs). Both clusters carry the full split.
pub fn af(model: ModelConfig, attn_dp: u32, attn_tp: u32, moe_tp: u32, moe_ep: u32) -> Deployment {
    let split = ParallelismConfig {
        tp: attn_tp,
        attn_tp: Some(attn_tp),
        attn_dp: Some(attn_dp),
        moe_tp: Some(moe_tp),
        moe_ep: Some(moe_ep),
        ..Default::default()
    };
    Deployment {
        mode: ServingMode::Af,
        model,
        clusters: vec![cluster(0, StageRole::Attention, 1, split.clone()), cluster(1, StageRole::Ffn, 1, split)],
        network: default_network(),
    }
}
