//! Closed-form roofline costs, in seconds.

use crate::topology::HardwareProfile;

use super::features::{AttentionFeatures, GroupedGemmFeatures, Phase};

/// `kernel_overhead + max(flops / peak_flops, bytes / mem_bw)`.
pub fn roofline(hw: &HardwareProfile, flops: f64, bytes: f64) -> f64 {
    hw.kernel_overhead + (flops / hw.peak_flops).max(bytes / hw.mem_bw)
}

pub fn linear_flops(m: u64, n: u64, k: u64) -> f64 {
    2.0 * m as f64 * n as f64 * k as f64
}

pub fn linear_bytes(m: u64, n: u64, k: u64, dtype_bytes: u32) -> f64 {
    dtype_bytes as f64 * (m as f64 * n as f64 + n as f64 * k as f64 + m as f64 * k as f64)
}

pub fn linear(hw: &HardwareProfile, m: u64, n: u64, k: u64, dtype_bytes: u32) -> f64 {
    roofline(hw, linear_flops(m, n, k), linear_bytes(m, n, k, dtype_bytes))
}

/// Prefill counts `4 * l * c * h_q * d` per request, halved for causal
/// self-attention (`c == l`); decode counts `4 * c * h_q * d`.
pub fn attention_flops(f: &AttentionFeatures) -> f64 {
    let per_elem = 4.0 * f.dims.num_query_heads as f64 * f.dims.head_dim as f64;
    match f.phase {
        Phase::Decode => per_elem * f.context.sum as f64,
        Phase::Prefill => f
            .query_lens
            .iter()
            .zip(&f.context_lens)
            .map(|(&l, &c)| {
                let area = l as f64 * c as f64;
                per_elem * if l == c { 0.5 * area } else { area }
            })
            .sum(),
    }
}

/// KV reads `2 * c * h_kv * d` plus query read and output write
/// `2 * l * h_q * d`, times the element size.
pub fn attention_bytes(f: &AttentionFeatures, dtype_bytes: u32) -> f64 {
    let d = f.dims.head_dim as f64;
    let kv = 2.0 * f.context.sum as f64 * f.dims.num_kv_heads as f64 * d;
    let qo = 2.0 * f.query.sum as f64 * f.dims.num_query_heads as f64 * d;
    dtype_bytes as f64 * (kv + qo)
}

pub fn attention(hw: &HardwareProfile, f: &AttentionFeatures, dtype_bytes: u32) -> f64 {
    roofline(hw, attention_flops(f), attention_bytes(f, dtype_bytes))
}

/// `gemms_per_expert` GEMMs of `2 * n_e * d_model * d_ff` FLOPs per expert.
pub fn grouped_gemm_flops(f: &GroupedGemmFeatures) -> f64 {
    f.gemms_per_expert as f64 * 2.0 * f.routed_tokens() as f64 * f.d_model as f64 * f.d_ff as f64
}

/// Weights of every active expert plus per-token input, output, and
/// intermediate activations.
pub fn grouped_gemm_bytes(f: &GroupedGemmFeatures, dtype_bytes: u32) -> f64 {
    let g = f.gemms_per_expert as f64;
    let weights = f.active_experts as f64 * g * f.d_model as f64 * f.d_ff as f64;
    let acts = f.routed_tokens() as f64 * (2.0 * f.d_model as f64 + g * f.d_ff as f64);
    dtype_bytes as f64 * (weights + acts)
}

pub fn grouped_gemm(hw: &HardwareProfile, f: &GroupedGemmFeatures, dtype_bytes: u32) -> f64 {
    roofline(hw, grouped_gemm_flops(f), grouped_gemm_bytes(f, dtype_bytes))
}

/// Memory-bound elementwise kernel touching `bytes`.
pub fn elementwise(hw: &HardwareProfile, bytes: u64) -> f64 {
    hw.kernel_overhead + bytes as f64 / hw.mem_bw
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::features::{AttnDims, CountMode};

    const HW: HardwareProfile = HardwareProfile { peak_flops: 312e12, mem_bw: 2e12, kernel_overhead: 5e-6 };

    #[test]
    fn linear_flop_term() {
        let t = linear_flops(1024, 4096, 4096) / HW.peak_flops;
        assert!((t * 1e6 - 110.127).abs() < 1e-3, "{}", t * 1e6);
        assert_eq!(linear_flops(2048, 4096, 4096), 2.0 * linear_flops(1024, 4096, 4096));
        assert!((linear(&HW, 1, 1, 1, 2) - HW.kernel_overhead) < 1e-10);
    }

    #[test]
    fn degenerate_grouping_is_one_dense_ffn() {
        let f = GroupedGemmFeatures::new(&[0, 512, 0, 0], 512, 1, CountMode::LocalShard, 4096, 1024, 2).unwrap();
        let flops = 2.0 * linear_flops(512, 1024, 4096);
        let bytes = 2.0 * (2.0 * 4096.0 * 1024.0 + 512.0 * (2.0 * 4096.0 + 2.0 * 1024.0));
        assert_eq!(grouped_gemm(&HW, &f, 2), roofline(&HW, flops, bytes));
    }

    #[test]
    fn causal_halving() {
        let dims = AttnDims { num_query_heads: 2, num_kv_heads: 1, head_dim: 4 };
        let f = AttentionFeatures::prefill(&[10], dims).unwrap();
        assert_eq!(attention_flops(&f), 0.5 * 4.0 * 10.0 * 10.0 * 2.0 * 4.0);
        let g = crate::cost::features::attention_features(&[10], &[30], Phase::Prefill, dims).unwrap();
        assert_eq!(attention_flops(&g), 4.0 * 10.0 * 30.0 * 2.0 * 4.0);
        let d = AttentionFeatures::decode(&[30, 10], dims).unwrap();
        assert_eq!(attention_flops(&d), 4.0 * 40.0 * 2.0 * 4.0);
        assert_eq!(attention_bytes(&d, 2), 2.0 * (2.0 * 40.0 * 4.0 + 2.0 * 2.0 * 2.0 * 4.0));
    }
}
