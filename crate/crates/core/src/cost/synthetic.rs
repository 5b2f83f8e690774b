//! Synthetic ground-truth kernels for exercising the learned predictors.
//!
//! The attention and grouped GEMM "kernels" below are tile-and-wave
//! models of an A100-class GPU: work is cut into fixed tiles, tiles are
//! assigned to CTAs, and CTAs run in waves over the SMs. Runtimes step
//! with tile and wave boundaries, which a single roofline formula cannot
//! follow.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};

use super::features::{AttentionFeatures, AttnDims, CountMode, GroupedGemmFeatures, Phase};
use super::model::{Dataset, Schema};
use super::routing::{route_tokens, RoutingPolicy};

const SMS: u64 = 108;
const SM_FLOPS: f64 = 312e12 / SMS as f64;
const MEM_BW: f64 = 2e12;
/// One SM alone reaches a few times its fair share of HBM bandwidth.
const SM_BW: f64 = 3.0 * MEM_BW / SMS as f64;
const BLOCK_Q: u64 = 128;
const BLOCK_KV: u64 = 64;
const LAUNCH_US: f64 = 6.0;
const CTA_SETUP_US: f64 = 0.3;

/// Fixed head layout used by the attention suites.
pub const SUITE_DIMS: AttnDims = AttnDims { num_query_heads: 28, num_kv_heads: 4, head_dim: 128 };
/// Per-rank expert shape used by the grouped GEMM suite.
pub const SUITE_D_MODEL: u64 = 2048;
pub const SUITE_EXPERT_D_FF: u64 = 1408;
/// Relative half-width of the uniform multiplicative noise.
pub const NOISE: f64 = 0.03;

/// Noise-free attention runtime in µs.
pub fn attention_truth_us(f: &AttentionFeatures) -> f64 {
    let hq = f.dims.num_query_heads as u64;
    let hkv = f.dims.num_kv_heads as u64;
    let d = f.dims.head_dim as f64;
    let (mut ctas, mut work, mut max_cta) = (0u64, 0.0f64, 0.0f64);
    match f.phase {
        Phase::Prefill => {
            let tile_us = 4.0 * (BLOCK_Q * BLOCK_KV) as f64 * d / SM_FLOPS * 1e6;
            for (&l, &c) in f.query_lens.iter().zip(&f.context_lens) {
                let (l, c) = (l as u64, c as u64);
                let prior = c - l;
                for j in 0..l.div_ceil(BLOCK_Q) {
                    let visible = (prior + (j + 1) * BLOCK_Q).min(c);
                    let t = CTA_SETUP_US + visible.div_ceil(BLOCK_KV) as f64 * tile_us;
                    max_cta = max_cta.max(t);
                    work += t * hq as f64;
                    ctas += hq;
                }
            }
        }
        Phase::Decode => {
            let tile_bytes = (2 * BLOCK_KV) as f64 * d * 2.0;
            let tile_us = tile_bytes / SM_BW * 1e6;
            for &c in &f.context_lens {
                let t = CTA_SETUP_US + (c as u64).div_ceil(BLOCK_KV) as f64 * tile_us;
                max_cta = max_cta.max(t);
                work += t * hkv as f64;
                ctas += hkv;
            }
            let hbm_us = f.context.sum as f64 * tile_bytes / BLOCK_KV as f64 * hkv as f64 / MEM_BW * 1e6;
            work = work.max(hbm_us * ctas.min(SMS) as f64);
        }
    }
    let waves = ctas.div_ceil(SMS) as f64;
    let per_slot = waves * work / ctas as f64;
    LAUNCH_US + max_cta.max(per_slot)
}

/// Noise-free grouped GEMM runtime in µs. SMs are split evenly across
/// local experts; each active expert pays its own launch cost and the
/// kernel ends with the slowest expert.
pub fn grouped_gemm_truth_us(f: &GroupedGemmFeatures) -> f64 {
    const TILE_M: u64 = 64;
    const TILE_N: u64 = 128;
    let share = (SMS / f.counts.len() as u64).max(1);
    let (d, ff) = (f.d_model, f.d_ff);
    let up_tile_us = 2.0 * (TILE_M * TILE_N * d) as f64 / SM_FLOPS * 1e6;
    let down_tile_us = 2.0 * (TILE_M * TILE_N * ff) as f64 / SM_FLOPS * 1e6;
    let weight_us = (f.gemms_per_expert as u64 * d * ff * 2) as f64 / (MEM_BW * share as f64 / SMS as f64) * 1e6;
    let up_gemms = f.gemms_per_expert as u64 - 1;
    let slowest = f
        .counts
        .iter()
        .filter(|&&n| n > 0)
        .map(|&n| {
            let rows = n.div_ceil(TILE_M);
            let up_waves = (up_gemms * rows * ff.div_ceil(TILE_N)).div_ceil(share) as f64;
            let down_waves = (rows * d.div_ceil(TILE_N)).div_ceil(share) as f64;
            1.5 + (up_waves * up_tile_us + down_waves * down_tile_us).max(weight_us)
        })
        .fold(0.0, f64::max);
    4.0 + slowest
}

fn noisy(rng: &mut ChaCha8Rng, v: f64) -> f64 {
    v * (1.0 + rng.random_range(-NOISE..=NOISE))
}

fn lognormal_lens(rng: &mut ChaCha8Rng, n: usize, median: f64, sigma: f64, lo: u32, hi: u32) -> Vec<u32> {
    let dist = LogNormal::new(median.ln(), sigma).expect("valid lognormal");
    (0..n).map(|_| (dist.sample(rng).round() as u32).clamp(lo, hi)).collect()
}

/// Length spread (lognormal shape) of the standard attention suite.
pub const SUITE_LENGTH_SIGMA: f64 = 1.0;

/// Attention samples: half prefill, half decode, lognormal lengths with
/// shape `sigma`. Runtimes carry uniform ±3% noise.
pub fn attention_suite(n: usize, sigma: f64, seed: u64) -> Vec<(AttentionFeatures, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let f = if rng.random_bool(0.5) {
                let b = rng.random_range(1..=32);
                AttentionFeatures::prefill(&lognormal_lens(&mut rng, b, 512.0, sigma, 16, 8192), SUITE_DIMS)
            } else {
                let b = rng.random_range(1..=128);
                AttentionFeatures::decode(&lognormal_lens(&mut rng, b, 1024.0, sigma, 16, 16384), SUITE_DIMS)
            }
            .expect("suite batches are valid");
            let y = noisy(&mut rng, attention_truth_us(&f));
            (f, y)
        })
        .collect()
}

/// Prefill-only attention samples with widely spread lengths.
pub fn skewed_prefill_suite(n: usize, seed: u64) -> Vec<(AttentionFeatures, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let b = rng.random_range(1..=72);
            let f = AttentionFeatures::prefill(&lognormal_lens(&mut rng, b, 64.0, 1.5, 8, 8192), SUITE_DIMS)
                .expect("suite batches are valid");
            let y = noisy(&mut rng, attention_truth_us(&f));
            (f, y)
        })
        .collect()
}

/// Per-rank grouped GEMM samples over 4, 8, or 16 local experts with
/// routing skew ranging from near-uniform to concentrated.
pub fn grouped_gemm_suite(n: usize, seed: u64) -> Vec<(GroupedGemmFeatures, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let experts = [4u32, 8, 16][rng.random_range(0..3)];
            let tokens = (2f64.powf(rng.random_range(4.0..13.0))).round() as u64;
            let alpha = [0.2, 1.0, 10.0][rng.random_range(0..3)];
            let a = route_tokens(tokens, experts, 1, &RoutingPolicy::DirichletSkew { alpha }, seed ^ (i as u64) << 20)
                .expect("valid routing");
            let f = GroupedGemmFeatures::new(
                &a.counts,
                tokens,
                1,
                CountMode::LocalShard,
                SUITE_D_MODEL,
                SUITE_EXPERT_D_FF,
                2,
            )
            .expect("suite batches are valid");
            let y = noisy(&mut rng, grouped_gemm_truth_us(&f));
            (f, y)
        })
        .collect()
}

pub fn attention_dataset(samples: &[(AttentionFeatures, f64)]) -> Dataset {
    let mut ds = Dataset::new(Schema::AttentionV1);
    for (f, y) in samples {
        ds.push(f.to_vector(), *y);
    }
    ds
}

/// The same samples collapsed to the single sqrt-of-sum-of-squares length.
pub fn sqrt_proxy_dataset(samples: &[(AttentionFeatures, f64)]) -> Dataset {
    let mut ds = Dataset::new(Schema::SqrtProxyV1);
    for (f, y) in samples {
        ds.push(vec![f.sqrt_proxy()], *y);
    }
    ds
}

pub fn grouped_gemm_dataset(samples: &[(GroupedGemmFeatures, f64)]) -> Dataset {
    let mut ds = Dataset::new(Schema::GroupedGemmV1);
    for (f, y) in samples {
        ds.push(f.to_vector(), *y);
    }
    ds
}
