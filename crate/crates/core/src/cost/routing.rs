//! Token-to-expert routing policies.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::CostError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RoutingPolicy {
    /// Each token draws `top_k` distinct experts uniformly.
    #[default]
    Uniform,
    /// Per-batch popularity `p ~ Dirichlet(alpha * 1)`; tokens draw
    /// `top_k` distinct experts weighted by `p`.
    DirichletSkew { alpha: f64 },
    /// Per-expert counts supplied directly.
    Trace { counts: Vec<u64> },
}

/// Per-expert routed-token counts for one MoE layer invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertAssignment {
    pub total_tokens: u64,
    pub top_k: u32,
    /// Indexed by global expert id; sums to `total_tokens * top_k`.
    pub counts: Vec<u64>,
    pub policy: RoutingPolicy,
    pub seed: u64,
}

impl ExpertAssignment {
    pub fn num_experts(&self) -> usize {
        self.counts.len()
    }

    /// Counts grouped by EP rank; rank `r` owns experts
    /// `[r * E/ep, (r+1) * E/ep)`.
    pub fn rank_counts(&self, ep: u32) -> Result<Vec<&[u64]>, CostError> {
        let e = self.counts.len();
        if ep == 0 || !e.is_multiple_of(ep as usize) {
            return Err(CostError::TopologyMismatch(format!("{e} experts cannot be split across {ep} EP ranks")));
        }
        Ok(self.counts.chunks(e / ep as usize).collect())
    }

    /// `max(n_e) / mean(n_e)` over all experts.
    pub fn max_over_mean(&self) -> f64 {
        let sum: u64 = self.counts.iter().sum();
        if sum == 0 {
            return 0.0;
        }
        let max = *self.counts.iter().max().unwrap_or(&0) as f64;
        max * self.counts.len() as f64 / sum as f64
    }
}

pub fn route_tokens(
    total_tokens: u64,
    num_experts: u32,
    top_k: u32,
    policy: &RoutingPolicy,
    seed: u64,
) -> Result<ExpertAssignment, CostError> {
    if top_k == 0 || top_k > num_experts {
        return Err(CostError::InvalidTopK { top_k, num_experts });
    }
    let e = num_experts as usize;
    let k = top_k as usize;
    let mut counts = vec![0u64; e];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match policy {
        RoutingPolicy::Trace { counts: given } => {
            let sum: u64 = given.iter().sum();
            if given.len() != e || sum != total_tokens * top_k as u64 || given.iter().any(|&n| n > total_tokens) {
                return Err(CostError::InvalidTrace(format!(
                    "need {e} counts, each at most {total_tokens}, summing to {}",
                    total_tokens * top_k as u64
                )));
            }
            counts.clone_from(given);
        }
        _ if k == e => counts.fill(total_tokens),
        RoutingPolicy::Uniform => {
            for _ in 0..total_tokens {
                for x in index::sample(&mut rng, e, k) {
                    counts[x] += 1;
                }
            }
        }
        RoutingPolicy::DirichletSkew { alpha } => {
            let gamma = Gamma::new(*alpha, 1.0)
                .map_err(|err| CostError::InvalidFeatures(format!("dirichlet alpha {alpha}: {err}")))?;
            let draws: Vec<f64> = (0..e).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = draws.iter().sum();
            // Tiny alphas underflow some draws to zero; a floor keeps every
            // expert selectable so `top_k` distinct picks always exist.
            let weights: Vec<f64> = draws.iter().map(|g| (g / total).max(1e-12)).collect();
            for _ in 0..total_tokens {
                let picked = index::sample_weighted(&mut rng, e, |i| weights[i], k)
                    .map_err(|err| CostError::InvalidFeatures(format!("dirichlet weights: {err}")))?;
                for x in picked {
                    counts[x] += 1;
                }
            }
        }
    }
    Ok(ExpertAssignment { total_tokens, top_k, counts, policy: policy.clone(), seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_experts_chosen_when_k_equals_e() {
        let a = route_tokens(37, 4, 4, &RoutingPolicy::Uniform, 1).unwrap();
        assert_eq!(a.counts, vec![37; 4]);
    }

    #[test]
    fn invalid_top_k() {
        assert!(matches!(route_tokens(1, 4, 5, &RoutingPolicy::Uniform, 0), Err(CostError::InvalidTopK { .. })));
        assert!(matches!(route_tokens(1, 4, 0, &RoutingPolicy::Uniform, 0), Err(CostError::InvalidTopK { .. })));
    }

    #[test]
    fn uniform_law_of_large_numbers() {
        let a = route_tokens(100_000, 8, 2, &RoutingPolicy::Uniform, 7).unwrap();
        for &n in &a.counts {
            assert!((n as f64 - 25_000.0).abs() <= 0.03 * 25_000.0, "{n}");
        }
        assert_eq!(a.counts.iter().sum::<u64>(), 200_000);
    }

    #[test]
    fn dirichlet_is_more_skewed_than_uniform() {
        let mut skew = Vec::new();
        let mut flat = Vec::new();
        for s in 0..20 {
            skew.push(
                route_tokens(4096, 8, 2, &RoutingPolicy::DirichletSkew { alpha: 0.1 }, s).unwrap().max_over_mean(),
            );
            flat.push(route_tokens(4096, 8, 2, &RoutingPolicy::Uniform, s).unwrap().max_over_mean());
        }
        skew.sort_by(f64::total_cmp);
        flat.sort_by(f64::total_cmp);
        assert!(skew[10] > flat[10], "{} vs {}", skew[10], flat[10]);
    }

    #[test]
    fn trace_counts_are_checked() {
        let ok = RoutingPolicy::Trace { counts: vec![3, 1, 0, 2] };
        assert_eq!(route_tokens(3, 4, 2, &ok, 0).unwrap().counts, vec![3, 1, 0, 2]);
        let bad = RoutingPolicy::Trace { counts: vec![4, 0, 0, 2] };
        assert!(matches!(route_tokens(3, 4, 2, &bad, 0), Err(CostError::InvalidTrace(_))));
    }

    #[test]
    fn rank_counts_split_contiguously() {
        let a = route_tokens(3, 4, 2, &RoutingPolicy::Trace { counts: vec![3, 1, 0, 2] }, 0).unwrap();
        assert_eq!(a.rank_counts(2).unwrap(), vec![&[3, 1][..], &[0, 2][..]]);
        assert!(a.rank_counts(3).is_err());
    }
}
