//! One MoE layer under balanced and skewed routing: the slowest EP rank
//! sets the expert term.

use stagesim::cost::{moe_layer_latency, route_tokens, CostModel, MoeLayout, RoutingPolicy};
use stagesim::presets;
use stagesim::topology::MoeSplit;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = presets::moe_16b();
    let moe = model.moe.clone().unwrap();
    let split = MoeSplit { attn_tp: 1, attn_dp: 8, moe_tp: 1, moe_ep: 8 };
    let layout = MoeLayout::new(&model, &split, &presets::default_network())?;
    let predictor = CostModel::analytic(presets::a800().profile(), model.dtype_bytes);

    for policy in [
        RoutingPolicy::Uniform,
        RoutingPolicy::DirichletSkew { alpha: 1.0 },
        RoutingPolicy::DirichletSkew { alpha: 0.1 },
    ] {
        let assign = route_tokens(2048, moe.num_experts, moe.top_k, &policy, 7)?;
        let (total, b) = moe_layer_latency(&assign, &layout, &predictor)?;
        println!("{policy:?}");
        let worst = b.rank_imbalance.iter().copied().fold(0.0, f64::max);
        println!("  max/mean load: experts {:.2}, EP ranks {worst:.2}", assign.max_over_mean());
        let ranks: Vec<String> = b.per_rank_us.iter().map(|us| format!("{us:.0}")).collect();
        println!("  per-rank us [{}], straggler rank {}", ranks.join(" "), b.straggler_rank);
        println!(
            "  gate {:.1} + dispatch {:.1} + experts {:.1} + combine {:.1} = {total:.1} us",
            b.gate_us, b.dispatch_us, b.expert_us, b.combine_us
        );
    }
    Ok(())
}
