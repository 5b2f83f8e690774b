//! Fitting the attention cost model on synthetic profiling data, scoring it
//! on a held-out split, and saving and reloading the model file.

use stagesim::cost::synthetic::{
    attention_dataset, attention_suite, attention_truth_us, SUITE_DIMS, SUITE_LENGTH_SIGMA,
};
use stagesim::cost::{eval_model, fit_model, AttentionFeatures, CostModel, Forest, Hyperparams};
use stagesim::metrics::{error_cdf_report, DEFAULT_CDF_THRESHOLDS};
use stagesim::presets;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = attention_dataset(&attention_suite(3000, SUITE_LENGTH_SIGMA, 1));
    let (train, test) = data.split_holdout(0.2, 1);
    let hp = Hyperparams { n_trees: 60, ..Hyperparams::default() };
    let (forest, report) = fit_model(&train, &hp)?;
    let oob = report.out_of_bag.expect("bagged fit");
    let held = eval_model(&forest, &test)?;
    for (t, f) in error_cdf_report(&held, &DEFAULT_CDF_THRESHOLDS)? {
        println!("held-out: {:.0}% of errors <= {t}", f * 100.0);
    }
    println!("out-of-bag median error {:.2}%", oob.quantile(0.5) * 100.0);

    let path = std::env::temp_dir().join("stagesim-attention.model");
    forest.save(&path)?;
    let loaded = std::sync::Arc::new(Forest::load(&path)?);

    let hw = presets::a800().profile();
    let learned = CostModel::analytic(hw, 2).with_attention_model(loaded)?;
    let analytic = CostModel::analytic(hw, 2);
    for ctx in [256u32, 1024, 4096] {
        let f = AttentionFeatures::decode(&[ctx; 32], SUITE_DIMS)?;
        println!(
            "decode batch 32 @ ctx {ctx:>4}: truth {:>6.1} us, learned {:>6.1} us, roofline {:>6.1} us",
            attention_truth_us(&f),
            learned.predict_attention(&f)?,
            analytic.predict_attention(&f)?
        );
    }
    Ok(())
}
