//! Integrated gradients of a small MLP against the four label/group
//! baselines, and the resulting counterfactual disparity for a few rows.

use fairx::attribution::{disparity, group_counterfactuals, init_baselines, AttributionConfig};
use fairx::data::synth_biased;
use fairx::model::{init_params, Activation};

fn main() {
    let d = synth_biased(500, 6, 2.0, 0.5, 3).unwrap();
    let state = init_baselines(&d, &d.all_indices(), 0.1).unwrap();
    let model = init_params(&[d.n_features, 8, 1], Activation::Tanh, 1).unwrap();
    let cfg = AttributionConfig {
        steps: 32,
        ..Default::default()
    };

    println!("features: {}", d.feature_names.join(" "));
    for i in 0..4 {
        let y = d.labels[i];
        let [a0, a1] = group_counterfactuals(&model, d.row(i), y, &state, &cfg).unwrap();
        let fmt = |v: &[f64]| {
            v.iter()
                .map(|e| format!("{e:+.3}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        println!("row {i} (y={y}, a={})", d.groups[i]);
        println!(
            "  vs group 0 baseline: {}  (completeness gap {:+.1e})",
            fmt(&a0.normalized),
            a0.completeness_gap
        );
        println!(
            "  vs group 1 baseline: {}  (completeness gap {:+.1e})",
            fmt(&a1.normalized),
            a1.completeness_gap
        );
        println!(
            "  disparity {:.4}",
            disparity(&model, d.row(i), y, &state, &cfg).unwrap()
        );
    }
}
