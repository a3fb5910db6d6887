//! Relates EO gap to attribution disparity across cross-validation folds of
//! several configurations.

use fairx::data::synth_biased;
use fairx::eval::{crossvalidate, eo_gcig_report, RunMetrics};
use fairx::training::TrainConfig;

fn main() {
    let table = synth_biased(1000, 6, 2.0, 0.5, 4).unwrap().to_raw_table();
    let mut records: Vec<RunMetrics> = Vec::new();
    for lambda in [0.0, 0.5, 2.0] {
        let config = TrainConfig {
            hidden_layers: vec![8],
            epochs: 8,
            learning_rate: 1e-2,
            lambda_ig: lambda,
            lambda_fair: lambda,
            ..Default::default()
        };
        records.extend(crossvalidate(&config, &table, 5, 4, 0).unwrap().folds);
    }
    let r = eo_gcig_report(&records).unwrap();
    let c = &r.correlation;
    println!(
        "{} folds: pearson {:.3} (p = {:.3}), spearman {:.3}, R^2 {:.3}",
        c.n, c.pearson, c.p_value, c.spearman, r.r2
    );
    if let Some(p) = r.partial_given_f1 {
        println!("partial correlation given F1: {p:.3}");
    }
}
