//! Trains the unconstrained and the attribution-regularized model on
//! synthetic data with a group-dependent labelling rule and compares test
//! metrics.

use fairx::data::{preprocess, stratified_split, synth_biased, DEFAULT_SPLIT};
use fairx::eval::evaluate_model;
use fairx::training::{fairx_train, TrainConfig};

fn main() {
    let table = synth_biased(2000, 8, 2.0, 0.5, 0).unwrap().to_raw_table();
    let split = stratified_split(&table, DEFAULT_SPLIT, 0).unwrap();
    let d = preprocess(&table, &split.train).unwrap();

    let base = TrainConfig {
        hidden_layers: vec![16],
        epochs: 15,
        learning_rate: 1e-2,
        ..Default::default()
    };
    for (name, lambda) in [("unconstrained", 0.0), ("fairx", 1.0)] {
        let config = TrainConfig {
            lambda_ig: lambda,
            lambda_fair: lambda,
            ..base.clone()
        };
        let out = fairx_train(&config, &d, &split.train).unwrap();
        let m = evaluate_model(&out.model, &out.baselines, &d, &split.test, &config).unwrap();
        let last = out.history.epochs.last().unwrap();
        println!(
            "{name:>13}: f1 {:.3}  auc {:.3}  eo gap {:.3}  gcig {:.4}  (final loss {:.4}, {:.3}s/epoch)",
            m.f1,
            m.auc,
            m.eo_gap,
            m.gcig,
            last.total_loss,
            out.history.mean_epoch_seconds()
        );
    }
}
