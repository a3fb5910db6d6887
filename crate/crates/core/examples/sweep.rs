//! Sweeps the attribution weight and prints the plot-ready rows.

use fairx::data::synth_biased;
use fairx::eval::{sensitivity_sweep, SweepAxis, SweepSpec};
use fairx::training::TrainConfig;

fn main() {
    let table = synth_biased(800, 6, 2.0, 0.5, 2).unwrap().to_raw_table();
    let config = TrainConfig {
        hidden_layers: vec![8],
        epochs: 8,
        learning_rate: 1e-2,
        ..Default::default()
    };
    let spec = SweepSpec {
        values: vec![0.0, 0.5, 2.0, 10.0],
        k: 3,
        ..SweepSpec::new(SweepAxis::LambdaIg, 3, 2)
    };

    let result = sensitivity_sweep(&config, &table, &spec, 0).unwrap();
    println!("axis,lambda,metric,mean,std");
    for r in result
        .rows()
        .iter()
        .filter(|r| r.metric == "gcig" || r.metric == "f1")
    {
        println!(
            "{},{},{},{:.5},{:.5}",
            r.axis, r.lambda, r.metric, r.mean, r.std
        );
    }
    println!(
        "gcig increases between consecutive grid points: {}",
        result.increases("gcig")
    );
}
