//! Five-fold cross-validation of the four loss-component arms on synthetic
//! data.

use fairx::data::synth_biased;
use fairx::eval::{ablation, crossvalidate};
use fairx::training::TrainConfig;

fn main() {
    let table = synth_biased(1200, 6, 2.0, 0.5, 1).unwrap().to_raw_table();
    let config = TrainConfig {
        hidden_layers: vec![8],
        epochs: 10,
        learning_rate: 1e-2,
        ..Default::default()
    };

    let cv = crossvalidate(&config, &table, 5, 1, 0).unwrap();
    println!(
        "full model, 5 folds: f1 {:.3} ± {:.3}, gcig {:.4} ± {:.4}",
        cv.mean.f1, cv.std.f1, cv.mean.gcig, cv.std.gcig
    );

    let report = ablation(&config, &table, 5, 1, 0).unwrap();
    println!(
        "{:>16} {:>7} {:>7} {:>8} {:>9}",
        "arm", "f1", "eo gap", "gcig", "gcig chg"
    );
    for a in &report.arms {
        let m = &a.summary.mean;
        println!(
            "{:>16} {:>7.3} {:>7.3} {:>8.4} {:>8.1}%",
            a.arm.name(),
            m.f1,
            m.eo_gap,
            m.gcig,
            a.pct_change.gcig
        );
    }
    println!("lowest gcig: {}", report.lowest_gcig().name());
}
