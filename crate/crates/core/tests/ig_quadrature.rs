//! Coarse right-endpoint integrated gradients against a fine quadrature.

use fairx::attribution::integrated_gradients;
use fairx::model::{init_params, Activation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[test]
fn sixteen_steps_track_fine_quadrature_entrywise() {
    let model = init_params(&[3, 8, 1], Activation::Tanh, 13).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
        let b: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
        let fine = integrated_gradients(&model, &x, &b, 4096).unwrap();
        let coarse = integrated_gradients(&model, &x, &b, 16).unwrap();
        for (f, c) in fine.iter().zip(&coarse) {
            worst = worst.max((f - c).abs() / f.abs());
        }
    }
    assert!(
        worst < 1e-2,
        "worst entrywise relative difference {worst:.3e}"
    );
}
