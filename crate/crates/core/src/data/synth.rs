use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset};

/// Generator for data whose labelling mechanism depends on the protected group.
///
/// * `a ~ Bernoulli(0.5)`.
/// * `x ~ N(mu_a, I)`; only the last feature (the group proxy) is shifted,
///   with mean `(a - 1/2) * group_shift`.
/// * Label score `s = beta * sign_a * (x0 - x1) + sum_j c_j x_j` over the shared
///   features `x2 .. x(p-2)`, with `sign_0 = +1` and `sign_1 = -1`, so features 0
///   and 1 carry coefficients `(+beta, -beta)` for group 0 and `(-beta, +beta)`
///   for group 1. `y = 1[s + noise * e > 0]` with `e ~ N(0, 1)`.
///
/// `beta = 0` makes the mechanism identical for both groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    pub p: usize,
    pub beta: f64,
    pub noise: f64,
    pub group_shift: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(n: usize, p: usize, beta: f64, noise: f64, seed: u64) -> Self {
        SynthSpec {
            n,
            p,
            beta,
            noise,
            group_shift: 1.0,
            seed,
        }
    }

    /// Coefficient of shared feature `j` (2 <= j < p - 1).
    pub fn shared_coefficient(j: usize) -> f64 {
        let magnitude = (1.5 - 0.2 * (j - 2) as f64).max(0.5);
        if j.is_multiple_of(2) {
            magnitude
        } else {
            -magnitude
        }
    }
}

pub fn synth_biased(
    n: usize,
    p: usize,
    beta: f64,
    noise: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    synth_biased_with(&SynthSpec::new(n, p, beta, noise, seed))
}

pub fn synth_biased_with(spec: &SynthSpec) -> Result<Dataset, DataError> {
    if spec.p < 4 {
        return Err(DataError::InvalidParameter(format!(
            "synthetic data needs p >= 4, got {}",
            spec.p
        )));
    }
    if !(spec.beta >= 0.0) || !(spec.noise >= 0.0) {
        return Err(DataError::InvalidParameter(
            "beta and noise must be non-negative".into(),
        ));
    }
    let p = spec.p;
    let proxy = p - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut features = Vec::with_capacity(spec.n * p);
    let mut labels = Vec::with_capacity(spec.n);
    let mut groups = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let a: u8 = u8::from(rng.gen_bool(0.5));
        let row: Vec<f64> = (0..p)
            .map(|j| {
                let z: f64 = rng.sample(StandardNormal);
                if j == proxy {
                    z + (a as f64 - 0.5) * spec.group_shift
                } else {
                    z
                }
            })
            .collect();
        let sign = if a == 0 { 1.0 } else { -1.0 };
        let mut score = spec.beta * sign * (row[0] - row[1]);
        for (j, &x) in row.iter().enumerate().take(proxy).skip(2) {
            score += SynthSpec::shared_coefficient(j) * x;
        }
        let e: f64 = rng.sample(StandardNormal);
        labels.push(u8::from(score + spec.noise * e > 0.0));
        groups.push(a);
        features.extend(row);
    }
    Ok(Dataset {
        features,
        n_features: p,
        labels,
        groups,
        feature_names: (0..p).map(|j| format!("x{j}")).collect(),
        stats: None,
    })
}
