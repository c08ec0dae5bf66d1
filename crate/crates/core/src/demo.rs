//! One-dimensional noisy-sine regression model used by examples and tests.
//!
//! Hidden relu features are drawn at random and the output layer is a ridge
//! least-squares fit, so no training loop is needed.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{BnnError, Result};
use crate::model::{Activation, BnnModel, LayerPosterior, Task};

#[derive(Clone, Debug, PartialEq)]
pub struct SineSpec {
    pub width: usize,
    pub samples: usize,
    pub noise: f64,
    /// Posterior std relative to each weight's magnitude, plus a floor.
    pub rel_std: f64,
    pub std_floor: f64,
    pub ridge: f64,
}

impl Default for SineSpec {
    fn default() -> Self {
        Self { width: 256, samples: 400, noise: 0.1, rel_std: 0.05, std_floor: 1e-3, ridge: 1e-3 }
    }
}

/// Target curve on `x ∈ [-1, 1]`.
pub fn sine_target(x: f64) -> f64 {
    (std::f64::consts::PI * x).sin()
}

pub fn sine_model(spec: &SineSpec, seed: u64) -> Result<BnnModel> {
    if spec.width == 0 || spec.samples == 0 {
        return Err(BnnError::Domain("width and samples must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.width;
    let slope = Normal::new(0.0, 3.0).expect("valid normal");
    let mut w1 = DMatrix::zeros(n, 2);
    for i in 0..n {
        let a: f64 = slope.sample(&mut rng);
        // kink location spread over the data range
        let c: f64 = rng.random_range(-1.2..1.2);
        w1[(i, 0)] = a;
        w1[(i, 1)] = -a * c;
    }
    let xs: Vec<f64> = (0..spec.samples).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| {
            let e: f64 = StandardNormal.sample(&mut rng);
            sine_target(x) + spec.noise * e
        })
        .collect();
    let mut h = DMatrix::zeros(spec.samples, n + 1);
    for (r, &x) in xs.iter().enumerate() {
        for i in 0..n {
            h[(r, i)] = (w1[(i, 0)] * x + w1[(i, 1)]).max(0.0);
        }
        h[(r, n)] = 1.0;
    }
    let mut gram = h.transpose() * &h;
    for d in 0..n {
        gram[(d, d)] += spec.ridge * spec.samples as f64;
    }
    gram[(n, n)] += 1e-12;
    let rhs = h.transpose() * DVector::from_vec(ys);
    let beta = gram
        .cholesky()
        .ok_or_else(|| BnnError::Domain("ridge system is not positive definite".into()))?
        .solve(&rhs);
    let w2 = DMatrix::from_row_slice(1, n + 1, beta.as_slice());
    let var_of = |m: &DMatrix<f64>| m.map(|v| (spec.rel_std * v.abs() + spec.std_floor).powi(2));
    let (v1, v2) = (var_of(&w1), var_of(&w2));
    let l0 = LayerPosterior::diagonal(w1, v1, Activation::Relu, 0)?;
    let l1 = LayerPosterior::diagonal(w2, v2, Activation::Identity, 1)?;
    BnnModel::new(Task::Regression, vec![l0, l1])
}
