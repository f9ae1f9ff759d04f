//! Standard benchmark setups shared by the CLI presets and the acceptance
//! suite: a two-component mixture for trajectory studies and a four-component
//! mixture with an ambiguous two-label conditioning for guidance studies.
//!
//! Scale note: the clipping threshold here is wider than the generation
//! default. With a handful of latent dimensions the whole guidance budget
//! rides on one or two coordinates, instead of being spread over thousands,
//! so the per-component bound must carry correspondingly more.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::experts::{ClassifierExpert, RegressorExpert};
use crate::guidance::GuidanceConfig;
use crate::mixture::{Component, Conditioning, GaussianMixture};
use crate::schedule::NoiseSchedule;

/// Default generation schedule: 1000 steps, linear betas 1e-4..0.02.
pub fn default_schedule() -> Arc<NoiseSchedule> {
    Arc::new(NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap())
}

/// Componentwise clip threshold tuned for the 2-D benchmarks.
pub const BENCHMARK_TAU: f64 = 6e-3;

/// Probability-flow sub-grid size used by the benchmark consistency backend.
pub const BENCHMARK_SUBSTEPS: usize = 50;

/// Target class for the guidance experiments (a four-component label).
pub const TARGET_LABEL: usize = 2;

/// Ambiguous conditioning: two labels allowed, so class conditioning alone
/// resolves the target only half the time.
pub fn ambiguous_conditioning() -> Conditioning {
    Conditioning::labels([1, 2])
}

/// Guidance defaults with the benchmark-scale clip threshold.
pub fn benchmark_guidance(seed: u64) -> GuidanceConfig {
    GuidanceConfig {
        tau: BENCHMARK_TAU,
        seed,
        ..GuidanceConfig::default()
    }
}

/// Two same-weight components at (-1.2, 1.0) and (1.2, 1.0) with covariance
/// 0.04 I. The off-axis means keep early collapsed predictions pointing away
/// from either component in embedding space.
pub fn two_component() -> Arc<GaussianMixture> {
    Arc::new(
        GaussianMixture::new(vec![
            Component {
                weight: 0.5,
                mean: DVector::from_vec(vec![-1.2, 1.0]),
                cov: DMatrix::identity(2, 2) * 0.04,
                label: 0,
            },
            Component {
                weight: 0.5,
                mean: DVector::from_vec(vec![1.2, 1.0]),
                cov: DMatrix::identity(2, 2) * 0.04,
                label: 1,
            },
        ])
        .unwrap(),
    )
}

/// Four same-weight components on a radius-1.5 circle at the diagonal
/// angles, covariance 0.09 I, labels 0..=3 counterclockwise from (+,+).
pub fn four_component() -> Arc<GaussianMixture> {
    let r = 1.5f64;
    let comps = (0..4)
        .map(|k| {
            let ang = std::f64::consts::FRAC_PI_4 + std::f64::consts::FRAC_PI_2 * k as f64;
            Component {
                weight: 0.25,
                mean: DVector::from_vec(vec![r * ang.cos(), r * ang.sin()]),
                cov: DMatrix::identity(2, 2) * 0.09,
                label: k,
            }
        })
        .collect();
    Arc::new(GaussianMixture::new(comps).unwrap())
}

/// Logit gain applied to component-mean prototypes.
pub const CLASSIFIER_GAIN: f64 = 4.0;
/// Jitter scale modelling independently trained classifiers of one task.
pub const CLASSIFIER_JITTER: f64 = 0.5;

/// Prototype classifier over the four-component labels.
pub fn four_component_classifier(seed: u64, target: usize) -> ClassifierExpert {
    let protos: Vec<DVector<f64>> = four_component()
        .components()
        .iter()
        .map(|c| c.mean.clone())
        .collect();
    ClassifierExpert::from_prototypes(&protos, CLASSIFIER_GAIN, CLASSIFIER_JITTER, seed, target)
        .expect("benchmark classifier construction")
}

/// Shared scalar ground truth behind the regression experts: an affine
/// functional of the observation, distinct at every component mean.
pub fn age_functional() -> (DVector<f64>, f64) {
    let ang = 255f64.to_radians();
    (DVector::from_vec(vec![3.0 * ang.cos(), 3.0 * ang.sin()]), 30.0)
}

/// Jitter scale for regressor weight draws.
pub const REGRESSOR_JITTER: f64 = 0.15;

/// Combination weight of the regressor in the multi-expert benchmark; the
/// classifier resolves the basin while the regressor trims within it.
pub const REGRESSOR_GUIDANCE_WEIGHT: f64 = 0.35;

/// Value of the age functional at a component mean.
pub fn age_of_component(label: usize) -> f64 {
    let (w, b) = age_functional();
    let gm = four_component();
    let c = gm
        .components()
        .iter()
        .find(|c| c.label == label)
        .expect("label exists");
    w.dot(&c.mean) + b
}

/// Regressor expert targeting the age of the given component.
pub fn four_component_regressor(seed: u64, target_label: usize) -> RegressorExpert {
    let (w, b) = age_functional();
    RegressorExpert::from_base(&w, b, REGRESSOR_JITTER, seed, age_of_component(target_label))
}

/// Fixed linear embedding used by trajectory cosine measurements.
pub fn trajectory_embedding(obs_dim: usize) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    DMatrix::from_fn(4, obs_dim, |_, _| StandardNormal.sample(&mut rng))
}

/// Age penalty assigned to failed samples (worst case error).
pub const AGE_PENALTY: f64 = 50.0;
