//! Distribution metrics, batch evaluation with the failed-sample penalty,
//! intermediate-prediction trajectory analysis, hyperparameter sweeps and
//! held-out-evaluator comparisons.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::denoiser::{ConsistencyDenoiser, Decoder, Denoiser, PosteriorDenoiser};
use crate::error::{Error, Result};
use crate::experts::Expert;
use crate::guidance::{sample_guided, GuidanceConfig};
use crate::mixture::{Conditioning, GaussianMixture};
use crate::schedule::{NoiseSchedule, TimestepGrid};

/// Sliced 2-Wasserstein distance between empirical samples: the root of the
/// mean (over random unit directions) squared 1-D transport cost between the
/// projected samples, matched through midpoint quantiles.
pub fn sliced_wasserstein(
    a: &[DVector<f64>],
    b: &[DVector<f64>],
    n_projections: usize,
    seed: u64,
) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::parameter("sliced_wasserstein needs nonempty sample sets"));
    }
    let dim = a[0].len();
    if a.iter().chain(b.iter()).any(|v| v.len() != dim) {
        return Err(Error::parameter("sliced_wasserstein dimension mismatch"));
    }
    if n_projections == 0 {
        return Err(Error::parameter("n_projections must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut pa = vec![0.0; a.len()];
    let mut pb = vec![0.0; b.len()];
    for _ in 0..n_projections {
        let mut dir = DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
        let n = dir.norm();
        if n < 1e-12 {
            continue;
        }
        dir /= n;
        for (slot, v) in pa.iter_mut().zip(a) {
            *slot = v.dot(&dir);
        }
        for (slot, v) in pb.iter_mut().zip(b) {
            *slot = v.dot(&dir);
        }
        pa.sort_unstable_by(|x, y| x.partial_cmp(y).unwrap());
        pb.sort_unstable_by(|x, y| x.partial_cmp(y).unwrap());
        total += w2_squared_sorted(&pa, &pb);
    }
    Ok((total / n_projections as f64).sqrt())
}

/// Squared 1-D 2-Wasserstein between sorted samples; unequal sizes are
/// matched through midpoint quantiles of the larger count.
fn w2_squared_sorted(a: &[f64], b: &[f64]) -> f64 {
    if a.len() == b.len() {
        let n = a.len() as f64;
        return a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
    }
    let n = a.len().max(b.len());
    let mut total = 0.0;
    for i in 0..n {
        let q = (i as f64 + 0.5) / n as f64;
        let d = quantile_sorted(a, q) - quantile_sorted(b, q);
        total += d * d;
    }
    total / n as f64
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Strict empirical upper quantile: smallest value with at least `q` of the
/// mass at or below it.
pub fn upper_quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::parameter("quantile of empty sample"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(|x, y| x.partial_cmp(y).unwrap());
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Ok(sorted[rank - 1])
}

/// Penalty rule: samples whose clean NLL exceeds the threshold count as
/// conditioning failures and receive the worst-case metric value.
#[derive(Debug, Clone, Copy)]
pub struct PenaltyRule {
    pub nll_threshold: f64,
    pub penalty_value: f64,
}

impl PenaltyRule {
    /// Threshold at the given NLL quantile of true mixture samples.
    pub fn from_true_samples(
        mixture: &GaussianMixture,
        quantile: f64,
        n: usize,
        seed: u64,
        penalty_value: f64,
    ) -> Result<Self> {
        let xs = mixture.sample(&Conditioning::Unrestricted, seed, n)?;
        let nlls: Vec<f64> = xs.iter().map(|x| mixture.clean_nll(x)).collect();
        Ok(PenaltyRule {
            nll_threshold: upper_quantile(&nlls, quantile)?,
            penalty_value,
        })
    }
}

/// Aggregate metrics for one evaluated batch.
#[derive(Debug, Clone)]
pub struct MetricReport {
    /// Mean task metric with the penalty rule applied.
    pub metric: f64,
    /// Mean clean NLL (lower is better); quality stand-in with inverted
    /// polarity relative to preference scores.
    pub quality_nll: f64,
    /// Sliced-Wasserstein distance to the reference batch.
    pub sw_to_reference: f64,
    pub penalty_count: usize,
    pub n_samples: usize,
    pub fingerprint: String,
}

/// Evaluate a sample batch under one expert with the penalty rule.
///
/// The expert metric and the distribution distance run on decoded
/// observations; the density-based quality and penalty checks run on the
/// matching latents (identical slices under the identity decoder).
#[allow(clippy::too_many_arguments)]
pub fn evaluate_batch(
    observations: &[DVector<f64>],
    latents: &[DVector<f64>],
    mixture: &GaussianMixture,
    expert: &dyn Expert,
    penalty: &PenaltyRule,
    reference: &[DVector<f64>],
    n_projections: usize,
    sw_seed: u64,
    fingerprint: &str,
) -> Result<MetricReport> {
    if observations.is_empty() || observations.len() != latents.len() {
        return Err(Error::parameter(
            "evaluate_batch needs matching nonempty observation/latent batches",
        ));
    }
    let mut metric_sum = 0.0;
    let mut nll_sum = 0.0;
    let mut penalties = 0usize;
    for (x, z0) in observations.iter().zip(latents) {
        let nll = mixture.clean_nll(z0);
        nll_sum += nll;
        if nll > penalty.nll_threshold {
            penalties += 1;
            metric_sum += penalty.penalty_value;
        } else {
            metric_sum += expert.evaluate(x)?;
        }
    }
    let sw = sliced_wasserstein(observations, reference, n_projections, sw_seed)?;
    Ok(MetricReport {
        metric: metric_sum / observations.len() as f64,
        quality_nll: nll_sum / observations.len() as f64,
        sw_to_reference: sw,
        penalty_count: penalties,
        n_samples: observations.len(),
        fingerprint: fingerprint.to_string(),
    })
}

/// One trajectory-analysis row: intermediate-prediction quality at a grid
/// step for one backend.
#[derive(Debug, Clone)]
pub struct TrajectoryRow {
    pub step_index: usize,
    pub t: usize,
    pub backend: crate::denoiser::BackendKind,
    /// Sliced-Wasserstein distance of the intermediate predictions to the
    /// reference batch.
    pub sw: f64,
    /// Mean embedding cosine between intermediate predictions and each
    /// chain's own final output.
    pub cosine: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrajectoryReport {
    pub rows: Vec<TrajectoryRow>,
    /// Two-sample distance between independent true batches of the same size.
    pub baseline_sw: f64,
}

impl TrajectoryReport {
    pub fn rows_for(&self, kind: crate::denoiser::BackendKind) -> Vec<&TrajectoryRow> {
        self.rows.iter().filter(|r| r.backend == kind).collect()
    }
}

fn normalized_embedding(embed: &DMatrix<f64>, x: &DVector<f64>) -> DVector<f64> {
    let u = embed * x;
    let n = u.norm();
    if n < 1e-12 {
        u
    } else {
        u / n
    }
}

/// Run unguided chains for both backends from shared per-chain seeds and
/// measure intermediate-prediction quality at every grid step.
#[allow(clippy::too_many_arguments)]
pub fn trajectory_analysis(
    mixture: &Arc<GaussianMixture>,
    schedule: &Arc<NoiseSchedule>,
    cond: &Conditioning,
    n_chains: usize,
    config: &GuidanceConfig,
    n_substeps: usize,
    decoder: &Decoder,
    embed: &DMatrix<f64>,
    n_projections: usize,
) -> Result<TrajectoryReport> {
    if n_chains < 2 {
        return Err(Error::parameter("trajectory analysis needs at least 2 chains"));
    }
    let grid = TimestepGrid::even(schedule, config.n_steps)?;
    let reference = mixture.sample(cond, config.seed.wrapping_add(0x5157_eb01), n_chains)?;
    let ref2 = mixture.sample(cond, config.seed.wrapping_add(0x5157_eb02), n_chains)?;
    let reference_obs: Vec<DVector<f64>> = reference.iter().map(|x| decoder.decode(x)).collect();
    let ref2_obs: Vec<DVector<f64>> = ref2.iter().map(|x| decoder.decode(x)).collect();
    let baseline_sw = sliced_wasserstein(&reference_obs, &ref2_obs, n_projections, config.seed)?;

    let posterior = PosteriorDenoiser::new(Arc::clone(mixture), Arc::clone(schedule));
    let consistency = ConsistencyDenoiser::new(Arc::clone(mixture), Arc::clone(schedule), n_substeps)?;
    let backends: [&dyn Denoiser; 2] = [&posterior, &consistency];

    let mut rows = Vec::new();
    for backend in backends {
        // Per-step observation batches plus each chain's final observation.
        let mut step_obs: Vec<Vec<DVector<f64>>> = vec![Vec::new(); grid.len()];
        let mut finals: Vec<DVector<f64>> = Vec::with_capacity(n_chains);
        for chain in 0..n_chains {
            let run = sample_guided(backend, decoder, cond, None, config, mixture.dim(), chain as u64)?;
            for (i, step) in run.trace.steps.iter().enumerate() {
                step_obs[i].push(step.obs.clone());
            }
            finals.push(run.observation);
        }
        for (i, &t) in grid.steps().iter().enumerate() {
            let sw = sliced_wasserstein(&step_obs[i], &reference_obs, n_projections, config.seed)?;
            let mut cos_sum = 0.0;
            for (obs, fin) in step_obs[i].iter().zip(&finals) {
                cos_sum += normalized_embedding(embed, obs).dot(&normalized_embedding(embed, fin));
            }
            rows.push(TrajectoryRow {
                step_index: i,
                t,
                backend: backend.kind(),
                sw,
                cosine: cos_sum / n_chains as f64,
            });
        }
    }
    Ok(TrajectoryReport { rows, baseline_sw })
}

/// Hyperparameter axis for a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    TThre,
    W,
    Tau,
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SweepAxis::TThre => write!(f, "t_thre"),
            SweepAxis::W => write!(f, "w"),
            SweepAxis::Tau => write!(f, "tau"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub report: MetricReport,
}

/// Apply one sweep value to a guidance config.
pub fn apply_axis(config: &GuidanceConfig, axis: SweepAxis, value: f64) -> GuidanceConfig {
    let mut c = config.clone();
    match axis {
        SweepAxis::TThre => c.t_thre = value.round() as usize,
        SweepAxis::W => c.w = value,
        SweepAxis::Tau => c.tau = value,
    }
    c
}

/// Evaluate the same samples under several evaluators; one column each.
#[derive(Debug, Clone)]
pub struct EvaluatorColumn {
    pub name: String,
    pub baseline_metric: f64,
    pub guided_metric: f64,
    /// Guided-over-baseline gain, oriented by the metric polarity (error
    /// metrics improve downward).
    pub improvement: f64,
}

/// Observation/latent pair of one evaluated batch.
pub struct EvalBatch<'a> {
    pub observations: &'a [DVector<f64>],
    pub latents: &'a [DVector<f64>],
}

impl<'a> EvalBatch<'a> {
    /// Identity-decoder batch: observations are the latents.
    pub fn identity(samples: &'a [DVector<f64>]) -> Self {
        EvalBatch {
            observations: samples,
            latents: samples,
        }
    }
}

/// Side-by-side metrics of guided and baseline batches under the guidance
/// expert and a set of held-out evaluators (penalty rule applied uniformly).
pub fn evaluator_invariance(
    guided: &EvalBatch,
    baseline: &EvalBatch,
    mixture: &GaussianMixture,
    evaluators: &[(String, Arc<dyn Expert>)],
    penalty: &PenaltyRule,
) -> Result<Vec<EvaluatorColumn>> {
    let mut out = Vec::new();
    for (name, ev) in evaluators {
        let score = |batch: &EvalBatch| -> Result<f64> {
            let mut sum = 0.0;
            for (x, z0) in batch.observations.iter().zip(batch.latents) {
                sum += if mixture.clean_nll(z0) > penalty.nll_threshold {
                    penalty.penalty_value
                } else {
                    ev.evaluate(x)?
                };
            }
            Ok(sum / batch.observations.len() as f64)
        };
        let baseline_metric = score(baseline)?;
        let guided_metric = score(guided)?;
        let improvement = if ev.higher_is_better() {
            guided_metric - baseline_metric
        } else {
            baseline_metric - guided_metric
        };
        out.push(EvaluatorColumn {
            name: name.clone(),
            baseline_metric,
            guided_metric,
            improvement,
        });
    }
    Ok(out)
}
