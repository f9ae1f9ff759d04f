//! Fast oracle suite: identities the stack must satisfy regardless of
//! configuration. Run by `selfcheck` and the acceptance tests.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::benchmark;
use crate::denoiser::{ConsistencyDenoiser, Decoder, Denoiser, PosteriorDenoiser, predict_eps};
use crate::error::Result;
use crate::experts::{
    fd_gradient, ClassifierExpert, DenseExpert, EmbeddingExpert, Expert, MultiExpert,
    RegressorExpert,
};
use crate::guidance::sample_guided;
use crate::mixture::{Component, Conditioning, GaussianMixture};
use crate::schedule::NoiseSchedule;

/// One oracle-check row.
#[derive(Debug, Clone)]
pub struct CheckRow {
    pub name: String,
    pub worst: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckRow {
    fn new(name: &str, worst: f64, tolerance: f64) -> Self {
        CheckRow {
            name: name.to_string(),
            worst,
            tolerance,
            pass: worst <= tolerance,
        }
    }
}

fn random_diag_mixture(rng: &mut ChaCha8Rng, k: usize) -> GaussianMixture {
    let comps = (0..k)
        .map(|j| {
            let mean = DVector::from_fn(2, |_, _| {
                let v: f64 = StandardNormal.sample(rng);
                2.0 * v
            });
            let d0: f64 = 0.2 + rng.random::<f64>();
            let d1: f64 = 0.2 + rng.random::<f64>();
            Component {
                weight: 1.0 / k as f64,
                mean,
                cov: DMatrix::from_diagonal(&DVector::from_vec(vec![d0, d1])),
                label: j,
            }
        })
        .collect();
    GaussianMixture::new(comps).expect("random diagonal mixture is valid")
}

/// Posterior mean equals the score-based identity over random states.
fn check_tweedie(schedule: &NoiseSchedule) -> Result<CheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for trial in 0..1000 {
        let gm = random_diag_mixture(&mut rng, 2 + trial % 3);
        let z = DVector::from_fn(2, |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            1.5 * v
        });
        let t = 1 + (rng.random::<u64>() % schedule.t_max() as u64) as usize;
        let ab = schedule.alpha_bar(t)?;
        let pm = gm.posterior_mean(&Conditioning::Unrestricted, &z, t, schedule)?;
        let sc = gm.score(&Conditioning::Unrestricted, &z, t, schedule)?;
        let tweedie = (&z + sc * (1.0 - ab)) / ab.sqrt();
        let rel = (&pm - &tweedie).norm() / pm.norm().max(1e-12);
        worst = worst.max(rel);
    }
    Ok(CheckRow::new("tweedie_identity_rel", worst, 1e-8))
}

/// Reconstruction of z from (x0, eps) for both backends at grid timesteps.
fn check_reconstruction_round_trip(schedule: &Arc<NoiseSchedule>) -> Result<CheckRow> {
    let gm = benchmark::two_component();
    let post = PosteriorDenoiser::new(Arc::clone(&gm), Arc::clone(schedule));
    let cons = ConsistencyDenoiser::new(Arc::clone(&gm), Arc::clone(schedule), 25)?;
    let grid = crate::schedule::TimestepGrid::even(schedule, 16)?;
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst = 0.0f64;
    for backend in [&post as &dyn Denoiser, &cons as &dyn Denoiser] {
        for _ in 0..8 {
            let z = DVector::from_fn(2, |_, _| StandardNormal.sample(&mut rng));
            for &t in grid.steps() {
                let x0 = backend.predict_x0(&z, t, &Conditioning::Unrestricted)?;
                let eps = predict_eps(backend, &z, t, &Conditioning::Unrestricted)?;
                let rebuilt =
                    x0 * schedule.signal_scale(t)? + eps * schedule.noise_scale(t)?;
                worst = worst.max((rebuilt - &z).norm());
            }
        }
    }
    Ok(CheckRow::new("reconstruction_round_trip_abs", worst, 1e-10))
}

/// Analytic gradients match central finite differences for all four expert
/// families, 100 random points each.
fn check_expert_gradients() -> Result<CheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut worst = 0.0f64;
    let mut sample_x = |dim: usize| -> DVector<f64> {
        DVector::from_fn(dim, |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            1.5 * v
        })
    };
    for i in 0..100u64 {
        let experts: Vec<Box<dyn Expert>> = vec![
            Box::new(
                EmbeddingExpert::seeded_from_reference(3, 4, 500 + i, &sample_x(4))
                    .expect("reference embedding"),
            ),
            Box::new(ClassifierExpert::seeded_random(4, 4, 600 + i, (i % 4) as usize)?),
            Box::new(RegressorExpert::new(sample_x(4), 0.3, 5.0)),
            Box::new(DenseExpert::seeded_random(2, 3, 4, 700 + i, vec![0, 2])?),
        ];
        for e in &experts {
            let x = sample_x(4);
            let loss = e.loss(&x)?;
            if e.kind() == crate::experts::ExpertKind::Regressor && loss < 1e-3 {
                continue; // skip the subgradient kink
            }
            let g = e.grad(&x)?;
            let fd = fd_gradient(|v| e.loss(v), &x, 1e-5)?;
            let rel = (&g - &fd).norm() / g.norm().max(1e-6);
            worst = worst.max(rel);
        }
    }
    Ok(CheckRow::new("expert_grad_fd_rel", worst, 1e-5))
}

/// Clipped-gradient bound and warmup gate over traced guided runs.
fn check_guided_trace(schedule: &Arc<NoiseSchedule>) -> Result<(CheckRow, CheckRow)> {
    let gm = benchmark::four_component();
    let backend =
        ConsistencyDenoiser::new(Arc::clone(&gm), Arc::clone(schedule), 25)?;
    let cls: Arc<dyn Expert> = Arc::new(benchmark::four_component_classifier(11, benchmark::TARGET_LABEL));
    let multi = MultiExpert::single("classifier", cls);
    let cfg = benchmark::benchmark_guidance(7);
    let mut clip_excess = 0.0f64;
    let mut gate_violation = 0.0f64;
    for chain in 0..4 {
        let run = sample_guided(
            &backend,
            &Decoder::Identity,
            &benchmark::ambiguous_conditioning(),
            Some(&multi),
            &cfg,
            gm.dim(),
            chain,
        )?;
        for step in &run.trace.steps {
            clip_excess = clip_excess.max(step.clipped_max_abs - cfg.tau);
            let expect = if step.t > cfg.t_thre { 0.0 } else { cfg.w };
            gate_violation = gate_violation.max((step.applied_weight - expect).abs());
        }
    }
    Ok((
        CheckRow::new("clip_bound_excess", clip_excess.max(0.0), 0.0),
        CheckRow::new("warmup_gate_abs", gate_violation, 0.0),
    ))
}

/// Bitwise repeatability of a guided run.
fn check_determinism(schedule: &Arc<NoiseSchedule>) -> Result<CheckRow> {
    let gm = benchmark::four_component();
    let backend = ConsistencyDenoiser::new(Arc::clone(&gm), Arc::clone(schedule), 25)?;
    let cls: Arc<dyn Expert> = Arc::new(benchmark::four_component_classifier(11, benchmark::TARGET_LABEL));
    let multi = MultiExpert::single("classifier", cls);
    let cfg = benchmark::benchmark_guidance(99);
    let run = |_| {
        sample_guided(
            &backend,
            &Decoder::Identity,
            &benchmark::ambiguous_conditioning(),
            Some(&multi),
            &cfg,
            gm.dim(),
            3,
        )
    };
    let a = run(0)?;
    let b = run(1)?;
    let mut diff = 0.0f64;
    for (x, y) in a.trace.steps.iter().zip(&b.trace.steps) {
        if x.z != y.z || x.loss.to_bits() != y.loss.to_bits() {
            diff = 1.0;
        }
    }
    if a.final_latent != b.final_latent {
        diff = 1.0;
    }
    Ok(CheckRow::new("determinism_trace_mismatch", diff, 0.0))
}

/// Run the whole oracle suite.
pub fn run(schedule: &Arc<NoiseSchedule>) -> Result<Vec<CheckRow>> {
    let mut rows = vec![
        check_tweedie(schedule)?,
        check_reconstruction_round_trip(schedule)?,
        check_expert_gradients()?,
    ];
    let (clip, gate) = check_guided_trace(schedule)?;
    rows.push(clip);
    rows.push(gate);
    rows.push(check_determinism(schedule)?);
    Ok(rows)
}

/// Render rows as a fixed-width pass/fail table.
pub fn format_table(rows: &[CheckRow]) -> String {
    let mut out = String::from("check                         worst        tolerance    status\n");
    for r in rows {
        out.push_str(&format!(
            "{:<28}  {:<11.3e}  {:<11.3e}  {}\n",
            r.name,
            r.worst,
            r.tolerance,
            if r.pass { "pass" } else { "FAIL" }
        ));
    }
    out
}
