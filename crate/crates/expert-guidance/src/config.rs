//! Experiment configuration: TOML schema, validation, and builders for the
//! runtime objects (schedule, mixture, backend, decoder, experts).

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::benchmark;
use crate::denoiser::{ConsistencyDenoiser, Decoder, Denoiser, PosteriorDenoiser};
use crate::error::{Error, Result};
use crate::experts::{
    ClassifierExpert, DenseExpert, EmbeddingExpert, Expert, MultiEntry, MultiExpert,
    RegressorExpert,
};
use crate::guidance::{GradMode, GuidanceConfig};
use crate::mixture::{Component, Conditioning, GaussianMixture};
use crate::schedule::NoiseSchedule;

pub const OUT_DIR_ENV: &str = "EXPERT_GUIDANCE_OUT";
const MAX_DIM: usize = 16;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            t_max: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Diagonal covariance entries; exclusive with `cov_full`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov_diag: Option<Vec<f64>>,
    /// Full covariance rows; exclusive with `cov_diag`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov_full: Option<Vec<Vec<f64>>>,
    pub label: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub components: Vec<ComponentSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendChoice {
    Posterior,
    Consistency,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSpec {
    pub kind: BackendChoice,
    #[serde(default = "default_substeps")]
    pub n_substeps: usize,
}

fn default_substeps() -> usize {
    50
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec {
            kind: BackendChoice::Consistency,
            n_substeps: default_substeps(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum DecoderSpec {
    #[default]
    Identity,
    Linear {
        obs_dim: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExpertSpec {
    Classifier {
        #[serde(default = "default_expert_name_classifier")]
        name: String,
        #[serde(default = "one")]
        weight: f64,
        seed: u64,
        target_label: usize,
        /// Build logits from mixture component-mean prototypes; otherwise a
        /// seeded random matrix over `classes`.
        #[serde(default = "default_true")]
        prototypes: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        classes: Option<usize>,
        #[serde(default = "default_gain")]
        gain: f64,
        #[serde(default = "default_jitter")]
        jitter: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        penalty_value: Option<f64>,
    },
    Embedding {
        #[serde(default = "default_expert_name_embedding")]
        name: String,
        #[serde(default = "one")]
        weight: f64,
        seed: u64,
        embed_dim: usize,
        /// Reference observation whose embedding becomes the target.
        reference: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        penalty_value: Option<f64>,
    },
    Regressor {
        #[serde(default = "default_expert_name_regressor")]
        name: String,
        #[serde(default = "one")]
        weight: f64,
        seed: u64,
        /// Ground-truth affine functional (weights, intercept).
        w_base: Vec<f64>,
        b_base: f64,
        #[serde(default = "default_reg_jitter")]
        jitter: f64,
        target_value: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        penalty_value: Option<f64>,
    },
    Dense {
        #[serde(default = "default_expert_name_dense")]
        name: String,
        #[serde(default = "one")]
        weight: f64,
        seed: u64,
        patches: usize,
        classes: usize,
        patch_targets: Vec<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        penalty_value: Option<f64>,
    },
}

fn one() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}
fn default_gain() -> f64 {
    benchmark::CLASSIFIER_GAIN
}
fn default_jitter() -> f64 {
    benchmark::CLASSIFIER_JITTER
}
fn default_reg_jitter() -> f64 {
    benchmark::REGRESSOR_JITTER
}
fn default_expert_name_classifier() -> String {
    "classifier".into()
}
fn default_expert_name_embedding() -> String {
    "embedding".into()
}
fn default_expert_name_regressor() -> String {
    "regressor".into()
}
fn default_expert_name_dense() -> String {
    "dense".into()
}

impl ExpertSpec {
    pub fn name(&self) -> &str {
        match self {
            ExpertSpec::Classifier { name, .. }
            | ExpertSpec::Embedding { name, .. }
            | ExpertSpec::Regressor { name, .. }
            | ExpertSpec::Dense { name, .. } => name,
        }
    }

    pub fn weight(&self) -> f64 {
        match self {
            ExpertSpec::Classifier { weight, .. }
            | ExpertSpec::Embedding { weight, .. }
            | ExpertSpec::Regressor { weight, .. }
            | ExpertSpec::Dense { weight, .. } => *weight,
        }
    }

    /// Worst-case metric assigned to penalized samples: zero accuracy or
    /// similarity, a large fixed error for regression.
    pub fn penalty_value(&self) -> f64 {
        match self {
            ExpertSpec::Classifier { penalty_value, .. }
            | ExpertSpec::Embedding { penalty_value, .. }
            | ExpertSpec::Dense { penalty_value, .. } => penalty_value.unwrap_or(0.0),
            ExpertSpec::Regressor { penalty_value, .. } => {
                penalty_value.unwrap_or(benchmark::AGE_PENALTY)
            }
        }
    }

    /// Build the expert with an optional seed override (held-out evaluators).
    pub fn build(&self, mixture: &GaussianMixture, obs_dim: usize, seed_override: Option<u64>) -> Result<Arc<dyn Expert>> {
        match self {
            ExpertSpec::Classifier {
                seed,
                target_label,
                prototypes,
                classes,
                gain,
                jitter,
                ..
            } => {
                let seed = seed_override.unwrap_or(*seed);
                if *prototypes {
                    let protos: Vec<DVector<f64>> = mixture
                        .components()
                        .iter()
                        .map(|c| c.mean.clone())
                        .collect();
                    if protos[0].len() != obs_dim {
                        return Err(Error::config(
                            "prototype classifier requires observation dim == latent dim",
                        ));
                    }
                    Ok(Arc::new(ClassifierExpert::from_prototypes(
                        &protos,
                        *gain,
                        *jitter,
                        seed,
                        *target_label,
                    )?))
                } else {
                    let k = classes.ok_or_else(|| {
                        Error::config("random classifier needs an explicit `classes` count")
                    })?;
                    Ok(Arc::new(ClassifierExpert::seeded_random(
                        k,
                        obs_dim,
                        seed,
                        *target_label,
                    )?))
                }
            }
            ExpertSpec::Embedding {
                seed,
                embed_dim,
                reference,
                ..
            } => {
                if reference.len() != obs_dim {
                    return Err(Error::config("embedding reference has wrong dimension"));
                }
                let seed = seed_override.unwrap_or(*seed);
                Ok(Arc::new(EmbeddingExpert::seeded_from_reference(
                    *embed_dim,
                    obs_dim,
                    seed,
                    &DVector::from_vec(reference.clone()),
                )?))
            }
            ExpertSpec::Regressor {
                seed,
                w_base,
                b_base,
                jitter,
                target_value,
                ..
            } => {
                if w_base.len() != obs_dim {
                    return Err(Error::config("regressor base weights have wrong dimension"));
                }
                let seed = seed_override.unwrap_or(*seed);
                Ok(Arc::new(RegressorExpert::from_base(
                    &DVector::from_vec(w_base.clone()),
                    *b_base,
                    *jitter,
                    seed,
                    *target_value,
                )))
            }
            ExpertSpec::Dense {
                seed,
                patches,
                classes,
                patch_targets,
                ..
            } => {
                let seed = seed_override.unwrap_or(*seed);
                Ok(Arc::new(DenseExpert::seeded_random(
                    *patches,
                    *classes,
                    obs_dim,
                    seed,
                    patch_targets.clone(),
                )?))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradModeSpec {
    ZtFd,
    X0Analytic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSpec {
    pub w: f64,
    pub tau: f64,
    pub t_thre: usize,
    pub n_steps: usize,
    pub grad_mode: GradModeSpec,
    pub fd_step: f64,
}

impl Default for GuidanceSpec {
    fn default() -> Self {
        GuidanceSpec {
            w: 200.0,
            tau: 5e-4,
            t_thre: 800,
            n_steps: 16,
            grad_mode: GradModeSpec::ZtFd,
            fd_step: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSpec {
    pub n_projections: usize,
    /// Chains generated and evaluated per condition.
    pub n_samples: usize,
    /// True-sample reference batch size for distribution distances.
    pub n_reference: usize,
    pub penalty_quantile: f64,
    /// True samples used to estimate the penalty threshold.
    pub penalty_samples: usize,
    /// Explicit NLL threshold; when absent it is estimated from true samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty_threshold: Option<f64>,
}

impl Default for EvaluationSpec {
    fn default() -> Self {
        EvaluationSpec {
            n_projections: 256,
            n_samples: 200,
            n_reference: 512,
            penalty_quantile: 0.99,
            penalty_samples: 100_000,
            penalty_threshold: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    pub n_chains: usize,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        TrajectorySpec { n_chains: 240 }
    }
}

/// Full experiment description, loadable from TOML.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    pub mixture: MixtureSpec,
    /// Allowed class labels; empty means unrestricted.
    #[serde(default)]
    pub conditioning: Vec<usize>,
    #[serde(default)]
    pub backend: BackendSpec,
    #[serde(default)]
    pub decoder: DecoderSpec,
    #[serde(default)]
    pub experts: Vec<ExpertSpec>,
    #[serde(default)]
    pub guidance: GuidanceSpec,
    #[serde(default)]
    pub evaluation: EvaluationSpec,
    #[serde(default)]
    pub trajectory: TrajectorySpec,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::config(format!("failed to parse {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Short content hash of the resolved configuration.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mixture.components.is_empty() {
            return Err(Error::config("mixture needs at least one component"));
        }
        let dim = self.mixture.components[0].mean.len();
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::config(format!("latent dimension must be 1..={MAX_DIM}")));
        }
        for (i, c) in self.mixture.components.iter().enumerate() {
            if c.mean.len() != dim {
                return Err(Error::config(format!("component {i} dimension differs")));
            }
            match (&c.cov_diag, &c.cov_full) {
                (Some(d), None) => {
                    if d.len() != dim {
                        return Err(Error::config(format!("component {i} cov_diag length != dim")));
                    }
                }
                (None, Some(rows)) => {
                    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                        return Err(Error::config(format!("component {i} cov_full shape != dim x dim")));
                    }
                }
                _ => {
                    return Err(Error::config(format!(
                        "component {i} needs exactly one of cov_diag / cov_full"
                    )))
                }
            }
            if c.weight <= 0.0 {
                return Err(Error::config(format!("component {i} weight must be positive")));
            }
        }
        let labels: std::collections::BTreeSet<usize> =
            self.mixture.components.iter().map(|c| c.label).collect();
        for l in &self.conditioning {
            if !labels.contains(l) {
                return Err(Error::config(format!("conditioning label {l} not in mixture")));
            }
        }
        if self.schedule.t_max < 1 {
            return Err(Error::config("schedule t_max must be >= 1"));
        }
        if self.guidance.n_steps < 1 || self.guidance.n_steps > self.schedule.t_max {
            return Err(Error::config("guidance n_steps out of range"));
        }
        if self.guidance.t_thre > self.schedule.t_max {
            return Err(Error::config("t_thre must be <= t_max"));
        }
        let w_ok = self.guidance.w.is_finite() && self.guidance.w >= 0.0;
        let tau_ok = self.guidance.tau.is_finite() && self.guidance.tau > 0.0;
        if !w_ok || !tau_ok {
            return Err(Error::config("guidance needs w >= 0 and tau > 0"));
        }
        if self.backend.n_substeps < 1 {
            return Err(Error::config("backend n_substeps must be >= 1"));
        }
        if let DecoderSpec::Linear { obs_dim, .. } = self.decoder {
            if obs_dim < dim || obs_dim > MAX_DIM {
                return Err(Error::config(format!(
                    "linear decoder obs_dim must be in {dim}..={MAX_DIM}"
                )));
            }
        }
        if self.evaluation.n_samples < 1
            || self.evaluation.n_reference < 2
            || self.evaluation.n_projections < 1
        {
            return Err(Error::config("evaluation sizes must be positive"));
        }
        if !(self.evaluation.penalty_quantile > 0.0 && self.evaluation.penalty_quantile <= 1.0) {
            return Err(Error::config("penalty_quantile must be in (0, 1]"));
        }
        if self.trajectory.n_chains < 2 {
            return Err(Error::config("trajectory n_chains must be >= 2"));
        }
        // Build the heavyweight pieces once to surface numeric errors early.
        let mixture = self.build_mixture()?;
        let obs_dim = self.build_decoder()?.obs_dim(dim);
        for e in &self.experts {
            e.build(&mixture, obs_dim, None)?;
        }
        Ok(())
    }

    pub fn build_schedule(&self) -> Result<Arc<NoiseSchedule>> {
        Ok(Arc::new(NoiseSchedule::linear(
            self.schedule.t_max,
            self.schedule.beta_start,
            self.schedule.beta_end,
        )?))
    }

    pub fn build_mixture(&self) -> Result<Arc<GaussianMixture>> {
        let dim = self.mixture.components[0].mean.len();
        let total: f64 = self.mixture.components.iter().map(|c| c.weight).sum();
        let comps: Vec<Component> = self
            .mixture
            .components
            .iter()
            .map(|c| {
                let cov = match (&c.cov_diag, &c.cov_full) {
                    (Some(d), None) => DMatrix::from_diagonal(&DVector::from_vec(d.clone())),
                    (None, Some(rows)) => {
                        DMatrix::from_fn(dim, dim, |r, cc| rows[r][cc])
                    }
                    _ => unreachable!("validated"),
                };
                Component {
                    // Normalize here so hand-written weights need not sum
                    // to 1 at full precision.
                    weight: c.weight / total,
                    mean: DVector::from_vec(c.mean.clone()),
                    cov,
                    label: c.label,
                }
            })
            .collect();
        Ok(Arc::new(GaussianMixture::new(comps)?))
    }

    pub fn build_conditioning(&self) -> Conditioning {
        if self.conditioning.is_empty() {
            Conditioning::Unrestricted
        } else {
            Conditioning::labels(self.conditioning.iter().copied())
        }
    }

    pub fn build_backend(
        &self,
        mixture: &Arc<GaussianMixture>,
        schedule: &Arc<NoiseSchedule>,
    ) -> Result<Arc<dyn Denoiser>> {
        Ok(match self.backend.kind {
            BackendChoice::Posterior => Arc::new(PosteriorDenoiser::new(
                Arc::clone(mixture),
                Arc::clone(schedule),
            )),
            BackendChoice::Consistency => Arc::new(ConsistencyDenoiser::new(
                Arc::clone(mixture),
                Arc::clone(schedule),
                self.backend.n_substeps,
            )?),
        })
    }

    pub fn build_decoder(&self) -> Result<Decoder> {
        let dim = self.mixture.components[0].mean.len();
        match self.decoder {
            DecoderSpec::Identity => Ok(Decoder::Identity),
            DecoderSpec::Linear { obs_dim, seed } => Decoder::random_linear(dim, obs_dim, seed),
        }
    }

    pub fn build_guidance(&self) -> GuidanceConfig {
        GuidanceConfig {
            w: self.guidance.w,
            tau: self.guidance.tau,
            t_thre: self.guidance.t_thre,
            n_steps: self.guidance.n_steps,
            grad_mode: match self.guidance.grad_mode {
                GradModeSpec::ZtFd => GradMode::ZtFd,
                GradModeSpec::X0Analytic => GradMode::X0Analytic,
            },
            fd_step: self.guidance.fd_step,
            seed: self.seed,
        }
    }

    /// Guidance experts combined with their weights, in config order.
    pub fn build_experts(&self, mixture: &GaussianMixture, obs_dim: usize) -> Result<Option<MultiExpert>> {
        if self.experts.is_empty() {
            return Ok(None);
        }
        let mut entries = Vec::new();
        for spec in &self.experts {
            entries.push(MultiEntry {
                name: spec.name().to_string(),
                expert: spec.build(mixture, obs_dim, None)?,
                weight: spec.weight(),
            });
        }
        Ok(Some(MultiExpert::new(entries)?))
    }

}

/// Preset mirroring the guided four-component benchmark.
pub fn four_component_preset() -> ExperimentConfig {
    let gm = benchmark::four_component();
    let components = gm
        .components()
        .iter()
        .map(|c| ComponentSpec {
            weight: c.weight,
            mean: c.mean.iter().copied().collect(),
            cov_diag: Some((0..c.cov.nrows()).map(|i| c.cov[(i, i)]).collect()),
            cov_full: None,
            label: c.label,
        })
        .collect();
    ExperimentConfig {
        seed: 0,
        schedule: ScheduleSpec::default(),
        mixture: MixtureSpec { components },
        conditioning: vec![1, 2],
        backend: BackendSpec::default(),
        decoder: DecoderSpec::Identity,
        experts: vec![ExpertSpec::Classifier {
            name: "classifier".into(),
            weight: 1.0,
            seed: 11,
            target_label: benchmark::TARGET_LABEL,
            prototypes: true,
            classes: None,
            gain: benchmark::CLASSIFIER_GAIN,
            jitter: benchmark::CLASSIFIER_JITTER,
            penalty_value: None,
        }],
        guidance: GuidanceSpec {
            tau: benchmark::BENCHMARK_TAU,
            ..GuidanceSpec::default()
        },
        evaluation: EvaluationSpec::default(),
        trajectory: TrajectorySpec::default(),
    }
}

/// Preset mirroring the unguided two-component trajectory benchmark.
pub fn two_component_preset() -> ExperimentConfig {
    let gm = benchmark::two_component();
    let components = gm
        .components()
        .iter()
        .map(|c| ComponentSpec {
            weight: c.weight,
            mean: c.mean.iter().copied().collect(),
            cov_diag: Some((0..c.cov.nrows()).map(|i| c.cov[(i, i)]).collect()),
            cov_full: None,
            label: c.label,
        })
        .collect();
    ExperimentConfig {
        seed: 0,
        schedule: ScheduleSpec::default(),
        mixture: MixtureSpec { components },
        conditioning: vec![],
        backend: BackendSpec::default(),
        decoder: DecoderSpec::Identity,
        experts: vec![],
        guidance: GuidanceSpec {
            w: 0.0,
            tau: benchmark::BENCHMARK_TAU,
            ..GuidanceSpec::default()
        },
        evaluation: EvaluationSpec::default(),
        trajectory: TrajectorySpec::default(),
    }
}
