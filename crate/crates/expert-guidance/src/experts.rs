//! Analytic, differentiable expert models over decoded observations.
//!
//! Four families: embedding similarity, classification, regression and dense
//! per-patch classification. Each exposes a nonnegative guidance loss, its
//! exact observation-space gradient, and the matching evaluation metric.
//! Weights are fixed at construction (seeded random or derived from class
//! prototypes) and never trained.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::mixture::log_sum_exp;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpertKind {
    Embedding,
    Classifier,
    Regressor,
    Dense,
}

impl std::fmt::Display for ExpertKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExpertKind::Embedding => write!(f, "embedding"),
            ExpertKind::Classifier => write!(f, "classifier"),
            ExpertKind::Regressor => write!(f, "regressor"),
            ExpertKind::Dense => write!(f, "dense"),
        }
    }
}

/// Differentiable loss plus evaluation metric over an observation vector.
pub trait Expert: Send + Sync {
    fn kind(&self) -> ExpertKind;

    /// Guidance loss; nonnegative for every family here.
    fn loss(&self, x: &DVector<f64>) -> Result<f64>;

    /// Exact gradient of `loss` in `x`.
    fn grad(&self, x: &DVector<f64>) -> Result<DVector<f64>>;

    /// Task metric (cosine, accuracy, absolute error, patch accuracy).
    fn evaluate(&self, x: &DVector<f64>) -> Result<f64>;

    /// Metric polarity; absolute errors report false here.
    fn higher_is_better(&self) -> bool;

    /// Evaluator of the same kind and target with independently seeded
    /// weights. Used for evaluation only, never guidance.
    fn held_out(&self, seed: u64) -> Arc<dyn Expert>;
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

/// How classifier-style logit matrices are built, kept so held-out
/// evaluators can be re-drawn with a fresh seed.
#[derive(Debug, Clone)]
enum LogitRecipe {
    Random,
    /// gain * prototype rows + jitter_scale * noise(seed)
    Prototypes {
        prototypes: Vec<DVector<f64>>,
        gain: f64,
        jitter: f64,
    },
}

fn build_logits(recipe: &LogitRecipe, classes: usize, dim: usize, seed: u64) -> DMatrix<f64> {
    match recipe {
        LogitRecipe::Random => random_matrix(classes, dim, seed),
        LogitRecipe::Prototypes {
            prototypes,
            gain,
            jitter,
        } => {
            let noise = random_matrix(classes, dim, seed);
            DMatrix::from_fn(classes, dim, |r, c| {
                *gain * prototypes[r][c] + *jitter * noise[(r, c)]
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Embedding similarity
// ---------------------------------------------------------------------------

/// Normalized linear embedding with a cosine-alignment loss `1 - e_hat . e_gt`.
pub struct EmbeddingExpert {
    w: DMatrix<f64>,
    target: DVector<f64>,
    /// Reference observation the target was derived from, when applicable;
    /// held-out evaluators re-embed it with their own weights.
    reference: Option<DVector<f64>>,
}

impl EmbeddingExpert {
    pub fn new(w: DMatrix<f64>, target: DVector<f64>) -> Result<Self> {
        if w.nrows() != target.len() {
            return Err(Error::Expert("embedding target dimension mismatch".into()));
        }
        if (target.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::Expert("embedding target must have unit norm".into()));
        }
        Ok(EmbeddingExpert {
            w,
            target,
            reference: None,
        })
    }

    /// Seeded random embedder with the target taken from a reference
    /// observation's own embedding.
    pub fn seeded_from_reference(
        embed_dim: usize,
        obs_dim: usize,
        seed: u64,
        reference: &DVector<f64>,
    ) -> Result<Self> {
        let w = random_matrix(embed_dim, obs_dim, seed);
        let target = Self::embed_with(&w, reference)?;
        Ok(EmbeddingExpert {
            w,
            target,
            reference: Some(reference.clone()),
        })
    }

    fn embed_with(w: &DMatrix<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
        let u = w * x;
        let n = u.norm();
        if n < 1e-12 {
            return Err(Error::Expert(
                "observation embeds to the zero vector; cosine undefined".into(),
            ));
        }
        Ok(u / n)
    }

    pub fn embed(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Self::embed_with(&self.w, x)
    }

    fn cosine(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.embed(x)?.dot(&self.target))
    }
}

impl Expert for EmbeddingExpert {
    fn kind(&self) -> ExpertKind {
        ExpertKind::Embedding
    }

    fn loss(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(1.0 - self.cosine(x)?)
    }

    fn grad(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let u = &self.w * x;
        let n = u.norm();
        if n < 1e-12 {
            return Err(Error::Expert(
                "observation embeds to the zero vector; cosine undefined".into(),
            ));
        }
        let e_hat = &u / n;
        // d(1 - e_hat . e)/du = -(e - e_hat (e_hat . e)) / |u|
        let du = -(&self.target - &e_hat * e_hat.dot(&self.target)) / n;
        Ok(self.w.transpose() * du)
    }

    fn evaluate(&self, x: &DVector<f64>) -> Result<f64> {
        self.cosine(x)
    }

    fn higher_is_better(&self) -> bool {
        true
    }

    fn held_out(&self, seed: u64) -> Arc<dyn Expert> {
        let w = random_matrix(self.w.nrows(), self.w.ncols(), seed);
        let target = match &self.reference {
            Some(r) => Self::embed_with(&w, r).expect("held-out embedder degenerate on the reference"),
            None => self.target.clone(),
        };
        Arc::new(EmbeddingExpert {
            w,
            target,
            reference: self.reference.clone(),
        })
    }
}

// ---------------------------------------------------------------------------
// Classification
// ---------------------------------------------------------------------------

/// Linear softmax classifier with cross-entropy loss toward a target label.
pub struct ClassifierExpert {
    logits: DMatrix<f64>,
    target: usize,
    recipe: LogitRecipe,
}

impl ClassifierExpert {
    pub fn new(logits: DMatrix<f64>, target: usize) -> Result<Self> {
        if target >= logits.nrows() {
            return Err(Error::Expert(format!(
                "target label {target} outside {} classes",
                logits.nrows()
            )));
        }
        Ok(ClassifierExpert {
            logits,
            target,
            recipe: LogitRecipe::Random,
        })
    }

    pub fn seeded_random(classes: usize, obs_dim: usize, seed: u64, target: usize) -> Result<Self> {
        Self::new(random_matrix(classes, obs_dim, seed), target)
    }

    /// Logit rows built from class prototypes (scaled, seeded jitter), tying
    /// classifier classes to known class centers.
    pub fn from_prototypes(
        prototypes: &[DVector<f64>],
        gain: f64,
        jitter: f64,
        seed: u64,
        target: usize,
    ) -> Result<Self> {
        if prototypes.is_empty() {
            return Err(Error::Expert("prototype classifier needs classes".into()));
        }
        let recipe = LogitRecipe::Prototypes {
            prototypes: prototypes.to_vec(),
            gain,
            jitter,
        };
        let logits = build_logits(&recipe, prototypes.len(), prototypes[0].len(), seed);
        let mut e = Self::new(logits, target)?;
        e.recipe = recipe;
        Ok(e)
    }

    pub fn classes(&self) -> usize {
        self.logits.nrows()
    }

    pub fn predict(&self, x: &DVector<f64>) -> usize {
        let l = &self.logits * x;
        let mut best = 0;
        for i in 1..l.len() {
            if l[i] > l[best] {
                best = i;
            }
        }
        best
    }

    fn check_dim(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.logits.ncols() {
            return Err(Error::Expert(format!(
                "classifier expects dim {}, got {}",
                self.logits.ncols(),
                x.len()
            )));
        }
        Ok(())
    }
}

impl Expert for ClassifierExpert {
    fn kind(&self) -> ExpertKind {
        ExpertKind::Classifier
    }

    fn loss(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_dim(x)?;
        let l = &self.logits * x;
        let logs: Vec<f64> = l.iter().copied().collect();
        Ok(log_sum_exp(&logs) - l[self.target])
    }

    fn grad(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(x)?;
        let l = &self.logits * x;
        let m = l.max();
        let mut p: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
        let total: f64 = p.iter().sum();
        for v in &mut p {
            *v /= total;
        }
        p[self.target] -= 1.0;
        Ok(self.logits.transpose() * DVector::from_vec(p))
    }

    fn evaluate(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_dim(x)?;
        Ok(if self.predict(x) == self.target { 1.0 } else { 0.0 })
    }

    fn higher_is_better(&self) -> bool {
        true
    }

    fn held_out(&self, seed: u64) -> Arc<dyn Expert> {
        let logits = build_logits(&self.recipe, self.logits.nrows(), self.logits.ncols(), seed);
        Arc::new(ClassifierExpert {
            logits,
            target: self.target,
            recipe: self.recipe.clone(),
        })
    }
}

// ---------------------------------------------------------------------------
// Regression
// ---------------------------------------------------------------------------

/// Affine regressor with absolute-error loss toward a scalar target.
pub struct RegressorExpert {
    w: DVector<f64>,
    b: f64,
    target: f64,
    /// Base functional for held-out re-draws: (w*, b*, jitter).
    base: Option<(DVector<f64>, f64, f64)>,
}

impl RegressorExpert {
    pub fn new(w: DVector<f64>, b: f64, target: f64) -> Self {
        RegressorExpert {
            w,
            b,
            target,
            base: None,
        }
    }

    /// Noisy copy of a shared ground-truth functional `x -> w* . x + b*`.
    pub fn from_base(w_star: &DVector<f64>, b_star: f64, jitter: f64, seed: u64, target: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = DVector::from_fn(w_star.len(), |i, _| {
            let noise: f64 = StandardNormal.sample(&mut rng);
            w_star[i] + jitter * noise
        });
        RegressorExpert {
            w,
            b: b_star,
            target,
            base: Some((w_star.clone(), b_star, jitter)),
        }
    }

    pub fn predict(&self, x: &DVector<f64>) -> f64 {
        self.w.dot(x) + self.b
    }
}

impl Expert for RegressorExpert {
    fn kind(&self) -> ExpertKind {
        ExpertKind::Regressor
    }

    fn loss(&self, x: &DVector<f64>) -> Result<f64> {
        Ok((self.predict(x) - self.target).abs())
    }

    fn grad(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let r = self.predict(x) - self.target;
        // Subgradient 0 exactly at the kink.
        if r == 0.0 {
            return Ok(DVector::zeros(x.len()));
        }
        Ok(&self.w * r.signum())
    }

    fn evaluate(&self, x: &DVector<f64>) -> Result<f64> {
        self.loss(x)
    }

    fn higher_is_better(&self) -> bool {
        false
    }

    fn held_out(&self, seed: u64) -> Arc<dyn Expert> {
        match &self.base {
            Some((w_star, b_star, jitter)) => Arc::new(RegressorExpert::from_base(
                w_star,
                *b_star,
                *jitter,
                seed,
                self.target,
            )),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let w = DVector::from_fn(self.w.len(), |_, _| StandardNormal.sample(&mut rng));
                Arc::new(RegressorExpert::new(w, self.b, self.target))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Dense per-patch classification
// ---------------------------------------------------------------------------

/// Observation split into `P` equal patches, each with its own linear
/// classifier and target label; losses sum, the metric is mean accuracy.
pub struct DenseExpert {
    patch_classifiers: Vec<DMatrix<f64>>,
    targets: Vec<usize>,
    recipe: LogitRecipe,
}

impl DenseExpert {
    pub fn new(patch_classifiers: Vec<DMatrix<f64>>, targets: Vec<usize>) -> Result<Self> {
        if patch_classifiers.is_empty() || patch_classifiers.len() != targets.len() {
            return Err(Error::Expert(
                "dense expert needs one target per patch classifier".into(),
            ));
        }
        let patch = patch_classifiers[0].ncols();
        for (i, (m, &t)) in patch_classifiers.iter().zip(&targets).enumerate() {
            if m.ncols() != patch {
                return Err(Error::Expert(format!("patch {i} width differs")));
            }
            if t >= m.nrows() {
                return Err(Error::Expert(format!("patch {i} target label out of range")));
            }
        }
        Ok(DenseExpert {
            patch_classifiers,
            targets,
            recipe: LogitRecipe::Random,
        })
    }

    /// `patches` equal slices of an observation of dimension `obs_dim`.
    pub fn seeded_random(
        patches: usize,
        classes: usize,
        obs_dim: usize,
        seed: u64,
        targets: Vec<usize>,
    ) -> Result<Self> {
        if patches == 0 || !obs_dim.is_multiple_of(patches) {
            return Err(Error::Config(format!(
                "observation dim {obs_dim} does not divide into {patches} patches"
            )));
        }
        let width = obs_dim / patches;
        let mats: Vec<DMatrix<f64>> = (0..patches)
            .map(|p| random_matrix(classes, width, seed.wrapping_add(p as u64)))
            .collect();
        Self::new(mats, targets)
    }

    fn patch_width(&self) -> usize {
        self.patch_classifiers[0].ncols()
    }

    fn check_dim(&self, x: &DVector<f64>) -> Result<()> {
        let expect = self.patch_width() * self.patch_classifiers.len();
        if x.len() != expect {
            return Err(Error::Expert(format!(
                "dense expert expects dim {expect}, got {}",
                x.len()
            )));
        }
        Ok(())
    }

    fn patch(&self, x: &DVector<f64>, p: usize) -> DVector<f64> {
        let w = self.patch_width();
        DVector::from_iterator(w, x.iter().skip(p * w).take(w).copied())
    }
}

impl Expert for DenseExpert {
    fn kind(&self) -> ExpertKind {
        ExpertKind::Dense
    }

    fn loss(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_dim(x)?;
        let mut total = 0.0;
        for (p, m) in self.patch_classifiers.iter().enumerate() {
            let l = m * self.patch(x, p);
            let logs: Vec<f64> = l.iter().copied().collect();
            total += log_sum_exp(&logs) - l[self.targets[p]];
        }
        Ok(total)
    }

    fn grad(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(x)?;
        let w = self.patch_width();
        let mut out = DVector::zeros(x.len());
        for (p, m) in self.patch_classifiers.iter().enumerate() {
            let l = m * self.patch(x, p);
            let mx = l.max();
            let mut prob: Vec<f64> = l.iter().map(|v| (v - mx).exp()).collect();
            let total: f64 = prob.iter().sum();
            for v in &mut prob {
                *v /= total;
            }
            prob[self.targets[p]] -= 1.0;
            let g = m.transpose() * DVector::from_vec(prob);
            for i in 0..w {
                out[p * w + i] = g[i];
            }
        }
        Ok(out)
    }

    fn evaluate(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_dim(x)?;
        let mut correct = 0usize;
        for (p, m) in self.patch_classifiers.iter().enumerate() {
            let l = m * self.patch(x, p);
            let mut best = 0;
            for i in 1..l.len() {
                if l[i] > l[best] {
                    best = i;
                }
            }
            if best == self.targets[p] {
                correct += 1;
            }
        }
        Ok(correct as f64 / self.patch_classifiers.len() as f64)
    }

    fn higher_is_better(&self) -> bool {
        true
    }

    fn held_out(&self, seed: u64) -> Arc<dyn Expert> {
        let mats: Vec<DMatrix<f64>> = self
            .patch_classifiers
            .iter()
            .enumerate()
            .map(|(p, m)| build_logits(&self.recipe, m.nrows(), m.ncols(), seed.wrapping_add(p as u64)))
            .collect();
        Arc::new(DenseExpert {
            patch_classifiers: mats,
            targets: self.targets.clone(),
            recipe: self.recipe.clone(),
        })
    }
}

// ---------------------------------------------------------------------------
// Multi-expert combination
// ---------------------------------------------------------------------------

/// Named expert with a nonnegative combination weight.
pub struct MultiEntry {
    pub name: String,
    pub expert: Arc<dyn Expert>,
    pub weight: f64,
}

/// Weighted sum of expert losses; gradients add up.
pub struct MultiExpert {
    entries: Vec<MultiEntry>,
}

impl MultiExpert {
    pub fn new(entries: Vec<MultiEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Expert("multi-expert needs at least one entry".into()));
        }
        if entries.iter().any(|e| !e.weight.is_finite() || e.weight < 0.0) {
            return Err(Error::Expert("multi-expert weights must be finite and >= 0".into()));
        }
        Ok(MultiExpert { entries })
    }

    pub fn single(name: impl Into<String>, expert: Arc<dyn Expert>) -> Self {
        MultiExpert {
            entries: vec![MultiEntry {
                name: name.into(),
                expert,
                weight: 1.0,
            }],
        }
    }

    pub fn entries(&self) -> &[MultiEntry] {
        &self.entries
    }

    pub fn loss(&self, x: &DVector<f64>) -> Result<f64> {
        let mut total = 0.0;
        for e in &self.entries {
            total += e.weight * e.expert.loss(x)?;
        }
        Ok(total)
    }

    pub fn grad(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(x.len());
        for e in &self.entries {
            out += e.expert.grad(x)? * e.weight;
        }
        Ok(out)
    }
}

/// Central finite-difference gradient with per-coordinate relative step.
pub fn fd_gradient<F>(f: F, x: &DVector<f64>, rel_step: f64) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> Result<f64>,
{
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let h = rel_step * (1.0 + x[i].abs());
        xp[i] = x[i] + h;
        let fp = f(&xp)?;
        xp[i] = x[i] - h;
        let fm = f(&xp)?;
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}
