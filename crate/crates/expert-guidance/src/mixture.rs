//! Ground-truth data model: a Gaussian mixture with exact density, score,
//! posterior mean and sampling, under the forward-noising schedule.
//!
//! At timestep `t` the noised mixture keeps the component structure with
//! means `sqrt(ab) * mu_i` and covariances `ab * Sigma_i + (1 - ab) * I`,
//! where `ab = alpha_bar[t]`. All log-space combinations go through
//! max-subtracted log-sum-exp; responsibilities at large `t` are severely
//! imbalanced otherwise.

use std::collections::{BTreeSet, HashMap};
use std::sync::{Arc, RwLock};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

const LN_2PI: f64 = 1.8378770664093453;

/// One mixture component with a class label.
#[derive(Debug, Clone)]
pub struct Component {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub label: usize,
}

/// Class-label restriction applied to the mixture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Conditioning {
    Unrestricted,
    Labels(BTreeSet<usize>),
}

impl Conditioning {
    pub fn labels<I: IntoIterator<Item = usize>>(labels: I) -> Self {
        Conditioning::Labels(labels.into_iter().collect())
    }

    pub fn allows(&self, label: usize) -> bool {
        match self {
            Conditioning::Unrestricted => true,
            Conditioning::Labels(set) => set.contains(&label),
        }
    }
}

/// Per-component quantities at one noise level, cached per `alpha_bar` value.
struct NoisedComponent {
    /// ln w_i (unnormalized; the selection renormalizes).
    log_weight: f64,
    /// sqrt(ab) * mu_i
    mean: DVector<f64>,
    /// (ab * Sigma_i + (1 - ab) * I)^{-1}
    inv: DMatrix<f64>,
    /// ln det(ab * Sigma_i + (1 - ab) * I)
    log_det: f64,
    /// sqrt(ab) * Sigma_i * inv, the posterior-mean gain
    gain: DMatrix<f64>,
}

/// Gaussian mixture with exact noised-marginal quantities.
pub struct GaussianMixture {
    components: Vec<Component>,
    /// Clean-covariance Cholesky factors, for sampling and the clean density.
    chol: Vec<Cholesky<f64, Dyn>>,
    dim: usize,
    /// Noised layers keyed by alpha_bar bit pattern.
    layers: RwLock<HashMap<u64, Arc<Vec<NoisedComponent>>>>,
}

impl std::fmt::Debug for GaussianMixture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GaussianMixture")
            .field("dim", &self.dim)
            .field("components", &self.components.len())
            .finish()
    }
}

impl GaussianMixture {
    /// Validates weights (positive, summing to 1 within 1e-12), dimensions and
    /// symmetric positive-definiteness of every covariance.
    pub fn new(components: Vec<Component>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::parameter("mixture needs at least one component"));
        }
        let dim = components[0].mean.len();
        if dim == 0 {
            return Err(Error::parameter("mixture dimension must be >= 1"));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::parameter(format!(
                "component weights must sum to 1 within 1e-12, got {total}"
            )));
        }
        let mut chol = Vec::with_capacity(components.len());
        for (i, c) in components.iter().enumerate() {
            if c.weight <= 0.0 {
                return Err(Error::parameter(format!("component {i} weight must be positive")));
            }
            if c.mean.len() != dim || c.cov.nrows() != dim || c.cov.ncols() != dim {
                return Err(Error::parameter(format!("component {i} has inconsistent dimensions")));
            }
            let scale = c.cov.amax().max(1.0);
            if (&c.cov - c.cov.transpose()).amax() > 1e-9 * scale {
                return Err(Error::parameter(format!("component {i} covariance is not symmetric")));
            }
            let ch = Cholesky::new(c.cov.clone())
                .ok_or_else(|| Error::parameter(format!("component {i} covariance is not positive-definite")))?;
            chol.push(ch);
        }
        Ok(GaussianMixture {
            components,
            chol,
            dim,
            layers: RwLock::new(HashMap::new()),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn labels(&self) -> BTreeSet<usize> {
        self.components.iter().map(|c| c.label).collect()
    }

    fn layer(&self, alpha_bar: f64) -> Arc<Vec<NoisedComponent>> {
        let key = alpha_bar.to_bits();
        if let Some(l) = self.layers.read().unwrap().get(&key) {
            return Arc::clone(l);
        }
        let eye = DMatrix::<f64>::identity(self.dim, self.dim);
        let sig = alpha_bar.sqrt();
        let built: Vec<NoisedComponent> = self
            .components
            .iter()
            .map(|c| {
                let cov_t = &c.cov * alpha_bar + &eye * (1.0 - alpha_bar);
                // SPD by construction: ab*Sigma + (1-ab)*I with Sigma SPD.
                let ch = Cholesky::new(cov_t.clone()).expect("noised covariance must stay SPD");
                let log_det = 2.0 * (0..self.dim).map(|i| ch.l()[(i, i)].ln()).sum::<f64>();
                let inv = ch.inverse();
                NoisedComponent {
                    log_weight: c.weight.ln(),
                    mean: &c.mean * sig,
                    gain: (&c.cov * sig) * &inv,
                    inv,
                    log_det,
                }
            })
            .collect();
        let arc = Arc::new(built);
        self.layers.write().unwrap().insert(key, Arc::clone(&arc));
        arc
    }

    /// Indices allowed by `cond` plus ln of their total weight.
    fn select(&self, cond: &Conditioning) -> Result<(Vec<usize>, f64)> {
        let idx: Vec<usize> = self
            .components
            .iter()
            .enumerate()
            .filter(|(_, c)| cond.allows(c.label))
            .map(|(i, _)| i)
            .collect();
        if idx.is_empty() {
            return Err(Error::Conditioning(
                "conditioning selects no mixture component".into(),
            ));
        }
        let total: f64 = idx.iter().map(|&i| self.components[i].weight).sum();
        Ok((idx, total.ln()))
    }

    fn check_t(&self, t: usize, schedule: &NoiseSchedule) -> Result<f64> {
        schedule.alpha_bar(t)
    }

    /// Log density of the noised conditional mixture at `z`.
    pub fn noised_log_density(
        &self,
        cond: &Conditioning,
        z: &DVector<f64>,
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<f64> {
        let ab = self.check_t(t, schedule)?;
        let (idx, log_norm) = self.select(cond)?;
        let layer = self.layer(ab);
        let logs: Vec<f64> = idx
            .iter()
            .map(|&i| {
                let nc = &layer[i];
                nc.log_weight - log_norm + gaussian_log_density(z, &nc.mean, &nc.inv, nc.log_det)
            })
            .collect();
        Ok(log_sum_exp(&logs))
    }

    /// Gradient of `noised_log_density` in `z`: responsibility-weighted
    /// Gaussian scores, in closed form.
    pub fn score(
        &self,
        cond: &Conditioning,
        z: &DVector<f64>,
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<DVector<f64>> {
        let ab = self.check_t(t, schedule)?;
        let (idx, _) = self.select(cond)?;
        let layer = self.layer(ab);
        let resp = responsibilities(&layer, &idx, z);
        let mut out = DVector::zeros(self.dim);
        for (&i, &r) in idx.iter().zip(resp.iter()) {
            let nc = &layer[i];
            out -= &nc.inv * (z - &nc.mean) * r;
        }
        Ok(out)
    }

    /// Exact posterior mean `E[x0 | z_t = z]` under the conditional mixture.
    pub fn posterior_mean(
        &self,
        cond: &Conditioning,
        z: &DVector<f64>,
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<DVector<f64>> {
        self.check_t(t, schedule)?;
        if t == 0 {
            self.select(cond)?;
            return Ok(z.clone());
        }
        let ab = schedule.alpha_bar(t)?;
        let (idx, _) = self.select(cond)?;
        let layer = self.layer(ab);
        let resp = responsibilities(&layer, &idx, z);
        let mut out = DVector::zeros(self.dim);
        for (&i, &r) in idx.iter().zip(resp.iter()) {
            let nc = &layer[i];
            let cond_mean = &self.components[i].mean + &nc.gain * (z - &nc.mean);
            out += cond_mean * r;
        }
        Ok(out)
    }

    /// Negative log density of `x` under the clean unconditional mixture.
    pub fn clean_nll(&self, x: &DVector<f64>) -> f64 {
        let layer = self.layer(1.0);
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        let log_norm = total.ln();
        let logs: Vec<f64> = layer
            .iter()
            .map(|nc| nc.log_weight - log_norm + gaussian_log_density(x, &nc.mean, &nc.inv, nc.log_det))
            .collect();
        -log_sum_exp(&logs)
    }

    /// `n` i.i.d. draws from the conditional mixture, deterministic in `seed`.
    pub fn sample(&self, cond: &Conditioning, seed: u64, n: usize) -> Result<Vec<DVector<f64>>> {
        let (idx, _) = self.select(cond)?;
        let total: f64 = idx.iter().map(|&i| self.components[i].weight).sum();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = idx[idx.len() - 1];
            for &i in &idx {
                acc += self.components[i].weight;
                if u < acc {
                    chosen = i;
                    break;
                }
            }
            let xi = DVector::from_fn(self.dim, |_, _| StandardNormal.sample(&mut rng));
            out.push(&self.components[chosen].mean + self.chol[chosen].l() * xi);
        }
        Ok(out)
    }

    /// Draw from the noised marginal at `t`: sample clean, then apply the
    /// forward noising with the given rng.
    pub fn sample_noised(
        &self,
        cond: &Conditioning,
        t: usize,
        schedule: &NoiseSchedule,
        rng: &mut ChaCha8Rng,
    ) -> Result<DVector<f64>> {
        let ab = self.check_t(t, schedule)?;
        let (idx, _) = self.select(cond)?;
        let total: f64 = idx.iter().map(|&i| self.components[i].weight).sum();
        let u: f64 = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut chosen = idx[idx.len() - 1];
        for &i in &idx {
            acc += self.components[i].weight;
            if u < acc {
                chosen = i;
                break;
            }
        }
        let xi = DVector::from_fn(self.dim, |_, _| StandardNormal.sample(&mut *rng));
        let x0 = &self.components[chosen].mean + self.chol[chosen].l() * xi;
        let eps = DVector::from_fn(self.dim, |_, _| StandardNormal.sample(&mut *rng));
        Ok(x0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
    }

    /// Label of the component nearest to `x` in Mahalanobis distance.
    pub fn nearest_label(&self, x: &DVector<f64>) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (c, ch) in self.components.iter().zip(&self.chol) {
            let d = ch.solve(&(x - &c.mean)).dot(&(x - &c.mean));
            if d < best.0 {
                best = (d, c.label);
            }
        }
        best.1
    }
}

fn gaussian_log_density(z: &DVector<f64>, mean: &DVector<f64>, inv: &DMatrix<f64>, log_det: f64) -> f64 {
    let diff = z - mean;
    let quad = (inv * &diff).dot(&diff);
    -0.5 * (z.len() as f64 * LN_2PI + log_det + quad)
}

/// Max-subtracted log-sum-exp.
pub fn log_sum_exp(logs: &[f64]) -> f64 {
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + logs.iter().map(|&l| (l - m).exp()).sum::<f64>().ln()
}

fn responsibilities(layer: &[NoisedComponent], idx: &[usize], z: &DVector<f64>) -> Vec<f64> {
    let logs: Vec<f64> = idx
        .iter()
        .map(|&i| {
            let nc = &layer[i];
            nc.log_weight + gaussian_log_density(z, &nc.mean, &nc.inv, nc.log_det)
        })
        .collect();
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = logs.iter().map(|&l| (l - m).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    unnorm.into_iter().map(|v| v / total).collect()
}
