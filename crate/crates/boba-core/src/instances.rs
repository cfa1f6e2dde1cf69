//! Random gradient sets with a known honest simplex.
//!
//! Class expectations are random points in `R^d`; each honest client's
//! expectation is the mix of them given by its label distribution, and its
//! upload adds a perturbation of norm `eps`. Server class gradients sit at
//! the class expectations plus perturbations of norm `eps_server`.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use thiserror::Error;

use crate::aggregation::{AggregationError, AggregationInput, BoundInputs};
use crate::attacks::{most_skewed_client, Attack, AttackContext, AttackError};
use crate::linalg::{column_mean, Matrix, Vector};
use crate::metrics::{assumption_report, measure_variations, MetricsError, SubsetSampling, VariationReport};

#[derive(Debug, Error)]
pub enum InstanceError {
    #[error("invalid instance parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
}

/// Shape and noise of a random instance.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceSpec {
    pub dim: usize,
    pub classes: usize,
    pub honest: usize,
    pub byzantine: usize,
    /// Declared tolerance.
    pub f: usize,
    /// Norm of each honest perturbation.
    pub eps: f64,
    /// Norm of each server perturbation.
    pub eps_server: f64,
    /// Dirichlet concentration of the honest label mixes.
    pub alpha: f64,
    /// Scale of the class expectations.
    pub spread: f64,
    /// `None` places the Byzantines at random far points.
    pub attack: Option<Attack>,
}

impl Default for InstanceSpec {
    fn default() -> Self {
        Self {
            dim: 30,
            classes: 4,
            honest: 12,
            byzantine: 2,
            f: 3,
            eps: 0.0,
            eps_server: 0.0,
            alpha: 0.5,
            spread: 1.0,
            attack: None,
        }
    }
}

impl InstanceSpec {
    pub fn validate(&self) -> Result<(), InstanceError> {
        let bad = |m: String| Err(InstanceError::InvalidParameter(m));
        if self.classes < 2 || self.dim < self.classes {
            return bad(format!("need 2 ≤ classes ≤ dim, got classes={} dim={}", self.classes, self.dim));
        }
        if self.honest == 0 || self.f >= self.honest + self.byzantine {
            return bad(format!("need honest > 0 and f < n (honest={}, f={})", self.honest, self.f));
        }
        if !(self.eps >= 0.0 && self.eps_server >= 0.0 && self.alpha > 0.0 && self.spread > 0.0) {
            return bad("noise levels must be ≥ 0, alpha and spread > 0".into());
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.honest + self.byzantine
    }
}

/// A generated instance. Columns of `gradients` are the honest clients
/// followed by the Byzantines.
#[derive(Clone, Debug)]
pub struct GradientInstance {
    /// `d × c` class expectations.
    pub class_expected: Matrix,
    /// `c × |H|` label distributions.
    pub label_mix: Matrix,
    /// `d × |H|`.
    pub honest_expected: Matrix,
    /// `d × n`.
    pub gradients: Matrix,
    /// `d × c`.
    pub server: Matrix,
    pub honest: usize,
    pub f: usize,
}

fn random_direction<R: Rng + ?Sized>(d: usize, norm: f64, rng: &mut R) -> Vector {
    if norm == 0.0 {
        return Vector::zeros(d);
    }
    loop {
        let v = Vector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let len = v.norm();
        if len > 1e-12 {
            return v * (norm / len);
        }
    }
}

/// Draws an instance.
pub fn random_instance<R: Rng + ?Sized>(spec: &InstanceSpec, rng: &mut R) -> Result<GradientInstance, InstanceError> {
    spec.validate()?;
    let (d, c, h) = (spec.dim, spec.classes, spec.honest);
    let class_expected = Matrix::from_fn(d, c, |_, _| spec.spread * rng.sample::<f64, _>(StandardNormal));
    let gamma = Gamma::new(spec.alpha, 1.0).map_err(|e| InstanceError::InvalidParameter(e.to_string()))?;
    let mut label_mix = Matrix::zeros(c, h);
    for i in 0..h {
        // The first c clients are single-class, which keeps the honest
        // expectations spanning the whole simplex.
        if i < c {
            label_mix[(i, i)] = 1.0;
        } else {
            // Normalised Gamma draws are Dirichlet distributed.
            let mut p = Vector::from_fn(c, |_, _| gamma.sample(rng).max(f64::MIN_POSITIVE));
            p /= p.sum();
            label_mix.set_column(i, &p);
        }
    }
    let honest_expected = &class_expected * &label_mix;
    let mut honest_grads = honest_expected.clone();
    for i in 0..h {
        let mut col = honest_grads.column_mut(i);
        col += random_direction(d, spec.eps, rng);
    }
    let mut server = class_expected.clone();
    for z in 0..c {
        let mut col = server.column_mut(z);
        col += random_direction(d, spec.eps_server, rng);
    }
    let byz = match (&spec.attack, spec.byzantine) {
        (_, 0) => Matrix::zeros(d, 0),
        (Some(attack), b) => {
            let dists: Vec<Vec<f64>> = (0..h).map(|i| label_mix.column(i).iter().copied().collect()).collect();
            let ctx = AttackContext { total_clients: spec.n(), byzantine: b, mimic_target: most_skewed_client(&dists) };
            attack.generate(&honest_grads, &ctx, rng)?
        }
        (None, b) => {
            let scale = 10.0 * spec.spread * (d as f64).sqrt();
            Matrix::from_fn(d, b, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
        }
    };
    let mut gradients = Matrix::zeros(d, spec.n());
    gradients.columns_mut(0, h).copy_from(&honest_grads);
    gradients.columns_mut(h, spec.byzantine).copy_from(&byz);
    Ok(GradientInstance { class_expected, label_mix, honest_expected, gradients, server, honest: h, f: spec.f })
}

impl GradientInstance {
    pub fn n(&self) -> usize {
        self.gradients.ncols()
    }

    pub fn classes(&self) -> usize {
        self.class_expected.ncols()
    }

    pub fn byzantine(&self) -> usize {
        self.n() - self.honest
    }

    pub fn input(&self) -> AggregationInput<'_> {
        AggregationInput::new(&self.gradients, Some(&self.server), self.f, self.classes())
    }

    /// Mean of the honest expectations.
    pub fn expected_mean(&self) -> Vector {
        column_mean(&self.honest_expected)
    }

    /// Mean of the honest uploads.
    pub fn honest_mean(&self) -> Vector {
        column_mean(&self.gradients.columns(0, self.honest).into_owned())
    }

    /// Realised variations of this draw.
    pub fn variations(&self) -> Result<VariationReport, InstanceError> {
        let single = |m: &Matrix, j: usize| m.columns(j, 1).into_owned();
        let clients: Vec<Matrix> = (0..self.honest).map(|i| single(&self.gradients, i)).collect();
        let server: Vec<Matrix> = (0..self.classes()).map(|z| single(&self.server, z)).collect();
        Ok(measure_variations(
            &clients,
            &self.honest_expected,
            self.expected_mean().as_slice(),
            &server,
            &self.class_expected,
        )?)
    }

    /// Bound constants measured on this draw.
    pub fn bound_inputs(&self, p_min: f64, subset_cap: u128) -> Result<BoundInputs, InstanceError> {
        let v = self.variations()?;
        let report = assumption_report(
            &self.honest_expected,
            self.n(),
            self.f,
            self.classes(),
            None,
            subset_cap,
            SubsetSampling::Disabled,
        )?;
        Ok(BoundInputs {
            eps_sq: v.eps_sq,
            eps_s_sq: v.eps_s_sq,
            delta_sq: v.delta_sq,
            delta_s_sq: v.delta_s_sq,
            sigma: report.sigma,
            n: self.n(),
            f: self.f,
            classes: self.classes(),
            p_min,
            beta: self.byzantine() as f64 / self.n() as f64,
            honest: self.honest,
        })
    }
}
