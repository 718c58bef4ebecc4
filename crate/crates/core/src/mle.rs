//! Ridge-regularised logistic maximum likelihood for BTL comparisons and the
//! matching regularised Gramian `(λ/κ) I + Σ z zᵀ`.
//!
//! The estimator is unconstrained: `θ̂` is not projected onto the unit ball,
//! the ridge term alone keeps it bounded.

use std::borrow::Borrow;

use nalgebra::{Cholesky, DMatrix};
use serde::{Deserialize, Serialize};

use crate::btl::{sigmoid, sigmoid_slope, PreferenceSample, UserDataset};
use crate::error::{Error, Result};
use crate::linalg::{self, SymMat, Vector};

/// `1 / (2 + e² + e⁻²)`: the smallest logistic slope over `|θᵀz| ≤ 2`.
pub fn default_kappa() -> f64 {
    let e2 = std::f64::consts::E.powi(2);
    1.0 / (2.0 + e2 + 1.0 / e2)
}

const ARMIJO_C: f64 = 1e-4;
const ROUNDOFF_DECREMENT: f64 = 1e-10;
const MAX_HALVINGS: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MleConfig {
    /// Ridge weight `λ > 0`.
    pub lambda: f64,
    /// Non-linearity floor `κ ∈ (0, 1/4]`.
    pub kappa: f64,
    /// Gradient-norm threshold per sample: a fit on `n` samples stops once
    /// `‖∇L‖ ≤ tol · (1 + n)`.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for MleConfig {
    fn default() -> Self {
        MleConfig {
            lambda: 1.0,
            kappa: default_kappa(),
            tol: 1e-8,
            max_iters: 200,
        }
    }
}

impl MleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::config("lambda must be finite and > 0"));
        }
        if !(self.kappa > 0.0 && self.kappa <= 0.25) {
            return Err(Error::config("kappa must lie in (0, 0.25]"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::config("tol must be > 0"));
        }
        if self.max_iters == 0 {
            return Err(Error::config("max_iters must be >= 1"));
        }
        Ok(())
    }

    pub fn tolerance_for(&self, n: usize) -> f64 {
        self.tol * (1.0 + n as f64)
    }
}

/// `log(1 + eˣ)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `L(θ) = −Σ [y log σ(θᵀz) + (1−y) log σ(−θᵀz)] + (λ/2)‖θ‖²`.
pub fn neg_log_likelihood<S: Borrow<PreferenceSample>>(
    theta: &Vector,
    samples: &[S],
    cfg: &MleConfig,
) -> f64 {
    let data: f64 = samples
        .iter()
        .map(|s| {
            let s = s.borrow();
            let t = theta.dot(&s.z);
            if s.y {
                softplus(-t)
            } else {
                softplus(t)
            }
        })
        .sum();
    data + 0.5 * cfg.lambda * theta.norm_squared()
}

/// `∇L(θ) = Σ (σ(θᵀz) − y) z + λθ`.
pub fn nll_gradient<S: Borrow<PreferenceSample>>(
    theta: &Vector,
    samples: &[S],
    cfg: &MleConfig,
) -> Vector {
    let mut g = theta * cfg.lambda;
    for s in samples {
        let s = s.borrow();
        let r = sigmoid(theta.dot(&s.z)) - s.label();
        g.axpy(r, &s.z, 1.0);
    }
    g
}

/// `Σ σ'(θᵀz) z zᵀ + λ I`.
fn nll_hessian<S: Borrow<PreferenceSample>>(
    theta: &Vector,
    samples: &[S],
    cfg: &MleConfig,
) -> DMatrix<f64> {
    let d = theta.len();
    let mut h = DMatrix::identity(d, d) * cfg.lambda;
    for s in samples {
        let s = s.borrow();
        let w = sigmoid_slope(theta.dot(&s.z));
        h.ger(w, &s.z, &s.z, 1.0);
    }
    h
}

/// Diagnostics of one solver run.
#[derive(Debug, Clone)]
pub struct FitTrace {
    pub theta: Vector,
    pub iterations: usize,
    pub grad_norm: f64,
    /// Objective value at the start and after every accepted step.
    pub objective: Vec<f64>,
}

/// Minimiser of [`neg_log_likelihood`].
pub fn fit_mle<S: Borrow<PreferenceSample>>(
    samples: &[S],
    dim: usize,
    cfg: &MleConfig,
    warm_start: Option<&Vector>,
) -> Result<Vector> {
    fit_mle_traced(samples, dim, cfg, warm_start).map(|t| t.theta)
}

/// Damped Newton with Armijo backtracking. If the Hessian cannot be
/// factored the step falls back to gradient descent with step
/// `1 / (λ + Σ‖z‖²/4)`.
pub fn fit_mle_traced<S: Borrow<PreferenceSample>>(
    samples: &[S],
    dim: usize,
    cfg: &MleConfig,
    warm_start: Option<&Vector>,
) -> Result<FitTrace> {
    cfg.validate()?;
    if let Some(s) = samples.first() {
        if s.borrow().z.len() != dim {
            return Err(Error::contract(format!(
                "samples have dimension {}, expected {dim}",
                s.borrow().z.len()
            )));
        }
    }
    let mut theta = match warm_start {
        Some(w) if w.len() == dim => w.clone(),
        Some(w) => {
            return Err(Error::contract(format!(
                "warm start has dimension {}, expected {dim}",
                w.len()
            )))
        }
        None => Vector::zeros(dim),
    };
    let tol = cfg.tolerance_for(samples.len());
    let lipschitz = cfg.lambda
        + 0.25
            * samples
                .iter()
                .map(|s| s.borrow().z.norm_squared())
                .sum::<f64>();

    let mut f = neg_log_likelihood(&theta, samples, cfg);
    let mut objective = vec![f];
    let mut grad_norm = f64::INFINITY;
    for iter in 0..cfg.max_iters {
        let g = nll_gradient(&theta, samples, cfg);
        grad_norm = g.norm();
        if grad_norm <= tol {
            return Ok(FitTrace {
                theta,
                iterations: iter,
                grad_norm,
                objective,
            });
        }
        let step = match Cholesky::new(nll_hessian(&theta, samples, cfg)) {
            Some(ch) => -ch.solve(&g),
            None => &g * (-1.0 / lipschitz),
        };
        let slope = g.dot(&step);
        let mut scale = 1.0;
        let mut accepted = None;
        // Once the predicted decrease is at the objective's round-off level
        // Armijo cannot discriminate and would accept vanishing steps; the
        // undamped Newton step is taken instead.
        if -slope <= ROUNDOFF_DECREMENT * (1.0 + f.abs()) {
            let cand = &theta + &step;
            let fc = neg_log_likelihood(&cand, samples, cfg);
            accepted = Some((cand, fc));
        }
        for _ in 0..if accepted.is_some() { 0 } else { MAX_HALVINGS } {
            let cand = &theta + &step * scale;
            let fc = neg_log_likelihood(&cand, samples, cfg);
            if fc <= f + ARMIJO_C * scale * slope {
                accepted = Some((cand, fc));
                break;
            }
            scale *= 0.5;
        }
        let (cand, fc) = match accepted {
            Some(x) => x,
            None => {
                // Near the optimum the predicted decrease sits below the
                // objective's round-off; a full step is still safe if it does
                // not measurably increase L.
                let cand = &theta + &step;
                let fc = neg_log_likelihood(&cand, samples, cfg);
                if fc > f {
                    return Err(Error::Convergence {
                        iterations: iter,
                        grad_norm,
                    });
                }
                (cand, fc)
            }
        };
        theta = cand;
        f = fc;
        objective.push(f);
    }
    let g = nll_gradient(&theta, samples, cfg);
    grad_norm = grad_norm.min(g.norm());
    if g.norm() <= tol {
        return Ok(FitTrace {
            theta,
            iterations: cfg.max_iters,
            grad_norm: g.norm(),
            objective,
        });
    }
    Err(Error::Convergence {
        iterations: cfg.max_iters,
        grad_norm,
    })
}

/// Regularised Gramian with its sample count.
#[derive(Debug, Clone, PartialEq)]
pub struct GramianState {
    pub m: SymMat,
    pub n_samples: usize,
    pub lambda: f64,
    pub kappa: f64,
}

impl GramianState {
    /// `(λ/κ) I` with no samples.
    pub fn prior(dim: usize, cfg: &MleConfig) -> Self {
        GramianState {
            m: SymMat::scaled_identity(dim, cfg.lambda / cfg.kappa),
            n_samples: 0,
            lambda: cfg.lambda,
            kappa: cfg.kappa,
        }
    }

    pub fn dim(&self) -> usize {
        self.m.dim()
    }

    pub fn add(&mut self, z: &Vector) {
        self.m.add_outer(z);
        self.n_samples += 1;
    }

    pub fn lambda_min(&self) -> Result<f64> {
        linalg::min_eigenvalue(&self.m)
    }
}

/// `M = (λ/κ) I + Σ z zᵀ`.
pub fn build_gramian<S: Borrow<PreferenceSample>>(
    samples: &[S],
    dim: usize,
    cfg: &MleConfig,
) -> GramianState {
    let mut g = GramianState::prior(dim, cfg);
    for s in samples {
        g.add(&s.borrow().z);
    }
    g
}

/// Samples of several users concatenated in the given order.
pub fn concat_samples<'a>(datasets: &[&'a UserDataset]) -> Vec<&'a PreferenceSample> {
    datasets.iter().flat_map(|d| d.samples.iter()).collect()
}

/// Single MLE and Gramian over the union of the given users' data.
pub fn fit_aggregated(
    datasets: &[&UserDataset],
    dim: usize,
    cfg: &MleConfig,
) -> Result<(Vector, GramianState)> {
    if datasets.is_empty() {
        return Err(Error::contract("aggregation needs at least one user"));
    }
    let samples = concat_samples(datasets);
    let theta = fit_mle(&samples, dim, cfg, None)?;
    Ok((theta, build_gramian(&samples, dim, cfg)))
}
