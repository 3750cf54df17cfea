//! Three-parameter logistic (3PL) item response model.
//!
//! Probabilities, log-likelihoods, Fisher information and the two ability
//! estimators used by the adaptive engine: Newton-Raphson maximum likelihood
//! with step-halving, and expected a posteriori on a fixed equally spaced grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A calibrated dichotomous item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: String,
    /// Discrimination.
    pub a: f64,
    /// Difficulty on the logit scale.
    pub b: f64,
    /// Pseudo-guessing lower asymptote.
    pub c: f64,
    /// Content-domain label.
    pub category: u8,
}

impl Item {
    pub fn new(id: impl Into<String>, a: f64, b: f64, c: f64, category: u8) -> Result<Self> {
        let item = Item {
            id: id.into(),
            a,
            b,
            c,
            category,
        };
        item.validate()?;
        Ok(item)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: &str| {
            Err(Error::InvalidItem {
                id: self.id.clone(),
                reason: reason.to_string(),
            })
        };
        if !(self.a.is_finite() && self.a > 0.0) {
            return fail("discrimination must be finite and positive");
        }
        if !self.b.is_finite() {
            return fail("difficulty must be finite");
        }
        if !(self.c >= 0.0 && self.c < 1.0) {
            return fail("guessing must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IrtConfig {
    /// Logistic scaling constant.
    pub d: f64,
    pub theta_min: f64,
    pub theta_max: f64,
    /// Number of equally spaced EAP quadrature nodes on `[theta_min, theta_max]`.
    pub quad_points: usize,
}

impl Default for IrtConfig {
    fn default() -> Self {
        IrtConfig {
            d: 1.0,
            theta_min: -4.0,
            theta_max: 4.0,
            quad_points: 81,
        }
    }
}

impl IrtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d.is_finite() && self.d > 0.0) {
            return Err(Error::Config("scaling factor D must be positive".into()));
        }
        if !(self.theta_min < self.theta_max) {
            return Err(Error::Config("theta_min must be below theta_max".into()));
        }
        if self.quad_points < 2 {
            return Err(Error::Config("quad_points must be at least 2".into()));
        }
        Ok(())
    }

    /// Equally spaced nodes from `theta_min` to `theta_max` inclusive.
    pub fn grid(&self) -> impl Iterator<Item = f64> + '_ {
        let step = (self.theta_max - self.theta_min) / (self.quad_points - 1) as f64;
        (0..self.quad_points).map(move |k| self.theta_min + k as f64 * step)
    }

    fn clamp(&self, theta: f64) -> f64 {
        theta.clamp(self.theta_min, self.theta_max)
    }
}

/// One scored administration: the item and whether it was answered correctly.
pub type Response<'a> = (&'a Item, bool);

#[inline]
fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Logistic part `L`, `P = c + (1 - c) L` and `1 - P`, each computed without
/// cancellation.
#[inline]
fn components(theta: f64, item: &Item, cfg: &IrtConfig) -> (f64, f64, f64) {
    let z = cfg.d * item.a * (theta - item.b);
    let l = logistic(z);
    let p = item.c + (1.0 - item.c) * l;
    let q = (1.0 - item.c) * logistic(-z);
    (l, p, q)
}

pub fn prob_correct(theta: f64, item: &Item, cfg: &IrtConfig) -> f64 {
    components(theta, item, cfg).1
}

pub fn log_likelihood(theta: f64, responses: &[Response<'_>], cfg: &IrtConfig) -> f64 {
    responses
        .iter()
        .map(|&(item, x)| {
            let (_, p, q) = components(theta, item, cfg);
            if x {
                p.ln()
            } else {
                q.ln()
            }
        })
        .sum()
}

/// First derivative of the log-likelihood in theta.
pub fn score(theta: f64, responses: &[Response<'_>], cfg: &IrtConfig) -> f64 {
    responses
        .iter()
        .map(|&(item, x)| {
            let (l, p, q) = components(theta, item, cfg);
            let dp = cfg.d * item.a * (1.0 - item.c) * l * (1.0 - l);
            if x {
                dp / p
            } else {
                -dp / q
            }
        })
        .sum()
}

fn second_derivative(theta: f64, responses: &[Response<'_>], cfg: &IrtConfig) -> f64 {
    responses
        .iter()
        .map(|&(item, x)| {
            let (l, p, q) = components(theta, item, cfg);
            let da = cfg.d * item.a;
            let dp = da * (1.0 - item.c) * l * (1.0 - l);
            let d2p = da * dp * (1.0 - 2.0 * l);
            if x {
                (d2p * p - dp * dp) / (p * p)
            } else {
                -(d2p * q + dp * dp) / (q * q)
            }
        })
        .sum()
}

pub fn fisher_information(theta: f64, item: &Item, cfg: &IrtConfig) -> f64 {
    let (l, p, q) = components(theta, item, cfg);
    let da = cfg.d * item.a;
    da * da * l * l * q / p
}

pub fn test_information<'a>(
    theta: f64,
    items: impl IntoIterator<Item = &'a Item>,
    cfg: &IrtConfig,
) -> f64 {
    items
        .into_iter()
        .map(|item| fisher_information(theta, item, cfg))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MleOptions {
    pub start: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub max_halvings: usize,
}

impl Default for MleOptions {
    fn default() -> Self {
        MleOptions {
            start: 0.0,
            tolerance: 1e-6,
            max_iterations: 100,
            max_halvings: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MleEstimate {
    pub theta: f64,
    pub se: f64,
    /// False for boundary-clamped estimates and for runs that hit the
    /// iteration limit.
    pub converged: bool,
    pub iterations: usize,
}

impl MleEstimate {
    pub fn at_boundary(&self, cfg: &IrtConfig) -> bool {
        self.theta <= cfg.theta_min || self.theta >= cfg.theta_max
    }
}

pub fn estimate_mle(responses: &[Response<'_>], cfg: &IrtConfig) -> MleEstimate {
    estimate_mle_with(responses, cfg, &MleOptions::default())
}

pub fn estimate_mle_with(
    responses: &[Response<'_>],
    cfg: &IrtConfig,
    opts: &MleOptions,
) -> MleEstimate {
    let mut theta = cfg.clamp(opts.start);
    if responses.is_empty() {
        return MleEstimate {
            theta,
            se: f64::INFINITY,
            converged: false,
            iterations: 0,
        };
    }
    let nll = |t: f64| -log_likelihood(t, responses, cfg);
    let interior = |t: f64| t > cfg.theta_min && t < cfg.theta_max;

    let mut iterations = 0;
    while iterations < opts.max_iterations {
        let s = score(theta, responses, cfg);
        // Iterate past the reporting tolerance so flat likelihoods still pin theta.
        if s.abs() < 1e-4 * opts.tolerance && interior(theta) {
            break;
        }
        if (theta <= cfg.theta_min && s < 0.0) || (theta >= cfg.theta_max && s > 0.0) {
            break;
        }
        iterations += 1;

        let h = second_derivative(theta, responses, cfg);
        let step = if h < 0.0 {
            -s / h
        } else {
            // Likelihood not locally concave: take a Fisher-scoring step.
            let info = test_information(theta, responses.iter().map(|r| r.0), cfg);
            s / info.max(1e-12)
        };

        let f0 = nll(theta);
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let cand = cfg.clamp(theta + scale * step);
            if nll(cand) <= f0 {
                accepted = Some(cand);
                break;
            }
            scale *= 0.5;
        }
        match accepted {
            Some(next) if (next - theta).abs() > 1e-12 => theta = next,
            Some(next) => {
                theta = next;
                break;
            }
            None => break,
        }
    }

    let s = score(theta, responses, cfg);
    let info = test_information(theta, responses.iter().map(|r| r.0), cfg);
    MleEstimate {
        theta,
        se: 1.0 / info.sqrt(),
        converged: interior(theta) && s.abs() < opts.tolerance,
        iterations,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EapEstimate {
    pub theta: f64,
    /// Posterior standard deviation.
    pub se: f64,
}

/// Posterior mean and SD under a normal prior, by the rectangle rule on the
/// configured equally spaced grid.
pub fn estimate_eap(
    responses: &[Response<'_>],
    cfg: &IrtConfig,
    prior_mean: f64,
    prior_sd: f64,
) -> EapEstimate {
    let log_post: Vec<(f64, f64)> = cfg
        .grid()
        .map(|t| {
            let z = (t - prior_mean) / prior_sd;
            (t, -0.5 * z * z + log_likelihood(t, responses, cfg))
        })
        .collect();
    let max = log_post
        .iter()
        .map(|&(_, lp)| lp)
        .fold(f64::NEG_INFINITY, f64::max);
    let (mut w_sum, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for &(t, lp) in &log_post {
        let w = (lp - max).exp();
        w_sum += w;
        m1 += w * t;
        m2 += w * t * t;
    }
    let mean = m1 / w_sum;
    let var = (m2 / w_sum - mean * mean).max(0.0);
    EapEstimate {
        theta: mean,
        se: var.sqrt(),
    }
}
