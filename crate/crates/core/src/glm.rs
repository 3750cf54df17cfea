//! Single-level logistic regression by iteratively reweighted least squares.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, ModelName, Term};
use crate::prep::ItemFrame;
use crate::stats;

const MAX_ITERATIONS: usize = 50;
const TOLERANCE: f64 = 1e-8;
const MAX_HALVINGS: usize = 30;
const SEPARATION_BOUND: f64 = 15.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlmSpec {
    pub name: ModelName,
    pub terms: Vec<Term>,
}

impl GlmSpec {
    pub fn named(name: ModelName) -> Result<Self> {
        if name.is_multilevel() {
            return Err(Error::Config(format!("{name} is a multilevel model")));
        }
        Ok(GlmSpec {
            name,
            terms: name.fixed_terms(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmFit {
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub deviance: f64,
    pub aic: f64,
    pub bic: f64,
    pub n: usize,
    pub converged: bool,
    pub separation: bool,
    pub iterations: usize,
}

impl GlmFit {
    pub fn coefficient(&self, term: &str) -> Option<(f64, f64)> {
        let k = self.names.iter().position(|n| n == term)?;
        Some((self.coefficients[k], self.std_errors[k]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaldTest {
    pub z: f64,
    pub p_value: f64,
}

impl WaldTest {
    pub fn new(estimate: f64, se: f64) -> Self {
        let z = if estimate == 0.0 { 0.0 } else { estimate / se };
        WaldTest {
            z,
            p_value: stats::two_sided_p(z),
        }
    }

    pub fn significant(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

pub fn wald_test(fit: &GlmFit, term: &str) -> Result<WaldTest> {
    let (est, se) = fit
        .coefficient(term)
        .ok_or_else(|| Error::UnknownTerm(term.to_string()))?;
    Ok(WaldTest::new(est, se))
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub(crate) fn log1pexp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn inv_logit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Bernoulli log-likelihood of `y` under logit-scale predictor `eta`.
#[inline]
pub(crate) fn bernoulli_loglik(y: f64, eta: f64) -> f64 {
    y * eta - log1pexp(eta)
}

pub fn log_likelihood(x: &DMatrix<f64>, y: &[f64], beta: &[f64]) -> f64 {
    let eta = x * DVector::from_column_slice(beta);
    eta.iter().zip(y).map(|(&e, &yi)| bernoulli_loglik(yi, e)).sum()
}

pub fn fit_glm(frame: &ItemFrame, spec: &GlmSpec) -> Result<GlmFit> {
    let (x, names) = model::design_matrix(frame, &spec.terms)?;
    fit_matrix(&x, &model::response(frame), names)
}

/// IRLS on an explicit design matrix.
pub fn fit_matrix(x: &DMatrix<f64>, y: &[f64], names: Vec<String>) -> Result<GlmFit> {
    let (n, p) = x.shape();
    let r = model::rank(x);
    if r < p {
        return Err(Error::RankDeficient { rank: r, cols: p });
    }
    let yv = DVector::from_column_slice(y);

    let mut beta = DVector::zeros(p);
    let mut ll = log_likelihood(x, y, beta.as_slice());
    let mut converged = false;
    let mut iterations = 0;

    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let eta = x * &beta;
        let mu = eta.map(inv_logit);
        let w = mu.map(|m| (m * (1.0 - m)).max(1e-12));
        let info = weighted_crossprod(x, &w);
        let score = x.transpose() * (&yv - &mu);
        let Some(chol) = info.cholesky() else {
            break;
        };
        let step = chol.solve(&score);

        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let cand = &beta + &step * scale;
            let cand_ll = log_likelihood(x, y, cand.as_slice());
            if cand_ll >= ll - 1e-12 * ll.abs().max(1.0) {
                let change = (&cand - &beta).amax();
                beta = cand;
                ll = cand_ll;
                accepted = true;
                if change < TOLERANCE {
                    converged = true;
                }
                break;
            }
            scale *= 0.5;
        }
        if !accepted || converged {
            break;
        }
    }

    let eta = x * &beta;
    let mu = eta.map(inv_logit);
    let w = mu.map(|m| (m * (1.0 - m)).max(1e-300));
    let cov = weighted_crossprod(x, &w)
        .try_inverse()
        .unwrap_or_else(|| DMatrix::from_element(p, p, f64::NAN));
    let std_errors: Vec<f64> = (0..p).map(|k| cov[(k, k)].sqrt()).collect();
    let finite = beta.iter().all(|b| b.is_finite()) && ll.is_finite();
    let separation = !converged && beta.iter().any(|b| b.abs() > SEPARATION_BOUND);

    let deviance = -2.0 * ll;
    Ok(GlmFit {
        names,
        coefficients: beta.iter().copied().collect(),
        std_errors,
        deviance,
        aic: deviance + 2.0 * p as f64,
        bic: deviance + p as f64 * (n as f64).ln(),
        n,
        converged: converged && finite,
        separation,
        iterations,
    })
}

/// `X' diag(w) X`.
pub(crate) fn weighted_crossprod(x: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut xw = x.clone();
    for (mut row, &wi) in xw.row_iter_mut().zip(w.iter()) {
        row *= wi;
    }
    x.transpose() * xw
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prep::FrameRow;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intercept_only(y: &[u8]) -> GlmFit {
        let rows = y
            .iter()
            .map(|&y| FrameRow { y, g: 0, theta_k: 0.0, theta_s: 0.0, j: 1 })
            .collect();
        let frame = ItemFrame::new("i", rows);
        fit_glm(&frame, &GlmSpec { name: ModelName::S1, terms: vec![Term::Intercept] }).unwrap()
    }

    #[test]
    fn intercept_only_logits() {
        let fit = intercept_only(&[1, 0, 1, 0, 1, 0]);
        assert!(fit.coefficients[0].abs() < 1e-8);
        assert!(fit.converged);
        let fit = intercept_only(&[1, 1, 1, 0, 1, 1, 1, 0]);
        assert!((fit.coefficients[0] - 3f64.ln()).abs() < 1e-8);
        assert!((fit.aic - fit.deviance - 2.0).abs() < 1e-12);
        assert!((fit.bic - fit.deviance - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn wald_examples() {
        assert_eq!(WaldTest::new(0.0, 0.3).p_value, 1.0);
        assert!((WaldTest::new(1.959964, 1.0).p_value - 0.05).abs() < 1e-4);
        let fit = intercept_only(&[1, 0, 1, 1]);
        assert!(matches!(wald_test(&fit, "g"), Err(Error::UnknownTerm(_))));
        assert!(wald_test(&fit, "(Intercept)").is_ok());
    }

    #[test]
    fn collinear_design_is_rejected() {
        let rows = (0..20)
            .map(|k| FrameRow { y: (k % 2) as u8, g: 1, theta_k: k as f64, theta_s: 0.0, j: 1 })
            .collect();
        let frame = ItemFrame::new("c", rows);
        let err = fit_glm(&frame, &GlmSpec::named(ModelName::S1).unwrap()).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { .. }));
    }

    #[test]
    fn complete_separation_is_flagged() {
        let rows = (0..40)
            .map(|k| FrameRow {
                y: u8::from(k >= 20),
                g: (k % 2) as u8,
                theta_k: k as f64 / 10.0 - 2.0,
                theta_s: 0.0,
                j: 1,
            })
            .collect();
        let frame = ItemFrame::new("s", rows);
        let fit = fit_glm(&frame, &GlmSpec { name: ModelName::S1, terms: vec![Term::Intercept, Term::ThetaK] }).unwrap();
        assert!(!fit.converged);
        assert!(fit.separation);
    }

    #[test]
    fn score_equations_hold_at_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows = (0..300)
            .map(|_| {
                let t: f64 = rng.random_range(-2.0..2.0);
                let g = rng.random_range(0..2u8);
                let p = inv_logit(-0.3 + 0.8 * t + 0.2 * g as f64);
                FrameRow { y: u8::from(rng.random::<f64>() < p), g, theta_k: t, theta_s: t + rng.random_range(-0.5..0.5), j: 1 }
            })
            .collect();
        let frame = ItemFrame::new("r", rows);
        for name in [ModelName::S1, ModelName::S2, ModelName::S3, ModelName::Mh] {
            let spec = GlmSpec::named(name).unwrap();
            let fit = fit_glm(&frame, &spec).unwrap();
            assert!(fit.converged);
            let (x, _) = model::design_matrix(&frame, &spec.terms).unwrap();
            let y = model::response(&frame);
            let eta = &x * DVector::from_vec(fit.coefficients.clone());
            for col in x.column_iter() {
                let s: f64 = col.iter().zip(eta.iter()).zip(&y).map(|((c, e), yi)| c * (yi - inv_logit(*e))).sum();
                assert!(s.abs() < 1e-6, "{name}: {s}");
            }
        }
    }
}
