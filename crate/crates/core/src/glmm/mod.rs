//! Two-level logistic regression with random effects over provisional-ability
//! intervals, fitted by the Laplace approximation.
//!
//! Random effects are written `u_j = Λ v_j` with `v_j ~ N(0, I)` and `Λ` the
//! lower Cholesky factor of their covariance, so the covariance stays positive
//! semidefinite for any parameter value and `Λ = 0` reduces the model exactly
//! to ordinary logistic regression. For a given `Λ`, fixed effects and
//! conditional modes are found jointly by penalized IRLS; the Laplace
//! log-likelihood at that solution is then maximized over `Λ` with
//! Nelder-Mead.

pub mod oracle;

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{bernoulli_loglik, inv_logit, WaldTest};
use crate::model::{self, ModelName, RandomTerm, Term};
use crate::optim::NelderMead;
use crate::prep::ItemFrame;
use crate::stats;

/// Latent-scale residual variance of the logistic distribution.
pub const LOGISTIC_VARIANCE: f64 = PI * PI / 3.0;

pub fn icc(tau2: f64) -> f64 {
    tau2 / (tau2 + LOGISTIC_VARIANCE)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlmmSpec {
    pub name: ModelName,
    pub fixed: Vec<Term>,
    pub random: Vec<RandomTerm>,
}

impl GlmmSpec {
    pub fn named(name: ModelName) -> Result<Self> {
        if !name.is_multilevel() {
            return Err(Error::Config(format!("{name} is a single-level model")));
        }
        Ok(GlmmSpec {
            name,
            fixed: name.fixed_terms(),
            random: name.random_terms(),
        })
    }

    pub fn q(&self) -> usize {
        self.random.len()
    }

    /// Free parameters of the Cholesky factor.
    pub fn n_cov_params(&self) -> usize {
        self.q() * (self.q() + 1) / 2
    }
}

/// Lower Cholesky factor of a 1x1 or 2x2 covariance, stored as
/// `[l00]` or `[l00, l10, l11]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Lambda {
    l00: f64,
    l10: f64,
    l11: f64,
    q: usize,
}

impl Lambda {
    pub(crate) fn from_params(params: &[f64]) -> Self {
        match params.len() {
            1 => Lambda { l00: params[0], l10: 0.0, l11: 0.0, q: 1 },
            3 => Lambda { l00: params[0], l10: params[1], l11: params[2], q: 2 },
            n => panic!("covariance parameter vector of length {n}"),
        }
    }

    /// `Λ' z` for a row with random-effects design `z`.
    #[inline]
    pub(crate) fn loadings(&self, z: &[f64; 2]) -> [f64; 2] {
        [self.l00 * z[0] + self.l10 * z[1], self.l11 * z[1]]
    }

    pub(crate) fn covariance(&self) -> (f64, f64, f64) {
        let tau0 = self.l00 * self.l00;
        let tau10 = self.l00 * self.l10;
        let tau1 = self.l10 * self.l10 + self.l11 * self.l11;
        (tau0, tau1, tau10)
    }
}

/// Frame data laid out for repeated likelihood evaluation.
#[derive(Debug, Clone)]
pub(crate) struct Problem {
    /// Row-major `n x p` fixed-effects design.
    pub(crate) x: Vec<f64>,
    pub(crate) p: usize,
    pub(crate) y: Vec<f64>,
    /// Random-effects design per row; only the first `q` entries are used.
    pub(crate) z: Vec<[f64; 2]>,
    pub(crate) q: usize,
    /// Row indices of each level-2 cluster, in interval order.
    pub(crate) clusters: Vec<Vec<usize>>,
    pub(crate) names: Vec<String>,
    pub(crate) g: Vec<f64>,
}

impl Problem {
    pub(crate) fn new(frame: &ItemFrame, spec: &GlmmSpec) -> Result<Self> {
        let (xm, names) = model::design_matrix(frame, &spec.fixed)?;
        let (n, p) = xm.shape();
        let r = model::rank(&xm);
        if r < p {
            return Err(Error::RankDeficient { rank: r, cols: p });
        }
        if spec.q() == 0 || spec.q() > 2 {
            return Err(Error::Config(format!(
                "{} needs one or two random effects",
                spec.name
            )));
        }
        let mut x = Vec::with_capacity(n * p);
        for i in 0..n {
            x.extend(xm.row(i).iter());
        }
        let z = frame
            .rows
            .iter()
            .map(|row| {
                let mut zi = [0.0; 2];
                for (k, term) in spec.random.iter().enumerate() {
                    zi[k] = match term {
                        RandomTerm::Intercept => 1.0,
                        RandomTerm::G => row.g as f64,
                    };
                }
                zi
            })
            .collect();
        let mut by_interval: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, row) in frame.rows.iter().enumerate() {
            by_interval.entry(row.j).or_default().push(i);
        }
        Ok(Problem {
            x,
            p,
            y: model::response(frame),
            z,
            q: spec.q(),
            clusters: by_interval.into_values().collect(),
            names,
            g: frame.rows.iter().map(|r| r.g as f64).collect(),
        })
    }

    #[inline]
    fn xrow(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    fn n(&self) -> usize {
        self.y.len()
    }

    fn linear_fixed(&self, beta: &[f64]) -> Vec<f64> {
        (0..self.n())
            .map(|i| self.xrow(i).iter().zip(beta).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Penalized log-likelihood `Σ ℓ_i − ½ Σ |v_j|²`.
    fn penalized(&self, lam: &Lambda, beta: &[f64], v: &[f64]) -> f64 {
        let q = self.q;
        let fixed = self.linear_fixed(beta);
        let mut total = 0.0;
        for (j, rows) in self.clusters.iter().enumerate() {
            let vj = &v[j * q..(j + 1) * q];
            for &i in rows {
                let a = lam.loadings(&self.z[i]);
                let eta = fixed[i] + (0..q).map(|k| a[k] * vj[k]).sum::<f64>();
                total += bernoulli_loglik(self.y[i], eta);
            }
            total -= 0.5 * vj.iter().map(|t| t * t).sum::<f64>();
        }
        total
    }
}

/// Symmetric 2x2 matrix `[[a, b], [b, c]]`. Intercept-only models use the
/// leading entry and keep a unit second diagonal.
#[derive(Debug, Clone, Copy)]
struct Sym2 {
    a: f64,
    b: f64,
    c: f64,
}

impl Sym2 {
    fn det(&self) -> f64 {
        self.a * self.c - self.b * self.b
    }

    fn is_positive_definite(&self) -> bool {
        self.a > 0.0 && self.det() > 0.0
    }

    fn inverse(&self) -> Sym2 {
        let d = self.det();
        Sym2 {
            a: self.c / d,
            b: -self.b / d,
            c: self.a / d,
        }
    }

    fn apply(&self, v: [f64; 2]) -> [f64; 2] {
        [self.a * v[0] + self.b * v[1], self.b * v[0] + self.c * v[1]]
    }
}

/// Blocks of the negative Hessian and the gradient of the penalized
/// log-likelihood at `(beta, v)`.
struct Blocks {
    h_bb: DMatrix<f64>,
    g_b: DVector<f64>,
    /// `I + Σ w a a'` per cluster.
    d: Vec<Sym2>,
    /// `Σ w x a'` per cluster, `p` rows each.
    b: Vec<[f64; 2]>,
    g_v: Vec<[f64; 2]>,
}

#[inline]
fn cluster_v(v: &[f64], j: usize, q: usize) -> [f64; 2] {
    if q == 2 {
        [v[2 * j], v[2 * j + 1]]
    } else {
        [v[j], 0.0]
    }
}

fn blocks(pr: &Problem, lam: &Lambda, beta: &[f64], v: &[f64]) -> Blocks {
    let (p, q) = (pr.p, pr.q);
    let fixed = pr.linear_fixed(beta);
    let n_clusters = pr.clusters.len();
    let mut h = vec![0.0; p * p];
    let mut g_b = DVector::zeros(p);
    let mut d = Vec::with_capacity(n_clusters);
    let mut b = vec![[0.0; 2]; n_clusters * p];
    let mut g_v = Vec::with_capacity(n_clusters);
    for (j, rows) in pr.clusters.iter().enumerate() {
        let vj = cluster_v(v, j, q);
        let mut dj = Sym2 { a: 1.0, b: 0.0, c: 1.0 };
        let mut gj = [-vj[0], -vj[1]];
        let bj = &mut b[j * p..(j + 1) * p];
        for &i in rows {
            let a = lam.loadings(&pr.z[i]);
            let eta = fixed[i] + a[0] * vj[0] + a[1] * vj[1];
            let mu = inv_logit(eta);
            let w = mu * (1.0 - mu);
            let r = pr.y[i] - mu;
            let xi = pr.xrow(i);
            for r1 in 0..p {
                let wx = w * xi[r1];
                g_b[r1] += xi[r1] * r;
                for c1 in 0..=r1 {
                    h[r1 * p + c1] += wx * xi[c1];
                }
                bj[r1][0] += wx * a[0];
                bj[r1][1] += wx * a[1];
            }
            gj[0] += a[0] * r;
            gj[1] += a[1] * r;
            dj.a += w * a[0] * a[0];
            dj.b += w * a[0] * a[1];
            dj.c += w * a[1] * a[1];
        }
        d.push(dj);
        g_v.push(gj);
    }
    let h_bb = DMatrix::from_fn(p, p, |r, c| if c <= r { h[r * p + c] } else { h[c * p + r] });
    Blocks { h_bb, g_b, d, b, g_v }
}

/// `S = H_bb − Σ_j B_j D_j⁻¹ B_j'` and, given `rhs`, `rhs − Σ_j B_j D_j⁻¹ g_j`.
fn schur(pr: &Problem, bl: &Blocks, dinv: &[Sym2]) -> (DMatrix<f64>, DVector<f64>) {
    let p = pr.p;
    let mut s = bl.h_bb.clone();
    let mut rhs = bl.g_b.clone();
    for (j, di) in dinv.iter().enumerate() {
        let bj = &bl.b[j * p..(j + 1) * p];
        let bd: Vec<[f64; 2]> = bj.iter().map(|row| di.apply(*row)).collect();
        let dg = di.apply(bl.g_v[j]);
        for r in 0..p {
            rhs[r] -= bj[r][0] * dg[0] + bj[r][1] * dg[1];
            for c in 0..p {
                s[(r, c)] -= bd[r][0] * bj[c][0] + bd[r][1] * bj[c][1];
            }
        }
    }
    (s, rhs)
}

#[derive(Debug, Clone)]
pub(crate) struct InnerSolution {
    pub(crate) beta: Vec<f64>,
    pub(crate) v: Vec<f64>,
    /// Laplace approximation to the marginal log-likelihood.
    pub(crate) loglik: f64,
    /// Max-abs penalized score at the solution.
    pub(crate) gradient: f64,
    pub(crate) converged: bool,
    /// Inverse Schur complement: approximate covariance of the fixed effects.
    pub(crate) fixed_cov: Option<DMatrix<f64>>,
}

const INNER_MAX_ITER: usize = 100;
const INNER_TOL: f64 = 1e-6;

/// Penalized IRLS at fixed `Λ`. With `fix_beta`, only the conditional modes
/// move.
pub(crate) fn pirls(
    pr: &Problem,
    lam: &Lambda,
    beta0: &[f64],
    v0: &[f64],
    fix_beta: bool,
) -> InnerSolution {
    let (p, q) = (pr.p, pr.q);
    let n_clusters = pr.clusters.len();
    let mut beta = beta0.to_vec();
    let mut v = v0.to_vec();
    let mut obj = pr.penalized(lam, &beta, &v);

    for _ in 0..INNER_MAX_ITER {
        let bl = blocks(pr, lam, &beta, &v);
        if max_gradient(&bl, fix_beta) < 1e-9 {
            break;
        }
        let dinv: Vec<Sym2> = bl.d.iter().map(Sym2::inverse).collect();
        let d_beta = if fix_beta {
            DVector::zeros(p)
        } else {
            let (s, rhs) = schur(pr, &bl, &dinv);
            match s.clone().cholesky() {
                Some(c) => c.solve(&rhs),
                None => match s.lu().solve(&rhs) {
                    Some(x) => x,
                    None => break,
                },
            }
        };
        let mut d_v = Vec::with_capacity(v.len());
        for j in 0..n_clusters {
            let bj = &bl.b[j * p..(j + 1) * p];
            let mut r = bl.g_v[j];
            for k in 0..p {
                r[0] -= bj[k][0] * d_beta[k];
                r[1] -= bj[k][1] * d_beta[k];
            }
            let step = dinv[j].apply(r);
            d_v.extend_from_slice(&step[..q]);
        }

        let mut scale = 1.0;
        let mut moved = false;
        for _ in 0..30 {
            let nb: Vec<f64> = beta.iter().zip(d_beta.iter()).map(|(b, d)| b + scale * d).collect();
            let nv: Vec<f64> = v.iter().zip(&d_v).map(|(a, d)| a + scale * d).collect();
            let cand = pr.penalized(lam, &nb, &nv);
            if cand >= obj - 1e-13 * obj.abs().max(1.0) {
                let change = nb
                    .iter()
                    .zip(&beta)
                    .chain(nv.iter().zip(&v))
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                beta = nb;
                v = nv;
                obj = cand;
                moved = change > 1e-13;
                break;
            }
            scale *= 0.5;
        }
        if !moved {
            break;
        }
    }

    let bl = blocks(pr, lam, &beta, &v);
    let gradient = max_gradient(&bl, fix_beta);
    let ok = bl.d.iter().all(Sym2::is_positive_definite);
    let logdet: f64 = bl.d.iter().map(|d| d.det().ln()).sum();
    let dinv: Vec<Sym2> = bl.d.iter().map(Sym2::inverse).collect();
    let (s, _) = schur(pr, &bl, &dinv);
    let loglik = obj - 0.5 * logdet;
    InnerSolution {
        converged: ok && gradient < INNER_TOL && loglik.is_finite(),
        beta,
        v,
        loglik,
        gradient,
        fixed_cov: s.try_inverse(),
    }
}

fn max_gradient(bl: &Blocks, fix_beta: bool) -> f64 {
    let gb = if fix_beta { 0.0 } else { bl.g_b.amax() };
    bl.g_v
        .iter()
        .map(|g| g[0].abs().max(g[1].abs()))
        .fold(gb, f64::max)
}

/// Laplace log-likelihood at fixed `beta` and Cholesky parameters; only the
/// conditional modes are optimized.
pub fn laplace_loglik(frame: &ItemFrame, spec: &GlmmSpec, params: &GlmmParams) -> Result<f64> {
    let pr = Problem::new(frame, spec)?;
    params.check(&pr)?;
    let lam = Lambda::from_params(&params.cholesky);
    let v0 = vec![0.0; pr.clusters.len() * pr.q];
    Ok(pirls(&pr, &lam, &params.beta, &v0, true).loglik)
}

/// Fixed effects and Cholesky-factor parameters of a two-level model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmmParams {
    pub beta: Vec<f64>,
    pub cholesky: Vec<f64>,
}

impl GlmmParams {
    fn check(&self, pr: &Problem) -> Result<()> {
        if self.beta.len() != pr.p || self.cholesky.len() != pr.q * (pr.q + 1) / 2 {
            return Err(Error::Config(format!(
                "parameter shape ({}, {}) does not match model ({}, {})",
                self.beta.len(),
                self.cholesky.len(),
                pr.p,
                pr.q * (pr.q + 1) / 2
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlmmOptions {
    /// Additional Nelder-Mead runs from random starting factors.
    pub restarts: usize,
    pub max_evaluations: usize,
    /// Tolerance on the spread of log-likelihood values over the simplex.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GlmmOptions {
    fn default() -> Self {
        GlmmOptions {
            restarts: 3,
            max_evaluations: 500,
            tolerance: 1e-6,
            seed: 0x9e37_79b9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmmFit {
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub cholesky: Vec<f64>,
    pub tau0_sq: f64,
    /// Random-slope variance and covariance; absent for intercept-only models.
    pub tau1_sq: Option<f64>,
    pub tau10: Option<f64>,
    pub loglik: f64,
    pub deviance: f64,
    pub aic: f64,
    pub bic: f64,
    pub icc: f64,
    pub r2_marginal: f64,
    pub r2_conditional: f64,
    pub converged: bool,
    /// A variance component sits at zero.
    pub boundary: bool,
    pub n_level1: usize,
    pub n_level2: usize,
    pub evaluations: usize,
    /// Largest penalized score component at the inner solution.
    pub inner_gradient: f64,
}

impl GlmmFit {
    pub fn coefficient(&self, term: &str) -> Option<(f64, f64)> {
        let k = self.names.iter().position(|n| n == term)?;
        Some((self.coefficients[k], self.std_errors[k]))
    }

    pub fn wald(&self, term: &str) -> Result<WaldTest> {
        let (est, se) = self
            .coefficient(term)
            .ok_or_else(|| Error::UnknownTerm(term.to_string()))?;
        Ok(WaldTest::new(est, se))
    }

    /// Covariance parameters as `GlmmParams`, for re-evaluation.
    pub fn params(&self) -> GlmmParams {
        GlmmParams {
            beta: self.coefficients.clone(),
            cholesky: self.cholesky.clone(),
        }
    }
}

pub fn fit_glmm(frame: &ItemFrame, spec: &GlmmSpec) -> Result<GlmmFit> {
    fit_glmm_with(frame, spec, &GlmmOptions::default())
}

pub fn fit_glmm_with(frame: &ItemFrame, spec: &GlmmSpec, opts: &GlmmOptions) -> Result<GlmmFit> {
    let pr = Problem::new(frame, spec)?;
    let n_cov = spec.n_cov_params();
    let mut warm_beta = vec![0.0; pr.p];
    let mut warm_v = vec![0.0; pr.clusters.len() * pr.q];

    let nm = NelderMead {
        max_evaluations: opts.max_evaluations,
        // The simplex tracks -2 log-likelihood.
        f_tolerance: 2.0 * opts.tolerance,
        x_tolerance: 1e-5,
        initial_step: 0.25,
    };

    let mut starts: Vec<Vec<f64>> = vec![match n_cov {
        1 => vec![1.0],
        _ => vec![1.0, 0.0, 1.0],
    }];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.restarts {
        starts.push(match n_cov {
            1 => vec![rng.random_range(0.1..2.0)],
            _ => vec![
                rng.random_range(0.1..2.0),
                rng.random_range(-0.5..0.5),
                rng.random_range(0.1..2.0),
            ],
        });
    }

    let mut best: Option<(crate::optim::Minimum, usize)> = None;
    let mut total_evals = 0;
    for start in &starts {
        let m = nm.minimize(
            |theta| {
                let lam = Lambda::from_params(theta);
                let sol = pirls(&pr, &lam, &warm_beta, &warm_v, false);
                if sol.loglik.is_finite() {
                    warm_beta.clone_from(&sol.beta);
                    warm_v.clone_from(&sol.v);
                }
                -2.0 * sol.loglik
            },
            start,
        );
        total_evals += m.evaluations;
        let better = best.as_ref().is_none_or(|(b, _)| m.value < b.value);
        if better {
            best = Some((m, total_evals));
        }
    }
    let (opt, _) = best.expect("at least one start");
    // A simplex stretched along a flat ridge still counts once the
    // log-likelihood itself has settled.
    if !opt.converged && !(opt.spread <= nm.f_tolerance) {
        return Err(Error::NonConvergence {
            evaluations: opt.evaluations,
        });
    }

    // Re-solve from a cold start so the result does not depend on the search path.
    let lam = Lambda::from_params(&opt.x);
    let sol = pirls(
        &pr,
        &lam,
        &vec![0.0; pr.p],
        &vec![0.0; pr.clusters.len() * pr.q],
        false,
    );
    Ok(summarize(&pr, spec, lam, sol, total_evals))
}

/// Fit with the Cholesky parameters held fixed.
pub fn fit_glmm_fixed_cov(frame: &ItemFrame, spec: &GlmmSpec, cholesky: &[f64]) -> Result<GlmmFit> {
    let pr = Problem::new(frame, spec)?;
    if cholesky.len() != spec.n_cov_params() {
        return Err(Error::Config("wrong number of covariance parameters".into()));
    }
    let lam = Lambda::from_params(cholesky);
    let sol = pirls(
        &pr,
        &lam,
        &vec![0.0; pr.p],
        &vec![0.0; pr.clusters.len() * pr.q],
        false,
    );
    Ok(summarize(&pr, spec, lam, sol, 1))
}

fn summarize(pr: &Problem, spec: &GlmmSpec, lam: Lambda, sol: InnerSolution, evaluations: usize) -> GlmmFit {
    let (tau0, tau1, tau10) = lam.covariance();
    let q = spec.q();
    let n = pr.n() as f64;
    let mean_g = pr.g.iter().sum::<f64>() / n;
    let mean_g2 = pr.g.iter().map(|g| g * g).sum::<f64>() / n;
    let slope_g = spec.random.get(1) == Some(&RandomTerm::G);
    let tau_total = if q == 2 && slope_g {
        tau0 + tau1 * mean_g2 + 2.0 * tau10 * mean_g
    } else {
        tau0
    }
    .max(0.0);

    let fixed = pr.linear_fixed(&sol.beta);
    let var_f = stats::sample_variance(&fixed).unwrap_or(0.0);
    let denom = var_f + tau_total + LOGISTIC_VARIANCE;

    let std_errors = match &sol.fixed_cov {
        Some(c) => (0..pr.p).map(|k| c[(k, k)].max(0.0).sqrt()).collect(),
        None => vec![f64::NAN; pr.p],
    };
    let k = (pr.p + spec.n_cov_params()) as f64;
    let deviance = -2.0 * sol.loglik;
    let boundary = tau0 < 1e-6 || (q == 2 && (lam.l11.abs() < 1e-3 || tau1 < 1e-6));
    let finite = sol.beta.iter().all(|b| b.is_finite()) && std_errors.iter().all(|s: &f64| s.is_finite());

    GlmmFit {
        names: pr.names.clone(),
        coefficients: sol.beta,
        std_errors,
        cholesky: match q {
            1 => vec![lam.l00],
            _ => vec![lam.l00, lam.l10, lam.l11],
        },
        tau0_sq: tau0,
        tau1_sq: (q == 2).then_some(tau1),
        tau10: (q == 2).then_some(tau10),
        loglik: sol.loglik,
        deviance,
        aic: deviance + 2.0 * k,
        bic: deviance + k * n.ln(),
        icc: icc(tau_total),
        r2_marginal: var_f / denom,
        r2_conditional: (var_f + tau_total) / denom,
        converged: sol.converged && finite,
        boundary,
        n_level1: pr.n(),
        n_level2: pr.clusters.len(),
        evaluations,
        inner_gradient: sol.gradient,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IccSummary {
    pub n_items: usize,
    pub n_failed: usize,
    pub mean: f64,
    pub variance: Option<f64>,
    /// Share of items with ICC above 0.2.
    pub share_above_0_2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IccScreen {
    pub rho: BTreeMap<String, f64>,
    pub failed: Vec<String>,
    pub summary: IccSummary,
}

/// Fit the empty model to every frame and report the interval ICC.
pub fn icc_screen(frames: &BTreeMap<String, ItemFrame>) -> IccScreen {
    let spec = GlmmSpec::named(ModelName::Empty).expect("EMPTY is multilevel");
    let results: Vec<(String, Option<f64>)> = frames
        .par_iter()
        .map(|(id, frame)| {
            let rho = fit_glmm(frame, &spec).ok().filter(|f| f.converged).map(|f| f.icc);
            (id.clone(), rho)
        })
        .collect();
    let mut rho = BTreeMap::new();
    let mut failed = Vec::new();
    for (id, r) in results {
        match r {
            Some(r) => {
                rho.insert(id, r);
            }
            None => failed.push(id),
        }
    }
    let values: Vec<f64> = rho.values().copied().collect();
    let summary = IccSummary {
        n_items: values.len(),
        n_failed: failed.len(),
        mean: if values.is_empty() { f64::NAN } else { stats::mean(&values) },
        variance: stats::sample_variance(&values),
        share_above_0_2: if values.is_empty() {
            f64::NAN
        } else {
            values.iter().filter(|&&r| r > 0.2).count() as f64 / values.len() as f64
        },
    };
    IccScreen { rho, failed, summary }
}

#[cfg(test)]
mod tests;
