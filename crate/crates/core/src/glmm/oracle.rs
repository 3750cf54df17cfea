//! Adaptive Gauss-Hermite evaluation of the two-level marginal likelihood.
//!
//! Slow and restricted to small frames; used to check the Laplace fits.

use nalgebra::{DMatrix, SymmetricEigen};

use super::{GlmmParams, GlmmSpec};
use crate::error::{Error, Result};
use crate::glm::{bernoulli_loglik, inv_logit};
use crate::model::{self, RandomTerm};
use crate::optim::NelderMead;
use crate::prep::ItemFrame;

pub const NODES_Q1: usize = 61;
pub const NODES_Q2: usize = 31;
pub const MAX_CLUSTERS_Q1: usize = 20;
pub const MAX_CLUSTERS_Q2: usize = 10;

/// Gauss-Hermite nodes and weights for `∫ e^{-x²} f(x) dx` (Golub-Welsch).
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jacobi = DMatrix::zeros(n, n);
    for k in 1..n {
        let off = (k as f64 / 2.0).sqrt();
        jacobi[(k - 1, k)] = off;
        jacobi[(k, k - 1)] = off;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let v0 = eig.eigenvectors[(0, k)];
            (eig.eigenvalues[k], std::f64::consts::PI.sqrt() * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// One cluster's rows: fixed linear predictor, random design and response.
struct Cluster {
    offset: Vec<f64>,
    z: Vec<[f64; 2]>,
    y: Vec<f64>,
}

impl Cluster {
    /// Log of the integrand `Σ ℓ_i + log φ(v)` up to the normal constant,
    /// with `u = L v`.
    fn h(&self, l: &[[f64; 2]; 2], q: usize, v: &[f64; 2]) -> f64 {
        let u = [l[0][0] * v[0], l[1][0] * v[0] + l[1][1] * v[1]];
        let mut s = 0.0;
        for i in 0..self.y.len() {
            let eta = self.offset[i] + (0..q).map(|k| self.z[i][k] * u[k]).sum::<f64>();
            s += bernoulli_loglik(self.y[i], eta);
        }
        s - 0.5 * (0..q).map(|k| v[k] * v[k]).sum::<f64>()
    }

    /// Gradient and negative Hessian of `h`.
    fn derivatives(&self, l: &[[f64; 2]; 2], q: usize, v: &[f64; 2]) -> ([f64; 2], [[f64; 2]; 2]) {
        let u = [l[0][0] * v[0], l[1][0] * v[0] + l[1][1] * v[1]];
        let mut grad = [-v[0], if q == 2 { -v[1] } else { 0.0 }];
        let mut hess = [[1.0, 0.0], [0.0, if q == 2 { 1.0 } else { 0.0 }]];
        for i in 0..self.y.len() {
            let eta = self.offset[i] + (0..q).map(|k| self.z[i][k] * u[k]).sum::<f64>();
            let mu = inv_logit(eta);
            // d eta / d v = L' z
            let dv = [
                l[0][0] * self.z[i][0] + l[1][0] * self.z[i][1],
                l[1][1] * self.z[i][1],
            ];
            for a in 0..q {
                grad[a] += (self.y[i] - mu) * dv[a];
                for b in 0..q {
                    hess[a][b] += mu * (1.0 - mu) * dv[a] * dv[b];
                }
            }
        }
        (grad, hess)
    }

    fn mode(&self, l: &[[f64; 2]; 2], q: usize) -> [f64; 2] {
        let mut v = [0.0; 2];
        let mut hv = self.h(l, q, &v);
        for _ in 0..200 {
            let (g, hs) = self.derivatives(l, q, &v);
            let step = if q == 1 {
                [g[0] / hs[0][0], 0.0]
            } else {
                let det = hs[0][0] * hs[1][1] - hs[0][1] * hs[1][0];
                [
                    (hs[1][1] * g[0] - hs[0][1] * g[1]) / det,
                    (hs[0][0] * g[1] - hs[1][0] * g[0]) / det,
                ]
            };
            let mut t = 1.0;
            let mut moved = false;
            for _ in 0..40 {
                let cand = [v[0] + t * step[0], v[1] + t * step[1]];
                let hc = self.h(l, q, &cand);
                if hc >= hv {
                    moved = (cand[0] - v[0]).abs().max((cand[1] - v[1]).abs()) > 1e-14;
                    v = cand;
                    hv = hc;
                    break;
                }
                t *= 0.5;
            }
            if !moved {
                break;
            }
        }
        v
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Marginal log-likelihood by adaptive Gauss-Hermite quadrature, centered at
/// each cluster's conditional mode and scaled by the curvature there.
pub fn oracle_loglik(frame: &ItemFrame, spec: &GlmmSpec, params: &GlmmParams) -> Result<f64> {
    let q = spec.q();
    let n_clusters = frame.n_intervals();
    let limit = match q {
        1 => MAX_CLUSTERS_Q1,
        2 => MAX_CLUSTERS_Q2,
        _ => return Err(Error::Config("quadrature needs one or two random effects".into())),
    };
    if n_clusters > limit {
        return Err(Error::TooLarge { limit, actual: n_clusters });
    }
    let (x, _) = model::design_matrix(frame, &spec.fixed)?;
    if params.beta.len() != x.ncols() || params.cholesky.len() != q * (q + 1) / 2 {
        return Err(Error::Config("parameter shape does not match model".into()));
    }
    let l = match q {
        1 => [[params.cholesky[0], 0.0], [0.0, 0.0]],
        _ => [[params.cholesky[0], 0.0], [params.cholesky[1], params.cholesky[2]]],
    };

    let mut clusters: std::collections::BTreeMap<usize, Cluster> = Default::default();
    for (i, row) in frame.rows.iter().enumerate() {
        let c = clusters.entry(row.j).or_insert_with(|| Cluster {
            offset: Vec::new(),
            z: Vec::new(),
            y: Vec::new(),
        });
        c.offset.push((0..x.ncols()).map(|k| x[(i, k)] * params.beta[k]).sum());
        let mut z = [0.0; 2];
        for (k, term) in spec.random.iter().enumerate() {
            z[k] = match term {
                RandomTerm::Intercept => 1.0,
                RandomTerm::G => row.g as f64,
            };
        }
        c.z.push(z);
        c.y.push(row.y as f64);
    }

    let (nodes, weights) = gauss_hermite(if q == 1 { NODES_Q1 } else { NODES_Q2 });
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let mut total = 0.0;
    for cluster in clusters.values() {
        let mode = cluster.mode(&l, q);
        let (_, hs) = cluster.derivatives(&l, q, &mode);
        // v = mode + √2 C x with C C' = H⁻¹
        let terms: Vec<f64> = if q == 1 {
            let c = 1.0 / hs[0][0].sqrt();
            nodes
                .iter()
                .zip(&weights)
                .map(|(&x, &w)| {
                    let v = [mode[0] + std::f64::consts::SQRT_2 * c * x, 0.0];
                    w.ln() + cluster.h(&l, q, &v) + x * x + (std::f64::consts::SQRT_2 * c).ln() - half_ln_2pi
                })
                .collect()
        } else {
            let h = nalgebra::Matrix2::new(hs[0][0], hs[0][1], hs[1][0], hs[1][1]);
            let inv = h.try_inverse().expect("negative Hessian is positive definite");
            let c = inv.cholesky().expect("positive definite").l();
            let jac = (2.0 * c[(0, 0)] * c[(1, 1)]).ln();
            let mut out = Vec::with_capacity(nodes.len() * nodes.len());
            for (&x0, &w0) in nodes.iter().zip(&weights) {
                for (&x1, &w1) in nodes.iter().zip(&weights) {
                    let s = std::f64::consts::SQRT_2;
                    let v = [
                        mode[0] + s * c[(0, 0)] * x0,
                        mode[1] + s * (c[(1, 0)] * x0 + c[(1, 1)] * x1),
                    ];
                    out.push(w0.ln() + w1.ln() + cluster.h(&l, q, &v) + x0 * x0 + x1 * x1 + jac - 2.0 * half_ln_2pi);
                }
            }
            out
        };
        total += log_sum_exp(&terms);
    }
    Ok(total)
}

/// Maximize the quadrature likelihood over all parameters, starting from
/// `start` (usually the Laplace fit).
pub fn fit_by_quadrature(frame: &ItemFrame, spec: &GlmmSpec, start: &GlmmParams) -> Result<(GlmmParams, f64)> {
    let p = start.beta.len();
    let mut x0 = start.beta.clone();
    x0.extend(&start.cholesky);
    let split = |x: &[f64]| GlmmParams {
        beta: x[..p].to_vec(),
        cholesky: x[p..].to_vec(),
    };
    // Validate shape and bounds once.
    oracle_loglik(frame, spec, start)?;
    let nm = NelderMead {
        max_evaluations: 20_000,
        f_tolerance: 1e-10,
        x_tolerance: 1e-7,
        initial_step: 0.1,
    };
    let mut best = nm.minimize(
        |x| oracle_loglik(frame, spec, &split(x)).map(|v| -v).unwrap_or(f64::INFINITY),
        &x0,
    );
    // Restart once from the optimum to escape a collapsed simplex.
    let again = nm.minimize(
        |x| oracle_loglik(frame, spec, &split(x)).map(|v| -v).unwrap_or(f64::INFINITY),
        &best.x,
    );
    if again.value < best.value {
        best = again;
    }
    if !best.converged && !(best.spread <= nm.f_tolerance) {
        return Err(Error::NonConvergence { evaluations: best.evaluations });
    }
    Ok((split(&best.x), -best.value))
}
