//! Bayesian binomial GLMM with a physician random intercept, fitted by
//! mean-field Gaussian variational Bayes, plus the Pearson-residual
//! overdispersion score and calibration diagnostics.
//!
//! logit Pr(y_i = 1) = b0 + b'z_i + u_{j(i)}, u_j ~ N(0, sigma_u^2).
//! The variational family is a product of Gaussians over (b0, b, u, log
//! sigma_u); the expected log-logistic-likelihood uses 20-node Gauss-Hermite
//! quadrature. The optimizer is plain preconditioned gradient ascent with a
//! backtracking line search, so the recorded ELBO trace never decreases and
//! the whole fit is deterministic without any random draws.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlmmPriors {
    /// Standard deviation of the zero-mean Gaussian priors on b0 and b.
    pub coef_sd: f64,
    /// Standard deviation of the Gaussian prior on log sigma_u.
    pub log_sigma_sd: f64,
}

impl Default for GlmmPriors {
    fn default() -> Self {
        GlmmPriors { coef_sd: 3.0, log_sigma_sd: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlmmOptions {
    pub priors: GlmmPriors,
    pub tol: f64,
    pub max_iterations: usize,
    pub quadrature_nodes: usize,
}

impl Default for GlmmOptions {
    fn default() -> Self {
        GlmmOptions {
            priors: GlmmPriors::default(),
            tol: 1e-6,
            max_iterations: 2000,
            quadrature_nodes: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GlmmFit {
    pub beta0: f64,
    pub beta: Vec<f64>,
    pub u: Vec<f64>,
    pub beta0_sd: f64,
    pub beta_sd: Vec<f64>,
    pub u_sd: Vec<f64>,
    /// Posterior mean of sigma_u, exp(m + s^2/2) under the log-normal factor.
    pub sigma_u: f64,
    pub log_sigma_mean: f64,
    pub log_sigma_sd: f64,
    pub elbo_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverdispersionScores {
    pub od: Vec<f64>,
    pub residuals: Vec<f64>,
    /// Fitted probabilities that had to be clamped away from 0 or 1.
    pub clamped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub mean_predicted: f64,
    pub observed: f64,
    pub count: usize,
}

/// Nodes and probability weights for E[f(X)], X standard normal:
/// E[f(X)] = sum_g w_g f(sqrt(2) x_g), from the Golub-Welsch eigendecomposition
/// of the Hermite Jacobi matrix.
fn gauss_hermite(nodes: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jacobi = DMatrix::zeros(nodes, nodes);
    for i in 1..nodes {
        let b = (i as f64 / 2.0).sqrt();
        jacobi[(i, i - 1)] = b;
        jacobi[(i - 1, i)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..nodes)
        .map(|g| {
            let first = eig.eigenvectors[(0, g)];
            (eig.eigenvalues[g], first * first)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    (pairs.iter().map(|p| p.0).collect(), pairs.iter().map(|p| p.1).collect())
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Parameter layout inside the flat optimization vector.
struct Layout {
    p: usize,
    j: usize,
}

impl Layout {
    fn len(&self) -> usize {
        2 * (1 + self.p + self.j + 1)
    }
    fn m0(&self) -> usize {
        0
    }
    fn m_beta(&self, l: usize) -> usize {
        1 + l
    }
    fn m_u(&self, jj: usize) -> usize {
        1 + self.p + jj
    }
    fn m_tau(&self) -> usize {
        1 + self.p + self.j
    }
    fn rho(&self, mean_index: usize) -> usize {
        1 + self.p + self.j + 1 + mean_index
    }
}

struct Objective<'a> {
    z: &'a [f64],
    y: &'a [bool],
    physician_of: &'a [usize],
    p: usize,
    j: usize,
    layout: Layout,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    prior_coef_var: f64,
    prior_tau_var: f64,
}

impl Objective<'_> {
    /// ELBO and, when `grad` is given, its gradient in the flat layout.
    fn evaluate(&self, theta: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        let lo = &self.layout;
        let p = self.p;
        let n = self.y.len();
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        let var = |idx: usize| (2.0 * theta[lo.rho(idx)]).exp();

        let s0_sq = var(lo.m0());
        let sbeta_sq: Vec<f64> = (0..p).map(|l| var(lo.m_beta(l))).collect();
        let su_sq: Vec<f64> = (0..self.j).map(|jj| var(lo.m_u(jj))).collect();
        let stau_sq = var(lo.m_tau());

        // expected log-likelihood over eta_i ~ N(mu_i, v_i)
        let mut elbo = 0.0;
        for i in 0..n {
            let row = &self.z[i * p..(i + 1) * p];
            let jj = self.physician_of[i];
            let mut mu = theta[lo.m0()] + theta[lo.m_u(jj)];
            let mut v = s0_sq + su_sq[jj];
            for l in 0..p {
                mu += theta[lo.m_beta(l)] * row[l];
                v += sbeta_sq[l] * row[l] * row[l];
            }
            let std = v.sqrt();
            let mut a = 0.0;
            let mut g_mean = 0.0;
            let mut g_node = 0.0;
            for (x, w) in self.nodes.iter().zip(&self.weights) {
                let eta = mu + std::f64::consts::SQRT_2 * std * x;
                let s = sigmoid(eta);
                a += w * softplus(eta);
                g_mean += w * s;
                g_node += w * x * s;
            }
            let yi = f64::from(u8::from(self.y[i]));
            elbo += yi * mu - a;
            if let Some(g) = grad.as_deref_mut() {
                let dmu = yi - g_mean;
                // d(expected softplus)/dv through eta = mu + sqrt(2 v) x
                let dv = if std > 0.0 {
                    -std::f64::consts::SQRT_2 * g_node / (2.0 * std)
                } else {
                    0.0
                };
                g[lo.m0()] += dmu;
                g[lo.m_u(jj)] += dmu;
                g[lo.rho(lo.m0())] += dv * 2.0 * s0_sq;
                g[lo.rho(lo.m_u(jj))] += dv * 2.0 * su_sq[jj];
                for l in 0..p {
                    g[lo.m_beta(l)] += dmu * row[l];
                    g[lo.rho(lo.m_beta(l))] += dv * row[l] * row[l] * 2.0 * sbeta_sq[l];
                }
            }
        }

        // E log p(u | sigma_u) with tau = log sigma_u ~ N(m_tau, s_tau^2)
        let m_tau = theta[lo.m_tau()];
        let r = (-2.0 * m_tau + 2.0 * stau_sq).exp();
        let s_total: f64 =
            (0..self.j).map(|jj| theta[lo.m_u(jj)].powi(2) + su_sq[jj]).sum();
        elbo += -(self.j as f64) * m_tau - 0.5 * r * s_total - 0.5 * self.j as f64 * LN_2PI;
        if let Some(g) = grad.as_deref_mut() {
            for jj in 0..self.j {
                g[lo.m_u(jj)] += -r * theta[lo.m_u(jj)];
                g[lo.rho(lo.m_u(jj))] += -r * su_sq[jj];
            }
            g[lo.m_tau()] += -(self.j as f64) + r * s_total;
            g[lo.rho(lo.m_tau())] += -2.0 * r * s_total * stau_sq;
        }

        // Gaussian priors on b0, b and tau
        let cv = self.prior_coef_var;
        let mut prior = -(theta[lo.m0()].powi(2) + s0_sq) / (2.0 * cv);
        for l in 0..p {
            prior += -(theta[lo.m_beta(l)].powi(2) + sbeta_sq[l]) / (2.0 * cv);
        }
        prior -= 0.5 * (1 + p) as f64 * (LN_2PI + cv.ln());
        let tv = self.prior_tau_var;
        prior += -(m_tau * m_tau + stau_sq) / (2.0 * tv) - 0.5 * (LN_2PI + tv.ln());
        elbo += prior;
        if let Some(g) = grad.as_deref_mut() {
            g[lo.m0()] += -theta[lo.m0()] / cv;
            g[lo.rho(lo.m0())] += -s0_sq / cv;
            for l in 0..p {
                g[lo.m_beta(l)] += -theta[lo.m_beta(l)] / cv;
                g[lo.rho(lo.m_beta(l))] += -sbeta_sq[l] / cv;
            }
            g[lo.m_tau()] += -m_tau / tv;
            g[lo.rho(lo.m_tau())] += -stau_sq / tv;
        }

        // entropy of the factorized Gaussian family
        let mean_count = 1 + p + self.j + 1;
        let mut entropy = 0.5 * mean_count as f64 * (LN_2PI + 1.0);
        for idx in 0..mean_count {
            entropy += theta[lo.rho(idx)];
        }
        elbo += entropy;
        if let Some(g) = grad.as_deref_mut() {
            for idx in 0..mean_count {
                g[lo.rho(idx)] += 1.0;
            }
        }
        elbo
    }
}

/// Mean-field variational fit. The objective is deterministic, so `seed`
/// only keeps the estimator interface uniform with the stochastic methods.
pub fn fit_vb(
    z: &[f64],
    p: usize,
    y: &[bool],
    physician_of: &[usize],
    j: usize,
    _seed: u64,
    options: &GlmmOptions,
) -> Result<GlmmFit> {
    let n = y.len();
    assert_eq!(z.len(), n * p);
    assert_eq!(physician_of.len(), n);
    if j < 2 {
        return Err(Error::Config(format!("random intercepts need J >= 2, got {j}")));
    }
    let positives = y.iter().filter(|&&v| v).count();
    if positives == 0 || positives == n {
        return Err(Error::Degenerate("outcome vector has a single class".into()));
    }
    if let Some(&bad) = physician_of.iter().find(|&&jj| jj >= j) {
        return Err(Error::Config(format!("physician index {bad} out of range for J = {j}")));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("covariate matrix contains non-finite values".into()));
    }

    let (nodes, weights) = gauss_hermite(options.quadrature_nodes);
    let layout = Layout { p, j };
    let objective = Objective {
        z,
        y,
        physician_of,
        p,
        j,
        layout: Layout { p, j },
        nodes,
        weights,
        prior_coef_var: options.priors.coef_sd * options.priors.coef_sd,
        prior_tau_var: options.priors.log_sigma_sd * options.priors.log_sigma_sd,
    };

    let mut theta = vec![0.0; layout.len()];
    let init_rho = (0.1f64).ln();
    let mean_count = 1 + p + j + 1;
    for idx in 0..mean_count {
        theta[layout.rho(idx)] = init_rho;
    }

    // fixed diagonal preconditioner from the logistic curvature bound 1/4
    let mut panel_sizes = vec![0usize; j];
    for &jj in physician_of {
        panel_sizes[jj] += 1;
    }
    let mut precond = vec![0.0; layout.len()];
    let set = |pc: &mut [f64], idx: usize, curvature: f64| {
        pc[idx] = 1.0 / curvature;
    };
    set(&mut precond, layout.m0(), 0.25 * n as f64 + 1.0);
    for l in 0..p {
        let zsq: f64 = (0..n).map(|i| z[i * p + l] * z[i * p + l]).sum();
        set(&mut precond, layout.m_beta(l), 0.25 * zsq + 1.0);
    }
    for jj in 0..j {
        set(&mut precond, layout.m_u(jj), 0.25 * panel_sizes[jj] as f64 + 1.0);
    }
    set(&mut precond, layout.m_tau(), 1.0 + j as f64);
    for idx in 0..mean_count {
        precond[layout.rho(idx)] = precond[idx];
    }

    let mut grad = vec![0.0; layout.len()];
    let mut elbo = objective.evaluate(&theta, Some(&mut grad));
    if !elbo.is_finite() {
        return Err(Error::FitFailure(format!("initial ELBO not finite: {elbo}")));
    }
    let mut trace = vec![elbo];
    let mut converged = false;
    let mut iterations = 0;
    let mut step = 1.0f64;
    let mut candidate = vec![0.0; layout.len()];
    for iter in 1..=options.max_iterations {
        iterations = iter;
        let mut accepted = false;
        let mut t = step;
        for _ in 0..40 {
            for (c, (&base, (&g, &pc))) in
                candidate.iter_mut().zip(theta.iter().zip(grad.iter().zip(&precond)))
            {
                *c = base + t * pc * g;
            }
            let trial = objective.evaluate(&candidate, None);
            if !trial.is_finite() {
                return Err(Error::FitFailure(format!(
                    "ELBO diverged at iteration {iter}; trace: {trace:?}"
                )));
            }
            if trial > elbo {
                std::mem::swap(&mut theta, &mut candidate);
                let improvement = trial - elbo;
                elbo = trial;
                trace.push(elbo);
                step = (t * 2.0).min(1.0);
                accepted = true;
                if improvement < options.tol * elbo.abs() {
                    converged = true;
                }
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // no ascent direction at the numerical noise floor
            converged = true;
            break;
        }
        if converged {
            break;
        }
        elbo = objective.evaluate(&theta, Some(&mut grad));
    }

    let layout = Layout { p, j };
    let sd = |idx: usize| theta[layout.rho(idx)].exp();
    let log_sigma_mean = theta[layout.m_tau()];
    let log_sigma_sd = sd(layout.m_tau());
    Ok(GlmmFit {
        beta0: theta[layout.m0()],
        beta: (0..p).map(|l| theta[layout.m_beta(l)]).collect(),
        u: (0..j).map(|jj| theta[layout.m_u(jj)]).collect(),
        beta0_sd: sd(layout.m0()),
        beta_sd: (0..p).map(|l| sd(layout.m_beta(l))).collect(),
        u_sd: (0..j).map(|jj| sd(layout.m_u(jj))).collect(),
        sigma_u: (log_sigma_mean + 0.5 * log_sigma_sd * log_sigma_sd).exp(),
        log_sigma_mean,
        log_sigma_sd,
        elbo_trace: trace,
        iterations,
        converged,
    })
}

/// Plug-in fitted probability for one patient.
pub fn fitted_probability(fit: &GlmmFit, row: &[f64], physician: usize) -> f64 {
    let eta = fit.beta0
        + fit.beta.iter().zip(row).map(|(b, v)| b * v).sum::<f64>()
        + fit.u[physician];
    sigmoid(eta)
}

/// Pearson residuals and the per-physician mean squared residual.
pub fn overdispersion_scores(
    fit: &GlmmFit,
    z: &[f64],
    p: usize,
    y: &[bool],
    physician_of: &[usize],
    j: usize,
) -> OverdispersionScores {
    let n = y.len();
    let eps = 1e-9;
    let mut residuals = Vec::with_capacity(n);
    let mut od = vec![0.0; j];
    let mut counts = vec![0usize; j];
    let mut clamped = 0usize;
    for i in 0..n {
        let raw = fitted_probability(fit, &z[i * p..(i + 1) * p], physician_of[i]);
        let p_hat = raw.clamp(eps, 1.0 - eps);
        if p_hat != raw {
            clamped += 1;
        }
        let r = (f64::from(u8::from(y[i])) - p_hat) / (p_hat * (1.0 - p_hat)).sqrt();
        residuals.push(r);
        od[physician_of[i]] += r * r;
        counts[physician_of[i]] += 1;
    }
    for (v, &c) in od.iter_mut().zip(&counts) {
        if c > 0 {
            *v /= c as f64;
        }
    }
    OverdispersionScores { od, residuals, clamped }
}

/// Equal-width reliability bins over [0, 1]; empty bins are omitted.
pub fn calibration_curve(
    fit: &GlmmFit,
    z: &[f64],
    p: usize,
    y: &[bool],
    physician_of: &[usize],
    n_bins: usize,
) -> Vec<CalibrationBin> {
    assert!(n_bins >= 1);
    let mut sums = vec![(0.0f64, 0.0f64, 0usize); n_bins];
    for i in 0..y.len() {
        let p_hat = fitted_probability(fit, &z[i * p..(i + 1) * p], physician_of[i]);
        let bin = ((p_hat * n_bins as f64) as usize).min(n_bins - 1);
        sums[bin].0 += p_hat;
        sums[bin].1 += f64::from(u8::from(y[i]));
        sums[bin].2 += 1;
    }
    sums.into_iter()
        .filter(|&(_, _, c)| c > 0)
        .map(|(ps, ys, c)| CalibrationBin {
            mean_predicted: ps / c as f64,
            observed: ys / c as f64,
            count: c,
        })
        .collect()
}
