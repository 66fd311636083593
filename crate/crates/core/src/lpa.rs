//! Latent-profile pairing: full-covariance Gaussian mixtures fitted on
//! robust-scaled covariates, BIC model selection over K = 2..10, and the
//! hybrid latent-clinical distance.
//!
//! EM is written against flat row-major buffers with per-component Cholesky
//! factors because mixture fitting is the dominant cost of a benchmark run;
//! the (K, init) grid is evaluated in parallel and reduced deterministically.

use rayon::prelude::*;

use crate::matchcore::DistanceMatrix;
use crate::rng::{seeded_rng, stream_seed};
use rand::Rng;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmmOptions {
    pub k_min: usize,
    pub k_max: usize,
    pub n_init: usize,
    pub reg: f64,
    pub tol: f64,
    pub max_iterations: usize,
}

impl Default for GmmOptions {
    fn default() -> Self {
        GmmOptions { k_min: 2, k_max: 10, n_init: 10, reg: 1e-6, tol: 1e-4, max_iterations: 200 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub k: usize,
    pub p: usize,
    /// k×p row-major component means.
    pub means: Vec<f64>,
    /// k consecutive p×p row-major covariance blocks.
    pub covariances: Vec<f64>,
    pub mixing: Vec<f64>,
    pub converged: bool,
    pub bic: f64,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub log_likelihood_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MembershipMatrix {
    pub n: usize,
    pub k: usize,
    /// n×k row-major posterior responsibilities.
    pub pi: Vec<f64>,
}

impl MembershipMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.pi[i * self.k..(i + 1) * self.k]
    }
}

/// One row of the per-experiment model-selection export.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BicCandidate {
    pub k: usize,
    pub bic: f64,
    pub log_likelihood: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmSelection {
    pub model: GmmModel,
    pub memberships: MembershipMatrix,
    pub candidates: Vec<BicCandidate>,
    pub fallback_used: bool,
}

/// Fit mixtures for each K, keep the converged model with the lowest BIC,
/// fall back to K = 2 when nothing converges.
pub fn fit_gmm_bic(z_robust: &[f64], n: usize, p: usize, seed: u64) -> GmmSelection {
    fit_gmm_bic_with(z_robust, n, p, seed, &GmmOptions::default())
}

pub fn fit_gmm_bic_with(
    z_robust: &[f64],
    n: usize,
    p: usize,
    seed: u64,
    options: &GmmOptions,
) -> GmmSelection {
    assert_eq!(z_robust.len(), n * p);
    assert!(n > 10 * p, "full covariances need n > 10p, got n = {n}, p = {p}");
    let k_max = options.k_max.min(n);

    let per_k: Vec<(GmmModel, MembershipMatrix)> = (options.k_min..=k_max)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&k| {
            // best of n_init runs by final log-likelihood, as in common practice;
            // the convergence flag travels with the winning run
            let runs: Vec<(GmmModel, MembershipMatrix)> = (0..options.n_init)
                .collect::<Vec<_>>()
                .par_iter()
                .map(|&init| {
                    let run_seed =
                        stream_seed(seed, &["gmm", &k.to_string(), &init.to_string()]);
                    em_run(z_robust, n, p, k, options, run_seed)
                })
                .collect();
            runs.into_iter()
                .reduce(|best, cur| {
                    if cur.0.log_likelihood > best.0.log_likelihood {
                        cur
                    } else {
                        best
                    }
                })
                .unwrap()
        })
        .collect();

    let candidates: Vec<BicCandidate> = per_k
        .iter()
        .map(|(m, _)| BicCandidate {
            k: m.k,
            bic: m.bic,
            log_likelihood: m.log_likelihood,
            converged: m.converged,
        })
        .collect();

    let selected = per_k
        .iter()
        .enumerate()
        .filter(|(_, (m, _))| m.converged)
        .min_by(|a, b| a.1 .0.bic.partial_cmp(&b.1 .0.bic).unwrap())
        .map(|(idx, _)| idx);
    let (fallback_used, idx) = match selected {
        Some(idx) => (false, idx),
        None => (true, 0),
    };
    let (model, memberships) = per_k.into_iter().nth(idx).unwrap();
    GmmSelection { model, memberships, candidates, fallback_used }
}

struct Component {
    mean: Vec<f64>,
    /// Lower-triangular Cholesky factor of the covariance, row-major p×p.
    chol: Vec<f64>,
    /// Sum of log diagonal entries of the factor.
    half_log_det: f64,
    log_mix: f64,
}

impl Component {
    fn log_prob(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        let p = self.mean.len();
        // forward substitution: L y = (x - mean)
        let mut q = 0.0;
        for r in 0..p {
            let mut v = x[r] - self.mean[r];
            for (c, s) in scratch.iter().enumerate().take(r) {
                v -= self.chol[r * p + c] * s;
            }
            let y = v / self.chol[r * p + r];
            scratch[r] = y;
            q += y * y;
        }
        self.log_mix - self.half_log_det - 0.5 * (q + p as f64 * LN_2PI)
    }
}

fn cholesky_lower(cov: &[f64], p: usize) -> Option<(Vec<f64>, f64)> {
    let mut l = vec![0.0; p * p];
    let mut half_log_det = 0.0;
    for r in 0..p {
        for c in 0..=r {
            let mut v = cov[r * p + c];
            for t in 0..c {
                v -= l[r * p + t] * l[c * p + t];
            }
            if r == c {
                if v <= 0.0 {
                    return None;
                }
                let d = v.sqrt();
                l[r * p + r] = d;
                half_log_det += d.ln();
            } else {
                l[r * p + c] = v / l[c * p + c];
            }
        }
    }
    Some((l, half_log_det))
}

struct Parameters {
    means: Vec<f64>,
    covariances: Vec<f64>,
    mixing: Vec<f64>,
    components: Vec<Component>,
}

/// Weighted means, covariances (plus the ridge) and mixing proportions from
/// the responsibility matrix.
fn m_step(z: &[f64], p: usize, k: usize, resp: &[f64], reg: f64) -> Parameters {
    let mut counts = vec![10.0 * f64::EPSILON; k];
    for row in resp.chunks_exact(k) {
        for (c, r) in counts.iter_mut().zip(row) {
            *c += r;
        }
    }
    let mut means = vec![0.0; k * p];
    for (i, row) in resp.chunks_exact(k).enumerate() {
        let x = &z[i * p..(i + 1) * p];
        for (comp, &r) in row.iter().enumerate() {
            if r > 0.0 {
                for (m, v) in means[comp * p..(comp + 1) * p].iter_mut().zip(x) {
                    *m += r * v;
                }
            }
        }
    }
    for comp in 0..k {
        for m in &mut means[comp * p..(comp + 1) * p] {
            *m /= counts[comp];
        }
    }
    let mut covariances = vec![0.0; k * p * p];
    let mut centred = vec![0.0; p];
    for (i, row) in resp.chunks_exact(k).enumerate() {
        let x = &z[i * p..(i + 1) * p];
        for (comp, &r) in row.iter().enumerate() {
            if r > 0.0 {
                let mean = &means[comp * p..(comp + 1) * p];
                for ((c, v), m) in centred.iter_mut().zip(x).zip(mean) {
                    *c = v - m;
                }
                let block = &mut covariances[comp * p * p..(comp + 1) * p * p];
                for a in 0..p {
                    let ra = r * centred[a];
                    for b in 0..=a {
                        block[a * p + b] += ra * centred[b];
                    }
                }
            }
        }
    }
    let total: f64 = counts.iter().sum();
    let mut mixing = vec![0.0; k];
    let mut components = Vec::with_capacity(k);
    for comp in 0..k {
        let block = &mut covariances[comp * p * p..(comp + 1) * p * p];
        for a in 0..p {
            for b in 0..=a {
                let v = block[a * p + b] / counts[comp];
                block[a * p + b] = v;
                block[b * p + a] = v;
            }
            block[a * p + a] += reg;
        }
        mixing[comp] = counts[comp] / total;
        let (chol, half_log_det) =
            cholesky_lower(block, p).expect("ridge keeps covariances positive definite");
        components.push(Component {
            mean: means[comp * p..(comp + 1) * p].to_vec(),
            chol,
            half_log_det,
            log_mix: mixing[comp].ln(),
        });
    }
    Parameters { means, covariances, mixing, components }
}

/// Posterior responsibilities and the total log-likelihood. Per-chunk
/// partial sums are combined in chunk order so the result does not depend
/// on the worker count.
fn e_step(z: &[f64], n: usize, p: usize, params: &Parameters, resp: &mut [f64]) -> f64 {
    let k = params.components.len();
    let chunk = 512.min(n.max(1));
    let partials: Vec<f64> = resp
        .par_chunks_mut(chunk * k)
        .enumerate()
        .map(|(block_idx, block)| {
            let mut scratch = vec![0.0; p];
            let mut block_ll = 0.0;
            for (local, row) in block.chunks_exact_mut(k).enumerate() {
                let i = block_idx * chunk + local;
                let x = &z[i * p..(i + 1) * p];
                let mut top = f64::NEG_INFINITY;
                for (slot, comp) in row.iter_mut().zip(&params.components) {
                    let lp = comp.log_prob(x, &mut scratch);
                    *slot = lp;
                    top = top.max(lp);
                }
                let mut sum = 0.0;
                for slot in row.iter_mut() {
                    *slot = (*slot - top).exp();
                    sum += *slot;
                }
                for slot in row.iter_mut() {
                    *slot /= sum;
                }
                block_ll += top + sum.ln();
            }
            block_ll
        })
        .collect();
    partials.iter().sum()
}

/// Seed centres greedily by squared-distance sampling, then one-hot assign.
fn kmeanspp_responsibilities(z: &[f64], n: usize, p: usize, k: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded_rng(seed);
    let mut centres: Vec<usize> = Vec::with_capacity(k);
    centres.push((rng.gen::<f64>() * n as f64) as usize % n);
    let mut d2 = vec![0.0f64; n];
    let dist2 = |a: usize, b: usize| {
        let ra = &z[a * p..(a + 1) * p];
        let rb = &z[b * p..(b + 1) * p];
        ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
    };
    for (i, slot) in d2.iter_mut().enumerate() {
        *slot = dist2(i, centres[0]);
    }
    while centres.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // all remaining points coincide with a centre; pick by index
            (rng.gen::<f64>() * n as f64) as usize % n
        } else {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &v) in d2.iter().enumerate() {
                target -= v;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centres.push(next);
        for (i, slot) in d2.iter_mut().enumerate() {
            let v = dist2(i, next);
            if v < *slot {
                *slot = v;
            }
        }
    }
    let mut resp = vec![0.0; n * k];
    for i in 0..n {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (c, &centre) in centres.iter().enumerate() {
            let v = dist2(i, centre);
            if v < best_d {
                best_d = v;
                best = c;
            }
        }
        resp[i * k + best] = 1.0;
    }
    resp
}

fn em_run(
    z: &[f64],
    n: usize,
    p: usize,
    k: usize,
    options: &GmmOptions,
    seed: u64,
) -> (GmmModel, MembershipMatrix) {
    let mut resp = kmeanspp_responsibilities(z, n, p, k, seed);
    let mut params = m_step(z, p, k, &resp, options.reg);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut previous = f64::NEG_INFINITY;
    for iter in 1..=options.max_iterations {
        let ll = e_step(z, n, p, &params, &mut resp);
        iterations = iter;
        assert!(
            ll >= previous - 1e-4 * (1.0 + previous.abs()),
            "EM log-likelihood decreased: {previous} -> {ll}"
        );
        trace.push(ll);
        if previous.is_finite() && (ll - previous).abs() < options.tol * previous.abs() {
            converged = true;
            break;
        }
        previous = ll;
        params = m_step(z, p, k, &resp, options.reg);
    }
    let log_likelihood = *trace.last().unwrap();
    let df = (k - 1) + k * p + k * p * (p + 1) / 2;
    let bic = -2.0 * log_likelihood + df as f64 * (n as f64).ln();
    let model = GmmModel {
        k,
        p,
        means: params.means,
        covariances: params.covariances,
        mixing: params.mixing,
        converged,
        bic,
        log_likelihood,
        iterations,
        log_likelihood_trace: trace,
    };
    (model, MembershipMatrix { n, k, pi: resp })
}

/// Hybrid latent-clinical panel distances: each term max-normalized within
/// the panel, combined with weight `alpha` on the latent term. A degenerate
/// term (zero maximum) contributes nothing.
pub fn hybrid_distance(
    memberships: &MembershipMatrix,
    z_robust: &[f64],
    p: usize,
    members: &[usize],
    alpha: f64,
    physician_id: usize,
) -> DistanceMatrix {
    let nj = members.len();
    assert!(nj >= 2, "hybrid distance needs at least two patients");
    let k = memberships.k;
    let euclid = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    let mut lat = vec![0.0; nj * nj];
    let mut cli = vec![0.0; nj * nj];
    let mut max_lat = 0.0f64;
    let mut max_cli = 0.0f64;
    for a in 0..nj {
        let ia = members[a];
        for b in (a + 1)..nj {
            let ib = members[b];
            let dl = euclid(memberships.row(ia), memberships.row(ib));
            let dc = euclid(&z_robust[ia * p..(ia + 1) * p], &z_robust[ib * p..(ib + 1) * p]);
            lat[a * nj + b] = dl;
            cli[a * nj + b] = dc;
            max_lat = max_lat.max(dl);
            max_cli = max_cli.max(dc);
        }
    }
    let lat_scale = if max_lat > 0.0 { alpha / max_lat } else { 0.0 };
    let cli_scale = if max_cli > 0.0 { (1.0 - alpha) / max_cli } else { 0.0 };
    let mut values = vec![0.0; nj * nj];
    for a in 0..nj {
        for b in (a + 1)..nj {
            let v = lat_scale * lat[a * nj + b] + cli_scale * cli[a * nj + b];
            values[a * nj + b] = v;
            values[b * nj + a] = v;
        }
    }
    let _ = k;
    DistanceMatrix { physician_id, n: nj, values }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn two_cluster_data(n: usize, p: usize, gap: f64, seed: u64) -> Vec<f64> {
        let mut rng = seeded_rng(seed);
        let mut z = Vec::with_capacity(n * p);
        for i in 0..n {
            let centre = if i % 2 == 0 { -gap } else { gap };
            for _ in 0..p {
                z.push(centre + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
            }
        }
        z
    }

    #[test]
    fn separated_clusters_select_two_components_with_binary_memberships() {
        let n = 2000;
        let p = 3;
        let z = two_cluster_data(n, p, 5.0, 11);
        let got = fit_gmm_bic(&z, n, p, 7);
        assert_eq!(got.model.k, 2);
        assert!(!got.fallback_used);
        assert!(got.model.converged);
        let near_binary = (0..n)
            .filter(|&i| got.memberships.row(i).iter().cloned().fold(0.0, f64::max) > 0.99)
            .count();
        assert!(near_binary as f64 >= 0.95 * n as f64, "{near_binary}/{n}");
    }

    #[test]
    fn memberships_are_probability_rows() {
        let n = 400;
        let p = 2;
        let z = two_cluster_data(n, p, 2.0, 13);
        let got = fit_gmm_bic_with(
            &z,
            n,
            p,
            5,
            &GmmOptions { k_max: 4, n_init: 3, ..GmmOptions::default() },
        );
        for i in 0..n {
            let row = got.memberships.row(i);
            assert!(row.iter().all(|&v| v >= 0.0));
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "{sum}");
        }
    }

    #[test]
    fn selected_bic_is_minimal_among_converged_candidates() {
        let n = 600;
        let p = 2;
        let z = two_cluster_data(n, p, 3.0, 17);
        let got = fit_gmm_bic_with(
            &z,
            n,
            p,
            3,
            &GmmOptions { k_max: 5, n_init: 3, ..GmmOptions::default() },
        );
        for c in &got.candidates {
            if c.converged {
                assert!(got.model.bic <= c.bic + 1e-9);
            }
        }
        assert!(got.candidates.iter().any(|c| c.k == got.model.k && c.bic == got.model.bic));
    }

    #[test]
    fn model_invariants_hold_and_trace_is_monotone() {
        let n = 500;
        let p = 3;
        let z = two_cluster_data(n, p, 1.5, 23);
        let got = fit_gmm_bic_with(
            &z,
            n,
            p,
            9,
            &GmmOptions { k_max: 3, n_init: 2, ..GmmOptions::default() },
        );
        let m = &got.model;
        assert!((m.mixing.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for comp in 0..m.k {
            let block = &m.covariances[comp * p * p..(comp + 1) * p * p];
            for a in 0..p {
                for b in 0..p {
                    assert_eq!(block[a * p + b], block[b * p + a]);
                }
            }
            assert!(cholesky_lower(block, p).is_some(), "covariance not positive definite");
        }
        for w in m.log_likelihood_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-4 * (1.0 + w[0].abs()));
        }
    }

    #[test]
    fn exhausted_iteration_budget_falls_back_to_smallest_k() {
        let n = 300;
        let p = 2;
        let z = two_cluster_data(n, p, 1.0, 29);
        let got = fit_gmm_bic_with(
            &z,
            n,
            p,
            1,
            &GmmOptions { k_max: 4, n_init: 2, max_iterations: 1, ..GmmOptions::default() },
        );
        assert!(got.fallback_used);
        assert_eq!(got.model.k, 2);
        assert!(!got.model.converged);
        assert!(got.candidates.iter().all(|c| !c.converged));
    }

    #[test]
    fn fitting_is_deterministic() {
        let n = 350;
        let p = 2;
        let z = two_cluster_data(n, p, 2.5, 31);
        let options = GmmOptions { k_max: 4, n_init: 3, ..GmmOptions::default() };
        let a = fit_gmm_bic_with(&z, n, p, 21, &options);
        let b = fit_gmm_bic_with(&z, n, p, 21, &options);
        assert_eq!(a.model, b.model);
        assert_eq!(a.memberships, b.memberships);
        assert_eq!(a.candidates, b.candidates);
    }

    fn toy_memberships() -> MembershipMatrix {
        MembershipMatrix {
            n: 4,
            k: 2,
            pi: vec![1.0, 0.0, 0.9, 0.1, 0.2, 0.8, 0.0, 1.0],
        }
    }

    #[test]
    fn hybrid_distance_is_bounded_and_zero_for_identical_patients() {
        let memberships = MembershipMatrix {
            n: 3,
            k: 2,
            pi: vec![0.7, 0.3, 0.7, 0.3, 0.1, 0.9],
        };
        let z = [1.0, 2.0, 1.0, 2.0, -1.0, 0.5];
        let d = hybrid_distance(&memberships, &z, 2, &[0, 1, 2], 0.5, 4);
        assert_eq!(d.physician_id, 4);
        assert_eq!(d.get(0, 1), 0.0);
        for a in 0..3 {
            for b in 0..3 {
                assert!((0.0..=1.0).contains(&d.get(a, b)));
            }
        }
        // the farthest pair in both spaces sits at exactly 1
        assert!((d.get(0, 2) - 1.0).abs() < 1e-12 || (d.get(1, 2) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn alpha_one_preserves_pure_latent_ranking() {
        let memberships = toy_memberships();
        let z = [0.0, 5.0, 1.0, -2.0, 3.0, 0.0, -4.0, 2.0];
        let members = [0, 1, 2, 3];
        let hybrid = hybrid_distance(&memberships, &z, 2, &members, 1.0, 0);
        let order = |d: &DistanceMatrix| {
            let mut pairs = Vec::new();
            for a in 0..4 {
                for b in (a + 1)..4 {
                    pairs.push((a, b));
                }
            }
            pairs.sort_by(|&x, &y| d.get(x.0, x.1).partial_cmp(&d.get(y.0, y.1)).unwrap());
            pairs
        };
        // pure latent ranking computed directly from membership vectors
        let mut latent = DistanceMatrix { physician_id: 0, n: 4, values: vec![0.0; 16] };
        for a in 0..4 {
            for b in 0..4 {
                let da: f64 = memberships
                    .row(a)
                    .iter()
                    .zip(memberships.row(b))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                latent.values[a * 4 + b] = da;
            }
        }
        assert_eq!(order(&hybrid), order(&latent));
    }

    #[test]
    fn degenerate_clinical_space_leaves_latent_term_only() {
        let memberships = toy_memberships();
        let z = [3.0, -1.0, 3.0, -1.0, 3.0, -1.0, 3.0, -1.0];
        let members = [0, 1, 2, 3];
        let d = hybrid_distance(&memberships, &z, 2, &members, 0.5, 0);
        let lat01: f64 = memberships
            .row(0)
            .iter()
            .zip(memberships.row(1))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let lat03: f64 = memberships
            .row(0)
            .iter()
            .zip(memberships.row(3))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        // max latent distance is between rows 0 and 3
        assert!((d.get(0, 3) - 0.5).abs() < 1e-12);
        assert!((d.get(0, 1) - 0.5 * lat01 / lat03).abs() < 1e-12);
    }
}
