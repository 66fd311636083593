//! Genetic Mahalanobis: differential-evolution search for covariate weights
//! that minimize treated/control imbalance, then per-physician
//! weighted-Mahalanobis nearest-neighbour matching with replacement.
//!
//! The search loss matches each treated patient to its nearest control by
//! Euclidean distance in the weighted space. That inner loop runs ~1500
//! times per experiment, so the nearest-control query walks a list sorted by
//! the dominant weighted coordinate and prunes on the coordinate gap; the
//! result is exact and verified against brute force in tests.

use rand::Rng;
use rayon::prelude::*;

use crate::matchcore::{self, DistanceMatrix, Metric};
use crate::rng::{seeded_rng, tagged_seed};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DEConfig {
    pub lower: f64,
    pub upper: f64,
    pub population_size: usize,
    pub max_generations: usize,
    pub mutation: f64,
    pub crossover: f64,
    pub seed: u64,
}

impl DEConfig {
    /// Population 15·p over [0,10]^p; 10 generations after the initial
    /// population lands the evaluation budget at 15·p·11 ≈ 1500 for p = 9.
    pub fn standard(p: usize, seed: u64) -> Self {
        DEConfig {
            lower: 0.0,
            upper: 10.0,
            population_size: 15 * p,
            max_generations: 10,
            mutation: 0.8,
            crossover: 0.7,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneticWeights {
    pub w_hat: Vec<f64>,
    pub achieved_loss: f64,
    pub evaluations: usize,
    /// Best loss after the initial population and after each generation.
    pub trace: Vec<f64>,
}

/// Treated rows, control rows and the treated covariate means, gathered once
/// so the optimizer can evaluate many weight vectors cheaply.
struct BalanceProblem {
    p: usize,
    treated: Vec<f64>,
    controls: Vec<f64>,
    n_controls: usize,
    treated_mean: Vec<f64>,
}

impl BalanceProblem {
    fn new(z: &[f64], p: usize, y: &[bool]) -> Self {
        let n = y.len();
        assert_eq!(z.len(), n * p);
        let mut treated = Vec::new();
        let mut controls = Vec::new();
        let mut treated_mean = vec![0.0; p];
        for (i, &label) in y.iter().enumerate() {
            let row = &z[i * p..(i + 1) * p];
            if label {
                treated.extend_from_slice(row);
                for (m, v) in treated_mean.iter_mut().zip(row) {
                    *m += v;
                }
            } else {
                controls.extend_from_slice(row);
            }
        }
        let n_treated = treated.len() / p;
        assert!(n_treated > 0 && !controls.is_empty(), "balance loss needs both classes");
        treated_mean.iter_mut().for_each(|m| *m /= n_treated as f64);
        let n_controls = controls.len() / p;
        BalanceProblem { p, treated, controls, n_controls, treated_mean }
    }

    /// Max absolute standardized mean difference between treated patients and
    /// their nearest controls in the w-weighted space.
    fn loss(&self, w: &[f64]) -> f64 {
        let p = self.p;
        let l1: f64 = w.iter().map(|v| v.abs()).sum();
        if l1 <= 0.0 {
            return f64::INFINITY;
        }
        let root: Vec<f64> = w.iter().map(|v| (v / l1).sqrt()).collect();

        // weighted control rows, sorted by the dominant weighted coordinate
        let dominant = root
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        let nc = self.n_controls;
        let mut weighted_controls = vec![0.0; nc * p];
        for (slot, row) in weighted_controls.chunks_exact_mut(p).zip(self.controls.chunks_exact(p)) {
            for ((s, v), r) in slot.iter_mut().zip(row).zip(&root) {
                *s = v * r;
            }
        }
        let mut order: Vec<u32> = (0..nc as u32).collect();
        order.sort_by(|&a, &b| {
            let va = weighted_controls[a as usize * p + dominant];
            let vb = weighted_controls[b as usize * p + dominant];
            va.partial_cmp(&vb).unwrap().then(a.cmp(&b))
        });
        let keys: Vec<f64> =
            order.iter().map(|&i| weighted_controls[i as usize * p + dominant]).collect();

        let mut matched_mean = vec![0.0; p];
        let mut query = vec![0.0; p];
        let n_treated = self.treated.len() / p;
        for t in 0..n_treated {
            let row = &self.treated[t * p..(t + 1) * p];
            for ((q, v), r) in query.iter_mut().zip(row).zip(&root) {
                *q = v * r;
            }
            let nn = nearest_by_sorted_coordinate(
                &weighted_controls,
                p,
                &order,
                &keys,
                &query,
                query[dominant],
            );
            let chosen = &self.controls[nn * p..(nn + 1) * p];
            for (m, v) in matched_mean.iter_mut().zip(chosen) {
                *m += v;
            }
        }
        matched_mean.iter_mut().for_each(|m| *m /= n_treated as f64);
        self.treated_mean
            .iter()
            .zip(&matched_mean)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Exact nearest row to `query` among `rows`, walking outward from the
/// query's position in `order` (rows sorted by coordinate `keys`) and pruning
/// once the coordinate gap alone exceeds the best distance. Ties resolve to
/// the lowest original row index.
fn nearest_by_sorted_coordinate(
    rows: &[f64],
    p: usize,
    order: &[u32],
    keys: &[f64],
    query: &[f64],
    query_key: f64,
) -> usize {
    let nc = order.len();
    let start = keys.partition_point(|&k| k < query_key);
    let mut best_d2 = f64::INFINITY;
    let mut best_idx = usize::MAX;
    let examine = |pos: usize, best_d2: &mut f64, best_idx: &mut usize| {
        let idx = order[pos] as usize;
        let row = &rows[idx * p..(idx + 1) * p];
        let mut d2 = 0.0;
        for (a, b) in row.iter().zip(query) {
            d2 += (a - b) * (a - b);
        }
        if d2 < *best_d2 || (d2 == *best_d2 && idx < *best_idx) {
            *best_d2 = d2;
            *best_idx = idx;
        }
    };
    let mut left = start;
    let mut right = start;
    let mut left_open = true;
    let mut right_open = true;
    while left_open || right_open {
        if left_open {
            if left == 0 {
                left_open = false;
            } else {
                let gap = query_key - keys[left - 1];
                if gap * gap > best_d2 {
                    left_open = false;
                } else {
                    left -= 1;
                    examine(left, &mut best_d2, &mut best_idx);
                }
            }
        }
        if right_open {
            if right == nc {
                right_open = false;
            } else {
                let gap = keys[right] - query_key;
                if gap * gap > best_d2 {
                    right_open = false;
                } else {
                    examine(right, &mut best_d2, &mut best_idx);
                    right += 1;
                }
            }
        }
    }
    best_idx
}

/// Covariate-balance loss for one candidate weight vector.
pub fn balance_loss(w: &[f64], z: &[f64], p: usize, y: &[bool]) -> f64 {
    BalanceProblem::new(z, p, y).loss(w)
}

/// Differential evolution (rand/1/bin) over the weight box. The initial
/// population contains the all-ones vector, so the result is never worse
/// than uniform weighting.
pub fn optimize_weights(z: &[f64], p: usize, y: &[bool], config: &DEConfig) -> GeneticWeights {
    let problem = BalanceProblem::new(z, p, y);
    let np = config.population_size;
    assert!(np >= 4, "rand/1/bin needs at least four members");
    let mut rng = seeded_rng(tagged_seed(config.seed, "de"));

    let mut population: Vec<Vec<f64>> = Vec::with_capacity(np);
    population.push(vec![1.0; p]);
    for _ in 1..np {
        population.push(
            (0..p).map(|_| config.lower + (config.upper - config.lower) * rng.gen::<f64>()).collect(),
        );
    }
    let mut losses: Vec<f64> = population.par_iter().map(|w| problem.loss(w)).collect();
    let mut evaluations = np;

    let best_of = |losses: &[f64]| {
        let mut best = 0usize;
        for i in 1..losses.len() {
            if losses[i] < losses[best] {
                best = i;
            }
        }
        best
    };
    let mut trace = vec![losses[best_of(&losses)]];

    for _ in 0..config.max_generations {
        // draw all trial vectors first so evaluation can run as one batch
        let mut trials: Vec<Vec<f64>> = Vec::with_capacity(np);
        for i in 0..np {
            let mut pick_distinct = |exclude: &[usize]| loop {
                let r = (rng.gen::<f64>() * np as f64) as usize;
                if !exclude.contains(&r) {
                    return r.min(np - 1);
                }
            };
            let r1 = pick_distinct(&[i]);
            let r2 = pick_distinct(&[i, r1]);
            let r3 = pick_distinct(&[i, r1, r2]);
            let j_rand = (rng.gen::<f64>() * p as f64) as usize;
            let mut trial = population[i].clone();
            for j in 0..p {
                let crossed = rng.gen::<f64>() < config.crossover;
                if crossed || j == j_rand {
                    let mut v = population[r1][j]
                        + config.mutation * (population[r2][j] - population[r3][j]);
                    // reflect at the box edges rather than clamp: clamping
                    // parks coordinates at exactly zero, which silently
                    // deletes covariates from the stage-2 weighted metric
                    while v < config.lower || v > config.upper {
                        if v < config.lower {
                            v = 2.0 * config.lower - v;
                        } else {
                            v = 2.0 * config.upper - v;
                        }
                    }
                    trial[j] = v;
                }
            }
            trials.push(trial);
        }
        let trial_losses: Vec<f64> = trials.par_iter().map(|w| problem.loss(w)).collect();
        evaluations += np;
        for i in 0..np {
            if trial_losses[i] <= losses[i] {
                population[i] = trials[i].clone();
                losses[i] = trial_losses[i];
            }
        }
        trace.push(losses[best_of(&losses)]);
    }

    let best = best_of(&losses);
    GeneticWeights {
        w_hat: population[best].clone(),
        achieved_loss: losses[best],
        evaluations,
        trace,
    }
}

/// Per-physician discordance from weighted-Mahalanobis nearest-neighbour
/// matching with replacement under the 25th-percentile caliper.
///
/// The weighted-space covariance comes from the full cohort and is inverted
/// once. nn(i) = k never implies nn(k) = i; each patient is kept on its own
/// caliper test. The no-survivor branch is defensive: the globally closest
/// pair always passes a 25th-percentile caliper, so panels of two or more
/// patients produce an estimate.
pub fn genetic_mahalanobis_estimate(
    z: &[f64],
    p: usize,
    y: &[bool],
    panels: &[Vec<usize>],
    w_hat: &[f64],
) -> Vec<Option<f64>> {
    let n = y.len();
    assert_eq!(z.len(), n * p);
    assert_eq!(w_hat.len(), p);
    let root: Vec<f64> = w_hat.iter().map(|v| v.sqrt()).collect();
    let mut weighted = vec![0.0; n * p];
    for (slot, row) in weighted.chunks_exact_mut(p).zip(z.chunks_exact(p)) {
        for ((s, v), r) in slot.iter_mut().zip(row).zip(&root) {
            *s = v * r;
        }
    }
    let transform = matchcore::mahalanobis_transform(&weighted, n, p);

    panels
        .par_iter()
        .enumerate()
        .map(|(physician, members)| {
            if members.len() < 2 {
                return None;
            }
            let d = matchcore::distance_matrix(
                Metric::Mahalanobis(&transform),
                &weighted,
                p,
                members,
                physician,
            );
            estimate_from_panel_distances(&d, members, y)
        })
        .collect()
}

fn estimate_from_panel_distances(d: &DistanceMatrix, members: &[usize], y: &[bool]) -> Option<f64> {
    let nj = d.n;
    let mut tri = d.upper_triangle();
    let caliper = stats::quantile_select(&mut tri, 0.25);
    let mut kept = 0usize;
    let mut discordant = 0usize;
    for i in 0..nj {
        let mut nn = usize::MAX;
        let mut nn_d = f64::INFINITY;
        for k in 0..nj {
            if k != i && d.get(i, k) < nn_d {
                nn_d = d.get(i, k);
                nn = k;
            }
        }
        if nn_d <= caliper {
            kept += 1;
            discordant += usize::from(y[members[i]] != y[members[nn]]);
        }
    }
    if kept == 0 {
        return None;
    }
    Some(discordant as f64 / kept as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn brute_force_nearest(rows: &[f64], p: usize, query: &[f64]) -> usize {
        let nc = rows.len() / p;
        let mut best = (f64::INFINITY, usize::MAX);
        for idx in 0..nc {
            let row = &rows[idx * p..(idx + 1) * p];
            let d2: f64 = row.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < best.0 || (d2 == best.0 && idx < best.1) {
                best = (d2, idx);
            }
        }
        best.1
    }

    #[test]
    fn pruned_nearest_matches_brute_force() {
        let mut rng = seeded_rng(61);
        for trial in 0..200 {
            let p = 2 + (trial % 7);
            let nc = 3 + (trial % 50);
            // every third trial uses integer coordinates to force ties
            let tie_heavy = trial % 3 == 0;
            let gen = |rng: &mut rand_chacha::ChaCha8Rng| {
                if tie_heavy {
                    (rng.gen::<f64>() * 4.0).floor()
                } else {
                    rng.gen::<f64>() * 4.0
                }
            };
            let rows: Vec<f64> = (0..nc * p).map(|_| gen(&mut rng)).collect();
            let dominant = trial % p;
            let mut order: Vec<u32> = (0..nc as u32).collect();
            order.sort_by(|&a, &b| {
                rows[a as usize * p + dominant]
                    .partial_cmp(&rows[b as usize * p + dominant])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            let keys: Vec<f64> = order.iter().map(|&i| rows[i as usize * p + dominant]).collect();
            for _ in 0..20 {
                let query: Vec<f64> = (0..p).map(|_| gen(&mut rng)).collect();
                let got =
                    nearest_by_sorted_coordinate(&rows, p, &order, &keys, &query, query[dominant]);
                let want = brute_force_nearest(&rows, p, &query);
                assert_eq!(got, want, "trial {trial}");
            }
        }
    }

    #[test]
    fn identical_treated_and_control_sets_have_zero_loss() {
        let p = 3;
        let rows = [0.2, -1.0, 0.5, 1.4, 0.3, -0.7, -0.9, 2.0, 0.1];
        let mut z = Vec::new();
        let mut y = Vec::new();
        for row in rows.chunks_exact(p) {
            z.extend_from_slice(row);
            y.push(true);
        }
        for row in rows.chunks_exact(p) {
            z.extend_from_slice(row);
            y.push(false);
        }
        let loss = balance_loss(&[1.0, 2.0, 0.5], &z, p, &y);
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn three_versus_three_toy_matches_hand_enumeration() {
        // treated at 0, 2, 10 on the first coordinate; controls at 1, 6, 12.
        // nearest controls: 0->1, 2->1, 10->12 (with replacement).
        let p = 2;
        let z = [
            0.0, 0.0, 2.0, 0.0, 10.0, 0.0, // treated
            1.0, 0.0, 6.0, 0.0, 12.0, 0.0, // controls
        ];
        let y = [true, true, true, false, false, false];
        // matched control mean on coordinate 0: (1 + 1 + 12)/3
        let treated_mean = (0.0 + 2.0 + 10.0) / 3.0_f64;
        let matched_mean = (1.0 + 1.0 + 12.0) / 3.0_f64;
        let want = (treated_mean - matched_mean).abs();
        let loss = balance_loss(&[1.0, 1.0], &z, p, &y);
        assert!((loss - want).abs() < 1e-12, "{loss} vs {want}");
    }

    #[test]
    fn loss_is_scale_invariant_and_rejects_zero() {
        let mut rng = seeded_rng(71);
        let p = 4;
        let n = 60;
        let z: Vec<f64> =
            (0..n * p).map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect();
        let y: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
        let w = [0.5, 2.0, 0.1, 1.0];
        let scaled: Vec<f64> = w.iter().map(|v| v * 7.25).collect();
        let a = balance_loss(&w, &z, p, &y);
        let b = balance_loss(&scaled, &z, p, &y);
        assert!((a - b).abs() < 1e-12);
        assert!(balance_loss(&[0.0; 4], &z, p, &y).is_infinite());
    }

    fn optimization_instance(n: usize, seed: u64) -> (Vec<f64>, Vec<bool>, usize) {
        // outcome driven by feature 0, so upweighting it improves balance
        let mut rng = seeded_rng(seed);
        let p = 5;
        let mut z = Vec::with_capacity(n * p);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let signal: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
            z.push(signal);
            for _ in 1..p {
                z.push(<StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
            }
            y.push(signal + 0.5 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) > 0.0);
        }
        (z, y, p)
    }

    #[test]
    fn optimizer_beats_uniform_within_budget_and_is_deterministic() {
        let (z, y, p) = optimization_instance(300, 81);
        let config = DEConfig { population_size: 20, max_generations: 8, ..DEConfig::standard(p, 4) };
        let got = optimize_weights(&z, p, &y, &config);
        let uniform = balance_loss(&vec![1.0; p], &z, p, &y);
        assert!(got.achieved_loss <= uniform + 1e-15);
        assert_eq!(got.evaluations, 20 * 9);
        assert_eq!(got.trace.len(), 9);
        assert!(got.trace.windows(2).all(|w| w[1] <= w[0] + 1e-15), "monotone best");
        assert!(got.w_hat.iter().all(|&v| (0.0..=10.0).contains(&v)));
        assert!(got.w_hat.iter().map(|v| v.abs()).sum::<f64>() > 0.0);

        let again = optimize_weights(&z, p, &y, &config);
        assert_eq!(got, again);
    }

    #[test]
    fn standard_config_budget_is_about_fifteen_hundred() {
        let config = DEConfig::standard(9, 0);
        let evals = config.population_size * (config.max_generations + 1);
        assert!((1200..=1800).contains(&evals), "{evals}");
    }

    #[test]
    fn five_patient_panel_matches_hand_enumeration() {
        // five patients on a line: 0.0, 0.1, 0.9, 1.0, 5.0
        // nearest neighbours: 0->1, 1->0, 2->3, 3->2, 4->3
        // pairwise distances (upper tri): 0.1, 0.9, 1.0, 5.0, 0.8, 0.9, 4.9, 0.1, 4.1, 4.0
        // sorted: 0.1, 0.1, 0.8, 0.9, 0.9, 1.0, 4.0, 4.1, 4.9, 5.0
        // caliper = quantile 0.25 at rank 2.25 = 0.8 + 0.25*(0.9-0.8) = 0.825
        // nn distances: 0.1, 0.1, 0.1, 0.1, 4.0 -> patient 4 dropped
        // outcomes: T, F, T, T, F -> discordant pairs: (0,1) yes, (1,0) yes,
        // (2,3) no, (3,2) no -> 2/4
        let p = 1;
        let z = [0.0, 0.1, 0.9, 1.0, 5.0];
        let y = [true, false, true, true, false];
        let members: Vec<usize> = (0..5).collect();
        let d = matchcore::distance_matrix(Metric::Euclidean, &z, p, &members, 0);
        let got = estimate_from_panel_distances(&d, &members, &y).unwrap();
        assert!((got - 0.5).abs() < 1e-12, "{got}");
    }

    #[test]
    fn identical_pair_with_equal_outcomes_scores_zero() {
        let p = 2;
        let z = [1.0, 2.0, 1.0, 2.0];
        let y = [true, true];
        let panels = vec![vec![0, 1]];
        let got = genetic_mahalanobis_estimate(&z, p, &y, &panels, &[1.0, 1.0]);
        assert_eq!(got, vec![Some(0.0)]);
    }

    #[test]
    fn replacement_matching_is_asymmetric_by_construction() {
        // 0 and 1 are close; 2 sits nearer to 1 than to 0: nn(2)=1 but nn(1)=0
        let p = 1;
        let z = [0.0, 0.4, 1.0];
        let y = [true, false, false];
        let members = vec![0, 1, 2];
        let d = matchcore::distance_matrix(Metric::Euclidean, &z, p, &members, 0);
        // pairwise: (0,1)=0.4, (0,2)=1.0, (1,2)=0.6 -> caliper at rank 0.5 = 0.5
        // nn: 0->1 (0.4 kept), 1->0 (0.4 kept), 2->1 (0.6 dropped)
        // outcomes T,F,F: kept pairs (0,1) discordant, (1,0) discordant
        let got = estimate_from_panel_distances(&d, &members, &y).unwrap();
        assert_eq!(got, 1.0);
    }

    #[test]
    fn full_estimate_pipeline_recovers_separated_groups() {
        // two clusters per panel; outcome flips only in the second cluster
        let mut rng = seeded_rng(91);
        let p = 3;
        let mut z = Vec::new();
        let mut y = Vec::new();
        let n_per = 40;
        for i in 0..n_per {
            let centre = if i % 2 == 0 { 0.0 } else { 6.0 };
            for _ in 0..p {
                z.push(centre + 0.1 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
            }
            y.push(if centre == 0.0 { true } else { rng.gen::<f64>() < 0.5 });
        }
        let panels = vec![(0..n_per).collect::<Vec<usize>>()];
        let got = genetic_mahalanobis_estimate(&z, p, &y, &panels, &[1.0, 1.0, 1.0]);
        let rate = got[0].unwrap();
        // concordant cluster contributes zeros; mixed cluster pushes the rate
        // strictly inside (0, 1)
        assert!(rate > 0.0 && rate < 1.0, "{rate}");
    }
}
