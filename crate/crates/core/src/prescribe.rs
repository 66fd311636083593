//! Physician behaviour models, outcome generation and the ground-truth
//! discordance oracle.
//!
//! Each physician prescribes eligible patients with probability `p_high` and
//! non-eligible patients with probability `p_low`. Ground-truth discordance
//! is the fraction of discordant pairs among a panel's eligible patients;
//! its large-panel limit is `2 p_high (1 - p_high)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicianProfile {
    pub physician_id: usize,
    pub p_high: f64,
    pub p_low: f64,
    /// 1-based behaviour group under the five-group model.
    pub group_label: Option<u8>,
}

/// Five-group pairs in group order: (p_high, p_low).
pub const FIVE_GROUP_PAIRS: [(f64, f64); 5] =
    [(1.00, 0.00), (0.90, 0.05), (0.80, 0.10), (0.70, 0.20), (0.50, 0.50)];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PhysicianModel {
    /// Five well-separated behaviour groups of equal size (J divisible by 5).
    FiveGroup,
    /// `p_high` drawn uniformly per physician, `p_low` fixed.
    ContinuousUniform { p_high_lo: f64, p_high_hi: f64, p_low: f64 },
}

/// Behaviour profiles for `j` physicians under the given model.
pub fn assign_profiles(model: &PhysicianModel, j: usize, seed: u64) -> Result<Vec<PhysicianProfile>> {
    match model {
        PhysicianModel::FiveGroup => {
            if j == 0 || j % 5 != 0 {
                return Err(Error::Config(format!("five-group model needs J divisible by 5, got {j}")));
            }
            let per_group = j / 5;
            Ok((0..j)
                .map(|id| {
                    let group = id / per_group;
                    let (p_high, p_low) = FIVE_GROUP_PAIRS[group];
                    PhysicianProfile { physician_id: id, p_high, p_low, group_label: Some(group as u8 + 1) }
                })
                .collect())
        }
        PhysicianModel::ContinuousUniform { p_high_lo, p_high_hi, p_low } => {
            if !(0.0..=1.0).contains(p_high_lo) || p_high_hi < p_high_lo || *p_high_hi > 1.0 {
                return Err(Error::Config(format!("bad continuous p_high range [{p_high_lo}, {p_high_hi}]")));
            }
            let mut rng = seeded_rng(seed);
            Ok((0..j)
                .map(|id| PhysicianProfile {
                    physician_id: id,
                    p_high: p_high_lo + (p_high_hi - p_high_lo) * rng.gen::<f64>(),
                    p_low: *p_low,
                    group_label: None,
                })
                .collect())
        }
    }
}

/// Expected ground-truth discordance of a physician with the given `p_high`.
pub fn theoretical_discordance(p_high: f64) -> f64 {
    2.0 * p_high * (1.0 - p_high)
}

/// Prescription outcomes drawn patient-by-patient in index order.
pub fn draw_outcomes(m: &[bool], physician_of: &[usize], profiles: &[PhysicianProfile], seed: u64) -> Vec<bool> {
    assert_eq!(m.len(), physician_of.len());
    let mut rng = seeded_rng(seed);
    m.iter()
        .zip(physician_of)
        .map(|(&eligible, &ph)| {
            let profile = &profiles[ph];
            let p = if eligible { profile.p_high } else { profile.p_low };
            rng.gen::<f64>() < p
        })
        .collect()
}

/// Discordance rate over one panel's eligible outcomes: discordant pairs
/// over all pairs, computed in closed form from the outcome counts.
pub fn ground_truth_discordance(eligible_outcomes: &[bool], physician: usize) -> Result<f64> {
    let n = eligible_outcomes.len();
    if n < 2 {
        return Err(Error::UndefinedGroundTruth { physician });
    }
    let n1 = eligible_outcomes.iter().filter(|&&y| y).count() as f64;
    let n0 = n as f64 - n1;
    Ok(n1 * n0 / (n as f64 * (n as f64 - 1.0) / 2.0))
}

/// Per-physician ground truth over the whole cohort. Errors if any panel has
/// fewer than two eligible patients; that situation must surface, not zero.
pub fn ground_truth_by_physician(y: &[bool], m: &[bool], physician_of: &[usize], j: usize) -> Result<Vec<f64>> {
    let mut eligible_outcomes = vec![Vec::new(); j];
    for ((&yi, &mi), &ph) in y.iter().zip(m).zip(physician_of) {
        if mi {
            eligible_outcomes[ph].push(yi);
        }
    }
    eligible_outcomes
        .iter()
        .enumerate()
        .map(|(ph, outcomes)| ground_truth_discordance(outcomes, ph))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_group_profiles_follow_the_group_table() {
        let profiles = assign_profiles(&PhysicianModel::FiveGroup, 20, 0).unwrap();
        assert_eq!(profiles.len(), 20);
        // physician P5 (index 4) opens group 2, P17 (index 16) opens group 5
        assert_eq!((profiles[4].p_high, profiles[4].p_low), (0.90, 0.05));
        assert_eq!(profiles[4].group_label, Some(2));
        assert_eq!((profiles[16].p_high, profiles[16].p_low), (0.50, 0.50));
        assert_eq!(profiles[16].group_label, Some(5));
        assert!(profiles.iter().all(|p| p.p_low <= p.p_high));
    }

    #[test]
    fn five_group_rejects_indivisible_j() {
        assert!(assign_profiles(&PhysicianModel::FiveGroup, 21, 0).is_err());
        assert!(assign_profiles(&PhysicianModel::FiveGroup, 0, 0).is_err());
    }

    #[test]
    fn continuous_profiles_stay_in_range() {
        let model = PhysicianModel::ContinuousUniform { p_high_lo: 0.5, p_high_hi: 1.0, p_low: 0.05 };
        let profiles = assign_profiles(&model, 50, 11).unwrap();
        assert!(profiles.iter().all(|p| (0.5..=1.0).contains(&p.p_high) && p.p_low == 0.05));
        // distinct draws across physicians
        assert!(profiles.windows(2).any(|w| w[0].p_high != w[1].p_high));
    }

    #[test]
    fn theoretical_discordance_matches_group_table() {
        assert!((theoretical_discordance(0.90) - 0.18).abs() < 1e-15);
        assert!((theoretical_discordance(0.70) - 0.42).abs() < 1e-15);
        assert_eq!(theoretical_discordance(1.00), 0.0);
        assert_eq!(theoretical_discordance(0.50), 0.5);
    }

    #[test]
    fn degenerate_probabilities_reproduce_eligibility() {
        let m: Vec<bool> = (0..200).map(|i| i % 3 == 0).collect();
        let physician_of = vec![0usize; 200];
        let profiles =
            vec![PhysicianProfile { physician_id: 0, p_high: 1.0, p_low: 0.0, group_label: Some(1) }];
        let y = draw_outcomes(&m, &physician_of, &profiles, 5);
        assert_eq!(y, m);
    }

    #[test]
    fn outcome_rates_sit_inside_binomial_bands() {
        let n = 1000;
        let m: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let physician_of = vec![0usize; n];
        let profiles =
            vec![PhysicianProfile { physician_id: 0, p_high: 0.8, p_low: 0.05, group_label: None }];
        let y = draw_outcomes(&m, &physician_of, &profiles, 6);
        let eligible: Vec<bool> = y.iter().zip(&m).filter(|(_, &mi)| mi).map(|(&yi, _)| yi).collect();
        let non: Vec<bool> = y.iter().zip(&m).filter(|(_, &mi)| !mi).map(|(&yi, _)| yi).collect();
        let rate_e = eligible.iter().filter(|&&v| v).count() as f64 / eligible.len() as f64;
        let rate_n = non.iter().filter(|&&v| v).count() as f64 / non.len() as f64;
        assert!((0.72..=0.88).contains(&rate_e), "eligible rate {rate_e}");
        assert!(rate_n <= 0.10, "non-eligible rate {rate_n}");
    }

    #[test]
    fn outcomes_are_deterministic_given_seed() {
        let m = vec![true; 64];
        let physician_of = vec![0usize; 64];
        let profiles =
            vec![PhysicianProfile { physician_id: 0, p_high: 0.5, p_low: 0.5, group_label: None }];
        assert_eq!(
            draw_outcomes(&m, &physician_of, &profiles, 9),
            draw_outcomes(&m, &physician_of, &profiles, 9)
        );
        assert_ne!(
            draw_outcomes(&m, &physician_of, &profiles, 9),
            draw_outcomes(&m, &physician_of, &profiles, 10)
        );
    }

    #[test]
    fn ground_truth_closed_form_matches_pair_enumeration() {
        let cases: Vec<Vec<bool>> = vec![
            vec![true, true, false],
            vec![true, false, true, false, false],
            vec![true; 10],
            (0..50).map(|i| i % 3 != 0).collect(),
        ];
        for outcomes in cases {
            let closed = ground_truth_discordance(&outcomes, 0).unwrap();
            let mut discordant = 0usize;
            let mut total = 0usize;
            for i in 0..outcomes.len() {
                for k in (i + 1)..outcomes.len() {
                    total += 1;
                    discordant += usize::from(outcomes[i] != outcomes[k]);
                }
            }
            let direct = discordant as f64 / total as f64;
            assert!((closed - direct).abs() < 1e-12, "closed {closed} direct {direct}");
        }
    }

    #[test]
    fn ground_truth_examples_and_errors() {
        assert!((ground_truth_discordance(&[true, true, false], 0).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(ground_truth_discordance(&[true; 5], 0).unwrap(), 0.0);
        assert!(matches!(
            ground_truth_discordance(&[true], 3),
            Err(Error::UndefinedGroundTruth { physician: 3 })
        ));
    }

    #[test]
    fn ground_truth_is_permutation_invariant_and_bounded() {
        let outcomes: Vec<bool> = (0..21).map(|i| i % 2 == 0).collect();
        let d = ground_truth_discordance(&outcomes, 0).unwrap();
        let mut reversed = outcomes.clone();
        reversed.reverse();
        assert_eq!(d, ground_truth_discordance(&reversed, 0).unwrap());
        let n = outcomes.len() as f64;
        assert!(d <= 0.5 * n / (n - 1.0) + 1e-12);
    }

    #[test]
    fn monte_carlo_discordance_converges_to_theory() {
        for (p_high, _) in FIVE_GROUP_PAIRS {
            let m = vec![true; 20000];
            let physician_of = vec![0usize; 20000];
            let profiles =
                vec![PhysicianProfile { physician_id: 0, p_high, p_low: 0.0, group_label: None }];
            let y = draw_outcomes(&m, &physician_of, &profiles, 1234);
            let d = ground_truth_discordance(&y, 0).unwrap();
            assert!(
                (d - theoretical_discordance(p_high)).abs() <= 0.02,
                "p_high {p_high}: {d} vs {}",
                theoretical_discordance(p_high)
            );
        }
    }
}
