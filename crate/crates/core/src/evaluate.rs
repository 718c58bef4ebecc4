//! Ground-truth evaluation: optimal policies, suboptimality gaps and the
//! homogeneous/heterogeneous split of a neighbour set.

use serde::{Deserialize, Serialize};

use crate::btl::{FeatureMap, Population, UserDataset};
use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::offline::{greedy_policy, Policy};

/// Users whose true preference vectors differ by at most this much are
/// treated as identical.
pub const SAME_THETA_TOL: f64 = 1e-9;

pub fn optimal_policy(theta_true: &Vector, feat: &FeatureMap) -> Policy {
    greedy_policy(theta_true, feat)
}

/// `Σ_x ρ(x) [max_a θᵀφ(x,a) − θᵀφ(x,π(x))]`.
pub fn suboptimality(pi: &Policy, theta_true: &Vector, feat: &FeatureMap) -> Result<f64> {
    if pi.choices().len() != feat.n_contexts() || theta_true.len() != feat.dim() {
        return Err(Error::contract("policy, truth and feature map disagree in shape"));
    }
    let mut gap = 0.0;
    for x in 0..feat.n_contexts() {
        let best = (0..feat.n_actions())
            .map(|a| theta_true.dot(feat.phi(x, a)))
            .fold(f64::NEG_INFINITY, f64::max);
        gap += feat.rho(x) * (best - theta_true.dot(feat.phi(x, pi.action(x))));
    }
    Ok(gap)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticCounts {
    /// Samples from neighbours sharing the test user's preference vector,
    /// the test user included.
    pub n_homog: usize,
    pub n_heterog: usize,
    pub n_total: usize,
    pub eta: f64,
}

/// Splits the samples of `members` by whether each member's true vector
/// equals the test user's. Users are matched to the population by name.
pub fn diagnostics(
    members: &[usize],
    test_index: usize,
    population: Option<&Population>,
    datasets: &[UserDataset],
) -> Result<DiagnosticCounts> {
    let pop = population.ok_or(Error::Unavailable("heterogeneity diagnostics"))?;
    let truth = |i: usize| -> Result<Vector> {
        let name = &datasets
            .get(i)
            .ok_or_else(|| Error::Lookup {
                kind: "user index",
                name: i.to_string(),
            })?
            .user;
        let p = pop.users.iter().position(|u| u == name).ok_or_else(|| Error::Lookup {
            kind: "user",
            name: name.clone(),
        })?;
        Ok(pop.theta(p))
    };
    let reference = truth(test_index)?;
    let (mut n_homog, mut n_heterog) = (0, 0);
    for &m in members {
        let n = datasets[m].len();
        if (truth(m)? - &reference).norm() <= SAME_THETA_TOL {
            n_homog += n;
        } else {
            n_heterog += n;
        }
    }
    let n_total = n_homog + n_heterog;
    Ok(DiagnosticCounts {
        n_homog,
        n_heterog,
        n_total,
        eta: if n_total == 0 {
            0.0
        } else {
            n_heterog as f64 / n_total as f64
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::btl::{generate_offline_data, generate_population, PopulationConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn two_action_map(r1: f64, r2: f64) -> FeatureMap {
        let row = BTreeMap::from([
            ("a".to_string(), vec![r1, 0.0]),
            ("b".to_string(), vec![r2, 0.0]),
        ]);
        FeatureMap::new(
            &BTreeMap::from([("x".to_string(), row)]),
            &BTreeMap::from([("x".to_string(), 1.0)]),
        )
        .unwrap()
    }

    #[test]
    fn suboptimality_examples() {
        let feat = two_action_map(1.0, 0.3);
        let theta = Vector::from_vec(vec![1.0, 0.0]);
        let worse = Policy::from_choices(vec![1]);
        assert!((suboptimality(&worse, &theta, &feat).unwrap() - 0.7).abs() < 1e-15);
        let best = optimal_policy(&theta, &feat);
        assert_eq!(suboptimality(&best, &theta, &feat).unwrap(), 0.0);
    }

    #[test]
    fn optimal_policy_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let feat = FeatureMap::random(2, 3, 3, 0.0, &mut rng).unwrap();
        assert_eq!(optimal_policy(&Vector::zeros(3), &feat), Policy::constant(2, 0));
        let th = Vector::from_vec(vec![0.2, 0.7, -0.1]);
        assert_eq!(optimal_policy(&th, &feat), optimal_policy(&(&th * 3.0), &feat));
        // enumeration oracle over all 9 policies
        let best_value = (0..9)
            .map(|c| Policy::from_choices(vec![c / 3, c % 3]).mean_feature(&feat).dot(&th))
            .fold(f64::NEG_INFINITY, f64::max);
        let v = optimal_policy(&th, &feat).mean_feature(&feat).dot(&th);
        assert!((v - best_value).abs() < 1e-15);
    }

    #[test]
    fn suboptimality_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let feat = FeatureMap::random(4, 5, 3, 0.5, &mut rng).unwrap();
            let th = Vector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let pi = Policy::from_choices((0..4).map(|_| rng.random_range(0..5)).collect());
            assert!(suboptimality(&pi, &th, &feat).unwrap() >= 0.0);
        }
    }

    #[test]
    fn diagnostics_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pop = generate_population(
            &PopulationConfig {
                users: 10,
                clusters: 3,
                dim: 2,
                ..Default::default()
            },
            &mut rng,
        )
        .unwrap();
        let data = generate_offline_data(&pop, None, 7, 1.0, &mut rng).unwrap();
        let all: Vec<usize> = (0..10).collect();
        let d = diagnostics(&all, 0, Some(&pop), &data).unwrap();
        assert_eq!(d.n_total, 70);
        assert_eq!(d.n_homog + d.n_heterog, d.n_total);
        let same = pop.members(pop.cluster_of[0]).len();
        assert_eq!(d.n_homog, 7 * same);
        assert!(d.eta <= 1.0);

        let solo = diagnostics(&[0], 0, Some(&pop), &data).unwrap();
        assert_eq!((solo.n_heterog, solo.n_total), (0, 7));
        assert!(matches!(
            diagnostics(&[0], 0, None, &data),
            Err(Error::Unavailable(_))
        ));
    }
}
