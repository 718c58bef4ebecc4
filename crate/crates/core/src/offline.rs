//! The offline pipeline: per-user fits, the user graph, aggregation over the
//! test user's neighbours and pessimistic policy selection.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::btl::{FeatureMap, UserDataset};
use crate::clustering::{
    build_graph, confidence_radius, confidence_radius_ir, select_gamma_over, select_gamma_under,
    ClusterGraph, ClusterMode, ClusterParams, UserEstimate,
};
use crate::error::{Error, Result};
use crate::linalg::{SpdFactor, Vector};
use crate::mle::{build_gramian, fit_aggregated, fit_mle, GramianState, MleConfig};

/// Deterministic map from context index to action index.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Policy {
    choice: Vec<usize>,
}

impl Policy {
    pub fn from_choices(choice: Vec<usize>) -> Self {
        Policy { choice }
    }

    pub fn constant(n_contexts: usize, action: usize) -> Self {
        Policy {
            choice: vec![action; n_contexts],
        }
    }

    pub fn action(&self, context: usize) -> usize {
        self.choice[context]
    }

    pub fn choices(&self) -> &[usize] {
        &self.choice
    }

    fn check(&self, feat: &FeatureMap) -> Result<()> {
        if self.choice.len() != feat.n_contexts() {
            return Err(Error::contract(format!(
                "policy covers {} contexts, feature map has {}",
                self.choice.len(),
                feat.n_contexts()
            )));
        }
        if let Some(&a) = self.choice.iter().find(|&&a| a >= feat.n_actions()) {
            return Err(Error::contract(format!("action index {a} out of range")));
        }
        Ok(())
    }

    /// `Σ_x ρ(x) φ(x, π(x))`.
    pub fn mean_feature(&self, feat: &FeatureMap) -> Vector {
        let mut acc = Vector::zeros(feat.dim());
        for (x, &a) in self.choice.iter().enumerate() {
            acc.axpy(feat.rho(x), feat.phi(x, a), 1.0);
        }
        acc
    }

    pub fn to_named(&self, feat: &FeatureMap) -> BTreeMap<String, String> {
        self.choice
            .iter()
            .enumerate()
            .map(|(x, &a)| (feat.contexts()[x].clone(), feat.actions()[a].clone()))
            .collect()
    }

    pub fn from_named(map: &BTreeMap<String, String>, feat: &FeatureMap) -> Result<Self> {
        let mut choice = vec![usize::MAX; feat.n_contexts()];
        for (c, a) in map {
            choice[feat.context_index(c)?] = feat.action_index(a)?;
        }
        if let Some(x) = choice.iter().position(|&a| a == usize::MAX) {
            return Err(Error::contract(format!(
                "policy has no action for context {}",
                feat.contexts()[x]
            )));
        }
        Ok(Policy { choice })
    }
}

/// Per-context `argmax_a θᵀφ(x, a)`; the first action wins ties.
pub fn greedy_policy(theta: &Vector, feat: &FeatureMap) -> Policy {
    let choice = (0..feat.n_contexts())
        .map(|x| {
            let mut best = (0, f64::NEG_INFINITY);
            for a in 0..feat.n_actions() {
                let v = theta.dot(feat.phi(x, a));
                if v > best.1 {
                    best = (a, v);
                }
            }
            best.0
        })
        .collect();
    Policy { choice }
}

/// `β̃ = (2√(d log(1 + 4Ñκ/(λd)) + 2 log(2U/δ)) + √(λκ)) / κ`.
pub fn beta_tilde(n_tilde: usize, dim: usize, cfg: &MleConfig, params: &ClusterParams) -> f64 {
    let d = dim as f64;
    let log_det = d * (1.0 + 4.0 * n_tilde as f64 * cfg.kappa / (cfg.lambda * d)).ln();
    let log_union = 2.0 * (2.0 * params.n_users as f64 / params.delta).ln();
    (2.0 * (log_det + log_union).sqrt() + (cfg.lambda * cfg.kappa).sqrt()) / cfg.kappa
}

/// Everything the pessimistic objective needs.
#[derive(Debug, Clone)]
pub struct PessimismState {
    pub theta_tilde: Vector,
    pub gramian: GramianState,
    pub beta_tilde: f64,
    pub w: Vector,
    factor: SpdFactor,
}

impl PessimismState {
    pub fn new(theta_tilde: Vector, gramian: GramianState, beta_tilde: f64, w: Vector) -> Result<Self> {
        if !(beta_tilde >= 0.0) {
            return Err(Error::contract("beta_tilde must be >= 0"));
        }
        if theta_tilde.len() != gramian.dim() || w.len() != gramian.dim() {
            return Err(Error::contract("pessimism state dimensions disagree"));
        }
        let factor = SpdFactor::new(&gramian.m)?;
        Ok(PessimismState {
            theta_tilde,
            gramian,
            beta_tilde,
            w,
            factor,
        })
    }

    /// `(φ̄ − w)ᵀθ̃ − β̃ ‖φ̄ − w‖_{M̃⁻¹}` for a mean feature `φ̄`.
    pub fn value_at(&self, mean_feature: &Vector) -> f64 {
        let shift = mean_feature - &self.w;
        shift.dot(&self.theta_tilde) - self.beta_tilde * self.factor.inv_quad(&shift).sqrt()
    }
}

pub fn pessimistic_value(pi: &Policy, st: &PessimismState, feat: &FeatureMap) -> Result<f64> {
    pi.check(feat)?;
    if feat.dim() != st.w.len() {
        return Err(Error::contract("feature and state dimensions disagree"));
    }
    Ok(st.value_at(&pi.mean_feature(feat)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicySearch {
    /// Every assignment, when there are at most a million of them.
    Exhaustive,
    /// Cyclic first-improvement ascent from the greedy-linear policy.
    Coordinate,
    /// Exhaustive up to ten thousand assignments, coordinate beyond.
    Auto,
}

pub const EXHAUSTIVE_LIMIT: u64 = 1_000_000;
const AUTO_EXHAUSTIVE_LIMIT: u64 = 10_000;

fn policy_count(feat: &FeatureMap) -> Option<u64> {
    (feat.n_actions() as u64).checked_pow(u32::try_from(feat.n_contexts()).ok()?)
}

/// `argmax_π J̃(π)` by the requested strategy.
pub fn best_policy(st: &PessimismState, feat: &FeatureMap, search: PolicySearch) -> Result<Policy> {
    if feat.dim() != st.w.len() {
        return Err(Error::contract("feature and state dimensions disagree"));
    }
    let count = policy_count(feat);
    match search {
        PolicySearch::Exhaustive => match count {
            Some(c) if c <= EXHAUSTIVE_LIMIT => Ok(exhaustive(st, feat)),
            _ => Err(Error::Size(format!(
                "{}^{} policies exceed the exhaustive limit of {EXHAUSTIVE_LIMIT}",
                feat.n_actions(),
                feat.n_contexts()
            ))),
        },
        PolicySearch::Coordinate => Ok(coordinate_ascent(
            st,
            feat,
            greedy_policy(&st.theta_tilde, feat),
        )),
        PolicySearch::Auto => match count {
            Some(c) if c <= AUTO_EXHAUSTIVE_LIMIT => Ok(exhaustive(st, feat)),
            _ => best_policy(st, feat, PolicySearch::Coordinate),
        },
    }
}

/// Odometer over assignments, last context fastest; the lexicographically
/// first maximiser wins.
fn exhaustive(st: &PessimismState, feat: &FeatureMap) -> Policy {
    let (nx, na) = (feat.n_contexts(), feat.n_actions());
    let mut current = vec![0usize; nx];
    let mut best = (current.clone(), f64::NEG_INFINITY);
    loop {
        let v = st.value_at(&Policy::from_choices(current.clone()).mean_feature(feat));
        if v > best.1 {
            best = (current.clone(), v);
        }
        let mut k = nx;
        loop {
            if k == 0 {
                return Policy::from_choices(best.0);
            }
            k -= 1;
            current[k] += 1;
            if current[k] < na {
                break;
            }
            current[k] = 0;
        }
    }
}

/// Visits contexts in order, switching to the first action that strictly
/// improves `J̃`, until a full pass changes nothing. Values are recomputed
/// from scratch so the result does not depend on the path taken.
pub fn coordinate_ascent(st: &PessimismState, feat: &FeatureMap, start: Policy) -> Policy {
    let mut pi = start;
    let mut value = st.value_at(&pi.mean_feature(feat));
    loop {
        let mut changed = false;
        for x in 0..feat.n_contexts() {
            let keep = pi.choice[x];
            for a in 0..feat.n_actions() {
                if a == keep {
                    continue;
                }
                pi.choice[x] = a;
                let v = st.value_at(&pi.mean_feature(feat));
                if v > value {
                    value = v;
                    changed = true;
                    break;
                }
                pi.choice[x] = keep;
            }
        }
        if !changed {
            return pi;
        }
    }
}

/// Mean over `ρ_p` of the feature of each context's most frequently observed
/// action in the offline triples (either side of a comparison counts; the
/// first action wins ties). Contexts never observed use the overall most
/// frequent action. Zero when no triples are available.
pub fn default_reference(datasets: &[UserDataset], feat: &FeatureMap) -> Vector {
    let (nx, na) = (feat.n_contexts(), feat.n_actions());
    let mut counts = vec![vec![0usize; na]; nx];
    let mut seen = false;
    for t in datasets.iter().filter_map(|d| d.triples.as_ref()).flatten() {
        counts[t.context][t.action] += 1;
        counts[t.context][t.other] += 1;
        seen = true;
    }
    if !seen {
        return Vector::zeros(feat.dim());
    }
    let argmax = |row: &[usize]| {
        let mut best = 0;
        for (a, &c) in row.iter().enumerate() {
            if c > row[best] {
                best = a;
            }
        }
        best
    };
    let totals: Vec<usize> = (0..na).map(|a| counts.iter().map(|r| r[a]).sum()).collect();
    let fallback = argmax(&totals);
    let mut w = Vector::zeros(feat.dim());
    for (x, row) in counts.iter().enumerate() {
        let a = if row.iter().all(|&c| c == 0) {
            fallback
        } else {
            argmax(row)
        };
        w.axpy(feat.rho(x), feat.phi(x, a), 1.0);
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GammaPolicy {
    Fixed,
    Under,
    Over,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OfflineConfig {
    pub mle: MleConfig,
    pub cluster: ClusterParams,
    pub gamma_policy: GammaPolicy,
    pub search: PolicySearch,
}

impl OfflineConfig {
    pub fn validate(&self) -> Result<()> {
        self.mle.validate()?;
        self.cluster.validate()
    }
}

/// Fitted statistics of one user.
#[derive(Debug, Clone)]
pub struct UserStats {
    pub theta_hat: Vector,
    pub gramian: GramianState,
    pub lambda_min: f64,
    /// Confidence radius after `radius_scale`.
    pub ci: f64,
}

impl UserStats {
    pub fn estimate(&self) -> UserEstimate {
        UserEstimate {
            theta: self.theta_hat.clone(),
            ci: self.ci,
            n: self.gramian.n_samples,
        }
    }
}

/// Feature dimension from the feature map, else from the first sample.
pub fn infer_dim(datasets: &[UserDataset], feat: Option<&FeatureMap>) -> Result<usize> {
    if let Some(f) = feat {
        return Ok(f.dim());
    }
    datasets
        .iter()
        .find_map(|d| d.samples.first().map(|s| s.z.len()))
        .ok_or_else(|| Error::config("cannot infer the feature dimension from empty data"))
}

/// Per-user MLE, Gramian, minimum eigenvalue and radius, in input order.
pub fn compute_user_stats(
    datasets: &[UserDataset],
    dim: usize,
    cfg: &OfflineConfig,
) -> Result<Vec<UserStats>> {
    cfg.validate()?;
    datasets
        .par_iter()
        .map(|d| {
            let theta_hat = fit_mle(&d.samples, dim, &cfg.mle, None)?;
            let gramian = build_gramian(&d.samples, dim, &cfg.mle);
            let lambda_min = gramian.lambda_min()?;
            let raw = match cfg.cluster.mode {
                ClusterMode::General => {
                    confidence_radius(d.len(), lambda_min, dim, &cfg.cluster, &cfg.mle)?
                }
                ClusterMode::ItemRegularity(reg) if !d.is_empty() => {
                    confidence_radius_ir(d.len(), dim, &reg, &cfg.cluster, &cfg.mle)?
                }
                ClusterMode::ItemRegularity(_) => f64::INFINITY,
            };
            Ok(UserStats {
                theta_hat,
                gramian,
                lambda_min,
                ci: raw * cfg.cluster.radius_scale,
            })
        })
        .collect()
}

/// Aggregate estimate and pessimistic decision for one user set.
#[derive(Debug, Clone)]
pub struct PessimisticOutcome {
    pub members: Vec<usize>,
    pub state: PessimismState,
    pub lambda_min: f64,
    pub policy: Option<Policy>,
    pub j_tilde: Option<f64>,
}

impl PessimisticOutcome {
    pub fn n_tilde(&self) -> usize {
        self.state.gramian.n_samples
    }
}

/// Fits one MLE over the members' pooled data and, with a feature map,
/// picks the pessimistic policy. `members` must be ascending and distinct.
pub fn pessimistic_output(
    datasets: &[UserDataset],
    feat: Option<&FeatureMap>,
    members: &[usize],
    dim: usize,
    w: &Vector,
    cfg: &OfflineConfig,
) -> Result<PessimisticOutcome> {
    if members.windows(2).any(|p| p[0] >= p[1]) {
        return Err(Error::contract("member set must be ascending and distinct"));
    }
    if let Some(&m) = members.iter().find(|&&m| m >= datasets.len()) {
        return Err(Error::Lookup {
            kind: "user index",
            name: m.to_string(),
        });
    }
    let pooled: Vec<&UserDataset> = members.iter().map(|&m| &datasets[m]).collect();
    let (theta_tilde, gramian) = fit_aggregated(&pooled, dim, &cfg.mle)?;
    let lambda_min = gramian.lambda_min()?;
    let beta = beta_tilde(gramian.n_samples, dim, &cfg.mle, &cfg.cluster) * cfg.cluster.radius_scale;
    let state = PessimismState::new(theta_tilde, gramian, beta, w.clone())?;
    let (policy, j_tilde) = match feat {
        Some(f) => {
            let pi = best_policy(&state, f, cfg.search)?;
            let j = state.value_at(&pi.mean_feature(f));
            (Some(pi), Some(j))
        }
        None => (None, None),
    };
    Ok(PessimisticOutcome {
        members: members.to_vec(),
        state,
        lambda_min,
        policy,
        j_tilde,
    })
}

pub fn user_index(datasets: &[UserDataset], user: &str) -> Result<usize> {
    datasets
        .iter()
        .position(|d| d.user == user)
        .ok_or_else(|| Error::Lookup {
            kind: "user",
            name: user.to_string(),
        })
}

/// Result of one offline run for one test user.
#[derive(Debug, Clone)]
pub struct OfflineRun {
    pub test_index: usize,
    pub gamma_hat: f64,
    pub stats: Vec<UserStats>,
    pub graph: ClusterGraph,
    pub outcome: PessimisticOutcome,
}

/// Offline clustering of preference learning for `test_user`, reusing
/// precomputed per-user statistics.
pub fn run_off_c2pl_with_stats(
    datasets: &[UserDataset],
    feat: Option<&FeatureMap>,
    test_user: &str,
    w: &Vector,
    cfg: &OfflineConfig,
    stats: Vec<UserStats>,
) -> Result<OfflineRun> {
    cfg.validate()?;
    if cfg.cluster.n_users != datasets.len() {
        return Err(Error::config(format!(
            "cluster parameters expect {} users, data has {}",
            cfg.cluster.n_users,
            datasets.len()
        )));
    }
    if stats.len() != datasets.len() {
        return Err(Error::contract("one statistics entry per user is required"));
    }
    let test_index = user_index(datasets, test_user)?;
    let dim = infer_dim(datasets, feat)?;
    let estimates: Vec<UserEstimate> = stats.iter().map(UserStats::estimate).collect();
    let gamma_hat = match cfg.gamma_policy {
        GammaPolicy::Fixed => cfg.cluster.gamma_hat,
        GammaPolicy::Under => select_gamma_under(test_index, &estimates, cfg.cluster.alpha)?,
        GammaPolicy::Over => select_gamma_over(test_index, &estimates, cfg.cluster.alpha)?,
    };
    let params = cfg.cluster.with_gamma_hat(gamma_hat);
    let graph = build_graph(&estimates, &params);
    let members = graph.neighbor_set(test_index)?;
    let outcome = pessimistic_output(datasets, feat, &members, dim, w, cfg)?;
    Ok(OfflineRun {
        test_index,
        gamma_hat,
        stats,
        graph,
        outcome,
    })
}

/// Offline clustering of preference learning for `test_user`.
pub fn run_off_c2pl(
    datasets: &[UserDataset],
    feat: Option<&FeatureMap>,
    test_user: &str,
    w: &Vector,
    cfg: &OfflineConfig,
) -> Result<OfflineRun> {
    let dim = infer_dim(datasets, feat)?;
    let stats = compute_user_stats(datasets, dim, cfg)?;
    run_off_c2pl_with_stats(datasets, feat, test_user, w, cfg, stats)
}

/// JSON summary of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub test_user: String,
    pub method: String,
    /// Absent for methods that do not threshold estimate distances.
    pub gamma_hat: Option<f64>,
    pub edges: Vec<(String, String)>,
    pub neighbors: Vec<String>,
    pub lambda_min: f64,
    pub n_tilde: usize,
    pub beta_tilde: f64,
    pub policy: Option<BTreeMap<String, String>>,
    pub j_tilde: Option<f64>,
    pub subopt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimation_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_homog: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_heterog: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl PipelineReport {
    /// Report skeleton for an outcome; ground-truth fields start empty.
    pub fn from_outcome(
        method: &str,
        datasets: &[UserDataset],
        test_index: usize,
        gamma_hat: Option<f64>,
        graph: Option<&ClusterGraph>,
        outcome: &PessimisticOutcome,
        feat: Option<&FeatureMap>,
    ) -> Self {
        let name = |i: usize| datasets[i].user.clone();
        PipelineReport {
            test_user: name(test_index),
            method: method.to_string(),
            gamma_hat,
            edges: graph
                .map(|g| g.edges().into_iter().map(|(u, v)| (name(u), name(v))).collect())
                .unwrap_or_default(),
            neighbors: outcome.members.iter().map(|&m| name(m)).collect(),
            lambda_min: outcome.lambda_min,
            n_tilde: outcome.n_tilde(),
            beta_tilde: outcome.state.beta_tilde,
            policy: match (&outcome.policy, feat) {
                (Some(p), Some(f)) => Some(p.to_named(f)),
                _ => None,
            },
            j_tilde: outcome.j_tilde,
            subopt: None,
            estimation_error: None,
            n_homog: None,
            n_heterog: None,
            eta: None,
            flags: Vec::new(),
        }
    }
}

impl OfflineRun {
    pub fn report(&self, method: &str, datasets: &[UserDataset], feat: Option<&FeatureMap>) -> PipelineReport {
        PipelineReport::from_outcome(
            method,
            datasets,
            self.test_index,
            Some(self.gamma_hat),
            Some(&self.graph),
            &self.outcome,
            feat,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::btl::{generate_offline_data, generate_population, PopulationConfig};
    use crate::linalg::SymMat;
    use crate::mle::default_kappa;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_map(nx: usize, na: usize, d: usize, seed: u64) -> FeatureMap {
        FeatureMap::random(nx, na, d, 0.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn state(theta: Vector, diag: &[f64], beta: f64, w: Vector) -> PessimismState {
        let d = diag.len();
        let cfg = MleConfig::default();
        let mut g = GramianState::prior(d, &cfg);
        g.m = SymMat::from_diagonal(diag);
        PessimismState::new(theta, g, beta, w).unwrap()
    }

    #[test]
    fn beta_tilde_examples() {
        let cfg = MleConfig::default();
        let p = ClusterParams::new(1.0, 0.1, 0.0, 2).unwrap();
        let k = default_kappa();
        let zero = beta_tilde(0, 2, &cfg, &p);
        assert!((zero - (2.0 * (2.0 * 40f64.ln()).sqrt() + k.sqrt()) / k).abs() < 1e-12);
        let hand = (2.0 * (2.0 * (1.0 + 4.0 * 100.0 * k / 2.0).ln() + 2.0 * 40f64.ln()).sqrt() + k.sqrt()) / k;
        assert!((beta_tilde(100, 2, &cfg, &p) - hand).abs() < 1e-12 * hand);
        let mut prev = zero;
        for n in 1..50 {
            let b = beta_tilde(n * 10, 2, &cfg, &p);
            assert!(b > prev);
            prev = b;
        }
        assert!(beta_tilde(100, 3, &cfg, &p) > beta_tilde(100, 2, &cfg, &p));
    }

    #[test]
    fn value_examples() {
        let feat = small_map(3, 4, 2, 1);
        let theta = Vector::from_vec(vec![0.7, -0.2]);
        let pi = Policy::from_choices(vec![1, 3, 0]);
        let plain = state(theta.clone(), &[2.0, 5.0], 0.0, Vector::zeros(2));
        let linear = pi.mean_feature(&feat).dot(&theta);
        assert!((pessimistic_value(&pi, &plain, &feat).unwrap() - linear).abs() < 1e-15);

        let anchored = state(theta, &[2.0, 5.0], 3.0, pi.mean_feature(&feat));
        assert_eq!(pessimistic_value(&pi, &anchored, &feat).unwrap(), 0.0);
    }

    #[test]
    fn value_hand_computation() {
        // single context, actions at (1,0) and (0,1), M = diag(4, 1)
        let mut phi = BTreeMap::new();
        let mut row = BTreeMap::new();
        row.insert("a".to_string(), vec![1.0, 0.0]);
        row.insert("b".to_string(), vec![0.0, 1.0]);
        phi.insert("x".to_string(), row);
        let rho = BTreeMap::from([("x".to_string(), 1.0)]);
        let feat = FeatureMap::new(&phi, &rho).unwrap();
        let st = state(Vector::from_vec(vec![0.5, 0.6]), &[4.0, 1.0], 0.2, Vector::zeros(2));
        let a = pessimistic_value(&Policy::from_choices(vec![0]), &st, &feat).unwrap();
        let b = pessimistic_value(&Policy::from_choices(vec![1]), &st, &feat).unwrap();
        assert!((a - (0.5 - 0.2 * 0.5)).abs() < 1e-15);
        assert!((b - (0.6 - 0.2 * 1.0)).abs() < 1e-15);
        assert_eq!(best_policy(&st, &feat, PolicySearch::Exhaustive).unwrap().choices(), &[0]);
    }

    #[test]
    fn pessimism_bounds_linear_value() {
        let feat = small_map(4, 3, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let st = state(Vector::from_vec(vec![0.3, 0.9, -0.4]), &[3.0, 7.0, 2.0], 1.5, Vector::from_vec(vec![0.1, 0.0, 0.2]));
        for _ in 0..50 {
            let pi = Policy::from_choices((0..4).map(|_| rng.random_range(0..3)).collect());
            let lin = (pi.mean_feature(&feat) - &st.w).dot(&st.theta_tilde);
            assert!(pessimistic_value(&pi, &st, &feat).unwrap() <= lin);
        }
    }

    fn brute_force(st: &PessimismState, feat: &FeatureMap) -> f64 {
        let mut best = f64::NEG_INFINITY;
        let (nx, na) = (feat.n_contexts(), feat.n_actions());
        for code in 0..na.pow(nx as u32) {
            let mut c = code;
            let choice = (0..nx)
                .map(|_| {
                    let a = c % na;
                    c /= na;
                    a
                })
                .collect();
            best = best.max(pessimistic_value(&Policy::from_choices(choice), st, feat).unwrap());
        }
        best
    }

    #[test]
    fn exhaustive_agrees_with_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for seed in 0..20 {
            let feat = small_map(2, 3, 3, seed);
            let th = Vector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let st = state(th, &[2.0, 3.0, 9.0], rng.random_range(0.0..3.0), Vector::zeros(3));
            let pi = best_policy(&st, &feat, PolicySearch::Exhaustive).unwrap();
            assert_eq!(pessimistic_value(&pi, &st, &feat).unwrap(), brute_force(&st, &feat));
        }
    }

    #[test]
    fn decoupled_objective_is_greedy() {
        let feat = small_map(5, 4, 3, 5);
        let th = Vector::from_vec(vec![0.2, -0.5, 0.8]);
        let st = state(th.clone(), &[1.0, 1.0, 1.0], 0.0, Vector::zeros(3));
        for s in [PolicySearch::Exhaustive, PolicySearch::Coordinate] {
            assert_eq!(best_policy(&st, &feat, s).unwrap(), greedy_policy(&th, &feat));
        }
    }

    #[test]
    fn coordinate_never_beats_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for seed in 0..10 {
            let feat = small_map(3, 4, 4, 100 + seed);
            let th = Vector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
            let w = Vector::from_fn(4, |_, _| rng.random_range(-0.3..0.3));
            let st = state(th, &[1.0, 2.0, 4.0, 8.0], rng.random_range(0.0..4.0), w);
            let best = pessimistic_value(&best_policy(&st, &feat, PolicySearch::Exhaustive).unwrap(), &st, &feat).unwrap();
            let greedy = greedy_policy(&st.theta_tilde, &feat);
            let local = best_policy(&st, &feat, PolicySearch::Coordinate).unwrap();
            let lv = pessimistic_value(&local, &st, &feat).unwrap();
            assert!(lv >= pessimistic_value(&greedy, &st, &feat).unwrap());
            assert!(lv <= best);
            for _ in 0..10 {
                let start = Policy::from_choices((0..3).map(|_| rng.random_range(0..4)).collect());
                let v = pessimistic_value(&coordinate_ascent(&st, &feat, start), &st, &feat).unwrap();
                assert!(v <= best);
            }
        }
    }

    #[test]
    fn exhaustive_guard() {
        let feat = small_map(7, 8, 2, 7);
        let st = state(Vector::zeros(2), &[1.0, 1.0], 0.0, Vector::zeros(2));
        assert!(matches!(
            best_policy(&st, &feat, PolicySearch::Exhaustive),
            Err(Error::Size(_))
        ));
        assert!(best_policy(&st, &feat, PolicySearch::Auto).is_ok());
    }

    #[test]
    fn reference_shift_keeps_linear_argmax() {
        let feat = small_map(2, 3, 3, 8);
        let th = Vector::from_vec(vec![0.4, 0.1, -0.9]);
        let a = state(th.clone(), &[1.0, 2.0, 3.0], 0.0, Vector::zeros(3));
        let b = state(th, &[1.0, 2.0, 3.0], 0.0, Vector::from_vec(vec![0.5, -0.5, 0.1]));
        assert_eq!(
            best_policy(&a, &feat, PolicySearch::Exhaustive).unwrap(),
            best_policy(&b, &feat, PolicySearch::Exhaustive).unwrap()
        );
    }

    #[test]
    fn greedy_examples() {
        let feat = small_map(3, 4, 2, 9);
        assert_eq!(greedy_policy(&Vector::zeros(2), &feat), Policy::constant(3, 0));
        let th = Vector::from_vec(vec![0.3, -0.8]);
        assert_eq!(greedy_policy(&th, &feat), greedy_policy(&(&th * 7.5), &feat));
    }

    #[test]
    fn named_round_trip() {
        let feat = small_map(3, 4, 2, 10);
        let pi = Policy::from_choices(vec![2, 0, 3]);
        assert_eq!(Policy::from_named(&pi.to_named(&feat), &feat).unwrap(), pi);
    }

    #[test]
    fn default_reference_counts_actions() {
        let feat = small_map(2, 3, 2, 11);
        let empty = vec![UserDataset::default()];
        assert_eq!(default_reference(&empty, &feat), Vector::zeros(2));
        let t = |c, a, o| crate::btl::Triple { context: c, action: a, other: o };
        let d = UserDataset {
            user: "u".into(),
            samples: vec![],
            triples: Some(vec![t(0, 2, 1), t(0, 2, 0)]),
        };
        // context 0 favours action 2; context 1 unseen falls back to action 2 too
        let expect = feat.phi(0, 2) * feat.rho(0) + feat.phi(1, 2) * feat.rho(1);
        assert!((default_reference(&[d], &feat) - expect).norm() < 1e-15);
    }

    fn synthetic(seed: u64, users: usize, budget: usize) -> (FeatureMap, Vec<UserDataset>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feat = FeatureMap::random(6, 5, 4, 0.0, &mut rng).unwrap();
        let pop = generate_population(
            &PopulationConfig {
                users,
                clusters: 2,
                dim: 4,
                ..Default::default()
            },
            &mut rng,
        )
        .unwrap();
        let data = generate_offline_data(&pop, Some(&feat), budget, 1.0, &mut rng).unwrap();
        (feat, data)
    }

    fn config(users: usize, gamma_hat: f64) -> OfflineConfig {
        OfflineConfig {
            mle: MleConfig::default(),
            cluster: ClusterParams::new(1.0, 0.1, gamma_hat, users).unwrap(),
            gamma_policy: GammaPolicy::Fixed,
            search: PolicySearch::Coordinate,
        }
    }

    #[test]
    fn zero_gamma_reduces_to_single_user() {
        let (feat, data) = synthetic(12, 6, 80);
        let cfg = config(6, 0.0);
        let w = default_reference(&data, &feat);
        let run = run_off_c2pl(&data, Some(&feat), &data[2].user, &w, &cfg).unwrap();
        assert_eq!(run.graph.n_edges(), 0);
        assert_eq!(run.outcome.members, vec![2]);
        assert_eq!(run.outcome.state.theta_tilde, run.stats[2].theta_hat);
        assert_eq!(run.outcome.state.gramian, run.stats[2].gramian);
    }

    #[test]
    fn identical_users_pool_everything() {
        let (feat, mut data) = synthetic(13, 2, 60);
        data[1].samples = data[0].samples.clone();
        data[1].triples = data[0].triples.clone();
        let cfg = config(2, 1e4);
        let w = Vector::zeros(4);
        let run = run_off_c2pl(&data, Some(&feat), &data[0].user, &w, &cfg).unwrap();
        assert_eq!(run.outcome.members, vec![0, 1]);
        assert_eq!(run.outcome.n_tilde(), 120);
        let twice: Vec<_> = data[0].samples.iter().chain(&data[1].samples).collect();
        assert_eq!(run.outcome.state.gramian, build_gramian(&twice, 4, &cfg.mle));
    }

    #[test]
    fn unknown_user_and_mismatched_count_are_rejected() {
        let (feat, data) = synthetic(14, 3, 10);
        let w = Vector::zeros(4);
        assert!(matches!(
            run_off_c2pl(&data, Some(&feat), "nobody", &w, &config(3, 0.0)),
            Err(Error::Lookup { .. })
        ));
        assert!(matches!(
            run_off_c2pl(&data, Some(&feat), &data[0].user, &w, &config(4, 0.0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn report_serialises_expected_keys() {
        let (feat, data) = synthetic(15, 3, 20);
        let w = Vector::zeros(4);
        let run = run_off_c2pl(&data, Some(&feat), &data[1].user, &w, &config(3, 0.0)).unwrap();
        let json = serde_json::to_value(run.report("offc2pl", &data, Some(&feat))).unwrap();
        for key in [
            "test_user", "gamma_hat", "edges", "neighbors", "lambda_min", "n_tilde", "beta_tilde",
            "policy", "j_tilde", "subopt",
        ] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn raw_mode_has_no_policy() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let pop = generate_population(
            &PopulationConfig {
                users: 3,
                clusters: 1,
                dim: 3,
                ..Default::default()
            },
            &mut rng,
        )
        .unwrap();
        let data = generate_offline_data(&pop, None, 30, 1.0, &mut rng).unwrap();
        let run = run_off_c2pl(&data, None, &data[0].user, &Vector::zeros(3), &config(3, 0.0)).unwrap();
        assert!(run.outcome.policy.is_none() && run.outcome.j_tilde.is_none());
    }
}
