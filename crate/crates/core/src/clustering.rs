//! Offline user graph: confidence radii, the pairwise connection test and
//! the data-driven choices of the threshold `γ̂`.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::mle::MleConfig;

/// Item-regularity constants: the raw regularity `λ_a`, the tail variance
/// bound `σ²`, the candidate set size `S` and the two derived quantities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItemRegularityParams {
    pub lambda_a: f64,
    pub sigma2: f64,
    pub candidate_set_size: usize,
    pub smoothed: f64,
    pub n_min: usize,
}

impl ItemRegularityParams {
    pub fn new(
        lambda_a: f64,
        sigma2: f64,
        candidate_set_size: usize,
        n_users: usize,
        dim: usize,
        delta: f64,
    ) -> Result<Self> {
        if !(lambda_a > 0.0 && lambda_a.is_finite()) {
            return Err(Error::config("lambda_a must be finite and > 0"));
        }
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::config("sigma2 must be finite and > 0"));
        }
        if candidate_set_size == 0 {
            return Err(Error::config("candidate set size must be >= 1"));
        }
        let smoothed = smoothed_regularity(lambda_a, sigma2, candidate_set_size);
        if !(smoothed > 0.0) {
            return Err(Error::NumericalRank(format!(
                "smoothed regularity underflowed to {smoothed}"
            )));
        }
        Ok(ItemRegularityParams {
            lambda_a,
            sigma2,
            candidate_set_size,
            smoothed,
            n_min: n_min(smoothed, n_users, dim, delta),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ClusterMode {
    General,
    ItemRegularity(ItemRegularityParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    pub alpha: f64,
    pub delta: f64,
    pub gamma_hat: f64,
    pub n_users: usize,
    pub mode: ClusterMode,
    /// Multiplier applied to every confidence radius and to `β̃` by the
    /// pipelines. `1.0` keeps the high-probability constants unchanged.
    pub radius_scale: f64,
}

impl ClusterParams {
    pub fn new(alpha: f64, delta: f64, gamma_hat: f64, n_users: usize) -> Result<Self> {
        let p = ClusterParams {
            alpha,
            delta,
            gamma_hat,
            n_users,
            mode: ClusterMode::General,
            radius_scale: 1.0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 1.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha must be finite and >= 1"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config("delta must lie in (0, 1)"));
        }
        if !(self.gamma_hat >= 0.0 && self.gamma_hat.is_finite()) {
            return Err(Error::config("gamma_hat must be finite and >= 0"));
        }
        if self.n_users == 0 {
            return Err(Error::config("user count must be >= 1"));
        }
        if !(self.radius_scale > 0.0 && self.radius_scale.is_finite()) {
            return Err(Error::config("radius scale must be finite and > 0"));
        }
        Ok(())
    }

    pub fn with_gamma_hat(mut self, gamma_hat: f64) -> Self {
        self.gamma_hat = gamma_hat;
        self
    }
}

/// `2 √(d log(1 + 4κN/(λd)) + 2 log(2U/δ)) + √(λκ)`, shared by every radius.
fn radius_numerator(n: usize, dim: usize, params: &ClusterParams, cfg: &MleConfig) -> f64 {
    let d = dim as f64;
    let log_det = d * (1.0 + 4.0 * cfg.kappa * n as f64 / (cfg.lambda * d)).ln();
    let log_union = 2.0 * (2.0 * params.n_users as f64 / params.delta).ln();
    (cfg.lambda * cfg.kappa).sqrt() + 2.0 * (log_det + log_union).sqrt()
}

/// High-probability bound on `‖θ̂_u − θ_u‖` from the minimum eigenvalue of
/// the user's Gramian.
pub fn confidence_radius(
    n_u: usize,
    lam_min: f64,
    dim: usize,
    params: &ClusterParams,
    cfg: &MleConfig,
) -> Result<f64> {
    if !(lam_min > 0.0) {
        return Err(Error::contract(format!(
            "minimum eigenvalue must be > 0, got {lam_min}"
        )));
    }
    Ok(radius_numerator(n_u, dim, params, cfg) / (cfg.kappa * lam_min.sqrt()))
}

/// Item-regularity radius: the eigenvalue is replaced by `λ̃_a N_u / 2`.
pub fn confidence_radius_ir(
    n_u: usize,
    dim: usize,
    reg: &ItemRegularityParams,
    params: &ClusterParams,
    cfg: &MleConfig,
) -> Result<f64> {
    if n_u == 0 {
        return Err(Error::contract(
            "item-regularity radius is undefined without samples",
        ));
    }
    let denom = cfg.kappa * (reg.smoothed * n_u as f64 / 2.0).sqrt();
    Ok(radius_numerator(n_u, dim, params, cfg) / denom)
}

/// `λ̃_a = ∫₀^{λ_a} (1 − exp(−(λ_a − x)²/(2σ²)))^S dx` by adaptive Simpson.
/// The tolerance is relative to a first estimate, since λ̃ can be tiny for
/// large `S`.
pub fn smoothed_regularity(lambda_a: f64, sigma2: f64, candidate_set_size: usize) -> f64 {
    let s = candidate_set_size as i32;
    let f = |x: f64| (-(-(lambda_a - x).powi(2) / (2.0 * sigma2)).exp_m1()).powi(s);
    let rough = adaptive_simpson(&f, 0.0, lambda_a, 1e-6 * lambda_a);
    adaptive_simpson(&f, 0.0, lambda_a, 1e-14 * rough.abs().max(f64::MIN_POSITIVE))
}

fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let (fa, fb) = (f(a), f(b));
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(f, a, b, fa, fm, fb, whole, tol, 50)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// Minimum per-user sample count for which the item-regularity radius holds:
/// `⌈16/λ̃² · log(8Ud/(λ̃²δ))⌉`, at least 1.
pub fn n_min(smoothed: f64, n_users: usize, dim: usize, delta: f64) -> usize {
    let l2 = smoothed * smoothed;
    let v = 16.0 / l2 * (8.0 * n_users as f64 * dim as f64 / (l2 * delta)).ln();
    (v.ceil().max(1.0)) as usize
}

/// What the graph needs to know about one user.
#[derive(Debug, Clone, PartialEq)]
pub struct UserEstimate {
    pub theta: Vector,
    pub ci: f64,
    pub n: usize,
}

/// `‖θ̂₁ − θ̂₂‖ < γ̂ − α(CI₁ + CI₂)`, plus the `N_min` gate in item-regularity
/// mode.
pub fn connect_condition(a: &UserEstimate, b: &UserEstimate, params: &ClusterParams) -> bool {
    if let ClusterMode::ItemRegularity(reg) = params.mode {
        if a.n.min(b.n) < reg.n_min {
            return false;
        }
    }
    let dist = (&a.theta - &b.theta).norm();
    dist < params.gamma_hat - params.alpha * (a.ci + b.ci)
}

/// Undirected graph over user indices `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterGraph {
    adjacency: Vec<BTreeSet<usize>>,
}

impl ClusterGraph {
    pub fn null(n: usize) -> Self {
        ClusterGraph {
            adjacency: vec![BTreeSet::new(); n],
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.adjacency.len()
    }

    pub fn add_edge(&mut self, u: usize, v: usize) -> Result<()> {
        self.check(u)?;
        self.check(v)?;
        if u == v {
            return Err(Error::contract("self-loops are not allowed"));
        }
        self.adjacency[u].insert(v);
        self.adjacency[v].insert(u);
        Ok(())
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.adjacency.get(u).is_some_and(|s| s.contains(&v))
    }

    /// Edges as `(u, v)` with `u < v`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(u, s)| s.range(u + 1..).map(move |&v| (u, v)))
            .collect()
    }

    pub fn n_edges(&self) -> usize {
        self.adjacency.iter().map(BTreeSet::len).sum::<usize>() / 2
    }

    /// `u` together with its direct neighbours, ascending.
    pub fn neighbor_set(&self, u: usize) -> Result<Vec<usize>> {
        self.check(u)?;
        let mut set = self.adjacency[u].clone();
        set.insert(u);
        Ok(set.into_iter().collect())
    }

    fn check(&self, u: usize) -> Result<()> {
        if u >= self.adjacency.len() {
            return Err(Error::Lookup {
                kind: "user index",
                name: u.to_string(),
            });
        }
        Ok(())
    }
}

/// Connects every pair that passes [`connect_condition`].
pub fn build_graph(estimates: &[UserEstimate], params: &ClusterParams) -> ClusterGraph {
    let n = estimates.len();
    let rows: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|u| {
            ((u + 1)..n)
                .filter(|&v| connect_condition(&estimates[u], &estimates[v], params))
                .collect()
        })
        .collect();
    let mut g = ClusterGraph::null(n);
    for (u, row) in rows.into_iter().enumerate() {
        for v in row {
            g.adjacency[u].insert(v);
            g.adjacency[v].insert(u);
        }
    }
    g
}

/// `Γ(u,v) = ‖θ̂_u − θ̂_v‖ − α(CI_u + CI_v)` for every `v ≠ u`.
fn separation_gaps(test: usize, estimates: &[UserEstimate], alpha: f64) -> Vec<(f64, f64)> {
    let t = &estimates[test];
    estimates
        .iter()
        .enumerate()
        .filter(|&(v, _)| v != test)
        .map(|(_, e)| {
            let dist = (&t.theta - &e.theta).norm();
            let slack = alpha * (t.ci + e.ci);
            (dist - slack, dist + slack)
        })
        .collect()
}

/// Smallest positive `Γ(u_t, v)`, or 0 when no user is certifiably apart.
pub fn select_gamma_under(test: usize, estimates: &[UserEstimate], alpha: f64) -> Result<f64> {
    check_test_index(test, estimates)?;
    let m = separation_gaps(test, estimates, alpha)
        .into_iter()
        .filter(|(gap, _)| *gap > 0.0)
        .map(|(gap, _)| gap)
        .fold(f64::INFINITY, f64::min);
    Ok(if m.is_finite() { m } else { 0.0 })
}

/// Smallest `‖θ̂_u − θ̂_v‖ + α(CI_u + CI_v)` over the certifiably apart users,
/// or 0 when there are none.
pub fn select_gamma_over(test: usize, estimates: &[UserEstimate], alpha: f64) -> Result<f64> {
    check_test_index(test, estimates)?;
    let m = separation_gaps(test, estimates, alpha)
        .into_iter()
        .filter(|(gap, _)| *gap > 0.0)
        .map(|(_, upper)| upper)
        .fold(f64::INFINITY, f64::min);
    Ok(if m.is_finite() { m } else { 0.0 })
}

fn check_test_index(test: usize, estimates: &[UserEstimate]) -> Result<()> {
    if test >= estimates.len() {
        return Err(Error::Lookup {
            kind: "user index",
            name: test.to_string(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mle::default_kappa;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(u: usize) -> ClusterParams {
        ClusterParams::new(1.0, 0.1, 1.0, u).unwrap()
    }

    fn est(theta: &[f64], ci: f64) -> UserEstimate {
        UserEstimate {
            theta: Vector::from_column_slice(theta),
            ci,
            n: 100,
        }
    }

    #[test]
    fn params_are_validated() {
        assert!(ClusterParams::new(0.5, 0.1, 1.0, 2).is_err());
        assert!(ClusterParams::new(1.0, 1.0, 1.0, 2).is_err());
        assert!(ClusterParams::new(1.0, 0.1, -1.0, 2).is_err());
        assert!(ClusterParams::new(1.0, 0.1, 0.0, 0).is_err());
    }

    #[test]
    fn radius_spot_value() {
        let cfg = MleConfig::default();
        let p = ClusterParams::new(1.0, 0.1, 0.0, 2).unwrap();
        let ci = confidence_radius(0, 1.0 / cfg.kappa, 1, &p, &cfg).unwrap();
        // hand evaluation: (√κ + 2√(2 ln 40)) / (κ · √(1/κ)) = (√κ + 2√(2 ln 40)) / √κ
        let k = default_kappa();
        let oracle = (k.sqrt() + 2.0 * (2.0 * 40f64.ln()).sqrt()) / k.sqrt();
        assert!((ci - oracle).abs() < 1e-12 * oracle);
        assert!((ci - 17.76).abs() < 0.01);
    }

    #[test]
    fn radius_scaling_and_errors() {
        let cfg = MleConfig::default();
        let p = params(40);
        let a = confidence_radius(50, 20.0, 4, &p, &cfg).unwrap();
        let b = confidence_radius(50, 80.0, 4, &p, &cfg).unwrap();
        assert!((a / b - 2.0).abs() < 1e-12);
        assert!(matches!(
            confidence_radius(1, 0.0, 4, &p, &cfg),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn radius_monotonicity() {
        let cfg = MleConfig::default();
        let base = confidence_radius(100, 30.0, 8, &params(40), &cfg).unwrap();
        assert!(confidence_radius(100, 31.0, 8, &params(40), &cfg).unwrap() < base);
        assert!(confidence_radius(101, 30.0, 8, &params(40), &cfg).unwrap() > base);
        assert!(confidence_radius(100, 30.0, 8, &params(41), &cfg).unwrap() > base);
        let mut p = params(40);
        p.delta = 0.2;
        assert!(confidence_radius(100, 30.0, 8, &p, &cfg).unwrap() < base);
    }

    fn riemann(lambda_a: f64, sigma2: f64, s: i32, n: usize) -> f64 {
        let h = lambda_a / n as f64;
        (0..n)
            .map(|i| {
                let x = (i as f64 + 0.5) * h;
                (1.0 - (-(lambda_a - x).powi(2) / (2.0 * sigma2)).exp()).powi(s) * h
            })
            .sum()
    }

    #[test]
    fn smoothed_regularity_matches_midpoint_sum() {
        for &(la, s2, s) in &[(0.5, 0.25, 1), (1.0, 0.1, 3), (2.0, 1.0, 10)] {
            let q = smoothed_regularity(la, s2, s as usize);
            let r = riemann(la, s2, s, 1_000_000);
            assert!((q - r).abs() < 1e-9, "{la} {s2} {s}: {q} vs {r}");
            assert!(q > 0.0 && q < la);
        }
    }

    #[test]
    fn smoothed_regularity_limits() {
        assert!((smoothed_regularity(0.5, 1e-8, 1) - 0.5).abs() < 1e-3);
        let mut prev = f64::INFINITY;
        for s in [1, 2, 5, 20, 100] {
            let v = smoothed_regularity(0.5, 0.25, s);
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-3);
    }

    #[test]
    fn n_min_examples() {
        let expect = (64.0 * (8.0 * 40.0 * 16.0 / (0.25 * 0.1f64)).ln()).ceil() as usize;
        assert_eq!(n_min(0.5, 40, 16, 0.1), expect);
        assert!(n_min(1.0, 40, 16, 0.1) * 4 < n_min(0.5, 40, 16, 0.1));
        assert!(n_min(0.5, 80, 16, 0.1) > n_min(0.5, 40, 16, 0.1));
    }

    #[test]
    fn ir_radius_matches_general_at_matching_eigenvalue() {
        let cfg = MleConfig::default();
        let p = params(40);
        let reg = ItemRegularityParams::new(0.5, 0.25, 1, 40, 16, 0.1).unwrap();
        let n = 1000;
        let lam = reg.smoothed * n as f64 / 2.0;
        let a = confidence_radius_ir(n, 16, &reg, &p, &cfg).unwrap();
        let b = confidence_radius(n, lam, 16, &p, &cfg).unwrap();
        assert!((a - b).abs() < 1e-12 * a);
        assert!(confidence_radius_ir(0, 16, &reg, &p, &cfg).is_err());
        assert!(confidence_radius_ir(4 * n, 16, &reg, &p, &cfg).unwrap() < a);
    }

    #[test]
    fn connect_examples() {
        let mut p = params(2);
        p.gamma_hat = 0.0;
        assert!(!connect_condition(&est(&[0.0], 0.0), &est(&[0.0], 0.0), &p));
        p.gamma_hat = 1.0;
        assert!(connect_condition(&est(&[0.3], 0.01), &est(&[0.3], 0.01), &p));
        p.alpha = 2.0;
        p.gamma_hat = 0.8;
        assert!(!connect_condition(&est(&[0.0], 0.1), &est(&[0.5], 0.1), &p));
        // equality does not connect
        p.alpha = 1.0;
        p.gamma_hat = 0.75;
        assert!(!connect_condition(&est(&[0.0], 0.125), &est(&[0.5], 0.125), &p));
    }

    #[test]
    fn ir_gate_blocks_small_users() {
        let reg = ItemRegularityParams::new(0.5, 0.25, 1, 2, 1, 0.1).unwrap();
        let mut p = params(2);
        p.mode = ClusterMode::ItemRegularity(reg);
        p.gamma_hat = 10.0;
        let mut a = est(&[0.0], 0.0);
        let mut b = est(&[0.0], 0.0);
        a.n = reg.n_min;
        b.n = reg.n_min;
        assert!(connect_condition(&a, &b, &p));
        b.n = reg.n_min - 1;
        assert!(!connect_condition(&a, &b, &p));
    }

    #[test]
    fn graph_examples() {
        let e = vec![est(&[0.0, 0.0], 0.01), est(&[0.0, 0.0], 0.01), est(&[1.0, 1.0], 0.01)];
        let mut p = params(3);
        p.gamma_hat = 0.0;
        let g = build_graph(&e, &p);
        assert_eq!(g.n_edges(), 0);
        for u in 0..3 {
            assert_eq!(g.neighbor_set(u).unwrap(), vec![u]);
        }
        p.gamma_hat = 0.5;
        let g = build_graph(&e, &p);
        assert_eq!(g.edges(), vec![(0, 1)]);
        assert_eq!(g.neighbor_set(1).unwrap(), vec![0, 1]);
        assert!(matches!(g.neighbor_set(3), Err(Error::Lookup { .. })));
    }

    #[test]
    fn gamma_policy_examples() {
        let e = vec![est(&[0.0], 0.1), est(&[1.0], 0.1)];
        assert!((select_gamma_under(0, &e, 1.0).unwrap() - 0.8).abs() < 1e-15);
        assert!((select_gamma_over(0, &e, 1.0).unwrap() - 1.2).abs() < 1e-15);
        let same = vec![est(&[0.0], 5.0), est(&[0.0], 5.0), est(&[0.0], 5.0)];
        assert_eq!(select_gamma_under(1, &same, 1.0).unwrap(), 0.0);
        assert_eq!(select_gamma_over(1, &same, 1.0).unwrap(), 0.0);
        assert!(select_gamma_under(3, &same, 1.0).is_err());
    }

    fn random_estimates(rng: &mut impl Rng, n: usize, d: usize) -> Vec<UserEstimate> {
        (0..n)
            .map(|_| UserEstimate {
                theta: Vector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)),
                ci: rng.random_range(0.0..0.3),
                n: rng.random_range(0..200),
            })
            .collect()
    }

    #[test]
    fn neighbor_set_matches_adjacency_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let e = random_estimates(&mut rng, 25, 3);
        let mut p = params(25);
        p.gamma_hat = 1.5;
        let g = build_graph(&e, &p);
        for u in 0..25 {
            let brute: Vec<usize> = (0..25)
                .filter(|&v| v == u || connect_condition(&e[u], &e[v], &p))
                .collect();
            assert_eq!(g.neighbor_set(u).unwrap(), brute);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn graph_invariants(seed in 0u64..100_000, g1 in 0.0f64..3.0, g2 in 0.0f64..3.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let e = random_estimates(&mut rng, 12, 2);
                let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
                let p = params(12);
                let small = build_graph(&e, &p.with_gamma_hat(lo));
                let large = build_graph(&e, &p.with_gamma_hat(hi));
                for u in 0..12 {
                    prop_assert!(!small.has_edge(u, u));
                    for v in 0..12 {
                        prop_assert_eq!(small.has_edge(u, v), small.has_edge(v, u));
                        if small.has_edge(u, v) {
                            prop_assert!(large.has_edge(u, v));
                        }
                    }
                }
            }

            #[test]
            fn under_never_exceeds_over(seed in 0u64..100_000, alpha in 1.0f64..3.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let e = random_estimates(&mut rng, 10, 3);
                for t in 0..10 {
                    prop_assert!(select_gamma_under(t, &e, alpha).unwrap()
                        <= select_gamma_over(t, &e, alpha).unwrap());
                }
            }

            #[test]
            fn ir_gate_holds_on_random_graphs(seed in 0u64..100_000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let e = random_estimates(&mut rng, 12, 2);
                let reg = ItemRegularityParams {
                    lambda_a: 1.0, sigma2: 1.0, candidate_set_size: 1, smoothed: 0.5, n_min: 100,
                };
                let mut p = params(12).with_gamma_hat(3.0);
                p.mode = ClusterMode::ItemRegularity(reg);
                let g = build_graph(&e, &p);
                for (u, v) in g.edges() {
                    prop_assert!(e[u].n >= 100 && e[v].n >= 100);
                }
            }
        }
    }
}
