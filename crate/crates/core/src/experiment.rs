//! Seeded Monte-Carlo sweeps over synthetic clustered populations.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::active::{
    run_a2, run_apo, run_random_augment, simple_average_estimate, weighted_final_estimate,
    ActiveConfig, ActiveRun, BtlOracle,
};
use crate::baselines::{
    baseline_cluster, baseline_pess_mle, ClusterAlgo, PessVariant, DEFAULT_DBSCAN_MIN_PTS, DEFAULT_KMEANS_RESTARTS,
    DEFAULT_KNN_K,
};
use crate::btl::{
    generate_offline_data, generate_population, FeatureMap, Population, PopulationConfig,
    UserDataset,
};
use crate::clustering::ClusterGraph;
use crate::error::{Error, Result};
use crate::evaluate::{diagnostics, suboptimality};
use crate::linalg::Vector;
use crate::offline::{
    compute_user_stats, default_reference, greedy_policy, run_off_c2pl_with_stats, GammaPolicy,
    OfflineConfig, PessimisticOutcome, PipelineReport, Policy, UserStats,
};
use crate::seeding::{config_hash, stream_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    OffC2pl,
    PessPerUser,
    PessPooled,
    PessKnn,
    KMeans,
    Dbscan,
    A2,
    RandomAugment,
    Apo,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::OffC2pl,
        Method::PessPerUser,
        Method::PessPooled,
        Method::PessKnn,
        Method::KMeans,
        Method::Dbscan,
        Method::A2,
        Method::RandomAugment,
        Method::Apo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::OffC2pl => "offc2pl",
            Method::PessPerUser => "pess-per-user",
            Method::PessPooled => "pess-pooled",
            Method::PessKnn => "pess-knn",
            Method::KMeans => "kmeans",
            Method::Dbscan => "dbscan",
            Method::A2 => "a2",
            Method::RandomAugment => "random-augment",
            Method::Apo => "apo",
        }
    }

    pub fn is_active(self) -> bool {
        matches!(self, Method::A2 | Method::RandomAugment | Method::Apo)
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Lookup {
                kind: "method",
                name: s.to_string(),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Axis {
    /// Fractions of the per-user budget; smaller budgets are prefixes of the
    /// full data.
    Budget(Vec<f64>),
    /// Active round counts; one run per test user, evaluated at each prefix.
    Rounds(Vec<usize>),
    Dim(Vec<usize>),
    GammaHat(Vec<f64>),
}

impl Axis {
    pub fn name(&self) -> &'static str {
        match self {
            Axis::Budget(_) => "budget",
            Axis::Rounds(_) => "rounds",
            Axis::Dim(_) => "dim",
            Axis::GammaHat(_) => "gamma_hat",
        }
    }

    pub fn labels(&self) -> Vec<String> {
        match self {
            Axis::Budget(v) | Axis::GammaHat(v) => v.iter().map(|x| x.to_string()).collect(),
            Axis::Rounds(v) | Axis::Dim(v) => v.iter().map(|x| x.to_string()).collect(),
        }
    }

    fn len(&self) -> usize {
        match self {
            Axis::Budget(v) | Axis::GammaHat(v) => v.len(),
            Axis::Rounds(v) | Axis::Dim(v) => v.len(),
        }
    }
}

/// Synthetic environment: population, tabular features and offline data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub population: PopulationConfig,
    pub n_contexts: usize,
    pub n_actions: usize,
    /// Exponential decay rate of feature scale across dimensions.
    pub anisotropy: f64,
    pub budget: usize,
    pub beta: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            population: PopulationConfig::default(),
            n_contexts: 20,
            n_actions: 10,
            anisotropy: 0.0,
            budget: 1000,
            beta: 1.0,
        }
    }
}

/// A sampled environment.
#[derive(Debug, Clone)]
pub struct Environment {
    pub population: Population,
    pub features: FeatureMap,
    pub data: Vec<UserDataset>,
}

/// Environment for `seed` with the population dimension overridden by
/// `dim`.
pub fn generate_environment(env: &EnvConfig, seed: u64, dim: usize) -> Result<Environment> {
    let mut rng = stream_rng(seed, &["env", &dim.to_string()]);
    let pop_cfg = PopulationConfig {
        dim,
        ..env.population
    };
    let population = generate_population(&pop_cfg, &mut rng)?;
    let features = FeatureMap::random(env.n_contexts, env.n_actions, dim, env.anisotropy, &mut rng)?;
    let data = generate_offline_data(&population, Some(&features), env.budget, env.beta, &mut rng)?;
    Ok(Environment {
        population,
        features,
        data,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub axis: Axis,
    pub env: EnvConfig,
    pub offline: OfflineConfig,
    pub active: ActiveConfig,
    /// Fraction of each user's data available to the active methods' offline
    /// phase.
    pub warm_start: f64,
    pub knn_k: usize,
    pub kmeans_restarts: usize,
    pub dbscan_eps: Option<f64>,
    pub dbscan_min_pts: usize,
    /// Test users per seed, drawn without replacement; `None` uses everyone.
    pub test_users: Option<usize>,
    /// Record wall-clock milliseconds (this makes output nondeterministic).
    pub timing: bool,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.offline.validate()?;
        self.env.population.validate()?;
        if self.offline.cluster.n_users != self.env.population.users {
            return Err(Error::config("cluster user count differs from population size"));
        }
        if self.seeds.is_empty() || self.methods.is_empty() || self.axis.len() == 0 {
            return Err(Error::config("seeds, methods and axis values must be nonempty"));
        }
        if !(0.0..=1.0).contains(&self.warm_start) {
            return Err(Error::config("warm start fraction must lie in [0, 1]"));
        }
        if !(self.env.beta > 0.0) {
            return Err(Error::config("beta must be > 0"));
        }
        if self.methods.contains(&Method::PessKnn) && self.knn_k >= self.env.population.users {
            return Err(Error::config("knn k must be below the user count"));
        }
        if let Some(k) = self.test_users {
            if k == 0 || k > self.env.population.users {
                return Err(Error::config("test user count must lie in 1..=users"));
            }
        }
        match &self.axis {
            Axis::Budget(v) if v.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) => {
                Err(Error::config("budget fractions must lie in (0, 1]"))
            }
            Axis::GammaHat(v) if v.iter().any(|g| !(*g >= 0.0 && g.is_finite())) => {
                Err(Error::config("gamma_hat values must be finite and >= 0"))
            }
            Axis::Dim(v) if v.contains(&0) => Err(Error::config("dimensions must be >= 1")),
            _ => Ok(()),
        }
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// One CSV row: the mean over the cell's test users.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub seed: u64,
    pub method: Method,
    pub axis_value: String,
    pub subopt: f64,
    pub lambda_min: f64,
    pub n_tilde: f64,
    pub n_heterog: f64,
    pub eta: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuboptReport {
    pub axis_name: String,
    pub config_hash: String,
    pub rows: Vec<ResultRow>,
}

pub const RESULT_HEADER: &str = "seed,method,axis_name,axis_value,subopt,lambda_min,n_tilde,n_heterog,eta,wall_ms";

impl SuboptReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("# config_hash={}\n{RESULT_HEADER}\n", self.config_hash);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.seed,
                r.method.name(),
                self.axis_name,
                r.axis_value,
                r.subopt,
                r.lambda_min,
                r.n_tilde,
                r.n_heterog,
                r.eta,
                r.wall_ms
            );
        }
        out
    }

    /// Rows of one method at one axis value, in seed order.
    pub fn values(&self, method: Method, axis_value: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.method == method && r.axis_value == axis_value)
            .map(|r| r.subopt)
            .collect()
    }
}

/// Mean and standard error of a sample (`stderr = s/√n`, zero for one value).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, Copy, Default)]
struct Metrics {
    subopt: f64,
    lambda_min: f64,
    n_tilde: f64,
    n_heterog: f64,
    eta: f64,
    wall_ms: u64,
}

impl Metrics {
    fn add(&mut self, o: &Metrics) {
        self.subopt += o.subopt;
        self.lambda_min += o.lambda_min;
        self.n_tilde += o.n_tilde;
        self.n_heterog += o.n_heterog;
        self.eta += o.eta;
        self.wall_ms += o.wall_ms;
    }

    fn scaled(mut self, k: usize) -> Metrics {
        let k = k as f64;
        self.subopt /= k;
        self.lambda_min /= k;
        self.n_tilde /= k;
        self.n_heterog /= k;
        self.eta /= k;
        self
    }
}

struct Cell<'a> {
    spec: &'a ExperimentSpec,
    seed: u64,
    label: String,
    env: &'a Environment,
    offline: OfflineConfig,
}

fn offline_metrics(
    cell: &Cell<'_>,
    data: &[UserDataset],
    test: usize,
    out: &PessimisticOutcome,
) -> Result<Metrics> {
    let pi = out.policy.as_ref().expect("tabular environment");
    let theta = cell.env.population.theta(test);
    let diag = diagnostics(&out.members, test, Some(&cell.env.population), data)?;
    Ok(Metrics {
        subopt: suboptimality(pi, &theta, &cell.env.features)?,
        lambda_min: out.lambda_min,
        n_tilde: out.n_tilde() as f64,
        n_heterog: diag.n_heterog as f64,
        eta: diag.eta,
        wall_ms: 0,
    })
}

fn timed<T>(timing: bool, f: impl FnOnce() -> Result<T>) -> Result<(T, u64)> {
    if timing {
        let t = Instant::now();
        let v = f()?;
        Ok((v, t.elapsed().as_millis() as u64))
    } else {
        Ok((f()?, 0))
    }
}

/// Hyperparameters of the baseline methods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineOptions {
    pub knn_k: usize,
    pub kmeans_restarts: usize,
    pub dbscan_eps: Option<f64>,
    pub dbscan_min_pts: usize,
}

impl Default for BaselineOptions {
    fn default() -> Self {
        BaselineOptions {
            knn_k: DEFAULT_KNN_K,
            kmeans_restarts: DEFAULT_KMEANS_RESTARTS,
            dbscan_eps: None,
            dbscan_min_pts: DEFAULT_DBSCAN_MIN_PTS,
        }
    }
}

/// The offline decision of one method for one test user.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub outcome: PessimisticOutcome,
    pub gamma_hat: Option<f64>,
    pub graph: Option<ClusterGraph>,
    pub flags: Vec<String>,
}

impl MethodRun {
    pub fn report(
        &self,
        method: Method,
        datasets: &[UserDataset],
        test: usize,
        feat: Option<&FeatureMap>,
    ) -> PipelineReport {
        let mut r = PipelineReport::from_outcome(
            method.name(),
            datasets,
            test,
            self.gamma_hat,
            self.graph.as_ref(),
            &self.outcome,
            feat,
        );
        r.flags = self.flags.clone();
        r
    }
}

/// Runs an offline method (Off-C²PL or a baseline) for `datasets[test]`.
/// `rng` is only drawn from by KMeans.
#[allow(clippy::too_many_arguments)]
pub fn run_offline(
    method: Method,
    datasets: &[UserDataset],
    feat: Option<&FeatureMap>,
    test: usize,
    stats: &[UserStats],
    w: &Vector,
    cfg: &OfflineConfig,
    opts: &BaselineOptions,
    rng: &mut impl Rng,
) -> Result<MethodRun> {
    let dim = stats.first().map_or(w.len(), |s| s.theta_hat.len());
    let plain = |outcome| MethodRun {
        outcome,
        gamma_hat: None,
        graph: None,
        flags: Vec::new(),
    };
    match method {
        Method::OffC2pl => {
            let user = &datasets
                .get(test)
                .ok_or_else(|| Error::contract("test index out of range"))?
                .user;
            let run = run_off_c2pl_with_stats(datasets, feat, user, w, cfg, stats.to_vec())?;
            Ok(MethodRun {
                outcome: run.outcome,
                gamma_hat: Some(run.gamma_hat),
                graph: Some(run.graph),
                flags: Vec::new(),
            })
        }
        Method::PessPerUser => {
            baseline_pess_mle(PessVariant::PerUser, datasets, feat, test, stats, dim, w, cfg).map(plain)
        }
        Method::PessPooled => {
            baseline_pess_mle(PessVariant::Pooled, datasets, feat, test, stats, dim, w, cfg).map(plain)
        }
        Method::PessKnn => baseline_pess_mle(
            PessVariant::NeighborKnn { k: opts.knn_k },
            datasets,
            feat,
            test,
            stats,
            dim,
            w,
            cfg,
        )
        .map(plain),
        Method::KMeans | Method::Dbscan => {
            let algo = if method == Method::KMeans {
                ClusterAlgo::KMeans {
                    k: None,
                    restarts: opts.kmeans_restarts,
                }
            } else {
                ClusterAlgo::Dbscan {
                    eps: opts.dbscan_eps,
                    min_pts: opts.dbscan_min_pts,
                }
            };
            let (outcome, flags) = baseline_cluster(algo, datasets, feat, test, stats, dim, w, cfg, rng)?;
            Ok(MethodRun {
                outcome,
                gamma_hat: None,
                graph: None,
                flags,
            })
        }
        Method::A2 | Method::RandomAugment | Method::Apo => Err(Error::config(format!(
            "{} is an active method",
            method.name()
        ))),
    }
}

fn run_offline_method(
    cell: &Cell<'_>,
    method: Method,
    data: &[UserDataset],
    stats: &[UserStats],
    w: &Vector,
    test: usize,
) -> Result<Metrics> {
    let opts = BaselineOptions {
        knn_k: cell.spec.knn_k,
        kmeans_restarts: cell.spec.kmeans_restarts,
        dbscan_eps: cell.spec.dbscan_eps,
        dbscan_min_pts: cell.spec.dbscan_min_pts,
    };
    let mut rng = stream_rng(cell.seed, &[method.name(), &cell.label, &data[test].user]);
    let (run, ms) = timed(cell.spec.timing, || {
        run_offline(
            method,
            data,
            Some(&cell.env.features),
            test,
            stats,
            w,
            &cell.offline,
            &opts,
            &mut rng,
        )
    })?;
    let mut m = offline_metrics(cell, data, test, &run.outcome)?;
    m.wall_ms = ms;
    Ok(m)
}

/// Runs one active method for the largest requested round count and
/// evaluates every prefix in `rounds`.
fn run_active_method(
    cell: &Cell<'_>,
    method: Method,
    warm: &[UserDataset],
    stats: &[UserStats],
    w: &Vector,
    test: usize,
    rounds: &[usize],
) -> Result<Vec<Metrics>> {
    let feat = &cell.env.features;
    let dim = feat.dim();
    let user = &warm[test].user;
    let theta = cell.env.population.theta(test);
    let max_rounds = rounds.iter().copied().max().unwrap_or(0);
    let active = ActiveConfig {
        rounds: max_rounds,
        ..cell.spec.active
    };
    let mut oracle = BtlOracle::new(
        &theta * cell.spec.env.beta,
        stream_rng(cell.seed, &[method.name(), &cell.label, user, "oracle"]),
    );
    let mle = &cell.offline.mle;
    let ((run, offline), ms) = timed(cell.spec.timing, || -> Result<(ActiveRun, Option<PessimisticOutcome>)> {
        match method {
            Method::Apo => Ok((run_apo(dim, Some(feat), &active, &mut oracle, mle)?, None)),
            _ => {
                let off = run_off_c2pl_with_stats(warm, Some(feat), user, w, &cell.offline, stats.to_vec())?;
                let run = if method == Method::A2 {
                    run_a2(warm, &off.outcome, Some(feat), &active, &mut oracle, mle)?
                } else {
                    let mut rng = stream_rng(cell.seed, &[method.name(), &cell.label, user, "select"]);
                    run_random_augment(warm, &off.outcome, Some(feat), &active, &mut rng, &mut oracle, mle)?
                };
                Ok((run, Some(off.outcome)))
            }
        }
    })?;
    let (n_heterog, eta, n_off) = match &offline {
        Some(o) => {
            let d = diagnostics(&o.members, test, Some(&cell.env.population), warm)?;
            (d.n_heterog as f64, d.eta, o.n_tilde())
        }
        None => (0.0, 0.0, 0),
    };
    rounds
        .iter()
        .map(|&r| {
            let prefix = run.trace.prefix(r);
            let policy: Policy = match (&offline, r) {
                (Some(o), 0) => o.policy.clone().expect("tabular environment"),
                (None, _) => greedy_policy(&simple_average_estimate(&prefix), feat),
                (Some(_), _) => greedy_policy(&weighted_final_estimate(&prefix, dim), feat),
            };
            let lambda_min = prefix
                .rounds
                .last()
                .map_or(prefix.initial_lambda_min, |x| x.lambda_min);
            Ok(Metrics {
                subopt: suboptimality(&policy, &theta, feat)?,
                lambda_min,
                n_tilde: (n_off + r) as f64,
                n_heterog,
                eta,
                wall_ms: ms,
            })
        })
        .collect()
}

fn test_users(spec: &ExperimentSpec, seed: u64) -> Vec<usize> {
    let n = spec.env.population.users;
    match spec.test_users {
        None => (0..n).collect(),
        Some(k) => {
            let mut rng = stream_rng(seed, &["test-users"]);
            let mut v: Vec<usize> = sample_indices(&mut rng, n, k).into_vec();
            v.sort_unstable();
            v
        }
    }
}

fn prefix_data(data: &[UserDataset], n: usize) -> Vec<UserDataset> {
    data.iter().map(|d| d.truncated(n)).collect()
}

/// Metrics for every method at one environment and data budget; `rounds`
/// lists the active round counts to report (one entry per output slot).
fn evaluate(
    cell: &Cell<'_>,
    per_user: usize,
    rounds: &[usize],
) -> Result<Vec<Vec<(Method, Metrics)>>> {
    let spec = cell.spec;
    let dim = cell.env.features.dim();
    let users = test_users(spec, cell.seed);
    let mut slots: Vec<Vec<(Method, Metrics)>> = vec![Vec::new(); rounds.len()];

    let offline_methods: Vec<Method> = spec.methods.iter().copied().filter(|m| !m.is_active()).collect();
    if !offline_methods.is_empty() {
        let data = prefix_data(&cell.env.data, per_user);
        let stats = compute_user_stats(&data, dim, &cell.offline)?;
        let w = default_reference(&data, &cell.env.features);
        for &m in &offline_methods {
            let mut acc = Metrics::default();
            for &t in &users {
                acc.add(&run_offline_method(cell, m, &data, &stats, &w, t)?);
            }
            let mean = acc.scaled(users.len());
            for slot in slots.iter_mut() {
                slot.push((m, mean));
            }
        }
    }

    let active_methods: Vec<Method> = spec.methods.iter().copied().filter(|m| m.is_active()).collect();
    if !active_methods.is_empty() {
        let warm = prefix_data(&cell.env.data, (spec.warm_start * per_user as f64).floor() as usize);
        let needs_offline = active_methods.iter().any(|&m| m != Method::Apo);
        let (stats, w) = if needs_offline {
            (
                compute_user_stats(&warm, dim, &cell.offline)?,
                default_reference(&warm, &cell.env.features),
            )
        } else {
            (Vec::new(), Vector::zeros(dim))
        };
        for &m in &active_methods {
            let per_test: Vec<Vec<Metrics>> = users
                .iter()
                .map(|&t| run_active_method(cell, m, &warm, &stats, &w, t, rounds))
                .collect::<Result<_>>()?;
            for (i, slot) in slots.iter_mut().enumerate() {
                let mut acc = Metrics::default();
                for p in &per_test {
                    acc.add(&p[i]);
                }
                slot.push((m, acc.scaled(users.len())));
            }
        }
    }
    for slot in slots.iter_mut() {
        slot.sort_by_key(|(m, _)| spec.methods.iter().position(|x| x == m));
    }
    Ok(slots)
}

fn rows_for_seed(spec: &ExperimentSpec, seed: u64) -> Result<Vec<ResultRow>> {
    let labels = spec.axis.labels();
    let base_dim = spec.env.population.dim;
    let mut out = Vec::new();
    let mut push = |label: &str, metrics: Vec<(Method, Metrics)>| {
        for (method, m) in metrics {
            out.push(ResultRow {
                seed,
                method,
                axis_value: label.to_string(),
                subopt: m.subopt,
                lambda_min: m.lambda_min,
                n_tilde: m.n_tilde,
                n_heterog: m.n_heterog,
                eta: m.eta,
                wall_ms: m.wall_ms,
            });
        }
    };
    fn cell<'a>(
        spec: &'a ExperimentSpec,
        seed: u64,
        env: &'a Environment,
        label: &str,
        offline: OfflineConfig,
    ) -> Cell<'a> {
        Cell {
            spec,
            seed,
            label: label.to_string(),
            env,
            offline,
        }
    }
    match &spec.axis {
        Axis::Budget(fractions) => {
            let env = generate_environment(&spec.env, seed, base_dim)?;
            for (f, label) in fractions.iter().zip(&labels) {
                let n = (f * spec.env.budget as f64).round() as usize;
                let c = cell(spec, seed, &env, label, spec.offline);
                push(label, evaluate(&c, n, &[spec.active.rounds])?.remove(0));
            }
        }
        Axis::Dim(dims) => {
            for (&d, label) in dims.iter().zip(&labels) {
                let env = generate_environment(&spec.env, seed, d)?;
                let c = cell(spec, seed, &env, label, spec.offline);
                push(label, evaluate(&c, spec.env.budget, &[spec.active.rounds])?.remove(0));
            }
        }
        Axis::GammaHat(gammas) => {
            let env = generate_environment(&spec.env, seed, base_dim)?;
            for (&g, label) in gammas.iter().zip(&labels) {
                let mut offline = spec.offline;
                offline.cluster.gamma_hat = g;
                offline.gamma_policy = GammaPolicy::Fixed;
                let c = cell(spec, seed, &env, label, offline);
                push(label, evaluate(&c, spec.env.budget, &[spec.active.rounds])?.remove(0));
            }
        }
        Axis::Rounds(rounds) => {
            let env = generate_environment(&spec.env, seed, base_dim)?;
            let c = cell(spec, seed, &env, "rounds", spec.offline);
            for (slot, label) in evaluate(&c, spec.env.budget, rounds)?.into_iter().zip(&labels) {
                push(label, slot);
            }
        }
    }
    Ok(out)
}

/// Full factorial over seeds, methods and axis values. Seeds run in
/// parallel; rows come back ordered by seed, axis value, then method.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<SuboptReport> {
    spec.validate()?;
    let per_seed: Vec<Vec<ResultRow>> = spec
        .seeds
        .par_iter()
        .map(|&s| rows_for_seed(spec, s))
        .collect::<Result<_>>()?;
    Ok(SuboptReport {
        axis_name: spec.axis.name().to_string(),
        config_hash: spec.hash(),
        rows: per_seed.into_iter().flatten().collect(),
    })
}

/// Per-(method, axis value) mean and standard error of a metric column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelRow {
    pub method: String,
    pub axis_name: String,
    pub axis_value: String,
    pub n: usize,
    pub mean: f64,
    pub stderr: f64,
}

pub const PANEL_HEADER: &str = "method,axis_name,axis_value,n,mean,stderr";

/// Groups `(method, axis_name, axis_value, value)` records, keeping the
/// first-seen order of groups.
pub fn panel_rows(records: &[(String, String, String, f64)]) -> Vec<PanelRow> {
    let mut keys: Vec<(String, String, String)> = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    for (m, a, v, x) in records {
        let key = (m.clone(), a.clone(), v.clone());
        match keys.iter().position(|k| *k == key) {
            Some(i) => values[i].push(*x),
            None => {
                keys.push(key);
                values.push(vec![*x]);
            }
        }
    }
    keys.into_iter()
        .zip(values)
        .map(|((method, axis_name, axis_value), v)| {
            let (mean, stderr) = mean_stderr(&v);
            PanelRow {
                method,
                axis_name,
                axis_value,
                n: v.len(),
                mean,
                stderr,
            }
        })
        .collect()
}

pub fn panel_csv(rows: &[PanelRow], config_hash: &str) -> String {
    let mut out = format!("# config_hash={config_hash}\n{PANEL_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.method, r.axis_name, r.axis_value, r.n, r.mean, r.stderr
        );
    }
    out
}

impl SuboptReport {
    pub fn panels(&self) -> Vec<PanelRow> {
        let records: Vec<_> = self
            .rows
            .iter()
            .map(|r| {
                (
                    r.method.name().to_string(),
                    self.axis_name.clone(),
                    r.axis_value.clone(),
                    r.subopt,
                )
            })
            .collect();
        panel_rows(&records)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::active::SelectionMode;
    use crate::clustering::ClusterParams;
    use crate::mle::MleConfig;
    use crate::offline::PolicySearch;

    pub(crate) fn small_spec(axis: Axis, methods: Vec<Method>) -> ExperimentSpec {
        let users = 6;
        ExperimentSpec {
            seeds: vec![1, 2],
            methods,
            axis,
            env: EnvConfig {
                population: PopulationConfig {
                    users,
                    clusters: 2,
                    dim: 3,
                    ..Default::default()
                },
                n_contexts: 4,
                n_actions: 3,
                anisotropy: 0.0,
                budget: 40,
                beta: 1.0,
            },
            offline: OfflineConfig {
                mle: MleConfig::default(),
                cluster: ClusterParams::new(1.0, 0.1, 0.5, users).unwrap(),
                gamma_policy: GammaPolicy::Fixed,
                search: PolicySearch::Auto,
            },
            active: ActiveConfig {
                rounds: 5,
                mode: SelectionMode::FiniteTriples,
            },
            warm_start: 0.5,
            knn_k: 2,
            kmeans_restarts: 3,
            dbscan_eps: None,
            dbscan_min_pts: 3,
            test_users: Some(2),
            timing: false,
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("nope".parse::<Method>().is_err());
    }

    #[test]
    fn single_cell_gives_one_row() {
        let mut spec = small_spec(Axis::Budget(vec![1.0]), vec![Method::OffC2pl]);
        spec.seeds = vec![3];
        let rep = run_experiment(&spec).unwrap();
        assert_eq!(rep.rows.len(), 1);
        assert_eq!(rep.to_csv().lines().count(), 3);
    }

    #[test]
    fn factorial_row_count_and_determinism() {
        let spec = small_spec(Axis::Budget(vec![0.5, 1.0]), Method::ALL.to_vec());
        let a = run_experiment(&spec).unwrap();
        assert_eq!(a.rows.len(), 2 * 2 * Method::ALL.len());
        let b = run_experiment(&spec).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert!(a.rows.iter().all(|r| r.subopt >= -1e-9));
    }

    #[test]
    fn rounds_axis_prefixes_one_run() {
        let spec = small_spec(Axis::Rounds(vec![0, 2, 5]), vec![Method::A2, Method::OffC2pl]);
        let rep = run_experiment(&spec).unwrap();
        assert_eq!(rep.rows.len(), 2 * 3 * 2);
        // zero rounds reproduces the offline decision on the warm-start data
        let zero: Vec<&ResultRow> = rep.rows.iter().filter(|r| r.axis_value == "0").collect();
        assert!(zero.iter().any(|r| r.method == Method::A2));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = small_spec(Axis::Budget(vec![1.5]), vec![Method::OffC2pl]);
        assert!(run_experiment(&spec).is_err());
        spec.axis = Axis::Budget(vec![1.0]);
        spec.offline.cluster.n_users = 7;
        assert!(matches!(run_experiment(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn stderr_examples() {
        assert_eq!(mean_stderr(&[3.5]), (3.5, 0.0));
        let v: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let (m, se) = mean_stderr(&v);
        assert_eq!(m, 9.5);
        let var = v.iter().map(|x| (x - 9.5).powi(2)).sum::<f64>() / 19.0;
        assert!((se - (var / 20.0).sqrt()).abs() < 1e-15);
    }
}
