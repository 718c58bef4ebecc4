//! Bradley–Terry–Luce preference model, feature maps and the synthetic
//! clustered-population generator.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Vector;

/// Slack allowed on the `‖φ‖ ≤ 1` and `‖z‖ ≤ 2` norm contracts.
pub const NORM_SLACK: f64 = 1e-12;

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Derivative of the logistic function, `σ(x)(1 − σ(x))`.
pub fn sigmoid_slope(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

/// `P[y = 1] = σ(θᵀz)`.
pub fn preference_prob(theta: &Vector, z: &Vector) -> f64 {
    sigmoid(theta.dot(z))
}

/// Draws a BTL label: `true` means the first action of the pair is preferred.
pub fn sample_preference(rng: &mut impl Rng, theta: &Vector, z: &Vector) -> bool {
    draw(rng, preference_prob(theta, z))
}

fn draw(rng: &mut impl Rng, p: f64) -> bool {
    rng.random::<f64>() < p
}

/// One context–action pair `(x, a, a′)` by index into a [`FeatureMap`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub context: usize,
    pub action: usize,
    pub other: usize,
}

/// A single pairwise comparison: difference feature and binary outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceSample {
    pub z: Vector,
    pub y: bool,
}

impl PreferenceSample {
    pub fn new(z: Vector, y: bool) -> Result<Self> {
        if z.iter().any(|x| !x.is_finite()) {
            return Err(Error::contract("difference feature has non-finite entries"));
        }
        if z.norm() > 2.0 + NORM_SLACK {
            return Err(Error::contract(format!(
                "difference feature norm {} exceeds 2",
                z.norm()
            )));
        }
        Ok(PreferenceSample { z, y })
    }

    pub fn label(&self) -> f64 {
        if self.y {
            1.0
        } else {
            0.0
        }
    }
}

/// Offline comparisons contributed by one user.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct UserDataset {
    pub user: String,
    pub samples: Vec<PreferenceSample>,
    /// Parallel to `samples` when the raw triples are known.
    pub triples: Option<Vec<Triple>>,
}

impl UserDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The first `n` samples (all of them if `n` exceeds the length).
    pub fn truncated(&self, n: usize) -> UserDataset {
        let n = n.min(self.samples.len());
        UserDataset {
            user: self.user.clone(),
            samples: self.samples[..n].to_vec(),
            triples: self.triples.as_ref().map(|t| t[..n].to_vec()),
        }
    }
}

/// Known map `φ(x, a)` over finite context and action sets, plus the
/// context distribution. Ids are kept in lexicographic order so that index
/// order doubles as the tie-break order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    contexts: Vec<String>,
    actions: Vec<String>,
    dim: usize,
    table: Vec<Vector>,
    rho: Vec<f64>,
}

impl FeatureMap {
    /// Builds a feature map from `phi[context][action]` and `rho[context]`.
    pub fn new(
        phi: &BTreeMap<String, BTreeMap<String, Vec<f64>>>,
        rho: &BTreeMap<String, f64>,
    ) -> Result<Self> {
        let contexts: Vec<String> = phi.keys().cloned().collect();
        if contexts.is_empty() {
            return Err(Error::config("feature map has no contexts"));
        }
        let actions: Vec<String> = phi[&contexts[0]].keys().cloned().collect();
        if actions.is_empty() {
            return Err(Error::config("feature map has no actions"));
        }
        let dim = phi[&contexts[0]][&actions[0]].len();
        if dim == 0 {
            return Err(Error::config("feature vectors must have dimension >= 1"));
        }
        let mut table = Vec::with_capacity(contexts.len() * actions.len());
        for c in &contexts {
            let row = &phi[c];
            if row.len() != actions.len() || !row.keys().eq(actions.iter()) {
                return Err(Error::config(format!(
                    "context {c} does not define exactly the shared action set"
                )));
            }
            for a in &actions {
                let v = &row[a];
                if v.len() != dim {
                    return Err(Error::config(format!(
                        "phi({c}, {a}) has dimension {}, expected {dim}",
                        v.len()
                    )));
                }
                let v = Vector::from_column_slice(v);
                if v.iter().any(|x| !x.is_finite()) || v.norm() > 1.0 + NORM_SLACK {
                    return Err(Error::config(format!(
                        "phi({c}, {a}) must be finite with norm <= 1 (norm {})",
                        v.norm()
                    )));
                }
                table.push(v);
            }
        }
        let mut weights = Vec::with_capacity(contexts.len());
        for c in &contexts {
            let w = *rho
                .get(c)
                .ok_or_else(|| Error::config(format!("rho_p has no weight for context {c}")))?;
            if !w.is_finite() || w < 0.0 {
                return Err(Error::config(format!("rho_p({c}) = {w} is not a weight")));
            }
            weights.push(w);
        }
        if rho.len() != contexts.len() {
            return Err(Error::config("rho_p names contexts absent from phi"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!("rho_p sums to {total}, expected 1")));
        }
        Ok(FeatureMap {
            contexts,
            actions,
            dim,
            table,
            rho: weights,
        })
    }

    /// Random table with unit-norm features and uniform `ρ_p`.
    ///
    /// Coordinate `k` is scaled by `exp(−anisotropy · k / (d − 1))` before
    /// normalisation, which starves trailing dimensions of coverage when
    /// `anisotropy > 0`.
    pub fn random(
        n_contexts: usize,
        n_actions: usize,
        dim: usize,
        anisotropy: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n_contexts == 0 || n_actions == 0 || dim == 0 {
            return Err(Error::config("feature map needs contexts, actions and dim >= 1"));
        }
        if !(anisotropy >= 0.0) {
            return Err(Error::config("anisotropy must be >= 0"));
        }
        let scale: Vec<f64> = (0..dim)
            .map(|k| {
                let t = if dim > 1 { k as f64 / (dim - 1) as f64 } else { 0.0 };
                (-anisotropy * t).exp()
            })
            .collect();
        let mut phi = BTreeMap::new();
        let mut rho = BTreeMap::new();
        let ctx_ids = padded_ids("x", n_contexts);
        let act_ids = padded_ids("a", n_actions);
        for c in &ctx_ids {
            let mut row = BTreeMap::new();
            for a in &act_ids {
                let mut v: Vec<f64> = scale
                    .iter()
                    .map(|s| s * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    v.iter_mut().for_each(|x| *x /= norm);
                }
                // round-off may leave the norm a hair above one
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1.0 {
                    v.iter_mut().for_each(|x| *x /= norm * (1.0 + 1e-15));
                }
                row.insert(a.clone(), v);
            }
            phi.insert(c.clone(), row);
            rho.insert(c.clone(), 1.0 / n_contexts as f64);
        }
        // make the weights sum to one exactly in floating point
        let total: f64 = rho.values().sum();
        if let Some(first) = rho.values_mut().next() {
            *first += 1.0 - total;
        }
        FeatureMap::new(&phi, &rho)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_contexts(&self) -> usize {
        self.contexts.len()
    }

    pub fn n_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn contexts(&self) -> &[String] {
        &self.contexts
    }

    pub fn actions(&self) -> &[String] {
        &self.actions
    }

    pub fn phi(&self, context: usize, action: usize) -> &Vector {
        &self.table[context * self.actions.len() + action]
    }

    pub fn rho(&self, context: usize) -> f64 {
        self.rho[context]
    }

    pub fn context_index(&self, id: &str) -> Result<usize> {
        self.contexts
            .binary_search_by(|c| c.as_str().cmp(id))
            .map_err(|_| Error::Lookup {
                kind: "context",
                name: id.to_string(),
            })
    }

    pub fn action_index(&self, id: &str) -> Result<usize> {
        self.actions
            .binary_search_by(|c| c.as_str().cmp(id))
            .map_err(|_| Error::Lookup {
                kind: "action",
                name: id.to_string(),
            })
    }

    /// `φ(x, a) − φ(x, a′)`.
    pub fn difference(&self, t: Triple) -> Vector {
        self.phi(t.context, t.action) - self.phi(t.context, t.other)
    }

    /// Context sampled from `ρ_p` by inverse CDF.
    pub fn sample_context(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, w) in self.rho.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        // u landed in the round-off tail; pick the last positive weight
        self.rho.iter().rposition(|w| *w > 0.0).unwrap_or(0)
    }

    /// Uniform context and two distinct uniform actions.
    pub fn sample_triple(&self, rng: &mut impl Rng) -> Result<Triple> {
        let n = self.actions.len();
        if n < 2 {
            return Err(Error::config("sampling a pair needs at least 2 actions"));
        }
        let context = self.sample_context(rng);
        let action = rng.random_range(0..n);
        let mut other = rng.random_range(0..n - 1);
        if other >= action {
            other += 1;
        }
        Ok(Triple {
            context,
            action,
            other,
        })
    }

    /// Serialisable `{phi: {"ctx|act": [...]}, rho_p: {ctx: w}}` form.
    pub fn to_table(&self) -> FeatureTable {
        let mut phi = BTreeMap::new();
        for (ci, c) in self.contexts.iter().enumerate() {
            for (ai, a) in self.actions.iter().enumerate() {
                phi.insert(format!("{c}|{a}"), self.phi(ci, ai).iter().copied().collect());
            }
        }
        let rho_p = self
            .contexts
            .iter()
            .cloned()
            .zip(self.rho.iter().copied())
            .collect();
        FeatureTable { phi, rho_p }
    }

    pub fn from_table(t: &FeatureTable) -> Result<Self> {
        let mut phi: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
        for (key, v) in &t.phi {
            let (c, a) = key
                .split_once('|')
                .ok_or_else(|| Error::config(format!("feature key {key:?} is not ctx|act")))?;
            phi.entry(c.to_string())
                .or_default()
                .insert(a.to_string(), v.clone());
        }
        FeatureMap::new(&phi, &t.rho_p)
    }
}

/// On-disk feature table sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub phi: BTreeMap<String, Vec<f64>>,
    pub rho_p: BTreeMap<String, f64>,
}

/// Zero-padded ids so lexicographic and numeric order agree.
pub fn padded_ids(prefix: &str, n: usize) -> Vec<String> {
    let width = n.saturating_sub(1).to_string().len().max(2);
    (0..n).map(|i| format!("{prefix}{i:0width$}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationConfig {
    pub users: usize,
    pub clusters: usize,
    pub dim: usize,
    /// Standard deviation `s` of the per-user perturbation.
    pub noise_scale: f64,
    /// Norm of every cluster centre, at most 1.
    pub center_norm: f64,
    /// Centres are redrawn until every pair is at least this far apart.
    pub min_center_gap: f64,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        PopulationConfig {
            users: 40,
            clusters: 8,
            dim: 16,
            noise_scale: 0.0,
            center_norm: 1.0,
            min_center_gap: 0.0,
        }
    }
}

impl PopulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 || self.users < self.clusters {
            return Err(Error::config(format!(
                "need users >= clusters >= 1 (users {}, clusters {})",
                self.users, self.clusters
            )));
        }
        if self.dim == 0 {
            return Err(Error::config("dim must be >= 1"));
        }
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            return Err(Error::config("noise scale must be finite and >= 0"));
        }
        if !(self.center_norm > 0.0 && self.center_norm <= 1.0) {
            return Err(Error::config("center norm must lie in (0, 1]"));
        }
        if !(self.min_center_gap >= 0.0) {
            return Err(Error::config("minimum centre gap must be >= 0"));
        }
        Ok(())
    }
}

/// Ground-truth users: cluster assignment and preference vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub users: Vec<String>,
    pub cluster_of: Vec<usize>,
    pub true_theta: Vec<Vec<f64>>,
    pub cluster_theta: Vec<Vec<f64>>,
    pub noise_scale: f64,
}

impl Population {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_theta.len()
    }

    pub fn dim(&self) -> usize {
        self.cluster_theta.first().map_or(0, Vec::len)
    }

    pub fn theta(&self, user: usize) -> Vector {
        Vector::from_column_slice(&self.true_theta[user])
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.n_users())
            .filter(|&u| self.cluster_of[u] == cluster)
            .collect()
    }

    /// Minimum distance between the centres of two distinct non-empty
    /// clusters, `None` when fewer than two clusters have users.
    pub fn gamma(&self) -> Option<f64> {
        let used: Vec<usize> = (0..self.n_clusters())
            .filter(|&j| self.cluster_of.contains(&j))
            .collect();
        let mut best: Option<f64> = None;
        for (i, &a) in used.iter().enumerate() {
            for &b in &used[i + 1..] {
                let d = distance(&self.cluster_theta[a], &self.cluster_theta[b]);
                best = Some(best.map_or(d, |x: f64| x.min(d)));
            }
        }
        best
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn project_to_ball(v: &mut [f64], radius: f64) {
    // Shrink slightly below the radius so the norm stays inside under any
    // summation order.
    let target = radius * (1.0 - 1e-14);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > target {
        let s = target / n;
        v.iter_mut().for_each(|x| *x *= s);
    }
}


fn gaussian_vec(rng: &mut impl Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Draws cluster centres on the sphere of radius `center_norm`, assigns
/// users to clusters uniformly at random and perturbs each user by
/// `N(0, s² I)` followed by projection onto the unit ball.
pub fn generate_population(cfg: &PopulationConfig, rng: &mut impl Rng) -> Result<Population> {
    cfg.validate()?;
    const MAX_CENTER_DRAWS: usize = 10_000;
    let mut centers = Vec::new();
    for attempt in 0.. {
        if attempt == MAX_CENTER_DRAWS {
            return Err(Error::config(format!(
                "could not place {} centres at pairwise distance >= {}",
                cfg.clusters, cfg.min_center_gap
            )));
        }
        centers = (0..cfg.clusters)
            .map(|_| {
                let mut c = gaussian_vec(rng, cfg.dim, 1.0);
                let n = c.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 0.0 {
                    c.iter_mut().for_each(|x| *x *= cfg.center_norm / n);
                }
                project_to_ball(&mut c, 1.0);
                c
            })
            .collect::<Vec<_>>();
        let ok = (0..cfg.clusters).all(|i| {
            ((i + 1)..cfg.clusters).all(|j| distance(&centers[i], &centers[j]) >= cfg.min_center_gap)
        });
        if ok {
            break;
        }
    }
    let cluster_of: Vec<usize> = (0..cfg.users)
        .map(|_| rng.random_range(0..cfg.clusters))
        .collect();
    let true_theta = cluster_of
        .iter()
        .map(|&j| {
            let mut t = centers[j].clone();
            if cfg.noise_scale > 0.0 {
                for (x, e) in t.iter_mut().zip(gaussian_vec(rng, cfg.dim, cfg.noise_scale)) {
                    *x += e;
                }
                project_to_ball(&mut t, 1.0);
            }
            t
        })
        .collect();
    Ok(Population {
        users: padded_ids("u", cfg.users),
        cluster_of,
        true_theta,
        cluster_theta: centers,
        noise_scale: cfg.noise_scale,
    })
}

/// Offline comparisons for every user of `pop`.
///
/// With a feature map, each sample is a `ρ_p` context and two distinct
/// uniform actions. Without one (raw-z mode) `z ~ N(0, I)` is shrunk by
/// `min(1, 2/‖z‖)`. Labels follow `σ(β θ_uᵀ z)`.
pub fn generate_offline_data(
    pop: &Population,
    feat: Option<&FeatureMap>,
    per_user_budget: usize,
    beta: f64,
    rng: &mut impl Rng,
) -> Result<Vec<UserDataset>> {
    if !(beta > 0.0) {
        return Err(Error::config("beta must be > 0"));
    }
    if let Some(f) = feat {
        if f.n_actions() < 2 {
            return Err(Error::config("tabular data needs at least 2 actions"));
        }
        if f.dim() != pop.dim() {
            return Err(Error::config(format!(
                "feature dim {} differs from population dim {}",
                f.dim(),
                pop.dim()
            )));
        }
    }
    let mut out = Vec::with_capacity(pop.n_users());
    for u in 0..pop.n_users() {
        let theta = pop.theta(u) * beta;
        let mut samples = Vec::with_capacity(per_user_budget);
        let mut triples = feat.map(|_| Vec::with_capacity(per_user_budget));
        for _ in 0..per_user_budget {
            let z = match feat {
                Some(f) => {
                    let t = f.sample_triple(rng)?;
                    if let Some(ts) = triples.as_mut() {
                        ts.push(t);
                    }
                    f.difference(t)
                }
                None => raw_z(rng, pop.dim()),
            };
            let y = sample_preference(rng, &theta, &z);
            samples.push(PreferenceSample { z, y });
        }
        out.push(UserDataset {
            user: pop.users[u].clone(),
            samples,
            triples,
        });
    }
    Ok(out)
}

/// `z ~ N(0, I_d)` rescaled into the radius-2 ball.
pub fn raw_z(rng: &mut impl Rng, dim: usize) -> Vector {
    let mut z = Vector::from_vec(gaussian_vec(rng, dim, 1.0));
    let n = z.norm();
    if n > 2.0 {
        z *= 2.0 / n;
        if z.norm() > 2.0 {
            z *= 1.0 - 1e-15;
        }
    }
    z
}
