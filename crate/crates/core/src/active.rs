//! Active augmentation for the test user: query the comparison that most
//! increases the weakest direction of the information matrix, refit, and
//! average the per-round estimates.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::btl::{sample_preference, FeatureMap, PreferenceSample, Triple, UserDataset};
use crate::error::{Error, Result};
use crate::evaluate::suboptimality;
use crate::linalg::{self, SpdFactor, Vector};
use crate::mle::{concat_samples, fit_mle, GramianState, MleConfig};
use crate::offline::{greedy_policy, PessimisticOutcome, Policy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionMode {
    /// Every context with an ordered pair of distinct actions.
    FiniteTriples,
    /// Any `z` in the unit ball.
    IdealBall,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActiveConfig {
    pub rounds: usize,
    pub mode: SelectionMode,
}

/// A chosen query.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub z: Vector,
    pub triple: Option<Triple>,
}

/// Source of labels for actively chosen comparisons.
pub trait FeedbackOracle {
    fn query(&mut self, selection: &Selection) -> Result<bool>;
}

/// Labels drawn from the BTL model with a fixed preference vector.
pub struct BtlOracle<R> {
    theta: Vector,
    rng: R,
}

impl<R: Rng> BtlOracle<R> {
    /// `theta` should already include any sharpness factor.
    pub fn new(theta: Vector, rng: R) -> Self {
        BtlOracle { theta, rng }
    }
}

impl<R: Rng> FeedbackOracle for BtlOracle<R> {
    fn query(&mut self, selection: &Selection) -> Result<bool> {
        Ok(sample_preference(&mut self.rng, &self.theta, &selection.z))
    }
}

/// Answers from a stored dataset. Triples are looked up exactly (or swapped,
/// with the label flipped), cycling through repeated records; raw `z`
/// queries use the nearest stored `±z`.
pub struct ReplayOracle {
    by_triple: BTreeMap<Triple, Vec<bool>>,
    cursor: BTreeMap<Triple, usize>,
    samples: Vec<PreferenceSample>,
    names: Option<(Vec<String>, Vec<String>)>,
}

impl ReplayOracle {
    pub fn new(data: &UserDataset, feat: Option<&FeatureMap>) -> Self {
        let mut by_triple: BTreeMap<Triple, Vec<bool>> = BTreeMap::new();
        if let Some(ts) = &data.triples {
            for (t, s) in ts.iter().zip(&data.samples) {
                by_triple.entry(*t).or_default().push(s.y);
            }
        }
        ReplayOracle {
            by_triple,
            cursor: BTreeMap::new(),
            samples: data.samples.clone(),
            names: feat.map(|f| (f.contexts().to_vec(), f.actions().to_vec())),
        }
    }

    fn describe(&self, t: Triple) -> String {
        match &self.names {
            Some((c, a)) => format!("({}, {}, {})", c[t.context], a[t.action], a[t.other]),
            None => format!("({}, {}, {})", t.context, t.action, t.other),
        }
    }

    fn next_label(&mut self, t: Triple) -> Option<bool> {
        let labels = self.by_triple.get(&t)?;
        let c = self.cursor.entry(t).or_insert(0);
        let y = labels[*c % labels.len()];
        *c += 1;
        Some(y)
    }
}

impl FeedbackOracle for ReplayOracle {
    fn query(&mut self, selection: &Selection) -> Result<bool> {
        if let Some(t) = selection.triple {
            if let Some(y) = self.next_label(t) {
                return Ok(y);
            }
            let swapped = Triple {
                context: t.context,
                action: t.other,
                other: t.action,
            };
            if let Some(y) = self.next_label(swapped) {
                return Ok(!y);
            }
            return Err(Error::Lookup {
                kind: "stored comparison for triple",
                name: self.describe(t),
            });
        }
        let mut best: Option<(f64, bool)> = None;
        for s in &self.samples {
            let same = (&s.z - &selection.z).norm();
            let flipped = (&s.z + &selection.z).norm();
            let cand = if flipped < same { (flipped, !s.y) } else { (same, s.y) };
            if best.is_none_or(|b| cand.0 < b.0) {
                best = Some(cand);
            }
        }
        best.map(|b| b.1).ok_or(Error::Lookup {
            kind: "stored comparison",
            name: "any (replay dataset is empty)".into(),
        })
    }
}

/// Query maximising `zᵀM⁻¹z`. In finite mode the lexicographically first
/// maximiser among ordered triples wins; because the score is symmetric in
/// the two actions only `a < a′` needs scoring. In ideal-ball mode the
/// answer is the unit minimum eigenvector.
pub fn select_active_pair(
    gramian: &GramianState,
    feat: Option<&FeatureMap>,
    mode: SelectionMode,
) -> Result<Selection> {
    match mode {
        SelectionMode::IdealBall => Ok(Selection {
            z: linalg::min_eigen(&gramian.m)?.vector,
            triple: None,
        }),
        SelectionMode::FiniteTriples => {
            let f = feat.ok_or_else(|| Error::config("finite-triple selection needs a feature map"))?;
            if f.n_actions() < 2 {
                return Err(Error::config("no candidate pairs: fewer than 2 actions"));
            }
            let factor = SpdFactor::new(&gramian.m)?;
            let mut best: Option<(Triple, f64)> = None;
            for context in 0..f.n_contexts() {
                for action in 0..f.n_actions() {
                    for other in (action + 1)..f.n_actions() {
                        let t = Triple {
                            context,
                            action,
                            other,
                        };
                        let score = factor.inv_quad(&f.difference(t));
                        if best.is_none_or(|b| score > b.1) {
                            best = Some((t, score));
                        }
                    }
                }
            }
            let (t, _) = best.expect("at least one candidate");
            Ok(Selection {
                z: f.difference(t),
                triple: Some(t),
            })
        }
    }
}

/// Uniform random query: a random triple, or a uniform unit-sphere `z`.
pub fn select_random(
    dim: usize,
    feat: Option<&FeatureMap>,
    mode: SelectionMode,
    rng: &mut dyn RngCore,
) -> Result<Selection> {
    match mode {
        SelectionMode::FiniteTriples => {
            let f = feat.ok_or_else(|| Error::config("finite-triple selection needs a feature map"))?;
            let mut rng = rng;
            let t = f.sample_triple(&mut rng)?;
            Ok(Selection {
                z: f.difference(t),
                triple: Some(t),
            })
        }
        SelectionMode::IdealBall => loop {
            let v = Vector::from_fn(dim, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
            let n = v.norm();
            if n > 1e-12 {
                break Ok(Selection { z: v / n, triple: None });
            }
        },
    }
}

/// MLE over the offline samples followed by the active ones.
pub fn refit_online(
    offline: &[&PreferenceSample],
    active: &[PreferenceSample],
    dim: usize,
    cfg: &MleConfig,
    warm_start: Option<&Vector>,
) -> Result<Vector> {
    let all: Vec<&PreferenceSample> = offline.iter().copied().chain(active.iter()).collect();
    fit_mle(&all, dim, cfg, warm_start)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActiveRound {
    pub z: Vector,
    pub triple: Option<Triple>,
    pub label: bool,
    pub theta: Vector,
    pub lambda_min: f64,
}

#[derive(Debug, Clone)]
pub struct ActiveTrace {
    pub initial_theta: Vector,
    pub initial_lambda_min: f64,
    pub rounds: Vec<ActiveRound>,
    pub final_gramian: GramianState,
}

impl ActiveTrace {
    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }

    /// The trace cut after `n` rounds, with the Gramian rebuilt to match.
    pub fn prefix(&self, n: usize) -> ActiveTrace {
        let n = n.min(self.rounds.len());
        let mut g = self.final_gramian.clone();
        let mut m = g.m.clone().into_inner();
        for r in &self.rounds[n..] {
            m.ger(-1.0, &r.z, &r.z, 1.0);
        }
        g.m = linalg::SymMat::new((&m + m.transpose()) * 0.5).expect("symmetric by construction");
        g.n_samples -= self.rounds.len() - n;
        ActiveTrace {
            initial_theta: self.initial_theta.clone(),
            initial_lambda_min: self.initial_lambda_min,
            rounds: self.rounds[..n].to_vec(),
            final_gramian: g,
        }
    }
}

/// `θ̄ = (d λ_min(M̃ᴺ) θ̃ᴺ + Σₙ θ̃ⁿ) / (d λ_min(M̃ᴺ) + N)`; with no rounds the
/// starting estimate is returned.
pub fn weighted_final_estimate(trace: &ActiveTrace, dim: usize) -> Vector {
    let Some(last) = trace.rounds.last() else {
        return trace.initial_theta.clone();
    };
    let lead = dim as f64 * last.lambda_min;
    let mut acc = &last.theta * lead;
    for r in &trace.rounds {
        acc += &r.theta;
    }
    acc / (lead + trace.rounds.len() as f64)
}

/// Unweighted mean of the per-round estimates.
pub fn simple_average_estimate(trace: &ActiveTrace) -> Vector {
    if trace.rounds.is_empty() {
        return trace.initial_theta.clone();
    }
    let mut acc = Vector::zeros(trace.initial_theta.len());
    for r in &trace.rounds {
        acc += &r.theta;
    }
    acc / trace.rounds.len() as f64
}

/// How queries are chosen each round.
pub enum Selector<'a> {
    Targeted,
    Random(&'a mut dyn RngCore),
}

/// The select / label / update / refit loop from a starting estimate and
/// Gramian built on `offline`.
#[allow(clippy::too_many_arguments)]
pub fn active_loop(
    offline: &[&PreferenceSample],
    start_theta: &Vector,
    start_gramian: &GramianState,
    feat: Option<&FeatureMap>,
    active: &ActiveConfig,
    mut selector: Selector<'_>,
    oracle: &mut dyn FeedbackOracle,
    cfg: &MleConfig,
) -> Result<ActiveTrace> {
    let dim = start_gramian.dim();
    let mut gramian = start_gramian.clone();
    let mut theta = start_theta.clone();
    let mut queried: Vec<PreferenceSample> = Vec::with_capacity(active.rounds);
    let mut rounds = Vec::with_capacity(active.rounds);
    for _ in 0..active.rounds {
        let sel = match &mut selector {
            Selector::Targeted => select_active_pair(&gramian, feat, active.mode)?,
            Selector::Random(rng) => select_random(dim, feat, active.mode, &mut **rng)?,
        };
        let label = oracle.query(&sel)?;
        gramian.add(&sel.z);
        queried.push(PreferenceSample {
            z: sel.z.clone(),
            y: label,
        });
        theta = refit_online(offline, &queried, dim, cfg, Some(&theta))?;
        rounds.push(ActiveRound {
            z: sel.z,
            triple: sel.triple,
            label,
            theta: theta.clone(),
            lambda_min: gramian.lambda_min()?,
        });
    }
    Ok(ActiveTrace {
        initial_theta: start_theta.clone(),
        initial_lambda_min: start_gramian.lambda_min()?,
        rounds,
        final_gramian: gramian,
    })
}

#[derive(Debug, Clone)]
pub struct ActiveRun {
    pub trace: ActiveTrace,
    pub theta_bar: Vector,
    pub policy: Option<Policy>,
}

/// Active augmentation on top of an offline outcome: targeted queries and
/// the weighted final estimate.
pub fn run_a2(
    datasets: &[UserDataset],
    offline: &PessimisticOutcome,
    feat: Option<&FeatureMap>,
    active: &ActiveConfig,
    oracle: &mut dyn FeedbackOracle,
    cfg: &MleConfig,
) -> Result<ActiveRun> {
    augment(datasets, offline, feat, active, Selector::Targeted, oracle, cfg)
}

/// Same loop with uniformly random queries.
pub fn run_random_augment(
    datasets: &[UserDataset],
    offline: &PessimisticOutcome,
    feat: Option<&FeatureMap>,
    active: &ActiveConfig,
    rng: &mut dyn RngCore,
    oracle: &mut dyn FeedbackOracle,
    cfg: &MleConfig,
) -> Result<ActiveRun> {
    augment(datasets, offline, feat, active, Selector::Random(rng), oracle, cfg)
}

fn augment(
    datasets: &[UserDataset],
    offline: &PessimisticOutcome,
    feat: Option<&FeatureMap>,
    active: &ActiveConfig,
    selector: Selector<'_>,
    oracle: &mut dyn FeedbackOracle,
    cfg: &MleConfig,
) -> Result<ActiveRun> {
    let members: Vec<&UserDataset> = offline.members.iter().map(|&m| &datasets[m]).collect();
    let samples = concat_samples(&members);
    let trace = active_loop(
        &samples,
        &offline.state.theta_tilde,
        &offline.state.gramian,
        feat,
        active,
        selector,
        oracle,
        cfg,
    )?;
    let dim = offline.state.gramian.dim();
    let theta_bar = weighted_final_estimate(&trace, dim);
    // with no rounds the offline decision stands unchanged
    let policy = if trace.is_empty() {
        offline.policy.clone()
    } else {
        feat.map(|f| greedy_policy(&theta_bar, f))
    };
    Ok(ActiveRun {
        trace,
        theta_bar,
        policy,
    })
}

/// Purely active learning from the prior: no offline data and a simple
/// average of the per-round estimates.
pub fn run_apo(
    dim: usize,
    feat: Option<&FeatureMap>,
    active: &ActiveConfig,
    oracle: &mut dyn FeedbackOracle,
    cfg: &MleConfig,
) -> Result<ActiveRun> {
    let trace = active_loop(
        &[],
        &Vector::zeros(dim),
        &GramianState::prior(dim, cfg),
        feat,
        active,
        Selector::Targeted,
        oracle,
        cfg,
    )?;
    let theta_bar = simple_average_estimate(&trace);
    let policy = feat.map(|f| greedy_policy(&theta_bar, f));
    Ok(ActiveRun {
        trace,
        theta_bar,
        policy,
    })
}

/// Smallest block size certifying imbalance of `gramian` for `n` rounds.
pub fn diagnose_imbalance(gramian: &GramianState, n: usize) -> Result<usize> {
    linalg::imbalance_index(&gramian.m, n)
}

/// `round,lambda_min,subopt_of_greedy_policy_from_theta_n,chosen_triple,label`
/// rows. Suboptimality needs ground truth and a feature map; the triple
/// column is empty outside finite mode.
pub fn trace_csv(
    trace: &ActiveTrace,
    feat: Option<&FeatureMap>,
    theta_true: Option<&Vector>,
) -> Result<String> {
    let mut out = String::from("round,lambda_min,subopt_of_greedy_policy_from_theta_n,chosen_triple,label\n");
    for (i, r) in trace.rounds.iter().enumerate() {
        let subopt = match (feat, theta_true) {
            (Some(f), Some(t)) => format!("{}", suboptimality(&greedy_policy(&r.theta, f), t, f)?),
            _ => String::new(),
        };
        let triple = match (r.triple, feat) {
            (Some(t), Some(f)) => format!(
                "{}|{}|{}",
                f.contexts()[t.context],
                f.actions()[t.action],
                f.actions()[t.other]
            ),
            _ => String::new(),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            i + 1,
            r.lambda_min,
            subopt,
            triple,
            u8::from(r.label)
        );
    }
    Ok(out)
}
