use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use prefclust_core::active::{
    run_a2, run_apo, run_random_augment, trace_csv, ActiveConfig, ActiveRun, BtlOracle, FeedbackOracle,
    ReplayOracle, SelectionMode,
};
use prefclust_core::btl::{generate_offline_data, generate_population, PopulationConfig};
use prefclust_core::clustering::{ClusterMode, ClusterParams, ItemRegularityParams};
use prefclust_core::evaluate::{diagnostics, suboptimality};
use prefclust_core::experiment::{
    mean_stderr, panel_csv, panel_rows, run_experiment, run_offline, Axis, BaselineOptions, EnvConfig,
    ExperimentSpec, Method,
};
use prefclust_core::io::{
    format_dataset, format_features, load_dataset, load_features, load_population, write_text, Manifest,
};
use prefclust_core::mle::{default_kappa, fit_mle};
use prefclust_core::offline::{
    compute_user_stats, default_reference, infer_dim, user_index, GammaPolicy, OfflineConfig, PolicySearch,
};
use prefclust_core::seeding::{config_hash, stream_rng};
use prefclust_core::{Error, FeatureMap, MleConfig, PipelineReport, Policy, Population, Result, UserDataset, Vector};
use serde_json::json;

use crate::{
    ActiveArgs, AlgoArgs, AxisArg, EnvArgs, GammaPolicyArg, GenerateArgs, ModeArg, OfflineArgs, ReportArgs,
    SearchArg, SweepArgs,
};

fn population_config(env: &EnvArgs) -> PopulationConfig {
    PopulationConfig {
        users: env.users,
        clusters: env.clusters,
        dim: env.dim,
        noise_scale: env.noise_scale,
        center_norm: env.center_norm,
        min_center_gap: env.min_center_gap,
    }
}

fn env_config(env: &EnvArgs) -> EnvConfig {
    EnvConfig {
        population: population_config(env),
        n_contexts: env.contexts,
        n_actions: env.actions,
        anisotropy: env.anisotropy,
        budget: env.budget,
        beta: env.beta,
    }
}

/// Validated algorithm configuration for `n_users` users in `dim`
/// dimensions.
fn offline_config(a: &AlgoArgs, n_users: usize, dim: usize) -> Result<OfflineConfig> {
    let mle = MleConfig {
        lambda: a.lambda,
        kappa: a.kappa.unwrap_or_else(default_kappa),
        tol: a.tol,
        max_iters: a.max_iters,
    };
    mle.validate()?;
    let mut cluster = ClusterParams::new(a.alpha, a.delta, a.gamma_hat, n_users.max(1))?;
    cluster.radius_scale = a.radius_scale;
    if a.ir_mode {
        let (Some(lambda_a), Some(sigma2), Some(size)) = (a.lambda_a, a.sigma2, a.cand_size) else {
            return Err(Error::config("--ir-mode needs --lambda-a, --sigma2 and --cand-size"));
        };
        cluster.mode = ClusterMode::ItemRegularity(ItemRegularityParams::new(
            lambda_a,
            sigma2,
            size,
            n_users.max(1),
            dim.max(1),
            a.delta,
        )?);
    }
    let cfg = OfflineConfig {
        mle,
        cluster,
        gamma_policy: match a.gamma_policy {
            GammaPolicyArg::Fixed => GammaPolicy::Fixed,
            GammaPolicyArg::Under => GammaPolicy::Under,
            GammaPolicyArg::Over => GammaPolicy::Over,
        },
        search: match a.search {
            SearchArg::Auto => PolicySearch::Auto,
            SearchArg::Exhaustive => PolicySearch::Exhaustive,
            SearchArg::Coordinate => PolicySearch::Coordinate,
        },
    };
    cfg.validate()?;
    Ok(cfg)
}

fn baseline_options(a: &AlgoArgs) -> Result<BaselineOptions> {
    if a.kmeans_restarts == 0 || a.dbscan_min_pts == 0 {
        return Err(Error::config("kmeans restarts and dbscan min points must be >= 1"));
    }
    if a.dbscan_eps.is_some_and(|e| !(e >= 0.0 && e.is_finite())) {
        return Err(Error::config("dbscan eps must be finite and >= 0"));
    }
    Ok(BaselineOptions {
        knn_k: a.knn_k,
        kmeans_restarts: a.kmeans_restarts,
        dbscan_eps: a.dbscan_eps,
        dbscan_min_pts: a.dbscan_min_pts,
    })
}

fn parse_methods(list: &str) -> Result<Vec<Method>> {
    let methods: Vec<Method> = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if methods.is_empty() {
        return Err(Error::config("no methods given"));
    }
    Ok(methods)
}

fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    let bad = || Error::config(format!("cannot parse seeds {spec:?}"));
    let seeds: Vec<u64> = if let Some((a, b)) = spec.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        (a..b).collect()
    } else {
        spec.split(',')
            .map(|s| s.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    if seeds.is_empty() {
        return Err(Error::config("seed list is empty"));
    }
    Ok(seeds)
}

fn parse_list<T: std::str::FromStr>(list: &str, what: &str) -> Result<Vec<T>> {
    list.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::config(format!("cannot parse {what} value {s:?}")))
        })
        .collect()
}

fn load_inputs(
    data: &Path,
    features: Option<&Path>,
    truth: Option<&Path>,
) -> Result<(Vec<UserDataset>, Option<FeatureMap>, Option<Population>)> {
    let feat = features.map(load_features).transpose()?;
    let datasets = load_dataset(data, feat.as_ref())?;
    if datasets.is_empty() {
        return Err(Error::Data {
            path: data.display().to_string(),
            line: 0,
            message: "dataset has no records".into(),
        });
    }
    let pop = truth.map(load_population).transpose()?;
    Ok((datasets, feat, pop))
}

/// The evaluation target for a test user: the true vector when a
/// population is available, otherwise an MLE on the user's full data.
fn reference_theta(
    pop: Option<&Population>,
    datasets: &[UserDataset],
    test: usize,
    dim: usize,
    mle: &MleConfig,
) -> Result<(Vector, bool)> {
    let user = &datasets[test].user;
    if let Some(p) = pop {
        let i = p.users.iter().position(|u| u == user).ok_or_else(|| Error::Lookup {
            kind: "user in population file",
            name: user.clone(),
        })?;
        return Ok((p.theta(i), true));
    }
    Ok((fit_mle(&datasets[test].samples, dim, mle, None)?, false))
}

fn fill_truth(
    report: &mut PipelineReport,
    policy: Option<&Policy>,
    theta_tilde: &Vector,
    reference: &(Vector, bool),
    beta: f64,
    feat: Option<&FeatureMap>,
) -> Result<()> {
    if let (Some(pi), Some(f)) = (policy, feat) {
        report.subopt = Some(suboptimality(pi, &reference.0, f)?);
    }
    if reference.1 {
        report.estimation_error = Some((theta_tilde - &reference.0 * beta).norm());
    } else {
        report.flags.push("reference=user_mle".into());
    }
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn generate(a: &GenerateArgs) -> Result<()> {
    let env = env_config(&a.env);
    env.population.validate()?;
    if !(a.env.beta > 0.0) {
        return Err(Error::config("beta must be > 0"));
    }
    let hash = config_hash(&(&env, a.raw_z));
    let mut rng = stream_rng(a.seed, &["generate"]);
    let pop = generate_population(&env.population, &mut rng)?;
    let feat = if a.raw_z {
        None
    } else {
        Some(FeatureMap::random(
            env.n_contexts,
            env.n_actions,
            env.population.dim,
            env.anisotropy,
            &mut rng,
        )?)
    };
    let data = generate_offline_data(&pop, feat.as_ref(), env.budget, env.beta, &mut rng)?;
    let header = vec![format!("seed={} config_hash={hash}", a.seed)];
    let mut files = vec!["data.jsonl".to_string(), "population.json".to_string()];
    write_text(&a.out.join("data.jsonl"), &format_dataset(&data, feat.as_ref(), &header)?)?;
    write_text(
        &a.out.join("population.json"),
        &(serde_json::to_string_pretty(&pop).expect("population serialises") + "\n"),
    )?;
    if let Some(f) = &feat {
        write_text(&a.out.join("features.json"), &format_features(f))?;
        files.push("features.json".into());
    }
    let manifest = Manifest {
        seed: a.seed,
        config_hash: hash,
        users: pop.n_users(),
        per_user_budget: env.budget,
        records: data.iter().map(UserDataset::len).sum(),
        files,
    };
    let body = json!({ "manifest": manifest, "config": env, "raw_z": a.raw_z });
    write_text(
        &a.out.join("manifest.json"),
        &(serde_json::to_string_pretty(&body).expect("manifest serialises") + "\n"),
    )
}

pub fn offline(a: &OfflineArgs) -> Result<()> {
    // validate parameters before touching any input
    offline_config(&a.algo, 1, 1)?;
    let opts = baseline_options(&a.algo)?;
    let methods = parse_methods(&a.methods)?;
    if let Some(m) = methods.iter().find(|m| m.is_active()) {
        return Err(Error::config(format!("{} is an active method; use the active command", m.name())));
    }
    if !(a.beta > 0.0) {
        return Err(Error::config("beta must be > 0"));
    }

    let (datasets, feat, pop) = load_inputs(&a.data, a.features.as_deref(), a.truth.as_deref())?;
    let dim = infer_dim(&datasets, feat.as_ref())?;
    let cfg = offline_config(&a.algo, datasets.len(), dim)?;
    let tests: Vec<usize> = match &a.test_users {
        Some(list) => list
            .split(',')
            .map(|u| user_index(&datasets, u.trim()))
            .collect::<Result<_>>()?,
        None => (0..datasets.len()).collect(),
    };
    let stats = compute_user_stats(&datasets, dim, &cfg)?;
    let w = feat
        .as_ref()
        .map_or_else(|| Vector::zeros(dim), |f| default_reference(&datasets, f));

    let mut reports = Vec::new();
    for &t in &tests {
        let reference = reference_theta(pop.as_ref(), &datasets, t, dim, &cfg.mle)?;
        for &m in &methods {
            let mut rng = stream_rng(a.seed, &[m.name(), &datasets[t].user]);
            let run = run_offline(m, &datasets, feat.as_ref(), t, &stats, &w, &cfg, &opts, &mut rng)?;
            let mut report = run.report(m, &datasets, t, feat.as_ref());
            fill_truth(
                &mut report,
                run.outcome.policy.as_ref(),
                &run.outcome.state.theta_tilde,
                &reference,
                a.beta,
                feat.as_ref(),
            )?;
            if pop.is_some() {
                let d = diagnostics(&run.outcome.members, t, pop.as_ref(), &datasets)?;
                report.n_homog = Some(d.n_homog);
                report.n_heterog = Some(d.n_heterog);
                report.eta = Some(d.eta);
            }
            if let Some(g) = run.gamma_hat {
                eprintln!("test_user={} method={} gamma_hat={g}", report.test_user, m.name());
            }
            reports.push(report);
        }
    }

    let hash = config_hash(&(&cfg, &opts, &a.methods, a.seed));
    let mut csv = format!(
        "# seed={} config_hash={hash}\ntest_user,method,gamma_hat,n_tilde,lambda_min,beta_tilde,j_tilde,subopt\n",
        a.seed
    );
    for r in &reports {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            r.test_user,
            r.method,
            fmt_opt(r.gamma_hat),
            r.n_tilde,
            r.lambda_min,
            r.beta_tilde,
            fmt_opt(r.j_tilde),
            fmt_opt(r.subopt)
        );
    }
    let body = json!({ "seed": a.seed, "config_hash": hash, "reports": reports });
    write_text(
        &a.out.join("reports.json"),
        &(serde_json::to_string_pretty(&body).expect("reports serialise") + "\n"),
    )?;
    write_text(&a.out.join("results.csv"), &csv)
}

pub fn active(a: &ActiveArgs) -> Result<()> {
    offline_config(&a.algo, 1, 1)?;
    let method: Method = a.method.parse()?;
    if !method.is_active() {
        return Err(Error::config(format!("{} is an offline method", method.name())));
    }
    if !(0.0..=1.0).contains(&a.warm_start) {
        return Err(Error::config("warm start fraction must lie in [0, 1]"));
    }
    if !(a.beta > 0.0) {
        return Err(Error::config("beta must be > 0"));
    }
    let mode = match a.mode {
        ModeArg::Finite => SelectionMode::FiniteTriples,
        ModeArg::Ball => SelectionMode::IdealBall,
    };
    if mode == SelectionMode::FiniteTriples && a.features.is_none() {
        return Err(Error::config("finite-triple mode needs --features"));
    }

    let (datasets, feat, pop) = load_inputs(&a.data, a.features.as_deref(), a.truth.as_deref())?;
    let dim = infer_dim(&datasets, feat.as_ref())?;
    let cfg = offline_config(&a.algo, datasets.len(), dim)?;
    let test = user_index(&datasets, &a.test_user)?;
    let reference = reference_theta(pop.as_ref(), &datasets, test, dim, &cfg.mle)?;
    let warm: Vec<UserDataset> = datasets
        .iter()
        .map(|d| d.truncated((a.warm_start * d.len() as f64).floor() as usize))
        .collect();

    let mut oracle: Box<dyn FeedbackOracle> = match (&pop, reference.1) {
        (Some(_), true) => Box::new(BtlOracle::new(
            &reference.0 * a.beta,
            stream_rng(a.seed, &[method.name(), &a.test_user, "oracle"]),
        )),
        _ => Box::new(ReplayOracle::new(&datasets[test], feat.as_ref())),
    };
    let active = ActiveConfig { rounds: a.rounds, mode };
    let (run, mut summary): (ActiveRun, PipelineReport) = if method == Method::Apo {
        let run = run_apo(dim, feat.as_ref(), &active, oracle.as_mut(), &cfg.mle)?;
        let summary = PipelineReport {
            test_user: a.test_user.clone(),
            method: method.name().to_string(),
            gamma_hat: None,
            edges: Vec::new(),
            neighbors: Vec::new(),
            lambda_min: run.trace.initial_lambda_min,
            n_tilde: 0,
            beta_tilde: 0.0,
            policy: None,
            j_tilde: None,
            subopt: None,
            estimation_error: None,
            n_homog: None,
            n_heterog: None,
            eta: None,
            flags: Vec::new(),
        };
        (run, summary)
    } else {
        let stats = compute_user_stats(&warm, dim, &cfg)?;
        let w = feat
            .as_ref()
            .map_or_else(|| Vector::zeros(dim), |f| default_reference(&warm, f));
        let mut rng = stream_rng(a.seed, &[Method::OffC2pl.name(), &a.test_user]);
        let off = run_offline(
            Method::OffC2pl,
            &warm,
            feat.as_ref(),
            test,
            &stats,
            &w,
            &cfg,
            &BaselineOptions::default(),
            &mut rng,
        )?;
        let run = if method == Method::A2 {
            run_a2(&warm, &off.outcome, feat.as_ref(), &active, oracle.as_mut(), &cfg.mle)?
        } else {
            let mut sel = stream_rng(a.seed, &[method.name(), &a.test_user, "select"]);
            run_random_augment(
                &warm,
                &off.outcome,
                feat.as_ref(),
                &active,
                &mut sel,
                oracle.as_mut(),
                &cfg.mle,
            )?
        };
        let mut summary = off.report(method, &warm, test, feat.as_ref());
        if pop.is_some() {
            let d = diagnostics(&off.outcome.members, test, pop.as_ref(), &warm)?;
            summary.n_homog = Some(d.n_homog);
            summary.n_heterog = Some(d.n_heterog);
            summary.eta = Some(d.eta);
        }
        (run, summary)
    };
    summary.method = method.name().to_string();
    if let Some(last) = run.trace.rounds.last() {
        summary.lambda_min = last.lambda_min;
        summary.n_tilde += run.trace.len();
        summary.j_tilde = None;
    }
    summary.policy = match (&run.policy, feat.as_ref()) {
        (Some(p), Some(f)) => Some(p.to_named(f)),
        _ => None,
    };
    fill_truth(
        &mut summary,
        run.policy.as_ref(),
        &run.theta_bar,
        &reference,
        a.beta,
        feat.as_ref(),
    )?;

    let hash = config_hash(&(&cfg, &a.method, a.rounds, a.warm_start, a.seed, &a.test_user));
    let trace = trace_csv(&run.trace, feat.as_ref(), Some(&reference.0))?;
    write_text(
        &a.out.join("trace.csv"),
        &format!("# seed={} config_hash={hash}\n{trace}", a.seed),
    )?;
    let body = json!({ "seed": a.seed, "config_hash": hash, "rounds": run.trace.len(), "summary": summary });
    write_text(
        &a.out.join("summary.json"),
        &(serde_json::to_string_pretty(&body).expect("summary serialises") + "\n"),
    )
}

pub fn sweep(a: &SweepArgs) -> Result<()> {
    let env = env_config(&a.env);
    let offline = offline_config(&a.algo, env.population.users, env.population.dim)?;
    let opts = baseline_options(&a.algo)?;
    let axis = match a.axis {
        AxisArg::Budget => Axis::Budget(parse_list(&a.grid, "budget")?),
        AxisArg::Rounds => Axis::Rounds(parse_list(&a.grid, "rounds")?),
        AxisArg::Dim => Axis::Dim(parse_list(&a.grid, "dim")?),
        AxisArg::GammaHat => Axis::GammaHat(parse_list(&a.grid, "gamma_hat")?),
    };
    let spec = ExperimentSpec {
        seeds: parse_seeds(&a.seeds)?,
        methods: parse_methods(&a.methods)?,
        axis,
        env,
        offline,
        active: ActiveConfig {
            rounds: a.rounds,
            mode: match a.mode {
                ModeArg::Finite => SelectionMode::FiniteTriples,
                ModeArg::Ball => SelectionMode::IdealBall,
            },
        },
        warm_start: a.warm_start,
        knn_k: opts.knn_k,
        kmeans_restarts: opts.kmeans_restarts,
        dbscan_eps: opts.dbscan_eps,
        dbscan_min_pts: opts.dbscan_min_pts,
        test_users: a.test_users,
        timing: a.timing,
    };
    spec.validate()?;
    let report = run_experiment(&spec)?;
    write_text(&a.out.join("results.csv"), &report.to_csv())?;
    write_text(
        &a.out.join(format!("panel_{}.csv", report.axis_name)),
        &panel_csv(&report.panels(), &report.config_hash),
    )
}

const REPORT_COLUMNS: [&str; 4] = ["method", "axis_name", "axis_value", "subopt"];

pub fn report(a: &ReportArgs) -> Result<()> {
    let mut records: Vec<(String, String, String, f64)> = Vec::new();
    let mut hashes = Vec::new();
    for path in &a.inputs {
        let source = path.display().to_string();
        let text = prefclust_core::io::read_text(path)?;
        hashes.extend(
            text.lines()
                .filter_map(|l| l.strip_prefix("# config_hash="))
                .map(str::to_string),
        );
        let data_err = |line: usize, message: String| Error::Data {
            path: source.clone(),
            line,
            message,
        };
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let header = reader
            .headers()
            .map_err(|e| data_err(1, e.to_string()))?
            .clone();
        let index: Vec<usize> = REPORT_COLUMNS
            .iter()
            .map(|c| {
                header
                    .iter()
                    .position(|h| h == *c)
                    .ok_or_else(|| data_err(1, format!("missing column {c:?}")))
            })
            .collect::<Result<_>>()?;
        for row in reader.records() {
            let row = row.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line() as usize);
                data_err(line, e.to_string())
            })?;
            let line = row.position().map_or(0, |p| p.line() as usize);
            let field = |i: usize| row.get(index[i]).unwrap_or_default().to_string();
            let value: f64 = field(3)
                .parse()
                .map_err(|_| data_err(line, format!("column \"subopt\" is not a number: {:?}", field(3))))?;
            records.push((field(0), field(1), field(2), value));
        }
    }
    if records.is_empty() {
        return Err(Error::Data {
            path: a.inputs[0].display().to_string(),
            line: 0,
            message: "no result rows".into(),
        });
    }
    hashes.sort();
    let hash = config_hash(&hashes);
    let panels = panel_rows(&records);
    let mut by_axis: BTreeMap<String, Vec<_>> = BTreeMap::new();
    for p in panels {
        by_axis.entry(p.axis_name.clone()).or_default().push(p);
    }
    for (axis, rows) in &by_axis {
        write_text(&a.out.join(format!("panel_{axis}.csv")), &panel_csv(rows, &hash))?;
    }
    let n = records.len();
    let (mean, se) = mean_stderr(&records.iter().map(|r| r.3).collect::<Vec<_>>());
    eprintln!("aggregated {n} rows into {} panel file(s); overall mean {mean} ± {se}", by_axis.len());
    Ok(())
}
