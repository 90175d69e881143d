use std::path::{Path, PathBuf};

use mvm_core::acceptance::{self, CriterionReport};
use mvm_core::applications::{self, concave_game, convex_game, AsianProblem, GameGrid, GameSpec, RootProblem};
use mvm_core::hjb::{self, build_grid, solve_stationary, HjbProblem};
use mvm_core::measure::AtomicMeasure;
use mvm_core::sde::{mc_value, simulate_euler, FeedbackControl, McConfig, DEFAULT_EPS_TERM};
use serde_json::{json, Map, Value};

use crate::config::{field_values, CostKind, GameConfig, RunConfig};
use crate::report::{self, float_or_null, weight_header};
use crate::CliError;

/// What a command produced: the report body plus its exit status.
pub struct Output {
    pub fields: Map<String, Value>,
    pub records: Vec<Value>,
    pub passed: bool,
}

fn fields(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => Map::new(),
    }
}

fn max_abs(xs: impl Iterator<Item = f64>) -> f64 {
    xs.fold(0.0, f64::max)
}

fn csv_rows(grid: &hjb::SimplexGrid, values: &[f64]) -> Vec<Vec<f64>> {
    (0..grid.len())
        .map(|j| {
            let mut row = grid.point(j);
            row.push(values[j]);
            row
        })
        .collect()
}

fn write_slice(path: &Path, grid: &hjb::SimplexGrid, values: &[f64]) -> Result<(), CliError> {
    let mut header = weight_header(grid.atoms());
    header.push("value".into());
    report::write_csv(path, &header, &csv_rows(grid, values))
}

pub fn simulate(cfg: &RunConfig, csv: Option<&Path>) -> Result<Output, CliError> {
    let support = cfg.support()?;
    let mu = cfg.initial(&support)?;
    let controls = cfg.controls(&support)?;
    let cost = cfg.cost(&support, None, &controls)?;
    let dt = cfg.positive(cfg.dt, "dt", 1e-3)?;
    let horizon = cfg.positive(cfg.horizon, "horizon", 1.0)?;
    let paths = cfg.count(cfg.paths, "paths", 1000)?;
    let seed = cfg.seed.unwrap_or(0);
    let ctrl = FeedbackControl::constant(controls[0].clone());
    let mc = McConfig::new(dt, horizon, paths, seed);
    let est = mc_value(&mu, &ctrl, &cost, &mc).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(path) = csv {
        let sample = simulate_euler(&mu, &ctrl, dt, horizon, seed, DEFAULT_EPS_TERM)?;
        let mut header = vec!["t".to_string()];
        header.extend(weight_header(mu.len()));
        let rows: Vec<Vec<f64>> = sample
            .times
            .iter()
            .zip(&sample.weights)
            .map(|(t, w)| std::iter::once(*t).chain(w.iter().copied()).collect())
            .collect();
        report::write_csv(path, &header, &rows)?;
    }
    Ok(Output {
        fields: fields(json!({
            "problem": cfg.label("simulate"),
            "estimate": float_or_null(est.estimate),
            "std_error": float_or_null(est.std_error),
            "paths": est.paths,
            "seed": est.seed,
            "clamped_fraction": float_or_null(est.clamped_fraction),
            "infinite_paths": est.infinite_paths,
        })),
        records: Vec::new(),
        passed: true,
    })
}

pub fn solve(cfg: &RunConfig, csv: &Path) -> Result<Output, CliError> {
    let support = cfg.support()?;
    let mesh = cfg.mesh(40)?;
    let grid = build_grid(support.clone(), mesh)?;
    let controls = cfg.controls(&support)?;
    let cost = cfg.cost(&support, Some(&grid), &controls)?;
    let beta = cost.beta();
    let problem = HjbProblem::new(grid, controls, cost)?
        .with_delta(cfg.positive(cfg.delta, "delta", hjb::DEFAULT_DELTA)?)
        .with_tol(cfg.positive(cfg.tol, "tol", hjb::DEFAULT_TOL)?)
        .with_max_iters(cfg.count(cfg.max_iters, "max_iters", hjb::DEFAULT_MAX_ITERS)?);
    let sol = solve_stationary(&problem)?;
    let mut buf = Vec::new();
    hjb::write_csv(&sol, &mut buf).expect("in-memory CSV");
    report::write_file(csv, &buf)?;

    let spec = cfg.cost.as_ref().expect("cost parsed above");
    let oracle: Option<Box<dyn Fn(&[f64]) -> f64>> = match (spec.kind, spec.phi.as_ref(), spec.value) {
        (CostKind::Ex91, Some(phi), _) if beta > 0.0 => {
            let phi_v = field_values(phi, &support, "cost.phi")?;
            Some(Box::new(move |p: &[f64]| {
                let m: f64 = p.iter().zip(&phi_v).map(|(a, b)| a * b).sum();
                m * m / beta
            }))
        }
        (CostKind::Ex92, _, _) => {
            let x = support.first_coords();
            Some(Box::new(move |p: &[f64]| {
                -p.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>().powi(2)
            }))
        }
        (CostKind::Constant, _, Some(value)) if beta > 0.0 => {
            let v = value / beta;
            Some(Box::new(move |_: &[f64]| v))
        }
        _ => None,
    };
    let err = oracle
        .as_ref()
        .map(|o| max_abs((0..sol.grid.len()).map(|j| (sol.values[j] - o(&sol.grid.point(j))).abs())));
    let mut records = Vec::new();
    if let Some(mu) = cfg.initial_opt(&support)? {
        let j = sol.grid.nearest_node(mu.weights());
        records.push(json!({
            "p": mu.weights(),
            "value": float_or_null(sol.value_at(mu.weights())),
            "policy_index": sol.policy[j],
        }));
    }
    Ok(Output {
        fields: fields(json!({
            "problem": cfg.label(spec.kind.name()),
            "mesh": mesh,
            "nodes": sol.grid.len(),
            "max_error_vs_oracle": err.map_or(Value::Null, float_or_null),
            "values_csv_path": csv.display().to_string(),
            "iterations": sol.iterations,
            "residual": float_or_null(sol.residual),
            "converged": sol.converged,
        })),
        records,
        passed: true,
    })
}

pub fn root(cfg: &RunConfig, csv: Option<&Path>) -> Result<Output, CliError> {
    let support = cfg.support()?;
    let mu = cfg.initial(&support)?;
    let (name, f) = cfg.payoff("id")?;
    let kappa = cfg.kappa.unwrap_or(0.5);
    let mut prob =
        RootProblem::new(mu.clone(), f, kappa).map_err(|e| CliError::Config(format!("field `kappa`: {e}")))?;
    prob.m = cfg.mesh(prob.m)?;
    if let Some(d) = cfg.delta {
        prob.delta = cfg.positive(Some(d), "delta", d)?;
        prob.dq = (1.0 - kappa).powi(2) * prob.delta;
    }
    prob.tol = cfg.positive(cfg.tol, "tol", prob.tol)?;
    prob.max_iters = cfg.count(cfg.max_iters, "max_iters", prob.max_iters)?;
    let sol = applications::solve_root(&prob)?;
    let x = support.first_coords();
    let var = |p: &[f64]| {
        let m: f64 = p.iter().zip(&x).map(|(a, b)| a * b).sum();
        p.iter().zip(&x).map(|(a, b)| a * (b - m) * (b - m)).sum::<f64>()
    };
    let err = (name == "id")
        .then(|| max_abs((0..sol.grid.len()).map(|j| (sol.values[0][j] - var(&sol.grid.point(j))).abs())));
    if let Some(path) = csv {
        write_slice(path, &sol.grid, &sol.values[0])?;
    }
    Ok(Output {
        fields: fields(json!({
            "problem": cfg.label("root"),
            "payoff": name,
            "mesh": prob.m,
            "value": float_or_null(sol.value_at(0.0, mu.weights())),
            "max_error_vs_oracle": err.map_or(Value::Null, float_or_null),
            "infeasible_nodes": sol.infeasible_nodes,
            "converged": sol.converged,
        })),
        records: Vec::new(),
        passed: true,
    })
}

pub fn asian(cfg: &RunConfig, csv: Option<&Path>) -> Result<Output, CliError> {
    let support = cfg.support()?;
    let mu = cfg.initial(&support)?;
    let (name, f) = cfg.payoff("sq")?;
    let horizon = cfg.positive(cfg.horizon, "horizon", 1.0)?;
    let mut prob = AsianProblem::new(mu.clone(), f.clone(), horizon)?;
    prob.m = cfg.mesh(prob.m)?;
    prob.n_t = cfg.count(cfg.steps, "steps", prob.n_t)?;
    prob.delta = cfg.positive(cfg.delta, "delta", prob.delta)?;
    prob.tol = cfg.positive(cfg.tol, "tol", prob.tol)?;
    prob.max_iters = cfg.count(cfg.max_iters, "max_iters", prob.max_iters)?;
    let sol = applications::solve_asian(&prob)?;
    let x = support.first_coords();
    let bound: f64 = mu
        .weights()
        .iter()
        .zip(&x)
        .map(|(p, v)| p * f.eval(&[horizon * v]))
        .sum();
    let n = sol.nodes();
    let ia = sol.a.iter().position(|a| *a == 0.0);
    let jump_share = ia.map(|ia| {
        let interior: Vec<usize> = (0..n).filter(|j| sol.grid.point(*j).iter().all(|w| *w > 0.0)).collect();
        let active = interior.iter().filter(|j| sol.jump_at_start[ia * n + **j]).count();
        active as f64 / interior.len().max(1) as f64
    });
    if let (Some(path), Some(ia)) = (csv, ia) {
        write_slice(path, &sol.grid, &sol.values[0][ia * n..(ia + 1) * n])?;
    }
    Ok(Output {
        fields: fields(json!({
            "problem": cfg.label("asian"),
            "payoff": name,
            "mesh": prob.m,
            "value": float_or_null(sol.value_at(0, 0.0, mu.weights())),
            "jensen_bound": float_or_null(bound),
            "jump_share_at_start": jump_share.map_or(Value::Null, float_or_null),
            "converged": sol.converged,
        })),
        records: Vec::new(),
        passed: true,
    })
}

pub fn game(cfg: &RunConfig, csv: Option<&Path>) -> Result<Output, CliError> {
    let horizon = cfg.positive(cfg.horizon, "horizon", 1.0)?;
    let spec_cfg = cfg
        .game
        .as_ref()
        .ok_or_else(|| CliError::Config("field `game`: missing".into()))?;
    let (spec, oracle): (GameSpec, Option<fn(f64, &[f64]) -> f64>) = match spec_cfg {
        GameConfig::Builtin(name) if name == "convex" => (convex_game(horizon)?, Some(|s, p| s * (p[0] - p[1]).abs())),
        GameConfig::Builtin(name) if name == "concave" => (concave_game(horizon)?, Some(|s, p| s * (p[0] + p[1]))),
        GameConfig::Builtin(name) => {
            return Err(CliError::Config(format!(
                "field `game`: unknown builtin `{name}` (expected convex or concave)"
            )))
        }
        GameConfig::Tensor { params, tensor } => (
            GameSpec::constant(params.clone(), tensor.clone(), horizon)
                .map_err(|e| CliError::Config(format!("field `game.tensor`: {e}")))?,
            None,
        ),
    };
    let defaults = GameGrid::default();
    let grid = GameGrid {
        m: cfg.mesh(defaults.m)?,
        n_t: cfg.count(cfg.steps, "steps", defaults.n_t)?,
        delta: cfg.positive(cfg.delta, "delta", defaults.delta)?,
        tol: cfg.positive(cfg.tol, "tol", defaults.tol)?,
        max_iters: cfg.count(cfg.max_iters, "max_iters", defaults.max_iters)?,
        ..defaults
    };
    let sol = applications::solve_game(&spec, &grid)?;
    let err = oracle.map(|o| {
        let mut e: f64 = 0.0;
        for (k, t) in sol.times.iter().enumerate() {
            for j in 0..sol.grid.len() {
                e = e.max((sol.values[k][j] - o(horizon - t, &sol.grid.point(j))).abs());
            }
        }
        e
    });
    if let Some(path) = csv {
        write_slice(path, &sol.grid, &sol.values[0])?;
    }
    let mut records = Vec::new();
    if let Some(w) = cfg.weights.as_ref() {
        let support = mvm_core::Support::line(spec.params())?;
        let mu =
            AtomicMeasure::new(support, w.clone()).map_err(|e| CliError::Config(format!("field `weights`: {e}")))?;
        records.push(
            json!({"p": mu.weights(), "value": float_or_null(sol.grid.interpolate(&sol.values[0], mu.weights()))}),
        );
    }
    Ok(Output {
        fields: fields(json!({
            "problem": cfg.label("game"),
            "mesh": grid.m,
            "max_error_vs_oracle": err.map_or(Value::Null, float_or_null),
            "converged": sol.converged,
        })),
        records,
        passed: true,
    })
}

fn criterion_record(r: &CriterionReport) -> Value {
    json!({"id": r.id, "passed": r.passed, "detail": r.detail})
}

/// `all`, a criterion id `A1`..`A11`, or a closed-form suite name.
pub fn validate(suite: &str, timings: &mut Vec<(String, f64)>) -> Result<Output, CliError> {
    let reports: Vec<CriterionReport> = if suite.eq_ignore_ascii_case("all") {
        let mut out = Vec::new();
        for id in acceptance::CRITERIA {
            let r = acceptance::run_criterion(id)?;
            println!("{}", r.line());
            out.push(r);
        }
        out
    } else if acceptance::CRITERIA.iter().any(|c| c.eq_ignore_ascii_case(suite)) {
        let r = acceptance::run_criterion(suite)?;
        println!("{}", r.line());
        vec![r]
    } else {
        let r = applications::validate_closed_form(suite).map_err(|e| {
            CliError::Config(format!(
                "{e}; expected all, A1..A11 or one of {}",
                applications::SUITES.join(", ")
            ))
        })?;
        let line = CriterionReport {
            id: r.suite.clone(),
            passed: r.passed,
            detail: format!("max_error={:.6} tol={} {}", r.max_error, r.tolerance, r.detail),
            runtime_seconds: r.runtime_seconds,
        };
        println!("{}", line.line());
        vec![line]
    };
    timings.extend(reports.iter().map(|r| (r.id.clone(), r.runtime_seconds)));
    let passed = reports.iter().all(|r| r.passed);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.id.as_str()).collect();
    Ok(Output {
        fields: fields(json!({"suite": suite, "passed": passed, "failed": failed})),
        records: reports.iter().map(criterion_record).collect(),
        passed,
    })
}

pub fn default_csv(out: &Path) -> PathBuf {
    report::sibling(out, "values.csv")
}
