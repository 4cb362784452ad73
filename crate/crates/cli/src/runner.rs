//! Runs one study from a config and renders its reports.

use std::time::Instant;

use anyhow::{anyhow, Result};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use aniso_core::coefficients::{compute_constants, ConstantLedger};
use aniso_core::diagnostics::{
    ap_diagram, cea_check, difference_quotient_bound, linear_reaction_rate_study, rate_study, ExactSolution,
    Reference, Refusal, Verdict, WEAK_TEST_FUNCTIONS,
};
use aniso_core::elliptic::{apriori_check, DiscreteProblem, Epsilon};
use aniso_core::export::{csv_string, fmt_f64, Cell};
use aniso_core::semigroup::{parabolic_convergence, resolvent_deviation, semigroup_deviation_study, DeviationOptions};
use aniso_core::{Error as CoreError, Expr};

use crate::config::{parse_epsilon, ExperimentConfig, StudyKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Refused,
}

impl Status {
    pub fn exit_code(&self) -> i32 {
        match self {
            Status::Pass => 0,
            Status::Fail => 1,
            Status::Refused => 3,
        }
    }

    fn from_verdict(v: Verdict) -> Self {
        match v {
            Verdict::Pass => Status::Pass,
            Verdict::Fail => Status::Fail,
            Verdict::Refused => Status::Refused,
        }
    }

    fn from_bool(ok: bool) -> Self {
        if ok {
            Status::Pass
        } else {
            Status::Fail
        }
    }
}

/// Options that do not live in the config file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Write the target solve as an `x1,x2,u` lattice to this path.
    pub export: Option<std::path::PathBuf>,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub kind: StudyKind,
    pub status: Status,
    pub refusal: Option<Refusal>,
    /// Deterministic summary; written as `summary.json`.
    pub summary: Value,
    /// `(file name, contents)` of the study CSVs.
    pub csv: Vec<(String, String)>,
    /// Wall-clock seconds per phase; written separately as `timings.json`.
    pub timings: Vec<(String, f64)>,
    pub export: Option<String>,
}

fn eps_cell(e: Epsilon) -> Cell {
    match e {
        Epsilon::Value(v) => Cell::Float(v),
        Epsilon::Limit => Cell::Text("LIMIT".into()),
    }
}

fn eps_json(e: Epsilon) -> Value {
    match e {
        Epsilon::Value(v) => json!(v),
        Epsilon::Limit => json!("LIMIT"),
    }
}

fn verdict_cell(v: Verdict) -> Cell {
    Cell::Text(v.as_str().into())
}

fn pass_cell(ok: bool) -> Cell {
    verdict_cell(Verdict::from_bool(ok))
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    opts: &'a RunOptions,
    timings: Vec<(String, f64)>,
    clock: Instant,
}

impl Ctx<'_> {
    fn lap(&mut self, name: &str) {
        let now = Instant::now();
        self.timings.push((name.to_string(), (now - self.clock).as_secs_f64()));
        self.clock = now;
    }
}

struct Partial {
    status: Status,
    refusal: Option<Refusal>,
    report: Value,
    csv: Vec<(String, String)>,
    export: Option<String>,
}

impl Partial {
    fn new(status: Status, report: Value) -> Self {
        Partial {
            status,
            refusal: None,
            report,
            csv: Vec::new(),
            export: None,
        }
    }

    fn refused(refusal: Refusal, report: Value) -> Self {
        Partial {
            status: Status::Refused,
            refusal: Some(refusal),
            report,
            csv: Vec::new(),
            export: None,
        }
    }

    fn with_csv(mut self, name: &str, header: &[&str], rows: &[Vec<Cell>]) -> Self {
        self.csv.push((name.to_string(), csv_string(header, rows)));
        self
    }
}

/// Runs the config's study, or `kind` when given.
pub fn run(cfg: &ExperimentConfig, kind: Option<StudyKind>, opts: &RunOptions) -> Result<Outcome> {
    let mut cfg = cfg.clone();
    if let Some(k) = kind {
        cfg.study.kind = k;
    }
    cfg.validate()?;
    let mut ctx = Ctx {
        cfg: &cfg,
        opts,
        timings: Vec::new(),
        clock: Instant::now(),
    };
    let ledger = ledger_for(&cfg)?;
    ctx.lap("constants");
    let result = match cfg.study.kind {
        StudyKind::Solve => run_solve(&mut ctx, ledger.as_ref()),
        StudyKind::Rate => run_rate(&mut ctx, ledger.as_ref()),
        StudyKind::Cea => run_cea(&mut ctx, ledger.as_ref()),
        StudyKind::Ap => run_ap(&mut ctx),
        StudyKind::Dq => run_dq(&mut ctx),
        StudyKind::Resolvent => run_resolvent(&mut ctx),
        StudyKind::Semigroup => run_semigroup(&mut ctx),
        StudyKind::Parabolic => run_parabolic(&mut ctx),
    };
    let partial = match result {
        Ok(p) => p,
        Err(e) => match e.downcast::<CoreError>() {
            Ok(CoreError::HypothesisMissing { study, missing }) => {
                Partial::refused(Refusal { study, missing }, Value::Null)
            }
            Ok(other) => return Err(other.into()),
            Err(e) => return Err(e),
        },
    };
    ctx.lap("study");
    let constants = ledger.as_ref().map(|l| {
        l.entries()
            .into_iter()
            .map(|e| json!({"name": e.name, "value": finite_or_null(e.value), "formula": e.formula}))
            .collect::<Vec<_>>()
    });
    let summary = json!({
        "study": cfg.study.kind.name(),
        "status": partial.status,
        "refusal": partial.refusal,
        "report": partial.report,
        "constants": constants,
        "config": serde_json::to_value(&cfg)?,
    });
    Ok(Outcome {
        kind: cfg.study.kind,
        status: partial.status,
        refusal: partial.refusal,
        summary,
        csv: partial.csv,
        timings: ctx.timings,
        export: partial.export,
    })
}

fn finite_or_null(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

/// The ledger for the configured problem; `None` for time-dependent sources.
pub fn ledger_for(cfg: &ExperimentConfig) -> Result<Option<ConstantLedger>> {
    let f = cfg.source()?;
    if f.is_time_dependent() {
        return Ok(None);
    }
    Ok(Some(compute_constants(
        &cfg.coefficients()?,
        &cfg.domain()?,
        &f,
        &cfg.reaction()?,
        cfg.discretization.sup_grid,
    )?))
}

fn need_ledger(l: Option<&ConstantLedger>) -> Result<&ConstantLedger> {
    l.ok_or_else(|| anyhow!("this study needs a time-independent source"))
}

fn problem(cfg: &ExperimentConfig) -> Result<DiscreteProblem> {
    let a = cfg.coefficients()?;
    let domain = cfg.domain()?;
    a.validate(&domain, cfg.discretization.sup_grid.min(128))?;
    let f = cfg.source()?;
    f.validate(&domain)?;
    let beta = cfg.reaction()?;
    beta.validate()?;
    Ok(DiscreteProblem::new(cfg.space()?, a, f, beta)?)
}

fn problem_on(cfg: &ExperimentConfig, m: usize) -> Result<DiscreteProblem> {
    Ok(DiscreteProblem::new(cfg.space_with(m, m)?, cfg.coefficients()?, cfg.source()?, cfg.reaction()?)?)
}

fn run_solve(ctx: &mut Ctx, ledger: Option<&ConstantLedger>) -> Result<Partial> {
    let cfg = ctx.cfg;
    let p = problem(cfg)?;
    ctx.lap("assembly");
    let mut kinds: Vec<Epsilon> = cfg.study.epsilons.iter().map(|&e| Epsilon::Value(e)).collect();
    if cfg.study.include_limit {
        kinds.push(Epsilon::Limit);
    }
    let target = parse_epsilon(&cfg.study.target)?;
    let export_extra = ctx.opts.export.is_some() && !kinds.contains(&target);
    if export_extra {
        kinds.push(target);
    }
    let sols = kinds
        .par_iter()
        .map(|&k| p.solve(k))
        .collect::<aniso_core::Result<Vec<_>>>()?;
    let mut solve_rows = Vec::new();
    let mut bound_rows = Vec::new();
    let mut reports = Vec::new();
    let mut all_pass = true;
    for sol in &sols {
        let n = p.norms();
        solve_rows.push(vec![
            eps_cell(sol.kind),
            Cell::Int(sol.picard_iterations),
            Cell::Float(sol.final_residual),
            Cell::Float(n.l2(&sol.coeffs)),
            Cell::Float(n.grad_x1(&sol.coeffs)),
            Cell::Float(n.grad_x2(&sol.coeffs)),
        ]);
        if let Some(l) = ledger {
            let rep = apriori_check(sol, &p, l)?;
            for c in &rep.checks {
                bound_rows.push(vec![
                    eps_cell(sol.kind),
                    Cell::Text(c.name.into()),
                    Cell::Float(c.lhs),
                    Cell::Float(c.rhs),
                    pass_cell(c.pass),
                ]);
            }
            all_pass &= rep.passed();
            reports.push(json!({"epsilon": eps_json(sol.kind), "checks": rep.checks}));
        }
    }
    let export = match &ctx.opts.export {
        Some(_) => {
            let sol = sols.iter().find(|s| s.kind == target).expect("target solved");
            let mut buf = Vec::new();
            aniso_core::export::write_lattice_csv(&mut buf, &p.space, &sol.coeffs, cfg.output.lattice, cfg.output.lattice)?;
            Some(String::from_utf8(buf)?)
        }
        None => None,
    };
    let iterations: Vec<Value> = sols
        .iter()
        .map(|s| json!({"epsilon": eps_json(s.kind), "picard_iterations": s.picard_iterations, "residual_history": s.residual_history}))
        .collect();
    let mut out = Partial::new(Status::from_bool(all_pass), json!({"apriori": reports, "solves": iterations}))
        .with_csv(
            "solve.csv",
            &["epsilon", "picard_iterations", "final_residual", "l2", "grad_x1", "grad_x2"],
            &solve_rows,
        )
        .with_csv("apriori.csv", &["epsilon", "bound", "lhs", "rhs", "verdict"], &bound_rows);
    out.export = export;
    Ok(out)
}

fn run_rate(ctx: &mut Ctx, ledger: Option<&ConstantLedger>) -> Result<Partial> {
    let cfg = ctx.cfg;
    let ledger = need_ledger(ledger)?;
    let p = problem(cfg)?;
    ctx.lap("assembly");
    let s = &cfg.study;
    if !s.mus.is_empty() {
        let r = linear_reaction_rate_study(p.space.clone(), &p.a, &p.f, &s.mus, &s.epsilons, ledger)?;
        let mut rows = Vec::new();
        for (mu, st) in r.mus.iter().zip(&r.studies) {
            for row in &st.rows {
                rows.push(vec![
                    Cell::Float(*mu),
                    Cell::Float(row.epsilon),
                    Cell::Float(row.e_x2),
                    Cell::Float(row.e_x2 * mu / row.epsilon),
                ]);
            }
        }
        let status = match &r.refusal {
            Some(_) => Status::Refused,
            None => Status::from_bool(r.passed()),
        };
        let report = json!({
            "mus": r.mus,
            "scaled_constants": r.scaled_constants,
            "mu_ratios": r.mu_ratios,
            "bounded": r.bounded,
            "slopes": r.studies.iter().map(|s| s.slope).collect::<Vec<_>>(),
        });
        let mut out = Partial::new(status, report).with_csv("linear_reaction.csv", &["mu", "epsilon", "e_x2", "scaled"], &rows);
        out.refusal = r.refusal;
        return Ok(out);
    }
    let reference = match &s.exact {
        Some([u, d1, d2]) => Reference::Exact(ExactSolution::parse(u, d1, d2)?),
        None => Reference::Limit,
    };
    let r = rate_study(&p, &s.epsilons, &reference, ledger, s.bound)?;
    let rows: Vec<Vec<Cell>> = r
        .rows
        .iter()
        .map(|row| {
            vec![
                Cell::Float(row.epsilon),
                Cell::Float(row.e_x1),
                Cell::Float(row.e_x2),
                Cell::Float(row.e_l2),
                row.bound.into(),
                verdict_cell(row.verdict),
            ]
        })
        .collect();
    let weak_rows: Vec<Vec<Cell>> = r
        .rows
        .iter()
        .flat_map(|row| {
            WEAK_TEST_FUNCTIONS
                .iter()
                .zip(&row.weak)
                .map(move |(phi, v)| vec![Cell::Float(row.epsilon), Cell::Text((*phi).into()), Cell::Float(*v)])
        })
        .collect();
    let growth_ok = match r.e_x1_growth {
        Some(g) => s.e_x1_growth_min.is_none_or(|m| g >= m) && s.e_x1_growth_max.is_none_or(|m| g <= m),
        None => s.e_x1_growth_min.is_none(),
    };
    let slope_ok = !s.check_slope || r.slope_pass != Some(false);
    let rows_ok = r.rows.iter().all(|row| row.verdict == Verdict::Pass);
    let status = if r.refusal.is_some() {
        Status::Refused
    } else {
        Status::from_bool(rows_ok && slope_ok && growth_ok)
    };
    let report = json!({
        "slope": r.slope,
        "slope_pass": r.slope_pass,
        "slope_checked": s.check_slope,
        "bound_constant": r.bound_constant,
        "e_x1_growth": r.e_x1_growth,
        "e_x1_growth_pass": growth_ok,
        "reference": if s.exact.is_some() { "exact" } else { "limit" },
    });
    let mut out = Partial::new(status, report)
        .with_csv("rate.csv", &["epsilon", "e_x1", "e_x2", "e_l2", "bound", "verdict"], &rows)
        .with_csv("rate_weak.csv", &["epsilon", "phi", "value"], &weak_rows);
    out.refusal = r.refusal;
    Ok(out)
}

fn run_cea(ctx: &mut Ctx, ledger: Option<&ConstantLedger>) -> Result<Partial> {
    let cfg = ctx.cfg;
    let ledger = need_ledger(ledger)?;
    let s = &cfg.study;
    let coarse = s.sizes.iter().map(|&m| problem_on(cfg, m)).collect::<Result<Vec<_>>>()?;
    let reference = problem_on(cfg, s.reference_size.expect("validated"))?;
    ctx.lap("assembly");
    let target = parse_epsilon(&s.target)?;
    let r = cea_check(&coarse, &reference, target, ledger)?;
    let rows: Vec<Vec<Cell>> = r
        .rows
        .iter()
        .map(|row| {
            vec![
                Cell::Int(row.n),
                Cell::Float(row.galerkin_error),
                Cell::Float(row.best_approx),
                Cell::Float(row.ratio),
                Cell::Float(row.constant),
                verdict_cell(row.verdict),
            ]
        })
        .collect();
    let report = json!({"target": eps_json(target), "nonlinear": r.nonlinear, "rows": r.rows});
    Ok(Partial::new(Status::from_bool(r.passed()), report).with_csv(
        "cea.csv",
        &["n", "galerkin_error", "best_approx", "ratio", "constant", "verdict"],
        &rows,
    ))
}

fn run_ap(ctx: &mut Ctx) -> Result<Partial> {
    let cfg = ctx.cfg;
    let s = &cfg.study;
    let problems = s.sizes.iter().map(|&m| problem_on(cfg, m)).collect::<Result<Vec<_>>>()?;
    let reference = problem_on(cfg, s.reference_size.expect("validated"))?;
    ctx.lap("assembly");
    let r = ap_diagram(&problems, &reference, &s.epsilons, s.terminal_tol)?;
    let rows: Vec<Vec<Cell>> = r
        .grid
        .iter()
        .map(|c| vec![eps_cell(c.epsilon), Cell::Int(c.n), Cell::Float(c.error)])
        .collect();
    let report = json!({
        "trace_n_first": r.trace_n_first,
        "trace_eps_first": r.trace_eps_first,
        "monotone_n_first": r.monotone_n_first,
        "monotone_eps_first": r.monotone_eps_first,
        "commutation_gap": r.commutation_gap,
        "gap_pass": r.gap_pass,
        "terminal_relative": r.terminal_relative,
        "terminal_tol": r.terminal_tol,
        "terminal_pass": r.terminal_pass,
    });
    Ok(Partial::new(Status::from_bool(r.passed()), report).with_csv("ap_grid.csv", &["epsilon", "n", "error"], &rows))
}

fn run_dq(ctx: &mut Ctx) -> Result<Partial> {
    let cfg = ctx.cfg;
    let cases: Vec<(String, Option<String>)> = if cfg.study.cases.is_empty() {
        vec![(cfg.problem.f.clone(), cfg.problem.d1_f.clone())]
    } else {
        cfg.study.cases.iter().map(|c| (c.f.clone(), Some(c.d1_f.clone()))).collect()
    };
    let space = cfg.space()?;
    let a = cfg.coefficients()?;
    let domain = cfg.domain()?;
    let beta = cfg.reaction()?;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    let mut all = true;
    for (i, (f, d1)) in cases.iter().enumerate() {
        let src = cfg.source_from(f, d1.as_deref())?;
        let ledger = compute_constants(&a, &domain, &src, &beta, cfg.discretization.sup_grid)?;
        let p = DiscreteProblem::new(space.clone(), a.clone(), src, beta.clone())?;
        let r = difference_quotient_bound(&p, &ledger)?;
        all &= r.verdict == Verdict::Pass;
        rows.push(vec![
            Cell::Int(i + 1),
            Cell::Float(r.grad_x1_u),
            Cell::Float(r.grad_x1_f),
            Cell::Float(r.c3_proof),
            Cell::Float(r.c3_statement),
            verdict_cell(r.verdict),
        ]);
        reports.push(json!({"case": i + 1, "f": f, "d1_f": d1, "result": r}));
    }
    Ok(Partial::new(Status::from_bool(all), json!({ "cases": reports })).with_csv(
        "dq.csv",
        &["case", "grad_x1_u", "grad_x1_f", "c3_proof", "c3_statement", "verdict"],
        &rows,
    ))
}

fn run_resolvent(ctx: &mut Ctx) -> Result<Partial> {
    let cfg = ctx.cfg;
    let p = problem(cfg)?;
    ctx.lap("assembly");
    let r = resolvent_deviation(&p, &cfg.study.epsilons, cfg.study.mu.expect("validated"))?;
    let rows: Vec<Vec<Cell>> = r
        .rows
        .iter()
        .map(|row| vec![Cell::Float(row.epsilon), Cell::Float(row.deviation)])
        .collect();
    let report = json!({"mu": r.mu, "slope": r.slope, "verdict": r.verdict});
    let mut out = Partial::new(Status::from_verdict(r.verdict), report).with_csv(
        "resolvent.csv",
        &["epsilon", "deviation"],
        &rows,
    );
    out.refusal = r.refusal;
    Ok(out)
}

fn run_semigroup(ctx: &mut Ctx) -> Result<Partial> {
    let cfg = ctx.cfg;
    let p = problem(cfg)?;
    ctx.lap("assembly");
    let s = &cfg.study;
    let opts = DeviationOptions {
        t_final: s.t_final,
        stepper: cfg.stepper()?,
        certify_tol: s.certify_tol,
        ..Default::default()
    };
    let g = Expr::parse(s.g.as_deref().expect("validated"))?;
    let r = semigroup_deviation_study(&p, &s.epsilons, &g, &opts)?;
    let slope_cell: Cell = r.slope.into();
    let rows: Vec<Vec<Cell>> = r
        .rows
        .iter()
        .map(|row| vec![Cell::Float(row.epsilon), Cell::Float(row.d_sup), slope_cell.clone()])
        .collect();
    let series: Vec<Vec<Cell>> = r
        .rows
        .iter()
        .flat_map(|row| row.series.iter().map(move |&(t, d)| vec![Cell::Float(row.epsilon), Cell::Float(t), Cell::Float(d)]))
        .collect();
    let details: Vec<Value> = r
        .rows
        .iter()
        .map(|row| {
            json!({
                "epsilon": row.epsilon,
                "d_sup": row.d_sup,
                "d_coarse": row.d_coarse,
                "steps": row.steps,
                "certified": row.certified,
                "d_double_t": row.d_double_t,
                "linear_in_t": row.linear_in_t,
            })
        })
        .collect();
    let report = json!({
        "t_final": r.t_final,
        "stepper": r.stepper,
        "slope": r.slope,
        "verdict": r.verdict,
        "required_steps": r.required_steps,
        "rows": details,
    });
    let mut out = Partial::new(Status::from_verdict(r.verdict), report)
        .with_csv("semigroup.csv", &["epsilon", "D_sup", "slope"], &rows)
        .with_csv("semigroup_series.csv", &["epsilon", "t", "deviation"], &series);
    out.refusal = r.refusal;
    Ok(out)
}

fn run_parabolic(ctx: &mut Ctx) -> Result<Partial> {
    let cfg = ctx.cfg;
    let p = problem(cfg)?;
    ctx.lap("assembly");
    let s = &cfg.study;
    let u0 = Expr::parse(s.u0.as_deref().expect("validated"))?;
    let r = parabolic_convergence(&p, &u0, &s.epsilons, s.t_final, cfg.stepper()?, s.tol)?;
    let rows: Vec<Vec<Cell>> = r
        .rows
        .iter()
        .map(|row| vec![Cell::Float(row.epsilon), Cell::Float(row.initial_gap), Cell::Float(row.sup_deviation)])
        .collect();
    let report = json!({
        "t_final": r.t_final,
        "stepper": r.stepper,
        "initial_data_converge": r.initial_data_converge,
        "monotone_decay": r.monotone_decay,
        "tol": r.tol,
    });
    Ok(Partial::new(Status::from_verdict(r.verdict), report).with_csv(
        "parabolic.csv",
        &["epsilon", "initial_gap", "sup_deviation"],
        &rows,
    ))
}

/// `name,value,formula` rows of the ledger.
pub fn constants_csv(ledger: &ConstantLedger) -> String {
    let rows: Vec<Vec<Cell>> = ledger
        .entries()
        .into_iter()
        .map(|e| vec![Cell::Text(e.name.into()), Cell::Float(e.value), Cell::Text(format!("\"{}\"", e.formula))])
        .collect();
    csv_string(&["name", "value", "formula"], &rows)
}

/// Human-readable ledger listing.
pub fn constants_text(ledger: &ConstantLedger) -> String {
    let mut s = String::new();
    for e in ledger.entries() {
        s.push_str(&format!("{:<22} {:>24}  {}\n", e.name, fmt_f64(e.value), e.formula));
    }
    s
}
