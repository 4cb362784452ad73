//! Discrete generators, resolvents, Yosida approximation and time stepping
//! for `u′ = 𝒜u (+ f)`, with the ε-deviation studies built on them.
//!
//! Everything is posed in Galerkin coefficients: the generator is `−M⁻¹K`
//! and the resolvent solves `(μM + K)u = Mf`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::assembly::{assemble_load_at, load_1d, mass_1d, omega2_matrices};
use crate::diagnostics::{fitted_slope, Refusal, Verdict, MIN_SLOPE};
use crate::elliptic::{DiscreteProblem, Epsilon};
use crate::error::{Error, Result};
use crate::expr::{Env, Expr, Var};
use crate::linsolve::{PreparedSystem, SolverConfig};
use crate::sparse::{axpy, kron_vec, sub, CsrMatrix};
use crate::tensor_spaces::GalerkinSpace;

const SOLVE_TOL: f64 = 1e-13;

/// Slack for contraction checks of CN and RK4.
pub const CONTRACTION_SLACK: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "epsilon")]
pub enum GeneratorKind {
    Perturbed(f64),
    Limit,
    /// The 1D limit operator on ω₂ alone.
    Omega2,
}

#[derive(Debug, Clone)]
pub struct DiscreteGenerator {
    pub mass: CsrMatrix,
    pub stiffness: CsrMatrix,
    pub kind: GeneratorKind,
}

impl DiscreteGenerator {
    pub fn new(problem: &DiscreteProblem, eps: Epsilon) -> Self {
        let kind = match eps {
            Epsilon::Value(e) => GeneratorKind::Perturbed(e),
            Epsilon::Limit => GeneratorKind::Limit,
        };
        DiscreteGenerator {
            mass: problem.norms().mass.clone(),
            stiffness: problem.stiffness(eps),
            kind,
        }
    }

    /// `div_{X₂}(a22 ∇_{X₂}·)` on the x₂ factor of `space`.
    pub fn omega2(space: &GalerkinSpace, a22: &Expr) -> Result<Self> {
        let (mass, stiffness) = omega2_matrices(space, a22)?;
        Ok(DiscreteGenerator {
            mass,
            stiffness,
            kind: GeneratorKind::Omega2,
        })
    }

    pub fn dim(&self) -> usize {
        self.mass.nrows()
    }

    pub fn norm(&self, v: &[f64]) -> f64 {
        self.mass.quad_form(v).max(0.0).sqrt()
    }

    /// `M + αK`.
    fn shifted(&self, alpha: f64) -> CsrMatrix {
        CsrMatrix::linear_combination(&[(1.0, &self.mass), (alpha, &self.stiffness)]).expect("shared pattern")
    }

    /// Smallest eigenvalue of the symmetric part of `K`, scaled by `‖K‖`.
    /// Nonnegative (up to roundoff) iff the generator is dissipative.
    pub fn dissipativity_margin(&self) -> Result<f64> {
        let n = self.dim();
        if n > crate::linsolve::DENSE_LIMIT {
            return Err(Error::invalid(format!("dissipativity check limited to n <= {}", crate::linsolve::DENSE_LIMIT)));
        }
        let k = self.stiffness.to_dense();
        let sym = (&k + k.transpose()) * 0.5;
        let scale = self.stiffness.max_abs().max(f64::MIN_POSITIVE);
        let eig = nalgebra::SymmetricEigen::new(sym).eigenvalues;
        Ok(eig.iter().cloned().fold(f64::INFINITY, f64::min) / scale)
    }
}

/// L² projection of an expression (may use `t`) onto a space.
pub fn l2_projection(space: &GalerkinSpace, mass: &CsrMatrix, g: &Expr, t: f64) -> Result<Vec<f64>> {
    let b = assemble_load_at(space, g, t)?;
    PreparedSystem::new(mass.clone(), SolverConfig::with_tol(SOLVE_TOL))?.solve(&b, None)
}

/// Prepared `(μM + K)` for repeated resolvent applications.
pub struct Resolvent<'g> {
    gen: &'g DiscreteGenerator,
    mu: f64,
    system: PreparedSystem,
}

impl<'g> Resolvent<'g> {
    pub fn new(gen: &'g DiscreteGenerator, mu: f64) -> Result<Self> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::invalid(format!("mu must be positive, got {mu}")));
        }
        let k = CsrMatrix::linear_combination(&[(mu, &gen.mass), (1.0, &gen.stiffness)])?;
        Ok(Resolvent {
            gen,
            mu,
            system: PreparedSystem::new(k, SolverConfig::with_tol(SOLVE_TOL))?,
        })
    }

    /// `R_μ f` without the contraction check.
    pub fn apply_unchecked(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.system.solve(&self.gen.mass.mul_vec(f), None)
    }

    /// `R_μ f`, failing if `‖R_μ f‖_M > ‖f‖_M / μ`.
    pub fn apply(&self, f: &[f64]) -> Result<Vec<f64>> {
        let u = self.apply_unchecked(f)?;
        let (nu, nf) = (self.gen.norm(&u), self.gen.norm(f));
        if nu > nf / self.mu * (1.0 + 1e-9) + f64::MIN_POSITIVE {
            return Err(Error::HypothesisViolated(format!(
                "resolvent is not contractive: ‖R f‖ = {nu:e} > ‖f‖/μ = {:e}",
                nf / self.mu
            )));
        }
        Ok(u)
    }

    /// Yosida approximation `A_μ v = μ²R_μ v − μv`.
    pub fn yosida(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.apply_unchecked(v)?;
        let mu = self.mu;
        out.iter_mut().zip(v).for_each(|(o, x)| *o = mu * mu * *o - mu * x);
        Ok(out)
    }
}

/// Solves `(μM + K)u = Mf` and checks `‖u‖_M ≤ ‖f‖_M / μ`.
pub fn resolvent_apply(gen: &DiscreteGenerator, mu: f64, f: &[f64]) -> Result<Vec<f64>> {
    if f.len() != gen.dim() {
        return Err(Error::invalid(format!("vector has length {}, generator has dim {}", f.len(), gen.dim())));
    }
    Resolvent::new(gen, mu)?.apply(f)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Stepper {
    BackwardEuler { m: usize },
    CrankNicolson { m: usize },
    YosidaRk4 { mu: f64, m: usize },
}

impl Stepper {
    pub fn steps(&self) -> usize {
        match *self {
            Stepper::BackwardEuler { m } | Stepper::CrankNicolson { m } | Stepper::YosidaRk4 { m, .. } => m,
        }
    }

    pub fn with_steps(&self, m: usize) -> Self {
        match *self {
            Stepper::BackwardEuler { .. } => Stepper::BackwardEuler { m },
            Stepper::CrankNicolson { .. } => Stepper::CrankNicolson { m },
            Stepper::YosidaRk4 { mu, .. } => Stepper::YosidaRk4 { mu, m },
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Stepper::BackwardEuler { .. } => "backward_euler",
            Stepper::CrankNicolson { .. } => "crank_nicolson",
            Stepper::YosidaRk4 { .. } => "yosida_rk4",
        }
    }

    /// Fewest RK4 steps accepted on `[0, T]` for a Yosida flow.
    pub fn min_yosida_steps(t_final: f64, mu: f64) -> usize {
        4 * ((t_final * mu).ceil() as usize).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvolutionConfig {
    pub t_final: f64,
    pub stepper: Stepper,
    /// Times to record; `None` records every step. Each must be a step time.
    pub sample_times: Option<Vec<f64>>,
}

impl EvolutionConfig {
    pub fn new(t_final: f64, stepper: Stepper) -> Self {
        EvolutionConfig {
            t_final,
            stepper,
            sample_times: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_final >= 0.0 && self.t_final.is_finite()) {
            return Err(Error::invalid(format!("final time must be >= 0, got {}", self.t_final)));
        }
        let m = self.stepper.steps();
        if m == 0 && self.t_final > 0.0 {
            return Err(Error::invalid("step count must be >= 1 when T > 0"));
        }
        if let Stepper::YosidaRk4 { mu, m } = self.stepper {
            if !(mu > 0.0 && mu.is_finite()) {
                return Err(Error::invalid(format!("Yosida mu must be positive, got {mu}")));
            }
            let need = Stepper::min_yosida_steps(self.t_final, mu);
            if self.t_final > 0.0 && m < need {
                return Err(Error::invalid(format!(
                    "Yosida RK4 with T = {}, mu = {mu} needs m >= {need}, got {m}",
                    self.t_final
                )));
            }
        }
        self.sample_indices().map(|_| ())
    }

    fn tau(&self) -> f64 {
        let m = self.stepper.steps();
        if m == 0 {
            0.0
        } else {
            self.t_final / m as f64
        }
    }

    /// Step indices to record, ascending.
    fn sample_indices(&self) -> Result<Vec<usize>> {
        let m = self.stepper.steps();
        let Some(times) = &self.sample_times else {
            return Ok((0..=m).collect());
        };
        let mut idx = Vec::with_capacity(times.len());
        for &s in times {
            if !(0.0..=self.t_final).contains(&s) {
                return Err(Error::invalid(format!("sample time {s} outside [0, {}]", self.t_final)));
            }
            let k = if self.t_final == 0.0 { 0.0 } else { (s / self.t_final * m as f64).round() };
            if (k * self.tau() - s).abs() > 1e-9 * self.t_final.max(1.0) {
                return Err(Error::invalid(format!("sample time {s} is not a step time")));
            }
            idx.push(k as usize);
        }
        idx.sort_unstable();
        idx.dedup();
        Ok(idx)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    #[serde(skip)]
    pub states: Vec<Vec<f64>>,
    /// `‖u(t)‖_M` at the recorded times.
    pub norms: Vec<f64>,
    /// `‖u_k‖_M` never increased (homogeneous runs only; with the stepper's slack).
    pub contractive: bool,
}

impl Trajectory {
    pub fn last(&self) -> &[f64] {
        self.states.last().expect("nonempty trajectory")
    }
}

/// Time-dependent Galerkin load `t ↦ ∫ f(t)φ`.
pub type SourceFn<'a> = &'a (dyn Fn(f64) -> Result<Vec<f64>> + Sync);

/// Homogeneous evolution `u′ = 𝒜u`, `u(0) = g`.
pub fn evolve(gen: &DiscreteGenerator, g: &[f64], cfg: &EvolutionConfig) -> Result<Trajectory> {
    evolve_with_source(gen, g, cfg, None)
}

/// `M u′ + K u = b(t)`. Backward Euler adds `τ b(t_{k+1})`, Crank–Nicolson
/// `τ (b(t_k) + b(t_{k+1}))/2`; the Yosida flow is homogeneous only.
pub fn evolve_with_source(
    gen: &DiscreteGenerator,
    g: &[f64],
    cfg: &EvolutionConfig,
    source: Option<SourceFn>,
) -> Result<Trajectory> {
    cfg.validate()?;
    if g.len() != gen.dim() {
        return Err(Error::invalid(format!("initial datum has length {}, generator has dim {}", g.len(), gen.dim())));
    }
    let m = cfg.stepper.steps();
    let tau = cfg.tau();
    let record = cfg.sample_indices()?;
    let mut out = Trajectory {
        times: Vec::with_capacity(record.len()),
        states: Vec::with_capacity(record.len()),
        norms: Vec::with_capacity(record.len()),
        contractive: true,
    };
    let mut next = record.iter().peekable();
    let mut u = g.to_vec();
    let mut prev_norm = gen.norm(&u);
    let mut push = |k: usize, u: &[f64], out: &mut Trajectory| {
        if next.peek() == Some(&&k) {
            next.next();
            out.times.push(k as f64 * tau);
            out.states.push(u.to_vec());
            out.norms.push(gen.norm(u));
        }
    };
    push(0, &u, &mut out);
    if m == 0 || cfg.t_final == 0.0 {
        while out.times.len() < record.len() {
            out.times.push(0.0);
            out.states.push(u.clone());
            out.norms.push(prev_norm);
        }
        return Ok(out);
    }
    let slack = match cfg.stepper {
        Stepper::BackwardEuler { .. } => 1e-14,
        _ => CONTRACTION_SLACK,
    };

    enum Kernel<'g> {
        Implicit { lhs: PreparedSystem, rhs: Option<CsrMatrix>, theta: f64 },
        Yosida(Resolvent<'g>),
    }
    let kernel = match cfg.stepper {
        Stepper::BackwardEuler { .. } => Kernel::Implicit {
            lhs: PreparedSystem::new(gen.shifted(tau), SolverConfig::with_tol(SOLVE_TOL))?,
            rhs: None,
            theta: 1.0,
        },
        Stepper::CrankNicolson { .. } => Kernel::Implicit {
            lhs: PreparedSystem::new(gen.shifted(tau / 2.0), SolverConfig::with_tol(SOLVE_TOL))?,
            rhs: Some(gen.shifted(-tau / 2.0)),
            theta: 0.5,
        },
        Stepper::YosidaRk4 { mu, .. } => {
            if source.is_some() {
                return Err(Error::invalid("Yosida RK4 evolution supports homogeneous problems only"));
            }
            Kernel::Yosida(Resolvent::new(gen, mu)?)
        }
    };
    let mut b_prev = match source {
        Some(s) => Some(s(0.0)?),
        None => None,
    };
    for k in 0..m {
        let t_next = (k + 1) as f64 * tau;
        match &kernel {
            Kernel::Implicit { lhs, rhs, theta } => {
                let mut r = match rhs {
                    Some(r) => r.mul_vec(&u),
                    None => gen.mass.mul_vec(&u),
                };
                if let Some(s) = source {
                    let b_next = s(t_next)?;
                    axpy(tau * theta, &b_next, &mut r);
                    if *theta < 1.0 {
                        axpy(tau * (1.0 - theta), b_prev.as_ref().expect("set"), &mut r);
                    }
                    b_prev = Some(b_next);
                }
                u = lhs.solve(&r, Some(&u))?;
            }
            Kernel::Yosida(res) => {
                let k1 = res.yosida(&u)?;
                let k2 = res.yosida(&stage(&u, &k1, tau / 2.0))?;
                let k3 = res.yosida(&stage(&u, &k2, tau / 2.0))?;
                let k4 = res.yosida(&stage(&u, &k3, tau))?;
                for i in 0..u.len() {
                    u[i] += tau / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
            }
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("state at t = {t_next}")));
        }
        let nrm = gen.norm(&u);
        if source.is_none() && nrm > prev_norm * (1.0 + slack) + f64::MIN_POSITIVE {
            out.contractive = false;
        }
        prev_norm = nrm;
        push(k + 1, &u, &mut out);
    }
    Ok(out)
}

fn stage(u: &[f64], k: &[f64], h: f64) -> Vec<f64> {
    u.iter().zip(k).map(|(a, b)| a + h * b).collect()
}

/// Hypotheses the ε-deviation studies need on the coefficients.
fn coefficient_gaps(problem: &DiscreteProblem, need_second: bool) -> Vec<String> {
    let flags = problem.a.flags();
    let mut missing = Vec::new();
    if !flags.hyp_ad1 {
        missing.push("a12_partials_bounded (declare d1_a12 and d2_a12)".to_string());
    }
    if !flags.a22_depends_only_on_x2 {
        missing.push("a22_depends_only_on_x2".to_string());
    }
    if need_second && !flags.hyp_a12_second {
        missing.push("a12_mixed_second_derivative_in_l2".to_string());
    }
    missing
}

#[derive(Debug, Clone, Serialize)]
pub struct DeviationRow {
    pub epsilon: f64,
    pub deviation: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolventDeviation {
    pub mu: f64,
    pub rows: Vec<DeviationRow>,
    pub slope: Option<f64>,
    pub verdict: Verdict,
    pub refusal: Option<Refusal>,
}

/// `D(ε) = ‖R_{ε,μ}f − R_{0,μ}f‖_M` with `f` the L² projection of the source.
pub fn resolvent_deviation(problem: &DiscreteProblem, epsilons: &[f64], mu: f64) -> Result<ResolventDeviation> {
    if epsilons.is_empty() {
        return Err(Error::invalid("empty epsilon list"));
    }
    for &e in epsilons {
        crate::coefficients::check_epsilon(e)?;
    }
    let mut missing = coefficient_gaps(problem, true);
    if !problem.f.grad_x1_in_l2() {
        missing.push("grad_x1_f_in_l2 (declare d1_f)".to_string());
    }
    if !problem.f.slices_in_h10_omega1 {
        missing.push("f_slices_in_h10_omega1".to_string());
    }
    if problem.f.is_time_dependent() {
        missing.push("time_independent_source".to_string());
    }
    let refusal = (!missing.is_empty()).then_some(Refusal {
        study: "resolvent_deviation",
        missing,
    });
    let limit = DiscreteGenerator::new(problem, Epsilon::Limit);
    let f = PreparedSystem::new(limit.mass.clone(), SolverConfig::with_tol(SOLVE_TOL))?.solve(problem.load(), None)?;
    let u0 = resolvent_apply(&limit, mu, &f)?;
    let rows: Vec<DeviationRow> = epsilons
        .par_iter()
        .map(|&eps| -> Result<DeviationRow> {
            let gen = DiscreteGenerator::new(problem, Epsilon::Value(eps));
            let u = resolvent_apply(&gen, mu, &f)?;
            Ok(DeviationRow {
                epsilon: eps,
                deviation: limit.norm(&sub(&u, &u0)),
            })
        })
        .collect::<Result<_>>()?;
    let slope = fitted_slope(
        &rows.iter().map(|r| r.epsilon).collect::<Vec<_>>(),
        &rows.iter().map(|r| r.deviation).collect::<Vec<_>>(),
    );
    let verdict = if refusal.is_some() {
        Verdict::Refused
    } else {
        Verdict::from_bool(slope.is_none_or(|s| s >= MIN_SLOPE))
    };
    Ok(ResolventDeviation {
        mu,
        rows,
        slope,
        verdict,
        refusal,
    })
}

/// Checks that an initial datum is a tensor product vanishing on ∂Ω.
fn initial_datum_gaps(g: &Expr, space: &GalerkinSpace) -> Vec<String> {
    let mut missing = Vec::new();
    if !(g.is_zero() || g.deps().is_subset(crate::expr::VarSet::of(&[Var::X1, Var::X2]))) {
        missing.push("initial_datum_depends_on_x_only".to_string());
        return missing;
    }
    if !g.is_zero() && g.split_x1_x2().is_none() && !g.is_constant() {
        let deps = g.deps();
        let one_var = deps.is_subset(crate::expr::VarSet::of(&[Var::X1]))
            || deps.is_subset(crate::expr::VarSet::of(&[Var::X2]));
        if !one_var {
            missing.push("initial_datum_tensor_product".to_string());
        }
    }
    let d = &space.domain;
    let (o1, o2) = (d.omega1, d.omega2);
    let n = 64;
    let mut edge = 0.0f64;
    let mut inner = 0.0f64;
    for k in 0..=n {
        let s = k as f64 / n as f64;
        let x1 = o1.a + s * o1.length();
        let x2 = o2.a + s * o2.length();
        for v in [
            g.eval_xy(x1, o2.a),
            g.eval_xy(x1, o2.b),
            g.eval_xy(o1.a, x2),
            g.eval_xy(o1.b, x2),
        ] {
            edge = edge.max(v.abs());
        }
        for j in 1..n {
            let y = o2.a + j as f64 / n as f64 * o2.length();
            inner = inner.max(g.eval_xy(x1, y).abs());
        }
    }
    if edge > 1e-12 * inner.max(1.0) {
        missing.push("initial_datum_vanishes_on_boundary".to_string());
    }
    missing
}

/// Sup-in-time M-norm gap between two trajectories recorded at the same times.
fn sup_gap(gen: &DiscreteGenerator, a: &Trajectory, b: &Trajectory) -> (f64, Vec<f64>) {
    let series: Vec<f64> = a
        .states
        .iter()
        .zip(&b.states)
        .map(|(x, y)| gen.norm(&sub(x, y)))
        .collect();
    (series.iter().cloned().fold(0.0, f64::max), series)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeviationOptions {
    pub t_final: f64,
    pub stepper: Stepper,
    /// Certification tolerance: `|D_m − D_2m| ≤ tol · D_2m`.
    pub certify_tol: f64,
    /// Doubling stops (and the row is refused) beyond this step count.
    pub max_steps: usize,
    /// Points kept per time series for output.
    pub series_points: usize,
}

impl Default for DeviationOptions {
    fn default() -> Self {
        DeviationOptions {
            t_final: 1.0,
            stepper: Stepper::BackwardEuler { m: 256 },
            certify_tol: 0.01,
            max_steps: 1 << 16,
            series_points: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SemigroupRow {
    pub epsilon: f64,
    /// `sup_t ‖S_ε(t)g − S₀(t)g‖_M` at the certified step count.
    pub d_sup: f64,
    /// Same quantity at half the step count.
    pub d_coarse: f64,
    pub steps: usize,
    pub certified: bool,
    /// `D(ε; 2T)` with the same step size.
    pub d_double_t: f64,
    pub linear_in_t: bool,
    /// `(t, ‖S_ε(t)g − S₀(t)g‖_M)`, thinned.
    pub series: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SemigroupStudy {
    pub t_final: f64,
    pub stepper: &'static str,
    pub rows: Vec<SemigroupRow>,
    pub slope: Option<f64>,
    pub verdict: Verdict,
    pub refusal: Option<Refusal>,
    /// Step count needed when certification failed.
    pub required_steps: Option<usize>,
}

fn deviation_run(
    problem: &DiscreteProblem,
    eps: f64,
    g: &[f64],
    t_final: f64,
    stepper: Stepper,
) -> Result<(f64, Vec<(f64, f64)>)> {
    let cfg = EvolutionConfig::new(t_final, stepper);
    let ge = DiscreteGenerator::new(problem, Epsilon::Value(eps));
    let g0 = DiscreteGenerator::new(problem, Epsilon::Limit);
    let (a, b) = rayon::join(|| evolve(&ge, g, &cfg), || evolve(&g0, g, &cfg));
    let (a, b) = (a?, b?);
    let (d, series) = sup_gap(&g0, &a, &b);
    Ok((d, a.times.iter().cloned().zip(series).collect()))
}

fn thin(series: Vec<(f64, f64)>, points: usize) -> Vec<(f64, f64)> {
    if points == 0 || series.len() <= points + 1 {
        return series;
    }
    let stride = (series.len() - 1).div_ceil(points);
    let last = series.len() - 1;
    series
        .into_iter()
        .enumerate()
        .filter(|(i, _)| i % stride == 0 || *i == last)
        .map(|(_, p)| p)
        .collect()
}

/// `D(ε) = sup_t ‖S_ε(t)g − S₀(t)g‖_M` with like-for-like steppers.
///
/// The step count is doubled until two consecutive values agree to
/// `certify_tol`, so the stepper bias is below that fraction of `D`.
pub fn semigroup_deviation_study(
    problem: &DiscreteProblem,
    epsilons: &[f64],
    g: &Expr,
    opts: &DeviationOptions,
) -> Result<SemigroupStudy> {
    if epsilons.is_empty() {
        return Err(Error::invalid("empty epsilon list"));
    }
    for &e in epsilons {
        crate::coefficients::check_epsilon(e)?;
    }
    EvolutionConfig::new(opts.t_final, opts.stepper).validate()?;
    let mut missing = coefficient_gaps(problem, false);
    missing.extend(initial_datum_gaps(g, &problem.space));
    let refusal = (!missing.is_empty()).then_some(Refusal {
        study: "semigroup_deviation_study",
        missing,
    });
    let g_vec = l2_projection(&problem.space, &problem.norms().mass, g, 0.0)?;
    let m0 = opts.stepper.steps().max(1);

    let rows: Vec<Option<SemigroupRow>> = epsilons
        .par_iter()
        .map(|&eps| -> Result<Option<SemigroupRow>> {
            let mut m = m0;
            let (mut d_coarse, _) = deviation_run(problem, eps, &g_vec, opts.t_final, opts.stepper.with_steps(m))?;
            loop {
                let fine = opts.stepper.with_steps(2 * m);
                let (d_fine, series) = deviation_run(problem, eps, &g_vec, opts.t_final, fine)?;
                let certified = (d_coarse - d_fine).abs() <= opts.certify_tol * d_fine || d_fine == 0.0 && d_coarse == 0.0;
                if certified {
                    let (d_double_t, _) =
                        deviation_run(problem, eps, &g_vec, 2.0 * opts.t_final, opts.stepper.with_steps(4 * m))?;
                    return Ok(Some(SemigroupRow {
                        epsilon: eps,
                        d_sup: d_fine,
                        d_coarse,
                        steps: 2 * m,
                        certified,
                        d_double_t,
                        linear_in_t: d_double_t <= 2.2 * d_fine + f64::MIN_POSITIVE,
                        series: thin(series, opts.series_points),
                    }));
                }
                if 4 * m > opts.max_steps {
                    return Ok(None);
                }
                m *= 2;
                d_coarse = d_fine;
            }
        })
        .collect::<Result<_>>()?;

    if rows.iter().any(|r| r.is_none()) {
        let study = SemigroupStudy {
            t_final: opts.t_final,
            stepper: opts.stepper.name(),
            rows: rows.into_iter().flatten().collect(),
            slope: None,
            verdict: Verdict::Refused,
            refusal: Some(Refusal {
                study: "semigroup_deviation_study",
                missing: vec![format!("stepper_error_subdominant (needs more than {} steps)", opts.max_steps)],
            }),
            required_steps: Some(opts.max_steps * 2),
        };
        return Ok(study);
    }
    let rows: Vec<SemigroupRow> = rows.into_iter().flatten().collect();
    let slope = fitted_slope(
        &rows.iter().map(|r| r.epsilon).collect::<Vec<_>>(),
        &rows.iter().map(|r| r.d_sup).collect::<Vec<_>>(),
    );
    let verdict = if refusal.is_some() {
        Verdict::Refused
    } else {
        Verdict::from_bool(
            slope.is_none_or(|s| s >= MIN_SLOPE) && rows.iter().all(|r| r.certified && r.linear_in_t),
        )
    };
    Ok(SemigroupStudy {
        t_final: opts.t_final,
        stepper: opts.stepper.name(),
        rows,
        slope,
        verdict,
        refusal,
        required_steps: None,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorOracleReport {
    pub mu: f64,
    pub s: f64,
    pub steps: usize,
    /// `‖u_2D(s) − g₁ ⊗ u_1D(s)‖_M / ‖g₁ ⊗ g₂‖_M`.
    pub relative_gap: f64,
    /// `‖u_2D(s)‖_M / ‖g‖_M`.
    pub norm_ratio: f64,
    pub tol: f64,
    pub verdict: Verdict,
}

/// Evolves `g₁ ⊗ g₂` under the 2D limit Yosida flow and `g₂` under the
/// ω₂ flow, then compares `u_2D(s)` with `g₁ ⊗ u_1D(s)`.
pub fn tensor_semigroup_oracle_check(
    problem: &DiscreteProblem,
    g1: &Expr,
    g2: &Expr,
    s: f64,
    mu: f64,
    tol: f64,
) -> Result<TensorOracleReport> {
    if !problem.a.flags().a22_depends_only_on_x2 {
        return Err(Error::HypothesisMissing {
            study: "tensor_semigroup_oracle_check",
            missing: vec!["a22_depends_only_on_x2".to_string()],
        });
    }
    let space = &problem.space;
    let project = |g: &Expr, var: Var| -> Result<Vec<f64>> {
        let b = load_1d(space, g, var)?;
        PreparedSystem::new(mass_1d(space, var), SolverConfig::with_tol(SOLVE_TOL))?.solve(&b, None)
    };
    let c1 = project(g1, Var::X1)?;
    let c2 = project(g2, Var::X2)?;
    let gen2 = DiscreteGenerator::new(problem, Epsilon::Limit);
    let gen1 = DiscreteGenerator::omega2(space, &problem.a.a22)?;
    let steps = Stepper::min_yosida_steps(s, mu).max(64);
    let cfg = EvolutionConfig {
        t_final: s,
        stepper: Stepper::YosidaRk4 { mu, m: steps },
        sample_times: Some(vec![s]),
    };
    let g = kron_vec(&c1, &c2);
    let u2 = evolve(&gen2, &g, &cfg)?;
    let u1 = evolve(&gen1, &c2, &cfg)?;
    let product = kron_vec(&c1, u1.last());
    let gnorm = gen2.norm(&g);
    let scale = if gnorm > 0.0 { gnorm } else { 1.0 };
    let relative_gap = gen2.norm(&sub(u2.last(), &product)) / scale;
    Ok(TensorOracleReport {
        mu,
        s,
        steps,
        relative_gap,
        norm_ratio: gen2.norm(u2.last()) / scale,
        tol,
        verdict: Verdict::from_bool(relative_gap <= tol),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ParabolicRow {
    pub epsilon: f64,
    /// `‖u_{0,ε} − u_0‖_M`.
    pub initial_gap: f64,
    pub sup_deviation: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ParabolicReport {
    pub t_final: f64,
    pub stepper: &'static str,
    pub rows: Vec<ParabolicRow>,
    pub initial_data_converge: bool,
    pub monotone_decay: bool,
    pub tol: f64,
    pub verdict: Verdict,
}

/// Initial data `u0(ε)` given as an expression in `x1, x2, eps`.
pub fn parabolic_convergence(
    problem: &DiscreteProblem,
    u0: &Expr,
    epsilons: &[f64],
    t_final: f64,
    stepper: Stepper,
    tol: f64,
) -> Result<ParabolicReport> {
    if epsilons.is_empty() {
        return Err(Error::invalid("empty epsilon list"));
    }
    for &e in epsilons {
        crate::coefficients::check_epsilon(e)?;
    }
    if matches!(stepper, Stepper::YosidaRk4 { .. }) && !problem.f.f.is_zero() {
        return Err(Error::invalid("Yosida RK4 evolution supports homogeneous problems only"));
    }
    let space: &Arc<GalerkinSpace> = &problem.space;
    let mass = &problem.norms().mass;
    let project_at = |eps: f64| -> Result<Vec<f64>> {
        let b = crate::field::sample_expr(space, u0, Env { eps, ..Default::default() })?;
        let load = crate::field::integrate_against_basis(
            space,
            &b,
            crate::tensor_spaces::Component::Value,
            crate::tensor_spaces::Component::Value,
        );
        PreparedSystem::new(mass.clone(), SolverConfig::with_tol(SOLVE_TOL))?.solve(&load, None)
    };
    let u0_limit = project_at(0.0)?;
    let f = problem.f.f.clone();
    let steady = (!problem.f.is_time_dependent()).then(|| problem.load().to_vec());
    let source = move |t: f64| -> Result<Vec<f64>> {
        match &steady {
            Some(b) => Ok(b.clone()),
            None => assemble_load_at(space, &f, t),
        }
    };
    let has_source = !problem.f.f.is_zero();
    let cfg = EvolutionConfig::new(t_final, stepper);
    let g0 = DiscreteGenerator::new(problem, Epsilon::Limit);
    let limit = evolve_with_source(&g0, &u0_limit, &cfg, has_source.then_some(&source as SourceFn))?;
    let rows: Vec<ParabolicRow> = epsilons
        .par_iter()
        .map(|&eps| -> Result<ParabolicRow> {
            let ue0 = project_at(eps)?;
            let ge = DiscreteGenerator::new(problem, Epsilon::Value(eps));
            let tr = evolve_with_source(&ge, &ue0, &cfg, has_source.then_some(&source as SourceFn))?;
            let (d, _) = sup_gap(&g0, &tr, &limit);
            Ok(ParabolicRow {
                epsilon: eps,
                initial_gap: g0.norm(&sub(&ue0, &u0_limit)),
                sup_deviation: d,
            })
        })
        .collect::<Result<_>>()?;
    // rows ordered by decreasing ε
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&i, &j| rows[j].epsilon.total_cmp(&rows[i].epsilon));
    let nonincreasing = |v: Vec<f64>| v.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9) + 1e-15);
    let initial_data_converge = nonincreasing(order.iter().map(|&i| rows[i].initial_gap).collect());
    let monotone_decay = nonincreasing(order.iter().map(|&i| rows[i].sup_deviation).collect());
    let last = rows[*order.last().expect("nonempty")].sup_deviation;
    let verdict = Verdict::from_bool(initial_data_converge && monotone_decay && last <= tol);
    Ok(ParabolicReport {
        t_final,
        stepper: stepper.name(),
        rows,
        initial_data_converge,
        monotone_decay,
        tol,
        verdict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{CoefficientField, ReactionSpec, SourceField};
    use crate::tensor_spaces::{build_space, BasisKind, TensorDomain};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    const SIN_SIN: &str = "2/pi*sin(x1)*sin(x2)";

    fn problem(m: usize, f: &str, a: CoefficientField) -> DiscreteProblem {
        let d = TensorDomain::unit_pi_square();
        let s = Arc::new(build_space(d, BasisKind::Sine, m, BasisKind::Sine, m).unwrap());
        DiscreteProblem::new(s, a, SourceField::parse(f, &d).unwrap(), ReactionSpec::Zero).unwrap()
    }

    fn mode(p: &DiscreteProblem, i: usize, j: usize) -> Vec<f64> {
        let mut v = vec![0.0; p.space.dim()];
        v[p.space.flat(i, j)] = 1.0;
        v
    }

    #[test]
    fn resolvent_eigenmode() {
        let p = problem(4, "0", CoefficientField::identity());
        let gen = DiscreteGenerator::new(&p, Epsilon::Limit);
        let f = mode(&p, 0, 1);
        let u = resolvent_apply(&gen, 3.0, &f).unwrap();
        for (a, b) in u.iter().zip(&f) {
            assert!((a - b / 7.0).abs() < 1e-12);
        }
        let z = resolvent_apply(&gen, 3.0, &vec![0.0; f.len()]).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        assert!(resolvent_apply(&gen, 0.0, &f).is_err());
    }

    #[test]
    fn resolvent_large_mu_tends_to_identity() {
        let p = problem(4, "0", CoefficientField::identity());
        let gen = DiscreteGenerator::new(&p, Epsilon::Value(0.5));
        let f: Vec<f64> = (0..gen.dim()).map(|k| 1.0 / (1.0 + k as f64)).collect();
        let gap = |mu: f64| {
            let mut u = resolvent_apply(&gen, mu, &f).unwrap();
            u.iter_mut().for_each(|v| *v *= mu);
            gen.norm(&sub(&u, &f))
        };
        let (g3, g6) = (gap(1e3), gap(1e6));
        assert!(g6 < g3);
        assert!((g3 / g6 / 1e3 - 1.0).abs() < 0.05);
    }

    #[test]
    fn resolvent_contraction_random() {
        let p = problem(4, "0", CoefficientField::constant_symmetric(1.0, 0.3, 1.0, 0.7).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for eps in [Epsilon::Value(0.5), Epsilon::Limit] {
            let gen = DiscreteGenerator::new(&p, eps);
            assert!(gen.dissipativity_margin().unwrap() > -1e-12);
            for &mu in &[0.1, 1.0, 10.0] {
                for _ in 0..5 {
                    let f: Vec<f64> = (0..gen.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let u = resolvent_apply(&gen, mu, &f).unwrap();
                    assert!(gen.norm(&u) <= gen.norm(&f) / mu * (1.0 + 1e-12));
                }
            }
        }
    }

    #[test]
    fn resolvent_deviation_oracle() {
        let a = CoefficientField::identity();
        let d = TensorDomain::unit_pi_square();
        let s = Arc::new(build_space(d, BasisKind::Sine, 4, BasisKind::Sine, 4).unwrap());
        let f = SourceField::parse(SIN_SIN, &d)
            .unwrap()
            .with_d1(Expr::parse("2/pi*cos(x1)*sin(x2)").unwrap())
            .unwrap();
        let p = DiscreteProblem::new(s, a, f, ReactionSpec::Zero).unwrap();
        let eps = [1.0, 0.5, 0.25, 0.125];
        let r = resolvent_deviation(&p, &eps, 1.0).unwrap();
        assert!((r.rows[0].deviation - 1.0 / 6.0).abs() < 1e-12);
        for row in &r.rows {
            let e2 = row.epsilon * row.epsilon;
            assert!((row.deviation - e2 / (2.0 * (2.0 + e2))).abs() < 1e-12);
        }
        assert_eq!(r.verdict, Verdict::Pass);
        assert!(r.slope.unwrap() > 1.8);

        let z = problem(4, "0", CoefficientField::identity());
        let r = resolvent_deviation(&z, &eps, 1.0).unwrap();
        assert!(r.rows.iter().all(|row| row.deviation == 0.0));
        assert!(r.refusal.is_none());
        assert_eq!(r.verdict, Verdict::Pass);
    }

    #[test]
    fn backward_euler_recurrence() {
        let p = problem(4, "0", CoefficientField::identity());
        let gen = DiscreteGenerator::new(&p, Epsilon::Limit);
        let g = mode(&p, 0, 0);
        let tr = evolve(&gen, &g, &EvolutionConfig::new(1.0, Stepper::BackwardEuler { m: 10 })).unwrap();
        assert_eq!(tr.times.len(), 11);
        assert!((tr.last()[0] - 1.1f64.powi(-10)).abs() < 1e-13);
        assert!(tr.contractive);
        let t0 = evolve(&gen, &g, &EvolutionConfig::new(0.0, Stepper::BackwardEuler { m: 10 })).unwrap();
        assert_eq!(t0.last(), &g[..]);
        assert!(evolve(&gen, &g, &EvolutionConfig::new(1.0, Stepper::BackwardEuler { m: 0 })).is_err());
    }

    #[test]
    fn stepper_orders() {
        let p = problem(2, "0", CoefficientField::identity());
        let gen = DiscreteGenerator::new(&p, Epsilon::Limit);
        let g = mode(&p, 0, 0);
        let err = |st: Stepper| {
            let tr = evolve(&gen, &g, &EvolutionConfig::new(1.0, st)).unwrap();
            (tr.last()[0] - (-1.0f64).exp()).abs()
        };
        let be = err(Stepper::BackwardEuler { m: 64 }) / err(Stepper::BackwardEuler { m: 128 });
        assert!((be - 2.0).abs() < 0.2, "{be}");
        let cn = err(Stepper::CrankNicolson { m: 64 }) / err(Stepper::CrankNicolson { m: 128 });
        assert!((cn - 4.0).abs() < 0.5, "{cn}");
    }

    #[test]
    fn yosida_eigenvalue() {
        let p = problem(3, "0", CoefficientField::identity());
        let gen = DiscreteGenerator::new(&p, Epsilon::Limit);
        let g = mode(&p, 0, 0);
        let cfg = EvolutionConfig::new(1.0, Stepper::YosidaRk4 { mu: 1.0, m: 64 });
        let tr = evolve(&gen, &g, &cfg).unwrap();
        assert!((tr.last()[0] - (-0.5f64).exp()).abs() < 1e-8);
        assert!(tr.contractive);
        let bad = EvolutionConfig::new(1.0, Stepper::YosidaRk4 { mu: 10.0, m: 8 });
        assert!(evolve(&gen, &g, &bad).is_err());
    }

    #[test]
    fn yosida_approaches_semigroup() {
        let p = problem(2, "0", CoefficientField::identity());
        let gen = DiscreteGenerator::new(&p, Epsilon::Limit);
        let g = mode(&p, 0, 1);
        let exact = (-4.0f64).exp();
        let err = |mu: f64| {
            let m = Stepper::min_yosida_steps(1.0, mu) * 4;
            let tr = evolve(&gen, &g, &EvolutionConfig::new(1.0, Stepper::YosidaRk4 { mu, m })).unwrap();
            (tr.last()[p.space.flat(0, 1)] - exact).abs()
        };
        let (e2, e3) = (err(1e2), err(1e3));
        assert!(e3 < e2);
        // eigenvalue gap k⁴/(μ+k²) with k = 2
        let predicted = |mu: f64| exact * (16.0 / (mu + 4.0)).exp_m1();
        assert!((e2 / predicted(1e2) - 1.0).abs() < 0.05);
    }

    #[test]
    fn contraction_random_data() {
        let p = problem(4, "0", CoefficientField::constant_symmetric(1.0, 0.3, 1.0, 0.7).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g: Vec<f64> = (0..p.space.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for eps in [Epsilon::Value(0.25), Epsilon::Limit] {
            let gen = DiscreteGenerator::new(&p, eps);
            for st in [
                Stepper::BackwardEuler { m: 20 },
                Stepper::CrankNicolson { m: 20 },
                Stepper::YosidaRk4 { mu: 5.0, m: 40 },
            ] {
                let tr = evolve(&gen, &g, &EvolutionConfig::new(1.0, st)).unwrap();
                assert!(tr.contractive, "{st:?}");
                assert!(tr.norms.iter().all(|&n| n <= gen.norm(&g) * (1.0 + 1e-10)));
            }
        }
    }

    #[test]
    fn sample_times_on_grid() {
        let p = problem(2, "0", CoefficientField::identity());
        let gen = DiscreteGenerator::new(&p, Epsilon::Limit);
        let g = mode(&p, 0, 0);
        let mut cfg = EvolutionConfig::new(1.0, Stepper::BackwardEuler { m: 4 });
        cfg.sample_times = Some(vec![0.5, 1.0]);
        let tr = evolve(&gen, &g, &cfg).unwrap();
        assert_eq!(tr.times, vec![0.5, 1.0]);
        cfg.sample_times = Some(vec![0.3]);
        assert!(evolve(&gen, &g, &cfg).is_err());
    }

    #[test]
    fn deviation_study_identity_closed_form() {
        let p = problem(2, "0", CoefficientField::identity());
        let eps: Vec<f64> = (1..=3).map(|k| 0.5f64.powi(k)).collect();
        let opts = DeviationOptions {
            stepper: Stepper::BackwardEuler { m: 512 },
            ..Default::default()
        };
        let r = semigroup_deviation_study(&p, &eps, &Expr::parse(SIN_SIN).unwrap(), &opts).unwrap();
        assert_eq!(r.verdict, Verdict::Pass, "{r:?}");
        for row in &r.rows {
            let e2 = row.epsilon * row.epsilon;
            let closed = (-1.0f64).exp() * (1.0 - (-e2).exp());
            assert!((row.d_sup / closed - 1.0).abs() < 0.01, "{row:?}");
        }
        let z = semigroup_deviation_study(&p, &eps, &Expr::parse("0").unwrap(), &opts).unwrap();
        assert!(z.rows.iter().all(|r| r.d_sup == 0.0));
    }

    #[test]
    fn deviation_study_refuses_non_vanishing_datum() {
        let p = problem(2, "0", CoefficientField::identity());
        let r = semigroup_deviation_study(
            &p,
            &[0.5],
            &Expr::parse("cos(x1)*sin(x2)").unwrap(),
            &DeviationOptions::default(),
        )
        .unwrap();
        assert_eq!(r.verdict, Verdict::Refused);
        assert!(r.refusal.unwrap().missing.iter().any(|m| m == "initial_datum_vanishes_on_boundary"));
    }

    #[test]
    fn tensor_oracle_cases() {
        let p = problem(4, "0", CoefficientField::identity());
        let sin1 = Expr::parse("sin(x1)").unwrap();
        let r = tensor_semigroup_oracle_check(&p, &sin1, &Expr::parse("sin(x2)").unwrap(), 1.0, 1.0, 1e-8).unwrap();
        assert_eq!(r.verdict, Verdict::Pass);
        assert!((r.norm_ratio - (-0.5f64).exp()).abs() < 1e-8);
        let r = tensor_semigroup_oracle_check(&p, &sin1, &Expr::parse("sin(2*x2)").unwrap(), 0.5, 2.0, 1e-8).unwrap();
        assert!((r.norm_ratio - (-4.0 * 0.5 / 3.0f64).exp()).abs() < 1e-8);
        let r = tensor_semigroup_oracle_check(&p, &sin1, &Expr::parse("sin(x2)").unwrap(), 0.0, 1.0, 1e-8).unwrap();
        assert!((r.norm_ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tensor_oracle_variable_a22() {
        let a = CoefficientField::parse("1", "0", "0", "1 + x2^2/10", 1.0).unwrap();
        let p = problem(6, "0", a);
        let r = tensor_semigroup_oracle_check(
            &p,
            &Expr::parse("x1*(pi-x1)").unwrap(),
            &Expr::parse("sin(x2)*(1+x2/4)").unwrap(),
            0.7,
            3.0,
            1e-8,
        )
        .unwrap();
        assert_eq!(r.verdict, Verdict::Pass, "{r:?}");
    }

    #[test]
    fn parabolic_with_source_matches_mode_ode() {
        let d = TensorDomain::unit_pi_square();
        let s = Arc::new(build_space(d, BasisKind::Sine, 2, BasisKind::Sine, 2).unwrap());
        let f = SourceField::parse("exp(-t)*2/pi*sin(x1)*sin(x2)", &d).unwrap();
        let p = DiscreteProblem::new(s, CoefficientField::identity(), f, ReactionSpec::Zero).unwrap();
        let gen = DiscreteGenerator::new(&p, Epsilon::Limit);
        let expr = p.f.f.clone();
        let space = p.space.clone();
        let src = move |t: f64| assemble_load_at(&space, &expr, t);
        let g = mode(&p, 0, 0);
        let err = |m: usize| {
            let tr = evolve_with_source(&gen, &g, &EvolutionConfig::new(1.0, Stepper::BackwardEuler { m }), Some(&src))
                .unwrap();
            // û′ = −û + e^{−t}, û(0) = 1 ⇒ û = (1 + t)e^{−t}
            (tr.last()[0] - 2.0 * (-1.0f64).exp()).abs()
        };
        let (e1, e2) = (err(100), err(200));
        assert!(e1 < 1e-2 && (e1 / e2 - 2.0).abs() < 0.2);
    }

    #[test]
    fn parabolic_initial_gap_decays() {
        let p = problem(2, "0", CoefficientField::identity());
        let u0 = Expr::parse("(1+eps)*2/pi*sin(x1)*sin(x2)").unwrap();
        let eps = [0.5, 0.25, 0.125, 0.0625];
        let r = parabolic_convergence(&p, &u0, &eps, 1.0, Stepper::BackwardEuler { m: 200 }, 0.1).unwrap();
        assert_eq!(r.verdict, Verdict::Pass, "{r:?}");
        for row in &r.rows {
            assert!((row.initial_gap - row.epsilon).abs() < 1e-12);
            // sup at t = 0 is the initial gap
            assert!((row.sup_deviation - row.epsilon).abs() < 1e-12);
        }
        let _ = PI;
    }
}
