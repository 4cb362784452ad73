//! Experiment configuration: TOML with `[problem]`, `[discretization]`,
//! `[study]` and `[output]` sections.

use std::path::Path;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use aniso_core::coefficients::{check_epsilon, CoefficientField, ReactionSpec, SourceField, DEFAULT_SUP_GRID};
use aniso_core::elliptic::Epsilon;
use aniso_core::expr::Env;
use aniso_core::semigroup::Stepper;
use aniso_core::{BasisKind, Expr, GalerkinSpace, Interval, QuadratureRule, TensorDomain};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub discretization: DiscretizationConfig,
    pub study: StudyConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    /// Endpoints as expressions, e.g. `["0", "pi"]`.
    #[serde(default = "default_interval")]
    pub omega1: [String; 2],
    #[serde(default = "default_interval")]
    pub omega2: [String; 2],
    #[serde(default = "one")]
    pub a11: String,
    #[serde(default = "zero")]
    pub a12: String,
    #[serde(default = "zero")]
    pub a21: String,
    #[serde(default = "one")]
    pub a22: String,
    pub lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d1_a12: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d2_a12: Option<String>,
    #[serde(default, skip_serializing_if = "is_false")]
    pub a12_second_derivative: bool,
    #[serde(default = "zero")]
    pub f: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d1_f: Option<String>,
    /// Overrides the sampled trace check when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f_slices_in_h10_omega1: Option<bool>,
    #[serde(default)]
    pub beta: BetaKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_expr: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_lipschitz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_growth: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BetaKind {
    #[default]
    Zero,
    Linear,
    Arctan,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscretizationConfig {
    pub basis1: BasisKind,
    pub m1: usize,
    pub basis2: BasisKind,
    pub m2: usize,
    #[serde(default = "default_order")]
    pub quadrature_order: usize,
    #[serde(default = "default_panels")]
    pub sine_panels: usize,
    #[serde(default = "default_sup_grid")]
    pub sup_grid: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudyKind {
    Solve,
    Rate,
    Cea,
    Ap,
    Dq,
    Resolvent,
    Semigroup,
    Parabolic,
}

impl StudyKind {
    pub fn name(&self) -> &'static str {
        match self {
            StudyKind::Solve => "solve",
            StudyKind::Rate => "rate",
            StudyKind::Cea => "cea",
            StudyKind::Ap => "ap",
            StudyKind::Dq => "dq",
            StudyKind::Resolvent => "resolvent",
            StudyKind::Semigroup => "semigroup",
            StudyKind::Parabolic => "parabolic",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepperKind {
    #[default]
    BackwardEuler,
    CrankNicolson,
    YosidaRk4,
}

/// A source for the difference-quotient study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceCase {
    pub f: String,
    pub d1_f: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub kind: StudyKind,
    #[serde(default)]
    pub epsilons: Vec<f64>,
    /// `solve` also solves the limit problem.
    #[serde(default = "yes")]
    pub include_limit: bool,
    /// `"limit"` or a number; the solve exported by `--export`, and the
    /// problem checked by `cea`.
    #[serde(default = "limit_text")]
    pub target: String,
    /// Rate studies: request the global bound verdict.
    #[serde(default = "yes")]
    pub bound: bool,
    /// Rate studies: require the fitted slope to reach 0.95.
    #[serde(default = "yes")]
    pub check_slope: bool,
    /// Rate studies: bounds on `max_ε e_x1 / e_x1(ε_max)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e_x1_growth_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e_x1_growth_max: Option<f64>,
    /// Closed-form reference `(u, ∂₁u, ∂₂u)` for rate studies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact: Option<[String; 3]>,
    /// Rate studies with `β(s) = μs` repeated over these μ.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mus: Vec<f64>,
    /// Nested sizes for `cea` and `ap` (both factors).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sizes: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_size: Option<usize>,
    #[serde(default = "default_terminal_tol")]
    pub terminal_tol: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cases: Vec<SourceCase>,
    /// Resolvent parameter.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default = "default_t")]
    pub t_final: f64,
    #[serde(default)]
    pub stepper: StepperKind,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub yosida_mu: Option<f64>,
    /// Initial datum for `semigroup`; `u0` (may use `eps`) for `parabolic`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u0: Option<String>,
    #[serde(default = "default_certify")]
    pub certify_tol: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out")]
    pub directory: String,
    #[serde(default = "default_formats")]
    pub formats: Vec<String>,
    /// Intervals per direction of the exported lattice.
    #[serde(default = "default_lattice")]
    pub lattice: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            directory: default_out(),
            formats: default_formats(),
            lattice: default_lattice(),
        }
    }
}

fn default_interval() -> [String; 2] {
    ["0".into(), "pi".into()]
}
fn one() -> String {
    "1".into()
}
fn zero() -> String {
    "0".into()
}
fn is_false(b: &bool) -> bool {
    !*b
}
fn yes() -> bool {
    true
}
fn limit_text() -> String {
    "limit".into()
}
fn default_order() -> usize {
    QuadratureRule::default().order
}
fn default_panels() -> usize {
    QuadratureRule::default().sine_panels_per_mode
}
fn default_sup_grid() -> usize {
    DEFAULT_SUP_GRID
}
fn default_terminal_tol() -> f64 {
    1e-3
}
fn default_t() -> f64 {
    1.0
}
fn default_steps() -> usize {
    256
}
fn default_certify() -> f64 {
    0.01
}
fn default_tol() -> f64 {
    0.1
}
fn default_out() -> String {
    "out".into()
}
fn default_formats() -> Vec<String> {
    vec!["csv".into(), "json".into()]
}
fn default_lattice() -> usize {
    32
}

fn expr(key: &str, text: &str) -> Result<Expr> {
    Expr::parse(text).map_err(|e| anyhow!("{key}: {e}"))
}

fn endpoint(key: &str, text: &str) -> Result<f64> {
    let e = expr(key, text)?;
    if !e.deps().is_empty() {
        bail!("{key}: endpoint `{text}` must be a constant expression");
    }
    Ok(e.eval(&Env::default()))
}

/// Parses `"limit"` or a number in (0, 1].
pub fn parse_epsilon(text: &str) -> Result<Epsilon> {
    if text.trim().eq_ignore_ascii_case("limit") {
        return Ok(Epsilon::Limit);
    }
    let v: f64 = text.trim().parse().map_err(|_| anyhow!("epsilon must be a number or \"limit\", got `{text}`"))?;
    Ok(Epsilon::new(v)?)
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| anyhow!("config parse error: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks everything that does not need assembly.
    pub fn validate(&self) -> Result<()> {
        for &e in &self.study.epsilons {
            check_epsilon(e)?;
        }
        parse_epsilon(&self.study.target)?;
        self.domain()?;
        self.coefficients()?;
        self.source()?;
        self.reaction()?;
        let d = &self.discretization;
        if d.quadrature_order == 0 || d.sine_panels == 0 || d.sup_grid == 0 {
            bail!("quadrature_order, sine_panels and sup_grid must be positive");
        }
        if let Some(ex) = &self.study.exact {
            for (k, t) in ["exact u", "exact d1u", "exact d2u"].iter().zip(ex) {
                expr(k, t)?;
            }
        }
        for (k, t) in [("g", &self.study.g), ("u0", &self.study.u0)] {
            if let Some(t) = t {
                expr(k, t)?;
            }
        }
        for c in &self.study.cases {
            expr("cases.f", &c.f)?;
            expr("cases.d1_f", &c.d1_f)?;
        }
        if self.study.mus.iter().any(|&m| !(m > 0.0 && m.is_finite())) {
            bail!("mus must be positive");
        }
        if self.study.kind != StudyKind::Solve && self.study.kind != StudyKind::Dq && self.study.kind != StudyKind::Cea
            && self.study.epsilons.is_empty()
        {
            bail!("study `{}` needs a nonempty epsilons list", self.study.kind.name());
        }
        if matches!(self.study.kind, StudyKind::Cea | StudyKind::Ap)
            && (self.study.sizes.is_empty() || self.study.reference_size.is_none()) {
                bail!("study `{}` needs sizes and reference_size", self.study.kind.name());
            }
        if self.study.kind == StudyKind::Resolvent && self.study.mu.is_none() {
            bail!("study `resolvent` needs mu");
        }
        if self.study.kind == StudyKind::Semigroup && self.study.g.is_none() {
            bail!("study `semigroup` needs an initial datum g");
        }
        if self.study.kind == StudyKind::Parabolic && self.study.u0.is_none() {
            bail!("study `parabolic` needs u0");
        }
        self.stepper()?;
        Ok(())
    }

    pub fn domain(&self) -> Result<TensorDomain> {
        let p = &self.problem;
        let i1 = Interval::new(endpoint("omega1", &p.omega1[0])?, endpoint("omega1", &p.omega1[1])?)?;
        let i2 = Interval::new(endpoint("omega2", &p.omega2[0])?, endpoint("omega2", &p.omega2[1])?)?;
        Ok(TensorDomain::new(i1, i2))
    }

    pub fn coefficients(&self) -> Result<CoefficientField> {
        let p = &self.problem;
        let mut a = CoefficientField::new(
            expr("a11", &p.a11)?,
            expr("a12", &p.a12)?,
            expr("a21", &p.a21)?,
            expr("a22", &p.a22)?,
            p.lambda,
        )?;
        match (&p.d1_a12, &p.d2_a12) {
            (Some(d1), Some(d2)) => a = a.with_a12_partials(expr("d1_a12", d1)?, expr("d2_a12", d2)?)?,
            (None, None) => {}
            _ => bail!("declare both d1_a12 and d2_a12, or neither"),
        }
        if p.a12_second_derivative {
            a = a.declare_a12_second_derivative();
        }
        Ok(a)
    }

    pub fn source(&self) -> Result<SourceField> {
        self.source_from(&self.problem.f, self.problem.d1_f.as_deref())
    }

    pub fn source_from(&self, f: &str, d1: Option<&str>) -> Result<SourceField> {
        let mut s = SourceField::new(expr("f", f)?, &self.domain()?)?;
        if let Some(d) = d1 {
            s = s.with_d1(expr("d1_f", d)?)?;
        }
        if let Some(flag) = self.problem.f_slices_in_h10_omega1 {
            s = s.with_slices_flag(flag);
        }
        Ok(s)
    }

    pub fn reaction(&self) -> Result<ReactionSpec> {
        let p = &self.problem;
        Ok(match p.beta {
            BetaKind::Zero => ReactionSpec::Zero,
            BetaKind::Linear => ReactionSpec::linear(p.mu.ok_or_else(|| anyhow!("beta = \"linear\" needs mu"))?)?,
            BetaKind::Arctan => ReactionSpec::arctan(),
            BetaKind::Custom => ReactionSpec::custom(
                p.beta_expr.as_deref().ok_or_else(|| anyhow!("beta = \"custom\" needs beta_expr"))?,
                p.beta_lipschitz.ok_or_else(|| anyhow!("beta = \"custom\" needs beta_lipschitz"))?,
                p.beta_growth.ok_or_else(|| anyhow!("beta = \"custom\" needs beta_growth"))?,
            )?,
        })
    }

    pub fn rule(&self) -> QuadratureRule {
        QuadratureRule {
            order: self.discretization.quadrature_order,
            sine_panels_per_mode: self.discretization.sine_panels,
        }
    }

    pub fn space(&self) -> Result<Arc<GalerkinSpace>> {
        let d = &self.discretization;
        self.space_with(d.m1, d.m2)
    }

    pub fn space_with(&self, m1: usize, m2: usize) -> Result<Arc<GalerkinSpace>> {
        let d = &self.discretization;
        Ok(Arc::new(GalerkinSpace::new(self.domain()?, d.basis1, m1, d.basis2, m2, self.rule())?))
    }

    pub fn stepper(&self) -> Result<Stepper> {
        let s = &self.study;
        Ok(match s.stepper {
            StepperKind::BackwardEuler => Stepper::BackwardEuler { m: s.steps },
            StepperKind::CrankNicolson => Stepper::CrankNicolson { m: s.steps },
            StepperKind::YosidaRk4 => Stepper::YosidaRk4 {
                mu: s.yosida_mu.ok_or_else(|| anyhow!("stepper yosida_rk4 needs yosida_mu"))?,
                m: s.steps,
            },
        })
    }
}
