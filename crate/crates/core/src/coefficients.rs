//! The block coefficient matrix, its ε-scaling, reactions, sources, and the
//! ledger of explicit constants that enter the error bounds.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::expr::{Env, Expr, Var, VarSet};
use crate::quadrature::Quadrature1D;
use crate::tensor_spaces::TensorDomain;

/// Default lattice resolution for sup-norm estimates.
pub const DEFAULT_SUP_GRID: usize = 512;

/// Relative slack used when a sampled quantity is compared with a declared bound.
const DECLARED_SLACK: f64 = 1e-9;

/// Assumption flags attached to a coefficient field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct CoefficientFlags {
    pub a22_depends_only_on_x2: bool,
    /// `∂x₁a12, ∂x₂a12 ∈ L∞`: partials of the off-diagonal block are available.
    pub hyp_ad1: bool,
    /// `∂²x₁x₂ a12 ∈ L²`.
    pub hyp_a12_second: bool,
}

/// `A(x) = [[a11, a12], [a21, a22]]` with ellipticity constant λ.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientField {
    pub a11: Expr,
    pub a12: Expr,
    pub a21: Expr,
    pub a22: Expr,
    pub d1_a12: Option<Expr>,
    pub d2_a12: Option<Expr>,
    pub d1_a21: Option<Expr>,
    pub d2_a21: Option<Expr>,
    pub lambda: f64,
    declared_a12_second: bool,
}

impl CoefficientField {
    pub fn new(a11: Expr, a12: Expr, a21: Expr, a22: Expr, lambda: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::invalid(format!("ellipticity constant must be positive, got {lambda}")));
        }
        for (name, e) in [("a11", &a11), ("a12", &a12), ("a21", &a21), ("a22", &a22)] {
            check_spatial(name, e)?;
        }
        Ok(CoefficientField {
            a11,
            a12,
            a21,
            a22,
            d1_a12: None,
            d2_a12: None,
            d1_a21: None,
            d2_a21: None,
            lambda,
            declared_a12_second: false,
        })
    }

    /// Parses the four entries from expression strings.
    pub fn parse(a11: &str, a12: &str, a21: &str, a22: &str, lambda: f64) -> Result<Self> {
        Self::new(
            Expr::parse(a11)?,
            Expr::parse(a12)?,
            Expr::parse(a21)?,
            Expr::parse(a22)?,
            lambda,
        )
    }

    pub fn identity() -> Self {
        Self::new(Expr::constant(1.0), Expr::zero(), Expr::zero(), Expr::constant(1.0), 1.0).unwrap()
    }

    /// Symmetric constant matrix `[[a11, b], [b, a22]]`.
    pub fn constant_symmetric(a11: f64, b: f64, a22: f64, lambda: f64) -> Result<Self> {
        Self::new(
            Expr::constant(a11),
            Expr::constant(b),
            Expr::constant(b),
            Expr::constant(a22),
            lambda,
        )
    }

    pub fn with_a12_partials(mut self, d1: Expr, d2: Expr) -> Result<Self> {
        check_spatial("d1_a12", &d1)?;
        check_spatial("d2_a12", &d2)?;
        self.d1_a12 = Some(d1);
        self.d2_a12 = Some(d2);
        Ok(self)
    }

    pub fn with_a21_partials(mut self, d1: Expr, d2: Expr) -> Result<Self> {
        check_spatial("d1_a21", &d1)?;
        check_spatial("d2_a21", &d2)?;
        self.d1_a21 = Some(d1);
        self.d2_a21 = Some(d2);
        Ok(self)
    }

    /// Declares `∂²x₁x₂ a12 ∈ L²` (implied automatically for constant a12).
    pub fn declare_a12_second_derivative(mut self) -> Self {
        self.declared_a12_second = true;
        self
    }

    pub fn flags(&self) -> CoefficientFlags {
        let a12_const = self.a12.is_constant();
        CoefficientFlags {
            a22_depends_only_on_x2: !self.a22.depends_on(Var::X1),
            hyp_ad1: a12_const || (self.d1_a12.is_some() && self.d2_a12.is_some()),
            hyp_a12_second: a12_const || self.declared_a12_second,
        }
    }

    pub fn is_symmetric(&self) -> bool {
        self.a12 == self.a21
    }

    /// `(a11, a12, a21, a22)` at a point.
    pub fn eval(&self, x1: f64, x2: f64) -> [f64; 4] {
        let env = Env::at(x1, x2);
        [
            self.a11.eval(&env),
            self.a12.eval(&env),
            self.a21.eval(&env),
            self.a22.eval(&env),
        ]
    }

    pub fn entry(&self, block: Block) -> &Expr {
        match block {
            Block::B11 => &self.a11,
            Block::B12 => &self.a12,
            Block::B21 => &self.a21,
            Block::B22 => &self.a22,
        }
    }

    /// Spot-checks ellipticity, boundedness, the x₂-only structure of a22 and
    /// declared partials on a `grid × grid` lattice of the closed domain.
    pub fn validate(&self, domain: &TensorDomain, grid: usize) -> Result<()> {
        let grid = grid.max(2);
        let mut worst = f64::INFINITY;
        let mut at = (0.0, 0.0);
        for (x1, x2) in lattice(domain, grid) {
            let a = self.eval(x1, x2);
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("coefficient at ({x1}, {x2})")));
            }
            let m = min_sym_eigenvalue(a);
            if m < worst {
                worst = m;
                at = (x1, x2);
            }
        }
        if worst < self.lambda * (1.0 - DECLARED_SLACK) {
            return Err(Error::HypothesisViolated(format!(
                "A(x)ξ·ξ ≥ λ|ξ|² fails: smallest eigenvalue of the symmetric part is {worst:.6e} at ({:.4}, {:.4}) but λ = {}",
                at.0, at.1, self.lambda
            )));
        }
        if !self.a22.depends_on(Var::X1) {
            // structural check suffices, but keep the sampled one honest
            let x1s = [domain.omega1.a, 0.5 * (domain.omega1.a + domain.omega1.b), domain.omega1.b];
            for k in 0..=16 {
                let x2 = domain.omega2.a + domain.omega2.length() * k as f64 / 16.0;
                let v0 = self.a22.eval_xy(x1s[0], x2);
                for &x1 in &x1s[1..] {
                    if (self.a22.eval_xy(x1, x2) - v0).abs() > 1e-12 * v0.abs().max(1.0) {
                        return Err(Error::HypothesisViolated("a22 varies with x1".into()));
                    }
                }
            }
        }
        let pairs = [
            (&self.a12, &self.d1_a12, Var::X1, "d1_a12"),
            (&self.a12, &self.d2_a12, Var::X2, "d2_a12"),
            (&self.a21, &self.d1_a21, Var::X1, "d1_a21"),
            (&self.a21, &self.d2_a21, Var::X2, "d2_a21"),
        ];
        for (f, d, var, name) in pairs {
            if let Some(d) = d {
                check_partial(domain, f, d, var, name)?;
            }
        }
        Ok(())
    }
}

fn check_spatial(name: &str, e: &Expr) -> Result<()> {
    if !e.deps().is_subset(VarSet::of(&[Var::X1, Var::X2])) {
        return Err(Error::invalid(format!(
            "{name} = `{e}` may only depend on x1 and x2"
        )));
    }
    Ok(())
}

/// Compares a declared partial derivative with central differences.
fn check_partial(domain: &TensorDomain, f: &Expr, d: &Expr, var: Var, name: &str) -> Result<()> {
    let h = 1e-5 * domain.omega1.length().min(domain.omega2.length());
    for (x1, x2) in lattice(domain, 9) {
        let (p, m) = match var {
            Var::X1 => (f.eval_xy(x1 + h, x2), f.eval_xy(x1 - h, x2)),
            _ => (f.eval_xy(x1, x2 + h), f.eval_xy(x1, x2 - h)),
        };
        let fd = (p - m) / (2.0 * h);
        let declared = d.eval_xy(x1, x2);
        if (fd - declared).abs() > 1e-5 * (1.0 + fd.abs()) {
            return Err(Error::HypothesisViolated(format!(
                "declared {name} = `{d}` disagrees with finite differences at ({x1:.4}, {x2:.4}): {declared:.6e} vs {fd:.6e}"
            )));
        }
    }
    Ok(())
}

fn min_sym_eigenvalue(a: [f64; 4]) -> f64 {
    let b = 0.5 * (a[1] + a[2]);
    let mean = 0.5 * (a[0] + a[3]);
    let half_diff = 0.5 * (a[0] - a[3]);
    mean - (half_diff * half_diff + b * b).sqrt()
}

fn spectral_norm(a: [f64; 4]) -> f64 {
    // largest singular value of a 2×2 matrix
    let s = a[0] * a[0] + a[1] * a[1] + a[2] * a[2] + a[3] * a[3];
    let det = a[0] * a[3] - a[1] * a[2];
    let disc = (s * s - 4.0 * det * det).max(0.0).sqrt();
    (0.5 * (s + disc)).sqrt()
}

/// Uniform `n × n` lattice on the closed rectangle.
pub fn lattice(domain: &TensorDomain, n: usize) -> impl Iterator<Item = (f64, f64)> + '_ {
    let n = n.max(2);
    let (a1, l1) = (domain.omega1.a, domain.omega1.length());
    let (a2, l2) = (domain.omega2.a, domain.omega2.length());
    (0..n).flat_map(move |i| {
        let x1 = a1 + l1 * i as f64 / (n - 1) as f64;
        (0..n).map(move |j| (x1, a2 + l2 * j as f64 / (n - 1) as f64))
    })
}

/// Sampled `sup |e|` over the closed domain.
pub fn sup_norm(e: &Expr, domain: &TensorDomain, grid: usize) -> Result<f64> {
    if let Some(c) = e.constant_value() {
        return Ok(c.abs());
    }
    let mut m: f64 = 0.0;
    for (x1, x2) in lattice(domain, grid) {
        let v = e.eval_xy(x1, x2);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("`{e}` at ({x1}, {x2})")));
        }
        m = m.max(v.abs());
    }
    Ok(m)
}

/// High-order quadrature of `∫Ω g(x)² dx`, then the square root.
pub fn l2_norm(e: &Expr, domain: &TensorDomain) -> Result<f64> {
    let q1 = Quadrature1D::uniform(domain.omega1.a, domain.omega1.b, 64, 8);
    let q2 = Quadrature1D::uniform(domain.omega2.a, domain.omega2.b, 64, 8);
    let mut acc = 0.0;
    for (x1, w1) in q1.points.iter().zip(&q1.weights) {
        let mut row = 0.0;
        for (x2, w2) in q2.points.iter().zip(&q2.weights) {
            let v = e.eval_xy(*x1, *x2);
            row += w2 * v * v;
        }
        acc += w1 * row;
    }
    if !acc.is_finite() {
        return Err(Error::NonFinite(format!("L2 norm of `{e}`")));
    }
    Ok(acc.sqrt())
}

/// The four blocks of the bilinear form `Σ a_pq ∂_q u ∂_p v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Block {
    B11,
    B12,
    B21,
    B22,
}

impl Block {
    pub const ALL: [Block; 4] = [Block::B11, Block::B12, Block::B21, Block::B22];
}

/// Multipliers `(ε², ε, ε, 1)` applied blockwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlockScaling {
    pub s11: f64,
    pub s12: f64,
    pub s21: f64,
    pub s22: f64,
}

impl BlockScaling {
    pub fn get(&self, b: Block) -> f64 {
        match b {
            Block::B11 => self.s11,
            Block::B12 => self.s12,
            Block::B21 => self.s21,
            Block::B22 => self.s22,
        }
    }

    /// The `ε → 0` limit: only the 22 block survives.
    pub fn limit() -> Self {
        BlockScaling {
            s11: 0.0,
            s12: 0.0,
            s21: 0.0,
            s22: 1.0,
        }
    }

    /// `A_ε ξ·ξ` for a given matrix value.
    pub fn quadratic_form(&self, a: [f64; 4], xi: [f64; 2]) -> f64 {
        self.s11 * a[0] * xi[0] * xi[0]
            + self.s12 * a[1] * xi[1] * xi[0]
            + self.s21 * a[2] * xi[0] * xi[1]
            + self.s22 * a[3] * xi[1] * xi[1]
    }
}

pub fn scale_matrix(eps: f64) -> Result<BlockScaling> {
    check_epsilon(eps)?;
    Ok(BlockScaling {
        s11: eps * eps,
        s12: eps,
        s21: eps,
        s22: 1.0,
    })
}

pub fn check_epsilon(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::invalid(format!("epsilon must lie in (0,1], got {eps}")));
    }
    Ok(())
}

/// A user-declared reaction term written in the variable `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct CustomReaction {
    pub beta: Expr,
    pub lipschitz: f64,
    pub growth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReactionSpec {
    Zero,
    Linear(f64),
    Custom(CustomReaction),
}

impl ReactionSpec {
    pub fn linear(mu: f64) -> Result<Self> {
        if !(mu.is_finite() && mu > 0.0) {
            return Err(Error::invalid(format!("linear reaction needs μ > 0, got {mu}")));
        }
        Ok(ReactionSpec::Linear(mu))
    }

    pub fn custom(beta: &str, lipschitz: f64, growth: f64) -> Result<Self> {
        let beta = Expr::parse(beta)?;
        if !beta.deps().is_subset(VarSet::of(&[Var::S])) {
            return Err(Error::invalid(format!("reaction `{beta}` may only depend on s")));
        }
        if !(lipschitz.is_finite() && lipschitz >= 0.0 && growth.is_finite() && growth >= 0.0) {
            return Err(Error::invalid("reaction Lipschitz and growth constants must be finite and >= 0"));
        }
        Ok(ReactionSpec::Custom(CustomReaction {
            beta,
            lipschitz,
            growth,
        }))
    }

    /// `β(s) = atan(s)`: Lipschitz 1, growth 1.
    pub fn arctan() -> Self {
        Self::custom("atan(s)", 1.0, 1.0).unwrap()
    }

    pub fn eval(&self, s: f64) -> f64 {
        match self {
            ReactionSpec::Zero => 0.0,
            ReactionSpec::Linear(mu) => mu * s,
            ReactionSpec::Custom(c) => c.beta.eval(&Env {
                s,
                ..Default::default()
            }),
        }
    }

    pub fn lipschitz(&self) -> f64 {
        match self {
            ReactionSpec::Zero => 0.0,
            ReactionSpec::Linear(mu) => *mu,
            ReactionSpec::Custom(c) => c.lipschitz,
        }
    }

    /// `M` with `|β(s)| ≤ M(1 + |s|)`.
    pub fn growth(&self) -> f64 {
        match self {
            ReactionSpec::Zero => 0.0,
            ReactionSpec::Linear(mu) => *mu,
            ReactionSpec::Custom(c) => c.growth,
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            ReactionSpec::Zero => true,
            ReactionSpec::Linear(_) => false,
            ReactionSpec::Custom(c) => c.beta.is_zero(),
        }
    }

    pub fn label(&self) -> String {
        match self {
            ReactionSpec::Zero => "zero".into(),
            ReactionSpec::Linear(mu) => format!("linear({mu})"),
            ReactionSpec::Custom(c) => format!("custom({})", c.beta),
        }
    }

    /// Checks `β(0) = 0`, monotonicity, the growth bound and the declared
    /// Lipschitz constant on a sign-spanning grid.
    pub fn validate(&self) -> Result<()> {
        let ReactionSpec::Custom(c) = self else {
            return Ok(());
        };
        let b0 = self.eval(0.0);
        if b0.abs() > 1e-14 {
            return Err(Error::HypothesisViolated(format!("β(0) = {b0:e}, expected 0")));
        }
        let n = 4001;
        let r = 50.0;
        let mut prev_s = -r;
        let mut prev = self.eval(prev_s);
        for k in 1..n {
            let s = -r + 2.0 * r * k as f64 / (n - 1) as f64;
            let v = self.eval(s);
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("β({s})")));
            }
            if v < prev - 1e-14 * prev.abs().max(1.0) {
                return Err(Error::HypothesisViolated(format!(
                    "β is decreasing between s = {prev_s} and s = {s}"
                )));
            }
            if (v - prev).abs() > c.lipschitz * (s - prev_s) * (1.0 + DECLARED_SLACK) + 1e-14 {
                return Err(Error::HypothesisViolated(format!(
                    "β exceeds the declared Lipschitz constant {} near s = {s}",
                    c.lipschitz
                )));
            }
            if v.abs() > c.growth * (1.0 + s.abs()) * (1.0 + DECLARED_SLACK) + 1e-14 {
                return Err(Error::HypothesisViolated(format!(
                    "|β(s)| ≤ M(1+|s|) fails at s = {s} with M = {}",
                    c.growth
                )));
            }
            prev = v;
            prev_s = s;
        }
        Ok(())
    }
}

/// Source term `f` with optional x₁-derivative and slice-trace flag.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceField {
    pub f: Expr,
    pub d1_f: Option<Expr>,
    /// `f(·, x₂) ∈ H¹₀(ω₁)`: traces at both x₁-endpoints vanish.
    pub slices_in_h10_omega1: bool,
}

impl SourceField {
    /// Source with the trace flag detected by sampling the x₁-endpoints.
    pub fn new(f: Expr, domain: &TensorDomain) -> Result<Self> {
        check_spatial_or_time("f", &f)?;
        let flag = traces_vanish(&f, domain);
        Ok(SourceField {
            f,
            d1_f: None,
            slices_in_h10_omega1: flag,
        })
    }

    pub fn parse(f: &str, domain: &TensorDomain) -> Result<Self> {
        Self::new(Expr::parse(f)?, domain)
    }

    pub fn zero() -> Self {
        SourceField {
            f: Expr::zero(),
            d1_f: Some(Expr::zero()),
            slices_in_h10_omega1: true,
        }
    }

    pub fn with_d1(mut self, d1: Expr) -> Result<Self> {
        check_spatial_or_time("d1_f", &d1)?;
        self.d1_f = Some(d1);
        Ok(self)
    }

    pub fn with_slices_flag(mut self, flag: bool) -> Self {
        self.slices_in_h10_omega1 = flag;
        self
    }

    /// `∇X₁f ∈ L²`: the x₁-derivative is declared or vanishes identically.
    pub fn grad_x1_in_l2(&self) -> bool {
        self.d1_f.is_some() || !self.f.depends_on(Var::X1)
    }

    pub fn d1(&self) -> Option<Expr> {
        if let Some(d) = &self.d1_f {
            Some(d.clone())
        } else if !self.f.depends_on(Var::X1) {
            Some(Expr::zero())
        } else {
            None
        }
    }

    pub fn is_time_dependent(&self) -> bool {
        self.f.depends_on(Var::T)
    }

    /// Spot-checks the declared flags and derivative.
    pub fn validate(&self, domain: &TensorDomain) -> Result<()> {
        if self.slices_in_h10_omega1 && !self.is_time_dependent() && !traces_vanish(&self.f, domain) {
            return Err(Error::HypothesisViolated(format!(
                "f = `{}` is declared to vanish at the x1-endpoints but does not",
                self.f
            )));
        }
        if let Some(d) = &self.d1_f {
            if !self.is_time_dependent() {
                check_partial(domain, &self.f, d, Var::X1, "d1_f")?;
            }
        }
        Ok(())
    }
}

fn check_spatial_or_time(name: &str, e: &Expr) -> Result<()> {
    if !e.deps().is_subset(VarSet::of(&[Var::X1, Var::X2, Var::T])) {
        return Err(Error::invalid(format!("{name} = `{e}` may only depend on x1, x2 and t")));
    }
    Ok(())
}

fn traces_vanish(f: &Expr, domain: &TensorDomain) -> bool {
    (0..=64).all(|k| {
        let x2 = domain.omega2.a + domain.omega2.length() * k as f64 / 64.0;
        let scale = 1.0 + f.eval_xy(0.5 * (domain.omega1.a + domain.omega1.b), x2).abs();
        [domain.omega1.a, domain.omega1.b]
            .iter()
            .all(|&x1| f.eval_xy(x1, x2).abs() <= 1e-12 * scale)
    })
}

/// Where the sup-norms of the a12 partials came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PartialsSource {
    ConstantCoefficient,
    Declared,
    /// Undeclared: estimated by central differences; the bound verdicts that
    /// need them are refused.
    FiniteDifference,
}

/// Explicit constants built from `A`, `λ`, `Ω`, `f` and `β`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstantLedger {
    pub lambda: f64,
    pub c_omega1: f64,
    pub c_omega2: f64,
    pub c_omega: f64,
    pub area: f64,
    pub sup_a11: f64,
    pub sup_a12: f64,
    pub sup_a21: f64,
    pub sup_a22: f64,
    /// `sup_x |A(x)|₂` (spectral norm).
    pub sup_a: f64,
    pub sup_d1_a12: f64,
    pub sup_d2_a12: f64,
    pub partials: PartialsSource,
    pub c: f64,
    pub c_prime: f64,
    pub c_second: f64,
    pub c1: f64,
    pub c2: f64,
    /// `√q C²_{ω₂}/λ`, the constant actually reached by the argument.
    pub c3: f64,
    /// `√q C_{ω₂}/λ`, the constant as stated.
    pub c3_statement: f64,
    /// `‖A22‖∞/λ`
    pub cea_limit_linear: f64,
    /// `‖A‖∞/λ`; divide by ε² for the perturbed estimate.
    pub cea_perturbed_linear: f64,
    pub cea_limit: f64,
    /// Divide by ε² for the perturbed estimate.
    pub cea_perturbed: f64,
    pub growth_m: f64,
    pub f_l2: f64,
    pub grad_x1_f_l2: Option<f64>,
    pub sup_grid: usize,
}

/// One ledger row for human-readable output.
#[derive(Debug, Clone, Serialize)]
pub struct LedgerEntry {
    pub name: &'static str,
    pub value: f64,
    pub formula: &'static str,
}

impl ConstantLedger {
    pub fn entries(&self) -> Vec<LedgerEntry> {
        let e = |name, value, formula| LedgerEntry { name, value, formula };
        vec![
            e("lambda", self.lambda, "declared ellipticity constant"),
            e("C_omega1", self.c_omega1, "L1/pi"),
            e("C_omega2", self.c_omega2, "L2/pi"),
            e("C_Omega", self.c_omega, "(C_omega1^-2 + C_omega2^-2)^(-1/2)"),
            e("|Omega|", self.area, "L1*L2"),
            e("|A11|inf", self.sup_a11, "sampled sup |a11|"),
            e("|A12|inf", self.sup_a12, "sampled sup |a12|"),
            e("|A21|inf", self.sup_a21, "sampled sup |a21|"),
            e("|A22|inf", self.sup_a22, "sampled sup |a22|"),
            e("|A|inf", self.sup_a, "sampled sup of the spectral norm of A(x)"),
            e("|d1 a12|inf", self.sup_d1_a12, "sampled sup |d a12/d x1|"),
            e("|d2 a12|inf", self.sup_d2_a12, "sampled sup |d a12/d x2|"),
            e("C", self.c, "(|A21|^2 + |A11|^2)/(2 lambda)"),
            e(
                "C'",
                self.c_prime,
                "(3 (C_omega2 |d2 a12| (N-q))^2 + 3 (|a12| (N-q))^2)/lambda",
            ),
            e("C''", self.c_second, "3 (q C_omega2 |d1 a12|)^2/lambda"),
            e("C1", self.c1, "(4 (C + C')/lambda)^(1/2)"),
            e("C2", self.c2, "2 sqrt(C'') C_omega2/lambda^(3/2)"),
            e("C3", self.c3, "sqrt(q) C_omega2^2/lambda"),
            e("C3_statement", self.c3_statement, "sqrt(q) C_omega2/lambda"),
            e("Cea_limit_linear", self.cea_limit_linear, "|A22|inf/lambda"),
            e("Cea_perturbed_linear", self.cea_perturbed_linear, "|A|inf/lambda (times eps^-2)"),
            e(
                "Cea_limit",
                self.cea_limit,
                "sqrt([2 M C_omega2 (|Omega|^1/2 + C_omega2^2 |f|/lambda) + |A22|inf 2 C_omega2 |f|/lambda]/lambda)",
            ),
            e(
                "Cea_perturbed",
                self.cea_perturbed,
                "sqrt([2 M C_Omega (|Omega|^1/2 + C_Omega^2 |f|/lambda) + |A|inf 2 C_Omega |f|/lambda]/lambda) (times eps^-2)",
            ),
            e("M", self.growth_m, "growth constant of beta"),
            e("|f|", self.f_l2, "L2 norm of f"),
            e(
                "|grad_x1 f|",
                self.grad_x1_f_l2.unwrap_or(f64::NAN),
                "L2 norm of d f/d x1",
            ),
        ]
    }

    /// `C1·C3·‖∇X₁f‖ + C2·‖f‖`, the factor multiplying ε in the global rate.
    pub fn rate_constant(&self) -> Option<f64> {
        self.grad_x1_f_l2
            .map(|g| self.c1 * self.c3 * g + self.c2 * self.f_l2)
    }
}

/// Sampled sup of the a12 partial in direction `var`, from the declared
/// expression or central differences.
fn partial_sup(
    a12: &Expr,
    declared: &Option<Expr>,
    var: Var,
    domain: &TensorDomain,
    grid: usize,
) -> Result<f64> {
    if a12.is_constant() {
        return Ok(0.0);
    }
    if let Some(d) = declared {
        return sup_norm(d, domain, grid);
    }
    let h = 1e-6 * domain.omega1.length().min(domain.omega2.length());
    let mut m: f64 = 0.0;
    for (x1, x2) in lattice(domain, grid.min(256)) {
        let v = match var {
            Var::X1 => (a12.eval_xy(x1 + h, x2) - a12.eval_xy(x1 - h, x2)) / (2.0 * h),
            _ => (a12.eval_xy(x1, x2 + h) - a12.eval_xy(x1, x2 - h)) / (2.0 * h),
        };
        if !v.is_finite() {
            return Err(Error::NonFinite("finite-difference partial of a12".into()));
        }
        m = m.max(v.abs());
    }
    Ok(m)
}

/// Builds the ledger by transcribing every constant literally, with `q = 1`
/// and `N = 2`. Sup-norms are sampled on a `sup_grid × sup_grid` lattice.
pub fn compute_constants(
    a: &CoefficientField,
    domain: &TensorDomain,
    f: &SourceField,
    beta: &ReactionSpec,
    sup_grid: usize,
) -> Result<ConstantLedger> {
    let q = 1.0_f64;
    let n_minus_q = 1.0_f64;
    let lambda = a.lambda;
    let c_omega1 = domain.c_omega1();
    let c_omega2 = domain.c_omega2();
    let c_omega = domain.c_omega();
    let area = domain.area();

    let sup_a11 = sup_norm(&a.a11, domain, sup_grid)?;
    let sup_a12 = sup_norm(&a.a12, domain, sup_grid)?;
    let sup_a21 = sup_norm(&a.a21, domain, sup_grid)?;
    let sup_a22 = sup_norm(&a.a22, domain, sup_grid)?;
    let mut sup_a: f64 = 0.0;
    for (x1, x2) in lattice(domain, sup_grid) {
        sup_a = sup_a.max(spectral_norm(a.eval(x1, x2)));
    }
    if !sup_a.is_finite() {
        return Err(Error::NonFinite("sup norm of A".into()));
    }
    let sup_d1_a12 = partial_sup(&a.a12, &a.d1_a12, Var::X1, domain, sup_grid)?;
    let sup_d2_a12 = partial_sup(&a.a12, &a.d2_a12, Var::X2, domain, sup_grid)?;
    let partials = if a.a12.is_constant() {
        PartialsSource::ConstantCoefficient
    } else if a.d1_a12.is_some() && a.d2_a12.is_some() {
        PartialsSource::Declared
    } else {
        PartialsSource::FiniteDifference
    };

    let c = (sup_a21.powi(2) + sup_a11.powi(2)) / (2.0 * lambda);
    let c_prime = (3.0 * (c_omega2 * sup_d2_a12 * n_minus_q).powi(2)
        + 3.0 * (sup_a12 * n_minus_q).powi(2))
        / lambda;
    let c_second = 3.0 * (q * c_omega2 * sup_d1_a12).powi(2) / lambda;
    let c1 = (4.0 * (c + c_prime) / lambda).sqrt();
    let c2 = 2.0 * c_second.sqrt() * c_omega2 / lambda.powf(1.5);
    let c3 = q.sqrt() * c_omega2 * c_omega2 / lambda;
    let c3_statement = q.sqrt() * c_omega2 / lambda;

    let spatial_f = !f.is_time_dependent();
    let f_l2 = if spatial_f { l2_norm(&f.f, domain)? } else { f64::NAN };
    let grad_x1_f_l2 = match f.d1() {
        Some(d) if spatial_f => Some(l2_norm(&d, domain)?),
        _ => None,
    };
    let m = beta.growth();
    let sqrt_area = area.sqrt();
    let cea_limit_sq = (2.0 * m * c_omega2 * (sqrt_area + c_omega2 * c_omega2 * f_l2 / lambda)
        + sup_a22 * 2.0 * c_omega2 * f_l2 / lambda)
        / lambda;
    let cea_perturbed_sq = (2.0 * m * c_omega * (sqrt_area + c_omega * c_omega * f_l2 / lambda)
        + sup_a * 2.0 * c_omega * f_l2 / lambda)
        / lambda;

    let ledger = ConstantLedger {
        lambda,
        c_omega1,
        c_omega2,
        c_omega,
        area,
        sup_a11,
        sup_a12,
        sup_a21,
        sup_a22,
        sup_a,
        sup_d1_a12,
        sup_d2_a12,
        partials,
        c,
        c_prime,
        c_second,
        c1,
        c2,
        c3,
        c3_statement,
        cea_limit_linear: sup_a22 / lambda,
        cea_perturbed_linear: sup_a / lambda,
        cea_limit: cea_limit_sq.sqrt(),
        cea_perturbed: cea_perturbed_sq.sqrt(),
        growth_m: m,
        f_l2,
        grad_x1_f_l2,
        sup_grid,
    };
    let finite = [
        ledger.c, ledger.c_prime, ledger.c_second, ledger.c1, ledger.c2, ledger.c3,
        ledger.sup_a, ledger.sup_a22,
    ];
    if finite.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("constant ledger".into()));
    }
    Ok(ledger)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn sin_sin() -> SourceField {
        let d = TensorDomain::unit_pi_square();
        SourceField::parse("sin(x1)*sin(x2)", &d)
            .unwrap()
            .with_d1(Expr::parse("cos(x1)*sin(x2)").unwrap())
            .unwrap()
    }

    #[test]
    fn scaling_multipliers() {
        assert_eq!(
            scale_matrix(1.0).unwrap(),
            BlockScaling { s11: 1.0, s12: 1.0, s21: 1.0, s22: 1.0 }
        );
        assert_eq!(
            scale_matrix(0.5).unwrap(),
            BlockScaling { s11: 0.25, s12: 0.5, s21: 0.5, s22: 1.0 }
        );
        for bad in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(scale_matrix(bad).is_err());
        }
    }

    #[test]
    fn scaled_form_tends_to_a22() {
        let a = [2.0, 0.3, 0.4, 1.7];
        let xi = [0.0, 1.0];
        let mut last = f64::INFINITY;
        for k in 0..20 {
            let eps = 0.5f64.powi(k);
            let v = scale_matrix(eps).unwrap().quadratic_form(a, xi);
            last = (v - a[3]).abs();
        }
        assert!(last < 1e-12);
        let generic = [1.0, 2.0];
        let v = scale_matrix(1e-6).unwrap().quadratic_form(a, generic);
        assert!((v - BlockScaling::limit().quadratic_form(a, generic)).abs() < 1e-5);
    }

    #[test]
    fn identity_ledger() {
        let d = TensorDomain::unit_pi_square();
        let l = compute_constants(&CoefficientField::identity(), &d, &sin_sin(), &ReactionSpec::Zero, 64).unwrap();
        assert!((l.c_omega2 - 1.0).abs() < 1e-15);
        assert!((l.c - 0.5).abs() < 1e-15);
        assert_eq!(l.c_prime, 0.0);
        assert_eq!(l.c_second, 0.0);
        assert!((l.c1 - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(l.c2, 0.0);
        assert!((l.c3 - 1.0).abs() < 1e-15);
        assert!((l.cea_limit_linear - 1.0).abs() < 1e-15);
        assert!((l.f_l2 - PI / 2.0).abs() < 1e-12);
        assert!((l.grad_x1_f_l2.unwrap() - PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn constant_off_diagonal_ledger() {
        let d = TensorDomain::unit_pi_square();
        let a = CoefficientField::constant_symmetric(1.0, 0.3, 1.0, 0.7).unwrap();
        a.validate(&d, 32).unwrap();
        let l = compute_constants(&a, &d, &sin_sin(), &ReactionSpec::Zero, 64).unwrap();
        assert!((l.c - 1.09 / 1.4).abs() < 1e-14);
        assert_eq!(l.c_second, 0.0);
        assert!((l.c_prime - 3.0 * 0.09 / 0.7).abs() < 1e-14);
        assert!((l.sup_a - 1.3).abs() < 1e-14);
        assert_eq!(l.partials, PartialsSource::ConstantCoefficient);
    }

    #[test]
    fn variable_off_diagonal_ledger() {
        let d = TensorDomain::unit_pi_square();
        let a = CoefficientField::parse("1", "0.2*sin(x1)*sin(x2)", "0.2*sin(x1)*sin(x2)", "1", 0.8)
            .unwrap()
            .with_a12_partials(
                Expr::parse("0.2*cos(x1)*sin(x2)").unwrap(),
                Expr::parse("0.2*sin(x1)*cos(x2)").unwrap(),
            )
            .unwrap()
            .declare_a12_second_derivative();
        a.validate(&d, 64).unwrap();
        let flags = a.flags();
        assert!(flags.a22_depends_only_on_x2 && flags.hyp_ad1 && flags.hyp_a12_second);
        let l = compute_constants(&a, &d, &sin_sin(), &ReactionSpec::Zero, DEFAULT_SUP_GRID).unwrap();
        // the lattice includes the maximizers of |sin| and |cos|
        assert!((l.c - (0.04 + 1.0) / 1.6).abs() < 1e-4);
        assert!((l.c_prime - (3.0 * 0.04 + 3.0 * 0.04) / 0.8).abs() < 1e-4);
        assert!((l.c_second - 3.0 * 0.04 / 0.8).abs() < 1e-4);
        assert!((l.c2 - 2.0 * l.c_second.sqrt() / 0.8f64.powf(1.5)).abs() < 1e-12);
    }

    #[test]
    fn sup_norms_stable_under_refinement() {
        let d = TensorDomain::unit_pi_square();
        let e = Expr::parse("0.2*sin(x1)*sin(x2) + 0.1*cos(3*x1)").unwrap();
        let coarse = sup_norm(&e, &d, 256).unwrap();
        let fine = sup_norm(&e, &d, 512).unwrap();
        assert!((coarse - fine).abs() < 0.01 * fine);
    }

    #[test]
    fn ellipticity_violation_detected() {
        let d = TensorDomain::unit_pi_square();
        let a = CoefficientField::constant_symmetric(1.0, 0.3, 1.0, 0.9).unwrap();
        assert!(matches!(a.validate(&d, 16), Err(Error::HypothesisViolated(_))));
    }

    #[test]
    fn a22_x1_dependence_flagged() {
        let a = CoefficientField::parse("1", "0", "0", "1 + 0.1*x1", 1.0).unwrap();
        assert!(!a.flags().a22_depends_only_on_x2);
        let b = CoefficientField::parse("1", "0", "0", "1 + x2^2/10", 1.0).unwrap();
        assert!(b.flags().a22_depends_only_on_x2);
    }

    #[test]
    fn wrong_declared_partial_rejected() {
        let d = TensorDomain::unit_pi_square();
        let a = CoefficientField::parse("1", "0.2*sin(x1)", "0.2*sin(x1)", "1", 0.8)
            .unwrap()
            .with_a12_partials(Expr::parse("0.2*sin(x1)").unwrap(), Expr::zero())
            .unwrap();
        assert!(a.validate(&d, 16).is_err());
    }

    #[test]
    fn undeclared_partials_fall_back_to_differences() {
        let d = TensorDomain::unit_pi_square();
        let a = CoefficientField::parse("1", "0.2*sin(x1)*sin(x2)", "0.2*sin(x1)*sin(x2)", "1", 0.8).unwrap();
        assert!(!a.flags().hyp_ad1);
        let l = compute_constants(&a, &d, &sin_sin(), &ReactionSpec::Zero, 256).unwrap();
        assert_eq!(l.partials, PartialsSource::FiniteDifference);
        assert!((l.sup_d1_a12 - 0.2).abs() < 1e-4);
    }

    #[test]
    fn source_flags() {
        let d = TensorDomain::unit_pi_square();
        let good = SourceField::parse("sin(x1)*sin(x2)", &d).unwrap();
        assert!(good.slices_in_h10_omega1);
        assert!(!good.grad_x1_in_l2());
        let bad = SourceField::parse("cos(x1)*sin(x2)", &d).unwrap();
        assert!(!bad.slices_in_h10_omega1);
        let declared = bad.clone().with_slices_flag(true);
        assert!(declared.validate(&d).is_err());
        assert!(SourceField::parse("sin(x2)", &d).unwrap().grad_x1_in_l2());
        assert!(SourceField::parse("s*x1", &d).is_err());
    }

    #[test]
    fn reaction_validation() {
        ReactionSpec::arctan().validate().unwrap();
        ReactionSpec::custom("s", 1.0, 1.0).unwrap().validate().unwrap();
        ReactionSpec::custom("0*atan(s)", 0.0, 0.0).unwrap().validate().unwrap();
        assert!(ReactionSpec::custom("-s", 1.0, 1.0).unwrap().validate().is_err());
        assert!(ReactionSpec::custom("atan(s) + 1", 1.0, 2.0).unwrap().validate().is_err());
        assert!(ReactionSpec::custom("2*s", 1.0, 2.0).unwrap().validate().is_err());
        assert!(ReactionSpec::custom("s^3", 1e9, 1.0).unwrap().validate().is_err());
        assert!(ReactionSpec::custom("x1*s", 1.0, 1.0).is_err());
        assert!(ReactionSpec::linear(0.0).is_err());
    }

    #[test]
    fn cea_constants_for_identity() {
        let d = TensorDomain::unit_pi_square();
        let f = sin_sin();
        let l = compute_constants(&CoefficientField::identity(), &d, &f, &ReactionSpec::arctan(), 64).unwrap();
        let fl2 = PI / 2.0;
        let expected = (2.0 * (PI + fl2) + 2.0 * fl2).sqrt();
        assert!((l.cea_limit - expected).abs() < 1e-12);
        assert!(l.cea_perturbed > 0.0);
    }

    proptest! {
        #[test]
        fn ledger_matches_closed_form_for_constant_a(
            a11 in 0.5f64..3.0,
            b in -0.4f64..0.4,
            a22 in 0.5f64..3.0,
            l1 in 0.5f64..5.0,
            l2 in 0.5f64..5.0,
        ) {
            let lambda = min_sym_eigenvalue([a11, b, b, a22]);
            prop_assume!(lambda > 0.05);
            let d = TensorDomain::new(Interval::new(0.0, l1).unwrap(), Interval::new(0.0, l2).unwrap());
            let a = CoefficientField::constant_symmetric(a11, b, a22, lambda).unwrap();
            let l = compute_constants(&a, &d, &SourceField::zero(), &ReactionSpec::Zero, 8).unwrap();
            let c = (b * b + a11 * a11) / (2.0 * lambda);
            let cp = 3.0 * b * b / lambda;
            prop_assert!((l.c - c).abs() < 1e-12 * c.max(1.0));
            prop_assert!((l.c_prime - cp).abs() < 1e-12 * cp.max(1.0));
            prop_assert_eq!(l.c_second, 0.0);
            prop_assert!((l.c1 - (4.0 * (c + cp) / lambda).sqrt()).abs() < 1e-12 * l.c1.max(1.0));
            prop_assert!((l.c3 - (l2 / PI).powi(2) / lambda).abs() < 1e-12 * l.c3.max(1.0));
        }

        #[test]
        fn c_prime_monotone_in_a12(b1 in 0.0f64..0.4, b2 in 0.0f64..0.4) {
            let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
            let d = TensorDomain::unit_pi_square();
            let ledger = |b: f64| {
                let a = CoefficientField::constant_symmetric(1.0, b, 1.0, 0.5).unwrap();
                compute_constants(&a, &d, &SourceField::zero(), &ReactionSpec::Zero, 8).unwrap()
            };
            prop_assert!(ledger(hi).c_prime >= ledger(lo).c_prime);
        }
    }

    use crate::tensor_spaces::Interval;
}
