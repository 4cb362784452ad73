//! Galerkin solves of the perturbed and limit problems, linear and
//! semilinear, plus the a-priori bound checks.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::assembly::{AssembledProblem, NormMatrices};
use crate::coefficients::{
    check_epsilon, scale_matrix, BlockScaling, CoefficientField, ConstantLedger, ReactionSpec,
    SourceField,
};
use crate::error::{Error, Result};
use crate::field::{eval_on_grid, integrate_against_basis, l2_norm_grid};
use crate::linsolve::{solve, PreparedSystem, SolverConfig};
use crate::sparse::{norm2, CsrMatrix};
use crate::tensor_spaces::{Component, GalerkinSpace, TensorDomain};

/// Tolerance for the linear solves behind every elliptic problem.
const LINEAR_TOL: f64 = 1e-12;

/// Relative slack in bound verdicts, so that equality cases pass.
pub const BOUND_SLACK: f64 = 1e-9;

/// The perturbation parameter, or the limit problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Epsilon {
    Value(f64),
    Limit,
}

impl Epsilon {
    pub fn new(eps: f64) -> Result<Self> {
        check_epsilon(eps)?;
        Ok(Epsilon::Value(eps))
    }

    pub fn scaling(&self) -> BlockScaling {
        match self {
            Epsilon::Value(e) => scale_matrix(*e).expect("validated epsilon"),
            Epsilon::Limit => BlockScaling::limit(),
        }
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            Epsilon::Value(e) => Some(*e),
            Epsilon::Limit => None,
        }
    }

    pub fn is_limit(&self) -> bool {
        matches!(self, Epsilon::Limit)
    }
}

impl fmt::Display for Epsilon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Epsilon::Value(e) => write!(f, "{e}"),
            Epsilon::Limit => f.write_str("LIMIT"),
        }
    }
}

/// A full problem statement: domain, coefficients, source, reaction and ε.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub domain: TensorDomain,
    pub a: CoefficientField,
    pub f: SourceField,
    pub beta: ReactionSpec,
    pub epsilon: Epsilon,
}

impl ProblemSpec {
    pub fn new(
        domain: TensorDomain,
        a: CoefficientField,
        f: SourceField,
        beta: ReactionSpec,
        epsilon: Epsilon,
    ) -> Result<Self> {
        if let Epsilon::Value(e) = epsilon {
            check_epsilon(e)?;
        }
        Ok(ProblemSpec { domain, a, f, beta, epsilon })
    }

    pub fn with_epsilon(&self, epsilon: Epsilon) -> Result<Self> {
        Self::new(self.domain, self.a.clone(), self.f.clone(), self.beta.clone(), epsilon)
    }

    /// Spot-checks every hypothesis that can be sampled.
    pub fn validate(&self, grid: usize) -> Result<()> {
        self.a.validate(&self.domain, grid)?;
        self.beta.validate()?;
        self.f.validate(&self.domain)
    }
}

/// Picard iteration knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct PicardOptions {
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    pub initial: Option<Vec<f64>>,
}

impl Default for PicardOptions {
    fn default() -> Self {
        PicardOptions {
            damping: 1.0,
            tol: 1e-9,
            max_iter: 200,
            max_halvings: 6,
            initial: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GalerkinSolution {
    pub space: Arc<GalerkinSpace>,
    pub coeffs: Vec<f64>,
    pub kind: Epsilon,
    pub picard_iterations: usize,
    /// `‖K u + B(u) − F‖ / ‖F‖` (absolute when `F = 0`).
    pub final_residual: f64,
    /// Residual after each Picard iteration; a single entry for linear solves.
    pub residual_history: Vec<f64>,
    pub linear_iterations: usize,
}

/// Everything about a problem that does not depend on ε, assembled once on
/// a space.
pub struct DiscreteProblem {
    pub space: Arc<GalerkinSpace>,
    pub a: CoefficientField,
    pub f: SourceField,
    pub beta: ReactionSpec,
    pub assembled: AssembledProblem,
}

impl DiscreteProblem {
    pub fn new(
        space: Arc<GalerkinSpace>,
        a: CoefficientField,
        f: SourceField,
        beta: ReactionSpec,
    ) -> Result<Self> {
        let assembled = AssembledProblem::new(&space, &a, &f)?;
        Ok(DiscreteProblem { space, a, f, beta, assembled })
    }

    pub fn from_spec(spec: &ProblemSpec, space: Arc<GalerkinSpace>) -> Result<Self> {
        if spec.domain != space.domain {
            return Err(Error::invalid("problem and space live on different domains"));
        }
        Self::new(space, spec.a.clone(), spec.f.clone(), spec.beta.clone())
    }

    pub fn norms(&self) -> &NormMatrices {
        &self.assembled.norms
    }

    pub fn load(&self) -> &[f64] {
        &self.assembled.load
    }

    /// Diffusion matrix `K_ε` or `K22`.
    pub fn stiffness(&self, eps: Epsilon) -> CsrMatrix {
        self.assembled.scaled(&eps.scaling())
    }

    /// Dispatches on the reaction kind.
    pub fn solve(&self, eps: Epsilon) -> Result<GalerkinSolution> {
        match self.beta {
            ReactionSpec::Custom(_) => self.solve_semilinear(eps, &PicardOptions::default()),
            _ => self.solve_linear(eps),
        }
    }

    /// `(μM + K) u = F` with `μ = 0` for the zero reaction.
    pub fn solve_linear(&self, eps: Epsilon) -> Result<GalerkinSolution> {
        self.solve_linear_with_load(eps, self.load())
    }

    pub fn solve_linear_with_load(&self, eps: Epsilon, load: &[f64]) -> Result<GalerkinSolution> {
        let mu = match self.beta {
            ReactionSpec::Zero => 0.0,
            ReactionSpec::Linear(mu) => mu,
            ReactionSpec::Custom(_) => {
                return Err(Error::invalid("custom reaction: use solve_semilinear"))
            }
        };
        let k = self.system_matrix(eps, mu);
        let r = solve(&k, load, &SolverConfig::with_tol(LINEAR_TOL))?;
        let scale = norm2(load);
        let rel = if scale > 0.0 { r.residual_norm / scale } else { r.residual_norm };
        Ok(GalerkinSolution {
            space: self.space.clone(),
            coeffs: r.x,
            kind: eps,
            picard_iterations: 0,
            final_residual: rel,
            residual_history: vec![rel],
            linear_iterations: r.iterations,
        })
    }

    fn system_matrix(&self, eps: Epsilon, mu: f64) -> CsrMatrix {
        let k = self.stiffness(eps);
        if mu == 0.0 {
            k
        } else {
            CsrMatrix::linear_combination(&[(1.0, &k), (mu, self.assembled.mass())])
                .expect("shared pattern")
        }
    }

    /// Galerkin vector of `∫ β(u_h) φ dx`.
    pub fn reaction_vector(&self, coeffs: &[f64]) -> Vec<f64> {
        let g = self.reaction_grid(coeffs);
        integrate_against_basis(&self.space, &g, Component::Value, Component::Value)
    }

    fn reaction_grid(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut g = eval_on_grid(&self.space, coeffs, Component::Value, Component::Value);
        g.iter_mut().for_each(|v| *v = self.beta.eval(*v));
        g
    }

    /// `‖β(u_h)‖_{L²}` by quadrature.
    pub fn reaction_norm(&self, coeffs: &[f64]) -> f64 {
        l2_norm_grid(&self.space, &self.reaction_grid(coeffs))
    }

    /// `‖K u + B(u) − F‖`, relative to `‖F‖` when it is nonzero.
    pub fn nonlinear_residual(&self, k: &CsrMatrix, coeffs: &[f64]) -> f64 {
        let ku = k.mul_vec(coeffs);
        let b = self.reaction_vector(coeffs);
        let f = self.load();
        let r: f64 = ku
            .iter()
            .zip(&b)
            .zip(f)
            .map(|((a, b), f)| (a + b - f).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = norm2(f);
        if scale > 0.0 {
            r / scale
        } else {
            r
        }
    }

    /// Shifted, damped Picard iteration for `K u + B(u) = F`.
    ///
    /// Each step solves `(K + σM) w = F − B(u) + σMu` with `σ = L_β/2`, then
    /// sets `u ← (1−θ)u + θw`. The shift centers the linearized reaction so
    /// the plain iteration contracts even when `K` is barely coercive; θ is
    /// halved whenever the residual would grow.
    pub fn solve_semilinear(&self, eps: Epsilon, opts: &PicardOptions) -> Result<GalerkinSolution> {
        if !(opts.damping > 0.0 && opts.damping <= 1.0) {
            return Err(Error::invalid(format!("damping must lie in (0,1], got {}", opts.damping)));
        }
        if !(opts.tol > 0.0) {
            return Err(Error::invalid("Picard tolerance must be positive"));
        }
        let n = self.space.dim();
        let k = self.stiffness(eps);
        let sigma = 0.5 * self.beta.lipschitz();
        let mass = self.assembled.mass();
        let shifted = if sigma > 0.0 {
            CsrMatrix::linear_combination(&[(1.0, &k), (sigma, mass)]).expect("shared pattern")
        } else {
            k.clone()
        };
        let system = PreparedSystem::new(shifted, SolverConfig::with_tol(LINEAR_TOL))?;
        let mut u = match &opts.initial {
            Some(v) if v.len() == n => v.clone(),
            Some(_) => return Err(Error::invalid("initial guess has the wrong length")),
            None => vec![0.0; n],
        };
        let f = self.load();
        let mut res = self.nonlinear_residual(&k, &u);
        let mut history = vec![res];
        let mut theta = opts.damping;
        let mut it = 0;
        while res > opts.tol {
            if it == opts.max_iter {
                return Err(Error::NotConverged {
                    what: "Picard iteration",
                    iterations: it,
                    residual: res,
                    best: Box::new(u),
                    hint: format!("retry with a smaller damping than θ = {theta}"),
                });
            }
            let b = self.reaction_vector(&u);
            let mu = mass.mul_vec(&u);
            let rhs: Vec<f64> = f
                .iter()
                .zip(&b)
                .zip(&mu)
                .map(|((f, b), m)| f - b + sigma * m)
                .collect();
            let w = system.solve(&rhs, Some(&u))?;
            let mut accepted = None;
            let mut t = theta;
            for h in 0..=opts.max_halvings {
                let cand: Vec<f64> = u.iter().zip(&w).map(|(a, b)| (1.0 - t) * a + t * b).collect();
                let r = self.nonlinear_residual(&k, &cand);
                if !r.is_finite() {
                    return Err(Error::NonFinite("Picard residual".into()));
                }
                if r <= res || h == opts.max_halvings {
                    accepted = Some((cand, r));
                    break;
                }
                t *= 0.5;
            }
            let (cand, r) = accepted.expect("loop always accepts");
            theta = t;
            u = cand;
            res = r;
            history.push(res);
            it += 1;
        }
        Ok(GalerkinSolution {
            space: self.space.clone(),
            coeffs: u,
            kind: eps,
            picard_iterations: it,
            final_residual: res,
            residual_history: history,
            linear_iterations: 0,
        })
    }
}

/// Linear solve on a freshly assembled problem.
pub fn solve_linear(spec: &ProblemSpec, space: Arc<GalerkinSpace>) -> Result<GalerkinSolution> {
    DiscreteProblem::from_spec(spec, space)?.solve_linear(spec.epsilon)
}

/// Picard solve on a freshly assembled problem.
pub fn solve_semilinear(
    spec: &ProblemSpec,
    space: Arc<GalerkinSpace>,
    opts: &PicardOptions,
) -> Result<GalerkinSolution> {
    DiscreteProblem::from_spec(spec, space)?.solve_semilinear(spec.epsilon, opts)
}

/// One side-by-side bound comparison.
#[derive(Debug, Clone, Serialize)]
pub struct BoundCheck {
    pub name: &'static str,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

impl BoundCheck {
    pub fn new(name: &'static str, lhs: f64, rhs: f64) -> Self {
        BoundCheck {
            name,
            lhs,
            rhs,
            pass: lhs <= rhs * (1.0 + BOUND_SLACK) + f64::MIN_POSITIVE,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AprioriReport {
    pub kind: Epsilon,
    pub checks: Vec<BoundCheck>,
}

impl AprioriReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Gradient and reaction bounds for a converged solution: the full gradient
/// and `β(u_ε)` for ε-solutions, the X₂-gradient and `β(u)` for the limit.
pub fn apriori_check(
    sol: &GalerkinSolution,
    problem: &DiscreteProblem,
    ledger: &ConstantLedger,
) -> Result<AprioriReport> {
    if !Arc::ptr_eq(&sol.space, &problem.space) && *sol.space != *problem.space {
        return Err(Error::SpaceMismatch);
    }
    let norms = problem.norms();
    let u = &sol.coeffs;
    let f = ledger.f_l2;
    let lambda = ledger.lambda;
    let m = problem.beta.growth();
    let beta_norm = problem.reaction_norm(u);
    let checks = match sol.kind {
        Epsilon::Value(eps) => {
            let e2 = eps * eps;
            vec![
                BoundCheck::new("bound1", norms.grad(u), ledger.c_omega * f / (lambda * e2)),
                BoundCheck::new(
                    "bound3",
                    beta_norm,
                    m / e2 * (ledger.area.sqrt() + ledger.c_omega.powi(2) * f / lambda),
                ),
            ]
        }
        Epsilon::Limit => vec![
            BoundCheck::new("bound2", norms.grad_x2(u), ledger.c_omega2 * f / lambda),
            BoundCheck::new(
                "bound4",
                beta_norm,
                m * (ledger.area.sqrt() + ledger.c_omega2.powi(2) * f / lambda),
            ),
        ],
    };
    Ok(AprioriReport { kind: sol.kind, checks })
}
