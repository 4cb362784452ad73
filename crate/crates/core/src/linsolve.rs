//! Preconditioned conjugate gradients with a dense fallback.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::sparse::{axpy, dot, norm2, CsrMatrix};

/// Largest system handed to a dense factorization.
pub const DENSE_LIMIT: usize = 4000;

/// Largest system whose factorization [`PreparedSystem`] keeps around.
const CACHE_LIMIT: usize = 1600;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Preconditioner {
    None,
    Jacobi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    ConjugateGradient(Preconditioner),
    DenseCholesky,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverConfig {
    pub method: SolverMethod,
    pub rel_tol: f64,
    /// Defaults to `20 n` when unset.
    pub max_iter: Option<usize>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            method: SolverMethod::ConjugateGradient(Preconditioner::Jacobi),
            rel_tol: 1e-10,
            max_iter: None,
        }
    }
}

impl SolverConfig {
    pub fn with_tol(rel_tol: f64) -> Self {
        SolverConfig {
            rel_tol,
            ..Default::default()
        }
    }

    pub fn dense() -> Self {
        SolverConfig {
            method: SolverMethod::DenseCholesky,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.rel_tol.is_finite()) {
            return Err(Error::invalid(format!("rel_tol must be positive, got {}", self.rel_tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodUsed {
    Trivial,
    ConjugateGradient,
    DenseCholesky,
    DenseLu,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub x: Vec<f64>,
    /// `‖K x − rhs‖₂`, recomputed from the returned solution.
    pub residual_norm: f64,
    pub iterations: usize,
    /// Euclidean residual norm after each CG iteration (index 0: initial).
    pub history: Vec<f64>,
    pub method: MethodUsed,
}

fn check_dims(k: &CsrMatrix, rhs: &[f64]) -> Result<()> {
    if k.nrows() != k.ncols() {
        return Err(Error::invalid(format!("matrix is {}x{}, not square", k.nrows(), k.ncols())));
    }
    if rhs.len() != k.nrows() {
        return Err(Error::invalid(format!(
            "right-hand side has length {} but the matrix has {} rows",
            rhs.len(),
            k.nrows()
        )));
    }
    Ok(())
}

fn true_residual(k: &CsrMatrix, x: &[f64], rhs: &[f64]) -> f64 {
    let kx = k.mul_vec(x);
    kx.iter().zip(rhs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// Solves `K x = rhs`. Nonsymmetric matrices go to dense LU.
pub fn solve(k: &CsrMatrix, rhs: &[f64], cfg: &SolverConfig) -> Result<SolveResult> {
    solve_from(k, rhs, None, cfg)
}

/// As [`solve`], starting CG from `x0`.
pub fn solve_from(k: &CsrMatrix, rhs: &[f64], x0: Option<&[f64]>, cfg: &SolverConfig) -> Result<SolveResult> {
    check_dims(k, rhs)?;
    cfg.validate()?;
    let n = rhs.len();
    if rhs.iter().all(|&v| v == 0.0) {
        return Ok(SolveResult {
            x: vec![0.0; n],
            residual_norm: 0.0,
            iterations: 0,
            history: vec![0.0],
            method: MethodUsed::Trivial,
        });
    }
    if !k.is_symmetric(1e-12) {
        return dense_solve(k, rhs);
    }
    match cfg.method {
        SolverMethod::DenseCholesky => dense_solve(k, rhs),
        SolverMethod::ConjugateGradient(pc) => {
            conjugate_gradient(k, rhs, x0, pc, cfg.rel_tol, cfg.max_iter.unwrap_or(20 * n.max(1)), |_, _, _| {})
        }
    }
}

/// Dense Cholesky, or LU when the matrix is not symmetric.
pub fn dense_solve(k: &CsrMatrix, rhs: &[f64]) -> Result<SolveResult> {
    check_dims(k, rhs)?;
    let n = rhs.len();
    if n > DENSE_LIMIT {
        return Err(Error::invalid(format!(
            "dense fallback limited to n <= {DENSE_LIMIT}, system has n = {n}"
        )));
    }
    let factor = DenseFactor::new(k)?;
    let x = factor.solve(rhs)?;
    Ok(SolveResult {
        residual_norm: true_residual(k, &x, rhs),
        x,
        iterations: 0,
        history: Vec::new(),
        method: factor.method(),
    })
}

enum DenseFactor {
    Cholesky(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Lu(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

impl DenseFactor {
    fn new(k: &CsrMatrix) -> Result<Self> {
        let dense: DMatrix<f64> = k.to_dense();
        if k.is_symmetric(1e-12) {
            if let Some(c) = dense.clone().cholesky() {
                return Ok(DenseFactor::Cholesky(c));
            }
        }
        let lu = dense.lu();
        if !lu.is_invertible() {
            return Err(Error::invalid("matrix is singular"));
        }
        Ok(DenseFactor::Lu(lu))
    }

    fn method(&self) -> MethodUsed {
        match self {
            DenseFactor::Cholesky(_) => MethodUsed::DenseCholesky,
            DenseFactor::Lu(_) => MethodUsed::DenseLu,
        }
    }

    fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let b = DVector::from_column_slice(rhs);
        let x = match self {
            DenseFactor::Cholesky(c) => c.solve(&b),
            DenseFactor::Lu(lu) => lu.solve(&b).ok_or_else(|| Error::invalid("LU solve failed"))?,
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dense solve".into()));
        }
        Ok(x.as_slice().to_vec())
    }
}

/// Preconditioned CG. `monitor(iteration, iterate, residual_norm)` is called
/// after every iteration, including iteration 0.
pub fn conjugate_gradient(
    k: &CsrMatrix,
    rhs: &[f64],
    x0: Option<&[f64]>,
    pc: Preconditioner,
    rel_tol: f64,
    max_iter: usize,
    mut monitor: impl FnMut(usize, &[f64], f64),
) -> Result<SolveResult> {
    check_dims(k, rhs)?;
    let n = rhs.len();
    let bnorm = norm2(rhs);
    let target = rel_tol * bnorm;
    let inv_diag: Vec<f64> = match pc {
        Preconditioner::None => vec![1.0; n],
        Preconditioner::Jacobi => k
            .diagonal()
            .iter()
            .map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 })
            .collect(),
    };
    let mut x = x0.map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; n]);
    if x.len() != n {
        return Err(Error::invalid("initial guess has the wrong length"));
    }
    let mut r = rhs.to_vec();
    if x.iter().any(|&v| v != 0.0) {
        let kx = k.mul_vec(&x);
        r.iter_mut().zip(&kx).for_each(|(ri, kxi)| *ri -= kxi);
    }
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, b)| a * b).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut kp = vec![0.0; n];
    let mut rnorm = norm2(&r);
    let mut history = vec![rnorm];
    let mut best = (rnorm, x.clone());
    monitor(0, &x, rnorm);
    let mut it = 0;
    while rnorm > target {
        if it == max_iter {
            return Err(Error::NotConverged {
                what: "conjugate gradient",
                iterations: it,
                residual: best.0 / bnorm,
                best: Box::new(best.1),
                hint: "raise max_iter, loosen rel_tol or use the dense fallback".into(),
            });
        }
        k.mul_vec_into(&p, &mut kp);
        let pkp = dot(&p, &kp);
        if !(pkp > 0.0) {
            return Err(Error::Breakdown(format!(
                "pᵀKp = {pkp:e} at iteration {it}; the matrix is not positive definite"
            )));
        }
        let alpha = rz / pkp;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &kp, &mut r);
        for ((zi, ri), di) in z.iter_mut().zip(&r).zip(&inv_diag) {
            *zi = ri * di;
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for (pi, zi) in p.iter_mut().zip(&z) {
            *pi = zi + beta * *pi;
        }
        rnorm = norm2(&r);
        it += 1;
        history.push(rnorm);
        if rnorm < best.0 {
            best = (rnorm, x.clone());
        }
        monitor(it, &x, rnorm);
        if !rnorm.is_finite() {
            return Err(Error::NonFinite("conjugate gradient residual".into()));
        }
    }
    Ok(SolveResult {
        residual_norm: true_residual(k, &x, rhs),
        x,
        iterations: it,
        history,
        method: MethodUsed::ConjugateGradient,
    })
}

/// A matrix prepared for many solves: small systems keep a dense
/// factorization, larger ones use warm-started CG.
pub struct PreparedSystem {
    k: CsrMatrix,
    factor: Option<DenseFactor>,
    cfg: SolverConfig,
}

impl PreparedSystem {
    pub fn new(k: CsrMatrix, cfg: SolverConfig) -> Result<Self> {
        cfg.validate()?;
        let n = k.nrows();
        let factor = if n <= CACHE_LIMIT || !k.is_symmetric(1e-12) {
            Some(DenseFactor::new(&k)?)
        } else {
            None
        };
        Ok(PreparedSystem { k, factor, cfg })
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.k
    }

    pub fn solve(&self, rhs: &[f64], guess: Option<&[f64]>) -> Result<Vec<f64>> {
        check_dims(&self.k, rhs)?;
        if rhs.iter().all(|&v| v == 0.0) {
            return Ok(vec![0.0; rhs.len()]);
        }
        match &self.factor {
            Some(f) => f.solve(rhs),
            None => Ok(solve_from(&self.k, rhs, guess, &self.cfg)?.x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, seed: u64) -> CsrMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let a = &b * b.transpose() + DMatrix::identity(n, n) * (n as f64 * 0.1);
        CsrMatrix::from_dense(&a)
    }

    #[test]
    fn identity_system() {
        let k = CsrMatrix::identity(5);
        let mut e1 = vec![0.0; 5];
        e1[0] = 1.0;
        let r = solve(&k, &e1, &SolverConfig::default()).unwrap();
        assert_eq!(r.x, e1);
    }

    #[test]
    fn diagonal_system() {
        let eps: f64 = 0.5;
        let d: Vec<f64> = (0..16)
            .map(|f| {
                let (j, k) = ((f / 4 + 1) as f64, (f % 4 + 1) as f64);
                k * k + eps * eps * j * j
            })
            .collect();
        let mut rhs = vec![0.0; 16];
        rhs[0] = std::f64::consts::FRAC_PI_2;
        let r = solve(&CsrMatrix::from_diagonal(&d), &rhs, &SolverConfig::default()).unwrap();
        assert!((r.x[0] - rhs[0] / (1.0 + eps * eps)).abs() < 1e-14);
        assert!(r.x[1..].iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn cg_matches_dense_cholesky() {
        let k = random_spd(50, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rhs: Vec<f64> = (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cg = solve(&k, &rhs, &SolverConfig::default()).unwrap();
        let dense = solve(&k, &rhs, &SolverConfig::dense()).unwrap();
        assert_eq!(dense.method, MethodUsed::DenseCholesky);
        for (a, b) in cg.x.iter().zip(&dense.x) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(cg.residual_norm <= 1e-10 * norm2(&rhs) * 1.01);
    }

    #[test]
    fn energy_error_is_monotone() {
        let k = random_spd(40, 3);
        let rhs: Vec<f64> = (0..40).map(|i| (i as f64).sin()).collect();
        let exact = dense_solve(&k, &rhs).unwrap().x;
        let mut energy = Vec::new();
        conjugate_gradient(&k, &rhs, None, Preconditioner::Jacobi, 1e-12, 1000, |_, x, _| {
            let e: Vec<f64> = x.iter().zip(&exact).map(|(a, b)| a - b).collect();
            energy.push(k.quad_form(&e).sqrt());
        })
        .unwrap();
        for w in energy.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-10) + 1e-13);
        }
    }

    #[test]
    fn polishing_does_not_increase_residual() {
        let k = random_spd(60, 11);
        let rhs: Vec<f64> = (0..60).map(|i| (i as f64 * 0.3).cos()).collect();
        let rough = solve(&k, &rhs, &SolverConfig::with_tol(1e-6)).unwrap();
        let fine = solve_from(&k, &rhs, Some(&rough.x), &SolverConfig::with_tol(1e-12)).unwrap();
        assert!(fine.residual_norm <= rough.residual_norm);
    }

    #[test]
    fn non_convergence_carries_best_iterate() {
        let k = random_spd(30, 5);
        let rhs = vec![1.0; 30];
        let cfg = SolverConfig {
            max_iter: Some(2),
            rel_tol: 1e-14,
            ..Default::default()
        };
        match solve(&k, &rhs, &cfg) {
            Err(Error::NotConverged { iterations, best, .. }) => {
                assert_eq!(iterations, 2);
                assert_eq!(best.len(), 30);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn indefinite_matrix_breaks_down() {
        let k = CsrMatrix::from_diagonal(&[1.0, -1.0]);
        let r = conjugate_gradient(&k, &[1.0, 1.0], None, Preconditioner::None, 1e-10, 10, |_, _, _| {});
        assert!(matches!(r, Err(Error::Breakdown(_))));
    }

    #[test]
    fn nonsymmetric_goes_to_lu() {
        let k = CsrMatrix::from_triplets(2, 2, vec![(0, 0, 2.0), (0, 1, 1.0), (1, 1, 3.0)]);
        let r = solve(&k, &[3.0, 3.0], &SolverConfig::default()).unwrap();
        assert_eq!(r.method, MethodUsed::DenseLu);
        assert!((r.x[0] - 1.0).abs() < 1e-14 && (r.x[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn dimension_errors() {
        let k = CsrMatrix::identity(3);
        assert!(solve(&k, &[1.0, 2.0], &SolverConfig::default()).is_err());
        assert!(solve(&k, &[1.0; 3], &SolverConfig::with_tol(0.0)).is_err());
    }

    #[test]
    fn prepared_system_reuses_factor() {
        let k = random_spd(20, 9);
        let p = PreparedSystem::new(k.clone(), SolverConfig::default()).unwrap();
        for s in 0..3 {
            let rhs: Vec<f64> = (0..20).map(|i| ((i + s) as f64).sin()).collect();
            let x = p.solve(&rhs, None).unwrap();
            assert!(true_residual(&k, &x, &rhs) < 1e-10);
        }
    }
}
