//! Stiffness, mass, seminorm and load assembly on tensor spaces.
//!
//! Every matrix on a space shares the Kronecker pattern of the two 1D overlap
//! patterns, so blocks combine value-wise. Coefficients that factor as
//! `c₁(x₁)c₂(x₂)` are assembled as `Mat₁(c₁) ⊗ Mat₂(c₂)`; anything else goes
//! through a sum-factorized quadrature loop, parallel over x₁ test functions.

use rayon::prelude::*;
use serde::Serialize;

use crate::coefficients::{scale_matrix, Block, BlockScaling, CoefficientField, SourceField};
use crate::error::{Error, Result};
use crate::expr::{Env, Expr, Var, VarSet};
use crate::field::{integrate_against_basis, sample_expr};
use crate::sparse::CsrMatrix;
use crate::tensor_spaces::{BasisTable, Component, GalerkinSpace};

use Component::{Deriv, Value};

/// Which derivative each factor carries: `(test₁, test₂, trial₁, trial₂)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FormShape {
    pub t1: Component,
    pub t2: Component,
    pub u1: Component,
    pub u2: Component,
}

impl FormShape {
    pub const MASS: FormShape = FormShape { t1: Value, t2: Value, u1: Value, u2: Value };
    pub const GRAD_X1: FormShape = FormShape { t1: Deriv, t2: Value, u1: Deriv, u2: Value };
    pub const GRAD_X2: FormShape = FormShape { t1: Value, t2: Deriv, u1: Value, u2: Deriv };

    /// Block `pq` of `Σ a_pq ∂_q u ∂_p v`; rows are test functions `v`.
    pub fn block(b: Block) -> FormShape {
        match b {
            Block::B11 => Self::GRAD_X1,
            Block::B22 => Self::GRAD_X2,
            // a12 ∂x₂u ∂x₁v
            Block::B12 => FormShape { t1: Deriv, t2: Value, u1: Value, u2: Deriv },
            // a21 ∂x₁u ∂x₂v
            Block::B21 => FormShape { t1: Value, t2: Deriv, u1: Deriv, u2: Value },
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AssemblyOptions {
    /// Skip the Kronecker path even for separable coefficients.
    pub force_general: bool,
}

/// `c = c₁(x₁) c₂(x₂)` when the expression tree makes it visible.
fn separate(c: &Expr) -> Option<(Expr, Expr)> {
    let x1 = VarSet::of(&[Var::X1]);
    let x2 = VarSet::of(&[Var::X2]);
    if c.deps().is_subset(x2) {
        return Some((Expr::constant(1.0), c.clone()));
    }
    if c.deps().is_subset(x1) {
        return Some((c.clone(), Expr::constant(1.0)));
    }
    c.split_x1_x2()
}

/// 1D matrix `Σ_a w_a c(x_a) T_i(x_a) U_k(x_a)` on the family's overlap pattern.
fn matrix_1d(table: &BasisTable, c: &[f64], t: Component, u: Component) -> CsrMatrix {
    let p = &table.pattern;
    let n = p.nrows();
    let mut dense = vec![0.0; n * n];
    for (q, cq) in c.iter().enumerate() {
        let wc = table.quad.weights[q] * cq;
        if wc == 0.0 {
            continue;
        }
        let s = table.support(q);
        let tv = table.values(q, t);
        let uv = table.values(q, u);
        for (ii, &i) in s.iter().enumerate() {
            let wt = wc * tv[ii];
            for (kk, &k) in s.iter().enumerate() {
                dense[i * n + k] += wt * uv[kk];
            }
        }
    }
    let mut values = Vec::with_capacity(p.nnz());
    for i in 0..n {
        for (k, _) in p.row(i) {
            values.push(dense[i * n + k]);
        }
    }
    CsrMatrix::from_parts(n, n, p.row_ptr().to_vec(), p.col_idx().to_vec(), values)
}

fn sample_1d(table: &BasisTable, e: &Expr, var: Var) -> Result<Vec<f64>> {
    table
        .quad
        .points
        .iter()
        .map(|&x| {
            let env = match var {
                Var::X1 => Env::at(x, 0.0),
                _ => Env::at(0.0, x),
            };
            let v = e.eval(&env);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite(format!("`{e}` at {x}")))
            }
        })
        .collect()
}

/// `∫Ω c · T(v) · U(u) dx` for the given derivative pairing.
pub fn assemble_weighted(
    space: &GalerkinSpace,
    c: &Expr,
    shape: FormShape,
    opts: AssemblyOptions,
) -> Result<CsrMatrix> {
    if !c.deps().is_subset(VarSet::of(&[Var::X1, Var::X2])) {
        return Err(Error::invalid(format!("coefficient `{c}` must depend on x1, x2 only")));
    }
    if c.is_zero() {
        return Ok(zero_on_pattern(space));
    }
    if !opts.force_general {
        if let Some((c1, c2)) = separate(c) {
            let v1 = sample_1d(space.table1(), &c1, Var::X1)?;
            let v2 = sample_1d(space.table2(), &c2, Var::X2)?;
            let m1 = matrix_1d(space.table1(), &v1, shape.t1, shape.u1);
            let m2 = matrix_1d(space.table2(), &v2, shape.t2, shape.u2);
            return Ok(CsrMatrix::kron(&m1, &m2));
        }
    }
    let grid = sample_expr(space, c, Env::default())?;
    Ok(assemble_general(space, &grid, shape))
}

fn zero_on_pattern(space: &GalerkinSpace) -> CsrMatrix {
    space.pattern()
}

/// Sum-factorized quadrature for a general coefficient given on the grid.
fn assemble_general(space: &GalerkinSpace, cgrid: &[f64], shape: FormShape) -> CsrMatrix {
    let t1 = space.table1();
    let t2 = space.table2();
    let p1 = &t1.pattern;
    let p2 = &t2.pattern;
    let (n1, n2) = (space.dim1(), space.dim2());
    let n2q = t2.num_points();
    let pattern = space.pattern();

    // x₂ side: per quadrature point, the (row offset, row length, column slot,
    // weight) of every supported (j, l) pair.
    struct Pair {
        start: usize,
        len: usize,
        slot: usize,
        weight: f64,
    }
    let pairs: Vec<Vec<Pair>> = (0..n2q)
        .map(|b| {
            let s = t2.support(b);
            let tv = t2.values(b, shape.t2);
            let uv = t2.values(b, shape.u2);
            let wb = t2.quad.weights[b];
            let mut out = Vec::with_capacity(s.len() * s.len());
            for (jj, &j) in s.iter().enumerate() {
                let cols = &p2.col_idx()[p2.row_ptr()[j]..p2.row_ptr()[j + 1]];
                for (ll, &l) in s.iter().enumerate() {
                    let slot = cols.binary_search(&l).expect("support pair outside pattern");
                    out.push(Pair {
                        start: p2.row_ptr()[j],
                        len: cols.len(),
                        slot,
                        weight: wb * tv[jj] * uv[ll],
                    });
                }
            }
            out
        })
        .collect();

    // x₁ side: quadrature points touching each test function i.
    let mut touching: Vec<Vec<usize>> = vec![Vec::new(); n1];
    for a in 0..t1.num_points() {
        for &i in t1.support(a) {
            touching[i].push(a);
        }
    }

    let mut values = vec![0.0; pattern.nnz()];
    let mut blocks: Vec<&mut [f64]> = Vec::with_capacity(n1);
    let mut rest = values.as_mut_slice();
    for i in 0..n1 {
        let len = pattern.row_ptr()[(i + 1) * n2] - pattern.row_ptr()[i * n2];
        let (head, tail) = rest.split_at_mut(len);
        blocks.push(head);
        rest = tail;
    }

    blocks.into_par_iter().enumerate().for_each(|(i, block)| {
        let cols1 = &p1.col_idx()[p1.row_ptr()[i]..p1.row_ptr()[i + 1]];
        let len1 = cols1.len();
        // z[b][k] = Σ_a w_a c(a, b) T1_i(a) U1_k(a)
        let mut z = vec![0.0; n2q * len1];
        for &a in &touching[i] {
            let s = t1.support(a);
            let ii = s.iter().position(|&x| x == i).unwrap();
            let ti = t1.quad.weights[a] * t1.values(a, shape.t1)[ii];
            if ti == 0.0 {
                continue;
            }
            let uv = t1.values(a, shape.u1);
            let slots: Vec<usize> = s.iter().map(|k| cols1.binary_search(k).unwrap()).collect();
            let crow = &cgrid[a * n2q..(a + 1) * n2q];
            for (b, &cab) in crow.iter().enumerate() {
                let f = ti * cab;
                let zb = &mut z[b * len1..(b + 1) * len1];
                for (slot, u) in slots.iter().zip(uv) {
                    zb[*slot] += f * u;
                }
            }
        }
        for (b, pb) in pairs.iter().enumerate() {
            let zb = &z[b * len1..(b + 1) * len1];
            for p in pb {
                let base = len1 * p.start + p.slot;
                for (k1, zv) in zb.iter().enumerate() {
                    block[base + k1 * p.len] += p.weight * zv;
                }
            }
        }
    });
    CsrMatrix::from_parts(
        pattern.nrows(),
        pattern.ncols(),
        pattern.row_ptr().to_vec(),
        pattern.col_idx().to_vec(),
        values,
    )
}

pub fn assemble_block_stiffness(space: &GalerkinSpace, a: &CoefficientField, block: Block) -> Result<CsrMatrix> {
    assemble_weighted(space, a.entry(block), FormShape::block(block), AssemblyOptions::default())
}

/// Stiffness of the limit operator `−div_{X₂}(A22 ∇_{X₂}·)`, i.e. block 22.
pub fn assemble_limit_stiffness(space: &GalerkinSpace, a: &CoefficientField) -> Result<CsrMatrix> {
    assemble_block_stiffness(space, a, Block::B22)
}

pub fn assemble_mass(space: &GalerkinSpace) -> CsrMatrix {
    assemble_weighted(space, &Expr::constant(1.0), FormShape::MASS, AssemblyOptions::default())
        .expect("constant coefficient")
}

/// `(G1, G2)` with `vᵀG1v = ‖∂x₁v‖²` and `vᵀG2v = ‖∂x₂v‖²`.
pub fn seminorm_matrices(space: &GalerkinSpace) -> (CsrMatrix, CsrMatrix) {
    let one = Expr::constant(1.0);
    let g1 = assemble_weighted(space, &one, FormShape::GRAD_X1, AssemblyOptions::default());
    let g2 = assemble_weighted(space, &one, FormShape::GRAD_X2, AssemblyOptions::default());
    (g1.expect("constant coefficient"), g2.expect("constant coefficient"))
}

/// `∫Ω f φ dx` for every basis function; `f` must not depend on time.
pub fn assemble_load(space: &GalerkinSpace, f: &SourceField) -> Result<Vec<f64>> {
    if f.is_time_dependent() {
        return Err(Error::invalid("time-dependent source: use assemble_load_at"));
    }
    assemble_load_at(space, &f.f, 0.0)
}

/// `∫Ω f(t, ·) φ dx`.
pub fn assemble_load_at(space: &GalerkinSpace, f: &Expr, t: f64) -> Result<Vec<f64>> {
    if f.is_zero() {
        return Ok(vec![0.0; space.dim()]);
    }
    let grid = sample_expr(space, f, Env { t, ..Default::default() })?;
    Ok(integrate_against_basis(space, &grid, Value, Value))
}

/// 1D mass and stiffness `∫ c ψ′_j ψ′_k dx₂` of the x₂ factor.
pub fn omega2_matrices(space: &GalerkinSpace, c: &Expr) -> Result<(CsrMatrix, CsrMatrix)> {
    if !c.deps().is_subset(VarSet::of(&[Var::X2])) {
        return Err(Error::invalid(format!("coefficient `{c}` must depend on x2 only")));
    }
    let t = space.table2();
    let ones = vec![1.0; t.num_points()];
    let cv = sample_1d(t, c, Var::X2)?;
    Ok((matrix_1d(t, &ones, Value, Value), matrix_1d(t, &cv, Deriv, Deriv)))
}

/// `∫ g T_i` against the basis of one factor (`Var::X1` or `Var::X2`).
pub fn load_1d(space: &GalerkinSpace, g: &Expr, var: Var) -> Result<Vec<f64>> {
    if !g.deps().is_subset(VarSet::of(&[var])) {
        return Err(Error::invalid(format!("profile `{g}` must depend on {var:?} only")));
    }
    let (t, n) = match var {
        Var::X1 => (space.table1(), space.dim1()),
        Var::X2 => (space.table2(), space.dim2()),
        _ => return Err(Error::invalid("load_1d expects x1 or x2")),
    };
    let gv = sample_1d(t, g, var)?;
    let mut out = vec![0.0; n];
    for (q, gq) in gv.iter().enumerate() {
        let w = t.quad.weights[q] * gq;
        for (&i, &v) in t.support(q).iter().zip(t.values(q, Value)) {
            out[i] += w * v;
        }
    }
    Ok(out)
}

/// 1D mass of one factor.
pub fn mass_1d(space: &GalerkinSpace, var: Var) -> CsrMatrix {
    let t = if var == Var::X1 { space.table1() } else { space.table2() };
    matrix_1d(t, &vec![1.0; t.num_points()], Value, Value)
}

/// Mass and seminorm matrices used by every error norm.
#[derive(Debug, Clone)]
pub struct NormMatrices {
    pub mass: CsrMatrix,
    pub g1: CsrMatrix,
    pub g2: CsrMatrix,
}

impl NormMatrices {
    pub fn new(space: &GalerkinSpace) -> Self {
        let (g1, g2) = seminorm_matrices(space);
        NormMatrices {
            mass: assemble_mass(space),
            g1,
            g2,
        }
    }

    pub fn l2(&self, v: &[f64]) -> f64 {
        self.mass.quad_form(v).max(0.0).sqrt()
    }

    pub fn grad_x1(&self, v: &[f64]) -> f64 {
        self.g1.quad_form(v).max(0.0).sqrt()
    }

    pub fn grad_x2(&self, v: &[f64]) -> f64 {
        self.g2.quad_form(v).max(0.0).sqrt()
    }

    pub fn grad(&self, v: &[f64]) -> f64 {
        (self.g1.quad_form(v) + self.g2.quad_form(v)).max(0.0).sqrt()
    }
}

/// All matrices and the load vector of one problem on one space.
#[derive(Debug, Clone)]
pub struct AssembledProblem {
    pub k11: CsrMatrix,
    pub k12: CsrMatrix,
    pub k21: CsrMatrix,
    pub k22: CsrMatrix,
    pub norms: NormMatrices,
    pub load: Vec<f64>,
}

/// Sizes of an assembled problem, for reports.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct AssemblyStats {
    pub dim: usize,
    pub nnz: usize,
}

impl AssembledProblem {
    pub fn new(space: &GalerkinSpace, a: &CoefficientField, f: &SourceField) -> Result<Self> {
        let load = if f.is_time_dependent() {
            vec![0.0; space.dim()]
        } else {
            assemble_load(space, f)?
        };
        Self::with_load(space, a, load)
    }

    pub fn with_load(space: &GalerkinSpace, a: &CoefficientField, load: Vec<f64>) -> Result<Self> {
        if load.len() != space.dim() {
            return Err(Error::invalid("load vector length does not match the space"));
        }
        Ok(AssembledProblem {
            k11: assemble_block_stiffness(space, a, Block::B11)?,
            k12: assemble_block_stiffness(space, a, Block::B12)?,
            k21: assemble_block_stiffness(space, a, Block::B21)?,
            k22: assemble_block_stiffness(space, a, Block::B22)?,
            norms: NormMatrices::new(space),
            load,
        })
    }

    pub fn block(&self, b: Block) -> &CsrMatrix {
        match b {
            Block::B11 => &self.k11,
            Block::B12 => &self.k12,
            Block::B21 => &self.k21,
            Block::B22 => &self.k22,
        }
    }

    pub fn scaled(&self, s: &BlockScaling) -> CsrMatrix {
        CsrMatrix::linear_combination(&[
            (s.s11, &self.k11),
            (s.s12, &self.k12),
            (s.s21, &self.k21),
            (s.s22, &self.k22),
        ])
        .expect("blocks share one pattern")
    }

    /// `K_ε = ε²K11 + εK12 + εK21 + K22`.
    pub fn k_eps(&self, eps: f64) -> Result<CsrMatrix> {
        Ok(self.scaled(&scale_matrix(eps)?))
    }

    pub fn k_limit(&self) -> &CsrMatrix {
        &self.k22
    }

    pub fn mass(&self) -> &CsrMatrix {
        &self.norms.mass
    }

    pub fn stats(&self) -> AssemblyStats {
        AssemblyStats {
            dim: self.load.len(),
            nnz: self.k22.nnz(),
        }
    }
}
