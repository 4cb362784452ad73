//! Tensor-product domains and conforming Galerkin spaces `V₁ ⊗ V₂ ⊂ H¹₀(Ω)`.
//!
//! Two nested 1D families are available: piecewise-linear hats on a uniform
//! mesh (`Q1`) and L²-normalized Dirichlet sine modes (`Sine`). A 2D space is
//! the tensor product of one family per direction with the j-major numbering
//! `flat = i * dim2 + j`, so that Kronecker products `A₁ ⊗ A₂` act directly on
//! coefficient vectors.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{Quadrature1D, QuadratureRule};
use crate::sparse::CsrMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub a: f64,
    pub b: f64,
}

impl Interval {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a.is_finite() && b.is_finite()) || b <= a {
            return Err(Error::invalid(format!(
                "degenerate interval [{a}, {b}]: need finite a < b"
            )));
        }
        Ok(Interval { a, b })
    }

    pub fn length(&self) -> f64 {
        self.b - self.a
    }

    /// Best constant in `‖v‖ ≤ C ‖v'‖` on `H¹₀(a, b)`.
    pub fn poincare_constant(&self) -> f64 {
        self.length() / PI
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.a && x <= self.b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TensorDomain {
    pub omega1: Interval,
    pub omega2: Interval,
}

impl TensorDomain {
    pub fn new(omega1: Interval, omega2: Interval) -> Self {
        TensorDomain { omega1, omega2 }
    }

    /// `(0, π)²`
    pub fn unit_pi_square() -> Self {
        let i = Interval { a: 0.0, b: PI };
        TensorDomain::new(i, i)
    }

    pub fn c_omega1(&self) -> f64 {
        self.omega1.poincare_constant()
    }

    pub fn c_omega2(&self) -> f64 {
        self.omega2.poincare_constant()
    }

    /// Poincaré constant of the rectangle, `(C_{ω₁}⁻² + C_{ω₂}⁻²)^{-1/2}`.
    pub fn c_omega(&self) -> f64 {
        (self.c_omega1().powi(-2) + self.c_omega2().powi(-2)).powf(-0.5)
    }

    pub fn area(&self) -> f64 {
        self.omega1.length() * self.omega2.length()
    }

    pub fn contains(&self, x1: f64, x2: f64) -> bool {
        self.omega1.contains(x1) && self.omega2.contains(x2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisKind {
    Q1,
    Sine,
}

impl fmt::Display for BasisKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BasisKind::Q1 => "q1",
            BasisKind::Sine => "sine",
        })
    }
}

impl std::str::FromStr for BasisKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "q1" | "fem" => Ok(BasisKind::Q1),
            "sine" | "sin" => Ok(BasisKind::Sine),
            _ => Err(Error::invalid(format!("unknown basis kind `{s}` (expected q1 or sine)"))),
        }
    }
}

/// One-dimensional conforming family on an interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Basis1D {
    pub kind: BasisKind,
    /// Q1: number of uniform subintervals; Sine: number of modes.
    pub m: usize,
    pub interval: Interval,
}

impl Basis1D {
    pub fn new(kind: BasisKind, m: usize, interval: Interval) -> Result<Self> {
        Interval::new(interval.a, interval.b)?;
        match kind {
            BasisKind::Sine if m >= 1 => {}
            BasisKind::Q1 if m >= 2 => {}
            BasisKind::Sine => return Err(Error::invalid("sine family needs m >= 1 modes")),
            BasisKind::Q1 => {
                return Err(Error::invalid(
                    "Q1 family needs m >= 2 subintervals (m = 1 has no interior node)",
                ))
            }
        }
        Ok(Basis1D { kind, m, interval })
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            BasisKind::Q1 => self.m - 1,
            BasisKind::Sine => self.m,
        }
    }

    fn h(&self) -> f64 {
        self.interval.length() / self.m as f64
    }

    /// Value and derivative of basis function `i` at `x`.
    pub fn eval(&self, i: usize, x: f64) -> (f64, f64) {
        let a = self.interval.a;
        let l = self.interval.length();
        match self.kind {
            BasisKind::Sine => {
                let k = (i + 1) as f64;
                let amp = (2.0 / l).sqrt();
                let arg = k * PI * (x - a) / l;
                (amp * arg.sin(), amp * k * PI / l * arg.cos())
            }
            BasisKind::Q1 => {
                let h = self.h();
                let node = a + (i + 1) as f64 * h;
                let r = (x - node) / h;
                if r.abs() >= 1.0 {
                    (0.0, 0.0)
                } else if r < 0.0 {
                    (1.0 + r, 1.0 / h)
                } else if r > 0.0 {
                    (1.0 - r, -1.0 / h)
                } else {
                    (1.0, 0.0)
                }
            }
        }
    }

    /// Nodes of the Q1 mesh including endpoints, or `None` for sine modes.
    pub fn nodes(&self) -> Option<Vec<f64>> {
        match self.kind {
            BasisKind::Q1 => {
                let h = self.h();
                Some((0..=self.m).map(|k| self.interval.a + k as f64 * h).collect())
            }
            BasisKind::Sine => None,
        }
    }

    pub fn quadrature(&self, rule: &QuadratureRule) -> Quadrature1D {
        let cells = match self.kind {
            BasisKind::Q1 => self.m,
            BasisKind::Sine => self.m * rule.sine_panels_per_mode.max(1),
        };
        Quadrature1D::uniform(self.interval.a, self.interval.b, cells, rule.order)
    }

    /// Basis functions that can be nonzero inside quadrature cell `cell`.
    fn cell_support(&self, cell: usize) -> std::ops::Range<usize> {
        match self.kind {
            BasisKind::Sine => 0..self.m,
            // element `cell` spans nodes cell..cell+1, i.e. hats cell-1 and cell
            BasisKind::Q1 => cell.saturating_sub(1)..(cell + 1).min(self.m - 1),
        }
    }

    pub fn table(&self, rule: &QuadratureRule) -> BasisTable {
        let quad = self.quadrature(rule);
        let mut offsets = Vec::with_capacity(quad.len() + 1);
        offsets.push(0);
        let mut index = Vec::new();
        let mut value = Vec::new();
        let mut deriv = Vec::new();
        for (q, &x) in quad.points.iter().enumerate() {
            for i in self.cell_support(quad.cell[q]) {
                let (v, d) = self.eval(i, x);
                index.push(i);
                value.push(v);
                deriv.push(d);
            }
            offsets.push(index.len());
        }
        let pattern = support_pattern(self.dim(), &quad, &offsets, &index);
        BasisTable {
            quad,
            offsets,
            index,
            value,
            deriv,
            pattern,
        }
    }

    /// Matrix expressing each basis function of `self` in the basis of `fine`.
    ///
    /// Rows index the fine family, columns the coarse one.
    pub fn prolongation_to(&self, fine: &Basis1D) -> Result<CsrMatrix> {
        if self.kind != fine.kind || self.interval != fine.interval {
            return Err(Error::invalid("families are not nested: kind or interval differ"));
        }
        match self.kind {
            BasisKind::Sine => {
                if fine.m < self.m {
                    return Err(Error::invalid(format!(
                        "Sine({}) is not contained in Sine({})",
                        self.m, fine.m
                    )));
                }
                let t = (0..self.m).map(|k| (k, k, 1.0)).collect();
                Ok(CsrMatrix::from_triplets(fine.dim(), self.dim(), t))
            }
            BasisKind::Q1 => {
                if !fine.m.is_multiple_of(self.m) {
                    return Err(Error::invalid(format!(
                        "Q1({}) is not contained in Q1({}): fine size must be a multiple",
                        self.m, fine.m
                    )));
                }
                let fine_nodes = fine.nodes().unwrap();
                let mut t = Vec::new();
                for (r, &x) in fine_nodes[1..fine.m].iter().enumerate() {
                    for c in 0..self.dim() {
                        let (v, _) = self.eval(c, x);
                        if v != 0.0 {
                            t.push((r, c, v));
                        }
                    }
                }
                Ok(CsrMatrix::from_triplets(fine.dim(), self.dim(), t))
            }
        }
    }
}

/// For each pair of basis functions, whether their supports overlap on the
/// quadrature grid. Stored as a CSR pattern with zero values.
fn support_pattern(n: usize, quad: &Quadrature1D, offsets: &[usize], index: &[usize]) -> CsrMatrix {
    let mut seen = vec![false; n * n];
    for q in 0..quad.len() {
        let s = &index[offsets[q]..offsets[q + 1]];
        for &i in s {
            for &k in s {
                seen[i * n + k] = true;
            }
        }
    }
    let mut row_ptr = vec![0];
    let mut col_idx = Vec::new();
    for i in 0..n {
        for k in 0..n {
            if seen[i * n + k] {
                col_idx.push(k);
            }
        }
        row_ptr.push(col_idx.len());
    }
    let nnz = col_idx.len();
    CsrMatrix::from_parts(n, n, row_ptr, col_idx, vec![0.0; nnz])
}

/// Basis values and derivatives at the quadrature points of one direction.
#[derive(Debug, Clone)]
pub struct BasisTable {
    pub quad: Quadrature1D,
    offsets: Vec<usize>,
    index: Vec<usize>,
    value: Vec<f64>,
    deriv: Vec<f64>,
    /// Overlap pattern of the family (n × n).
    pub pattern: CsrMatrix,
}

/// Selects function values or first derivatives from a [`BasisTable`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Value,
    Deriv,
}

impl BasisTable {
    pub fn num_points(&self) -> usize {
        self.quad.len()
    }

    /// `(basis index, value or derivative)` pairs supported at point `q`.
    pub fn at(&self, q: usize, c: Component) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.offsets[q]..self.offsets[q + 1];
        let vals = match c {
            Component::Value => &self.value[r.clone()],
            Component::Deriv => &self.deriv[r.clone()],
        };
        self.index[r].iter().copied().zip(vals.iter().copied())
    }

    pub(crate) fn support(&self, q: usize) -> &[usize] {
        &self.index[self.offsets[q]..self.offsets[q + 1]]
    }

    pub(crate) fn values(&self, q: usize, c: Component) -> &[f64] {
        let r = self.offsets[q]..self.offsets[q + 1];
        match c {
            Component::Value => &self.value[r],
            Component::Deriv => &self.deriv[r],
        }
    }
}

/// Conforming tensor space `V₁ ⊗ V₂` with its quadrature tables.
#[derive(Clone)]
pub struct GalerkinSpace {
    pub domain: TensorDomain,
    pub basis1: Basis1D,
    pub basis2: Basis1D,
    pub rule: QuadratureRule,
    tables: [BasisTable; 2],
}

impl fmt::Debug for GalerkinSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "GalerkinSpace({}({}) ⊗ {}({}), dim {})",
            self.basis1.kind,
            self.basis1.m,
            self.basis2.kind,
            self.basis2.m,
            self.dim()
        )
    }
}

impl PartialEq for GalerkinSpace {
    fn eq(&self, other: &Self) -> bool {
        self.domain == other.domain
            && self.basis1 == other.basis1
            && self.basis2 == other.basis2
            && self.rule == other.rule
    }
}

/// `build_space` with the default quadrature rule.
pub fn build_space(
    domain: TensorDomain,
    kind1: BasisKind,
    m1: usize,
    kind2: BasisKind,
    m2: usize,
) -> Result<GalerkinSpace> {
    GalerkinSpace::new(domain, kind1, m1, kind2, m2, QuadratureRule::default())
}

impl GalerkinSpace {
    pub fn new(
        domain: TensorDomain,
        kind1: BasisKind,
        m1: usize,
        kind2: BasisKind,
        m2: usize,
        rule: QuadratureRule,
    ) -> Result<Self> {
        if rule.order == 0 {
            return Err(Error::invalid("quadrature order must be positive"));
        }
        let basis1 = Basis1D::new(kind1, m1, domain.omega1)?;
        let basis2 = Basis1D::new(kind2, m2, domain.omega2)?;
        let tables = [basis1.table(&rule), basis2.table(&rule)];
        Ok(GalerkinSpace {
            domain,
            basis1,
            basis2,
            rule,
            tables,
        })
    }

    /// Same families and sizes with a different quadrature rule.
    pub fn with_rule(&self, rule: QuadratureRule) -> Result<Self> {
        Self::new(
            self.domain,
            self.basis1.kind,
            self.basis1.m,
            self.basis2.kind,
            self.basis2.m,
            rule,
        )
    }

    pub fn dim1(&self) -> usize {
        self.basis1.dim()
    }

    pub fn dim2(&self) -> usize {
        self.basis2.dim()
    }

    pub fn dim(&self) -> usize {
        self.dim1() * self.dim2()
    }

    pub fn flat(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.dim1() && j < self.dim2());
        i * self.dim2() + j
    }

    pub fn unflat(&self, flat: usize) -> (usize, usize) {
        (flat / self.dim2(), flat % self.dim2())
    }

    pub fn table1(&self) -> &BasisTable {
        &self.tables[0]
    }

    pub fn table2(&self) -> &BasisTable {
        &self.tables[1]
    }

    /// `(φ, ∂x₁φ, ∂x₂φ)` of basis function `flat` at `(x1, x2)`.
    pub fn eval_basis(&self, flat: usize, x1: f64, x2: f64) -> Result<(f64, f64, f64)> {
        if flat >= self.dim() {
            return Err(Error::invalid(format!(
                "basis index {flat} out of range (dimension {})",
                self.dim()
            )));
        }
        if !self.domain.contains(x1, x2) {
            return Err(Error::invalid(format!("point ({x1}, {x2}) outside the closed domain")));
        }
        let (i, j) = self.unflat(flat);
        let (p, dp) = self.basis1.eval(i, x1);
        let (q, dq) = self.basis2.eval(j, x2);
        Ok((p * q, dp * q, p * dq))
    }

    /// Evaluates `u_h = Σ c_ij φ_i ψ_j` at a point.
    pub fn eval_field(&self, coeffs: &[f64], x1: f64, x2: f64) -> f64 {
        let phi: Vec<f64> = (0..self.dim1()).map(|i| self.basis1.eval(i, x1).0).collect();
        let psi: Vec<f64> = (0..self.dim2()).map(|j| self.basis2.eval(j, x2).0).collect();
        let mut acc = 0.0;
        for (i, p) in phi.iter().enumerate() {
            if *p == 0.0 {
                continue;
            }
            let row = &coeffs[i * self.dim2()..(i + 1) * self.dim2()];
            acc += p * row.iter().zip(&psi).map(|(c, q)| c * q).sum::<f64>();
        }
        acc
    }

    /// Embedding of this space into a finer nested one, `fine.dim() × self.dim()`.
    pub fn prolongation_to(&self, fine: &GalerkinSpace) -> Result<CsrMatrix> {
        if self.domain != fine.domain {
            return Err(Error::invalid("spaces live on different domains"));
        }
        let p1 = self.basis1.prolongation_to(&fine.basis1)?;
        let p2 = self.basis2.prolongation_to(&fine.basis2)?;
        Ok(CsrMatrix::kron(&p1, &p2))
    }

    /// The coupling pattern shared by every matrix assembled on this space.
    pub fn pattern(&self) -> CsrMatrix {
        CsrMatrix::kron(&self.table1().pattern, &self.table2().pattern)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pi_space(k1: BasisKind, m1: usize, k2: BasisKind, m2: usize) -> GalerkinSpace {
        build_space(TensorDomain::unit_pi_square(), k1, m1, k2, m2).unwrap()
    }

    #[test]
    fn dimensions() {
        assert_eq!(pi_space(BasisKind::Sine, 4, BasisKind::Sine, 4).dim(), 16);
        assert_eq!(pi_space(BasisKind::Q1, 8, BasisKind::Q1, 8).dim(), 49);
        assert_eq!(pi_space(BasisKind::Q1, 8, BasisKind::Sine, 3).dim(), 21);
    }

    #[test]
    fn rejects_bad_inputs() {
        let d = TensorDomain::unit_pi_square();
        assert!(build_space(d, BasisKind::Sine, 0, BasisKind::Sine, 4).is_err());
        assert!(build_space(d, BasisKind::Q1, 1, BasisKind::Sine, 4).is_err());
        assert!(Interval::new(1.0, 1.0).is_err());
        assert!(Interval::new(2.0, 1.0).is_err());
        let bad = TensorDomain::new(Interval { a: 0.0, b: 0.0 }, Interval { a: 0.0, b: 1.0 });
        assert!(build_space(bad, BasisKind::Sine, 2, BasisKind::Sine, 2).is_err());
    }

    #[test]
    fn poincare_constants() {
        let d = TensorDomain::new(Interval::new(0.0, 2.0).unwrap(), Interval::new(-1.0, 2.0).unwrap());
        assert!((d.c_omega1() - 2.0 / PI).abs() < 1e-15);
        assert!((d.c_omega2() - 3.0 / PI).abs() < 1e-15);
        let expected = 1.0 / ((PI / 2.0).powi(2) + (PI / 3.0).powi(2)).sqrt();
        assert!((d.c_omega() - expected).abs() < 1e-15);
    }

    #[test]
    fn flat_index_is_j_major() {
        let s = pi_space(BasisKind::Sine, 3, BasisKind::Sine, 5);
        assert_eq!(s.flat(2, 1), 11);
        assert_eq!(s.unflat(11), (2, 1));
    }

    #[test]
    fn sine_mode_extremum() {
        let s = pi_space(BasisKind::Sine, 4, BasisKind::Sine, 4);
        let (v, d1, d2) = s.eval_basis(0, PI / 2.0, PI / 2.0).unwrap();
        // L²-normalized: sqrt(2/π)² = 2/π times sin·sin = 1
        assert!((v * PI / 2.0 - 1.0).abs() < 1e-15);
        assert!(d1.abs() < 1e-15 && d2.abs() < 1e-15);
    }

    #[test]
    fn corners_vanish() {
        for s in [
            pi_space(BasisKind::Sine, 3, BasisKind::Sine, 3),
            pi_space(BasisKind::Q1, 4, BasisKind::Q1, 4),
        ] {
            for flat in 0..s.dim() {
                for (x1, x2) in [(0.0, 0.0), (PI, 0.0), (0.0, PI), (PI, PI)] {
                    assert!(s.eval_basis(flat, x1, x2).unwrap().0.abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn hat_nodal_property() {
        let b = Basis1D::new(BasisKind::Q1, 6, Interval::new(0.0, 3.0).unwrap()).unwrap();
        let nodes = b.nodes().unwrap();
        for i in 0..b.dim() {
            for (k, &x) in nodes.iter().enumerate() {
                let expected = if k == i + 1 { 1.0 } else { 0.0 };
                assert!((b.eval(i, x).0 - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn eval_basis_errors() {
        let s = pi_space(BasisKind::Sine, 2, BasisKind::Sine, 2);
        assert!(s.eval_basis(4, 1.0, 1.0).is_err());
        assert!(s.eval_basis(0, -0.1, 1.0).is_err());
    }

    #[test]
    fn hats_partition_unity_away_from_boundary() {
        let b = Basis1D::new(BasisKind::Q1, 8, Interval::new(0.0, PI).unwrap()).unwrap();
        let t = b.table(&QuadratureRule::default());
        for q in 0..t.num_points() {
            let cell = t.quad.cell[q];
            if cell == 0 || cell == 7 {
                continue;
            }
            let sum: f64 = t.at(q, Component::Value).map(|(_, v)| v).sum();
            assert!((sum - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn sine_tensor_mass_is_identity() {
        let s = pi_space(BasisKind::Sine, 5, BasisKind::Sine, 5);
        for t in [s.table1(), s.table2()] {
            for i in 0..5 {
                for k in 0..5 {
                    let mut acc = 0.0;
                    for q in 0..t.num_points() {
                        let vals: Vec<(usize, f64)> = t.at(q, Component::Value).collect();
                        acc += t.quad.weights[q] * vals[i].1 * vals[k].1;
                    }
                    let expected = if i == k { 1.0 } else { 0.0 };
                    assert!((acc - expected).abs() < 1e-12, "({i},{k}) {acc}");
                }
            }
        }
    }

    #[test]
    fn nested_sine_spaces_embed_exactly() {
        let coarse = pi_space(BasisKind::Sine, 2, BasisKind::Sine, 2);
        let fine = pi_space(BasisKind::Sine, 4, BasisKind::Sine, 4);
        let p = coarse.prolongation_to(&fine).unwrap();
        for c in 0..coarse.dim() {
            let mut e = vec![0.0; coarse.dim()];
            e[c] = 1.0;
            let fc = p.mul_vec(&e);
            for &(x1, x2) in &[(0.3, 0.4), (1.7, 2.2), (2.9, 0.1), (1.0, 3.0)] {
                let a = coarse.eval_field(&e, x1, x2);
                let b = fine.eval_field(&fc, x1, x2);
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(fine.prolongation_to(&coarse).is_err());
    }

    #[test]
    fn nested_q1_spaces_embed_exactly() {
        let coarse = pi_space(BasisKind::Q1, 4, BasisKind::Q1, 2);
        let fine = pi_space(BasisKind::Q1, 8, BasisKind::Q1, 6);
        let p = coarse.prolongation_to(&fine).unwrap();
        let c: Vec<f64> = (0..coarse.dim()).map(|k| (k as f64 * 0.7).sin()).collect();
        let fc = p.mul_vec(&c);
        for k in 0..40 {
            let x1 = PI * (k as f64 * 0.137).fract();
            let x2 = PI * (k as f64 * 0.291).fract();
            assert!((coarse.eval_field(&c, x1, x2) - fine.eval_field(&fc, x1, x2)).abs() < 1e-12);
        }
        let not_nested = pi_space(BasisKind::Q1, 6, BasisKind::Q1, 6);
        assert!(coarse.prolongation_to(&not_nested).is_err());
    }
}
