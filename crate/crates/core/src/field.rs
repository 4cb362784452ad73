//! Discrete fields on the tensor quadrature grid.
//!
//! Grid values are stored row-major in the x₁ quadrature index:
//! `grid[a * n2q + b]` is the value at `(x1_a, x2_b)`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::expr::{Env, Expr};
use crate::tensor_spaces::{Component, GalerkinSpace};

pub fn grid_len(space: &GalerkinSpace) -> usize {
    space.table1().num_points() * space.table2().num_points()
}

/// Samples an expression on the quadrature grid with `t`, `s`, `eps` taken
/// from `base`.
pub fn sample_expr(space: &GalerkinSpace, e: &Expr, base: Env) -> Result<Vec<f64>> {
    let p1 = &space.table1().quad.points;
    let p2 = &space.table2().quad.points;
    let n2q = p2.len();
    let mut out = vec![0.0; p1.len() * n2q];
    if let Some(c) = e.constant_value() {
        out.iter_mut().for_each(|v| *v = c);
    } else {
        out.par_chunks_mut(n2q).zip(p1.par_iter()).for_each(|(row, &x1)| {
            for (v, &x2) in row.iter_mut().zip(p2) {
                *v = e.eval(&Env { x1, x2, ..base });
            }
        });
    }
    if let Some(k) = out.iter().position(|v| !v.is_finite()) {
        let (a, b) = (k / n2q, k % n2q);
        return Err(Error::NonFinite(format!(
            "`{e}` at quadrature point ({}, {})",
            p1[a], p2[b]
        )));
    }
    Ok(out)
}

/// Values (or partials) of `u_h = Σ c_ij φ_i ψ_j` on the quadrature grid.
pub fn eval_on_grid(space: &GalerkinSpace, coeffs: &[f64], c1: Component, c2: Component) -> Vec<f64> {
    let t1 = space.table1();
    let t2 = space.table2();
    let n2 = space.dim2();
    let n2q = t2.num_points();
    let mut out = vec![0.0; t1.num_points() * n2q];
    out.par_chunks_mut(n2q).enumerate().for_each(|(a, row)| {
        // w_j = Σ_i c_ij T1_i(x1_a)
        let mut w = vec![0.0; n2];
        for (&i, &v) in t1.support(a).iter().zip(t1.values(a, c1)) {
            let ci = &coeffs[i * n2..(i + 1) * n2];
            for (wj, cij) in w.iter_mut().zip(ci) {
                *wj += v * cij;
            }
        }
        for (b, out_ab) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (&j, &v) in t2.support(b).iter().zip(t2.values(b, c2)) {
                acc += w[j] * v;
            }
            *out_ab = acc;
        }
    });
    out
}

/// `∫Ω g T1_i T2_j dx` for every basis pair, from grid values of `g`.
pub fn integrate_against_basis(space: &GalerkinSpace, grid: &[f64], c1: Component, c2: Component) -> Vec<f64> {
    let t1 = space.table1();
    let t2 = space.table2();
    let n2 = space.dim2();
    let n2q = t2.num_points();
    let w2 = &t2.quad.weights;
    // h[a][j] = Σ_b w_b g(a, b) T2_j(b)
    let h: Vec<Vec<f64>> = grid
        .par_chunks(n2q)
        .map(|row| {
            let mut hj = vec![0.0; n2];
            for (b, g) in row.iter().enumerate() {
                let wg = w2[b] * g;
                for (&j, &v) in t2.support(b).iter().zip(t2.values(b, c2)) {
                    hj[j] += wg * v;
                }
            }
            hj
        })
        .collect();
    let mut out = vec![0.0; space.dim()];
    for (a, ha) in h.iter().enumerate() {
        let wa = t1.quad.weights[a];
        for (&i, &v) in t1.support(a).iter().zip(t1.values(a, c1)) {
            let s = wa * v;
            for (o, hv) in out[i * n2..(i + 1) * n2].iter_mut().zip(ha) {
                *o += s * hv;
            }
        }
    }
    out
}

/// `∫Ω g dx` from grid values.
pub fn integrate(space: &GalerkinSpace, grid: &[f64]) -> f64 {
    let w1 = &space.table1().quad.weights;
    let w2 = &space.table2().quad.weights;
    let n2q = w2.len();
    let mut acc = 0.0;
    for (a, wa) in w1.iter().enumerate() {
        let row = &grid[a * n2q..(a + 1) * n2q];
        acc += wa * row.iter().zip(w2).map(|(g, w)| g * w).sum::<f64>();
    }
    acc
}

/// `‖g‖_{L²}` from grid values.
pub fn l2_norm_grid(space: &GalerkinSpace, grid: &[f64]) -> f64 {
    let sq: Vec<f64> = grid.iter().map(|v| v * v).collect();
    integrate(space, &sq).max(0.0).sqrt()
}
