//! Gauss–Legendre rules and composite 1D quadratures.

use serde::{Deserialize, Serialize};

/// Nodes and weights of the `n`-point Gauss–Legendre rule on [-1, 1].
///
/// Nodes come from Newton iteration on the Legendre recurrence; the rule is
/// exact for polynomials of degree `2n - 1`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "Gauss-Legendre rule needs at least one point");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    if n == 0 {
        return (1.0, 0.0);
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Quadrature knobs for a Galerkin space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadratureRule {
    /// Gauss points per cell (Q1 element or sine panel).
    pub order: usize,
    /// Number of panels per sine mode; the sine family of size `m` is
    /// integrated on `m * sine_panels_per_mode` uniform panels.
    pub sine_panels_per_mode: usize,
}

impl Default for QuadratureRule {
    fn default() -> Self {
        QuadratureRule {
            order: 4,
            sine_panels_per_mode: 8,
        }
    }
}

/// Composite rule on an interval: concatenated Gauss rules on cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadrature1D {
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
    /// Index of the cell each point belongs to.
    pub cell: Vec<usize>,
}

impl Quadrature1D {
    /// Gauss rule of `order` points on each of `cells` uniform cells of [a, b].
    pub fn uniform(a: f64, b: f64, cells: usize, order: usize) -> Self {
        let (xi, wi) = gauss_legendre(order);
        let h = (b - a) / cells as f64;
        let mut points = Vec::with_capacity(cells * order);
        let mut weights = Vec::with_capacity(cells * order);
        let mut cell = Vec::with_capacity(cells * order);
        for c in 0..cells {
            let left = a + c as f64 * h;
            for (x, w) in xi.iter().zip(&wi) {
                points.push(left + 0.5 * h * (x + 1.0));
                weights.push(0.5 * h * w);
                cell.push(c);
            }
        }
        Quadrature1D {
            points,
            weights,
            cell,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.points
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_rules_match_tabulated_values() {
        let (x, w) = gauss_legendre(2);
        let r = 1.0 / 3f64.sqrt();
        assert!((x[0] + r).abs() < 1e-15 && (x[1] - r).abs() < 1e-15);
        assert!((w[0] - 1.0).abs() < 1e-15 && (w[1] - 1.0).abs() < 1e-15);

        let (x, w) = gauss_legendre(3);
        assert!((x[2] - 0.6f64.sqrt()).abs() < 1e-15);
        assert_eq!(x[1], 0.0);
        assert!((w[1] - 8.0 / 9.0).abs() < 1e-15);
        assert!((w[0] - 5.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn exact_up_to_degree_2g_minus_1() {
        for g in 1..=12 {
            let (x, w) = gauss_legendre(g);
            assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-13);
            for deg in 0..2 * g {
                let approx: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(deg as i32)).sum();
                let exact = if deg % 2 == 1 {
                    0.0
                } else {
                    2.0 / (deg as f64 + 1.0)
                };
                assert!(
                    (approx - exact).abs() < 1e-13,
                    "g={g} deg={deg}: {approx} vs {exact}"
                );
            }
            if g > 6 {
                continue;
            }
            // degree 2g is not integrated exactly
            let deg = 2 * g;
            let approx: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(deg as i32)).sum();
            assert!((approx - 2.0 / (deg as f64 + 1.0)).abs() > 1e-6);
        }
    }

    #[test]
    fn composite_rule_on_cells() {
        let q = Quadrature1D::uniform(1.0, 3.0, 5, 2);
        assert_eq!(q.len(), 10);
        // cubic is exact per cell
        let v = q.integrate(|x| x * x * x - 2.0 * x);
        assert!((v - (80.0 / 4.0 - 8.0)).abs() < 1e-13);
        assert_eq!(q.cell[9], 4);
    }
}
