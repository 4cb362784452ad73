//! Deterministic CSV output.

use std::io::Write;

use crate::tensor_spaces::GalerkinSpace;

/// Shortest fixed layout that round-trips every finite `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Float(f64),
    Int(usize),
    Text(String),
    Empty,
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Float(x) => fmt_f64(*x),
            Cell::Int(n) => n.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Float(x)
    }
}

impl From<Option<f64>> for Cell {
    fn from(x: Option<f64>) -> Self {
        x.map_or(Cell::Empty, Cell::Float)
    }
}

impl From<usize> for Cell {
    fn from(n: usize) -> Self {
        Cell::Int(n)
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}

pub fn write_csv<W: Write>(mut w: W, header: &[&str], rows: &[Vec<Cell>]) -> std::io::Result<()> {
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        let line: Vec<String> = row.iter().map(Cell::render).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

pub fn csv_string(header: &[&str], rows: &[Vec<Cell>]) -> String {
    let mut buf = Vec::new();
    write_csv(&mut buf, header, rows).expect("writing to a Vec");
    String::from_utf8(buf).expect("ascii output")
}

/// `(x1, x2, u_h)` on an `(n1+1) × (n2+1)` uniform lattice, boundary included,
/// x₁-major.
pub fn lattice_values(space: &GalerkinSpace, coeffs: &[f64], n1: usize, n2: usize) -> Vec<[f64; 3]> {
    let (o1, o2) = (space.domain.omega1, space.domain.omega2);
    let n1 = n1.max(1);
    let n2 = n2.max(1);
    let mut out = Vec::with_capacity((n1 + 1) * (n2 + 1));
    for i in 0..=n1 {
        let x1 = if i == n1 { o1.b } else { o1.a + o1.length() * i as f64 / n1 as f64 };
        for j in 0..=n2 {
            let x2 = if j == n2 { o2.b } else { o2.a + o2.length() * j as f64 / n2 as f64 };
            out.push([x1, x2, space.eval_field(coeffs, x1, x2)]);
        }
    }
    out
}

pub fn write_lattice_csv<W: Write>(w: W, space: &GalerkinSpace, coeffs: &[f64], n1: usize, n2: usize) -> std::io::Result<()> {
    let rows: Vec<Vec<Cell>> = lattice_values(space, coeffs, n1, n2)
        .into_iter()
        .map(|p| p.iter().map(|&v| Cell::Float(v)).collect())
        .collect();
    write_csv(w, &["x1", "x2", "u"], &rows)
}
