//! Uniform 1D grids and finite-difference calculus on vector-valued grid
//! functions.
//!
//! Gradients live on cells (forward differences at cell midpoints), second
//! differences on interior nodes; every functional in this crate uses the same
//! midpoint-per-cell quadrature so that energies, gradients and residuals stay
//! mutually consistent.

use crate::{fmt_full, Error, Result};
use nalgebra::DVector;
use std::io::{BufRead, Write};
use std::path::Path;

/// Bounded open interval (a, b), the domain of every problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    a: f64,
    b: f64,
}

impl Interval {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !a.is_finite() || !b.is_finite() || a >= b {
            return Err(Error::InvalidInterval { a, b });
        }
        Ok(Self { a, b })
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn length(&self) -> f64 {
        self.b - self.a
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.a && x <= self.b
    }
}

/// Uniform partition of an interval into `n_cells` cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    interval: Interval,
    n_cells: usize,
    h: f64,
    nodes: Vec<f64>,
}

impl Grid {
    pub fn interval(&self) -> &Interval {
        &self.interval
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    /// Number of nodes, `n_cells + 1`.
    pub fn n_nodes(&self) -> usize {
        self.n_cells + 1
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> f64 {
        self.nodes[i]
    }

    /// Midpoint of cell `j`, the quadrature point of every functional.
    pub fn midpoint(&self, j: usize) -> f64 {
        self.interval.a + (j as f64 + 0.5) * self.h
    }
}

/// Builds the uniform grid over `interval` with `n_cells >= 2` cells. The last
/// node is pinned to the right endpoint exactly.
pub fn build_grid(interval: Interval, n_cells: usize) -> Result<Grid> {
    if n_cells < 2 {
        return Err(Error::TooFewCells(n_cells));
    }
    let h = interval.length() / n_cells as f64;
    let mut nodes: Vec<f64> = (0..=n_cells)
        .map(|i| interval.a + i as f64 * h)
        .collect();
    nodes[n_cells] = interval.b;
    Ok(Grid {
        interval,
        n_cells,
        h,
        nodes,
    })
}

/// Nodal values of a map `[a, b] -> R^N` on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    grid: Grid,
    dim: usize,
    values: Vec<DVector<f64>>,
}

impl GridFunction {
    pub fn new(grid: Grid, values: Vec<DVector<f64>>) -> Result<Self> {
        if values.len() != grid.n_nodes() {
            return Err(Error::NodeCountMismatch {
                expected: grid.n_nodes(),
                got: values.len(),
            });
        }
        let dim = values[0].len();
        if dim == 0 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: 0,
            });
        }
        for v in &values {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
            if v.iter().any(|c| !c.is_finite()) {
                return Err(Error::NonFinite("grid function values".into()));
            }
        }
        Ok(Self { grid, dim, values })
    }

    /// Samples a function of `x` at every node.
    pub fn from_fn(grid: Grid, f: impl Fn(f64) -> DVector<f64>) -> Result<Self> {
        let values = grid.nodes().iter().map(|&x| f(x)).collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[DVector<f64>] {
        &self.values
    }

    pub fn value(&self, i: usize) -> &DVector<f64> {
        &self.values[i]
    }

    pub(crate) fn values_mut(&mut self) -> &mut [DVector<f64>] {
        &mut self.values
    }

    /// Average of the two nodal values of cell `j`; the `eta` argument of the
    /// canonical quadrature rule.
    pub fn cell_average(&self, j: usize) -> DVector<f64> {
        (&self.values[j] + &self.values[j + 1]) * 0.5
    }

    /// Forward difference over cell `j`.
    pub fn cell_slope(&self, j: usize) -> DVector<f64> {
        (&self.values[j + 1] - &self.values[j]) / self.grid.h
    }

    /// Centered slope at interior node `i`, paired with the 3-point second
    /// difference so that affine and compatible cases are exact.
    pub fn centered_slope(&self, i: usize) -> DVector<f64> {
        (&self.values[i + 1] - &self.values[i - 1]) / (2.0 * self.grid.h)
    }

    /// Sup over cells of the Euclidean cell-slope norm.
    pub fn slope_sup(&self) -> f64 {
        (0..self.grid.n_cells())
            .map(|j| self.cell_slope(j).norm())
            .fold(0.0, f64::max)
    }

    /// Sup over nodes of the Euclidean distance to `other`.
    pub fn sup_distance(&self, other: &GridFunction) -> Result<f64> {
        if self.grid != other.grid || self.dim != other.dim {
            return Err(Error::GridMismatch);
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max))
    }

    /// Serialises as CSV with header `x,u_1,...,u_N` and full float precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x");
        for c in 1..=self.dim {
            out.push_str(&format!(",u_{c}"));
        }
        out.push('\n');
        for (i, v) in self.values.iter().enumerate() {
            out.push_str(&fmt_full(self.grid.node(i)));
            for c in 0..self.dim {
                out.push(',');
                out.push_str(&fmt_full(v[c]));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    /// Reads a grid function back from its CSV serialisation, reconstructing
    /// the uniform grid from the `x` column.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let pstr = path.display().to_string();
        let schema = |line: usize, msg: String| Error::Schema {
            path: pstr.clone(),
            line,
            msg,
        };
        let file = std::fs::File::open(path)?;
        let reader = std::io::BufReader::new(file);
        let mut xs: Vec<f64> = Vec::new();
        let mut rows: Vec<DVector<f64>> = Vec::new();
        let mut dim = 0usize;
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = idx + 1;
            if idx == 0 {
                let cols: Vec<&str> = line.trim().split(',').collect();
                if cols.first() != Some(&"x") || cols.len() < 2 {
                    return Err(schema(lineno, format!("bad header {line:?}")));
                }
                dim = cols.len() - 1;
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != dim + 1 {
                return Err(schema(
                    lineno,
                    format!("expected {} fields, got {}", dim + 1, fields.len()),
                ));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|e| schema(lineno, format!("bad number {s:?}: {e}")))
            };
            xs.push(parse(fields[0])?);
            let v = DVector::from_iterator(
                dim,
                fields[1..]
                    .iter()
                    .map(|s| parse(s))
                    .collect::<Result<Vec<_>>>()?,
            );
            rows.push(v);
        }
        if xs.len() < 3 {
            return Err(schema(xs.len(), "need at least 3 rows".into()));
        }
        let n_cells = xs.len() - 1;
        let interval = Interval::new(xs[0], xs[n_cells])?;
        let grid = build_grid(interval, n_cells)?;
        let tol = 1e-9 * (1.0 + interval.length());
        for (i, &x) in xs.iter().enumerate() {
            if (x - grid.node(i)).abs() > tol {
                return Err(schema(
                    i + 2,
                    format!("x={x} is not on the uniform grid (expected {})", grid.node(i)),
                ));
            }
        }
        Self::new(grid, rows)
    }
}

/// Affine endpoint data `b(x) = anchor + slope * (x - a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineData {
    anchor: DVector<f64>,
    slope: DVector<f64>,
}

impl AffineData {
    pub fn new(anchor: DVector<f64>, slope: DVector<f64>) -> Result<Self> {
        if anchor.len() != slope.len() {
            return Err(Error::DimensionMismatch {
                expected: anchor.len(),
                got: slope.len(),
            });
        }
        if anchor.iter().chain(slope.iter()).any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("affine data".into()));
        }
        Ok(Self { anchor, slope })
    }

    pub fn dim(&self) -> usize {
        self.anchor.len()
    }

    pub fn anchor(&self) -> &DVector<f64> {
        &self.anchor
    }

    pub fn slope(&self) -> &DVector<f64> {
        &self.slope
    }

    /// Value at offset `x - a` from the left endpoint.
    pub fn eval(&self, dx: f64) -> DVector<f64> {
        &self.anchor + &self.slope * dx
    }

    /// Larger endpoint norm, `max(|b(a)|, |b(b)|)`.
    pub fn endpoint_sup(&self, interval: &Interval) -> f64 {
        self.eval(0.0).norm().max(self.eval(interval.length()).norm())
    }
}

/// Nodal interpolant of affine data; the initial iterate of every solve.
pub fn affine_interpolant(grid: &Grid, data: &AffineData) -> GridFunction {
    let a = grid.interval().a();
    let values = grid.nodes().iter().map(|&x| data.eval(x - a)).collect();
    GridFunction::new(grid.clone(), values).expect("affine data is finite")
}

/// Per-cell forward differences `(u_{j+1} - u_j) / h`; the canonical discrete
/// slope used by every functional.
pub fn cell_gradient(u: &GridFunction) -> Vec<DVector<f64>> {
    (0..u.grid().n_cells()).map(|j| u.cell_slope(j)).collect()
}

/// Symmetric second difference `(u_{i+k} - 2 u_i + u_{i-k}) / (k h)^2` at node
/// `i`, the discrete difference quotient of the slope for step `t = k h`.
pub fn second_difference(u: &GridFunction, i: usize, k: usize) -> Result<DVector<f64>> {
    let n = u.grid().n_cells();
    if k == 0 || i < k || i + k > n {
        return Err(Error::StencilOutOfRange {
            node: i,
            step: k,
            n_cells: n,
        });
    }
    let t = k as f64 * u.grid().h();
    Ok((&u.values()[i + k] - u.value(i) * 2.0 + &u.values()[i - k]) / (t * t))
}
