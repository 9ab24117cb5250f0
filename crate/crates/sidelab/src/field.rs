//! Uniform grids on a box and discrete H1_0 fields.
//!
//! A grid covers a box Q with `n` interior nodes per axis, spacing
//! `h = (b - a) / (n + 1)`; values at the boundary and outside Q are zero by
//! convention (zero exterior extension). Integrals are plain h^d-weighted
//! node sums, so for constant 1 on [0, 1] with n = 99 the squared L2 norm is
//! h * n = 0.99, not 1. The H1 norm squares one-sided difference quotients
//! over every edge of each grid line, including the two boundary edges that
//! the zero extension creates; this makes discrete summation by parts against
//! the divergence-form operator exact.

use std::io::Write;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Hard cap on the spatial dimension (1 or 2).
pub const MAX_DIM: usize = 2;

/// Point in the box, with unused trailing coordinates fixed at zero.
pub type Point = [f64; MAX_DIM];

/// Uniform grid of interior nodes on a box.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dim: usize,
    lo: Point,
    hi: Point,
    n: [usize; MAX_DIM],
    h: Point,
}

impl Grid {
    /// 1-D grid with `n` interior nodes on (lo, hi).
    pub fn line(lo: f64, hi: f64, n: usize) -> Result<Arc<Grid>> {
        Grid::boxed(&[(lo, hi)], &[n])
    }

    /// 2-D grid with `n[axis]` interior nodes per axis.
    pub fn rect(x: (f64, f64), y: (f64, f64), n: (usize, usize)) -> Result<Arc<Grid>> {
        Grid::boxed(&[x, y], &[n.0, n.1])
    }

    /// General constructor over per-axis extents and node counts.
    pub fn boxed(extents: &[(f64, f64)], n: &[usize]) -> Result<Arc<Grid>> {
        let dim = extents.len();
        if dim == 0 || dim > MAX_DIM || n.len() != dim {
            return Err(Error::config(format!(
                "grid dimension must be 1 or 2, got {dim} extents and {} counts",
                n.len()
            )));
        }
        let mut grid = Grid {
            dim,
            lo: [0.0; MAX_DIM],
            hi: [0.0; MAX_DIM],
            n: [1; MAX_DIM],
            h: [0.0; MAX_DIM],
        };
        for a in 0..dim {
            let (lo, hi) = extents[a];
            if !lo.is_finite() || !hi.is_finite() || hi <= lo {
                return Err(Error::config(format!("bad extent ({lo}, {hi}) on axis {a}")));
            }
            if n[a] == 0 {
                return Err(Error::config("grid needs at least one interior node"));
            }
            grid.lo[a] = lo;
            grid.hi[a] = hi;
            grid.n[a] = n[a];
            grid.h[a] = (hi - lo) / (n[a] as f64 + 1.0);
        }
        Ok(Arc::new(grid))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Interior node count along `axis`.
    pub fn n(&self, axis: usize) -> usize {
        self.n[axis]
    }

    pub fn h(&self, axis: usize) -> f64 {
        self.h[axis]
    }

    pub fn lo(&self, axis: usize) -> f64 {
        self.lo[axis]
    }

    pub fn hi(&self, axis: usize) -> f64 {
        self.hi[axis]
    }

    pub fn max_h(&self) -> f64 {
        self.h[..self.dim].iter().cloned().fold(0.0, f64::max)
    }

    /// Total number of interior nodes.
    pub fn len(&self) -> usize {
        self.n[..self.dim].iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Quadrature weight h^d of a single node.
    pub fn cell(&self) -> f64 {
        self.h[..self.dim].iter().product()
    }

    fn stride(&self, axis: usize) -> usize {
        if self.dim == 2 && axis == 0 {
            self.n[1]
        } else {
            1
        }
    }

    pub fn multi(&self, lin: usize) -> [usize; MAX_DIM] {
        if self.dim == 1 {
            [lin, 0]
        } else {
            [lin / self.n[1], lin % self.n[1]]
        }
    }

    pub fn lin(&self, idx: [usize; MAX_DIM]) -> usize {
        if self.dim == 1 {
            idx[0]
        } else {
            idx[0] * self.n[1] + idx[1]
        }
    }

    /// Coordinates of the interior node with linear index `lin`.
    pub fn x(&self, lin: usize) -> Point {
        let m = self.multi(lin);
        let mut p = [0.0; MAX_DIM];
        for a in 0..self.dim {
            p[a] = self.lo[a] + (m[a] as f64 + 1.0) * self.h[a];
        }
        p
    }

    /// Distance from `x` to the boundary of the box (negative outside).
    pub fn boundary_distance(&self, x: Point) -> f64 {
        let mut d = f64::INFINITY;
        for a in 0..self.dim {
            d = d.min(x[a] - self.lo[a]).min(self.hi[a] - x[a]);
        }
        d
    }

    pub fn contains(&self, x: Point) -> bool {
        self.boundary_distance(x) > 0.0
    }
}

/// L2 and H1 norms of a field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norms {
    pub l2: f64,
    pub h1: f64,
}

/// Nodal values on a [`Grid`], extended by zero outside the interior.
#[derive(Debug, Clone)]
pub struct Field {
    pub(crate) grid: Arc<Grid>,
    pub(crate) values: Vec<f64>,
}

fn same_grid(a: &Field, b: &Field) -> bool {
    Arc::ptr_eq(&a.grid, &b.grid) || a.grid == b.grid
}

impl Field {
    pub fn zeros(grid: &Arc<Grid>) -> Field {
        Field {
            grid: grid.clone(),
            values: vec![0.0; grid.len()],
        }
    }

    pub fn from_values(grid: &Arc<Grid>, values: Vec<f64>) -> Result<Field> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} values for a grid of {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("field values must be finite"));
        }
        Ok(Field {
            grid: grid.clone(),
            values,
        })
    }

    pub fn from_fn(grid: &Arc<Grid>, f: impl Fn(Point) -> f64) -> Result<Field> {
        let values = (0..grid.len()).map(|i| f(grid.x(i))).collect();
        Field::from_values(grid, values)
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// h^d-weighted inner product; the grids must agree.
    pub fn inner(&self, other: &Field) -> Result<f64> {
        if !same_grid(self, other) {
            return Err(Error::GridMismatch("inner product across different grids".into()));
        }
        let dot: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum();
        Ok(dot * self.grid.cell())
    }

    pub fn l2(&self) -> f64 {
        let sq: f64 = self.values.iter().map(|v| v * v).sum();
        (sq * self.grid.cell()).sqrt()
    }

    /// Squared H1 seminorm: one-sided difference quotients over every edge of
    /// every grid line, boundary edges included (zero extension).
    pub fn h1_seminorm_sq(&self) -> f64 {
        let g = &self.grid;
        let mut acc = 0.0;
        for axis in 0..g.dim() {
            let stride = g.stride(axis);
            let inv_h = 1.0 / g.h(axis);
            for lin in 0..g.len() {
                let m = g.multi(lin);
                let prev = if m[axis] > 0 { self.values[lin - stride] } else { 0.0 };
                let d = (self.values[lin] - prev) * inv_h;
                acc += d * d;
                if m[axis] == g.n(axis) - 1 {
                    let top = -self.values[lin] * inv_h;
                    acc += top * top;
                }
            }
        }
        acc * g.cell()
    }

    pub fn norms(&self) -> Norms {
        let l2 = self.l2();
        Norms {
            l2,
            h1: (l2 * l2 + self.h1_seminorm_sq()).sqrt(),
        }
    }

    pub fn positive_part(&self) -> Field {
        self.map(|v| v.max(0.0))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            grid: self.grid.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Field {
        assert!(same_grid(self, other), "field grids differ");
        Field {
            grid: self.grid.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// self += a * x.
    pub fn axpy(&mut self, a: f64, x: &Field) {
        assert!(same_grid(self, x), "field grids differ");
        for (s, v) in self.values.iter_mut().zip(&x.values) {
            *s += a * v;
        }
    }

    pub fn scale_in_place(&mut self, a: f64) {
        for v in &mut self.values {
            *v *= a;
        }
    }

    /// Piecewise-multilinear interpolation of the zero-extended field.
    pub fn interpolate(&self, x: Point) -> f64 {
        let g = &self.grid;
        let mut base = [0i64; MAX_DIM];
        let mut frac = [0.0; MAX_DIM];
        for a in 0..g.dim() {
            if x[a] <= g.lo[a] || x[a] >= g.hi[a] {
                return 0.0;
            }
            let s = (x[a] - g.lo[a]) / g.h[a] - 1.0;
            let f = s.floor();
            base[a] = f as i64;
            frac[a] = s - f;
        }
        let fetch = |idx: [i64; MAX_DIM]| -> f64 {
            for a in 0..g.dim() {
                if idx[a] < 0 || idx[a] >= g.n[a] as i64 {
                    return 0.0;
                }
            }
            let mi = [idx[0] as usize, idx[1] as usize];
            self.values[g.lin(mi)]
        };
        if g.dim() == 1 {
            let lo = fetch([base[0], 0]);
            let hi = fetch([base[0] + 1, 0]);
            lo * (1.0 - frac[0]) + hi * frac[0]
        } else {
            let mut acc = 0.0;
            for (c0, w0) in [(0, 1.0 - frac[0]), (1, frac[0])] {
                for (c1, w1) in [(0, 1.0 - frac[1]), (1, frac[1])] {
                    acc += w0 * w1 * fetch([base[0] + c0, base[1] + c1]);
                }
            }
            acc
        }
    }

    /// Centered difference along `axis` with zero exterior extension.
    pub fn centered_diff(&self, axis: usize) -> Field {
        let g = &self.grid;
        let stride = g.stride(axis);
        let inv2h = 0.5 / g.h(axis);
        let mut out = vec![0.0; g.len()];
        for lin in 0..g.len() {
            let m = g.multi(lin);
            let prev = if m[axis] > 0 { self.values[lin - stride] } else { 0.0 };
            let next = if m[axis] + 1 < g.n(axis) {
                self.values[lin + stride]
            } else {
                0.0
            };
            out[lin] = (next - prev) * inv2h;
        }
        Field {
            grid: self.grid.clone(),
            values: out,
        }
    }

    /// Centered-difference gradient, one field per axis.
    pub fn gradient(&self) -> Vec<Field> {
        (0..self.grid.dim()).map(|a| self.centered_diff(a)).collect()
    }

    /// Convolution with the polynomial bump (1 - |y/eps|^2)^2, normalized so
    /// the discrete weights sum to one (constants away from the boundary
    /// layer are preserved exactly). Requires `eps >= 2 * max h`.
    pub fn mollify(&self, eps: f64) -> Result<Field> {
        let g = &self.grid;
        if !eps.is_finite() || eps <= 0.0 {
            return Err(Error::domain(format!("mollifier width must be positive, got {eps}")));
        }
        if eps < 2.0 * g.max_h() {
            return Err(Error::Resolution(format!(
                "mollifier width {eps} below two grid cells (h = {})",
                g.max_h()
            )));
        }
        let reach: Vec<i64> = (0..g.dim())
            .map(|a| (eps / g.h(a)).ceil() as i64)
            .collect();
        let mut offsets = Vec::new();
        let mut total = 0.0;
        let kernel = |r2: f64| {
            let s = 1.0 - r2 / (eps * eps);
            s * s
        };
        if g.dim() == 1 {
            for j in -reach[0]..=reach[0] {
                let y = j as f64 * g.h(0);
                if y * y < eps * eps {
                    let w = kernel(y * y);
                    offsets.push(([j, 0], w));
                    total += w;
                }
            }
        } else {
            for j0 in -reach[0]..=reach[0] {
                for j1 in -reach[1]..=reach[1] {
                    let y0 = j0 as f64 * g.h(0);
                    let y1 = j1 as f64 * g.h(1);
                    let r2 = y0 * y0 + y1 * y1;
                    if r2 < eps * eps {
                        let w = kernel(r2);
                        offsets.push(([j0, j1], w));
                        total += w;
                    }
                }
            }
        }
        let mut out = vec![0.0; g.len()];
        for lin in 0..g.len() {
            let m = g.multi(lin);
            let mut acc = 0.0;
            for &(off, w) in &offsets {
                let mut idx = [0usize; MAX_DIM];
                let mut inside = true;
                for a in 0..g.dim() {
                    let j = m[a] as i64 + off[a];
                    if j < 0 || j >= g.n(a) as i64 {
                        inside = false;
                        break;
                    }
                    idx[a] = j as usize;
                }
                if inside {
                    acc += w * self.values[g.lin(idx)];
                }
            }
            out[lin] = acc / total;
        }
        Ok(Field {
            grid: self.grid.clone(),
            values: out,
        })
    }

    /// Boundary cutoff at level `n`: 1 where the boundary distance exceeds
    /// 1/n, 0 where it is below 1/(2n), linear ramp (slope 2n) in between.
    /// The discrete gradient is bounded by 4n. Requires 1/n above one cell.
    pub fn cutoff(grid: &Arc<Grid>, level: u32) -> Result<Field> {
        if level == 0 {
            return Err(Error::domain("cutoff level must be positive"));
        }
        let n = level as f64;
        if 1.0 / n <= grid.max_h() {
            return Err(Error::Resolution(format!(
                "cutoff level {level} unresolved: 1/n = {} not above h = {}",
                1.0 / n,
                grid.max_h()
            )));
        }
        Field::from_fn(grid, |x| {
            let d = grid.boundary_distance(x);
            (2.0 * n * (d - 0.5 / n)).clamp(0.0, 1.0)
        })
    }

    /// Resamples onto another grid through interpolation (exact at shared
    /// node locations, so nested-grid restriction is exact).
    pub fn sample_on(&self, grid: &Arc<Grid>) -> Result<Field> {
        Field::from_fn(grid, |x| self.interpolate(x))
    }

    /// One row per node: coordinates then value.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        let g = &self.grid;
        if g.dim() == 1 {
            writeln!(w, "x,value")?;
        } else {
            writeln!(w, "x,y,value")?;
        }
        for lin in 0..g.len() {
            let x = g.x(lin);
            if g.dim() == 1 {
                writeln!(w, "{},{}", x[0], self.values[lin])?;
            } else {
                writeln!(w, "{},{},{}", x[0], x[1], self.values[lin])?;
            }
        }
        Ok(())
    }
}
