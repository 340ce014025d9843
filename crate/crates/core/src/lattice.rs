//! Shared lattice types: the uniform time grid and the periodic space grid.
//!
//! These are the only types shared between the Monte Carlo stack and the
//! finite-difference oracle; every stencil and stepping rule lives with its
//! own solver.

use crate::error::{Error, Result};

/// Uniform grid of `n_steps` steps on `[0, horizon]`.
///
/// Knot `k` is computed as `k * T / n`, never by accumulating the step size,
/// so the last knot equals the horizon exactly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    pub n_steps: usize,
    pub horizon: f64,
}

impl TimeGrid {
    pub fn new(n_steps: usize, horizon: f64) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::GridTooSmall("n_steps must be >= 1".into()));
        }
        if !(horizon > 0.0) {
            return Err(Error::ConfigValue(format!("horizon must be > 0, got {horizon}")));
        }
        Ok(TimeGrid { n_steps, horizon })
    }

    #[inline]
    pub fn knot(&self, k: usize) -> f64 {
        k as f64 * self.horizon / self.n_steps as f64
    }

    #[inline]
    pub fn step(&self, k: usize) -> f64 {
        self.knot(k + 1) - self.knot(k)
    }

    pub fn step_size(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn slice_times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.knot(k)).collect()
    }
}

/// Periodic lattice on the unit torus, period 1 per axis.
///
/// Node `i` on an axis with `n` nodes sits at `i / n`; linear indices are
/// row-major with axis 0 slowest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpaceGrid {
    pub dim: usize,
    pub nodes_per_axis: Vec<usize>,
}

impl SpaceGrid {
    pub fn new(nodes_per_axis: Vec<usize>) -> Result<Self> {
        if nodes_per_axis.is_empty() {
            return Err(Error::GridTooSmall("need at least one axis".into()));
        }
        if nodes_per_axis.iter().any(|&n| n < 3) {
            return Err(Error::GridTooSmall(
                "need >= 3 nodes per axis for periodic differencing".into(),
            ));
        }
        Ok(SpaceGrid { dim: nodes_per_axis.len(), nodes_per_axis })
    }

    pub fn uniform(dim: usize, nodes: usize) -> Result<Self> {
        Self::new(vec![nodes; dim])
    }

    pub fn total_nodes(&self) -> usize {
        self.nodes_per_axis.iter().product()
    }

    #[inline]
    pub fn spacing(&self, axis: usize) -> f64 {
        1.0 / self.nodes_per_axis[axis] as f64
    }

    /// Volume element of one cell.
    pub fn cell_volume(&self) -> f64 {
        (0..self.dim).map(|a| self.spacing(a)).product()
    }

    /// Decompose a linear node index into per-axis indices.
    pub fn multi_index(&self, mut node: usize, out: &mut [usize]) {
        for axis in (0..self.dim).rev() {
            let n = self.nodes_per_axis[axis];
            out[axis] = node % n;
            node /= n;
        }
    }

    pub fn linear_index(&self, idx: &[usize]) -> usize {
        let mut lin = 0;
        for axis in 0..self.dim {
            lin = lin * self.nodes_per_axis[axis] + idx[axis] % self.nodes_per_axis[axis];
        }
        lin
    }

    /// Coordinates of a node, written into `out`.
    pub fn coord(&self, node: usize, out: &mut [f64]) {
        let mut rem = node;
        for axis in (0..self.dim).rev() {
            let n = self.nodes_per_axis[axis];
            out[axis] = (rem % n) as f64 / n as f64;
            rem /= n;
        }
    }

    /// Neighbor of `node` shifted by `offset` steps along `axis`, wrapping.
    pub fn shift(&self, node: usize, axis: usize, offset: isize) -> usize {
        let n = self.nodes_per_axis[axis] as isize;
        let mut stride = 1;
        for a in (axis + 1)..self.dim {
            stride *= self.nodes_per_axis[a];
        }
        let along = (node / stride) % self.nodes_per_axis[axis];
        let wrapped = (along as isize + offset).rem_euclid(n);
        (node as isize + (wrapped - along as isize) * stride as isize) as usize
    }
}

/// Wrap a point into `[0, 1)^d`.
#[inline]
pub fn wrap_unit(x: &[f64], out: &mut [f64]) {
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        *o = v - v.floor();
    }
}

/// `m`-vector field on a space grid; node-major, component-minor storage.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialField {
    pub grid: SpaceGrid,
    pub m: usize,
    pub values: Vec<f64>,
}

impl SpatialField {
    pub fn zeros(grid: SpaceGrid, m: usize) -> Self {
        let n = grid.total_nodes() * m;
        SpatialField { grid, m, values: vec![0.0; n] }
    }

    pub fn from_fn(grid: SpaceGrid, m: usize, f: impl Fn(&[f64], &mut [f64])) -> Self {
        let nodes = grid.total_nodes();
        let mut values = vec![0.0; nodes * m];
        let mut x = vec![0.0; grid.dim];
        for node in 0..nodes {
            grid.coord(node, &mut x);
            f(&x, &mut values[node * m..(node + 1) * m]);
        }
        SpatialField { grid, m, values }
    }

    #[inline]
    pub fn node(&self, node: usize) -> &[f64] {
        &self.values[node * self.m..(node + 1) * self.m]
    }

    /// Periodic multilinear interpolation at `x` (any point in R^d).
    pub fn interpolate(&self, x: &[f64], out: &mut [f64]) {
        interpolate_multilinear(&self.grid, self.m, &self.values, x, out);
    }
}

/// Scalar-per-(slice,node) space-time field; slice-major storage.
#[derive(Clone, Debug, PartialEq)]
pub struct SpaceTimeField {
    pub times: Vec<f64>,
    pub grid: SpaceGrid,
    pub values: Vec<f64>,
}

impl SpaceTimeField {
    pub fn from_fn(times: Vec<f64>, grid: SpaceGrid, f: impl Fn(f64, &[f64]) -> f64) -> Self {
        let nodes = grid.total_nodes();
        let mut values = vec![0.0; times.len() * nodes];
        let mut x = vec![0.0; grid.dim];
        for (si, &t) in times.iter().enumerate() {
            for node in 0..nodes {
                grid.coord(node, &mut x);
                values[si * nodes + node] = f(t, &x);
            }
        }
        SpaceTimeField { times, grid, values }
    }

    #[inline]
    pub fn slice(&self, si: usize) -> &[f64] {
        let n = self.grid.total_nodes();
        &self.values[si * n..(si + 1) * n]
    }
}

/// Periodic multilinear interpolation over a node-major, component-minor
/// value table. Works for any `d`; cost 2^d table reads.
pub fn interpolate_multilinear(
    grid: &SpaceGrid,
    m: usize,
    values: &[f64],
    x: &[f64],
    out: &mut [f64],
) {
    let d = grid.dim;
    debug_assert!(d <= 8, "interpolation supports d <= 8");
    let mut base = [0usize; 8];
    let mut frac = [0.0f64; 8];
    for axis in 0..d {
        let n = grid.nodes_per_axis[axis];
        let xa = x[axis] - x[axis].floor();
        let scaled = xa * n as f64;
        let cell = (scaled.floor() as usize).min(n - 1);
        base[axis] = cell;
        frac[axis] = scaled - cell as f64;
    }
    out.fill(0.0);
    let corners = 1usize << d;
    let mut idx = [0usize; 8];
    for corner in 0..corners {
        let mut weight = 1.0;
        for axis in 0..d {
            let hi = (corner >> axis) & 1 == 1;
            let n = grid.nodes_per_axis[axis];
            idx[axis] = if hi { (base[axis] + 1) % n } else { base[axis] };
            weight *= if hi { frac[axis] } else { 1.0 - frac[axis] };
        }
        if weight == 0.0 {
            continue;
        }
        let lin = grid.linear_index(&idx[..d]);
        let row = &values[lin * m..lin * m + m];
        for c in 0..m {
            out[c] += weight * row[c];
        }
    }
}

/// Linear interpolation in time over sorted knots; clamps at the ends.
pub fn time_weights(times: &[f64], t: f64) -> (usize, usize, f64) {
    if t <= times[0] {
        return (0, 0, 0.0);
    }
    let last = times.len() - 1;
    if t >= times[last] {
        return (last, last, 0.0);
    }
    let mut lo = 0;
    let mut hi = last;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if times[mid] <= t {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let w = (t - times[lo]) / (times[hi] - times[lo]);
    (lo, hi, w)
}
