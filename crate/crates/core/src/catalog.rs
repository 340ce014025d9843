//! Built-in problem catalog and tabulated coefficients.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::lattice::{interpolate_multilinear, SpaceGrid, SpaceTimeField};
use crate::problem::{CoeffScalar, DomainMode, ProblemSpec};
use crate::transforms::KpzProblem;

const TWO_PI: f64 = std::f64::consts::TAU;

/// Shared knobs for the catalog entries; unused fields are ignored by
/// entries that do not have the corresponding coefficient.
#[derive(Clone, Debug)]
pub struct CatalogParams {
    pub horizon: f64,
    pub diffusion: f64,
    pub u0_amp: f64,
    pub v_amp: f64,
    pub f_amp: f64,
    pub g_amp: f64,
    pub beta: f64,
}

impl Default for CatalogParams {
    fn default() -> Self {
        CatalogParams {
            horizon: 0.1,
            diffusion: 0.5,
            u0_amp: 1.0,
            v_amp: 0.0,
            f_amp: 0.0,
            g_amp: 0.0,
            beta: 1.0,
        }
    }
}

fn base_heat(p: &CatalogParams) -> ProblemSpec {
    let a0 = p.diffusion;
    let amp = p.u0_amp;
    ProblemSpec {
        dim_d: 1,
        dim_m: 1,
        horizon: p.horizon,
        domain: DomainMode::Torus,
        diffusion_a: Arc::new(move |_, _, out| out[0] = a0),
        drift_b: Arc::new(|_, _, out| out.fill(0.0)),
        potential_v: Arc::new(|_, _| 0.0),
        nonlinearity_f: Arc::new(|_, _, _, _, out| out.fill(0.0)),
        source_g: Arc::new(|_, _, _, _, _, out| out.fill(0.0)),
        g_spatial_only: true,
        initial_u0: Arc::new(move |x, out| out[0] = amp * (TWO_PI * x[0]).sin()),
    }
}

/// One-dimensional catalog problems on the unit torus.
///
/// * `heat` - pure diffusion, `u0 = sin(2 pi x)`.
/// * `const-potential` - heat plus the constant potential `v_amp`.
/// * `factored-f` - transport coefficient `f_amp * sin(r1)` with the
///   potential `v_amp cos(2 pi x)` and spatial source `g_amp cos(2 pi x)`.
/// * `ns-type` - `F(., u) . grad u = f_amp u u_x` with source
///   `v_amp cos(2 pi x)` (the `beta = 0` member of the KPZ family).
/// * `kpz` - quadratic-gradient equation, solved through Cole-Hopf.
pub fn build(name: &str, p: &CatalogParams) -> Result<ProblemSpec> {
    match name {
        "heat" => Ok(base_heat(p)),
        "const-potential" => {
            let mut spec = base_heat(p);
            let c = p.v_amp;
            spec.potential_v = Arc::new(move |_, _| c);
            Ok(spec)
        }
        "factored-f" => {
            let mut spec = base_heat(p);
            let (fa, va, ga) = (p.f_amp, p.v_amp, p.g_amp);
            spec.nonlinearity_f = Arc::new(move |_, _, r1, _, out| out[0] = fa * r1[0].sin());
            spec.potential_v = Arc::new(move |_, x| va * (TWO_PI * x[0]).cos());
            spec.source_g = Arc::new(move |_, x, _, _, _, out| out[0] = ga * (TWO_PI * x[0]).cos());
            Ok(spec)
        }
        "ns-type" => Ok(build_kpz(name, p)?.direct_problem()),
        "kpz" => Ok(build_kpz(name, p)?.direct_problem()),
        other => Err(Error::ConfigValue(format!("unknown catalog problem '{other}'"))),
    }
}

/// KPZ-family data for the `kpz` and `ns-type` entries.
pub fn build_kpz(name: &str, p: &CatalogParams) -> Result<KpzProblem> {
    let beta = match name {
        "kpz" => p.beta,
        "ns-type" => 0.0,
        other => return Err(Error::ConfigValue(format!("'{other}' is not a KPZ-family problem"))),
    };
    let a0 = p.diffusion;
    let (ua, va, fa) = (p.u0_amp, p.v_amp, p.f_amp);
    Ok(KpzProblem {
        dim_d: 1,
        dim_m: 1,
        horizon: p.horizon,
        domain: DomainMode::Torus,
        diffusion_a: Arc::new(move |_, _, out| out[0] = a0),
        drift_b: Arc::new(|_, _, out| out.fill(0.0)),
        nonlinearity_f: Arc::new(move |_, _, r1, out| out[0] = fa * r1[0]),
        beta,
        v_bar: Arc::new(move |_, x| va * (TWO_PI * x[0]).cos()),
        initial_u0: Arc::new(move |x, out| out[0] = ua * (TWO_PI * x[0]).sin()),
    })
}

/// Wrap a tabulated space-time table into a scalar coefficient, with
/// multilinear interpolation in space and linear interpolation in time.
pub fn tabulated_scalar(table: SpaceTimeField) -> CoeffScalar {
    let table = Arc::new(table);
    Arc::new(move |t, x| {
        let (lo, hi, w) = crate::lattice::time_weights(&table.times, t);
        let mut a = [0.0];
        let mut b = [0.0];
        interpolate_multilinear(&table.grid, 1, table.slice(lo), x, &mut a);
        if hi == lo {
            return a[0];
        }
        interpolate_multilinear(&table.grid, 1, table.slice(hi), x, &mut b);
        (1.0 - w) * a[0] + w * b[0]
    })
}

/// Parse a scalar coefficient table from CSV text with rows
/// `t, x1[, x2[, x3]], value`; the sample points must fill a regular
/// (time x space) lattice whose space part matches `grid`.
pub fn tabulated_from_csv(text: &str, dim: usize, grid: &SpaceGrid) -> Result<SpaceTimeField> {
    let mut rows: Vec<(f64, Vec<f64>, f64)> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != dim + 2 {
            return Err(Error::Config {
                line: ln + 1,
                msg: format!("expected {} columns, got {}", dim + 2, cells.len()),
            });
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::Config { line: ln + 1, msg: format!("bad number '{s}'") })
        };
        let t = parse(cells[0])?;
        let x: Vec<f64> = cells[1..1 + dim].iter().map(|c| parse(c)).collect::<Result<_>>()?;
        rows.push((t, x, parse(cells[dim + 1])?));
    }
    if rows.is_empty() {
        return Err(Error::ConfigValue("empty coefficient table".into()));
    }
    let mut times: Vec<f64> = rows.iter().map(|r| r.0).collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    let nodes = grid.total_nodes();
    if rows.len() != times.len() * nodes {
        return Err(Error::ConfigValue(format!(
            "table has {} rows, want {} times x {} nodes",
            rows.len(),
            times.len(),
            nodes
        )));
    }
    let mut values = vec![f64::NAN; times.len() * nodes];
    let mut idx = vec![0usize; dim];
    for (t, x, v) in rows {
        let si = times
            .iter()
            .position(|&tt| (tt - t).abs() < 1e-12)
            .expect("time present after dedup");
        for (axis, &xa) in x.iter().enumerate() {
            let n = grid.nodes_per_axis[axis] as f64;
            let pos = (xa - xa.floor()) * n;
            let i = pos.round() as usize % grid.nodes_per_axis[axis];
            if (pos - pos.round()).abs() > 1e-6 {
                return Err(Error::ConfigValue(format!(
                    "sample x={xa} is off-lattice for {} nodes",
                    grid.nodes_per_axis[axis]
                )));
            }
            idx[axis] = i;
        }
        values[si * nodes + grid.linear_index(&idx)] = v;
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::ConfigValue("coefficient table does not fill the lattice".into()));
    }
    Ok(SpaceTimeField { times, grid: grid.clone(), values })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_names_resolve() {
        let p = CatalogParams::default();
        for name in ["heat", "const-potential", "factored-f", "ns-type", "kpz"] {
            let spec = build(name, &p).unwrap();
            spec.validate().unwrap();
        }
        assert!(build("no-such", &p).is_err());
    }

    #[test]
    fn tabulated_round_trip() {
        let grid = SpaceGrid::uniform(1, 4).unwrap();
        let mut csv = String::from("# t, x, value\n");
        for (si, t) in [0.0, 1.0].iter().enumerate() {
            for i in 0..4 {
                let x = i as f64 / 4.0;
                csv.push_str(&format!("{t}, {x}, {}\n", si as f64 * 10.0 + i as f64));
            }
        }
        let table = tabulated_from_csv(&csv, 1, &grid).unwrap();
        let coeff = tabulated_scalar(table);
        assert!((coeff(0.0, &[0.25]) - 1.0).abs() < 1e-12);
        assert!((coeff(1.0, &[0.5]) - 12.0).abs() < 1e-12);
        // halfway in time, halfway between nodes 0 and 1
        assert!((coeff(0.5, &[0.125]) - 0.5 * (0.5 + 10.5)).abs() < 1e-12);
    }

    #[test]
    fn tabulated_rejects_partial_lattice() {
        let grid = SpaceGrid::uniform(1, 4).unwrap();
        assert!(tabulated_from_csv("0, 0.0, 1.0\n", 1, &grid).is_err());
    }
}
