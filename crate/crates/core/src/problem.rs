//! Problem data: coefficients, the mixed-norm machinery, and sampling-based
//! probes of the standing hypotheses.
//!
//! The hypotheses quantify over all `(t, x, r)`; the probes here evaluate on
//! deterministic low-discrepancy sample sets and report estimates, never
//! proofs.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::lattice::{SpaceGrid, SpaceTimeField, SpatialField, TimeGrid};

/// `a(t, x) -> d x d` row-major.
pub type CoeffMat = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
/// `b(t, x) -> d`.
pub type CoeffVec = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
/// `V(t, x)` scalar.
pub type CoeffScalar = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
/// `F(t, x, r1, r2) -> d` with `r1` an m-vector, `r2` a d x m matrix.
pub type CoeffNonlin = Arc<dyn Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `g(t, x, r1, r2, r3) -> m` with `r3` a d x d x m tensor.
pub type CoeffSource = Arc<dyn Fn(f64, &[f64], &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `u0(x) -> m`.
pub type CoeffInit = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Whether fields live on the compact torus or are read as the periodic
/// extension of torus data to full space. The distinction only changes the
/// localization in the mixed norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DomainMode {
    Torus,
    PeriodicExtension,
}

/// Full problem data for the equation
/// `du/dt = (L + V) u + F(., u, grad u) . grad u + g`.
#[derive(Clone)]
pub struct ProblemSpec {
    pub dim_d: usize,
    pub dim_m: usize,
    pub horizon: f64,
    pub domain: DomainMode,
    pub diffusion_a: CoeffMat,
    pub drift_b: CoeffVec,
    pub potential_v: CoeffScalar,
    pub nonlinearity_f: CoeffNonlin,
    pub source_g: CoeffSource,
    /// True when `g` ignores its `(r1, r2, r3)` arguments.
    pub g_spatial_only: bool,
    pub initial_u0: CoeffInit,
}

#[inline]
pub(crate) fn wrap_into<'a>(x: &[f64], buf: &'a mut [f64; 8]) -> &'a [f64] {
    let d = x.len();
    for i in 0..d {
        buf[i] = x[i] - x[i].floor();
    }
    &buf[..d]
}

impl ProblemSpec {
    /// Coefficients are defined on the torus; every evaluation wraps the
    /// coordinates, so particle states may live unwrapped in R^d.
    #[inline]
    pub fn eval_a(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let mut buf = [0.0; 8];
        (self.diffusion_a)(t, wrap_into(x, &mut buf), out);
    }

    #[inline]
    pub fn eval_b(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let mut buf = [0.0; 8];
        (self.drift_b)(t, wrap_into(x, &mut buf), out);
    }

    #[inline]
    pub fn eval_v(&self, t: f64, x: &[f64]) -> f64 {
        let mut buf = [0.0; 8];
        (self.potential_v)(t, wrap_into(x, &mut buf))
    }

    #[inline]
    pub fn eval_f(&self, t: f64, x: &[f64], r1: &[f64], r2: &[f64], out: &mut [f64]) {
        let mut buf = [0.0; 8];
        (self.nonlinearity_f)(t, wrap_into(x, &mut buf), r1, r2, out);
    }

    #[inline]
    pub fn eval_g(&self, t: f64, x: &[f64], r1: &[f64], r2: &[f64], r3: &[f64], out: &mut [f64]) {
        let mut buf = [0.0; 8];
        (self.source_g)(t, wrap_into(x, &mut buf), r1, r2, r3, out);
    }

    /// Spatial-only `g`, evaluated with zero state arguments.
    #[inline]
    pub fn eval_g_spatial(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let zero_r1 = [0.0; 8];
        let zero_r2 = [0.0; 64];
        let zero_r3 = [0.0; 192];
        let m = self.dim_m;
        let dm = self.dim_d * m;
        self.eval_g(t, x, &zero_r1[..m], &zero_r2[..dm], &zero_r3[..dm * self.dim_d], out);
    }

    #[inline]
    pub fn eval_u0(&self, x: &[f64], out: &mut [f64]) {
        let mut buf = [0.0; 8];
        (self.initial_u0)(wrap_into(x, &mut buf), out);
    }

    /// Basic invariants at construction scale: dims, horizon, ellipticity
    /// and symmetry of `a` on a coarse probe set, finite `u0`.
    pub fn validate(&self) -> Result<()> {
        if self.dim_d == 0 || self.dim_m == 0 {
            return Err(Error::ConfigValue("dimensions must be >= 1".into()));
        }
        if self.dim_d > 3 {
            return Err(Error::ConfigValue(format!(
                "spatial dimension {} unsupported (1-3)",
                self.dim_d
            )));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::ConfigValue("horizon must be > 0".into()));
        }
        let d = self.dim_d;
        let mut a = vec![0.0; d * d];
        let mut x = vec![0.0; d];
        let mut u0 = vec![0.0; self.dim_m];
        for it in 0..5 {
            let t = self.horizon * it as f64 / 4.0;
            for node in 0..9 {
                kronecker(node + 11 * it, d, &mut x);
                self.eval_a(t, &x, &mut a);
                crate::linalg::sigma_from_a(&a, d, t)?;
                self.eval_u0(&x, &mut u0);
                if u0.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { what: "u0", t: 0.0, x: x.clone() });
                }
            }
        }
        Ok(())
    }
}

/// Parameter pair for the mixed norm; admissible when `d/p + 2/q < 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KatoPair {
    pub p: f64,
    pub q: f64,
}

/// True iff `p, q in (2, inf)` and `d/p + 2/q < 1`, strictly.
pub fn kato_class_check(d: usize, pair: KatoPair) -> bool {
    pair.p > 2.0 && pair.q > 2.0 && (d as f64) / pair.p + 2.0 / pair.q < 1.0
}

/// Mixed space-time norm of a scalar field sampled on a lattice:
/// `sup_z (int_t^s ||f_r 1_{B(z,1)}||_p^q dr)^(1/q)`.
///
/// On the torus the localization is dropped and this is the plain
/// `L^q`-in-time, `L^p`-in-space norm. Space integrals are node sums times
/// the cell volume; the time integral is a trapezoid rule over the sampled
/// slices, clipped to the window.
pub fn tilde_lpq_norm(
    field: &SpaceTimeField,
    pair: KatoPair,
    window: (f64, f64),
    domain: DomainMode,
) -> Result<f64> {
    let (t0, t1) = window;
    let times = &field.times;
    if times.is_empty() || field.grid.total_nodes() == 0 {
        return Err(Error::GridTooSmall("empty field".into()));
    }
    let (lo, hi) = (times[0], times[times.len() - 1]);
    if !(t0 < t1) || t0 < lo - 1e-12 || t1 > hi + 1e-12 {
        return Err(Error::WindowOutOfRange { t: t0, s: t1, horizon: hi });
    }
    match domain {
        DomainMode::Torus => {
            let phi: Vec<f64> = (0..times.len())
                .map(|si| lp_norm_p(field.slice(si), &field.grid, pair.p).powf(pair.q))
                .collect();
            Ok(integrate_window(times, &phi, t0, t1).powf(1.0 / pair.q))
        }
        DomainMode::PeriodicExtension => {
            // sup over ball centers; by periodicity it is enough to center
            // at the nodes of one period.
            let grid = &field.grid;
            let nodes = grid.total_nodes();
            let mut best: f64 = 0.0;
            let mut zc = vec![0.0; grid.dim];
            for z in 0..nodes {
                grid.coord(z, &mut zc);
                let phi: Vec<f64> = (0..times.len())
                    .map(|si| lp_ball_norm(field.slice(si), grid, &zc, pair.p).powf(pair.q))
                    .collect();
                best = best.max(integrate_window(times, &phi, t0, t1));
            }
            Ok(best.powf(1.0 / pair.q))
        }
    }
}

fn integrate_window(times: &[f64], phi: &[f64], t0: f64, t1: f64) -> f64 {
    // Trapezoid over the piecewise-linear interpolant of phi, restricted to
    // [t0, t1].
    let mut acc = 0.0;
    for k in 0..times.len() - 1 {
        let (a, b) = (times[k], times[k + 1]);
        let (lo, hi) = (a.max(t0), b.min(t1));
        if hi <= lo {
            continue;
        }
        let w = b - a;
        let pa = phi[k] + (phi[k + 1] - phi[k]) * ((lo - a) / w);
        let pb = phi[k] + (phi[k + 1] - phi[k]) * ((hi - a) / w);
        acc += 0.5 * (pa + pb) * (hi - lo);
    }
    acc
}

fn lp_norm_p(slice: &[f64], grid: &SpaceGrid, p: f64) -> f64 {
    let vol = grid.cell_volume();
    let sum: f64 = slice.iter().map(|v| v.abs().powf(p)).sum();
    (vol * sum).powf(1.0 / p)
}

fn lp_ball_norm(slice: &[f64], grid: &SpaceGrid, center: &[f64], p: f64) -> f64 {
    // Integrate |f|^p over the unit ball around `center` in R^d, reading f
    // as the periodic extension; covers the ball with shifted copies of the
    // period cell.
    let d = grid.dim;
    let vol = grid.cell_volume();
    let mut sum = 0.0;
    let mut x = vec![0.0; d];
    let shifts = 3usize.pow(d as u32);
    for node in 0..grid.total_nodes() {
        grid.coord(node, &mut x);
        let f = slice[node].abs().powf(p);
        for s in 0..shifts {
            let mut rem = s;
            let mut dist2 = 0.0;
            for (axis, xi) in x.iter().enumerate().take(d) {
                let off = (rem % 3) as f64 - 1.0;
                rem /= 3;
                let dx = xi + off - center[axis];
                dist2 += dx * dx;
            }
            if dist2 <= 1.0 {
                sum += f;
            }
        }
    }
    (vol * sum).powf(1.0 / p)
}

/// Uniform norm plus uniform norm of the central-difference gradient.
///
/// Vector values are measured in the euclidean norm; the gradient in the
/// Frobenius norm, which matches the Lipschitz-constant reading.
pub fn cb1_norm(field: &SpatialField) -> Result<f64> {
    let grid = &field.grid;
    if grid.nodes_per_axis.iter().any(|&n| n < 3) {
        return Err(Error::GridTooSmall("cb1_norm needs >= 3 nodes per axis".into()));
    }
    let m = field.m;
    let nodes = grid.total_nodes();
    let mut sup = 0.0f64;
    let mut sup_grad = 0.0f64;
    for node in 0..nodes {
        let v = field.node(node);
        let norm2: f64 = v.iter().map(|x| x * x).sum();
        sup = sup.max(norm2.sqrt());
        let mut g2 = 0.0;
        for axis in 0..grid.dim {
            let h = grid.spacing(axis);
            let up = field.node(grid.shift(node, axis, 1));
            let dn = field.node(grid.shift(node, axis, -1));
            for c in 0..m {
                let der = (up[c] - dn[c]) / (2.0 * h);
                g2 += der * der;
            }
        }
        sup_grad = sup_grad.max(g2.sqrt());
    }
    Ok(sup + sup_grad)
}

/// `k(u0, g, V) = exp(int ||V_t||_inf) (||u0||_inf + int ||g_t||_inf dt)`.
#[derive(Clone, Debug)]
pub struct KConstant {
    pub value: f64,
    /// Location of the first non-finite coefficient sample, if any.
    pub nonfinite_at: Option<(f64, Vec<f64>)>,
}

/// Evaluate the a-priori bound constant on a probe lattice. When `g` is not
/// spatial-only, `|g_t(x, 0, 0, 0)|` stands in for `||g_t||_inf`, matching
/// the constants of the state-dependent theory.
pub fn k_constant(spec: &ProblemSpec, time: &TimeGrid, space: &SpaceGrid) -> KConstant {
    let nodes = space.total_nodes();
    let m = spec.dim_m;
    let mut x = vec![0.0; space.dim];
    let mut gv = vec![0.0; m];
    let mut u0 = vec![0.0; m];

    let mut bad: Option<(f64, Vec<f64>)> = None;
    let mut v_sup = Vec::with_capacity(time.n_steps + 1);
    let mut g_sup = Vec::with_capacity(time.n_steps + 1);
    for k in 0..=time.n_steps {
        let t = time.knot(k);
        let (mut vs, mut gs) = (0.0f64, 0.0f64);
        for node in 0..nodes {
            space.coord(node, &mut x);
            let v = spec.eval_v(t, &x);
            spec.eval_g_spatial(t, &x, &mut gv);
            let gn = gv.iter().map(|a| a * a).sum::<f64>().sqrt();
            if !v.is_finite() || !gn.is_finite() {
                bad.get_or_insert((t, x.clone()));
            }
            vs = vs.max(v.abs());
            gs = gs.max(gn);
        }
        v_sup.push(vs);
        g_sup.push(gs);
    }
    let mut u0_sup = 0.0f64;
    for node in 0..nodes {
        space.coord(node, &mut x);
        spec.eval_u0(&x, &mut u0);
        let n = u0.iter().map(|a| a * a).sum::<f64>().sqrt();
        if !n.is_finite() {
            bad.get_or_insert((0.0, x.clone()));
        }
        u0_sup = u0_sup.max(n);
    }
    let times = time.slice_times();
    let int_v = integrate_window(&times, &v_sup, 0.0, time.horizon);
    let int_g = integrate_window(&times, &g_sup, 0.0, time.horizon);
    let value = if bad.is_some() {
        f64::INFINITY
    } else {
        int_v.exp() * (u0_sup + int_g)
    };
    KConstant { value, nonfinite_at: bad }
}

/// Deterministic probe set for the state arguments of `F`.
#[derive(Clone, Debug)]
pub struct ProbeBoxes {
    /// Half-width of the `r2` probe box per component.
    pub r2_halfwidth: f64,
    /// Points per scalar direction.
    pub points: usize,
}

impl Default for ProbeBoxes {
    fn default() -> Self {
        ProbeBoxes { r2_halfwidth: 10.0, points: 9 }
    }
}

/// Directions times radii covering the ball `|r| <= radius` in `R^n`.
fn ball_probe_points(n: usize, radius: f64, points: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; n]];
    if radius <= 0.0 {
        return out;
    }
    let radii: Vec<f64> = (1..=points).map(|i| radius * i as f64 / points as f64).collect();
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for axis in 0..n {
        for sgn in [-1.0, 1.0] {
            let mut d = vec![0.0; n];
            d[axis] = sgn;
            dirs.push(d);
        }
    }
    if n > 1 {
        let s = 1.0 / (n as f64).sqrt();
        dirs.push(vec![s; n]);
        dirs.push(vec![-s; n]);
    }
    for dir in &dirs {
        for &r in &radii {
            out.push(dir.iter().map(|c| c * r).collect());
        }
    }
    out
}

/// Per lattice node, `sup_{|r1| <= k} ||F_t(x, r1, .)||_inf` over the probe
/// boxes. Non-finite samples propagate as infinity entries.
pub fn fbar_field(
    spec: &ProblemSpec,
    k: f64,
    time: &TimeGrid,
    space: &SpaceGrid,
    probes: &ProbeBoxes,
) -> SpaceTimeField {
    let d = spec.dim_d;
    let m = spec.dim_m;
    let r1_set = ball_probe_points(m, k, probes.points);
    let r2_set = ball_probe_points(d * m, probes.r2_halfwidth, 3);
    let nodes = space.total_nodes();
    let times = time.slice_times();
    let mut values = vec![0.0; times.len() * nodes];
    let mut x = vec![0.0; space.dim];
    let mut f = vec![0.0; d];
    for (si, &t) in times.iter().enumerate() {
        for node in 0..nodes {
            space.coord(node, &mut x);
            let mut sup = 0.0f64;
            for r1 in &r1_set {
                for r2 in &r2_set {
                    spec.eval_f(t, &x, r1, r2, &mut f);
                    let n = f.iter().map(|a| a * a).sum::<f64>().sqrt();
                    sup = if n.is_finite() { sup.max(n) } else { f64::INFINITY };
                }
            }
            values[si * nodes + node] = sup;
        }
    }
    SpaceTimeField { times, grid: space.clone(), values }
}

/// Per-hypothesis pass flags; estimates must satisfy the stated
/// inequalities with 10% headroom.
#[derive(Clone, Copy, Debug, Default)]
pub struct PassFlags {
    pub h_v_u0: bool,
    pub h_a_b: bool,
    pub h0_f_g: bool,
    pub h_f_g: bool,
    pub h_prime_f_g: bool,
}

/// Probe report: norm estimates, sampled constants, and pass flags.
#[derive(Clone, Debug)]
pub struct AssumptionReport {
    pub kato_norm_v: f64,
    pub kato_norm_fbar: f64,
    pub kato_norm_gbar: f64,
    pub k_constant: f64,
    pub lipschitz_f_probe: f64,
    pub alpha_probe: f64,
    pub log_growth_probe: f64,
    pub ellipticity_min: f64,
    pub pass_flags: PassFlags,
    pub failure: Option<String>,
}

/// Low-discrepancy point in `[0,1)^dim` (Kronecker sequence on square-root
/// irrationals).
pub(crate) fn kronecker(i: usize, dim: usize, out: &mut [f64]) {
    const ALPHAS: [f64; 12] = [
        std::f64::consts::SQRT_2,
        1.732_050_807_568_877_2, // sqrt 3
        2.236_067_977_499_79,    // sqrt 5
        2.645_751_311_064_590_7, // sqrt 7
        3.316_624_790_355_4,     // sqrt 11
        3.605_551_275_463_989,   // sqrt 13
        4.123_105_625_617_661,   // sqrt 17
        4.358_898_943_540_674,   // sqrt 19
        4.795_831_523_312_719,   // sqrt 23
        5.385_164_807_134_504,   // sqrt 29
        5.567_764_362_830_022,   // sqrt 31
        6.082_762_530_298_219,   // sqrt 37
    ];
    let n = (i + 1) as f64;
    for (j, o) in out.iter_mut().take(dim).enumerate() {
        let v = n * ALPHAS[j % ALPHAS.len()];
        *o = v - v.floor();
    }
}

/// Sample-based verification of the standing hypotheses.
///
/// `alpha_threshold` is the stand-in for the theory's unquantified "small
/// enough alpha"; the probe flags `alpha` against it rather than guessing
/// the constant.
pub fn probe_assumptions(
    spec: &ProblemSpec,
    pair: KatoPair,
    budget: usize,
    alpha_threshold: f64,
) -> Result<AssumptionReport> {
    if budget < 100 {
        return Err(Error::ConfigValue("probe budget must be >= 100".into()));
    }
    let d = spec.dim_d;
    let m = spec.dim_m;
    let dm = d * m;
    let ddm = d * dm;
    let headroom = 1.1;

    // Probe lattice for norms and the bound constant.
    let per_axis = ((budget as f64).powf(1.0 / (d as f64 + 1.0)) as usize).clamp(9, 33);
    let space = SpaceGrid::uniform(d, per_axis)?;
    let time = TimeGrid::new(per_axis, spec.horizon)?;

    let kc = k_constant(spec, &time, &space);
    let k_val = if kc.value.is_finite() { kc.value } else { 1.0 };
    let mut failure = kc
        .nonfinite_at
        .as_ref()
        .map(|(t, x)| format!("non-finite coefficient sample at t={t}, x={x:?}"));

    let v_field = SpaceTimeField::from_fn(time.slice_times(), space.clone(), |t, x| {
        spec.eval_v(t, x)
    });
    let kato_v = tilde_lpq_norm(&v_field, pair, (0.0, spec.horizon), spec.domain)?;

    let fbar = fbar_field(spec, k_val, &time, &space, &ProbeBoxes::default());
    let kato_fbar = tilde_lpq_norm(&fbar, pair, (0.0, spec.horizon), spec.domain)?;

    let gbar = SpaceTimeField::from_fn(time.slice_times(), space.clone(), |t, x| {
        let mut g = vec![0.0; m];
        let mut buf = [0.0; 8];
        (spec.source_g)(
            t,
            wrap_into(x, &mut buf),
            &vec![0.0; m],
            &vec![0.0; dm],
            &vec![0.0; ddm],
            &mut g,
        );
        g.iter().map(|a| a * a).sum::<f64>().sqrt()
    });
    let kato_gbar = tilde_lpq_norm(&gbar, pair, (0.0, spec.horizon), spec.domain)?;

    // Finite-difference slope probes over a quasi-random sample of
    // (t, x, r1, r2, r3).
    let n_samples = budget;
    let delta = 1e-4;
    let mut lip_f = 0.0f64;
    let mut alpha = 0.0f64;
    let mut ell_min = f64::INFINITY;
    let mut b_lip = 0.0f64;
    let mut grad_a_sup = 0.0f64;

    let mut pt = vec![0.0; 1 + d + m + dm + ddm];
    let mut x = vec![0.0; d];
    let mut r1 = vec![0.0; m];
    let mut r2 = vec![0.0; dm];
    let mut r3 = vec![0.0; ddm];
    let mut f0 = vec![0.0; d];
    let mut f1 = vec![0.0; d];
    let mut g0 = vec![0.0; m];
    let mut g1 = vec![0.0; m];
    let mut amat = vec![0.0; d * d];
    let mut amat2 = vec![0.0; d * d];
    let mut bvec = vec![0.0; d];
    let mut bvec2 = vec![0.0; d];

    for i in 0..n_samples {
        kronecker(i, pt.len(), &mut pt);
        let t = pt[0] * spec.horizon;
        for j in 0..d {
            x[j] = pt[1 + j];
        }
        for j in 0..m {
            r1[j] = (pt[1 + d + j] * 2.0 - 1.0) * 0.95 * k_val;
        }
        for j in 0..dm {
            r2[j] = (pt[1 + d + m + j] * 2.0 - 1.0) * 10.0;
        }
        for j in 0..ddm {
            r3[j] = (pt[1 + d + m + dm + j] * 2.0 - 1.0) * 10.0;
        }

        // Lipschitz slope of F in (r1, r2), one coordinate at a time.
        spec.eval_f(t, &x, &r1, &r2, &mut f0);
        if f0.iter().any(|v| !v.is_finite()) {
            failure.get_or_insert(format!("non-finite F at t={t}, x={x:?}"));
        }
        let j1 = i % m;
        r1[j1] += delta;
        spec.eval_f(t, &x, &r1, &r2, &mut f1);
        r1[j1] -= delta;
        lip_f = lip_f.max(diff_norm(&f1, &f0) / delta);
        let j2 = i % dm;
        r2[j2] += delta;
        spec.eval_f(t, &x, &r1, &r2, &mut f1);
        r2[j2] -= delta;
        lip_f = lip_f.max(diff_norm(&f1, &f0) / delta);

        // Slope of g in r3.
        spec.eval_g(t, &x, &r1, &r2, &r3, &mut g0);
        if g0.iter().any(|v| !v.is_finite()) {
            failure.get_or_insert(format!("non-finite g at t={t}, x={x:?}"));
        }
        let j3 = i % ddm.max(1);
        if ddm > 0 {
            r3[j3] += delta;
            spec.eval_g(t, &x, &r1, &r2, &r3, &mut g1);
            r3[j3] -= delta;
            alpha = alpha.max(diff_norm(&g1, &g0) / delta);
        }

        // Ellipticity, |grad a| and the drift Lipschitz constant.
        spec.eval_a(t, &x, &mut amat);
        let (w, _) = crate::linalg::sym_eig(&amat, d);
        for &wk in &w {
            ell_min = ell_min.min(wk);
        }
        spec.eval_b(t, &x, &mut bvec);
        let ax = i % d;
        let old = x[ax];
        x[ax] += delta;
        spec.eval_a(t, &x, &mut amat2);
        spec.eval_b(t, &x, &mut bvec2);
        x[ax] = old;
        grad_a_sup = grad_a_sup.max(diff_norm(&amat2, &amat) / delta);
        b_lip = b_lip.max(diff_norm(&bvec2, &bvec) / delta);
    }

    // Exponent fit for the log-growth condition: slope of
    // log(excess/(e+s)) against log log(e+s) over increasing state sizes,
    // with r3 = 0.
    let theta = {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (j, s) in [1.0, 3.0, 10.0, 30.0, 100.0, 300.0, 1000.0].iter().enumerate() {
            let mut worst: f64 = 0.0;
            for i in 0..16 {
                kronecker(97 * j + i, 1 + d, &mut pt);
                let t = pt[0] * spec.horizon;
                for jj in 0..d {
                    x[jj] = pt[1 + jj];
                }
                for v in r1.iter_mut() {
                    *v = s / (m as f64).sqrt();
                }
                for v in r2.iter_mut() {
                    *v = s / (dm as f64).sqrt();
                }
                r3.fill(0.0);
                spec.eval_g(t, &x, &r1, &r2, &r3, &mut g0);
                let mut zr1 = vec![0.0; m];
                let mut zr2 = vec![0.0; dm];
                std::mem::swap(&mut zr1, &mut r1);
                std::mem::swap(&mut zr2, &mut r2);
                spec.eval_g(t, &x, &r1, &r2, &r3, &mut g1);
                std::mem::swap(&mut zr1, &mut r1);
                std::mem::swap(&mut zr2, &mut r2);
                worst = worst.max(diff_norm(&g0, &g1));
            }
            let sn = 2.0 * s; // |r1| + |r2|
            if worst > 1e-14 {
                xs.push(((std::f64::consts::E + sn).ln()).ln());
                ys.push((worst / (std::f64::consts::E + sn)).ln());
            }
        }
        ls_slope(&xs, &ys).max(0.0)
    };

    let in_class = kato_class_check(d, pair);
    let pass_flags = PassFlags {
        h_v_u0: failure.is_none() && in_class && kato_v.is_finite(),
        h_a_b: failure.is_none()
            && ell_min > 0.0
            && b_lip.is_finite()
            && grad_a_sup.is_finite(),
        h0_f_g: failure.is_none()
            && kato_fbar.is_finite()
            && kato_gbar.is_finite()
            && lip_f.is_finite(),
        h_f_g: failure.is_none()
            && lip_f.is_finite()
            && alpha * headroom <= alpha_threshold,
        h_prime_f_g: failure.is_none()
            && theta * headroom <= 0.5
            && alpha * headroom <= alpha_threshold,
    };

    Ok(AssumptionReport {
        kato_norm_v: kato_v,
        kato_norm_fbar: kato_fbar,
        kato_norm_gbar: kato_gbar,
        k_constant: kc.value,
        lipschitz_f_probe: lip_f,
        alpha_probe: alpha,
        log_growth_probe: theta,
        ellipticity_min: ell_min,
        pass_flags,
        failure,
    })
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return 0.0;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(ys.iter()) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{build, CatalogParams};
    use std::sync::Arc;

    const TWO_PI: f64 = std::f64::consts::TAU;

    #[test]
    fn kato_class_membership() {
        // 1/3 + 2/5 = 11/15 < 1
        assert!(kato_class_check(1, KatoPair { p: 3.0, q: 5.0 }));
        // boundary p = 2 excluded
        assert!(!kato_class_check(2, KatoPair { p: 2.0, q: 2.0 }));
        // 4/8 + 2/4 = 1, not strict
        assert!(!kato_class_check(4, KatoPair { p: 8.0, q: 4.0 }));
    }

    fn grid_1d(nodes: usize) -> SpaceGrid {
        SpaceGrid::uniform(1, nodes).unwrap()
    }

    #[test]
    fn mixed_norm_reference_values() {
        let grid = grid_1d(32);
        let times: Vec<f64> = (0..=40).map(|k| k as f64 / 40.0).collect();
        let pair = KatoPair { p: 3.0, q: 3.0 };

        let zero = SpaceTimeField::from_fn(times.clone(), grid.clone(), |_, _| 0.0);
        assert_eq!(tilde_lpq_norm(&zero, pair, (0.0, 1.0), DomainMode::Torus).unwrap(), 0.0);

        let one = SpaceTimeField::from_fn(times.clone(), grid.clone(), |_, _| 1.0);
        for (p, q) in [(3.0, 3.0), (4.0, 7.0)] {
            let n = tilde_lpq_norm(&one, KatoPair { p, q }, (0.0, 1.0), DomainMode::Torus)
                .unwrap();
            assert!((n - 1.0).abs() < 1e-12, "unit constant gives {n}");
        }

        // f(t, x) = t with q = 3: (int_0^1 t^3 dt)^{1/3} = 4^{-1/3}, up to
        // the trapezoid error of the time quadrature.
        let ramp = SpaceTimeField::from_fn(times, grid, |t, _| t);
        let n = tilde_lpq_norm(&ramp, KatoPair { p: 5.0, q: 3.0 }, (0.0, 1.0), DomainMode::Torus)
            .unwrap();
        let want = 0.25f64.powf(1.0 / 3.0);
        let dt: f64 = 1.0 / 40.0;
        assert!((n - want).abs() < dt * dt * 2.0, "{n} vs {want}");
    }

    #[test]
    fn mixed_norm_periodic_extension_unit_ball() {
        // d = 1 periodic extension of f = 1: the unit ball is an interval
        // of length 2, so the localized L^p mass is 2^{1/p}.
        let grid = grid_1d(64);
        let times: Vec<f64> = (0..=10).map(|k| k as f64 / 10.0).collect();
        let one = SpaceTimeField::from_fn(times, grid, |_, _| 1.0);
        let pair = KatoPair { p: 3.0, q: 4.0 };
        let n = tilde_lpq_norm(&one, pair, (0.0, 1.0), DomainMode::PeriodicExtension).unwrap();
        let want = 2.0f64.powf(1.0 / 3.0);
        assert!((n - want).abs() < 0.02 * want, "{n} vs {want}");
    }

    #[test]
    fn mixed_norm_rejects_bad_windows() {
        let grid = grid_1d(8);
        let f = SpaceTimeField::from_fn(vec![0.0, 1.0], grid, |_, _| 1.0);
        let pair = KatoPair { p: 3.0, q: 3.0 };
        assert!(tilde_lpq_norm(&f, pair, (0.0, 2.0), DomainMode::Torus).is_err());
        assert!(tilde_lpq_norm(&f, pair, (0.5, 0.5), DomainMode::Torus).is_err());
    }

    #[test]
    fn cb1_norm_reference_values() {
        let grid = grid_1d(256);
        let zero = SpatialField::zeros(grid.clone(), 1);
        assert_eq!(cb1_norm(&zero).unwrap(), 0.0);

        let constant = SpatialField::from_fn(grid.clone(), 1, |_, out| out[0] = -2.5);
        assert!((cb1_norm(&constant).unwrap() - 2.5).abs() < 1e-12);

        let sin = SpatialField::from_fn(grid, 1, |x, out| out[0] = (TWO_PI * x[0]).sin());
        let h = 1.0 / 256.0;
        let want = 1.0 + TWO_PI;
        assert!(
            (cb1_norm(&sin).unwrap() - want).abs() < TWO_PI.powi(3) * h * h,
            "{} vs {want}",
            cb1_norm(&sin).unwrap()
        );

        let tiny = SpaceGrid::new(vec![2]);
        assert!(tiny.is_err(), "grids below 3 nodes are rejected at construction");
    }

    #[test]
    fn k_constant_reference_values() {
        let time = TimeGrid::new(50, 1.0).unwrap();
        let space = grid_1d(16);
        let mut p = CatalogParams::default();
        p.horizon = 1.0;
        let mut spec = build("heat", &p).unwrap();
        spec.initial_u0 = Arc::new(|_, out| out[0] = 1.0);
        assert!((k_constant(&spec, &time, &space).value - 1.0).abs() < 1e-12);

        let ln2 = std::f64::consts::LN_2;
        spec.potential_v = Arc::new(move |_, _| ln2);
        assert!((k_constant(&spec, &time, &space).value - 2.0).abs() < 1e-12);

        spec.potential_v = Arc::new(|_, _| 0.0);
        spec.source_g = Arc::new(|_, _, _, _, _, out| out[0] = 3.0);
        assert!((k_constant(&spec, &time, &space).value - 4.0).abs() < 1e-12);
    }

    #[test]
    fn k_constant_reports_nonfinite_location() {
        let time = TimeGrid::new(10, 1.0).unwrap();
        let space = grid_1d(8);
        let mut spec = build("heat", &CatalogParams::default()).unwrap();
        spec.potential_v = Arc::new(|t, x| if t > 0.5 && x[0] > 0.5 { f64::NAN } else { 0.0 });
        let k = k_constant(&spec, &time, &space);
        assert!(k.value.is_infinite());
        let (t, x) = k.nonfinite_at.unwrap();
        assert!(t > 0.5 && x[0] > 0.5);
    }

    #[test]
    fn fbar_reference_values() {
        let time = TimeGrid::new(4, 1.0).unwrap();
        let space = grid_1d(8);
        let probes = ProbeBoxes::default();
        let mut spec = build("heat", &CatalogParams::default()).unwrap();

        // F = 0
        let f = fbar_field(&spec, 1.0, &time, &space, &probes);
        assert!(f.values.iter().all(|&v| v == 0.0));

        // F = sin(r1) with k = pi/2: the probed sup is sin(pi/2) = 1
        spec.nonlinearity_f = Arc::new(|_, _, r1, _, out| out[0] = r1[0].sin());
        let f = fbar_field(&spec, std::f64::consts::FRAC_PI_2, &time, &space, &probes);
        for &v in &f.values {
            assert!((v - 1.0).abs() < 1e-12, "{v}");
        }

        // factored form h(t, x) beta(r1): sup factorizes
        spec.nonlinearity_f =
            Arc::new(|_, x, r1, _, out| out[0] = (TWO_PI * x[0]).cos() * r1[0].sin());
        let f = fbar_field(&spec, std::f64::consts::FRAC_PI_2, &time, &space, &probes);
        let mut x = [0.0];
        let nodes = space.total_nodes();
        for (i, &v) in f.values.iter().enumerate() {
            space.coord(i % nodes, &mut x);
            let want = (TWO_PI * x[0]).cos().abs();
            assert!((v - want).abs() < 1e-12, "node {i}: {v} vs {want}");
        }
    }

    #[test]
    fn probe_linear_heat_all_pass() {
        let spec = build("heat", &CatalogParams::default()).unwrap();
        let report =
            probe_assumptions(&spec, KatoPair { p: 4.0, q: 4.0 }, 200, 0.1).unwrap();
        let f = report.pass_flags;
        assert!(f.h_v_u0 && f.h_a_b && f.h0_f_g && f.h_f_g && f.h_prime_f_g);
        assert_eq!(report.lipschitz_f_probe, 0.0);
        assert_eq!(report.alpha_probe, 0.0);
        assert!(report.ellipticity_min > 0.4);
    }

    #[test]
    fn probe_alpha_slope_of_linear_g() {
        let mut spec = build("heat", &CatalogParams::default()).unwrap();
        spec.source_g = Arc::new(|_, _, _, _, r3, out| out[0] = r3[0]);
        spec.g_spatial_only = false;
        let report =
            probe_assumptions(&spec, KatoPair { p: 4.0, q: 4.0 }, 200, 0.1).unwrap();
        assert!(
            (report.alpha_probe - 1.0).abs() < 0.05,
            "alpha probe {}",
            report.alpha_probe
        );
        // alpha = 1 is far above the 0.1 smallness threshold
        assert!(!report.pass_flags.h_f_g);
    }

    #[test]
    fn probe_recovers_lipschitz_constant() {
        // F = 2 sin(r1) has Lipschitz constant 2; finite-difference probes
        // on a sample set underestimate it slightly.
        let mut spec = build("heat", &CatalogParams::default()).unwrap();
        spec.nonlinearity_f = Arc::new(|_, _, r1, _, out| out[0] = 2.0 * r1[0].sin());
        let report =
            probe_assumptions(&spec, KatoPair { p: 4.0, q: 4.0 }, 500, 0.1).unwrap();
        assert!(
            report.lipschitz_f_probe >= 1.8 && report.lipschitz_f_probe <= 2.0 + 1e-9,
            "lipschitz probe {}",
            report.lipschitz_f_probe
        );
    }

    #[test]
    fn probe_flags_nonfinite_coefficients() {
        let mut spec = build("heat", &CatalogParams::default()).unwrap();
        spec.nonlinearity_f = Arc::new(|_, x, _, _, out| {
            out[0] = if x[0] > 0.9 { f64::INFINITY } else { 0.0 }
        });
        let report =
            probe_assumptions(&spec, KatoPair { p: 4.0, q: 4.0 }, 300, 0.1).unwrap();
        assert!(report.failure.is_some());
        assert!(!report.pass_flags.h0_f_g);
    }
}
