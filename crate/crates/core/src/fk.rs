//! Feynman-Kac estimators: the backward functional `psi`, the weighted
//! semigroup, the integral functional, and the stochastic-integral gradient
//! representation.
//!
//! Everything here averages per-particle functionals produced by the
//! [`crate::sde`] kernel; estimators are pure and node-parallel, and reuse
//! of `(slice, node)` stream keys gives common random numbers across calls.

use crate::error::{Error, Result};
use crate::lattice::{interpolate_multilinear, time_weights, SpaceGrid, SpatialField, TimeGrid};
use crate::problem::ProblemSpec;
use crate::sde::{run_particle, DriftExtra, EnsembleParams, PathEnsemble};

/// `exp` of the running potential integral; the zero-potential case is the
/// common one and skips the call (`exp(0) = 1` exactly, so this is not an
/// approximation).
#[inline]
fn fk_weight(fk_exponent: f64) -> f64 {
    if fk_exponent == 0.0 {
        1.0
    } else {
        fk_exponent.exp()
    }
}

/// How the `gradients` block of a [`PsiField`] was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradientMode {
    GridDifference,
    Bismut,
}

/// Monte Carlo estimate of `psi` (and optionally its gradient) on a
/// (time-slice x space-grid) lattice. This is the iterate of the
/// fixed-point map, and via `u_t = psi_{T-t}` also the PDE solution.
#[derive(Clone, Debug)]
pub struct PsiField {
    /// Fine simulation grid underlying the slices.
    pub grid: TimeGrid,
    /// Absolute fine-grid step index of each slice, ascending, ending at
    /// `grid.n_steps`.
    pub slice_steps: Vec<usize>,
    pub slice_times: Vec<f64>,
    pub space: SpaceGrid,
    pub m: usize,
    /// Slice-major, node-major, component-minor.
    pub values: Vec<f64>,
    /// Per (slice, node): d x m entries, axis-major component-minor.
    pub gradients: Option<Vec<f64>>,
    /// Monte Carlo standard error, same shape as `values`.
    pub stderr: Vec<f64>,
    pub provenance: GradientMode,
}

impl PsiField {
    pub fn n_slices(&self) -> usize {
        self.slice_steps.len()
    }

    #[inline]
    pub fn value(&self, slice: usize, node: usize) -> &[f64] {
        let off = (slice * self.space.total_nodes() + node) * self.m;
        &self.values[off..off + self.m]
    }

    #[inline]
    pub fn gradient(&self, slice: usize, node: usize) -> Option<&[f64]> {
        let dm = self.space.dim * self.m;
        self.gradients
            .as_ref()
            .map(|g| &g[(slice * self.space.total_nodes() + node) * dm..][..dm])
    }

    pub fn max_abs(&self) -> f64 {
        let m = self.m;
        self.values
            .chunks_exact(m)
            .map(|v| v.iter().map(|a| a * a).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    pub fn max_stderr(&self) -> f64 {
        self.stderr.iter().fold(0.0, |acc, &x| acc.max(x.abs()))
    }

    pub fn assert_finite(&self) -> Result<()> {
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "psi field", t: f64::NAN, x: vec![] });
        }
        Ok(())
    }

    /// Interpolate `(psi, grad psi)` at SDE time `s` and point `x`
    /// (multilinear in space, linear in time). `grad_out` has d x m
    /// entries; requires gradients to be filled.
    pub fn interp(&self, s: f64, x: &[f64], val_out: &mut [f64], grad_out: &mut [f64]) {
        let nodes = self.space.total_nodes();
        let m = self.m;
        let dm = self.space.dim * m;
        let grads = self.gradients.as_ref().expect("gradients filled");
        let (lo, hi, w) = time_weights(&self.slice_times, s);
        let mut tmp_v = [0.0f64; 8];
        let mut tmp_g = [0.0f64; 24];
        interpolate_multilinear(
            &self.space,
            m,
            &self.values[lo * nodes * m..(lo + 1) * nodes * m],
            x,
            val_out,
        );
        interpolate_multilinear(
            &self.space,
            dm,
            &grads[lo * nodes * dm..(lo + 1) * nodes * dm],
            x,
            grad_out,
        );
        if hi != lo && w != 0.0 {
            interpolate_multilinear(
                &self.space,
                m,
                &self.values[hi * nodes * m..(hi + 1) * nodes * m],
                x,
                &mut tmp_v[..m],
            );
            interpolate_multilinear(
                &self.space,
                dm,
                &grads[hi * nodes * dm..(hi + 1) * nodes * dm],
                x,
                &mut tmp_g[..dm],
            );
            for (o, &t) in val_out.iter_mut().zip(&tmp_v[..m]) {
                *o = (1.0 - w) * *o + w * t;
            }
            for (o, &t) in grad_out.iter_mut().zip(&tmp_g[..dm]) {
                *o = (1.0 - w) * *o + w * t;
            }
        }
    }

    /// Reindex to PDE time: `u_t = psi_{T-t}`. Slices come back ordered by
    /// increasing `t`, carrying values, gradients and stderr unchanged.
    pub fn to_pde_time(&self) -> PsiField {
        let n = self.n_slices();
        let nodes = self.space.total_nodes();
        let m = self.m;
        let dm = self.space.dim * m;
        let horizon = self.grid.horizon;
        let perm: Vec<usize> = (0..n).rev().collect();
        let mut values = Vec::with_capacity(self.values.len());
        let mut stderr = Vec::with_capacity(self.stderr.len());
        let mut gradients = self.gradients.as_ref().map(|_| Vec::with_capacity(n * nodes * dm));
        let mut slice_times = Vec::with_capacity(n);
        let mut slice_steps = Vec::with_capacity(n);
        for &src in &perm {
            slice_times.push(horizon - self.slice_times[src]);
            slice_steps.push(self.grid.n_steps - self.slice_steps[src]);
            values.extend_from_slice(&self.values[src * nodes * m..(src + 1) * nodes * m]);
            stderr.extend_from_slice(&self.stderr[src * nodes * m..(src + 1) * nodes * m]);
            if let (Some(dst), Some(srcg)) = (gradients.as_mut(), self.gradients.as_ref()) {
                dst.extend_from_slice(&srcg[src * nodes * dm..(src + 1) * nodes * dm]);
            }
        }
        PsiField {
            grid: self.grid,
            slice_steps,
            slice_times,
            space: self.space.clone(),
            m,
            values,
            gradients,
            stderr,
            provenance: self.provenance,
        }
    }
}

/// One time slice of estimates across all nodes, plus the largest
/// per-particle functional seen (for the pathwise bound checks).
pub struct SliceEstimate {
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
    pub max_particle_abs: f64,
}

/// Estimate `psi` on one time slice:
/// `psi_s(y) = E[u0(X_{s,T}) e^{int_s^T V} + int_s^T g e^{int_s^r V} dr]`,
/// with the inner integrals by left-endpoint quadrature along each path.
/// Requires a spatial-only source.
pub fn estimate_psi_slice(
    spec: &ProblemSpec,
    drift_extra: Option<DriftExtra<'_>>,
    grid: TimeGrid,
    space: &SpaceGrid,
    slice_key: u32,
    launch_step: usize,
    particles: usize,
    seed: u64,
) -> Result<SliceEstimate> {
    if !spec.g_spatial_only {
        return Err(Error::SourceNotSpatialOnly);
    }
    let m = spec.dim_m;
    let d = spec.dim_d;
    let nodes = space.total_nodes();
    let stop = grid.n_steps;
    let horizon = grid.horizon;

    let per_node: Vec<Result<(Vec<f64>, Vec<f64>, f64)>> = crate::map_indexed(nodes, |node| {
        let mut x0 = vec![0.0; d];
        space.coord(node, &mut x0);
        let params = EnsembleParams {
            spec,
            drift_extra,
            grid,
            launch_step,
            stop_step: stop,
            x0: &x0,
            particles,
            seed,
            slice_key,
            node_key: node as u32,
            want_derivatives: false,
        };
        let mut sum = vec![0.0; m];
        let mut sum2 = vec![0.0; m];
        let mut max_abs = 0.0f64;
        let mut func = vec![0.0; m];
        let mut gval = vec![0.0; m];
        let mut u0 = vec![0.0; m];
        // zero state arguments hoisted out of the stepping loop
        let zero_r1 = vec![0.0; m];
        let zero_r2 = vec![0.0; d * m];
        let zero_r3 = vec![0.0; d * d * m];
        for p in 0..particles {
            func.fill(0.0);
            run_particle(&params, p, &mut |st| {
                if st.step < stop {
                    let mut wb = [0.0; 8];
                    (spec.source_g)(
                        horizon - st.time,
                        crate::problem::wrap_into(st.x, &mut wb),
                        &zero_r1,
                        &zero_r2,
                        &zero_r3,
                        &mut gval,
                    );
                    let w = fk_weight(st.fk_exponent) * st.step_size;
                    for c in 0..m {
                        func[c] += gval[c] * w;
                    }
                } else {
                    spec.eval_u0(st.x, &mut u0);
                    let w = fk_weight(st.fk_exponent);
                    for c in 0..m {
                        func[c] += u0[c] * w;
                    }
                }
            })?;
            let norm = func.iter().map(|a| a * a).sum::<f64>().sqrt();
            max_abs = max_abs.max(norm);
            for c in 0..m {
                sum[c] += func[c];
                sum2[c] += func[c] * func[c];
            }
        }
        let inv_n = 1.0 / particles as f64;
        let mut mean = vec![0.0; m];
        let mut se = vec![0.0; m];
        for c in 0..m {
            mean[c] = sum[c] * inv_n;
            let var = if particles > 1 {
                ((sum2[c] - sum[c] * sum[c] * inv_n) / (particles as f64 - 1.0)).max(0.0)
            } else {
                0.0
            };
            se[c] = (var * inv_n).sqrt();
        }
        Ok((mean, se, max_abs))
    });

    let mut values = vec![0.0; nodes * m];
    let mut stderr = vec![0.0; nodes * m];
    let mut max_particle_abs = 0.0f64;
    for (node, res) in per_node.into_iter().enumerate() {
        let (mean, se, mx) = res?;
        values[node * m..(node + 1) * m].copy_from_slice(&mean);
        stderr[node * m..(node + 1) * m].copy_from_slice(&se);
        max_particle_abs = max_particle_abs.max(mx);
    }
    Ok(SliceEstimate { values, stderr, max_particle_abs })
}

/// Apply the weighted semigroup to a terminal function:
/// `P^V_{t,s} f(x) = E[f(X_{t,s}) e^{int_t^s V_{T-r}(X) dr}]`, estimated at
/// every grid node. Returns the value field and its standard errors.
pub fn semigroup_apply(
    spec: &ProblemSpec,
    drift_extra: Option<DriftExtra<'_>>,
    grid: TimeGrid,
    space: &SpaceGrid,
    t_step: usize,
    s_step: usize,
    f: &(dyn Fn(&[f64], &mut [f64]) + Sync),
    particles: usize,
    seed: u64,
    slice_key: u32,
) -> Result<(SpatialField, SpatialField)> {
    if t_step > s_step {
        return Err(Error::ConfigValue(format!("t_step {t_step} > s_step {s_step}")));
    }
    let m = spec.dim_m;
    let d = spec.dim_d;
    let nodes = space.total_nodes();
    let per_node: Vec<Result<(Vec<f64>, Vec<f64>)>> = crate::map_indexed(nodes, |node| {
        let mut x0 = vec![0.0; d];
        space.coord(node, &mut x0);
        let params = EnsembleParams {
            spec,
            drift_extra,
            grid,
            launch_step: t_step,
            stop_step: s_step,
            x0: &x0,
            particles,
            seed,
            slice_key,
            node_key: node as u32,
            want_derivatives: false,
        };
        let mut sum = vec![0.0; m];
        let mut sum2 = vec![0.0; m];
        let mut fx = vec![0.0; m];
        for p in 0..particles {
            let mut terminal = (vec![0.0; d], 0.0);
            run_particle(&params, p, &mut |st| {
                if st.step == s_step {
                    terminal.0.copy_from_slice(st.x);
                    terminal.1 = st.fk_exponent;
                }
            })?;
            let mut wrapped = [0.0; 8];
            f(crate::problem::wrap_into(&terminal.0, &mut wrapped), &mut fx);
            let w = terminal.1.exp();
            for c in 0..m {
                let v = fx[c] * w;
                sum[c] += v;
                sum2[c] += v * v;
            }
        }
        let inv_n = 1.0 / particles as f64;
        let mut mean = vec![0.0; m];
        let mut se = vec![0.0; m];
        for c in 0..m {
            mean[c] = sum[c] * inv_n;
            let var = if particles > 1 {
                ((sum2[c] - sum[c] * sum[c] * inv_n) / (particles as f64 - 1.0)).max(0.0)
            } else {
                0.0
            };
            se[c] = (var * inv_n).sqrt();
        }
        Ok((mean, se))
    });
    let mut vals = SpatialField::zeros(space.clone(), m);
    let mut errs = SpatialField::zeros(space.clone(), m);
    for (node, res) in per_node.into_iter().enumerate() {
        let (mean, se) = res?;
        vals.values[node * m..(node + 1) * m].copy_from_slice(&mean);
        errs.values[node * m..(node + 1) * m].copy_from_slice(&se);
    }
    Ok((vals, errs))
}

/// Integral functional `u_t^V(f) = int_t^T P^V_{t,s} f_s ds`, estimated
/// with a single ensemble per node: the running integrand is accumulated
/// along each path instead of nesting semigroup calls.
pub fn u_v_functional(
    spec: &ProblemSpec,
    drift_extra: Option<DriftExtra<'_>>,
    grid: TimeGrid,
    space: &SpaceGrid,
    t_step: usize,
    f: &(dyn Fn(f64, &[f64], &mut [f64]) + Sync),
    particles: usize,
    seed: u64,
    slice_key: u32,
) -> Result<(SpatialField, SpatialField)> {
    let m = spec.dim_m;
    let d = spec.dim_d;
    let nodes = space.total_nodes();
    let stop = grid.n_steps;
    let per_node: Vec<Result<(Vec<f64>, Vec<f64>)>> = crate::map_indexed(nodes, |node| {
        let mut x0 = vec![0.0; d];
        space.coord(node, &mut x0);
        let params = EnsembleParams {
            spec,
            drift_extra,
            grid,
            launch_step: t_step,
            stop_step: stop,
            x0: &x0,
            particles,
            seed,
            slice_key,
            node_key: node as u32,
            want_derivatives: false,
        };
        let mut sum = vec![0.0; m];
        let mut sum2 = vec![0.0; m];
        let mut acc = vec![0.0; m];
        let mut fv = vec![0.0; m];
        for p in 0..particles {
            acc.fill(0.0);
            run_particle(&params, p, &mut |st| {
                if st.step < stop {
                    let mut wrapped = [0.0; 8];
                    f(st.time, crate::problem::wrap_into(st.x, &mut wrapped), &mut fv);
                    let w = fk_weight(st.fk_exponent) * st.step_size;
                    for c in 0..m {
                        acc[c] += fv[c] * w;
                    }
                }
            })?;
            for c in 0..m {
                sum[c] += acc[c];
                sum2[c] += acc[c] * acc[c];
            }
        }
        let inv_n = 1.0 / particles as f64;
        let mut mean = vec![0.0; m];
        let mut se = vec![0.0; m];
        for c in 0..m {
            mean[c] = sum[c] * inv_n;
            let var = if particles > 1 {
                ((sum2[c] - sum[c] * sum[c] * inv_n) / (particles as f64 - 1.0)).max(0.0)
            } else {
                0.0
            };
            se[c] = (var * inv_n).sqrt();
        }
        Ok((mean, se))
    });
    let mut vals = SpatialField::zeros(space.clone(), m);
    let mut errs = SpatialField::zeros(space.clone(), m);
    for (node, res) in per_node.into_iter().enumerate() {
        let (mean, se) = res?;
        vals.values[node * m..(node + 1) * m].copy_from_slice(&mean);
        errs.values[node * m..(node + 1) * m].copy_from_slice(&se);
    }
    Ok((vals, errs))
}

/// Gradient of the (possibly weighted) semigroup through the
/// stochastic-integral representation:
/// `grad_v P_{t,s} f(x) = (s-t)^{-1} E[f(X_{t,s}) int <sigma^{-1} grad_v X, dW>]`.
///
/// The ensemble must carry derivative data; `weighted` multiplies the
/// functional by `exp(int V)`, composing the potential into the semigroup.
pub fn bismut_gradient(
    ensemble: &PathEnsemble,
    f: &dyn Fn(&[f64], &mut [f64]),
    v: &[f64],
    m: usize,
    weighted: bool,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if ensemble.deriv_flows.is_none() || ensemble.bismut_integral.is_none() {
        return Err(Error::MissingDerivatives);
    }
    if ensemble.stop_step == ensemble.launch_step {
        return Err(Error::EmptyWindow);
    }
    let window = ensemble.grid.knot(ensemble.stop_step) - ensemble.grid.knot(ensemble.launch_step);
    let last = ensemble.n_knots() - 1;
    let n = ensemble.particles;
    let mut sum = vec![0.0; m];
    let mut sum2 = vec![0.0; m];
    let mut fx = vec![0.0; m];
    for p in 0..n {
        let x = ensemble.state(last, p);
        let w = ensemble.bismut(last, p).expect("checked above");
        let weight: f64 = w.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
        let mut wrapped = [0.0; 8];
        f(crate::problem::wrap_into(x, &mut wrapped), &mut fx);
        let scale = if weighted { ensemble.fk(last, p).exp() } else { 1.0 };
        for c in 0..m {
            let val = fx[c] * scale * weight / window;
            sum[c] += val;
            sum2[c] += val * val;
        }
    }
    let inv_n = 1.0 / n as f64;
    let mut mean = vec![0.0; m];
    let mut se = vec![0.0; m];
    for c in 0..m {
        mean[c] = sum[c] * inv_n;
        let var = if n > 1 {
            ((sum2[c] - sum[c] * sum[c] * inv_n) / (n as f64 - 1.0)).max(0.0)
        } else {
            0.0
        };
        se[c] = (var * inv_n).sqrt();
    }
    Ok((mean, se))
}

/// Context for the stochastic-gradient field mode.
pub struct BismutContext<'a> {
    pub spec: &'a ProblemSpec,
    pub drift_extra: Option<DriftExtra<'a>>,
    pub particles: usize,
    pub seed: u64,
}

/// Fill the gradient block of a field, either by periodic central
/// differences of the stored values (cheap, bias O(h^2)) or by the
/// stochastic-integral representation per node (unbiased in space, pays a
/// full derivative-flow simulation; `ctx` required).
pub fn gradient_of_field(
    field: &PsiField,
    mode: GradientMode,
    ctx: Option<&BismutContext<'_>>,
) -> Result<PsiField> {
    let mut out = field.clone();
    match mode {
        GradientMode::GridDifference => {
            out.gradients = Some(grid_difference_gradients(field)?);
            out.provenance = GradientMode::GridDifference;
        }
        GradientMode::Bismut => {
            let ctx = ctx.ok_or(Error::MissingDerivatives)?;
            out.gradients = Some(bismut_gradients(field, ctx)?);
            out.provenance = GradientMode::Bismut;
        }
    }
    Ok(out)
}

fn grid_difference_gradients(field: &PsiField) -> Result<Vec<f64>> {
    let space = &field.space;
    if space.nodes_per_axis.iter().any(|&n| n < 3) {
        return Err(Error::GridTooSmall("gradient needs >= 3 nodes per axis".into()));
    }
    let nodes = space.total_nodes();
    let m = field.m;
    let d = space.dim;
    let mut grads = vec![0.0; field.n_slices() * nodes * d * m];
    for slice in 0..field.n_slices() {
        let base = slice * nodes;
        for node in 0..nodes {
            for axis in 0..d {
                let h = space.spacing(axis);
                let up = field.value(slice, space.shift(node, axis, 1));
                let dn = field.value(slice, space.shift(node, axis, -1));
                for c in 0..m {
                    grads[(base + node) * d * m + axis * m + c] = (up[c] - dn[c]) / (2.0 * h);
                }
            }
        }
    }
    Ok(grads)
}

fn bismut_gradients(field: &PsiField, ctx: &BismutContext<'_>) -> Result<Vec<f64>> {
    let spec = ctx.spec;
    if !spec.g_spatial_only {
        return Err(Error::SourceNotSpatialOnly);
    }
    let space = &field.space;
    let nodes = space.total_nodes();
    let d = space.dim;
    let m = field.m;
    let grid = field.grid;
    let stop = grid.n_steps;
    let horizon = grid.horizon;
    let mut grads = vec![0.0; field.n_slices() * nodes * d * m];
    for (si, &launch) in field.slice_steps.iter().enumerate() {
        if launch == stop {
            // Terminal slice: psi_T = u0, gradient by differences of u0.
            let u0_field = SpatialField::from_fn(space.clone(), m, |x, out| spec.eval_u0(x, out));
            let tmp = PsiField {
                grid,
                slice_steps: vec![stop],
                slice_times: vec![horizon],
                space: space.clone(),
                m,
                values: u0_field.values,
                gradients: None,
                stderr: vec![0.0; nodes * m],
                provenance: GradientMode::GridDifference,
            };
            let g = grid_difference_gradients(&tmp)?;
            grads[si * nodes * d * m..(si + 1) * nodes * d * m].copy_from_slice(&g);
            continue;
        }
        let per_node: Vec<Result<Vec<f64>>> = crate::map_indexed(nodes, |node| {
            let mut x0 = vec![0.0; d];
            space.coord(node, &mut x0);
            let params = EnsembleParams {
                spec,
                drift_extra: ctx.drift_extra,
                grid,
                launch_step: launch,
                stop_step: stop,
                x0: &x0,
                particles: ctx.particles,
                seed: ctx.seed,
                slice_key: si as u32,
                node_key: node as u32,
                want_derivatives: true,
            };
            let launch_time = grid.knot(launch);
            let mut acc = vec![0.0; d * m];
            let mut gval = vec![0.0; m];
            let mut u0 = vec![0.0; m];
            for p in 0..ctx.particles {
                run_particle(&params, p, &mut |st| {
                    let w = st.bismut.expect("derivatives on");
                    if st.step < stop {
                        // The first knot has zero window; its omission costs
                        // O(dt) like the quadrature itself.
                        if st.step > launch {
                            spec.eval_g_spatial(horizon - st.time, st.x, &mut gval);
                            let scale = fk_weight(st.fk_exponent) * st.step_size
                                / (st.time - launch_time);
                            for axis in 0..d {
                                for c in 0..m {
                                    acc[axis * m + c] += gval[c] * scale * w[axis];
                                }
                            }
                        }
                    } else {
                        spec.eval_u0(st.x, &mut u0);
                        let scale = fk_weight(st.fk_exponent) / (st.time - launch_time);
                        for axis in 0..d {
                            for c in 0..m {
                                acc[axis * m + c] += u0[c] * scale * w[axis];
                            }
                        }
                    }
                })?;
            }
            for a in acc.iter_mut() {
                *a /= ctx.particles as f64;
            }
            Ok(acc)
        });
        for (node, res) in per_node.into_iter().enumerate() {
            let acc = res?;
            grads[(si * nodes + node) * d * m..][..d * m].copy_from_slice(&acc);
        }
    }
    Ok(grads)
}

/// Estimate the full field on the given slice steps (an increasing list
/// ending at `grid.n_steps`), leaving gradients unfilled.
pub struct FieldEstimate {
    pub field: PsiField,
    /// Largest per-particle functional norm across all slices and nodes.
    pub max_particle_abs: f64,
}

pub fn estimate_field(
    spec: &ProblemSpec,
    drift_extra: Option<DriftExtra<'_>>,
    grid: TimeGrid,
    space: &SpaceGrid,
    slice_steps: &[usize],
    particles: usize,
    seed: u64,
) -> Result<FieldEstimate> {
    let m = spec.dim_m;
    let nodes = space.total_nodes();
    let mut values = vec![0.0; slice_steps.len() * nodes * m];
    let mut stderr = vec![0.0; slice_steps.len() * nodes * m];
    let mut max_particle_abs = 0.0f64;
    for (si, &launch) in slice_steps.iter().enumerate() {
        let est = estimate_psi_slice(
            spec,
            drift_extra,
            grid,
            space,
            si as u32,
            launch,
            particles,
            seed,
        )?;
        values[si * nodes * m..(si + 1) * nodes * m].copy_from_slice(&est.values);
        stderr[si * nodes * m..(si + 1) * nodes * m].copy_from_slice(&est.stderr);
        max_particle_abs = max_particle_abs.max(est.max_particle_abs);
    }
    let field = PsiField {
        grid,
        slice_steps: slice_steps.to_vec(),
        slice_times: slice_steps.iter().map(|&k| grid.knot(k)).collect(),
        space: space.clone(),
        m,
        values,
        gradients: None,
        stderr,
        provenance: GradientMode::GridDifference,
    };
    field.assert_finite()?;
    Ok(FieldEstimate { field, max_particle_abs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{build, CatalogParams};
    use crate::sde::{simulate_ensemble, Retain};
    use std::sync::Arc;

    const TWO_PI: f64 = std::f64::consts::TAU;

    #[test]
    fn constant_initial_datum_is_exact() {
        let mut p = CatalogParams::default();
        p.u0_amp = 1.0;
        let mut spec = build("heat", &p).unwrap();
        spec.initial_u0 = Arc::new(|_, out| out[0] = 1.0);
        let grid = TimeGrid::new(20, 0.1).unwrap();
        let space = SpaceGrid::uniform(1, 8).unwrap();
        let est = estimate_psi_slice(&spec, None, grid, &space, 0, 0, 64, 5).unwrap();
        for v in &est.values {
            assert_eq!(v.to_bits(), 1.0f64.to_bits());
        }
        assert!((est.max_particle_abs - 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_potential_scales_exponentially() {
        let mut p = CatalogParams::default();
        p.v_amp = 0.7;
        let mut spec = build("const-potential", &p).unwrap();
        spec.initial_u0 = Arc::new(|_, out| out[0] = 1.0);
        let grid = TimeGrid::new(50, 0.1).unwrap();
        let space = SpaceGrid::uniform(1, 4).unwrap();
        let est = estimate_psi_slice(&spec, None, grid, &space, 0, 10, 16, 5).unwrap();
        let tau = grid.horizon - grid.knot(10);
        let want = (0.7 * tau).exp();
        for v in &est.values {
            assert!((v - want).abs() < 1e-12 * want, "{v} vs {want}");
        }
    }

    #[test]
    fn heat_mode_decays_at_fourier_rate() {
        let spec = build("heat", &CatalogParams::default()).unwrap();
        let grid = TimeGrid::new(200, 0.1).unwrap();
        let space = SpaceGrid::uniform(1, 16).unwrap();
        let launch = 100;
        let est = estimate_psi_slice(&spec, None, grid, &space, 0, launch, 20_000, 7).unwrap();
        let tau = grid.horizon - grid.knot(launch);
        let decay = (-2.0 * std::f64::consts::PI.powi(2) * tau).exp();
        let mut x = [0.0];
        for node in 0..space.total_nodes() {
            space.coord(node, &mut x);
            let want = decay * (TWO_PI * x[0]).sin();
            let tol = (3.0 * est.stderr[node]).max(0.02 * decay);
            assert!(
                (est.values[node] - want).abs() <= tol,
                "node {node}: {} vs {want} (tol {tol})",
                est.values[node]
            );
        }
    }

    #[test]
    fn semigroup_identity_and_constant() {
        let spec = build("heat", &CatalogParams::default()).unwrap();
        let grid = TimeGrid::new(20, 0.1).unwrap();
        let space = SpaceGrid::uniform(1, 8).unwrap();
        // t = s: identity on f, up to summation rounding of N equal terms.
        let f = |x: &[f64], out: &mut [f64]| out[0] = (TWO_PI * x[0]).sin();
        let (vals, _) = semigroup_apply(&spec, None, grid, &space, 5, 5, &f, 16, 3, 0).unwrap();
        let mut x = [0.0];
        for node in 0..8 {
            space.coord(node, &mut x);
            let want = (TWO_PI * x[0]).sin();
            assert!((vals.node(node)[0] - want).abs() <= 4.0 * f64::EPSILON * want.abs());
        }
        // f = 1, V = 0: exactly one.
        let one = |_: &[f64], out: &mut [f64]| out[0] = 1.0;
        let (vals, _) = semigroup_apply(&spec, None, grid, &space, 0, 20, &one, 16, 3, 0).unwrap();
        for node in 0..8 {
            assert_eq!(vals.node(node)[0].to_bits(), 1.0f64.to_bits());
        }
    }

    #[test]
    fn semigroup_linear_in_f_under_common_randomness() {
        let spec = build("heat", &CatalogParams::default()).unwrap();
        let grid = TimeGrid::new(20, 0.1).unwrap();
        let space = SpaceGrid::uniform(1, 8).unwrap();
        let f = |x: &[f64], out: &mut [f64]| out[0] = (TWO_PI * x[0]).sin();
        let g = |x: &[f64], out: &mut [f64]| out[0] = (TWO_PI * x[0]).cos();
        let combo = |x: &[f64], out: &mut [f64]| {
            out[0] = 2.0 * (TWO_PI * x[0]).sin() - 0.5 * (TWO_PI * x[0]).cos()
        };
        let (ef, _) = semigroup_apply(&spec, None, grid, &space, 0, 20, &f, 500, 3, 0).unwrap();
        let (eg, _) = semigroup_apply(&spec, None, grid, &space, 0, 20, &g, 500, 3, 0).unwrap();
        let (ec, _) = semigroup_apply(&spec, None, grid, &space, 0, 20, &combo, 500, 3, 0).unwrap();
        for node in 0..8 {
            let want = 2.0 * ef.node(node)[0] - 0.5 * eg.node(node)[0];
            assert!((ec.node(node)[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn integral_functional_constant_integrand() {
        // V = 0, f = 1: the per-particle value is exactly T - t.
        let spec = build("heat", &CatalogParams::default()).unwrap();
        let grid = TimeGrid::new(40, 0.1).unwrap();
        let space = SpaceGrid::uniform(1, 4).unwrap();
        let one = |_s: f64, _x: &[f64], out: &mut [f64]| out[0] = 1.0;
        let (vals, errs) = u_v_functional(&spec, None, grid, &space, 10, &one, 8, 3, 0).unwrap();
        let want = grid.horizon - grid.knot(10);
        for node in 0..4 {
            assert!((vals.node(node)[0] - want).abs() < 1e-13);
            // identical per-particle values; stderr is cancellation dust
            assert!(errs.node(node)[0] < 1e-8);
        }
    }

    #[test]
    fn integral_functional_exponential_weight() {
        // V = c, f = 1: each particle accumulates the geometric sum
        // dt * sum_k exp(c k dt), deterministically.
        let c = 1.3;
        let mut p = CatalogParams::default();
        p.v_amp = c;
        let spec = build("const-potential", &p).unwrap();
        let grid = TimeGrid::new(80, 0.1).unwrap();
        let space = SpaceGrid::uniform(1, 4).unwrap();
        let one = |_s: f64, _x: &[f64], out: &mut [f64]| out[0] = 1.0;
        let (vals, errs) = u_v_functional(&spec, None, grid, &space, 0, &one, 8, 3, 0).unwrap();
        let dt = grid.step_size();
        let n = 80;
        let geometric: f64 = (0..n).map(|k| (c * (k as f64 * dt)).exp() * dt).sum();
        let continuum = ((c * 0.1f64).exp() - 1.0) / c;
        for node in 0..4 {
            let v = vals.node(node)[0];
            assert!((v - geometric).abs() < 1e-12, "{v} vs {geometric}");
            assert!((v - continuum).abs() < 2.0 * c * dt, "{v} vs {continuum}");
            assert!(errs.node(node)[0] < 1e-8);
        }
    }

    #[test]
    fn bismut_constant_function_vanishes() {
        let spec = build("heat", &CatalogParams::default()).unwrap();
        let grid = TimeGrid::new(40, 0.1).unwrap();
        let ens = simulate_ensemble(
            &EnsembleParams {
                spec: &spec,
                drift_extra: None,
                grid,
                launch_step: 0,
                stop_step: 20,
                x0: &[0.3],
                particles: 20_000,
                seed: 11,
                slice_key: 0,
                node_key: 0,
                want_derivatives: true,
            },
            Retain::Terminal,
        )
        .unwrap();
        let one = |_: &[f64], out: &mut [f64]| out[0] = 1.0;
        let (est, se) = bismut_gradient(&ens, &one, &[1.0], 1, false).unwrap();
        assert!(est[0].abs() <= 3.0 * se[0], "{} vs 3x{}", est[0], se[0]);
    }

    #[test]
    fn bismut_matches_fourier_gradient() {
        let spec = build("heat", &CatalogParams::default()).unwrap();
        let grid = TimeGrid::new(100, 0.1).unwrap();
        let window = 50;
        let x0 = 0.15;
        let ens = simulate_ensemble(
            &EnsembleParams {
                spec: &spec,
                drift_extra: None,
                grid,
                launch_step: 0,
                stop_step: window,
                x0: &[x0],
                particles: 100_000,
                seed: 21,
                slice_key: 0,
                node_key: 0,
                want_derivatives: true,
            },
            Retain::Terminal,
        )
        .unwrap();
        let f = |x: &[f64], out: &mut [f64]| out[0] = (TWO_PI * x[0]).sin();
        let (est, se) = bismut_gradient(&ens, &f, &[1.0], 1, false).unwrap();
        let tau = grid.knot(window);
        let want = TWO_PI * (-2.0 * std::f64::consts::PI.powi(2) * tau).exp() * (TWO_PI * x0).cos();
        let tol = (3.0 * se[0]).max(0.05 * want.abs());
        assert!((est[0] - want).abs() <= tol, "{} vs {want} (tol {tol})", est[0]);
    }

    #[test]
    fn gradient_modes_agree_on_heat() {
        let spec = build("heat", &CatalogParams::default()).unwrap();
        let grid = TimeGrid::new(50, 0.05).unwrap();
        let space = SpaceGrid::uniform(1, 32).unwrap();
        let n = 20_000;
        let est = estimate_field(&spec, None, grid, &space, &[0, 25, 50], n, 17).unwrap();
        let by_diff = gradient_of_field(&est.field, GradientMode::GridDifference, None).unwrap();
        let ctx = BismutContext { spec: &spec, drift_extra: None, particles: n, seed: 17 };
        let by_bismut = gradient_of_field(&est.field, GradientMode::Bismut, Some(&ctx)).unwrap();
        let ga = by_diff.gradients.as_ref().unwrap();
        let gb = by_bismut.gradients.as_ref().unwrap();
        let h: f64 = space.spacing(0);
        for (i, (a, b)) in ga.iter().zip(gb.iter()).enumerate() {
            // grid-difference bias O(h^2)|f'''| plus ~3.5 sigma of the
            // combined MC noise of the two estimators at this N
            let tol = TWO_PI.powi(3) * h * h / 6.0 + 0.35;
            assert!((a - b).abs() < tol, "entry {i}: {a} vs {b}");
        }
    }

    #[test]
    fn constant_field_has_zero_gradient() {
        let grid = TimeGrid::new(10, 0.1).unwrap();
        let space = SpaceGrid::uniform(1, 8).unwrap();
        let field = PsiField {
            grid,
            slice_steps: vec![0, 10],
            slice_times: vec![0.0, 0.1],
            space: space.clone(),
            m: 1,
            values: vec![3.5; 16],
            gradients: None,
            stderr: vec![0.0; 16],
            provenance: GradientMode::GridDifference,
        };
        let with = gradient_of_field(&field, GradientMode::GridDifference, None).unwrap();
        assert!(with.gradients.unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn sin_gradient_second_order_accurate() {
        let grid = TimeGrid::new(10, 0.1).unwrap();
        let space = SpaceGrid::uniform(1, 64).unwrap();
        let mut values = vec![0.0; 64];
        let mut x = [0.0];
        for node in 0..64 {
            space.coord(node, &mut x);
            values[node] = (TWO_PI * x[0]).sin();
        }
        let field = PsiField {
            grid,
            slice_steps: vec![10],
            slice_times: vec![0.1],
            space: space.clone(),
            m: 1,
            values,
            gradients: None,
            stderr: vec![0.0; 64],
            provenance: GradientMode::GridDifference,
        };
        let with = gradient_of_field(&field, GradientMode::GridDifference, None).unwrap();
        let g = with.gradients.unwrap();
        let h: f64 = 1.0 / 64.0;
        for node in 0..64 {
            space.coord(node, &mut x);
            let want = TWO_PI * (TWO_PI * x[0]).cos();
            // Taylor remainder of the central difference: (2 pi)^3 h^2 / 6.
            let tol = TWO_PI.powi(3) * h * h / 6.0 * 1.5;
            assert!((g[node] - want).abs() <= tol, "node {node}: {} vs {want}", g[node]);
        }
    }

    #[test]
    fn pde_time_reindexing_reverses_slices() {
        let grid = TimeGrid::new(4, 1.0).unwrap();
        let space = SpaceGrid::uniform(1, 4).unwrap();
        let field = PsiField {
            grid,
            slice_steps: vec![0, 2, 4],
            slice_times: vec![0.0, 0.5, 1.0],
            space,
            m: 1,
            values: (0..12).map(|i| i as f64).collect(),
            gradients: None,
            stderr: vec![0.0; 12],
            provenance: GradientMode::GridDifference,
        };
        let u = field.to_pde_time();
        assert_eq!(u.slice_times, vec![0.0, 0.5, 1.0]);
        // u at t=0 is psi at s=T (the last slice of psi).
        assert_eq!(u.value(0, 0)[0], 8.0);
        assert_eq!(u.value(2, 3)[0], 3.0);
    }
}
