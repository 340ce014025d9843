//! Euler-Maruyama simulation of the time-reversed SDE
//!
//! ```text
//! dX_s = { b_{T-s} + F_extra(s, .) }(X_s) ds + sqrt(2 a_{T-s})(X_s) dW_s
//! ```
//!
//! together with the first-variation (derivative) flow, the running
//! potential exponent and the stochastic integral feeding the gradient
//! representation. This module is the single place where coefficients are
//! indexed at `T - s`; everything downstream works in SDE time.

use crate::error::{Error, Result};
use crate::lattice::TimeGrid;
use crate::linalg::{mat_vec, sigma_into, sym_inv_into};
use crate::problem::ProblemSpec;
use crate::rng::{RngStream, CH_INCREMENT};

/// Extra drift term in SDE time: `(s, x) -> d`-vector.
pub type DriftExtra<'a> = &'a (dyn Fn(f64, &[f64], &mut [f64]) + Sync);

/// What the ensemble keeps: every knot from launch to stop, or just the
/// running values (cheap, for streaming estimators).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Retain {
    Knots,
    Terminal,
}

/// Simulation request for one bundle of particles from a common start
/// point. `slice_key`/`node_key` name the RNG stream; reusing them across
/// calls yields common random numbers.
pub struct EnsembleParams<'a> {
    pub spec: &'a ProblemSpec,
    pub drift_extra: Option<DriftExtra<'a>>,
    pub grid: TimeGrid,
    pub launch_step: usize,
    pub stop_step: usize,
    pub x0: &'a [f64],
    pub particles: usize,
    pub seed: u64,
    pub slice_key: u32,
    pub node_key: u32,
    pub want_derivatives: bool,
}

/// Running per-particle quantities exposed at each knot.
pub struct ParticleState<'a> {
    /// Absolute step index of this knot.
    pub step: usize,
    /// Time `s` at this knot.
    pub time: f64,
    /// Step size leaving this knot; 0 at the final knot.
    pub step_size: f64,
    /// Unwrapped state in R^d.
    pub x: &'a [f64],
    /// Derivative flow, row-major d x d, when requested.
    pub flow: Option<&'a [f64]>,
    /// `int_launch^s V_{T-r}(X_r) dr`, left-endpoint rule.
    pub fk_exponent: f64,
    /// `w` with `int <sigma^{-1} grad_v X, dW> = <w, v>`, when requested.
    pub bismut: Option<&'a [f64]>,
}

/// Walk one particle from `launch_step` to `stop_step`, invoking `observe`
/// at every knot including both ends. All estimators and the retained
/// ensemble share this kernel, so they agree bitwise.
pub fn run_particle(
    params: &EnsembleParams<'_>,
    particle: usize,
    observe: &mut dyn FnMut(&ParticleState<'_>),
) -> Result<()> {
    let spec = params.spec;
    let d = spec.dim_d;
    let grid = params.grid;
    let horizon = grid.horizon;
    let stream = RngStream::new(params.seed, params.slice_key, params.node_key, particle as u32);
    let derivatives = params.want_derivatives;

    let mut x = [0.0f64; 3];
    x[..d].copy_from_slice(params.x0);
    let mut flow = [0.0f64; 9];
    for i in 0..d {
        flow[i * d + i] = 1.0;
    }
    let mut bismut = [0.0f64; 3];
    let mut fk = 0.0f64;

    let mut xi = [0.0f64; 3];
    let mut drift = [0.0f64; 3];
    let mut extra = [0.0f64; 3];
    let mut amat = [0.0f64; 9];
    let mut sigma = [0.0f64; 9];
    let mut sig_inv = [0.0f64; 9];
    let mut sig_plus = [0.0f64; 9];
    let mut sig_minus = [0.0f64; 9];
    let mut scratch_a = [0.0f64; 9];
    let mut scratch_b = [0.0f64; 9];
    let mut jac = [0.0f64; 9];
    let mut tmp_vec = [0.0f64; 3];
    let mut new_flow = [0.0f64; 9];

    for step in params.launch_step..params.stop_step {
        let s = grid.knot(step);
        let dt = grid.knot(step + 1) - s;
        observe(&ParticleState {
            step,
            time: s,
            step_size: dt,
            x: &x[..d],
            flow: derivatives.then_some(&flow[..d * d]),
            fk_exponent: fk,
            bismut: derivatives.then_some(&bismut[..d]),
        });

        let sqrt_dt = dt.sqrt();
        let tr = horizon - s;

        spec.eval_b(tr, &x[..d], &mut drift[..d]);
        if let Some(f) = params.drift_extra {
            f(s, &x[..d], &mut extra[..d]);
            for i in 0..d {
                drift[i] += extra[i];
            }
        }
        spec.eval_a(tr, &x[..d], &mut amat[..d * d]);
        sigma_into(&amat[..d * d], d, tr, &mut sigma[..d * d])?;
        stream.fill_normals(step as u32, CH_INCREMENT, &mut xi[..d]);

        if derivatives {
            // Bismut accumulation with left-endpoint sigma and flow:
            // w += J^T (sigma^{-1} xi) sqrt(dt).
            sym_inv_into(&sigma[..d * d], d, &mut sig_inv[..d * d]);
            mat_vec(&sig_inv[..d * d], &xi[..d], d, &mut tmp_vec[..d]);
            for i in 0..d {
                let mut acc = 0.0;
                for r in 0..d {
                    acc += flow[r * d + i] * tmp_vec[r];
                }
                bismut[i] += acc * sqrt_dt;
            }

            // First-variation step: J += (grad b_eff J) dt
            //                          + sum_i (grad sigma^(i) J) xi_i sqrt(dt),
            // with coefficient Jacobians by central differences.
            let xnorm = x[..d].iter().map(|v| v * v).sum::<f64>().sqrt();
            let h = 1e-4 * (1.0 + xnorm);
            new_flow[..d * d].copy_from_slice(&flow[..d * d]);
            for j in 0..d {
                let keep = x[j];
                x[j] = keep + h;
                spec.eval_b(tr, &x[..d], &mut scratch_a[..d]);
                if let Some(f) = params.drift_extra {
                    f(s, &x[..d], &mut extra[..d]);
                    for i in 0..d {
                        scratch_a[i] += extra[i];
                    }
                }
                spec.eval_a(tr, &x[..d], &mut jac[..d * d]);
                sigma_into(&jac[..d * d], d, tr, &mut sig_plus[..d * d])?;
                x[j] = keep - h;
                spec.eval_b(tr, &x[..d], &mut scratch_b[..d]);
                if let Some(f) = params.drift_extra {
                    f(s, &x[..d], &mut extra[..d]);
                    for i in 0..d {
                        scratch_b[i] += extra[i];
                    }
                }
                spec.eval_a(tr, &x[..d], &mut jac[..d * d]);
                sigma_into(&jac[..d * d], d, tr, &mut sig_minus[..d * d])?;
                x[j] = keep;

                // column j of grad(b_eff) and of each grad(sigma^(i)).
                for i in 0..d {
                    let db = (scratch_a[i] - scratch_b[i]) / (2.0 * h);
                    for c in 0..d {
                        new_flow[i * d + c] += db * flow[j * d + c] * dt;
                    }
                    for w in 0..d {
                        let dsig = (sig_plus[i * d + w] - sig_minus[i * d + w]) / (2.0 * h);
                        if dsig != 0.0 {
                            for c in 0..d {
                                new_flow[i * d + c] += dsig * flow[j * d + c] * xi[w] * sqrt_dt;
                            }
                        }
                    }
                }
            }
            flow[..d * d].copy_from_slice(&new_flow[..d * d]);
        }

        fk += spec.eval_v(tr, &x[..d]) * dt;

        for i in 0..d {
            let mut diff = 0.0;
            for j in 0..d {
                diff += sigma[i * d + j] * xi[j];
            }
            x[i] += drift[i] * dt + diff * sqrt_dt;
        }
        if x[..d].iter().any(|v| !v.is_finite()) {
            return Err(Error::Blowup { time: grid.knot(step + 1), step: step + 1 });
        }
    }

    observe(&ParticleState {
        step: params.stop_step,
        time: grid.knot(params.stop_step),
        step_size: 0.0,
        x: &x[..d],
        flow: derivatives.then_some(&flow[..d * d]),
        fk_exponent: fk,
        bismut: derivatives.then_some(&bismut[..d]),
    });
    Ok(())
}

/// Particle trajectories with their derivative flows, potential exponents
/// and gradient-representation integrals, retained at every knot (or at the
/// endpoints only).
pub struct PathEnsemble {
    pub dim: usize,
    pub particles: usize,
    pub grid: TimeGrid,
    pub launch_step: usize,
    pub stop_step: usize,
    pub start_point: Vec<f64>,
    /// Absolute step indices of retained knots.
    pub retained_steps: Vec<usize>,
    /// Knot-major, then particle, then component.
    pub states: Vec<f64>,
    pub deriv_flows: Option<Vec<f64>>,
    pub fk_exponent: Vec<f64>,
    pub bismut_integral: Option<Vec<f64>>,
}

impl PathEnsemble {
    #[inline]
    pub fn state(&self, knot: usize, particle: usize) -> &[f64] {
        let off = (knot * self.particles + particle) * self.dim;
        &self.states[off..off + self.dim]
    }

    #[inline]
    pub fn flow(&self, knot: usize, particle: usize) -> Option<&[f64]> {
        let d2 = self.dim * self.dim;
        self.deriv_flows
            .as_ref()
            .map(|f| &f[(knot * self.particles + particle) * d2..][..d2])
    }

    #[inline]
    pub fn fk(&self, knot: usize, particle: usize) -> f64 {
        self.fk_exponent[knot * self.particles + particle]
    }

    #[inline]
    pub fn bismut(&self, knot: usize, particle: usize) -> Option<&[f64]> {
        self.bismut_integral
            .as_ref()
            .map(|b| &b[(knot * self.particles + particle) * self.dim..][..self.dim])
    }

    pub fn n_knots(&self) -> usize {
        self.retained_steps.len()
    }
}

/// Simulate a particle bundle; see [`EnsembleParams`].
pub fn simulate_ensemble(params: &EnsembleParams<'_>, retain: Retain) -> Result<PathEnsemble> {
    let d = params.spec.dim_d;
    debug_assert_eq!(params.x0.len(), d);
    if params.particles == 0 {
        return Err(Error::ConfigValue("particles must be >= 1".into()));
    }
    if params.launch_step > params.stop_step || params.stop_step > params.grid.n_steps {
        return Err(Error::ConfigValue(format!(
            "launch {} / stop {} outside grid of {} steps",
            params.launch_step, params.stop_step, params.grid.n_steps
        )));
    }
    let retained_steps: Vec<usize> = match retain {
        Retain::Knots => (params.launch_step..=params.stop_step).collect(),
        Retain::Terminal => vec![params.launch_step, params.stop_step],
    };
    let n_knots = retained_steps.len();
    let n = params.particles;
    let d2 = d * d;

    struct Row {
        states: Vec<f64>,
        flows: Vec<f64>,
        fk: Vec<f64>,
        bis: Vec<f64>,
    }
    let rows: Vec<Result<Row>> = crate::map_indexed(n, |p| {
        let mut row = Row {
            states: Vec::with_capacity(n_knots * d),
            flows: Vec::with_capacity(if params.want_derivatives { n_knots * d2 } else { 0 }),
            fk: Vec::with_capacity(n_knots),
            bis: Vec::with_capacity(if params.want_derivatives { n_knots * d } else { 0 }),
        };
        let mut cursor = 0usize;
        run_particle(params, p, &mut |st| {
            if cursor < retained_steps.len() && st.step == retained_steps[cursor] {
                row.states.extend_from_slice(st.x);
                row.fk.push(st.fk_exponent);
                if let Some(f) = st.flow {
                    row.flows.extend_from_slice(f);
                }
                if let Some(b) = st.bismut {
                    row.bis.extend_from_slice(b);
                }
                cursor += 1;
            }
        })?;
        Ok(row)
    });

    let mut states = vec![0.0; n_knots * n * d];
    let mut fk = vec![0.0; n_knots * n];
    let mut flows = params.want_derivatives.then(|| vec![0.0; n_knots * n * d2]);
    let mut bis = params.want_derivatives.then(|| vec![0.0; n_knots * n * d]);
    for (p, row) in rows.into_iter().enumerate() {
        let row = row?;
        for k in 0..n_knots {
            states[(k * n + p) * d..][..d].copy_from_slice(&row.states[k * d..][..d]);
            fk[k * n + p] = row.fk[k];
            if let Some(fl) = flows.as_mut() {
                fl[(k * n + p) * d2..][..d2].copy_from_slice(&row.flows[k * d2..][..d2]);
            }
            if let Some(bi) = bis.as_mut() {
                bi[(k * n + p) * d..][..d].copy_from_slice(&row.bis[k * d..][..d]);
            }
        }
    }
    Ok(PathEnsemble {
        dim: d,
        particles: n,
        grid: params.grid,
        launch_step: params.launch_step,
        stop_step: params.stop_step,
        start_point: params.x0.to_vec(),
        retained_steps,
        states,
        deriv_flows: flows,
        fk_exponent: fk,
        bismut_integral: bis,
    })
}

/// Result of the flow-linearity and moment check.
#[derive(Clone, Copy, Debug)]
pub struct ScalingCheck {
    /// `grad_{cv} X == c grad_v X` held bitwise at every retained knot.
    pub linear: bool,
    /// Mean over particles of `sup_knots |grad_v X|^p / |v|^p`.
    pub moment_ratio: f64,
}

/// Verify directional-derivative linearity exactly and report the
/// empirical p-th moment of the flow.
pub fn derivative_scaling_check(
    ensemble: &PathEnsemble,
    v: &[f64],
    c: f64,
    p: f64,
) -> Result<ScalingCheck> {
    if ensemble.deriv_flows.is_none() {
        return Err(Error::MissingDerivatives);
    }
    let d = ensemble.dim;
    let cv: Vec<f64> = v.iter().map(|x| c * x).collect();
    let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut linear = true;
    let mut moment_sum = 0.0;
    let mut dv = vec![0.0; d];
    let mut dcv = vec![0.0; d];
    for particle in 0..ensemble.particles {
        let mut sup = 0.0f64;
        for knot in 0..ensemble.n_knots() {
            let j = ensemble.flow(knot, particle).expect("checked above");
            mat_vec(j, v, d, &mut dv);
            mat_vec(j, &cv, d, &mut dcv);
            for i in 0..d {
                if dcv[i].to_bits() != (c * dv[i]).to_bits() {
                    linear = false;
                }
            }
            let norm = dv.iter().map(|x| x * x).sum::<f64>().sqrt();
            sup = sup.max(norm / vnorm);
        }
        moment_sum += sup.powf(p);
    }
    Ok(ScalingCheck { linear, moment_ratio: moment_sum / ensemble.particles as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{build, CatalogParams};

    fn heat_spec() -> ProblemSpec {
        build("heat", &CatalogParams::default()).unwrap()
    }

    fn params<'a>(
        spec: &'a ProblemSpec,
        grid: TimeGrid,
        x0: &'a [f64],
        particles: usize,
        want_derivatives: bool,
    ) -> EnsembleParams<'a> {
        EnsembleParams {
            spec,
            drift_extra: None,
            grid,
            launch_step: 0,
            stop_step: grid.n_steps,
            x0,
            particles,
            seed: 99,
            slice_key: 0,
            node_key: 0,
            want_derivatives,
        }
    }

    #[test]
    fn brownian_terminal_moments() {
        // b = 0, a = 1/2 I: X_T - x is exactly Gaussian with variance T - t.
        let spec = heat_spec();
        let grid = TimeGrid::new(50, 0.1).unwrap();
        let n = 100_000;
        let ens = simulate_ensemble(&params(&spec, grid, &[0.3], n, false), Retain::Terminal)
            .unwrap();
        let last = ens.n_knots() - 1;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for p in 0..n {
            let dx = ens.state(last, p)[0] - 0.3;
            sum += dx;
            sum2 += dx * dx;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        let se_mean = (0.1f64 / n as f64).sqrt();
        let se_var = 0.1 * (2.0 / n as f64).sqrt();
        assert!(mean.abs() <= 4.0 * se_mean, "mean {mean} vs se {se_mean}");
        assert!((var - 0.1).abs() <= 4.0 * se_var, "var {var} vs se {se_var}");
    }

    #[test]
    fn constant_coefficients_keep_identity_flow() {
        let spec = heat_spec();
        let grid = TimeGrid::new(20, 0.1).unwrap();
        let ens =
            simulate_ensemble(&params(&spec, grid, &[0.5], 32, true), Retain::Knots).unwrap();
        for knot in 0..ens.n_knots() {
            for p in 0..ens.particles {
                let f = ens.flow(knot, p).unwrap();
                assert_eq!(f[0].to_bits(), 1.0f64.to_bits());
            }
        }
        let check = derivative_scaling_check(&ens, &[1.0], 2.0, 4.0).unwrap();
        assert!(check.linear);
        assert!((check.moment_ratio - 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_potential_exponent_is_linear_in_time() {
        let mut p = CatalogParams::default();
        p.v_amp = std::f64::consts::LN_2;
        let spec = build("const-potential", &p).unwrap();
        let grid = TimeGrid::new(40, 0.1).unwrap();
        let ens = simulate_ensemble(&params(&spec, grid, &[0.1], 8, false), Retain::Knots)
            .unwrap();
        for knot in 0..ens.n_knots() {
            let s = grid.knot(knot);
            for particle in 0..8 {
                let got = ens.fk(knot, particle);
                assert!(
                    (got - std::f64::consts::LN_2 * s).abs() < 1e-12,
                    "knot {knot}: {got}"
                );
            }
        }
    }

    #[test]
    fn rerun_is_bitwise_identical() {
        let spec = heat_spec();
        let grid = TimeGrid::new(25, 0.1).unwrap();
        let first =
            simulate_ensemble(&params(&spec, grid, &[0.7], 4, true), Retain::Knots).unwrap();
        let second =
            simulate_ensemble(&params(&spec, grid, &[0.7], 4, true), Retain::Knots).unwrap();
        assert_eq!(first.states, second.states);
        assert_eq!(first.deriv_flows, second.deriv_flows);
        assert_eq!(first.bismut_integral, second.bismut_integral);
    }

    #[test]
    fn replaying_increments_reproduces_flow() {
        // The stored flow satisfies the exact recursion: replay it from the
        // keyed increments and compare bitwise. Coefficients vary in x so
        // the flow is nontrivial.
        let mut spec = heat_spec();
        spec.drift_b =
            std::sync::Arc::new(|_, x, out| out[0] = (std::f64::consts::TAU * x[0]).sin());
        spec.diffusion_a = std::sync::Arc::new(|_, x, out| {
            out[0] = 0.5 * (1.0 + 0.4 * (std::f64::consts::TAU * x[0]).cos())
        });
        let grid = TimeGrid::new(16, 0.05).unwrap();
        let pr = params(&spec, grid, &[0.4], 3, true);
        let ens = simulate_ensemble(&pr, Retain::Knots).unwrap();
        for particle in 0..3 {
            let mut replayed = vec![1.0f64];
            let mut x = 0.4f64;
            let stream = RngStream::new(99, 0, 0, particle as u32);
            let mut flows = vec![replayed[0]];
            for step in 0..16 {
                let s = grid.knot(step);
                let dt = grid.step(step);
                let tr = grid.horizon - s;
                let xi = stream.normal(step as u32, CH_INCREMENT, 0);
                let h = 1e-4 * (1.0 + x.abs());
                let mut fplus = [0.0];
                let mut fminus = [0.0];
                let mut am = [0.0];
                spec.eval_b(tr, &[x + h], &mut fplus);
                spec.eval_b(tr, &[x - h], &mut fminus);
                let db = (fplus[0] - fminus[0]) / (2.0 * h);
                spec.eval_a(tr, &[x + h], &mut am);
                let sp = (2.0 * am[0]).sqrt();
                spec.eval_a(tr, &[x - h], &mut am);
                let sm = (2.0 * am[0]).sqrt();
                let dsig = (sp - sm) / (2.0 * h);
                let j = replayed[0];
                let mut jn = j + db * j * dt;
                if dsig != 0.0 {
                    jn += dsig * j * xi * dt.sqrt();
                }
                replayed[0] = jn;
                flows.push(jn);
                // advance state like the kernel does
                let mut b = [0.0];
                spec.eval_b(tr, &[x], &mut b);
                spec.eval_a(tr, &[x], &mut am);
                x += b[0] * dt + (2.0 * am[0]).sqrt() * xi * dt.sqrt();
            }
            for (knot, want) in flows.iter().enumerate() {
                let got = ens.flow(knot, particle).unwrap()[0];
                assert_eq!(got.to_bits(), want.to_bits(), "knot {knot}");
            }
        }
    }

    #[test]
    fn pooled_increments_pass_chi_square() {
        // With b = 0, a = I/2 the scaled increments are iid standard
        // normals; 64 equal-probability bins, 1e-3 level.
        let spec = heat_spec();
        let grid = TimeGrid::new(100, 0.1).unwrap();
        let n = 10_000; // n * steps = 1e6 samples
        let ens = simulate_ensemble(&params(&spec, grid, &[0.0], n, false), Retain::Knots)
            .unwrap();
        let bins = 64usize;
        let mut counts = vec![0usize; bins];
        let sqrt_dt = grid.step_size().sqrt();
        let mut total = 0usize;
        for knot in 0..ens.n_knots() - 1 {
            for p in 0..n {
                let z = (ens.state(knot + 1, p)[0] - ens.state(knot, p)[0]) / sqrt_dt;
                let u = normal_cdf(z);
                let b = ((u * bins as f64) as usize).min(bins - 1);
                counts[b] += 1;
                total += 1;
            }
        }
        let expect = total as f64 / bins as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        // Wilson-Hilferty quantile for chi2(63) at 0.999.
        let k = (bins - 1) as f64;
        let z = 3.090_232_306_167_813_5;
        let crit = k * (1.0 - 2.0 / (9.0 * k) + z * (2.0 / (9.0 * k)).sqrt()).powi(3);
        assert!(chi2 < crit, "chi2 {chi2} >= crit {crit}");
    }

    fn normal_cdf(z: f64) -> f64 {
        0.5 * erfc_approx(-z / std::f64::consts::SQRT_2)
    }

    // Abramowitz-Stegun 7.1.26 style erfc, enough resolution for binning.
    fn erfc_approx(x: f64) -> f64 {
        let sign = if x < 0.0 { -1.0 } else { 1.0 };
        let x = x.abs();
        let t = 1.0 / (1.0 + 0.327_591_1 * x);
        let poly = t
            * (0.254_829_592
                + t * (-0.284_496_736 + t * (1.421_413_741 + t * (-1.453_152_027 + t * 1.061_405_429))));
        let erf = 1.0 - poly * (-x * x).exp();
        if sign < 0.0 {
            1.0 + erf
        } else {
            1.0 - erf
        }
    }

    #[test]
    fn blowup_is_reported() {
        // A superlinear extra drift in the unwrapped state escapes to
        // infinity within a few steps.
        let spec = heat_spec();
        let grid = TimeGrid::new(50, 1.0).unwrap();
        let explosive = |_s: f64, x: &[f64], out: &mut [f64]| out[0] = 1e4 * x[0] * x[0];
        let mut pr = params(&spec, grid, &[0.9], 4, false);
        pr.drift_extra = Some(&explosive);
        let err = simulate_ensemble(&pr, Retain::Terminal);
        assert!(matches!(err, Err(Error::Blowup { .. })));
    }
}
