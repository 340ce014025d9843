//! Cole-Hopf machinery for the quadratic-gradient (KPZ-type) equations.
//!
//! The untransformed equation reads
//!
//! ```text
//! du/dt = L u - beta <a grad u, grad u> + F(., phi_beta(u)) . grad u + Vbar
//! ```
//!
//! componentwise, and the substitution `v = exp(-beta u)` turns it into the
//! gradient-free problem
//!
//! ```text
//! dv/dt = (L - beta V) v + F(., beta^{-1}(1 - v)) . grad v,   v_0 = exp(-beta u_0),
//! ```
//!
//! which the Monte Carlo stack can solve. For `beta = 0` the base equation
//! is used directly (it is then of Navier-Stokes type, with `Vbar` a plain
//! source).

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::problem::{CoeffInit, CoeffMat, CoeffScalar, CoeffVec, DomainMode, ProblemSpec};

/// `F(t, x, r1) -> d`: the first-order coefficient of the KPZ-type form,
/// depending on the solution value only.
pub type KpzNonlin = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;

/// Problem data for the KPZ/Navier-Stokes family.
#[derive(Clone)]
pub struct KpzProblem {
    pub dim_d: usize,
    pub dim_m: usize,
    pub horizon: f64,
    pub domain: DomainMode,
    pub diffusion_a: CoeffMat,
    pub drift_b: CoeffVec,
    pub nonlinearity_f: KpzNonlin,
    pub beta: f64,
    /// Scalar potential entering as the constant m-vector source `Vbar`.
    pub v_bar: CoeffScalar,
    pub initial_u0: CoeffInit,
}

/// `phi_beta(u) = (beta^{-1} (1 - exp(-beta u^i)))_i`, continuously extended
/// by the identity at `beta = 0`. Exponents are clamped at +-700 against
/// overflow.
pub fn phi_beta(u: &[f64], beta: f64, out: &mut [f64]) {
    if beta == 0.0 {
        out.copy_from_slice(u);
        return;
    }
    for (o, &ui) in out.iter_mut().zip(u.iter()) {
        let e = (-beta * ui).clamp(-700.0, 700.0);
        *o = (1.0 - e.exp()) / beta;
    }
}

impl KpzProblem {
    /// The equation in general form, suitable for the finite-difference
    /// solver: the quadratic term and the source fold into `g`, and the
    /// transport coefficient reads the solution through `phi_beta`.
    pub fn direct_problem(&self) -> ProblemSpec {
        let d = self.dim_d;
        let m = self.dim_m;
        let beta = self.beta;
        let a = self.diffusion_a.clone();
        let f_kpz = self.nonlinearity_f.clone();
        let v_bar = self.v_bar.clone();

        let g: crate::problem::CoeffSource = Arc::new(move |t, x, _r1, r2, _r3, out| {
            // -beta <a grad u^i, grad u^i> + Vbar per component.
            let mut amat = [0.0; 9];
            a(t, x, &mut amat[..d * d]);
            let vb = v_bar(t, x);
            for (i, o) in out.iter_mut().enumerate().take(m) {
                let mut quad = 0.0;
                for p in 0..d {
                    for q in 0..d {
                        quad += amat[p * d + q] * r2[p * m + i] * r2[q * m + i];
                    }
                }
                *o = -beta * quad + vb;
            }
        });
        let f: crate::problem::CoeffNonlin = Arc::new(move |t, x, r1, _r2, out| {
            let mut phi = [0.0; 8];
            phi_beta(r1, beta, &mut phi[..r1.len()]);
            f_kpz(t, x, &phi[..r1.len()], out);
        });
        ProblemSpec {
            dim_d: d,
            dim_m: m,
            horizon: self.horizon,
            domain: self.domain,
            diffusion_a: self.diffusion_a.clone(),
            drift_b: self.drift_b.clone(),
            potential_v: Arc::new(|_, _| 0.0),
            nonlinearity_f: f,
            source_g: g,
            g_spatial_only: false,
            initial_u0: self.initial_u0.clone(),
        }
    }

    /// The transformed problem in `v = exp(-beta u)`: potential `-beta V`,
    /// transport coefficient `F(., beta^{-1}(1 - r1))`, no source, initial
    /// datum `exp(-beta u0)`. Errors for `beta = 0`.
    pub fn build_transformed_problem(&self) -> Result<ProblemSpec> {
        if self.beta == 0.0 {
            return Err(Error::BetaZero);
        }
        let beta = self.beta;
        let m = self.dim_m;
        let f_kpz = self.nonlinearity_f.clone();
        let v_bar = self.v_bar.clone();
        let u0 = self.initial_u0.clone();

        let f: crate::problem::CoeffNonlin = Arc::new(move |t, x, r1, _r2, out| {
            let mut arg = [0.0; 8];
            for (o, &vi) in arg.iter_mut().zip(r1.iter()) {
                *o = (1.0 - vi) / beta;
            }
            f_kpz(t, x, &arg[..r1.len()], out);
        });
        let potential: CoeffScalar = Arc::new(move |t, x| -beta * v_bar(t, x));
        let init: CoeffInit = Arc::new(move |x, out| {
            u0(x, out);
            for o in out.iter_mut() {
                *o = ((-beta * *o).clamp(-700.0, 700.0)).exp();
            }
        });
        Ok(ProblemSpec {
            dim_d: self.dim_d,
            dim_m: m,
            horizon: self.horizon,
            domain: self.domain,
            diffusion_a: self.diffusion_a.clone(),
            drift_b: self.drift_b.clone(),
            potential_v: potential,
            nonlinearity_f: f,
            source_g: Arc::new(|_, _, _, _, _, out| out.fill(0.0)),
            g_spatial_only: true,
            initial_u0: init,
        })
    }
}

/// Invert `v = exp(-beta u)` componentwise on a flat value table laid out
/// as (slice, node, component). A nonpositive `v` falsifies the transform's
/// premise and aborts with its location.
pub fn invert_values(values: &[f64], nodes: usize, m: usize, beta: f64) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(values.len());
    for (i, &v) in values.iter().enumerate() {
        if !(v > 0.0) {
            let flat = i / m;
            return Err(Error::PositivityLost { value: v, slice: flat / nodes, node: flat % nodes });
        }
        out.push(-v.ln() / beta);
    }
    Ok(out)
}
