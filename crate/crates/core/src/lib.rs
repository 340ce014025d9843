//! Monte Carlo Feynman-Kac solver for semilinear parabolic PDEs.
//!
//! The solver represents the unknown through the backward functional
//! `psi_s(y) = E[u0(X_{s,T}) e^{int V} + int g e^{int V}]` along paths of an
//! Euler-Maruyama SDE whose drift is itself built from `(psi, grad psi)`, and
//! closes the loop with a Picard iteration on the discretized field. An
//! independent method-of-lines finite-difference solver provides the
//! cross-check; Cole-Hopf machinery covers the quadratic-gradient (KPZ-type)
//! equations; everything is driven by a counter-based RNG so runs are
//! bit-reproducible at any worker count.

pub mod catalog;
pub mod config;
pub mod error;
pub mod fd;
pub mod fixed_point;
pub mod fk;
pub mod lattice;
pub mod linalg;
pub mod problem;
pub mod report;
pub mod rng;
pub mod sde;
pub mod snapshot;
pub mod transforms;

pub use error::Error;

/// Map `f` over `0..n`, in parallel when the `parallel` feature is on.
///
/// Output order is by index either way, so results are identical for any
/// worker count.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}
