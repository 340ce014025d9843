//! Small dense symmetric linear algebra for d <= 3 diffusion matrices.

use crate::error::{Error, Result};

/// Cyclic Jacobi eigendecomposition of a symmetric `d x d` matrix
/// (row-major). Returns `(eigenvalues, eigenvectors)` with eigenvectors in
/// columns: `a = V diag(w) V^T`.
pub fn sym_eig(a: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _sweep in 0..64 {
        let mut off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                off += m[p * d + q] * m[p * d + q];
            }
        }
        if off <= 1e-30 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = m[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * d + p];
                let aqq = m[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let mkp = m[k * d + p];
                    let mkq = m[k * d + q];
                    m[k * d + p] = c * mkp - s * mkq;
                    m[k * d + q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let mpk = m[p * d + k];
                    let mqk = m[q * d + k];
                    m[p * d + k] = c * mpk - s * mqk;
                    m[q * d + k] = s * mpk + c * mqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let w = (0..d).map(|i| m[i * d + i]).collect();
    (w, v)
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |acc, &x| acc.max(x.abs()))
}

/// Symmetric positive-definite square root of `2a`, written into `out`.
///
/// This is the diffusion coefficient `sigma = sqrt(2a)` of the simulated
/// SDE, on the stack for the stepping loop. Fails on asymmetric input
/// (tolerance 1e-9 relative) or a non-positive eigenvalue.
pub fn sigma_into(a: &[f64], d: usize, time: f64, out: &mut [f64]) -> Result<()> {
    debug_assert_eq!(a.len(), d * d);
    if d == 1 {
        let two_a = 2.0 * a[0];
        if !(two_a > 0.0) {
            return Err(Error::BadDiffusion {
                time,
                msg: format!("eigenvalue {} <= 0", a[0]),
            });
        }
        out[0] = two_a.sqrt();
        return Ok(());
    }
    let scale = max_abs(a).max(1e-300);
    for i in 0..d {
        for j in (i + 1)..d {
            if (a[i * d + j] - a[j * d + i]).abs() > 1e-9 * scale {
                return Err(Error::BadDiffusion {
                    time,
                    msg: format!(
                        "asymmetry |a[{i}{j}] - a[{j}{i}]| = {:e}",
                        (a[i * d + j] - a[j * d + i]).abs()
                    ),
                });
            }
        }
    }
    let mut two_a = [0.0; 9];
    for (o, &x) in two_a.iter_mut().zip(a.iter()) {
        *o = 2.0 * x;
    }
    let (w, v) = sym_eig(&two_a[..d * d], d);
    out[..d * d].fill(0.0);
    for (k, &wk) in w.iter().enumerate() {
        if !(wk > 0.0) {
            return Err(Error::BadDiffusion {
                time,
                msg: format!("eigenvalue {} <= 0 of 2a", wk / 2.0),
            });
        }
        let sq = wk.sqrt();
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] += sq * v[i * d + k] * v[j * d + k];
            }
        }
    }
    Ok(())
}

/// Allocating wrapper around [`sigma_into`].
pub fn sigma_from_a(a: &[f64], d: usize, time: f64) -> Result<Vec<f64>> {
    let mut out = vec![0.0; d * d];
    sigma_into(a, d, time, &mut out)?;
    Ok(out)
}

/// Inverse of a symmetric positive-definite matrix, written into `out`.
pub fn sym_inv_into(a: &[f64], d: usize, out: &mut [f64]) {
    if d == 1 {
        out[0] = 1.0 / a[0];
        return;
    }
    let (w, v) = sym_eig(a, d);
    out[..d * d].fill(0.0);
    for (k, &wk) in w.iter().enumerate() {
        let iw = 1.0 / wk;
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] += iw * v[i * d + k] * v[j * d + k];
            }
        }
    }
}

/// Allocating wrapper around [`sym_inv_into`].
pub fn sym_inv(a: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    sym_inv_into(a, d, &mut out);
    out
}

#[inline]
pub fn mat_vec(a: &[f64], x: &[f64], d: usize, out: &mut [f64]) {
    for i in 0..d {
        let mut s = 0.0;
        for j in 0..d {
            s += a[i * d + j] * x[j];
        }
        out[i] = s;
    }
}

#[inline]
pub fn mat_mul(a: &[f64], b: &[f64], d: usize, out: &mut [f64]) {
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += a[i * d + k] * b[k * d + j];
            }
            out[i * d + j] = s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_root() {
        let s = sigma_from_a(&[1.0, 0.0, 0.0, 1.0], 2, 0.0).unwrap();
        let r = std::f64::consts::SQRT_2;
        for (i, want) in [r, 0.0, 0.0, r].iter().enumerate() {
            assert!((s[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn diagonal_root() {
        let s = sigma_from_a(&[2.0, 0.0, 0.0, 0.5], 2, 0.0).unwrap();
        assert!((s[0] - 2.0).abs() < 1e-12);
        assert!((s[3] - 1.0).abs() < 1e-12);
        assert!(s[1].abs() < 1e-12 && s[2].abs() < 1e-12);
    }

    #[test]
    fn dense_root_squares_back() {
        // 2a = [[10,6],[6,10]]; its spd root is [[3,1],[1,3]], computed
        // independently from eigenpairs (16, (1,1)/sqrt2), (4, (1,-1)/sqrt2).
        let a = [5.0, 3.0, 3.0, 5.0];
        let s = sigma_from_a(&a, 2, 0.0).unwrap();
        for (got, want) in s.iter().zip([3.0, 1.0, 1.0, 3.0]) {
            assert!((got - want).abs() < 1e-10);
        }
        let mut sq = [0.0; 4];
        mat_mul(&s, &s, 2, &mut sq);
        let amax = 5.0;
        for (i, &v) in sq.iter().enumerate() {
            assert!((v - 2.0 * a[i]).abs() <= 1e-10 * amax);
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(sigma_from_a(&[1.0, 0.5, 0.2, 1.0], 2, 0.0).is_err());
        assert!(sigma_from_a(&[-1.0], 1, 0.0).is_err());
        assert!(sigma_from_a(&[1.0, 2.0, 2.0, 1.0], 2, 0.0).is_err()); // eigenvalue -1
    }

    #[test]
    fn sym_inv_matches() {
        let a = [5.0, 3.0, 3.0, 5.0];
        let inv = sym_inv(&a, 2);
        let mut prod = [0.0; 4];
        mat_mul(&a, &inv, 2, &mut prod);
        for (i, want) in [1.0, 0.0, 0.0, 1.0].iter().enumerate() {
            assert!((prod[i] - want).abs() < 1e-12);
        }
    }
}
