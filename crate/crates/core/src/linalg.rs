//! Small dense symmetric linear algebra in 64-bit.

use crate::error::{Error, Result};
use crate::grid::Grid;

const MAX_SWEEPS: usize = 100;

/// Eigenpairs of a symmetric matrix, values sorted descending.
/// `vectors` holds the matching unit eigenvectors as columns.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: Grid<f64>,
}

/// Max absolute asymmetry `|a_ij − a_ji|`.
pub fn asymmetry(a: &Grid<f64>) -> f64 {
    let n = a.dim(0);
    let d = a.data();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            worst = worst.max((d[i * n + j] - d[j * n + i]).abs());
        }
    }
    worst
}

/// Cyclic Jacobi eigendecomposition. Only the upper triangle is trusted; the
/// matrix is symmetrized first.
pub fn symmetric_eigen(a: &Grid<f64>) -> Result<SymmetricEigen> {
    let (n, c) = a.as_matrix("symmetric_eigen")?;
    if n != c {
        return Err(Error::shape(
            "symmetric_eigen",
            format!("non-square {n}x{c}"),
        ));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite {
            op: "symmetric_eigen",
        });
    }
    let mut m = a.data().to_vec();
    for i in 0..n {
        for j in i + 1..n {
            let s = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = s;
            m[j * n + i] = s;
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let off = |m: &[f64]| {
        let mut s = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                s += m[i * n + j] * m[i * n + j];
            }
        }
        (2.0 * s).sqrt()
    };

    let mut converged = scale == 0.0 || n < 2;
    let mut sweeps = 0;
    while !converged && sweeps < MAX_SWEEPS {
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (m[p * n + p], m[q * n + q]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = cs * mkp - sn * mkq;
                    m[k * n + q] = sn * mkp + cs * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = cs * mpk - sn * mqk;
                    m[q * n + k] = sn * mpk + cs * mqk;
                }
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = cs * vkp - sn * vkq;
                    v[k * n + q] = sn * vkp + cs * vkq;
                }
            }
        }
        converged = off(&m) <= 1e-15 * scale;
    }
    let diag: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    if !converged {
        let big = diag.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        let small = diag.iter().fold(f64::INFINITY, |a, x| a.min(x.abs()));
        return Err(Error::EigenNonConvergence {
            sweeps,
            condition: big / small,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diag[j].total_cmp(&diag[i]));
    let values = order.iter().map(|&i| diag[i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors[r * n + col] = v[r * n + src];
        }
    }
    Ok(SymmetricEigen {
        values,
        vectors: Grid::new(vec![n, n], vectors)?,
    })
}

/// `V · diag(f(λ)) · Vᵀ`.
pub fn spectral_map(e: &SymmetricEigen, f: impl Fn(f64) -> f64) -> Grid<f64> {
    let n = e.values.len();
    let v = e.vectors.data();
    let fl: Vec<f64> = e.values.iter().map(|&l| f(l)).collect();
    Grid::from_fn(&[n, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        (0..n).map(|k| v[i * n + k] * fl[k] * v[j * n + k]).sum()
    })
}
