//! Dense linear algebra written independently of the library, used as
//! reference oracles.

#![allow(clippy::needless_range_loop)]
#![allow(dead_code)]

use nalgebra::DMatrix;

pub type Dense = Vec<Vec<f64>>;

pub fn from_nalgebra(m: &DMatrix<f64>) -> Dense {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn transpose(a: &Dense) -> Dense {
    let (n, m) = (a.len(), a[0].len());
    (0..m).map(|j| (0..n).map(|i| a[i][j]).collect()).collect()
}

pub fn matmul(a: &Dense, b: &Dense) -> Dense {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    (0..n)
        .map(|i| {
            (0..m)
                .map(|j| (0..k).map(|l| a[i][l] * b[l][j]).sum())
                .collect()
        })
        .collect()
}

pub fn matvec(a: &Dense, v: &[f64]) -> Vec<f64> {
    a.iter()
        .map(|row| row.iter().zip(v).map(|(x, y)| x * y).sum())
        .collect()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    norm(&sub(a, b))
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix. Returns
/// eigenvalues and eigenvectors (as columns of the second result).
pub fn jacobi_eigen(sym: &Dense) -> (Vec<f64>, Dense) {
    let n = sym.len();
    let mut a = sym.clone();
    let mut v: Dense = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k][p], v[k][q]);
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

/// Gaussian elimination with partial pivoting.
pub fn solve(a: &Dense, b: &[f64]) -> Vec<f64> {
    let n = a.len();
    let mut m: Dense = a
        .iter()
        .zip(b)
        .map(|(row, bi)| {
            let mut r = row.clone();
            r.push(*bi);
            r
        })
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        m.swap(col, piv);
        for r in col + 1..n {
            let f = m[r][col] / m[col][col];
            for c in col..=n {
                m[r][c] -= f * m[col][c];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| m[r][c] * x[c]).sum();
        x[r] = (m[r][n] - s) / m[r][r];
    }
    x
}

/// Eigenpairs of `AᵀA` with eigenvalue above `tol`, and the remaining
/// (null-space) eigenvectors.
pub struct Spectrum {
    pub values: Vec<f64>,
    pub range: Vec<Vec<f64>>,
    pub null: Vec<Vec<f64>>,
}

pub fn gram_spectrum(a: &Dense, tol: f64) -> Spectrum {
    let (vals, vecs) = jacobi_eigen(&matmul(&transpose(a), a));
    let n = vals.len();
    let mut out = Spectrum {
        values: vec![],
        range: vec![],
        null: vec![],
    };
    for i in 0..n {
        let col: Vec<f64> = (0..n).map(|k| vecs[k][i]).collect();
        if vals[i] > tol {
            out.values.push(vals[i]);
            out.range.push(col);
        } else {
            out.null.push(col);
        }
    }
    out
}
