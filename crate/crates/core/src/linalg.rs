//! Dense pseudo-inverse with a relative singular-value cutoff.

use nalgebra::{DMatrix, DVector};

/// Singular values below this fraction of the largest are treated as zero.
pub const PINV_RELATIVE_CUTOFF: f64 = 1e-8;
/// A singular value within this factor of the cutoff makes the rank ambiguous.
pub const PINV_AMBIGUITY_FACTOR: f64 = 10.0;

#[derive(Debug, Clone)]
pub struct PseudoInverse {
    pub matrix: DMatrix<f64>,
    pub rank: usize,
    pub singular_values: Vec<f64>,
    pub cutoff: f64,
    /// Set when some singular value lies within [`PINV_AMBIGUITY_FACTOR`] of the cutoff.
    pub ambiguous: bool,
}

/// Thin singular value decomposition `M = U diag(s) Vᵀ`, singular values in
/// descending order.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `rows × k` with `k = min(rows, cols)`.
    pub u: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    /// `cols × k`.
    pub v: DMatrix<f64>,
}

const JACOBI_MAX_SWEEPS: usize = 80;

/// One-sided Jacobi SVD. Slower than bidiagonalization but accurate to
/// working precision on the small, possibly rank-deficient matrices used
/// here.
pub fn svd(m: &DMatrix<f64>) -> Svd {
    let (rows, cols) = m.shape();
    if rows < cols {
        let t = svd(&m.transpose());
        return Svd {
            u: t.v,
            singular_values: t.singular_values,
            v: t.u,
        };
    }
    let mut w = m.clone();
    let mut v = DMatrix::<f64>::identity(cols, cols);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha = w.column(p).norm_squared();
                let beta = w.column(q).norm_squared();
                let gamma = w.column(p).dot(&w.column(q));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let (a, b) = (w[(i, p)], w[(i, q)]);
                    w[(i, p)] = c * a - s * b;
                    w[(i, q)] = s * a + c * b;
                }
                for i in 0..cols {
                    let (a, b) = (v[(i, p)], v[(i, q)]);
                    v[(i, p)] = c * a - s * b;
                    v[(i, q)] = s * a + c * b;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..cols).map(|j| w.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
    let u = DMatrix::from_fn(rows, cols, |i, k| {
        let j = order[k];
        if norms[j] > 0.0 {
            w[(i, j)] / norms[j]
        } else {
            0.0
        }
    });
    Svd {
        u,
        singular_values: order.iter().map(|&j| norms[j]).collect(),
        v: DMatrix::from_fn(cols, cols, |i, k| v[(i, order[k])]),
    }
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    svd(m).singular_values.first().copied().unwrap_or(0.0)
}

pub fn pseudo_inverse(m: &DMatrix<f64>) -> PseudoInverse {
    let (rows, cols) = m.shape();
    let d = svd(m);
    let s = &d.singular_values;
    let s_max = s.first().copied().unwrap_or(0.0);
    let cutoff = PINV_RELATIVE_CUTOFF * s_max;

    let mut inv = DMatrix::zeros(cols, rows);
    let mut rank = 0;
    let mut ambiguous = false;
    for (i, &sv) in s.iter().enumerate() {
        if sv > cutoff / PINV_AMBIGUITY_FACTOR && sv < cutoff * PINV_AMBIGUITY_FACTOR {
            ambiguous = true;
        }
        if sv > cutoff && sv > 0.0 {
            rank += 1;
            inv += (d.v.column(i) * d.u.column(i).transpose()) / sv;
        }
    }
    PseudoInverse {
        matrix: inv,
        rank,
        singular_values: s.clone(),
        cutoff,
        ambiguous,
    }
}

pub(crate) fn mat_vec(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    (m * DVector::from_column_slice(v))
        .iter()
        .cloned()
        .collect()
}
