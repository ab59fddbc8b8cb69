use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{pseudo_inverse, spectral_norm, svd};
use crate::oracle::{hyper_smoothness, BilevelProblem, ProblemConstants};
use crate::rng::SplitMix64;

/// Range of the nonzero singular values of `A`.
pub const P2_SINGULAR_RANGE: (f64, f64) = (0.5, 2.0);
pub(crate) const P2_BOX_HALF_WIDTH: f64 = 10.0;

/// Rank-deficient least-squares lower level:
/// `g(x, y) = ½‖Ay − Bx − b‖²`, `f(x, y) = ½‖P(y − ȳ)‖² + ½‖x − x̄‖²`
/// with `P` the orthogonal projector onto the row space of `A`.
#[derive(Debug, Clone)]
pub struct P2 {
    a: DMatrix<f64>,
    b_mat: DMatrix<f64>,
    b_vec: DVector<f64>,
    y_bar: DVector<f64>,
    x_bar: DVector<f64>,
    rank: usize,
    projector: DMatrix<f64>,
    a_pinv: DMatrix<f64>,
    /// Orthonormal basis of the row space of `A` (columns).
    row_basis: DMatrix<f64>,
    /// Nonzero singular values matching `row_basis`.
    singular: Vec<f64>,
    /// `U_r` columns paired with `row_basis`.
    left_basis: DMatrix<f64>,
    constants: ProblemConstants,
}

fn random_orthogonal(rng: &mut SplitMix64, n: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.normal());
    g.qr().q()
}

fn random_vector(rng: &mut SplitMix64, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.normal())
}

fn dv(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

fn to_vec(v: DVector<f64>) -> Vec<f64> {
    v.iter().cloned().collect()
}

/// Generated matrices `(A, B, b, ȳ, x̄)`.
pub struct P2Matrices {
    pub a: DMatrix<f64>,
    pub b_mat: DMatrix<f64>,
    pub b_vec: DVector<f64>,
    pub y_bar: DVector<f64>,
    pub x_bar: DVector<f64>,
}

impl P2Matrices {
    pub fn generate(d_x: usize, d_y: usize, rank: usize, seed: u64) -> Result<Self> {
        if d_x == 0 || d_y == 0 {
            return Err(Error::Argument("P2 dimensions must be positive".into()));
        }
        if rank == 0 || rank > d_y {
            return Err(Error::Argument(format!(
                "P2 rank must lie in [1, d_y = {d_y}], got {rank}"
            )));
        }
        let mut rng = SplitMix64::new(seed);
        let u = random_orthogonal(&mut rng, d_y);
        let v = random_orthogonal(&mut rng, d_y);
        let (lo, hi) = P2_SINGULAR_RANGE;
        let s: Vec<f64> = (0..rank).map(|_| rng.uniform(lo, hi)).collect();
        let mut a = DMatrix::zeros(d_y, d_y);
        for (i, si) in s.iter().enumerate() {
            a += u.column(i) * v.column(i).transpose() * *si;
        }
        let b_mat = DMatrix::from_fn(d_y, d_x, |_, _| 0.5 * rng.normal());
        let b_vec = random_vector(&mut rng, d_y);
        let y_bar = random_vector(&mut rng, d_y);
        let x_bar = random_vector(&mut rng, d_x);
        Ok(Self {
            a,
            b_mat,
            b_vec,
            y_bar,
            x_bar,
        })
    }
}

impl P2 {
    pub fn generate(d_x: usize, d_y: usize, rank: usize, seed: u64) -> Result<Self> {
        Self::from_matrices(P2Matrices::generate(d_x, d_y, rank, seed)?, rank, None)
    }

    /// Builds the instance from its matrices. Declared constants are derived
    /// unless supplied.
    pub fn from_matrices(
        m: P2Matrices,
        rank: usize,
        constants: Option<ProblemConstants>,
    ) -> Result<Self> {
        let d_y = m.a.nrows();
        if m.a.ncols() != d_y {
            return Err(Error::Format(format!(
                "A must be square, got {}x{}",
                m.a.nrows(),
                m.a.ncols()
            )));
        }
        let d_x = m.b_mat.ncols();
        if m.b_mat.nrows() != d_y
            || m.b_vec.len() != d_y
            || m.y_bar.len() != d_y
            || m.x_bar.len() != d_x
            || d_x == 0
        {
            return Err(Error::Format("P2 matrix shapes are inconsistent".into()));
        }
        if rank == 0 || rank > d_y {
            return Err(Error::Argument(format!(
                "P2 rank must lie in [1, d_y = {d_y}], got {rank}"
            )));
        }
        let d = svd(&m.a);
        let singular: Vec<f64> = d.singular_values[..rank].to_vec();
        if singular[rank - 1] <= 1e-8 * singular[0] {
            return Err(Error::Format(format!(
                "A has numerical rank below the declared {rank}"
            )));
        }
        let row_basis = d.v.columns(0, rank).into_owned();
        let left_basis = d.u.columns(0, rank).into_owned();
        let projector = &row_basis * row_basis.transpose();
        let a_pinv = pseudo_inverse(&m.a).matrix;

        let constants = match constants {
            Some(c) => c,
            None => {
                let s_min = singular[rank - 1];
                let mu = s_min * s_min;
                let ata = m.a.transpose() * &m.a;
                let bta = m.b_mat.transpose() * &m.a;
                let smooth_g = spectral_norm(&ata).max(spectral_norm(&bta)).max(mu);
                // ‖∇f‖² ≤ ‖y − ȳ‖² + ‖x − x̄‖², maximized at a box corner.
                let corner = |c: f64| (c.abs() + P2_BOX_HALF_WIDTH).powi(2);
                let l_f = (m.y_bar.iter().map(|c| corner(*c)).sum::<f64>()
                    + m.x_bar.iter().map(|c| corner(*c)).sum::<f64>())
                .sqrt();
                ProblemConstants {
                    mu,
                    l_f,
                    smooth_f: 1.0,
                    smooth_g,
                    rho_f: 0.0,
                    rho_g: 0.0,
                    smooth_phi: hyper_smoothness(l_f, 1.0, smooth_g, 0.0, mu),
                    sigma_bar: 1.0,
                    sigma_grid: vec![0.0, 0.05, 0.1, 0.2],
                    mu_empirical: false,
                }
            }
        };
        Ok(Self {
            a: m.a,
            b_mat: m.b_mat,
            b_vec: m.b_vec,
            y_bar: m.y_bar,
            x_bar: m.x_bar,
            rank,
            projector,
            a_pinv,
            row_basis,
            singular,
            left_basis,
            constants,
        })
    }

    pub fn matrices(&self) -> P2Matrices {
        P2Matrices {
            a: self.a.clone(),
            b_mat: self.b_mat.clone(),
            b_vec: self.b_vec.clone(),
            y_bar: self.y_bar.clone(),
            x_bar: self.x_bar.clone(),
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn projector(&self) -> &DMatrix<f64> {
        &self.projector
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular
    }

    /// Hessian of the penalty slice, `σP + AᵀA`.
    pub fn penalty_hessian(&self, sigma: f64) -> DMatrix<f64> {
        &self.projector * sigma + self.a.transpose() * &self.a
    }

    fn rhs(&self, x: &[f64]) -> DVector<f64> {
        &self.b_mat * dv(x) + &self.b_vec
    }

    fn residual(&self, x: &[f64], y: &[f64]) -> DVector<f64> {
        &self.a * dv(y) - self.rhs(x)
    }

    fn least_norm_lower(&self, x: &[f64]) -> DVector<f64> {
        &self.a_pinv * self.rhs(x)
    }

    fn least_norm_penalty(&self, x: &[f64], sigma: f64) -> DVector<f64> {
        // Row-space coordinates solve (σ + s_i²) w_i = σ v_iᵀȳ + s_i u_iᵀc.
        let c = self.rhs(x);
        let vy = self.row_basis.transpose() * &self.y_bar;
        let uc = self.left_basis.transpose() * c;
        let w = DVector::from_fn(self.rank, |i, _| {
            let s = self.singular[i];
            (sigma * vy[i] + s * uc[i]) / (sigma + s * s)
        });
        &self.row_basis * w
    }
}

impl BilevelProblem for P2 {
    fn id(&self) -> &str {
        "p2"
    }
    fn dim_x(&self) -> usize {
        self.b_mat.ncols()
    }
    fn dim_y(&self) -> usize {
        self.a.nrows()
    }

    fn f_value(&self, x: &[f64], y: &[f64]) -> f64 {
        let py = &self.projector * (dv(y) - &self.y_bar);
        let dx = dv(x) - &self.x_bar;
        0.5 * py.norm_squared() + 0.5 * dx.norm_squared()
    }
    fn grad_x_f(&self, x: &[f64], _y: &[f64]) -> Vec<f64> {
        to_vec(dv(x) - &self.x_bar)
    }
    fn grad_y_f(&self, _x: &[f64], y: &[f64]) -> Vec<f64> {
        to_vec(&self.projector * (dv(y) - &self.y_bar))
    }

    fn g_value(&self, x: &[f64], y: &[f64]) -> f64 {
        0.5 * self.residual(x, y).norm_squared()
    }
    fn grad_x_g(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        to_vec(-(self.b_mat.transpose() * self.residual(x, y)))
    }
    fn grad_y_g(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        to_vec(self.a.transpose() * self.residual(x, y))
    }

    fn constants(&self) -> Option<&ProblemConstants> {
        Some(&self.constants)
    }

    fn hess_yy_g(&self, _x: &[f64], _y: &[f64]) -> Option<DMatrix<f64>> {
        Some(self.a.transpose() * &self.a)
    }
    fn hess_xy_g(&self, _x: &[f64], _y: &[f64]) -> Option<DMatrix<f64>> {
        Some(-(self.b_mat.transpose() * &self.a))
    }

    fn phi(&self, x: &[f64]) -> Option<f64> {
        let y = self.least_norm_lower(x);
        Some(self.f_value(x, y.as_slice()))
    }
    fn grad_phi(&self, x: &[f64]) -> Option<Vec<f64>> {
        // (x − x̄) + (A⁺B)ᵀ (y* − Pȳ)
        let y = self.least_norm_lower(x);
        let sens = &self.a_pinv * &self.b_mat;
        let inner = y - &self.projector * &self.y_bar;
        Some(to_vec(dv(x) - &self.x_bar + sens.transpose() * inner))
    }
    fn y_star(&self, x: &[f64]) -> Option<Vec<f64>> {
        Some(to_vec(self.least_norm_lower(x)))
    }
    fn y_sigma_star(&self, x: &[f64], sigma: f64) -> Option<Vec<f64>> {
        Some(to_vec(self.least_norm_penalty(x, sigma)))
    }
    fn lower_set_distance(&self, x: &[f64], y: &[f64]) -> Option<f64> {
        Some((&self.projector * (dv(y) - self.least_norm_lower(x))).norm())
    }
    fn penalty_set_distance(&self, x: &[f64], sigma: f64, y: &[f64]) -> Option<f64> {
        Some((&self.projector * (dv(y) - self.least_norm_penalty(x, sigma))).norm())
    }
}
