use nalgebra::DMatrix;

use crate::oracle::{
    hyper_smoothness, lower_slice, pl_empirical_check, BilevelProblem, ProblemConstants, SampleBox,
};

/// Nonconvex lower level: `g(x, y) = u² + 3 sin²(u)` with `u = y − x`, and
/// `f(x, y) = ½(y − 1)² + ½(x − 2)²`.
#[derive(Debug, Clone)]
pub struct P3 {
    constants: ProblemConstants,
}

pub(crate) const P3_BOX: [[f64; 2]; 2] = [[-3.0, 5.0], [-13.0, 15.0]];
/// Range of `y − x` scanned when estimating the lower-level PL constant.
pub const P3_SCAN_HALF_WIDTH: f64 = 10.0;
/// Fraction of the scanned lower-level PL ratio that is declared as `mu`;
/// the margin covers the penalty slices on the box for `σ ≤ 0.2`.
pub const P3_MU_MARGIN: f64 = 0.6;
const P3_SCAN_SAMPLES: usize = 20_000;

pub(crate) fn curvature(u: f64) -> f64 {
    2.0 + 6.0 * (2.0 * u).cos()
}

impl P3 {
    pub fn new(seed: u64) -> Self {
        Self::with_constants(Self::estimate_constants(seed))
    }

    pub(crate) fn with_constants(constants: ProblemConstants) -> Self {
        Self { constants }
    }

    /// Estimates `mu` by sampling the lower slice at `x = 0`; the slice only
    /// depends on `y − x`, so one slice covers every `x`.
    pub fn estimate_constants(seed: u64) -> ProblemConstants {
        let probe = Self::with_constants(ProblemConstants {
            mu: 1.0,
            l_f: 0.0,
            smooth_f: 0.0,
            smooth_g: 1.0,
            rho_f: 0.0,
            rho_g: 0.0,
            smooth_phi: 0.0,
            sigma_bar: 0.0,
            sigma_grid: vec![],
            mu_empirical: true,
        });
        let mut slice = lower_slice(&probe, &[0.0]).expect("1-D slice");
        let region = SampleBox::cube(1, &[0.0], P3_SCAN_HALF_WIDTH).expect("finite box");
        let scan = pl_empirical_check(
            &mut slice,
            0.0,
            f64::MIN_POSITIVE,
            &region,
            P3_SCAN_SAMPLES,
            seed,
        )
        .expect("scan has nondegenerate samples");
        let mu = P3_MU_MARGIN * scan.worst_ratio;

        // ∇f = (x − 2, y − 1) over the box.
        let l_f = (5.0f64.powi(2) + 14.0f64.powi(2)).sqrt();
        let smooth_g = 8.0;
        let rho_g = 24.0 * std::f64::consts::SQRT_2;
        ProblemConstants {
            mu,
            l_f,
            smooth_f: 1.0,
            smooth_g,
            rho_f: 0.0,
            rho_g,
            smooth_phi: hyper_smoothness(l_f, 1.0, smooth_g, rho_g, mu),
            sigma_bar: 0.2,
            sigma_grid: vec![0.0, 0.05, 0.1, 0.2],
            mu_empirical: true,
        }
    }
}

impl BilevelProblem for P3 {
    fn id(&self) -> &str {
        "p3"
    }
    fn dim_x(&self) -> usize {
        1
    }
    fn dim_y(&self) -> usize {
        1
    }

    fn f_value(&self, x: &[f64], y: &[f64]) -> f64 {
        0.5 * (y[0] - 1.0).powi(2) + 0.5 * (x[0] - 2.0).powi(2)
    }
    fn grad_x_f(&self, x: &[f64], _y: &[f64]) -> Vec<f64> {
        vec![x[0] - 2.0]
    }
    fn grad_y_f(&self, _x: &[f64], y: &[f64]) -> Vec<f64> {
        vec![y[0] - 1.0]
    }

    fn g_value(&self, x: &[f64], y: &[f64]) -> f64 {
        let u = y[0] - x[0];
        u * u + 3.0 * u.sin().powi(2)
    }
    fn grad_x_g(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let u = y[0] - x[0];
        vec![-(2.0 * u + 3.0 * (2.0 * u).sin())]
    }
    fn grad_y_g(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let u = y[0] - x[0];
        vec![2.0 * u + 3.0 * (2.0 * u).sin()]
    }

    fn constants(&self) -> Option<&ProblemConstants> {
        Some(&self.constants)
    }

    fn hess_yy_g(&self, x: &[f64], y: &[f64]) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_element(1, 1, curvature(y[0] - x[0])))
    }
    fn hess_xy_g(&self, x: &[f64], y: &[f64]) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_element(1, 1, -curvature(y[0] - x[0])))
    }

    fn phi(&self, x: &[f64]) -> Option<f64> {
        Some(0.5 * (x[0] - 1.0).powi(2) + 0.5 * (x[0] - 2.0).powi(2))
    }
    fn grad_phi(&self, x: &[f64]) -> Option<Vec<f64>> {
        Some(vec![(x[0] - 1.0) + (x[0] - 2.0)])
    }
    fn y_star(&self, x: &[f64]) -> Option<Vec<f64>> {
        Some(vec![x[0]])
    }
    fn lower_set_distance(&self, x: &[f64], y: &[f64]) -> Option<f64> {
        Some((y[0] - x[0]).abs())
    }
}
