use nalgebra::DMatrix;

use crate::oracle::{hyper_smoothness, BilevelProblem, ProblemConstants};

/// `f(x, y) = ½(y − 1)²`, `g(x, y) = ½(y − x)²` on the real line.
#[derive(Debug, Clone)]
pub struct P1 {
    constants: ProblemConstants,
}

pub(crate) const P1_BOX: [[f64; 2]; 2] = [[-10.0, 10.0], [-10.0, 10.0]];

impl P1 {
    pub fn new() -> Self {
        Self::with_constants(Self::declared_constants())
    }

    pub(crate) fn with_constants(constants: ProblemConstants) -> Self {
        Self { constants }
    }

    pub fn declared_constants() -> ProblemConstants {
        // |∇f| = |y − 1| is at most 11 on the box.
        let l_f = 11.0;
        ProblemConstants {
            mu: 1.0,
            l_f,
            smooth_f: 1.0,
            smooth_g: 1.0,
            rho_f: 0.0,
            rho_g: 0.0,
            smooth_phi: hyper_smoothness(l_f, 1.0, 1.0, 0.0, 1.0),
            sigma_bar: 1.0,
            sigma_grid: vec![0.0, 0.05, 0.1, 0.2],
            mu_empirical: false,
        }
    }
}

impl Default for P1 {
    fn default() -> Self {
        Self::new()
    }
}

impl BilevelProblem for P1 {
    fn id(&self) -> &str {
        "p1"
    }
    fn dim_x(&self) -> usize {
        1
    }
    fn dim_y(&self) -> usize {
        1
    }

    fn f_value(&self, _x: &[f64], y: &[f64]) -> f64 {
        0.5 * (y[0] - 1.0).powi(2)
    }
    fn grad_x_f(&self, _x: &[f64], _y: &[f64]) -> Vec<f64> {
        vec![0.0]
    }
    fn grad_y_f(&self, _x: &[f64], y: &[f64]) -> Vec<f64> {
        vec![y[0] - 1.0]
    }

    fn g_value(&self, x: &[f64], y: &[f64]) -> f64 {
        0.5 * (y[0] - x[0]).powi(2)
    }
    fn grad_x_g(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        vec![x[0] - y[0]]
    }
    fn grad_y_g(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        vec![y[0] - x[0]]
    }

    fn constants(&self) -> Option<&ProblemConstants> {
        Some(&self.constants)
    }

    fn hess_yy_g(&self, _x: &[f64], _y: &[f64]) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_element(1, 1, 1.0))
    }
    fn hess_xy_g(&self, _x: &[f64], _y: &[f64]) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_element(1, 1, -1.0))
    }

    fn phi(&self, x: &[f64]) -> Option<f64> {
        Some(0.5 * (x[0] - 1.0).powi(2))
    }
    fn grad_phi(&self, x: &[f64]) -> Option<Vec<f64>> {
        Some(vec![x[0] - 1.0])
    }
    fn y_star(&self, x: &[f64]) -> Option<Vec<f64>> {
        Some(vec![x[0]])
    }
    fn y_sigma_star(&self, x: &[f64], sigma: f64) -> Option<Vec<f64>> {
        Some(vec![(sigma + x[0]) / (1.0 + sigma)])
    }
    fn lower_set_distance(&self, x: &[f64], y: &[f64]) -> Option<f64> {
        Some((y[0] - x[0]).abs())
    }
    fn penalty_set_distance(&self, x: &[f64], sigma: f64, y: &[f64]) -> Option<f64> {
        Some((y[0] - (sigma + x[0]) / (1.0 + sigma)).abs())
    }
}
