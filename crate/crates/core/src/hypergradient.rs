//! Approximate hypergradient assembly and exact reference oracles.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::linalg::{mat_vec, pseudo_inverse};
use crate::oracle::{lower_slice, penalty_slice, BilevelProblem, OracleCounters, ProblemConstants};
use crate::rng::SplitMix64;
use crate::subsolvers::{adagn, fixed_step_gd, DEFAULT_MAX_ITERS};
use crate::vector::{self, Vector};

/// Step for finite-difference Hessian blocks when a problem has no analytic ones.
pub const HESSIAN_FD_STEP: f64 = 1e-5;
/// Tolerance on `‖∇_y g(x, y*)‖` for the pseudo-inverse oracle.
pub const STATIONARITY_TOL: f64 = 1e-8;
/// Loosest inner tolerance accepted when reference inner solutions are computed numerically.
pub const REFERENCE_INNER_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HypergradientSample {
    pub x: Vector,
    pub y_hat: Vector,
    pub z_hat: Vector,
    pub sigma: f64,
    pub value: Vector,
}

impl HypergradientSample {
    pub fn assemble(
        problem: &dyn BilevelProblem,
        x: &[f64],
        y_hat: &[f64],
        z_hat: &[f64],
        sigma: f64,
        counters: &mut OracleCounters,
    ) -> Result<Self> {
        let value = approx_hypergradient(problem, x, y_hat, z_hat, sigma, counters)?;
        Ok(Self {
            x: Vector::new(x.to_vec())?,
            y_hat: Vector::new(y_hat.to_vec())?,
            z_hat: Vector::new(z_hat.to_vec())?,
            sigma,
            value,
        })
    }
}

/// `∇_x f(x, ŷ) + (∇_x g(x, ŷ) − ∇_x g(x, ẑ)) / σ`.
///
/// The `g` difference is formed first and divided by `σ` before `∇_x f` is
/// added; one `f` gradient and two `g` gradients are tallied.
pub fn approx_hypergradient(
    problem: &dyn BilevelProblem,
    x: &[f64],
    y_hat: &[f64],
    z_hat: &[f64],
    sigma: f64,
    counters: &mut OracleCounters,
) -> Result<Vector> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Argument(format!(
            "penalty parameter must be positive, got {sigma}"
        )));
    }
    check_dim(problem.dim_x(), x.len())?;
    check_dim(problem.dim_y(), y_hat.len())?;
    check_dim(problem.dim_y(), z_hat.len())?;
    let gx_y = problem.grad_x_g(x, y_hat);
    let gx_z = problem.grad_x_g(x, z_hat);
    let fx = problem.grad_x_f(x, y_hat);
    counters.grad_g_count += 2;
    counters.grad_f_count += 1;
    check_dim(problem.dim_x(), gx_y.len())?;
    check_dim(problem.dim_x(), fx.len())?;
    let value: Vec<f64> = gx_y
        .iter()
        .zip(&gx_z)
        .zip(&fx)
        .map(|((a, b), f)| f + (a - b) / sigma)
        .collect();
    Vector::new(value).map_err(|_| Error::Numeric {
        context: format!("approximate hypergradient is not finite (sigma = {sigma})"),
        iterate: Some(x.to_vec()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PinvHypergradient {
    pub value: Vector,
    pub rank: usize,
    pub warning: Option<String>,
}

fn fd_jacobian(point: &[f64], rows: usize, func: impl Fn(&[f64]) -> Vec<f64>) -> DMatrix<f64> {
    // Column j holds the central difference of `func` along coordinate j.
    let mut probe = point.to_vec();
    let mut jac = DMatrix::zeros(rows, point.len());
    for j in 0..point.len() {
        let orig = probe[j];
        probe[j] = orig + HESSIAN_FD_STEP;
        let plus = func(&probe);
        probe[j] = orig - HESSIAN_FD_STEP;
        let minus = func(&probe);
        probe[j] = orig;
        for i in 0..rows {
            jac[(i, j)] = (plus[i] - minus[i]) / (2.0 * HESSIAN_FD_STEP);
        }
    }
    jac
}

fn hessian_blocks(
    problem: &dyn BilevelProblem,
    x: &[f64],
    y: &[f64],
) -> (DMatrix<f64>, DMatrix<f64>) {
    let (dx, dy) = (problem.dim_x(), problem.dim_y());
    let h_yy = problem.hess_yy_g(x, y).unwrap_or_else(|| {
        let j = fd_jacobian(y, dy, |yp| problem.grad_y_g(x, yp));
        (&j + j.transpose()) * 0.5
    });
    let h_xy = problem
        .hess_xy_g(x, y)
        .unwrap_or_else(|| fd_jacobian(y, dx, |yp| problem.grad_x_g(x, yp)));
    (h_yy, h_xy)
}

/// Reference hypergradient `∇_x f − ∇²_xy g (∇²_yy g)† ∇_y f` at a lower-level minimizer.
pub fn exact_hypergradient_pinv(
    problem: &dyn BilevelProblem,
    x: &[f64],
    y_star: &[f64],
) -> Result<PinvHypergradient> {
    check_dim(problem.dim_x(), x.len())?;
    check_dim(problem.dim_y(), y_star.len())?;
    let stationarity = vector::norm(&problem.grad_y_g(x, y_star));
    if !(stationarity <= STATIONARITY_TOL) {
        return Err(Error::Precondition(format!(
            "y_star is not a lower-level minimizer: ‖∇_y g‖ = {stationarity:e} > {STATIONARITY_TOL:e}"
        )));
    }
    let (h_yy, h_xy) = hessian_blocks(problem, x, y_star);
    let pinv = pseudo_inverse(&h_yy);
    let fy = problem.grad_y_f(x, y_star);
    let fx = problem.grad_x_f(x, y_star);
    let correction = mat_vec(&h_xy, &mat_vec(&pinv.matrix, &fy));
    let value: Vec<f64> = fx.iter().zip(&correction).map(|(a, c)| a - c).collect();
    let warning = pinv.ambiguous.then(|| {
        format!(
            "singular value within a factor {} of the cutoff {:e}: {:?}",
            crate::linalg::PINV_AMBIGUITY_FACTOR,
            pinv.cutoff,
            pinv.singular_values
        )
    });
    Ok(PinvHypergradient {
        value: Vector::new(value)?,
        rank: pinv.rank,
        warning,
    })
}

/// Random directions in the null space of `∇²_yy g(x, y)`, each scaled to
/// unit norm. Moving a lower-level minimizer along them stays in the solution
/// set for quadratic lower levels. Returns an empty list when the Hessian is
/// nonsingular.
pub fn lower_null_directions(
    problem: &dyn BilevelProblem,
    x: &[f64],
    y: &[f64],
    count: usize,
    seed: u64,
) -> Result<Vec<Vector>> {
    check_dim(problem.dim_x(), x.len())?;
    check_dim(problem.dim_y(), y.len())?;
    let (h_yy, _) = hessian_blocks(problem, x, y);
    let pinv = pseudo_inverse(&h_yy);
    let dy = problem.dim_y();
    if pinv.rank == dy {
        return Ok(Vec::new());
    }
    let range = &pinv.matrix * &h_yy;
    let null = DMatrix::identity(dy, dy) - range;
    let mut rng = SplitMix64::new(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let r: Vec<f64> = (0..dy).map(|_| rng.normal()).collect();
        let n = mat_vec(&null, &r);
        let len = vector::norm(&n);
        if len > 1e-6 {
            out.push(Vector::new(n.iter().map(|v| v / len).collect())?);
        }
    }
    Ok(out)
}

/// High-accuracy slice solve. With declared constants this is gradient
/// descent with step `1/(σ L_f + L_g)`, otherwise AdaGrad-Norm. AC-GM is
/// avoided here: close to the minimizer its secant estimates are dominated
/// by rounding in the function values.
fn reference_solve(
    problem: &dyn BilevelProblem,
    field: &mut crate::oracle::ScalarField<'_>,
    sigma: f64,
    start: &[f64],
    inner_eps: f64,
) -> Result<Vector> {
    let r = match problem.constants() {
        Some(c) => fixed_step_gd(
            field,
            start,
            1.0 / (sigma * c.smooth_f + c.smooth_g),
            inner_eps,
            DEFAULT_MAX_ITERS,
        )?,
        None => adagn(field, start, 1.0, inner_eps, DEFAULT_MAX_ITERS)?,
    };
    if r.truncated {
        return Err(Error::Truncated {
            cap: DEFAULT_MAX_ITERS,
        });
    }
    Ok(r.final_point)
}

/// Minimizer and minimum of the slice `σ f(x, ·) + g(x, ·)` (`σ = 0` gives the
/// lower-level slice). Closed forms are used when declared; otherwise AC-GM
/// is run to `inner_eps`, starting from `y*(x)` when that is known.
pub fn slice_minimum(
    problem: &dyn BilevelProblem,
    x: &[f64],
    sigma: f64,
    inner_eps: f64,
) -> Result<(Vector, f64)> {
    if !(sigma >= 0.0) {
        return Err(Error::Argument(format!(
            "penalty parameter must be nonnegative, got {sigma}"
        )));
    }
    check_dim(problem.dim_x(), x.len())?;
    let mut field = if sigma == 0.0 {
        lower_slice(problem, x)?
    } else {
        penalty_slice(problem, x, sigma)?
    };
    let declared = if sigma == 0.0 {
        problem.y_star(x)
    } else {
        problem.y_sigma_star(x, sigma)
    };
    let point = match declared {
        Some(y) => Vector::new(y)?,
        None => {
            if !(inner_eps > 0.0 && inner_eps <= REFERENCE_INNER_TOL) {
                return Err(Error::Argument(format!(
                    "reference inner tolerance must be in (0, {REFERENCE_INNER_TOL:e}], got {inner_eps}"
                )));
            }
            let start = problem
                .y_star(x)
                .unwrap_or_else(|| vec![0.0; problem.dim_y()]);
            reference_solve(problem, &mut field, sigma, &start, inner_eps)?
        }
    };
    let value = field.value(&point)?;
    Ok((point, value))
}

/// Penalty-surrogate gradient evaluated at (near-)exact inner solutions.
pub fn penalty_gradient(
    problem: &dyn BilevelProblem,
    x: &[f64],
    sigma: f64,
    inner_eps: f64,
) -> Result<Vector> {
    if !(sigma > 0.0) {
        return Err(Error::Argument(format!(
            "penalty parameter must be positive, got {sigma}"
        )));
    }
    let (y_sigma, _) = slice_minimum(problem, x, sigma, inner_eps)?;
    let (y_star, _) = slice_minimum(problem, x, 0.0, inner_eps)?;
    let mut scratch = OracleCounters::default();
    approx_hypergradient(problem, x, &y_sigma, &y_star, sigma, &mut scratch)
}

/// Right-hand side of the hypergradient error bound:
/// `C̄σ + (L_f d_y + (L_g/σ) d_y + (L_g/σ) d_z)`.
pub fn hypergradient_error_budget(
    sigma: f64,
    dist_y: f64,
    dist_z: f64,
    constants: &ProblemConstants,
    c_bar_sigma: f64,
) -> f64 {
    let lg_over_sigma = constants.smooth_g / sigma;
    c_bar_sigma * sigma
        + (constants.smooth_f * dist_y + lg_over_sigma * dist_y + lg_over_sigma * dist_z)
}

/// Bound on the approximate hypergradient norm along a solver trajectory,
/// `(l_f + L_g l_f/μ) + C̄ + L_f/μ + 2 L_g/μ`.
pub fn hypergradient_norm_bound(constants: &ProblemConstants, l_f: f64, c_bar_sigma: f64) -> f64 {
    let mu = constants.mu;
    (l_f + constants.smooth_g * l_f / mu)
        + c_bar_sigma
        + constants.smooth_f / mu
        + 2.0 * constants.smooth_g / mu
}

/// Reference `∇φ(x)`: the closed form when declared, else the pseudo-inverse
/// formula at the declared lower-level minimizer.
pub fn reference_hypergradient(problem: &dyn BilevelProblem, x: &[f64]) -> Result<Vector> {
    if let Some(g) = problem.grad_phi(x) {
        return Vector::new(g);
    }
    match problem.y_star(x) {
        Some(y) => Ok(exact_hypergradient_pinv(problem, x, &y)?.value),
        None => Err(Error::Unsupported(format!(
            "problem {} declares neither grad_phi nor y_star",
            problem.id()
        ))),
    }
}

/// Fits the penalty-deviation constant as `max ‖∇φ_σ(x) − ∇φ(x)‖ / σ` over
/// the given points and penalty grid.
pub fn fit_c_bar_sigma(
    problem: &dyn BilevelProblem,
    points: &[Vec<f64>],
    sigmas: &[f64],
    inner_eps: f64,
) -> Result<f64> {
    let mut best: f64 = 0.0;
    for x in points {
        let exact = reference_hypergradient(problem, x)?;
        for &sigma in sigmas {
            let pg = penalty_gradient(problem, x, sigma, inner_eps)?;
            best = best.max(vector::diff_norm(&pg, &exact) / sigma);
        }
    }
    Ok(best)
}
