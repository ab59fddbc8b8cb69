//! Oracle abstractions: bilevel problems, single-level slices and their
//! evaluation counters, plus the gradient and PL sanity checks.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::SplitMix64;
use crate::vector::{self, Vector};

/// First-order oracle bundle for an upper-level objective `f(x, y)` and a
/// lower-level objective `g(x, y)`.
///
/// Implementations must be deterministic. The optional methods expose closed
/// forms for synthetic instances; the solver never calls them.
pub trait BilevelProblem: Send + Sync {
    fn id(&self) -> &str;
    fn dim_x(&self) -> usize;
    fn dim_y(&self) -> usize;

    fn f_value(&self, x: &[f64], y: &[f64]) -> f64;
    fn grad_x_f(&self, x: &[f64], y: &[f64]) -> Vec<f64>;
    fn grad_y_f(&self, x: &[f64], y: &[f64]) -> Vec<f64>;

    fn g_value(&self, x: &[f64], y: &[f64]) -> f64;
    fn grad_x_g(&self, x: &[f64], y: &[f64]) -> Vec<f64>;
    fn grad_y_g(&self, x: &[f64], y: &[f64]) -> Vec<f64>;

    fn constants(&self) -> Option<&ProblemConstants> {
        None
    }

    /// `∇²_yy g` as a `d_y × d_y` matrix.
    fn hess_yy_g(&self, _x: &[f64], _y: &[f64]) -> Option<DMatrix<f64>> {
        None
    }

    /// Mixed block `∂²g / ∂x_i ∂y_j` as a `d_x × d_y` matrix.
    fn hess_xy_g(&self, _x: &[f64], _y: &[f64]) -> Option<DMatrix<f64>> {
        None
    }

    fn phi(&self, _x: &[f64]) -> Option<f64> {
        None
    }

    fn grad_phi(&self, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }

    /// A representative of the lower-level solution set.
    fn y_star(&self, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }

    /// A representative of the penalty solution set.
    fn y_sigma_star(&self, _x: &[f64], _sigma: f64) -> Option<Vec<f64>> {
        None
    }

    /// Distance from `y` to the lower-level solution set at `x`.
    fn lower_set_distance(&self, _x: &[f64], _y: &[f64]) -> Option<f64> {
        None
    }

    /// Distance from `y` to the penalty solution set at `(x, sigma)`.
    fn penalty_set_distance(&self, _x: &[f64], _sigma: f64, _y: &[f64]) -> Option<f64> {
        None
    }
}

/// Declared problem constants. Lipschitz constants hold on the problem's box.
///
/// `L_g` bounds both the curvature of `g` in `y` and the Lipschitz constant of
/// `∇_x g` with respect to `y`, which are the two ways it enters the analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemConstants {
    pub mu: f64,
    pub l_f: f64,
    #[serde(rename = "L_f")]
    pub smooth_f: f64,
    #[serde(rename = "L_g")]
    pub smooth_g: f64,
    pub rho_f: f64,
    pub rho_g: f64,
    #[serde(rename = "L_phi")]
    pub smooth_phi: f64,
    /// Largest penalty parameter for which `mu` is declared to hold.
    pub sigma_bar: f64,
    /// Penalty parameters on which the PL suite is run.
    pub sigma_grid: Vec<f64>,
    /// True when `mu` was estimated by a sampling scan rather than derived.
    #[serde(default)]
    pub mu_empirical: bool,
}

impl ProblemConstants {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("l_f", self.l_f),
            ("L_f", self.smooth_f),
            ("rho_f", self.rho_f),
            ("rho_g", self.rho_g),
            ("L_phi", self.smooth_phi),
            ("sigma_bar", self.sigma_bar),
        ];
        if !(self.mu > 0.0) {
            return Err(Error::Argument(format!(
                "mu must be positive, got {}",
                self.mu
            )));
        }
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Argument(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        if !(self.smooth_g >= self.mu) {
            return Err(Error::Argument(format!(
                "L_g = {} must be at least mu = {}",
                self.smooth_g, self.mu
            )));
        }
        if let Some(s) = self
            .sigma_grid
            .iter()
            .find(|s| !(**s >= 0.0 && **s <= self.sigma_bar))
        {
            return Err(Error::Argument(format!(
                "sigma grid value {s} outside [0, sigma_bar]"
            )));
        }
        Ok(())
    }
}

/// Lipschitz constant of the hyper-objective gradient,
/// `(L_f + l_f ρ_g / μ)(1 + L_g / μ)²`.
pub fn hyper_smoothness(l_f: f64, smooth_f: f64, smooth_g: f64, rho_g: f64, mu: f64) -> f64 {
    let ratio = 1.0 + smooth_g / mu;
    (smooth_f + l_f * rho_g / mu) * ratio * ratio
}

/// Exact tallies of oracle calls.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleCounters {
    pub grad_f_count: u64,
    pub grad_g_count: u64,
    pub value_f_count: u64,
    pub value_g_count: u64,
}

impl OracleCounters {
    pub fn reset(&mut self) {
        *self = Self::default();
    }

    pub fn absorb(&mut self, other: &OracleCounters) {
        self.grad_f_count += other.grad_f_count;
        self.grad_g_count += other.grad_g_count;
        self.value_f_count += other.value_f_count;
        self.value_g_count += other.value_g_count;
    }

    pub fn total_gradients(&self) -> u64 {
        self.grad_f_count + self.grad_g_count
    }
}

type ValueFn<'a> = Box<dyn Fn(&[f64]) -> f64 + Send + Sync + 'a>;
type GradFn<'a> = Box<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync + 'a>;

enum FieldKind<'a> {
    Lower {
        problem: &'a dyn BilevelProblem,
        x: Vector,
    },
    Penalty {
        problem: &'a dyn BilevelProblem,
        x: Vector,
        sigma: f64,
    },
    Custom {
        value: ValueFn<'a>,
        gradient: GradFn<'a>,
    },
}

/// A single-level differentiable objective with its own call counters.
pub struct ScalarField<'a> {
    dim: usize,
    kind: FieldKind<'a>,
    counters: OracleCounters,
    gradient_calls: u64,
    value_calls: u64,
}

impl<'a> ScalarField<'a> {
    /// Field backed by closures; calls are counted but not attributed to f or g.
    pub fn from_fns(
        dim: usize,
        value: impl Fn(&[f64]) -> f64 + Send + Sync + 'a,
        gradient: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'a,
    ) -> Self {
        Self::with_kind(
            dim,
            FieldKind::Custom {
                value: Box::new(value),
                gradient: Box::new(gradient),
            },
        )
    }

    fn with_kind(dim: usize, kind: FieldKind<'a>) -> Self {
        Self {
            dim,
            kind,
            counters: OracleCounters::default(),
            gradient_calls: 0,
            value_calls: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn counters(&self) -> OracleCounters {
        self.counters
    }

    pub fn gradient_calls(&self) -> u64 {
        self.gradient_calls
    }

    pub fn value_calls(&self) -> u64 {
        self.value_calls
    }

    pub fn reset_counters(&mut self) {
        self.counters.reset();
        self.gradient_calls = 0;
        self.value_calls = 0;
    }

    pub fn value(&mut self, u: &[f64]) -> Result<f64> {
        check_dim(self.dim, u.len())?;
        self.value_calls += 1;
        let v = match &self.kind {
            FieldKind::Lower { problem, x } => {
                self.counters.value_g_count += 1;
                problem.g_value(x, u)
            }
            FieldKind::Penalty { problem, x, sigma } => {
                self.counters.value_f_count += 1;
                self.counters.value_g_count += 1;
                *sigma * problem.f_value(x, u) + problem.g_value(x, u)
            }
            FieldKind::Custom { value, .. } => value(u),
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numeric {
                context: format!("field value is {v}"),
                iterate: Some(u.to_vec()),
            })
        }
    }

    pub fn gradient(&mut self, u: &[f64]) -> Result<Vector> {
        check_dim(self.dim, u.len())?;
        self.gradient_calls += 1;
        let g = match &self.kind {
            FieldKind::Lower { problem, x } => {
                self.counters.grad_g_count += 1;
                problem.grad_y_g(x, u)
            }
            FieldKind::Penalty { problem, x, sigma } => {
                self.counters.grad_f_count += 1;
                self.counters.grad_g_count += 1;
                let gf = problem.grad_y_f(x, u);
                let gg = problem.grad_y_g(x, u);
                gf.iter().zip(&gg).map(|(a, b)| *sigma * a + b).collect()
            }
            FieldKind::Custom { gradient, .. } => gradient(u),
        };
        check_dim(self.dim, g.len())?;
        Vector::new(g).map_err(|e| match e {
            Error::Numeric { context, .. } => Error::Numeric {
                context: format!("gradient: {context}"),
                iterate: Some(u.to_vec()),
            },
            other => other,
        })
    }
}

/// `y ↦ g(x, y)`.
pub fn lower_slice<'a>(problem: &'a dyn BilevelProblem, x: &[f64]) -> Result<ScalarField<'a>> {
    check_dim(problem.dim_x(), x.len())?;
    Ok(ScalarField::with_kind(
        problem.dim_y(),
        FieldKind::Lower {
            problem,
            x: Vector::new(x.to_vec())?,
        },
    ))
}

/// `y ↦ σ f(x, y) + g(x, y)`.
pub fn penalty_slice<'a>(
    problem: &'a dyn BilevelProblem,
    x: &[f64],
    sigma: f64,
) -> Result<ScalarField<'a>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Argument(format!(
            "penalty parameter must be >= 0, got {sigma}"
        )));
    }
    check_dim(problem.dim_x(), x.len())?;
    Ok(ScalarField::with_kind(
        problem.dim_y(),
        FieldKind::Penalty {
            problem,
            x: Vector::new(x.to_vec())?,
            sigma,
        },
    ))
}

pub const FD_STEP: f64 = 1e-6;
pub const GRADIENT_CHECK_THRESHOLD: f64 = 1e-4;
/// Floor on the denominator of the relative gradient error.
const RELATIVE_FLOOR: f64 = 1e-2;

/// Maximum relative error of each analytic gradient against central differences.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientCheckReport {
    pub samples: usize,
    pub grad_x_f: f64,
    pub grad_y_f: f64,
    pub grad_x_g: f64,
    pub grad_y_g: f64,
}

impl GradientCheckReport {
    pub fn entries(&self) -> [(&'static str, f64); 4] {
        [
            ("grad_x_f", self.grad_x_f),
            ("grad_y_f", self.grad_y_f),
            ("grad_x_g", self.grad_x_g),
            ("grad_y_g", self.grad_y_g),
        ]
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.entries()
            .into_iter()
            .filter(|(_, e)| !(*e <= GRADIENT_CHECK_THRESHOLD))
            .map(|(n, _)| n)
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }
}

fn central_difference(point: &[f64], func: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = point.to_vec();
    (0..point.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let plus = func(&probe);
            probe[i] = orig - FD_STEP;
            let minus = func(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * FD_STEP)
        })
        .collect()
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    if analytic.len() != numeric.len() {
        return f64::INFINITY;
    }
    let diff = vector::diff_norm(analytic, numeric);
    if diff == 0.0 {
        return 0.0;
    }
    let scale = vector::norm(analytic)
        .max(vector::norm(numeric))
        .max(RELATIVE_FLOOR);
    diff / scale
}

/// Compares the four partial gradients against central differences at
/// `samples` points drawn uniformly from the unit ball in `(x, y)`.
pub fn check_gradients(
    problem: &dyn BilevelProblem,
    samples: usize,
    seed: u64,
) -> Result<GradientCheckReport> {
    if samples == 0 {
        return Err(Error::Argument(
            "check_gradients needs at least one sample".into(),
        ));
    }
    let (dx, dy) = (problem.dim_x(), problem.dim_y());
    let mut rng = SplitMix64::new(seed);
    let mut report = GradientCheckReport {
        samples,
        grad_x_f: 0.0,
        grad_y_f: 0.0,
        grad_x_g: 0.0,
        grad_y_g: 0.0,
    };
    for _ in 0..samples {
        let point = rng.unit_ball(dx + dy);
        let (x, y) = point.split_at(dx);

        let fx = central_difference(x, |xp| problem.f_value(xp, y));
        let fy = central_difference(y, |yp| problem.f_value(x, yp));
        let gx = central_difference(x, |xp| problem.g_value(xp, y));
        let gy = central_difference(y, |yp| problem.g_value(x, yp));

        report.grad_x_f = report
            .grad_x_f
            .max(relative_error(&problem.grad_x_f(x, y), &fx));
        report.grad_y_f = report
            .grad_y_f
            .max(relative_error(&problem.grad_y_f(x, y), &fy));
        report.grad_x_g = report
            .grad_x_g
            .max(relative_error(&problem.grad_x_g(x, y), &gx));
        report.grad_y_g = report
            .grad_y_g
            .max(relative_error(&problem.grad_y_g(x, y), &gy));
    }
    Ok(report)
}

/// Axis-aligned sampling region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl SampleBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        check_dim(lo.len(), hi.len())?;
        if lo
            .iter()
            .zip(&hi)
            .any(|(l, h)| !(l <= h) || !l.is_finite() || !h.is_finite())
        {
            return Err(Error::Argument(
                "sample box bounds must be finite with lo <= hi".into(),
            ));
        }
        Ok(Self { lo, hi })
    }

    pub fn cube(dim: usize, center: &[f64], half_width: f64) -> Result<Self> {
        check_dim(dim, center.len())?;
        Self::new(
            center.iter().map(|c| c - half_width).collect(),
            center.iter().map(|c| c + half_width).collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn sample(&self, rng: &mut SplitMix64) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| rng.uniform(*l, *h))
            .collect()
    }
}

/// Gap below which a sample is treated as a minimizer and skipped.
pub const PL_DEGENERATE_GAP: f64 = 1e-12;
/// Relative slack when comparing the worst ratio against a declared constant.
pub const PL_RELATIVE_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlOutcome {
    /// Minimum of `‖∇h‖² / (2 (h − h*))` over the evaluated samples.
    pub worst_ratio: f64,
    pub worst_point: Vec<f64>,
    pub evaluated: usize,
    pub skipped: usize,
    pub mu: f64,
    pub passed: bool,
}

/// Empirical PL check: samples `region` and reports the worst PL ratio.
pub fn pl_empirical_check(
    field: &mut ScalarField<'_>,
    h_star: f64,
    mu: f64,
    region: &SampleBox,
    samples: usize,
    seed: u64,
) -> Result<PlOutcome> {
    if !(mu > 0.0) {
        return Err(Error::Argument(format!("mu must be positive, got {mu}")));
    }
    check_dim(field.dim(), region.dim())?;
    let mut rng = SplitMix64::new(seed);
    let mut worst = f64::INFINITY;
    let mut worst_point = Vec::new();
    let mut skipped = 0;
    for _ in 0..samples {
        let u = region.sample(&mut rng);
        let gap = field.value(&u)? - h_star;
        if gap < PL_DEGENERATE_GAP {
            skipped += 1;
            continue;
        }
        let ratio = field.gradient(&u)?.norm_squared() / (2.0 * gap);
        if ratio < worst {
            worst = ratio;
            worst_point = u;
        }
    }
    let evaluated = samples - skipped;
    if evaluated == 0 {
        return Err(Error::Diagnostic(format!(
            "all {samples} PL samples lie within {PL_DEGENERATE_GAP:e} of h*"
        )));
    }
    Ok(PlOutcome {
        worst_ratio: worst,
        worst_point,
        evaluated,
        skipped,
        mu,
        passed: worst >= mu * (1.0 - PL_RELATIVE_SLACK),
    })
}
