//! Check suites run by `bilevel-adapt check`.

use bilevel_adapt::hypergradient::{
    exact_hypergradient_pinv, lower_null_directions, slice_minimum,
};
use bilevel_adapt::oracle::{
    check_gradients, lower_slice, penalty_slice, pl_empirical_check, SampleBox,
    GRADIENT_CHECK_THRESHOLD,
};
use bilevel_adapt::problems::ProblemSpec;
use bilevel_adapt::rng::SplitMix64;
use bilevel_adapt::vector;
use bilevel_adapt::{BilevelProblem, Error, Result};

pub const GRADIENT_SAMPLES: usize = 32;
pub const PL_SAMPLES: usize = 4000;
pub const HYPERGRADIENT_POINTS: usize = 4;
pub const NULL_PERTURBATIONS: usize = 8;
/// Tolerance between the pseudo-inverse formula and a declared `∇φ`.
pub const CLOSED_FORM_TOL: f64 = 1e-8;
/// Relative tolerance against central differences of `φ`.
pub const PHI_FD_TOL: f64 = 1e-5;
pub const PHI_FD_STEP: f64 = 1e-5;
/// Allowed change of the hypergradient across lower-level minimizers.
pub const SELECTION_TOL: f64 = 1e-10;
/// Inner tolerance for numerically computed slice minima.
pub const SLICE_MIN_TOL: f64 = 1e-11;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Gradients,
    Pl,
    Hypergradient,
    All,
}

impl Suite {
    fn includes(self, other: Suite) -> bool {
        self == Suite::All || self == other
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Comparison {
    /// Passes when the measured value is at most the tolerance.
    AtMost,
    /// Passes when the measured value is at least the tolerance.
    AtLeast,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub suite: &'static str,
    pub quantity: String,
    pub value: f64,
    pub tolerance: f64,
    pub comparison: Comparison,
    pub passed: bool,
}

impl CheckRow {
    fn new(
        suite: &'static str,
        quantity: String,
        value: f64,
        tolerance: f64,
        comparison: Comparison,
    ) -> Self {
        let passed = match comparison {
            Comparison::AtMost => value <= tolerance,
            Comparison::AtLeast => value >= tolerance,
        };
        Self {
            suite,
            quantity,
            value,
            tolerance,
            comparison,
            passed,
        }
    }
}

pub fn run_suite(
    spec: &ProblemSpec,
    problem: &dyn BilevelProblem,
    suite: Suite,
    seed: u64,
) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    if suite.includes(Suite::Gradients) {
        rows.extend(gradient_rows(problem, seed)?);
    }
    if suite.includes(Suite::Pl) {
        rows.extend(pl_rows(spec, problem, seed)?);
    }
    if suite.includes(Suite::Hypergradient) {
        rows.extend(hypergradient_rows(spec, problem, seed)?);
    }
    Ok(rows)
}

pub fn gradient_rows(problem: &dyn BilevelProblem, seed: u64) -> Result<Vec<CheckRow>> {
    let report = check_gradients(problem, GRADIENT_SAMPLES, seed)?;
    Ok(report
        .entries()
        .iter()
        .map(|(name, err)| {
            CheckRow::new(
                "gradients",
                format!("{name} relative error"),
                *err,
                GRADIENT_CHECK_THRESHOLD,
                Comparison::AtMost,
            )
        })
        .collect())
}

/// Splits the problem box into its `x` and `y` parts; without a box, a cube
/// of half-width 10 around the origin is used.
fn boxes(spec: &ProblemSpec, problem: &dyn BilevelProblem) -> Result<(SampleBox, SampleBox)> {
    let (dx, dy) = (problem.dim_x(), problem.dim_y());
    if spec.bounds.len() == dx + dy {
        let lo: Vec<f64> = spec.bounds.iter().map(|b| b[0]).collect();
        let hi: Vec<f64> = spec.bounds.iter().map(|b| b[1]).collect();
        Ok((
            SampleBox::new(lo[..dx].to_vec(), hi[..dx].to_vec())?,
            SampleBox::new(lo[dx..].to_vec(), hi[dx..].to_vec())?,
        ))
    } else {
        Ok((
            SampleBox::cube(dx, &vec![0.0; dx], 10.0)?,
            SampleBox::cube(dy, &vec![0.0; dy], 10.0)?,
        ))
    }
}

/// Corners and centre of the `x` box.
fn x_probes(x_box: &SampleBox) -> Vec<Vec<f64>> {
    let mid: Vec<f64> = x_box
        .lo
        .iter()
        .zip(&x_box.hi)
        .map(|(l, h)| 0.5 * (l + h))
        .collect();
    vec![x_box.lo.clone(), mid, x_box.hi.clone()]
}

pub fn pl_rows(
    spec: &ProblemSpec,
    problem: &dyn BilevelProblem,
    seed: u64,
) -> Result<Vec<CheckRow>> {
    let constants = problem.constants().ok_or_else(|| {
        Error::Unsupported(format!("problem {} declares no constants", problem.id()))
    })?;
    let (x_box, y_box) = boxes(spec, problem)?;
    let mut rows = Vec::new();
    for &sigma in &constants.sigma_grid {
        let mut worst = f64::INFINITY;
        for (i, x) in x_probes(&x_box).iter().enumerate() {
            let (_, h_star) = slice_minimum(problem, x, sigma, SLICE_MIN_TOL)?;
            let mut field = if sigma == 0.0 {
                lower_slice(problem, x)?
            } else {
                penalty_slice(problem, x, sigma)?
            };
            let outcome = pl_empirical_check(
                &mut field,
                h_star,
                constants.mu,
                &y_box,
                PL_SAMPLES,
                seed + i as u64,
            )?;
            worst = worst.min(outcome.worst_ratio);
        }
        rows.push(CheckRow::new(
            "pl",
            format!("worst PL ratio, sigma = {sigma}"),
            worst,
            constants.mu,
            Comparison::AtLeast,
        ));
    }
    Ok(rows)
}

/// Central differences of `φ`.
fn phi_fd(problem: &dyn BilevelProblem, x: &[f64]) -> Option<Vec<f64>> {
    let mut out = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + PHI_FD_STEP;
        let up = problem.phi(&probe)?;
        probe[i] = x[i] - PHI_FD_STEP;
        let down = problem.phi(&probe)?;
        probe[i] = x[i];
        out.push((up - down) / (2.0 * PHI_FD_STEP));
    }
    Some(out)
}

pub fn hypergradient_rows(
    spec: &ProblemSpec,
    problem: &dyn BilevelProblem,
    seed: u64,
) -> Result<Vec<CheckRow>> {
    let (x_box, _) = boxes(spec, problem)?;
    let mut rng = SplitMix64::new(seed);
    let mut closed = 0.0f64;
    let mut fd = 0.0f64;
    let mut selection = 0.0f64;
    let (mut have_closed, mut have_fd, mut have_null) = (false, false, false);
    for k in 0..HYPERGRADIENT_POINTS {
        let x = x_box.sample(&mut rng);
        let y = problem.y_star(&x).ok_or_else(|| {
            Error::Unsupported(format!("problem {} declares no y_star", problem.id()))
        })?;
        let pinv = exact_hypergradient_pinv(problem, &x, &y)?;
        if let Some(g) = problem.grad_phi(&x) {
            have_closed = true;
            closed = closed.max(vector::diff_norm(&pinv.value, &g));
        }
        if let Some(g) = phi_fd(problem, &x) {
            have_fd = true;
            let scale = vector::norm(&g).max(1e-2);
            fd = fd.max(vector::diff_norm(&pinv.value, &g) / scale);
        }
        for n in lower_null_directions(problem, &x, &y, NULL_PERTURBATIONS, seed ^ (k as u64 + 1))?
        {
            have_null = true;
            let shifted: Vec<f64> = y.iter().zip(n.iter()).map(|(a, b)| a + b).collect();
            let other = exact_hypergradient_pinv(problem, &x, &shifted)?;
            selection = selection.max(vector::diff_norm(&other.value, &pinv.value));
        }
    }
    let mut rows = Vec::new();
    if have_closed {
        rows.push(CheckRow::new(
            "hypergradient",
            "pseudo-inverse vs closed-form gradient".into(),
            closed,
            CLOSED_FORM_TOL,
            Comparison::AtMost,
        ));
    }
    if have_fd {
        rows.push(CheckRow::new(
            "hypergradient",
            "pseudo-inverse vs finite differences (relative)".into(),
            fd,
            PHI_FD_TOL,
            Comparison::AtMost,
        ));
    }
    if have_null {
        rows.push(CheckRow::new(
            "hypergradient",
            "selection invariance over null-space shifts".into(),
            selection,
            SELECTION_TOL,
            Comparison::AtMost,
        ));
    }
    if rows.is_empty() {
        return Err(Error::Unsupported(format!(
            "problem {} has no reference for the hypergradient suite",
            problem.id()
        )));
    }
    Ok(rows)
}

pub fn format_table(rows: &[CheckRow]) -> String {
    let width = rows
        .iter()
        .map(|r| r.quantity.len())
        .max()
        .unwrap_or(8)
        .max(8);
    let mut out = format!(
        "{:<14} {:<width$} {:>12} {:>14}  result\n",
        "suite", "quantity", "value", "tolerance"
    );
    for r in rows {
        let op = match r.comparison {
            Comparison::AtMost => "<=",
            Comparison::AtLeast => ">=",
        };
        out.push_str(&format!(
            "{:<14} {:<width$} {:>12.4e} {op} {:>11.4e}  {}\n",
            r.suite,
            r.quantity,
            r.value,
            r.tolerance,
            if r.passed { "pass" } else { "FAIL" }
        ));
    }
    out
}
