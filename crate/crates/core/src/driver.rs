//! The outer adaptive loop: inner solves with warm starts, hypergradient
//! assembly, and the AdaGrad-Norm outer step.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error as ThisError;

use crate::error::{check_dim, Error, Result};
use crate::hypergradient::{approx_hypergradient, reference_hypergradient};
use crate::oracle::{lower_slice, penalty_slice, BilevelProblem, OracleCounters, ScalarField};
use crate::subsolvers::{acgm, adagn_observed, fixed_step_gd, SubsolverResult, DEFAULT_MAX_ITERS};
use crate::vector::{self, Vector};

/// Traces keep `x_t` only up to this dimension unless explicitly requested.
pub const TRACE_X_MAX_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerMethod {
    Adagn,
    Acgm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// AdaGrad-Norm on both inner problems.
    Adagn,
    /// Auto-conditioned gradient method on both inner problems.
    Acgm,
    /// Fixed steps from declared constants, for comparison.
    TunedBaseline,
    /// Independent choice per inner problem.
    Mixed {
        lower: InnerMethod,
        penalty: InnerMethod,
    },
}

impl Variant {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "adagn" => Ok(Self::Adagn),
            "acgm" => Ok(Self::Acgm),
            "baseline" | "tuned_baseline" => Ok(Self::TunedBaseline),
            other => Err(Error::Argument(format!(
                "unknown variant {other:?}; expected adagn, acgm or baseline"
            ))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Adagn => "adagn",
            Self::Acgm => "acgm",
            Self::TunedBaseline => "baseline",
            Self::Mixed { .. } => "mixed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum InnerSolver {
    Adaptive(InnerMethod),
    Fixed(f64),
}

/// Explicit schedule values that replace the ones derived from `epsilon`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Overrides {
    #[serde(rename = "T", default, skip_serializing_if = "Option::is_none")]
    pub total_iters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_z: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub epsilon: f64,
    pub a0: f64,
    pub b0: f64,
    pub c0: f64,
    pub alpha: f64,
    #[serde(rename = "L01")]
    pub l01: f64,
    #[serde(rename = "L02")]
    pub l02: f64,
    pub variant: Variant,
    pub x0: Vector,
    pub y0: Vector,
    pub z0: Vector,
    pub inner_cap: usize,
    pub outer_cap: usize,
    #[serde(default)]
    pub overrides: Overrides,
    /// Restart the AdaGrad-Norm inner states from `b0`/`c0` at every outer step.
    #[serde(default)]
    pub reset_inner_state: bool,
    /// Keep `x_t` in traces even when `d_x` exceeds [`TRACE_X_MAX_DIM`].
    #[serde(default)]
    pub store_x: bool,
}

/// Iteration count, tolerances and penalty actually used by a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Schedule {
    pub total_iters: usize,
    pub eps_z: f64,
    pub eps_y: f64,
    pub sigma: f64,
}

/// `⌈1/ε²⌉`, snapping values within rounding noise of an integer.
pub fn outer_iterations(epsilon: f64) -> usize {
    let t = 1.0 / (epsilon * epsilon);
    let r = t.round();
    if (t - r).abs() <= 1e-9 * r.max(1.0) {
        r as usize
    } else {
        t.ceil() as usize
    }
}

impl SolverConfig {
    /// Defaults: `a0 = b0 = c0 = 1`, `α = 2`, `L01 = L02 = 1`, zero inner starts.
    pub fn new(epsilon: f64, variant: Variant, x0: Vec<f64>, dim_y: usize) -> Result<Self> {
        Ok(Self {
            epsilon,
            a0: 1.0,
            b0: 1.0,
            c0: 1.0,
            alpha: 2.0,
            l01: 1.0,
            l02: 1.0,
            variant,
            x0: Vector::new(x0)?,
            y0: Vector::zeros(dim_y),
            z0: Vector::zeros(dim_y),
            inner_cap: DEFAULT_MAX_ITERS,
            outer_cap: DEFAULT_MAX_ITERS,
            overrides: Overrides::default(),
            reset_inner_state: false,
            store_x: false,
        })
    }

    pub fn schedule(&self) -> Schedule {
        let eps_sq = self.epsilon * self.epsilon;
        Schedule {
            total_iters: self
                .overrides
                .total_iters
                .unwrap_or_else(|| outer_iterations(self.epsilon)),
            eps_z: self.overrides.eps_z.unwrap_or(eps_sq),
            eps_y: self.overrides.eps_y.unwrap_or(eps_sq),
            sigma: self.overrides.sigma.unwrap_or(self.epsilon),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epsilon", self.epsilon),
            ("a0", self.a0),
            ("b0", self.b0),
            ("c0", self.c0),
            ("L01", self.l01),
            ("L02", self.l02),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Argument(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if !(self.alpha > 1.0) || !self.alpha.is_finite() {
            return Err(Error::Argument(format!(
                "alpha must exceed 1, got {}",
                self.alpha
            )));
        }
        if self.inner_cap == 0 || self.outer_cap == 0 {
            return Err(Error::Argument("iteration caps must be positive".into()));
        }
        let s = self.schedule();
        for (name, v) in [("eps_z", s.eps_z), ("eps_y", s.eps_y), ("sigma", s.sigma)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Argument(format!("{name} must be positive, got {v}")));
            }
        }
        if s.total_iters == 0 {
            return Err(Error::Argument("T must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationTrace {
    pub t: usize,
    pub a_t_next: f64,
    /// `a_{t+1}²`, the exact accumulator (equals `a_t_next²` only up to rounding).
    pub a_sq_next: f64,
    pub hyper_norm: f64,
    #[serde(rename = "K_t")]
    pub k_t: usize,
    #[serde(rename = "N_t")]
    pub n_t: usize,
    pub grad_f_cum: u64,
    pub grad_g_cum: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_t: Option<Vector>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_grad_norm: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TruncationFlags {
    /// `T` exceeded `outer_cap` and the run stopped at the cap.
    pub outer_capped: bool,
    /// Outer iteration and inner problem (`"lower"` / `"penalty"`) that hit `inner_cap`.
    pub inner_truncated: Option<(usize, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveReport {
    pub problem_id: String,
    pub variant: String,
    pub schedule: Schedule,
    pub traces: Vec<IterationTrace>,
    pub best_t: usize,
    pub best_hyper_norm: f64,
    pub best_x: Vector,
    pub final_x: Vector,
    pub total_grad_f: u64,
    pub total_grad_g: u64,
    pub counters: OracleCounters,
    pub wall_time_seconds: f64,
    pub truncation_flags: TruncationFlags,
}

impl SolveReport {
    pub fn total_gradients(&self) -> u64 {
        self.total_grad_f + self.total_grad_g
    }

    /// Smallest exact hypergradient norm over the recorded iterations.
    pub fn best_exact_norm(&self) -> Option<f64> {
        self.traces
            .iter()
            .map(|t| t.exact_grad_norm)
            .collect::<Option<Vec<_>>>()
            .and_then(|v| v.into_iter().reduce(f64::min))
    }
}

/// A failed run with whatever had been recorded before the failure.
#[derive(Debug, ThisError)]
#[error("outer iteration {t}: {error}")]
pub struct SolveFailure {
    pub t: usize,
    #[source]
    pub error: Error,
    pub partial: Box<SolveReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerProblem {
    Lower,
    Penalty,
}

/// Emitted after every inner solve.
pub struct InnerEvent<'a> {
    pub t: usize,
    pub which: InnerProblem,
    pub start: &'a [f64],
    pub result: &'a SubsolverResult,
}

#[allow(clippy::too_many_arguments)]
fn subsolve(
    field: &mut ScalarField<'_>,
    solver: InnerSolver,
    start: &[f64],
    step_state_sq: f64,
    alpha: f64,
    l0: f64,
    eps: f64,
    cap: usize,
) -> Result<SubsolverResult> {
    match solver {
        InnerSolver::Adaptive(InnerMethod::Adagn) => {
            adagn_observed(field, start, step_state_sq, eps, cap, &mut |_| {})
        }
        InnerSolver::Adaptive(InnerMethod::Acgm) => acgm(field, start, alpha, l0, eps, cap),
        InnerSolver::Fixed(step) => fixed_step_gd(field, start, step, eps, cap),
    }
}

struct Recorder {
    traces: Vec<IterationTrace>,
    best: Option<(usize, f64, Vector)>,
    counters: OracleCounters,
}

impl Recorder {
    fn report(
        &self,
        problem: &dyn BilevelProblem,
        config: &SolverConfig,
        schedule: Schedule,
        final_x: &Vector,
        started: Instant,
        flags: TruncationFlags,
    ) -> SolveReport {
        let (best_t, best_hyper_norm, best_x) = self
            .best
            .clone()
            .unwrap_or_else(|| (0, f64::NAN, config.x0.clone()));
        SolveReport {
            problem_id: problem.id().to_string(),
            variant: config.variant.label().to_string(),
            schedule,
            traces: self.traces.clone(),
            best_t,
            best_hyper_norm,
            best_x,
            final_x: final_x.clone(),
            total_grad_f: self.counters.grad_f_count,
            total_grad_g: self.counters.grad_g_count,
            counters: self.counters,
            wall_time_seconds: started.elapsed().as_secs_f64(),
            truncation_flags: flags,
        }
    }
}

pub fn solve(
    problem: &dyn BilevelProblem,
    config: &SolverConfig,
) -> std::result::Result<SolveReport, SolveFailure> {
    solve_observed(problem, config, &mut |_| {})
}

/// Runs the outer loop, reporting each inner solve to `observer`.
pub fn solve_observed(
    problem: &dyn BilevelProblem,
    config: &SolverConfig,
    observer: &mut dyn FnMut(&InnerEvent<'_>),
) -> std::result::Result<SolveReport, SolveFailure> {
    let started = Instant::now();
    let schedule = config.schedule();
    let mut rec = Recorder {
        traces: Vec::new(),
        best: None,
        counters: OracleCounters::default(),
    };
    let mut flags = TruncationFlags::default();
    let mut x = config.x0.clone();

    macro_rules! fail {
        ($t:expr, $err:expr) => {
            return Err(SolveFailure {
                t: $t,
                error: $err,
                partial: Box::new(rec.report(problem, config, schedule, &x, started, flags)),
            })
        };
    }

    let setup = (|| -> Result<(InnerSolver, InnerSolver, Option<f64>)> {
        config.validate()?;
        check_dim(problem.dim_x(), config.x0.dim())?;
        check_dim(problem.dim_y(), config.y0.dim())?;
        check_dim(problem.dim_y(), config.z0.dim())?;
        Ok(match config.variant {
            Variant::Adagn => (
                InnerSolver::Adaptive(InnerMethod::Adagn),
                InnerSolver::Adaptive(InnerMethod::Adagn),
                None,
            ),
            Variant::Acgm => (
                InnerSolver::Adaptive(InnerMethod::Acgm),
                InnerSolver::Adaptive(InnerMethod::Acgm),
                None,
            ),
            Variant::Mixed { lower, penalty } => (
                InnerSolver::Adaptive(lower),
                InnerSolver::Adaptive(penalty),
                None,
            ),
            Variant::TunedBaseline => {
                let c = problem.constants().ok_or_else(|| {
                    Error::Unsupported(format!(
                        "tuned baseline needs declared constants for {}",
                        problem.id()
                    ))
                })?;
                let lower = 1.0 / c.smooth_g;
                let penalty = 1.0 / (schedule.sigma * c.smooth_f + c.smooth_g);
                (
                    InnerSolver::Fixed(lower),
                    InnerSolver::Fixed(penalty),
                    Some(1.0 / c.smooth_phi),
                )
            }
        })
    })();
    let (lower_solver, penalty_solver, fixed_outer_step) = match setup {
        Ok(v) => v,
        Err(e) => fail!(0, e),
    };

    let store_x = config.store_x || problem.dim_x() <= TRACE_X_MAX_DIM;
    let total = schedule.total_iters.min(config.outer_cap);
    flags.outer_capped = schedule.total_iters > config.outer_cap;

    let mut z = config.z0.clone();
    let mut y = config.y0.clone();
    let mut a_sq = config.a0 * config.a0;
    let mut b_sq = config.b0 * config.b0;
    let mut c_sq = config.c0 * config.c0;

    for t in 0..total {
        // Lower-level problem, warm-started from the previous solution.
        let lower = {
            let mut field = match lower_slice(problem, &x) {
                Ok(f) => f,
                Err(e) => fail!(t, e),
            };
            let state = if config.reset_inner_state {
                config.b0 * config.b0
            } else {
                b_sq
            };
            let res = subsolve(
                &mut field,
                lower_solver,
                &z,
                state,
                config.alpha,
                config.l01,
                schedule.eps_z,
                config.inner_cap,
            );
            rec.counters.absorb(&field.counters());
            match res {
                Ok(r) => r,
                Err(e) => fail!(t, e),
            }
        };
        observer(&InnerEvent {
            t,
            which: InnerProblem::Lower,
            start: &z,
            result: &lower,
        });
        if lower.truncated {
            flags.inner_truncated = Some((t, "lower".into()));
            fail!(
                t,
                Error::Truncated {
                    cap: config.inner_cap
                }
            );
        }
        if let Some(sq) = lower.final_step_state_sq {
            b_sq = sq;
        }
        z = lower.final_point.clone();

        let penalty = {
            let mut field = match penalty_slice(problem, &x, schedule.sigma) {
                Ok(f) => f,
                Err(e) => fail!(t, e),
            };
            let state = if config.reset_inner_state {
                config.c0 * config.c0
            } else {
                c_sq
            };
            let res = subsolve(
                &mut field,
                penalty_solver,
                &y,
                state,
                config.alpha,
                config.l02,
                schedule.eps_y,
                config.inner_cap,
            );
            rec.counters.absorb(&field.counters());
            match res {
                Ok(r) => r,
                Err(e) => fail!(t, e),
            }
        };
        observer(&InnerEvent {
            t,
            which: InnerProblem::Penalty,
            start: &y,
            result: &penalty,
        });
        if penalty.truncated {
            flags.inner_truncated = Some((t, "penalty".into()));
            fail!(
                t,
                Error::Truncated {
                    cap: config.inner_cap
                }
            );
        }
        if let Some(sq) = penalty.final_step_state_sq {
            c_sq = sq;
        }
        y = penalty.final_point.clone();

        let hyper =
            match approx_hypergradient(problem, &x, &y, &z, schedule.sigma, &mut rec.counters) {
                Ok(h) => h,
                Err(e) => fail!(t, e),
            };
        let hyper_sq = hyper.norm_squared();
        let hyper_norm = hyper_sq.sqrt();

        let (a_sq_next, a_next, step) = match fixed_outer_step {
            Some(step) => (a_sq, 1.0 / step, step),
            None => {
                let a_sq_next = a_sq + hyper_sq;
                let a_next = a_sq_next.sqrt();
                (a_sq_next, a_next, 1.0 / a_next)
            }
        };
        let exact_grad_norm = problem.grad_phi(&x).map(|g| vector::norm(&g));
        if rec.best.as_ref().is_none_or(|(_, h, _)| hyper_norm < *h) {
            rec.best = Some((t, hyper_norm, x.clone()));
        }
        rec.traces.push(IterationTrace {
            t,
            a_t_next: a_next,
            a_sq_next,
            hyper_norm,
            k_t: lower.iterations,
            n_t: penalty.iterations,
            grad_f_cum: rec.counters.grad_f_count,
            grad_g_cum: rec.counters.grad_g_count,
            x_t: store_x.then(|| x.clone()),
            exact_grad_norm,
        });
        x = match x.add_scaled(-step, &hyper) {
            Ok(v) => v,
            Err(e) => fail!(t, e),
        };
        a_sq = a_sq_next;
    }
    Ok(rec.report(problem, config, schedule, &x, started, flags))
}

/// One solve per tolerance, at most `parallel` at a time. Results keep the
/// order of `epsilons`; a failed run does not affect the others.
pub fn sweep(
    problem: &dyn BilevelProblem,
    base: &SolverConfig,
    epsilons: &[f64],
    parallel: usize,
) -> Result<Vec<std::result::Result<SolveReport, SolveFailure>>> {
    if epsilons.is_empty() {
        return Err(Error::Argument("sweep needs at least one epsilon".into()));
    }
    if epsilons.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
        return Err(Error::Argument("sweep epsilons must be positive".into()));
    }
    if epsilons.windows(2).any(|w| !(w[0] > w[1])) {
        return Err(Error::Argument(
            "sweep epsilons must be strictly descending".into(),
        ));
    }
    let configs: Vec<SolverConfig> = epsilons
        .iter()
        .map(|&epsilon| SolverConfig {
            epsilon,
            ..base.clone()
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.max(1))
        .build()
        .map_err(|e| Error::Argument(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(|| configs.par_iter().map(|c| solve(problem, c)).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnrichedReport {
    pub report: SolveReport,
    pub best_exact_t: usize,
    pub best_exact_norm: f64,
    /// Iterations where the measured hypergradient is exactly zero although
    /// the exact one is not.
    pub inconsistencies: Vec<usize>,
}

/// Tolerance on `‖∇φ(x_t)‖` when a recorded hypergradient is exactly zero.
pub const ZERO_HYPERGRADIENT_TOL: f64 = 1e-9;

/// Fills `exact_grad_norm` from ground truth and ranks iterations by it.
/// Recorded `hyper_norm` values are left untouched.
pub fn evaluate_against_truth(
    report: &SolveReport,
    problem: &dyn BilevelProblem,
) -> Result<EnrichedReport> {
    let mut enriched = report.clone();
    for trace in &mut enriched.traces {
        match &trace.x_t {
            Some(x) => trace.exact_grad_norm = Some(reference_hypergradient(problem, x)?.norm()),
            None if trace.exact_grad_norm.is_some() => {}
            None => {
                return Err(Error::Unsupported(format!(
                    "trace {} has neither x_t nor an exact norm",
                    trace.t
                )))
            }
        }
    }
    let mut best_exact_t = 0;
    let mut best_exact_norm = f64::INFINITY;
    let mut inconsistencies = Vec::new();
    for trace in &enriched.traces {
        let exact = trace.exact_grad_norm.expect("filled above");
        if exact < best_exact_norm {
            best_exact_norm = exact;
            best_exact_t = trace.t;
        }
        if trace.hyper_norm == 0.0 && exact > ZERO_HYPERGRADIENT_TOL {
            inconsistencies.push(trace.t);
        }
    }
    if enriched.traces.is_empty() {
        return Err(Error::Unsupported("report has no iterations".into()));
    }
    Ok(EnrichedReport {
        report: enriched,
        best_exact_t,
        best_exact_norm,
        inconsistencies,
    })
}
