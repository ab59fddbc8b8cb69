//! Single-level solvers run on a [`ScalarField`]: AdaGrad-Norm, the
//! auto-conditioned gradient method, and a fixed-step baseline.

use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::oracle::ScalarField;
use crate::vector::{self, Vector};

pub const DEFAULT_MAX_ITERS: usize = 10_000_000;
/// Squared step length below which the secant curvature update is skipped.
pub const ACGM_MIN_DISPLACEMENT_SQ: f64 = 1e-300;
/// Consecutive objective increases that make the fixed-step baseline abort.
pub const DIVERGENCE_STREAK: usize = 10;

/// Running state of the auto-conditioned method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AcgmState {
    /// `max{L_0, …, L_k}`; the next step uses `1 / (alpha * gamma)`.
    pub gamma: f64,
    /// Largest secant estimate seen so far, excluding `L_0`.
    pub max_secant: f64,
    pub alpha: f64,
    pub last_secant: f64,
    /// Steps where the secant update was skipped because the step vanished.
    pub skipped_updates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubsolverResult {
    pub final_point: Vector,
    pub iterations: usize,
    pub final_grad_norm: f64,
    /// Last `alpha_k` for AdaGrad-Norm, last `gamma` for AC-GM, the step for GD.
    pub final_step_state: f64,
    /// Squared AdaGrad-Norm state, kept so telescoping is exact across calls.
    pub final_step_state_sq: Option<f64>,
    pub gradient_evals: u64,
    pub value_evals: u64,
    pub truncated: bool,
    pub acgm: Option<AcgmState>,
}

/// One visited iterate, reported to observers before the stopping test.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord<'p> {
    pub k: usize,
    pub point: &'p [f64],
    pub grad_norm: f64,
    pub value: Option<f64>,
    pub step_state: f64,
}

fn validate_common(
    field: &ScalarField<'_>,
    x0: &[f64],
    eps_h: f64,
    max_iters: usize,
) -> Result<()> {
    check_dim(field.dim(), x0.len())?;
    if !(eps_h > 0.0) {
        return Err(Error::Argument(format!(
            "tolerance must be positive, got {eps_h}"
        )));
    }
    if max_iters == 0 {
        return Err(Error::Argument("max_iters must be at least 1".into()));
    }
    Ok(())
}

/// AdaGrad-Norm: `α_{k+1}² = α_k² + ‖∇h(x_k)‖²`, `x_{k+1} = x_k − ∇h(x_k)/α_{k+1}`,
/// until `‖∇h(x_k)‖ ≤ eps_h`.
pub fn adagn(
    field: &mut ScalarField<'_>,
    x0: &[f64],
    alpha0: f64,
    eps_h: f64,
    max_iters: usize,
) -> Result<SubsolverResult> {
    if !(alpha0 > 0.0) || !alpha0.is_finite() {
        return Err(Error::Argument(format!(
            "alpha0 must be positive, got {alpha0}"
        )));
    }
    adagn_observed(field, x0, alpha0 * alpha0, eps_h, max_iters, &mut |_| {})
}

/// AdaGrad-Norm started from a squared step state, reporting every iterate.
pub fn adagn_observed(
    field: &mut ScalarField<'_>,
    x0: &[f64],
    alpha0_sq: f64,
    eps_h: f64,
    max_iters: usize,
    observer: &mut dyn FnMut(&StepRecord<'_>),
) -> Result<SubsolverResult> {
    validate_common(field, x0, eps_h, max_iters)?;
    if !(alpha0_sq > 0.0) || !alpha0_sq.is_finite() {
        return Err(Error::Argument(format!(
            "squared step state must be positive, got {alpha0_sq}"
        )));
    }
    let start_grads = field.gradient_calls();
    let mut x = Vector::new(x0.to_vec())?;
    let mut alpha_sq = alpha0_sq;
    let mut grad = field.gradient(&x)?;
    let mut k = 0;
    let mut truncated = false;
    let grad_norm = loop {
        let gn_sq = grad.norm_squared();
        let gn = gn_sq.sqrt();
        observer(&StepRecord {
            k,
            point: &x,
            grad_norm: gn,
            value: None,
            step_state: alpha_sq.sqrt(),
        });
        if gn <= eps_h {
            break gn;
        }
        if k == max_iters {
            truncated = true;
            break gn;
        }
        alpha_sq += gn_sq;
        let alpha = alpha_sq.sqrt();
        x = x.add_scaled(-1.0 / alpha, &grad)?;
        grad = field.gradient(&x)?;
        k += 1;
    };
    Ok(SubsolverResult {
        final_point: x,
        iterations: k,
        final_grad_norm: grad_norm,
        final_step_state: alpha_sq.sqrt(),
        final_step_state_sq: Some(alpha_sq),
        gradient_evals: field.gradient_calls() - start_grads,
        value_evals: 0,
        truncated,
        acgm: None,
    })
}

/// Auto-conditioned gradient method.
///
/// Steps `x^{k+1} = x^k − ∇h(x^k) / (α γ_{k+1})` with `γ_{k+1} = max{L_0, …, L_k}`,
/// where each `L_{k+1}` is the secant curvature of the step just taken.
pub fn acgm(
    field: &mut ScalarField<'_>,
    x0: &[f64],
    alpha: f64,
    l0: f64,
    eps_h: f64,
    max_iters: usize,
) -> Result<SubsolverResult> {
    acgm_observed(field, x0, alpha, l0, eps_h, max_iters, &mut |_| {})
}

pub fn acgm_observed(
    field: &mut ScalarField<'_>,
    x0: &[f64],
    alpha: f64,
    l0: f64,
    eps_h: f64,
    max_iters: usize,
    observer: &mut dyn FnMut(&StepRecord<'_>),
) -> Result<SubsolverResult> {
    validate_common(field, x0, eps_h, max_iters)?;
    if !(alpha > 1.0) || !alpha.is_finite() {
        return Err(Error::Argument(format!("alpha must exceed 1, got {alpha}")));
    }
    if !(l0 > 0.0) || !l0.is_finite() {
        return Err(Error::Argument(format!("L0 must be positive, got {l0}")));
    }
    let start_grads = field.gradient_calls();
    let start_values = field.value_calls();
    let mut state = AcgmState {
        gamma: l0,
        max_secant: f64::NEG_INFINITY,
        alpha,
        last_secant: l0,
        skipped_updates: 0,
    };
    let mut x = Vector::new(x0.to_vec())?;
    let mut hx = field.value(&x)?;
    let mut grad = field.gradient(&x)?;
    let mut k = 0;
    let mut truncated = false;
    let grad_norm = loop {
        let gn = grad.norm();
        observer(&StepRecord {
            k,
            point: &x,
            grad_norm: gn,
            value: Some(hx),
            step_state: state.gamma,
        });
        if gn <= eps_h {
            break gn;
        }
        if k == max_iters {
            truncated = true;
            break gn;
        }
        let next = x.add_scaled(-1.0 / (alpha * state.gamma), &grad)?;
        let h_next = field.value(&next)?;
        let grad_next = field.gradient(&next)?;
        let disp: Vec<f64> = next.iter().zip(x.iter()).map(|(a, b)| a - b).collect();
        let disp_sq = vector::norm_squared(&disp);
        if disp_sq < ACGM_MIN_DISPLACEMENT_SQ {
            state.skipped_updates += 1;
        } else {
            let secant = 2.0 * (h_next - hx - vector::dot(&grad, &disp)) / disp_sq;
            if !secant.is_finite() {
                return Err(Error::Numeric {
                    context: format!("secant curvature estimate is {secant} at iteration {k}"),
                    iterate: Some(next.into_inner()),
                });
            }
            state.last_secant = secant;
            state.max_secant = state.max_secant.max(secant);
            state.gamma = state.gamma.max(secant);
        }
        x = next;
        hx = h_next;
        grad = grad_next;
        k += 1;
    };
    Ok(SubsolverResult {
        final_point: x,
        iterations: k,
        final_grad_norm: grad_norm,
        final_step_state: state.gamma,
        final_step_state_sq: None,
        gradient_evals: field.gradient_calls() - start_grads,
        value_evals: field.value_calls() - start_values,
        truncated,
        acgm: Some(state),
    })
}

/// Plain gradient descent with a fixed step. Aborts when the objective rises
/// on [`DIVERGENCE_STREAK`] consecutive iterations.
pub fn fixed_step_gd(
    field: &mut ScalarField<'_>,
    x0: &[f64],
    step: f64,
    eps_h: f64,
    max_iters: usize,
) -> Result<SubsolverResult> {
    validate_common(field, x0, eps_h, max_iters)?;
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Argument(format!(
            "step must be positive, got {step}"
        )));
    }
    let start_grads = field.gradient_calls();
    let start_values = field.value_calls();
    let mut x = Vector::new(x0.to_vec())?;
    let mut hx = field.value(&x)?;
    let mut grad = field.gradient(&x)?;
    let mut streak = 0;
    let mut k = 0;
    let mut truncated = false;
    let grad_norm = loop {
        let gn = grad.norm();
        if gn <= eps_h {
            break gn;
        }
        if k == max_iters {
            truncated = true;
            break gn;
        }
        x = x.add_scaled(-step, &grad)?;
        let h_next = field.value(&x)?;
        grad = field.gradient(&x)?;
        k += 1;
        streak = if h_next > hx { streak + 1 } else { 0 };
        hx = h_next;
        if streak >= DIVERGENCE_STREAK {
            return Err(Error::Divergence {
                iterations: k,
                iterate: x.into_inner(),
            });
        }
    };
    Ok(SubsolverResult {
        final_point: x,
        iterations: k,
        final_grad_norm: grad_norm,
        final_step_state: step,
        final_step_state_sq: None,
        gradient_evals: field.gradient_calls() - start_grads,
        value_evals: field.value_calls() - start_values,
        truncated,
        acgm: None,
    })
}

/// Linear-rate factor `p = μ(α − 1) / (2α² max{L_0, L})` of the AC-GM gap bound.
pub fn acgm_rate(mu: f64, alpha: f64, l0: f64, smoothness: f64) -> f64 {
    mu * (alpha - 1.0) / (2.0 * alpha * alpha * l0.max(smoothness))
}

/// Upper bound on the number of steps where the secant estimate jumps past
/// `β γ`, with `β = (α + 1)/2`: `⌈log_β(max{L_0, L}/L_0)⌉₊`.
pub fn acgm_irregular_steps(alpha: f64, l0: f64, smoothness: f64) -> usize {
    let beta = 0.5 * (alpha + 1.0);
    let ratio = l0.max(smoothness) / l0;
    let m = (ratio.ln() / beta.ln()).ceil();
    if m > 0.0 {
        m as usize
    } else {
        0
    }
}

/// Two-stage AdaGrad-Norm iteration bound, evaluated a posteriori with the
/// largest step state `alpha_max` observed during the run:
/// `log(C²/α₀²)/log(1 + ε²/C²) + (α_max/μ) log(L²(α_max − C)/(μ ε²))`,
/// with `C = max{L, α₀}`. The second stage is empty when `α_max ≤ C`.
pub fn adagn_iteration_bound(
    alpha0: f64,
    alpha_max: f64,
    mu: f64,
    smoothness: f64,
    eps_h: f64,
) -> f64 {
    let c = smoothness.max(alpha0);
    let stage_one = (c * c / (alpha0 * alpha0)).ln() / (1.0 + eps_h * eps_h / (c * c)).ln();
    let stage_two = if alpha_max > c {
        let arg = smoothness * smoothness * (alpha_max - c) / (mu * eps_h * eps_h);
        (alpha_max / mu) * arg.ln().max(0.0)
    } else {
        0.0
    };
    stage_one + stage_two
}
