//! End-to-end acceptance run. Prints one line per criterion and exits
//! nonzero when a criterion outside `KNOWN_RED` fails.

use std::fs;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use bilevel_adapt::driver::{
    solve, solve_observed, sweep, InnerProblem, SolveReport, SolverConfig, Variant,
};
use bilevel_adapt::hypergradient::{approx_hypergradient, penalty_gradient};
use bilevel_adapt::oracle::{
    lower_slice, penalty_slice, pl_empirical_check, OracleCounters, SampleBox, ScalarField,
};
use bilevel_adapt::problems::{
    make_p1, make_p2, ProblemSpec, DEFAULT_SEED, P2_DEFAULT_DX, P2_DEFAULT_DY, P2_DEFAULT_RANK,
};
use bilevel_adapt::subsolvers::{
    acgm_observed, acgm_rate, adagn, adagn_iteration_bound, adagn_observed,
};
use bilevel_adapt::vector::{diff_norm, norm_squared};
use bilevel_adapt::BilevelProblem;
use bilevel_adapt_cli::checks::{hypergradient_rows, pl_rows, CheckRow};
use nalgebra::SymmetricEigen;

/// Criteria that are expected to fail on the prescribed configuration.
const KNOWN_RED: [u8; 2] = [6, 8];
const EPS_GRID: [f64; 3] = [0.2, 0.1, 0.05];
const SIGMA_GRID: [f64; 4] = [0.2, 0.1, 0.05, 0.025];

type Criterion = (u8, &'static str, Duration, fn() -> Outcome);

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

fn problem(id: &str) -> (ProblemSpec, Box<dyn BilevelProblem>) {
    let spec = ProblemSpec::builtin(id).unwrap();
    let p = spec.instantiate().unwrap();
    (spec, p)
}

fn config(spec: &ProblemSpec, p: &dyn BilevelProblem, eps: f64, variant: Variant) -> SolverConfig {
    SolverConfig::new(eps, variant, spec.default_x0().unwrap(), p.dim_y()).unwrap()
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn rows_pass(rows: &[CheckRow]) -> bool {
    !rows.is_empty() && rows.iter().all(|r| r.passed)
}

fn hand_traces() -> Outcome {
    let mut half = ScalarField::from_fns(1, |u| 0.5 * u[0] * u[0], |u| vec![u[0]]);
    let a = adagn(&mut half, &[1.0], 1.0, 1e-300, 1).unwrap();
    let adagn_ok = a.final_point[0] == 1.0 - 1.0 / 2f64.sqrt();

    let mut square = ScalarField::from_fns(1, |u| u[0] * u[0], |u| vec![2.0 * u[0]]);
    let mut seen = Vec::new();
    acgm_observed(&mut square, &[1.0], 2.0, 0.5, 1e-300, 2, &mut |s| {
        seen.push((s.point[0], s.step_state))
    })
    .unwrap();
    let acgm_ok = seen == [(1.0, 0.5), (-1.0, 2.0), (-0.5, 2.0)];

    // Loose inner tolerances keep both inner solves at zero steps, so the
    // hypergradient is (z0 − y0)/σ = 2 and a_1² = 5.
    let p = make_p1();
    let mut c = SolverConfig::new(0.5, Variant::Adagn, vec![2.0], 1).unwrap();
    c.y0 = vec![1.0].try_into().unwrap();
    c.z0 = vec![2.0].try_into().unwrap();
    c.overrides.total_iters = Some(1);
    c.overrides.eps_z = Some(10.0);
    c.overrides.eps_y = Some(10.0);
    c.overrides.sigma = Some(0.5);
    let r = solve(&p, &c).unwrap();
    let t0 = &r.traces[0];
    let outer_ok = t0.hyper_norm == 2.0
        && t0.a_sq_next == 5.0
        && r.final_x[0] == 2.0 - 2.0 / 5f64.sqrt()
        && (t0.k_t, t0.n_t) == (0, 0);
    Outcome::new(
        adagn_ok && acgm_ok && outer_ok,
        format!("adagn {adagn_ok}, acgm {acgm_ok}, outer {outer_ok}"),
    )
}

/// Rebuilds the outer and inner accumulators of one run from scratch.
fn telescopes_exactly(p: &dyn BilevelProblem, c: &SolverConfig) -> bool {
    let sigma = c.schedule().sigma;
    let mut events = Vec::new();
    let report = solve_observed(p, c, &mut |e| {
        events.push((e.t, e.which, e.start.to_vec(), e.result.clone()));
    })
    .unwrap();
    let mut ok = true;
    let mut outer = c.a0 * c.a0;
    let mut scratch = OracleCounters::default();
    let mut lower_sq = c.b0 * c.b0;
    let mut penalty_sq = c.c0 * c.c0;
    for (t, trace) in report.traces.iter().enumerate() {
        let x = trace.x_t.as_ref().unwrap();
        let of = |w: InnerProblem| events.iter().find(|e| e.0 == t && e.1 == w).unwrap();
        let (_, _, z_start, z) = of(InnerProblem::Lower);
        let (_, _, y_start, y) = of(InnerProblem::Penalty);
        let h = approx_hypergradient(p, x, &y.final_point, &z.final_point, sigma, &mut scratch)
            .unwrap();
        outer += norm_squared(&h);
        ok &= trace.a_sq_next.to_bits() == outer.to_bits();
        if c.variant != Variant::Adagn {
            continue;
        }
        let schedule = c.schedule();
        for (which, start, result, acc, eps) in [
            (
                InnerProblem::Lower,
                z_start,
                z,
                &mut lower_sq,
                schedule.eps_z,
            ),
            (
                InnerProblem::Penalty,
                y_start,
                y,
                &mut penalty_sq,
                schedule.eps_y,
            ),
        ] {
            let field = || match which {
                InnerProblem::Lower => lower_slice(p, x).unwrap(),
                InnerProblem::Penalty => penalty_slice(p, x, sigma).unwrap(),
            };
            let mut points = Vec::new();
            let again = adagn_observed(&mut field(), start, *acc, eps, c.inner_cap, &mut |s| {
                points.push(s.point.to_vec())
            })
            .unwrap();
            let mut probe = field();
            for q in &points[..points.len() - 1] {
                *acc += norm_squared(&probe.gradient(q).unwrap());
            }
            ok &= again.final_point == result.final_point;
            ok &= result.final_step_state_sq.map(f64::to_bits) == Some(acc.to_bits());
        }
    }
    ok
}

fn telescoping() -> Outcome {
    let mut runs = 0;
    let mut failed = Vec::new();
    let mut slowest = Duration::ZERO;
    for id in ["p1", "p2", "p3"] {
        let (spec, p) = problem(id);
        for variant in [Variant::Adagn, Variant::Acgm] {
            for eps in [0.2, 0.1] {
                let start = Instant::now();
                let ok = telescopes_exactly(p.as_ref(), &config(&spec, p.as_ref(), eps, variant));
                slowest = slowest.max(start.elapsed());
                runs += 1;
                if !ok {
                    failed.push(format!("{id}/{}/{eps}", variant.label()));
                }
            }
        }
    }
    let fast = slowest < Duration::from_secs(1);
    Outcome::new(
        failed.is_empty() && fast,
        format!(
            "{runs} runs, mismatches {failed:?}, slowest {:.3}s",
            slowest.as_secs_f64()
        ),
    )
}

fn sym_eigenvalues(m: nalgebra::DMatrix<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().cloned().collect();
    v.sort_by(f64::total_cmp);
    v
}

fn acgm_linear_rate() -> Outcome {
    let p2 = make_p2(P2_DEFAULT_DX, P2_DEFAULT_DY, P2_DEFAULT_RANK, DEFAULT_SEED).unwrap();
    let sigma = 0.1;
    let x = vec![2.0; p2.dim_x()];
    let eig = sym_eigenvalues(p2.penalty_hessian(sigma));
    let top = *eig.last().unwrap();
    let mu = eig.iter().cloned().find(|e| *e > 1e-9 * top).unwrap();
    let y_star = p2.y_sigma_star(&x, sigma).unwrap();
    let h_star = penalty_slice(&p2, &x, sigma)
        .unwrap()
        .value(&y_star)
        .unwrap();
    let l0 = 1.0;
    let mut details = Vec::new();
    let mut passed = true;
    for alpha in [1.5, 2.0, 4.0] {
        let mut field = penalty_slice(&p2, &x, sigma).unwrap();
        let mut gaps = Vec::new();
        acgm_observed(
            &mut field,
            &vec![0.0; p2.dim_y()],
            alpha,
            l0,
            1e-7,
            5_000,
            &mut |s| gaps.push(s.value.unwrap() - h_star),
        )
        .unwrap();
        let floor = (gaps[0] * 1e-10).max(1e-11 * (1.0 + h_star.abs()));
        let usable: Vec<(f64, f64)> = gaps
            .iter()
            .enumerate()
            .take_while(|(_, g)| **g > floor)
            .map(|(k, g)| (k as f64, g.ln()))
            .collect();
        let tail = &usable[usable.len() / 2..];
        let (ks, logs): (Vec<f64>, Vec<f64>) = tail.iter().cloned().unzip();
        let fitted = slope(&ks, &logs);
        let bound = (1.0 - acgm_rate(mu, alpha, l0, top)).ln() + 0.01;
        passed &= tail.len() >= 3 && fitted <= bound;
        details.push(format!("alpha {alpha}: slope {fitted:.4} <= {bound:.4}"));
    }
    Outcome::new(passed, details.join("; "))
}

fn adagn_iteration_counts() -> Outcome {
    let mut worst = 0.0f64;
    let mut runs = 0;
    let p2 = make_p2(P2_DEFAULT_DX, P2_DEFAULT_DY, P2_DEFAULT_RANK, DEFAULT_SEED).unwrap();
    let problems: [&dyn BilevelProblem; 2] = [&make_p1(), &p2];
    let mut passed = true;
    for p in problems {
        let k = p.constants().unwrap().clone();
        for xv in [-3.0, 0.5, 4.0] {
            let x = vec![xv; p.dim_x()];
            for sigma in [0.0, 0.1] {
                for eps in [1e-2, 1e-3, 1e-4] {
                    let mut field = if sigma == 0.0 {
                        lower_slice(p, &x).unwrap()
                    } else {
                        penalty_slice(p, &x, sigma).unwrap()
                    };
                    let smooth = sigma * k.smooth_f + k.smooth_g;
                    let r = adagn(&mut field, &vec![0.0; p.dim_y()], 1.0, eps, 10_000_000).unwrap();
                    let bound = adagn_iteration_bound(1.0, r.final_step_state, k.mu, smooth, eps);
                    passed &= !r.truncated && (r.iterations as f64) <= bound;
                    worst = worst.max(r.iterations as f64 / bound.max(1.0));
                    runs += 1;
                }
            }
        }
    }
    Outcome::new(passed, format!("{runs} slices, worst K/bound {worst:.3}"))
}

fn hypergradient_agreement() -> Outcome {
    let mut details = Vec::new();
    let mut passed = true;
    for id in ["p1", "p2"] {
        let (spec, p) = problem(id);
        let rows = hypergradient_rows(&spec, p.as_ref(), DEFAULT_SEED).unwrap();
        passed &= rows_pass(&rows);
        let worst: Vec<String> = rows.iter().map(|r| format!("{:.1e}", r.value)).collect();
        details.push(format!("{id} [{}]", worst.join(", ")));
    }
    Outcome::new(passed, details.join("; "))
}

fn penalty_consistency() -> Outcome {
    let deviations = |p: &dyn BilevelProblem, x: &[f64]| -> Vec<f64> {
        let exact = p.grad_phi(x).unwrap();
        SIGMA_GRID
            .iter()
            .map(|&s| diff_norm(&penalty_gradient(p, x, s, 1e-11).unwrap(), &exact))
            .collect()
    };
    let log_sigma: Vec<f64> = SIGMA_GRID.iter().map(|s| s.ln()).collect();
    let p1 = make_p1();
    let d1 = deviations(&p1, &[2.0]);
    let exact_ok = d1
        .iter()
        .zip(SIGMA_GRID)
        .all(|(d, s)| (d - s / (1.0 + s)).abs() <= 1e-12);
    let s1 = slope(&log_sigma, &d1.iter().map(|d| d.ln()).collect::<Vec<_>>());
    let (spec, p2) = problem("p2");
    let d2 = deviations(p2.as_ref(), &spec.default_x0().unwrap());
    let s2 = slope(&log_sigma, &d2.iter().map(|d| d.ln()).collect::<Vec<_>>());
    Outcome::new(
        exact_ok && (s1 - 1.0).abs() <= 0.05 && (s2 - 1.0).abs() <= 0.15,
        format!("p1 closed form {exact_ok}, p1 slope {s1:.4}, p2 slope {s2:.4}"),
    )
}

fn grid_reports(id: &str, variant: Variant) -> Vec<SolveReport> {
    let (spec, p) = problem(id);
    let base = config(&spec, p.as_ref(), EPS_GRID[0], variant);
    sweep(p.as_ref(), &base, &EPS_GRID, 3)
        .unwrap()
        .into_iter()
        .map(|r| r.unwrap_or_else(|f| panic!("{id}/{} failed: {}", variant.label(), f.error)))
        .collect()
}

/// Outer iterates lying outside the box on which the constants are declared.
fn box_violations(id: &str, reports: &[SolveReport]) -> usize {
    let (spec, _) = problem(id);
    reports
        .iter()
        .flat_map(|r| &r.traces)
        .filter_map(|t| t.x_t.as_ref())
        .filter(|x| {
            x.iter()
                .zip(&spec.bounds)
                .any(|(v, [lo, hi])| v < lo || v > hi)
        })
        .count()
}

fn outer_convergence() -> Outcome {
    let mut details = Vec::new();
    let mut passed = true;
    for id in ["p1", "p2", "p3"] {
        for variant in [Variant::Adagn, Variant::Acgm] {
            let reports = grid_reports(id, variant);
            let outside = box_violations(id, &reports);
            let norms: Vec<f64> = reports
                .iter()
                .map(|r| r.best_exact_norm().unwrap())
                .collect();
            let c = norms[0] / EPS_GRID[0];
            let ok = norms.iter().zip(EPS_GRID).all(|(n, e)| *n <= c * e);
            passed &= ok;
            let ratios: Vec<String> = norms
                .iter()
                .zip(EPS_GRID)
                .map(|(n, e)| format!("{:.3}", n / e))
                .collect();
            details.push(format!(
                "{id}/{} [{}] outside box {outside}",
                variant.label(),
                ratios.join(" ")
            ));
        }
    }
    Outcome::new(passed, details.join("; "))
}

fn complexity_scaling() -> Outcome {
    let mut details = Vec::new();
    let mut passed = true;
    for id in ["p1", "p2", "p3"] {
        let totals = |v| {
            grid_reports(id, v)
                .iter()
                .map(|r| r.total_gradients() as f64)
                .collect::<Vec<_>>()
        };
        let fast = totals(Variant::Acgm);
        let slow = totals(Variant::Adagn);
        let growth: Vec<f64> = fast.windows(2).map(|w| w[1] / w[0]).collect();
        let ratio: Vec<f64> = slow.iter().zip(&fast).map(|(s, f)| s / f).collect();
        let ok =
            growth.iter().all(|g| (3.5..=6.0).contains(g)) && ratio.windows(2).all(|w| w[1] > w[0]);
        passed &= ok;
        details.push(format!(
            "{id}: growth [{}], ratio [{}]",
            growth
                .iter()
                .map(|g| format!("{g:.2}"))
                .collect::<Vec<_>>()
                .join(" "),
            ratio
                .iter()
                .map(|r| format!("{r:.2}"))
                .collect::<Vec<_>>()
                .join(" "),
        ));
    }
    Outcome::new(passed, details.join("; "))
}

fn pl_suite() -> Outcome {
    let mut passed = true;
    for id in ["p1", "p2", "p3"] {
        let (spec, p) = problem(id);
        passed &= rows_pass(&pl_rows(&spec, p.as_ref(), DEFAULT_SEED).unwrap());
    }
    let declared = passed;
    let mut quartic_rejected = true;
    for mu in [1e-3, 1e-2, 1e-1, 1.0] {
        for r in [1.0, 0.5, 0.1, 0.05] {
            let mut field =
                ScalarField::from_fns(1, |u| u[0].powi(4), |u| vec![4.0 * u[0].powi(3)]);
            let region = SampleBox::cube(1, &[0.0], r).unwrap();
            let outcome =
                pl_empirical_check(&mut field, 0.0, mu, &region, 4000, DEFAULT_SEED).unwrap();
            quartic_rejected &= !outcome.passed;
        }
    }
    Outcome::new(
        declared && quartic_rejected,
        format!("declared pairs {declared}, quartic rejected {quartic_rejected}"),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_bilevel-adapt");
    let mut passed = true;
    let mut overhead = Duration::ZERO;
    for (id, variant) in [("p1", "acgm"), ("p2", "adagn"), ("p3", "acgm")] {
        let first = dir.path().join(format!("{id}_first"));
        let again = dir.path().join(format!("{id}_again"));
        let started = Instant::now();
        let solved = Command::new(bin)
            .args([
                "solve",
                "--problem",
                id,
                "--variant",
                variant,
                "--epsilon",
                "0.1",
                "--out",
            ])
            .arg(&first)
            .stdout(Stdio::null())
            .status()
            .unwrap();
        let solve_time = started.elapsed();
        let started = Instant::now();
        let replayed = Command::new(bin)
            .args(["replay", "--manifest"])
            .arg(first.join("manifest.json"))
            .arg("--out")
            .arg(&again)
            .stdout(Stdio::null())
            .status()
            .unwrap();
        overhead = overhead.max(started.elapsed().saturating_sub(solve_time));
        passed &= solved.success()
            && replayed.success()
            && fs::read(first.join("trace.csv")).unwrap()
                == fs::read(again.join("trace.csv")).unwrap();
    }
    passed &= overhead < Duration::from_secs(1);
    Outcome::new(
        passed,
        format!(
            "byte-identical {passed}, overhead {:.3}s",
            overhead.as_secs_f64()
        ),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        (
            1,
            "recurrence fidelity",
            Duration::from_secs(1),
            hand_traces,
        ),
        (
            2,
            "telescoping exactness",
            Duration::from_secs(60),
            telescoping,
        ),
        (
            3,
            "AC-GM linear rate",
            Duration::from_secs(5),
            acgm_linear_rate,
        ),
        (
            4,
            "AdaGrad-Norm iteration bound",
            Duration::from_secs(30),
            adagn_iteration_counts,
        ),
        (
            5,
            "hypergradient agreement",
            Duration::from_secs(10),
            hypergradient_agreement,
        ),
        (
            6,
            "penalty consistency",
            Duration::from_secs(10),
            penalty_consistency,
        ),
        (
            7,
            "outer convergence",
            Duration::from_secs(300),
            outer_convergence,
        ),
        (
            8,
            "oracle-complexity scaling",
            Duration::from_secs(600),
            complexity_scaling,
        ),
        (9, "PL suite", Duration::from_secs(30), pl_suite),
        (10, "determinism", Duration::from_secs(60), determinism),
    ];
    let mut unexpected = Vec::new();
    for (n, name, budget, check) in criteria {
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let passed = outcome.passed && elapsed <= budget;
        let verdict = match (passed, KNOWN_RED.contains(&n)) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known)",
            (false, false) => "FAIL",
        };
        println!(
            "criterion {n:>2} {name}: {verdict} [{:.2}s] {}",
            elapsed.as_secs_f64(),
            outcome.detail
        );
        if !passed && !KNOWN_RED.contains(&n) {
            unexpected.push(n);
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
