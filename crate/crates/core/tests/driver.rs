use bilevel_adapt::driver::{
    evaluate_against_truth, outer_iterations, solve, solve_observed, sweep, InnerProblem,
    SolverConfig, Variant,
};
use bilevel_adapt::oracle::BilevelProblem;
use bilevel_adapt::problems::{make_p1, make_p2, make_p3_nonconvex, ProblemSpec};
use bilevel_adapt::Error;

fn config(eps: f64, variant: Variant, x0: f64) -> SolverConfig {
    SolverConfig::new(eps, variant, vec![x0], 1).unwrap()
}

#[test]
fn schedule_follows_epsilon() {
    let c = config(0.1, Variant::Acgm, 5.0);
    let s = c.schedule();
    assert_eq!(s.total_iters, 100);
    assert_eq!(s.eps_z, 0.1 * 0.1);
    assert_eq!(s.eps_y, 0.1 * 0.1);
    assert_eq!(s.sigma, 0.1);
    assert_eq!(outer_iterations(0.2), 25);
    assert_eq!(outer_iterations(0.05), 400);
    assert_eq!(outer_iterations(0.3), 12);
    assert_eq!(outer_iterations(0.015), 4445);
}

#[test]
fn p1_acgm_reaches_five_epsilon() {
    let p = make_p1();
    let r = solve(&p, &config(0.05, Variant::Acgm, 5.0)).unwrap();
    assert_eq!(r.traces.len(), 400);
    assert!(r.best_exact_norm().unwrap() <= 0.25);
    for t in &r.traces {
        let x = t.x_t.as_ref().unwrap()[0];
        assert_eq!(t.exact_grad_norm.unwrap(), (x - 1.0).abs());
    }
}

#[test]
fn best_t_is_first_minimum() {
    let p = make_p3_nonconvex(7);
    let r = solve(&p, &config(0.1, Variant::Adagn, 5.0)).unwrap();
    let min = r
        .traces
        .iter()
        .map(|t| t.hyper_norm)
        .fold(f64::INFINITY, f64::min);
    let first = r.traces.iter().position(|t| t.hyper_norm == min).unwrap();
    assert_eq!(r.best_t, first);
    assert_eq!(r.best_hyper_norm, min);
    assert_eq!(r.best_x, r.traces[first].x_t.clone().unwrap());
}

#[test]
fn outer_state_telescopes_and_is_monotone() {
    let p = make_p2(3, 5, 3, 7).unwrap();
    for variant in [Variant::Adagn, Variant::Acgm] {
        let c = SolverConfig::new(0.1, variant, vec![2.0; 3], 5).unwrap();
        let r = solve(&p, &c).unwrap();
        let mut acc = c.a0 * c.a0;
        let mut prev = c.a0;
        for t in &r.traces {
            acc += t.hyper_norm * t.hyper_norm;
            assert!(t.a_t_next >= prev);
            prev = t.a_t_next;
        }
        // Recorded norms are square roots, so compare against the state itself.
        assert_eq!(r.traces.last().unwrap().a_sq_next.sqrt(), prev);
        assert!((acc - r.traces.last().unwrap().a_sq_next).abs() <= 1e-12 * acc);
    }
}

#[test]
fn warm_starts_reuse_previous_solutions_bitwise() {
    let p = make_p3_nonconvex(7);
    for variant in [Variant::Adagn, Variant::Acgm, Variant::TunedBaseline] {
        let mut last_lower: Option<Vec<f64>> = None;
        let mut last_penalty: Option<Vec<f64>> = None;
        let mut events = 0;
        solve_observed(&p, &config(0.2, variant, 5.0), &mut |e| {
            events += 1;
            let slot = match e.which {
                InnerProblem::Lower => &mut last_lower,
                InnerProblem::Penalty => &mut last_penalty,
            };
            match slot {
                Some(prev) => assert_eq!(prev.as_slice(), e.start, "t = {}", e.t),
                None => assert_eq!(e.start, &[0.0]),
            }
            *slot = Some(e.result.final_point.to_vec());
        })
        .unwrap();
        assert_eq!(events, 50);
    }
}

#[test]
fn inner_solutions_meet_their_distance_contract() {
    let p = make_p2(3, 5, 3, 7).unwrap();
    let c = SolverConfig::new(0.1, Variant::Acgm, vec![2.0; 3], 5).unwrap();
    let mu = p.constants().unwrap().mu;
    let sched = c.schedule();
    let mut x_seen: Vec<Vec<f64>> = Vec::new();
    let r = solve(&p, &c).unwrap();
    for t in &r.traces {
        x_seen.push(t.x_t.clone().unwrap().into_inner());
    }
    let mut checked = 0;
    solve_observed(&p, &c, &mut |e| {
        let x = &x_seen[e.t];
        assert!(e.result.final_grad_norm <= sched.eps_z);
        let d = match e.which {
            InnerProblem::Lower => p.lower_set_distance(x, &e.result.final_point).unwrap(),
            InnerProblem::Penalty => p
                .penalty_set_distance(x, sched.sigma, &e.result.final_point)
                .unwrap(),
        };
        assert!(d <= sched.eps_z / mu * (1.0 + 1e-9), "t = {}: {d}", e.t);
        checked += 1;
    })
    .unwrap();
    assert_eq!(checked, 200);
}

/// A problem whose hypergradient vanishes identically.
struct Flat;

impl BilevelProblem for Flat {
    fn id(&self) -> &str {
        "flat"
    }
    fn dim_x(&self) -> usize {
        1
    }
    fn dim_y(&self) -> usize {
        1
    }
    fn f_value(&self, _x: &[f64], y: &[f64]) -> f64 {
        0.5 * y[0] * y[0]
    }
    fn grad_x_f(&self, _x: &[f64], _y: &[f64]) -> Vec<f64> {
        vec![0.0]
    }
    fn grad_y_f(&self, _x: &[f64], y: &[f64]) -> Vec<f64> {
        vec![y[0]]
    }
    fn g_value(&self, _x: &[f64], y: &[f64]) -> f64 {
        0.5 * y[0] * y[0]
    }
    fn grad_x_g(&self, _x: &[f64], _y: &[f64]) -> Vec<f64> {
        vec![0.0]
    }
    fn grad_y_g(&self, _x: &[f64], y: &[f64]) -> Vec<f64> {
        vec![y[0]]
    }
}

#[test]
fn zero_hypergradient_freezes_iterates() {
    let r = solve(&Flat, &config(0.2, Variant::Acgm, 3.0)).unwrap();
    for t in &r.traces {
        assert_eq!(t.hyper_norm, 0.0);
        assert_eq!(t.a_t_next, 1.0);
        assert_eq!(t.x_t.as_ref().unwrap()[0], 3.0);
        assert_eq!((t.k_t, t.n_t), (0, 0));
    }
    assert_eq!(r.best_t, 0);
    assert!(matches!(
        evaluate_against_truth(&r, &Flat),
        Err(Error::Unsupported(_))
    ));
}

#[test]
fn evaluation_flags_zero_norm_away_from_stationarity() {
    let p = make_p1();
    let mut r = solve(&p, &config(0.2, Variant::Acgm, 5.0)).unwrap();
    let recorded: Vec<f64> = r.traces.iter().map(|t| t.hyper_norm).collect();
    let clean = evaluate_against_truth(&r, &p).unwrap();
    assert!(clean.inconsistencies.is_empty());
    assert_eq!(
        clean
            .report
            .traces
            .iter()
            .map(|t| t.hyper_norm)
            .collect::<Vec<_>>(),
        recorded
    );
    for t in &mut r.traces {
        t.hyper_norm = 0.0;
        t.exact_grad_norm = None;
    }
    let forged = evaluate_against_truth(&r, &p).unwrap();
    let expected: Vec<usize> = r
        .traces
        .iter()
        .filter(|t| (t.x_t.as_ref().unwrap()[0] - 1.0).abs() > 1e-9)
        .map(|t| t.t)
        .collect();
    assert_eq!(forged.inconsistencies, expected);
    assert!(forged.report.traces.iter().all(|t| t.hyper_norm == 0.0));
    assert_eq!(forged.best_exact_norm, clean.best_exact_norm);
}

#[test]
fn inner_truncation_returns_partial_report() {
    let p = make_p1();
    let mut c = config(0.05, Variant::Adagn, 5.0);
    c.inner_cap = 3;
    let err = solve(&p, &c).unwrap_err();
    assert!(matches!(err.error, Error::Truncated { cap: 3 }));
    assert_eq!(err.partial.traces.len(), err.t);
    assert_eq!(
        err.partial.truncation_flags.inner_truncated,
        Some((err.t, "lower".into()))
    );
}

#[test]
fn outer_cap_stops_early() {
    let p = make_p1();
    let mut c = config(0.05, Variant::Acgm, 5.0);
    c.outer_cap = 10;
    let r = solve(&p, &c).unwrap();
    assert_eq!(r.traces.len(), 10);
    assert!(r.truncation_flags.outer_capped);
}

#[test]
fn invalid_configs_are_argument_errors() {
    let p = make_p1();
    let mut c = config(0.1, Variant::Acgm, 5.0);
    c.alpha = 1.0;
    assert!(matches!(
        solve(&p, &c).unwrap_err().error,
        Error::Argument(_)
    ));
    let c = SolverConfig::new(0.1, Variant::Acgm, vec![1.0, 2.0], 1).unwrap();
    assert!(matches!(
        solve(&p, &c).unwrap_err().error,
        Error::Dimension { .. }
    ));
    assert!(SolverConfig::new(0.1, Variant::Acgm, vec![f64::NAN], 1).is_err());
}

#[test]
fn reset_switch_changes_only_adagn_runs() {
    let p = make_p1();
    let mut c = config(0.1, Variant::Acgm, 5.0);
    let a = solve(&p, &c).unwrap();
    c.reset_inner_state = true;
    let b = solve(&p, &c).unwrap();
    assert_eq!(a.traces, b.traces);

    let mut c = config(0.1, Variant::Adagn, 5.0);
    let a = solve(&p, &c).unwrap();
    c.reset_inner_state = true;
    let b = solve(&p, &c).unwrap();
    assert_ne!(a.total_grad_g, b.total_grad_g);
}

#[test]
fn mixed_variant_runs() {
    let p = make_p1();
    let v = Variant::Mixed {
        lower: bilevel_adapt::driver::InnerMethod::Adagn,
        penalty: bilevel_adapt::driver::InnerMethod::Acgm,
    };
    let r = solve(&p, &config(0.1, v, 5.0)).unwrap();
    assert_eq!(r.variant, "mixed");
    assert!(r.best_exact_norm().unwrap() < 0.1);
}

#[test]
fn sweep_keeps_order_and_isolates_failures() {
    let p = make_p1();
    let mut base = config(0.2, Variant::Adagn, 5.0);
    let coarse = solve(&p, &base).unwrap();
    base.inner_cap = coarse
        .traces
        .iter()
        .map(|t| t.k_t.max(t.n_t))
        .max()
        .unwrap();
    let out = sweep(&p, &base, &[0.2, 0.1, 0.05, 0.02], 3).unwrap();
    assert_eq!(out.len(), 4);
    let t: Vec<usize> = out
        .iter()
        .map(|r| match r {
            Ok(r) => r.schedule.total_iters,
            Err(f) => f.partial.schedule.total_iters,
        })
        .collect();
    assert_eq!(t, [25, 100, 400, 2500]);
    assert!(out[0].is_ok());
    assert!(out.iter().any(|r| r.is_err()));
    assert!(sweep(&p, &base, &[0.1, 0.2], 1).is_err());
    assert!(sweep(&p, &base, &[], 1).is_err());
}

#[test]
fn sweep_is_independent_of_thread_count() {
    let p = make_p2(3, 5, 3, 7).unwrap();
    let base = SolverConfig::new(0.2, Variant::Acgm, vec![2.0; 3], 5).unwrap();
    let one = sweep(&p, &base, &[0.2, 0.1, 0.05], 1).unwrap();
    let three = sweep(&p, &base, &[0.2, 0.1, 0.05], 3).unwrap();
    for (a, b) in one.iter().zip(&three) {
        assert_eq!(a.as_ref().unwrap().traces, b.as_ref().unwrap().traces);
    }
}

#[test]
fn baseline_uses_declared_constants() {
    let spec = ProblemSpec::builtin("p1").unwrap();
    let p = spec.instantiate().unwrap();
    let r = solve(p.as_ref(), &config(0.1, Variant::TunedBaseline, 5.0)).unwrap();
    // Fixed outer step 1/L_φ keeps a constant.
    assert!(r.traces.iter().all(|t| t.a_t_next == 4.0));
    assert!(matches!(
        solve(&Flat, &config(0.1, Variant::TunedBaseline, 1.0))
            .unwrap_err()
            .error,
        Error::Unsupported(_)
    ));
}
