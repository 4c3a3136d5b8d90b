use cadiff_core::dataset::{generate_dataset, objective_threshold};
use cadiff_core::problems::{
    sample_problem_params, uniform_decision, violation, DecisionVector, ProblemKind, ProblemParams,
};
use cadiff_core::rng::rng_for;
use cadiff_core::solver::{solve_local, solve_local_traced, SolveConfig};

fn open_table() -> ProblemParams {
    ProblemParams {
        kind: ProblemKind::Tabletop,
        goals: vec![[4.0, 4.0]],
        obstacle_centers: vec![],
        obstacle_radii: vec![],
    }
}

#[test]
fn open_table_recovers_bang_bang_optimum() {
    // With |u| <= 1 per axis, reaching (4, 4) from the origin takes t = 4
    // with u = (1, 1) throughout.
    let cfg = SolveConfig::default();
    let params = open_table();
    let mut hits = 0;
    for j in 0..5 {
        let x0 = uniform_decision(ProblemKind::Tabletop, &mut rng_for(21, &[j]));
        let r = solve_local(&x0, &params, &cfg).unwrap();
        if !r.converged {
            continue;
        }
        hits += 1;
        assert!((r.objective - 4.0).abs() <= 0.05, "t* = {}", r.objective);
        let u = r.x_star.controls();
        let mean = u.iter().sum::<f64>() / u.len() as f64;
        assert!(mean > 0.98, "mean control {mean}");
    }
    assert!(hits >= 4);
}

#[test]
fn optimum_is_a_fixed_point() {
    let cfg = SolveConfig::default();
    for kind in ProblemKind::ALL {
        let params = sample_problem_params(3, kind).unwrap();
        let first = (0..10)
            .map(|j| solve_local(&uniform_decision(kind, &mut rng_for(5, &[j])), &params, &cfg).unwrap())
            .find(|r| r.converged)
            .expect("some init converges");
        let again = solve_local(&first.x_star, &params, &cfg).unwrap();
        assert!(again.converged);
        assert!(again.outer_iters <= 2, "{kind}: {} outer iterations", again.outer_iters);
        let (a, _) = first.x_star.normalize(kind).unwrap();
        let (b, _) = again.x_star.normalize(kind).unwrap();
        let gap = a.values.iter().zip(&b.values).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(gap <= 1e-3, "{kind}: moved {gap}");
    }
}

#[test]
fn random_inits_mostly_converge() {
    let cfg = SolveConfig::default();
    let params = sample_problem_params(8, ProblemKind::Tabletop).unwrap();
    let results: Vec<_> = (0..50)
        .map(|j| {
            let x0 = uniform_decision(ProblemKind::Tabletop, &mut rng_for(31, &[j]));
            solve_local(&x0, &params, &cfg).unwrap()
        })
        .collect();
    let ok: Vec<_> = results.iter().filter(|r| r.converged).collect();
    assert!(ok.len() * 10 >= results.len() * 6, "{} / {}", ok.len(), results.len());
    for r in ok {
        assert!(r.violation <= cfg.feas_tol);
        assert!(violation(&r.x_star, &params).unwrap().total <= cfg.feas_tol);
    }
}

#[test]
fn line_search_and_penalty_are_monotone() {
    let cfg = SolveConfig::default();
    for kind in ProblemKind::ALL {
        let params = sample_problem_params(12, kind).unwrap();
        for j in 0..4 {
            let x0 = uniform_decision(kind, &mut rng_for(41, &[j]));
            let (_, trace) = solve_local_traced(&x0, &params, &cfg).unwrap();
            assert!(trace.penalties.windows(2).all(|w| w[1] >= w[0]));
            for values in &trace.inner_values {
                assert!(values.windows(2).all(|w| w[1] <= w[0]));
            }
        }
    }
}

#[test]
fn non_finite_start_is_an_error_and_wild_params_do_not_crash() {
    let cfg = SolveConfig::default();
    let params = open_table();
    let mut x = DecisionVector::constant(ProblemKind::Tabletop, 8.0, &[0.1, 0.1]);
    x.values[3] = f64::NAN;
    assert!(solve_local(&x, &params, &cfg).is_err());
    let mut far = params.clone();
    far.goals = vec![[1e6, -1e6]];
    let r = solve_local(&DecisionVector::constant(ProblemKind::Tabletop, 8.0, &[0.0, 0.0]), &far, &cfg).unwrap();
    assert!(!r.converged);
}

#[test]
fn instances_have_several_local_optima() {
    // Distinct routes around the obstacles show up as objective clusters
    // separated by more than half a second.
    let cfg = SolveConfig::default();
    let records = generate_dataset(ProblemKind::Tabletop, 50, 20, &cfg, 2).unwrap();
    assert!(records.iter().all(|r| r.objective <= objective_threshold(r.kind)));
    let mut by_instance: std::collections::BTreeMap<u64, Vec<f64>> = Default::default();
    for r in &records {
        by_instance.entry(r.source_seed).or_default().push(r.objective);
    }
    let clustered = by_instance.values().any(|objs| {
        let mut s = objs.clone();
        s.sort_by(f64::total_cmp);
        s.windows(2).any(|w| w[1] - w[0] > 0.5)
    });
    assert!(clustered);
}
