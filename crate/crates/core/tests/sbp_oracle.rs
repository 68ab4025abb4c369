//! Scaled message passing checked against the dense tensor solver and an
//! independent constrained minimizer.

mod common;

use std::collections::BTreeMap;

use sbp_core::dense::{cost_from_potentials, kernel_from_cost, project, project_pair, sinkhorn, SinkhornOptions};
use sbp_core::sbp::{self, Schedule, SbpOptions};

#[test]
fn constrained_marginals_match_dense_scaling() {
    for seed in 0..30 {
        let mut rng = common::rng(10_000 + seed);
        let inst = common::random_tree_instance(&mut rng, 5, 4, 3);
        let (g, pots) = (&inst.graph, &inst.potentials);

        let kernel = kernel_from_cost(&cost_from_potentials(g, pots, None).unwrap(), 1.0).unwrap();
        let dense = sinkhorn(&kernel, &inst.observations, &SinkhornOptions { tol: 1e-10, max_sweeps: 100_000 })
            .unwrap();
        assert!(dense.converged, "seed {seed}: dense run stalled");
        let mass: f64 = dense.plan.iter().sum();

        let opts = SbpOptions { tol: 1e-10, ..Default::default() };
        let res = sbp::solve(g, pots, &inst.observations, &opts).unwrap();
        assert!(res.state.converged, "seed {seed}: message run stalled");

        for v in 0..g.node_count() {
            if g.is_observed(v) {
                continue;
            }
            let reference = project(&dense.plan, v) / mass;
            let gap: f64 = res.marginals[v]
                .iter()
                .zip(reference.iter())
                .map(|(a, b)| (a - b).abs())
                .sum();
            assert!(gap < 1e-8, "seed {seed} node {v} off by {gap:.2e}");
        }

        let ms = sbp::marginals(g, pots, &res.state).unwrap();
        for e in 0..g.edge_count() {
            let (i, j) = g.edge_endpoints(e);
            let reference = project_pair(&dense.plan, i, j) / mass;
            let gap: f64 = ms.edges[e].iter().zip(reference.iter()).map(|(a, b)| (a - b).abs()).sum();
            assert!(gap < 1e-7, "seed {seed} edge ({i}, {j}) off by {gap:.2e}");
        }
    }
}

#[test]
fn converged_state_passes_both_residual_audits() {
    for seed in 0..30 {
        let mut rng = common::rng(20_000 + seed);
        let inst = common::random_tree_instance(&mut rng, 5, 4, 3);
        let opts = SbpOptions { tol: 1e-10, ..Default::default() };
        let res = sbp::solve(&inst.graph, &inst.potentials, &inst.observations, &opts).unwrap();
        assert!(res.state.converged);

        let fp = sbp::fixed_point_residual(&inst.graph, &inst.potentials, &res.state, &inst.observations)
            .unwrap();
        assert!(fp < 1e-8, "seed {seed}: message equations violated by {fp:.2e}");
        let st = sbp::stationarity_residual(&inst.graph, &inst.potentials, &res.state).unwrap();
        assert!(st < 1e-8, "seed {seed}: reconstruction off by {st:.2e}");
    }
}

#[test]
fn tree_solution_matches_the_independent_polytope_minimizer() {
    // On trees the constrained entropic objective is exactly the polytope
    // problem the damped-Newton reference solves; the two solution paths
    // share nothing but the problem statement.
    for seed in [3u64, 11, 27] {
        let mut rng = common::rng(30_000 + seed);
        let inst = common::random_tree_instance(&mut rng, 5, 3, 2);
        let (g, pots) = (&inst.graph, &inst.potentials);

        let opts = SbpOptions { tol: 1e-12, ..Default::default() };
        let res = sbp::solve(g, pots, &inst.observations, &opts).unwrap();
        assert!(res.state.converged);
        let ms = sbp::marginals(g, pots, &res.state).unwrap();

        let edge_list: Vec<_> = (0..g.edge_count()).map(|e| g.edge_endpoints(e)).collect();
        let tables: Vec<_> = (0..g.edge_count()).map(|e| pots.table(e).clone()).collect();
        let pinned: BTreeMap<_, _> =
            inst.observations.iter().map(|m| (m.node, m.probs.clone())).collect();
        let reference =
            common::minimize_constrained_bethe(g.dims(), &edge_list, &tables, &pinned, 200);
        assert!(
            reference.kkt_residual < 1e-7,
            "seed {seed}: reference certificate {:.2e}",
            reference.kkt_residual
        );

        let gap = common::max_node_l1(&ms.nodes, &reference.nodes);
        assert!(gap < 1e-7, "seed {seed}: solutions differ by {gap:.2e}");

        let f_sbp = sbp::bethe_free_energy(&ms, g, pots).unwrap();
        assert!(
            (f_sbp - reference.objective).abs() < 1e-8,
            "seed {seed}: objectives {f_sbp} vs {}",
            reference.objective
        );
    }
}

#[test]
fn scheduled_work_stays_within_the_path_budget() {
    // Chain with every interior node's outgoing observation: each step's
    // touched-message count must stay within the scheduled path length
    // plus the degree of the scaled node.
    for &len in &[10usize, 50, 120] {
        let mut rng = common::rng(len as u64);
        let (g, pots, obs) = common::chain_with_leaf_observations(&mut rng, len);
        let opts = SbpOptions { tol: 1e-9, ..Default::default() };
        let res = sbp::solve(&g, &pots, &obs, &opts).unwrap();
        assert!(res.state.converged, "length {len}");

        let schedule = res.schedule.clone();
        let steps = schedule.template().len();
        for (k, &touched) in res.state.touched_per_step.iter().enumerate() {
            let i = schedule.template()[k % steps];
            let path_len = schedule.path(k % steps).len();
            let budget = path_len + g.degree(i);
            assert!(
                touched <= budget,
                "length {len} step {k}: {touched} messages against budget {budget}"
            );
        }
    }
}

#[test]
fn alternative_schedules_share_the_fixed_point() {
    for seed in 0..10 {
        let mut rng = common::rng(40_000 + seed);
        let inst = common::random_tree_instance(&mut rng, 5, 3, 3);
        let (g, pots) = (&inst.graph, &inst.potentials);
        let opts = SbpOptions { tol: 1e-11, ..Default::default() };
        let base = sbp::solve(g, pots, &inst.observations, &opts).unwrap();
        assert!(base.state.converged);

        // Rotate the default template; wrap-around repeats are rejected by
        // the constructor, so skip rotations that would create one.
        let template = base.schedule.template().to_vec();
        if template.len() < 2 {
            continue;
        }
        let mut rotated = template.clone();
        rotated.rotate_left(1);
        if rotated.first() == rotated.last() {
            continue;
        }
        let sched = Schedule::from_template(g, rotated).unwrap();
        let alt_opts = SbpOptions { tol: 1e-11, schedule: Some(sched), ..Default::default() };
        let alt = sbp::solve(g, pots, &inst.observations, &alt_opts).unwrap();
        assert!(alt.state.converged);

        let gap = common::max_node_l1(&base.marginals, &alt.marginals);
        assert!(gap < 1e-9, "seed {seed}: schedules disagree by {gap:.2e}");
    }
}

#[test]
fn full_refresh_changes_work_but_not_the_answer() {
    let mut rng = common::rng(555);
    let inst = common::random_tree_instance(&mut rng, 5, 4, 2);
    let (g, pots) = (&inst.graph, &inst.potentials);

    let lean = sbp::solve(g, pots, &inst.observations, &SbpOptions { tol: 1e-11, ..Default::default() })
        .unwrap();
    let full = sbp::solve(
        g,
        pots,
        &inst.observations,
        &SbpOptions { tol: 1e-11, full_refresh: true, ..Default::default() },
    )
    .unwrap();
    assert!(lean.state.converged && full.state.converged);

    let gap = common::max_node_l1(&lean.marginals, &full.marginals);
    assert!(gap < 1e-9, "refresh modes disagree by {gap:.2e}");

    let lean_work: usize = lean.state.touched_per_step.iter().sum();
    let full_work: usize = full.state.touched_per_step.iter().sum();
    assert!(
        full_work > lean_work,
        "full refresh should cost more messages ({full_work} vs {lean_work})"
    );
}

