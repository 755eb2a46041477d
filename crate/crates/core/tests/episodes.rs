use gppsrl::planner::GridSpec;
use gppsrl::psrl::{bayesian_regret, run_seeds};
use gppsrl::{AgentKind, Kernel, MdpConfig, RunConfig, Smoothness, TransitionMode};

fn small_config(transition: TransitionMode) -> RunConfig {
    let mdp = MdpConfig {
        horizon: 6,
        episodes: 4,
        delta: 0.3,
        sigma: 0.05,
        ..MdpConfig::default()
    };
    let kernel = Kernel::matern(Smoothness::ThreeHalves, 1.0, 0.5, mdp.input_dim()).unwrap();
    RunConfig {
        num_features: 80,
        grid: GridSpec {
            state_knots: 9,
            action_knots: 3,
        },
        transition,
        ..RunConfig::new(mdp, kernel)
    }
}

#[test]
fn regret_is_nonnegative_in_both_transition_modes() {
    for mode in [TransitionMode::NearestCell, TransitionMode::NoiseSmoothed] {
        let runs = run_seeds(&small_config(mode), &[1, 2, 3]).unwrap();
        for run in &runs {
            assert_eq!(run.records.len(), 4);
            for r in &run.records {
                assert!(r.inst_regret >= -1e-9, "{mode:?} seed {}: {}", run.seed, r.inst_regret);
                assert!(r.achieved_value <= r.optimal_value + 1e-9);
            }
        }
    }
}

#[test]
fn oracle_agent_has_zero_regret() {
    let config = RunConfig {
        agent: AgentKind::Oracle,
        ..small_config(TransitionMode::NoiseSmoothed)
    };
    let curve = bayesian_regret(&config, &[5, 6]).unwrap();
    assert!(curve.mean.iter().all(|v| v.abs() < 1e-9), "{:?}", curve.mean);
    assert_eq!(curve.num_seeds, 2);
}

#[test]
fn seeds_are_independent_of_batch_composition() {
    let config = small_config(TransitionMode::NearestCell);
    let together = run_seeds(&config, &[4, 9]).unwrap();
    let alone = run_seeds(&config, &[9]).unwrap();
    assert_eq!(together[1].records, alone[0].records);
    assert_eq!(together[1].posterior_variances, alone[0].posterior_variances);
}

#[test]
fn cumulative_regret_is_monotone_and_matches_increments() {
    let run = &run_seeds(&small_config(TransitionMode::NearestCell), &[12]).unwrap()[0];
    let mut total = 0.0;
    for r in &run.records {
        total += r.inst_regret;
        assert!((r.cum_regret - total).abs() < 1e-9);
    }
    assert!((run.final_regret() - total).abs() < 1e-9);
}
