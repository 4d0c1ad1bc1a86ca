use laglab_core::asyncsim::run_experiment;
use laglab_core::config::ExperimentConfig;
use laglab_core::par::Exec;
use laglab_core::policyopt::Algorithm;
use laglab_core::verify::{gradient_suite, lemma_suite, Fault};

#[test]
fn parallel_and_sequential_runs_are_identical() {
    for (env, alg) in [("chain:6", Algorithm::Vaco), ("pendulum", Algorithm::Impala)] {
        let mut cfg = ExperimentConfig {
            env: env.into(),
            buffer_capacity: 3,
            num_actors: 4,
            num_steps: 24,
            iterations: 4,
            eval_every: 2,
            eval_episodes: 2,
            hidden: vec![8],
            horizon: Some(20),
            ..Default::default()
        };
        cfg.loss.algorithm = alg;
        cfg.loss.epochs = 2;
        cfg.loss.minibatches = 4;
        let mut par = run_experiment(&cfg, 11, |_| Ok(())).unwrap();
        cfg.parallel = false;
        let mut seq = run_experiment(&cfg, 11, |_| Ok(())).unwrap();
        // The flag is part of the config, so compare everything else.
        for s in par.stats.iter_mut().chain(seq.stats.iter_mut()) {
            s.wall_time = 0.0;
        }
        assert_eq!(par.stats, seq.stats);
        assert_eq!(par.eval_curve, seq.eval_curve);
    }
}

#[test]
fn suites_do_not_depend_on_execution_mode() {
    let a = lemma_suite(5, 40, Fault::None, Exec::Parallel).unwrap();
    let b = lemma_suite(5, 40, Fault::None, Exec::Sequential).unwrap();
    assert_eq!(a.checks, b.checks);
    let a = gradient_suite(5, 2, Fault::None, Exec::Parallel).unwrap();
    let b = gradient_suite(5, 2, Fault::None, Exec::Sequential).unwrap();
    assert_eq!(a.checks, b.checks);
}
