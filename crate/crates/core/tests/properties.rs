mod common;

use cfsm_core::checker::{label_logprob_coherent, Checker, Label, SampledChecker};
use cfsm_core::engine::{run_trace, SceneAction};
use cfsm_core::model::{parse_machine, serialize_machine, StateId};
use cfsm_core::pfsm::{ground_state, softmax, update_distribution, StateDistribution, TransitionMatrix};
use cfsm_core::synthbench::{builtin_table, read_pool, write_pool, PathRecord};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{action_name, random_machine, random_truth, scripted_from_truth, simulate, ACTIONS};

fn matrix_and_dist() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
    (2usize..9).prop_flat_map(|n| {
        (
            prop::collection::vec(prop::collection::vec(-10.0f64..10.0, n), n),
            prop::collection::vec(0.001f64..1.0, n),
        )
    })
}

fn normalized(raw: Vec<f64>) -> StateDistribution {
    let total: f64 = raw.iter().sum();
    StateDistribution::new(raw.into_iter().map(|x| x / total).collect()).unwrap()
}

proptest! {
    #[test]
    fn update_stays_on_simplex((rows, raw) in matrix_and_dist()) {
        let w = TransitionMatrix::from_rows(rows).unwrap();
        let p = update_distribution(&normalized(raw), &w).unwrap();
        let sum: f64 = p.probs().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        prop_assert!(p.probs().iter().all(|x| *x >= 0.0));
    }

    #[test]
    fn column_shift_does_not_move_the_update(
        (rows, raw) in matrix_and_dist(),
        col_seed in any::<usize>(),
        c in -500.0f64..500.0,
    ) {
        let n = rows.len();
        let col = col_seed % n;
        let w = TransitionMatrix::from_rows(rows.clone()).unwrap();
        let mut shifted = rows;
        for row in &mut shifted {
            row[col] += c;
        }
        let shifted = TransitionMatrix::from_rows(shifted).unwrap();
        let p = normalized(raw);
        let a = update_distribution(&p, &w).unwrap();
        let b = update_distribution(&p, &shifted).unwrap();
        for (x, y) in a.probs().iter().zip(b.probs()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_a_distribution(xs in prop::collection::vec(-700.0f64..700.0, 1..20)) {
        let s = softmax(&xs);
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let top = xs.iter().cloned().fold(f64::MIN, f64::max);
        let arg = xs.iter().position(|x| *x == top).unwrap();
        prop_assert_eq!(ground_state(&StateDistribution::new(s).unwrap()), StateId(arg));
    }

    #[test]
    fn machines_round_trip(seed in any::<u64>()) {
        let m = random_machine(&mut ChaCha8Rng::seed_from_u64(seed));
        let text = serialize_machine(&m);
        prop_assert_eq!(parse_machine(&text).unwrap(), m);
    }

    #[test]
    fn engine_agrees_with_reference_interpreter(seed in any::<u64>(), picks in prop::collection::vec(0..ACTIONS, 0..=10)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_machine(&mut rng);
        let truth = random_truth(&mut rng);
        let checker = scripted_from_truth(&truth);
        let actions: Vec<String> = picks.iter().map(|&a| action_name(a)).collect();
        let sa: Vec<SceneAction> = actions.iter().map(SceneAction::action).collect();
        for start in 0..m.state_count() {
            let t = run_trace(&m, StateId(start), &sa, &checker).unwrap();
            prop_assert_eq!(t.terminal.0, simulate(&m, &truth, start, &actions));
            prop_assert_eq!(t.steps.len(), actions.len());
        }
    }

    #[test]
    fn sampled_verdicts_are_coherent(seed in any::<u64>(), text in "[a-z ]{1,20}") {
        let table = builtin_table("mario").unwrap();
        let c = SampledChecker::new(cfsm_core::synthbench::scripted_oracle(&table), seed);
        let v = c.binary_question(&text, "Does the action describe \"get a fire flower\"?").unwrap();
        prop_assert!(label_logprob_coherent(v.label, v.true_logprob));
        prop_assert!(v.label != Label::Unknown);
    }

    #[test]
    fn pool_jsonl_round_trips(
        paths in prop::collection::vec(("[a-z]{1,8}", prop::collection::vec("[a-z ]{1,12}", 0..5), "[a-z]{1,8}"), 0..20)
    ) {
        let pool: Vec<PathRecord> = paths
            .into_iter()
            .map(|(initial, actions, terminal)| PathRecord { initial, actions, terminal })
            .collect();
        prop_assert_eq!(read_pool(&write_pool(&pool)).unwrap(), pool);
    }
}
