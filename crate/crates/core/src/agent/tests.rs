use std::sync::Arc;

use super::*;
use crate::model::tests::tiny_config;
use crate::nn::grad_check;
use crate::sim::{SimConfig, Simulator, UniformPolicy};

fn sim_config() -> SimConfig {
    SimConfig {
        slots: 3,
        max_pages: 3,
        max_ads_per_page: 2,
        user_population: 4,
        n_ads: 10,
        n_organics: 20,
        ads_per_request: 4,
        organics_per_request: 9,
        user_segments: 3,
        age_buckets: 2,
        time_buckets: 2,
        location_buckets: 2,
        history_window: 2,
        history_keep: 3,
        warmup_episodes: 1,
        seed: 5,
        ..SimConfig::default()
    }
}

fn setup(requests: usize) -> (DpinModel, Vec<Transition>) {
    let sim = Simulator::new(sim_config()).unwrap();
    let log = sim.generate_offline_log(&mut UniformPolicy, requests).unwrap();
    let model = DpinModel::new(tiny_config(), sim.layout()).unwrap();
    (model, log.transitions)
}

fn hyper(lr: f64) -> TrainingHyper {
    TrainingHyper {
        learning_rate: lr,
        batch_size: 4,
        ..TrainingHyper::default()
    }
}

#[test]
fn replay_visits_each_transition_once_per_epoch() {
    let (_, log) = setup(10);
    let view = ReplayView::new(&log, 3);
    for epoch in 0..3 {
        let mut order = view.epoch_order(epoch);
        assert_eq!(order, view.epoch_order(epoch));
        order.sort_unstable();
        assert_eq!(order, (0..log.len()).collect::<Vec<_>>());
    }
    assert_ne!(view.epoch_order(0), view.epoch_order(1));
    let batches = view.batches(0, 4);
    assert_eq!(batches.iter().map(Vec::len).sum::<usize>(), log.len());
}

#[test]
fn zero_network_picks_all_organic_page() {
    let (model, log) = setup(2);
    let mut params = model.init_params(1).unwrap();
    params.zero_values();
    let a = greedy_action(&model, &params, &log[0].state).unwrap();
    assert_eq!(a.to_string(), "000");
}

#[test]
fn greedy_matches_enumerated_argmax() {
    let (model, log) = setup(6);
    let params = model.init_params(2).unwrap();
    for t in log.iter().take(8) {
        let actions = feasible_actions(&t.state, model.layout());
        let q: Vec<f64> = actions.iter().map(|a| model.q_scalar(&params, &t.state, a).unwrap()).collect();
        let best = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let expected = actions.iter().zip(&q).find(|(_, &v)| v == best).unwrap().0;
        assert_eq!(&greedy_action(&model, &params, &t.state).unwrap(), expected);
    }
}

#[test]
fn greedy_ignores_enumeration_order() {
    let actions: Vec<Action> = ["000", "100", "010", "001"].iter().map(|s| Action::from_str_bits(s).unwrap()).collect();
    let q = [1.0, 3.0, 2.0, 3.0];
    let i = best_index(&actions, &q);
    let mut rev = actions.clone();
    rev.reverse();
    let mut q_rev = q;
    q_rev.reverse();
    let j = best_index(&rev, &q_rev);
    assert_eq!(actions[i], rev[j]);
    assert_eq!(actions[i].to_string(), "100");
}

#[test]
fn greedy_on_terminal_state_is_an_error() {
    let (model, log) = setup(2);
    let params = model.init_params(1).unwrap();
    let last = log.iter().find(|t| t.done).unwrap();
    assert!(matches!(
        greedy_action(&model, &params, &last.next_state),
        Err(Error::Feasibility(FeasibilityError::Terminal))
    ));
}

#[test]
fn terminal_transition_with_zero_q() {
    let (model, log) = setup(3);
    let mut params = model.init_params(1).unwrap();
    params.zero_values();
    let mut t = log.iter().find(|t| t.done).unwrap().clone();
    t.r_ad = 0.25;
    t.r_fee = 0.75;
    let (loss, _) = td_loss(&model, &params, &params, &[&t], 0.95).unwrap();
    assert_eq!(loss, 1.0);
}

#[test]
fn consistent_targets_give_zero_loss() {
    let (model, log) = setup(3);
    let mut params = model.init_params(1).unwrap();
    params.zero_values();
    let batch: Vec<Transition> = log
        .iter()
        .take(4)
        .map(|t| Transition {
            r_ad: 0.0,
            r_fee: 0.0,
            ..t.clone()
        })
        .collect();
    let refs: Vec<&Transition> = batch.iter().collect();
    let (loss, grads) = td_loss(&model, &params, &params, &refs, 0.95).unwrap();
    assert_eq!(loss, 0.0);
    assert_eq!(grads.len(), params.len());
}

#[test]
fn td_loss_gradient_matches_finite_differences() {
    let (model, log) = setup(4);
    let online = model.init_params(7).unwrap();
    let target = model.init_params(8).unwrap();
    let batch: Vec<&Transition> = log.iter().take(4).collect();
    let targets: Vec<f64> = batch.iter().map(|t| td_target(&model, &target, t, 0.95).unwrap()).collect();

    let (loss, grads) = td_loss(&model, &online, &target, &batch, 0.95).unwrap();
    let mut tape = Tape::new();
    let graph = td_loss_graph(&model, &mut tape, &online, &batch, &targets).unwrap();
    assert!((tape.value(graph).item() - loss).abs() < 1e-12);
    let whole = tape.backward(graph).unwrap();
    for (name, g) in whole.iter() {
        assert!(g.max_abs_diff(grads.get(name).unwrap()) < 1e-12, "{name}");
    }

    let report = grad_check(
        |tape, p| {
            td_loss_graph(&model, tape, p, &batch, &targets).map_err(|e| match e {
                Error::Nn(e) => e,
                other => NnError::Config(other.to_string()),
            })
        },
        &online,
        1e-4,
    )
    .unwrap();
    assert!(report.max_relative_error <= 1e-4, "{report:?}");
}

#[test]
fn td_loss_is_permutation_invariant() {
    let (model, log) = setup(4);
    let online = model.init_params(3).unwrap();
    let target = model.init_params(4).unwrap();
    let batch: Vec<&Transition> = log.iter().take(6).collect();
    let mut rev = batch.clone();
    rev.reverse();
    let (a, _) = td_loss(&model, &online, &target, &batch, 0.9).unwrap();
    let (b, _) = td_loss(&model, &online, &target, &rev, 0.9).unwrap();
    assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    let (c, _) = td_loss(&model, &online, &target, &batch, 0.9).unwrap();
    assert_eq!(a.to_bits(), c.to_bits());
}

#[test]
fn infeasible_stored_action_is_corruption() {
    let (model, log) = setup(2);
    let params = model.init_params(1).unwrap();
    let mut t = log[0].clone();
    t.action = Action::from_str_bits("111").unwrap();
    assert!(matches!(td_loss(&model, &params, &params, &[&t], 0.9), Err(Error::Corrupt(_))));
    assert!(matches!(td_loss(&model, &params, &params, &[], 0.9), Err(Error::Config(_))));
}

fn scalar_set(v: f64) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert("w", Tensor::vector(vec![v, v]).unwrap()).unwrap();
    p
}

#[test]
fn soft_update_examples() {
    let online = scalar_set(0.0);
    let mut t = scalar_set(1.0);
    soft_update(&mut t, &online, 1.0).unwrap();
    assert_eq!(t, scalar_set(1.0));
    soft_update(&mut t, &online, 0.9).unwrap();
    assert_eq!(t.value("w").unwrap().data(), &[0.9, 0.9]);
    soft_update(&mut t, &online, 0.0).unwrap();
    assert_eq!(t.value("w").unwrap().data(), online.value("w").unwrap().data());
}

#[test]
fn soft_update_contracts() {
    let online = scalar_set(-2.0);
    let mut t = scalar_set(3.0);
    let mut gap = f64::INFINITY;
    for _ in 0..20 {
        soft_update(&mut t, &online, 0.7).unwrap();
        let now = (t.value("w").unwrap().data()[0] + 2.0).abs();
        assert!(now < gap);
        gap = now;
    }
}

#[test]
fn soft_update_rejects_mismatched_layouts() {
    let mut t = scalar_set(1.0);
    let mut other = ParamSet::new();
    other.insert("v", Tensor::scalar(1.0)).unwrap();
    assert!(matches!(soft_update(&mut t, &other, 0.5), Err(NnError::Consistency(_))));
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let (model, log) = setup(4);
    let init = model.init_params(9).unwrap();
    let (trained, history) = train(&model, &log, &hyper(0.0), 2, init.clone()).unwrap();
    assert_eq!(history.len(), 2);
    for (name, v) in init.iter() {
        assert_eq!(trained.value(name).unwrap(), v, "{name}");
    }
}

#[test]
fn fixed_batch_loss_goes_down() {
    let (model, log) = setup(4);
    let init = model.init_params(10).unwrap();
    let frozen_target = TrainingHyper {
        tau: 1.0,
        ..hyper(2e-4)
    };
    let mut trainer = Trainer::new(&model, init, frozen_target, TargetUpdate::Soft).unwrap();
    let batch: Vec<&Transition> = log.iter().take(4).collect();
    let losses: Vec<f64> = (0..50).map(|_| trainer.train_batch(&batch).unwrap()).collect();
    let upticks = losses.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(upticks <= 5, "{losses:?}");
    assert!(losses[49] < losses[0]);
}

#[test]
fn hard_sync_copies_on_schedule() {
    let (model, log) = setup(3);
    let init = model.init_params(11).unwrap();
    let mut trainer = Trainer::new(&model, init.clone(), hyper(1e-2), TargetUpdate::HardEvery(2)).unwrap();
    let batch: Vec<&Transition> = log.iter().take(2).collect();
    trainer.train_batch(&batch).unwrap();
    assert_eq!(trainer.target(), &init.values_only());
    trainer.train_batch(&batch).unwrap();
    assert_eq!(trainer.target(), &trainer.online().values_only());
    assert!(Trainer::new(&model, init, hyper(1e-2), TargetUpdate::HardEvery(0)).is_err());
}

#[test]
fn training_is_deterministic() {
    let (model, log) = setup(4);
    let run = || train(&model, &log, &hyper(1e-3), 2, model.init_params(12).unwrap()).unwrap();
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(a, b);
    assert_eq!(ha, hb);
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let (model, _) = setup(1);
    let params = model.init_params(13).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    save_checkpoint(&path, &model, &params).unwrap();
    assert_eq!(load_checkpoint(&path, &model).unwrap(), params.values_only());

    let other = DpinModel::new(
        DpinConfig {
            kernels: 6,
            ..tiny_config()
        },
        *model.layout(),
    )
    .unwrap();
    assert!(matches!(load_checkpoint(&path, &other), Err(Error::CheckpointMismatch { .. })));
}

#[test]
fn greedy_policy_drives_the_simulator() {
    let sim = Simulator::new(sim_config()).unwrap();
    let model = DpinModel::new(tiny_config(), sim.layout()).unwrap();
    let params = model.init_params(14).unwrap();
    let mut policy = GreedyPolicy {
        model: &model,
        params: &params,
        epsilon: 0.0,
    };
    let mut book = crate::sim::HistoryBook::new(4);
    let steps = sim.run_episode(1, 0, &mut book, &mut policy).unwrap();
    for t in &steps {
        assert_eq!(t.action, greedy_action(&model, &params, &t.state).unwrap());
        assert!(Arc::ptr_eq(&t.next_state, &t.next_state));
    }
}
