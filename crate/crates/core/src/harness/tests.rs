use super::*;
use crate::features::cross_target;
use crate::sim::{episode_rng, feasible_actions, FixedCandidates, Range, SimConfig};
use crate::Action;

fn presets() -> Vec<(&'static str, ExperimentConfig)> {
    PRESETS.iter().map(|&n| (n, ExperimentConfig::preset(n).unwrap())).collect()
}

#[test]
fn presets_validate_and_round_trip() {
    for (name, cfg) in presets() {
        cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        let text = cfg.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg, "{name}");
        assert_eq!(back.to_toml_string().unwrap(), text, "{name}");
    }
}

#[test]
fn shipped_config_files_match_presets() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for (name, cfg) in presets() {
        let path = dir.join(format!("{name}.toml"));
        let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg, "{name}");
    }
}

#[test]
fn paper_defaults_snapshot() {
    let cfg = ExperimentConfig::paper();
    assert_eq!(cfg.model.seq_len, 10);
    assert_eq!(cfg.model.channels, 5);
    assert_eq!(cfg.model.mlp1, [128, 64, 32]);
    assert_eq!(cfg.model.mlp2, [128, 64, 32]);
    assert_eq!(cfg.model.mlp3, [128, 64, 32]);
    assert_eq!(cfg.training.learning_rate, 1e-3);
    assert_eq!(cfg.training.tau, 0.9);
    assert_eq!(cfg.training.batch_size, 8192);
    assert_eq!(cfg.model.mcim_width(), 1280);
}

#[test]
fn desk_only_shrinks_scale_knobs() {
    let paper = ExperimentConfig::paper();
    let desk = ExperimentConfig::desk();
    assert_eq!(desk.model, paper.model);
    assert_eq!(desk.training.batch_size, 256);
    assert_eq!(desk.model.embedding.d_item, 8);
    let mut undone = desk.clone();
    undone.training.batch_size = paper.training.batch_size;
    undone.training.log_requests = paper.training.log_requests;
    undone.training.epochs = paper.training.epochs;
    undone.eval.episodes = paper.eval.episodes;
    undone.sim.user_population = paper.sim.user_population;
    undone.output_dir = paper.output_dir.clone();
    assert_eq!(undone, paper);
}

#[test]
fn unknown_keys_are_rejected() {
    for text in [
        "bogus = 1",
        "[sim]\nslotz = 3",
        "[model]\nwidth = 3",
        "[model.embedding]\nd_itme = 3",
        "[training]\nlr = 0.1",
        "[eval]\nrounds = 2",
    ] {
        assert!(matches!(ExperimentConfig::from_toml_str(text), Err(Error::Parse(_))), "{text}");
    }
    assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), ExperimentConfig::default());
}

#[test]
fn overrides_apply_and_stay_strict() {
    let mut value = toml::Value::try_from(ExperimentConfig::tiny()).unwrap();
    apply_override(&mut value, "training.epochs=3").unwrap();
    apply_override(&mut value, "ablation_name = no_cl").unwrap();
    apply_override(&mut value, "model.mlp3=[4, 2]").unwrap();
    let cfg: ExperimentConfig = value.clone().try_into().unwrap();
    assert_eq!(cfg.training.epochs, 3);
    assert_eq!(cfg.variant().unwrap(), Variant::NoCl);
    assert_eq!(cfg.model.mlp3, [4, 2]);

    apply_override(&mut value, "training.nope=1").unwrap();
    assert!(value.try_into::<ExperimentConfig>().is_err());
    let mut value = toml::Value::try_from(ExperimentConfig::tiny()).unwrap();
    assert!(apply_override(&mut value, "training.epochs").is_err());
    assert!(apply_override(&mut value, "training.epochs.x=1").is_err());
}

#[test]
fn invalid_combinations_are_rejected() {
    let mut cfg = ExperimentConfig::tiny();
    cfg.model.embedding.user_segments = 1;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = ExperimentConfig::tiny();
    cfg.ablation_name = Some("w/o everything".into());
    assert!(cfg.build_model().is_err());
}

#[test]
fn variant_names_and_labels() {
    let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
    assert_eq!(
        names,
        ["full", "no_cl", "no_ipau", "no_ipiu", "no_mcim", "drop_pulldown_leave", "drop_pulldown_leave_click"]
    );
    assert_eq!("w/o CL".parse::<Variant>().unwrap(), Variant::NoCl);
    assert_eq!("w/o MCIM".parse::<Variant>().unwrap(), Variant::NoMcim);
    for v in Variant::ALL {
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        assert_eq!(v.table_label().parse::<Variant>().unwrap(), v);
    }
    assert!(Variant::DropPulldownLeaveClick.ablation().drop_click);
    assert_eq!(Variant::Full.ablation(), Ablation::default());
}

#[test]
fn metrics_csv_round_trip_and_header() {
    let rows = vec![
        MetricsRow {
            run_id: "full-s1".into(),
            seed: 1,
            variant: "full".into(),
            epoch: 2,
            r_ad: 1.25,
            r_fee: 0.1 + 0.2,
            mean_episode_reward: 0.0155,
            loss: 3.5e-7,
        };
        3
    ];
    let mut buf = Vec::new();
    write_metrics(&mut buf, &rows).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert_eq!(text.lines().next().unwrap(), "run_id,seed,variant,epoch,R_ad,R_fee,mean_episode_reward,loss");
    assert_eq!(text.lines().count(), 4);
    assert_eq!(read_metrics(buf.as_slice()).unwrap(), rows);
    let bad = text.replacen("R_ad", "r_ad", 1);
    assert!(matches!(read_metrics(bad.as_bytes()), Err(Error::Corrupt(_))));
}

// ----- oracle -----------------------------------------------------------

fn one_page(cfg: &mut ExperimentConfig) {
    cfg.sim.max_pages = 1;
}

fn tiny_sim(edit: impl FnOnce(&mut ExperimentConfig)) -> Simulator {
    let mut cfg = ExperimentConfig::tiny();
    edit(&mut cfg);
    cfg.simulator().unwrap()
}

/// Expected immediate reward of a page from the click and order model.
fn expected_reward(sim: &Simulator, state: &State, action: &Action) -> f64 {
    let page = cross_target(state, action, &sim.layout()).unwrap();
    let p = sim.response_probabilities(&page, state.user.user_id);
    page.slots
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let ad = if s.item.is_ad { s.item.bid } else { 0.0 };
            p.click[i] * (ad + p.order_given_click[i] * s.item.fee_rate * s.item.price)
        })
        .sum()
}

#[test]
fn single_page_q_is_expected_reward() {
    let sim = tiny_sim(one_page);
    let oracle = OracleQ::solve(&sim, 0.95).unwrap();
    assert_eq!(oracle.len(), 3);
    for key in oracle.states() {
        let s = oracle.representative(&sim, *key);
        for (a, q) in oracle.q_values(key).unwrap() {
            let want = expected_reward(&sim, &s, &a);
            assert!((q - want).abs() <= 1e-12, "{key:?} {a}: {q} vs {want}");
        }
    }
}

#[test]
fn single_page_q_matches_monte_carlo() {
    let sim = tiny_sim(|c| {
        one_page(c);
        c.sim.expected_rewards = false;
    });
    let oracle = OracleQ::solve(&sim, 0.95).unwrap();
    let key = oracle.states()[0];
    let s = oracle.representative(&sim, key);
    let a = Action::from_str_bits("101").unwrap();
    let q = oracle.q(&key, &a).unwrap();
    let n = 1_000_000u64;
    let mut rng = episode_rng(11, 0);
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..n {
        let r = sim.step(&s, &a, &mut rng).unwrap().reward();
        sum += r;
        sq += r * r;
    }
    let mean = sum / n as f64;
    let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
    assert!((mean - q).abs() <= 3.0 * se, "mc {mean} +- {se} vs {q}");
}

#[test]
fn two_pages_follow_the_bellman_equation() {
    let sim = tiny_sim(|c| {
        c.sim.pulldown_base = 0.9;
        c.sim.ad_share_penalty = 0.3;
    });
    let gamma = 0.9;
    let oracle = OracleQ::solve(&sim, gamma).unwrap();
    let layout = sim.layout();
    let fixed = sim.config().fixed_candidates.clone().unwrap();
    for key in oracle.states().iter().filter(|k| k.page_index == 0) {
        let s = oracle.representative(&sim, *key);
        for (a, q) in oracle.q_values(key).unwrap() {
            let page = cross_target(&s, &a, &layout).unwrap();
            let cont = sim.response_probabilities(&page, key.user).continue_prob;
            let next = OracleState {
                user: key.user,
                ads_used: a.ad_count(),
                organics_used: layout.slots - a.ad_count(),
                page_index: 1,
            };
            let s1 = oracle.representative(&sim, next);
            let v1 = feasible_actions(&s1, &layout)
                .iter()
                .map(|b| expected_reward(&sim, &s1, b))
                .fold(f64::NEG_INFINITY, f64::max);
            let want = expected_reward(&sim, &s, &a) + gamma * cont * v1;
            assert!((q - want).abs() <= 1e-12, "{key:?} {a}: {q} vs {want}");
            assert!(next.ads_used <= fixed.ads.len());
        }
    }
    assert!(oracle.residual() <= ORACLE_TOLERANCE);
}

#[test]
fn zero_discount_reduces_to_one_page() {
    let two = OracleQ::solve(&tiny_sim(|_| {}), 0.0).unwrap();
    let one = OracleQ::solve(&tiny_sim(one_page), 0.0).unwrap();
    for key in one.states() {
        assert_eq!(two.q_values(key).unwrap(), one.q_values(key).unwrap());
    }
}

#[test]
fn zero_rewards_give_zero_q() {
    let sim = tiny_sim(|c| {
        c.sim.bid = Range::new(0.0, 0.0);
        c.sim.fee_rate = Range::new(0.0, 0.0);
    });
    let oracle = OracleQ::solve(&sim, 1.0).unwrap();
    assert!(oracle.len() > 3);
    for key in oracle.states() {
        assert!(oracle.q_values(key).unwrap().iter().all(|(_, q)| *q == 0.0));
    }
}

#[test]
fn oracle_refuses_large_or_random_worlds() {
    let sim = tiny_sim(|c| c.sim.user_population = 1000);
    match OracleQ::solve(&sim, 0.9) {
        Err(Error::StateSpaceTooLarge { count, limit }) => {
            assert_eq!(count, 1000 * 3 * 5 * 2);
            assert_eq!(limit, MAX_ORACLE_STATES);
        }
        other => panic!("{other:?}"),
    }
    let sim = Simulator::new(SimConfig::default()).unwrap();
    assert!(matches!(OracleQ::solve(&sim, 0.9), Err(Error::Config(_))));
}

#[test]
fn oracle_greedy_breaks_ties_by_code() {
    let sim = tiny_sim(|c| {
        c.sim.bid = Range::new(0.0, 0.0);
        c.sim.fee_rate = Range::new(0.0, 0.0);
    });
    let oracle = OracleQ::solve(&sim, 0.5).unwrap();
    for key in oracle.states() {
        let first = oracle.q_values(key).unwrap()[0].0.clone();
        assert_eq!(oracle.greedy(key).unwrap(), first);
    }
}

#[test]
fn oracle_covers_simulated_states() {
    let cfg = ExperimentConfig::tiny();
    let sim = cfg.simulator().unwrap();
    let oracle = OracleQ::solve(&sim, 0.95).unwrap();
    let log = cfg.generate_log(&sim).unwrap();
    for t in &log.transitions {
        let key = oracle.key_of(&t.state).unwrap();
        assert!(oracle.q(&key, &t.action).is_some(), "{key:?}");
    }
}

#[test]
fn agreement_of_the_all_organic_policy() {
    let cfg = ExperimentConfig::tiny();
    let sim = cfg.simulator().unwrap();
    let oracle = OracleQ::solve(&sim, cfg.training.gamma).unwrap();
    let model = cfg.build_model().unwrap();
    let mut params = model.init_params(0).unwrap();
    params.zero_values();
    let log = cfg.generate_log(&sim).unwrap();
    let states: Vec<&State> = log.transitions.iter().map(|t| t.state.as_ref()).collect();
    let got = oracle_agreement(&model, &params, &oracle, states.iter().copied()).unwrap();

    let mut distinct: Vec<String> = states.iter().map(|s| serde_json::to_string(s).unwrap()).collect();
    distinct.sort();
    distinct.dedup();
    let optimal = states
        .iter()
        .map(|s| (serde_json::to_string(s).unwrap(), *s))
        .collect::<BTreeMap<_, _>>()
        .values()
        .filter(|s| {
            let key = oracle.key_of(s).unwrap();
            let first = &feasible_actions(s, &sim.layout())[0];
            oracle.q(&key, first).unwrap() >= oracle.state_value(&key).unwrap() - 1e-12
        })
        .count();
    assert_eq!(got.total, distinct.len());
    assert_eq!(got.agree, optimal);
    assert_eq!(got.keys_covered, oracle.len());
}

// ----- evaluation and ablation ------------------------------------------

fn micro() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::tiny();
    cfg.training.epochs = 1;
    cfg.training.log_requests = 30;
    cfg.training.batch_size = 16;
    cfg.eval.episodes = 20;
    cfg
}

#[test]
fn all_organic_network_earns_no_ad_revenue() {
    let mut cfg = micro();
    cfg.sim.max_pages = 1;
    let sim = cfg.simulator().unwrap();
    let model = cfg.build_model().unwrap();
    let mut params = model.init_params(3).unwrap();
    params.zero_values();
    let eval = evaluate_params(&model, &params, &sim, 50, 9).unwrap();
    assert_eq!(eval.r_ad, 0.0);
    assert!(eval.steps >= 50);
}

#[test]
fn evaluation_is_deterministic_and_decomposes() {
    let cfg = micro();
    let sim = cfg.simulator().unwrap();
    let model = cfg.build_model().unwrap();
    let params = model.init_params(4).unwrap();
    let a = evaluate_params(&model, &params, &sim, 30, 5).unwrap();
    let b = evaluate_params(&model, &params, &sim, 30, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.row("x", 1, "full", 0, 0.5), b.row("x", 1, "full", 0, 0.5));

    let mut book = HistoryBook::new(sim.users().len());
    sim.warm_up(5, &mut book, &mut UniformPolicy).unwrap();
    let mut policy = GreedyPolicy {
        model: &model,
        params: &params,
        epsilon: 0.0,
    };
    let mut total = 0.0;
    for e in 0..30 {
        for t in sim.run_episode(5, e, &mut book, &mut policy).unwrap() {
            total += t.r_ad + t.r_fee;
        }
    }
    assert!((a.r_ad + a.r_fee - total).abs() <= 1e-9 * total.abs().max(1.0));
    let by_episode: f64 = a.episode_rewards.iter().sum();
    assert!((by_episode - total).abs() <= 1e-9 * total.abs().max(1.0));
}

#[test]
fn uniform_policy_evaluation_matches_random_choice() {
    let cfg = micro();
    let sim = cfg.simulator().unwrap();
    let eval = evaluate_policy(&sim, &mut UniformPolicy, 40, 3).unwrap();
    assert_eq!(eval.episodes, 40);
    assert_eq!(eval.episode_rewards.len(), 40);
    assert!(eval.r_ad > 0.0);
}

#[test]
fn ablation_table_shape_order_and_determinism() {
    let cfg = micro();
    let variants = [Variant::NoMcim, Variant::Full, Variant::NoCl];
    let seeds = [2, 1];
    let rows = run_ablation(&cfg, &variants, &seeds).unwrap();
    assert_eq!(rows.len(), variants.len() * seeds.len());
    let order: Vec<(String, u64)> = rows.iter().map(|r| (r.variant.clone(), r.seed)).collect();
    let want: Vec<(String, u64)> = [("full", 1), ("full", 2), ("no_cl", 1), ("no_cl", 2), ("no_mcim", 1), ("no_mcim", 2)]
        .iter()
        .map(|(v, s)| (v.to_string(), *s))
        .collect();
    assert_eq!(order, want);
    assert!(rows.iter().all(|r| r.epoch == 1 && r.loss.is_finite()));

    let again = run_ablation(&cfg, &variants, &seeds).unwrap();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    write_metrics(&mut a, &rows).unwrap();
    write_metrics(&mut b, &again).unwrap();
    assert_eq!(a, b);
}

#[test]
fn train_run_reports_every_epoch_on_request() {
    let mut cfg = micro();
    cfg.training.epochs = 2;
    let sim = cfg.simulator().unwrap();
    let model = cfg.build_model().unwrap();
    let log = cfg.generate_log(&sim).unwrap();
    let run = train_run(&cfg, &sim, &model, &log.transitions, "r", true).unwrap();
    assert_eq!(run.rows.iter().map(|r| r.epoch).collect::<Vec<_>>(), [1, 2]);
    let quiet = train_run(&cfg, &sim, &model, &log.transitions, "r", false).unwrap();
    assert_eq!(quiet.rows, run.rows[1..]);
    assert_eq!(quiet.params, run.params);
}

#[test]
fn fixed_candidates_are_used_verbatim() {
    let cfg = ExperimentConfig::tiny();
    let sim = cfg.simulator().unwrap();
    let mut rng = episode_rng(1, 2);
    let s = sim.start_request(&mut rng, &HistoryBook::new(3));
    let FixedCandidates { ads, organics } = cfg.sim.fixed_candidates.unwrap();
    assert_eq!(s.ads.iter().map(|i| i.item_id).collect::<Vec<_>>(), ads);
    assert_eq!(s.organics.iter().map(|i| i.item_id).collect::<Vec<_>>(), organics);
}
