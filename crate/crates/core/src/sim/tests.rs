use super::*;
use crate::features::tests::state;

fn small_config() -> SimConfig {
    SimConfig {
        slots: 3,
        max_pages: 3,
        max_ads_per_page: 2,
        user_population: 5,
        n_ads: 10,
        n_organics: 20,
        ads_per_request: 4,
        organics_per_request: 9,
        history_window: 2,
        history_keep: 4,
        warmup_episodes: 1,
        seed: 11,
        ..SimConfig::default()
    }
}

fn layout(slots: usize, max_ads_per_page: usize) -> PageLayout {
    PageLayout { slots, max_ads_per_page }
}

fn codes(actions: &[Action]) -> Vec<u32> {
    actions.iter().map(Action::code).collect()
}

#[test]
fn feasible_actions_unconstrained_k5() {
    assert_eq!(feasible_actions(&state(5, 5), &layout(5, 5)).len(), 32);
}

#[test]
fn feasible_actions_without_ads() {
    let actions = feasible_actions(&state(0, 8), &layout(5, 5));
    assert_eq!(codes(&actions), vec![0]);
}

#[test]
fn feasible_actions_one_ad_per_page() {
    let actions = feasible_actions(&state(5, 5), &layout(3, 1));
    let strings: Vec<String> = actions.iter().map(Action::to_string).collect();
    assert_eq!(strings, ["000", "100", "010", "001"]);
}

#[test]
fn feasible_actions_limited_by_organics() {
    // two organics left: every page needs at least one ad
    let actions = feasible_actions(&state(3, 2), &layout(3, 3));
    assert!(actions.iter().all(|a| a.ad_count() >= 1));
    assert_eq!(actions.len(), 7);
    assert!(feasible_actions(&state(0, 2), &layout(3, 3)).is_empty());
}

fn zero_weight_sim() -> Simulator {
    let cfg = SimConfig {
        interaction_strength: 0.0,
        ad_fatigue: 0.0,
        click_bias: 0.0,
        affinity_scale: 0.0,
        ..small_config()
    };
    Simulator::new(cfg).unwrap()
}

#[test]
fn zero_weights_click_with_probability_half() {
    let sim = zero_weight_sim();
    let s = sim.start_request(&mut episode_rng(1, 0), &HistoryBook::new(5));
    for a in feasible_actions(&s, &sim.layout()) {
        let page = cross_target(&s, &a, &sim.layout()).unwrap();
        let p = sim.response_probabilities(&page, s.user.user_id);
        assert!(p.click.iter().all(|&c| c == 0.5), "{p:?}");
    }
}

#[test]
fn huge_fatigue_silences_slot_between_ads() {
    let cfg = SimConfig {
        ad_fatigue: 1e6,
        max_ads_per_page: 3,
        ..small_config()
    };
    let sim = Simulator::new(cfg).unwrap();
    let s = sim.start_request(&mut episode_rng(2, 0), &HistoryBook::new(5));
    let page = cross_target(&s, &Action::from_str_bits("101").unwrap(), &sim.layout()).unwrap();
    let p = sim.response_probabilities(&page, s.user.user_id);
    assert!(p.click[1] < 1e-12);
    assert!(p.click[0] > 1e-3 && p.click[2] > 1e-3);
}

#[test]
fn neighbours_change_click_probability() {
    let sim = Simulator::new(SimConfig { ad_fatigue: 0.0, ..small_config() }).unwrap();
    let s = sim.start_request(&mut episode_rng(3, 0), &HistoryBook::new(5));
    let a = cross_target(&s, &Action::from_str_bits("100").unwrap(), &sim.layout()).unwrap();
    let b = cross_target(&s, &Action::from_str_bits("010").unwrap(), &sim.layout()).unwrap();
    // the ad has one organic neighbour in the first page and two in the second
    let pa = sim.response_probabilities(&a, s.user.user_id).click[0];
    let pb = sim.response_probabilities(&b, s.user.user_id).click[1];
    assert!((pa - pb).abs() > 1e-6, "ad click probability should depend on its neighbours");
}

#[test]
fn response_is_deterministic_for_fixed_seed() {
    let sim = Simulator::new(small_config()).unwrap();
    let s = sim.start_request(&mut episode_rng(4, 0), &HistoryBook::new(5));
    let page = cross_target(&s, &Action::from_str_bits("010").unwrap(), &sim.layout()).unwrap();
    let r1 = sim.user_response(&page, 0, &mut episode_rng(9, 3));
    let r2 = sim.user_response(&page, 0, &mut episode_rng(9, 3));
    assert_eq!(r1, r2);
}

#[test]
fn silent_leave_ends_episode_with_leave_page() {
    let sim = Simulator::new(small_config()).unwrap();
    let s = sim.start_request(&mut episode_rng(5, 0), &HistoryBook::new(5));
    let a = Action::from_str_bits("110").unwrap();
    let response = UserResponse {
        clicks: vec![false; 3],
        orders: vec![false; 3],
        continues: false,
    };
    let out = sim.apply(&s, &a, &response).unwrap();
    assert_eq!((out.r_ad, out.r_fee), (0.0, 0.0));
    assert!(out.done && out.next_state.terminal);
    assert_eq!(out.feedback.len(), 1);
    assert_eq!(out.feedback[0].kind, FeedbackKind::Leave);
    let leave = out.next_state.histories.get(FeedbackKind::Leave);
    assert_eq!(leave.last().unwrap().item_ids(), out.feedback[0].item_ids());
    assert_eq!(out.next_state.history_totals[3], s.history_totals[3] + 1);
}

#[test]
fn rewards_follow_clicks_and_orders() {
    let sim = Simulator::new(small_config()).unwrap();
    let s = sim.start_request(&mut episode_rng(6, 0), &HistoryBook::new(5));
    let a = Action::from_str_bits("101").unwrap();
    let page = cross_target(&s, &a, &sim.layout()).unwrap();
    let response = UserResponse {
        clicks: vec![true, true, false],
        orders: vec![false, true, false],
        continues: true,
    };
    let out = sim.apply(&s, &a, &response).unwrap();
    assert_eq!(out.r_ad, page.slots[0].item.bid);
    assert_eq!(out.r_fee, page.slots[1].item.fee_rate * page.slots[1].item.price);
    assert!(!out.done);
    let kinds: Vec<FeedbackKind> = out.feedback.iter().map(|p| p.kind).collect();
    assert_eq!(kinds, [FeedbackKind::Order, FeedbackKind::Click, FeedbackKind::PullDown]);
}

#[test]
fn step_rejects_infeasible_action() {
    let sim = Simulator::new(small_config()).unwrap();
    let s = sim.start_request(&mut episode_rng(7, 0), &HistoryBook::new(5));
    let err = sim.step(&s, &Action::from_str_bits("111").unwrap(), &mut episode_rng(0, 0)).unwrap_err();
    assert!(matches!(err, Error::Feasibility(FeasibilityError::TooManyAdsPerPage { .. })));
}

#[test]
fn episodes_conserve_candidates_and_respect_cap() {
    let sim = Simulator::new(small_config()).unwrap();
    let mut book = HistoryBook::new(5);
    for episode in 0..50 {
        let steps = sim.run_episode(21, episode, &mut book, &mut UniformPolicy).unwrap();
        assert!(!steps.is_empty() && steps.len() <= sim.config().max_pages);
        let first = &steps[0].state;
        let mut initial: Vec<ItemId> = first.ads.iter().chain(&first.organics).map(|i| i.item_id).collect();
        initial.sort_unstable();
        let mut shown = Vec::new();
        for t in &steps {
            assert!(feasible_actions(&t.state, &sim.layout()).contains(&t.action));
            assert!(t.r_ad >= 0.0 && t.r_fee >= 0.0);
            let page = cross_target(&t.state, &t.action, &sim.layout()).unwrap();
            shown.extend(page.item_ids());
            let next = &t.next_state;
            let mut all: Vec<ItemId> = shown.clone();
            all.extend(next.ads.iter().chain(&next.organics).map(|i| i.item_id));
            all.sort_unstable();
            assert_eq!(all, initial, "displayed and remaining items must partition the candidates");
            for id in page.item_ids() {
                assert!(!next.ads.iter().chain(&next.organics).any(|i| i.item_id == id));
            }
        }
        assert!(steps.last().unwrap().done);
        assert!(steps[..steps.len() - 1].iter().all(|t| !t.done));
    }
}

#[test]
fn history_window_bounds_leave_count() {
    let cfg = small_config();
    let sim = Simulator::new(cfg.clone()).unwrap();
    let mut book = HistoryBook::new(cfg.user_population);
    for episode in 0..40 {
        let steps = sim.run_episode(3, episode, &mut book, &mut UniformPolicy).unwrap();
        assert!(steps[0].state.history_totals[3] <= cfg.history_window);
        for t in &steps {
            for kind in FeedbackKind::HISTORY {
                assert!(t.state.histories.get(kind).len() <= cfg.history_keep);
                assert!(t.state.histories.get(kind).len() <= t.state.history_totals[kind.index()]);
            }
        }
    }
}

#[test]
fn offline_log_covers_requests_with_feasible_actions() {
    let sim = Simulator::new(small_config()).unwrap();
    let log = sim.generate_offline_log(&mut UniformPolicy, 100).unwrap();
    assert!(log.transitions.len() >= 100);
    assert_eq!(log.stats.episodes, 100);
    assert_eq!(log.transitions.iter().filter(|t| t.done).count(), 100);
    for t in &log.transitions {
        t.action.check_feasible(&t.state, &sim.layout()).unwrap();
    }
}

fn log_bytes(sim: &Simulator, n: usize) -> Vec<u8> {
    let log = sim.generate_offline_log(&mut UniformPolicy, n).unwrap();
    let header = LogHeader::new(
        sim.layout(),
        sim.config().history_keep,
        sim.catalog().items.clone(),
        sim.users().iter().map(|u| u.profile).collect(),
    );
    let mut buf = Vec::new();
    write_log(&mut buf, &header, &log.transitions).unwrap();
    buf
}

#[test]
fn same_seed_same_log_bytes() {
    let sim = Simulator::new(small_config()).unwrap();
    let again = Simulator::new(small_config()).unwrap();
    assert_eq!(log_bytes(&sim, 30), log_bytes(&again, 30));
    let other = Simulator::new(SimConfig { seed: 12, ..small_config() }).unwrap();
    assert_ne!(log_bytes(&sim, 30), log_bytes(&other, 30));
}

#[test]
fn log_round_trip() {
    let sim = Simulator::new(small_config()).unwrap();
    let log = sim.generate_offline_log(&mut UniformPolicy, 25).unwrap();
    let bytes = log_bytes(&sim, 25);
    let (header, back) = read_log(bytes.as_slice()).unwrap();
    assert_eq!(header.slots, 3);
    assert_eq!(back.len(), log.transitions.len());
    for (a, b) in log.transitions.iter().zip(&back) {
        assert_eq!(a.state, b.state);
        assert_eq!((&a.action, a.r_ad, a.r_fee, a.done), (&b.action, b.r_ad, b.r_fee, b.done));
        assert_eq!(a.episode_id, b.episode_id);
        if !a.done {
            assert_eq!(a.next_state, b.next_state);
        } else {
            assert!(b.next_state.terminal);
        }
    }
}

#[test]
fn corrupt_logs_are_rejected() {
    let sim = Simulator::new(small_config()).unwrap();
    let bytes = log_bytes(&sim, 3);
    let text = String::from_utf8(bytes).unwrap();
    assert!(matches!(read_log(&b""[..]), Err(Error::Corrupt(_))));

    let bad_schema = text.replacen(LOG_SCHEMA, "other", 1);
    assert!(matches!(read_log(bad_schema.as_bytes()), Err(Error::Corrupt(_))));

    // an infeasible stored action
    let lines: Vec<&str> = text.lines().collect();
    let broken = lines[1].replacen("\"action\":\"", "\"action\":\"1111", 1);
    let joined = [lines[0], &broken].join("\n");
    assert!(matches!(read_log(joined.as_bytes()), Err(Error::Corrupt(_))));

    // a dangling non-final step
    let first_not_done = lines[1..].iter().position(|l| l.contains("\"done\":false"));
    if let Some(i) = first_not_done {
        let cut = [lines[0], lines[1 + i]].join("\n");
        assert!(matches!(read_log(cut.as_bytes()), Err(Error::Corrupt(_))));
    }
}

#[test]
fn fixed_candidates_are_used_in_order() {
    let cfg = SimConfig {
        fixed_candidates: Some(FixedCandidates {
            ads: vec![2, 0],
            organics: vec![15, 11, 12],
        }),
        ..small_config()
    };
    let sim = Simulator::new(cfg).unwrap();
    let s = sim.start_request(&mut episode_rng(1, 1), &HistoryBook::new(5));
    assert_eq!(s.ads.iter().map(|i| i.item_id).collect::<Vec<_>>(), [2, 0]);
    assert_eq!(s.organics.iter().map(|i| i.item_id).collect::<Vec<_>>(), [15, 11, 12]);
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        SimConfig { max_ads_per_page: 0, ..small_config() },
        SimConfig { max_ads_per_page: 4, ..small_config() },
        SimConfig { pulldown_base: 1.5, ..small_config() },
        SimConfig { fee_rate: Range::new(0.5, 0.1), ..small_config() },
        SimConfig { ads_per_request: 99, ..small_config() },
        SimConfig {
            fixed_candidates: Some(FixedCandidates { ads: vec![15], organics: vec![] }),
            ..small_config()
        },
    ];
    for cfg in bad {
        assert!(matches!(Simulator::new(cfg.clone()), Err(Error::Config(_))), "{cfg:?}");
    }
}
