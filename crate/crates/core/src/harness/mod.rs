//! Experiment orchestration: configs and presets, the value-iteration
//! oracle, greedy evaluation, training runs, ablations and metrics files.

mod config;
mod oracle;

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::agent::{greedy_action, GreedyPolicy, Trainer, ReplayView};
use crate::model::{Ablation, DpinModel};
use crate::nn::{grad_check, GradCheckReport, NnError, ParamSet};
use crate::sim::{episode_rng, feasible_actions, HistoryBook, OfflineLog, Policy, Simulator, Transition, UniformPolicy};
use crate::{Error, State};

pub use config::{
    apply_override, EvalConfig, ExperimentConfig, TargetMode, TrainingConfig, OUTPUT_DIR_ENV, PRESETS,
};
pub use oracle::{OracleQ, OracleState, MAX_ORACLE_SLOTS, MAX_ORACLE_STATES, ORACLE_TOLERANCE};

/// Fixed column order of every metrics file.
pub const METRICS_HEADER: [&str; 8] = ["run_id", "seed", "variant", "epoch", "R_ad", "R_fee", "mean_episode_reward", "loss"];

/// One line of a metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub seed: u64,
    pub variant: String,
    pub epoch: usize,
    #[serde(rename = "R_ad")]
    pub r_ad: f64,
    #[serde(rename = "R_fee")]
    pub r_fee: f64,
    pub mean_episode_reward: f64,
    pub loss: f64,
}

pub fn write_metrics<W: Write>(out: W, rows: &[MetricsRow]) -> Result<(), Error> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a metrics file, insisting on the exact header.
pub fn read_metrics<R: Read>(input: R) -> Result<Vec<MetricsRow>, Error> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != METRICS_HEADER {
        return Err(Error::Corrupt(format!("unexpected metrics header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Reward totals of a batch of evaluation episodes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Evaluation {
    pub episodes: usize,
    pub steps: usize,
    pub r_ad: f64,
    pub r_fee: f64,
    pub episode_rewards: Vec<f64>,
}

impl Evaluation {
    pub fn mean_episode_reward(&self) -> f64 {
        (self.r_ad + self.r_fee) / self.episodes.max(1) as f64
    }

    pub fn row(&self, run_id: &str, seed: u64, variant: &str, epoch: usize, loss: f64) -> MetricsRow {
        MetricsRow {
            run_id: run_id.to_string(),
            seed,
            variant: variant.to_string(),
            epoch,
            r_ad: self.r_ad,
            r_fee: self.r_fee,
            mean_episode_reward: self.mean_episode_reward(),
            loss,
        }
    }
}

/// Runs `episodes` requests under `policy` after a uniform warm-up of the
/// user histories, summing the reward components.
pub fn evaluate_policy<P: Policy + ?Sized>(
    sim: &Simulator,
    policy: &mut P,
    episodes: usize,
    seed: u64,
) -> Result<Evaluation, Error> {
    let mut book = HistoryBook::new(sim.users().len());
    sim.warm_up(seed, &mut book, &mut UniformPolicy)?;
    let mut eval = Evaluation {
        episodes,
        ..Evaluation::default()
    };
    for episode in 0..episodes as u64 {
        let steps = sim.run_episode(seed, episode, &mut book, policy)?;
        eval.steps += steps.len();
        let mut total = 0.0;
        for t in &steps {
            eval.r_ad += t.r_ad;
            eval.r_fee += t.r_fee;
            total += t.reward();
        }
        eval.episode_rewards.push(total);
    }
    Ok(eval)
}

/// Greedy evaluation of a trained network.
pub fn evaluate_params(
    model: &DpinModel,
    params: &ParamSet,
    sim: &Simulator,
    episodes: usize,
    seed: u64,
) -> Result<Evaluation, Error> {
    let mut policy = GreedyPolicy {
        model,
        params,
        epsilon: 0.0,
    };
    evaluate_policy(sim, &mut policy, episodes, seed)
}

/// The full model and its six ablations, in table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoCl,
    NoIpau,
    NoIpiu,
    NoMcim,
    DropPulldownLeave,
    DropPulldownLeaveClick,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoCl,
        Variant::NoIpau,
        Variant::NoIpiu,
        Variant::NoMcim,
        Variant::DropPulldownLeave,
        Variant::DropPulldownLeaveClick,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCl => "no_cl",
            Variant::NoIpau => "no_ipau",
            Variant::NoIpiu => "no_ipiu",
            Variant::NoMcim => "no_mcim",
            Variant::DropPulldownLeave => "drop_pulldown_leave",
            Variant::DropPulldownLeaveClick => "drop_pulldown_leave_click",
        }
    }

    /// Row label of the variant in the published results table.
    pub fn table_label(self) -> &'static str {
        match self {
            Variant::Full => "Our method",
            Variant::NoCl => "w/o CL",
            Variant::NoIpau => "w/o IPAU",
            Variant::NoIpiu => "w/o IPIU",
            Variant::NoMcim => "w/o MCIM",
            Variant::DropPulldownLeave => "w/o {E^p}&{E^l}",
            Variant::DropPulldownLeaveClick => "w/o {E^p}&{E^l}&{E^c}",
        }
    }

    pub fn ablation(self) -> Ablation {
        let mut a = Ablation::default();
        match self {
            Variant::Full => {}
            Variant::NoCl => a.no_cl = true,
            Variant::NoIpau => a.no_ipau = true,
            Variant::NoIpiu => a.no_ipiu = true,
            Variant::NoMcim => a.no_mcim = true,
            Variant::DropPulldownLeave => a.drop_pulldown_leave = true,
            Variant::DropPulldownLeaveClick => {
                a.drop_pulldown_leave = true;
                a.drop_click = true;
            }
        }
        a
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s || v.table_label() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

impl ExperimentConfig {
    /// The variant selected by `ablation_name` (the full model when unset).
    pub fn variant(&self) -> Result<Variant, Error> {
        self.ablation_name.as_deref().map_or(Ok(Variant::Full), str::parse)
    }

    pub fn simulator(&self) -> Result<Simulator, Error> {
        Simulator::new(self.sim.clone())
    }

    /// The network for the configured variant. Ablation switches set in
    /// `[model.ablation]` are kept and combined with the variant's.
    pub fn build_model(&self) -> Result<DpinModel, Error> {
        let mut model = self.model.clone();
        let v = self.variant()?.ablation();
        let a = &mut model.ablation;
        a.no_cl |= v.no_cl;
        a.no_ipau |= v.no_ipau;
        a.no_ipiu |= v.no_ipiu;
        a.no_mcim |= v.no_mcim;
        a.drop_pulldown_leave |= v.drop_pulldown_leave;
        a.drop_click |= v.drop_click;
        DpinModel::new(model, self.sim.layout())
    }

    /// Offline log of `training.log_requests` uniformly explored requests.
    pub fn generate_log(&self, sim: &Simulator) -> Result<OfflineLog, Error> {
        sim.generate_offline_log(&mut UniformPolicy, self.training.log_requests)
    }
}

/// Result of one training run.
#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub params: ParamSet,
    /// One row per epoch, each with a greedy evaluation.
    pub rows: Vec<MetricsRow>,
}

/// Trains on `log` and evaluates after every epoch when `eval_each_epoch`
/// is set, otherwise only after the last one.
pub fn train_run(
    cfg: &ExperimentConfig,
    sim: &Simulator,
    model: &DpinModel,
    log: &[Transition],
    run_id: &str,
    eval_each_epoch: bool,
) -> Result<TrainedRun, Error> {
    let hyper = cfg.training.hyper();
    let variant = cfg.variant()?;
    let init = model.init_params(hyper.seed)?;
    let replay = ReplayView::new(log, hyper.seed);
    let mut trainer = Trainer::new(model, init, hyper.clone(), cfg.training.target_update())?;
    let mut rows = Vec::new();
    for epoch in 0..cfg.training.epochs {
        let stats = trainer.train_epoch(&replay)?;
        let last = epoch + 1 == cfg.training.epochs;
        if eval_each_epoch || last {
            let eval = evaluate_params(model, trainer.online(), sim, cfg.eval.episodes, cfg.eval.seed)?;
            rows.push(eval.row(run_id, hyper.seed, variant.name(), epoch + 1, stats.mean_loss));
        }
    }
    Ok(TrainedRun {
        params: trainer.into_params(),
        rows,
    })
}

/// Trains and evaluates every variant on every seed. Per seed, the world,
/// the log, the initial weights and the evaluation requests are shared by
/// all variants. Rows are sorted by variant (table order), then seed.
pub fn run_ablation(base: &ExperimentConfig, variants: &[Variant], seeds: &[u64]) -> Result<Vec<MetricsRow>, Error> {
    let mut rows = Vec::with_capacity(variants.len() * seeds.len());
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.sim.seed = seed;
        cfg.training.seed = seed;
        let sim = cfg.simulator()?;
        let log = cfg.generate_log(&sim)?;
        for &variant in variants {
            cfg.ablation_name = Some(variant.name().to_string());
            let model = cfg.build_model()?;
            let run_id = format!("{}-s{seed}", variant.name());
            rows.extend(train_run(&cfg, &sim, &model, &log.transitions, &run_id, false)?.rows);
        }
    }
    rows.sort_by(|a, b| {
        let va: Variant = a.variant.parse().expect("known variant");
        let vb: Variant = b.variant.parse().expect("known variant");
        (va, a.seed).cmp(&(vb, b.seed))
    });
    Ok(rows)
}

/// Share of states on which a network's greedy action is optimal.
#[derive(Clone, Debug, PartialEq)]
pub struct Agreement {
    pub agree: usize,
    pub total: usize,
    /// Oracle states covered by the checked states.
    pub keys_covered: usize,
}

impl Agreement {
    pub fn rate(&self) -> f64 {
        self.agree as f64 / self.total.max(1) as f64
    }
}

/// Compares the network's greedy action with the oracle on every distinct
/// non-terminal state in `states`. An action counts as agreeing when its
/// `Q*` equals the optimum up to `1e-12` (relative), so exact ties between
/// actions are not held against the network.
pub fn oracle_agreement<'s, I>(
    model: &DpinModel,
    params: &ParamSet,
    oracle: &OracleQ,
    states: I,
) -> Result<Agreement, Error>
where
    I: IntoIterator<Item = &'s State>,
{
    let mut seen = BTreeMap::new();
    for s in states {
        if s.terminal {
            continue;
        }
        seen.entry(serde_json::to_string(s)?).or_insert(s);
    }
    let mut agreement = Agreement {
        agree: 0,
        total: 0,
        keys_covered: 0,
    };
    let mut keys = std::collections::BTreeSet::new();
    for s in seen.values() {
        let key = oracle.key_of(s)?;
        let best = oracle
            .state_value(&key)
            .ok_or_else(|| Error::Config(format!("state {key:?} is unknown to the oracle")))?;
        let chosen = greedy_action(model, params, s)?;
        let q = oracle.q(&key, &chosen).expect("greedy action is feasible");
        keys.insert(key);
        agreement.total += 1;
        if q >= best - 1e-12 * best.abs().max(1.0) {
            agreement.agree += 1;
        }
    }
    agreement.keys_covered = keys.len();
    Ok(agreement)
}

/// One seeded instance of the end-to-end gradient check: weights from
/// `init_params(seed)`, a simulated state with non-empty histories and a
/// random feasible action.
pub fn q_grad_check(cfg: &ExperimentConfig, seed: u64, eps: f64) -> Result<GradCheckReport, Error> {
    let mut sim_cfg = cfg.sim.clone();
    sim_cfg.seed = seed;
    sim_cfg.history_window = sim_cfg.history_window.max(2);
    sim_cfg.warmup_episodes = sim_cfg.warmup_episodes.max(1);
    sim_cfg.expected_rewards = false;
    let sim = Simulator::new(sim_cfg)?;
    let model = cfg.build_model()?;
    let params = model.init_params(seed)?;
    let log = sim.generate_offline_log(&mut UniformPolicy, 4)?;
    let richest = log
        .transitions
        .iter()
        .max_by_key(|t| (t.state.histories.lengths().iter().sum::<usize>(), std::cmp::Reverse(t.t)))
        .ok_or_else(|| Error::Config("simulator produced no transitions".into()))?;
    let state = richest.state.as_ref();
    let actions = feasible_actions(state, &sim.layout());
    let mut rng = episode_rng(seed, 0);
    let action = actions[rand::Rng::gen_range(&mut rng, 0..actions.len())].clone();
    Ok(grad_check(
        |tape, p| {
            model.q_value(tape, p, state, &action).map_err(|e| match e {
                Error::Nn(e) => e,
                other => NnError::Config(other.to_string()),
            })
        },
        &params,
        eps,
    )?)
}

#[cfg(test)]
mod tests;
