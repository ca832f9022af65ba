//! Offline DQN on logged transitions: TD loss against a target network,
//! Polyak target updates, greedy selection by enumeration, checkpoints.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::features::{Action, FeasibilityError, PageLayout, State};
use crate::model::{DpinConfig, DpinModel};
use crate::nn::{adam_step, GradSet, NnError, ParamSet, Tape, Tensor, TrainingHyper, Var};
use crate::sim::{episode_rng, feasible_actions, Policy, Transition};
use crate::Error;

/// Seeded, epoch-wise shuffled view over a transition log.
#[derive(Clone, Copy, Debug)]
pub struct ReplayView<'a> {
    transitions: &'a [Transition],
    seed: u64,
}

impl<'a> ReplayView<'a> {
    pub fn new(transitions: &'a [Transition], seed: u64) -> Self {
        Self { transitions, seed }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn transitions(&self) -> &'a [Transition] {
        self.transitions
    }

    /// A permutation of all indices; fixed by `(seed, epoch)`.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.transitions.len()).collect();
        order.shuffle(&mut episode_rng(self.seed, epoch as u64));
        order
    }

    /// Batches of one epoch; the last batch may be short.
    pub fn batches(&self, epoch: usize, batch_size: usize) -> Vec<Vec<&'a Transition>> {
        self.epoch_order(epoch)
            .chunks(batch_size.max(1))
            .map(|c| c.iter().map(|&i| &self.transitions[i]).collect())
            .collect()
    }
}

/// Highest-Q feasible action; ties go to the smallest action code.
pub fn greedy_action(model: &DpinModel, params: &ParamSet, state: &State) -> Result<Action, Error> {
    let actions = feasible_actions(state, model.layout());
    if actions.is_empty() {
        return Err(FeasibilityError::Terminal.into());
    }
    let q = model.q_values(params, state, &actions)?;
    Ok(actions[best_index(&actions, &q)].clone())
}

/// Position of the highest value; ties go to the smallest action code, so
/// the answer does not depend on the order of `actions`.
pub fn best_index(actions: &[Action], values: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..actions.len().min(values.len()) {
        let (v, b) = (values[i], values[best]);
        if v > b || (v == b && actions[i].code() < actions[best].code()) {
            best = i;
        }
    }
    best
}

/// `max_a' Q(s', a')` over feasible actions, or zero for terminal states.
pub fn bootstrap_value(model: &DpinModel, params: &ParamSet, next: &State) -> Result<f64, Error> {
    let actions = feasible_actions(next, model.layout());
    if actions.is_empty() {
        return Ok(0.0);
    }
    let q = model.q_values(params, next, &actions)?;
    Ok(q.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

/// TD target `r + gamma * max Q_target(s', .)`, with no bootstrap after a
/// terminal step.
pub fn td_target(model: &DpinModel, target: &ParamSet, t: &Transition, gamma: f64) -> Result<f64, Error> {
    let boot = if t.done {
        0.0
    } else {
        bootstrap_value(model, target, &t.next_state)?
    };
    Ok(t.reward() + gamma * boot)
}

fn check_stored(model: &DpinModel, t: &Transition) -> Result<(), Error> {
    t.action.check_feasible(&t.state, model.layout()).map_err(|e| {
        Error::Corrupt(format!(
            "episode {} step {}: stored action {} is infeasible: {e}",
            t.episode_id, t.t, t.action
        ))
    })
}

/// `(Q(s,a) - y)^2 / n` for one transition on `tape`, with `y` constant.
fn squared_error<'p>(
    model: &DpinModel,
    tape: &mut Tape<'p>,
    params: &'p ParamSet,
    t: &Transition,
    y: f64,
    n: usize,
) -> Result<Var, Error> {
    let q = model.q_value(tape, params, &t.state, &t.action)?;
    let y = tape.constant(Tensor::scalar(y));
    let diff = tape.sub(q, y)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.scale(sq, 1.0 / n as f64))
}

/// Mean squared TD error over `batch` and its gradient for every online
/// parameter (zero where untouched). The bootstrap uses `target` and is not
/// differentiated.
pub fn td_loss(
    model: &DpinModel,
    online: &ParamSet,
    target: &ParamSet,
    batch: &[&Transition],
    gamma: f64,
) -> Result<(f64, GradSet), Error> {
    if batch.is_empty() {
        return Err(Error::Config("td_loss needs a non-empty batch".into()));
    }
    let mut grads = GradSet::zeros_like(online);
    let mut loss = 0.0;
    for t in batch {
        check_stored(model, t)?;
        let y = td_target(model, target, t, gamma)?;
        let mut tape = Tape::new();
        let term = squared_error(model, &mut tape, online, t, y, batch.len())?;
        loss += tape.value(term).item();
        grads.accumulate(&tape.backward(term)?)?;
    }
    Ok((loss, grads))
}

/// The same loss as one graph; the targets are given. Used for gradient
/// checks of [`td_loss`].
pub fn td_loss_graph<'p>(
    model: &DpinModel,
    tape: &mut Tape<'p>,
    online: &'p ParamSet,
    batch: &[&Transition],
    targets: &[f64],
) -> Result<Var, Error> {
    if batch.is_empty() || batch.len() != targets.len() {
        return Err(Error::Config("td_loss_graph needs one target per transition".into()));
    }
    let mut terms = Vec::with_capacity(batch.len());
    for (t, &y) in batch.iter().zip(targets) {
        terms.push(squared_error(model, tape, online, t, y, batch.len())?);
    }
    let stacked = tape.concat_cols(&terms)?;
    Ok(tape.sum_all(stacked))
}

/// `target <- tau * target + (1 - tau) * online`, elementwise.
pub fn soft_update(target: &mut ParamSet, online: &ParamSet, tau: f64) -> Result<(), NnError> {
    target.check_same_layout(online)?;
    for (name, theta) in online.iter() {
        let dst = target.value_mut(name)?;
        for (t, &o) in dst.data_mut().iter_mut().zip(theta.data()) {
            *t = tau * *t + (1.0 - tau) * o;
        }
    }
    Ok(())
}

/// Copies the online values into the target.
pub fn hard_sync(target: &mut ParamSet, online: &ParamSet) -> Result<(), NnError> {
    target.check_same_layout(online)?;
    for (name, theta) in online.iter() {
        target.set_value(name, theta.clone())?;
    }
    Ok(())
}

/// How the target network follows the online one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetUpdate {
    /// Polyak averaging with retention `tau` after every batch.
    Soft,
    /// Exact copy every `n` optimizer steps.
    HardEvery(u64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: u64,
}

/// Online and target parameters plus the optimizer step count.
#[derive(Clone, Debug)]
pub struct Trainer<'m> {
    model: &'m DpinModel,
    hyper: TrainingHyper,
    update: TargetUpdate,
    online: ParamSet,
    target: ParamSet,
    steps: u64,
    epoch: usize,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m DpinModel, init: ParamSet, hyper: TrainingHyper, update: TargetUpdate) -> Result<Self, Error> {
        hyper.validate()?;
        if let TargetUpdate::HardEvery(0) = update {
            return Err(Error::Config("hard target sync interval must be positive".into()));
        }
        let target = init.values_only();
        Ok(Self {
            model,
            hyper,
            update,
            online: init,
            target,
            steps: 0,
            epoch: 0,
        })
    }

    pub fn online(&self) -> &ParamSet {
        &self.online
    }

    pub fn target(&self) -> &ParamSet {
        &self.target
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn into_params(self) -> ParamSet {
        self.online
    }

    /// One Adam step on `batch` followed by the target update. Returns the
    /// batch loss before the step.
    pub fn train_batch(&mut self, batch: &[&Transition]) -> Result<f64, Error> {
        let (loss, grads) = td_loss(self.model, &self.online, &self.target, batch, self.hyper.gamma)?;
        adam_step(&mut self.online, &grads, &self.hyper)?;
        self.steps += 1;
        match self.update {
            TargetUpdate::Soft => soft_update(&mut self.target, &self.online, self.hyper.tau)?,
            TargetUpdate::HardEvery(n) => {
                if self.steps % n == 0 {
                    hard_sync(&mut self.target, &self.online)?;
                }
            }
        }
        Ok(loss)
    }

    /// One pass over the shuffled log.
    pub fn train_epoch(&mut self, replay: &ReplayView<'_>) -> Result<EpochStats, Error> {
        if replay.is_empty() {
            return Err(Error::Config("cannot train on an empty log".into()));
        }
        let batches = replay.batches(self.epoch, self.hyper.batch_size);
        let mut total = 0.0;
        for batch in &batches {
            total += self.train_batch(batch)? * batch.len() as f64;
        }
        let stats = EpochStats {
            epoch: self.epoch,
            mean_loss: total / replay.len() as f64,
            steps: self.steps,
        };
        self.epoch += 1;
        Ok(stats)
    }
}

/// Trains for `epochs` passes with soft target updates.
pub fn train(
    model: &DpinModel,
    log: &[Transition],
    hyper: &TrainingHyper,
    epochs: usize,
    init: ParamSet,
) -> Result<(ParamSet, Vec<EpochStats>), Error> {
    let replay = ReplayView::new(log, hyper.seed);
    let mut trainer = Trainer::new(model, init, hyper.clone(), TargetUpdate::Soft)?;
    let history = (0..epochs).map(|_| trainer.train_epoch(&replay)).collect::<Result<Vec<_>, _>>()?;
    Ok((trainer.into_params(), history))
}

/// Greedy policy over a fixed network, usable with the simulator.
pub struct GreedyPolicy<'a> {
    pub model: &'a DpinModel,
    pub params: &'a ParamSet,
    /// Probability of a uniform random feasible action instead.
    pub epsilon: f64,
}

impl Policy for GreedyPolicy<'_> {
    fn choose(&mut self, state: &State, feasible: &[Action], rng: &mut ChaCha8Rng) -> Result<Action, Error> {
        if self.epsilon > 0.0 && rng.gen::<f64>() < self.epsilon {
            return Ok(feasible[rng.gen_range(0..feasible.len())].clone());
        }
        let q = self.model.q_values(self.params, state, feasible)?;
        Ok(feasible[best_index(feasible, &q)].clone())
    }
}

/// Hex SHA-256 of the model configuration and page layout.
pub fn config_hash(cfg: &DpinConfig, layout: &PageLayout) -> String {
    let json = serde_json::to_string(&(cfg, layout)).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub config_hash: String,
    pub params: ParamSet,
}

pub fn save_checkpoint(path: &Path, model: &DpinModel, params: &ParamSet) -> Result<(), Error> {
    let ckpt = Checkpoint {
        config_hash: config_hash(model.config(), model.layout()),
        params: params.values_only(),
    };
    fs::write(path, serde_json::to_vec(&ckpt)?)?;
    Ok(())
}

/// Loads parameters saved for the same model configuration.
pub fn load_checkpoint(path: &Path, model: &DpinModel) -> Result<ParamSet, Error> {
    let ckpt: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
    let expected = config_hash(model.config(), model.layout());
    if ckpt.config_hash != expected {
        return Err(Error::CheckpointMismatch {
            expected,
            found: ckpt.config_hash,
        });
    }
    let reference = model.init_params(0)?;
    reference.check_same_layout(&ckpt.params)?;
    Ok(ckpt.params)
}

#[cfg(test)]
mod tests;
