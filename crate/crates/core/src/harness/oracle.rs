//! Exact `Q*` of small fixed-candidate simulators by value iteration.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use crate::agent::best_index;
use crate::features::{cross_target, Action, Context, Histories, State};
use crate::sim::{feasible_actions, Simulator, UserResponse};
use crate::Error;

/// Refusal threshold on the number of enumerated states.
pub const MAX_ORACLE_STATES: usize = 10_000;
/// Largest page for which all `3^K * 2` response outcomes are enumerated.
pub const MAX_ORACLE_SLOTS: usize = 8;
/// Sup-norm change at which the backups stop.
pub const ORACLE_TOLERANCE: f64 = 1e-10;

/// The part of a state that rewards and dynamics depend on: who is
/// browsing, how much of each candidate list is used, and the page number.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct OracleState {
    pub user: u32,
    pub ads_used: usize,
    pub organics_used: usize,
    pub page_index: usize,
}

#[derive(Clone, Debug)]
struct Choice {
    action: Action,
    expected_reward: f64,
    /// Probability of continuing into each successor state.
    successors: Vec<(usize, f64)>,
}

/// `Q*(s, a)` for every reachable non-terminal state.
#[derive(Clone, Debug)]
pub struct OracleQ {
    gamma: f64,
    /// Sizes of the fixed ad and organic lists.
    candidate_counts: (usize, usize),
    index: HashMap<OracleState, usize>,
    states: Vec<OracleState>,
    choices: Vec<Vec<Choice>>,
    q: Vec<Vec<f64>>,
    pub iterations: usize,
}

/// Every response outcome of a page (`3^K * 2` of them) with its probability;
/// impossible outcomes are dropped.
fn outcomes(click: &[f64], order: &[f64], cont: f64) -> Vec<(f64, UserResponse)> {
    let k = click.len();
    let mut out = Vec::new();
    for code in 0..3usize.pow(k as u32) {
        let mut p = 1.0;
        let mut clicks = vec![false; k];
        let mut orders = vec![false; k];
        let mut c = code;
        for i in 0..k {
            match c % 3 {
                0 => p *= 1.0 - click[i],
                1 => {
                    clicks[i] = true;
                    p *= click[i] * (1.0 - order[i]);
                }
                _ => {
                    clicks[i] = true;
                    orders[i] = true;
                    p *= click[i] * order[i];
                }
            }
            c /= 3;
        }
        for (continues, pc) in [(true, cont), (false, 1.0 - cont)] {
            let prob = p * pc;
            if prob > 0.0 {
                out.push((
                    prob,
                    UserResponse {
                        clicks: clicks.clone(),
                        orders: orders.clone(),
                        continues,
                    },
                ));
            }
        }
    }
    out
}

impl OracleQ {
    /// Enumerates the reachable states of `sim` (which must use fixed
    /// candidates) and runs Bellman backups until the largest change is
    /// below [`ORACLE_TOLERANCE`].
    pub fn solve(sim: &Simulator, gamma: f64) -> Result<Self, Error> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Config(format!("gamma = {gamma} must be in [0, 1]")));
        }
        let cfg = sim.config();
        let fixed = cfg
            .fixed_candidates
            .as_ref()
            .ok_or_else(|| Error::Config("the oracle needs sim.fixed_candidates".into()))?;
        if cfg.slots > MAX_ORACLE_SLOTS {
            return Err(Error::Config(format!("the oracle enumerates pages of at most {MAX_ORACLE_SLOTS} slots")));
        }
        let bound = cfg.user_population * (fixed.ads.len() + 1) * (fixed.organics.len() + 1) * cfg.max_pages;
        if bound > MAX_ORACLE_STATES {
            return Err(Error::StateSpaceTooLarge {
                count: bound,
                limit: MAX_ORACLE_STATES,
            });
        }

        let layout = sim.layout();
        let mut oracle = OracleQ {
            gamma,
            candidate_counts: (fixed.ads.len(), fixed.organics.len()),
            index: HashMap::new(),
            states: Vec::new(),
            choices: Vec::new(),
            q: Vec::new(),
            iterations: 0,
        };
        let mut queue = Vec::new();
        for user in 0..cfg.user_population as u32 {
            let start = OracleState {
                user,
                ads_used: 0,
                organics_used: 0,
                page_index: 0,
            };
            if !feasible_actions(&oracle.representative(sim, start), &layout).is_empty() {
                oracle.intern(start, &mut queue);
            }
        }
        while let Some(i) = queue.pop() {
            let key = oracle.states[i];
            let state = oracle.representative(sim, key);
            let mut choices = Vec::new();
            for action in feasible_actions(&state, &layout) {
                let page = cross_target(&state, &action, &layout)?;
                let p = sim.response_probabilities(&page, key.user);
                let mut expected_reward = 0.0;
                let mut successors: BTreeMap<OracleState, f64> = BTreeMap::new();
                for (prob, response) in outcomes(&p.click, &p.order_given_click, p.continue_prob) {
                    let step = sim.apply(&state, &action, &response)?;
                    expected_reward += prob * step.reward();
                    if !step.done {
                        *successors.entry(oracle.key_of(&step.next_state)?).or_default() += prob;
                    }
                }
                let successors = successors
                    .into_iter()
                    .map(|(s, p)| (oracle.intern(s, &mut queue), p))
                    .collect();
                choices.push(Choice {
                    action,
                    expected_reward,
                    successors,
                });
            }
            oracle.choices[i] = choices;
        }
        oracle.q = oracle.choices.iter().map(|c| vec![0.0; c.len()]).collect();

        loop {
            let next = oracle.backup();
            let change = max_change(&oracle.q, &next);
            oracle.q = next;
            oracle.iterations += 1;
            if change < ORACLE_TOLERANCE {
                break;
            }
            if oracle.iterations > 1_000_000 {
                return Err(Error::Config("value iteration did not converge".into()));
            }
        }
        Ok(oracle)
    }

    fn intern(&mut self, key: OracleState, queue: &mut Vec<usize>) -> usize {
        if let Some(&i) = self.index.get(&key) {
            return i;
        }
        let i = self.states.len();
        self.index.insert(key, i);
        self.states.push(key);
        self.choices.push(Vec::new());
        queue.push(i);
        i
    }

    /// A concrete simulator state for `key`, with empty histories.
    pub fn representative(&self, sim: &Simulator, key: OracleState) -> State {
        let fixed = sim.config().fixed_candidates.as_ref().expect("fixed candidates");
        let item = |id: &u32| sim.item(*id).cloned().expect("catalog item");
        let mut state = State {
            ads: fixed.ads[key.ads_used.min(fixed.ads.len())..].iter().map(item).collect(),
            organics: fixed.organics[key.organics_used.min(fixed.organics.len())..].iter().map(item).collect(),
            user: sim.users()[key.user as usize].profile,
            context: Context {
                time_bucket: 0,
                location_bucket: 0,
            },
            histories: Histories::default(),
            history_totals: [0; 4],
            page_index: key.page_index,
            terminal: false,
        };
        state.terminal = feasible_actions(&state, &sim.layout()).is_empty();
        state
    }

    /// Maps a simulator state onto its oracle key using the number of
    /// remaining candidates.
    pub fn key_of(&self, state: &State) -> Result<OracleState, Error> {
        let (ads, organics) = self.candidate_counts;
        if state.ads.len() > ads || state.organics.len() > organics {
            return Err(Error::Config("state has more candidates than the fixed request".into()));
        }
        Ok(OracleState {
            user: state.user.user_id,
            ads_used: ads - state.ads.len(),
            organics_used: organics - state.organics.len(),
            page_index: state.page_index,
        })
    }

    fn value(&self, q: &[Vec<f64>], i: usize) -> f64 {
        q[i].iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    fn backup(&self) -> Vec<Vec<f64>> {
        self.choices
            .iter()
            .map(|choices| {
                choices
                    .iter()
                    .map(|c| {
                        let future: f64 = c.successors.iter().map(|&(j, p)| p * self.value(&self.q, j)).sum();
                        c.expected_reward + self.gamma * future
                    })
                    .collect()
            })
            .collect()
    }

    /// Largest change one more Bellman backup would make.
    pub fn residual(&self) -> f64 {
        max_change(&self.q, &self.backup())
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Reachable non-terminal states in discovery order.
    pub fn states(&self) -> &[OracleState] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Feasible actions of `key` with their `Q*`, in code order.
    pub fn q_values(&self, key: &OracleState) -> Option<Vec<(Action, f64)>> {
        let &i = self.index.get(key)?;
        Some(self.choices[i].iter().map(|c| c.action.clone()).zip(self.q[i].iter().copied()).collect())
    }

    pub fn q(&self, key: &OracleState, action: &Action) -> Option<f64> {
        let &i = self.index.get(key)?;
        self.choices[i].iter().position(|c| &c.action == action).map(|j| self.q[i][j])
    }

    pub fn state_value(&self, key: &OracleState) -> Option<f64> {
        self.index.get(key).map(|&i| self.value(&self.q, i))
    }

    /// Optimal action, ties to the smallest code.
    pub fn greedy(&self, key: &OracleState) -> Option<Action> {
        let &i = self.index.get(key)?;
        let actions: Vec<Action> = self.choices[i].iter().map(|c| c.action.clone()).collect();
        Some(actions[best_index(&actions, &self.q[i])].clone())
    }
}

fn max_change(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).abs()))
        .fold(0.0, f64::max)
}
