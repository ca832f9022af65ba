//! Page-turn feed simulator: synthetic catalog and users, an
//! arrangement-sensitive click model, rewards, and offline log generation.

mod config;
mod log;

use std::collections::VecDeque;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::features::{
    cross_target, Action, Context, FeasibilityError, FeedbackKind, Histories, Item, ItemId, PageLayout, PageRecord,
    State, UserProfile,
};
use crate::Error;

pub use config::{FixedCandidates, Range, SimConfig};
pub use log::{read_log, write_log, LogHeader, LOG_SCHEMA, LOG_VERSION};

const CATALOG_STREAM: u64 = u64::MAX;
const WARMUP_STREAM_BASE: u64 = 1 << 62;
const POLICY_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Seeded generator for one episode; `stream` separates episodes drawn from
/// the same seed.
pub fn episode_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// All actions that are feasible in `state`, ordered by [`Action::code`].
/// Empty for terminal states or when no page can be filled.
pub fn feasible_actions(state: &State, layout: &PageLayout) -> Vec<Action> {
    if state.terminal {
        return Vec::new();
    }
    (0..1u32 << layout.slots)
        .map(|code| Action::from_code(code, layout.slots))
        .filter(|a| a.check_feasible(state, layout).is_ok())
        .collect()
}

/// Synthetic item catalog with latent traits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    /// Indexed by item id.
    pub items: Vec<Item>,
    pub latents: Vec<Vec<f64>>,
    pub order_rates: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimUser {
    pub profile: UserProfile,
    pub latent: Vec<f64>,
}

/// Per-slot response probabilities of one page.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseProbabilities {
    pub click: Vec<f64>,
    /// Order probability given a click.
    pub order_given_click: Vec<f64>,
    pub continue_prob: f64,
}

/// Sampled user feedback on one page.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserResponse {
    pub clicks: Vec<bool>,
    pub orders: Vec<bool>,
    pub continues: bool,
}

impl UserResponse {
    pub fn leaves(&self) -> bool {
        !self.continues
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub r_ad: f64,
    pub r_fee: f64,
    pub feedback: Vec<PageRecord>,
    pub next_state: State,
    pub done: bool,
}

impl StepOutcome {
    pub fn reward(&self) -> f64 {
        self.r_ad + self.r_fee
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub episode_id: u64,
    pub t: usize,
    pub state: Arc<State>,
    pub action: Action,
    pub r_ad: f64,
    pub r_fee: f64,
    pub next_state: Arc<State>,
    pub done: bool,
}

impl Transition {
    pub fn reward(&self) -> f64 {
        self.r_ad + self.r_fee
    }
}

/// Summary of a generated log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LogStats {
    pub episodes: usize,
    pub transitions: usize,
    /// Mean untruncated history length per kind (order, click, pull-down,
    /// leave) over the logged states.
    pub mean_history_lengths: [f64; 4],
    pub mean_pages_per_episode: f64,
    /// Fraction of displayed pages with at least one click / order.
    pub click_page_rate: f64,
    pub order_page_rate: f64,
}

/// Transitions of one log plus its summary.
#[derive(Clone, Debug, PartialEq)]
pub struct OfflineLog {
    pub transitions: Vec<Transition>,
    pub stats: LogStats,
}

/// A policy sees the state, its feasible actions (non-empty) and a private
/// generator.
pub trait Policy {
    fn choose(&mut self, state: &State, feasible: &[Action], rng: &mut ChaCha8Rng) -> Result<Action, Error>;
}

/// Uniform over the feasible actions.
#[derive(Clone, Copy, Debug, Default)]
pub struct UniformPolicy;

impl Policy for UniformPolicy {
    fn choose(&mut self, _: &State, feasible: &[Action], rng: &mut ChaCha8Rng) -> Result<Action, Error> {
        Ok(feasible[rng.gen_range(0..feasible.len())].clone())
    }
}

impl<F> Policy for F
where
    F: FnMut(&State, &[Action], &mut ChaCha8Rng) -> Result<Action, Error>,
{
    fn choose(&mut self, state: &State, feasible: &[Action], rng: &mut ChaCha8Rng) -> Result<Action, Error> {
        self(state, feasible, rng)
    }
}

#[derive(Clone, Debug)]
pub struct Simulator {
    cfg: SimConfig,
    catalog: Catalog,
    users: Vec<SimUser>,
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn draw(rng: &mut ChaCha8Rng, r: Range) -> f64 {
    if r.lo == r.hi {
        r.lo
    } else {
        rng.gen_range(r.lo..=r.hi)
    }
}

impl Simulator {
    /// Builds the catalog and user population from `cfg.seed`.
    pub fn new(cfg: SimConfig) -> Result<Self, Error> {
        cfg.validate()?;
        let mut rng = episode_rng(cfg.seed, CATALOG_STREAM);
        let d = cfg.latent_dim;
        let latent = |rng: &mut ChaCha8Rng| (0..d).map(|_| rng.gen_range(-1.0..=1.0)).collect::<Vec<f64>>();
        let n = cfg.n_ads + cfg.n_organics;
        let mut catalog = Catalog {
            items: Vec::with_capacity(n),
            latents: Vec::with_capacity(n),
            order_rates: Vec::with_capacity(n),
        };
        for id in 0..n {
            let is_ad = id < cfg.n_ads;
            let price = draw(&mut rng, cfg.price);
            let fee_rate = draw(&mut rng, cfg.fee_rate);
            let bid = if is_ad { draw(&mut rng, cfg.bid) } else { 0.0 };
            catalog.items.push(Item {
                item_id: id as ItemId,
                is_ad,
                price,
                fee_rate,
                bid,
                category_id: rng.gen_range(0..8),
            });
            catalog.latents.push(latent(&mut rng));
            catalog.order_rates.push(draw(&mut rng, cfg.order_rate));
        }
        let users = (0..cfg.user_population)
            .map(|u| SimUser {
                profile: UserProfile {
                    user_id: u as u32,
                    segment: (u % cfg.user_segments as usize) as u8,
                    age_bucket: rng.gen_range(0..cfg.age_buckets),
                },
                latent: latent(&mut rng),
            })
            .collect();
        Ok(Self { cfg, catalog, users })
    }

    /// Replaces the generated catalog and users, e.g. for hand-built MDPs.
    pub fn with_world(cfg: SimConfig, catalog: Catalog, users: Vec<SimUser>) -> Result<Self, Error> {
        cfg.validate()?;
        let n = cfg.n_ads + cfg.n_organics;
        if catalog.items.len() != n || catalog.latents.len() != n || catalog.order_rates.len() != n {
            return Err(Error::Config(format!("catalog must have {n} items")));
        }
        if users.len() != cfg.user_population {
            return Err(Error::Config(format!("expected {} users", cfg.user_population)));
        }
        if catalog.latents.iter().chain(users.iter().map(|u| &u.latent)).any(|l| l.len() != cfg.latent_dim) {
            return Err(Error::Config("latent vectors must have sim.latent_dim entries".into()));
        }
        Ok(Self { cfg, catalog, users })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn layout(&self) -> PageLayout {
        self.cfg.layout()
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn users(&self) -> &[SimUser] {
        &self.users
    }

    pub fn item(&self, id: ItemId) -> Option<&Item> {
        self.catalog.items.get(id as usize)
    }

    /// Scaled latent dot product; zero for padding slots.
    pub fn affinity(&self, user: u32, item: ItemId) -> f64 {
        let (Some(u), Some(v)) = (self.users.get(user as usize), self.catalog.latents.get(item as usize)) else {
            return 0.0;
        };
        let dot: f64 = u.latent.iter().zip(v).map(|(a, b)| a * b).sum();
        self.cfg.affinity_scale * dot / (self.cfg.latent_dim as f64).sqrt()
    }

    /// Click, order and continue probabilities for `page` shown to `user`.
    pub fn response_probabilities(&self, page: &PageRecord, user: u32) -> ResponseProbabilities {
        let k = page.len();
        let aff: Vec<f64> = page.slots.iter().map(|s| self.affinity(user, s.item.item_id)).collect();
        let is_ad = page.ad_bits();
        let click = (0..k)
            .map(|i| {
                let lo = i.saturating_sub(1);
                let hi = (i + 1).min(k - 1);
                let window: f64 = aff[lo..=hi].iter().sum();
                let adjacent_ads = (lo..=hi).filter(|&j| j != i && is_ad[j]).count() as f64;
                logistic(self.cfg.click_bias + aff[i] + self.cfg.interaction_strength * window - self.cfg.ad_fatigue * adjacent_ads)
            })
            .collect();
        let order_given_click = page
            .slots
            .iter()
            .map(|s| self.catalog.order_rates.get(s.item.item_id as usize).copied().unwrap_or(0.0))
            .collect();
        let ads = is_ad.iter().filter(|&&b| b).count() as f64;
        let continue_prob = self.cfg.pulldown_base * (1.0 - self.cfg.ad_share_penalty * ads / k.max(1) as f64);
        ResponseProbabilities {
            click,
            order_given_click,
            continue_prob,
        }
    }

    /// Samples feedback on `page`. Always consumes `2K + 1` uniforms (click
    /// per slot, order per slot, continue) so that different arrangements
    /// see common random numbers.
    pub fn user_response(&self, page: &PageRecord, user: u32, rng: &mut ChaCha8Rng) -> UserResponse {
        let p = self.response_probabilities(page, user);
        let k = page.len();
        let u_click: Vec<f64> = (0..k).map(|_| rng.gen::<f64>()).collect();
        let u_order: Vec<f64> = (0..k).map(|_| rng.gen::<f64>()).collect();
        let u_cont: f64 = rng.gen();
        let clicks: Vec<bool> = (0..k).map(|i| u_click[i] < p.click[i]).collect();
        let orders = (0..k).map(|i| clicks[i] && u_order[i] < p.order_given_click[i]).collect();
        UserResponse {
            clicks,
            orders,
            continues: u_cont < p.continue_prob,
        }
    }

    /// Applies `action` with a freshly sampled response.
    pub fn step(&self, state: &State, action: &Action, rng: &mut ChaCha8Rng) -> Result<StepOutcome, Error> {
        let page = cross_target(state, action, &self.layout())?;
        let response = self.user_response(&page, state.user.user_id, rng);
        let mut outcome = self.apply(state, action, &response)?;
        if self.cfg.expected_rewards {
            (outcome.r_ad, outcome.r_fee) = self.expected_reward(&page, state.user.user_id);
        }
        Ok(outcome)
    }

    /// Mean `(r_ad, r_fee)` of showing `page` to `user`.
    pub fn expected_reward(&self, page: &PageRecord, user: u32) -> (f64, f64) {
        let p = self.response_probabilities(page, user);
        let mut r_ad = 0.0;
        let mut r_fee = 0.0;
        for (i, slot) in page.slots.iter().enumerate() {
            if slot.item.is_ad {
                r_ad += p.click[i] * slot.item.bid;
            }
            r_fee += p.click[i] * p.order_given_click[i] * slot.item.fee_rate * slot.item.price;
        }
        (r_ad, r_fee)
    }

    /// Deterministic part of a step given the user's response.
    pub fn apply(&self, state: &State, action: &Action, response: &UserResponse) -> Result<StepOutcome, Error> {
        let layout = self.layout();
        let page = cross_target(state, action, &layout)?;
        if response.clicks.len() != page.len() || response.orders.len() != page.len() {
            return Err(Error::Config("response length differs from the page".into()));
        }
        let mut r_ad = 0.0;
        let mut r_fee = 0.0;
        for (i, slot) in page.slots.iter().enumerate() {
            if response.clicks[i] && slot.item.is_ad {
                r_ad += slot.item.bid;
            }
            if response.orders[i] {
                r_fee += slot.item.fee_rate * slot.item.price;
            }
        }

        let mut next = state.clone();
        let n_ads = action.ad_count();
        next.ads.drain(..n_ads);
        next.organics.drain(..layout.slots - n_ads);
        next.page_index += 1;
        let done = response.leaves()
            || next.page_index >= self.cfg.max_pages
            || feasible_actions(&next, &layout).is_empty();

        let mut feedback = Vec::new();
        if response.orders.iter().any(|&o| o) {
            feedback.push(page.with_kind(FeedbackKind::Order));
        }
        if response.clicks.iter().any(|&c| c) {
            feedback.push(page.with_kind(FeedbackKind::Click));
        }
        feedback.push(page.with_kind(if done { FeedbackKind::Leave } else { FeedbackKind::PullDown }));
        for record in &feedback {
            push_history(&mut next, record.clone(), self.cfg.history_keep);
        }
        next.terminal = done;
        Ok(StepOutcome {
            r_ad,
            r_fee,
            feedback,
            next_state: next,
            done,
        })
    }

    fn candidates(&self, user: u32, rng: &mut ChaCha8Rng) -> (Vec<Item>, Vec<Item>) {
        let items = &self.catalog.items;
        if let Some(fixed) = &self.cfg.fixed_candidates {
            let pick = |ids: &[u32]| ids.iter().map(|&id| items[id as usize].clone()).collect();
            return (pick(&fixed.ads), pick(&fixed.organics));
        }
        let mut ads: Vec<Item> = sample(rng, self.cfg.n_ads, self.cfg.ads_per_request)
            .into_iter()
            .map(|i| items[i].clone())
            .collect();
        ads.sort_by(|a, b| b.bid.total_cmp(&a.bid).then(a.item_id.cmp(&b.item_id)));
        let mut organics: Vec<(f64, Item)> = sample(rng, self.cfg.n_organics, self.cfg.organics_per_request)
            .into_iter()
            .map(|i| {
                let item = items[self.cfg.n_ads + i].clone();
                (self.affinity(user, item.item_id), item)
            })
            .collect();
        organics.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.item_id.cmp(&b.1.item_id)));
        (ads, organics.into_iter().map(|(_, it)| it).collect())
    }

    /// Draws the user, context and candidates of a new request; the user's
    /// remembered pages become the state's history.
    pub fn start_request(&self, rng: &mut ChaCha8Rng, book: &HistoryBook) -> State {
        let user = rng.gen_range(0..self.users.len()) as u32;
        self.start_request_for(user, rng, book)
    }

    pub fn start_request_for(&self, user: u32, rng: &mut ChaCha8Rng, book: &HistoryBook) -> State {
        let context = Context {
            time_bucket: rng.gen_range(0..self.cfg.time_buckets),
            location_bucket: rng.gen_range(0..self.cfg.location_buckets),
        };
        let (ads, organics) = self.candidates(user, rng);
        let (histories, history_totals) = book.histories_for(user, self.cfg.history_keep);
        let mut state = State {
            ads,
            organics,
            user: self.users[user as usize].profile,
            context,
            histories,
            history_totals,
            page_index: 0,
            terminal: false,
        };
        state.terminal = feasible_actions(&state, &self.layout()).is_empty();
        state
    }

    /// Plays one request to the end. Returns its transitions in order and
    /// records the shown pages in `book`.
    pub fn run_episode<P: Policy + ?Sized>(
        &self,
        seed: u64,
        episode_id: u64,
        book: &mut HistoryBook,
        policy: &mut P,
    ) -> Result<Vec<Transition>, Error> {
        let mut rng = episode_rng(seed, episode_id);
        let mut policy_rng = episode_rng(seed ^ POLICY_SALT, episode_id);
        let state = self.start_request(&mut rng, book);
        self.play(state, episode_id, &mut rng, &mut policy_rng, book, policy)
    }

    fn play<P: Policy + ?Sized>(
        &self,
        state: State,
        episode_id: u64,
        rng: &mut ChaCha8Rng,
        policy_rng: &mut ChaCha8Rng,
        book: &mut HistoryBook,
        policy: &mut P,
    ) -> Result<Vec<Transition>, Error> {
        let layout = self.layout();
        let user = state.user.user_id;
        let mut state = Arc::new(state);
        let mut out = Vec::new();
        let mut pages = Histories::default();
        while !state.terminal {
            let feasible = feasible_actions(&state, &layout);
            let action = policy.choose(&state, &feasible, policy_rng)?;
            let outcome = self.step(&state, &action, rng)?;
            for record in outcome.feedback {
                if let Some(seq) = pages.get_mut(record.kind) {
                    seq.push(record);
                }
            }
            let next = Arc::new(outcome.next_state);
            out.push(Transition {
                episode_id,
                t: out.len(),
                state: Arc::clone(&state),
                action,
                r_ad: outcome.r_ad,
                r_fee: outcome.r_fee,
                next_state: Arc::clone(&next),
                done: outcome.done,
            });
            state = next;
        }
        book.record(user, pages, self.cfg.history_window);
        Ok(out)
    }

    /// Gives every user `warmup_episodes` unlogged requests under `policy`.
    pub fn warm_up<P: Policy + ?Sized>(&self, seed: u64, book: &mut HistoryBook, policy: &mut P) -> Result<(), Error> {
        let mut stream = WARMUP_STREAM_BASE;
        for _ in 0..self.cfg.warmup_episodes {
            for user in 0..self.users.len() as u32 {
                let mut rng = episode_rng(seed, stream);
                let mut policy_rng = episode_rng(seed ^ POLICY_SALT, stream);
                let state = self.start_request_for(user, &mut rng, book);
                self.play(state, stream, &mut rng, &mut policy_rng, book, policy)?;
                stream += 1;
            }
        }
        Ok(())
    }

    /// Warms up the histories, then logs `n_requests` full episodes.
    pub fn generate_offline_log<P: Policy + ?Sized>(&self, policy: &mut P, n_requests: usize) -> Result<OfflineLog, Error> {
        let seed = self.cfg.seed;
        let mut book = HistoryBook::new(self.users.len());
        self.warm_up(seed, &mut book, policy)?;
        let mut transitions = Vec::new();
        for episode in 0..n_requests as u64 {
            transitions.extend(self.run_episode(seed, episode, &mut book, policy)?);
        }
        let stats = log_stats(&transitions, n_requests);
        Ok(OfflineLog { transitions, stats })
    }
}

fn push_history(state: &mut State, record: PageRecord, keep: usize) {
    let kind = record.kind;
    if let Some(seq) = state.histories.get_mut(kind) {
        seq.push(record);
        if seq.len() > keep {
            let excess = seq.len() - keep;
            seq.drain(..excess);
        }
        state.history_totals[kind.index()] += 1;
    }
}

pub fn log_stats(transitions: &[Transition], episodes: usize) -> LogStats {
    let n = transitions.len();
    let mut stats = LogStats {
        episodes,
        transitions: n,
        ..LogStats::default()
    };
    if n == 0 {
        return stats;
    }
    let mut clicks = 0usize;
    let mut orders = 0usize;
    for t in transitions {
        for k in 0..4 {
            stats.mean_history_lengths[k] += t.state.history_totals[k] as f64;
        }
        let grew = |k: FeedbackKind| t.next_state.history_totals[k.index()] > t.state.history_totals[k.index()];
        clicks += grew(FeedbackKind::Click) as usize;
        orders += grew(FeedbackKind::Order) as usize;
    }
    for m in &mut stats.mean_history_lengths {
        *m /= n as f64;
    }
    stats.mean_pages_per_episode = n as f64 / episodes.max(1) as f64;
    stats.click_page_rate = clicks as f64 / n as f64;
    stats.order_page_rate = orders as f64 / n as f64;
    stats
}

/// Pages each user saw in their most recent requests.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HistoryBook {
    users: Vec<VecDeque<Histories>>,
}

impl HistoryBook {
    pub fn new(users: usize) -> Self {
        Self {
            users: vec![VecDeque::new(); users],
        }
    }

    /// Histories over the remembered requests, oldest first, cut to the
    /// `keep` most recent pages per kind, plus the untruncated counts.
    pub fn histories_for(&self, user: u32, keep: usize) -> (Histories, [usize; 4]) {
        let mut out = Histories::default();
        let mut totals = [0; 4];
        let Some(episodes) = self.users.get(user as usize) else {
            return (out, totals);
        };
        for kind in FeedbackKind::HISTORY {
            let all: Vec<&PageRecord> = episodes.iter().flat_map(|h| h.get(kind)).collect();
            totals[kind.index()] = all.len();
            let seq = out.get_mut(kind).expect("history kind");
            seq.extend(all[all.len().saturating_sub(keep)..].iter().map(|&p| p.clone()));
        }
        (out, totals)
    }

    pub fn record(&mut self, user: u32, pages: Histories, window: usize) {
        let Some(episodes) = self.users.get_mut(user as usize) else {
            return;
        };
        if window == 0 {
            return;
        }
        episodes.push_back(pages);
        while episodes.len() > window {
            episodes.pop_front();
        }
    }
}

/// State reached after `action` when the episode ends there: items removed,
/// the page logged as the final one.
pub fn terminal_successor(state: &State, action: &Action, layout: &PageLayout, keep: usize) -> Result<State, FeasibilityError> {
    let page = cross_target(state, action, layout)?;
    let mut next = state.clone();
    let n_ads = action.ad_count();
    next.ads.drain(..n_ads);
    next.organics.drain(..layout.slots - n_ads);
    next.page_index += 1;
    push_history(&mut next, page.with_kind(FeedbackKind::Leave), keep);
    next.terminal = true;
    Ok(next)
}

#[cfg(test)]
mod tests;
