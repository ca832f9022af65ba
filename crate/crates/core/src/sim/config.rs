use serde::{Deserialize, Serialize};

use crate::features::PageLayout;
use crate::Error;

/// Inclusive `[lo, hi]` range for catalog draws.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn check(&self, name: &str, min: f64, max: f64) -> Result<(), Error> {
        let ok = self.lo.is_finite() && self.hi.is_finite() && min <= self.lo && self.lo <= self.hi && self.hi <= max;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "sim.{name} = [{}, {}] must satisfy {min} <= lo <= hi <= {max}",
                self.lo, self.hi
            )))
        }
    }
}

/// A request whose candidate lists are fixed (tiny enumerable MDPs).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedCandidates {
    /// Ad ids in ranked order.
    pub ads: Vec<u32>,
    /// Organic item ids in ranked order.
    pub organics: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Slots per page `K`.
    pub slots: usize,
    pub max_pages: usize,
    pub max_ads_per_page: usize,
    pub user_population: usize,
    /// Catalog sizes. Ads take ids `0..n_ads`, organic items the next
    /// `n_organics` ids.
    pub n_ads: usize,
    pub n_organics: usize,
    /// Candidates drawn per request.
    pub ads_per_request: usize,
    pub organics_per_request: usize,
    /// Weight on the affinities of the slot and its direct neighbours.
    pub interaction_strength: f64,
    /// Logit penalty per ad in a neighbouring slot.
    pub ad_fatigue: f64,
    /// Continue probability of a page without ads.
    pub pulldown_base: f64,
    /// Relative drop of the continue probability on a page full of ads.
    pub ad_share_penalty: f64,
    /// Constant added to every click logit.
    pub click_bias: f64,
    /// Scale of the user-item latent dot product.
    pub affinity_scale: f64,
    pub latent_dim: usize,
    pub bid: Range,
    pub price: Range,
    pub fee_rate: Range,
    pub order_rate: Range,
    pub user_segments: u8,
    pub age_buckets: u8,
    pub time_buckets: u8,
    pub location_buckets: u8,
    /// Past episodes of the same user whose pages form the history.
    pub history_window: usize,
    /// Most recent pages per kind kept in a state.
    pub history_keep: usize,
    /// Unlogged episodes per user that fill the history before logging.
    pub warmup_episodes: usize,
    pub fixed_candidates: Option<FixedCandidates>,
    /// Report each step's expected reward given the page instead of the
    /// sampled one. Dynamics and feedback stay sampled, `Q*` is unchanged.
    pub expected_rewards: bool,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            slots: 5,
            max_pages: 4,
            max_ads_per_page: 2,
            user_population: 100,
            n_ads: 120,
            n_organics: 600,
            ads_per_request: 8,
            organics_per_request: 20,
            interaction_strength: 0.5,
            ad_fatigue: 1.0,
            pulldown_base: 0.98,
            ad_share_penalty: 0.1,
            click_bias: -3.0,
            affinity_scale: 1.0,
            latent_dim: 4,
            bid: Range::new(0.5, 2.0),
            price: Range::new(5.0, 40.0),
            fee_rate: Range::new(0.01, 0.05),
            order_rate: Range::new(0.2, 0.6),
            user_segments: 8,
            age_buckets: 4,
            time_buckets: 4,
            location_buckets: 4,
            history_window: 13,
            history_keep: 10,
            warmup_episodes: 13,
            fixed_candidates: None,
            expected_rewards: false,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn layout(&self) -> PageLayout {
        PageLayout {
            slots: self.slots,
            max_ads_per_page: self.max_ads_per_page,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.slots == 0 || self.slots > 16 {
            return bad(format!("sim.slots = {} must be in 1..=16", self.slots));
        }
        if self.max_ads_per_page == 0 || self.max_ads_per_page > self.slots {
            return bad(format!(
                "sim.max_ads_per_page = {} must be in 1..={}",
                self.max_ads_per_page, self.slots
            ));
        }
        if self.max_pages == 0 || self.user_population == 0 || self.latent_dim == 0 {
            return bad("sim.max_pages, sim.user_population and sim.latent_dim must be positive".into());
        }
        if self.user_segments == 0 || self.age_buckets == 0 || self.time_buckets == 0 || self.location_buckets == 0 {
            return bad("sim bucket counts must be positive".into());
        }
        for (name, p) in [("pulldown_base", self.pulldown_base), ("ad_share_penalty", self.ad_share_penalty)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("sim.{name} = {p} must be in [0, 1]"));
            }
        }
        for (name, x) in [
            ("interaction_strength", self.interaction_strength),
            ("ad_fatigue", self.ad_fatigue),
            ("click_bias", self.click_bias),
            ("affinity_scale", self.affinity_scale),
        ] {
            if !x.is_finite() {
                return bad(format!("sim.{name} must be finite"));
            }
        }
        if self.ad_fatigue < 0.0 {
            return bad("sim.ad_fatigue must be >= 0".into());
        }
        self.bid.check("bid", 0.0, f64::MAX)?;
        self.price.check("price", 0.0, f64::MAX)?;
        self.fee_rate.check("fee_rate", 0.0, 1.0)?;
        self.order_rate.check("order_rate", 0.0, 1.0)?;
        match &self.fixed_candidates {
            Some(fixed) => {
                let n = (self.n_ads + self.n_organics) as u32;
                let ads_ok = fixed.ads.iter().all(|&id| (id as usize) < self.n_ads);
                let org_ok = fixed.organics.iter().all(|&id| (id as usize) >= self.n_ads && id < n);
                if !ads_ok || !org_ok {
                    return bad("sim.fixed_candidates ids must be ads (< n_ads) and organics (>= n_ads) of the catalog".into());
                }
                let mut all: Vec<u32> = fixed.ads.iter().chain(&fixed.organics).copied().collect();
                all.sort_unstable();
                if all.windows(2).any(|w| w[0] == w[1]) {
                    return bad("sim.fixed_candidates contains duplicates".into());
                }
            }
            None => {
                if self.ads_per_request > self.n_ads || self.organics_per_request > self.n_organics {
                    return bad("sim.*_per_request exceeds the catalog size".into());
                }
            }
        }
        Ok(())
    }
}
