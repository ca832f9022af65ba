//! Items, page records, states and actions, and the embedding layer that
//! turns them into page matrices.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{NnError, ParamSet, Tape, Tensor, Var};

pub type ItemId = u32;

/// Id of the reserved item that fills padding pages.
pub const NULL_ITEM: ItemId = ItemId::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: ItemId,
    pub is_ad: bool,
    pub price: f64,
    /// Service-fee fraction charged on an order.
    pub fee_rate: f64,
    /// Revenue per click; zero for organic items.
    pub bid: f64,
    pub category_id: u32,
}

impl Item {
    pub fn null() -> Self {
        Self {
            item_id: NULL_ITEM,
            is_ad: false,
            price: 0.0,
            fee_rate: 0.0,
            bid: 0.0,
            category_id: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeedbackKind {
    Order,
    Click,
    PullDown,
    Leave,
    /// The page being scored; it has no feedback yet.
    TargetNone,
}

impl FeedbackKind {
    pub const HISTORY: [FeedbackKind; 4] = [
        FeedbackKind::Order,
        FeedbackKind::Click,
        FeedbackKind::PullDown,
        FeedbackKind::Leave,
    ];

    pub fn index(self) -> usize {
        match self {
            FeedbackKind::Order => 0,
            FeedbackKind::Click => 1,
            FeedbackKind::PullDown => 2,
            FeedbackKind::Leave => 3,
            FeedbackKind::TargetNone => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeedbackKind::Order => "order",
            FeedbackKind::Click => "click",
            FeedbackKind::PullDown => "pulldown",
            FeedbackKind::Leave => "leave",
            FeedbackKind::TargetNone => "target",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub item: Item,
    /// 1-based slot position on the page.
    pub position: usize,
}

/// One page as the user saw it, tagged with the feedback it produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PageRecord {
    pub slots: Vec<Slot>,
    pub kind: FeedbackKind,
    pub is_padding: bool,
}

impl PageRecord {
    pub fn new(items: Vec<Item>, kind: FeedbackKind) -> Self {
        let slots = items
            .into_iter()
            .enumerate()
            .map(|(i, item)| Slot { item, position: i + 1 })
            .collect();
        Self {
            slots,
            kind,
            is_padding: false,
        }
    }

    pub fn padding(slots: usize, kind: FeedbackKind) -> Self {
        Self {
            is_padding: true,
            ..Self::new(vec![Item::null(); slots], kind)
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn with_kind(&self, kind: FeedbackKind) -> Self {
        Self { kind, ..self.clone() }
    }

    pub fn item_ids(&self) -> Vec<ItemId> {
        self.slots.iter().map(|s| s.item.item_id).collect()
    }

    /// `true` where the slot holds an ad.
    pub fn ad_bits(&self) -> Vec<bool> {
        self.slots.iter().map(|s| s.item.is_ad).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: u32,
    pub segment: u8,
    pub age_bucket: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Context {
    pub time_bucket: u8,
    pub location_bucket: u8,
}

/// Page-level history sequences, oldest first.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Histories {
    pub order: Vec<PageRecord>,
    pub click: Vec<PageRecord>,
    pub pulldown: Vec<PageRecord>,
    pub leave: Vec<PageRecord>,
}

impl Histories {
    pub fn get(&self, kind: FeedbackKind) -> &[PageRecord] {
        match kind {
            FeedbackKind::Order => &self.order,
            FeedbackKind::Click => &self.click,
            FeedbackKind::PullDown => &self.pulldown,
            FeedbackKind::Leave => &self.leave,
            FeedbackKind::TargetNone => &[],
        }
    }

    pub fn get_mut(&mut self, kind: FeedbackKind) -> Option<&mut Vec<PageRecord>> {
        match kind {
            FeedbackKind::Order => Some(&mut self.order),
            FeedbackKind::Click => Some(&mut self.click),
            FeedbackKind::PullDown => Some(&mut self.pulldown),
            FeedbackKind::Leave => Some(&mut self.leave),
            FeedbackKind::TargetNone => None,
        }
    }

    pub fn lengths(&self) -> [usize; 4] {
        FeedbackKind::HISTORY.map(|k| self.get(k).len())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub ads: Vec<Item>,
    pub organics: Vec<Item>,
    pub user: UserProfile,
    pub context: Context,
    pub histories: Histories,
    /// Untruncated history lengths (the stored lists may keep fewer pages).
    pub history_totals: [usize; 4],
    pub page_index: usize,
    pub terminal: bool,
}

/// Slot layout shared by the simulator and the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageLayout {
    pub slots: usize,
    pub max_ads_per_page: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Action {
    bits: Vec<bool>,
}

impl Action {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    /// Slot `k` (0-based) is bit `k` of `code`.
    pub fn from_code(code: u32, slots: usize) -> Self {
        Self {
            bits: (0..slots).map(|k| code >> k & 1 == 1).collect(),
        }
    }

    pub fn from_str_bits(s: &str) -> Option<Self> {
        s.chars()
            .map(|c| match c {
                '1' => Some(true),
                '0' => Some(false),
                _ => None,
            })
            .collect::<Option<Vec<_>>>()
            .map(Self::new)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn code(&self) -> u32 {
        self.bits
            .iter()
            .enumerate()
            .map(|(k, &b)| (b as u32) << k)
            .sum()
    }

    pub fn ad_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn check_feasible(&self, state: &State, layout: &PageLayout) -> Result<(), FeasibilityError> {
        if state.terminal {
            return Err(FeasibilityError::Terminal);
        }
        if self.bits.len() != layout.slots {
            return Err(FeasibilityError::WrongLength {
                got: self.bits.len(),
                slots: layout.slots,
            });
        }
        let ads = self.ad_count();
        if ads > layout.max_ads_per_page {
            return Err(FeasibilityError::TooManyAdsPerPage {
                requested: ads,
                limit: layout.max_ads_per_page,
            });
        }
        if ads > state.ads.len() {
            return Err(FeasibilityError::NotEnoughAds {
                requested: ads,
                available: state.ads.len(),
            });
        }
        let organics = layout.slots - ads;
        if organics > state.organics.len() {
            return Err(FeasibilityError::NotEnoughOrganics {
                requested: organics,
                available: state.organics.len(),
            });
        }
        Ok(())
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FeasibilityError {
    #[error("action has {got} bits but the page has {slots} slots")]
    WrongLength { got: usize, slots: usize },
    #[error("action places {requested} ads but at most {limit} are allowed per page")]
    TooManyAdsPerPage { requested: usize, limit: usize },
    #[error("action places {requested} ads but only {available} remain")]
    NotEnoughAds { requested: usize, available: usize },
    #[error("action needs {requested} organic items but only {available} remain")]
    NotEnoughOrganics { requested: usize, available: usize },
    #[error("state is terminal")]
    Terminal,
}

/// Keeps the `n` most recent records and front-pads with padding pages.
/// The mask is `true` exactly for real records.
pub fn truncate_or_pad(seq: &[PageRecord], n: usize, slots: usize) -> (Vec<PageRecord>, Vec<bool>) {
    let n = n.max(1);
    let keep = seq.len().min(n);
    let pad = n - keep;
    let kind = seq.first().map_or(FeedbackKind::PullDown, |p| p.kind);
    let mut out = Vec::with_capacity(n);
    out.extend((0..pad).map(|_| PageRecord::padding(slots, kind)));
    out.extend_from_slice(&seq[seq.len() - keep..]);
    let mask = (0..n).map(|i| i >= pad).collect();
    (out, mask)
}

/// Interleaves candidates according to `action`: ad slots take the next
/// unused ad, the others the next unused organic item.
pub fn cross_target(state: &State, action: &Action, layout: &PageLayout) -> Result<PageRecord, FeasibilityError> {
    action.check_feasible(state, layout)?;
    let (mut ads, mut organics) = (state.ads.iter(), state.organics.iter());
    let items = action
        .bits()
        .iter()
        .map(|&is_ad| {
            let next = if is_ad { ads.next() } else { organics.next() };
            next.cloned().expect("feasibility checked")
        })
        .collect();
    Ok(PageRecord::new(items, FeedbackKind::TargetNone))
}

/// Embedding dimensions and vocabulary sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingConfig {
    pub d_item: usize,
    pub d_pos: usize,
    pub d_fb: usize,
    /// Width of each user / context categorical embedding.
    pub d_categorical: usize,
    /// Known item ids are `0..item_vocab`; anything else uses the OOV row.
    pub item_vocab: usize,
    pub user_segments: usize,
    pub age_buckets: usize,
    pub time_buckets: usize,
    pub location_buckets: usize,
    pub page_buckets: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            d_item: 8,
            d_pos: 4,
            d_fb: 4,
            d_categorical: 4,
            item_vocab: 1024,
            user_segments: 8,
            age_buckets: 4,
            time_buckets: 4,
            location_buckets: 4,
            page_buckets: 8,
        }
    }
}

impl EmbeddingConfig {
    /// Per-slot embedding width `d`.
    pub fn page_width(&self) -> usize {
        self.d_item + self.d_pos + self.d_fb
    }

    pub fn user_width(&self) -> usize {
        2 * self.d_categorical
    }

    pub fn context_width(&self) -> usize {
        3 * self.d_categorical
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let dims = [
            self.d_item,
            self.d_pos,
            self.d_fb,
            self.d_categorical,
            self.user_segments,
            self.age_buckets,
            self.time_buckets,
            self.location_buckets,
            self.page_buckets,
        ];
        if dims.contains(&0) {
            return Err(NnError::Config("embedding dims and vocabularies must be positive".into()));
        }
        Ok(())
    }
}

/// Embedding layer. Tables are parameters named `emb.*`.
///
/// An item's embedding is its id row plus a shared ad/organic row; unknown
/// ids fall back to a dedicated out-of-vocabulary row.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTables {
    cfg: EmbeddingConfig,
    slots: usize,
}

const ITEM: &str = "emb.item";
const ITEM_KIND: &str = "emb.item_kind";
const POSITION: &str = "emb.position";
const FEEDBACK: &str = "emb.feedback";
const SEGMENT: &str = "emb.user.segment";
const AGE: &str = "emb.user.age";
const TIME: &str = "emb.ctx.time";
const LOCATION: &str = "emb.ctx.location";
const PAGE: &str = "emb.ctx.page";

impl EmbeddingTables {
    pub fn new(cfg: EmbeddingConfig, slots: usize) -> Result<Self, NnError> {
        cfg.validate()?;
        if slots == 0 {
            return Err(NnError::Config("a page needs at least one slot".into()));
        }
        Ok(Self { cfg, slots })
    }

    pub fn config(&self) -> &EmbeddingConfig {
        &self.cfg
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn page_width(&self) -> usize {
        self.cfg.page_width()
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet, rng: &mut R) -> Result<(), NnError> {
        let c = &self.cfg;
        params.insert_glorot(ITEM, c.item_vocab + 1, c.d_item, rng)?;
        params.insert_glorot(ITEM_KIND, 2, c.d_item, rng)?;
        params.insert_glorot(POSITION, self.slots, c.d_pos, rng)?;
        params.insert_glorot(FEEDBACK, 5, c.d_fb, rng)?;
        params.insert_glorot(SEGMENT, c.user_segments, c.d_categorical, rng)?;
        params.insert_glorot(AGE, c.age_buckets, c.d_categorical, rng)?;
        params.insert_glorot(TIME, c.time_buckets, c.d_categorical, rng)?;
        params.insert_glorot(LOCATION, c.location_buckets, c.d_categorical, rng)?;
        params.insert_glorot(PAGE, c.page_buckets, c.d_categorical, rng)?;
        Ok(())
    }

    fn item_row(&self, id: ItemId) -> usize {
        if (id as usize) < self.cfg.item_vocab {
            id as usize
        } else {
            self.cfg.item_vocab
        }
    }

    /// `K x d` page matrix; row `k` is item ∥ position ∥ feedback.
    /// Padding pages give the zero matrix.
    pub fn embed_page<'a>(&self, tape: &mut Tape<'a>, params: &'a ParamSet, page: &PageRecord) -> Result<Var, NnError> {
        if page.slots.len() != self.slots {
            return Err(NnError::Shape {
                op: "embed_page",
                left: (page.slots.len(), 1),
                right: (self.slots, 1),
            });
        }
        if page.is_padding {
            return Ok(tape.constant(Tensor::zeros(self.slots, self.page_width())));
        }
        let ids: Vec<usize> = page.slots.iter().map(|s| self.item_row(s.item.item_id)).collect();
        let kinds: Vec<usize> = page.slots.iter().map(|s| s.item.is_ad as usize).collect();
        let positions: Vec<usize> = page
            .slots
            .iter()
            .map(|s| s.position.clamp(1, self.slots) - 1)
            .collect();
        let feedback = vec![page.kind.index(); self.slots];

        let item_table = tape.param(params, ITEM)?;
        let kind_table = tape.param(params, ITEM_KIND)?;
        let pos_table = tape.param(params, POSITION)?;
        let fb_table = tape.param(params, FEEDBACK)?;
        let id_rows = tape.select_rows(item_table, &ids)?;
        let kind_rows = tape.select_rows(kind_table, &kinds)?;
        let items = tape.add(id_rows, kind_rows)?;
        let pos = tape.select_rows(pos_table, &positions)?;
        let fb = tape.select_rows(fb_table, &feedback)?;
        tape.concat_cols(&[items, pos, fb])
    }

    /// `e^u`: segment ∥ age bucket.
    pub fn user_embedding<'a>(&self, tape: &mut Tape<'a>, params: &'a ParamSet, user: &UserProfile) -> Result<Var, NnError> {
        let seg = self.lookup(tape, params, SEGMENT, user.segment as usize, self.cfg.user_segments)?;
        let age = self.lookup(tape, params, AGE, user.age_bucket as usize, self.cfg.age_buckets)?;
        tape.concat_cols(&[seg, age])
    }

    /// `e^c`: time bucket ∥ location bucket ∥ page index bucket.
    pub fn context_embedding<'a>(
        &self,
        tape: &mut Tape<'a>,
        params: &'a ParamSet,
        context: &Context,
        page_index: usize,
    ) -> Result<Var, NnError> {
        let time = self.lookup(tape, params, TIME, context.time_bucket as usize, self.cfg.time_buckets)?;
        let loc = self.lookup(tape, params, LOCATION, context.location_bucket as usize, self.cfg.location_buckets)?;
        let page = self.lookup(tape, params, PAGE, page_index, self.cfg.page_buckets)?;
        tape.concat_cols(&[time, loc, page])
    }

    fn lookup<'a>(
        &self,
        tape: &mut Tape<'a>,
        params: &'a ParamSet,
        table: &str,
        index: usize,
        size: usize,
    ) -> Result<Var, NnError> {
        let t = tape.param(params, table)?;
        tape.select_rows(t, &[index.min(size - 1)])
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn item(id: ItemId, is_ad: bool) -> Item {
        Item {
            item_id: id,
            is_ad,
            price: 10.0,
            fee_rate: 0.1,
            bid: if is_ad { 1.0 } else { 0.0 },
            category_id: 0,
        }
    }

    pub(crate) fn state(n_ads: u32, n_organics: u32) -> State {
        State {
            ads: (0..n_ads).map(|i| item(100 + i, true)).collect(),
            organics: (0..n_organics).map(|i| item(i, false)).collect(),
            user: UserProfile {
                user_id: 0,
                segment: 1,
                age_bucket: 2,
            },
            context: Context {
                time_bucket: 0,
                location_bucket: 1,
            },
            histories: Histories::default(),
            history_totals: [0; 4],
            page_index: 0,
            terminal: false,
        }
    }

    fn pages(n: usize) -> Vec<PageRecord> {
        (0..n)
            .map(|i| PageRecord::new(vec![item(i as u32, false); 3], FeedbackKind::PullDown))
            .collect()
    }

    #[test]
    fn truncate_keeps_most_recent() {
        let seq = pages(39);
        let (out, mask) = truncate_or_pad(&seq, 10, 3);
        assert_eq!(out.len(), 10);
        assert!(mask.iter().all(|&m| m));
        assert_eq!(out[0], seq[29]);
        assert_eq!(out[9], seq[38]);

        let seq = pages(10);
        let (out, mask) = truncate_or_pad(&seq, 10, 3);
        assert_eq!(out, seq);
        assert!(mask.iter().all(|&m| m));
    }

    #[test]
    fn pad_goes_in_front() {
        let seq = pages(4);
        let (out, mask) = truncate_or_pad(&seq, 10, 3);
        assert_eq!(mask, [vec![false; 6], vec![true; 4]].concat());
        assert!(out[..6].iter().all(|p| p.is_padding && p.slots.iter().all(|s| s.item.item_id == NULL_ITEM)));
        assert_eq!(&out[6..], &seq[..]);

        let (out, mask) = truncate_or_pad(&[], 3, 5);
        assert_eq!(out.len(), 3);
        assert!(mask.iter().all(|&m| !m));
    }

    #[test]
    fn cross_target_examples() {
        let layout = PageLayout {
            slots: 5,
            max_ads_per_page: 5,
        };
        let s = state(6, 6);
        let page = cross_target(&s, &Action::new(vec![false; 5]), &layout).unwrap();
        assert_eq!(page.item_ids(), vec![0, 1, 2, 3, 4]);
        assert_eq!(page.kind, FeedbackKind::TargetNone);

        let page = cross_target(&s, &Action::new(vec![true; 5]), &layout).unwrap();
        assert_eq!(page.item_ids(), vec![100, 101, 102, 103, 104]);

        let a = Action::from_str_bits("10100").unwrap();
        let page = cross_target(&s, &a, &layout).unwrap();
        assert_eq!(page.item_ids(), vec![100, 0, 101, 1, 2]);
        assert_eq!(page.ad_bits(), a.bits());
    }

    #[test]
    fn cross_target_feasibility_errors() {
        let layout = PageLayout {
            slots: 3,
            max_ads_per_page: 1,
        };
        let s = state(1, 1);
        let err = cross_target(&s, &Action::from_str_bits("110").unwrap(), &layout).unwrap_err();
        assert!(matches!(err, FeasibilityError::TooManyAdsPerPage { requested: 2, limit: 1 }));
        let err = cross_target(&s, &Action::from_str_bits("100").unwrap(), &layout).unwrap_err();
        assert!(matches!(err, FeasibilityError::NotEnoughOrganics { requested: 2, available: 1 }));
        let err = cross_target(&state(0, 3), &Action::from_str_bits("001").unwrap(), &layout).unwrap_err();
        assert!(matches!(err, FeasibilityError::NotEnoughAds { .. }));
        assert!(cross_target(&s, &Action::from_str_bits("10").unwrap(), &layout).is_err());
    }

    #[test]
    fn action_codes() {
        let a = Action::from_str_bits("100").unwrap();
        assert_eq!(a.code(), 1);
        assert_eq!(Action::from_code(4, 3).to_string(), "001");
        for code in 0..32 {
            assert_eq!(Action::from_code(code, 5).code(), code);
        }
    }

    fn tables() -> (EmbeddingTables, ParamSet) {
        let t = EmbeddingTables::new(
            EmbeddingConfig {
                item_vocab: 200,
                ..EmbeddingConfig::default()
            },
            3,
        )
        .unwrap();
        let mut p = ParamSet::new();
        t.init(&mut p, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        (t, p)
    }

    #[test]
    fn embed_page_shape_and_padding() {
        let (t, p) = tables();
        let mut tape = Tape::no_grad();
        let page = PageRecord::new(vec![item(1, false), item(101, true), item(5000, false)], FeedbackKind::Click);
        let e = t.embed_page(&mut tape, &p, &page).unwrap();
        assert_eq!(tape.shape(e), (3, 16));
        let pad = t.embed_page(&mut tape, &p, &PageRecord::padding(3, FeedbackKind::Order)).unwrap();
        assert!(tape.value(pad).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_item_rows_differ_only_in_position() {
        let (t, p) = tables();
        let mut tape = Tape::no_grad();
        let page = PageRecord::new(vec![item(7, false), item(7, false), item(8, false)], FeedbackKind::Leave);
        let e = t.embed_page(&mut tape, &p, &page).unwrap();
        let (r0, r1) = (tape.value(e).row(0).to_vec(), tape.value(e).row(1).to_vec());
        let d_item = t.config().d_item;
        let d_pos = t.config().d_pos;
        assert_eq!(r0[..d_item], r1[..d_item]);
        assert_eq!(r0[d_item + d_pos..], r1[d_item + d_pos..]);
        assert_ne!(r0[d_item..d_item + d_pos], r1[d_item..d_item + d_pos]);
    }

    #[test]
    fn unknown_items_share_oov_row() {
        let (t, p) = tables();
        let mut tape = Tape::no_grad();
        let a = PageRecord::new(vec![item(900, false), item(901, false), item(902, false)], FeedbackKind::Leave);
        let e = t.embed_page(&mut tape, &p, &a).unwrap();
        let v = tape.value(e);
        assert_eq!(v.row(0)[..8], v.row(1)[..8]);
    }
}
