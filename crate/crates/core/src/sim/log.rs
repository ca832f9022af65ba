//! Line-delimited JSON offline logs. Line 1 is a [`LogHeader`]; every other
//! line is one transition whose state is stored by item id.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{terminal_successor, Transition};
use crate::features::{Action, Context, FeedbackKind, Histories, Item, ItemId, PageLayout, PageRecord, State, UserProfile};
use crate::Error;

pub const LOG_SCHEMA: &str = "dpin-offline-log";
pub const LOG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogHeader {
    pub schema: String,
    pub version: u32,
    pub slots: usize,
    pub max_ads_per_page: usize,
    pub history_keep: usize,
    /// Indexed by item id.
    pub items: Vec<Item>,
    /// Indexed by user id.
    pub users: Vec<UserProfile>,
}

impl LogHeader {
    pub fn new(layout: PageLayout, history_keep: usize, items: Vec<Item>, users: Vec<UserProfile>) -> Self {
        Self {
            schema: LOG_SCHEMA.to_string(),
            version: LOG_VERSION,
            slots: layout.slots,
            max_ads_per_page: layout.max_ads_per_page,
            history_keep,
            items,
            users,
        }
    }

    pub fn layout(&self) -> PageLayout {
        PageLayout {
            slots: self.slots,
            max_ads_per_page: self.max_ads_per_page,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HistorySnapshot {
    order: Vec<Vec<ItemId>>,
    click: Vec<Vec<ItemId>>,
    pulldown: Vec<Vec<ItemId>>,
    leave: Vec<Vec<ItemId>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateSnapshot {
    ads: Vec<ItemId>,
    organics: Vec<ItemId>,
    user_id: u32,
    context: Context,
    histories: HistorySnapshot,
    history_totals: [usize; 4],
    page_index: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    episode_id: u64,
    t: usize,
    state: StateSnapshot,
    action: String,
    r_ad: f64,
    r_fee: f64,
    done: bool,
}

fn ids(items: &[Item]) -> Vec<ItemId> {
    items.iter().map(|i| i.item_id).collect()
}

fn snapshot(state: &State) -> StateSnapshot {
    let pages = |kind| state.histories.get(kind).iter().map(PageRecord::item_ids).collect();
    StateSnapshot {
        ads: ids(&state.ads),
        organics: ids(&state.organics),
        user_id: state.user.user_id,
        context: state.context,
        histories: HistorySnapshot {
            order: pages(FeedbackKind::Order),
            click: pages(FeedbackKind::Click),
            pulldown: pages(FeedbackKind::PullDown),
            leave: pages(FeedbackKind::Leave),
        },
        history_totals: state.history_totals,
        page_index: state.page_index,
    }
}

/// Writes the header and one line per transition.
pub fn write_log<W: Write>(out: W, header: &LogHeader, transitions: &[Transition]) -> Result<(), Error> {
    let mut out = BufWriter::new(out);
    serde_json::to_writer(&mut out, header)?;
    out.write_all(b"\n")?;
    for t in transitions {
        let record = Record {
            episode_id: t.episode_id,
            t: t.t,
            state: snapshot(&t.state),
            action: t.action.to_string(),
            r_ad: t.r_ad,
            r_fee: t.r_fee,
            done: t.done,
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

struct Resolver<'h> {
    header: &'h LogHeader,
}

impl Resolver<'_> {
    fn item(&self, id: ItemId, line: usize) -> Result<Item, Error> {
        self.header
            .items
            .get(id as usize)
            .filter(|it| it.item_id == id)
            .cloned()
            .ok_or_else(|| Error::Corrupt(format!("line {line}: unknown item id {id}")))
    }

    fn items(&self, ids: &[ItemId], line: usize) -> Result<Vec<Item>, Error> {
        ids.iter().map(|&id| self.item(id, line)).collect()
    }

    fn state(&self, s: StateSnapshot, line: usize) -> Result<State, Error> {
        let user = *self
            .header
            .users
            .get(s.user_id as usize)
            .ok_or_else(|| Error::Corrupt(format!("line {line}: unknown user id {}", s.user_id)))?;
        let mut histories = Histories::default();
        let lists = [
            (FeedbackKind::Order, s.histories.order),
            (FeedbackKind::Click, s.histories.click),
            (FeedbackKind::PullDown, s.histories.pulldown),
            (FeedbackKind::Leave, s.histories.leave),
        ];
        for (kind, pages) in lists {
            let seq = histories.get_mut(kind).expect("history kind");
            for page in pages {
                if page.len() != self.header.slots {
                    return Err(Error::Corrupt(format!("line {line}: history page with {} slots", page.len())));
                }
                seq.push(PageRecord::new(self.items(&page, line)?, kind));
            }
        }
        Ok(State {
            ads: self.items(&s.ads, line)?,
            organics: self.items(&s.organics, line)?,
            user,
            context: s.context,
            histories,
            history_totals: s.history_totals,
            page_index: s.page_index,
            terminal: false,
        })
    }
}

/// Reads a log written by [`write_log`]. Successor states come from the next
/// line of the same episode; a final transition gets a terminal successor.
pub fn read_log<R: Read>(input: R) -> Result<(LogHeader, Vec<Transition>), Error> {
    let mut lines = BufReader::new(input).lines();
    let first = lines.next().ok_or_else(|| Error::Corrupt("empty log".into()))??;
    let header: LogHeader = serde_json::from_str(&first)?;
    if header.schema != LOG_SCHEMA || header.version != LOG_VERSION {
        return Err(Error::Corrupt(format!(
            "unsupported log schema {} v{} (expected {LOG_SCHEMA} v{LOG_VERSION})",
            header.schema, header.version
        )));
    }
    let layout = header.layout();
    let resolver = Resolver { header: &header };

    let mut parsed = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record =
            serde_json::from_str(&line).map_err(|e| Error::Corrupt(format!("line {line_no}: {e}")))?;
        let action = Action::from_str_bits(&record.action)
            .ok_or_else(|| Error::Corrupt(format!("line {line_no}: bad action {:?}", record.action)))?;
        let state = resolver.state(record.state, line_no)?;
        action
            .check_feasible(&state, &layout)
            .map_err(|e| Error::Corrupt(format!("line {line_no}: {e}")))?;
        parsed.push((record.episode_id, record.t, Arc::new(state), action, record.r_ad, record.r_fee, record.done, line_no));
    }

    let mut transitions = Vec::with_capacity(parsed.len());
    for i in 0..parsed.len() {
        let (episode_id, t, ref state, ref action, r_ad, r_fee, done, line_no) = parsed[i];
        let next_state = if done {
            Arc::new(terminal_successor(state, action, &layout, header.history_keep)?)
        } else {
            match parsed.get(i + 1) {
                Some(next) if next.0 == episode_id && next.1 == t + 1 => Arc::clone(&next.2),
                _ => {
                    return Err(Error::Corrupt(format!(
                        "line {line_no}: episode {episode_id} step {t} is not done but has no successor"
                    )))
                }
            }
        };
        transitions.push(Transition {
            episode_id,
            t,
            state: Arc::clone(state),
            action: action.clone(),
            r_ad,
            r_fee,
            next_state,
            done,
        });
    }
    Ok((header, transitions))
}
