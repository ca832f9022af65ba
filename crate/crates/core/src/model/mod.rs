//! The page-level interest Q-network.
//!
//! Each channel encodes every page with a convolution over slots followed by
//! intra-page attention, lets the target page attend over each of the four
//! history sequences, and summarises the pull-down sequence with weights
//! scored against the other three. Channel outputs, the context embedding and
//! the user embedding feed the Q head.

mod config;

pub use config::{Ablation, ChannelConfig, DpinConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::features::{cross_target, truncate_or_pad, Action, EmbeddingTables, FeedbackKind, PageLayout, State};
use crate::nn::{Mlp, NnError, ParamSet, Tape, Tensor, Var};
use crate::Error;

/// The eight per-channel vectors that get concatenated.
#[derive(Clone, Copy, Debug)]
pub struct ChannelOutput {
    pub z_o: Var,
    pub z_c: Var,
    pub z_p: Var,
    pub z_l: Var,
    pub z_p_o: Var,
    pub z_p_c: Var,
    pub z_p_l: Var,
    pub h_t: Var,
}

impl ChannelOutput {
    pub fn parts(&self) -> [Var; 8] {
        [
            self.z_o, self.z_c, self.z_p, self.z_l, self.z_p_o, self.z_p_c, self.z_p_l, self.h_t,
        ]
    }
}

/// Encoded history sequence for one channel.
#[derive(Clone, Debug)]
pub struct SeqEncoding {
    pub reps: Vec<Var>,
    pub mask: Vec<bool>,
}

/// Everything about a state that does not depend on the action.
#[derive(Clone, Debug)]
pub struct StateEncoding {
    /// `[channel][order, click, pulldown, leave]`
    pub channels: Vec<[SeqEncoding; 4]>,
    pub user: Var,
    pub context: Var,
}

#[derive(Clone, Debug)]
pub struct DpinModel {
    cfg: DpinConfig,
    layout: PageLayout,
    tables: EmbeddingTables,
    channels: Vec<ChannelConfig>,
    mlp1: Vec<Mlp>,
    mlp2: Vec<Mlp>,
    mlp3: Mlp,
}

fn ch_name(t: usize, rest: &str) -> String {
    format!("ch{}.{rest}", t + 1)
}

impl DpinModel {
    pub fn new(cfg: DpinConfig, layout: PageLayout) -> Result<Self, Error> {
        cfg.validate(layout.slots)?;
        let tables = EmbeddingTables::new(cfg.embedding.clone(), layout.slots)?;
        let channels = cfg.channel_configs();
        let d_h = cfg.d_h();
        let mut mlp1 = Vec::new();
        let mut mlp2 = Vec::new();
        for (t, ch) in channels.iter().enumerate() {
            mlp1.push(Mlp::new(ch_name(t, "mlp1"), ch.kernels, &cfg.mlp1)?);
            let mut widths = cfg.mlp2.clone();
            widths.push(1);
            mlp2.push(Mlp::new(ch_name(t, "mlp2"), 4 * d_h, &widths)?);
        }
        let head_in = if cfg.ablation.no_mcim {
            tables.page_width()
        } else {
            cfg.mcim_width()
        } + cfg.embedding.context_width()
            + cfg.embedding.user_width();
        let mut widths = cfg.mlp3.clone();
        widths.push(1);
        let mlp3 = Mlp::new("q.mlp3", head_in, &widths)?;
        Ok(Self {
            cfg,
            layout,
            tables,
            channels,
            mlp1,
            mlp2,
            mlp3,
        })
    }

    pub fn config(&self) -> &DpinConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &PageLayout {
        &self.layout
    }

    pub fn tables(&self) -> &EmbeddingTables {
        &self.tables
    }

    pub fn channel_configs(&self) -> &[ChannelConfig] {
        &self.channels
    }

    pub fn d_h(&self) -> usize {
        self.cfg.d_h()
    }

    /// Glorot-initialised parameters for exactly the units this
    /// configuration uses.
    pub fn init_params(&self, seed: u64) -> Result<ParamSet, Error> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        self.tables.init(&mut params, &mut rng)?;
        let ab = self.cfg.ablation;
        let d = self.tables.page_width();
        let d_h = self.d_h();
        if !ab.no_mcim {
            for (t, ch) in self.channels.iter().enumerate() {
                params.insert_glorot(ch_name(t, "conv.kernels"), ch.receptive_field * d, ch.kernels, &mut rng)?;
                params.insert_zeros(ch_name(t, "conv.bias"), 1, ch.kernels)?;
                if !ab.no_ipau {
                    for w in ["wq", "wk", "wv"] {
                        params.insert_glorot(ch_name(t, &format!("ipau.{w}")), ch.kernels, ch.kernels, &mut rng)?;
                    }
                }
                self.mlp1[t].init(&mut params, &mut rng)?;
                if !ab.no_ipiu {
                    for kind in FeedbackKind::HISTORY {
                        for w in ["wq", "wk", "wv", "wo"] {
                            let name = ch_name(t, &format!("ipiu.{}.{w}", kind.name()));
                            params.insert_glorot(name, d_h, d_h, &mut rng)?;
                        }
                    }
                    self.mlp2[t].init(&mut params, &mut rng)?;
                }
            }
        }
        self.mlp3.init(&mut params, &mut rng)?;
        Ok(params)
    }

    /// Intra-page attention: `h = MLP1(avgpool(SDPA(H1 Wq, H1 Wk, H1 Wv)))`
    /// with scale `sqrt(n_c)`.
    pub fn ipau<'a>(&self, tape: &mut Tape<'a>, params: &'a ParamSet, channel: usize, h1: Var) -> Result<Var, NnError> {
        let pooled = if self.cfg.ablation.no_ipau {
            tape.avg_pool_rows(h1)
        } else {
            let wq = tape.param(params, &ch_name(channel, "ipau.wq"))?;
            let wk = tape.param(params, &ch_name(channel, "ipau.wk"))?;
            let wv = tape.param(params, &ch_name(channel, "ipau.wv"))?;
            let q = tape.matmul(h1, wq)?;
            let k = tape.matmul(h1, wk)?;
            let v = tape.matmul(h1, wv)?;
            let logits = tape.matmul_nt(q, k)?;
            let scale = (tape.shape(k).1 as f64).sqrt();
            let logits = tape.scale(logits, 1.0 / scale);
            let weights = tape.softmax_rows(logits);
            let h2 = tape.matmul(weights, v)?;
            tape.avg_pool_rows(h2)
        };
        self.mlp1[channel].forward(tape, params, pooled)
    }

    /// Convolution over slots, then [`Self::ipau`]. `e` is a `K x d` page
    /// matrix; returns a `1 x d_h` page representation.
    pub fn encode_page<'a>(&self, tape: &mut Tape<'a>, params: &'a ParamSet, channel: usize, e: Var) -> Result<Var, NnError> {
        let m = self.channels[channel].receptive_field;
        let kernels = tape.param(params, &ch_name(channel, "conv.kernels"))?;
        let bias = tape.param(params, &ch_name(channel, "conv.bias"))?;
        let windows = tape.unfold_rows(e, m)?;
        let h1 = tape.affine(windows, kernels, bias)?;
        self.ipau(tape, params, channel, h1)
    }

    /// Multi-head attention over `[h_t; seq]`; returns the target row
    /// projected back to `d_h`. Masked rows get zero attention weight.
    pub fn ipiu_interact<'a>(
        &self,
        tape: &mut Tape<'a>,
        params: &'a ParamSet,
        channel: usize,
        kind: FeedbackKind,
        h_t: Var,
        seq: &[Var],
        mask: &[bool],
    ) -> Result<Var, NnError> {
        if seq.len() != mask.len() {
            return Err(NnError::Shape {
                op: "ipiu(mask)",
                left: (seq.len(), 1),
                right: (mask.len(), 1),
            });
        }
        if self.cfg.ablation.no_ipiu {
            return self.masked_mean(tape, seq, mask);
        }
        let prefix = format!("ipiu.{}", kind.name());
        let wq = tape.param(params, &ch_name(channel, &format!("{prefix}.wq")))?;
        let wk = tape.param(params, &ch_name(channel, &format!("{prefix}.wk")))?;
        let wv = tape.param(params, &ch_name(channel, &format!("{prefix}.wv")))?;
        let wo = tape.param(params, &ch_name(channel, &format!("{prefix}.wo")))?;

        let mut rows = Vec::with_capacity(seq.len() + 1);
        rows.push(h_t);
        rows.extend_from_slice(seq);
        let stacked = tape.concat_rows(&rows)?;
        let mut key_mask = Vec::with_capacity(rows.len());
        key_mask.push(true);
        key_mask.extend_from_slice(mask);

        // Only the target row's output is used, so only its query is formed.
        let q = tape.matmul(h_t, wq)?;
        let k = tape.matmul(stacked, wk)?;
        let v = tape.matmul(stacked, wv)?;
        let d_h = self.d_h();
        let heads = self.channels[channel].heads;
        let dk = d_h / heads;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dk, dk)?;
            let kh = tape.slice_cols(k, h * dk, dk)?;
            let vh = tape.slice_cols(v, h * dk, dk)?;
            let logits = tape.matmul_nt(qh, kh)?;
            let logits = tape.scale(logits, 1.0 / (dk as f64).sqrt());
            let weights = tape.softmax_rows_masked(logits, &key_mask)?;
            outs.push(tape.matmul(weights, vh)?);
        }
        let joined = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        tape.matmul(joined, wo)
    }

    /// Pull-down summary weighted by a learned score against `z_x`.
    /// Returns the zero vector when no pull-down page is unmasked.
    pub fn denoise<'a>(
        &self,
        tape: &mut Tape<'a>,
        params: &'a ParamSet,
        channel: usize,
        z_x: Var,
        pulldown: &[Var],
        mask: &[bool],
    ) -> Result<Var, NnError> {
        let (z, _) = self.denoise_with_weights(tape, params, channel, z_x, pulldown, mask)?;
        Ok(z)
    }

    /// [`Self::denoise`] that also returns the attention weights over the
    /// unmasked pages (in sequence order), if any.
    pub fn denoise_with_weights<'a>(
        &self,
        tape: &mut Tape<'a>,
        params: &'a ParamSet,
        channel: usize,
        z_x: Var,
        pulldown: &[Var],
        mask: &[bool],
    ) -> Result<(Var, Option<Var>), NnError> {
        if pulldown.len() != mask.len() {
            return Err(NnError::Shape {
                op: "denoise(mask)",
                left: (pulldown.len(), 1),
                right: (mask.len(), 1),
            });
        }
        if self.cfg.ablation.no_ipiu {
            return Ok((self.masked_mean(tape, pulldown, mask)?, None));
        }
        let live: Vec<Var> = pulldown.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
        if live.is_empty() {
            return Ok((tape.constant(Tensor::zeros(1, self.d_h())), None));
        }
        let p = tape.concat_rows(&live)?;
        let z = tape.broadcast_rows(z_x, live.len())?;
        let prod = tape.mul(p, z)?;
        let diff = tape.sub(p, z)?;
        let features = tape.concat_cols(&[p, z, prod, diff])?;
        let logits = self.mlp2[channel].forward(tape, params, features)?;
        let logits = tape.transpose(logits);
        let weights = tape.softmax_rows(logits);
        Ok((tape.matmul(weights, p)?, Some(weights)))
    }

    fn masked_mean(&self, tape: &mut Tape<'_>, seq: &[Var], mask: &[bool]) -> Result<Var, NnError> {
        let live: Vec<Var> = seq.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
        if live.is_empty() {
            return Ok(tape.constant(Tensor::zeros(1, self.d_h())));
        }
        let stacked = tape.concat_rows(&live)?;
        Ok(tape.avg_pool_rows(stacked))
    }

    /// All eight vectors of one channel given its encoded histories and the
    /// target-page representation `h_t`.
    pub fn channel_forward<'a>(
        &self,
        tape: &mut Tape<'a>,
        params: &'a ParamSet,
        channel: usize,
        histories: &[SeqEncoding; 4],
        h_t: Var,
    ) -> Result<ChannelOutput, NnError> {
        let mut z = [h_t; 4];
        for (i, kind) in FeedbackKind::HISTORY.into_iter().enumerate() {
            let seq = &histories[i];
            z[i] = self.ipiu_interact(tape, params, channel, kind, h_t, &seq.reps, &seq.mask)?;
        }
        let pd = &histories[FeedbackKind::PullDown.index()];
        let z_p_o = self.denoise(tape, params, channel, z[0], &pd.reps, &pd.mask)?;
        let z_p_c = self.denoise(tape, params, channel, z[1], &pd.reps, &pd.mask)?;
        let z_p_l = self.denoise(tape, params, channel, z[3], &pd.reps, &pd.mask)?;
        Ok(ChannelOutput {
            z_o: z[0],
            z_c: z[1],
            z_p: z[2],
            z_l: z[3],
            z_p_o,
            z_p_c,
            z_p_l,
            h_t,
        })
    }

    fn sequence_mask(&self, kind: FeedbackKind) -> bool {
        let ab = self.cfg.ablation;
        match kind {
            FeedbackKind::PullDown | FeedbackKind::Leave => !ab.drop_pulldown_leave,
            FeedbackKind::Click => !ab.drop_click,
            _ => true,
        }
    }

    /// Encodes the action-independent part of a state: every history page in
    /// every channel, plus the user and context embeddings. Padding pages are
    /// never encoded; their slots hold a zero row that attention masks out.
    pub fn encode_state<'a>(&self, tape: &mut Tape<'a>, params: &'a ParamSet, state: &State) -> Result<StateEncoding, NnError> {
        let user = self.tables.user_embedding(tape, params, &state.user)?;
        let context = self.tables.context_embedding(tape, params, &state.context, state.page_index)?;
        if self.cfg.ablation.no_mcim {
            return Ok(StateEncoding {
                channels: Vec::new(),
                user,
                context,
            });
        }
        let n = self.cfg.seq_len;
        let slots = self.layout.slots;
        let zero = tape.constant(Tensor::zeros(1, self.d_h()));

        let mut per_kind = Vec::with_capacity(4);
        for kind in FeedbackKind::HISTORY {
            let (pages, mut mask) = truncate_or_pad(state.histories.get(kind), n, slots);
            if !self.sequence_mask(kind) {
                mask.fill(false);
            }
            let mut embedded = Vec::with_capacity(n);
            for (page, &live) in pages.iter().zip(&mask) {
                embedded.push(if live {
                    Some(self.tables.embed_page(tape, params, page)?)
                } else {
                    None
                });
            }
            per_kind.push((embedded, mask));
        }

        let mut channels = Vec::with_capacity(self.channels.len());
        for t in 0..self.channels.len() {
            let mut seqs: Vec<SeqEncoding> = Vec::with_capacity(4);
            for (embedded, mask) in &per_kind {
                let mut reps = Vec::with_capacity(n);
                for e in embedded {
                    reps.push(match e {
                        Some(e) => self.encode_page(tape, params, t, *e)?,
                        None => zero,
                    });
                }
                seqs.push(SeqEncoding {
                    reps,
                    mask: mask.clone(),
                });
            }
            let seqs: [SeqEncoding; 4] = seqs.try_into().expect("four sequences");
            channels.push(seqs);
        }
        Ok(StateEncoding { channels, user, context })
    }

    /// `e_MCIM` for a target page, or the pooled raw page under `no_mcim`.
    fn page_features<'a>(
        &self,
        tape: &mut Tape<'a>,
        params: &'a ParamSet,
        enc: &StateEncoding,
        e_t: Var,
    ) -> Result<Var, NnError> {
        if self.cfg.ablation.no_mcim {
            return Ok(tape.avg_pool_rows(e_t));
        }
        let mut parts = Vec::with_capacity(8 * self.channels.len());
        for (t, hist) in enc.channels.iter().enumerate() {
            let h_t = self.encode_page(tape, params, t, e_t)?;
            let out = self.channel_forward(tape, params, t, hist, h_t)?;
            parts.extend(out.parts());
        }
        tape.concat_cols(&parts)
    }

    /// `Q(s, a)` from a precomputed state encoding.
    pub fn q_from_encoding<'a>(
        &self,
        tape: &mut Tape<'a>,
        params: &'a ParamSet,
        enc: &StateEncoding,
        state: &State,
        action: &Action,
    ) -> Result<Var, Error> {
        let page = cross_target(state, action, &self.layout)?;
        let e_t = self.tables.embed_page(tape, params, &page)?;
        let features = self.page_features(tape, params, enc, e_t)?;
        let x = tape.concat_cols(&[features, enc.context, enc.user])?;
        Ok(self.mlp3.forward(tape, params, x)?)
    }

    /// `Q(s, a)` as a `1 x 1` node on `tape`.
    pub fn q_value<'a>(&self, tape: &mut Tape<'a>, params: &'a ParamSet, state: &State, action: &Action) -> Result<Var, Error> {
        action.check_feasible(state, &self.layout)?;
        let enc = self.encode_state(tape, params, state)?;
        self.q_from_encoding(tape, params, &enc, state, action)
    }

    /// Forward-only `Q(s, a)`.
    pub fn q_scalar(&self, params: &ParamSet, state: &State, action: &Action) -> Result<f64, Error> {
        let mut tape = Tape::no_grad();
        let q = self.q_value(&mut tape, params, state, action)?;
        Ok(tape.value(q).item())
    }

    /// Forward-only Q for several actions, sharing one state encoding.
    pub fn q_values(&self, params: &ParamSet, state: &State, actions: &[Action]) -> Result<Vec<f64>, Error> {
        let mut tape = Tape::no_grad();
        let enc = self.encode_state(&mut tape, params, state)?;
        actions
            .iter()
            .map(|a| {
                let q = self.q_from_encoding(&mut tape, params, &enc, state, a)?;
                Ok(tape.value(q).item())
            })
            .collect()
    }

    /// Forward-only `e_MCIM` (or its `no_mcim` replacement).
    pub fn mcim_features(&self, params: &ParamSet, state: &State, action: &Action) -> Result<Tensor, Error> {
        let mut tape = Tape::no_grad();
        let enc = self.encode_state(&mut tape, params, state)?;
        let page = cross_target(state, action, &self.layout)?;
        let e_t = self.tables.embed_page(&mut tape, params, &page)?;
        let f = self.page_features(&mut tape, params, &enc, e_t)?;
        Ok(tape.value(f).clone())
    }
}
