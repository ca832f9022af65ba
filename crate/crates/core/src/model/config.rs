use serde::{Deserialize, Serialize};

use crate::features::EmbeddingConfig;
use crate::Error;

/// Switches that remove one unit of the network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Replace the convolution by a width-1 per-slot projection.
    pub no_cl: bool,
    /// Replace intra-page attention by plain average pooling.
    pub no_ipau: bool,
    /// Replace target/history attention and pull-down denoising by masked
    /// mean pooling.
    pub no_ipiu: bool,
    /// Drop the whole multi-channel module; score from the pooled target page.
    pub no_mcim: bool,
    /// Hide the pull-down and leave sequences.
    pub drop_pulldown_leave: bool,
    /// Hide the click sequence.
    pub drop_click: bool,
}

/// Per-channel hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelConfig {
    pub receptive_field: usize,
    pub kernels: usize,
    pub heads: usize,
    pub d_h: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpinConfig {
    /// Number of channels `T`.
    pub channels: usize,
    /// Receptive field per channel; defaults to `1..=T`.
    pub receptive_fields: Option<Vec<usize>>,
    /// Convolution kernels per channel (`n_c`), shared by all channels.
    pub kernels: usize,
    /// Attention heads in the inter-page unit.
    pub heads: usize,
    /// History length `N` after truncation / padding.
    pub seq_len: usize,
    /// Page-representation MLP; its last width is `d_h`.
    pub mlp1: Vec<usize>,
    /// Hidden widths of the denoising scorer (a scalar layer is appended).
    pub mlp2: Vec<usize>,
    /// Hidden widths of the Q head (a scalar layer is appended).
    pub mlp3: Vec<usize>,
    pub embedding: EmbeddingConfig,
    pub ablation: Ablation,
}

impl Default for DpinConfig {
    fn default() -> Self {
        Self {
            channels: 5,
            receptive_fields: None,
            kernels: 16,
            heads: 2,
            seq_len: 10,
            mlp1: vec![128, 64, 32],
            mlp2: vec![128, 64, 32],
            mlp3: vec![128, 64, 32],
            embedding: EmbeddingConfig::default(),
            ablation: Ablation::default(),
        }
    }
}

impl DpinConfig {
    pub fn d_h(&self) -> usize {
        self.mlp1.last().copied().unwrap_or(0)
    }

    pub fn receptive_fields(&self) -> Vec<usize> {
        match &self.receptive_fields {
            Some(fields) => fields.clone(),
            None => (1..=self.channels).collect(),
        }
    }

    pub fn channel_configs(&self) -> Vec<ChannelConfig> {
        self.receptive_fields()
            .into_iter()
            .map(|m| ChannelConfig {
                receptive_field: if self.ablation.no_cl { 1 } else { m },
                kernels: self.kernels,
                heads: self.heads,
                d_h: self.d_h(),
            })
            .collect()
    }

    /// Width of the concatenated channel outputs, `8 * T * d_h`.
    pub fn mcim_width(&self) -> usize {
        8 * self.channels * self.d_h()
    }

    pub fn validate(&self, slots: usize) -> Result<(), Error> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.channels == 0 {
            return bad("model.channels must be >= 1".into());
        }
        let fields = self.receptive_fields();
        if fields.len() != self.channels {
            return bad(format!(
                "model.receptive_fields has {} entries for {} channels",
                fields.len(),
                self.channels
            ));
        }
        if fields.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("receptive fields must be strictly increasing: {fields:?}"));
        }
        if let Some(&m) = fields.iter().find(|&&m| m == 0 || m > slots) {
            return bad(format!("receptive field {m} outside 1..={slots}"));
        }
        if self.kernels == 0 || self.seq_len == 0 || self.heads == 0 {
            return bad("model.kernels, model.seq_len and model.heads must be positive".into());
        }
        if self.mlp1.is_empty() || self.mlp1.contains(&0) || self.mlp2.contains(&0) || self.mlp3.contains(&0) {
            return bad("MLP widths must be positive and mlp1 non-empty".into());
        }
        if self.d_h() % self.heads != 0 {
            return bad(format!("heads ({}) must divide d_h ({})", self.heads, self.d_h()));
        }
        self.embedding.validate()?;
        Ok(())
    }
}
