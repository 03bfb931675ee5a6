//! TOML configuration file. Every section and key is optional.
//!
//! ```toml
//! [model]
//! hidden_size = 64
//! heads = 4
//! layers_ssb = 1
//! layers_gle = 1
//! layers_lde = 1
//! ffn_size = 256
//! max_len = 64
//!
//! [train]
//! temperature = 0.05
//! lr = 0.002
//! epochs = 5
//! batch_size = 16
//! negatives = 3
//! seed = 42
//! weight_lexicon = 1.0
//! weight_dense = 1.0
//! weight_union = 1.0
//! warmup_ratio = 0.1
//! weight_decay = 0.01
//! # max_steps = 200
//!
//! [search]
//! k = 10
//! k_candidates = 1000
//! ```

use std::path::Path;

use hyrec::train::TrainConfig;
use hyrec::EncoderConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_size: Option<usize>,
    pub heads: Option<usize>,
    pub layers_ssb: Option<usize>,
    pub layers_gle: Option<usize>,
    pub layers_lde: Option<usize>,
    pub ffn_size: Option<usize>,
    pub max_len: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub k: usize,
    pub k_candidates: usize,
}

impl Default for SearchSection {
    fn default() -> Self {
        Self {
            k: 10,
            k_candidates: 1000,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub search: SearchSection,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
                toml::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))
            }
        }
    }

    /// Desk defaults for `vocab_size`, with any `[model]` keys applied.
    pub fn encoder(&self, vocab_size: usize, seed: u64) -> EncoderConfig {
        let mut c = EncoderConfig::desk(vocab_size);
        let m = &self.model;
        c.hidden_size = m.hidden_size.unwrap_or(c.hidden_size);
        c.heads = m.heads.unwrap_or(c.heads);
        c.layers_ssb = m.layers_ssb.unwrap_or(c.layers_ssb);
        c.layers_gle = m.layers_gle.unwrap_or(c.layers_gle);
        c.layers_lde = m.layers_lde.unwrap_or(c.layers_lde);
        c.ffn_size = m.ffn_size.unwrap_or(c.ffn_size);
        c.max_len = m.max_len.unwrap_or(c.max_len);
        c.seed = seed;
        c
    }
}
