//! Run configuration files: training hyper-parameters, architecture, data
//! handling and paths in one JSON document. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dropouts, ModelConfig};
use crate::pipeline::TrainConfig;
use crate::schedules::LrFindConfig;

/// Architecture without the vocabulary and class counts, which come from
/// the tokenizer and the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelShape {
    pub embedding_size: usize,
    pub hidden_size: usize,
    pub n_layers: usize,
    pub head_hidden: usize,
    pub tie_weights: bool,
    pub base_dropouts: Dropouts,
}

impl Default for ModelShape {
    fn default() -> Self {
        let c = ModelConfig::new(1);
        ModelShape {
            embedding_size: c.embedding_size,
            hidden_size: c.hidden_size,
            n_layers: c.n_layers,
            head_hidden: c.head_hidden,
            tie_weights: c.tie_weights,
            base_dropouts: c.base_dropouts,
        }
    }
}

impl ModelShape {
    pub fn model_config(&self, vocab_size: usize, dropout_multiplier: f64) -> ModelConfig {
        ModelConfig {
            embedding_size: self.embedding_size,
            hidden_size: self.hidden_size,
            n_layers: self.n_layers,
            head_hidden: self.head_hidden,
            tie_weights: self.tie_weights,
            base_dropouts: self.base_dropouts,
            dropout_multiplier,
            ..ModelConfig::new(vocab_size)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Words per labelled sample.
    pub chunk_words: usize,
    /// Held-out share per author.
    pub test_frac: f64,
    /// Share of each author's training samples used for early stopping of
    /// the classifier; 0 disables it.
    pub valid_frac: f64,
    pub folds: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            chunk_words: 750,
            test_frac: 0.2,
            valid_frac: 0.1,
            folds: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub model: ModelShape,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub lr_find: LrFindConfig,
    /// Text file, or a directory in `<root>/<author>/<file>.txt` layout.
    pub corpus: Option<PathBuf>,
    pub tokenizer: Option<PathBuf>,
    pub checkpoint_in: Option<PathBuf>,
    pub checkpoint_out: Option<PathBuf>,
}


impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_json(&text).map_err(|e| match e {
            Error::InvalidArgument(m) => Error::InvalidArgument(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.model_config(4, self.train.dropout_multiplier).validate()?;
        let d = &self.data;
        if d.chunk_words == 0 {
            return Err(Error::invalid("data.chunk_words must be at least 1"));
        }
        if !(d.test_frac > 0.0 && d.test_frac < 1.0) {
            return Err(Error::invalid("data.test_frac must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&d.valid_frac) {
            return Err(Error::invalid("data.valid_frac must lie in [0, 1)"));
        }
        if d.folds < 2 {
            return Err(Error::invalid("data.folds must be at least 2"));
        }
        let f = &self.lr_find;
        if !(f.lr_start > 0.0 && f.lr_end > f.lr_start) || f.steps == 0 || !(0.0..1.0).contains(&f.smoothing) {
            return Err(Error::invalid("lr_find needs 0 < lr_start < lr_end, steps >= 1, smoothing in [0, 1)"));
        }
        Ok(())
    }
}
