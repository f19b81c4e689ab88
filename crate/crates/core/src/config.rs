//! Hyperparameters shared by the model, trainer, and tri-training loop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attention scoring function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    /// Additive scoring: `v . tanh(W_key h + W_query s + b)`.
    #[default]
    Additive,
    /// Dot-product scoring: `h . (W_query s)`.
    DotProduct,
}

impl std::fmt::Display for Scoring {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scoring::Additive => "additive",
            Scoring::DotProduct => "dot_product",
        })
    }
}

impl std::str::FromStr for Scoring {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "additive" => Ok(Scoring::Additive),
            "dot_product" | "dot" => Ok(Scoring::DotProduct),
            other => Err(Error::Config(format!("unknown scoring '{other}' (additive, dot_product)"))),
        }
    }
}

/// All knobs for one training run. [`HyperParams::default`] reproduces the
/// published configuration; tests shrink the sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    /// Encoder hidden size per direction. The decoder runs at twice this.
    pub hidden: usize,
    /// Number of attention heads / decoder steps.
    pub heads: usize,
    /// Maximum sequence length; longer texts are truncated, shorter padded.
    pub max_len: usize,
    /// Attention scoring function.
    pub scoring: Scoring,
    /// Dropout rate on embedded inputs and encoder outputs.
    pub dropout: f64,
    /// Whether the embedding table receives gradient updates.
    pub train_embeddings: bool,
    /// Weight of the self-overlap penalty in the single-model loss.
    pub gamma: f64,
    /// Weight of the cross-model overlap penalty in the tri-training loss.
    pub alpha: f64,
    /// Weight of each per-model overlap penalty in the tri-training loss.
    pub beta: f64,
    /// Confidence threshold for accepting a pseudo-label.
    pub tau: f64,
    /// Base learning rate.
    pub learning_rate: f64,
    /// Per-update decay: `lr_t = lr / (1 + decay * t)`.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    /// Fraction of training data held out for validation.
    pub val_fraction: f64,
    /// Tri-training stops once agreement on unlabeled data reaches this.
    pub agreement_stop: f64,
    /// Cap on tri-training iterations.
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            hidden: 64,
            heads: 5,
            max_len: 200,
            scoring: Scoring::Additive,
            dropout: 0.4,
            train_embeddings: false,
            gamma: 0.01,
            alpha: 0.05,
            beta: 0.01,
            tau: 0.7,
            learning_rate: 0.005,
            lr_decay: 0.01,
            batch_size: 32,
            max_epochs: 40,
            patience: 3,
            val_fraction: 0.15,
            agreement_stop: 0.85,
            max_iterations: 10,
            seed: 42,
        }
    }
}

impl HyperParams {
    /// Decoder state width: both directions of the encoder concatenated.
    pub fn decoder_hidden(&self) -> usize {
        2 * self.hidden
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.hidden == 0 || self.heads == 0 || self.max_len == 0 || self.batch_size == 0 {
            return fail("hidden, heads, max_len, and batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return fail(format!("tau {} outside [0, 1]", self.tau));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return fail(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        if !(0.0..=1.0).contains(&self.agreement_stop) {
            return fail(format!("agreement_stop {} outside [0, 1]", self.agreement_stop));
        }
        if self.learning_rate <= 0.0 {
            return fail(format!("learning_rate {} must be positive", self.learning_rate));
        }
        for (name, v) in [
            ("lr_decay", self.lr_decay),
            ("gamma", self.gamma),
            ("alpha", self.alpha),
            ("beta", self.beta),
        ] {
            if v < 0.0 {
                return fail(format!("{name} {v} must be non-negative"));
            }
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be positive".into());
        }
        Ok(())
    }
}
