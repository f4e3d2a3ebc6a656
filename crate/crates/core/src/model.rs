//! Bigram next-token model with exact softmax cross-entropy gradients.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Vocab;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("token id {token} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: usize, vocab_size: usize },
    #[error("sequence of length {0} is too short; at least 2 tokens are needed")]
    SequenceTooShort(usize),
    #[error("logit table has {got} entries, expected {expected}")]
    ShapeMismatch { got: usize, expected: usize },
    #[error("learning rate must be positive and finite, got {0}")]
    InvalidLearningRate(f64),
}

/// Row `r` of the `V x V` logit table scores the token that follows `r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    vocab: Vocab,
    logits: Vec<f64>,
    learning_rate: f64,
}

impl ToyModel {
    /// All logits zero: every row predicts the uniform distribution.
    pub fn uniform(vocab: Vocab, learning_rate: f64) -> Result<Self, ModelError> {
        let v = vocab.len();
        Self::from_logits(vocab, vec![0.0; v * v], learning_rate)
    }

    pub fn from_logits(
        mut vocab: Vocab,
        logits: Vec<f64>,
        learning_rate: f64,
    ) -> Result<Self, ModelError> {
        let v = vocab.len();
        if logits.len() != v * v {
            return Err(ModelError::ShapeMismatch {
                got: logits.len(),
                expected: v * v,
            });
        }
        if !(learning_rate.is_finite() && learning_rate > 0.0) {
            return Err(ModelError::InvalidLearningRate(learning_rate));
        }
        vocab.ensure_index();
        Ok(Self {
            vocab,
            logits,
            learning_rate,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn parameter_norm(&self) -> f64 {
        self.logits.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Softmax of one row, shifted by the row maximum.
    pub fn row_probabilities(&self, row: usize) -> Vec<f64> {
        let v = self.vocab_size();
        softmax(&self.logits[row * v..(row + 1) * v])
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<(), ModelError> {
        if tokens.len() < 2 {
            return Err(ModelError::SequenceTooShort(tokens.len()));
        }
        let v = self.vocab_size();
        match tokens.iter().find(|&&t| t >= v) {
            Some(&token) => Err(ModelError::TokenOutOfRange {
                token,
                vocab_size: v,
            }),
            None => Ok(()),
        }
    }

    /// Mean negative log-likelihood of `tokens[1..]` given each predecessor.
    pub fn sample_loss(&self, tokens: &[usize]) -> Result<f64, ModelError> {
        self.check_tokens(tokens)?;
        let v = self.vocab_size();
        let predicted = tokens.len() - 1;
        let nll: f64 = tokens
            .windows(2)
            .map(|w| {
                let row = &self.logits[w[0] * v..(w[0] + 1) * v];
                log_sum_exp(row) - row[w[1]]
            })
            .sum();
        Ok(nll / predicted as f64)
    }

    /// Adds `scale * d(sample_loss)/d(logits)` into `grad` and returns the
    /// unscaled loss.
    pub fn accumulate_gradient(
        &self,
        tokens: &[usize],
        scale: f64,
        grad: &mut [f64],
    ) -> Result<f64, ModelError> {
        self.check_tokens(tokens)?;
        let v = self.vocab_size();
        if grad.len() != v * v {
            return Err(ModelError::ShapeMismatch {
                got: grad.len(),
                expected: v * v,
            });
        }
        let predicted = (tokens.len() - 1) as f64;
        let mut nll = 0.0;
        for w in tokens.windows(2) {
            let (prev, next) = (w[0], w[1]);
            let row = &self.logits[prev * v..(prev + 1) * v];
            let lse = log_sum_exp(row);
            nll += lse - row[next];
            let grad_row = &mut grad[prev * v..(prev + 1) * v];
            for (c, g) in grad_row.iter_mut().enumerate() {
                let p = (row[c] - lse).exp();
                let target = if c == next { 1.0 } else { 0.0 };
                *g += scale * ((p - target) / predicted);
            }
        }
        Ok(nll / predicted)
    }

    /// Plain SGD step for a gradient summed over `batch_len` samples:
    /// `-lr * grad / batch_len`.
    pub fn descent_delta(&self, grad: &[f64], batch_len: usize) -> Vec<f64> {
        let n = batch_len as f64;
        grad.iter().map(|g| -self.learning_rate * (g / n)).collect()
    }

    pub fn apply_delta(&mut self, delta: &[f64]) {
        for (theta, d) in self.logits.iter_mut().zip(delta) {
            *theta += d;
        }
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|x| (x - lse).exp()).collect()
}
