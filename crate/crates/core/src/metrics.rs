//! Scalar metrics read from next-token logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tokenizer::Tokenizer;

/// The two competing answer tokens of a task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerPair {
    pub correct_id: u32,
    pub incorrect_id: u32,
    pub labels: [String; 2],
}

impl AnswerPair {
    pub fn new(correct_id: u32, incorrect_id: u32, labels: [String; 2]) -> Result<Self> {
        if correct_id == incorrect_id {
            return Err(Error::Vocab(format!("answer tokens must differ, both are {correct_id}")));
        }
        Ok(Self {
            correct_id,
            incorrect_id,
            labels,
        })
    }

    /// Answer pair from two words, each encoded with a leading space and
    /// required to be a single token (`"Yes"` becomes `" Yes"`).
    pub fn from_words(tokenizer: &Tokenizer, correct: &str, incorrect: &str) -> Result<Self> {
        let id = |w: &str| {
            tokenizer
                .single_token_id(w.trim_start())
                .ok_or_else(|| Error::Vocab(format!("answer `{w}` is not a single token with a leading space")))
        };
        Self::new(id(correct)?, id(incorrect)?, [correct.trim().to_owned(), incorrect.trim().to_owned()])
    }

    /// Parses `"Yes,No"`.
    pub fn parse(tokenizer: &Tokenizer, spec: &str) -> Result<Self> {
        let (a, b) = spec
            .split_once(',')
            .ok_or_else(|| Error::Config(format!("answers must be `correct,incorrect`, got `{spec}`")))?;
        Self::from_words(tokenizer, a, b)
    }

    pub fn swapped(&self) -> Self {
        Self {
            correct_id: self.incorrect_id,
            incorrect_id: self.correct_id,
            labels: [self.labels[1].clone(), self.labels[0].clone()],
        }
    }
}

fn row_at(logits: &Tensor, position: Option<usize>) -> Result<&[f32]> {
    let (seq, _) = logits.dims2()?;
    let p = position.unwrap_or(seq.saturating_sub(1));
    if p >= seq {
        return Err(Error::Range(format!("position {p} >= sequence length {seq}")));
    }
    Ok(logits.row(p))
}

/// `logit[correct] − logit[incorrect]` for one logit row.
pub fn logit_diff_row(row: &[f32], pair: &AnswerPair) -> f32 {
    row[pair.correct_id as usize] - row[pair.incorrect_id as usize]
}

/// `P(correct) / P(incorrect)` for one logit row. The softmax normalizer
/// cancels, leaving `exp(logit_diff)`.
pub fn prob_ratio_row(row: &[f32], pair: &AnswerPair) -> f32 {
    (logit_diff_row(row, pair) as f64).exp() as f32
}

/// Softmax probability of `token` in one logit row.
pub fn prob_row(row: &[f32], token: u32) -> f32 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let z: f64 = row.iter().map(|&x| (x as f64 - max).exp()).sum();
    ((row[token as usize] as f64 - max).exp() / z) as f32
}

/// 1-based rank under descending logits; equal logits rank the lower id first.
pub fn token_rank_row(row: &[f32], token: u32) -> usize {
    let t = token as usize;
    let v = row[t];
    1 + row
        .iter()
        .enumerate()
        .filter(|&(i, &x)| x > v || (x == v && i < t))
        .count()
}

/// Logit difference at `position` (default: last).
pub fn logit_diff(logits: &Tensor, pair: &AnswerPair, position: Option<usize>) -> Result<f32> {
    Ok(logit_diff_row(row_at(logits, position)?, pair))
}

/// Probability ratio at `position` (default: last).
pub fn prob_ratio(logits: &Tensor, pair: &AnswerPair, position: Option<usize>) -> Result<f32> {
    Ok(prob_ratio_row(row_at(logits, position)?, pair))
}

/// Rank of `token` at `position` (default: last).
pub fn token_rank(logits: &Tensor, token: u32, position: Option<usize>) -> Result<usize> {
    let row = row_at(logits, position)?;
    if token as usize >= row.len() {
        return Err(Error::Vocab(format!("token id {token} >= vocabulary size {}", row.len())));
    }
    Ok(token_rank_row(row, token))
}

/// Everything reported for one prompt and answer pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerMetrics {
    pub logit_diff: f32,
    pub prob_ratio: f32,
    pub correct_prob: f32,
    pub incorrect_prob: f32,
    pub correct_rank: usize,
    pub incorrect_rank: usize,
}

impl AnswerMetrics {
    pub fn from_row(row: &[f32], pair: &AnswerPair) -> Self {
        Self {
            logit_diff: logit_diff_row(row, pair),
            prob_ratio: prob_ratio_row(row, pair),
            correct_prob: prob_row(row, pair.correct_id),
            incorrect_prob: prob_row(row, pair.incorrect_id),
            correct_rank: token_rank_row(row, pair.correct_id),
            incorrect_rank: token_rank_row(row, pair.incorrect_id),
        }
    }
}
