//! Synthetic activation dumps for tests, benchmarks and demos.
//!
//! Records look structurally like real encoder dumps: `[CLS]` first, `[SEP]`
//! last, optional `[PAD]` tail, "." every few tokens. Attention rows are
//! softmaxes of random logits with extra weight on the diagonal and on
//! separator columns; head outputs are standard normal.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{CLS, PAD, SEP};
use crate::tensor_io::{Dims, SampleRecord, Token};

const WORDS: &[&str] = &[
    "the", "company", "war", "police", "airport", "central", "government", "major", "in", "of",
    "a", "to", "and", "was", "policing", "act", "minor", "forces", "ohio", "1974",
];

#[derive(Debug, Clone)]
pub struct SynthOptions {
    pub dims: Dims,
    /// Average tokens per sentence.
    pub sentence_len: usize,
    /// Trailing `[PAD]` tokens.
    pub padding: usize,
    /// Logit boost on separator columns.
    pub separator_boost: f64,
    /// Logit boost on the main diagonal.
    pub diagonal_boost: f64,
}

impl SynthOptions {
    pub fn new(dims: Dims) -> Self {
        Self {
            dims,
            sentence_len: 12,
            padding: 0,
            separator_boost: 3.0,
            diagonal_boost: 1.0,
        }
    }
}

pub fn tokens<R: Rng + ?Sized>(rng: &mut R, seq_len: usize, sentence_len: usize, padding: usize) -> Vec<Token> {
    let mut out = Vec::with_capacity(seq_len);
    let content_end = seq_len.saturating_sub(padding);
    for k in 0..seq_len {
        let text = if k == 0 {
            CLS
        } else if k >= content_end {
            PAD
        } else if k + 1 == content_end {
            SEP
        } else if sentence_len > 0 && k % sentence_len == 0 {
            "."
        } else {
            WORDS[rng.random_range(0..WORDS.len())]
        };
        out.push(Token::new(vocab_id(text), text));
    }
    out
}

fn vocab_id(text: &str) -> u32 {
    match text {
        PAD => 0,
        CLS => 101,
        SEP => 102,
        "." => 1012,
        w => 2000 + WORDS.iter().position(|x| *x == w).unwrap_or(0) as u32,
    }
}

/// A row-stochastic `n × n` map, rows computed in `f64` then rounded.
pub fn attention_map<R: Rng + ?Sized>(rng: &mut R, n: usize, column_bias: &[f64], diagonal_boost: f64) -> Vec<f32> {
    let mut out = Vec::with_capacity(n * n);
    let mut logits = vec![0.0f64; n];
    for i in 0..n {
        for (j, l) in logits.iter_mut().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            *l = z + column_bias[j] + if i == j { diagonal_boost } else { 0.0 };
        }
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| (e / total) as f32));
    }
    out
}

pub fn head_outputs<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f32> {
    (0..len).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

pub fn record<R: Rng + ?Sized>(rng: &mut R, opts: &SynthOptions) -> SampleRecord {
    let d = opts.dims;
    let tokens = tokens(rng, d.seq_len, opts.sentence_len, opts.padding);
    let bias: Vec<f64> = tokens
        .iter()
        .map(|t| match t.text.as_str() {
            "." | SEP => opts.separator_boost,
            PAD => -opts.separator_boost,
            _ => 0.0,
        })
        .collect();
    let mut attention = Vec::with_capacity(d.attention_len().unwrap_or(0));
    for _ in 0..d.layers * d.heads {
        attention.extend(attention_map(rng, d.seq_len, &bias, opts.diagonal_boost));
    }
    SampleRecord {
        model_name: "synthetic".into(),
        dims: d,
        tokens,
        sentence_ids: None,
        attention,
        head_outputs: head_outputs(rng, d.head_output_len().unwrap_or(0)),
    }
}
