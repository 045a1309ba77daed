//! Shared fixtures and brute-force oracles for the integration tests.
//!
//! Everything here is written independently of the library's optimized
//! paths: plain nested loops, direct enumeration, no shared helpers.

#![allow(dead_code)]

use attnsim_core::tensor_io::{Dims, SampleRecord, Token};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::Value;
use std::collections::BTreeSet;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f32> {
    (0..rows * cols).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// Naive triple loop, sequential accumulation.
pub fn naive_gram(h: &[f32], t: usize, d: usize) -> Vec<f64> {
    let mut s = vec![0.0f64; t * t];
    for i in 0..t {
        for j in 0..t {
            let mut acc = 0.0f64;
            for k in 0..d {
                acc += f64::from(h[i * d + k]) * f64::from(h[j * d + k]);
            }
            s[i * t + j] = acc;
        }
    }
    s
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    a == b || (a - b).abs() <= tol * a.abs().max(b.abs())
}

pub fn softmax_rows(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(n * n);
    for _ in 0..n {
        let logits: Vec<f64> = (0..n).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| (v / z) as f32));
    }
    out
}

const VOCAB: &[&str] = &["a", "b", "c", "war", ".", ";", "[PAD]", "[SEP]", "[CLS]", "é", "日本"];

pub fn random_tokens(rng: &mut ChaCha8Rng, n: usize) -> Vec<Token> {
    (0..n)
        .map(|_| {
            let k = rng.random_range(0..VOCAB.len());
            Token::new(k as u32, VOCAB[k])
        })
        .collect()
}

/// Record with arbitrary small dims, random tokens and bit patterns that
/// stress the codec (negative zero, subnormals, large magnitudes).
pub fn random_record(rng: &mut ChaCha8Rng) -> SampleRecord {
    let dims = Dims::new(
        rng.random_range(1..=3),
        rng.random_range(1..=4),
        rng.random_range(1..=20),
        rng.random_range(1..=8),
    );
    let t = dims.seq_len;
    let mut attention = Vec::new();
    for _ in 0..dims.layers * dims.heads {
        attention.extend(softmax_rows(rng, t));
    }
    let mut head_outputs = normal_matrix(rng, dims.layers * dims.heads * t, dims.head_dim);
    for v in head_outputs.iter_mut() {
        match rng.random_range(0..50) {
            0 => *v = -0.0,
            1 => *v = f32::from_bits(rng.random_range(1..0x0080_0000)),
            2 => *v *= 1e30,
            _ => {}
        }
    }
    let sentence_ids = rng
        .random_bool(0.5)
        .then(|| (0..t).map(|_| rng.random_range(0..t as u16)).collect());
    let name_len = rng.random_range(0..12);
    SampleRecord {
        model_name: (0..name_len).map(|_| ['x', 'ß', '-', '7'][rng.random_range(0..4)]).collect(),
        dims,
        tokens: random_tokens(rng, t),
        sentence_ids,
        attention,
        head_outputs,
    }
}

/// Sentence id by counting earlier separators; `None` for `[SEP]`/`[PAD]`.
pub fn oracle_sentence_ids(texts: &[&str], separators: &[&str]) -> Vec<Option<u32>> {
    (0..texts.len())
        .map(|k| {
            if texts[k] == "[SEP]" || texts[k] == "[PAD]" {
                return None;
            }
            let before = (0..k)
                .filter(|&p| texts[p] != "[SEP]" && texts[p] != "[PAD]" && separators.contains(&texts[p]))
                .count();
            Some(before as u32)
        })
        .collect()
}

// Brute-force reference values for one instance.
pub struct Oracle {
    pub repeat: usize,
    pub repeat_same: usize,
    pub same: usize,
    pub eligible: usize,
    pub distance_sum: u64,
    pub modal: Option<(String, usize)>,
}

pub fn oracle(texts: &[&str], pairs: &[(usize, usize)]) -> Oracle {
    let ids = oracle_sentence_ids(texts, &[".", ";"]);
    let mut o = Oracle {
        repeat: 0,
        repeat_same: 0,
        same: 0,
        eligible: 0,
        distance_sum: 0,
        modal: None,
    };
    for &(i, j) in pairs {
        let same_sentence = matches!((ids[i], ids[j]), (Some(a), Some(b)) if a == b);
        if texts[i] == texts[j] {
            o.repeat += 1;
            if same_sentence {
                o.repeat_same += 1;
            }
        }
        if ids[i].is_some() && ids[j].is_some() {
            o.eligible += 1;
            if same_sentence {
                o.same += 1;
            }
        }
        o.distance_sum += (j - i) as u64;
    }
    let distinct: BTreeSet<&str> = texts.iter().copied().collect();
    for w in distinct {
        let c = pairs.iter().filter(|&&(i, j)| texts[i] == w || texts[j] == w).count();
        if c > 0 && o.modal.as_ref().is_none_or(|(_, best)| c > *best) {
            o.modal = Some((w.to_string(), c));
        }
    }
    o
}

/// Compares two JSON trees: integers exactly, floats to `rel` relative.
pub fn json_diff(a: &Value, b: &Value, rel: f64, path: &str, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => {
            if x.is_f64() || y.is_f64() {
                let (fx, fy) = (x.as_f64().unwrap(), y.as_f64().unwrap());
                if !rel_close(fx, fy, rel) {
                    out.push(format!("{path}: {fx} vs {fy}"));
                }
            } else if x != y {
                out.push(format!("{path}: {x} vs {y} (integer)"));
            }
        }
        (Value::Array(xs), Value::Array(ys)) => {
            if xs.len() != ys.len() {
                out.push(format!("{path}: length {} vs {}", xs.len(), ys.len()));
                return;
            }
            for (k, (x, y)) in xs.iter().zip(ys).enumerate() {
                json_diff(x, y, rel, &format!("{path}[{k}]"), out);
            }
        }
        (Value::Object(xs), Value::Object(ys)) => {
            for (k, x) in xs {
                match ys.get(k) {
                    Some(y) => json_diff(x, y, rel, &format!("{path}.{k}"), out),
                    None => out.push(format!("{path}.{k} missing")),
                }
            }
        }
        _ => {
            if a != b {
                out.push(format!("{path}: {a} vs {b}"));
            }
        }
    }
}

/// Token listing of the four-sentence company-history example (128 tokens).
pub const COMPANY_TEXT: [&str; 128] = [
    "[CLS]", "the", "ge", "##rsten", "##sl", "##ager", "company", "was", "a", "maker", "of", "past",
    "model", "body", "panels", "for", "several", "major", "auto", "makers", ".", "in", "the",
    "1950s", "the", "company", "was", "best", "known", "for", "making", "large", "custom",
    "vehicles", "such", "as", "book", "##mobile", "##s", ",", "canteen", "##s", "and", "mobile",
    "television", "units", ".", "history", "the", "company", "started", "in", "1860", "as", "a",
    "carriage", "factory", "known", "as", "the", "we", "##he", "company", "in", "marshall",
    "##ville", ",", "ohio", ".", "in", "1882", "blacksmith", "george", "ge", "##rsten", "##sl",
    "##ager", "went", "to", "work", "for", "the", "company", ",", "and", "by", "1904", "was",
    "the", "owner", "and", "ep", "##ony", "##m", ".", "in", "1907", ",", "the", "company",
    "moved", "to", "woo", "##ster", ",", "ohio", ".", "in", "the", "early", "1920s", ",", "ge",
    "##rsten", "##sl", "##ager", "changed", "from", "production", "of", "bug", "##gies", ",",
    "surrey", "##s", "and", "wagons", "[SEP]",
];

/// Token listing of the airport-policing example (128 tokens).
pub const AIRPORT_TEXT: [&str; 128] = [
    "[CLS]", "airport", "policing", "in", "the", "united", "kingdom", "has", "taken", "many",
    "forms", "since", "the", "rise", "of", "scheduled", "airline", "services", "in", "the",
    "post", "-", "war", "period", ".", "policing", "at", "major", "civilian", "airports", "was",
    "the", "responsibility", "of", "specialist", "con", "##sta", "##bular", "##ies", "operated",
    "by", "three", "central", "government", "departments", "until", "1974", ",", "when", "the",
    "rise", "in", "international", "terrorism", "saw", "armed", "police", "from", "territorial",
    "police", "forces", "deployed", "to", "major", "airports", "under", "the", "provisions", "of",
    "the", "policing", "of", "airports", "act", ".", "as", "more", "minor", "airports", "grew",
    "in", "size", ",", "they", "too", "switched", "to", "armed", "police", "provided", "by",
    "local", "police", "forces", ".", "however", ",", "the", "funding", "agreements", "for",
    "the", "provision", "of", "such", "services", "varied", "wildly", "from", "airport", "to",
    "airport", ",", "leading", "to", "disagreements", "between", "airport", "operators", "and",
    "chief", "constable", "##s", ".", "a", "new", "regime", "[SEP]",
];

/// `(token_i, token_j, index_i, index_j)` rows of the exemplary pair tables.
pub const HEAD7_PAIRS: &[(&str, &str, usize, usize)] = &[
    ("war", "central", 22, 42),
    ("war", "government", 22, 43),
    ("war", "1974", 22, 46),
    ("war", "act", 22, 73),
    ("civilian", "central", 28, 42),
    ("civilian", "government", 28, 43),
    ("civilian", "1974", 28, 46),
    ("three", "central", 41, 42),
    ("three", "government", 41, 43),
    ("three", "act", 41, 73),
    ("central", "government", 42, 43),
    ("central", "1974", 42, 46),
    ("central", "act", 42, 73),
    ("government", "1974", 43, 46),
    ("government", "act", 43, 73),
    ("1974", "territorial", 46, 58),
    ("1974", "act", 46, 73),
    ("1974", "minor", 46, 77),
];

pub const HEAD5_PAIRS: &[(&str, &str, usize, usize)] = &[
    ("post", "war", 20, 22),
    ("major", "major", 27, 63),
    ("saw", "deployed", 54, 61),
    ("saw", "switched", 54, 85),
    ("police", "policing", 56, 70),
    ("police", "police", 56, 88),
    ("deployed", "switched", 61, 85),
    ("major", "minor", 63, 77),
    ("policing", "police", 70, 88),
];

pub const HEAD8_PAIRS: &[(&str, &str, usize, usize)] = &[
    ("airport", "airport", 1, 109),
    ("in", "the", 18, 19),
    ("in", "in", 18, 51),
    ("airports", "airport", 29, 109),
    ("airports", "airport", 64, 109),
    ("from", "to", 108, 110),
    ("airport", "airport", 109, 111),
    ("airport", "airport", 109, 117),
];

pub fn to_tokens(texts: &[&str]) -> Vec<Token> {
    texts
        .iter()
        .enumerate()
        .map(|(k, t)| Token::new(k as u32, *t))
        .collect()
}
