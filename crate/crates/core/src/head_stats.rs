//! Per-head behavioral statistics over a high-similarity [`PairSet`].
//!
//! Every statistic that divides by a pair count returns `None` when that count
//! is zero, so corpus means only include samples where the statistic exists.

use std::collections::{BTreeSet, HashMap};

use serde::Serialize;

use crate::config::{PAD, SEP};
use crate::simmatrix::PairSet;
use crate::tensor_io::Token;

/// Sentence id assigned to `[SEP]` and `[PAD]`.
pub const SENTINEL: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SentenceMap {
    pub sentence_id: Vec<u32>,
    pub separator_set: BTreeSet<String>,
}

impl SentenceMap {
    #[inline]
    pub fn id(&self, token: usize) -> u32 {
        self.sentence_id[token]
    }

    pub fn is_sentinel(&self, token: usize) -> bool {
        self.sentence_id[token] == SENTINEL
    }

    /// Both tokens carry the same non-sentinel id.
    pub fn same_sentence(&self, i: usize, j: usize) -> bool {
        let (a, b) = (self.id(i), self.id(j));
        a != SENTINEL && a == b
    }

    pub fn sentence_count(&self) -> usize {
        self.sentence_id
            .iter()
            .filter(|&&s| s != SENTINEL)
            .max()
            .map_or(0, |&m| m as usize + 1)
    }
}

/// Assigns sentence ids: a separator closes the sentence it belongs to, and
/// the next ordinary token opens a new one.
pub fn sentence_segmentation(tokens: &[Token], separators: &BTreeSet<String>) -> SentenceMap {
    let mut ids = Vec::with_capacity(tokens.len());
    let mut current = 0u32;
    let mut pending = false;
    for tok in tokens {
        if tok.text == SEP || tok.text == PAD {
            ids.push(SENTINEL);
            continue;
        }
        if pending {
            current += 1;
            pending = false;
        }
        ids.push(current);
        if separators.contains(&tok.text) {
            pending = true;
        }
    }
    SentenceMap {
        sentence_id: ids,
        separator_set: separators.clone(),
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn same_text(tokens: &[Token], i: usize, j: usize) -> bool {
    tokens[i].text == tokens[j].text
}

pub fn repeat_token_count(pairs: &PairSet, tokens: &[Token]) -> usize {
    pairs.iter().filter(|p| same_text(tokens, p.i, p.j)).count()
}

/// Fraction of pairs whose two tokens have the same text.
pub fn repeat_token_probability(pairs: &PairSet, tokens: &[Token]) -> Option<f64> {
    ratio(repeat_token_count(pairs, tokens), pairs.len())
}

pub fn repeat_same_sentence_count(pairs: &PairSet, tokens: &[Token], sentences: &SentenceMap) -> usize {
    pairs
        .iter()
        .filter(|p| same_text(tokens, p.i, p.j) && sentences.same_sentence(p.i, p.j))
        .count()
}

/// Fraction of all pairs that repeat a token within one sentence.
pub fn repeat_token_same_sentence_probability(
    pairs: &PairSet,
    tokens: &[Token],
    sentences: &SentenceMap,
) -> Option<f64> {
    ratio(repeat_same_sentence_count(pairs, tokens, sentences), pairs.len())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceHistogram {
    /// `counts[d]` for `d` in `0..n`; `counts[0]` is always 0.
    pub counts: Vec<u64>,
    pub total: u64,
    pub distance_sum: u64,
}

impl DistanceHistogram {
    pub fn new(n: usize) -> Self {
        Self {
            counts: vec![0; n.max(1)],
            total: 0,
            distance_sum: 0,
        }
    }

    pub fn mean(&self) -> Option<f64> {
        (self.total > 0).then(|| self.distance_sum as f64 / self.total as f64)
    }

    pub fn merge(&mut self, other: &DistanceHistogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
        self.distance_sum += other.distance_sum;
    }

    /// Fraction of the mass at distance `<= d`.
    pub fn fraction_within(&self, d: usize) -> Option<f64> {
        let within: u64 = self.counts.iter().take(d + 1).sum();
        (self.total > 0).then(|| within as f64 / self.total as f64)
    }
}

/// Counts of `j - i` over pairs, for a sequence of length `n`.
pub fn pair_distance_histogram(pairs: &PairSet, n: usize) -> DistanceHistogram {
    let mut h = DistanceHistogram::new(n);
    for p in pairs.iter() {
        let d = p.distance();
        h.counts[d] += 1;
        h.total += 1;
        h.distance_sum += d as u64;
    }
    h
}

/// `(same-sentence pairs, pairs with no sentinel endpoint)`.
pub fn same_sentence_counts(pairs: &PairSet, sentences: &SentenceMap) -> (usize, usize) {
    let mut same = 0;
    let mut eligible = 0;
    for p in pairs.iter() {
        if sentences.is_sentinel(p.i) || sentences.is_sentinel(p.j) {
            continue;
        }
        eligible += 1;
        if sentences.id(p.i) == sentences.id(p.j) {
            same += 1;
        }
    }
    (same, eligible)
}

/// Fraction of pairs within one sentence; pairs touching a sentinel token are
/// left out of both counts.
pub fn same_sentence_probability(pairs: &PairSet, sentences: &SentenceMap) -> Option<f64> {
    let (same, eligible) = same_sentence_counts(pairs, sentences);
    ratio(same, eligible)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModalToken {
    pub token: String,
    /// Pairs containing the token, each pair counted once.
    pub count: usize,
    pub concentration: f64,
}

/// The token text present in the most pairs. Ties go to the
/// lexicographically smallest text.
pub fn modal_token_concentration(pairs: &PairSet, tokens: &[Token]) -> Option<ModalToken> {
    if pairs.is_empty() {
        return None;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for p in pairs.iter() {
        let (a, b) = (tokens[p.i].text.as_str(), tokens[p.j].text.as_str());
        *counts.entry(a).or_default() += 1;
        if a != b {
            *counts.entry(b).or_default() += 1;
        }
    }
    let (token, count) = counts
        .into_iter()
        .max_by(|x, y| x.1.cmp(&y.1).then_with(|| y.0.cmp(x.0)))
        .expect("non-empty");
    Some(ModalToken {
        token: token.to_string(),
        count,
        concentration: count as f64 / pairs.len() as f64,
    })
}

/// Distinct modal tokens among the heads that have one.
pub fn unique_modal_tokens<'a, I>(per_head_modals: I) -> usize
where
    I: IntoIterator<Item = Option<&'a str>>,
{
    per_head_modals
        .into_iter()
        .flatten()
        .collect::<BTreeSet<_>>()
        .len()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadStats {
    pub layer: usize,
    pub head: usize,
    pub pair_count: usize,
    pub repeat_count: usize,
    pub repeat_same_sentence_count: usize,
    pub same_sentence_count: usize,
    pub same_sentence_eligible: usize,
    pub repeat_prob: Option<f64>,
    pub repeat_same_sentence_prob: Option<f64>,
    pub distance_histogram: DistanceHistogram,
    pub mean_distance: Option<f64>,
    pub same_sentence_prob: Option<f64>,
    pub modal: Option<ModalToken>,
}

impl HeadStats {
    pub fn modal_token(&self) -> Option<&str> {
        self.modal.as_ref().map(|m| m.token.as_str())
    }

    pub fn modal_concentration(&self) -> Option<f64> {
        self.modal.as_ref().map(|m| m.concentration)
    }
}

pub fn compute(
    layer: usize,
    head: usize,
    pairs: &PairSet,
    tokens: &[Token],
    sentences: &SentenceMap,
) -> HeadStats {
    let distance_histogram = pair_distance_histogram(pairs, tokens.len());
    let repeat_count = repeat_token_count(pairs, tokens);
    let repeat_same_sentence_count = repeat_same_sentence_count(pairs, tokens, sentences);
    let (same, eligible) = same_sentence_counts(pairs, sentences);
    let n = pairs.len();
    HeadStats {
        layer,
        head,
        pair_count: n,
        repeat_count,
        repeat_same_sentence_count,
        same_sentence_count: same,
        same_sentence_eligible: eligible,
        repeat_prob: ratio(repeat_count, n),
        repeat_same_sentence_prob: ratio(repeat_same_sentence_count, n),
        mean_distance: distance_histogram.mean(),
        distance_histogram,
        same_sentence_prob: ratio(same, eligible),
        modal: modal_token_concentration(pairs, tokens),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(texts: &[&str]) -> Vec<Token> {
        texts
            .iter()
            .enumerate()
            .map(|(k, t)| Token::new(k as u32, *t))
            .collect()
    }

    fn seps() -> BTreeSet<String> {
        [".", ";"].into_iter().map(String::from).collect()
    }

    #[test]
    fn segmentation() {
        let s = sentence_segmentation(&toks(&["a", ".", "b", "c", "."]), &seps());
        assert_eq!(s.sentence_id, vec![0, 0, 1, 1, 1]);
        let s = sentence_segmentation(&toks(&["a", "b", "c"]), &seps());
        assert_eq!(s.sentence_id, vec![0, 0, 0]);
        let s = sentence_segmentation(&toks(&["[CLS]", "a", ";", "b", "[SEP]", "[PAD]"]), &seps());
        assert_eq!(s.sentence_id, vec![0, 0, 0, 1, SENTINEL, SENTINEL]);
        assert_eq!(s.sentence_count(), 2);
    }

    #[test]
    fn repeats() {
        let t = toks(&["a", "b", "a", "c"]);
        let p = PairSet::from_indices([(0, 2), (0, 1)]);
        assert_eq!(repeat_token_probability(&p, &t), Some(0.5));
        let all = PairSet::from_indices([(0, 2)]);
        assert_eq!(repeat_token_probability(&all, &t), Some(1.0));
        assert_eq!(repeat_token_probability(&PairSet::from_indices([]), &t), None);

        let s = sentence_segmentation(&t, &seps());
        assert_eq!(repeat_token_same_sentence_probability(&p, &t, &s), Some(0.5));

        let t = toks(&["a", ".", "a"]);
        let s = sentence_segmentation(&t, &seps());
        let p = PairSet::from_indices([(0, 2)]);
        assert_eq!(repeat_token_same_sentence_probability(&p, &t, &s), Some(0.0));
    }

    #[test]
    fn distances() {
        let p = PairSet::from_indices([(2, 10), (5, 6)]);
        let h = pair_distance_histogram(&p, 16);
        assert_eq!(h.counts[8], 1);
        assert_eq!(h.counts[1], 1);
        assert_eq!(h.total, 2);
        assert_eq!(h.mean(), Some(4.5));
        let e = pair_distance_histogram(&PairSet::from_indices([]), 16);
        assert_eq!(e.total, 0);
        assert_eq!(e.mean(), None);
    }

    #[test]
    fn same_sentence() {
        let s = SentenceMap {
            sentence_id: vec![0, 0, 1, 1],
            separator_set: seps(),
        };
        let p = PairSet::from_indices([(0, 1), (1, 2)]);
        assert_eq!(same_sentence_probability(&p, &s), Some(0.5));
        let one = SentenceMap {
            sentence_id: vec![0; 4],
            separator_set: seps(),
        };
        assert_eq!(same_sentence_probability(&p, &one), Some(1.0));

        let padded = SentenceMap {
            sentence_id: vec![0, 0, SENTINEL, SENTINEL],
            separator_set: seps(),
        };
        let p = PairSet::from_indices([(0, 1), (1, 2), (2, 3)]);
        assert_eq!(same_sentence_counts(&p, &padded), (1, 1));
    }

    #[test]
    fn modal_tokens() {
        let t = toks(&["war", "central", "government", "war", "x"]);
        let p = PairSet::from_indices([(0, 1), (0, 2), (1, 2), (0, 3)]);
        let m = modal_token_concentration(&p, &t).unwrap();
        // war appears in (0,1), (0,2), (0,3); the war-war pair counts once
        assert_eq!(m.token, "war");
        assert_eq!(m.count, 3);
        assert_eq!(m.concentration, 0.75);

        let star = PairSet::from_indices([(4, 0), (4, 1), (4, 2)]);
        assert_eq!(modal_token_concentration(&star, &t).unwrap().concentration, 1.0);

        // all distinct: every token in one pair, tie -> smallest text
        let t = toks(&["d", "c", "b", "a"]);
        let p = PairSet::from_indices([(0, 1), (2, 3)]);
        let m = modal_token_concentration(&p, &t).unwrap();
        assert_eq!(m.token, "a");
        assert_eq!(m.concentration, 0.5);

        assert!(modal_token_concentration(&PairSet::from_indices([]), &t).is_none());
    }

    #[test]
    fn unique_modals() {
        assert_eq!(unique_modal_tokens([Some("t1"), Some("t1"), Some("t2")]), 2);
        let names: Vec<String> = (0..12).map(|k| format!("t{k}")).collect();
        assert_eq!(unique_modal_tokens(names.iter().map(|s| Some(s.as_str()))), 12);
        assert_eq!(unique_modal_tokens([None, None]), 0);
    }
}
