//! Context similarity matrices: the Gram matrix of one head's output vectors,
//! and the masks and pair sets derived from it.
//!
//! The pipeline order is fixed: [`context_similarity`] → [`zero_diagonal`] →
//! [`normalize_by_max`] → [`threshold_mask`] → [`extract_pairs`].

use serde::Serialize;

use crate::config::ExclusionPolicy;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tensor_io::Token;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimMatrix {
    pub values: Matrix,
    pub layer: usize,
    pub head: usize,
    pub diagonal_zeroed: bool,
    /// Set by [`normalize_by_max`].
    pub normalized: bool,
    /// Normalization found no positive entry; every value is zero.
    pub degenerate: bool,
}

impl SimMatrix {
    pub fn with_location(mut self, layer: usize, head: usize) -> Self {
        self.layer = layer;
        self.head = head;
        self
    }

    pub fn size(&self) -> usize {
        self.values.rows()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.get(i, j)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HighSimMask {
    n: usize,
    bits: Vec<bool>,
    pub threshold_bits: u64,
    pub layer: usize,
    pub head: usize,
}

impl HighSimMask {
    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    pub fn threshold(&self) -> f64 {
        f64::from_bits(self.threshold_bits)
    }

    /// Number of set bits strictly above the diagonal.
    pub fn count_upper(&self) -> usize {
        (0..self.n)
            .map(|i| (i + 1..self.n).filter(|&j| self.get(i, j)).count())
            .sum()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Pair {
    pub i: usize,
    pub j: usize,
    pub value: f64,
}

impl Pair {
    pub fn distance(&self) -> usize {
        self.j - self.i
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairSet {
    /// Sorted by `(i, j)`, with `i < j`.
    pub pairs: Vec<Pair>,
    /// Upper-triangle mask bits dropped by the exclusion policy.
    pub excluded: usize,
    pub exclusion_policy: ExclusionPolicy,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Pair> {
        self.pairs.iter()
    }

    /// Builds a set directly from index pairs, for callers that already hold
    /// a selection. Indices are reordered so `i < j`; self-pairs and
    /// duplicates are dropped.
    pub fn from_indices(indices: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut pairs: Vec<Pair> = indices
            .into_iter()
            .filter(|(a, b)| a != b)
            .map(|(a, b)| Pair {
                i: a.min(b),
                j: a.max(b),
                value: 1.0,
            })
            .collect();
        pairs.sort_by_key(|p| (p.i, p.j));
        pairs.dedup_by_key(|p| (p.i, p.j));
        Self {
            pairs,
            excluded: 0,
            exclusion_policy: ExclusionPolicy::none(),
        }
    }
}

const TILE: usize = 32;

/// `S = H · Hᵀ` for a row-major `seq_len × head_dim` head output.
///
/// Only the upper triangle is computed, in cache-sized tiles, and mirrored,
/// so the result is exactly symmetric. Accumulation is in `f64`.
pub fn context_similarity(head_output: &[f32], seq_len: usize, head_dim: usize) -> Result<SimMatrix> {
    if head_output.len() != seq_len * head_dim {
        return Err(Error::ShapeMismatch {
            expected: format!("{seq_len}x{head_dim} head output"),
            actual: format!("{} values", head_output.len()),
        });
    }
    if let Some(k) = head_output.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            row: k / head_dim.max(1),
            col: k % head_dim.max(1),
            value: head_output[k],
        });
    }
    let rows: Vec<f64> = head_output.iter().map(|&v| f64::from(v)).collect();
    let (t, d) = (seq_len, head_dim);
    let mut out = vec![0.0f64; t * t];
    for ib in (0..t).step_by(TILE) {
        let iend = (ib + TILE).min(t);
        for jb in (ib..t).step_by(TILE) {
            let jend = (jb + TILE).min(t);
            for i in ib..iend {
                let ri = &rows[i * d..(i + 1) * d];
                for j in jb.max(i)..jend {
                    let v = dot(ri, &rows[j * d..(j + 1) * d]);
                    out[i * t + j] = v;
                    out[j * t + i] = v;
                }
            }
        }
    }
    Ok(SimMatrix {
        values: Matrix::from_vec(t, t, out),
        layer: 0,
        head: 0,
        diagonal_zeroed: false,
        normalized: false,
        degenerate: false,
    })
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ta.iter().zip(tb) {
        s += x * y;
    }
    s
}

/// Sets the diagonal (the squared vector norms) to zero. Idempotent.
pub fn zero_diagonal(mut s: SimMatrix) -> SimMatrix {
    for i in 0..s.size() {
        s.values.set(i, i, 0.0);
    }
    s.diagonal_zeroed = true;
    s
}

/// Divides every entry by the largest signed entry. With no positive entry
/// the result is all zeros and flagged degenerate.
pub fn normalize_by_max(s: &SimMatrix) -> Result<SimMatrix> {
    if !s.diagonal_zeroed {
        return Err(Error::DiagonalNotZeroed);
    }
    let m = s
        .values
        .as_slice()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let n = s.size();
    let mut out = s.clone();
    out.normalized = true;
    if m > 0.0 {
        for v in out.values.as_mut_slice() {
            *v /= m;
        }
        out.degenerate = false;
    } else {
        out.values = Matrix::zeros(n, n);
        out.degenerate = true;
    }
    Ok(out)
}

/// Marks entries at or above `threshold`; the diagonal is never set.
pub fn threshold_mask(s_norm: &SimMatrix, threshold: f64) -> Result<HighSimMask> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidThreshold {
            name: "threshold",
            value: threshold,
        });
    }
    if !s_norm.normalized {
        return Err(Error::NotNormalized);
    }
    let n = s_norm.size();
    let mut bits = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            bits[i * n + j] = i != j && s_norm.get(i, j) >= threshold;
        }
    }
    Ok(HighSimMask {
        n,
        bits,
        threshold_bits: threshold.to_bits(),
        layer: s_norm.layer,
        head: s_norm.head,
    })
}

/// Collects the upper-triangle pairs of `mask`, minus those touching a token
/// excluded by `policy`.
pub fn extract_pairs(
    mask: &HighSimMask,
    s_norm: &SimMatrix,
    tokens: &[Token],
    policy: &ExclusionPolicy,
) -> Result<PairSet> {
    let n = mask.size();
    if s_norm.size() != n || tokens.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n}x{n} mask, matrix and {n} tokens"),
            actual: format!(
                "{0}x{0} matrix, {1} tokens",
                s_norm.size(),
                tokens.len()
            ),
        });
    }
    let dropped: Vec<bool> = tokens.iter().map(|t| policy.excludes(&t.text)).collect();
    let mut pairs = Vec::new();
    let mut excluded = 0;
    for i in 0..n {
        for j in i + 1..n {
            if !mask.get(i, j) {
                continue;
            }
            if dropped[i] || dropped[j] {
                excluded += 1;
            } else {
                pairs.push(Pair {
                    i,
                    j,
                    value: s_norm.get(i, j),
                });
            }
        }
    }
    Ok(PairSet {
        pairs,
        excluded,
        exclusion_policy: policy.clone(),
    })
}

/// Histogram of upper-triangle normalized values: `bins` equal-width bins over
/// `[0, 1]`, with negatives counted separately.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValueHistogram {
    pub negative: u64,
    pub bins: Vec<u64>,
}

pub fn value_histogram(s_norm: &SimMatrix, bins: usize) -> ValueHistogram {
    let mut h = ValueHistogram {
        negative: 0,
        bins: vec![0; bins],
    };
    let n = s_norm.size();
    for i in 0..n {
        for j in i + 1..n {
            let v = s_norm.get(i, j);
            if v < 0.0 {
                h.negative += 1;
            } else {
                let b = ((v * bins as f64) as usize).min(bins - 1);
                h.bins[b] += 1;
            }
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn onehot() -> SimMatrix {
        context_similarity(&[1.0, 0.0, 0.0, 1.0, 1.0, 0.0], 3, 2).unwrap()
    }

    fn from_rows(rows: &[&[f64]]) -> SimMatrix {
        let n = rows.len();
        SimMatrix {
            values: Matrix::from_fn(n, n, |i, j| rows[i][j]),
            layer: 0,
            head: 0,
            diagonal_zeroed: true,
            normalized: false,
            degenerate: false,
        }
    }

    fn toks(texts: &[&str]) -> Vec<Token> {
        texts
            .iter()
            .enumerate()
            .map(|(k, t)| Token::new(k as u32, *t))
            .collect()
    }

    #[test]
    fn one_hot_rows() {
        let s = onehot();
        assert_eq!(
            s.values.as_slice(),
            &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]
        );
        assert!(!s.diagonal_zeroed);
    }

    #[test]
    fn zero_input() {
        let s = context_similarity(&[0.0; 12], 4, 3).unwrap();
        assert!(s.values.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_non_finite_and_bad_shape() {
        assert!(matches!(
            context_similarity(&[1.0, f32::NAN], 1, 2),
            Err(Error::NonFinite { row: 0, col: 1, .. })
        ));
        assert!(matches!(
            context_similarity(&[1.0; 5], 2, 3),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn zeroing_diagonal() {
        let z = zero_diagonal(onehot());
        assert_eq!(
            z.values.as_slice(),
            &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]
        );
        assert!(z.diagonal_zeroed);
        assert_eq!(zero_diagonal(z.clone()), z);

        let neg = from_rows(&[&[5.0, -2.0], &[-2.0, 5.0]]);
        let z = zero_diagonal(neg);
        assert_eq!(z.get(0, 1), -2.0);
        assert_eq!(z.get(0, 0), 0.0);
    }

    #[test]
    fn normalization() {
        let s = from_rows(&[&[0.0, 2.0, 4.0], &[2.0, 0.0, -1.0], &[4.0, -1.0, 0.0]]);
        let n = normalize_by_max(&s).unwrap();
        assert_eq!(n.get(0, 1), 0.5);
        assert_eq!(n.get(0, 2), 1.0);
        assert_eq!(n.get(1, 2), -0.25);
        assert!(!n.degenerate);

        let z = normalize_by_max(&from_rows(&[&[0.0, 0.0], &[0.0, 0.0]])).unwrap();
        assert!(z.degenerate);

        let allneg = normalize_by_max(&from_rows(&[&[0.0, -3.0], &[-3.0, 0.0]])).unwrap();
        assert!(allneg.degenerate);
        assert!(allneg.values.as_slice().iter().all(|&v| v == 0.0));

        assert!(matches!(normalize_by_max(&onehot()), Err(Error::DiagonalNotZeroed)));
    }

    #[test]
    fn threshold_boundary() {
        let mut s = from_rows(&[
            &[0.0, 0.05, 0.29, 0.30, 0.31],
            &[0.05, 0.0, 0.0, 0.0, 0.0],
            &[0.29, 0.0, 0.0, 0.0, 0.0],
            &[0.30, 0.0, 0.0, 0.0, 1.0],
            &[0.31, 0.0, 0.0, 1.0, 0.0],
        ]);
        s.normalized = true;
        let m = threshold_mask(&s, 0.3).unwrap();
        let row: Vec<bool> = (1..5).map(|j| m.get(0, j)).collect();
        assert_eq!(row, vec![false, false, true, true]);
        assert!(!m.get(0, 0));

        let max_only = threshold_mask(&s, 1.0).unwrap();
        assert_eq!(max_only.count_upper(), 1);

        assert!(threshold_mask(&s, 0.0).is_err());
        assert!(threshold_mask(&s, 1.01).is_err());
    }

    #[test]
    fn below_threshold_is_empty() {
        let mut s = from_rows(&[&[0.0, 0.1], &[0.1, 0.0]]);
        s.normalized = true;
        assert_eq!(threshold_mask(&s, 0.3).unwrap().count(), 0);
        s.normalized = false;
        assert!(matches!(threshold_mask(&s, 0.3), Err(Error::NotNormalized)));
    }

    fn mask_with(n: usize, ones: &[(usize, usize)]) -> (HighSimMask, SimMatrix) {
        let mut v = Matrix::zeros(n, n);
        for &(i, j) in ones {
            v.set(i, j, 1.0);
            v.set(j, i, 1.0);
        }
        let s = SimMatrix {
            values: v,
            layer: 0,
            head: 0,
            diagonal_zeroed: true,
            normalized: true,
            degenerate: false,
        };
        (threshold_mask(&s, 0.3).unwrap(), s)
    }

    #[test]
    fn pair_dedup_and_exclusion() {
        let tokens = toks(&["a"; 12]);
        let (m, s) = mask_with(12, &[(2, 10)]);
        let p = extract_pairs(&m, &s, &tokens, &ExclusionPolicy::default()).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!((p.pairs[0].i, p.pairs[0].j), (2, 10));

        let (m, s) = mask_with(12, &[]);
        assert!(extract_pairs(&m, &s, &tokens, &ExclusionPolicy::default())
            .unwrap()
            .is_empty());

        let mut tokens = toks(&["a"; 4]);
        tokens[3].text = "[PAD]".into();
        let (m, s) = mask_with(4, &[(0, 3), (0, 1)]);
        let p = extract_pairs(&m, &s, &tokens, &ExclusionPolicy::default()).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.excluded, 1);
        assert_eq!(p.len() + p.excluded, m.count_upper());
        let keep_all = extract_pairs(&m, &s, &tokens, &ExclusionPolicy::none()).unwrap();
        assert_eq!(keep_all.len(), 2);
    }

    #[test]
    fn histogram_of_values() {
        let mut s = from_rows(&[&[0.0, 1.0, -0.5], &[1.0, 0.0, 0.3], &[-0.5, 0.3, 0.0]]);
        s.normalized = true;
        let h = value_histogram(&s, 10);
        assert_eq!(h.negative, 1);
        assert_eq!(h.bins[9], 1);
        assert_eq!(h.bins[3] + h.bins[2], 1);
    }
}
