//! Attention-map manipulation: corpus sums, diagonal-offset profiles,
//! column/diagonal zeroing, separator detection from column strength, and
//! segment-wise averaging of similarity matrices.

use std::ops::Range;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::sum::{from_fixed, to_fixed};
use crate::tensor_io::SampleRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum HeadSel {
    Head(usize),
    All,
}

/// Elementwise sum of attention maps over samples.
///
/// Entries are stored on a fixed-point grid so the sum does not depend on the
/// order in which maps are added or partial sums are merged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionSum {
    n: usize,
    fixed: Vec<u64>,
    pub sample_count: u64,
    pub layer: usize,
    pub head: HeadSel,
}

impl AttentionSum {
    pub fn new(n: usize, layer: usize, head: HeadSel) -> Self {
        Self {
            n,
            fixed: vec![0; n * n],
            sample_count: 0,
            layer,
            head,
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn add_map(&mut self, map: &[f32]) -> Result<()> {
        if map.len() != self.n * self.n {
            return Err(shape_err(self.n, map.len()));
        }
        for (acc, &v) in self.fixed.iter_mut().zip(map) {
            *acc += to_fixed(f64::from(v));
        }
        self.sample_count += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &AttentionSum) -> Result<()> {
        if other.n != self.n {
            return Err(shape_err(self.n, other.n * other.n));
        }
        for (a, b) in self.fixed.iter_mut().zip(&other.fixed) {
            *a += b;
        }
        self.sample_count += other.sample_count;
        Ok(())
    }

    pub fn values(&self) -> Matrix {
        Matrix::from_vec(self.n, self.n, self.fixed.iter().map(|&v| from_fixed(v)).collect())
    }

    pub fn raw(&self) -> &[u64] {
        &self.fixed
    }
}

fn shape_err(n: usize, got: usize) -> Error {
    Error::ShapeMismatch {
        expected: format!("{n}x{n} attention map"),
        actual: format!("{got} values"),
    }
}

/// Sums a sequence of `n × n` maps. An empty sequence yields zeros with a
/// sample count of 0.
pub fn sum_attention<'a, I>(n: usize, maps: I) -> Result<AttentionSum>
where
    I: IntoIterator<Item = &'a [f32]>,
{
    let mut acc = AttentionSum::new(n, 0, HeadSel::All);
    for m in maps {
        acc.add_map(m)?;
    }
    Ok(acc)
}

/// Elementwise sum of one layer's head maps for a single input.
pub fn sum_heads(n: usize, layer_maps: &[&[f32]]) -> Result<Matrix> {
    let mut out = Matrix::zeros(n, n);
    for m in layer_maps {
        if m.len() != n * n {
            return Err(shape_err(n, m.len()));
        }
        for (a, &v) in out.as_mut_slice().iter_mut().zip(m.iter()) {
            *a += f64::from(v);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OffsetMass {
    pub offset: i64,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OffsetProfile {
    /// Ascending offsets `-max_offset..=max_offset`; `offset = j - i`.
    pub entries: Vec<OffsetMass>,
    /// `None` when the matrix has no mass.
    pub argmax: Option<i64>,
    pub total_mass: f64,
}

/// Fraction of total mass on each diagonal `j - i = k`, `|k| <= max_offset`.
///
/// Ties for the argmax go to the offset closest to 0, then to the negative
/// side.
pub fn diagonal_offset_profile(a: &Matrix, max_offset: usize) -> OffsetProfile {
    let total = a.total();
    let k = max_offset as i64;
    let entries: Vec<OffsetMass> = (-k..=k)
        .map(|offset| {
            let mut s = 0.0;
            for i in 0..a.rows() as i64 {
                let j = i + offset;
                if j >= 0 && j < a.cols() as i64 {
                    s += a.get(i as usize, j as usize);
                }
            }
            OffsetMass {
                offset,
                mass: if total > 0.0 { s / total } else { 0.0 },
            }
        })
        .collect();
    let argmax = if total > 0.0 {
        let mut order: Vec<&OffsetMass> = entries.iter().collect();
        order.sort_by_key(|e| (e.offset.abs(), e.offset > 0));
        let mut best = order[0];
        for e in order {
            if e.mass > best.mass {
                best = e;
            }
        }
        Some(best.offset)
    } else {
        None
    };
    OffsetProfile {
        entries,
        argmax,
        total_mass: total,
    }
}

/// Zeroes the `k` columns with the largest sums, ties to the lower index.
/// Returns the zeroed matrix and the removed columns, largest first.
pub fn zero_top_columns(a: &Matrix, k: usize) -> Result<(Matrix, Vec<usize>)> {
    if k >= a.cols() && k > 0 {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must be below the column count {}",
            a.cols()
        )));
    }
    let sums = a.column_sums();
    let mut order: Vec<usize> = (0..a.cols()).collect();
    order.sort_by(|&x, &y| sums[y].total_cmp(&sums[x]).then(x.cmp(&y)));
    order.truncate(k);
    let mut out = a.clone();
    for &c in &order {
        for i in 0..out.rows() {
            out.set(i, c, 0.0);
        }
    }
    Ok((out, order))
}

/// Zeroes every entry with `|i - j| <= bandwidth`.
pub fn zero_diagonal_band(a: &Matrix, bandwidth: usize) -> Matrix {
    let mut out = a.clone();
    for i in 0..out.rows() {
        let lo = i.saturating_sub(bandwidth);
        let hi = (i + bandwidth + 1).min(out.cols());
        for j in lo..hi {
            out.set(i, j, 0.0);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColumnStrength {
    pub values: Vec<f64>,
    pub degenerate: bool,
    pub layer: usize,
    pub head: HeadSel,
}

impl ColumnStrength {
    /// True when no column stands out: every strength is equal.
    pub fn is_flat(&self) -> bool {
        self.degenerate || self.values.windows(2).all(|w| w[0] == w[1])
    }
}

/// Column sums divided by the largest column sum.
pub fn column_strength(a: &Matrix) -> ColumnStrength {
    let sums = a.column_sums();
    let m = sums.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (values, degenerate) = if m > 0.0 {
        (sums.iter().map(|&s| s / m).collect(), false)
    } else {
        (vec![0.0; sums.len()], true)
    };
    ColumnStrength {
        values,
        degenerate,
        layer: 0,
        head: HeadSel::All,
    }
}

/// Separator columns and the segments they close.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SegmentIndex {
    pub boundaries: Vec<usize>,
    /// Half-open ranges tiling `[0, n)`. Each boundary token ends its segment.
    pub segments: Vec<Range<usize>>,
}

impl SegmentIndex {
    /// `boundaries` must be strictly increasing and below `n`.
    pub fn from_boundaries(boundaries: Vec<usize>, n: usize) -> Result<Self> {
        if boundaries.windows(2).any(|w| w[0] >= w[1]) || boundaries.last().is_some_and(|&b| b >= n) {
            return Err(Error::InvalidArgument(format!(
                "boundaries {boundaries:?} must be strictly increasing and below {n}"
            )));
        }
        let mut segments = Vec::with_capacity(boundaries.len() + 1);
        let mut start = 0;
        for &b in &boundaries {
            segments.push(start..b + 1);
            start = b + 1;
        }
        if start < n {
            segments.push(start..n);
        }
        Ok(Self {
            boundaries,
            segments,
        })
    }

    pub fn single(n: usize) -> Self {
        Self {
            boundaries: Vec::new(),
            segments: if n > 0 { vec![0..n] } else { Vec::new() },
        }
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Segment index of every token.
    pub fn membership(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for (k, r) in self.segments.iter().enumerate() {
            out.extend(std::iter::repeat(k).take(r.len()));
        }
        out
    }

    fn tiles(&self, n: usize) -> bool {
        let mut next = 0;
        for r in &self.segments {
            if r.start != next || r.end <= r.start {
                return false;
            }
            next = r.end;
        }
        next == n
    }
}

/// Tokens whose column strength reaches `col_threshold` become boundaries.
pub fn high_attention_tokens(strength: &ColumnStrength, col_threshold: f64) -> Result<SegmentIndex> {
    if !(col_threshold > 0.0 && col_threshold <= 1.0) {
        return Err(Error::InvalidThreshold {
            name: "col_threshold",
            value: col_threshold,
        });
    }
    let boundaries = strength
        .values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s >= col_threshold)
        .map(|(k, _)| k)
        .collect();
    SegmentIndex::from_boundaries(boundaries, strength.values.len())
}

/// Segments one sample at `layer` from its all-head summed attention.
///
/// A flat column profile (uniform attention or no mass) has no separator to
/// find and yields a single segment.
pub fn segment_layer(
    record: &SampleRecord,
    layer: usize,
    col_threshold: f64,
) -> Result<(ColumnStrength, SegmentIndex)> {
    let d = &record.dims;
    if layer >= d.layers {
        return Err(Error::DimensionMismatch(format!(
            "layer {layer} requested but the model has {} layers",
            d.layers
        )));
    }
    let maps: Vec<&[f32]> = (0..d.heads).map(|h| record.attention_map(layer, h)).collect();
    let summed = sum_heads(d.seq_len, &maps)?;
    let mut strength = column_strength(&summed);
    strength.layer = layer;
    let segments = if strength.is_flat() {
        if !(col_threshold > 0.0 && col_threshold <= 1.0) {
            return Err(Error::InvalidThreshold {
                name: "col_threshold",
                value: col_threshold,
            });
        }
        SegmentIndex::single(d.seq_len)
    } else {
        high_attention_tokens(&strength, col_threshold)?
    };
    Ok((strength, segments))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionAverage {
    /// `K × K` block means.
    pub means: Matrix,
    /// Blocks with no cells to average (a one-token segment against itself);
    /// their mean is reported as 0.
    pub undefined: Vec<bool>,
}

/// Mean of `s` over every `segment_a × segment_b` rectangle, skipping the
/// diagonal cells of `s` inside diagonal blocks.
pub fn region_average(s: &Matrix, segments: &SegmentIndex) -> Result<RegionAverage> {
    let n = s.rows();
    if !s.is_square() || !segments.tiles(n) {
        return Err(Error::InvalidArgument(format!(
            "segments must tile [0, {n}) of a square matrix"
        )));
    }
    let k = segments.len();
    let mut means = Matrix::zeros(k, k);
    let mut undefined = vec![false; k * k];
    for (a, ra) in segments.segments.iter().enumerate() {
        for (b, rb) in segments.segments.iter().enumerate() {
            let mut sum = 0.0;
            let mut count = 0usize;
            for i in ra.clone() {
                for j in rb.clone() {
                    if i != j {
                        sum += s.get(i, j);
                        count += 1;
                    }
                }
            }
            if count == 0 {
                undefined[a * k + b] = true;
            } else {
                means.set(a, b, sum / count as f64);
            }
        }
    }
    Ok(RegionAverage { means, undefined })
}
