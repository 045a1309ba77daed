//! Per-sample pipeline and mergeable corpus aggregates.
//!
//! [`process_sample`] runs every selected head of one record through the
//! similarity pipeline. [`CorpusAccumulator`] keeps only reducible sufficient
//! statistics (no pair lists), so shards can be processed independently and
//! merged in any order. Integer counters and fixed-point sums merge exactly;
//! raw similarity sums use compensated floating-point addition.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::attention::{
    diagonal_offset_profile, region_average, segment_layer, AttentionSum, ColumnStrength, HeadSel,
    OffsetProfile, RegionAverage, SegmentIndex,
};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::head_stats::{self, DistanceHistogram, HeadStats, SentenceMap};
use crate::matrix::Matrix;
use crate::simmatrix::{
    context_similarity, extract_pairs, normalize_by_max, threshold_mask, zero_diagonal, HighSimMask,
    PairSet, SimMatrix,
};
use crate::sum::{CompensatedSum, FixedSum};
use crate::tensor_io::{read_dump, Dims, SampleRecord};

/// Equal-width bins over `[0, 1]` used for every probability distribution.
pub const PDF_BINS: usize = 20;

/// Offsets reported on either side of the main diagonal.
pub const MAX_DIAGONAL_OFFSET: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadResult {
    pub layer: usize,
    pub head: usize,
    /// Raw similarity with the diagonal zeroed (not normalized).
    pub similarity: SimMatrix,
    /// Normalization found no positive off-diagonal similarity.
    pub degenerate: bool,
    pub mask: HighSimMask,
    pub pairs: PairSet,
    pub stats: HeadStats,
    pub attention: Vec<f32>,
}

impl HeadResult {
    /// Recomputes the max-normalized matrix the mask was derived from.
    pub fn normalized(&self) -> SimMatrix {
        normalize_by_max(&self.similarity).expect("diagonal is zeroed")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerResult {
    pub layer: usize,
    /// Sum of the selected heads' zero-diagonal similarity matrices.
    pub summed_similarity: Matrix,
    pub column_strength: ColumnStrength,
    pub segments: SegmentIndex,
    pub region_average: RegionAverage,
    pub unique_modal_tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleResult {
    pub fingerprint: String,
    pub dims: Dims,
    pub sentences: SentenceMap,
    /// Selected `(layer, head)` in layer-major order.
    pub heads: Vec<HeadResult>,
    pub layers: Vec<LayerResult>,
}

impl SampleResult {
    pub fn head(&self, layer: usize, head: usize) -> Option<&HeadResult> {
        self.heads.iter().find(|h| h.layer == layer && h.head == head)
    }
}

fn process_head(
    record: &SampleRecord,
    sentences: &SentenceMap,
    config: &RunConfig,
    layer: usize,
    head: usize,
) -> Result<HeadResult> {
    let d = &record.dims;
    let raw = context_similarity(record.head_output(layer, head), d.seq_len, d.head_dim)?
        .with_location(layer, head);
    let similarity = zero_diagonal(raw);
    let normalized = normalize_by_max(&similarity)?;
    let mask = threshold_mask(&normalized, config.sim_threshold)?;
    let pairs = extract_pairs(&mask, &normalized, &record.tokens, &config.exclusion)?;
    let stats = head_stats::compute(layer, head, &pairs, &record.tokens, sentences);
    Ok(HeadResult {
        layer,
        head,
        degenerate: normalized.degenerate,
        similarity,
        mask,
        pairs,
        stats,
        attention: record.attention_map(layer, head).to_vec(),
    })
}

fn check_record(record: &SampleRecord, config: &RunConfig) -> Result<()> {
    config.validate(Some(&record.dims))?;
    if record.tokens.len() != record.dims.seq_len {
        return Err(Error::DimensionMismatch(format!(
            "{} tokens for sequence length {}",
            record.tokens.len(),
            record.dims.seq_len
        )));
    }
    Ok(())
}

fn assemble(
    record: &SampleRecord,
    config: &RunConfig,
    sentences: SentenceMap,
    heads: Vec<HeadResult>,
) -> Result<SampleResult> {
    let d = &record.dims;
    let mut layers = Vec::new();
    for layer in config.selected_layers(d) {
        let in_layer: Vec<&HeadResult> = heads.iter().filter(|h| h.layer == layer).collect();
        let mut summed = Matrix::zeros(d.seq_len, d.seq_len);
        for h in &in_layer {
            summed.add_assign(&h.similarity.values);
        }
        let (column_strength, segments) = segment_layer(record, layer, config.col_threshold)?;
        let region_average = region_average(&summed, &segments)?;
        let unique_modal_tokens = head_stats::unique_modal_tokens(in_layer.iter().map(|h| h.stats.modal_token()));
        layers.push(LayerResult {
            layer,
            summed_similarity: summed,
            column_strength,
            segments,
            region_average,
            unique_modal_tokens,
        });
    }
    Ok(SampleResult {
        fingerprint: config.fingerprint(),
        dims: *d,
        sentences,
        heads,
        layers,
    })
}

/// Runs the full per-sample pipeline on one thread.
pub fn process_sample(record: &SampleRecord, config: &RunConfig) -> Result<SampleResult> {
    check_record(record, config)?;
    let sentences = head_stats::sentence_segmentation(&record.tokens, &config.separators);
    let heads = config
        .selection(&record.dims)
        .into_iter()
        .map(|(l, h)| process_head(record, &sentences, config, l, h))
        .collect::<Result<Vec<_>>>()?;
    assemble(record, config, sentences, heads)
}

/// Same result as [`process_sample`], with heads evaluated on the rayon pool.
pub fn process_sample_par(record: &SampleRecord, config: &RunConfig) -> Result<SampleResult> {
    check_record(record, config)?;
    let sentences = head_stats::sentence_segmentation(&record.tokens, &config.separators);
    let heads = config
        .selection(&record.dims)
        .into_par_iter()
        .map(|(l, h)| process_head(record, &sentences, config, l, h))
        .collect::<Result<Vec<_>>>()?;
    assemble(record, config, sentences, heads)
}

/// Running mean and per-sample distribution of one probability statistic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StatAccumulator {
    pub sum: FixedSum,
    pub defined: u64,
    pub undefined: u64,
    pub bins: Vec<u64>,
}

impl Default for StatAccumulator {
    fn default() -> Self {
        Self {
            sum: FixedSum::default(),
            defined: 0,
            undefined: 0,
            bins: vec![0; PDF_BINS],
        }
    }
}

impl StatAccumulator {
    pub fn add(&mut self, v: Option<f64>) {
        match v {
            Some(p) => {
                self.sum.add(p);
                self.defined += 1;
                self.bins[pdf_bin(p)] += 1;
            }
            None => self.undefined += 1,
        }
    }

    pub fn merge(&mut self, other: &StatAccumulator) {
        self.sum.merge(other.sum);
        self.defined += other.defined;
        self.undefined += other.undefined;
        for (a, b) in self.bins.iter_mut().zip(&other.bins) {
            *a += b;
        }
    }

    pub fn mean(&self) -> Option<f64> {
        (self.defined > 0).then(|| self.sum.value() / self.defined as f64)
    }
}

/// Bin of a probability in `[0, 1]`; 1.0 falls in the last bin.
pub fn pdf_bin(p: f64) -> usize {
    ((p.clamp(0.0, 1.0) * PDF_BINS as f64) as usize).min(PDF_BINS - 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadAccumulator {
    pub layer: usize,
    pub head: usize,
    pub attention: AttentionSum,
    pub similarity: Vec<CompensatedSum>,
    /// Strong-similarity location counts, both `(i, j)` and `(j, i)`.
    pub heat: Vec<u32>,
    pub distance: DistanceHistogram,
    pub pair_count: u64,
    pub excluded_pairs: u64,
    pub repeat_pairs: u64,
    pub repeat_same_sentence_pairs: u64,
    pub same_sentence_pairs: u64,
    pub same_sentence_eligible: u64,
    pub modal_pairs: u64,
    pub degenerate_samples: u64,
    pub repeat: StatAccumulator,
    pub repeat_same_sentence: StatAccumulator,
    pub same_sentence: StatAccumulator,
    pub modal_concentration: StatAccumulator,
}

impl HeadAccumulator {
    fn new(layer: usize, head: usize, n: usize) -> Self {
        Self {
            layer,
            head,
            attention: AttentionSum::new(n, layer, HeadSel::Head(head)),
            similarity: vec![CompensatedSum::default(); n * n],
            heat: vec![0; n * n],
            distance: DistanceHistogram::new(n),
            pair_count: 0,
            excluded_pairs: 0,
            repeat_pairs: 0,
            repeat_same_sentence_pairs: 0,
            same_sentence_pairs: 0,
            same_sentence_eligible: 0,
            modal_pairs: 0,
            degenerate_samples: 0,
            repeat: StatAccumulator::default(),
            repeat_same_sentence: StatAccumulator::default(),
            same_sentence: StatAccumulator::default(),
            modal_concentration: StatAccumulator::default(),
        }
    }

    fn add(&mut self, r: &HeadResult) -> Result<()> {
        let n = self.attention.size();
        self.attention.add_map(&r.attention)?;
        for (acc, &v) in self.similarity.iter_mut().zip(r.similarity.values.as_slice()) {
            acc.add(v);
        }
        for p in r.pairs.iter() {
            self.heat[p.i * n + p.j] += 1;
            self.heat[p.j * n + p.i] += 1;
        }
        let s = &r.stats;
        self.distance.merge(&s.distance_histogram);
        self.pair_count += s.pair_count as u64;
        self.excluded_pairs += r.pairs.excluded as u64;
        self.repeat_pairs += s.repeat_count as u64;
        self.repeat_same_sentence_pairs += s.repeat_same_sentence_count as u64;
        self.same_sentence_pairs += s.same_sentence_count as u64;
        self.same_sentence_eligible += s.same_sentence_eligible as u64;
        self.modal_pairs += s.modal.as_ref().map_or(0, |m| m.count as u64);
        self.degenerate_samples += u64::from(r.degenerate);
        self.repeat.add(s.repeat_prob);
        self.repeat_same_sentence.add(s.repeat_same_sentence_prob);
        self.same_sentence.add(s.same_sentence_prob);
        self.modal_concentration.add(s.modal_concentration());
        Ok(())
    }

    fn merge(&mut self, o: &HeadAccumulator) -> Result<()> {
        self.attention.merge(&o.attention)?;
        for (a, b) in self.similarity.iter_mut().zip(&o.similarity) {
            a.merge(*b);
        }
        for (a, b) in self.heat.iter_mut().zip(&o.heat) {
            *a += b;
        }
        self.distance.merge(&o.distance);
        self.pair_count += o.pair_count;
        self.excluded_pairs += o.excluded_pairs;
        self.repeat_pairs += o.repeat_pairs;
        self.repeat_same_sentence_pairs += o.repeat_same_sentence_pairs;
        self.same_sentence_pairs += o.same_sentence_pairs;
        self.same_sentence_eligible += o.same_sentence_eligible;
        self.modal_pairs += o.modal_pairs;
        self.degenerate_samples += o.degenerate_samples;
        self.repeat.merge(&o.repeat);
        self.repeat_same_sentence.merge(&o.repeat_same_sentence);
        self.same_sentence.merge(&o.same_sentence);
        self.modal_concentration.merge(&o.modal_concentration);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerAccumulator {
    pub layer: usize,
    /// `modal_uniqueness[k]`: samples whose selected heads in this layer had
    /// `k` distinct modal tokens.
    pub modal_uniqueness: Vec<u64>,
}

/// Mergeable corpus aggregate over one config and one set of model dims.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusAccumulator {
    pub fingerprint: String,
    pub dims: Dims,
    pub sample_count: u64,
    pub heads: Vec<HeadAccumulator>,
    pub layers: Vec<LayerAccumulator>,
}

impl CorpusAccumulator {
    pub fn new(config: &RunConfig, dims: Dims) -> Result<Self> {
        config.validate(Some(&dims))?;
        let n = dims.seq_len;
        let heads = config
            .selection(&dims)
            .into_iter()
            .map(|(l, h)| HeadAccumulator::new(l, h, n))
            .collect();
        let head_count = config.selected_heads(&dims).len();
        let layers = config
            .selected_layers(&dims)
            .into_iter()
            .map(|layer| LayerAccumulator {
                layer,
                modal_uniqueness: vec![0; head_count + 1],
            })
            .collect();
        Ok(Self {
            fingerprint: config.fingerprint(),
            dims,
            sample_count: 0,
            heads,
            layers,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.sample_count == 0
    }

    fn check_compatible(&self, fingerprint: &str, dims: &Dims) -> Result<()> {
        if fingerprint != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                left: self.fingerprint.clone(),
                right: fingerprint.to_string(),
            });
        }
        if *dims != self.dims {
            return Err(Error::DimensionMismatch(format!(
                "accumulator built for {:?}, got {:?}",
                self.dims, dims
            )));
        }
        Ok(())
    }

    pub fn accumulate(&mut self, result: &SampleResult) -> Result<()> {
        self.check_compatible(&result.fingerprint, &result.dims)?;
        let same_heads = result.heads.len() == self.heads.len()
            && result
                .heads
                .iter()
                .zip(&self.heads)
                .all(|(r, a)| (r.layer, r.head) == (a.layer, a.head));
        if !same_heads || result.layers.len() != self.layers.len() {
            return Err(Error::DimensionMismatch(
                "sample result covers a different head selection".into(),
            ));
        }
        for (acc, r) in self.heads.iter_mut().zip(&result.heads) {
            acc.add(r)?;
        }
        for (acc, r) in self.layers.iter_mut().zip(&result.layers) {
            acc.modal_uniqueness[r.unique_modal_tokens] += 1;
        }
        self.sample_count += 1;
        Ok(())
    }

    /// Folds `other` into `self`. Compatibility is checked before any field
    /// changes.
    pub fn merge(&mut self, other: &CorpusAccumulator) -> Result<()> {
        self.check_compatible(&other.fingerprint, &other.dims)?;
        if other.heads.len() != self.heads.len() || other.layers.len() != self.layers.len() {
            return Err(Error::DimensionMismatch("accumulators cover different head selections".into()));
        }
        for (a, b) in self.heads.iter_mut().zip(&other.heads) {
            a.merge(b)?;
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.modal_uniqueness.iter_mut().zip(&b.modal_uniqueness) {
                *x += y;
            }
        }
        self.sample_count += other.sample_count;
        Ok(())
    }

    pub fn finalize(&self) -> Result<CorpusReport> {
        finalize(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatReport {
    /// Mean of the per-sample values over samples where it is defined.
    pub mean: Option<f64>,
    /// Ratio of pooled pair counts across all samples.
    pub pooled: Option<f64>,
    pub defined_samples: u64,
    pub undefined_samples: u64,
    /// Probability mass of per-sample values in each of [`PDF_BINS`] bins.
    pub sample_pdf: Vec<f64>,
}

impl StatReport {
    fn new(acc: &StatAccumulator, pooled: Option<f64>) -> Self {
        Self {
            mean: acc.mean(),
            pooled,
            defined_samples: acc.defined,
            undefined_samples: acc.undefined,
            sample_pdf: normalize_counts(&acc.bins),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadReport {
    pub layer: usize,
    pub head: usize,
    pub pair_count: u64,
    pub excluded_pairs: u64,
    pub degenerate_samples: u64,
    /// Indexed by distance; entry 0 is always 0.
    pub distance_histogram: Vec<u64>,
    pub mean_distance: Option<f64>,
    pub repeat: StatReport,
    pub repeat_same_sentence: StatReport,
    pub same_sentence: StatReport,
    pub modal_concentration: StatReport,
    /// Dense `T × T`.
    pub heat_counts: Vec<u32>,
    /// Dense `T × T` sum of this head's attention maps.
    pub summed_attention: Vec<f64>,
    pub offset_profile: OffsetProfile,
    /// Dense `T × T` sum of zero-diagonal raw similarity.
    pub summed_similarity: Vec<f64>,
}

/// Distribution over heads of a per-head corpus mean.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadMeanPdf {
    pub heads_defined: usize,
    pub pdf: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerReport {
    pub layer: usize,
    pub pair_count: u64,
    pub distance_histogram: Vec<u64>,
    pub mean_distance: Option<f64>,
    /// Fraction of pairs with distance `<= 2`.
    pub short_range_fraction: Option<f64>,
    pub repeat_across_heads: HeadMeanPdf,
    pub repeat_same_sentence_across_heads: HeadMeanPdf,
    pub same_sentence_across_heads: HeadMeanPdf,
    pub modal_concentration_across_heads: HeadMeanPdf,
    pub repeat_sample_pdf: Vec<f64>,
    pub repeat_same_sentence_sample_pdf: Vec<f64>,
    pub same_sentence_sample_pdf: Vec<f64>,
    pub modal_concentration_sample_pdf: Vec<f64>,
    /// Samples per distinct-modal-token count `0..=heads`.
    pub modal_uniqueness_counts: Vec<u64>,
    pub modal_uniqueness_pdf: Vec<f64>,
    /// Dense `T × T` sum of all selected heads' attention maps.
    pub summed_attention: Vec<f64>,
    pub offset_profile: OffsetProfile,
    pub summed_similarity: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusReport {
    pub fingerprint: String,
    pub sample_count: u64,
    pub dims: Dims,
    pub pdf_bins: usize,
    pub heads: Vec<HeadReport>,
    pub layers: Vec<LayerReport>,
}

fn normalize_counts(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    counts
        .iter()
        .map(|&c| if total > 0 { c as f64 / total as f64 } else { 0.0 })
        .collect()
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn head_mean_pdf<'a>(means: impl Iterator<Item = Option<f64>> + 'a) -> HeadMeanPdf {
    let mut bins = vec![0u64; PDF_BINS];
    let mut defined = 0;
    for m in means.flatten() {
        bins[pdf_bin(m)] += 1;
        defined += 1;
    }
    HeadMeanPdf {
        heads_defined: defined,
        pdf: normalize_counts(&bins),
    }
}

/// Normalizes accumulated sums into the report quantities.
pub fn finalize(acc: &CorpusAccumulator) -> Result<CorpusReport> {
    if acc.sample_count == 0 {
        return Err(Error::EmptyAccumulator);
    }
    let n = acc.dims.seq_len;
    let heads: Vec<HeadReport> = acc
        .heads
        .iter()
        .map(|h| {
            let summed_attention = h.attention.values();
            HeadReport {
                layer: h.layer,
                head: h.head,
                pair_count: h.pair_count,
                excluded_pairs: h.excluded_pairs,
                degenerate_samples: h.degenerate_samples,
                distance_histogram: h.distance.counts.clone(),
                mean_distance: h.distance.mean(),
                repeat: StatReport::new(&h.repeat, ratio(h.repeat_pairs, h.pair_count)),
                repeat_same_sentence: StatReport::new(
                    &h.repeat_same_sentence,
                    ratio(h.repeat_same_sentence_pairs, h.pair_count),
                ),
                same_sentence: StatReport::new(
                    &h.same_sentence,
                    ratio(h.same_sentence_pairs, h.same_sentence_eligible),
                ),
                modal_concentration: StatReport::new(&h.modal_concentration, ratio(h.modal_pairs, h.pair_count)),
                heat_counts: h.heat.clone(),
                offset_profile: diagonal_offset_profile(&summed_attention, MAX_DIAGONAL_OFFSET),
                summed_attention: summed_attention.into_vec(),
                summed_similarity: h.similarity.iter().map(CompensatedSum::value).collect(),
            }
        })
        .collect();

    let mut layers = Vec::new();
    for la in &acc.layers {
        let head_accs: Vec<&HeadAccumulator> = acc.heads.iter().filter(|h| h.layer == la.layer).collect();
        let head_reps: Vec<&HeadReport> = heads.iter().filter(|h| h.layer == la.layer).collect();

        let mut distance = DistanceHistogram::new(n);
        let mut attention = AttentionSum::new(n, la.layer, HeadSel::All);
        let mut similarity = vec![CompensatedSum::default(); n * n];
        let mut stats: [StatAccumulator; 4] = Default::default();
        for h in &head_accs {
            distance.merge(&h.distance);
            attention.merge(&h.attention)?;
            for (a, b) in similarity.iter_mut().zip(&h.similarity) {
                a.merge(*b);
            }
            stats[0].merge(&h.repeat);
            stats[1].merge(&h.repeat_same_sentence);
            stats[2].merge(&h.same_sentence);
            stats[3].merge(&h.modal_concentration);
        }
        let summed_attention = attention.values();
        layers.push(LayerReport {
            layer: la.layer,
            pair_count: distance.total,
            mean_distance: distance.mean(),
            short_range_fraction: distance.fraction_within(2),
            distance_histogram: distance.counts,
            repeat_across_heads: head_mean_pdf(head_reps.iter().map(|h| h.repeat.mean)),
            repeat_same_sentence_across_heads: head_mean_pdf(
                head_reps.iter().map(|h| h.repeat_same_sentence.mean),
            ),
            same_sentence_across_heads: head_mean_pdf(head_reps.iter().map(|h| h.same_sentence.mean)),
            modal_concentration_across_heads: head_mean_pdf(
                head_reps.iter().map(|h| h.modal_concentration.mean),
            ),
            repeat_sample_pdf: normalize_counts(&stats[0].bins),
            repeat_same_sentence_sample_pdf: normalize_counts(&stats[1].bins),
            same_sentence_sample_pdf: normalize_counts(&stats[2].bins),
            modal_concentration_sample_pdf: normalize_counts(&stats[3].bins),
            modal_uniqueness_counts: la.modal_uniqueness.clone(),
            modal_uniqueness_pdf: normalize_counts(&la.modal_uniqueness),
            offset_profile: diagonal_offset_profile(&summed_attention, MAX_DIAGONAL_OFFSET),
            summed_attention: summed_attention.into_vec(),
            summed_similarity: similarity.iter().map(CompensatedSum::value).collect(),
        });
    }

    Ok(CorpusReport {
        fingerprint: acc.fingerprint.clone(),
        sample_count: acc.sample_count,
        dims: acc.dims,
        pdf_bins: PDF_BINS,
        heads,
        layers,
    })
}

/// Regular, non-hidden files of `dir` in filename order.
pub fn discover(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let hidden = entry.file_name().to_string_lossy().starts_with('.');
        if !hidden && entry.file_type()?.is_file() {
            paths.push(entry.path());
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::EmptyCorpus(dir.display().to_string()));
    }
    Ok(paths)
}

pub fn load(path: &Path) -> Result<SampleRecord> {
    let file = File::open(path)?;
    read_dump(BufReader::new(file)).map_err(|source| Error::Dump {
        path: path.display().to_string(),
        source,
    })
}

/// Accumulates records in order into a fresh accumulator. `None` when the
/// iterator is empty.
pub fn accumulate_records<'a, I>(records: I, config: &RunConfig) -> Result<Option<CorpusAccumulator>>
where
    I: IntoIterator<Item = &'a SampleRecord>,
{
    let mut acc: Option<CorpusAccumulator> = None;
    for record in records {
        let result = process_sample(record, config)?;
        let a = match &mut acc {
            Some(a) => a,
            None => acc.insert(CorpusAccumulator::new(config, record.dims)?),
        };
        a.accumulate(&result)?;
    }
    Ok(acc)
}

/// Processes `paths` on `config.workers` threads and merges the shards.
///
/// Worker `w` takes files `w, w + W, w + 2W, ...` in order, so at most `W`
/// samples are in memory at once and the result is reproducible for a fixed
/// worker count.
pub fn aggregate_paths(paths: &[PathBuf], config: &RunConfig) -> Result<CorpusAccumulator> {
    config.validate(None)?;
    if paths.is_empty() {
        return Err(Error::EmptyCorpus("no input files".into()));
    }
    let workers = config.workers.min(paths.len());
    let shards: Vec<Result<Option<CorpusAccumulator>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || -> Result<Option<CorpusAccumulator>> {
                    let mut acc: Option<CorpusAccumulator> = None;
                    for path in paths.iter().skip(w).step_by(workers) {
                        let record = load(path)?;
                        let result = process_sample(&record, config)?;
                        drop(record);
                        let a = match &mut acc {
                            Some(a) => a,
                            None => acc.insert(CorpusAccumulator::new(config, result.dims)?),
                        };
                        a.accumulate(&result)?;
                    }
                    Ok(acc)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("corpus worker panicked"))
            .collect()
    });
    let mut merged: Option<CorpusAccumulator> = None;
    for shard in shards {
        if let Some(s) = shard? {
            match &mut merged {
                Some(m) => m.merge(&s)?,
                None => merged = Some(s),
            }
        }
    }
    merged.ok_or_else(|| Error::EmptyCorpus("no samples processed".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_io::Token;

    /// Two layers, two heads, six tokens; head (0, 1) has one-hot rows that
    /// repeat at tokens {0, 3} and {1, 4}.
    fn fixture() -> SampleRecord {
        let dims = Dims::new(2, 2, 6, 3);
        let texts = ["[CLS]", "a", ".", "b", "a", "[SEP]"];
        let tokens = texts
            .iter()
            .enumerate()
            .map(|(k, t)| Token::new(k as u32, *t))
            .collect();
        let n = dims.seq_len;
        let mut attention = Vec::new();
        for _ in 0..dims.layers * dims.heads {
            for i in 0..n {
                for j in 0..n {
                    attention.push(if i == j { 0.5 } else { 0.1 });
                }
            }
        }
        let mut head_outputs = vec![0.0f32; dims.head_output_len().unwrap()];
        let onehot = [0usize, 1, 2, 0, 1, 2];
        let base = (0 * dims.heads + 1) * n * dims.head_dim;
        for (t, &c) in onehot.iter().enumerate() {
            head_outputs[base + t * dims.head_dim + c] = 1.0;
        }
        SampleRecord {
            model_name: "fixture".into(),
            dims,
            tokens,
            sentence_ids: None,
            attention,
            head_outputs,
        }
    }

    #[test]
    fn zero_outputs_are_undefined() {
        let mut r = fixture();
        r.head_outputs.iter_mut().for_each(|v| *v = 0.0);
        let res = process_sample(&r, &RunConfig::default()).unwrap();
        for h in &res.heads {
            assert!(h.degenerate);
            assert_eq!(h.mask.count(), 0);
            assert!(h.pairs.is_empty());
            assert_eq!(h.stats.repeat_prob, None);
            assert_eq!(h.stats.modal, None);
        }
    }

    #[test]
    fn one_hot_head_pairs() {
        let res = process_sample(&fixture(), &RunConfig::default()).unwrap();
        let h = res.head(0, 1).unwrap();
        let got: Vec<(usize, usize)> = h.pairs.iter().map(|p| (p.i, p.j)).collect();
        // rows 2 and 5 also match, but token 5 is [SEP], which is kept
        assert_eq!(got, vec![(0, 3), (1, 4), (2, 5)]);
        assert!(h.pairs.iter().all(|p| p.value == 1.0));
        assert_eq!(h.stats.repeat_count, 1);
        // (2,5) touches the [SEP] sentinel
        assert_eq!(h.stats.same_sentence_eligible, 2);
        assert_eq!(h.stats.same_sentence_count, 0);
    }

    #[test]
    fn parallel_matches_sequential() {
        let r = fixture();
        let c = RunConfig::default();
        assert_eq!(process_sample(&r, &c).unwrap(), process_sample_par(&r, &c).unwrap());
        assert_eq!(process_sample(&r, &c).unwrap(), process_sample(&r, &c).unwrap());
    }

    #[test]
    fn accumulate_twice_doubles() {
        let r = fixture();
        let c = RunConfig::default();
        let res = process_sample(&r, &c).unwrap();
        let mut once = CorpusAccumulator::new(&c, r.dims).unwrap();
        once.accumulate(&res).unwrap();
        let mut twice = once.clone();
        twice.accumulate(&res).unwrap();
        for (a, b) in once.heads.iter().zip(&twice.heads) {
            assert_eq!(2 * a.pair_count, b.pair_count);
            assert_eq!(2 * a.attention.raw()[0], b.attention.raw()[0]);
            assert!(a.heat.iter().zip(&b.heat).all(|(x, y)| 2 * x == *y));
        }
        assert_eq!(twice.sample_count, 2);
    }

    #[test]
    fn fingerprint_mismatch_refuses_merge() {
        let r = fixture();
        let c = RunConfig::default();
        let c2 = RunConfig {
            sim_threshold: 0.5,
            ..Default::default()
        };
        let mut a = CorpusAccumulator::new(&c, r.dims).unwrap();
        a.accumulate(&process_sample(&r, &c).unwrap()).unwrap();
        let before = a.clone();
        let b = CorpusAccumulator::new(&c2, r.dims).unwrap();
        assert!(matches!(a.merge(&b), Err(Error::FingerprintMismatch { .. })));
        assert_eq!(a, before);
        let res2 = process_sample(&r, &c2).unwrap();
        assert!(matches!(a.accumulate(&res2), Err(Error::FingerprintMismatch { .. })));
    }

    #[test]
    fn empty_accumulator_cannot_finalize() {
        let r = fixture();
        let a = CorpusAccumulator::new(&RunConfig::default(), r.dims).unwrap();
        assert!(matches!(a.finalize(), Err(Error::EmptyAccumulator)));
    }

    #[test]
    fn selection_mismatch_detected() {
        let r = fixture();
        let c = RunConfig {
            layers: Some(vec![5]),
            ..Default::default()
        };
        assert!(matches!(process_sample(&r, &c), Err(Error::DimensionMismatch(_))));
    }
}
