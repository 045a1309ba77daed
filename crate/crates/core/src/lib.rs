//! Batch analysis of the vector space produced by transformer self-attention
//! heads.
//!
//! The pipeline starts from an `ATNDUMP1` activation dump ([`tensor_io`]),
//! turns every head output into a context similarity matrix ([`simmatrix`]),
//! selects strongly aligned token pairs and measures how heads behave
//! ([`head_stats`]), and folds everything into mergeable corpus aggregates
//! ([`corpus`]). [`attention`] covers the attention-map side: summed maps,
//! diagonal profiles, column zeroing and separator-based segmentation.

pub mod attention;
pub mod config;
pub mod corpus;
pub mod error;
pub mod head_stats;
pub mod matrix;
pub mod simmatrix;
pub mod sum;
pub mod synth;
pub mod tensor_io;

pub use attention::{AttentionSum, ColumnStrength, HeadSel, OffsetProfile, RegionAverage, SegmentIndex};
pub use config::{ExclusionPolicy, RunConfig};
pub use corpus::{CorpusAccumulator, CorpusReport, HeadResult, SampleResult};
pub use error::{Error, Result};
pub use head_stats::{HeadStats, SentenceMap};
pub use matrix::Matrix;
pub use simmatrix::{HighSimMask, Pair, PairSet, SimMatrix};
pub use tensor_io::{Dims, DumpError, DumpHeader, SampleRecord, Token, Violation};
