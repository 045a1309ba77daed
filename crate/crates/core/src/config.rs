use std::collections::BTreeSet;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor_io::Dims;

pub const PAD: &str = "[PAD]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

/// Token classes whose pairs are dropped from high-similarity pair sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExclusionPolicy {
    pub tokens: BTreeSet<String>,
}

impl ExclusionPolicy {
    pub fn none() -> Self {
        Self {
            tokens: BTreeSet::new(),
        }
    }

    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            tokens: tokens.into_iter().map(Into::into).collect(),
        }
    }

    pub fn excludes(&self, text: &str) -> bool {
        self.tokens.contains(text)
    }
}

impl Default for ExclusionPolicy {
    /// Drops `[PAD]` only.
    fn default() -> Self {
        Self::from_tokens([PAD])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub sim_threshold: f64,
    pub col_threshold: f64,
    pub top_k_columns: usize,
    pub separators: BTreeSet<String>,
    pub exclusion: ExclusionPolicy,
    /// `None` selects every layer.
    pub layers: Option<Vec<usize>>,
    /// `None` selects every head.
    pub heads: Option<Vec<usize>>,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sim_threshold: 0.3,
            col_threshold: 0.5,
            top_k_columns: 3,
            separators: [".", ";"].into_iter().map(String::from).collect(),
            exclusion: ExclusionPolicy::default(),
            layers: None,
            heads: None,
            workers: 1,
        }
    }
}

impl RunConfig {
    /// Checks thresholds and, when `dims` is given, the layer/head selection.
    pub fn validate(&self, dims: Option<&Dims>) -> Result<()> {
        check_unit("sim_threshold", self.sim_threshold)?;
        check_unit("col_threshold", self.col_threshold)?;
        if self.workers == 0 {
            return Err(Error::InvalidArgument("workers must be at least 1".into()));
        }
        if let Some(d) = dims {
            if let Some(&l) = self.layers.iter().flatten().find(|&&l| l >= d.layers) {
                return Err(Error::DimensionMismatch(format!(
                    "layer {l} selected but the model has {} layers",
                    d.layers
                )));
            }
            if let Some(&h) = self.heads.iter().flatten().find(|&&h| h >= d.heads) {
                return Err(Error::DimensionMismatch(format!(
                    "head {h} selected but the model has {} heads",
                    d.heads
                )));
            }
        }
        Ok(())
    }

    pub fn selected_layers(&self, dims: &Dims) -> Vec<usize> {
        select(self.layers.as_deref(), dims.layers)
    }

    pub fn selected_heads(&self, dims: &Dims) -> Vec<usize> {
        select(self.heads.as_deref(), dims.heads)
    }

    /// Every selected `(layer, head)` in layer-major order.
    pub fn selection(&self, dims: &Dims) -> Vec<(usize, usize)> {
        let heads = self.selected_heads(dims);
        self.selected_layers(dims)
            .into_iter()
            .flat_map(|l| heads.iter().map(move |&h| (l, h)))
            .collect()
    }

    /// Stable digest of every setting that changes analysis results.
    /// Worker count is deliberately left out.
    pub fn fingerprint(&self) -> String {
        let mut canon = String::new();
        canon.push_str(&format!("sim_threshold={:016x};", self.sim_threshold.to_bits()));
        canon.push_str(&format!("col_threshold={:016x};", self.col_threshold.to_bits()));
        canon.push_str(&format!("top_k_columns={};", self.top_k_columns));
        canon.push_str(&format!("separators={:?};", self.separators));
        canon.push_str(&format!("exclude={:?};", self.exclusion.tokens));
        canon.push_str(&format!("layers={:?};", self.layers.as_ref().map(|v| normalized(v))));
        canon.push_str(&format!("heads={:?};", self.heads.as_ref().map(|v| normalized(v))));
        let digest = Sha256::digest(canon.as_bytes());
        hex::encode(&digest[..8])
    }
}

fn check_unit(name: &'static str, value: f64) -> Result<()> {
    if value > 0.0 && value <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidThreshold { name, value })
    }
}

fn normalized(v: &[usize]) -> Vec<usize> {
    let set: BTreeSet<usize> = v.iter().copied().collect();
    set.into_iter().collect()
}

fn select(sel: Option<&[usize]>, n: usize) -> Vec<usize> {
    match sel {
        Some(v) => normalized(v).into_iter().filter(|&i| i < n).collect(),
        None => (0..n).collect(),
    }
}
