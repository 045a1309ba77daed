//! Seeded inputs shared by the benchmarks.

use attnsim_core::synth::{self, SynthOptions};
use attnsim_core::tensor_io::{Dims, SampleRecord};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal `seq_len × head_dim` head output.
pub fn head_output(seed: u64, seq_len: usize, head_dim: usize) -> Vec<f32> {
    synth::head_outputs(&mut rng(seed), seq_len * head_dim)
}

/// A BERT-base shaped sample: 12 layers, 12 heads, 128 tokens, 64 dims.
pub fn base_record(seed: u64) -> SampleRecord {
    let mut opts = SynthOptions::new(Dims::new(12, 12, 128, 64));
    opts.padding = 16;
    synth::record(&mut rng(seed), &opts)
}

pub fn small_records(seed: u64, count: usize) -> Vec<SampleRecord> {
    let mut r = rng(seed);
    let opts = SynthOptions::new(Dims::new(2, 4, 64, 16));
    (0..count).map(|_| synth::record(&mut r, &opts)).collect()
}
