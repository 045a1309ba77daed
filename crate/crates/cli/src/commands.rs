use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use attnsim_core::attention::{zero_diagonal_band, zero_top_columns, SegmentIndex};
use attnsim_core::corpus::{self, aggregate_paths, process_sample, process_sample_par, PDF_BINS};
use attnsim_core::simmatrix::value_histogram;
use attnsim_core::synth::{self, SynthOptions};
use attnsim_core::tensor_io::{read_dump, write_dump, Dims, DumpError};
use attnsim_core::{CorpusReport, Error, Matrix, OffsetProfile, Result, RunConfig, SampleRecord, SampleResult};
use rand::SeedableRng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::report::{opt, ReportDir};
use crate::{Command, EXIT_INVALID, EXIT_IO, EXIT_OK};

pub(crate) fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Validate { paths } => validate(&paths),
        Command::Analyze { input, opts, out } => analyze(&input, &opts.to_config(), &out).map(|_| EXIT_OK),
        Command::Aggregate { dir, opts, out } => aggregate(&dir, &opts.to_config(), &out).map(|_| EXIT_OK),
        Command::Segment { input, layer, opts, out } => {
            segment(&input, layer, &opts.to_config(), out.as_deref()).map(|_| EXIT_OK)
        }
        Command::Synth {
            out,
            count,
            seed,
            layers,
            heads,
            seq_len,
            head_dim,
            padding,
            sentence_len,
        } => {
            let mut opts = SynthOptions::new(Dims::new(layers, heads, seq_len, head_dim));
            opts.padding = padding;
            opts.sentence_len = sentence_len;
            synth_corpus(&out, count, seed, &opts).map(|_| EXIT_OK)
        }
    }
}

fn expand(paths: &[PathBuf]) -> io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(p)?
                .filter_map(|e| e.ok())
                .filter(|e| e.file_type().is_ok_and(|t| t.is_file()))
                .map(|e| e.path())
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn validate(paths: &[PathBuf]) -> Result<i32> {
    let files = expand(paths)?;
    let (mut invalid, mut unreadable) = (0, 0);
    let stdout = io::stdout();
    let mut out = stdout.lock();
    for path in &files {
        let res = fs::File::open(path)
            .map_err(DumpError::Io)
            .and_then(|f| read_dump(io::BufReader::new(f)));
        match res {
            Ok(r) => {
                let d = r.dims;
                writeln!(
                    out,
                    "ok\t{}\t{}x{} heads, {} tokens, head_dim {}",
                    path.display(),
                    d.layers,
                    d.heads,
                    d.seq_len,
                    d.head_dim
                )?;
            }
            Err(DumpError::Io(e)) => {
                unreadable += 1;
                writeln!(out, "unreadable\t{}\t{e}", path.display())?;
            }
            Err(DumpError::Invalid(v)) => {
                invalid += 1;
                writeln!(out, "invalid\t{}\t{} violations", path.display(), v.len())?;
                for x in &v {
                    writeln!(out, "\t{x}")?;
                }
            }
            Err(e) => {
                invalid += 1;
                writeln!(out, "invalid\t{}\t{e}", path.display())?;
            }
        }
    }
    writeln!(
        out,
        "{} files: {} valid, {invalid} invalid, {unreadable} unreadable",
        files.len(),
        files.len() - invalid - unreadable
    )?;
    Ok(if unreadable > 0 {
        EXIT_IO
    } else if invalid > 0 {
        EXIT_INVALID
    } else {
        EXIT_OK
    })
}

fn head_name(layer: usize, head: usize, what: &str) -> String {
    format!("layer{layer:02}_head{head:02}_{what}")
}

fn layer_name(layer: usize, what: &str) -> String {
    format!("layer{layer:02}_{what}")
}

fn segments_json(seg: &SegmentIndex, record: &SampleRecord) -> Value {
    let segs: Vec<Value> = seg
        .segments
        .iter()
        .map(|r| {
            let tokens: Vec<&str> = record.tokens[r.clone()].iter().map(|t| t.text.as_str()).collect();
            json!({ "start": r.start, "end": r.end, "tokens": tokens })
        })
        .collect();
    json!({ "boundaries": seg.boundaries, "segments": segs })
}

#[derive(Serialize)]
struct AnalyzeSummary<'a> {
    model_name: &'a str,
    dims: Dims,
    config: &'a RunConfig,
    sentence_count: usize,
    heads: Vec<Value>,
    files: &'a [String],
}

pub fn analyze(input: &Path, config: &RunConfig, out: &Path) -> Result<()> {
    let record = corpus::load(input)?;
    let result = if config.workers > 1 {
        process_sample_par(&record, config)?
    } else {
        process_sample(&record, config)?
    };
    let mut dir = ReportDir::create(out, &result.fingerprint)?;
    write_sample(&mut dir, &record, &result)?;

    let heads: Vec<Value> = result
        .heads
        .iter()
        .map(|h| json!({ "layer": h.layer, "head": h.head, "pairs": h.pairs.len(), "degenerate": h.degenerate }))
        .collect();
    let files = dir.files().to_vec();
    dir.json(
        "summary.json",
        &AnalyzeSummary {
            model_name: &record.model_name,
            dims: record.dims,
            config,
            sentence_count: result.sentences.sentence_count(),
            heads,
            files: &files,
        },
    )?;
    Ok(())
}

fn write_sample(dir: &mut ReportDir, record: &SampleRecord, result: &SampleResult) -> Result<()> {
    let n = record.dims.seq_len;
    dir.csv(
        "tokens.csv",
        &["index", "id", "text", "sentence_id"],
        record.tokens.iter().enumerate().map(|(k, t)| {
            let sid = if result.sentences.is_sentinel(k) {
                String::new()
            } else {
                result.sentences.id(k).to_string()
            };
            [k.to_string(), t.id.to_string(), t.text.clone(), sid]
        }),
    )?;

    let mut stats_rows = Vec::new();
    for h in &result.heads {
        let (l, hd) = (h.layer, h.head);
        let norm = h.normalized();
        dir.matrix(&head_name(l, hd, "similarity.csv"), n, n, norm.values.as_slice())?;
        let mask: Vec<u8> = (0..n * n).map(|x| u8::from(h.mask.get(x / n, x % n))).collect();
        dir.matrix(&head_name(l, hd, "mask.csv"), n, n, &mask)?;
        dir.csv(
            &head_name(l, hd, "pairs.csv"),
            &["token_i", "token_j", "index_i", "index_j", "value"],
            h.pairs.iter().map(|p| {
                [
                    record.tokens[p.i].text.clone(),
                    record.tokens[p.j].text.clone(),
                    p.i.to_string(),
                    p.j.to_string(),
                    p.value.to_string(),
                ]
            }),
        )?;
        let vh = value_histogram(&norm, PDF_BINS);
        let neg = std::iter::once(["negative".to_string(), String::new(), "0".to_string(), vh.negative.to_string()]);
        let bins = vh.bins.iter().enumerate().map(|(b, c)| {
            [
                b.to_string(),
                (b as f64 / PDF_BINS as f64).to_string(),
                ((b + 1) as f64 / PDF_BINS as f64).to_string(),
                c.to_string(),
            ]
        });
        dir.csv(&head_name(l, hd, "value_histogram.csv"), &["bin", "lower", "upper", "count"], neg.chain(bins))?;

        let s = &h.stats;
        stats_rows.push(vec![
            l.to_string(),
            hd.to_string(),
            s.pair_count.to_string(),
            h.pairs.excluded.to_string(),
            u8::from(h.degenerate).to_string(),
            s.repeat_count.to_string(),
            opt(s.repeat_prob),
            opt(s.repeat_same_sentence_prob),
            s.same_sentence_count.to_string(),
            s.same_sentence_eligible.to_string(),
            opt(s.same_sentence_prob),
            opt(s.mean_distance),
            s.modal_token().unwrap_or_default().to_string(),
            s.modal.as_ref().map(|m| m.count.to_string()).unwrap_or_default(),
            opt(s.modal_concentration()),
        ]);
    }
    dir.csv(
        "head_stats.csv",
        &[
            "layer",
            "head",
            "pair_count",
            "excluded_pairs",
            "degenerate",
            "repeat_count",
            "repeat_prob",
            "repeat_same_sentence_prob",
            "same_sentence_count",
            "same_sentence_eligible",
            "same_sentence_prob",
            "mean_distance",
            "modal_token",
            "modal_count",
            "modal_concentration",
        ],
        stats_rows,
    )?;

    for lr in &result.layers {
        let l = lr.layer;
        dir.matrix(&layer_name(l, "summed_similarity.csv"), n, n, lr.summed_similarity.as_slice())?;
        let mut seg = segments_json(&lr.segments, record);
        seg["layer"] = json!(l);
        seg["flat"] = json!(lr.column_strength.is_flat());
        seg["column_strength"] = json!(lr.column_strength.values);
        seg["unique_modal_tokens"] = json!(lr.unique_modal_tokens);
        dir.json(&layer_name(l, "segments.json"), &seg)?;
        let k = lr.segments.len();
        let cells: Vec<String> = (0..k * k)
            .map(|x| {
                if lr.region_average.undefined[x] {
                    String::new()
                } else {
                    lr.region_average.means.as_slice()[x].to_string()
                }
            })
            .collect();
        dir.matrix(&layer_name(l, "region_average.csv"), k, k, &cells)?;
    }
    Ok(())
}

const STATS: [&str; 4] = ["repeat", "repeat_same_sentence", "same_sentence", "modal_concentration"];

fn bin_bounds(b: usize) -> (String, String) {
    (
        (b as f64 / PDF_BINS as f64).to_string(),
        ((b + 1) as f64 / PDF_BINS as f64).to_string(),
    )
}

fn offset_rows(layer: usize, head: &str, p: &OffsetProfile) -> Vec<[String; 5]> {
    p.entries
        .iter()
        .map(|e| {
            [
                layer.to_string(),
                head.to_string(),
                e.offset.to_string(),
                e.mass.to_string(),
                u8::from(p.argmax == Some(e.offset)).to_string(),
            ]
        })
        .collect()
}

pub fn aggregate(dir_in: &Path, config: &RunConfig, out: &Path) -> Result<CorpusReport> {
    config.validate(None)?;
    let paths = corpus::discover(dir_in)?;
    let acc = aggregate_paths(&paths, config)?;
    let report = acc.finalize()?;
    let n = report.dims.seq_len;
    if config.top_k_columns >= n && config.top_k_columns > 0 {
        return Err(Error::InvalidArgument(format!(
            "top_k_columns = {} must be below the sequence length {n}",
            config.top_k_columns
        )));
    }
    let mut dir = ReportDir::create(out, &report.fingerprint)?;

    dir.csv(
        "head_distance_histogram.csv",
        &["layer", "head", "distance", "count"],
        report.heads.iter().flat_map(|h| {
            (1..n).map(move |d| [h.layer.to_string(), h.head.to_string(), d.to_string(), h.distance_histogram[d].to_string()])
        }),
    )?;
    dir.csv(
        "layer_distance_histogram.csv",
        &["layer", "distance", "count", "fraction"],
        report.layers.iter().flat_map(|l| {
            (1..n).map(move |d| {
                let c = l.distance_histogram[d];
                let frac = if l.pair_count > 0 { c as f64 / l.pair_count as f64 } else { 0.0 };
                [l.layer.to_string(), d.to_string(), c.to_string(), frac.to_string()]
            })
        }),
    )?;

    let mut head_pdf = Vec::new();
    for h in &report.heads {
        for (name, s) in STATS.iter().zip([&h.repeat, &h.repeat_same_sentence, &h.same_sentence, &h.modal_concentration]) {
            for (b, m) in s.sample_pdf.iter().enumerate() {
                let (lo, hi) = bin_bounds(b);
                head_pdf.push([h.layer.to_string(), h.head.to_string(), name.to_string(), b.to_string(), lo, hi, m.to_string()]);
            }
        }
    }
    dir.csv("head_stat_pdf.csv", &["layer", "head", "statistic", "bin", "lower", "upper", "mass"], head_pdf)?;

    let mut layer_pdf = Vec::new();
    for l in &report.layers {
        let across = [
            &l.repeat_across_heads,
            &l.repeat_same_sentence_across_heads,
            &l.same_sentence_across_heads,
            &l.modal_concentration_across_heads,
        ];
        let samples = [
            &l.repeat_sample_pdf,
            &l.repeat_same_sentence_sample_pdf,
            &l.same_sentence_sample_pdf,
            &l.modal_concentration_sample_pdf,
        ];
        for k in 0..STATS.len() {
            for (source, pdf) in [("heads", &across[k].pdf), ("samples", samples[k])] {
                for (b, m) in pdf.iter().enumerate() {
                    let (lo, hi) = bin_bounds(b);
                    layer_pdf.push([l.layer.to_string(), STATS[k].to_string(), source.to_string(), b.to_string(), lo, hi, m.to_string()]);
                }
            }
        }
    }
    dir.csv("layer_stat_pdf.csv", &["layer", "statistic", "over", "bin", "lower", "upper", "mass"], layer_pdf)?;

    let mut offsets = Vec::new();
    for l in &report.layers {
        offsets.extend(offset_rows(l.layer, "all", &l.offset_profile));
    }
    for h in &report.heads {
        offsets.extend(offset_rows(h.layer, &h.head.to_string(), &h.offset_profile));
    }
    dir.csv("offset_profile.csv", &["layer", "head", "offset", "mass", "argmax"], offsets)?;

    dir.csv(
        "modal_uniqueness.csv",
        &["layer", "distinct_tokens", "samples", "fraction"],
        report.layers.iter().flat_map(|l| {
            l.modal_uniqueness_counts.iter().zip(&l.modal_uniqueness_pdf).enumerate().map(move |(k, (c, f))| {
                [l.layer.to_string(), k.to_string(), c.to_string(), f.to_string()]
            })
        }),
    )?;

    for h in &report.heads {
        dir.matrix(&head_name(h.layer, h.head, "heat.csv"), n, n, &h.heat_counts)?;
        dir.matrix(&head_name(h.layer, h.head, "summed_attention.csv"), n, n, &h.summed_attention)?;
    }
    let mut layer_summaries = Vec::new();
    for l in &report.layers {
        let attn = Matrix::from_vec(n, n, l.summed_attention.clone());
        let (clipped, removed) = zero_top_columns(&attn, config.top_k_columns)?;
        let banded = zero_diagonal_band(&clipped, 1);
        dir.matrix(&layer_name(l.layer, "summed_attention.csv"), n, n, attn.as_slice())?;
        dir.matrix(&layer_name(l.layer, "attention_zeroed_columns.csv"), n, n, clipped.as_slice())?;
        dir.matrix(&layer_name(l.layer, "attention_zeroed_columns_diagonals.csv"), n, n, banded.as_slice())?;
        dir.matrix(&layer_name(l.layer, "summed_similarity.csv"), n, n, &l.summed_similarity)?;
        layer_summaries.push(json!({
            "layer": l.layer,
            "pair_count": l.pair_count,
            "mean_distance": l.mean_distance,
            "short_range_fraction": l.short_range_fraction,
            "offset_argmax": l.offset_profile.argmax,
            "zeroed_columns": removed,
        }));
    }

    let head_summaries: Vec<Value> = report
        .heads
        .iter()
        .map(|h| {
            let stat = |s: &attnsim_core::corpus::StatReport| {
                json!({
                    "mean": s.mean,
                    "pooled": s.pooled,
                    "defined_samples": s.defined_samples,
                    "undefined_samples": s.undefined_samples,
                })
            };
            json!({
                "layer": h.layer,
                "head": h.head,
                "pair_count": h.pair_count,
                "excluded_pairs": h.excluded_pairs,
                "degenerate_samples": h.degenerate_samples,
                "mean_distance": h.mean_distance,
                "repeat": stat(&h.repeat),
                "repeat_same_sentence": stat(&h.repeat_same_sentence),
                "same_sentence": stat(&h.same_sentence),
                "modal_concentration": stat(&h.modal_concentration),
                "offset_argmax": h.offset_profile.argmax,
            })
        })
        .collect();
    let files = dir.files().to_vec();
    dir.json(
        "summary.json",
        &json!({
            "sample_count": report.sample_count,
            "dims": report.dims,
            "pdf_bins": report.pdf_bins,
            "config": config,
            "heads": head_summaries,
            "layers": layer_summaries,
            "files": files,
        }),
    )?;
    Ok(report)
}

pub fn segment(input: &Path, layer: usize, config: &RunConfig, out: Option<&Path>) -> Result<()> {
    let record = corpus::load(input)?;
    config.validate(Some(&record.dims))?;
    let (strength, seg) = attnsim_core::attention::segment_layer(&record, layer, config.col_threshold)?;
    let mut v = segments_json(&seg, &record);
    v["config_fingerprint"] = json!(config.fingerprint());
    v["layer"] = json!(layer);
    v["flat"] = json!(strength.is_flat());
    v["column_strength"] = json!(strength.values);
    let text = serde_json::to_string_pretty(&v).expect("json value serializes");
    match out {
        Some(p) => fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

pub fn synth_corpus(out: &Path, count: usize, seed: u64, opts: &SynthOptions) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for k in 0..count {
        let rec = synth::record(&mut rng, opts);
        let path = out.join(format!("sample_{k:05}.atn"));
        let mut f = BufWriter::new(fs::File::create(&path)?);
        write_dump(&rec, &mut f).map_err(|source| Error::Dump {
            path: path.display().to_string(),
            source,
        })?;
        f.flush()?;
    }
    println!("wrote {count} dumps to {}", out.display());
    Ok(())
}
