//! The `ATNDUMP1` activation dump: one tokenized sample with every layer's
//! attention maps and per-head outputs.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic            8 bytes   "ATNDUMP1"
//! format_version   u32       1
//! layers           u32
//! heads            u32
//! seq_len          u32
//! head_dim         u32
//! embed_dim        u32       must equal heads * head_dim
//! flags            u32       bit 0: sentence ids present
//! model_name       u32 byte length + UTF-8
//! tokens           seq_len x (u32 token id, u32 byte length + UTF-8 text)
//! sentence_ids     seq_len x u16                       (only if flagged)
//! attention        f32 [layer][head][row][column]
//! head_outputs     f32 [layer][head][token][dim]
//! ```

use std::fmt;
use std::io::{self, Read, Write};

use serde::Serialize;
use thiserror::Error;

pub const MAGIC: [u8; 8] = *b"ATNDUMP1";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 36;
pub const FLAG_SENTENCE_IDS: u32 = 1;

/// Maximum deviation of an attention row sum from 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

/// Default ceiling on the tensor payload a reader will allocate (4 GiB).
pub const DEFAULT_MAX_PAYLOAD: u64 = 4 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Dims {
    pub layers: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub head_dim: usize,
    pub embed_dim: usize,
}

impl Dims {
    /// `embed_dim` is derived as `heads * head_dim`.
    pub fn new(layers: usize, heads: usize, seq_len: usize, head_dim: usize) -> Self {
        Self {
            layers,
            heads,
            seq_len,
            head_dim,
            embed_dim: heads * head_dim,
        }
    }

    pub fn attention_len(&self) -> Option<usize> {
        self.layers
            .checked_mul(self.heads)?
            .checked_mul(self.seq_len)?
            .checked_mul(self.seq_len)
    }

    pub fn head_output_len(&self) -> Option<usize> {
        self.layers
            .checked_mul(self.heads)?
            .checked_mul(self.seq_len)?
            .checked_mul(self.head_dim)
    }

    /// Bytes taken by the two f32 tensors.
    pub fn tensor_payload_bytes(&self) -> Option<u64> {
        let floats = (self.attention_len()? as u64).checked_add(self.head_output_len()? as u64)?;
        floats.checked_mul(4)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Token {
    pub id: u32,
    pub text: String,
}

impl Token {
    pub fn new(id: u32, text: impl Into<String>) -> Self {
        Self {
            id,
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DumpHeader {
    pub magic: [u8; 8],
    pub format_version: u32,
    pub dims: Dims,
    pub flags: u32,
}

impl DumpHeader {
    pub fn for_record(record: &SampleRecord) -> Self {
        Self {
            magic: MAGIC,
            format_version: FORMAT_VERSION,
            dims: record.dims,
            flags: if record.sentence_ids.is_some() {
                FLAG_SENTENCE_IDS
            } else {
                0
            },
        }
    }

    pub fn has_sentence_ids(&self) -> bool {
        self.flags & FLAG_SENTENCE_IDS != 0
    }

    fn encode(&self) -> Result<[u8; HEADER_LEN], DumpError> {
        let d = &self.dims;
        let mut out = [0u8; HEADER_LEN];
        out[..8].copy_from_slice(&self.magic);
        let fields = [
            self.format_version as usize,
            d.layers,
            d.heads,
            d.seq_len,
            d.head_dim,
            d.embed_dim,
            self.flags as usize,
        ];
        for (k, v) in fields.into_iter().enumerate() {
            let v = u32::try_from(v).map_err(|_| DumpError::FieldOverflow("header dimension"))?;
            out[8 + 4 * k..12 + 4 * k].copy_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    fn decode(bytes: &[u8; HEADER_LEN]) -> Result<Self, DumpError> {
        let mut magic = [0u8; 8];
        magic.copy_from_slice(&bytes[..8]);
        if magic != MAGIC {
            return Err(DumpError::BadMagic(magic));
        }
        let field = |k: usize| {
            u32::from_le_bytes(bytes[8 + 4 * k..12 + 4 * k].try_into().expect("4 bytes"))
        };
        let format_version = field(0);
        if format_version != FORMAT_VERSION {
            return Err(DumpError::UnsupportedVersion(format_version));
        }
        Ok(Self {
            magic,
            format_version,
            dims: Dims {
                layers: field(1) as usize,
                heads: field(2) as usize,
                seq_len: field(3) as usize,
                head_dim: field(4) as usize,
                embed_dim: field(5) as usize,
            },
            flags: field(6),
        })
    }
}

/// One tokenized input with its full activation dump.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub model_name: String,
    pub dims: Dims,
    pub tokens: Vec<Token>,
    pub sentence_ids: Option<Vec<u16>>,
    /// `[layer][head][row][column]`, row-stochastic.
    pub attention: Vec<f32>,
    /// `[layer][head][token][dim]`, the per-head attention-weighted values.
    pub head_outputs: Vec<f32>,
}

impl SampleRecord {
    pub fn attention_map(&self, layer: usize, head: usize) -> &[f32] {
        let t = self.dims.seq_len;
        let start = (layer * self.dims.heads + head) * t * t;
        &self.attention[start..start + t * t]
    }

    pub fn head_output(&self, layer: usize, head: usize) -> &[f32] {
        let (t, d) = (self.dims.seq_len, self.dims.head_dim);
        let start = (layer * self.dims.heads + head) * t * d;
        &self.head_outputs[start..start + t * d]
    }

    pub fn token_texts(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|t| t.text.as_str())
    }

    /// Equality that compares floats by bit pattern.
    pub fn bit_identical(&self, other: &SampleRecord) -> bool {
        fn bits_eq(a: &[f32], b: &[f32]) -> bool {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        }
        self.model_name == other.model_name
            && self.dims == other.dims
            && self.tokens == other.tokens
            && self.sentence_ids == other.sentence_ids
            && bits_eq(&self.attention, &other.attention)
            && bits_eq(&self.head_outputs, &other.head_outputs)
    }

    /// Exact size of this record once encoded.
    pub fn encoded_len(&self) -> u64 {
        let mut n = HEADER_LEN as u64 + 4 + self.model_name.len() as u64;
        n += self
            .tokens
            .iter()
            .map(|t| 8 + t.text.len() as u64)
            .sum::<u64>();
        if let Some(ids) = &self.sentence_ids {
            n += 2 * ids.len() as u64;
        }
        n + 4 * (self.attention.len() + self.head_outputs.len()) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Violation {
    RowSum {
        layer: usize,
        head: usize,
        row: usize,
        sum: f64,
    },
    AttentionRange {
        layer: usize,
        head: usize,
        row: usize,
        col: usize,
        value: f32,
    },
    TokenCount {
        expected: usize,
        actual: usize,
    },
    SentenceIdCount {
        expected: usize,
        actual: usize,
    },
    SentenceIdRange {
        index: usize,
        id: u16,
        seq_len: usize,
    },
    EmbedDim {
        heads: usize,
        head_dim: usize,
        embed_dim: usize,
    },
    TensorLen {
        tensor: &'static str,
        expected: Option<usize>,
        actual: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::RowSum {
                layer,
                head,
                row,
                sum,
            } => write!(
                f,
                "attention row (layer {layer}, head {head}, row {row}) sums to {sum}"
            ),
            Violation::AttentionRange {
                layer,
                head,
                row,
                col,
                value,
            } => write!(
                f,
                "attention entry (layer {layer}, head {head}, row {row}, col {col}) = {value} outside [0, 1]"
            ),
            Violation::TokenCount { expected, actual } => {
                write!(f, "expected {expected} tokens, found {actual}")
            }
            Violation::SentenceIdCount { expected, actual } => {
                write!(f, "expected {expected} sentence ids, found {actual}")
            }
            Violation::SentenceIdRange { index, id, seq_len } => {
                write!(f, "sentence id {id} at token {index} is not below {seq_len}")
            }
            Violation::EmbedDim {
                heads,
                head_dim,
                embed_dim,
            } => write!(
                f,
                "head_dim {head_dim} x heads {heads} = {} != embed_dim {embed_dim}",
                head_dim * heads
            ),
            Violation::TensorLen {
                tensor,
                expected,
                actual,
            } => match expected {
                Some(e) => write!(f, "{tensor} holds {actual} values, expected {e}"),
                None => write!(f, "{tensor} size overflows for the declared dimensions"),
            },
        }
    }
}

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("bad magic {:?}, expected \"ATNDUMP1\"", String::from_utf8_lossy(.0))]
    BadMagic([u8; 8]),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated dump: expected {expected} bytes, got {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("dump has trailing data: expected {expected} bytes, got at least {actual}")]
    TrailingData { expected: u64, actual: u64 },

    #[error("declared payload of {declared:?} bytes exceeds the {cap}-byte cap")]
    TooLarge { declared: Option<u64>, cap: u64 },

    #[error("{0} is not valid UTF-8")]
    BadUtf8(&'static str),

    #[error("{0} does not fit in a u32 field")]
    FieldOverflow(&'static str),

    #[error("record failed validation: {}", format_violations(.0))]
    Invalid(Vec<Violation>),

    #[error(transparent)]
    Io(#[from] io::Error),
}

fn format_violations(v: &[Violation]) -> String {
    const SHOWN: usize = 8;
    let mut s = v
        .iter()
        .take(SHOWN)
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ");
    if v.len() > SHOWN {
        s.push_str(&format!("; and {} more", v.len() - SHOWN));
    }
    s
}

/// Checks every record invariant. An empty result means the record is valid.
pub fn validate_record(record: &SampleRecord) -> Vec<Violation> {
    let d = &record.dims;
    let t = d.seq_len;
    let mut out = Vec::new();

    if d.heads.checked_mul(d.head_dim) != Some(d.embed_dim) {
        out.push(Violation::EmbedDim {
            heads: d.heads,
            head_dim: d.head_dim,
            embed_dim: d.embed_dim,
        });
    }
    if record.tokens.len() != t {
        out.push(Violation::TokenCount {
            expected: t,
            actual: record.tokens.len(),
        });
    }
    if let Some(ids) = &record.sentence_ids {
        if ids.len() != t {
            out.push(Violation::SentenceIdCount {
                expected: t,
                actual: ids.len(),
            });
        }
        for (index, &id) in ids.iter().enumerate() {
            if usize::from(id) >= t {
                out.push(Violation::SentenceIdRange {
                    index,
                    id,
                    seq_len: t,
                });
            }
        }
    }
    let head_len = d.head_output_len();
    if head_len != Some(record.head_outputs.len()) {
        out.push(Violation::TensorLen {
            tensor: "head_outputs",
            expected: head_len,
            actual: record.head_outputs.len(),
        });
    }
    let attn_len = d.attention_len();
    if attn_len != Some(record.attention.len()) {
        out.push(Violation::TensorLen {
            tensor: "attention",
            expected: attn_len,
            actual: record.attention.len(),
        });
        return out;
    }
    if t == 0 {
        return out;
    }
    for (r, row) in record.attention.chunks_exact(t).enumerate() {
        let layer = r / (d.heads * t);
        let head = (r / t) % d.heads;
        let row_idx = r % t;
        let mut sum = 0.0f64;
        for (col, &v) in row.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                out.push(Violation::AttentionRange {
                    layer,
                    head,
                    row: row_idx,
                    col,
                    value: v,
                });
            }
            sum += f64::from(v);
        }
        if !((sum - 1.0).abs() <= ROW_SUM_TOLERANCE) {
            out.push(Violation::RowSum {
                layer,
                head,
                row: row_idx,
                sum,
            });
        }
    }
    out
}

/// Writes `record` and returns the number of bytes emitted. Invalid records
/// are refused before anything is written.
pub fn write_dump<W: Write>(record: &SampleRecord, mut sink: W) -> Result<u64, DumpError> {
    let violations = validate_record(record);
    if !violations.is_empty() {
        return Err(DumpError::Invalid(violations));
    }
    let header = DumpHeader::for_record(record).encode()?;
    sink.write_all(&header)?;
    write_str(&mut sink, &record.model_name, "model name")?;
    for tok in &record.tokens {
        sink.write_all(&tok.id.to_le_bytes())?;
        write_str(&mut sink, &tok.text, "token text")?;
    }
    if let Some(ids) = &record.sentence_ids {
        let mut buf = Vec::with_capacity(ids.len() * 2);
        for id in ids {
            buf.extend_from_slice(&id.to_le_bytes());
        }
        sink.write_all(&buf)?;
    }
    write_f32s(&mut sink, &record.attention)?;
    write_f32s(&mut sink, &record.head_outputs)?;
    sink.flush()?;
    Ok(record.encoded_len())
}

fn write_str<W: Write>(sink: &mut W, s: &str, what: &'static str) -> Result<(), DumpError> {
    let len = u32::try_from(s.len()).map_err(|_| DumpError::FieldOverflow(what))?;
    sink.write_all(&len.to_le_bytes())?;
    sink.write_all(s.as_bytes())?;
    Ok(())
}

fn write_f32s<W: Write>(sink: &mut W, values: &[f32]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(64 * 1024);
    for chunk in values.chunks(16 * 1024) {
        buf.clear();
        for v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        sink.write_all(&buf)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct ReadOptions {
    /// Upper bound on the tensor payload implied by the header.
    pub max_payload_bytes: u64,
}

impl Default for ReadOptions {
    fn default() -> Self {
        Self {
            max_payload_bytes: DEFAULT_MAX_PAYLOAD,
        }
    }
}

/// Reads and fully validates one dump.
pub fn read_dump<R: Read>(source: R) -> Result<SampleRecord, DumpError> {
    read_dump_with(source, &ReadOptions::default())
}

pub fn read_dump_with<R: Read>(source: R, opts: &ReadOptions) -> Result<SampleRecord, DumpError> {
    let mut rd = CountingReader { inner: source, pos: 0 };

    let mut hbuf = [0u8; HEADER_LEN];
    rd.fill(&mut hbuf, HEADER_LEN as u64)?;
    let header = DumpHeader::decode(&hbuf)?;
    let dims = header.dims;
    let payload = dims.tensor_payload_bytes();
    match payload {
        Some(p) if p <= opts.max_payload_bytes => {}
        declared => {
            return Err(DumpError::TooLarge {
                declared,
                cap: opts.max_payload_bytes,
            })
        }
    }
    let payload = payload.expect("checked above");
    let t = dims.seq_len;
    // every token needs at least 8 bytes, so T is bounded by the cap as well
    if (t as u64).saturating_mul(8) > opts.max_payload_bytes {
        return Err(DumpError::TooLarge {
            declared: Some(t as u64 * 8),
            cap: opts.max_payload_bytes,
        });
    }

    let model_name = rd.read_string("model name", opts.max_payload_bytes)?;
    let mut tokens = Vec::with_capacity(t);
    for _ in 0..t {
        let id = rd.read_u32()?;
        let text = rd.read_string("token text", opts.max_payload_bytes)?;
        tokens.push(Token { id, text });
    }
    let sentence_ids = if header.has_sentence_ids() {
        let mut buf = vec![0u8; 2 * t];
        rd.fill(&mut buf, rd.pos + 2 * t as u64 + payload)?;
        Some(
            buf.chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect(),
        )
    } else {
        None
    };

    let expected_total = rd.pos + payload;
    let attention = rd.read_f32s(dims.attention_len().expect("checked"), expected_total)?;
    let head_outputs = rd.read_f32s(dims.head_output_len().expect("checked"), expected_total)?;

    let mut probe = [0u8; 1];
    if read_full(&mut rd.inner, &mut probe)? > 0 {
        return Err(DumpError::TrailingData {
            expected: expected_total,
            actual: expected_total + 1,
        });
    }

    let record = SampleRecord {
        model_name,
        dims,
        tokens,
        sentence_ids,
        attention,
        head_outputs,
    };
    let violations = validate_record(&record);
    if !violations.is_empty() {
        return Err(DumpError::Invalid(violations));
    }
    Ok(record)
}

struct CountingReader<R> {
    inner: R,
    pos: u64,
}

impl<R: Read> CountingReader<R> {
    /// `expected_total` is the file length the caller can vouch for at this
    /// point; it only feeds the truncation message.
    fn fill(&mut self, buf: &mut [u8], expected_total: u64) -> Result<(), DumpError> {
        let n = read_full(&mut self.inner, buf)?;
        self.pos += n as u64;
        if n < buf.len() {
            return Err(DumpError::Truncated {
                expected: expected_total.max(self.pos - n as u64 + buf.len() as u64),
                actual: self.pos,
            });
        }
        Ok(())
    }

    fn read_u32(&mut self) -> Result<u32, DumpError> {
        let mut b = [0u8; 4];
        let at_least = self.pos + 4;
        self.fill(&mut b, at_least)?;
        Ok(u32::from_le_bytes(b))
    }

    fn read_string(&mut self, what: &'static str, cap: u64) -> Result<String, DumpError> {
        let len = u64::from(self.read_u32()?);
        if len > cap {
            return Err(DumpError::TooLarge {
                declared: Some(len),
                cap,
            });
        }
        // grow with the data actually present rather than the declared length
        let mut buf = Vec::new();
        let got = (&mut self.inner).take(len).read_to_end(&mut buf)? as u64;
        self.pos += got;
        if got < len {
            return Err(DumpError::Truncated {
                expected: self.pos - got + len,
                actual: self.pos,
            });
        }
        String::from_utf8(buf).map_err(|_| DumpError::BadUtf8(what))
    }

    fn read_f32s(&mut self, count: usize, expected_total: u64) -> Result<Vec<f32>, DumpError> {
        let mut out = Vec::with_capacity(count);
        let mut buf = vec![0u8; 64 * 1024];
        let mut remaining = count * 4;
        while remaining > 0 {
            let chunk = &mut buf[..remaining.min(64 * 1024)];
            self.fill(chunk, expected_total)?;
            out.extend(
                chunk
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
            );
            remaining -= chunk.len();
        }
        Ok(out)
    }
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(n)
}
