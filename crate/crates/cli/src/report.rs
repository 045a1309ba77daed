//! Output directory writer. Every file starts with the config fingerprint:
//! CSVs as a `# config_fingerprint: ...` comment line, JSON as a top-level
//! `config_fingerprint` field.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{Map, Value};

pub struct ReportDir {
    root: PathBuf,
    fingerprint: String,
    written: Vec<String>,
}

impl ReportDir {
    pub fn create(root: &Path, fingerprint: &str) -> io::Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            fingerprint: fingerprint.to_string(),
            written: Vec::new(),
        })
    }

    pub fn files(&self) -> &[String] {
        &self.written
    }

    fn open(&mut self, name: &str) -> io::Result<BufWriter<File>> {
        self.written.push(name.to_string());
        Ok(BufWriter::new(File::create(self.root.join(name))?))
    }

    /// Writes a CSV with a fixed header and one record per row.
    pub fn csv<R, I>(&mut self, name: &str, header: &[&str], rows: R) -> io::Result<()>
    where
        R: IntoIterator<Item = I>,
        I: IntoIterator,
        I::Item: AsRef<[u8]>,
    {
        let mut out = self.open(name)?;
        writeln!(out, "# config_fingerprint: {}", self.fingerprint)?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(header)?;
        for row in rows {
            w.write_record(row)?;
        }
        w.flush()
    }

    /// Dense `rows × cols` matrix with a `row` index column.
    pub fn matrix<T: ToString>(&mut self, name: &str, rows: usize, cols: usize, data: &[T]) -> io::Result<()> {
        let mut header = vec!["row".to_string()];
        header.extend((0..cols).map(|j| j.to_string()));
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let body = (0..rows).map(|i| {
            std::iter::once(i.to_string())
                .chain(data[i * cols..(i + 1) * cols].iter().map(ToString::to_string))
                .collect::<Vec<_>>()
        });
        self.csv(name, &header, body)
    }

    /// Writes `value` as pretty JSON with the fingerprint added at the top level.
    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> io::Result<()> {
        let mut obj = Map::new();
        obj.insert("config_fingerprint".into(), Value::String(self.fingerprint.clone()));
        match serde_json::to_value(value)? {
            Value::Object(m) => obj.extend(m),
            other => {
                obj.insert("data".into(), other);
            }
        }
        let mut out = self.open(name)?;
        serde_json::to_writer_pretty(&mut out, &Value::Object(obj))?;
        writeln!(out)?;
        out.flush()
    }
}

/// Shortest round-trip formatting; empty for undefined values.
pub fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}
