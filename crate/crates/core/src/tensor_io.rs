//! Embedding matrices on disk and in memory.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "FNC1"
//! 4       4     u32 version (= 1)
//! 8       8     u64 n (rows)
//! 16      8     u64 d (columns)
//! 24      4nd   f32 payload, row-major
//! ```
//!
//! CSV files hold one sample per line as comma-separated decimal floats.
//! Labels never live in the matrix file; they go in a sidecar text file with
//! one integer per line.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{FincError, Result};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"FNC1";
pub const EMBEDDING_VERSION: u32 = 1;
pub const EMBEDDING_HEADER_LEN: usize = 24;

/// An `n x d` matrix of finite `f32` feature vectors with optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    n: usize,
    d: usize,
    data: Vec<f32>,
    labels: Option<Vec<i64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    Binary,
    Csv { skip_header: bool },
}

impl DataFormat {
    /// Infers the format from a file extension: `.csv` is CSV, anything else binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => DataFormat::Csv { skip_header: false },
            _ => DataFormat::Binary,
        }
    }
}

impl EmbeddingSet {
    /// Builds a set from row-major data. Rows are numbered from 1 in errors.
    pub fn new(n: usize, d: usize, data: Vec<f32>) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(FincError::Format(format!(
                "embedding set must be non-empty, got n={n}, d={d}"
            )));
        }
        if data.len() != n * d {
            return Err(FincError::Format(format!(
                "expected {} values for {n}x{d}, found {}",
                n * d,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(FincError::NonFinite {
                row: pos / d + 1,
                col: pos % d + 1,
            });
        }
        Ok(EmbeddingSet {
            n,
            d,
            data,
            labels: None,
        })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let d = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * d);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != d {
                return Err(FincError::RowLength {
                    row: i + 1,
                    expected: d,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        EmbeddingSet::new(rows.len(), d, data)
    }

    pub fn with_labels(mut self, labels: Vec<i64>) -> Result<Self> {
        if labels.len() != self.n {
            return Err(FincError::DimensionMismatch {
                expected: self.n,
                found: labels.len(),
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn labels(&self) -> Option<&[i64]> {
        self.labels.as_deref()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.d)
    }

    /// Row `i` widened to `f64`.
    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| v as f64).collect()
    }

    /// The rows at `indices`, in that order, carrying labels along.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        let out = EmbeddingSet::new(indices.len(), self.d, data)?;
        match &self.labels {
            Some(l) => out.with_labels(indices.iter().map(|&i| l[i]).collect()),
            None => Ok(out),
        }
    }

    /// Canonical binary encoding, as written by [`save_embeddings`].
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(EMBEDDING_HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n as u64).to_le_bytes());
        out.extend_from_slice(&(self.d as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < EMBEDDING_HEADER_LEN {
            return Err(FincError::Format(format!(
                "file too short for header: {} bytes",
                bytes.len()
            )));
        }
        if &bytes[0..4] != EMBEDDING_MAGIC {
            return Err(FincError::Format("bad magic, expected FNC1".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != EMBEDDING_VERSION {
            return Err(FincError::Format(format!("unsupported version {version}")));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let d = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let payload = &bytes[EMBEDDING_HEADER_LEN..];
        let declared = n
            .checked_mul(d)
            .and_then(|nd| nd.checked_mul(4))
            .ok_or_else(|| FincError::Format(format!("header overflows: n={n}, d={d}")))?;
        if declared != payload.len() as u64 {
            return Err(FincError::Format(format!(
                "header declares {declared} payload bytes for {n}x{d}, file has {}",
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        EmbeddingSet::new(n as usize, d as usize, data)
    }

    /// Parses CSV text. Blank lines are ignored.
    pub fn from_csv_reader<R: Read>(reader: R, skip_header: bool) -> Result<Self> {
        let reader = BufReader::new(reader);
        let mut data = Vec::new();
        let mut d = 0usize;
        let mut n = 0usize;
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| FincError::Format(format!("line {}: {e}", lineno + 1)))?;
            if skip_header && lineno == 0 {
                continue;
            }
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let row = n + 1;
            let mut count = 0;
            for (col, field) in line.split(',').enumerate() {
                let v: f32 = field.trim().parse().map_err(|_| {
                    FincError::Format(format!(
                        "row {row}, column {}: cannot parse {:?} as a float",
                        col + 1,
                        field.trim()
                    ))
                })?;
                if !v.is_finite() {
                    return Err(FincError::NonFinite { row, col: col + 1 });
                }
                data.push(v);
                count += 1;
            }
            if n == 0 {
                d = count;
            } else if count != d {
                return Err(FincError::RowLength {
                    row,
                    expected: d,
                    found: count,
                });
            }
            n += 1;
        }
        EmbeddingSet::new(n, d, data)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for row in self.rows() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    /// 64-bit FNV-1a over the canonical binary encoding.
    pub fn digest(&self) -> u64 {
        fnv1a64(&self.to_bytes())
    }
}

pub fn load_embeddings(path: &Path, format: DataFormat) -> Result<EmbeddingSet> {
    match format {
        DataFormat::Binary => {
            let bytes = fs::read(path).map_err(|e| FincError::io(path, e))?;
            EmbeddingSet::from_bytes(&bytes)
        }
        DataFormat::Csv { skip_header } => {
            let file = fs::File::open(path).map_err(|e| FincError::io(path, e))?;
            EmbeddingSet::from_csv_reader(file, skip_header)
        }
    }
}

/// Writes the binary format.
pub fn save_embeddings(set: &EmbeddingSet, path: &Path) -> Result<()> {
    fs::write(path, set.to_bytes()).map_err(|e| FincError::io(path, e))
}

pub fn save_embeddings_csv(set: &EmbeddingSet, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| FincError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    set.write_csv(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| FincError::io(path, e))
}

pub fn load_labels(path: &Path) -> Result<Vec<i64>> {
    let text = fs::read_to_string(path).map_err(|e| FincError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse::<i64>().map_err(|_| {
                FincError::Format(format!("label line {}: {:?} is not an integer", i + 1, l))
            })
        })
        .collect()
}

pub fn save_labels(labels: &[i64], path: &Path) -> Result<()> {
    let mut text = String::with_capacity(labels.len() * 3);
    for l in labels {
        text.push_str(&l.to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| FincError::io(path, e))
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}
