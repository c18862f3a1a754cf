//! Index file: one `{"offer_id", "brand", "domain", "category", "embedding"}`
//! object per line, `brand` already normalized.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{IndexEntry, MatchIndex};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct IndexRecord {
    #[serde(flatten)]
    entry: IndexEntry,
    embedding: Vec<f64>,
}

pub fn write_index(path: &Path, index: &MatchIndex) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (i, entry) in index.entries().iter().enumerate() {
        let rec = IndexRecord {
            entry: entry.clone(),
            embedding: index.vector(i).to_vec(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_index(path: &Path) -> Result<MatchIndex> {
    let reader = BufReader::new(File::open(path)?);
    let mut entries = Vec::new();
    let mut flat = Vec::new();
    let mut dim = None;
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: IndexRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        let d = *dim.get_or_insert(rec.embedding.len());
        if rec.embedding.len() != d {
            return Err(Error::dimension(
                format!("embedding of {}", rec.entry.offer_id),
                d,
                rec.embedding.len(),
            ));
        }
        flat.extend(rec.embedding);
        entries.push(rec.entry);
    }
    let vectors = Array2::from_shape_vec((entries.len(), dim.unwrap_or(0)), flat)
        .map_err(|e| Error::Format(e.to_string()))?;
    MatchIndex::from_parts(entries, vectors)
}
