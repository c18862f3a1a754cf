//! Head file and embedding file formats.
//!
//! Head file, little-endian:
//!
//! ```text
//! magic        [u8; 4] = "MFPH"
//! version      u32     = 1
//! d_in         u32
//! d_out        u32
//! layer_count  u32     (1 = linear, 2 = hidden ReLU layer)
//! mask         u32     (bit 0 image, bit 1 text, bit 2 numerical)
//! d_img        u32
//! d_txt        u32
//! hidden       u32     (0 when layer_count = 1)
//! per layer:   weight  out * in f64, row-major
//!              bias    out f64
//! stats:       mean    3 f64
//!              std     3 f64
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{Embeddings, FeatureStats, Linear, ModalityMask, ProjectionHead, NUMERICAL_DIM};
use crate::error::{Error, Result};

pub const HEAD_MAGIC: &[u8; 4] = b"MFPH";
pub const HEAD_VERSION: u32 = 1;

pub fn write_head(path: &Path, head: &ProjectionHead) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let hidden = if head.layers.len() == 2 {
        head.layers[0].output_dim()
    } else {
        0
    };
    w.write_all(HEAD_MAGIC)?;
    for word in [
        HEAD_VERSION,
        head.input_dim() as u32,
        head.output_dim() as u32,
        head.layers.len() as u32,
        head.mask.bits(),
        head.d_img as u32,
        head.d_txt as u32,
        hidden as u32,
    ] {
        w.write_all(&word.to_le_bytes())?;
    }
    for layer in &head.layers {
        for x in layer.weight.iter().chain(layer.bias.iter()) {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    for x in head.stats.mean.iter().chain(head.stats.std.iter()) {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos + n;
        let out = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Format("head file truncated".into()))?;
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn read_head(path: &Path) -> Result<ProjectionHead> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut c = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if c.take(4)? != HEAD_MAGIC {
        return Err(Error::Format(format!(
            "{}: missing MFPH header",
            path.display()
        )));
    }
    let version = c.u32()?;
    if version != HEAD_VERSION {
        return Err(Error::Format(format!("unsupported head version {version}")));
    }
    let d_in = c.u32()? as usize;
    let d_out = c.u32()? as usize;
    let layer_count = c.u32()?;
    let mask = ModalityMask::from_bits(c.u32()?)?;
    let d_img = c.u32()? as usize;
    let d_txt = c.u32()? as usize;
    let hidden = c.u32()? as usize;
    if mask.fused_dim(d_img, d_txt) != d_in {
        return Err(Error::dimension(
            "head input",
            mask.fused_dim(d_img, d_txt),
            d_in,
        ));
    }
    let shapes = match layer_count {
        1 => vec![(d_out, d_in)],
        2 => vec![(hidden, d_in), (d_out, hidden)],
        n => return Err(Error::Format(format!("unsupported layer count {n}"))),
    };
    let mut layers = Vec::new();
    for (out, inp) in shapes {
        let weight = Array2::from_shape_vec((out, inp), c.f64s(out * inp)?)
            .map_err(|e| Error::Format(e.to_string()))?;
        let bias = Array1::from(c.f64s(out)?);
        layers.push(Linear { weight, bias });
    }
    let stats = c.f64s(2 * NUMERICAL_DIM)?;
    if c.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after head",
            bytes.len() - c.pos
        )));
    }
    Ok(ProjectionHead {
        layers,
        d_img,
        d_txt,
        mask,
        stats: FeatureStats {
            mean: stats[..3].try_into().unwrap(),
            std: stats[3..].try_into().unwrap(),
        },
    })
}

#[derive(Serialize, Deserialize)]
struct EmbeddingRecord {
    offer_id: String,
    embedding: Vec<f64>,
}

/// One `{"offer_id", "embedding"}` object per line.
pub fn write_embeddings(path: &Path, emb: &Embeddings) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (i, id) in emb.ids.iter().enumerate() {
        let rec = EmbeddingRecord {
            offer_id: id.clone(),
            embedding: emb.row(i).to_vec(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<Embeddings> {
    let reader = BufReader::new(File::open(path)?);
    let mut ids = Vec::new();
    let mut flat = Vec::new();
    let mut dim = None;
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EmbeddingRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        let d = *dim.get_or_insert(rec.embedding.len());
        if rec.embedding.len() != d {
            return Err(Error::dimension(
                format!("embedding of {}", rec.offer_id),
                d,
                rec.embedding.len(),
            ));
        }
        ids.push(rec.offer_id);
        flat.extend(rec.embedding);
    }
    let vectors = Array2::from_shape_vec((ids.len(), dim.unwrap_or(0)), flat)
        .map_err(|e| Error::Format(e.to_string()))?;
    Embeddings::new(ids, vectors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let stats = FeatureStats {
            mean: [1.0, 2.0, 3.0],
            std: [0.5, 0.25, 2.0],
        };
        for head in [
            ProjectionHead::new_linear(5, 3, ModalityMask::ALL, 4, stats, 9).unwrap(),
            ProjectionHead::new_hidden(5, 3, ModalityMask::IMAGE_ONLY, 4, stats, 9).unwrap(),
        ] {
            let p = dir.path().join("h.bin");
            write_head(&p, &head).unwrap();
            assert_eq!(read_head(&p).unwrap(), head);
        }
    }

    #[test]
    fn head_header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let head = ProjectionHead::new_linear(2, 2, ModalityMask::ALL, 3, FeatureStats::IDENTITY, 0).unwrap();
        let p = dir.path().join("h.bin");
        write_head(&p, &head).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        assert_eq!(&bytes[..4], b"MFPH");
        assert_eq!(
            [word(4), word(8), word(12), word(16), word(20), word(24), word(28), word(32)],
            [1, 7, 3, 1, 7, 2, 2, 0]
        );
        assert_eq!(bytes.len(), 36 + (7 * 3 + 3 + 6) * 8);
    }

    #[test]
    fn truncated_head_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let head = ProjectionHead::new_linear(2, 2, ModalityMask::ALL, 3, FeatureStats::IDENTITY, 0).unwrap();
        let p = dir.path().join("h.bin");
        write_head(&p, &head).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_head(&p), Err(Error::Format(_))));
    }

    #[test]
    fn embeddings_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let emb = Embeddings::new(
            vec!["a".into(), "b".into()],
            Array2::from_shape_vec((2, 2), vec![0.6, 0.8, 1.0, 0.0]).unwrap(),
        )
        .unwrap();
        let p = dir.path().join("e.jsonl");
        write_embeddings(&p, &emb).unwrap();
        assert_eq!(read_embeddings(&p).unwrap(), emb);
    }
}
