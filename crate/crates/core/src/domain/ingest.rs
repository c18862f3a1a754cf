//! Offer JSONL files and the binary image-embedding sidecar.
//!
//! Sidecar layout (all little-endian):
//!
//! ```text
//! magic   [u8; 4] = "MFEB"
//! version u32     = 1
//! dim     u32
//! count   u32
//! rows    count * dim * f32
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusRole, DomainId, Offer, ProductId, UNKNOWN_CATEGORY};
use crate::error::{Error, Result};

pub const SIDECAR_MAGIC: &[u8; 4] = b"MFEB";
pub const SIDECAR_VERSION: u32 = 1;

/// How offer records are stored on disk.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum OfferFormat {
    /// JSONL; `{"ref": ..}` image embeddings resolve against the sidecar next
    /// to the file (same stem, `.emb` extension) when one exists.
    #[default]
    Jsonl,
    /// JSONL with an explicit sidecar path.
    JsonlWithSidecar(PathBuf),
}

impl OfferFormat {
    pub fn parse(id: &str) -> Result<Self> {
        match id {
            "jsonl" => Ok(OfferFormat::Jsonl),
            other => Err(Error::Config(format!("unknown offer format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSidecar {
    pub dim: usize,
    pub rows: Vec<f32>,
}

impl EmbeddingSidecar {
    pub fn new(dim: usize) -> Self {
        EmbeddingSidecar {
            dim,
            rows: Vec::new(),
        }
    }

    pub fn count(&self) -> usize {
        self.rows.len().checked_div(self.dim).unwrap_or(0)
    }

    /// Appends one vector and returns its row number.
    pub fn push(&mut self, v: &[f64]) -> Result<u32> {
        if v.len() != self.dim {
            return Err(Error::dimension("sidecar row", self.dim, v.len()));
        }
        let row = self.count() as u32;
        self.rows.extend(v.iter().map(|&x| x as f32));
        Ok(row)
    }

    pub fn row(&self, i: usize) -> Option<Vec<f64>> {
        let start = i.checked_mul(self.dim)?;
        self.rows
            .get(start..start + self.dim)
            .map(|r| r.iter().map(|&x| f64::from(x)).collect())
    }
}

pub fn write_sidecar(path: &Path, sidecar: &EmbeddingSidecar) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(SIDECAR_MAGIC)?;
    w.write_all(&SIDECAR_VERSION.to_le_bytes())?;
    w.write_all(&(sidecar.dim as u32).to_le_bytes())?;
    w.write_all(&(sidecar.count() as u32).to_le_bytes())?;
    for x in &sidecar.rows {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sidecar(path: &Path) -> Result<EmbeddingSidecar> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != SIDECAR_MAGIC {
        return Err(Error::Format(format!(
            "{}: missing MFEB header",
            path.display()
        )));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != SIDECAR_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported sidecar version {version}",
            path.display()
        )));
    }
    let dim = word(8) as usize;
    let count = word(12) as usize;
    let body = &bytes[16..];
    if body.len() != dim * count * 4 {
        return Err(Error::Format(format!(
            "{}: expected {} bytes of embeddings, found {}",
            path.display(),
            dim * count * 4,
            body.len()
        )));
    }
    let rows = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(EmbeddingSidecar { dim, rows })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum ImageEmb {
    Inline(Vec<Vec<f64>>),
    Ref {
        #[serde(rename = "ref")]
        row: u32,
        #[serde(default = "one", skip_serializing_if = "is_one")]
        count: u32,
    },
}

fn one() -> u32 {
    1
}

fn is_one(n: &u32) -> bool {
    *n == 1
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OfferRecord {
    offer_id: String,
    domain: String,
    brand: String,
    title: String,
    price: f64,
    n_sizes: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    product_id: Option<String>,
    image_emb: ImageEmb,
    text_emb: Vec<f64>,
}

fn default_sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("emb")
}

/// Reads a JSONL offer file into a validated [`Corpus`] with the `train` role.
/// Missing categories default to `"unknown"`; a missing product id marks an
/// unlabeled offer.
pub fn ingest_offers(path: &Path, format: &OfferFormat) -> Result<Corpus> {
    let sidecar_path = match format {
        OfferFormat::Jsonl => {
            let p = default_sidecar_path(path);
            p.exists().then_some(p)
        }
        OfferFormat::JsonlWithSidecar(p) => Some(p.clone()),
    };
    let sidecar = sidecar_path.as_deref().map(read_sidecar).transpose()?;

    let reader = BufReader::new(File::open(path)?);
    let mut offers = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message,
        };
        let rec: OfferRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let images = match rec.image_emb {
            ImageEmb::Inline(v) => v,
            ImageEmb::Ref { row, count } => {
                let sc = sidecar.as_ref().ok_or_else(|| {
                    parse_err("image_emb references a sidecar but none was found".into())
                })?;
                (row..row + count)
                    .map(|r| {
                        sc.row(r as usize).ok_or_else(|| {
                            parse_err(format!(
                                "sidecar row {r} out of range ({} rows)",
                                sc.count()
                            ))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        if rec.n_sizes < 1 || rec.n_sizes > i64::from(u32::MAX) {
            return Err(parse_err(format!(
                "invalid n_sizes: must be at least 1, got {}",
                rec.n_sizes
            )));
        }
        let domain = DomainId::new(rec.domain).map_err(|e| parse_err(e.to_string()))?;
        let mut offer = Offer::new(
            rec.offer_id,
            domain,
            rec.brand,
            rec.title,
            rec.price,
            rec.n_sizes as u32,
            images,
            rec.text_emb,
        );
        offer.product_id = rec.product_id.map(ProductId);
        offer.category = rec
            .category
            .unwrap_or_else(|| UNKNOWN_CATEGORY.to_string());
        offer
            .validate()
            .map_err(|e| parse_err(e.to_string()))?;
        offers.push(offer);
    }
    Corpus::new(offers, CorpusRole::Train)
}

/// Writes offers as JSONL. With a sidecar, image embeddings are appended to it
/// and referenced by row; the caller persists the sidecar.
pub fn write_offers_jsonl(
    path: &Path,
    offers: &[Offer],
    mut sidecar: Option<&mut EmbeddingSidecar>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for offer in offers {
        let image_emb = match sidecar.as_deref_mut() {
            Some(sc) => {
                let mut first = None;
                for v in &offer.image_embeddings {
                    let row = sc.push(v)?;
                    first.get_or_insert(row);
                }
                ImageEmb::Ref {
                    row: first.ok_or_else(|| Error::EmptyImages(offer.offer_id.clone()))?,
                    count: offer.image_embeddings.len() as u32,
                }
            }
            None => ImageEmb::Inline(offer.image_embeddings.clone()),
        };
        let rec = OfferRecord {
            offer_id: offer.offer_id.clone(),
            domain: offer.domain.to_string(),
            brand: offer.brand_raw.clone(),
            title: offer.title_raw.clone(),
            price: offer.price,
            n_sizes: i64::from(offer.n_sizes),
            category: Some(offer.category.clone()),
            product_id: offer.product_id.as_ref().map(|p| p.0.clone()),
            image_emb,
            text_emb: offer.text_embedding.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::matching_pairs;
    use std::fs;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    const THREE: &str = r#"{"offer_id":"a","domain":"d1","brand":"Vila","title":"Wrap Dress","price":46.9,"n_sizes":6,"product_id":"p1","image_emb":[[1,0],[0,1]],"text_emb":[1,2,3]}
{"offer_id":"b","domain":"d2","brand":"VILA","title":"wrap dress","price":44.99,"n_sizes":7,"product_id":"p1","category":"dress","image_emb":[[1,1]],"text_emb":[1,2,3]}
{"offer_id":"c","domain":"d2","brand":"Vila","title":"Maxi","price":42.99,"n_sizes":7,"image_emb":[[0,1]],"text_emb":[3,2,1]}
"#;

    #[test]
    fn ingests_valid_file_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "c.jsonl", THREE);
        let corpus = ingest_offers(&p, &OfferFormat::Jsonl).unwrap();
        assert_eq!(corpus.len(), 3);
        let offers = corpus.offers();
        assert_eq!(offers[0].category, "unknown");
        assert_eq!(offers[1].category, "dress");
        assert_eq!(offers[2].product_id, None);
        assert_eq!(offers[1].text_feature, "vila wrap dress");
        assert_eq!(
            matching_pairs(&corpus),
            [("a".to_string(), "b".to_string())].into_iter().collect()
        );
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!("{}{{not json\n", THREE.lines().next().unwrap().to_owned() + "\n");
        let p = write(dir.path(), "bad.jsonl", &body);
        match ingest_offers(&p, &OfferFormat::Jsonl) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn image_dimension_mismatch_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let eight = vec![0.5; 8];
        let sixteen = vec![0.5; 16];
        let line = serde_json::json!({
            "offer_id": "x", "domain": "d", "brand": "b", "title": "t", "price": 1.0,
            "n_sizes": 1, "image_emb": [eight, sixteen], "text_emb": [0.0]
        });
        let p = write(dir.path(), "dim.jsonl", &format!("{line}\n"));
        let err = ingest_offers(&p, &OfferFormat::Jsonl).unwrap_err();
        assert!(err.to_string().contains("expected 8, got 16"), "{err}");
    }

    #[test]
    fn duplicate_offer_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let first = THREE.lines().next().unwrap();
        let p = write(dir.path(), "dup.jsonl", &format!("{first}\n{first}\n"));
        assert!(matches!(
            ingest_offers(&p, &OfferFormat::Jsonl),
            Err(Error::DuplicateOffer { .. })
        ));
    }

    #[test]
    fn non_positive_sizes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let line = THREE.lines().next().unwrap().replace("\"n_sizes\":6", "\"n_sizes\":0");
        let p = write(dir.path(), "z.jsonl", &format!("{line}\n"));
        assert!(matches!(
            ingest_offers(&p, &OfferFormat::Jsonl),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn sidecar_roundtrip_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "c.jsonl", THREE);
        let corpus = ingest_offers(&p, &OfferFormat::Jsonl).unwrap();

        let out = dir.path().join("out.jsonl");
        let mut sc = EmbeddingSidecar::new(2);
        write_offers_jsonl(&out, corpus.offers(), Some(&mut sc)).unwrap();
        write_sidecar(&out.with_extension("emb"), &sc).unwrap();
        assert_eq!(sc.count(), 4);

        let back = ingest_offers(&out, &OfferFormat::Jsonl).unwrap();
        assert_eq!(back.offers(), corpus.offers());
    }

    #[test]
    fn sidecar_header_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.emb");
        fs::write(&p, b"NOPE").unwrap();
        assert!(matches!(read_sidecar(&p), Err(Error::Format(_))));

        let mut sc = EmbeddingSidecar::new(3);
        sc.push(&[1.0, 2.0, 3.0]).unwrap();
        write_sidecar(&p, &sc).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"MFEB");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1);
        assert_eq!(bytes.len(), 16 + 12);
        assert_eq!(read_sidecar(&p).unwrap(), sc);
    }

    #[test]
    fn dangling_sidecar_reference() {
        let dir = tempfile::tempdir().unwrap();
        let line = r#"{"offer_id":"a","domain":"d1","brand":"b","title":"t","price":1,"n_sizes":1,"image_emb":{"ref":0},"text_emb":[1]}"#;
        let p = write(dir.path(), "r.jsonl", &format!("{line}\n"));
        assert!(matches!(
            ingest_offers(&p, &OfferFormat::Jsonl),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}
