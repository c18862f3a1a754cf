#![allow(dead_code)]

use std::path::{Path, PathBuf};

use prodmatch::config::AppConfig;
use prodmatch::encoder::{write_head, ModalityMask, ProjectionHead};
use prodmatch::pipeline::PipelineJob;
use prodmatch::synth::{generate, split_path, SynthConfig, SynthSplits};
use tempfile::TempDir;

pub const CORPUS_DIR: &str = "corpus";
pub const HEAD_FILE: &str = "head.bin";

/// A data directory holding a synthetic corpus under `corpus/` and an
/// identity head over image and text embeddings. Raw embeddings sit far
/// apart, so the configuration accepts and routes distances up to 1.
pub struct Fixture {
    pub dir: TempDir,
    pub synth: SynthConfig,
    pub splits: SynthSplits,
    pub config: AppConfig,
}

impl Fixture {
    pub fn new(n_products: usize, seed: u64) -> Fixture {
        let dir = TempDir::new().unwrap();
        let synth = SynthConfig {
            n_products,
            seed,
            ..SynthConfig::default()
        };
        let splits = generate(&synth).unwrap();
        splits.write(&dir.path().join(CORPUS_DIR), &synth).unwrap();
        let head = ProjectionHead::identity(synth.d_img, synth.d_txt, ModalityMask::IMAGE_TEXT);
        write_head(&dir.path().join(HEAD_FILE), &head).unwrap();
        let mut config = AppConfig {
            data_dir: dir.path().to_path_buf(),
            seed,
            ..AppConfig::default()
        };
        config.retrieval.distance_threshold = 1.0;
        config.routing.auto_reject_above = 1.0;
        Fixture {
            dir,
            synth,
            splits,
            config,
        }
    }

    pub fn data(&self) -> &Path {
        self.dir.path()
    }

    pub fn split(&self, name: &str) -> PathBuf {
        split_path(&self.data().join(CORPUS_DIR), name)
    }

    /// In-domain test queries against the test index, with absolute paths.
    pub fn job(&self, name: &str) -> PipelineJob {
        PipelineJob {
            name: name.into(),
            index_corpus: self.split("test_index"),
            query_corpus: self.split("test_in_query"),
            head: self.data().join(HEAD_FILE),
            enqueue: true,
        }
    }

    /// As [`Fixture::job`], with paths relative to the data directory.
    pub fn relative_job(&self, name: &str) -> PipelineJob {
        PipelineJob {
            name: name.into(),
            index_corpus: PathBuf::from(CORPUS_DIR).join("test_index.jsonl"),
            query_corpus: PathBuf::from(CORPUS_DIR).join("test_in_query.jsonl"),
            head: PathBuf::from(HEAD_FILE),
            enqueue: true,
        }
    }
}
