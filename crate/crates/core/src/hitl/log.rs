//! Append-only JSONL event log with an optional compacted snapshot.
//!
//! Each line is `{"seq": n, "event": {...}}` with strictly increasing `seq`.
//! A trailing line without its newline is a torn write from a crash and is
//! cut off on open; any other unreadable line refuses the open.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::store::{Catalog, EnqueueReport, RoutingPolicy, RowDraft};
use super::{plan_rows, AggregationRule, Choice, Event, ValidationRow, ValidationStore};
use crate::error::{Error, Result};
use crate::eval::GroundTruth;
use crate::retrieval::MatchPrediction;

pub const LOG_FILE: &str = "events.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedEvent {
    pub seq: u64,
    pub event: Event,
}

#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    file: File,
    last_seq: u64,
}

impl EventLog {
    /// Opens or creates the log and returns its events with 1-based line numbers.
    pub fn open(path: &Path) -> Result<(EventLog, Vec<(usize, LoggedEvent)>)> {
        let bytes = match fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let corrupt = |line: usize, message: String| Error::CorruptLog {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut events = Vec::new();
        let mut last_seq = 0;
        let mut offset = 0;
        let mut keep = bytes.len();
        let mut line_no = 0;
        while offset < bytes.len() {
            line_no += 1;
            let end = bytes[offset..].iter().position(|&b| b == b'\n');
            let (line, complete) = match end {
                Some(e) => (&bytes[offset..offset + e], true),
                None => (&bytes[offset..], false),
            };
            let parsed = std::str::from_utf8(line)
                .map_err(|e| e.to_string())
                .and_then(|s| serde_json::from_str::<LoggedEvent>(s).map_err(|e| e.to_string()));
            match parsed {
                Ok(ev) => {
                    if ev.seq <= last_seq {
                        return Err(corrupt(
                            line_no,
                            format!("sequence {} after {last_seq}", ev.seq),
                        ));
                    }
                    if !complete {
                        keep = offset;
                        tracing::warn!(line = line_no, "dropping unterminated trailing event");
                        break;
                    }
                    last_seq = ev.seq;
                    events.push((line_no, ev));
                }
                Err(_) if line.iter().all(u8::is_ascii_whitespace) && complete => {}
                Err(_) if !complete => {
                    keep = offset;
                    tracing::warn!(line = line_no, "dropping torn trailing event");
                    break;
                }
                Err(message) => return Err(corrupt(line_no, message)),
            }
            offset += line.len() + 1;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        if keep < bytes.len() {
            file.set_len(keep as u64)?;
        }
        Ok((
            EventLog {
                path: path.to_path_buf(),
                file,
                last_seq,
            },
            events,
        ))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    /// Writes one line in a single call and returns its sequence number.
    pub fn append(&mut self, event: &Event) -> Result<u64> {
        let seq = self.last_seq + 1;
        let mut line = serde_json::to_vec(&LoggedEvent {
            seq,
            event: event.clone(),
        })?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.last_seq = seq;
        Ok(seq)
    }

    pub fn sync(&self) -> Result<()> {
        self.file.sync_all()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub last_seq: u64,
    pub store: serde_json::Value,
}

impl Snapshot {
    pub fn read(path: &Path) -> Result<Option<Snapshot>> {
        match fs::read(path) {
            Ok(b) => Ok(Some(serde_json::from_slice(&b)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Write to a sibling temp file, then rename over the target.
    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        {
            let mut f = File::create(&tmp)?;
            serde_json::to_writer(&mut f, self)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }
}

/// Validation store whose every change is logged before it is applied.
#[derive(Debug)]
pub struct DurableStore {
    store: ValidationStore,
    log: EventLog,
    snapshot_path: PathBuf,
    applied_seq: u64,
}

impl DurableStore {
    /// Loads the snapshot in `dir` if present, then replays newer log events.
    pub fn open(dir: &Path, judgments: usize, rule: AggregationRule) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let snapshot_path = dir.join(SNAPSHOT_FILE);
        let (store, applied_seq) = match Snapshot::read(&snapshot_path)? {
            Some(s) => {
                let store = ValidationStore::from_json(s.store)?;
                if store.judgments() != judgments || store.rule() != rule {
                    return Err(Error::Config(format!(
                        "snapshot was taken with {} judgments and {:?} aggregation, configured {judgments} and {rule:?}",
                        store.judgments(),
                        store.rule()
                    )));
                }
                (store, s.last_seq)
            }
            None => (ValidationStore::new(judgments, rule)?, 0),
        };
        let (log, events) = EventLog::open(&dir.join(LOG_FILE))?;
        let mut durable = DurableStore {
            store,
            log,
            snapshot_path,
            applied_seq,
        };
        durable.replay(&events)?;
        Ok(durable)
    }

    /// Applies events newer than the last applied one; older ones are skipped,
    /// so replaying the same log twice is a no-op.
    pub fn replay(&mut self, events: &[(usize, LoggedEvent)]) -> Result<()> {
        for (line, ev) in events {
            if ev.seq <= self.applied_seq {
                continue;
            }
            self.store.apply(&ev.event).map_err(|e| Error::CorruptLog {
                path: self.log.path().to_path_buf(),
                line: *line,
                message: format!("event {} does not apply: {e}", ev.seq),
            })?;
            self.applied_seq = ev.seq;
        }
        Ok(())
    }

    pub fn store(&self) -> &ValidationStore {
        &self.store
    }

    pub fn applied_seq(&self) -> u64 {
        self.applied_seq
    }

    fn commit(&mut self, event: Event) -> Result<()> {
        let seq = self.log.append(&event)?;
        self.store.apply(&event)?;
        self.applied_seq = seq;
        Ok(())
    }

    pub fn create_row(&mut self, draft: RowDraft) -> Result<Option<u64>> {
        match self.store.prepare_row(draft)? {
            Some(event) => {
                let id = match &event {
                    Event::RowCreated { row } => row.row_id,
                    Event::Vote { .. } => unreachable!(),
                };
                self.commit(event)?;
                Ok(Some(id))
            }
            None => Ok(None),
        }
    }

    pub fn record_vote(&mut self, row_id: u64, validator: &str, choice: Choice) -> Result<ValidationRow> {
        let event = self.store.prepare_vote(row_id, validator, choice)?;
        self.commit(event)?;
        Ok(self.store.row(row_id).expect("row exists").clone())
    }

    pub fn enqueue_predictions(
        &mut self,
        predictions: &[MatchPrediction],
        policy: &RoutingPolicy,
        catalog: &Catalog,
        truth: Option<&GroundTruth>,
    ) -> Result<EnqueueReport> {
        let (drafts, mut report) = plan_rows(predictions, policy, catalog, truth)?;
        for d in drafts {
            match self.create_row(d)? {
                Some(id) => report.created.push(id),
                None => report.duplicates += 1,
            }
        }
        Ok(report)
    }

    /// Writes the current state as the snapshot; the log is kept as the audit trail.
    pub fn compact(&self) -> Result<()> {
        Snapshot {
            last_seq: self.applied_seq,
            store: self.store.to_json(),
        }
        .write(&self.snapshot_path)
    }

    pub fn flush(&self) -> Result<()> {
        self.log.sync()
    }
}
