//! Record-then-check trace capture: path-triggered recording plus
//! probabilistic sampling, persisted as JSON Lines for batch oracle
//! analysis. The fuzzing loop performs zero external-service requests;
//! recording is purely local file I/O.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::NoveltyVerdict;
use crate::schema::StateId;

pub const TRACE_FORMAT_VERSION: u32 = 1;

pub use crate::engine::ConnectionResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoveltyClass {
    PathTriggered,
    Sampled,
}

/// One request/response exchange: hex bodies, per-message timeout flag,
/// round-trip time and whether the server closed during this exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePair {
    pub req: String,
    pub resp: String,
    pub timeout: bool,
    pub rtt_ms: u64,
    #[serde(default)]
    pub closed: bool,
}

/// One executed sequence with its full communication history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub format_version: u32,
    pub trace_id: String,
    pub campaign_id: String,
    pub timestamp: u64,
    pub protocol: String,
    pub seed_id: String,
    pub pairs: Vec<TracePair>,
    pub state_path: Vec<StateId>,
    pub novelty: NoveltyClass,
    pub connection_result: ConnectionResult,
    #[serde(default)]
    pub crash: bool,
}

impl TraceRecord {
    /// Content hash over the outcome (pairs, path, connection result, crash
    /// flag); identical outcomes share a trace id regardless of when or from
    /// which seed they were observed.
    pub fn content_id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.protocol.as_bytes());
        for p in &self.pairs {
            h.update(p.req.as_bytes());
            h.update([0]);
            h.update(p.resp.as_bytes());
            h.update([if p.timeout { 1 } else { 0 }, if p.closed { 1 } else { 0 }]);
        }
        for s in &self.state_path {
            h.update(s.to_le_bytes());
        }
        h.update([self.connection_result as u8, if self.crash { 1 } else { 0 }]);
        hex::encode(&h.finalize()[..8])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordAs {
    PathTriggered,
    Sampled,
    None,
}

/// Recording decision: any novelty flag forces path-triggered capture;
/// otherwise the execution is sampled with probability `p_sample`.
pub fn should_record<R: Rng>(verdict: &NoveltyVerdict, rng: &mut R, p_sample: f64) -> RecordAs {
    if verdict.any() {
        RecordAs::PathTriggered
    } else if p_sample > 0.0 && rng.gen::<f64>() < p_sample {
        RecordAs::Sampled
    } else {
        RecordAs::None
    }
}

/// Append-only JSON Lines trace store. A write failure disables recording
/// with a loud diagnostic instead of stopping the campaign.
pub struct TraceStore {
    path: PathBuf,
    file: Option<File>,
    seen: HashSet<String>,
    pub disabled: bool,
    pub path_triggered_rows: u64,
    pub sampled_rows: u64,
}

impl TraceStore {
    pub fn open(path: &Path) -> Self {
        if let Some(parent) = path.parent() {
            let _ = std::fs::create_dir_all(parent);
        }
        match OpenOptions::new().create(true).append(true).open(path) {
            Ok(file) => TraceStore {
                path: path.to_path_buf(),
                file: Some(file),
                seen: HashSet::new(),
                disabled: false,
                path_triggered_rows: 0,
                sampled_rows: 0,
            },
            Err(e) => {
                log::error!("trace store {path:?} unwritable ({e}); recording disabled");
                TraceStore {
                    path: path.to_path_buf(),
                    file: None,
                    seen: HashSet::new(),
                    disabled: true,
                    path_triggered_rows: 0,
                    sampled_rows: 0,
                }
            }
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one record, filling in its content-hash trace id. The file is
    /// flushed before returning. Duplicate outcomes are deduplicated; the
    /// returned id is the stored one either way.
    pub fn append(&mut self, mut record: TraceRecord) -> Option<String> {
        if self.disabled {
            return None;
        }
        record.trace_id = record.content_id();
        if !self.seen.insert(record.trace_id.clone()) {
            return Some(record.trace_id);
        }
        let line = serde_json::to_string(&record).expect("trace serializes");
        let result = self.file.as_mut().map(|f| {
            f.write_all(line.as_bytes())
                .and_then(|_| f.write_all(b"\n"))
                .and_then(|_| f.flush())
        });
        match result {
            Some(Ok(())) => {
                match record.novelty {
                    NoveltyClass::PathTriggered => self.path_triggered_rows += 1,
                    NoveltyClass::Sampled => self.sampled_rows += 1,
                }
                Some(record.trace_id)
            }
            _ => {
                log::error!(
                    "trace store {:?} write failed; recording disabled, campaign continues",
                    self.path
                );
                self.disabled = true;
                self.file = None;
                None
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadDiagnostic {
    pub line: usize,
    pub reason: String,
}

/// Reads a JSON Lines trace file, skipping corrupt rows. A truncated final
/// line (crashed campaign) is detected and skipped like any corrupt row.
pub fn read_traces(path: &Path) -> std::io::Result<(Vec<TraceRecord>, Vec<ReadDiagnostic>)> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut diags = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TraceRecord>(&line) {
            Ok(r) => records.push(r),
            Err(e) => diags.push(ReadDiagnostic {
                line: idx + 1,
                reason: e.to_string(),
            }),
        }
    }
    Ok((records, diags))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample_record() -> TraceRecord {
        TraceRecord {
            format_version: TRACE_FORMAT_VERSION,
            trace_id: String::new(),
            campaign_id: "c1".into(),
            timestamp: 123,
            protocol: "modbus-tcp".into(),
            seed_id: "s1".into(),
            pairs: vec![TracePair {
                req: "0001".into(),
                resp: "0002".into(),
                timeout: false,
                rtt_ms: 1,
                closed: false,
            }],
            state_path: vec![3],
            novelty: NoveltyClass::PathTriggered,
            connection_result: ConnectionResult::CleanClose,
            crash: false,
        }
    }

    #[test]
    fn append_then_reread_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let mut store = TraceStore::open(&path);
        let id = store.append(sample_record()).unwrap();
        let (records, diags) = read_traces(&path).unwrap();
        assert!(diags.is_empty());
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].trace_id, id);
        assert_eq!(records[0].pairs, sample_record().pairs);
    }

    #[test]
    fn identical_outcomes_deduplicate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let mut store = TraceStore::open(&path);
        let a = store.append(sample_record()).unwrap();
        let mut second = sample_record();
        second.timestamp = 999; // timestamp does not affect identity
        let b = store.append(second).unwrap();
        assert_eq!(a, b);
        let (records, _) = read_traces(&path).unwrap();
        assert_eq!(records.len(), 1);
    }

    #[test]
    fn unwritable_store_disables_recording() {
        let mut store = TraceStore::open(Path::new("/proc/definitely/not/writable/t.jsonl"));
        assert!(store.disabled);
        assert!(store.append(sample_record()).is_none());
    }

    #[test]
    fn truncated_final_line_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let mut store = TraceStore::open(&path);
        store.append(sample_record()).unwrap();
        // Simulate a crashed campaign: half a row at the end.
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"format_version\":1,\"trace_id\":\"xx").unwrap();
        drop(f);
        let (records, diags) = read_traces(&path).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(diags.len(), 1);
    }

    #[test]
    fn sampling_decision_contract() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let novel = NoveltyVerdict {
            new_node: false,
            new_edge: true,
            new_signature: false,
        };
        assert_eq!(should_record(&novel, &mut rng, 0.0), RecordAs::PathTriggered);
        let dull = NoveltyVerdict {
            new_node: false,
            new_edge: false,
            new_signature: false,
        };
        assert_eq!(should_record(&dull, &mut rng, 1.0), RecordAs::Sampled);
        assert_eq!(should_record(&dull, &mut rng, 0.0), RecordAs::None);
    }

    #[test]
    fn sampling_rate_statistics() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let dull = NoveltyVerdict {
            new_node: false,
            new_edge: false,
            new_signature: false,
        };
        let n = 100_000;
        let sampled = (0..n)
            .filter(|_| should_record(&dull, &mut rng, 0.01) == RecordAs::Sampled)
            .count();
        let fraction = sampled as f64 / n as f64;
        assert!(
            (0.008..=0.012).contains(&fraction),
            "sampled fraction {fraction} outside [0.008, 0.012]"
        );
    }
}
