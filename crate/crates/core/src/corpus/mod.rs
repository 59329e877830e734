//! Seed corpus: the XML-like seed envelope, two-stage synthesis (generation
//! then quality filter) and corpus persistence.
//!
//! Seed bodies are lowercase hex so the envelope survives text transport
//! from external generators; the import parser tolerates embedded
//! whitespace. Seed ids are content hashes (first 16 hex characters of a
//! SHA-256 digest), so identical seeds collapse naturally.

mod generate;
mod minimize;

pub use generate::{generate_seeds, GenerateError};
pub use minimize::{minimize, MinimizeError};

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::hexutil;
use crate::schema::StateId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedOrigin {
    Generated,
    Imported,
    Mutated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    MessageLevel,
    SequenceLevel,
}

/// An ordered list of request messages, at message or sequence granularity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSequence {
    pub id: String,
    pub messages: Vec<Vec<u8>>,
    pub origin: SeedOrigin,
    pub granularity: Granularity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
}

impl SeedSequence {
    pub fn new(messages: Vec<Vec<u8>>, origin: SeedOrigin, granularity: Granularity) -> Self {
        let id = content_id(&messages);
        SeedSequence {
            id,
            messages,
            origin,
            granularity,
            parent_id: None,
        }
    }

    pub fn total_bytes(&self) -> usize {
        self.messages.iter().map(|m| m.len()).sum()
    }
}

/// First 16 hex characters of a SHA-256 over the framed message list.
pub fn content_id(messages: &[Vec<u8>]) -> String {
    let mut hasher = Sha256::new();
    for m in messages {
        hasher.update((m.len() as u32).to_le_bytes());
        hasher.update(m);
    }
    hex::encode(&hasher.finalize()[..8])
}

/// Behavioral equivalence oracle: the derived state path plus a 64-bit hash
/// of the first 64 bytes of each message's response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseSignature {
    pub state_path: Vec<StateId>,
    pub response_prefix_hashes: Vec<u64>,
}

impl ResponseSignature {
    /// Stable key for dedup sets and artifact filenames.
    pub fn key(&self) -> String {
        let mut h = Fnv1a::new();
        for s in &self.state_path {
            h.write(&s.to_le_bytes());
        }
        h.write(&[0xfe]);
        for p in &self.response_prefix_hashes {
            h.write(&p.to_le_bytes());
        }
        format!("{:016x}", h.finish())
    }
}

/// FNV-1a, the stable 64-bit hash used for response prefixes.
pub struct Fnv1a(u64);

impl Fnv1a {
    pub fn new() -> Self {
        Fnv1a(0xcbf2_9ce4_8422_2325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= *b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

/// Hash of the first 64 bytes of one response.
pub fn response_prefix_hash(response: &[u8]) -> u64 {
    let mut h = Fnv1a::new();
    h.write(&response[..response.len().min(64)]);
    h.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportDiagnostic {
    pub entry_index: usize,
    pub reason: String,
}

/// Parses the `<sequence>`/`<message>` envelope. A `<sequence>` whose body is
/// bare hex is a message-level seed; nested `<message>` children make a
/// sequence-level seed. Malformed entries are skipped with diagnostics and
/// never abort the batch.
pub fn import_seeds(xml_text: &str) -> (Vec<SeedSequence>, Vec<ImportDiagnostic>) {
    let mut seeds = Vec::new();
    let mut diags = Vec::new();
    let mut cursor = 0usize;
    let mut entry_index = 0usize;

    while let Some(start) = xml_text[cursor..].find("<sequence>") {
        let body_start = cursor + start + "<sequence>".len();
        let Some(end_rel) = xml_text[body_start..].find("</sequence>") else {
            diags.push(ImportDiagnostic {
                entry_index,
                reason: "unterminated <sequence> entry".into(),
            });
            break;
        };
        let body = &xml_text[body_start..body_start + end_rel];
        cursor = body_start + end_rel + "</sequence>".len();

        match parse_sequence_body(body) {
            Ok((messages, granularity)) => {
                seeds.push(SeedSequence::new(messages, SeedOrigin::Imported, granularity));
            }
            Err(reason) => diags.push(ImportDiagnostic {
                entry_index,
                reason,
            }),
        }
        entry_index += 1;
    }
    (seeds, diags)
}

fn parse_sequence_body(body: &str) -> Result<(Vec<Vec<u8>>, Granularity), String> {
    if body.contains("<message>") {
        let mut messages = Vec::new();
        let mut cursor = 0usize;
        while let Some(start) = body[cursor..].find("<message>") {
            let mstart = cursor + start + "<message>".len();
            let Some(end_rel) = body[mstart..].find("</message>") else {
                return Err("unterminated <message> entry".into());
            };
            let hex_body = &body[mstart..mstart + end_rel];
            let bytes = hexutil::from_hex_tolerant(hex_body)
                .map_err(|e| format!("invalid_hex: {e}"))?;
            if bytes.is_empty() {
                return Err("empty <message> body".into());
            }
            messages.push(bytes);
            cursor = mstart + end_rel + "</message>".len();
        }
        if messages.is_empty() {
            return Err("sequence has no messages".into());
        }
        Ok((messages, Granularity::SequenceLevel))
    } else {
        let bytes = hexutil::from_hex_tolerant(body).map_err(|e| format!("invalid_hex: {e}"))?;
        if bytes.is_empty() {
            return Err("empty sequence body".into());
        }
        Ok((vec![bytes], Granularity::MessageLevel))
    }
}

/// Canonical envelope emitter. `import_seeds` over the result reproduces the
/// corpus content (ids, messages and granularity).
pub fn export_seeds(seeds: &[SeedSequence]) -> String {
    let mut out = String::new();
    for seed in seeds {
        out.push_str(&export_one(seed));
    }
    out
}

fn export_one(seed: &SeedSequence) -> String {
    match seed.granularity {
        Granularity::MessageLevel => {
            format!("<sequence>{}</sequence>\n", hexutil::to_hex(&seed.messages[0]))
        }
        Granularity::SequenceLevel => {
            let mut out = String::from("<sequence>\n");
            for m in &seed.messages {
                out.push_str(&format!("  <message>{}</message>\n", hexutil::to_hex(m)));
            }
            out.push_str("</sequence>\n");
            out
        }
    }
}

/// Writes one seed as `<dir>/<seed-id>.xml`.
pub fn save_seed(dir: &Path, seed: &SeedSequence) -> io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("{}.xml", seed.id));
    fs::write(&path, export_one(seed))?;
    Ok(path)
}

/// Loads every `.xml` seed file under a corpus directory, sorted by file
/// name for determinism.
pub fn load_corpus(dir: &Path) -> io::Result<(Vec<SeedSequence>, Vec<ImportDiagnostic>)> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "xml").unwrap_or(false))
        .collect();
    paths.sort();
    let mut seeds = Vec::new();
    let mut diags = Vec::new();
    for p in paths {
        let text = fs::read_to_string(&p)?;
        let (mut s, d) = import_seeds(&text);
        seeds.append(&mut s);
        diags.extend(d);
    }
    Ok((seeds, diags))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn message_level_seed_from_bare_hex() {
        let (seeds, diags) = import_seeds("<sequence>000100000006010300000001</sequence>");
        assert!(diags.is_empty());
        assert_eq!(seeds.len(), 1);
        assert_eq!(seeds[0].granularity, Granularity::MessageLevel);
        assert_eq!(seeds[0].messages.len(), 1);
        assert_eq!(seeds[0].messages[0].len(), 12);
    }

    #[test]
    fn nested_messages_with_whitespace() {
        let text = "<sequence><message>6804070000 00</message><message>68 04 43 00 00 00</message></sequence>";
        let (seeds, diags) = import_seeds(text);
        assert!(diags.is_empty());
        assert_eq!(seeds.len(), 1);
        assert_eq!(seeds[0].granularity, Granularity::SequenceLevel);
        assert_eq!(seeds[0].messages.len(), 2);
        assert_eq!(seeds[0].messages[0], vec![0x68, 0x04, 0x07, 0, 0, 0]);
    }

    #[test]
    fn invalid_hex_is_skipped_with_diagnostic() {
        let (seeds, diags) = import_seeds("<sequence>zz</sequence>");
        assert!(seeds.is_empty());
        assert_eq!(diags.len(), 1);
        assert!(diags[0].reason.contains("invalid_hex"));
    }

    #[test]
    fn malformed_entry_does_not_abort_batch() {
        let text = "<sequence>zz</sequence><sequence>0102</sequence>";
        let (seeds, diags) = import_seeds(text);
        assert_eq!(seeds.len(), 1);
        assert_eq!(diags.len(), 1);
    }

    #[test]
    fn import_export_identity() {
        let a = SeedSequence::new(vec![vec![1, 2, 3]], SeedOrigin::Generated, Granularity::MessageLevel);
        let b = SeedSequence::new(
            vec![vec![0x68, 4, 7, 0, 0, 0], vec![0xff; 20]],
            SeedOrigin::Generated,
            Granularity::SequenceLevel,
        );
        let corpus = vec![a, b];
        let (reimported, diags) = import_seeds(&export_seeds(&corpus));
        assert!(diags.is_empty());
        assert_eq!(reimported.len(), corpus.len());
        for (x, y) in corpus.iter().zip(&reimported) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.messages, y.messages);
            assert_eq!(x.granularity, y.granularity);
        }
    }

    #[test]
    fn content_id_is_stable_and_framed() {
        assert_eq!(content_id(&[vec![1, 2]]), content_id(&[vec![1, 2]]));
        // Framing distinguishes [1,2] from [1],[2].
        assert_ne!(content_id(&[vec![1, 2]]), content_id(&[vec![1], vec![2]]));
        assert_eq!(content_id(&[vec![1, 2]]).len(), 16);
    }
}
