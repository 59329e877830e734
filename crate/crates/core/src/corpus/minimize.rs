//! Response-signature-preserving seed minimization.
//!
//! Two passes: greedy whole-message dropping (last to first), then per-message
//! trailing-byte trimming by binary search followed by zeroing of non-opcode
//! byte runs. The executor is a caller-supplied closure, so the minimizer is
//! independent of the transport.

use thiserror::Error;

use crate::codec;
use crate::schema::{Direction, ProtocolSchema};

use super::{Granularity, ResponseSignature, SeedOrigin, SeedSequence};

#[derive(Debug, Error)]
pub enum MinimizeError {
    #[error("target unreachable or execution failed: {0}")]
    Execution(String),
    #[error("target answered nondeterministically across baseline runs; minimization refused")]
    NonDeterministic,
}

/// Runs a candidate sequence and yields its response signature.
pub type SignatureRunner<'a> = dyn FnMut(&[Vec<u8>]) -> Result<ResponseSignature, String> + 'a;

const ZERO_RUN: usize = 4;

/// Minimizes `seed` while preserving its end-to-end [`ResponseSignature`].
/// The baseline signature is computed twice; any divergence refuses
/// minimization. The result never has more messages or more bytes than the
/// input and minimization is idempotent against a deterministic target.
pub fn minimize(
    seed: &SeedSequence,
    schema: &ProtocolSchema,
    run: &mut SignatureRunner<'_>,
) -> Result<SeedSequence, MinimizeError> {
    let baseline = run(&seed.messages).map_err(MinimizeError::Execution)?;
    let check = run(&seed.messages).map_err(MinimizeError::Execution)?;
    if baseline != check {
        return Err(MinimizeError::NonDeterministic);
    }

    let mut messages = seed.messages.clone();

    // Pass 1: drop whole messages, last to first.
    let mut i = messages.len();
    while i > 0 {
        i -= 1;
        if messages.len() == 1 {
            break;
        }
        let mut candidate = messages.clone();
        candidate.remove(i);
        if run(&candidate).map_err(MinimizeError::Execution)? == baseline {
            messages = candidate;
        }
    }

    // Pass 2a: trim trailing bytes per message by binary search for the
    // smallest preserved keep-length.
    for idx in 0..messages.len() {
        let full = messages[idx].len();
        let mut lo = 1usize;
        let mut hi = full;
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            let mut candidate = messages.clone();
            candidate[idx].truncate(mid);
            if run(&candidate).map_err(MinimizeError::Execution)? == baseline {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        if hi < full {
            // Binary search can land on a non-monotonic boundary; accept only
            // a verified candidate.
            let mut candidate = messages.clone();
            candidate[idx].truncate(hi);
            if run(&candidate).map_err(MinimizeError::Execution)? == baseline {
                messages = candidate;
            }
        }
    }

    // Pass 2b: zero non-opcode byte runs where the signature is preserved.
    for idx in 0..messages.len() {
        let protected = opcode_span(schema, &messages[idx]);
        let len = messages[idx].len();
        let mut start = 0;
        while start < len {
            let end = (start + ZERO_RUN).min(len);
            let overlaps = protected
                .iter()
                .any(|(off, width)| start < off + width && end > *off);
            let already_zero = messages[idx][start..end].iter().all(|b| *b == 0);
            if !overlaps && !already_zero {
                let mut candidate = messages.clone();
                for b in &mut candidate[idx][start..end] {
                    *b = 0;
                }
                if run(&candidate).map_err(MinimizeError::Execution)? == baseline {
                    messages = candidate;
                }
            }
            start = end;
        }
    }

    let granularity = if messages.len() == 1 {
        Granularity::MessageLevel
    } else {
        Granularity::SequenceLevel
    };
    let mut out = SeedSequence::new(messages, SeedOrigin::Mutated, granularity);
    out.parent_id = Some(seed.id.clone());
    Ok(out)
}

/// Byte spans of the opcode field(s) of a decodable message; undecodable
/// messages protect nothing.
fn opcode_span(schema: &ProtocolSchema, message: &[u8]) -> Vec<(usize, usize)> {
    let Ok(decoded) = codec::decode(message, schema, Direction::ClientToServer) else {
        return Vec::new();
    };
    let Some(msg) = schema.message(&decoded.type_name) else {
        return Vec::new();
    };
    let mut spans = Vec::new();
    let mut fields = vec![msg.opcode_field.clone()];
    if let Some(aux) = &msg.opcode_aux_field {
        fields.push(aux.clone());
    }
    for name in fields {
        if let Some((off, width, _)) = codec::static_field_span(msg, &name) {
            spans.push((off, width));
        }
    }
    spans
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::load_builtin_schema;

    /// A scripted target: the signature is the list of message lengths that
    /// are at least 4 bytes, so shorter tails and later messages are noise.
    fn scripted_runner(messages: &[Vec<u8>]) -> Result<ResponseSignature, String> {
        let path: Vec<u32> = messages
            .iter()
            .filter(|m| m.len() >= 4)
            .map(|m| m[0] as u32)
            .collect();
        Ok(ResponseSignature {
            response_prefix_hashes: path.iter().map(|s| *s as u64).collect(),
            state_path: path,
        })
    }

    #[test]
    fn drops_noise_messages_and_trims() {
        let schema = load_builtin_schema("modbus-tcp").unwrap().unwrap();
        let seed = SeedSequence::new(
            vec![vec![7, 0, 0, 0, 9, 9, 9], vec![1, 2], vec![3]],
            SeedOrigin::Imported,
            Granularity::SequenceLevel,
        );
        let mut run = scripted_runner;
        let out = minimize(&seed, &schema, &mut run).unwrap();
        assert_eq!(out.messages.len(), 1);
        assert_eq!(out.messages[0].len(), 4);
        assert!(out.total_bytes() <= seed.total_bytes());
        assert_eq!(out.parent_id.as_deref(), Some(seed.id.as_str()));
    }

    #[test]
    fn already_minimal_seed_is_fixed_point() {
        let schema = load_builtin_schema("modbus-tcp").unwrap().unwrap();
        let seed = SeedSequence::new(
            vec![vec![7, 0, 0, 0]],
            SeedOrigin::Imported,
            Granularity::MessageLevel,
        );
        let mut run = scripted_runner;
        let once = minimize(&seed, &schema, &mut run).unwrap();
        let mut run2 = scripted_runner;
        let twice = minimize(&once, &schema, &mut run2).unwrap();
        assert_eq!(once.messages, seed.messages);
        assert_eq!(twice.messages, once.messages);
    }

    #[test]
    fn nondeterministic_target_is_refused() {
        let schema = load_builtin_schema("modbus-tcp").unwrap().unwrap();
        let seed = SeedSequence::new(
            vec![vec![1, 2, 3, 4]],
            SeedOrigin::Imported,
            Granularity::MessageLevel,
        );
        let mut flip = 0u32;
        let mut run = move |_m: &[Vec<u8>]| {
            flip += 1;
            Ok(ResponseSignature {
                state_path: vec![flip],
                response_prefix_hashes: vec![],
            })
        };
        assert!(matches!(
            minimize(&seed, &schema, &mut run),
            Err(MinimizeError::NonDeterministic)
        ));
    }
}
