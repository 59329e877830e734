//! Stacked mutation operators over seed sequences: byte-level havoc,
//! field-aware mutations driven by the schema (opcode substitution, length
//! corruption through encode overrides), and message-level structure
//! operators including coalescing adjacent messages into one send buffer to
//! exercise stream-boundary handling.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::codec;
use crate::corpus::{SeedOrigin, SeedSequence};
use crate::schema::{Direction, FieldKind, ProtocolSchema};
use crate::value::FieldValue;

const MAX_STACK: usize = 4;
const MAX_MESSAGES: usize = 16;
const MAX_MESSAGE_BYTES: usize = 4096;

const INTERESTING_U8: [u64; 5] = [0, 1, 0x7f, 0x80, 0xff];
const INTERESTING_U16: [u64; 6] = [0, 1, 0x7fff, 0x8000, 0xfffe, 0xffff];
const INTERESTING_U32: [u64; 5] = [0, 1, 0x7fff_ffff, 0x8000_0000, 0xffff_ffff];

/// Applies 1..=4 stacked operators. The output differs from the input unless
/// the operator space is genuinely exhausted for a degenerate seed.
pub fn mutate<R: Rng>(
    seed: &SeedSequence,
    schema: &ProtocolSchema,
    rng: &mut R,
    queue_pool: &[&SeedSequence],
) -> SeedSequence {
    for _ in 0..16 {
        let mut messages = seed.messages.clone();
        let stack = rng.gen_range(1..=MAX_STACK);
        for _ in 0..stack {
            apply_one(&mut messages, schema, rng, queue_pool);
        }
        if messages != seed.messages && !messages.is_empty() {
            let granularity = if messages.len() == 1 {
                crate::corpus::Granularity::MessageLevel
            } else {
                crate::corpus::Granularity::SequenceLevel
            };
            let mut out = SeedSequence::new(messages, SeedOrigin::Mutated, granularity);
            out.parent_id = Some(seed.id.clone());
            return out;
        }
    }
    let mut out = seed.clone();
    out.origin = SeedOrigin::Mutated;
    out.parent_id = Some(seed.id.clone());
    out
}

fn apply_one<R: Rng>(
    messages: &mut Vec<Vec<u8>>,
    schema: &ProtocolSchema,
    rng: &mut R,
    queue_pool: &[&SeedSequence],
) {
    if messages.is_empty() {
        return;
    }
    let op = rng.gen_range(0..14u32);
    let idx = rng.gen_range(0..messages.len());
    match op {
        0 => bit_flip(&mut messages[idx], rng),
        1 => byte_set(&mut messages[idx], rng),
        2 => interesting(&mut messages[idx], rng),
        3 => arith(&mut messages[idx], rng),
        4 => field_random(&mut messages[idx], schema, rng),
        5 => field_bounds(&mut messages[idx], schema, rng),
        6 => opcode_substitution(&mut messages[idx], schema, rng),
        7 => length_corruption(&mut messages[idx], schema, rng),
        8 => truncate(&mut messages[idx], rng),
        9 => extend(&mut messages[idx], rng),
        10 => {
            // duplicate
            if messages.len() < MAX_MESSAGES {
                let m = messages[idx].clone();
                messages.insert(idx, m);
            }
        }
        11 => {
            // drop, skipped when it would empty the sequence
            if messages.len() > 1 {
                messages.remove(idx);
            } else {
                bit_flip(&mut messages[idx], rng);
            }
        }
        12 => {
            // reorder
            if messages.len() > 1 {
                let j = rng.gen_range(0..messages.len());
                messages.swap(idx, j);
            }
        }
        13 => {
            // splice with another queue seed, or coalesce two adjacent
            // messages into one send buffer
            if rng.gen_bool(0.5) {
                splice(messages, rng, queue_pool);
            } else {
                coalesce(messages, rng);
            }
        }
        _ => unreachable!(),
    }
}

fn bit_flip<R: Rng>(m: &mut [u8], rng: &mut R) {
    if m.is_empty() {
        return;
    }
    let bit = rng.gen_range(0..m.len() * 8);
    m[bit / 8] ^= 1 << (bit % 8);
}

fn byte_set<R: Rng>(m: &mut [u8], rng: &mut R) {
    if m.is_empty() {
        return;
    }
    let i = rng.gen_range(0..m.len());
    m[i] = rng.gen();
}

fn interesting<R: Rng>(m: &mut [u8], rng: &mut R) {
    if m.is_empty() {
        return;
    }
    let width = *[1usize, 2, 4].choose(rng).unwrap();
    if m.len() < width {
        return byte_set(m, rng);
    }
    let off = rng.gen_range(0..=m.len() - width);
    let v = match width {
        1 => *INTERESTING_U8.choose(rng).unwrap(),
        2 => *INTERESTING_U16.choose(rng).unwrap(),
        _ => *INTERESTING_U32.choose(rng).unwrap(),
    };
    let be = rng.gen_bool(0.5);
    for k in 0..width {
        let shift = if be { (width - 1 - k) * 8 } else { k * 8 };
        m[off + k] = ((v >> shift) & 0xff) as u8;
    }
}

fn arith<R: Rng>(m: &mut [u8], rng: &mut R) {
    if m.is_empty() {
        return;
    }
    let i = rng.gen_range(0..m.len());
    let delta = rng.gen_range(1..=35u8);
    if rng.gen_bool(0.5) {
        m[i] = m[i].wrapping_add(delta);
    } else {
        m[i] = m[i].wrapping_sub(delta);
    }
}

fn truncate<R: Rng>(m: &mut Vec<u8>, rng: &mut R) {
    if m.len() > 1 {
        let keep = rng.gen_range(1..m.len());
        m.truncate(keep);
    }
}

fn extend<R: Rng>(m: &mut Vec<u8>, rng: &mut R) {
    if m.len() >= MAX_MESSAGE_BYTES {
        return;
    }
    let n = rng.gen_range(1..=8);
    for _ in 0..n {
        m.push(rng.gen());
    }
}

/// Replaces a random non-const field value, re-encoding so length fields
/// stay consistent.
fn field_random<R: Rng>(m: &mut Vec<u8>, schema: &ProtocolSchema, rng: &mut R) {
    let Ok(decoded) = codec::decode(m, schema, Direction::ClientToServer) else {
        return bit_flip(m, rng);
    };
    let msg = schema.message(&decoded.type_name).expect("decoded type");
    let candidates: Vec<_> = msg
        .flat_fields()
        .into_iter()
        .filter(|f| f.kind != FieldKind::Const && f.kind != FieldKind::RawBytes)
        .collect();
    let Some(field) = candidates.choose(rng) else {
        return bit_flip(m, rng);
    };
    let mut fields = decoded.fields.clone();
    let max = if field.width >= 64 { u64::MAX } else { (1u64 << field.width) - 1 };
    fields.insert(field.name.clone(), FieldValue::Uint(rng.gen_range(0..=max)));
    if let Ok(bytes) = codec::encode(&decoded.type_name, &fields, schema) {
        *m = bytes;
    }
}

/// Drives a constrained field to its declared bounds or one step past them.
fn field_bounds<R: Rng>(m: &mut Vec<u8>, schema: &ProtocolSchema, rng: &mut R) {
    let Ok(decoded) = codec::decode(m, schema, Direction::ClientToServer) else {
        return bit_flip(m, rng);
    };
    let msg = schema.message(&decoded.type_name).expect("decoded type");
    let candidates: Vec<_> = msg
        .flat_fields()
        .into_iter()
        .filter(|f| f.constraint.is_some() && f.kind != FieldKind::Const)
        .collect();
    let Some(field) = candidates.choose(rng) else {
        return bit_flip(m, rng);
    };
    let c = field.constraint.as_ref().unwrap();
    let width_max = if field.width >= 64 { u64::MAX } else { (1u64 << field.width) - 1 };
    let choices = [
        c.min(),
        c.max(),
        c.min().wrapping_sub(1) & width_max,
        c.max().saturating_add(1).min(width_max),
    ];
    let mut fields = decoded.fields.clone();
    fields.insert(field.name.clone(), FieldValue::Uint(*choices.choose(rng).unwrap()));
    if let Ok(bytes) = codec::encode(&decoded.type_name, &fields, schema) {
        *m = bytes;
    }
}

/// Substitutes the opcode with another value from the declared opcode domain
/// of the same direction; length fields are recomputed by the encoder.
fn opcode_substitution<R: Rng>(m: &mut Vec<u8>, schema: &ProtocolSchema, rng: &mut R) {
    let Ok(decoded) = codec::decode(m, schema, Direction::ClientToServer) else {
        return byte_set(m, rng);
    };
    let msg = schema.message(&decoded.type_name).expect("decoded type");
    let field_name = msg.opcode_field.clone();
    let mut domain: Vec<u64> = Vec::new();
    for other in schema.messages_in(Direction::ClientToServer) {
        if other.opcode_field == field_name {
            if let Some(f) = other.field(&field_name) {
                if let Some(v) = f.value {
                    domain.push(v);
                }
                if let Some(crate::schema::Constraint::Values { values }) = &f.constraint {
                    domain.extend(values);
                }
            }
        }
    }
    domain.sort_unstable();
    domain.dedup();
    let Some(new_op) = domain.choose(rng) else {
        return byte_set(m, rng);
    };
    let mut fields = decoded.fields.clone();
    fields.insert(field_name, FieldValue::Uint(*new_op));
    if let Ok(bytes) = codec::encode(&decoded.type_name, &fields, schema) {
        *m = bytes;
    }
}

/// Corrupts a length or count field through the encoder's override path,
/// leaving the payload untouched.
fn length_corruption<R: Rng>(m: &mut Vec<u8>, schema: &ProtocolSchema, rng: &mut R) {
    let Ok(decoded) = codec::decode(m, schema, Direction::ClientToServer) else {
        return arith(m, rng);
    };
    let msg = schema.message(&decoded.type_name).expect("decoded type");
    let candidates: Vec<_> = msg
        .flat_fields()
        .into_iter()
        .filter(|f| f.length_of.is_some() || f.count_of.is_some())
        .collect();
    let Some(field) = candidates.choose(rng) else {
        return arith(m, rng);
    };
    let current = decoded.uint(&field.name).unwrap_or(0);
    let width_max = if field.width >= 64 { u64::MAX } else { (1u64 << field.width) - 1 };
    let choices = [
        0,
        1,
        width_max,
        current.wrapping_add(1) & width_max,
        current.wrapping_sub(1) & width_max,
        rng.gen_range(0..=width_max),
    ];
    let mut fields = decoded.fields.clone();
    fields.insert(field.name.clone(), FieldValue::Uint(*choices.choose(rng).unwrap()));
    if let Ok(bytes) = codec::encode(&decoded.type_name, &fields, schema) {
        *m = bytes;
    }
}

/// Prefix of this sequence spliced with the suffix of another queue seed.
fn splice<R: Rng>(messages: &mut Vec<Vec<u8>>, rng: &mut R, queue_pool: &[&SeedSequence]) {
    let Some(other) = queue_pool.choose(rng) else {
        return;
    };
    if other.messages.is_empty() {
        return;
    }
    let keep = rng.gen_range(1..=messages.len());
    let from = rng.gen_range(0..other.messages.len());
    messages.truncate(keep);
    for m in &other.messages[from..] {
        if messages.len() >= MAX_MESSAGES {
            break;
        }
        messages.push(m.clone());
    }
}

/// Joins two adjacent messages into one send buffer, exercising the
/// target's handling of several frames per TCP segment.
fn coalesce<R: Rng>(messages: &mut Vec<Vec<u8>>, rng: &mut R) {
    if messages.len() < 2 {
        return;
    }
    let i = rng.gen_range(0..messages.len() - 1);
    let tail = messages.remove(i + 1);
    messages[i].extend_from_slice(&tail);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Granularity;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn modbus() -> ProtocolSchema {
        crate::schema::load_builtin_schema("modbus-tcp").unwrap().unwrap()
    }

    fn read_req() -> Vec<u8> {
        vec![0, 1, 0, 0, 0, 6, 1, 3, 0, 0, 0, 1]
    }

    #[test]
    fn mutants_differ_from_parent() {
        let schema = modbus();
        let seed = SeedSequence::new(vec![read_req()], SeedOrigin::Generated, Granularity::MessageLevel);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let child = mutate(&seed, &schema, &mut rng, &[]);
            assert!(!child.messages.is_empty());
            assert_ne!(child.messages, seed.messages);
            assert_eq!(child.parent_id.as_deref(), Some(seed.id.as_str()));
        }
    }

    #[test]
    fn drop_on_single_message_seed_is_skipped() {
        let schema = modbus();
        let seed = SeedSequence::new(vec![read_req()], SeedOrigin::Generated, Granularity::MessageLevel);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let child = mutate(&seed, &schema, &mut rng, &[]);
            assert!(!child.messages.is_empty(), "drop emptied a 1-message seed");
        }
    }

    #[test]
    fn opcode_substitution_keeps_length_consistent() {
        let schema = modbus();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = read_req();
        opcode_substitution(&mut m, &schema, &mut rng);
        // Whatever opcode was chosen, the MBAP length must still cover the
        // remainder exactly, which full decode verifies.
        let decoded = codec::decode(&m, &schema, Direction::ClientToServer).unwrap();
        assert!(decoded.violations.is_empty());
        let domain = [3u64, 6, 16];
        assert!(domain.contains(&decoded.uint("function").unwrap()));
    }

    #[test]
    fn splice_mixes_two_sequences() {
        let schema = modbus();
        let a = SeedSequence::new(
            vec![read_req(), read_req()],
            SeedOrigin::Generated,
            Granularity::SequenceLevel,
        );
        let mut other = read_req();
        other[1] = 9;
        let b = SeedSequence::new(
            vec![other.clone(), other.clone()],
            SeedOrigin::Generated,
            Granularity::SequenceLevel,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut messages = a.messages.clone();
        splice(&mut messages, &mut rng, &[&b]);
        assert!(!messages.is_empty());
        assert!(messages.len() <= MAX_MESSAGES);
        let _ = schema;
    }

    #[test]
    fn coalesce_merges_adjacent_messages() {
        let mut messages = vec![vec![1, 2], vec![3, 4], vec![5]];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        coalesce(&mut messages, &mut rng);
        assert_eq!(messages.len(), 2);
        let total: usize = messages.iter().map(|m| m.len()).sum();
        assert_eq!(total, 5);
    }
}
