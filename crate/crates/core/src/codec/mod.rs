//! Schema-driven bit-exact encoder/decoder and stream delimiter.
//!
//! Encoding auto-derives length, count and const fields unless an explicit
//! override is supplied (overrides are first-class: mutation needs to craft
//! invalid lengths). Decoding identifies the message type by const-field and
//! opcode discrimination in declaration order and is total over arbitrary
//! bytes: it returns a value or a structured failure, never aborts.
//!
//! Delimitation splits a TCP byte stream using the explicit length fields the
//! schema declares, never implicit per-opcode lengths. Undecodable prefixes
//! are resynchronized byte by byte and accounted as garbage runs so that
//! segment bytes plus residual always equal the input.

mod framing;

pub(crate) use framing::{scan_frame, static_field_span, FrameScan};

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

use crate::schema::{
    Direction, Endianness, FieldKind, FieldSpec, MessageSchema, ProtocolSchema, REST_REGION,
};
use crate::value::{FieldMap, FieldValue};

/// A losslessly decoded message: re-encoding `fields` under the schema
/// reproduces `raw` exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedMessage {
    pub type_name: String,
    pub fields: FieldMap,
    pub raw: Vec<u8>,
    /// (offset, length) within the source stream.
    pub span: (usize, usize),
    /// Non-fatal constraint violations observed while decoding; the oracle
    /// consumes these.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<ConstraintViolation>,
}

impl DecodedMessage {
    pub fn uint(&self, field: &str) -> Option<u64> {
        self.fields.get(field).and_then(|v| v.as_uint())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Range,
    LengthMismatch,
    CountMismatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintViolation {
    pub field: String,
    pub kind: ViolationKind,
    pub detail: String,
}

#[derive(Debug, Error, PartialEq)]
pub enum EncodeError {
    #[error("unknown message type {0:?}")]
    UnknownType(String),
    #[error("missing required field {field:?} of {type_name:?}")]
    MissingField { type_name: String, field: String },
    #[error("value {value:#x} does not fit the {width}-bit width of field {field:?}")]
    ValueTooWide { field: String, width: u32, value: u64 },
    #[error("field {field:?} expects {expected} value")]
    WrongValueType { field: String, expected: &'static str },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeFailure {
    #[error("empty buffer")]
    EmptyBuffer,
    #[error("{type_name}: truncated at field {field:?}")]
    Truncated { type_name: String, field: String },
    #[error("{type_name}: const field {field:?} expects {expected:#x}, found {actual:#x}")]
    ConstMismatch {
        type_name: String,
        field: String,
        expected: u64,
        actual: u64,
    },
    #[error("{type_name}: opcode field {field:?} value {actual:#x} is outside the declared set")]
    OpcodeMismatch {
        type_name: String,
        field: String,
        actual: u64,
    },
    #[error("{type_name}: {extra} trailing bytes after the last field")]
    TrailingBytes { type_name: String, extra: usize },
    #[error("no message schema matches{}", best.as_ref().map(|b| format!(" (closest: {b})")).unwrap_or_default())]
    NoMatch { best: Option<Box<DecodeFailure>> },
}

impl DecodeFailure {
    /// Field name of the first violated field, following the closest
    /// candidate for `NoMatch`.
    pub fn field(&self) -> Option<&str> {
        match self {
            DecodeFailure::Truncated { field, .. }
            | DecodeFailure::ConstMismatch { field, .. }
            | DecodeFailure::OpcodeMismatch { field, .. } => Some(field),
            DecodeFailure::NoMatch { best: Some(b) } => b.field(),
            _ => None,
        }
    }

    pub fn is_truncated(&self) -> bool {
        match self {
            DecodeFailure::Truncated { .. } => true,
            DecodeFailure::NoMatch { best: Some(b) } => b.is_truncated(),
            _ => false,
        }
    }
}

/// Encodes `values` as message `type_name`. Length, count and const fields
/// are filled automatically unless explicitly overridden; every other field
/// must be supplied or carry a schema default.
pub fn encode(
    type_name: &str,
    values: &FieldMap,
    schema: &ProtocolSchema,
) -> Result<Vec<u8>, EncodeError> {
    let msg = schema
        .message(type_name)
        .ok_or_else(|| EncodeError::UnknownType(type_name.to_string()))?;
    encode_message(msg, values)
}

pub(crate) fn encode_message(msg: &MessageSchema, values: &FieldMap) -> Result<Vec<u8>, EncodeError> {
    let flat = msg.flat_fields();

    // Presence-filtered layout. Predicates see supplied/const/default values
    // of earlier fields.
    let mut layout: Vec<&FieldSpec> = Vec::new();
    let mut immediate: HashMap<&str, u64> = HashMap::new();
    for f in &flat {
        if let Some(p) = &f.presence {
            if immediate.get(p.field.as_str()).copied() != Some(p.equals) {
                continue;
            }
        }
        layout.push(f);
        let iv = values
            .get(&f.name)
            .and_then(|v| v.as_uint())
            .or(if f.kind == FieldKind::Const { f.value } else { None })
            .or(f.default);
        if let Some(iv) = iv {
            immediate.insert(f.name.as_str(), iv);
        }
    }

    // Byte contents of every bytes field, then per-field encoded sizes.
    let mut byte_contents: HashMap<&str, &[u8]> = HashMap::new();
    for f in &layout {
        if f.kind == FieldKind::RawBytes {
            match values.get(&f.name) {
                Some(FieldValue::Bytes(b)) => {
                    byte_contents.insert(f.name.as_str(), b.as_slice());
                }
                Some(_) => {
                    return Err(EncodeError::WrongValueType {
                        field: f.name.clone(),
                        expected: "bytes",
                    })
                }
                None => {
                    return Err(EncodeError::MissingField {
                        type_name: msg.name.clone(),
                        field: f.name.clone(),
                    })
                }
            }
        }
    }
    let size_of = |f: &FieldSpec| -> usize {
        if f.kind == FieldKind::RawBytes {
            byte_contents.get(f.name.as_str()).map(|b| b.len()).unwrap_or(0)
        } else {
            // Bit-group members contribute their exact bit share; group sums
            // are byte multiples by schema invariant.
            (f.width as usize + 7) / 8
        }
    };
    let bits_after = |idx: usize| -> usize {
        layout[idx + 1..]
            .iter()
            .map(|f| {
                if f.kind == FieldKind::RawBytes {
                    byte_contents.get(f.name.as_str()).map(|b| b.len() * 8).unwrap_or(0)
                } else {
                    f.width as usize
                }
            })
            .sum()
    };

    // Resolve final integer values: explicit override > const > derived > default.
    let mut resolved: Vec<(usize, u64)> = Vec::new(); // (layout idx, value) for int-ish fields
    for (idx, f) in layout.iter().enumerate() {
        if f.kind == FieldKind::RawBytes {
            continue;
        }
        let supplied = match values.get(&f.name) {
            Some(v) => Some(v.as_uint().ok_or(EncodeError::WrongValueType {
                field: f.name.clone(),
                expected: "integer",
            })?),
            None => None,
        };
        let value = if let Some(v) = supplied {
            v
        } else if f.kind == FieldKind::Const {
            f.value.ok_or_else(|| EncodeError::MissingField {
                type_name: msg.name.clone(),
                field: f.name.clone(),
            })?
        } else if let Some(lref) = &f.length_of {
            let region_bytes = if lref.target == REST_REGION {
                bits_after(idx) / 8
            } else {
                layout
                    .iter()
                    .find(|g| g.name == lref.target)
                    .map(|g| size_of(g))
                    .unwrap_or(0)
            };
            (region_bytes as i64 + lref.offset as i64).max(0) as u64
        } else if let Some(cref) = &f.count_of {
            let region_bytes = layout
                .iter()
                .find(|g| g.name == cref.target)
                .map(|g| size_of(g))
                .unwrap_or(0);
            (region_bytes / cref.item_bytes.max(1) as usize) as u64
        } else if let Some(d) = f.default {
            d
        } else {
            return Err(EncodeError::MissingField {
                type_name: msg.name.clone(),
                field: f.name.clone(),
            });
        };
        if f.width < 64 && value >= (1u64 << f.width) {
            return Err(EncodeError::ValueTooWide {
                field: f.name.clone(),
                width: f.width,
                value,
            });
        }
        resolved.push((idx, value));
    }
    let value_at = |idx: usize| -> u64 {
        resolved
            .iter()
            .find(|(i, _)| *i == idx)
            .map(|(_, v)| *v)
            .unwrap_or(0)
    };

    // Serialize, packing bit groups MSB-first.
    let mut out = Vec::new();
    let mut i = 0;
    while i < layout.len() {
        let f = layout[i];
        if let Some(group) = f.bit_group.as_deref() {
            let mut j = i;
            let mut bits = 0u32;
            let mut acc: u64 = 0;
            while j < layout.len() && layout[j].bit_group.as_deref() == Some(group) {
                let g = layout[j];
                let v = value_at(j);
                acc = (acc << g.width) | (v & width_mask(g.width));
                bits += g.width;
                j += 1;
            }
            let nbytes = (bits / 8) as usize;
            for k in (0..nbytes).rev() {
                out.push(((acc >> (k * 8)) & 0xff) as u8);
            }
            i = j;
            continue;
        }
        if f.kind == FieldKind::RawBytes {
            out.extend_from_slice(byte_contents[f.name.as_str()]);
        } else {
            let v = value_at(i);
            write_int(&mut out, v, f.width, f.endian);
        }
        i += 1;
    }
    Ok(out)
}

/// Decodes `buffer` as exactly one message of the given direction,
/// identifying the type by const-field and opcode discrimination with
/// declaration order as the tie-break.
pub fn decode(
    buffer: &[u8],
    schema: &ProtocolSchema,
    direction: Direction,
) -> Result<DecodedMessage, DecodeFailure> {
    decode_at(buffer, 0, schema, direction)
}

pub(crate) fn decode_at(
    buffer: &[u8],
    base_offset: usize,
    schema: &ProtocolSchema,
    direction: Direction,
) -> Result<DecodedMessage, DecodeFailure> {
    if buffer.is_empty() {
        return Err(DecodeFailure::EmptyBuffer);
    }
    let mut best: Option<(usize, DecodeFailure)> = None;
    for msg in schema.messages_in(direction) {
        match decode_as(msg, buffer, base_offset) {
            Ok(m) => return Ok(m),
            Err((failure, progress)) => {
                if best.as_ref().map(|(p, _)| progress > *p).unwrap_or(true) {
                    best = Some((progress, failure));
                }
            }
        }
    }
    Err(DecodeFailure::NoMatch {
        best: best.map(|(_, f)| Box::new(f)),
    })
}

/// Decodes `buffer` as one specific message type; the whole buffer must be
/// consumed. Returns the failure plus decode progress in bytes.
pub(crate) fn decode_as(
    msg: &MessageSchema,
    buffer: &[u8],
    base_offset: usize,
) -> Result<DecodedMessage, (DecodeFailure, usize)> {
    let flat = msg.flat_fields();
    let mut fields = FieldMap::new();
    let mut violations = Vec::new();
    let mut pending_len: HashMap<&str, usize> = HashMap::new();
    let mut pending_count: HashMap<&str, (u64, u32)> = HashMap::new();
    let mut pos = 0usize;

    let truncated = |field: &FieldSpec, pos: usize| {
        (
            DecodeFailure::Truncated {
                type_name: msg.name.clone(),
                field: field.name.clone(),
            },
            pos,
        )
    };

    let mut i = 0;
    while i < flat.len() {
        let f = flat[i];
        if let Some(p) = &f.presence {
            if fields.get(&p.field).and_then(|v| v.as_uint()) != Some(p.equals) {
                i += 1;
                continue;
            }
        }

        if let Some(group) = f.bit_group.as_deref() {
            let mut j = i;
            let mut bits = 0u32;
            while j < flat.len() && flat[j].bit_group.as_deref() == Some(group) {
                bits += flat[j].width;
                j += 1;
            }
            let nbytes = (bits / 8) as usize;
            if pos + nbytes > buffer.len() {
                return Err(truncated(f, pos));
            }
            let mut acc: u64 = 0;
            for b in &buffer[pos..pos + nbytes] {
                acc = (acc << 8) | *b as u64;
            }
            let mut shift = bits;
            for g in &flat[i..j] {
                shift -= g.width;
                let v = (acc >> shift) & width_mask(g.width);
                check_int_field(msg, g, v, &mut violations, &mut pending_len, &mut pending_count, pos + nbytes, buffer.len())
                    .map_err(|e| (e, pos))?;
                fields.insert(g.name.clone(), FieldValue::Uint(v));
            }
            pos += nbytes;
            i = j;
            continue;
        }

        match f.kind {
            FieldKind::RawBytes => {
                let size = if let Some(n) = pending_len.get(f.name.as_str()) {
                    *n
                } else if let Some((count, item)) = pending_count.get(f.name.as_str()) {
                    (*count as usize).saturating_mul((*item).max(1) as usize)
                } else {
                    buffer.len() - pos
                };
                if pos + size > buffer.len() {
                    return Err(truncated(f, pos));
                }
                let chunk = buffer[pos..pos + size].to_vec();
                if let Some((count, item)) = pending_count.get(f.name.as_str()) {
                    let implied = (*count as usize).saturating_mul((*item).max(1) as usize);
                    if implied != chunk.len() {
                        violations.push(ConstraintViolation {
                            field: f.name.clone(),
                            kind: ViolationKind::CountMismatch,
                            detail: format!(
                                "declared count {} x {} bytes != actual {} bytes",
                                count,
                                item,
                                chunk.len()
                            ),
                        });
                    }
                }
                fields.insert(f.name.clone(), FieldValue::Bytes(chunk));
                pos += size;
            }
            _ => {
                let nbytes = (f.width / 8) as usize;
                if pos + nbytes > buffer.len() {
                    return Err(truncated(f, pos));
                }
                let v = read_int(&buffer[pos..pos + nbytes], f.endian);
                pos += nbytes;
                check_int_field(msg, f, v, &mut violations, &mut pending_len, &mut pending_count, pos, buffer.len())
                    .map_err(|e| (e, pos))?;
                if f.kind == FieldKind::SignedInt {
                    fields.insert(f.name.clone(), FieldValue::Int(sign_extend(v, f.width)));
                } else {
                    fields.insert(f.name.clone(), FieldValue::Uint(v));
                }
            }
        }
        i += 1;
    }

    if pos != buffer.len() {
        return Err((
            DecodeFailure::TrailingBytes {
                type_name: msg.name.clone(),
                extra: buffer.len() - pos,
            },
            pos,
        ));
    }
    Ok(DecodedMessage {
        type_name: msg.name.clone(),
        fields,
        raw: buffer.to_vec(),
        span: (base_offset, buffer.len()),
        violations,
    })
}

/// Const/opcode checks are type discriminators (hard failures); other
/// constraint violations are recorded and tolerated.
#[allow(clippy::too_many_arguments)]
fn check_int_field<'a>(
    msg: &MessageSchema,
    f: &'a FieldSpec,
    v: u64,
    violations: &mut Vec<ConstraintViolation>,
    pending_len: &mut HashMap<&'a str, usize>,
    pending_count: &mut HashMap<&'a str, (u64, u32)>,
    pos_after: usize,
    total_len: usize,
) -> Result<(), DecodeFailure> {
    let is_opcode = msg.opcode_field == f.name
        || msg.opcode_aux_field.as_deref() == Some(f.name.as_str());
    if f.kind == FieldKind::Const {
        let expected = f.value.unwrap_or(0);
        if v != expected {
            return Err(DecodeFailure::ConstMismatch {
                type_name: msg.name.clone(),
                field: f.name.clone(),
                expected,
                actual: v,
            });
        }
    } else if let Some(c) = &f.constraint {
        if !c.permits(v) {
            if is_opcode {
                return Err(DecodeFailure::OpcodeMismatch {
                    type_name: msg.name.clone(),
                    field: f.name.clone(),
                    actual: v,
                });
            }
            violations.push(ConstraintViolation {
                field: f.name.clone(),
                kind: ViolationKind::Range,
                detail: format!("value {v:#x} violates the declared constraint"),
            });
        }
    }
    if let Some(lref) = &f.length_of {
        let implied = v as i64 - lref.offset as i64;
        if lref.target == REST_REGION {
            let actual_rest = (total_len - pos_after) as i64;
            if implied != actual_rest {
                violations.push(ConstraintViolation {
                    field: f.name.clone(),
                    kind: ViolationKind::LengthMismatch,
                    detail: format!("declares {implied} bytes after it, actual {actual_rest}"),
                });
            }
        } else {
            pending_len.insert(lref.target.as_str(), implied.max(0) as usize);
            if implied < 0 {
                violations.push(ConstraintViolation {
                    field: f.name.clone(),
                    kind: ViolationKind::LengthMismatch,
                    detail: format!("implies negative region length {implied}"),
                });
            }
        }
    }
    if let Some(cref) = &f.count_of {
        pending_count.insert(cref.target.as_str(), (v, cref.item_bytes));
    }
    Ok(())
}

/// A resynchronization run: bytes skipped one at a time because no message
/// framing matched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResyncRun {
    pub offset: usize,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StreamSegment {
    /// A boundary-complete frame that decoded as a known message type.
    Message(DecodedMessage),
    /// A boundary-complete frame (per the explicit length fields) that no
    /// message schema decodes.
    UndecodedFrame {
        offset: usize,
        bytes: Vec<u8>,
        reason: DecodeFailure,
    },
    /// Skipped bytes from byte-by-byte resynchronization.
    Garbage(ResyncRun),
}

impl StreamSegment {
    pub fn byte_len(&self) -> usize {
        match self {
            StreamSegment::Message(m) => m.raw.len(),
            StreamSegment::UndecodedFrame { bytes, .. } => bytes.len(),
            StreamSegment::Garbage(run) => run.bytes.len(),
        }
    }

    pub fn raw_bytes(&self) -> &[u8] {
        match self {
            StreamSegment::Message(m) => &m.raw,
            StreamSegment::UndecodedFrame { bytes, .. } => bytes,
            StreamSegment::Garbage(run) => &run.bytes,
        }
    }

    pub fn is_frame(&self) -> bool {
        matches!(self, StreamSegment::Message(_) | StreamSegment::UndecodedFrame { .. })
    }
}

/// Result of splitting a byte stream into messages. The concatenation of all
/// segment bytes plus the residual equals the input buffer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DelimitedStream {
    pub segments: Vec<StreamSegment>,
    /// Trailing bytes not yet forming a complete message.
    pub residual: Vec<u8>,
}

impl DelimitedStream {
    pub fn messages(&self) -> impl Iterator<Item = &DecodedMessage> {
        self.segments.iter().filter_map(|s| match s {
            StreamSegment::Message(m) => Some(m),
            _ => None,
        })
    }

    /// Boundary-complete frames, decoded or not.
    pub fn frame_count(&self) -> usize {
        self.segments.iter().filter(|s| s.is_frame()).count()
    }

    pub fn consumed_len(&self) -> usize {
        self.segments.iter().map(|s| s.byte_len()).sum()
    }
}

/// Splits `buffer` into complete messages using the schema's explicit length
/// fields, never implicit per-opcode byte counts.
pub fn delimit(buffer: &[u8], schema: &ProtocolSchema, direction: Direction) -> DelimitedStream {
    let mut out = DelimitedStream::default();
    let mut pos = 0usize;
    let mut garbage: Option<ResyncRun> = None;

    let flush_garbage = |out: &mut DelimitedStream, garbage: &mut Option<ResyncRun>| {
        if let Some(run) = garbage.take() {
            log::debug!(
                "delimiter resync: skipped {} bytes at offset {}",
                run.bytes.len(),
                run.offset
            );
            out.segments.push(StreamSegment::Garbage(run));
        }
    };

    while pos < buffer.len() {
        match scan_frame(schema, direction, &buffer[pos..]) {
            FrameScan::Complete(extent) => {
                flush_garbage(&mut out, &mut garbage);
                let frame = &buffer[pos..pos + extent];
                match decode_at(frame, pos, schema, direction) {
                    Ok(msg) => out.segments.push(StreamSegment::Message(msg)),
                    Err(reason) => out.segments.push(StreamSegment::UndecodedFrame {
                        offset: pos,
                        bytes: frame.to_vec(),
                        reason,
                    }),
                }
                pos += extent;
            }
            FrameScan::Incomplete => break,
            FrameScan::NoFraming => {
                garbage
                    .get_or_insert_with(|| ResyncRun {
                        offset: pos,
                        bytes: Vec::new(),
                    })
                    .bytes
                    .push(buffer[pos]);
                pos += 1;
            }
        }
    }
    flush_garbage(&mut out, &mut garbage);
    out.residual = buffer[pos..].to_vec();
    out
}

fn write_int(out: &mut Vec<u8>, v: u64, width: u32, endian: Endianness) {
    let n = (width / 8) as usize;
    match endian {
        Endianness::Big => out.extend_from_slice(&v.to_be_bytes()[8 - n..]),
        Endianness::Little => out.extend_from_slice(&v.to_le_bytes()[..n]),
    }
}

pub(crate) fn read_int(bytes: &[u8], endian: Endianness) -> u64 {
    let mut v: u64 = 0;
    match endian {
        Endianness::Big => {
            for b in bytes {
                v = (v << 8) | *b as u64;
            }
        }
        Endianness::Little => {
            for b in bytes.iter().rev() {
                v = (v << 8) | *b as u64;
            }
        }
    }
    v
}

fn sign_extend(v: u64, width: u32) -> i64 {
    if width >= 64 {
        return v as i64;
    }
    let shift = 64 - width;
    ((v << shift) as i64) >> shift
}

pub(crate) fn width_mask(width: u32) -> u64 {
    if width >= 64 {
        u64::MAX
    } else {
        (1u64 << width) - 1
    }
}
