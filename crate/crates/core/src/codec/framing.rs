//! Frame-extent scanning: decides where a message ends in a byte stream
//! using only fixed-width prefixes and explicit length fields.

use crate::schema::{
    Direction, FieldKind, MessageSchema, ProtocolSchema, REST_REGION,
};

use super::read_int;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum FrameScan {
    /// A full frame of this many bytes is available.
    Complete(usize),
    /// Some candidate is consistent so far but needs more bytes.
    Incomplete,
    /// Every candidate's framing definitively mismatches.
    NoFraming,
}

#[derive(Debug, Clone, Copy)]
enum CandidateScan {
    Complete(usize),
    Incomplete,
    Mismatch,
}

/// Scans for the next frame boundary. Candidates are tried in declaration
/// order; the first complete frame wins.
pub(crate) fn scan_frame(schema: &ProtocolSchema, direction: Direction, buf: &[u8]) -> FrameScan {
    let mut any_incomplete = false;
    for msg in schema.messages_in(direction) {
        match scan_candidate(msg, buf) {
            CandidateScan::Complete(n) => return FrameScan::Complete(n),
            CandidateScan::Incomplete => any_incomplete = true,
            CandidateScan::Mismatch => {}
        }
    }
    if any_incomplete {
        FrameScan::Incomplete
    } else {
        FrameScan::NoFraming
    }
}

/// Walks the candidate's fixed-width prefix. Const fields up to and
/// including the explicit length field act as framing discriminators;
/// anything after the length field (opcodes, payloads) does not influence
/// the frame boundary.
fn scan_candidate(msg: &MessageSchema, buf: &[u8]) -> CandidateScan {
    let flat = msg.flat_fields();
    let mut offset_bits = 0usize;
    let mut i = 0;
    let mut length_field: Option<(usize, &crate::schema::FieldSpec)> = None; // (bit offset, field)

    while i < flat.len() {
        let f = flat[i];
        if f.presence.is_some() || f.kind == FieldKind::RawBytes {
            // Dynamic layout before the length field: cannot stream-delimit.
            if length_field.is_none() {
                return CandidateScan::Mismatch;
            }
            break;
        }
        if let Some(group) = f.bit_group.as_deref() {
            let group_start = offset_bits;
            let mut j = i;
            let mut bits = 0usize;
            while j < flat.len() && flat[j].bit_group.as_deref() == Some(group) {
                bits += flat[j].width as usize;
                j += 1;
            }
            if length_field.is_none() {
                let byte_start = group_start / 8;
                let byte_end = (group_start + bits) / 8;
                if byte_end <= buf.len() {
                    let mut acc: u64 = 0;
                    for b in &buf[byte_start..byte_end] {
                        acc = (acc << 8) | *b as u64;
                    }
                    let mut shift = bits;
                    for g in &flat[i..j] {
                        shift -= g.width as usize;
                        if g.kind == FieldKind::Const {
                            let v = (acc >> shift) & super::width_mask(g.width);
                            if v != g.value.unwrap_or(0) {
                                return CandidateScan::Mismatch;
                            }
                        }
                    }
                }
            }
            offset_bits = group_start + bits;
            i = j;
            continue;
        }

        let nbytes = (f.width / 8) as usize;
        let byte_off = offset_bits / 8;
        if length_field.is_none() {
            if f.kind == FieldKind::Const && byte_off + nbytes <= buf.len() {
                let v = read_int(&buf[byte_off..byte_off + nbytes], f.endian);
                if v != f.value.unwrap_or(0) {
                    return CandidateScan::Mismatch;
                }
            }
            if f.length_of.as_ref().map(|l| l.target == REST_REGION).unwrap_or(false) {
                length_field = Some((offset_bits, f));
            }
        }
        offset_bits += f.width as usize;
        i += 1;
    }

    match length_field {
        Some((bit_off, f)) => {
            let byte_off = bit_off / 8;
            let nbytes = (f.width / 8) as usize;
            if byte_off + nbytes > buf.len() {
                return CandidateScan::Incomplete;
            }
            let value = read_int(&buf[byte_off..byte_off + nbytes], f.endian) as i64;
            let lref = f.length_of.as_ref().expect("length field");
            let rest = value - lref.offset as i64;
            if rest < 0 {
                return CandidateScan::Mismatch;
            }
            let extent = byte_off + nbytes + rest as usize;
            if buf.len() >= extent {
                CandidateScan::Complete(extent)
            } else {
                CandidateScan::Incomplete
            }
        }
        None => {
            // Fully static message: the extent is its fixed size and every
            // visible const participates in framing.
            let total = offset_bits / 8;
            if buf.len() >= total {
                CandidateScan::Complete(total)
            } else {
                CandidateScan::Incomplete
            }
        }
    }
}

/// Static (byte offset, byte width, endianness) of a field, valid when every
/// preceding field has a fixed width and no presence predicate. Used by
/// oracle rules that must read fields of frames that do not fully decode.
pub(crate) fn static_field_span(
    msg: &MessageSchema,
    field: &str,
) -> Option<(usize, usize, crate::schema::Endianness)> {
    let mut offset_bits = 0usize;
    for f in msg.flat_fields() {
        if f.presence.is_some() {
            return None;
        }
        if f.name == field {
            if offset_bits % 8 != 0 || f.width % 8 != 0 {
                return None;
            }
            return Some((offset_bits / 8, (f.width / 8) as usize, f.endian));
        }
        if f.kind == FieldKind::RawBytes {
            return None;
        }
        offset_bits += f.width as usize;
    }
    None
}
