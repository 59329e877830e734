//! The built-in conformance rules R1..R9. Each rule is parameterized by the
//! dependency note that binds it; every finding carries that note's clause.

use crate::codec::{read_int, static_field_span, StreamSegment, ViolationKind};
use crate::hexutil;
use crate::schema::{Direction, Endianness, ProtocolSchema};

use super::{Binding, Finding, FindingSource, RuleSet, TraceView};
use crate::engine::ConnectionResult;

pub(crate) fn run_rule(
    binding: &Binding<'_>,
    view: &TraceView<'_>,
    schema: &ProtocolSchema,
    rules: &RuleSet,
    out: &mut Vec<Finding>,
) {
    match binding.rule_id {
        "R1" => structural(binding, view, out),
        "R2" => reply_prohibition(binding, view, schema, out),
        "R3" => echo(binding, view, out),
        "R4" => state_legality(binding, view, schema, out),
        "R5" => length_consistency(binding, view, out),
        "R6" => residual_handling(binding, view, out),
        "R7" => error_signaling(binding, view, schema, out),
        "R8" => hang(binding, view, schema, rules, out),
        "R9" => accept_malformed(binding, view, schema, out),
        _ => {}
    }
}

fn emit(
    out: &mut Vec<Finding>,
    binding: &Binding<'_>,
    view: &TraceView<'_>,
    range: (usize, usize),
    evidence_key: String,
    evidence: String,
) {
    out.push(Finding {
        finding_id: String::new(),
        trace_id: view.record.trace_id.clone(),
        message_range: range,
        category: binding.category,
        rule_id: binding.rule_id.to_string(),
        clause_id: binding.clause_id.to_string(),
        evidence,
        evidence_key,
        source: FindingSource::Builtin,
    });
}

fn hex_prefix(bytes: &[u8]) -> String {
    let n = bytes.len().min(32);
    let mut s = hexutil::to_hex(&bytes[..n]);
    if bytes.len() > n {
        s.push_str("..");
    }
    s
}

/// R1: every response must decode as a declared server-to-client message.
fn structural(binding: &Binding<'_>, view: &TraceView<'_>, out: &mut Vec<Finding>) {
    for pair in &view.pairs {
        for seg in &pair.resp_stream.segments {
            match seg {
                StreamSegment::UndecodedFrame { bytes, reason, .. } => emit(
                    out,
                    binding,
                    view,
                    (pair.index, pair.index),
                    "undecodable_response".into(),
                    format!(
                        "expected a declared server-to-client message, observed frame {} ({reason})",
                        hex_prefix(bytes)
                    ),
                ),
                StreamSegment::Garbage(run) => emit(
                    out,
                    binding,
                    view,
                    (pair.index, pair.index),
                    "garbage_response".into(),
                    format!(
                        "expected message framing, observed unframed bytes {}",
                        hex_prefix(&run.bytes)
                    ),
                ),
                StreamSegment::Message(_) => {}
            }
        }
        if !pair.resp_stream.residual.is_empty() {
            emit(
                out,
                binding,
                view,
                (pair.index, pair.index),
                "truncated_response".into(),
                format!(
                    "expected complete frames, observed trailing partial frame {}",
                    hex_prefix(&pair.resp_stream.residual)
                ),
            );
        }
    }
}

/// Static span of one field, required to agree across every message of the
/// direction that declares it.
fn uniform_span(
    schema: &ProtocolSchema,
    direction: Direction,
    field: &str,
) -> Option<(usize, usize, Endianness)> {
    let mut found: Option<(usize, usize, Endianness)> = None;
    for msg in schema.messages_in(direction) {
        if msg.field(field).is_none() {
            continue;
        }
        let span = static_field_span(msg, field)?;
        match found {
            None => found = Some(span),
            Some(prev) if prev == span => {}
            Some(_) => return None,
        }
    }
    found
}

fn read_span(buf: &[u8], span: (usize, usize, Endianness)) -> Option<u64> {
    let (off, width, endian) = span;
    if buf.len() < off + width {
        return None;
    }
    Some(read_int(&buf[off..off + width], endian))
}

/// R2: where the note declares a must-discard condition, any reply to a
/// matching request is a violation.
fn reply_prohibition(
    binding: &Binding<'_>,
    view: &TraceView<'_>,
    schema: &ProtocolSchema,
    out: &mut Vec<Finding>,
) {
    let Some(field) = binding.rule.params.get("field") else {
        return;
    };
    let allowed = binding.rule.uint_param("allowed").unwrap_or(0);
    let Some(span) = uniform_span(schema, Direction::ClientToServer, field) else {
        return;
    };
    for pair in &view.pairs {
        let Some(value) = read_span(&pair.req, span) else {
            continue;
        };
        if value != allowed && !pair.resp.is_empty() {
            emit(
                out,
                binding,
                view,
                (pair.index, pair.index),
                format!("reply_after_invalid:{field}"),
                format!(
                    "request carried {field}={value:#x} (must be {allowed:#x} to be served), \
                     expected silent discard, observed reply {}",
                    hex_prefix(&pair.resp)
                ),
            );
        }
    }
}

/// R3: declared echo fields must match between the k-th typed request frame
/// and the k-th typed response frame.
fn echo(binding: &Binding<'_>, view: &TraceView<'_>, out: &mut Vec<Finding>) {
    let fields = binding.rule.list_param("fields");
    if fields.is_empty() {
        return;
    }
    for pair in &view.pairs {
        let reqs: Vec<_> = pair.req_stream.messages().collect();
        let resps: Vec<_> = pair.resp_stream.messages().collect();
        for (req, resp) in reqs.iter().zip(&resps) {
            for field in &fields {
                let (Some(sent), Some(got)) = (req.fields.get(field), resp.fields.get(field))
                else {
                    continue;
                };
                if sent != got {
                    emit(
                        out,
                        binding,
                        view,
                        (pair.index, pair.index),
                        format!("echo_mismatch:{field}"),
                        format!(
                            "correlation field {field} expected {sent:?} (from request), observed {got:?}"
                        ),
                    );
                }
            }
        }
    }
}

/// R4: data-class responses are only legal once the session has entered an
/// activation state; the session state is replayed from request triggers.
fn state_legality(
    binding: &Binding<'_>,
    view: &TraceView<'_>,
    schema: &ProtocolSchema,
    out: &mut Vec<Finding>,
) {
    let activation = binding.rule.list_param("activation");
    let data_responses = binding.rule.list_param("data_responses");
    let machine = &schema.state_machine;
    let mut current = machine.initial.clone();
    for pair in &view.pairs {
        for req in pair.req_stream.messages() {
            if let Some(t) = machine.transition_on(&current, &req.type_name) {
                current = t.to.clone();
            }
        }
        for resp in pair.resp_stream.messages() {
            if data_responses.iter().any(|d| d == &resp.type_name)
                && !activation.iter().any(|a| a == &current)
            {
                emit(
                    out,
                    binding,
                    view,
                    (pair.index, pair.index),
                    format!("unactivated_data:{}", resp.type_name),
                    format!(
                        "data-class response {} served while the session is in state {current:?}, \
                         which is outside the activation states {activation:?}",
                        resp.type_name
                    ),
                );
            }
        }
    }
}

/// R5: length fields are authoritative. (a) declared length/count fields in
/// responses must match actual extents; (b) a server must never answer more
/// frames than the explicit length fields delimit in the request (ghost
/// responses prove implicit-length parsing).
fn length_consistency(binding: &Binding<'_>, view: &TraceView<'_>, out: &mut Vec<Finding>) {
    for pair in &view.pairs {
        for resp in pair.resp_stream.messages() {
            for v in &resp.violations {
                if matches!(v.kind, ViolationKind::LengthMismatch | ViolationKind::CountMismatch) {
                    emit(
                        out,
                        binding,
                        view,
                        (pair.index, pair.index),
                        format!("response_length:{}:{}", resp.type_name, v.field),
                        format!("response {} field {}: {}", resp.type_name, v.field, v.detail),
                    );
                }
            }
        }
        let req_frames = pair.req_stream.frame_count();
        let resp_frames = pair.resp_stream.frame_count();
        if resp_frames > req_frames {
            emit(
                out,
                binding,
                view,
                (pair.index, pair.index),
                "ghost_responses".into(),
                format!(
                    "explicit length fields delimit {req_frames} complete request frame(s) in the \
                     buffer, observed {resp_frames} response frame(s); the surplus proves \
                     implicit-length parsing of residual data"
                ),
            );
        }
    }
}

/// R6: k expect-reply frames in one buffer are due k responses. Fires only
/// when the server answered some but not all while keeping the connection,
/// which separates dropped frames from legitimate rejection-by-close.
fn residual_handling(binding: &Binding<'_>, view: &TraceView<'_>, out: &mut Vec<Finding>) {
    let expect = binding.rule.list_param("expect_reply");
    if expect.is_empty() {
        return;
    }
    for pair in &view.pairs {
        let due = pair
            .req_stream
            .messages()
            .filter(|m| expect.iter().any(|e| e == &m.type_name))
            .count();
        let got = pair.resp_stream.frame_count();
        if got >= 1 && got < due && !pair.closed {
            emit(
                out,
                binding,
                view,
                (pair.index, pair.index),
                "dropped_frames".into(),
                format!(
                    "buffer carried {due} request frame(s) each due a reply, observed only {got} \
                     response frame(s) with the connection still serving"
                ),
            );
        }
    }
}

fn opcode_spans(
    schema: &ProtocolSchema,
) -> Option<((usize, usize, Endianness), Option<(usize, usize, Endianness)>)> {
    let mut names: Vec<(&str, Option<&str>)> = Vec::new();
    for msg in schema.messages_in(Direction::ClientToServer) {
        names.push((msg.opcode_field.as_str(), msg.opcode_aux_field.as_deref()));
    }
    let (first, first_aux) = *names.first()?;
    if !names.iter().all(|(n, a)| *n == first && *a == first_aux) {
        return None;
    }
    let op = uniform_span(schema, Direction::ClientToServer, first)?;
    let aux = match first_aux {
        Some(a) => Some(uniform_span(schema, Direction::ClientToServer, a)?),
        None => None,
    };
    Some((op, aux))
}

fn opcode_declared(schema: &ProtocolSchema, op: u64, aux: Option<u64>) -> bool {
    for msg in schema.messages_in(Direction::ClientToServer) {
        let Some(f) = msg.field(&msg.opcode_field) else {
            continue;
        };
        if !field_permits(f, op) {
            continue;
        }
        match (&msg.opcode_aux_field, aux) {
            (Some(aux_name), Some(aux_v)) => {
                if msg.field(aux_name).map(|f| field_permits(f, aux_v)).unwrap_or(false) {
                    return true;
                }
            }
            (None, _) => return true,
            (Some(_), None) => {}
        }
    }
    false
}

fn field_permits(f: &crate::schema::FieldSpec, v: u64) -> bool {
    if let Some(cv) = f.value {
        return cv == v;
    }
    if let Some(c) = &f.constraint {
        return c.permits(v);
    }
    true
}

/// R7: a complete frame carrying an undeclared opcode must elicit a declared
/// error/exception response; silence with the connection held open is a
/// violation.
fn error_signaling(
    binding: &Binding<'_>,
    view: &TraceView<'_>,
    schema: &ProtocolSchema,
    out: &mut Vec<Finding>,
) {
    let Some((op_span, aux_span)) = opcode_spans(schema) else {
        return;
    };
    for pair in &view.pairs {
        let mut undeclared: Option<(u64, Option<u64>)> = None;
        for seg in &pair.req_stream.segments {
            if let StreamSegment::UndecodedFrame { bytes, .. } = seg {
                let Some(op) = read_span(bytes, op_span) else {
                    continue;
                };
                let aux = aux_span.and_then(|s| read_span(bytes, s));
                if !opcode_declared(schema, op, aux) {
                    undeclared = Some((op, aux));
                }
            }
        }
        let Some((op, aux)) = undeclared else {
            continue;
        };
        if pair.resp_stream.frame_count() == 0 && pair.timeout && !pair.closed {
            let opcode_text = match aux {
                Some(a) => format!("{op:#x}/{a:#x}"),
                None => format!("{op:#x}"),
            };
            emit(
                out,
                binding,
                view,
                (pair.index, pair.index),
                "silent_discard".into(),
                format!(
                    "request with undeclared opcode {opcode_text} expected a declared \
                     error/exception response, observed silence with the connection held open"
                ),
            );
        }
    }
}

/// R8: per-response timeout with the connection held beyond the threshold,
/// where a reaction was actually due (an expect-reply frame, a malformed but
/// complete frame, or an incomplete trailing frame).
fn hang(
    binding: &Binding<'_>,
    view: &TraceView<'_>,
    _schema: &ProtocolSchema,
    rules: &RuleSet,
    out: &mut Vec<Finding>,
) {
    if view.record.connection_result != ConnectionResult::Hang {
        return;
    }
    let threshold = rules
        .param("R8", "threshold_ms")
        .and_then(|v| v.parse::<u64>().ok())
        .or_else(|| binding.rule.uint_param("threshold_ms"))
        .unwrap_or(200);
    let expect = binding.rule.list_param("expect_reply");
    let Some(pair) = view.pairs.last() else {
        return;
    };
    if !pair.timeout || pair.rtt_ms < threshold {
        return;
    }
    let typed_due = pair
        .req_stream
        .messages()
        .any(|m| expect.iter().any(|e| e == &m.type_name));
    let malformed_frame = pair
        .req_stream
        .segments
        .iter()
        .any(|s| matches!(s, StreamSegment::UndecodedFrame { .. }));
    let incomplete_tail = !pair.req_stream.residual.is_empty();
    let key = if incomplete_tail && !typed_due && !malformed_frame {
        "hang_on_incomplete"
    } else if malformed_frame && !typed_due {
        "hang_on_malformed"
    } else if typed_due {
        "hang_on_request"
    } else {
        return;
    };
    emit(
        out,
        binding,
        view,
        (pair.index, pair.index),
        key.into(),
        format!(
            "connection held open {}ms past the per-response timeout instead of answering or \
             releasing ({})",
            pair.rtt_ms,
            match key {
                "hang_on_incomplete" => "incomplete trailing frame never timed out",
                "hang_on_malformed" => "malformed frame neither answered nor rejected",
                _ => "well-formed request left unanswered",
            }
        ),
    );
}

/// R9: a malformed request of the named type answered with a success-class
/// response instead of a declared error.
fn accept_malformed(
    binding: &Binding<'_>,
    view: &TraceView<'_>,
    schema: &ProtocolSchema,
    out: &mut Vec<Finding>,
) {
    let Some(request_type) = binding.rule.params.get("request") else {
        return;
    };
    let Some(success_field) = binding.rule.params.get("success_field") else {
        return;
    };
    let success_value = binding.rule.uint_param("success_value").unwrap_or(0);
    let Some(msg) = schema.message(request_type) else {
        return;
    };
    let Some(op_span) = static_field_span(msg, &msg.opcode_field) else {
        return;
    };
    let aux_span = msg
        .opcode_aux_field
        .as_deref()
        .and_then(|a| static_field_span(msg, a));
    let op_values = msg.field(&msg.opcode_field).and_then(|f| f.value);
    let aux_values = msg
        .opcode_aux_field
        .as_deref()
        .and_then(|a| msg.field(a))
        .and_then(|f| f.value);

    for pair in &view.pairs {
        let malformed_of_type = pair.req_stream.segments.iter().any(|s| {
            let StreamSegment::UndecodedFrame { bytes, .. } = s else {
                return false;
            };
            let op_ok = match (read_span(bytes, op_span), op_values) {
                (Some(v), Some(expected)) => v == expected,
                _ => false,
            };
            let aux_ok = match (aux_span, aux_values) {
                (Some(span), Some(expected)) => read_span(bytes, span) == Some(expected),
                (None, _) => true,
                (Some(_), None) => true,
            };
            op_ok && aux_ok
        });
        if !malformed_of_type {
            continue;
        }
        let success = pair
            .resp_stream
            .messages()
            .any(|m| m.uint(success_field) == Some(success_value));
        if success {
            emit(
                out,
                binding,
                view,
                (pair.index, pair.index),
                format!("accepted_malformed:{request_type}"),
                format!(
                    "malformed {request_type} (grammar violation in the frame) expected an error \
                     response, observed {success_field}={success_value:#x} success"
                ),
            );
        }
    }
}

