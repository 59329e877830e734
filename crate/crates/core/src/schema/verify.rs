//! Deterministic cross-representation consistency verifier.
//!
//! Walks the packet layouts, the state machine and the dependency notes in
//! declaration order and reports every violated invariant with its exact
//! location, the nature of the error and a suggested correction. An empty
//! result is the gate for seed generation and campaign startup.

use std::collections::{BTreeSet, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::{
    Direction, FieldKind, MessageSchema, ProtocolSchema, KNOWN_RULE_KINDS, REST_REGION,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InconsistencyKind {
    DuplicateMessageName,
    DuplicateFieldName,
    ZeroWidthField,
    MisalignedField,
    BitGroupMisaligned,
    ConstWithoutValue,
    UnknownOpcodeField,
    UnknownPresenceRef,
    ForwardPresenceRef,
    UnknownLengthTarget,
    BackwardLengthRef,
    UnknownCountTarget,
    BackwardCountRef,
    UnknownState,
    DanglingTrigger,
    UnreachableState,
    DuplicateClauseId,
    UnlinkedNote,
    UnknownRuleKind,
    UntriggeredMessage,
}

impl std::fmt::Display for InconsistencyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let label = serde_json::to_value(self).expect("kind serializes");
        write!(f, "{}", label.as_str().expect("kind is a string"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inconsistency {
    pub location: String,
    pub kind: InconsistencyKind,
    pub detail: String,
    pub suggestion: String,
}

impl std::fmt::Display for Inconsistency {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} at {}: {} (suggestion: {})",
            self.kind, self.location, self.detail, self.suggestion
        )
    }
}

/// Runs every cross-representation check. Identical inputs yield identical
/// ordered diagnostics.
pub fn verify_consistency(schema: &ProtocolSchema) -> Vec<Inconsistency> {
    let mut out = Vec::new();
    check_messages(schema, &mut out);
    check_state_machine(schema, &mut out);
    check_notes(schema, &mut out);
    check_trigger_coverage(schema, &mut out);
    out
}

fn push(
    out: &mut Vec<Inconsistency>,
    location: String,
    kind: InconsistencyKind,
    detail: String,
    suggestion: String,
) {
    out.push(Inconsistency {
        location,
        kind,
        detail,
        suggestion,
    });
}

fn check_messages(schema: &ProtocolSchema, out: &mut Vec<Inconsistency>) {
    let mut seen = HashSet::new();
    for msg in &schema.messages {
        if !seen.insert(msg.name.as_str()) {
            push(
                out,
                format!("messages[{}]", msg.name),
                InconsistencyKind::DuplicateMessageName,
                format!("message type {:?} declared more than once", msg.name),
                "rename one of the duplicate message types".into(),
            );
        }
        check_fields(msg, out);
    }
}

fn check_fields(msg: &MessageSchema, out: &mut Vec<Inconsistency>) {
    let flat = msg.flat_fields();
    let loc = |field: &str| format!("messages[{}].fields[{}]", msg.name, field);

    let mut names = HashSet::new();
    for f in &flat {
        if !names.insert(f.name.as_str()) {
            push(
                out,
                loc(&f.name),
                InconsistencyKind::DuplicateFieldName,
                format!("field {:?} declared more than once in {:?}", f.name, msg.name),
                "field names must be unique within a message".into(),
            );
        }
    }

    for (idx, f) in flat.iter().enumerate() {
        if f.width == 0 {
            push(
                out,
                loc(&f.name),
                InconsistencyKind::ZeroWidthField,
                "field width is zero".into(),
                "declare a positive width in bits".into(),
            );
        }
        if f.bit_group.is_none() && f.width % 8 != 0 {
            push(
                out,
                loc(&f.name),
                InconsistencyKind::MisalignedField,
                format!("width {} bits is not byte-aligned outside a bit group", f.width),
                "move the field into a bit group or widen it to a byte multiple".into(),
            );
        }
        if f.kind == FieldKind::Const && f.value.is_none() {
            push(
                out,
                loc(&f.name),
                InconsistencyKind::ConstWithoutValue,
                "const field carries no permitted value".into(),
                "add `value` with exactly one permitted value".into(),
            );
        }
        if let Some(p) = &f.presence {
            match flat.iter().position(|g| g.name == p.field) {
                None => push(
                    out,
                    loc(&f.name),
                    InconsistencyKind::UnknownPresenceRef,
                    format!("presence predicate references unknown field {:?}", p.field),
                    "reference a field declared before this one".into(),
                ),
                Some(j) if j >= idx => push(
                    out,
                    loc(&f.name),
                    InconsistencyKind::ForwardPresenceRef,
                    format!("presence predicate references {:?} which is not declared before this field", p.field),
                    "presence predicates may only reference earlier fields".into(),
                ),
                _ => {}
            }
        }
        if let Some(l) = &f.length_of {
            if l.target != REST_REGION {
                match flat.iter().position(|g| g.name == l.target) {
                    None => push(
                        out,
                        loc(&f.name),
                        InconsistencyKind::UnknownLengthTarget,
                        format!("length_of references unknown field {:?}", l.target),
                        format!("reference a later field or the reserved region {REST_REGION:?}"),
                    ),
                    Some(j) if j <= idx => push(
                        out,
                        loc(&f.name),
                        InconsistencyKind::BackwardLengthRef,
                        format!("length_of references {:?} which is not declared after this field", l.target),
                        "length fields must reference later fields or regions".into(),
                    ),
                    _ => {}
                }
            }
        }
        if let Some(c) = &f.count_of {
            match flat.iter().position(|g| g.name == c.target) {
                None => push(
                    out,
                    loc(&f.name),
                    InconsistencyKind::UnknownCountTarget,
                    format!("count_of references unknown field {:?}", c.target),
                    "reference a later repeated region field".into(),
                ),
                Some(j) if j <= idx => push(
                    out,
                    loc(&f.name),
                    InconsistencyKind::BackwardCountRef,
                    format!("count_of references {:?} which is not declared after this field", c.target),
                    "count fields must reference later regions".into(),
                ),
                _ => {}
            }
        }
    }

    // Bit groups must be contiguous runs whose widths sum to byte multiples.
    let mut i = 0;
    let mut seen_groups: HashSet<&str> = HashSet::new();
    while i < flat.len() {
        if let Some(group) = flat[i].bit_group.as_deref() {
            if !seen_groups.insert(group) {
                push(
                    out,
                    loc(&flat[i].name),
                    InconsistencyKind::BitGroupMisaligned,
                    format!("bit group {group:?} is not a contiguous run of fields"),
                    "keep all fields of a bit group adjacent".into(),
                );
                i += 1;
                continue;
            }
            let mut bits = 0;
            while i < flat.len() && flat[i].bit_group.as_deref() == Some(group) {
                bits += flat[i].width;
                i += 1;
            }
            if bits % 8 != 0 {
                push(
                    out,
                    format!("messages[{}].bit_group[{}]", msg.name, group),
                    InconsistencyKind::BitGroupMisaligned,
                    format!("bit group widths sum to {bits} bits"),
                    "group widths must sum to a multiple of 8".into(),
                );
            }
        } else {
            i += 1;
        }
    }

    if msg.field(&msg.opcode_field).is_none() {
        push(
            out,
            format!("messages[{}].opcode_field", msg.name),
            InconsistencyKind::UnknownOpcodeField,
            format!("opcode field {:?} is not declared in {:?}", msg.opcode_field, msg.name),
            "name one of the message's fields".into(),
        );
    }
    if let Some(aux) = &msg.opcode_aux_field {
        if msg.field(aux).is_none() {
            push(
                out,
                format!("messages[{}].opcode_aux_field", msg.name),
                InconsistencyKind::UnknownOpcodeField,
                format!("auxiliary opcode field {aux:?} is not declared in {:?}", msg.name),
                "name one of the message's fields".into(),
            );
        }
    }
}

fn check_state_machine(schema: &ProtocolSchema, out: &mut Vec<Inconsistency>) {
    let machine = &schema.state_machine;
    if !machine.has_state(&machine.initial) {
        push(
            out,
            "state_machine.initial".into(),
            InconsistencyKind::UnknownState,
            format!("initial state {:?} is not declared", machine.initial),
            "declare the state or pick a declared one as initial".into(),
        );
    }
    for (idx, t) in machine.transitions.iter().enumerate() {
        let loc = format!("state_machine.transitions[{idx}]");
        for endpoint in [&t.from, &t.to] {
            if !machine.has_state(endpoint) {
                push(
                    out,
                    loc.clone(),
                    InconsistencyKind::UnknownState,
                    format!("transition endpoint {endpoint:?} is not a declared state"),
                    "declare the state in the machine".into(),
                );
            }
        }
        if schema.message(&t.trigger).is_none() {
            push(
                out,
                loc,
                InconsistencyKind::DanglingTrigger,
                format!("dangling trigger reference: {}", t.trigger),
                "every trigger must name a declared message type".into(),
            );
        }
    }
    for s in &machine.activation_states {
        if !machine.has_state(s) {
            push(
                out,
                "state_machine.activation_states".into(),
                InconsistencyKind::UnknownState,
                format!("activation state {s:?} is not declared"),
                "declare the state in the machine".into(),
            );
        }
    }

    // Reachability from the initial state over declared transitions.
    let mut reached: BTreeSet<&str> = BTreeSet::new();
    let mut queue = VecDeque::new();
    if machine.has_state(&machine.initial) {
        reached.insert(machine.initial.as_str());
        queue.push_back(machine.initial.as_str());
    }
    while let Some(s) = queue.pop_front() {
        for t in &machine.transitions {
            if t.from == s && reached.insert(t.to.as_str()) {
                queue.push_back(t.to.as_str());
            }
        }
    }
    for s in &machine.states {
        if s != &machine.initial && !reached.contains(s.as_str()) {
            push(
                out,
                format!("state_machine.states[{s}]"),
                InconsistencyKind::UnreachableState,
                format!("state {s:?} is unreachable from {:?}", machine.initial),
                "add a transition path from the initial state".into(),
            );
        }
    }
}

fn check_notes(schema: &ProtocolSchema, out: &mut Vec<Inconsistency>) {
    let mut seen = HashSet::new();
    for note in &schema.notes {
        let loc = format!("notes[{}]", note.clause_id);
        if !seen.insert(note.clause_id.as_str()) {
            push(
                out,
                loc.clone(),
                InconsistencyKind::DuplicateClauseId,
                format!("clause id {:?} declared more than once", note.clause_id),
                "clause ids must be unique".into(),
            );
        }
        for m in &note.linked_messages {
            if schema.message(m).is_none() {
                push(
                    out,
                    loc.clone(),
                    InconsistencyKind::UnlinkedNote,
                    format!("note links unknown message type {m:?}"),
                    "link only declared message types".into(),
                );
            }
        }
        if let Some(rule) = &note.machine_rule {
            if !KNOWN_RULE_KINDS.contains(&rule.kind.as_str()) {
                push(
                    out,
                    loc.clone(),
                    InconsistencyKind::UnknownRuleKind,
                    format!("machine rule kind {:?} is not a built-in oracle rule", rule.kind),
                    format!("use one of: {}", KNOWN_RULE_KINDS.join(", ")),
                );
            }
            // Message-name parameters must resolve.
            for key in ["expect_reply", "data_responses", "request"] {
                for name in rule.list_param(key) {
                    if schema.message(&name).is_none() {
                        push(
                            out,
                            loc.clone(),
                            InconsistencyKind::UnlinkedNote,
                            format!("rule parameter {key}={name} names an unknown message type"),
                            "rule parameters must reference declared message types".into(),
                        );
                    }
                }
            }
            for name in rule.list_param("activation") {
                if !schema.state_machine.has_state(&name) {
                    push(
                        out,
                        loc.clone(),
                        InconsistencyKind::UnknownState,
                        format!("rule parameter activation={name} names an unknown state"),
                        "activation states must be declared in the machine".into(),
                    );
                }
            }
        }
    }
}

/// Every client-to-server message must appear as a transition trigger or be
/// explicitly marked stateless in the notes.
fn check_trigger_coverage(schema: &ProtocolSchema, out: &mut Vec<Inconsistency>) {
    let triggers: HashSet<&str> = schema
        .state_machine
        .transitions
        .iter()
        .map(|t| t.trigger.as_str())
        .collect();
    let stateless: HashSet<&str> = schema
        .notes_with_rule("stateless")
        .flat_map(|n| n.linked_messages.iter().map(|s| s.as_str()))
        .collect();
    for msg in schema.messages_in(Direction::ClientToServer) {
        if !triggers.contains(msg.name.as_str()) && !stateless.contains(msg.name.as_str()) {
            push(
                out,
                format!("messages[{}]", msg.name),
                InconsistencyKind::UntriggeredMessage,
                format!(
                    "client-to-server message {:?} is neither a transition trigger nor marked stateless",
                    msg.name
                ),
                "add a transition triggered by it or a `stateless` note linking it".into(),
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{
        FieldSpec, LengthRef, StateIdRule, StateMachine, Transition,
    };

    fn base_schema() -> ProtocolSchema {
        ProtocolSchema {
            protocol_name: "t".into(),
            version: "1".into(),
            transport_default_port: 1,
            state_id_rule: StateIdRule::SingleOpcode,
            messages: vec![MessageSchema {
                name: "Ping".into(),
                direction: Direction::ClientToServer,
                fields: vec![FieldSpec::constant("op", 8, 0)],
                opcode_field: "op".into(),
                opcode_aux_field: None,
                header: None,
            }],
            state_machine: StateMachine {
                states: vec!["Idle".into()],
                initial: "Idle".into(),
                transitions: vec![Transition {
                    from: "Idle".into(),
                    to: "Idle".into(),
                    trigger: "Ping".into(),
                    guard: None,
                }],
                activation_states: vec![],
            },
            notes: vec![],
        }
    }

    #[test]
    fn clean_schema_verifies_empty() {
        assert!(verify_consistency(&base_schema()).is_empty());
    }

    #[test]
    fn transition_from_undeclared_state() {
        let mut s = base_schema();
        s.state_machine.transitions.push(Transition {
            from: "Ghost".into(),
            to: "Idle".into(),
            trigger: "Ping".into(),
            guard: None,
        });
        let issues = verify_consistency(&s);
        assert!(issues.iter().any(|i| i.kind == InconsistencyKind::UnknownState));
    }

    #[test]
    fn backward_length_ref_detected() {
        let mut s = base_schema();
        let mut len = FieldSpec::uint("len", 8);
        len.length_of = Some(LengthRef {
            target: "op".into(),
            offset: 0,
        });
        s.messages[0].fields.push(len);
        let issues = verify_consistency(&s);
        assert!(issues.iter().any(|i| i.kind == InconsistencyKind::BackwardLengthRef));
    }

    #[test]
    fn determinism_of_diagnostics() {
        let mut s = base_schema();
        s.state_machine.states.push("Orphan".into());
        s.messages.push(s.messages[0].clone());
        let a = verify_consistency(&s);
        let b = verify_consistency(&s);
        assert_eq!(a, b);
        assert!(!a.is_empty());
    }
}
