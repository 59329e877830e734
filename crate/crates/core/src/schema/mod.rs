//! The universal protocol schema: packet layouts, state machine and
//! dependency notes, plus the cross-representation consistency verifier.
//!
//! A schema is authored as a file triple `<name>.packets.json`,
//! `<name>.fsm.mmd`, `<name>.notes.md` and parsed into a fully cross-linked
//! [`ProtocolSchema`]. All types are immutable after construction and all
//! operations here are pure.

mod bundled;
mod mermaid;
mod notes;
mod packets;
mod verify;

pub use bundled::{builtin_protocols, bundled_docs, load_builtin_schema, BundledDocs};
pub use mermaid::{emit_state_machine, parse_state_machine};
pub use notes::{emit_notes, parse_notes};
pub use packets::emit_packets;
pub use verify::{verify_consistency, Inconsistency, InconsistencyKind};

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::value::FieldMap;

/// Protocol state identifier derived from function/command codes.
pub type StateId = u32;

/// Sentinel state for response segments that do not decode.
pub const UNKNOWN_STATE: StateId = 0xFFFF_FFFF;

/// Reserved node for the pre-session state of the implicit state machine.
pub const INIT_STATE: StateId = 0xFFFF_FFFE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ClientToServer,
    ServerToClient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endianness {
    Big,
    Little,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldKind {
    #[serde(rename = "uint")]
    UnsignedInt,
    #[serde(rename = "int")]
    SignedInt,
    #[serde(rename = "bytes")]
    RawBytes,
    #[serde(rename = "enum")]
    Enum,
    #[serde(rename = "const")]
    Const,
    #[serde(rename = "composite")]
    Composite,
}

/// Value range or enumerated value set for a field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Constraint {
    Range { min: u64, max: u64 },
    Values { values: Vec<u64> },
}

impl Constraint {
    pub fn permits(&self, v: u64) -> bool {
        match self {
            Constraint::Range { min, max } => v >= *min && v <= *max,
            Constraint::Values { values } => values.contains(&v),
        }
    }

    pub fn min(&self) -> u64 {
        match self {
            Constraint::Range { min, .. } => *min,
            Constraint::Values { values } => values.iter().copied().min().unwrap_or(0),
        }
    }

    pub fn max(&self) -> u64 {
        match self {
            Constraint::Range { max, .. } => *max,
            Constraint::Values { values } => values.iter().copied().max().unwrap_or(0),
        }
    }
}

/// Reference from a length field to the region whose encoded byte count it
/// stores. `target` is either a later field name or the reserved region
/// `"rest"` (every byte after this field). The stored value equals the
/// region's byte count plus `offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthRef {
    pub target: String,
    #[serde(default, skip_serializing_if = "is_zero_i32")]
    pub offset: i32,
}

/// Reserved [`LengthRef`] target meaning "every byte after this field".
pub const REST_REGION: &str = "rest";

/// Reference from a count field to a repeated region. The stored value is
/// the region's byte length divided by `item_bytes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountRef {
    pub target: String,
    #[serde(default = "default_item_bytes")]
    pub item_bytes: u32,
}

/// Conditional presence: the field exists iff an earlier field equals a value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresenceRule {
    pub field: String,
    pub equals: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
    /// Width in bits. Must be a multiple of 8 unless the field belongs to a
    /// declared bit group. For `bytes` fields this is the element width (8).
    #[serde(default = "default_width")]
    pub width: u32,
    #[serde(default = "default_endian")]
    pub endian: Endianness,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraint: Option<Constraint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub presence: Option<PresenceRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length_of: Option<LengthRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count_of: Option<CountRef>,
    /// The single permitted value of a `const` field.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<u64>,
    /// Default used by encode and seed generation when no value is supplied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<u64>,
    /// Consecutive fields sharing a bit-group name are packed MSB-first into
    /// the group's bytes; the group widths must sum to a multiple of 8.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bit_group: Option<String>,
    /// Sub-fields of a `composite` field, flattened by the codec.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<FieldSpec>,
}

impl FieldSpec {
    /// Builder used by tests and programmatic schema construction.
    pub fn uint(name: &str, width: u32) -> Self {
        FieldSpec {
            name: name.to_string(),
            kind: FieldKind::UnsignedInt,
            width,
            endian: Endianness::Big,
            constraint: None,
            presence: None,
            length_of: None,
            count_of: None,
            value: None,
            default: None,
            bit_group: None,
            fields: Vec::new(),
        }
    }

    pub fn constant(name: &str, width: u32, value: u64) -> Self {
        let mut f = FieldSpec::uint(name, width);
        f.kind = FieldKind::Const;
        f.value = Some(value);
        f
    }

    pub fn bytes(name: &str) -> Self {
        let mut f = FieldSpec::uint(name, 8);
        f.kind = FieldKind::RawBytes;
        f
    }
}

/// Named grouping of the leading `span` fields as the message header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeaderNesting {
    pub name: String,
    pub span: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageSchema {
    pub name: String,
    pub direction: Direction,
    pub fields: Vec<FieldSpec>,
    /// Field carrying the function/command code.
    pub opcode_field: String,
    /// Second operation field for composite-operation protocols.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub opcode_aux_field: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub header: Option<HeaderNesting>,
}

impl MessageSchema {
    pub fn field(&self, name: &str) -> Option<&FieldSpec> {
        fn find<'a>(fields: &'a [FieldSpec], name: &str) -> Option<&'a FieldSpec> {
            for f in fields {
                if f.name == name {
                    return Some(f);
                }
                if let Some(hit) = find(&f.fields, name) {
                    return Some(hit);
                }
            }
            None
        }
        find(&self.fields, name)
    }

    /// Layout-order field list with composite containers flattened away.
    pub fn flat_fields(&self) -> Vec<&FieldSpec> {
        fn walk<'a>(fields: &'a [FieldSpec], out: &mut Vec<&'a FieldSpec>) {
            for f in fields {
                if f.kind == FieldKind::Composite {
                    walk(&f.fields, out);
                } else {
                    out.push(f);
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.fields, &mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub from: String,
    pub to: String,
    pub trigger: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guard: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMachine {
    /// Declared states in first-appearance order.
    pub states: Vec<String>,
    pub initial: String,
    pub transitions: Vec<Transition>,
    /// States in which data-transfer messages are legal. Populated from an
    /// `activation_gate` dependency-note binding when present.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub activation_states: Vec<String>,
}

impl StateMachine {
    pub fn has_state(&self, name: &str) -> bool {
        self.states.iter().any(|s| s == name)
    }

    /// First declared transition from `from` triggered by `trigger`.
    pub fn transition_on(&self, from: &str, trigger: &str) -> Option<&Transition> {
        self.transitions
            .iter()
            .find(|t| t.from == from && t.trigger == trigger)
    }
}

/// Binding of a dependency note to a built-in oracle rule kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineRule {
    pub kind: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, String>,
}

impl MachineRule {
    /// Pipe-separated list parameter.
    pub fn list_param(&self, key: &str) -> Vec<String> {
        self.params
            .get(key)
            .map(|v| v.split('|').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
            .unwrap_or_default()
    }

    pub fn uint_param(&self, key: &str) -> Option<u64> {
        self.params.get(key).and_then(|v| parse_uint(v))
    }
}

/// Rule kinds the deterministic oracle understands. Unbound notes remain
/// citation-only text.
pub const KNOWN_RULE_KINDS: &[&str] = &[
    "structural",
    "reply_prohibition",
    "echo",
    "state_legality",
    "length_consistency",
    "residual_handling",
    "error_signaling",
    "hang",
    "accept_malformed",
    "stateless",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependencyNote {
    pub clause_id: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub linked_messages: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub machine_rule: Option<MachineRule>,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateIdRule {
    SingleOpcode,
    SumOfOpcodePair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSchema {
    pub protocol_name: String,
    pub version: String,
    pub transport_default_port: u16,
    pub state_id_rule: StateIdRule,
    pub messages: Vec<MessageSchema>,
    pub state_machine: StateMachine,
    pub notes: Vec<DependencyNote>,
}

impl ProtocolSchema {
    pub fn message(&self, name: &str) -> Option<&MessageSchema> {
        self.messages.iter().find(|m| m.name == name)
    }

    pub fn messages_in(&self, direction: Direction) -> impl Iterator<Item = &MessageSchema> {
        self.messages.iter().filter(move |m| m.direction == direction)
    }

    pub fn note(&self, clause_id: &str) -> Option<&DependencyNote> {
        self.notes.iter().find(|n| n.clause_id == clause_id)
    }

    /// Notes bound to a given machine-rule kind.
    pub fn notes_with_rule<'a>(
        &'a self,
        kind: &'a str,
    ) -> impl Iterator<Item = &'a DependencyNote> + 'a {
        self.notes
            .iter()
            .filter(move |n| n.machine_rule.as_ref().map(|r| r.kind == kind).unwrap_or(false))
    }
}

#[derive(Debug, Error)]
pub enum StateIdError {
    #[error("unknown message type {0:?}")]
    UnknownType(String),
    #[error("decode-contract violation: opcode field {field:?} missing from decoded {type_name:?}")]
    MissingOpcode { type_name: String, field: String },
}

/// Maps a decoded message's operation code(s) to its protocol state id.
///
/// Under `single_opcode` the state is the opcode field value; under
/// `sum_of_opcode_pair` the opcode and the auxiliary opcode (when the message
/// declares one) are summed with wrapping 32-bit arithmetic.
pub fn state_id_of(
    schema: &ProtocolSchema,
    type_name: &str,
    fields: &FieldMap,
) -> Result<StateId, StateIdError> {
    let msg = schema
        .message(type_name)
        .ok_or_else(|| StateIdError::UnknownType(type_name.to_string()))?;
    let opcode = fields
        .get(&msg.opcode_field)
        .and_then(|v| v.as_uint())
        .ok_or_else(|| StateIdError::MissingOpcode {
            type_name: type_name.to_string(),
            field: msg.opcode_field.clone(),
        })?;
    let mut state = opcode as StateId;
    if schema.state_id_rule == StateIdRule::SumOfOpcodePair {
        if let Some(aux_name) = &msg.opcode_aux_field {
            let aux = fields
                .get(aux_name)
                .and_then(|v| v.as_uint())
                .ok_or_else(|| StateIdError::MissingOpcode {
                    type_name: type_name.to_string(),
                    field: aux_name.clone(),
                })?;
            state = state.wrapping_add(aux as StateId);
        }
    }
    Ok(state)
}

/// One parse problem with its source document and position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseDiagnostic {
    pub doc: SchemaDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaDoc {
    Packets,
    StateMachine,
    Notes,
    CrossCheck,
}

impl std::fmt::Display for ParseDiagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let doc = match self.doc {
            SchemaDoc::Packets => "packets.json",
            SchemaDoc::StateMachine => "fsm.mmd",
            SchemaDoc::Notes => "notes.md",
            SchemaDoc::CrossCheck => "cross-check",
        };
        match (self.line, self.column) {
            (Some(l), Some(c)) => write!(f, "{doc}:{l}:{c}: {}", self.message),
            (Some(l), None) => write!(f, "{doc}:{l}: {}", self.message),
            _ => write!(f, "{doc}: {}", self.message),
        }
    }
}

/// Parses the three schema documents into a fully cross-linked
/// [`ProtocolSchema`]. Either every structural and cross-representation check
/// passes and the schema is returned, or the full diagnostic list is; a
/// partially linked schema is never handed out.
pub fn parse_schema(
    packet_doc: &str,
    statemachine_doc: &str,
    notes_doc: &str,
) -> Result<ProtocolSchema, Vec<ParseDiagnostic>> {
    let mut diags = Vec::new();

    let packets = match packets::parse_packets(packet_doc) {
        Ok(p) => Some(p),
        Err(d) => {
            diags.push(d);
            None
        }
    };
    let machine = match mermaid::parse_state_machine(statemachine_doc) {
        Ok(m) => Some(m),
        Err(ds) => {
            diags.extend(ds);
            None
        }
    };
    let notes = match notes::parse_notes(notes_doc) {
        Ok(n) => Some(n),
        Err(ds) => {
            diags.extend(ds);
            None
        }
    };

    let (Some(packets), Some(mut machine), Some(notes)) = (packets, machine, notes) else {
        return Err(diags);
    };

    // The activation gate lives in the notes as an executable binding; lift
    // its state list onto the machine so downstream consumers see one model.
    for note in &notes {
        if let Some(rule) = &note.machine_rule {
            if rule.kind == "state_legality" {
                for s in rule.list_param("activation") {
                    if !machine.activation_states.contains(&s) {
                        machine.activation_states.push(s);
                    }
                }
            }
        }
    }

    let schema = ProtocolSchema {
        protocol_name: packets.protocol,
        version: packets.version,
        transport_default_port: packets.default_port,
        state_id_rule: packets.state_id_rule,
        messages: packets.messages,
        state_machine: machine,
        notes,
    };

    let inconsistencies = verify::verify_consistency(&schema);
    if !inconsistencies.is_empty() {
        diags.extend(inconsistencies.into_iter().map(|i| ParseDiagnostic {
            doc: SchemaDoc::CrossCheck,
            line: None,
            column: None,
            message: format!("{} at {}: {} (suggestion: {})", i.kind, i.location, i.detail, i.suggestion),
        }));
        return Err(diags);
    }
    Ok(schema)
}

/// Canonical emitters for the three documents. `parse_schema` over the result
/// reproduces the schema exactly.
pub fn serialize_schema(schema: &ProtocolSchema) -> (String, String, String) {
    (
        packets::emit_packets(schema),
        mermaid::emit_state_machine(&schema.state_machine),
        notes::emit_notes(schema),
    )
}

pub(crate) fn parse_uint(text: &str) -> Option<u64> {
    let t = text.trim();
    if let Some(hexpart) = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        u64::from_str_radix(hexpart, 16).ok()
    } else {
        t.parse().ok()
    }
}

fn default_width() -> u32 {
    8
}

fn default_endian() -> Endianness {
    Endianness::Big
}

fn default_item_bytes() -> u32 {
    1
}

fn is_zero_i32(v: &i32) -> bool {
    *v == 0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::FieldValue;

    fn tiny_schema(rule: StateIdRule, aux: bool) -> ProtocolSchema {
        let mut fields = vec![FieldSpec::uint("command", 16)];
        if aux {
            fields.push(FieldSpec::uint("subcommand", 16));
        }
        ProtocolSchema {
            protocol_name: "t".into(),
            version: "1".into(),
            transport_default_port: 1,
            state_id_rule: rule,
            messages: vec![MessageSchema {
                name: "M".into(),
                direction: Direction::ClientToServer,
                fields,
                opcode_field: "command".into(),
                opcode_aux_field: aux.then(|| "subcommand".into()),
                header: None,
            }],
            state_machine: StateMachine {
                states: vec!["S".into()],
                initial: "S".into(),
                transitions: vec![Transition {
                    from: "S".into(),
                    to: "S".into(),
                    trigger: "M".into(),
                    guard: None,
                }],
                activation_states: vec![],
            },
            notes: vec![],
        }
    }

    #[test]
    fn single_opcode_maps_directly() {
        let schema = tiny_schema(StateIdRule::SingleOpcode, false);
        let mut fields = FieldMap::new();
        fields.insert("command".into(), FieldValue::Uint(0x03));
        assert_eq!(state_id_of(&schema, "M", &fields).unwrap(), 3);
        fields.insert("command".into(), FieldValue::Uint(0x83));
        assert_eq!(state_id_of(&schema, "M", &fields).unwrap(), 0x83);
    }

    #[test]
    fn opcode_pair_sums_wrapping() {
        let schema = tiny_schema(StateIdRule::SumOfOpcodePair, true);
        let mut fields = FieldMap::new();
        fields.insert("command".into(), FieldValue::Uint(0x0401));
        fields.insert("subcommand".into(), FieldValue::Uint(0x0000));
        assert_eq!(state_id_of(&schema, "M", &fields).unwrap(), 0x0401);
        fields.insert("subcommand".into(), FieldValue::Uint(0x2));
        assert_eq!(state_id_of(&schema, "M", &fields).unwrap(), 0x0403);
    }

    #[test]
    fn missing_opcode_is_contract_violation() {
        let schema = tiny_schema(StateIdRule::SingleOpcode, false);
        let fields = FieldMap::new();
        assert!(matches!(
            state_id_of(&schema, "M", &fields),
            Err(StateIdError::MissingOpcode { .. })
        ));
    }
}
