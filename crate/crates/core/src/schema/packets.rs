//! JSON packet-structure document (`<name>.packets.json`).

use serde::{Deserialize, Serialize};

use super::{
    MessageSchema, ParseDiagnostic, ProtocolSchema, SchemaDoc, StateIdRule,
};

/// On-disk shape of the packet-structure document.
#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct PacketsDoc {
    pub protocol: String,
    pub version: String,
    pub default_port: u16,
    pub state_id_rule: StateIdRule,
    pub messages: Vec<MessageSchema>,
}

pub(crate) fn parse_packets(doc: &str) -> Result<PacketsDoc, ParseDiagnostic> {
    serde_json::from_str::<PacketsDoc>(doc).map_err(|e| ParseDiagnostic {
        doc: SchemaDoc::Packets,
        line: Some(e.line()),
        column: Some(e.column()),
        message: format!("malformed JSON: {e}"),
    })
}

/// Canonical emitter: two-space pretty JSON with struct field order.
pub fn emit_packets(schema: &ProtocolSchema) -> String {
    let doc = PacketsDoc {
        protocol: schema.protocol_name.clone(),
        version: schema.version.clone(),
        default_port: schema.transport_default_port,
        state_id_rule: schema.state_id_rule,
        messages: schema.messages.clone(),
    };
    let mut out = serde_json::to_string_pretty(&doc).expect("schema serializes");
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn malformed_json_reports_position() {
        let err = parse_packets("{\n  \"protocol\": }").unwrap_err();
        assert_eq!(err.doc, SchemaDoc::Packets);
        assert_eq!(err.line, Some(2));
        assert!(err.message.contains("malformed JSON"));
    }
}
