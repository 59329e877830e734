//! Per-protocol adapter contract: the two functions a stateful fuzzer needs
//! (request delimitation and response-state extraction) realized as one
//! generic schema-driven adapter plus declarative per-protocol overrides.
//!
//! Overrides are data, not code: an optional `<name>.adapter.json` file
//! declares the session prologue (and optionally a port). Deleting every
//! override still leaves a functioning, if weaker, adapter for each
//! protocol.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, DelimitedStream, StreamSegment};
use crate::schema::{
    self, bundled_docs, parse_schema, Direction, ProtocolSchema, StateId, UNKNOWN_STATE,
};
use crate::value::FieldMap;

/// One prologue step: a raw request and the response state it must produce.
#[derive(Debug, Clone, PartialEq)]
pub struct PrologueStep {
    pub request: Vec<u8>,
    pub expect_state: StateId,
}

/// Declarative adapter override file (`<name>.adapter.json`).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AdapterOverrides {
    #[serde(default)]
    pub prologue: Vec<PrologueOverride>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub port: Option<u16>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrologueOverride {
    /// Message type to encode, with explicit field values on top of schema
    /// defaults.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub send_message: Option<String>,
    #[serde(default)]
    pub fields: FieldMap,
    /// Raw hex alternative to `send_message`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub send_hex: Option<String>,
    pub expect_state: StateId,
}

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("unknown protocol {0:?}")]
    UnknownProtocol(String),
    #[error("bundled schema for {0:?} failed to parse")]
    SchemaBroken(String),
    #[error("adapter override is invalid: {0}")]
    BadOverride(String),
}

/// Binding of the two adapter functions to one protocol schema.
#[derive(Debug, Clone)]
pub struct AdapterContract {
    pub protocol_name: String,
    pub schema: Arc<ProtocolSchema>,
    /// Ordered requests establishing session context, with expected states.
    pub prologue: Vec<PrologueStep>,
    pub default_port: u16,
}

impl AdapterContract {
    /// Builds the generic adapter for a schema, optionally applying a
    /// declarative override file.
    pub fn new(
        schema: Arc<ProtocolSchema>,
        overrides: Option<&AdapterOverrides>,
    ) -> Result<Self, AdapterError> {
        let mut prologue = Vec::new();
        let mut port = schema.transport_default_port;
        if let Some(ov) = overrides {
            if let Some(p) = ov.port {
                port = p;
            }
            for step in &ov.prologue {
                let request = match (&step.send_message, &step.send_hex) {
                    (Some(t), None) => codec::encode(t, &step.fields, &schema)
                        .map_err(|e| AdapterError::BadOverride(e.to_string()))?,
                    (None, Some(h)) => crate::hexutil::from_hex_tolerant(h)
                        .map_err(AdapterError::BadOverride)?,
                    _ => {
                        return Err(AdapterError::BadOverride(
                            "prologue step needs exactly one of send_message/send_hex".into(),
                        ))
                    }
                };
                // Prologue messages must decode under the schema and their
                // expected states must exist in the machine's trigger space.
                let decoded = codec::decode(&request, &schema, Direction::ClientToServer)
                    .map_err(|e| AdapterError::BadOverride(format!("prologue does not decode: {e}")))?;
                let _ = schema::state_id_of(&schema, &decoded.type_name, &decoded.fields)
                    .map_err(|e| AdapterError::BadOverride(e.to_string()))?;
                prologue.push(PrologueStep {
                    request,
                    expect_state: step.expect_state,
                });
            }
        }
        Ok(AdapterContract {
            protocol_name: schema.protocol_name.clone(),
            schema,
            prologue,
            default_port: port,
        })
    }

    /// Delimits message boundaries within a request byte stream.
    pub fn delimit_requests(&self, buffer: &[u8]) -> DelimitedStream {
        codec::delimit(buffer, &self.schema, Direction::ClientToServer)
    }

    pub fn delimit_responses(&self, buffer: &[u8]) -> DelimitedStream {
        codec::delimit(buffer, &self.schema, Direction::ServerToClient)
    }

    /// Extracts the state identifier sequence from a server response buffer.
    /// Total over arbitrary bytes: undecodable segments and trailing partial
    /// frames map to the reserved sentinel [`UNKNOWN_STATE`].
    pub fn extract_response_state(&self, buffer: &[u8]) -> Vec<StateId> {
        let stream = self.delimit_responses(buffer);
        let mut states: Vec<StateId> = Vec::new();
        let push = |states: &mut Vec<StateId>, s: StateId| {
            // Contiguous undecodable regions collapse into one sentinel.
            if s == UNKNOWN_STATE && states.last() == Some(&UNKNOWN_STATE) {
                return;
            }
            states.push(s);
        };
        for segment in &stream.segments {
            match segment {
                StreamSegment::Message(m) => {
                    match schema::state_id_of(&self.schema, &m.type_name, &m.fields) {
                        Ok(s) => push(&mut states, s),
                        Err(_) => push(&mut states, UNKNOWN_STATE),
                    }
                }
                StreamSegment::UndecodedFrame { .. } | StreamSegment::Garbage(_) => {
                    push(&mut states, UNKNOWN_STATE)
                }
            }
        }
        if !stream.residual.is_empty() {
            push(&mut states, UNKNOWN_STATE);
        }
        states
    }
}

/// Returns the adapter for a bundled protocol, wired to the bundled schema
/// and its declared overrides.
pub fn builtin_adapter(protocol_name: &str) -> Result<AdapterContract, AdapterError> {
    let docs = bundled_docs(protocol_name)
        .ok_or_else(|| AdapterError::UnknownProtocol(protocol_name.to_string()))?;
    let schema = parse_schema(docs.packets, docs.fsm, docs.notes)
        .map_err(|_| AdapterError::SchemaBroken(protocol_name.to_string()))?;
    let overrides = match docs.adapter {
        Some(text) => Some(
            serde_json::from_str::<AdapterOverrides>(text)
                .map_err(|e| AdapterError::BadOverride(e.to_string()))?,
        ),
        None => None,
    };
    AdapterContract::new(Arc::new(schema), overrides.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_protocol_is_rejected() {
        assert!(matches!(
            builtin_adapter("ftp"),
            Err(AdapterError::UnknownProtocol(_))
        ));
    }

    #[test]
    fn iec104_prologue_is_startdt_act() {
        let adapter = builtin_adapter("iec104").unwrap();
        assert_eq!(adapter.prologue.len(), 1);
        assert_eq!(adapter.prologue[0].request, vec![0x68, 0x04, 0x07, 0x00, 0x00, 0x00]);
        assert_eq!(adapter.prologue[0].expect_state, 0x0b);
    }

    #[test]
    fn enip_prologue_is_register_session() {
        let adapter = builtin_adapter("enip-encap").unwrap();
        assert_eq!(adapter.prologue.len(), 1);
        let req = &adapter.prologue[0].request;
        assert_eq!(req.len(), 28);
        assert_eq!(&req[0..2], &[0x65, 0x00]);
        assert_eq!(&req[2..4], &[0x04, 0x00]);
        assert_eq!(adapter.prologue[0].expect_state, 0x65);
    }

    #[test]
    fn modbus_and_slmp_prologues_empty() {
        assert!(builtin_adapter("modbus-tcp").unwrap().prologue.is_empty());
        assert!(builtin_adapter("slmp").unwrap().prologue.is_empty());
    }

    #[test]
    fn empty_buffer_extracts_no_states() {
        let adapter = builtin_adapter("modbus-tcp").unwrap();
        assert!(adapter.extract_response_state(&[]).is_empty());
    }

    #[test]
    fn garbage_maps_to_unknown_sentinel() {
        let adapter = builtin_adapter("modbus-tcp").unwrap();
        // Bytes that cannot be an MBAP prefix: protocol id bytes are wrong.
        assert_eq!(adapter.extract_response_state(&[0xff, 0xff, 0xff, 0xff]), vec![UNKNOWN_STATE]);
    }

    #[test]
    fn contract_without_overrides_still_functions() {
        let docs = bundled_docs("iec104").unwrap();
        let schema = parse_schema(docs.packets, docs.fsm, docs.notes).unwrap();
        let adapter = AdapterContract::new(Arc::new(schema), None).unwrap();
        assert!(adapter.prologue.is_empty());
        let con = [0x68, 0x04, 0x0b, 0x00, 0x00, 0x00];
        assert_eq!(adapter.extract_response_state(&con), vec![0x0b]);
    }
}
