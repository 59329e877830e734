//! The external-checker wire interface: a self-contained JSON envelope with
//! everything a model-backed checker needs, and a strict importer that
//! accepts only clause-grounded findings against known traces. Rejections
//! are counted and reported, never silently dropped.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::recorder::TraceRecord;
use crate::schema::{emit_notes, emit_state_machine, MessageSchema, ProtocolSchema};

use super::{Category, Finding, FindingSource, OracleError};

pub const ENVELOPE_FORMAT: &str = "check-envelope.v1";

/// Versioned prompt text shipped with the envelope.
pub const PROMPT_TEMPLATE: &str = include_str!("../../assets/check-prompt.v1.txt");

/// Self-contained unit of work for an external conformance checker.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckEnvelope {
    pub format: String,
    pub protocol: String,
    pub prompt_template: String,
    /// Full dependency-notes document; clause ids cited in replies must
    /// resolve here.
    pub notes_markdown: String,
    pub state_machine_mermaid: String,
    pub messages: Vec<MessageSchema>,
    pub traces: Vec<TraceRecord>,
}

pub fn export_for_external_check(traces: &[TraceRecord], schema: &ProtocolSchema) -> CheckEnvelope {
    CheckEnvelope {
        format: ENVELOPE_FORMAT.to_string(),
        protocol: schema.protocol_name.clone(),
        prompt_template: PROMPT_TEMPLATE.to_string(),
        notes_markdown: emit_notes(schema),
        state_machine_mermaid: emit_state_machine(&schema.state_machine),
        messages: schema.messages.clone(),
        traces: traces.to_vec(),
    }
}

/// One finding as an external checker reports it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExternalFinding {
    pub trace_id: String,
    #[serde(default)]
    pub message_index: Option<(usize, usize)>,
    pub category: Category,
    pub clause_id: String,
    pub evidence: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExternalReply {
    pub findings: Vec<ExternalFinding>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedFinding {
    /// `ungrounded` (clause does not resolve) or `unknown_trace`.
    pub reason: String,
    pub clause_id: String,
    pub trace_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImportOutcome {
    pub accepted: Vec<Finding>,
    pub rejected: Vec<RejectedFinding>,
}

/// Validates an external reply. A finding is accepted only if its clause id
/// resolves in the schema's notes and the cited trace exists.
pub fn import_external_findings(
    reply_json: &str,
    schema: &ProtocolSchema,
    known_traces: &HashSet<String>,
) -> Result<ImportOutcome, OracleError> {
    let reply: ExternalReply = serde_json::from_str(reply_json)
        .map_err(|e| OracleError::BadExternalReply(e.to_string()))?;
    let mut outcome = ImportOutcome {
        accepted: Vec::new(),
        rejected: Vec::new(),
    };
    for f in reply.findings {
        if schema.note(&f.clause_id).is_none() {
            outcome.rejected.push(RejectedFinding {
                reason: "ungrounded".into(),
                clause_id: f.clause_id,
                trace_id: f.trace_id,
            });
            continue;
        }
        if !known_traces.contains(&f.trace_id) {
            outcome.rejected.push(RejectedFinding {
                reason: "unknown_trace".into(),
                clause_id: f.clause_id,
                trace_id: f.trace_id,
            });
            continue;
        }
        let range = f.message_index.unwrap_or((0, 0));
        outcome.accepted.push(
            Finding {
                finding_id: String::new(),
                trace_id: f.trace_id,
                message_range: range,
                category: f.category,
                rule_id: "EXT".into(),
                clause_id: f.clause_id,
                evidence: f.evidence,
                evidence_key: "external".into(),
                source: FindingSource::External,
            }
            .seal(),
        );
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::load_builtin_schema;

    #[test]
    fn grounded_finding_accepted_ungrounded_rejected() {
        let schema = load_builtin_schema("modbus-tcp").unwrap().unwrap();
        let known: HashSet<String> = ["t1".to_string()].into_iter().collect();
        let reply = serde_json::json!({
            "findings": [
                {
                    "trace_id": "t1",
                    "category": "SNC",
                    "clause_id": "modbus.mbap.protocol_id.discard",
                    "evidence": "server replied to protocol id 0x0001"
                },
                {
                    "trace_id": "t1",
                    "category": "SNC",
                    "clause_id": "made.up.clause",
                    "evidence": "x"
                },
                {
                    "trace_id": "ghost",
                    "category": "ILF",
                    "clause_id": "modbus.mbap.protocol_id.discard",
                    "evidence": "x"
                }
            ]
        });
        let outcome =
            import_external_findings(&reply.to_string(), &schema, &known).unwrap();
        assert_eq!(outcome.accepted.len(), 1);
        assert_eq!(outcome.accepted[0].source, FindingSource::External);
        assert_eq!(outcome.rejected.len(), 2);
        assert_eq!(outcome.rejected[0].reason, "ungrounded");
        assert_eq!(outcome.rejected[1].reason, "unknown_trace");
    }

    #[test]
    fn empty_reply_imports_nothing() {
        let schema = load_builtin_schema("modbus-tcp").unwrap().unwrap();
        let outcome =
            import_external_findings(r#"{"findings":[]}"#, &schema, &HashSet::new()).unwrap();
        assert!(outcome.accepted.is_empty());
        assert!(outcome.rejected.is_empty());
    }

    #[test]
    fn envelope_is_self_contained() {
        let schema = load_builtin_schema("iec104").unwrap().unwrap();
        let env = export_for_external_check(&[], &schema);
        assert_eq!(env.format, ENVELOPE_FORMAT);
        assert!(env.notes_markdown.contains("iec104.startdt.activation_gate"));
        assert!(env.state_machine_mermaid.contains("stateDiagram-v2"));
        assert!(!env.messages.is_empty());
        assert!(env.prompt_template.contains("clause"));
    }
}
