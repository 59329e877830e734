//! Specification-conformance differential checker: batch analysis of
//! recorded traces against the protocol schema, emitting clause-cited
//! findings in the SNC/FEH/ILF taxonomy.
//!
//! Rules are parameterized by dependency-note bindings from the schema, not
//! hard-coded per protocol: a rule runs only where a note binds it, and
//! every finding cites that note's clause. The deterministic rule engine is
//! the supported path; the model-backed external checker is strictly
//! offline and optional.

mod envelope;
mod rules;

pub use envelope::{
    export_for_external_check, import_external_findings, CheckEnvelope, ExternalFinding,
    ExternalReply, ImportOutcome, RejectedFinding, ENVELOPE_FORMAT, PROMPT_TEMPLATE,
};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adapters::AdapterContract;
use crate::codec::DelimitedStream;
use crate::hexutil;
use crate::recorder::{ReadDiagnostic, TraceRecord};
use crate::schema::{MachineRule, ProtocolSchema};

/// The semantic-bug taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    /// Strict Non-Conformance: explicitly contradicts protocol rules.
    SNC,
    /// Fragile Error Handling: unsafe practice in an ambiguous scenario.
    FEH,
    /// Implementation Logic Flaw: functional deviation from basic logic.
    ILF,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingSource {
    Builtin,
    External,
}

/// One conformance violation, grounded in a dependency-note clause.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub finding_id: String,
    pub trace_id: String,
    /// (first, last) message index of the evidence within the trace.
    pub message_range: (usize, usize),
    pub category: Category,
    pub rule_id: String,
    pub clause_id: String,
    /// Human-readable expected-vs-observed diff.
    pub evidence: String,
    /// Canonical key for deduplication: names, never raw values.
    pub evidence_key: String,
    pub source: FindingSource,
}

impl Finding {
    fn seal(mut self) -> Self {
        let mut h = Sha256::new();
        h.update(self.trace_id.as_bytes());
        h.update(self.rule_id.as_bytes());
        h.update(self.clause_id.as_bytes());
        h.update(self.evidence_key.as_bytes());
        h.update(self.message_range.0.to_le_bytes());
        self.finding_id = hex::encode(&h.finalize()[..6]);
        self
    }
}

/// The nine built-in rules. Category assignment lives on the rule.
pub const BUILTIN_RULES: &[(&str, &str, Category)] = &[
    ("R1", "structural", Category::SNC),
    ("R2", "reply_prohibition", Category::SNC),
    ("R3", "echo", Category::SNC),
    ("R4", "state_legality", Category::SNC),
    ("R5", "length_consistency", Category::SNC),
    ("R6", "residual_handling", Category::ILF),
    ("R7", "error_signaling", Category::SNC),
    ("R8", "hang", Category::FEH),
    ("R9", "accept_malformed", Category::FEH),
];

pub fn rule_for_kind(kind: &str) -> Option<(&'static str, Category)> {
    BUILTIN_RULES
        .iter()
        .find(|(_, k, _)| *k == kind)
        .map(|(id, _, c)| (*id, *c))
}

/// Enabled rule ids plus per-rule parameter overrides (merged over the
/// note-supplied parameters).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RuleSet {
    pub enabled: BTreeSet<String>,
    #[serde(default)]
    pub params: BTreeMap<String, BTreeMap<String, String>>,
}

impl Default for RuleSet {
    fn default() -> Self {
        RuleSet {
            enabled: BUILTIN_RULES.iter().map(|(id, _, _)| id.to_string()).collect(),
            params: BTreeMap::new(),
        }
    }
}

impl RuleSet {
    /// Parses a rule-set file, rejecting unknown rule ids.
    pub fn from_json(text: &str) -> Result<Self, OracleError> {
        let rs: RuleSet = serde_json::from_str(text).map_err(|e| OracleError::BadRuleSet(e.to_string()))?;
        for id in rs.enabled.iter().chain(rs.params.keys()) {
            if !BUILTIN_RULES.iter().any(|(r, _, _)| r == id) {
                return Err(OracleError::BadRuleSet(format!("unknown rule id {id:?}")));
            }
        }
        Ok(rs)
    }

    pub fn param(&self, rule_id: &str, key: &str) -> Option<&str> {
        self.params.get(rule_id).and_then(|m| m.get(key)).map(|s| s.as_str())
    }
}

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("trace protocol {trace:?} does not match schema protocol {schema:?}")]
    ProtocolMismatch { trace: String, schema: String },
    #[error("trace {trace_id}: corrupt hex in pair {pair}: {detail}")]
    CorruptTrace {
        trace_id: String,
        pair: usize,
        detail: String,
    },
    #[error("trace {trace_id}: recorded state path does not re-derive under the schema adapter")]
    Rederivation { trace_id: String },
    #[error("invalid rule set: {0}")]
    BadRuleSet(String),
    #[error("invalid external reply: {0}")]
    BadExternalReply(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One request/response pair with its delimitation under the schema.
pub(crate) struct PairView {
    pub index: usize,
    pub req: Vec<u8>,
    pub resp: Vec<u8>,
    pub req_stream: DelimitedStream,
    pub resp_stream: DelimitedStream,
    pub timeout: bool,
    pub rtt_ms: u64,
    pub closed: bool,
}

pub(crate) struct TraceView<'a> {
    pub record: &'a TraceRecord,
    pub pairs: Vec<PairView>,
}

/// A note binding a built-in rule, resolved against the rule set.
pub(crate) struct Binding<'a> {
    pub rule_id: &'static str,
    pub category: Category,
    pub clause_id: &'a str,
    pub rule: &'a MachineRule,
}

fn bindings<'a>(schema: &'a ProtocolSchema, rules: &RuleSet) -> Vec<Binding<'a>> {
    let mut out = Vec::new();
    for note in &schema.notes {
        let Some(rule) = &note.machine_rule else {
            continue;
        };
        let Some((rule_id, category)) = rule_for_kind(&rule.kind) else {
            continue;
        };
        if !rules.enabled.contains(rule_id) {
            continue;
        }
        out.push(Binding {
            rule_id,
            category,
            clause_id: &note.clause_id,
            rule,
        });
    }
    out
}

/// Checks one trace against every bound rule. The trace must re-derive under
/// the schema's adapter (the recorded state path is recomputed from the
/// recorded responses and compared).
pub fn check_trace(
    trace: &TraceRecord,
    schema: &ProtocolSchema,
    rules: &RuleSet,
) -> Result<Vec<Finding>, OracleError> {
    if trace.protocol != schema.protocol_name {
        return Err(OracleError::ProtocolMismatch {
            trace: trace.protocol.clone(),
            schema: schema.protocol_name.clone(),
        });
    }
    let adapter = AdapterContract::new(std::sync::Arc::new(schema.clone()), None)
        .expect("verified schema builds an adapter");

    let mut pairs = Vec::with_capacity(trace.pairs.len());
    let mut rederived: Vec<crate::schema::StateId> = Vec::new();
    for (index, p) in trace.pairs.iter().enumerate() {
        let req = hexutil::from_hex_tolerant(&p.req).map_err(|e| OracleError::CorruptTrace {
            trace_id: trace.trace_id.clone(),
            pair: index,
            detail: e,
        })?;
        let resp = hexutil::from_hex_tolerant(&p.resp).map_err(|e| OracleError::CorruptTrace {
            trace_id: trace.trace_id.clone(),
            pair: index,
            detail: e,
        })?;
        rederived.extend(adapter.extract_response_state(&resp));
        pairs.push(PairView {
            index,
            req_stream: adapter.delimit_requests(&req),
            resp_stream: adapter.delimit_responses(&resp),
            req,
            resp,
            timeout: p.timeout,
            rtt_ms: p.rtt_ms,
            closed: p.closed,
        });
    }
    if rederived != trace.state_path {
        return Err(OracleError::Rederivation {
            trace_id: trace.trace_id.clone(),
        });
    }

    let view = TraceView {
        record: trace,
        pairs,
    };
    let mut findings = Vec::new();
    for binding in bindings(schema, rules) {
        rules::run_rule(&binding, &view, schema, rules, &mut findings);
    }
    Ok(findings.into_iter().map(Finding::seal).collect())
}

/// One deduplicated finding with its occurrence count and exemplars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedFinding {
    pub category: Category,
    pub rule_id: String,
    pub clause_id: String,
    pub evidence_key: String,
    pub occurrences: u64,
    pub exemplar_trace_ids: Vec<String>,
    pub exemplar_evidence: String,
    pub message_range: (usize, usize),
    pub source: FindingSource,
}

/// Deterministic batch report: same store and rules, byte-identical output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FindingReport {
    pub format_version: u32,
    pub protocol: String,
    pub traces_checked: u64,
    pub traces_skipped: u64,
    pub counts: BTreeMap<String, u64>,
    pub findings: Vec<AggregatedFinding>,
    pub diagnostics: Vec<String>,
    pub rejected_external: Vec<RejectedFinding>,
}

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Runs `check_trace` over every record, deduplicating findings by
/// (rule id, clause id, canonical evidence key).
pub fn check_batch(
    records: &[TraceRecord],
    read_diags: &[ReadDiagnostic],
    schema: &ProtocolSchema,
    rules: &RuleSet,
) -> FindingReport {
    let mut report = FindingReport {
        format_version: REPORT_FORMAT_VERSION,
        protocol: schema.protocol_name.clone(),
        traces_checked: 0,
        traces_skipped: 0,
        counts: BTreeMap::new(),
        findings: Vec::new(),
        diagnostics: read_diags
            .iter()
            .map(|d| format!("store line {}: corrupt row skipped ({})", d.line, d.reason))
            .collect(),
        rejected_external: Vec::new(),
    };
    let mut agg: BTreeMap<(String, String, String), AggregatedFinding> = BTreeMap::new();
    for record in records {
        match check_trace(record, schema, rules) {
            Ok(findings) => {
                report.traces_checked += 1;
                for f in findings {
                    merge_finding(&mut agg, f);
                }
            }
            Err(e) => {
                report.traces_skipped += 1;
                report.diagnostics.push(e.to_string());
            }
        }
    }
    finish_report(report, agg)
}

pub(crate) fn merge_finding(
    agg: &mut BTreeMap<(String, String, String), AggregatedFinding>,
    f: Finding,
) {
    let key = (f.rule_id.clone(), f.clause_id.clone(), f.evidence_key.clone());
    let entry = agg.entry(key).or_insert_with(|| AggregatedFinding {
        category: f.category,
        rule_id: f.rule_id.clone(),
        clause_id: f.clause_id.clone(),
        evidence_key: f.evidence_key.clone(),
        occurrences: 0,
        exemplar_trace_ids: Vec::new(),
        exemplar_evidence: f.evidence.clone(),
        message_range: f.message_range,
        source: f.source,
    });
    entry.occurrences += 1;
    if entry.exemplar_trace_ids.len() < 3 && !entry.exemplar_trace_ids.contains(&f.trace_id) {
        entry.exemplar_trace_ids.push(f.trace_id.clone());
    }
}

pub(crate) fn finish_report(
    mut report: FindingReport,
    agg: BTreeMap<(String, String, String), AggregatedFinding>,
) -> FindingReport {
    report.findings = agg.into_values().collect();
    for f in &report.findings {
        let cat = format!("{:?}", f.category);
        *report.counts.entry(cat).or_insert(0) += f.occurrences;
    }
    report
}

impl FindingReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}
