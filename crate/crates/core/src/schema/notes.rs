//! Dependency-notes document (`<name>.notes.md`): structured Markdown.
//!
//! Each note starts with a `## clause: <id>` heading, optionally followed by
//! `linked:` and `rule:` metadata lines, then free rule text. The free text
//! keeps the original natural-language constraint; the optional `rule:`
//! binding is what makes a note executable by the oracle.

use std::collections::BTreeMap;

use super::{DependencyNote, MachineRule, ParseDiagnostic, ProtocolSchema, SchemaDoc};

pub fn parse_notes(doc: &str) -> Result<Vec<DependencyNote>, Vec<ParseDiagnostic>> {
    let mut notes: Vec<DependencyNote> = Vec::new();
    let mut diags = Vec::new();
    let mut current: Option<(DependencyNote, Vec<String>)> = None;

    let finish = |cur: &mut Option<(DependencyNote, Vec<String>)>, notes: &mut Vec<DependencyNote>| {
        if let Some((mut note, body)) = cur.take() {
            note.text = body.join("\n").trim().to_string();
            notes.push(note);
        }
    };

    for (idx, raw) in doc.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim_end();
        if let Some(rest) = line.strip_prefix("## clause:") {
            finish(&mut current, &mut notes);
            let clause_id = rest.trim().to_string();
            if clause_id.is_empty() {
                diags.push(err(lineno, "empty clause id"));
                continue;
            }
            current = Some((
                DependencyNote {
                    clause_id,
                    linked_messages: Vec::new(),
                    machine_rule: None,
                    text: String::new(),
                },
                Vec::new(),
            ));
            continue;
        }
        let Some((note, body)) = current.as_mut() else {
            // Prose before the first clause heading (titles, intros) carries
            // no machine meaning and is skipped.
            continue;
        };
        let trimmed = line.trim();
        if body.is_empty() {
            if let Some(rest) = trimmed.strip_prefix("linked:") {
                note.linked_messages = rest
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect();
                continue;
            }
            if let Some(rest) = trimmed.strip_prefix("rule:") {
                match parse_rule(rest.trim()) {
                    Ok(rule) => note.machine_rule = Some(rule),
                    Err(msg) => diags.push(err(lineno, &msg)),
                }
                continue;
            }
        }
        if !(trimmed.is_empty() && body.is_empty()) {
            body.push(trimmed.to_string());
        }
    }
    finish(&mut current, &mut notes);

    if diags.is_empty() {
        Ok(notes)
    } else {
        Err(diags)
    }
}

/// Parses `kind` or `kind(key=value, key=a|b|c)`.
fn parse_rule(text: &str) -> Result<MachineRule, String> {
    let (kind, params_text) = match text.split_once('(') {
        None => (text.trim(), None),
        Some((k, rest)) => {
            let rest = rest
                .strip_suffix(')')
                .ok_or_else(|| format!("rule binding missing closing parenthesis: {text:?}"))?;
            (k.trim(), Some(rest))
        }
    };
    if kind.is_empty() {
        return Err("empty rule kind".to_string());
    }
    let mut params = BTreeMap::new();
    if let Some(ptext) = params_text {
        for part in ptext.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| format!("rule parameter {part:?} is not key=value"))?;
            params.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    Ok(MachineRule {
        kind: kind.to_string(),
        params,
    })
}

/// Canonical emitter; `parse_notes` over the result reproduces the notes.
pub fn emit_notes(schema: &ProtocolSchema) -> String {
    let mut out = format!("# Dependency notes: {}\n", schema.protocol_name);
    for note in &schema.notes {
        out.push_str(&format!("\n## clause: {}\n", note.clause_id));
        if !note.linked_messages.is_empty() {
            out.push_str(&format!("linked: {}\n", note.linked_messages.join(", ")));
        }
        if let Some(rule) = &note.machine_rule {
            if rule.params.is_empty() {
                out.push_str(&format!("rule: {}\n", rule.kind));
            } else {
                let params: Vec<String> =
                    rule.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
                out.push_str(&format!("rule: {}({})\n", rule.kind, params.join(", ")));
            }
        }
        if !note.text.is_empty() {
            out.push('\n');
            out.push_str(&note.text);
            out.push('\n');
        }
    }
    out
}

fn err(line: usize, message: &str) -> ParseDiagnostic {
    ParseDiagnostic {
        doc: SchemaDoc::Notes,
        line: Some(line),
        column: None,
        message: message.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_clause_with_rule_and_links() {
        let doc = "# notes\n\n## clause: p.discard\nlinked: A, B\nrule: reply_prohibition(field=protocol_id, allowed=0)\n\nThe server MUST discard these.\n";
        let notes = parse_notes(doc).unwrap();
        assert_eq!(notes.len(), 1);
        let n = &notes[0];
        assert_eq!(n.clause_id, "p.discard");
        assert_eq!(n.linked_messages, vec!["A", "B"]);
        let rule = n.machine_rule.as_ref().unwrap();
        assert_eq!(rule.kind, "reply_prohibition");
        assert_eq!(rule.params["field"], "protocol_id");
        assert_eq!(n.text, "The server MUST discard these.");
    }

    #[test]
    fn empty_doc_is_zero_notes() {
        assert!(parse_notes("").unwrap().is_empty());
    }

    #[test]
    fn list_params_split_on_pipe() {
        let doc = "## clause: c\nrule: residual_handling(expect_reply=A|B|C)\n\nx\n";
        let notes = parse_notes(doc).unwrap();
        let rule = notes[0].machine_rule.as_ref().unwrap();
        assert_eq!(rule.list_param("expect_reply"), vec!["A", "B", "C"]);
    }

    #[test]
    fn bad_rule_syntax_is_diagnosed() {
        assert!(parse_notes("## clause: c\nrule: broken(open\n").is_err());
        assert!(parse_notes("## clause: c\nrule: k(novalue)\n").is_err());
    }
}
