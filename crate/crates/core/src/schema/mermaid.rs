//! State machine document (`<name>.fsm.mmd`) in a strict Mermaid subset:
//! a `stateDiagram-v2` header, one `[*] --> Initial` marker, bare state
//! declarations, and `A --> B : Trigger` edges with an optional
//! `/ guard` note after the trigger. `%%` comment lines and blank lines are
//! ignored; any other construct is an error.

use super::{ParseDiagnostic, SchemaDoc, StateMachine, Transition};

pub fn parse_state_machine(doc: &str) -> Result<StateMachine, Vec<ParseDiagnostic>> {
    let mut diags = Vec::new();
    let mut states: Vec<String> = Vec::new();
    let mut initial: Option<String> = None;
    let mut transitions = Vec::new();
    let mut saw_header = false;

    let declare = |states: &mut Vec<String>, name: &str| {
        if !states.iter().any(|s| s == name) {
            states.push(name.to_string());
        }
    };

    for (idx, raw_line) in doc.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with("%%") {
            continue;
        }
        if !saw_header {
            if line == "stateDiagram-v2" {
                saw_header = true;
                continue;
            }
            diags.push(err(lineno, "expected `stateDiagram-v2` header"));
            return Err(diags);
        }

        if let Some((lhs, rest)) = line.split_once("-->") {
            let lhs = lhs.trim();
            let (rhs, label) = match rest.split_once(':') {
                Some((r, l)) => (r.trim(), Some(l.trim())),
                None => (rest.trim(), None),
            };
            if rhs == "[*]" {
                diags.push(err(lineno, "unsupported Mermaid construct: final-state edge `--> [*]`"));
                continue;
            }
            if lhs == "[*]" {
                if label.is_some() {
                    diags.push(err(lineno, "unsupported Mermaid construct: label on initial marker edge"));
                    continue;
                }
                if !is_identifier(rhs) {
                    diags.push(err(lineno, &format!("invalid state name {rhs:?}")));
                    continue;
                }
                if initial.is_some() {
                    diags.push(err(lineno, "duplicate initial marker `[*]`"));
                    continue;
                }
                declare(&mut states, rhs);
                initial = Some(rhs.to_string());
                continue;
            }
            if !is_identifier(lhs) || !is_identifier(rhs) {
                diags.push(err(lineno, &format!("invalid state name in edge {line:?}")));
                continue;
            }
            let Some(label) = label else {
                diags.push(err(lineno, "transition missing `: Trigger` label"));
                continue;
            };
            let (trigger, guard) = match label.split_once('/') {
                Some((t, g)) => (t.trim(), Some(g.trim().to_string())),
                None => (label, None),
            };
            if !is_identifier(trigger) {
                diags.push(err(lineno, &format!("invalid trigger name {trigger:?}")));
                continue;
            }
            declare(&mut states, lhs);
            declare(&mut states, rhs);
            transitions.push(Transition {
                from: lhs.to_string(),
                to: rhs.to_string(),
                trigger: trigger.to_string(),
                guard: guard.filter(|g| !g.is_empty()),
            });
            continue;
        }

        if is_identifier(line) {
            declare(&mut states, line);
            continue;
        }
        diags.push(err(lineno, &format!("unsupported Mermaid construct: {line:?}")));
    }

    if !saw_header {
        diags.push(err(1, "expected `stateDiagram-v2` header"));
    }
    let initial = match initial {
        Some(i) => i,
        None => {
            diags.push(err(1, "missing initial marker `[*] --> State`"));
            String::new()
        }
    };
    if diags.is_empty() {
        Ok(StateMachine {
            states,
            initial,
            transitions,
            activation_states: Vec::new(),
        })
    } else {
        Err(diags)
    }
}

/// Canonical emitter. Declared-only states come first, then the initial
/// marker, then transitions in declaration order.
pub fn emit_state_machine(machine: &StateMachine) -> String {
    let mut out = String::from("stateDiagram-v2\n");
    let mentioned: Vec<&str> = machine
        .transitions
        .iter()
        .flat_map(|t| [t.from.as_str(), t.to.as_str()])
        .chain(std::iter::once(machine.initial.as_str()))
        .collect();
    for s in &machine.states {
        if !mentioned.contains(&s.as_str()) {
            out.push_str(&format!("    {s}\n"));
        }
    }
    out.push_str(&format!("    [*] --> {}\n", machine.initial));
    for t in &machine.transitions {
        match &t.guard {
            Some(g) => out.push_str(&format!("    {} --> {} : {} / {}\n", t.from, t.to, t.trigger, g)),
            None => out.push_str(&format!("    {} --> {} : {}\n", t.from, t.to, t.trigger)),
        }
    }
    out
}

fn is_identifier(s: &str) -> bool {
    !s.is_empty()
        && s.chars().next().map(|c| c.is_ascii_alphabetic() || c == '_').unwrap_or(false)
        && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn err(line: usize, message: &str) -> ParseDiagnostic {
    ParseDiagnostic {
        doc: SchemaDoc::StateMachine,
        line: Some(line),
        column: None,
        message: message.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_machine() {
        let m = parse_state_machine("stateDiagram-v2\n    [*] --> Idle\n    Idle --> Idle : Ping\n").unwrap();
        assert_eq!(m.initial, "Idle");
        assert_eq!(m.states, vec!["Idle"]);
        assert_eq!(m.transitions.len(), 1);
        assert_eq!(m.transitions[0].trigger, "Ping");
    }

    #[test]
    fn guard_note_after_slash() {
        let m = parse_state_machine(
            "stateDiagram-v2\n[*] --> A\nA --> B : Go / only after handshake\n",
        )
        .unwrap();
        assert_eq!(m.transitions[0].guard.as_deref(), Some("only after handshake"));
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let m = parse_state_machine("stateDiagram-v2\n%% note\n\n[*] --> A\nA --> A : T\n").unwrap();
        assert_eq!(m.transitions.len(), 1);
    }

    #[test]
    fn rejects_unsupported_constructs() {
        for doc in [
            "stateDiagram-v2\n[*] --> A\nstate \"x\" as B\n",
            "stateDiagram-v2\n[*] --> A\nA --> [*]\n",
            "stateDiagram-v2\n[*] --> A\nA --> B\n",
            "flowchart\nA --> B\n",
        ] {
            assert!(parse_state_machine(doc).is_err(), "accepted {doc:?}");
        }
    }

    #[test]
    fn roundtrip_identity() {
        let doc = "stateDiagram-v2\n    Orphan\n    [*] --> Idle\n    Idle --> Active : StartDtAct\n    Active --> Idle : StopDtAct / drops pending data\n";
        let m = parse_state_machine(doc).unwrap();
        assert_eq!(emit_state_machine(&m), doc);
    }
}
