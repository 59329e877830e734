//! Bundled protocol schemas, embedded from the versioned data files under
//! `crates/core/schemas/`.

use super::{parse_schema, ParseDiagnostic, ProtocolSchema};

/// The schema file triple (plus optional adapter override) for one protocol.
#[derive(Debug, Clone, Copy)]
pub struct BundledDocs {
    pub packets: &'static str,
    pub fsm: &'static str,
    pub notes: &'static str,
    pub adapter: Option<&'static str>,
}

pub fn builtin_protocols() -> &'static [&'static str] {
    &["modbus-tcp", "iec104", "slmp", "enip-encap"]
}

pub fn bundled_docs(protocol: &str) -> Option<BundledDocs> {
    match protocol {
        "modbus-tcp" => Some(BundledDocs {
            packets: include_str!("../../schemas/modbus-tcp.packets.json"),
            fsm: include_str!("../../schemas/modbus-tcp.fsm.mmd"),
            notes: include_str!("../../schemas/modbus-tcp.notes.md"),
            adapter: None,
        }),
        "iec104" => Some(BundledDocs {
            packets: include_str!("../../schemas/iec104.packets.json"),
            fsm: include_str!("../../schemas/iec104.fsm.mmd"),
            notes: include_str!("../../schemas/iec104.notes.md"),
            adapter: Some(include_str!("../../schemas/iec104.adapter.json")),
        }),
        "slmp" => Some(BundledDocs {
            packets: include_str!("../../schemas/slmp.packets.json"),
            fsm: include_str!("../../schemas/slmp.fsm.mmd"),
            notes: include_str!("../../schemas/slmp.notes.md"),
            adapter: None,
        }),
        "enip-encap" => Some(BundledDocs {
            packets: include_str!("../../schemas/enip-encap.packets.json"),
            fsm: include_str!("../../schemas/enip-encap.fsm.mmd"),
            notes: include_str!("../../schemas/enip-encap.notes.md"),
            adapter: Some(include_str!("../../schemas/enip-encap.adapter.json")),
        }),
        _ => None,
    }
}

/// Parses a bundled schema. `None` for unknown protocol names.
pub fn load_builtin_schema(protocol: &str) -> Option<Result<ProtocolSchema, Vec<ParseDiagnostic>>> {
    bundled_docs(protocol).map(|d| parse_schema(d.packets, d.fsm, d.notes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_bundled_schemas_parse_and_verify_clean() {
        for name in builtin_protocols() {
            match load_builtin_schema(name) {
                Some(Ok(schema)) => {
                    assert_eq!(&schema.protocol_name, name);
                    assert!(super::super::verify_consistency(&schema).is_empty());
                }
                Some(Err(diags)) => {
                    let rendered: Vec<String> = diags.iter().map(|d| d.to_string()).collect();
                    panic!("bundled schema {name} failed to parse:\n{}", rendered.join("\n"));
                }
                None => panic!("missing bundled docs for {name}"),
            }
        }
    }

    #[test]
    fn unknown_protocol_is_none() {
        assert!(load_builtin_schema("dnp3").is_none());
    }

    #[test]
    fn serialize_roundtrip_on_bundled_schemas() {
        for name in builtin_protocols() {
            let schema = load_builtin_schema(name).unwrap().unwrap();
            let (p, f, n) = super::super::serialize_schema(&schema);
            let reparsed = parse_schema(&p, &f, &n).expect("canonical docs reparse");
            assert_eq!(schema, reparsed, "round-trip mismatch for {name}");
        }
    }
}
