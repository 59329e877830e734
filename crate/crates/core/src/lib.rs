//! icpfuzz-core implements a specification-guided greybox fuzzer for binary
//! industrial control protocols (Modbus TCP, IEC 60870-5-104, SLMP and the
//! EtherNet/IP encapsulation layer).
//!
//! The library is organized around a *universal protocol schema*: a three-part
//! grammar (packet layouts in JSON, a state machine in a Mermaid subset, and
//! dependency notes in structured Markdown) that drives every other component:
//!
//! - [`schema`] parses and cross-validates the grammar,
//! - [`codec`] is the bit-exact encoder/decoder and stream delimiter,
//! - [`adapters`] binds the two per-protocol adapter functions (request
//!   delimitation and response-state extraction),
//! - [`corpus`] synthesizes, imports and minimizes seed sequences,
//! - [`engine`] runs the stateful fuzzing loop over TCP,
//! - [`recorder`] persists interaction traces for batch analysis,
//! - [`oracle`] is the specification-conformance differential checker.

pub mod adapters;
pub mod codec;
pub mod corpus;
pub mod engine;
pub mod hexutil;
pub mod oracle;
pub mod recorder;
pub mod schema;
pub mod value;
