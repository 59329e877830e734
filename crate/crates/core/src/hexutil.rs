//! Hex dump convention used everywhere: lowercase, space-free, byte-exact.

/// Encodes bytes as lowercase space-free hex.
pub fn to_hex(bytes: &[u8]) -> String {
    hex::encode(bytes)
}

/// Decodes hex, tolerating ASCII whitespace anywhere in the input.
pub fn from_hex_tolerant(text: &str) -> Result<Vec<u8>, String> {
    let compact: String = text.chars().filter(|c| !c.is_ascii_whitespace()).collect();
    if compact.len() % 2 != 0 {
        return Err(format!("odd number of hex digits ({})", compact.len()));
    }
    hex::decode(&compact).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tolerant_hex_strips_whitespace() {
        assert_eq!(from_hex_tolerant("68 04\n07 00 0000").unwrap(), vec![0x68, 0x04, 0x07, 0, 0, 0]);
    }

    #[test]
    fn tolerant_hex_rejects_bad_digits() {
        assert!(from_hex_tolerant("zz").is_err());
        assert!(from_hex_tolerant("abc").is_err());
    }

    #[test]
    fn to_hex_is_lowercase_and_space_free() {
        assert_eq!(to_hex(&[0xAB, 0x00, 0xFF]), "ab00ff");
    }
}
