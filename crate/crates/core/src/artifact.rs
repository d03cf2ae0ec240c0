//! Format guards shared by every persisted artifact.

use crate::error::{Error, Result};

pub const VOCAB_FORMAT: &str = "emd-vocab-v1";
pub const LM_FORMAT: &str = "emd-lm-v1";
pub const ENCODER_FORMAT: &str = "emd-enc-v1";
pub const DETECTOR_FORMAT: &str = "emd-detector-v1";
pub const REPORT_FORMAT: &str = "emd-report-v1";

/// JSON artifacts are written with `format` as their first key; reject a file
/// before parsing the body when its leading bytes carry another format.
pub fn check_json_format(bytes: &[u8], expected: &str) -> Result<()> {
    const LEAD: &[u8] = b"{\"format\":\"";
    if !bytes.starts_with(LEAD) {
        return Err(Error::FormatVersion {
            expected: expected.to_string(),
            found: "<not an emd artifact>".to_string(),
        });
    }
    let rest = &bytes[LEAD.len()..];
    let end = rest.iter().take(64).position(|&b| b == b'"').unwrap_or(0);
    let found = String::from_utf8_lossy(&rest[..end]).into_owned();
    if found != expected {
        return Err(Error::FormatVersion {
            expected: expected.to_string(),
            found,
        });
    }
    Ok(())
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn format_guard() {
        assert!(check_json_format(br#"{"format":"emd-vocab-v1","x":1}"#, VOCAB_FORMAT).is_ok());
        let err = check_json_format(br#"{"format":"emd-vocab-v9"}"#, VOCAB_FORMAT).unwrap_err();
        assert!(err.is_compatibility());
        assert!(err.to_string().contains("emd-vocab-v9"));
        assert!(check_json_format(b"garbage", VOCAB_FORMAT).unwrap_err().is_compatibility());
    }
}
