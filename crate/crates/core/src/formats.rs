//! Shared line-delimited file helpers: the metadata header line embedded
//! in every JSONL output and generic readers/writers.
//!
//! Every JSONL file this project writes starts with a single
//! `{"_meta": {...}}` line carrying the tool version, the run seed, and a
//! digest of the effective configuration. Parsers skip it.

use std::io::{BufRead, Write};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Provenance header written as the first line of JSONL outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileMeta {
    pub tool: String,
    pub version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub config_digest: String,
}

impl FileMeta {
    pub fn new(seed: Option<u64>, config_digest: impl Into<String>) -> Self {
        FileMeta {
            tool: "ctp".to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config_digest: config_digest.into(),
        }
    }

    /// The full `{"_meta": ...}` line (without trailing newline).
    pub fn to_line(&self) -> String {
        #[derive(Serialize)]
        struct MetaLine<'a> {
            _meta: &'a FileMeta,
        }
        serde_json::to_string(&MetaLine { _meta: self }).expect("meta serializes")
    }
}

/// Hex SHA-256 of a serializable configuration, used to stamp outputs.
pub fn config_digest<T: Serialize>(config: &T) -> String {
    let serialized = serde_json::to_vec(config).expect("config serializes");
    let digest = Sha256::digest(&serialized);
    digest.iter().map(|byte| format!("{byte:02x}")).collect()
}

/// True when a line is a metadata header.
pub fn is_meta_line(line: &str) -> bool {
    serde_json::from_str::<serde_json::Value>(line.trim())
        .ok()
        .as_ref()
        .and_then(|value| value.as_object())
        .is_some_and(|object| object.contains_key("_meta"))
}

/// Write a metadata line followed by one JSON object per item.
pub fn write_jsonl<W: Write, T: Serialize>(
    mut writer: W,
    meta: &FileMeta,
    items: impl IntoIterator<Item = T>,
) -> std::io::Result<()> {
    writeln!(writer, "{}", meta.to_line())?;
    for item in items {
        serde_json::to_writer(&mut writer, &item)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Read every non-meta, non-empty line as `T`. The first malformed line
/// aborts with its line number.
pub fn read_jsonl<R: BufRead, T: DeserializeOwned>(
    reader: R,
) -> Result<Vec<T>, (usize, serde_json::Error)> {
    let mut items = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let line = match line {
            Ok(line) => line,
            Err(e) => return Err((index + 1, serde_json::Error::io(e))),
        };
        let text = line.trim();
        if text.is_empty() || is_meta_line(text) {
            continue;
        }
        match serde_json::from_str(text) {
            Ok(item) => items.push(item),
            Err(e) => return Err((index + 1, e)),
        }
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn meta_line_round_trips_and_is_skipped() {
        let meta = FileMeta::new(Some(7), "abc123");
        let line = meta.to_line();
        assert!(is_meta_line(&line));
        assert!(!is_meta_line(r#"{"nct_id":"NCT1"}"#));

        let mut buffer = Vec::new();
        write_jsonl(&mut buffer, &meta, [serde_json::json!({"x": 1})]).unwrap();
        let items: Vec<serde_json::Value> = read_jsonl(&buffer[..]).unwrap();
        assert_eq!(items, vec![serde_json::json!({"x": 1})]);
    }

    #[test]
    fn config_digest_is_stable_and_input_sensitive() {
        let a = config_digest(&serde_json::json!({"seed": 7}));
        let b = config_digest(&serde_json::json!({"seed": 7}));
        let c = config_digest(&serde_json::json!({"seed": 8}));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn malformed_lines_report_their_number() {
        let data = b"{\"x\":1}\nnot json\n";
        let err = read_jsonl::<_, serde_json::Value>(&data[..]).unwrap_err();
        assert_eq!(err.0, 2);
    }
}
