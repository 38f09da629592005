//! JSON Lines manifests: a header object on the first line, then one sample
//! per line.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Manifest, Sample};
use crate::error::{Error, Result};

pub const MANIFEST_FORMAT: &str = "whyprompt-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

pub fn write_manifest(manifest: &Manifest) -> String {
    let header = Header {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for sample in manifest.samples() {
        out.push_str(&serde_json::to_string(sample).expect("sample serializes"));
        out.push('\n');
    }
    out
}

pub fn read_manifest(text: &str) -> Result<Manifest> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| Error::format("manifest is empty"))?;
    let header: Header =
        serde_json::from_str(first).map_err(|e| Error::format(format!("manifest header: {e}")))?;
    if header.format != MANIFEST_FORMAT {
        return Err(Error::format(format!("unexpected manifest format {:?}", header.format)));
    }
    if header.version != MANIFEST_VERSION {
        return Err(Error::format(format!("unsupported manifest version {}", header.version)));
    }
    let samples = lines
        .map(|(n, line)| {
            serde_json::from_str::<Sample>(line).map_err(|e| Error::format(format!("manifest line {}: {e}", n + 1)))
        })
        .collect::<Result<Vec<_>>>()?;
    Manifest::from_samples(samples).map_err(|e| Error::format(e.to_string()))
}

pub fn write_manifest_file(manifest: &Manifest, path: &Path) -> Result<()> {
    fs::write(path, write_manifest(manifest)).map_err(|e| Error::io(path, e))
}

pub fn read_manifest_file(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_manifest(&text).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::test_support::sample;
    use crate::dataset::{split_manifest, SubRationale};

    #[test]
    fn header_and_keys() {
        let mut s = sample("dog", "four legs", 7);
        s.sub_rationale = Some(SubRationale::new("furry").unwrap());
        let m = split_manifest(&Manifest::from_samples(vec![s, sample("cat", "fur", 2)]).unwrap(), 0.8, 1).unwrap();
        let text = write_manifest(&m);
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), r#"{"format":"whyprompt-manifest","version":1}"#);
        let first: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
        let keys: Vec<&str> = first.as_object().unwrap().keys().map(String::as_str).collect();
        let mut expected = vec!["id", "image_ref", "category", "rationale", "sub_rationale", "split", "source_query", "content_hash"];
        expected.sort();
        let mut keys_sorted = keys.clone();
        keys_sorted.sort();
        assert_eq!(keys_sorted, expected);
        assert_eq!(first["category"], "cat");
        assert_eq!(first["sub_rationale"], serde_json::Value::Null);
        assert_eq!(first["split"], "train");
        assert_eq!(read_manifest(&text).unwrap(), m);
    }

    #[test]
    fn rejects_bad_headers_and_lines() {
        assert!(read_manifest("").is_err());
        assert!(read_manifest(r#"{"format":"other","version":1}"#).is_err());
        assert!(read_manifest(r#"{"format":"whyprompt-manifest","version":2}"#).is_err());
        let bad = format!("{}\nnot json\n", r#"{"format":"whyprompt-manifest","version":1}"#);
        assert!(matches!(read_manifest(&bad), Err(Error::Format(m)) if m.contains("line 2")));
        let empty_category = format!(
            "{}\n{}\n",
            r#"{"format":"whyprompt-manifest","version":1}"#,
            r#"{"id":"x","image_ref":"a","category":" ","rationale":"r","sub_rationale":null,"split":null,"source_query":"q","content_hash":"00"}"#
        );
        assert!(read_manifest(&empty_category).is_err());
    }
}
