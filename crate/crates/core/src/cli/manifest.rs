//! Dataset manifests: `id\tclass\tmodality\tpath-or-tokens`, one header line.
//! Image rows hold a PPM path relative to the manifest; text rows hold the
//! description itself.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::embedding::{ItemId, Modality};

pub const MANIFEST_HEADER: &str = "id\tclass\tmodality\tpath-or-tokens";

#[derive(Debug, Error, PartialEq)]
pub enum ManifestError {
    #[error("{path}: {reason}")]
    Read { path: String, reason: String },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    ImagePath(PathBuf),
    Text(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub id: ItemId,
    pub class_id: u32,
    pub payload: Payload,
}

impl ManifestRow {
    pub fn modality(&self) -> Modality {
        match self.payload {
            Payload::ImagePath(_) => Modality::Image,
            Payload::Text(_) => Modality::Text,
        }
    }
}

/// Parses manifest text; image paths are joined onto `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestRow>, ManifestError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r') == MANIFEST_HEADER => {}
        _ => {
            return Err(ManifestError::Malformed {
                line: 1,
                reason: format!("expected header `{}`", MANIFEST_HEADER.replace('\t', "\\t")),
            })
        }
    }
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in lines {
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let bad = |reason: String| ManifestError::Malformed {
            line: i + 1,
            reason,
        };
        let f: Vec<&str> = line.splitn(4, '\t').collect();
        if f.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", f.len())));
        }
        let id = ItemId(
            f[0].parse()
                .map_err(|_| bad(format!("bad id `{}`", f[0])))?,
        );
        if !seen.insert(id) {
            return Err(bad(format!("duplicate id {id}")));
        }
        let class_id = f[1]
            .parse()
            .map_err(|_| bad(format!("bad class `{}`", f[1])))?;
        let modality: Modality = f[2]
            .parse()
            .map_err(|_| bad(format!("bad modality `{}`", f[2])))?;
        let payload = match modality {
            Modality::Image => Payload::ImagePath(base.join(f[3])),
            Modality::Text => Payload::Text(f[3].to_string()),
        };
        rows.push(ManifestRow {
            id,
            class_id,
            payload,
        });
    }
    Ok(rows)
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRow>, ManifestError> {
    let text = std::fs::read_to_string(path).map_err(|e| ManifestError::Read {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    parse_manifest(&text, path.parent().unwrap_or_else(|| Path::new("")))
}

/// Renders rows; image paths are written as given.
pub fn manifest_to_text(rows: &[(ItemId, u32, Modality, String)]) -> String {
    let mut out = format!("{MANIFEST_HEADER}\n");
    for (id, class_id, modality, payload) in rows {
        out.push_str(&format!("{id}\t{class_id}\t{modality}\t{payload}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let rows = vec![
            (ItemId(0), 3, Modality::Image, "img/0.ppm".to_string()),
            (ItemId(1), 3, Modality::Text, "a red bus".to_string()),
        ];
        let text = manifest_to_text(&rows);
        let parsed = parse_manifest(&text, Path::new("/d")).unwrap();
        assert_eq!(
            parsed[0].payload,
            Payload::ImagePath(PathBuf::from("/d/img/0.ppm"))
        );
        assert_eq!(parsed[1].payload, Payload::Text("a red bus".into()));
        assert_eq!(parsed[1].modality(), Modality::Text);
        assert_eq!(parsed[1].class_id, 3);
    }

    #[test]
    fn rejects_malformed() {
        assert!(parse_manifest("", Path::new(".")).is_err());
        let h = format!("{MANIFEST_HEADER}\n");
        assert!(matches!(
            parse_manifest(&format!("{h}1\t2\ttext\n"), Path::new(".")),
            Err(ManifestError::Malformed { line: 2, .. })
        ));
        assert!(parse_manifest(&format!("{h}1\t2\taudio\tx\n"), Path::new(".")).is_err());
        assert!(parse_manifest(
            &format!("{h}1\t2\ttext\tx\n1\t2\ttext\ty\n"),
            Path::new(".")
        )
        .is_err());
        assert_eq!(parse_manifest(&h, Path::new(".")).unwrap(), vec![]);
    }
}
