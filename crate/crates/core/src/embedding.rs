//! Embedding records, the validated embedding-set container, and the TSV
//! embedding file format.
//!
//! File layout (one header line, then one line per record):
//!
//! ```text
//! XMODAL\t1\t<dim>
//! <id>\t<class_id>\t<image|text>\t<v_1>\t...\t<v_dim>
//! ```
//!
//! Components are written with the shortest decimal form that round-trips an
//! `f32`, which never needs more than 9 significant digits.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::io::write_atomic;

pub const MAGIC: &str = "XMODAL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("line {line}: malformed header: {reason}")]
    Header { line: usize, reason: String },
    #[error("line {line}: expected {expected} components, found {found}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: duplicate item id {id}")]
    DuplicateId { line: usize, id: ItemId },
    #[error("line {line}: non-finite component at position {index}")]
    NonFinite { line: usize, index: usize },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("cannot normalize a zero vector")]
    ZeroNorm,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Identifier of an item, unique within an [`EmbeddingSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ItemId(pub u64);

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "image" => Ok(Modality::Image),
            "text" => Ok(Modality::Text),
            other => Err(format!("unknown modality `{other}`")),
        }
    }
}

/// One item's identity and latent feature vector. Items that form a
/// ground-truth pair group (an image and its captions) share `class_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: ItemId,
    pub class_id: u32,
    pub modality: Modality,
    pub vector: Vec<f32>,
}

/// A validated, ordered collection of embedding records of one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    records: Vec<EmbeddingRecord>,
    class_count: usize,
}

impl EmbeddingSet {
    /// Validates and wraps `records`. Errors carry the 1-based record index
    /// offset by one (the header), so they line up with file line numbers.
    pub fn new(dim: usize, records: Vec<EmbeddingRecord>) -> Result<Self, EmbeddingError> {
        let mut seen = HashSet::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            let line = i + 2;
            if r.vector.len() != dim {
                return Err(EmbeddingError::DimensionMismatch {
                    line,
                    expected: dim,
                    found: r.vector.len(),
                });
            }
            if let Some(index) = r.vector.iter().position(|v| !v.is_finite()) {
                return Err(EmbeddingError::NonFinite { line, index });
            }
            if !seen.insert(r.id) {
                return Err(EmbeddingError::DuplicateId { line, id: r.id });
            }
        }
        let class_count = records
            .iter()
            .map(|r| r.class_id)
            .collect::<BTreeSet<_>>()
            .len();
        Ok(Self {
            dim,
            records,
            class_count,
        })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            records: Vec::new(),
            class_count: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<EmbeddingRecord> {
        self.records
    }

    /// Total number of instances N.
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Number of distinct class ids c.
    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn count_modality(&self, modality: Modality) -> usize {
        self.records
            .iter()
            .filter(|r| r.modality == modality)
            .count()
    }

    pub fn class_map(&self) -> HashMap<ItemId, u32> {
        self.records.iter().map(|r| (r.id, r.class_id)).collect()
    }

    pub fn get(&self, id: ItemId) -> Option<&EmbeddingRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Partitions the set into (image side, text side), preserving order.
    pub fn split_by_modality(&self) -> (EmbeddingSet, EmbeddingSet) {
        let (images, texts): (Vec<_>, Vec<_>) = self
            .records
            .iter()
            .cloned()
            .partition(|r| r.modality == Modality::Image);
        (
            Self::from_valid(self.dim, images),
            Self::from_valid(self.dim, texts),
        )
    }

    // Subsets of a valid set are valid; only the class count needs refreshing.
    fn from_valid(dim: usize, records: Vec<EmbeddingRecord>) -> Self {
        let class_count = records
            .iter()
            .map(|r| r.class_id)
            .collect::<BTreeSet<_>>()
            .len();
        Self {
            dim,
            records,
            class_count,
        }
    }

    /// Serializes to the TSV text format.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("{MAGIC}\t{FORMAT_VERSION}\t{}\n", self.dim);
        for r in &self.records {
            out.push_str(&format!("{}\t{}\t{}", r.id, r.class_id, r.modality));
            for v in &r.vector {
                out.push('\t');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self, EmbeddingError> {
        let mut lines = text.split('\n').enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines.next().ok_or_else(|| EmbeddingError::Header {
            line: 1,
            reason: "empty file".into(),
        })?;
        let dim = parse_header(header)?;

        let mut records = Vec::new();
        let mut ended = false;
        for (line, raw) in lines {
            if raw.is_empty() {
                ended = true;
                continue;
            }
            if ended {
                return Err(EmbeddingError::Malformed {
                    line: line - 1,
                    reason: "blank line inside data".into(),
                });
            }
            records.push(parse_row(line, raw, dim)?);
        }
        // Duplicate ids are reported by the validator with matching line numbers.
        Self::new(dim, records)
    }
}

fn parse_header(header: &str) -> Result<usize, EmbeddingError> {
    let bad = |reason: &str| EmbeddingError::Header {
        line: 1,
        reason: reason.to_string(),
    };
    let fields: Vec<&str> = header.split('\t').collect();
    if fields.len() != 3 {
        return Err(bad("expected `XMODAL\\t<version>\\t<dim>`"));
    }
    if fields[0] != MAGIC {
        return Err(bad("bad magic"));
    }
    match fields[1].parse::<u32>() {
        Ok(FORMAT_VERSION) => {}
        _ => return Err(bad("unsupported version")),
    }
    fields[2].parse::<usize>().map_err(|_| bad("bad dimension"))
}

fn parse_row(line: usize, raw: &str, dim: usize) -> Result<EmbeddingRecord, EmbeddingError> {
    let malformed = |reason: String| EmbeddingError::Malformed { line, reason };
    let fields: Vec<&str> = raw.split('\t').collect();
    if fields.len() < 3 {
        return Err(malformed("expected id, class and modality columns".into()));
    }
    let id = fields[0]
        .parse::<u64>()
        .map_err(|_| malformed(format!("bad id `{}`", fields[0])))?;
    let class_id = fields[1]
        .parse::<u32>()
        .map_err(|_| malformed(format!("bad class id `{}`", fields[1])))?;
    let modality = fields[2].parse::<Modality>().map_err(malformed)?;
    let comps = &fields[3..];
    if comps.len() != dim {
        return Err(EmbeddingError::DimensionMismatch {
            line,
            expected: dim,
            found: comps.len(),
        });
    }
    let mut vector = Vec::with_capacity(dim);
    for (index, c) in comps.iter().enumerate() {
        let v = c
            .parse::<f32>()
            .map_err(|_| malformed(format!("bad component `{c}`")))?;
        if !v.is_finite() {
            return Err(EmbeddingError::NonFinite { line, index });
        }
        vector.push(v);
    }
    Ok(EmbeddingRecord {
        id: ItemId(id),
        class_id,
        modality,
        vector,
    })
}

pub fn load_embedding_set(path: &Path) -> Result<EmbeddingSet, EmbeddingError> {
    let text = std::fs::read_to_string(path).map_err(|source| EmbeddingError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    EmbeddingSet::from_tsv(&text)
}

pub fn save_embedding_set(set: &EmbeddingSet, path: &Path) -> Result<(), EmbeddingError> {
    write_atomic(path, set.to_tsv().as_bytes()).map_err(|source| EmbeddingError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>, EmbeddingError> {
    let norm = l2_norm(v);
    if norm == 0.0 || !norm.is_finite() {
        return Err(EmbeddingError::ZeroNorm);
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: u64, class_id: u32, modality: Modality, vector: Vec<f32>) -> EmbeddingRecord {
        EmbeddingRecord {
            id: ItemId(id),
            class_id,
            modality,
            vector,
        }
    }

    #[test]
    fn two_row_file() {
        let text = "XMODAL\t1\t3\n0\t0\timage\t1\t2\t3\n1\t0\ttext\t0.5\t-1\t0\n";
        let set = EmbeddingSet::from_tsv(text).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.class_count(), 1);
        assert_eq!(set.dim(), 3);
    }

    #[test]
    fn dimension_mismatch_names_line() {
        let mut text = String::from("XMODAL\t1\t3\n");
        for i in 0..3 {
            text.push_str(&format!("{i}\t0\timage\t1\t2\t3\n"));
        }
        text.push_str("3\t0\ttext\t1\t2\t3\t4\n");
        match EmbeddingSet::from_tsv(&text) {
            Err(EmbeddingError::DimensionMismatch {
                line,
                expected,
                found,
            }) => {
                assert_eq!((line, expected, found), (5, 3, 4));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_and_non_finite_rows() {
        let dup = "XMODAL\t1\t1\n7\t0\timage\t1\n7\t1\ttext\t1\n";
        assert!(matches!(
            EmbeddingSet::from_tsv(dup),
            Err(EmbeddingError::DuplicateId { line: 3, .. })
        ));
        let nan = "XMODAL\t1\t2\n0\t0\timage\t1\tNaN\n";
        assert!(matches!(
            EmbeddingSet::from_tsv(nan),
            Err(EmbeddingError::NonFinite { line: 2, index: 1 })
        ));
        assert!(matches!(
            EmbeddingSet::from_tsv("XMODEL\t1\t2\n"),
            Err(EmbeddingError::Header { .. })
        ));
    }

    #[test]
    fn empty_set_is_header_only() {
        assert_eq!(EmbeddingSet::empty(4).to_tsv(), "XMODAL\t1\t4\n");
    }

    #[test]
    fn single_record_row() {
        let set = EmbeddingSet::new(2, vec![rec(0, 0, Modality::Image, vec![1.0, 0.0])]).unwrap();
        let tsv = set.to_tsv();
        assert_eq!(tsv.lines().nth(1), Some("0\t0\timage\t1\t0"));
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let set = EmbeddingSet::new(
            3,
            vec![
                rec(4, 2, Modality::Text, vec![0.1, -2.5e-7, 123456.79]),
                rec(1, 0, Modality::Image, vec![1.0 / 3.0, 0.0, -0.0]),
            ],
        )
        .unwrap();
        let a = dir.path().join("a.tsv");
        let b = dir.path().join("b.tsv");
        save_embedding_set(&set, &a).unwrap();
        let loaded = load_embedding_set(&a).unwrap();
        assert_eq!(loaded, set);
        save_embedding_set(&loaded, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn normalize_cases() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[0.0, 1.0]).unwrap(), vec![0.0, 1.0]);
        assert!(matches!(
            l2_normalize(&[0.0, 0.0]),
            Err(EmbeddingError::ZeroNorm)
        ));
    }

    #[test]
    fn split_counts() {
        let mut records = Vec::new();
        let mut id = 0;
        for class in 0..2 {
            records.push(rec(id, class, Modality::Image, vec![1.0]));
            id += 1;
            for _ in 0..5 {
                records.push(rec(id, class, Modality::Text, vec![1.0]));
                id += 1;
            }
        }
        let set = EmbeddingSet::new(1, records).unwrap();
        let (images, texts) = set.split_by_modality();
        assert_eq!((images.len(), texts.len()), (2, 10));
        assert_eq!(texts.class_count(), 2);

        let all_images = EmbeddingSet::new(1, vec![rec(0, 0, Modality::Image, vec![1.0])]).unwrap();
        let (_, texts) = all_images.split_by_modality();
        assert!(texts.is_empty());
    }
}
