use std::path::Path;

use indexmap::IndexMap;

use super::EncodeError;
use crate::io::write_atomic;

#[derive(Debug, Clone, PartialEq)]
pub struct WordVector {
    pub word: String,
    pub vector: Vec<f32>,
}

/// Pretrained word vectors of one fixed dimension, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    dim: usize,
    entries: IndexMap<String, Vec<f32>>,
}

impl Vocabulary {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, word: impl Into<String>, vector: Vec<f32>) -> Result<(), EncodeError> {
        let word = word.into();
        if vector.len() != self.dim {
            return Err(EncodeError::Vocabulary(format!(
                "`{word}` has {} components, vocabulary dimension is {}",
                vector.len(),
                self.dim
            )));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(EncodeError::Vocabulary(format!(
                "`{word}` has a non-finite component"
            )));
        }
        if self.entries.contains_key(&word) {
            return Err(EncodeError::Vocabulary(format!("duplicate token `{word}`")));
        }
        self.entries.insert(word, vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&[f32]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.entries.iter().map(|(w, v)| (w.as_str(), v.as_slice()))
    }

    pub fn word_vector(&self, word: &str) -> Option<WordVector> {
        self.get(word).map(|v| WordVector {
            word: word.to_string(),
            vector: v.to_vec(),
        })
    }

    /// Parses `word v_1 ... v_d` lines, with an optional `<count> <dim>` first line.
    pub fn parse(text: &str) -> Result<Self, EncodeError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim_end()))
            .filter(|(_, l)| !l.is_empty())
            .peekable();
        let mut declared: Option<(usize, usize)> = None;
        if let Some(&(_, first)) = lines.peek() {
            let f: Vec<&str> = first.split_whitespace().collect();
            if f.len() == 2 {
                if let (Ok(count), Ok(dim)) = (f[0].parse::<usize>(), f[1].parse::<usize>()) {
                    declared = Some((count, dim));
                    lines.next();
                }
            }
        }

        let mut vocab: Option<Vocabulary> = declared.map(|(_, d)| Vocabulary::new(d));
        for (line, raw) in lines {
            let mut parts = raw.split_whitespace();
            let word = parts.next().unwrap_or_default();
            let vector = parts
                .map(|p| p.parse::<f32>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| EncodeError::Vocabulary(format!("line {line}: bad number")))?;
            if vector.is_empty() {
                return Err(EncodeError::Vocabulary(format!(
                    "line {line}: no components"
                )));
            }
            let v = vocab.get_or_insert_with(|| Vocabulary::new(vector.len()));
            v.insert(word, vector)
                .map_err(|e| EncodeError::Vocabulary(format!("line {line}: {e}")))?;
        }
        let vocab = vocab.ok_or_else(|| EncodeError::Vocabulary("no word vectors".into()))?;
        if let Some((count, _)) = declared {
            if count != vocab.len() {
                return Err(EncodeError::Vocabulary(format!(
                    "header declares {count} entries, found {}",
                    vocab.len()
                )));
            }
        }
        Ok(vocab)
    }

    /// Serializes with a `<count> <dim>` header line.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.len(), self.dim);
        for (w, v) in self.iter() {
            out.push_str(w);
            for x in v {
                out.push(' ');
                out.push_str(&x.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self, EncodeError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EncodeError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), EncodeError> {
        write_atomic(path, self.to_text().as_bytes())
            .map_err(|e| EncodeError::Io(format!("{}: {e}", path.display())))
    }
}
