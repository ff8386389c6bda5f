//! Exact cosine-similarity ranking between a query set and a gallery set.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::embedding::{EmbeddingSet, ItemId, Modality};

#[derive(Debug, Error, PartialEq)]
pub enum RetrievalError {
    #[error("zero vector has no direction")]
    ZeroNorm,
    #[error("zero vector at {side} index {index}")]
    ZeroVector { side: &'static str, index: usize },
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("query set is empty")]
    EmptyQueries,
    #[error("K_max must be at least 1")]
    InvalidK,
    #[error("no {0} items to retrieve with")]
    MissingModality(Modality),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    ImageToText,
    TextToImage,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::ImageToText, Direction::TextToImage];

    pub fn source(self) -> Modality {
        match self {
            Direction::ImageToText => Modality::Image,
            Direction::TextToImage => Modality::Text,
        }
    }

    pub fn target(self) -> Modality {
        match self {
            Direction::ImageToText => Modality::Text,
            Direction::TextToImage => Modality::Image,
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Direction::ImageToText => "i2t",
            Direction::TextToImage => "t2i",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Direction::ImageToText => "Image-to-Text",
            Direction::TextToImage => "Text-to-Image",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

impl FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "i2t" => Ok(Direction::ImageToText),
            "t2i" => Ok(Direction::TextToImage),
            other => Err(format!("unknown direction `{other}` (i2t, t2i)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedEntry {
    pub gallery_id: ItemId,
    pub similarity: f64,
}

/// Gallery items for one query, most similar first.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: ItemId,
    pub entries: Vec<RankedEntry>,
}

pub fn cosine(x: &[f64], y: &[f64]) -> Result<f64, RetrievalError> {
    if x.len() != y.len() {
        return Err(RetrievalError::DimensionMismatch(x.len(), y.len()));
    }
    let (mut dot, mut xx, mut yy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        dot += a * b;
        xx += a * a;
        yy += b * b;
    }
    if xx == 0.0 || yy == 0.0 {
        return Err(RetrievalError::ZeroNorm);
    }
    Ok(dot / (xx.sqrt() * yy.sqrt()))
}

/// Dense row-major `queries × gallery` matrix of cosine similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

const BLOCK: usize = 64;

fn normalized_rows(set: &EmbeddingSet, side: &'static str) -> Result<Vec<f64>, RetrievalError> {
    let mut out = Vec::with_capacity(set.len() * set.dim());
    for (index, r) in set.records().iter().enumerate() {
        let norm = r
            .vector
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 {
            return Err(RetrievalError::ZeroVector { side, index });
        }
        out.extend(r.vector.iter().map(|&v| v as f64 / norm));
    }
    Ok(out)
}

/// All query/gallery cosines, as tiled inner products of unit-normalized rows.
pub fn similarity_matrix(
    queries: &EmbeddingSet,
    gallery: &EmbeddingSet,
) -> Result<SimilarityMatrix, RetrievalError> {
    if queries.dim() != gallery.dim() {
        return Err(RetrievalError::DimensionMismatch(
            queries.dim(),
            gallery.dim(),
        ));
    }
    if queries.is_empty() {
        return Err(RetrievalError::EmptyQueries);
    }
    if gallery.is_empty() {
        return Err(RetrievalError::EmptyGallery);
    }
    let d = queries.dim();
    let q = normalized_rows(queries, "query")?;
    let g = normalized_rows(gallery, "gallery")?;
    let (rows, cols) = (queries.len(), gallery.len());
    let mut data = vec![0.0; rows * cols];
    data.par_chunks_mut(BLOCK * cols)
        .enumerate()
        .for_each(|(bi, out)| {
            let i0 = bi * BLOCK;
            let bh = out.len() / cols;
            for j0 in (0..cols).step_by(BLOCK) {
                let j1 = (j0 + BLOCK).min(cols);
                for ii in 0..bh {
                    let qi = &q[(i0 + ii) * d..(i0 + ii + 1) * d];
                    let dst = &mut out[ii * cols..(ii + 1) * cols];
                    for (j, slot) in (j0..j1).zip(&mut dst[j0..j1]) {
                        let gj = &g[j * d..(j + 1) * d];
                        *slot = qi.iter().zip(gj).map(|(a, b)| a * b).sum();
                    }
                }
            }
        });
    Ok(SimilarityMatrix { rows, cols, data })
}

fn by_score(a: &RankedEntry, b: &RankedEntry) -> Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then_with(|| a.gallery_id.cmp(&b.gallery_id))
}

/// Top `k_max` gallery items per query, by descending similarity with ties
/// broken by ascending gallery id. A gallery item sharing the query's id is skipped.
pub fn rank(
    queries: &EmbeddingSet,
    gallery: &EmbeddingSet,
    k_max: usize,
) -> Result<Vec<RankedList>, RetrievalError> {
    if k_max == 0 {
        return Err(RetrievalError::InvalidK);
    }
    let sims = similarity_matrix(queries, gallery)?;
    let lists = queries
        .records()
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            let mut entries: Vec<RankedEntry> = gallery
                .records()
                .iter()
                .zip(sims.row(i))
                .filter(|(g, _)| g.id != q.id)
                .map(|(g, &s)| RankedEntry {
                    gallery_id: g.id,
                    similarity: s,
                })
                .collect();
            let k = k_max.min(entries.len());
            if k < entries.len() {
                entries.select_nth_unstable_by(k, by_score);
                entries.truncate(k);
            }
            entries.sort_by(by_score);
            RankedList {
                query_id: q.id,
                entries,
            }
        })
        .collect();
    Ok(lists)
}

/// Splits `set` by modality and ranks source-modality queries against the target-modality gallery.
pub fn retrieve(
    direction: Direction,
    set: &EmbeddingSet,
    k_max: usize,
) -> Result<Vec<RankedList>, RetrievalError> {
    let (images, texts) = set.split_by_modality();
    let (queries, gallery) = match direction {
        Direction::ImageToText => (images, texts),
        Direction::TextToImage => (texts, images),
    };
    if queries.is_empty() {
        return Err(RetrievalError::MissingModality(direction.source()));
    }
    if gallery.is_empty() {
        return Err(RetrievalError::MissingModality(direction.target()));
    }
    rank(&queries, &gallery, k_max)
}

/// `query_id\trank\tgallery_id\tsimilarity` rows, ranks starting at 1.
pub fn ranked_to_tsv(lists: &[RankedList]) -> String {
    let mut out = String::from("query_id\trank\tgallery_id\tsimilarity\n");
    for l in lists {
        for (r, e) in l.entries.iter().enumerate() {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.9}\n",
                l.query_id,
                r + 1,
                e.gallery_id,
                e.similarity
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::EmbeddingRecord;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set_of(modality: Modality, first_id: u64, vectors: Vec<Vec<f32>>) -> EmbeddingSet {
        let dim = vectors[0].len();
        let records = vectors
            .into_iter()
            .enumerate()
            .map(|(k, vector)| EmbeddingRecord {
                id: ItemId(first_id + k as u64),
                class_id: k as u32,
                modality,
                vector,
            })
            .collect();
        EmbeddingSet::new(dim, records).unwrap()
    }

    fn random_vectors(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f32>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn cosine_reference_values() {
        assert!((cosine(&[0.3, -2.0], &[0.3, -2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), -1.0);
        assert_eq!(
            cosine(&[0.0, 0.0], &[1.0, 0.0]),
            Err(RetrievalError::ZeroNorm)
        );
        assert!(matches!(
            cosine(&[1.0], &[1.0, 0.0]),
            Err(RetrievalError::DimensionMismatch(1, 2))
        ));
    }

    #[test]
    fn matrix_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let q = set_of(Modality::Image, 0, random_vectors(&mut rng, 20, 7));
        let g = set_of(Modality::Text, 100, random_vectors(&mut rng, 30, 7));
        let m = similarity_matrix(&q, &g).unwrap();
        for (i, a) in q.records().iter().enumerate() {
            for (j, b) in g.records().iter().enumerate() {
                let x: Vec<f64> = a.vector.iter().map(|&v| v as f64).collect();
                let y: Vec<f64> = b.vector.iter().map(|&v| v as f64).collect();
                assert!((m.get(i, j) - cosine(&x, &y).unwrap()).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn matrix_spanning_several_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let vs = random_vectors(&mut rng, 150, 5);
        let q = set_of(Modality::Image, 0, vs);
        let m = similarity_matrix(&q, &q).unwrap();
        for i in 0..150 {
            assert!((m.get(i, i) - 1.0).abs() < 1e-12);
        }
        let one = set_of(Modality::Image, 0, vec![vec![1.0, 2.0]]);
        let other = set_of(Modality::Text, 1, vec![vec![2.0, 1.0]]);
        let m = similarity_matrix(&one, &other).unwrap();
        assert_eq!((m.rows(), m.cols()), (1, 1));
        assert!((m.get(0, 0) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn zero_vector_is_located() {
        let q = set_of(Modality::Image, 0, vec![vec![1.0, 0.0], vec![0.0, 0.0]]);
        let g = set_of(Modality::Text, 10, vec![vec![1.0, 1.0]]);
        assert_eq!(
            similarity_matrix(&q, &g),
            Err(RetrievalError::ZeroVector {
                side: "query",
                index: 1
            })
        );
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let q = set_of(Modality::Image, 0, vec![vec![1.0, 0.0]]);
        let g = set_of(
            Modality::Text,
            5,
            vec![vec![1.0, 1.0], vec![1.0, -1.0], vec![1.0, 1.0]],
        );
        let lists = rank(&q, &g, 10).unwrap();
        let ids: Vec<u64> = lists[0].entries.iter().map(|e| e.gallery_id.0).collect();
        assert_eq!(ids, vec![5, 6, 7]);
        let one = set_of(Modality::Text, 5, vec![vec![0.0, 1.0]]);
        assert_eq!(rank(&q, &one, 3).unwrap()[0].entries.len(), 1);
        assert_eq!(rank(&q, &g, 0), Err(RetrievalError::InvalidK));
    }

    #[test]
    fn retrieve_counts_and_transposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut records = vec![EmbeddingRecord {
            id: ItemId(0),
            class_id: 0,
            modality: Modality::Image,
            vector: random_vectors(&mut rng, 1, 4).remove(0),
        }];
        for (k, vector) in random_vectors(&mut rng, 5, 4).into_iter().enumerate() {
            records.push(EmbeddingRecord {
                id: ItemId(k as u64 + 1),
                class_id: 0,
                modality: Modality::Text,
                vector,
            });
        }
        let set = EmbeddingSet::new(4, records).unwrap();
        let i2t = retrieve(Direction::ImageToText, &set, 3).unwrap();
        assert_eq!(i2t.len(), 1);
        assert_eq!(i2t[0].entries.len(), 3);
        let t2i = retrieve(Direction::TextToImage, &set, 10).unwrap();
        assert_eq!(t2i.len(), 5);
        assert!(t2i.iter().all(|l| l.entries.len() == 1));

        let (images, texts) = set.split_by_modality();
        let a = similarity_matrix(&images, &texts).unwrap();
        let b = similarity_matrix(&texts, &images).unwrap();
        for i in 0..a.rows() {
            for j in 0..a.cols() {
                assert!((a.get(i, j) - b.get(j, i)).abs() < 1e-15);
            }
        }
        let (images_only, _) = set.split_by_modality();
        assert_eq!(
            retrieve(Direction::ImageToText, &images_only, 1),
            Err(RetrievalError::MissingModality(Modality::Text))
        );
    }

    #[test]
    fn tsv_export() {
        let lists = vec![RankedList {
            query_id: ItemId(3),
            entries: vec![RankedEntry {
                gallery_id: ItemId(9),
                similarity: 0.5,
            }],
        }];
        assert_eq!(
            ranked_to_tsv(&lists),
            "query_id\trank\tgallery_id\tsimilarity\n3\t1\t9\t0.500000000\n"
        );
    }

    proptest! {
        #[test]
        fn top_k_equals_full_stable_sort(seed in 0u64..1000, n in 1usize..40, k in 1usize..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // coarse values force plenty of exact ties
            let gallery: Vec<Vec<f32>> = (0..n).map(|_| (0..3).map(|_| rng.gen_range(-2..3) as f32).map(|v| if v == 0.0 { 1.0 } else { v }).collect()).collect();
            let q = set_of(Modality::Image, 1000, vec![vec![1.0, 0.5, -1.0]]);
            let g = set_of(Modality::Text, 0, gallery);
            let got = rank(&q, &g, k).unwrap().remove(0);
            let sims = similarity_matrix(&q, &g).unwrap();
            let mut all: Vec<(f64, u64)> = (0..n).map(|j| (sims.get(0, j), j as u64)).collect();
            all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let want: Vec<u64> = all.iter().take(k).map(|e| e.1).collect();
            let have: Vec<u64> = got.entries.iter().map(|e| e.gallery_id.0).collect();
            prop_assert_eq!(have, want);
        }

        #[test]
        fn ranking_invariant_under_positive_rescaling(seed in 0u64..1000, scales in proptest::collection::vec(0.1f32..10.0, 12)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vs = random_vectors(&mut rng, 12, 6);
            let q = set_of(Modality::Image, 100, vec![vec![0.5, -0.2, 0.1, 0.9, -0.3, 0.0]]);
            let g = set_of(Modality::Text, 0, vs.clone());
            let scaled: Vec<Vec<f32>> = vs.iter().zip(&scales).map(|(v, s)| v.iter().map(|x| x * s).collect()).collect();
            let g2 = set_of(Modality::Text, 0, scaled);
            let a = rank(&q, &g, 12).unwrap().remove(0);
            let b = rank(&q, &g2, 12).unwrap().remove(0);
            for (x, y) in a.entries.iter().zip(&b.entries) {
                prop_assert!((x.similarity - y.similarity).abs() < 1e-6);
            }
            let x: Vec<f64> = vs[0].iter().map(|&v| v as f64).collect();
            let qv = [0.5, -0.2, 0.1, 0.9, -0.3, 0.0];
            let c1 = cosine(&qv, &x).unwrap();
            let xs: Vec<f64> = x.iter().map(|v| v * 3.7).collect();
            let qs: Vec<f64> = qv.iter().map(|v| v * 0.2).collect();
            prop_assert!((cosine(&qs, &xs).unwrap() - c1).abs() < 1e-10);
        }
    }
}
