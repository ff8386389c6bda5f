//! Synthetic cross-modal datasets with known semantics.
//!
//! Every class owns a concept vector. Classes are grouped into disjoint
//! pairs, and a fraction `overlap_rho` of the pairs share one concept, so
//! their items are interchangeable in meaning while carrying different
//! labels. All other concepts are mutually orthonormal.
//!
//! Images are a grid of colored cells driven by a fixed random projection
//! of the (noisy) concept. Texts are token lists drawn from a block of the
//! vocabulary whose word vectors are a second projection of the concept.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::{IteratorRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::embedding::{EmbeddingSet, ItemId, Modality};
use crate::encoder::{encode_description, Canvas, EncodeError, EncoderConfig, Vocabulary};
use crate::io::derive_seed;
use crate::metrics::{query_hit, query_semantic_map, query_semantic_map_excluding, MetricError};
use crate::model::{embed_dataset, train, EmbedItem, ModelError, TrainConfig, TrainItem, TrainLog};
use crate::retrieval::{retrieve, Direction, RankedList};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth configuration: {0}")]
    Config(String),
    #[error("vocabulary group {group} has {have} words, {need} needed per text")]
    VocabularyTooSmall {
        group: usize,
        have: usize,
        need: usize,
    },
    #[error("unknown class {0}")]
    UnknownClass(u32),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub images_per_class: usize,
    pub texts_per_class: usize,
    pub test_images_per_class: usize,
    pub test_texts_per_class: usize,
    pub concept_dim: usize,
    pub noise_sigma: f64,
    pub overlap_rho: f64,
    pub vocab_size: usize,
    pub words_per_text: usize,
    pub word_dim: usize,
    /// Side of the square image canvases.
    pub canvas_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 20,
            images_per_class: 5,
            texts_per_class: 5,
            test_images_per_class: 1,
            test_texts_per_class: 5,
            concept_dim: 32,
            noise_sigma: 0.05,
            overlap_rho: 0.0,
            vocab_size: 400,
            words_per_text: 8,
            word_dim: 15,
            canvas_size: 256,
            seed: 0,
        }
    }
}

const GRID: usize = 4;
const WORD_NOISE: f64 = 0.1;

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.into()));
        if !(0.0..=1.0).contains(&self.overlap_rho) {
            return bad("overlap_rho must lie in [0, 1]");
        }
        if self.classes == 0 || self.images_per_class == 0 || self.texts_per_class == 0 {
            return bad("classes and per-class counts must be positive");
        }
        if self.concept_dim == 0 || self.word_dim == 0 || self.words_per_text == 0 {
            return bad("dimensions and words_per_text must be positive");
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad("noise_sigma must be non-negative");
        }
        if self.canvas_size < GRID || !self.canvas_size.is_multiple_of(GRID) {
            return bad("canvas_size must be a positive multiple of 4");
        }
        let distinct = self.classes - self.overlapped_pairs();
        if self.concept_dim < distinct {
            return Err(SynthError::Config(format!(
                "concept_dim {} cannot hold {distinct} orthogonal concepts",
                self.concept_dim
            )));
        }
        let have = self.vocab_size / distinct;
        if have < self.words_per_text {
            return Err(SynthError::VocabularyTooSmall {
                group: distinct - 1,
                have,
                need: self.words_per_text,
            });
        }
        Ok(())
    }

    /// Number of class pairs sharing a concept.
    pub fn overlapped_pairs(&self) -> usize {
        ((self.classes / 2) as f64 * self.overlap_rho).round() as usize
    }
}

/// Class-by-class similarity of the underlying concepts.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticOracle {
    classes: usize,
    sim: Vec<f64>,
}

impl SemanticOracle {
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, a: u32, b: u32) -> Result<f64, SynthError> {
        for c in [a, b] {
            if c as usize >= self.classes {
                return Err(SynthError::UnknownClass(c));
            }
        }
        Ok(self.sim[a as usize * self.classes + b as usize])
    }
}

pub fn oracle_similarity(
    oracle: &SemanticOracle,
    class_a: u32,
    class_b: u32,
) -> Result<f64, SynthError> {
    oracle.get(class_a, class_b)
}

#[derive(Debug, Clone, PartialEq)]
pub enum SynthContent {
    Image(Canvas),
    Text(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthItem {
    pub id: ItemId,
    pub class_id: u32,
    pub content: SynthContent,
}

impl SynthItem {
    pub fn modality(&self) -> Modality {
        match self.content {
            SynthContent::Image(_) => Modality::Image,
            SynthContent::Text(_) => Modality::Text,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub train: Vec<SynthItem>,
    pub test: Vec<SynthItem>,
    pub vocabulary: Vocabulary,
    pub oracle: SemanticOracle,
    /// Classes whose concept is shared with another class.
    pub overlapped: BTreeSet<u32>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn orthonormal(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian(rng, dim);
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

fn project(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn to_byte(v: f64) -> u8 {
    (((v.tanh() + 1.0) / 2.0) * 255.0).round() as u8
}

fn render_image(
    concept: &[f64],
    projection: &[Vec<f64>],
    sigma: f64,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Canvas {
    let noisy: Vec<f64> = concept
        .iter()
        .map(|&c| c + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let colors = project(projection, &noisy);
    let cell = size / GRID;
    let mut canvas = Canvas::new(size, size);
    for gy in 0..GRID {
        for gx in 0..GRID {
            let base = (gy * GRID + gx) * 3;
            let rgb = [
                to_byte(colors[base]),
                to_byte(colors[base + 1]),
                to_byte(colors[base + 2]),
            ];
            for y in gy * cell..(gy + 1) * cell {
                for x in gx * cell..(gx + 1) * cell {
                    canvas.set_pixel(y, x, rgb);
                }
            }
        }
    }
    canvas
}

fn word_name(w: usize) -> String {
    format!("w{w:04}")
}

/// Builds the dataset. Identical configurations give identical datasets.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "synth-concepts"));

    // concept index per class: twins of an overlapped pair share one
    let mut pairs: Vec<usize> = (0..cfg.classes / 2).collect();
    pairs.shuffle(&mut rng);
    let shared: BTreeSet<usize> = pairs[..cfg.overlapped_pairs()].iter().copied().collect();
    let mut concept_of = Vec::with_capacity(cfg.classes);
    let mut overlapped = BTreeSet::new();
    let mut next = 0;
    for c in 0..cfg.classes {
        let pair = c / 2;
        if c % 2 == 1 && shared.contains(&pair) {
            concept_of.push(concept_of[c - 1]);
            overlapped.insert(c as u32 - 1);
            overlapped.insert(c as u32);
        } else {
            concept_of.push(next);
            next += 1;
        }
    }
    let distinct = next;
    let concepts = orthonormal(&mut rng, distinct, cfg.concept_dim);
    let image_proj: Vec<Vec<f64>> = (0..GRID * GRID * 3)
        .map(|_| gaussian(&mut rng, cfg.concept_dim))
        .collect();
    let word_proj: Vec<Vec<f64>> = (0..cfg.word_dim)
        .map(|_| gaussian(&mut rng, cfg.concept_dim))
        .collect();

    // word w belongs to concept group w % distinct
    let mut vocab_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "synth-vocabulary"));
    let mut vocabulary = Vocabulary::new(cfg.word_dim);
    let mut groups: Vec<Vec<String>> = vec![Vec::new(); distinct];
    for w in 0..cfg.vocab_size {
        let g = w % distinct;
        let base = project(&word_proj, &concepts[g]);
        let vector: Vec<f32> = base
            .iter()
            .map(|b| {
                (b.tanh() + WORD_NOISE * vocab_rng.sample::<f64, _>(StandardNormal))
                    .clamp(-1.0, 1.0) as f32
            })
            .collect();
        vocabulary.insert(word_name(w), vector)?;
        groups[g].push(word_name(w));
    }

    let mut oracle = vec![0.0; cfg.classes * cfg.classes];
    for a in 0..cfg.classes {
        for b in 0..cfg.classes {
            let ca = &concepts[concept_of[a]];
            let cb = &concepts[concept_of[b]];
            let mut s: f64 = ca.iter().zip(cb).map(|(x, y)| x * y).sum();
            if (s - 1.0).abs() < 1e-12 {
                s = 1.0;
            } else if s.abs() < 1e-12 {
                s = 0.0;
            }
            oracle[a * cfg.classes + b] = s;
        }
    }

    let per_class: Vec<(Vec<SynthContent>, Vec<SynthContent>)> = (0..cfg.classes)
        .into_par_iter()
        .map(|c| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("synth-class-{c}")));
            let concept = &concepts[concept_of[c]];
            let words = &groups[concept_of[c]];
            let mut make = |images: usize, texts: usize| {
                let mut out = Vec::with_capacity(images + texts);
                for _ in 0..images {
                    out.push(SynthContent::Image(render_image(
                        concept,
                        &image_proj,
                        cfg.noise_sigma,
                        cfg.canvas_size,
                        &mut rng,
                    )));
                }
                for _ in 0..texts {
                    let mut tokens: Vec<String> = words
                        .iter()
                        .cloned()
                        .choose_multiple(&mut rng, cfg.words_per_text);
                    tokens.shuffle(&mut rng);
                    out.push(SynthContent::Text(tokens));
                }
                out
            };
            let train = make(cfg.images_per_class, cfg.texts_per_class);
            let test = make(cfg.test_images_per_class, cfg.test_texts_per_class);
            (train, test)
        })
        .collect();

    let mut next_id = 0u64;
    let mut number = |contents: Vec<SynthContent>, class_id: usize, out: &mut Vec<SynthItem>| {
        for content in contents {
            out.push(SynthItem {
                id: ItemId(next_id),
                class_id: class_id as u32,
                content,
            });
            next_id += 1;
        }
    };
    let mut train_items = Vec::new();
    let mut test_items = Vec::new();
    let (train_parts, test_parts): (Vec<_>, Vec<_>) = per_class.into_iter().unzip();
    for (c, contents) in train_parts.into_iter().enumerate() {
        number(contents, c, &mut train_items);
    }
    for (c, contents) in test_parts.into_iter().enumerate() {
        number(contents, c, &mut test_items);
    }

    Ok(SynthDataset {
        train: train_items,
        test: test_items,
        vocabulary,
        oracle: SemanticOracle {
            classes: cfg.classes,
            sim: oracle,
        },
        overlapped,
    })
}

impl SynthDataset {
    /// Renders text items with the encoder; image canvases pass through.
    pub fn canvases(
        &self,
        items: &[SynthItem],
        enc: &EncoderConfig,
    ) -> Result<Vec<Canvas>, SynthError> {
        items
            .par_iter()
            .map(|it| match &it.content {
                SynthContent::Image(c) => Ok(c.clone()),
                SynthContent::Text(tokens) => {
                    Ok(encode_description(tokens, &self.vocabulary, enc)?.image)
                }
            })
            .collect()
    }

    pub fn train_items(&self, enc: &EncoderConfig) -> Result<Vec<TrainItem>, SynthError> {
        let canvases = self.canvases(&self.train, enc)?;
        Ok(self
            .train
            .iter()
            .zip(canvases)
            .map(|(it, canvas)| TrainItem {
                canvas,
                class_id: it.class_id,
                modality: it.modality(),
            })
            .collect())
    }

    pub fn embed_items(
        &self,
        items: &[SynthItem],
        enc: &EncoderConfig,
    ) -> Result<Vec<EmbedItem>, SynthError> {
        let canvases = self.canvases(items, enc)?;
        Ok(items
            .iter()
            .zip(canvases)
            .map(|(it, canvas)| EmbedItem {
                id: it.id,
                class_id: it.class_id,
                modality: it.modality(),
                canvas,
            })
            .collect())
    }
}

/// Trains on the training split and embeds the held-out split.
pub fn train_and_embed(
    data: &SynthDataset,
    train_cfg: &TrainConfig,
    enc: &EncoderConfig,
) -> Result<(EmbeddingSet, TrainLog), SynthError> {
    let (params, log) = train(&data.train_items(enc)?, train_cfg)?;
    let mut test = data.embed_items(&data.test, enc)?;
    for it in &mut test {
        it.canvas = train_cfg.augmentation.inference_transform(&it.canvas)?;
    }
    Ok((embed_dataset(&params, &test)?, log))
}

/// Scores for one group of queries in one direction.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    pub queries: usize,
    pub recall: f64,
    /// Percentage of queries with a top-K item whose class has oracle similarity 1.
    pub semantic_recall: f64,
    pub semantic_map: f64,
    pub pair_excluded: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectionStats {
    pub direction: Direction,
    pub overlapped: Option<GroupStats>,
    pub non_overlapped: Option<GroupStats>,
    /// Semantic recall minus R@K over all queries: the hits R@K misses.
    pub divergence: f64,
}

impl DirectionStats {
    /// Pair-excluded λ@K of overlapped minus non-overlapped queries.
    pub fn pair_excluded_gap(&self) -> Option<f64> {
        Some(self.overlapped.as_ref()?.pair_excluded - self.non_overlapped.as_ref()?.pair_excluded)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlapReport {
    pub rho: f64,
    pub seed: u64,
    pub k: usize,
    pub initial_intra_class_distance: f64,
    pub final_intra_class_distance: f64,
    pub directions: Vec<DirectionStats>,
}

impl OverlapReport {
    pub fn direction(&self, d: Direction) -> Option<&DirectionStats> {
        self.directions.iter().find(|s| s.direction == d)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# rho={} seed={} K={}", self.rho, self.seed, self.k);
        let _ = writeln!(
            out,
            "# intra_class_distance initial={:.6} final={:.6}",
            self.initial_intra_class_distance, self.final_intra_class_distance
        );
        out.push_str("direction\tgroup\tqueries\tR@K\tSR@K\tlambda@K\tlambda_excl@K\n");
        for d in &self.directions {
            for (name, g) in [
                ("overlapped", &d.overlapped),
                ("non-overlapped", &d.non_overlapped),
            ] {
                if let Some(g) = g {
                    let _ = writeln!(
                        out,
                        "{}\t{name}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                        d.direction,
                        g.queries,
                        g.recall,
                        g.semantic_recall,
                        g.semantic_map,
                        g.pair_excluded
                    );
                }
            }
            let _ = writeln!(out, "{}\tdivergence\t-\t{:.6}", d.direction, d.divergence);
            if let Some(gap) = d.pair_excluded_gap() {
                let _ = writeln!(out, "{}\tpair_excluded_gap\t-\t{gap:.6}", d.direction);
            }
        }
        out
    }
}

fn group_stats(
    lists: &[&RankedList],
    set: &EmbeddingSet,
    oracle: &SemanticOracle,
    k: usize,
) -> Result<Option<GroupStats>, SynthError> {
    if lists.is_empty() {
        return Ok(None);
    }
    let classes = set.class_map();
    let n = lists.len() as f64;
    let (mut recall, mut semantic, mut lam, mut excl) = (0.0, 0.0, 0.0, 0.0);
    for l in lists {
        let own = classes[&l.query_id];
        if query_hit(l, &classes, k)? {
            recall += 100.0;
        }
        let mut sem_hit = false;
        for e in l.entries.iter().take(k) {
            if oracle.get(own, classes[&e.gallery_id])? >= 1.0 - 1e-9 {
                sem_hit = true;
                break;
            }
        }
        if sem_hit {
            semantic += 100.0;
        }
        lam += query_semantic_map(l, k)?;
        excl += query_semantic_map_excluding(l, &classes, k)?;
    }
    Ok(Some(GroupStats {
        queries: lists.len(),
        recall: recall / n,
        semantic_recall: semantic / n,
        semantic_map: lam / n,
        pair_excluded: excl / n,
    }))
}

/// Splits the queries of an embedded set into overlapped and non-overlapped
/// classes and scores each group at depth `k`.
pub fn score_overlap(
    set: &EmbeddingSet,
    oracle: &SemanticOracle,
    overlapped: &BTreeSet<u32>,
    k: usize,
) -> Result<Vec<DirectionStats>, SynthError> {
    let classes = set.class_map();
    Direction::BOTH
        .iter()
        .map(|&direction| {
            let depth = set.count_modality(direction.target());
            let ranked = retrieve(direction, set, depth).map_err(MetricError::from)?;
            let (over, non): (Vec<&RankedList>, Vec<&RankedList>) = ranked
                .iter()
                .partition(|l| overlapped.contains(&classes[&l.query_id]));
            let all: Vec<&RankedList> = ranked.iter().collect();
            let total = group_stats(&all, set, oracle, k)?.expect("non-empty query set");
            Ok(DirectionStats {
                direction,
                overlapped: group_stats(&over, set, oracle, k)?,
                non_overlapped: group_stats(&non, set, oracle, k)?,
                divergence: total.semantic_recall - total.recall,
            })
        })
        .collect()
}

/// Generates data, trains, embeds the held-out split and compares query
/// groups at depth `k`.
pub fn overlap_experiment(
    cfg: &SynthConfig,
    train_cfg: &TrainConfig,
    enc: &EncoderConfig,
    k: usize,
) -> Result<OverlapReport, SynthError> {
    if k == 0 {
        return Err(SynthError::Config("K must be positive".into()));
    }
    let data = generate(cfg)?;
    let (set, log) = train_and_embed(&data, train_cfg, enc)?;
    Ok(OverlapReport {
        rho: cfg.overlap_rho,
        seed: cfg.seed,
        k,
        initial_intra_class_distance: log.initial_intra_class_distance,
        final_intra_class_distance: log.final_intra_class_distance,
        directions: score_overlap(&set, &data.oracle, &data.overlapped, k)?,
    })
}
