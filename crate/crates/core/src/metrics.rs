//! Recall@K, the SemanticMap λ@K (mean top-K cosine per query), its
//! pair-excluded variant, and report rendering.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::embedding::{EmbeddingSet, ItemId};
use crate::retrieval::{retrieve, Direction, RankedList, RetrievalError};

/// λ@1, image-to-text on MSCOCO, of the structure-preserving baseline (percent).
pub const REFERENCE_LAMBDA1_I2T: f64 = 67.24;
/// The same baseline's λ@1 with same-pair retrievals discarded (percent).
pub const REFERENCE_LAMBDA1_PAIR_EXCLUDED: f64 = 64.94;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("no ranked lists to score")]
    EmptyRanked,
    #[error("ranked list of query {query} has {len} entries, K = {k}")]
    ShortList { query: ItemId, len: usize, k: usize },
    #[error("query {query} has only {available} cross-class entries, K = {k}")]
    InsufficientCrossClass {
        query: ItemId,
        available: usize,
        k: usize,
    },
    #[error("item {0} has no class")]
    UnknownItem(ItemId),
    #[error("invalid K list: {0}")]
    InvalidKs(String),
    #[error("malformed report line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Unit,
    Percent,
}

impl Scale {
    pub fn factor(self) -> f64 {
        match self {
            Scale::Unit => 1.0,
            Scale::Percent => 100.0,
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Unit => "unit",
            Scale::Percent => "percent",
        })
    }
}

impl FromStr for Scale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unit" => Ok(Scale::Unit),
            "percent" => Ok(Scale::Percent),
            other => Err(format!("unknown scale `{other}` (unit, percent)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricConfig {
    pub ks: Vec<usize>,
    pub scale: Scale,
    pub exclude_pairs: bool,
    pub directions: Vec<Direction>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            ks: vec![1, 5, 10],
            scale: Scale::Unit,
            exclude_pairs: false,
            directions: Direction::BOTH.to_vec(),
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<(), MetricError> {
        validate_ks(&self.ks)
    }
}

pub fn validate_ks(ks: &[usize]) -> Result<(), MetricError> {
    if ks.is_empty() {
        return Err(MetricError::InvalidKs("empty".into()));
    }
    if ks[0] == 0 {
        return Err(MetricError::InvalidKs("K must be positive".into()));
    }
    if ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MetricError::InvalidKs(
            "K values must be strictly increasing".into(),
        ));
    }
    Ok(())
}

/// Parses `1,5,10`.
pub fn parse_ks(text: &str) -> Result<Vec<usize>, MetricError> {
    let ks = text
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| MetricError::InvalidKs(format!("`{t}` is not a count")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    validate_ks(&ks)?;
    Ok(ks)
}

/// Metric values for one retrieval direction. R@K is always in percent; λ rows follow `scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub direction: Direction,
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub semantic_map: Vec<f64>,
    pub pair_excluded: Option<Vec<f64>>,
    pub queries: usize,
    pub scale: Scale,
}

fn class_of(classes: &HashMap<ItemId, u32>, id: ItemId) -> Result<u32, MetricError> {
    classes
        .get(&id)
        .copied()
        .ok_or(MetricError::UnknownItem(id))
}

/// Whether any of the first `k` entries shares the query's class.
pub fn query_hit(
    list: &RankedList,
    classes: &HashMap<ItemId, u32>,
    k: usize,
) -> Result<bool, MetricError> {
    let own = class_of(classes, list.query_id)?;
    for e in list.entries.iter().take(k) {
        if class_of(classes, e.gallery_id)? == own {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Mean of the first `k` similarities of one list.
pub fn query_semantic_map(list: &RankedList, k: usize) -> Result<f64, MetricError> {
    if list.entries.len() < k || k == 0 {
        return Err(MetricError::ShortList {
            query: list.query_id,
            len: list.entries.len(),
            k,
        });
    }
    Ok(list.entries[..k].iter().map(|e| e.similarity).sum::<f64>() / k as f64)
}

/// Mean of the first `k` similarities after dropping same-class entries.
pub fn query_semantic_map_excluding(
    list: &RankedList,
    classes: &HashMap<ItemId, u32>,
    k: usize,
) -> Result<f64, MetricError> {
    let own = class_of(classes, list.query_id)?;
    let mut kept = Vec::with_capacity(k);
    for e in &list.entries {
        if kept.len() == k {
            break;
        }
        if class_of(classes, e.gallery_id)? != own {
            kept.push(e.similarity);
        }
    }
    if kept.len() < k || k == 0 {
        return Err(MetricError::InsufficientCrossClass {
            query: list.query_id,
            available: kept.len(),
            k,
        });
    }
    Ok(kept.iter().sum::<f64>() / k as f64)
}

fn mean_over_queries<F>(ranked: &[RankedList], per_query: F) -> Result<f64, MetricError>
where
    F: Fn(&RankedList) -> Result<f64, MetricError> + Sync + Send,
{
    if ranked.is_empty() {
        return Err(MetricError::EmptyRanked);
    }
    let parts = ranked
        .par_iter()
        .map(per_query)
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(parts.iter().sum::<f64>() / ranked.len() as f64)
}

/// Percentage of queries with a same-class item among the first `k` entries.
pub fn recall_at_k(
    ranked: &[RankedList],
    classes: &HashMap<ItemId, u32>,
    k: usize,
) -> Result<f64, MetricError> {
    mean_over_queries(ranked, |l| {
        Ok(if query_hit(l, classes, k)? {
            100.0
        } else {
            0.0
        })
    })
}

/// λ@K = (1 / (N·K)) Σ over queries of the top-`k` similarities.
pub fn semantic_map_at_k(ranked: &[RankedList], k: usize) -> Result<f64, MetricError> {
    mean_over_queries(ranked, |l| query_semantic_map(l, k))
}

/// λ@K over cross-class entries only. `ranked_full` should be ranked deep enough
/// for `k` cross-class entries to remain.
pub fn semantic_map_excluding_pairs(
    ranked_full: &[RankedList],
    classes: &HashMap<ItemId, u32>,
    k: usize,
) -> Result<f64, MetricError> {
    mean_over_queries(ranked_full, |l| query_semantic_map_excluding(l, classes, k))
}

/// Scores already-ranked lists for one direction.
pub fn report_from_ranked(
    direction: Direction,
    ranked: &[RankedList],
    classes: &HashMap<ItemId, u32>,
    cfg: &MetricConfig,
) -> Result<MetricReport, MetricError> {
    cfg.validate()?;
    let f = cfg.scale.factor();
    let mut recall = Vec::with_capacity(cfg.ks.len());
    let mut semantic_map = Vec::with_capacity(cfg.ks.len());
    for &k in &cfg.ks {
        recall.push(recall_at_k(ranked, classes, k)?);
        semantic_map.push(semantic_map_at_k(ranked, k)? * f);
    }
    let pair_excluded = if cfg.exclude_pairs {
        let mut v = Vec::with_capacity(cfg.ks.len());
        for &k in &cfg.ks {
            v.push(semantic_map_excluding_pairs(ranked, classes, k)? * f);
        }
        Some(v)
    } else {
        None
    };
    Ok(MetricReport {
        direction,
        ks: cfg.ks.clone(),
        recall,
        semantic_map,
        pair_excluded,
        queries: ranked.len(),
        scale: cfg.scale,
    })
}

/// One report per configured direction. Pair exclusion ranks the whole gallery.
pub fn evaluate(set: &EmbeddingSet, cfg: &MetricConfig) -> Result<Vec<MetricReport>, MetricError> {
    cfg.validate()?;
    let classes = set.class_map();
    let k_max = *cfg.ks.last().expect("validated non-empty");
    cfg.directions
        .iter()
        .map(|&direction| {
            let depth = if cfg.exclude_pairs {
                set.count_modality(direction.target()).max(1)
            } else {
                k_max
            };
            let ranked = retrieve(direction, set, depth)?;
            report_from_ranked(direction, &ranked, &classes, cfg)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportStyle {
    Tsv,
    AlignedTable,
}

pub const REPORT_TSV_HEADER: &str = "direction\tmetric\tK\tvalue";

const METRIC_RECALL: &str = "R@K";
const METRIC_LAMBDA: &str = "lambda@K";
const METRIC_LAMBDA_EXCL: &str = "lambda_excl@K";

fn families(r: &MetricReport) -> Vec<(&'static str, &'static str, &[f64])> {
    let mut out = vec![
        (METRIC_RECALL, "R@K", r.recall.as_slice()),
        (METRIC_LAMBDA, "λ@K", r.semantic_map.as_slice()),
    ];
    if let Some(p) = &r.pair_excluded {
        out.push((METRIC_LAMBDA_EXCL, "λ@K excl. pairs", p.as_slice()));
    }
    out
}

pub fn render_report(reports: &[MetricReport], style: ReportStyle) -> String {
    match style {
        ReportStyle::Tsv => render_tsv(reports),
        ReportStyle::AlignedTable => render_table(reports),
    }
}

fn render_tsv(reports: &[MetricReport]) -> String {
    let mut out = format!("{REPORT_TSV_HEADER}\n");
    for r in reports {
        for (name, _, values) in families(r) {
            for (k, v) in r.ks.iter().zip(values) {
                out.push_str(&format!("{}\t{name}\t{k}\t{v:.6}\n", r.direction));
            }
        }
    }
    out
}

const LABEL_W: usize = 16;
const CELL_W: usize = 9;

fn render_table(reports: &[MetricReport]) -> String {
    let mut out = String::new();
    let mut line = format!("{:<LABEL_W$}", "");
    for r in reports {
        let w = CELL_W * r.ks.len();
        line.push_str(&format!(" |{:^w$}", r.direction.title()));
    }
    out.push_str(line.trim_end());
    out.push('\n');
    if reports.is_empty() {
        return out;
    }
    let mut line = format!("{:<LABEL_W$}", "");
    for r in reports {
        line.push_str(" |");
        for k in &r.ks {
            line.push_str(&format!("{:>CELL_W$}", format!("@{k}")));
        }
    }
    out.push_str(&line);
    out.push('\n');
    let mut labels: Vec<&str> = vec!["R@K", "λ@K"];
    if reports.iter().any(|r| r.pair_excluded.is_some()) {
        labels.push("λ@K excl. pairs");
    }
    for label in labels {
        // pad by chars so the multi-byte λ does not shift columns
        let pad = LABEL_W.saturating_sub(label.chars().count());
        let mut line = format!("{label}{}", " ".repeat(pad));
        for r in reports {
            line.push_str(" |");
            let values = families(r).into_iter().find(|f| f.1 == label).map(|f| f.2);
            for i in 0..r.ks.len() {
                let cell = values
                    .map(|v| format!("{:.2}", v[i]))
                    .unwrap_or_else(|| "-".into());
                line.push_str(&format!("{cell:>CELL_W$}"));
            }
        }
        out.push_str(&line);
        out.push('\n');
    }
    let counts: Vec<String> = reports
        .iter()
        .map(|r| format!("{} {}", r.direction, r.queries))
        .collect();
    out.push_str(&format!(
        "queries: {}; λ scale: {}\n",
        counts.join(", "),
        reports[0].scale
    ));
    out.push_str(&format!(
        "reference (structure-preserving, MSCOCO, percent): λ@1 i2t {REFERENCE_LAMBDA1_I2T:.2}, pair-excluded {REFERENCE_LAMBDA1_PAIR_EXCLUDED:.2}\n"
    ));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub direction: Direction,
    pub metric: String,
    pub k: usize,
    pub value: f64,
}

/// Parses the TSV produced by [`render_report`].
pub fn parse_report_tsv(text: &str) -> Result<Vec<ReportRow>, MetricError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == REPORT_TSV_HEADER => {}
        _ => {
            return Err(MetricError::Parse {
                line: 1,
                reason: "missing header".into(),
            })
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let bad = |reason: String| MetricError::Parse {
            line: i + 1,
            reason,
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", f.len())));
        }
        rows.push(ReportRow {
            direction: f[0].parse().map_err(bad)?,
            metric: f[1].to_string(),
            k: f[2].parse().map_err(|_| bad("bad K".into()))?,
            value: f[3].parse().map_err(|_| bad("bad value".into()))?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::RankedEntry;
    use proptest::prelude::*;

    fn list(query: u64, entries: &[(u64, f64)]) -> RankedList {
        RankedList {
            query_id: ItemId(query),
            entries: entries
                .iter()
                .map(|&(g, s)| RankedEntry {
                    gallery_id: ItemId(g),
                    similarity: s,
                })
                .collect(),
        }
    }

    fn scores(query: u64, sims: &[f64]) -> RankedList {
        let e: Vec<(u64, f64)> = sims
            .iter()
            .enumerate()
            .map(|(i, &s)| (1000 + i as u64, s))
            .collect();
        list(query, &e)
    }

    #[test]
    fn worked_examples() {
        let a = [scores(0, &[0.82, 0.81, 0.78, 0.78, 0.77])];
        let v = semantic_map_at_k(&a, 5).unwrap();
        assert!((v - 0.792).abs() < 1e-9);
        assert_eq!(format!("{v:.2}"), "0.79");
        let b = [scores(0, &[0.82, 0.75, 0.69, 0.68, 0.64])];
        assert!((semantic_map_at_k(&b, 1).unwrap() - 0.82).abs() < 1e-12);
        let v = semantic_map_at_k(&b, 5).unwrap();
        assert!((v - 0.716).abs() < 1e-9);
        assert_eq!(format!("{v:.2}"), "0.72");
    }

    #[test]
    fn recall_hand_count() {
        let mut classes = HashMap::new();
        let mut ranked = Vec::new();
        for q in 0..10u64 {
            classes.insert(ItemId(q), q as u32);
            let mut entries = Vec::new();
            for r in 0..5u64 {
                let g = 100 + q * 10 + r;
                // queries 0..3 find their class at rank 4
                let class = if q < 3 && r == 3 { q as u32 } else { 99 };
                classes.insert(ItemId(g), class);
                entries.push((g, 0.9 - r as f64 * 0.1));
            }
            ranked.push(list(q, &entries));
        }
        assert_eq!(recall_at_k(&ranked, &classes, 5).unwrap(), 30.0);
        assert_eq!(recall_at_k(&ranked, &classes, 3).unwrap(), 0.0);
        assert_eq!(recall_at_k(&[], &classes, 1), Err(MetricError::EmptyRanked));
    }

    #[test]
    fn short_lists_and_pair_exclusion() {
        let a = [scores(0, &[0.5, 0.4])];
        assert!(matches!(
            semantic_map_at_k(&a, 3),
            Err(MetricError::ShortList { len: 2, k: 3, .. })
        ));

        let classes: HashMap<ItemId, u32> = [(0, 7), (1, 7), (2, 1), (3, 2), (4, 7)]
            .into_iter()
            .map(|(i, c)| (ItemId(i), c))
            .collect();
        let l = [list(0, &[(1, 0.9), (2, 0.8), (3, 0.7)])];
        assert!((semantic_map_excluding_pairs(&l, &classes, 2).unwrap() - 0.75).abs() < 1e-12);
        let only_own = [list(0, &[(1, 0.9), (4, 0.8)])];
        assert!(matches!(
            semantic_map_excluding_pairs(&only_own, &classes, 1),
            Err(MetricError::InsufficientCrossClass { available: 0, .. })
        ));
        let cross = [list(0, &[(2, 0.8), (3, 0.7)])];
        assert_eq!(
            semantic_map_excluding_pairs(&cross, &classes, 2).unwrap(),
            semantic_map_at_k(&cross, 2).unwrap()
        );
        let unknown = [list(0, &[(42, 0.1)])];
        assert_eq!(
            recall_at_k(&unknown, &classes, 1),
            Err(MetricError::UnknownItem(ItemId(42)))
        );
    }

    #[test]
    fn k_list_validation() {
        assert_eq!(parse_ks("1,5,10").unwrap(), vec![1, 5, 10]);
        assert!(parse_ks("5,1").is_err());
        assert!(parse_ks("0,1").is_err());
        assert!(parse_ks("1,1").is_err());
        assert!(parse_ks("").is_err());
    }

    fn perfect_set() -> EmbeddingSet {
        use crate::embedding::{EmbeddingRecord, Modality};
        let mut records = Vec::new();
        let mut id = 0;
        for c in 0..3u32 {
            let mut v = vec![0.0f32; 3];
            v[c as usize] = 1.0;
            for m in [Modality::Image, Modality::Text, Modality::Text] {
                records.push(EmbeddingRecord {
                    id: ItemId(id),
                    class_id: c,
                    modality: m,
                    vector: v.clone(),
                });
                id += 1;
            }
        }
        EmbeddingSet::new(3, records).unwrap()
    }

    #[test]
    fn evaluate_perfect_embedding_and_scales() {
        let set = perfect_set();
        let cfg = MetricConfig {
            ks: vec![1, 2],
            ..MetricConfig::default()
        };
        let reports = evaluate(&set, &cfg).unwrap();
        assert_eq!(reports.len(), 2);
        for r in &reports {
            assert_eq!(r.recall, vec![100.0, 100.0]);
            assert!((r.semantic_map[0] - 1.0).abs() < 1e-12);
            assert!(r.pair_excluded.is_none());
        }
        assert_eq!(reports[0].queries, 3);
        assert_eq!(reports[1].queries, 6);

        let pct = evaluate(
            &set,
            &MetricConfig {
                scale: Scale::Percent,
                exclude_pairs: true,
                ..cfg.clone()
            },
        )
        .unwrap();
        let unit = evaluate(
            &set,
            &MetricConfig {
                exclude_pairs: true,
                ..cfg
            },
        )
        .unwrap();
        for (p, u) in pct.iter().zip(&unit) {
            assert_eq!(p.recall, u.recall);
            for (a, b) in p.semantic_map.iter().zip(&u.semantic_map) {
                assert_eq!(*a, b * 100.0);
            }
            // orthogonal classes: every cross-class cosine is 0
            assert_eq!(p.pair_excluded.as_ref().unwrap(), &vec![0.0, 0.0]);
        }
    }

    #[test]
    fn rendering() {
        assert_eq!(
            render_report(&[], ReportStyle::Tsv),
            format!("{REPORT_TSV_HEADER}\n")
        );
        let set = perfect_set();
        let cfg = MetricConfig {
            ks: vec![1, 2],
            exclude_pairs: true,
            ..MetricConfig::default()
        };
        let reports = evaluate(&set, &cfg).unwrap();
        let tsv = render_report(&reports, ReportStyle::Tsv);
        assert_eq!(tsv, render_report(&reports, ReportStyle::Tsv));
        assert_eq!(tsv.lines().count(), 1 + 2 * 3 * 2);
        let rows = parse_report_tsv(&tsv).unwrap();
        assert_eq!(rows[0].direction, Direction::ImageToText);
        assert_eq!(rows[0].metric, "R@K");
        assert_eq!(rows[0].value, 100.0);
        let table = render_report(&reports, ReportStyle::AlignedTable);
        assert!(table.contains("Image-to-Text"));
        assert!(table.contains("100.00"));
        assert!(table.contains("λ@K excl. pairs"));
        assert!(table.contains("67.24") && table.contains("64.94"));
        assert!(parse_report_tsv("nope\n").is_err());
    }

    proptest! {
        #[test]
        fn monotone_in_k(sims in proptest::collection::vec(-1.0f64..1.0, 1..30), classes_raw in proptest::collection::vec(0u32..4, 30)) {
            let mut s = sims.clone();
            s.sort_by(|a, b| b.total_cmp(a));
            let l = [scores(0, &s)];
            let mut classes: HashMap<ItemId, u32> = (0..s.len()).map(|i| (ItemId(1000 + i as u64), classes_raw[i])).collect();
            classes.insert(ItemId(0), 0);
            let mut prev_r = 0.0;
            let mut prev_l = f64::INFINITY;
            for k in 1..=s.len() {
                let r = recall_at_k(&l, &classes, k).unwrap();
                let m = semantic_map_at_k(&l, k).unwrap();
                prop_assert!(r >= prev_r && (0.0..=100.0).contains(&r));
                prop_assert!(m <= prev_l + 1e-12 && (-1.0..=1.0).contains(&m));
                prev_r = r;
                prev_l = m;
            }
        }
    }
}
