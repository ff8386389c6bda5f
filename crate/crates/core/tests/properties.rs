//! Property tests for invariants that span modules.

use proptest::prelude::*;

use xmodal::embedding::{EmbeddingRecord, EmbeddingSet, ItemId, Modality};
use xmodal::metrics::{evaluate, MetricConfig, Scale};
use xmodal::model::{center_distance, center_loss};
use xmodal::retrieval::{retrieve, Direction};

fn arb_set() -> impl Strategy<Value = EmbeddingSet> {
    (1usize..6, 2usize..12, 2usize..12).prop_flat_map(|(dim, n_img, n_txt)| {
        let n = n_img + n_txt;
        (
            prop::collection::vec(prop::collection::vec(-1.0f32..1.0, dim), n),
            prop::collection::vec(0u32..3, n),
        )
            .prop_filter_map("zero vector", move |(vecs, classes)| {
                if vecs.iter().any(|v| v.iter().all(|&x| x.abs() < 1e-3)) {
                    return None;
                }
                let records = vecs
                    .into_iter()
                    .zip(classes)
                    .enumerate()
                    .map(|(i, (vector, class_id))| EmbeddingRecord {
                        id: ItemId(i as u64 * 3 + 1),
                        class_id,
                        modality: if i < n_img {
                            Modality::Image
                        } else {
                            Modality::Text
                        },
                        vector,
                    })
                    .collect();
                EmbeddingSet::new(dim, records).ok()
            })
    })
}

fn arb_groups() -> impl Strategy<Value = Vec<Vec<Vec<f64>>>> {
    (1usize..5).prop_flat_map(|dim| {
        prop::collection::vec(
            prop::collection::vec(prop::collection::vec(-5.0f64..5.0, dim), 1..6),
            1..5,
        )
    })
}

proptest! {
    #[test]
    fn embedding_tsv_round_trips(set in arb_set()) {
        let back = EmbeddingSet::from_tsv(&set.to_tsv()).unwrap();
        prop_assert_eq!(back, set);
    }

    #[test]
    fn ranking_is_a_sorted_permutation(set in arb_set()) {
        let gallery = set.count_modality(Modality::Text);
        for list in retrieve(Direction::ImageToText, &set, gallery).unwrap() {
            prop_assert_eq!(list.entries.len(), gallery);
            for w in list.entries.windows(2) {
                prop_assert!(w[0].similarity >= w[1].similarity);
            }
            let mut ids: Vec<_> = list.entries.iter().map(|e| e.gallery_id).collect();
            ids.sort();
            ids.dedup();
            prop_assert_eq!(ids.len(), gallery);
        }
    }

    #[test]
    fn percent_scale_only_rescales_lambda(set in arb_set()) {
        let unit = MetricConfig { ks: vec![1, 2], ..MetricConfig::default() };
        let pct = MetricConfig { scale: Scale::Percent, ..unit.clone() };
        let (a, b) = (evaluate(&set, &unit).unwrap(), evaluate(&set, &pct).unwrap());
        for (u, p) in a.iter().zip(&b) {
            prop_assert_eq!(&u.recall, &p.recall);
            for (x, y) in u.semantic_map.iter().zip(&p.semantic_map) {
                prop_assert!((x * 100.0 - y).abs() < 1e-9);
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(x));
            }
        }
    }

    #[test]
    fn center_loss_is_nonnegative_and_translation_invariant(groups in arb_groups(), shift in -3.0f64..3.0) {
        let l = center_loss(&groups).unwrap();
        prop_assert!(l >= 0.0);
        let moved: Vec<Vec<Vec<f64>>> = groups
            .iter()
            .map(|g| g.iter().map(|v| v.iter().map(|x| x + shift).collect()).collect())
            .collect();
        prop_assert!((center_loss(&moved).unwrap() - l).abs() <= 1e-9 * (1.0 + l));
        let halved: f64 = groups.iter().map(|g| center_distance(g).unwrap()).sum::<f64>() / 2.0;
        prop_assert!((halved - l).abs() <= 1e-12 * (1.0 + l));
    }

    #[test]
    fn center_loss_scales_quadratically(groups in arb_groups(), s in 0.1f64..4.0) {
        let scaled: Vec<Vec<Vec<f64>>> = groups
            .iter()
            .map(|g| g.iter().map(|v| v.iter().map(|x| x * s).collect()).collect())
            .collect();
        let l = center_loss(&groups).unwrap();
        prop_assert!((center_loss(&scaled).unwrap() - s * s * l).abs() <= 1e-9 * (1.0 + s * s * l));
    }
}
