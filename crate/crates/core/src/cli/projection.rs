//! 2-D linear projection of an embedding set onto its top two principal
//! axes, dumped as TSV for external plotting.

use crate::embedding::EmbeddingSet;

const ITERATIONS: usize = 300;

fn power_iteration(cov: &[f64], d: usize, deflate: &[Vec<f64>]) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + i as f64 / d as f64).collect();
    for _ in 0..ITERATIONS {
        for u in deflate {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let mut w = vec![0.0; d];
        for (i, wi) in w.iter_mut().enumerate() {
            *wi = cov[i * d..(i + 1) * d]
                .iter()
                .zip(&v)
                .map(|(a, b)| a * b)
                .sum();
        }
        let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-300 {
            return vec![0.0; d];
        }
        v = w.into_iter().map(|x| x / n).collect();
    }
    // fix the sign so the largest component is positive
    let (mut best, mut idx) = (0.0f64, 0);
    for (i, x) in v.iter().enumerate() {
        if x.abs() > best {
            best = x.abs();
            idx = i;
        }
    }
    if v[idx] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    v
}

/// Coordinates of every record on the two leading principal axes.
pub fn project_2d(set: &EmbeddingSet) -> Vec<[f64; 2]> {
    let d = set.dim();
    let n = set.len();
    if n == 0 {
        return Vec::new();
    }
    let mut mean = vec![0.0; d];
    for r in set.records() {
        mean.iter_mut()
            .zip(&r.vector)
            .for_each(|(m, &v)| *m += v as f64 / n as f64);
    }
    let centered: Vec<Vec<f64>> = set
        .records()
        .iter()
        .map(|r| {
            r.vector
                .iter()
                .zip(&mean)
                .map(|(&v, m)| v as f64 - m)
                .collect()
        })
        .collect();
    let mut cov = vec![0.0; d * d];
    for x in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += x[i] * x[j];
            }
        }
    }
    let a = power_iteration(&cov, d, &[]);
    let b = power_iteration(&cov, d, std::slice::from_ref(&a));
    centered
        .iter()
        .map(|x| {
            let p = |u: &[f64]| x.iter().zip(u).map(|(s, t)| s * t).sum::<f64>();
            [p(&a), p(&b)]
        })
        .collect()
}

pub fn projection_tsv(set: &EmbeddingSet) -> String {
    let mut out = String::from("id\tclass\tmodality\tx\ty\n");
    for (r, p) in set.records().iter().zip(project_2d(set)) {
        out.push_str(&format!(
            "{}\t{}\t{}\t{:.6}\t{:.6}\n",
            r.id, r.class_id, r.modality, p[0], p[1]
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{EmbeddingRecord, ItemId, Modality};

    #[test]
    fn recovers_dominant_axes() {
        let pts = [
            [3.0f32, 0.0, 0.1],
            [-3.0, 0.0, -0.1],
            [0.0, 1.0, 0.0],
            [0.0, -1.0, 0.0],
        ];
        let records = pts
            .iter()
            .enumerate()
            .map(|(i, p)| EmbeddingRecord {
                id: ItemId(i as u64),
                class_id: 0,
                modality: Modality::Image,
                vector: p.to_vec(),
            })
            .collect();
        let set = EmbeddingSet::new(3, records).unwrap();
        let proj = project_2d(&set);
        assert!((proj[0][0].abs() - (9.0f64 + 0.01).sqrt()).abs() < 1e-6);
        assert!(proj[0][1].abs() < 1e-6);
        assert!((proj[2][1].abs() - 1.0).abs() < 1e-6);
        let tsv = projection_tsv(&set);
        assert_eq!(tsv.lines().count(), 5);
        assert_eq!(tsv, projection_tsv(&set));
    }
}
