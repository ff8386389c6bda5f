use std::collections::BTreeMap;

use rayon::prelude::*;

use super::network::{backward, forward_cached, ForwardCache};
use super::{Gradients, ModelError, ModelParams};
use crate::embedding::Modality;

/// Squared distance of each feature from the group's geometric center, summed.
pub fn center_distance<V: AsRef<[f64]>>(features: &[V]) -> Result<f64, ModelError> {
    let first = features.first().ok_or(ModelError::EmptyGroup)?.as_ref();
    let mean = mean_of(features.iter().map(AsRef::as_ref), first.len());
    Ok(features
        .iter()
        .map(|f| squared_distance(f.as_ref(), &mean))
        .sum())
}

/// Half the sum of [`center_distance`] over the class groups of a mini-batch.
pub fn center_loss<V: AsRef<[f64]>>(groups: &[Vec<V>]) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for g in groups {
        total += center_distance(g)?;
    }
    Ok(0.5 * total)
}

/// `-log softmax(logits)[label]`, evaluated with max subtraction.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<f64, ModelError> {
    if label >= logits.len() {
        return Err(ModelError::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    Ok(log_sum_exp(logits) - logits[label])
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn mean_of<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Vec<f64> {
    let mut mean = vec![0.0; dim];
    let mut n = 0usize;
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
        n += 1;
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    mean
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub softmax: f64,
    pub center: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda_center: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_center: 0.1 }
    }
}

/// Per-class feature centers indexed by dense class label.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCenters {
    rows: Vec<Option<Vec<f64>>>,
}

impl ClassCenters {
    pub fn empty(num_classes: usize) -> Self {
        Self {
            rows: vec![None; num_classes],
        }
    }

    /// In-batch geometric mean of every class present in `labels`.
    pub fn from_features(features: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Self {
        let mut rows = vec![None; num_classes];
        let mut groups: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
        for (f, &l) in features.iter().zip(labels) {
            groups.entry(l).or_default().push(f);
        }
        for (l, g) in groups {
            let dim = g[0].len();
            rows[l] = Some(mean_of(g.into_iter(), dim));
        }
        Self { rows }
    }

    pub fn get(&self, label: usize) -> Option<&[f64]> {
        self.rows.get(label).and_then(|r| r.as_deref())
    }

    /// Moves each center toward the corresponding row of `batch` by `alpha`;
    /// classes seen for the first time adopt the batch center.
    pub fn update_toward(&mut self, batch: &ClassCenters, alpha: f64) {
        for (mine, theirs) in self.rows.iter_mut().zip(&batch.rows) {
            let Some(target) = theirs else { continue };
            match mine {
                Some(c) => c
                    .iter_mut()
                    .zip(target)
                    .for_each(|(a, b)| *a -= alpha * (*a - b)),
                None => *mine = Some(target.clone()),
            }
        }
    }

    pub fn class_count(&self) -> usize {
        self.rows.iter().filter(|r| r.is_some()).count()
    }
}

/// Prepared network inputs of one mini-batch with dense class labels.
#[derive(Debug, Clone)]
pub struct MiniBatch<'a> {
    pub inputs: Vec<&'a [f64]>,
    pub labels: Vec<usize>,
    pub modalities: Vec<Modality>,
}

impl MiniBatch<'_> {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// `(texts, images)` per class label present in the batch.
    pub fn class_counts(&self) -> BTreeMap<usize, (usize, usize)> {
        let mut counts = BTreeMap::new();
        for (&l, &m) in self.labels.iter().zip(&self.modalities) {
            let e: &mut (usize, usize) = counts.entry(l).or_default();
            match m {
                Modality::Text => e.0 += 1,
                Modality::Image => e.1 += 1,
            }
        }
        counts
    }
}

pub(crate) struct JointOutput {
    pub loss: LossBreakdown,
    pub grads: Gradients,
    pub batch_centers: ClassCenters,
}

const GRAD_CHUNK: usize = 8;

/// Joint softmax + center loss of a mini-batch and its parameter gradients,
/// using in-batch class centers held constant under differentiation.
pub fn joint_loss_and_grads(
    params: &ModelParams,
    batch: &MiniBatch,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Gradients), ModelError> {
    let out = joint_impl(params, batch, cfg, None, true)?;
    Ok((out.loss, out.grads))
}

pub(crate) fn joint_impl(
    params: &ModelParams,
    batch: &MiniBatch,
    cfg: &LossConfig,
    fixed_centers: Option<&ClassCenters>,
    with_grads: bool,
) -> Result<JointOutput, ModelError> {
    let classes = params.num_classes();
    if let Some(&label) = batch.labels.iter().find(|&&l| l >= classes) {
        return Err(ModelError::LabelOutOfRange { label, classes });
    }
    if batch.is_empty() {
        return Err(ModelError::EmptyGroup);
    }
    let caches: Vec<ForwardCache> = batch
        .inputs
        .par_iter()
        .map(|x| forward_cached(params, x))
        .collect();
    if let Some(sample) = caches
        .iter()
        .position(|c| c.feature.iter().chain(&c.logits).any(|v| !v.is_finite()))
    {
        return Err(ModelError::NonFinite {
            sample: Some(sample),
        });
    }

    let features: Vec<Vec<f64>> = caches.iter().map(|c| c.feature.clone()).collect();
    let batch_centers = ClassCenters::from_features(&features, &batch.labels, classes);
    let centers = fixed_centers.unwrap_or(&batch_centers);

    let n = batch.len() as f64;
    let mut softmax = 0.0;
    let mut center = 0.0;
    let mut dlogits = Vec::with_capacity(batch.len());
    let mut dfeatures = Vec::with_capacity(batch.len());
    for (cache, &label) in caches.iter().zip(&batch.labels) {
        let lse = log_sum_exp(&cache.logits);
        softmax += lse - cache.logits[label];
        let mut dl: Vec<f64> = cache.logits.iter().map(|z| (z - lse).exp() / n).collect();
        dl[label] -= 1.0 / n;
        dlogits.push(dl);

        let mu = centers
            .get(label)
            .unwrap_or(batch_centers.get(label).expect("label present"));
        center += 0.5 * squared_distance(&cache.feature, mu);
        dfeatures.push(
            cache
                .feature
                .iter()
                .zip(mu)
                .map(|(f, m)| cfg.lambda_center * (f - m))
                .collect::<Vec<f64>>(),
        );
    }
    softmax /= n;
    let loss = LossBreakdown {
        softmax,
        center,
        total: softmax + cfg.lambda_center * center,
    };
    if !loss.total.is_finite() {
        return Err(ModelError::NonFinite { sample: None });
    }

    if !with_grads {
        return Ok(JointOutput {
            loss,
            grads: Gradients {
                tensors: Vec::new(),
            },
            batch_centers,
        });
    }

    // Fixed chunking keeps the summation order independent of thread count.
    let idx: Vec<usize> = (0..batch.len()).collect();
    let partials: Vec<Gradients> = idx
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = Gradients::zeros_like(params);
            for &i in chunk {
                backward(params, &caches[i], &dfeatures[i], &dlogits[i], &mut g);
            }
            g
        })
        .collect();
    let mut grads = Gradients::zeros_like(params);
    for p in &partials {
        grads.add_assign(p);
    }
    if !grads.is_finite() {
        return Err(ModelError::NonFinite { sample: None });
    }
    Ok(JointOutput {
        loss,
        grads,
        batch_centers,
    })
}
