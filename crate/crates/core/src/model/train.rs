use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::loss::{joint_impl, ClassCenters, LossBreakdown, LossConfig, MiniBatch};
use super::network::{forward_cached, prepare_input};
use super::{BackboneSpec, Gradients, ModelError, ModelParams};
use crate::embedding::{EmbeddingRecord, EmbeddingSet, ItemId, Modality};
use crate::encoder::{augment_encoded, Augmentation, Canvas};

/// Training-set expansion schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainAugmentation {
    /// Every image and encoded text once.
    CfgStd,
    /// Adds a horizontally flipped copy of every image and a center-cropped,
    /// re-enlarged copy of every encoded text.
    Cfg2,
    /// `Cfg2` with every canvas halved to 128×128.
    Cfg3,
}

impl TrainAugmentation {
    pub fn input_size(self) -> usize {
        match self {
            TrainAugmentation::Cfg3 => 128,
            _ => 256,
        }
    }

    pub fn default_backbone(self) -> BackboneSpec {
        match self {
            TrainAugmentation::Cfg3 => BackboneSpec::small_input(),
            _ => BackboneSpec::default(),
        }
    }

    /// Transform applied to canvases at embedding time.
    pub fn inference_transform(self, canvas: &Canvas) -> Result<Canvas, ModelError> {
        match self {
            TrainAugmentation::Cfg3 => Ok(augment_encoded(canvas, Augmentation::Downsample128)?),
            _ => Ok(canvas.clone()),
        }
    }
}

impl fmt::Display for TrainAugmentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainAugmentation::CfgStd => "cfg-std",
            TrainAugmentation::Cfg2 => "cfg-2",
            TrainAugmentation::Cfg3 => "cfg-3",
        })
    }
}

impl FromStr for TrainAugmentation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cfg-std" | "cfg_std" => Ok(TrainAugmentation::CfgStd),
            "cfg-2" | "cfg_2" => Ok(TrainAugmentation::Cfg2),
            "cfg-3" | "cfg_3" => Ok(TrainAugmentation::Cfg3),
            other => Err(format!(
                "unknown augmentation `{other}` (cfg-std, cfg-2, cfg-3)"
            )),
        }
    }
}

/// How the per-epoch decay factor is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayMode {
    /// `lr_e = lr / (1 + decay * e)` at epoch `e` (counting from 0).
    LearningRate,
    /// L2 penalty: `decay * w` added to every gradient.
    L2,
}

impl FromStr for DecayMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lr" => Ok(DecayMode::LearningRate),
            "l2" => Ok(DecayMode::L2),
            other => Err(format!("unknown decay mode `{other}` (lr, l2)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CenterMode {
    /// Geometric mean of each class within the mini-batch.
    Batch,
    /// Running centers moved toward the batch mean by `alpha` after every step.
    Ema { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub decay_mode: DecayMode,
    pub epochs: usize,
    pub batch: usize,
    pub lambda_center: f64,
    pub augmentation: TrainAugmentation,
    pub center_mode: CenterMode,
    pub seed: u64,
    pub backbone: BackboneSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            weight_decay: 5e-5,
            decay_mode: DecayMode::LearningRate,
            epochs: 100,
            batch: 45,
            lambda_center: 0.1,
            augmentation: TrainAugmentation::CfgStd,
            center_mode: CenterMode::Batch,
            seed: 0,
            backbone: BackboneSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(ModelError::Config("lr must be positive".into()));
        }
        if !(self.lambda_center >= 0.0) {
            return Err(ModelError::Config(
                "lambda_center must be non-negative".into(),
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(ModelError::Config(
                "weight_decay must be non-negative".into(),
            ));
        }
        if self.batch == 0 {
            return Err(ModelError::Config("batch must be at least 1".into()));
        }
        if let CenterMode::Ema { alpha } = self.center_mode {
            if !(alpha > 0.0 && alpha <= 1.0) {
                return Err(ModelError::Config("center alpha must lie in (0, 1]".into()));
            }
        }
        self.backbone.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub canvas: Canvas,
    pub class_id: u32,
    pub modality: Modality,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedItem {
    pub id: ItemId,
    pub class_id: u32,
    pub modality: Modality,
    pub canvas: Canvas,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    /// `(epoch, loss)`; epoch 0 is measured before the first update.
    pub epochs: Vec<(usize, LossBreakdown)>,
    pub initial_intra_class_distance: f64,
    pub final_intra_class_distance: f64,
    /// Original class id of every dense classifier label.
    pub class_ids: Vec<u32>,
}

impl TrainLog {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\tsoftmax\tcenter\ttotal\n");
        for (e, l) in &self.epochs {
            out.push_str(&format!(
                "{e}\t{:.9}\t{:.9}\t{:.9}\n",
                l.softmax, l.center, l.total
            ));
        }
        out
    }

    pub fn initial(&self) -> Option<&LossBreakdown> {
        self.epochs.first().map(|(_, l)| l)
    }

    pub fn last(&self) -> Option<&LossBreakdown> {
        self.epochs.last().map(|(_, l)| l)
    }
}

pub fn augment_training_set(
    items: &[TrainItem],
    aug: TrainAugmentation,
) -> Result<Vec<TrainItem>, ModelError> {
    if aug == TrainAugmentation::CfgStd {
        return Ok(items.to_vec());
    }
    let mut out = Vec::with_capacity(items.len() * 2);
    for item in items {
        let extra = match item.modality {
            Modality::Image => augment_encoded(&item.canvas, Augmentation::HFlip)?,
            Modality::Text => augment_encoded(&item.canvas, Augmentation::Crop227Enlarge)?,
        };
        out.push(item.clone());
        out.push(TrainItem {
            canvas: extra,
            ..item.clone()
        });
    }
    if aug == TrainAugmentation::Cfg3 {
        for item in &mut out {
            item.canvas = augment_encoded(&item.canvas, Augmentation::Downsample128)?;
        }
    }
    Ok(out)
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &ModelParams) -> Self {
        let z = Gradients::zeros_like(params).tensors;
        Self {
            m: z.clone(),
            v: z,
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &Gradients, lr: f64, l2: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (k, t) in params.tensors_mut().iter_mut().enumerate() {
            for (((w, &g), m), v) in t
                .data
                .iter_mut()
                .zip(&grads.tensors[k])
                .zip(&mut self.m[k])
                .zip(&mut self.v[k])
            {
                let g = g + l2 * *w;
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Splits the items into mini-batches made of whole classes. A class larger
/// than the batch is cut into chunks with images and texts interleaved, so
/// every chunk of two or more items carries both modalities when it can.
fn plan_batches(
    groups: &[(Vec<usize>, Vec<usize>)],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    for c in order {
        let (mut images, mut texts) = groups[c].clone();
        images.shuffle(rng);
        texts.shuffle(rng);
        let members: Vec<usize> = images.into_iter().chain(texts).collect();
        if members.len() > batch_size {
            if !current.is_empty() {
                batches.push(std::mem::take(&mut current));
            }
            // deal round-robin so images spread over the chunks
            let n = members.len().div_ceil(batch_size);
            let mut chunks = vec![Vec::new(); n];
            for (k, m) in members.into_iter().enumerate() {
                chunks[k % n].push(m);
            }
            batches.extend(chunks);
        } else if current.len() + members.len() > batch_size {
            batches.push(std::mem::replace(&mut current, members));
        } else {
            current.extend(members);
        }
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

fn mean_breakdown(losses: &[LossBreakdown]) -> LossBreakdown {
    let n = losses.len().max(1) as f64;
    LossBreakdown {
        softmax: losses.iter().map(|l| l.softmax).sum::<f64>() / n,
        center: losses.iter().map(|l| l.center).sum::<f64>() / n,
        total: losses.iter().map(|l| l.total).sum::<f64>() / n,
    }
}

/// Mean Euclidean distance of every item's feature from its class centroid.
pub fn mean_intra_class_distance(
    params: &ModelParams,
    inputs: &[Vec<f64>],
    labels: &[usize],
) -> f64 {
    let features: Vec<Vec<f64>> = inputs
        .par_iter()
        .map(|x| forward_cached(params, x).feature)
        .collect();
    let centers = ClassCenters::from_features(&features, labels, params.num_classes());
    let total: f64 = features
        .iter()
        .zip(labels)
        .map(|(f, &l)| {
            let c = centers.get(l).expect("label present");
            f.iter()
                .zip(c)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    total / features.len().max(1) as f64
}

/// Trains a fresh network on `items` (before augmentation).
pub fn train(
    items: &[TrainItem],
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainLog), ModelError> {
    cfg.validate()?;

    let mut per_class: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for item in items {
        let e = per_class.entry(item.class_id).or_default();
        match item.modality {
            Modality::Image => e.0 += 1,
            Modality::Text => e.1 += 1,
        }
    }
    if per_class.len() < 2 {
        return Err(ModelError::Dataset(
            "at least two classes are required".into(),
        ));
    }
    if let Some((c, _)) = per_class.iter().find(|(_, &(i, t))| i == 0 || t == 0) {
        return Err(ModelError::Dataset(format!(
            "class {c} lacks an image or a text"
        )));
    }
    let class_ids: Vec<u32> = per_class.keys().copied().collect();
    let dense: BTreeMap<u32, usize> = class_ids.iter().enumerate().map(|(i, &c)| (c, i)).collect();

    let expanded = augment_training_set(items, cfg.augmentation)?;
    let inputs: Vec<Vec<f64>> = expanded
        .par_iter()
        .map(|it| prepare_input(&cfg.backbone, &it.canvas))
        .collect::<Result<_, _>>()?;
    let labels: Vec<usize> = expanded.iter().map(|it| dense[&it.class_id]).collect();
    let modalities: Vec<Modality> = expanded.iter().map(|it| it.modality).collect();
    let mut groups = vec![(Vec::new(), Vec::new()); class_ids.len()];
    for (i, (&l, &m)) in labels.iter().zip(&modalities).enumerate() {
        match m {
            Modality::Image => groups[l].0.push(i),
            Modality::Text => groups[l].1.push(i),
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(cfg.backbone.clone(), class_ids.len(), &mut rng)?;
    let mut adam = Adam::new(&params);
    let mut ema = ClassCenters::empty(class_ids.len());
    let loss_cfg = LossConfig {
        lambda_center: cfg.lambda_center,
    };
    let make_batch = |idx: &[usize]| MiniBatch {
        inputs: idx.iter().map(|&i| inputs[i].as_slice()).collect(),
        labels: idx.iter().map(|&i| labels[i]).collect(),
        modalities: idx.iter().map(|&i| modalities[i]).collect(),
    };

    let initial_intra_class_distance = mean_intra_class_distance(&params, &inputs, &labels);
    let mut log = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..=cfg.epochs {
        let plan = plan_batches(&groups, cfg.batch, &mut rng);
        let mut losses = Vec::with_capacity(plan.len());
        let lr = match cfg.decay_mode {
            DecayMode::LearningRate => {
                cfg.lr / (1.0 + cfg.weight_decay * (epoch.saturating_sub(1)) as f64)
            }
            DecayMode::L2 => cfg.lr,
        };
        let l2 = match cfg.decay_mode {
            DecayMode::L2 => cfg.weight_decay,
            DecayMode::LearningRate => 0.0,
        };
        for (b, idx) in plan.iter().enumerate() {
            let batch = make_batch(idx);
            let fixed = match cfg.center_mode {
                CenterMode::Ema { .. } if ema.class_count() > 0 => Some(&ema),
                _ => None,
            };
            let out =
                joint_impl(&params, &batch, &loss_cfg, fixed, epoch > 0).map_err(|e| match e {
                    ModelError::NonFinite { .. } => ModelError::Diverged { epoch, batch: b },
                    other => other,
                })?;
            losses.push(out.loss);
            if epoch > 0 {
                adam.step(&mut params, &out.grads, lr, l2);
                if let CenterMode::Ema { alpha } = cfg.center_mode {
                    ema.update_toward(&out.batch_centers, alpha);
                }
                if !params.is_finite() {
                    return Err(ModelError::Diverged { epoch, batch: b });
                }
            }
        }
        let mean = mean_breakdown(&losses);
        log::debug!(
            "epoch {epoch}: softmax {:.5} center {:.5} total {:.5}",
            mean.softmax,
            mean.center,
            mean.total
        );
        log.push((epoch, mean));
    }
    let final_intra_class_distance = mean_intra_class_distance(&params, &inputs, &labels);
    Ok((
        params,
        TrainLog {
            epochs: log,
            initial_intra_class_distance,
            final_intra_class_distance,
            class_ids,
        },
    ))
}

/// Features of every item, one record per item in input order.
pub fn embed_dataset(
    params: &ModelParams,
    items: &[EmbedItem],
) -> Result<EmbeddingSet, ModelError> {
    let records: Vec<EmbeddingRecord> = items
        .par_iter()
        .map(|it| {
            let input = prepare_input(params.spec(), &it.canvas)?;
            let feature = forward_cached(params, &input).feature;
            Ok(EmbeddingRecord {
                id: it.id,
                class_id: it.class_id,
                modality: it.modality,
                vector: feature.iter().map(|&v| v as f32).collect(),
            })
        })
        .collect::<Result<_, ModelError>>()?;
    Ok(EmbeddingSet::new(params.feature_dim(), records)?)
}
