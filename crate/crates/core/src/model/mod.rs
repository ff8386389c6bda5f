//! Single-stream embedding network shared by natural images and encoded text
//! images, trained with softmax cross-entropy plus an in-batch center loss.

mod checkpoint;
mod loss;
mod network;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
};
pub use loss::{
    center_distance, center_loss, joint_loss_and_grads, softmax_cross_entropy, ClassCenters,
    LossBreakdown, LossConfig, MiniBatch,
};
pub use network::{forward, forward_batch, prepare_input, ForwardCache};
pub use train::{
    augment_training_set, embed_dataset, mean_intra_class_distance, train, CenterMode, DecayMode,
    EmbedItem, TrainAugmentation, TrainConfig, TrainItem, TrainLog,
};

use crate::embedding::EmbeddingError;
use crate::encoder::EncodeError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input is {found_h}x{found_w}, network expects {expected}x{expected}")]
    InputSize {
        expected: usize,
        found_h: usize,
        found_w: usize,
    },
    #[error("invalid backbone: {0}")]
    Backbone(String),
    #[error("empty feature group")]
    EmptyGroup,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite loss in batch (sample {sample:?})")]
    NonFinite { sample: Option<usize> },
    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub(crate) fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation value.
    pub(crate) fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Architecture of the backbone: a fixed average-pooling stem, a stack of
/// `3×3 conv → activation → 2×2 average pool` stages, and a linear layer to
/// the feature vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneSpec {
    pub input_size: usize,
    pub input_pool: usize,
    pub conv_channels: Vec<usize>,
    pub feature_dim: usize,
    pub activation: Activation,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            input_size: 256,
            input_pool: 4,
            conv_channels: vec![4, 8, 16],
            feature_dim: 128,
            activation: Activation::Relu,
        }
    }
}

impl BackboneSpec {
    /// Default backbone for 128×128 inputs.
    pub fn small_input() -> Self {
        Self {
            input_size: 128,
            input_pool: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Backbone(m));
        if self.input_pool == 0
            || self.input_size == 0
            || !self.input_size.is_multiple_of(self.input_pool)
        {
            return bad(format!(
                "input {} not divisible by pool {}",
                self.input_size, self.input_pool
            ));
        }
        let stages = self.conv_channels.len() as u32;
        if !self.working_size().is_multiple_of(2usize.pow(stages))
            || self.working_size() < 2usize.pow(stages)
        {
            return bad(format!(
                "working size {} cannot be halved {stages} times",
                self.working_size()
            ));
        }
        if self.conv_channels.contains(&0) || self.feature_dim == 0 {
            return bad("zero-width layer".into());
        }
        Ok(())
    }

    /// Side of the tensor entering the first conv stage.
    pub fn working_size(&self) -> usize {
        self.input_size / self.input_pool
    }

    /// Flattened width of the tensor feeding the feature layer.
    pub fn flat_dim(&self) -> usize {
        let side = self.working_size() >> self.conv_channels.len();
        let channels = self.conv_channels.last().copied().unwrap_or(3);
        side * side * channels
    }
}

impl fmt::Display for BackboneSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let convs: Vec<String> = self.conv_channels.iter().map(|c| c.to_string()).collect();
        let act = match self.activation {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        };
        write!(
            f,
            "in={};pool={};conv={};feat={};act={}",
            self.input_size,
            self.input_pool,
            convs.join(","),
            self.feature_dim,
            act
        )
    }
}

impl FromStr for BackboneSpec {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |m: &str| ModelError::Backbone(format!("{m} in `{s}`"));
        let mut spec = BackboneSpec::default();
        for part in s.split(';').filter(|p| !p.is_empty()) {
            let (key, value) = part.split_once('=').ok_or_else(|| bad("missing `=`"))?;
            let num = |v: &str| v.parse::<usize>().map_err(|_| bad("bad number"));
            match key {
                "in" => spec.input_size = num(value)?,
                "pool" => spec.input_pool = num(value)?,
                "conv" => {
                    spec.conv_channels = value
                        .split(',')
                        .filter(|c| !c.is_empty())
                        .map(num)
                        .collect::<Result<_, _>>()?
                }
                "feat" => spec.feature_dim = num(value)?,
                "act" => {
                    spec.activation = match value {
                        "relu" => Activation::Relu,
                        "tanh" => Activation::Tanh,
                        _ => return Err(bad("unknown activation")),
                    }
                }
                _ => return Err(bad("unknown key")),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }
}

/// Trainable weights. Tensor order: for every conv stage its weight
/// `[out, in, 3, 3]` then bias `[out]`; the feature layer weight
/// `[feature_dim, flat_dim]` and bias; the classifier weight
/// `[classes, feature_dim]` and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    spec: BackboneSpec,
    num_classes: usize,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn shapes(spec: &BackboneSpec, num_classes: usize) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut in_ch = 3;
        for &out in &spec.conv_channels {
            shapes.push(vec![out, in_ch, 3, 3]);
            shapes.push(vec![out]);
            in_ch = out;
        }
        shapes.push(vec![spec.feature_dim, spec.flat_dim()]);
        shapes.push(vec![spec.feature_dim]);
        shapes.push(vec![num_classes, spec.feature_dim]);
        shapes.push(vec![num_classes]);
        shapes
    }

    pub fn zeros(spec: BackboneSpec, num_classes: usize) -> Result<Self, ModelError> {
        spec.validate()?;
        if num_classes == 0 {
            return Err(ModelError::Config("at least one class is required".into()));
        }
        let tensors = Self::shapes(&spec, num_classes)
            .into_iter()
            .map(Tensor::zeros)
            .collect();
        Ok(Self {
            spec,
            num_classes,
            tensors,
        })
    }

    /// Uniform fan-based initialization (He for ReLU, Glorot for tanh); biases start at zero.
    pub fn init(
        spec: BackboneSpec,
        num_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ModelError> {
        let mut params = Self::zeros(spec, num_classes)?;
        let activation = params.spec.activation;
        for t in params.tensors.iter_mut() {
            if t.shape.len() == 1 {
                continue;
            }
            let fan_out = t.shape[0];
            let fan_in: usize = t.shape[1..].iter().product();
            let is_conv = t.shape.len() == 4;
            let limit = if is_conv && activation == Activation::Relu {
                (6.0 / fan_in as f64).sqrt()
            } else {
                (6.0 / (fan_in + fan_out) as f64).sqrt()
            };
            for w in &mut t.data {
                *w = rng.gen_range(-limit..limit);
            }
        }
        Ok(params)
    }

    pub fn from_tensors(
        spec: BackboneSpec,
        num_classes: usize,
        tensors: Vec<Tensor>,
    ) -> Result<Self, ModelError> {
        spec.validate()?;
        let expected = Self::shapes(&spec, num_classes);
        let found: Vec<Vec<usize>> = tensors.iter().map(|t| t.shape.clone()).collect();
        if expected != found {
            return Err(ModelError::Checkpoint(format!(
                "tensor shapes {found:?} do not match backbone (expected {expected:?})"
            )));
        }
        if tensors
            .iter()
            .any(|t| t.data.len() != t.shape.iter().product::<usize>())
        {
            return Err(ModelError::Checkpoint("tensor data length mismatch".into()));
        }
        Ok(Self {
            spec,
            num_classes,
            tensors,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    fn stages(&self) -> usize {
        self.spec.conv_channels.len()
    }

    pub(crate) fn conv(&self, stage: usize) -> (&Tensor, &Tensor) {
        (&self.tensors[2 * stage], &self.tensors[2 * stage + 1])
    }

    pub(crate) fn feature_layer(&self) -> (&Tensor, &Tensor) {
        let k = 2 * self.stages();
        (&self.tensors[k], &self.tensors[k + 1])
    }

    pub(crate) fn classifier(&self) -> (&Tensor, &Tensor) {
        let k = 2 * self.stages() + 2;
        (&self.tensors[k], &self.tensors[k + 1])
    }

    pub fn feature_bias_mut(&mut self) -> &mut [f64] {
        let k = 2 * self.stages() + 1;
        &mut self.tensors[k].data
    }
}

/// Parameter gradients, tensor-for-tensor parallel to [`ModelParams::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            tensors: params
                .tensors
                .iter()
                .map(|t| vec![0.0; t.data.len()])
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn spec_string_round_trip() {
        let spec = BackboneSpec::default();
        let s = spec.to_string();
        assert_eq!(s, "in=256;pool=4;conv=4,8,16;feat=128;act=relu");
        assert_eq!(s.parse::<BackboneSpec>().unwrap(), spec);
        let linear: BackboneSpec = "in=8;pool=2;conv=;feat=4;act=tanh".parse().unwrap();
        assert_eq!(linear.flat_dim(), 3 * 4 * 4);
        assert!("in=10;pool=3".parse::<BackboneSpec>().is_err());
        assert!("in=8;pool=1;conv=2,2,2,2".parse::<BackboneSpec>().is_err());
    }

    #[test]
    fn default_shapes() {
        let spec = BackboneSpec::default();
        assert_eq!(spec.working_size(), 64);
        assert_eq!(spec.flat_dim(), 8 * 8 * 16);
        let p = ModelParams::zeros(spec, 5).unwrap();
        assert_eq!(BackboneSpec::small_input().working_size(), 64);
        assert_eq!(p.tensors().len(), 10);
        assert_eq!(p.tensors()[8].shape, vec![5, 128]);
    }

    #[test]
    fn init_is_seeded() {
        let a = ModelParams::init(
            BackboneSpec::default(),
            3,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let b = ModelParams::init(
            BackboneSpec::default(),
            3,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let c = ModelParams::init(
            BackboneSpec::default(),
            3,
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.is_finite());
    }
}
