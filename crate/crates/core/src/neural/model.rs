//! Model specification, construction, presets and parameter files.

use std::fmt;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::MultiHeadAttention;
use super::layers::*;
use super::loss::softmax;
use super::tensor::Tensor;
use super::NeuralError;

fn default_eps() -> f64 {
    1e-5
}

fn default_momentum() -> f64 {
    0.1
}

fn default_alpha() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        filters: usize,
        kernel: [usize; 2],
        #[serde(default)]
        padding: Padding,
        #[serde(default)]
        bias: bool,
    },
    /// One group per input map; `multiplier` output maps per group.
    DepthwiseConv2d {
        multiplier: usize,
        kernel: [usize; 2],
        #[serde(default)]
        padding: Padding,
        #[serde(default)]
        bias: bool,
    },
    SeparableConv2d {
        filters: usize,
        kernel: [usize; 2],
        #[serde(default)]
        padding: Padding,
        #[serde(default)]
        bias: bool,
    },
    BatchNorm {
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    Elu {
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
    AvgPool2d {
        kernel: [usize; 2],
    },
    Dropout {
        rate: f64,
    },
    Flatten,
    Dense {
        units: usize,
    },
    ToSequence,
    MultiHeadAttention {
        heads: usize,
    },
    SequenceMeanPool,
}

impl LayerSpec {
    pub fn batch_norm() -> Self {
        LayerSpec::BatchNorm { eps: default_eps(), momentum: default_momentum() }
    }

    pub fn elu() -> Self {
        LayerSpec::Elu { alpha: default_alpha() }
    }
}

/// A model as data: per-sample input shape, layer list and initialiser seed.
/// The final layer must produce `n_classes` logits; softmax is applied by
/// the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub input: Vec<usize>,
    pub n_classes: usize,
    pub seed: u64,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Mlp,
    Eegnet,
    MhaEegnet,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Mlp => "mlp",
            ModelKind::Eegnet => "eegnet",
            ModelKind::MhaEegnet => "mha-eegnet",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mlp" => Ok(ModelKind::Mlp),
            "eegnet" => Ok(ModelKind::Eegnet),
            "mha-eegnet" => Ok(ModelKind::MhaEegnet),
            other => Err(format!("unknown model {other:?} (expected mlp, eegnet or mha-eegnet)")),
        }
    }
}

/// Hyperparameters shared by the EEGNet-style presets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EegnetParams {
    pub f1: usize,
    pub depth: usize,
    pub f2: usize,
    pub temporal_kernel: usize,
    pub separable_kernel: usize,
    pub pool1: usize,
    pub pool2: usize,
    pub dropout: f64,
    pub heads: usize,
}

impl EegnetParams {
    /// Temporal kernel of half a second and separable kernel of an eighth,
    /// both in samples at `fs`.
    pub fn for_rate(fs: f64) -> Self {
        EegnetParams {
            f1: 8,
            depth: 2,
            f2: 16,
            temporal_kernel: ((fs / 2.0).round() as usize).max(1),
            separable_kernel: ((fs / 8.0).round() as usize).max(1),
            pool1: 4,
            pool2: 4,
            dropout: 0.25,
            heads: 4,
        }
    }
}

/// Preset specs for `channels × samples` single-map input.
pub fn preset(kind: ModelKind, channels: usize, samples: usize, fs: f64, seed: u64) -> ModelSpec {
    let p = EegnetParams::for_rate(fs);
    let front = vec![
        LayerSpec::Conv2d { filters: p.f1, kernel: [1, p.temporal_kernel], padding: Padding::Same, bias: false },
        LayerSpec::batch_norm(),
        LayerSpec::DepthwiseConv2d { multiplier: p.depth, kernel: [channels, 1], padding: Padding::Valid, bias: false },
        LayerSpec::batch_norm(),
        LayerSpec::elu(),
        LayerSpec::AvgPool2d { kernel: [1, p.pool1] },
        LayerSpec::Dropout { rate: p.dropout },
        LayerSpec::SeparableConv2d { filters: p.f2, kernel: [1, p.separable_kernel], padding: Padding::Same, bias: false },
        LayerSpec::batch_norm(),
        LayerSpec::elu(),
        LayerSpec::AvgPool2d { kernel: [1, p.pool2] },
        LayerSpec::Dropout { rate: p.dropout },
    ];
    let layers = match kind {
        ModelKind::Mlp => vec![
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 64 },
            LayerSpec::elu(),
            LayerSpec::Dropout { rate: p.dropout },
            LayerSpec::Dense { units: 3 },
        ],
        ModelKind::Eegnet => front.into_iter().chain([LayerSpec::Flatten, LayerSpec::Dense { units: 3 }]).collect(),
        ModelKind::MhaEegnet => front
            .into_iter()
            .chain([
                LayerSpec::ToSequence,
                LayerSpec::MultiHeadAttention { heads: p.heads },
                LayerSpec::SequenceMeanPool,
                LayerSpec::Dense { units: 3 },
            ])
            .collect(),
    };
    ModelSpec { name: kind.to_string(), input: vec![1, channels, samples], n_classes: 3, seed, layers }
}

fn rank3(kind: &str, s: &[usize]) -> Result<[usize; 3], NeuralError> {
    <[usize; 3]>::try_from(s).map_err(|_| NeuralError::Shape(format!("{kind} needs [maps, height, width] input, got {s:?}")))
}

fn rank2(kind: &str, s: &[usize]) -> Result<[usize; 2], NeuralError> {
    <[usize; 2]>::try_from(s).map_err(|_| NeuralError::Shape(format!("{kind} needs [length, width] input, got {s:?}")))
}

fn build_layer(spec: &LayerSpec, input: &[usize], rng: &mut ChaCha8Rng) -> Result<Box<dyn Layer>, NeuralError> {
    Ok(match *spec {
        LayerSpec::Conv2d { filters, kernel, padding, bias } => {
            Box::new(Conv2d::new(rank3("conv2d", input)?, filters, kernel, 1, padding, bias, rng)?)
        }
        LayerSpec::DepthwiseConv2d { multiplier, kernel, padding, bias } => {
            let s = rank3("depthwise_conv2d", input)?;
            Box::new(Conv2d::new(s, s[0] * multiplier, kernel, s[0], padding, bias, rng)?)
        }
        LayerSpec::SeparableConv2d { filters, kernel, padding, bias } => {
            Box::new(SeparableConv2d::new(rank3("separable_conv2d", input)?, filters, kernel, padding, bias, rng)?)
        }
        LayerSpec::BatchNorm { eps, momentum } => Box::new(BatchNorm::new(input, eps, momentum)?),
        LayerSpec::Elu { alpha } => Box::new(Elu::new(input, alpha)),
        LayerSpec::AvgPool2d { kernel } => Box::new(AvgPool2d::new(rank3("avg_pool2d", input)?, kernel)?),
        LayerSpec::Dropout { rate } => Box::new(Dropout::new(input, rate)?),
        LayerSpec::Flatten => Box::new(Reshape::flatten(input)),
        LayerSpec::Dense { units } => {
            if input.len() != 1 {
                return Err(NeuralError::Shape(format!("dense needs flat input, got {input:?}")));
            }
            Box::new(Dense::new(input[0], units, rng))
        }
        LayerSpec::ToSequence => Box::new(ToSequence::new(rank3("to_sequence", input)?)?),
        LayerSpec::MultiHeadAttention { heads } => {
            Box::new(MultiHeadAttention::new(rank2("multi_head_attention", input)?, heads, rng)?)
        }
        LayerSpec::SequenceMeanPool => Box::new(SequenceMeanPool::new(rank2("sequence_mean_pool", input)?)),
    })
}

pub struct Model {
    spec: ModelSpec,
    layers: Vec<Box<dyn Layer>>,
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model").field("spec", &self.spec).finish_non_exhaustive()
    }
}

impl Model {
    /// Builds the layers in order, checking that shapes chain.
    pub fn build(spec: &ModelSpec) -> Result<Model, NeuralError> {
        if spec.input.is_empty() || spec.input.contains(&0) {
            return Err(NeuralError::Shape(format!("invalid input shape {:?}", spec.input)));
        }
        let mut rng = crate::rng::stream(spec.seed, "init");
        let mut shape = spec.input.clone();
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, ls) in spec.layers.iter().enumerate() {
            let layer = build_layer(ls, &shape, &mut rng).map_err(|e| e.in_layer(i, ls))?;
            shape = layer.output_shape();
            layers.push(layer);
        }
        if shape != [spec.n_classes] {
            return Err(NeuralError::Shape(format!("model ends in {shape:?}, expected [{}] logits", spec.n_classes)));
        }
        Ok(Model { spec: spec.clone(), layers })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers_mut(&mut self) -> &mut [Box<dyn Layer>] {
        &mut self.layers
    }

    pub fn forward_logits(&mut self, x: &Tensor, ctx: &mut ForwardCtx<'_>) -> Result<Tensor, NeuralError> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            h = layer.forward(&h, ctx).map_err(|e| e.in_layer(i, &self.spec.layers[i]))?;
        }
        Ok(h)
    }

    /// Class probabilities, `[B, n_classes]`.
    pub fn forward(&mut self, x: &Tensor, ctx: &mut ForwardCtx<'_>) -> Result<Tensor, NeuralError> {
        Ok(softmax(&self.forward_logits(x, ctx)?))
    }

    /// Inference-mode probabilities, computed in chunks of `chunk` samples.
    pub fn predict_proba(&mut self, x: &Tensor, chunk: usize) -> Result<Tensor, NeuralError> {
        let n = x.batch();
        let mut rng = crate::rng::stream(0, "inference");
        let mut out = Vec::with_capacity(n * self.spec.n_classes);
        let idx: Vec<usize> = (0..n).collect();
        for part in idx.chunks(chunk.max(1)) {
            let mut ctx = ForwardCtx { training: false, rng: &mut rng };
            out.extend_from_slice(self.forward(&x.gather(part), &mut ctx)?.data());
        }
        Tensor::new(vec![n, self.spec.n_classes], out)
    }

    /// Backpropagates `grad` (with respect to the logits). The first layer's
    /// input gradient is not needed and is skipped.
    pub fn backward(&mut self, grad: &Tensor) -> Result<(), NeuralError> {
        let mut g = grad.clone();
        for i in (0..self.layers.len()).rev() {
            match self.layers[i].backward(&g, i > 0).map_err(|e| e.in_layer(i, &self.spec.layers[i]))? {
                Some(next) => g = next,
                None => break,
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for l in &mut self.layers {
            for p in l.params_mut() {
                p.grad.fill(0.0);
            }
        }
    }

    /// Every parameter and buffer with its qualified name `NN.kind.param`.
    pub fn named_params(&self) -> Vec<(String, &Param)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.params().into_iter().map(move |p| (format!("{i:02}.{}.{}", l.kind(), p.name), p)))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.named_params().iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.value.len()).sum()
    }

    pub fn parameter_set(&self) -> ParameterSet {
        let mut set = ParameterSet::default();
        for (name, p) in self.named_params() {
            set.push(&name, &p.value, p.trainable);
        }
        set
    }

    /// Copies values from `set`, which must name every parameter with a
    /// matching shape.
    pub fn load_parameters(&mut self, set: &ParameterSet) -> Result<(), NeuralError> {
        let names: Vec<String> = self.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, p) in names.iter().zip(self.params_mut()) {
            let t = set.get(name).ok_or_else(|| NeuralError::Parameters(format!("missing parameter {name}")))?;
            if t.shape() != p.value.shape() {
                return Err(NeuralError::Parameters(format!(
                    "{name}: stored shape {:?}, model expects {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the value blob, in values.
    pub offset: usize,
    pub trainable: bool,
}

/// Named tensors stored as one flat little-endian `f64` blob plus a JSON
/// index of names, shapes and offsets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    pub entries: Vec<ParamEntry>,
    pub values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParamIndex {
    format: String,
    count: usize,
    entries: Vec<ParamEntry>,
}

impl ParameterSet {
    pub fn push(&mut self, name: &str, value: &Tensor, trainable: bool) {
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: value.shape().to_vec(),
            offset: self.values.len(),
            trainable,
        });
        self.values.extend_from_slice(value.data());
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        let e = self.entries.iter().find(|e| e.name == name)?;
        let n: usize = e.shape.iter().product();
        Tensor::new(e.shape.clone(), self.values[e.offset..e.offset + n].to_vec()).ok()
    }

    /// Writes `<stem>.bin` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> std::io::Result<()> {
        let bytes: Vec<u8> = self.values.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(dir.join(format!("{stem}.bin")), bytes)?;
        let index = ParamIndex { format: "f64-le".into(), count: self.values.len(), entries: self.entries.clone() };
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&index)? + "\n")
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self, NeuralError> {
        let err = |e: std::io::Error| NeuralError::Parameters(format!("{}: {e}", dir.join(stem).display()));
        let index: ParamIndex = serde_json::from_slice(&std::fs::read(dir.join(format!("{stem}.json"))).map_err(err)?)
            .map_err(|e| NeuralError::Parameters(e.to_string()))?;
        let bytes = std::fs::read(dir.join(format!("{stem}.bin"))).map_err(err)?;
        if index.format != "f64-le" || bytes.len() != 8 * index.count {
            return Err(NeuralError::Parameters(format!(
                "blob holds {} bytes, index expects {} f64-le values",
                bytes.len(),
                index.count
            )));
        }
        let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok(ParameterSet { entries: index.entries, values })
    }
}
