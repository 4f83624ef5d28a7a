//! Small convolutional network with reverse-mode gradients, and its trainer.
//!
//! The network is a plain layer stack. Layers before `head_start` form the
//! encoder, whose output is the embedding; the rest is the prediction head,
//! ending in one raw output unit. Grade models read that unit as a logit,
//! age models map it affinely to years.

mod checkpoint;
mod layers;
mod optim;

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_network, read_params, save_network, write_params, CheckpointMeta};
pub use layers::Layer;
pub use optim::{
    adam_step, bce_logit_grad, loss_bce, loss_smooth_l1, sgd_step, sigmoid, smooth_l1_grad, AdamConfig, AdamState,
    SgdCyclicConfig, SgdState, PROB_CLAMP,
};

use crate::error::{Error, Result};
use crate::{par, rng};

pub const BIAS_FILL: f64 = 0.01;
pub const SMOOTH_L1_BETA: f64 = 1.0;
const TRAIN_MASK_TAG: u64 = 0x74_7261_696e;
const SHUFFLE_TAG: u64 = 0x7368_7566;
/// Samples per gradient shard. Shards are summed in a fixed order, so the
/// result is independent of the worker count.
const GRAD_SHARD: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values for shape {shape:?}", shape.iter().product::<usize>()),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_array2(a: &Array2<f64>) -> Self {
        Self {
            shape: vec![a.nrows(), a.ncols()],
            data: a.iter().copied().collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub tensors: Vec<NamedTensor>,
    pub init_seed: u64,
}

impl NetworkParams {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.tensor.data.iter().all(|v| v.is_finite()))
    }

    /// Rounds every value to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            t.tensor.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Grade,
    Age,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Grade => "grade",
            Task::Age => "age",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grade" => Ok(Task::Grade),
            "age" => Ok(Task::Age),
            other => Err(Error::Parse(format!("unknown task '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Full,
    FrozenEncoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    SgdCyclic,
}

/// How the raw output unit becomes a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutputMap {
    /// Probability `sigmoid(z)`.
    Logit,
    /// `offset + scale * z`.
    Affine { offset: f64, scale: f64 },
}

impl OutputMap {
    pub fn for_task(task: Task, targets: &[f64]) -> Self {
        match task {
            Task::Grade => OutputMap::Logit,
            Task::Age => {
                let n = targets.len().max(1) as f64;
                let mean = targets.iter().sum::<f64>() / n;
                let var = targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
                let scale = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
                OutputMap::Affine { offset: mean, scale }
            }
        }
    }

    pub fn apply(&self, z: f64) -> f64 {
        match *self {
            OutputMap::Logit => sigmoid(z),
            OutputMap::Affine { offset, scale } => offset + scale * z,
        }
    }

    /// Loss and its derivative w.r.t. the raw output.
    pub fn loss(&self, z: f64, target: f64) -> (f64, f64) {
        match *self {
            OutputMap::Logit => (loss_bce(sigmoid(z), target), bce_logit_grad(z, target)),
            OutputMap::Affine { offset, scale } => {
                let pred = offset + scale * z;
                (
                    loss_smooth_l1(pred, target, SMOOTH_L1_BETA),
                    scale * smooth_l1_grad(pred, target, SMOOTH_L1_BETA),
                )
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// Temporal conv, spatial conv, square, mean pool, log, linear embedding;
    /// head is dropout plus a linear output unit.
    Shallow {
        channels: usize,
        samples: usize,
        temporal_filters: usize,
        kernel: usize,
        spatial_filters: usize,
        pool_window: usize,
        pool_stride: usize,
        embed_dim: usize,
        dropout: f64,
    },
    /// Dropout plus a linear output unit over fixed features.
    Head { inputs: usize, dropout: f64 },
    Custom {
        input_shape: Vec<usize>,
        layers: Vec<Layer>,
        head_start: usize,
    },
}

impl Architecture {
    pub fn shallow(channels: usize, samples: usize) -> Self {
        Architecture::Shallow {
            channels,
            samples,
            temporal_filters: 8,
            kernel: 25,
            spatial_filters: 8,
            pool_window: 75,
            pool_stride: 15,
            embed_dim: 128,
            dropout: 0.5,
        }
    }

    pub fn head(inputs: usize) -> Self {
        Architecture::Head { inputs, dropout: 0.5 }
    }

    fn build(&self) -> Result<(Vec<usize>, Vec<Layer>, usize)> {
        match *self {
            Architecture::Shallow {
                channels,
                samples,
                temporal_filters,
                kernel,
                spatial_filters,
                pool_window,
                pool_stride,
                embed_dim,
                dropout,
            } => {
                if samples < kernel || samples - kernel + 1 < pool_window {
                    return Err(Error::InvalidParameter(format!(
                        "{samples} samples are too few for kernel {kernel} and pool window {pool_window}"
                    )));
                }
                let pooled = (samples - kernel + 1 - pool_window) / pool_stride + 1;
                let layers = vec![
                    Layer::TemporalConv {
                        filters: temporal_filters,
                        kernel,
                    },
                    Layer::SpatialConv {
                        outputs: spatial_filters,
                        filters: temporal_filters,
                        channels,
                    },
                    Layer::Square,
                    Layer::MeanPool {
                        window: pool_window,
                        stride: pool_stride,
                    },
                    Layer::SafeLog { floor: 1e-6 },
                    Layer::Flatten,
                    Layer::Dropout { p: dropout },
                    Layer::Linear {
                        inputs: spatial_filters * pooled,
                        outputs: embed_dim,
                    },
                    Layer::Dropout { p: dropout },
                    Layer::Linear {
                        inputs: embed_dim,
                        outputs: 1,
                    },
                ];
                Ok((vec![channels, samples], layers, 8))
            }
            Architecture::Head { inputs, dropout } => Ok((
                vec![inputs],
                vec![Layer::Dropout { p: dropout }, Layer::Linear { inputs, outputs: 1 }],
                0,
            )),
            Architecture::Custom {
                ref input_shape,
                ref layers,
                head_start,
            } => Ok((input_shape.clone(), layers.clone(), head_start)),
        }
    }
}

/// Dropout state of a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Masks<'a> {
    Off,
    /// Masks drawn from the stream `(seed, key.., layer index)`. `rate`
    /// replaces the per-layer drop probability when set.
    Keyed {
        seed: u64,
        key: &'a [u64],
        rate: Option<f64>,
    },
}

impl Masks<'_> {
    /// Inverted-dropout mask for `layer`, or `None` when inactive.
    pub fn mask(&self, layer_index: usize, layer: &Layer, n: usize) -> Option<Vec<f64>> {
        let Layer::Dropout { p } = *layer else {
            return None;
        };
        match *self {
            Masks::Off => None,
            Masks::Keyed { seed, key, rate } => {
                let p = rate.unwrap_or(p);
                if p <= 0.0 {
                    return None;
                }
                let mut parts = key.to_vec();
                parts.push(layer_index as u64);
                Some(dropout_mask(n, p, &mut rng::stream(seed, &parts)))
            }
        }
    }
}

/// Bernoulli keep mask with keep probability `1 - p`, scaled by `1/(1-p)`.
pub fn dropout_mask<R: Rng>(n: usize, p: f64, r: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..n).map(|_| if r.random::<f64>() < p { 0.0 } else { keep }).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: Architecture,
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    head_start: usize,
    /// Index of each layer's weight tensor in `params` (bias follows it).
    slots: Vec<Option<usize>>,
    shapes: Vec<Vec<usize>>,
    pub params: NetworkParams,
    pub output: OutputMap,
}

/// Xavier-uniform weights (gain 1) and constant 0.01 biases.
pub fn init_params(arch: &Architecture, seed: u64) -> Result<NetworkParams> {
    let (_, layers, _) = arch.build()?;
    let mut tensors = Vec::new();
    for (i, layer) in layers.iter().enumerate() {
        let (Some((ws, bs)), Some((fan_in, fan_out))) = (layer.param_shapes(), layer.fans()) else {
            continue;
        };
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("bound is finite");
        let mut r = rng::stream(seed, &[i as u64]);
        let n: usize = ws.iter().product();
        let w: Vec<f64> = (0..n).map(|_| dist.sample(&mut r)).collect();
        let nb = bs.iter().product();
        tensors.push(NamedTensor {
            name: format!("{i}.{}.weight", layer.name()),
            tensor: Tensor::from_parts(ws, w),
        });
        tensors.push(NamedTensor {
            name: format!("{i}.{}.bias", layer.name()),
            tensor: Tensor::from_parts(bs, vec![BIAS_FILL; nb]),
        });
    }
    Ok(NetworkParams {
        tensors,
        init_seed: seed,
    })
}

impl Network {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        let params = init_params(&arch, seed)?;
        Self::from_params(arch, params, OutputMap::Logit)
    }

    pub fn from_params(arch: Architecture, params: NetworkParams, output: OutputMap) -> Result<Self> {
        let (input_shape, layers, head_start) = arch.build()?;
        if head_start > layers.len() {
            return Err(Error::InvalidParameter(format!(
                "head starts at layer {head_start} of {}",
                layers.len()
            )));
        }
        let mut shapes = vec![input_shape.clone()];
        let mut slots = Vec::with_capacity(layers.len());
        let mut next = 0;
        for (i, layer) in layers.iter().enumerate() {
            if let Layer::Dropout { p } = *layer {
                if !(0.0..1.0).contains(&p) {
                    return Err(Error::InvalidParameter(format!("dropout rate {p} outside [0, 1)")));
                }
            }
            let out = layer.output_shape(&shapes[i])?;
            shapes.push(out);
            match layer.param_shapes() {
                Some((ws, bs)) => {
                    for (k, want) in [ws, bs].into_iter().enumerate() {
                        let t = params.tensors.get(next + k).ok_or_else(|| Error::ShapeMismatch {
                            expected: format!("parameters for layer {i}"),
                            got: format!("{} tensors", params.tensors.len()),
                        })?;
                        if t.tensor.shape != want {
                            return Err(Error::ShapeMismatch {
                                expected: format!("{} {want:?}", t.name),
                                got: format!("{:?}", t.tensor.shape),
                            });
                        }
                    }
                    slots.push(Some(next));
                    next += 2;
                }
                None => slots.push(None),
            }
        }
        if next != params.tensors.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{next} tensors"),
                got: format!("{} tensors", params.tensors.len()),
            });
        }
        if shapes.last().map(|s| s.iter().product::<usize>()) != Some(1) {
            return Err(Error::InvalidParameter("network must end in one output unit".into()));
        }
        Ok(Self {
            arch,
            input_shape,
            layers,
            head_start,
            slots,
            shapes,
            params,
            output,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn head_start(&self) -> usize {
        self.head_start
    }

    /// Activation shape entering layer `i` (`i == layers.len()` is the output).
    pub fn shape_at(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn embedding_dim(&self) -> usize {
        self.shapes[self.head_start].iter().product()
    }

    pub fn first_dropout(&self) -> Option<usize> {
        self.layers.iter().position(|l| matches!(l, Layer::Dropout { .. }))
    }

    /// Index of the first layer that runs stochastically in MC inference.
    /// Encoder dropout only counts for fully trained networks.
    pub fn stochastic_start(&self, regime: Regime) -> usize {
        match regime {
            Regime::Full => self.first_dropout().unwrap_or(self.layers.len()),
            Regime::FrozenEncoder => self.layers[self.head_start..]
                .iter()
                .position(|l| matches!(l, Layer::Dropout { .. }))
                .map_or(self.layers.len(), |p| self.head_start + p),
        }
    }

    fn layer_params(&self, i: usize) -> Option<(&Tensor, &Tensor)> {
        self.slots[i].map(|s| (&self.params.tensors[s].tensor, &self.params.tensors[s + 1].tensor))
    }

    /// Runs layer `i` alone with an explicit dropout mask.
    pub fn forward_layer(&self, i: usize, x: &Tensor, mask: Option<&[f64]>) -> Result<Tensor> {
        self.layers[i].forward(x, self.layer_params(i), mask)
    }

    fn check_input(&self, x: &Tensor, at: usize) -> Result<()> {
        if x.shape() != self.shapes[at].as_slice() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.shapes[at]),
                got: format!("{:?}", x.shape()),
            });
        }
        Ok(())
    }

    /// Runs layers `from..to` on an activation entering layer `from`.
    pub fn forward_range(&self, x: &Tensor, from: usize, to: usize, masks: Masks<'_>) -> Result<Tensor> {
        self.check_input(x, from)?;
        let mut cur = x.clone();
        for i in from..to {
            let layer = &self.layers[i];
            let mask = masks.mask(i, layer, cur.len());
            cur = layer.forward(&cur, self.layer_params(i), mask.as_deref())?;
            if cur.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    layer: format!("{i}:{}", layer.name()),
                });
            }
        }
        Ok(cur)
    }

    /// Raw output unit for an activation entering layer `from`.
    pub fn raw_from(&self, x: &Tensor, from: usize, masks: Masks<'_>) -> Result<f64> {
        Ok(self.forward_range(x, from, self.layers.len(), masks)?.data[0])
    }

    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_range(x, 0, self.head_start, Masks::Off)
    }

    /// Deterministic prediction (probability or years) for one input.
    pub fn predict(&self, x: &Tensor) -> Result<f64> {
        Ok(self.output.apply(self.raw_from(x, 0, Masks::Off)?))
    }

    /// Loss of one sample and its gradient, added into `grads`, for the
    /// layers `from..`. Only tensors of those layers receive gradients.
    pub fn accumulate_grad(
        &self,
        x: &Tensor,
        target: f64,
        from: usize,
        masks: Masks<'_>,
        grads: &mut [Vec<f64>],
    ) -> Result<f64> {
        self.check_input(x, from)?;
        let n = self.layers.len();
        let mut acts = Vec::with_capacity(n - from + 1);
        let mut mask_store = Vec::with_capacity(n - from);
        acts.push(x.clone());
        for i in from..n {
            let layer = &self.layers[i];
            let cur = acts.last().expect("input pushed");
            let mask = masks.mask(i, layer, cur.len());
            let out = layer.forward(cur, self.layer_params(i), mask.as_deref())?;
            if out.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    layer: format!("{i}:{}", layer.name()),
                });
            }
            acts.push(out);
            mask_store.push(mask);
        }
        let z = acts[n - from].data[0];
        let (loss, dz) = self.output.loss(z, target);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { layer: "loss".into() });
        }
        let mut g = vec![dz];
        for i in (from..n).rev() {
            let k = i - from;
            let pgrads = self.slots[i].map(|s| {
                let (a, b) = grads.split_at_mut(s + 1);
                (a[s].as_mut_slice(), b[0].as_mut_slice())
            });
            match self.layers[i].backward(
                &acts[k],
                &acts[k + 1],
                &g,
                self.layer_params(i),
                mask_store[k].as_deref(),
                pgrads,
                i > from,
            ) {
                Some(gx) => g = gx,
                None => break,
            }
        }
        Ok(loss)
    }

    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.params.tensors.iter().map(|t| vec![0.0; t.tensor.len()]).collect()
    }

    /// Indices of the parameter tensors belonging to layers `from..`.
    pub fn tensors_from(&self, from: usize) -> Vec<usize> {
        self.slots[from..].iter().flatten().flat_map(|&s| [s, s + 1]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub adam: AdamConfig,
    pub sgd: SgdCyclicConfig,
    pub dropout_p: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            adam: AdamConfig::default(),
            sgd: SgdCyclicConfig::default(),
            dropout_p: 0.5,
            max_epochs: 500,
            batch_size: 64,
            patience: 20,
            min_delta: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// Inputs (activations entering the first trained layer) with targets.
#[derive(Debug, Clone, Copy)]
pub struct Labeled<'a> {
    pub inputs: &'a [Tensor],
    pub targets: &'a [f64],
}

impl<'a> Labeled<'a> {
    pub fn new(inputs: &'a [Tensor], targets: &'a [f64]) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(Error::LengthMismatch(inputs.len(), targets.len()));
        }
        if inputs.is_empty() {
            return Err(Error::InvalidParameter("empty training split".into()));
        }
        Ok(Self { inputs, targets })
    }
}

enum OptState {
    Adam(AdamState),
    Sgd(SgdState),
}

/// Mean loss without dropout.
pub fn mean_loss(net: &Network, data: Labeled<'_>, from: usize) -> Result<f64> {
    let idx: Vec<usize> = (0..data.inputs.len()).collect();
    let losses = par::try_map(&idx, |&i| {
        let z = net.raw_from(&data.inputs[i], from, Masks::Off)?;
        Ok::<_, Error>(net.output.loss(z, data.targets[i]).0)
    })?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Mean gradient and mean loss over `batch` (indices into `data`).
fn batch_grad(
    net: &Network,
    data: Labeled<'_>,
    batch: &[usize],
    from: usize,
    seed: u64,
    epoch: usize,
) -> Result<(Vec<Vec<f64>>, f64)> {
    let shards: Vec<&[usize]> = batch.chunks(GRAD_SHARD).collect();
    let parts = par::try_map(&shards, |shard| {
        let mut g = net.zero_grads();
        let mut loss = 0.0;
        for &i in shard.iter() {
            let key = [TRAIN_MASK_TAG, epoch as u64, i as u64];
            let masks = Masks::Keyed {
                seed,
                key: &key,
                rate: None,
            };
            loss += net.accumulate_grad(&data.inputs[i], data.targets[i], from, masks, &mut g)?;
        }
        Ok::<_, Error>((g, loss))
    })?;
    let mut iter = parts.into_iter();
    let (mut total, mut loss) = iter.next().expect("batch is non-empty");
    for (g, l) in iter {
        for (t, p) in total.iter_mut().zip(&g) {
            t.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        }
        loss += l;
    }
    let scale = 1.0 / batch.len() as f64;
    total.iter_mut().flatten().for_each(|v| *v *= scale);
    Ok((total, loss * scale))
}

/// Fits layers `from..` of `net` to `train`, early-stopping on `val`, and
/// leaves the best parameters (by validation loss) in place.
pub fn fit(
    net: &mut Network,
    from: usize,
    train: Labeled<'_>,
    val: Labeled<'_>,
    cfg: &TrainConfig,
) -> Result<Vec<HistoryRow>> {
    if cfg.batch_size == 0 {
        return Err(Error::InvalidParameter("batch size must be positive".into()));
    }
    let trainable = net.tensors_from(from);
    let n_params: usize = trainable.iter().map(|&t| net.params.tensors[t].tensor.len()).sum();
    let mut state = match cfg.optimizer {
        OptimizerKind::Adam => OptState::Adam(AdamState::new(n_params)),
        OptimizerKind::SgdCyclic => OptState::Sgd(SgdState::new(n_params)),
    };
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, net.params.clone());
    let mut since_best = 0;
    let mut step = 0usize;
    let mut flat_p = vec![0.0; n_params];
    let mut flat_g = vec![0.0; n_params];

    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.inputs.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[SHUFFLE_TAG, epoch as u64]));
        let epoch_lr = match cfg.optimizer {
            OptimizerKind::Adam => cfg.adam.lr_at_epoch(epoch),
            OptimizerKind::SgdCyclic => cfg.sgd.lr_at_step(step),
        };
        let mut train_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (grads, loss) = batch_grad(net, train, batch, from, cfg.seed, epoch)?;
            train_loss += loss * batch.len() as f64;

            let mut off = 0;
            for &t in &trainable {
                let p = net.params.tensors[t].tensor.data();
                flat_p[off..off + p.len()].copy_from_slice(p);
                flat_g[off..off + p.len()].copy_from_slice(&grads[t]);
                off += p.len();
            }
            match &mut state {
                OptState::Adam(s) => adam_step(&mut flat_p, &flat_g, s, epoch_lr, &cfg.adam),
                OptState::Sgd(s) => {
                    let lr = cfg.sgd.lr_at_step(step);
                    sgd_step(&mut flat_p, &flat_g, s, lr, &cfg.sgd)
                }
            }
            let mut off = 0;
            for &t in &trainable {
                let p = net.params.tensors[t].tensor.data_mut();
                let n = p.len();
                p.copy_from_slice(&flat_p[off..off + n]);
                off += n;
            }
            step += 1;
        }
        train_loss /= train.inputs.len() as f64;
        let val_loss = mean_loss(net, val, from)?;
        log::debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5} lr {epoch_lr:.2e}");
        history.push(HistoryRow {
            epoch,
            train_loss,
            val_loss,
            lr: epoch_lr,
        });
        if val_loss < best.0 - cfg.min_delta {
            best = (val_loss, net.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    net.params = best.1;
    Ok(history)
}

/// Trains `net` on raw inputs in the given regime. In the frozen regime the
/// encoder output is computed once and only the head is fitted.
pub fn train(
    net: &mut Network,
    regime: Regime,
    task: Task,
    train: Labeled<'_>,
    val: Labeled<'_>,
    cfg: &TrainConfig,
) -> Result<Vec<HistoryRow>> {
    net.output = OutputMap::for_task(task, train.targets);
    let from = match regime {
        Regime::Full => 0,
        Regime::FrozenEncoder => net.head_start,
    };
    let history = match regime {
        Regime::Full => fit(net, 0, train, val, cfg)?,
        Regime::FrozenEncoder => {
            let embed = |xs: &[Tensor]| par::try_map(xs, |x| net.embed(x));
            let tr = embed(train.inputs)?;
            let va = embed(val.inputs)?;
            fit(
                net,
                from,
                Labeled::new(&tr, train.targets)?,
                Labeled::new(&va, val.targets)?,
                cfg,
            )?
        }
    };
    for t in net.tensors_from(from) {
        let data = net.params.tensors[t].tensor.data_mut();
        data.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
    Ok(history)
}
