//! The desk-scale convolutional classifier: spec, construction, training on
//! seen classes, head expansion for unseen classes, and checkpointing.

use crate::array::Array;
use crate::autodiff::{AutodiffError, Graph, Tensor};
use crate::container::{self, ContainerError};
use crate::optim::Adam;
use crate::rng::SplitMix64;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("unknown layer {0}")]
    UnknownLayer(String),
    #[error("label {label} outside seen range 0..{classes}")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("head expansion requires num_unseen >= 1")]
    NoUnseen,
    #[error("input shape {got:?} does not match spec {want:?}")]
    InputShape { got: Vec<usize>, want: Vec<usize> },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("checkpoint malformed: {0}")]
    Checkpoint(String),
}

type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv { in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize },
    Relu,
    AvgPool { k: usize },
    Gap,
    Fc { in_dim: usize, out_dim: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

/// Architecture description. Exactly one fully-connected classifier head,
/// which must be the final layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// (channels, height, width)
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq)]
enum Shape {
    Spatial(usize, usize, usize),
    Flat(usize),
}

impl NetworkSpec {
    /// conv(3->16)-relu-pool(2)-conv(16->32)-relu-conv(32->32)-relu-gap-fc.
    /// conv3 is the deepest conv and the default importance layer.
    pub fn default_desk(input: (usize, usize, usize), num_classes: usize) -> Self {
        let (c, _, _) = input;
        NetworkSpec {
            input,
            layers: vec![
                LayerSpec { name: "conv1".into(), kind: LayerKind::Conv { in_c: c, out_c: 16, k: 3, stride: 1, pad: 1 } },
                LayerSpec { name: "relu1".into(), kind: LayerKind::Relu },
                LayerSpec { name: "pool1".into(), kind: LayerKind::AvgPool { k: 2 } },
                LayerSpec { name: "conv2".into(), kind: LayerKind::Conv { in_c: 16, out_c: 32, k: 3, stride: 1, pad: 1 } },
                LayerSpec { name: "relu2".into(), kind: LayerKind::Relu },
                LayerSpec { name: "conv3".into(), kind: LayerKind::Conv { in_c: 32, out_c: 32, k: 3, stride: 1, pad: 1 } },
                LayerSpec { name: "relu3".into(), kind: LayerKind::Relu },
                LayerSpec { name: "gap".into(), kind: LayerKind::Gap },
                LayerSpec { name: "head".into(), kind: LayerKind::Fc { in_dim: 32, out_dim: num_classes } },
            ],
        }
    }

    /// Walk the shape chain; errors if layers do not compose.
    pub fn validate(&self) -> Result<()> {
        let mut shape = Shape::Spatial(self.input.0, self.input.1, self.input.2);
        let mut fc_seen = false;
        for layer in &self.layers {
            if fc_seen {
                return Err(ModelError::InvalidSpec(format!(
                    "layer {} after the classifier head",
                    layer.name
                )));
            }
            shape = match (&layer.kind, &shape) {
                (LayerKind::Conv { in_c, out_c, k, stride, pad }, Shape::Spatial(c, h, w)) => {
                    if in_c != c {
                        return Err(ModelError::InvalidSpec(format!(
                            "{}: expects {in_c} channels, got {c}",
                            layer.name
                        )));
                    }
                    if h + 2 * pad < *k || w + 2 * pad < *k || *stride == 0 {
                        return Err(ModelError::InvalidSpec(format!("{}: bad geometry", layer.name)));
                    }
                    Shape::Spatial(
                        *out_c,
                        (h + 2 * pad - k) / stride + 1,
                        (w + 2 * pad - k) / stride + 1,
                    )
                }
                (LayerKind::Relu, s) => s.clone(),
                (LayerKind::AvgPool { k }, Shape::Spatial(c, h, w)) => {
                    if *k == 0 || h % k != 0 || w % k != 0 {
                        return Err(ModelError::InvalidSpec(format!("{}: pool must tile", layer.name)));
                    }
                    Shape::Spatial(*c, h / k, w / k)
                }
                (LayerKind::Gap, Shape::Spatial(c, _, _)) => Shape::Flat(*c),
                (LayerKind::Fc { in_dim, out_dim }, Shape::Flat(d)) => {
                    if in_dim != d {
                        return Err(ModelError::InvalidSpec(format!(
                            "{}: expects {in_dim} inputs, got {d}",
                            layer.name
                        )));
                    }
                    fc_seen = true;
                    Shape::Flat(*out_dim)
                }
                _ => {
                    return Err(ModelError::InvalidSpec(format!(
                        "{}: incompatible with incoming shape",
                        layer.name
                    )))
                }
            };
        }
        if !fc_seen {
            return Err(ModelError::InvalidSpec("no classifier head".into()));
        }
        Ok(())
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Channel count of a named capture layer (conv out-channels, or the
    /// feature width for gap).
    pub fn layer_width(&self, name: &str) -> Option<usize> {
        match &self.layer(name)?.kind {
            LayerKind::Conv { out_c, .. } => Some(*out_c),
            LayerKind::Gap => {
                // Width of gap output = channels feeding it.
                self.layers
                    .iter()
                    .rev()
                    .find_map(|l| match &l.kind {
                        LayerKind::Conv { out_c, .. } => Some(*out_c),
                        _ => None,
                    })
            }
            _ => None,
        }
    }

    pub fn conv_layer_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Conv { .. }))
            .map(|l| l.name.clone())
            .collect()
    }

    pub fn head(&self) -> (&str, usize, usize) {
        let l = self.layers.last().expect("validated spec has layers");
        match l.kind {
            LayerKind::Fc { in_dim, out_dim } => (&l.name, in_dim, out_dim),
            _ => unreachable!("validated spec ends in Fc"),
        }
    }
}

/// Everything captured during one forward pass that downstream stages need.
pub struct ForwardTrace {
    /// Pre-softmax scores [n, classes].
    pub scores: Tensor,
    /// Input features to the classifier head [n, d].
    pub features: Tensor,
    /// Activation of the requested capture layer, if any. For conv layers
    /// this is the conv output (bias added, before the following relu).
    pub captured: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub spec: NetworkSpec,
    params: Vec<(String, Array)>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epochs: usize,
    pub final_seen_acc: f64,
    /// Global class id for each head row, in row order.
    pub head_classes: Vec<usize>,
}

impl Network {
    /// Assemble a network from an explicit parameter list. The caller is
    /// responsible for matching shapes to the spec.
    pub(crate) fn from_parts(spec: NetworkSpec, params: Vec<(String, Array)>) -> Self {
        Network { spec, params }
    }

    pub fn build(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = SplitMix64::derive(seed, 0x6e65742d696e6974);
        let mut params = Vec::new();
        for layer in &spec.layers {
            match layer.kind {
                LayerKind::Conv { in_c, out_c, k, .. } => {
                    let fan_in = (in_c * k * k) as f64;
                    let std = (2.0 / fan_in).sqrt();
                    let n = out_c * in_c * k * k;
                    let w: Vec<f64> = (0..n).map(|_| rng.normal() * std).collect();
                    params.push((format!("{}.weight", layer.name), Array::from_parts(vec![out_c, in_c, k, k], w)));
                    params.push((format!("{}.bias", layer.name), Array::zeros(&[out_c])));
                }
                LayerKind::Fc { in_dim, out_dim } => {
                    let std = (2.0 / in_dim as f64).sqrt();
                    let n = out_dim * in_dim;
                    let w: Vec<f64> = (0..n).map(|_| rng.normal() * std).collect();
                    params.push((format!("{}.weight", layer.name), Array::from_parts(vec![out_dim, in_dim], w)));
                    params.push((format!("{}.bias", layer.name), Array::zeros(&[out_dim])));
                }
                _ => {}
            }
        }
        Ok(Network { spec, params })
    }

    pub fn param(&self, name: &str) -> Option<&Array> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.params.iter_mut().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn params(&self) -> &[(String, Array)] {
        &self.params
    }

    pub fn num_classes(&self) -> usize {
        self.spec.head().2
    }

    pub fn head_weight(&self) -> &Array {
        let (name, _, _) = self.spec.head();
        self.param(&format!("{name}.weight")).expect("head weight present")
    }

    pub fn head_bias(&self) -> &Array {
        let (name, _, _) = self.spec.head();
        self.param(&format!("{name}.bias")).expect("head bias present")
    }

    /// Intern all parameters into a graph. `trainable` picks which become
    /// differentiable leaves; the rest are constants.
    pub fn graph_params(&self, g: &Graph, trainable: impl Fn(&str) -> bool) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, arr)| {
                let t = if trainable(name) { g.leaf(arr) } else { g.constant(arr) };
                (name.clone(), t)
            })
            .collect()
    }

    /// Forward pass over a batch tensor [n, c, h, w] with externally supplied
    /// parameter tensors (so callers control what is differentiable).
    pub fn forward_with(
        &self,
        g: &Graph,
        input: &Tensor,
        params: &BTreeMap<String, Tensor>,
        capture: Option<&str>,
    ) -> Result<ForwardTrace> {
        let got = input.shape();
        let want = vec![got.first().copied().unwrap_or(0), self.spec.input.0, self.spec.input.1, self.spec.input.2];
        if got != want {
            return Err(ModelError::InputShape { got, want });
        }
        if let Some(name) = capture {
            if self.spec.layer(name).is_none() {
                return Err(ModelError::UnknownLayer(name.to_string()));
            }
        }
        let mut x = input.clone();
        let mut captured = None;
        let mut features = None;
        for layer in &self.spec.layers {
            match &layer.kind {
                LayerKind::Conv { stride, pad, .. } => {
                    let w = &params[&format!("{}.weight", layer.name)];
                    let b = &params[&format!("{}.bias", layer.name)];
                    x = g.add_chanvec(&g.conv2d(&x, w, *stride, *pad)?, b)?;
                }
                LayerKind::Relu => x = g.relu(&x)?,
                LayerKind::AvgPool { k } => x = g.avg_pool2d(&x, *k)?,
                LayerKind::Gap => {
                    x = g.global_average_pool(&x)?;
                    features = Some(x.clone());
                }
                LayerKind::Fc { .. } => {
                    let w = &params[&format!("{}.weight", layer.name)];
                    let b = &params[&format!("{}.bias", layer.name)];
                    x = g.add_rowvec(&g.matmul(&x, &g.transpose(w)?)?, b)?;
                }
            }
            if capture == Some(layer.name.as_str()) {
                captured = Some(x.clone());
            }
        }
        Ok(ForwardTrace {
            features: features.unwrap_or_else(|| x.clone()),
            scores: x,
            captured,
        })
    }

    /// Resume a forward pass from the captured activation of `layer` (the
    /// post-bias value for conv layers), running only the layers after it.
    /// Useful when the backbone below is frozen: its output can be computed
    /// once and replayed while the layers above are re-differentiated.
    pub fn forward_from(
        &self,
        g: &Graph,
        layer: &str,
        captured: &Tensor,
        params: &BTreeMap<String, Tensor>,
    ) -> Result<ForwardTrace> {
        if self.spec.layer(layer).is_none() {
            return Err(ModelError::UnknownLayer(layer.to_string()));
        }
        let mut x = captured.clone();
        let mut features = None;
        let mut resumed = false;
        for l in &self.spec.layers {
            if !resumed {
                if l.name == layer {
                    resumed = true;
                }
                continue;
            }
            match &l.kind {
                LayerKind::Conv { stride, pad, .. } => {
                    let w = &params[&format!("{}.weight", l.name)];
                    let b = &params[&format!("{}.bias", l.name)];
                    x = g.add_chanvec(&g.conv2d(&x, w, *stride, *pad)?, b)?;
                }
                LayerKind::Relu => x = g.relu(&x)?,
                LayerKind::AvgPool { k } => x = g.avg_pool2d(&x, *k)?,
                LayerKind::Gap => {
                    x = g.global_average_pool(&x)?;
                    features = Some(x.clone());
                }
                LayerKind::Fc { .. } => {
                    let w = &params[&format!("{}.weight", l.name)];
                    let b = &params[&format!("{}.bias", l.name)];
                    x = g.add_rowvec(&g.matmul(&x, &g.transpose(w)?)?, b)?;
                }
            }
        }
        Ok(ForwardTrace {
            features: features.unwrap_or_else(|| captured.clone()),
            scores: x,
            captured: Some(captured.clone()),
        })
    }

    /// Plain inference on a batch of images; returns detached scores [n, classes].
    pub fn score_batch(&self, images: &[&Array]) -> Result<Array> {
        let batch = stack_images(images, self.spec.input)?;
        let g = Graph::new();
        let input = g.constant(&batch);
        let params = self.graph_params(&g, |_| false);
        let trace = self.forward_with(&g, &input, &params, None)?;
        Ok(trace.scores.value())
    }

    /// Argmax labels, ties broken by lowest class index.
    pub fn predict(&self, images: &[&Array]) -> Result<Vec<usize>> {
        let scores = self.score_batch(images)?;
        let c = self.num_classes();
        Ok(scores
            .data()
            .chunks(c)
            .map(|row| argmax_lowest(row))
            .collect())
    }
}

pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Stack [c,h,w] images into an [n,c,h,w] batch.
pub fn stack_images(images: &[&Array], input: (usize, usize, usize)) -> Result<Array> {
    if images.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let (c, h, w) = input;
    let per = c * h * w;
    let mut data = Vec::with_capacity(images.len() * per);
    for img in images {
        if img.shape() != [c, h, w] {
            return Err(ModelError::InputShape {
                got: img.shape().to_vec(),
                want: vec![c, h, w],
            });
        }
        data.extend_from_slice(img.data());
    }
    Ok(Array::from_parts(vec![images.len(), c, h, w], data))
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Optional layer name: parameters of layers strictly before it are frozen.
    pub freeze_below: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub per_epoch: Vec<EpochStats>,
    pub final_val_accuracy: f64,
}

/// Minibatch Adam on softmax cross-entropy over the seen head.
pub fn train_seen(
    net: &mut Network,
    train: &[(&Array, usize)],
    val: &[(&Array, usize)],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let classes = net.num_classes();
    for &(_, label) in train.iter().chain(val) {
        if label >= classes {
            return Err(ModelError::LabelOutOfRange { label, classes });
        }
    }
    let trainable_names: Vec<String> = {
        let frozen_prefixes: Vec<String> = match &cfg.freeze_below {
            Some(layer) => {
                if net.spec.layer(layer).is_none() {
                    return Err(ModelError::UnknownLayer(layer.clone()));
                }
                net.spec
                    .layers
                    .iter()
                    .take_while(|l| l.name != *layer)
                    .map(|l| l.name.clone())
                    .collect()
            }
            None => vec![],
        };
        net.params
            .iter()
            .map(|(n, _)| n.clone())
            .filter(|n| {
                let layer = n.split('.').next().unwrap_or(n);
                !frozen_prefixes.iter().any(|p| p == layer)
            })
            .collect()
    };
    let sizes: Vec<usize> = trainable_names
        .iter()
        .map(|n| net.param(n).unwrap().len())
        .collect();
    let mut adam = Adam::new(cfg.lr, &sizes);
    let mut rng = SplitMix64::derive(cfg.seed, 0x747261696e);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut per_epoch = Vec::new();

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let imgs: Vec<&Array> = chunk.iter().map(|&i| train[i].0).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train[i].1).collect();
            let batch = stack_images(&imgs, net.spec.input)?;
            let g = Graph::new();
            let input = g.constant(&batch);
            let params = net.graph_params(&g, |n| trainable_names.iter().any(|t| t == n));
            let trace = net.forward_with(&g, &input, &params, None)?;
            let loss = g.softmax_cross_entropy(&trace.scores, &labels)?;
            loss.check_finite()?;
            loss_sum += loss.item();
            batches += 1;
            if adam.lr() == 0.0 {
                continue;
            }
            let wrt: Vec<&Tensor> = trainable_names.iter().map(|n| &params[n]).collect();
            let grads = g.backward(&loss, &wrt)?;
            let grad_arrays: Vec<Array> = grads.grads.iter().map(|t| t.value()).collect();
            let mut param_refs: Vec<&mut Array> = Vec::with_capacity(trainable_names.len());
            // Split-borrow the parameter list in declared order.
            let mut remaining: &mut [(String, Array)] = &mut net.params;
            for name in &trainable_names {
                let pos = remaining.iter().position(|(n, _)| n == name).unwrap();
                let (head, tail) = remaining.split_at_mut(pos + 1);
                param_refs.push(&mut head[pos].1);
                remaining = tail;
            }
            let grad_refs: Vec<&Array> = grad_arrays.iter().collect();
            adam.step(&mut param_refs, &grad_refs);
        }
        let val_accuracy = if val.is_empty() {
            f64::NAN
        } else {
            accuracy(net, val)?
        };
        per_epoch.push(EpochStats {
            epoch,
            mean_loss: loss_sum / batches.max(1) as f64,
            val_accuracy,
        });
    }
    let final_val_accuracy = per_epoch.last().map(|e| e.val_accuracy).unwrap_or(f64::NAN);
    Ok(TrainReport { per_epoch, final_val_accuracy })
}

/// Plain (instance-averaged) accuracy, evaluated in chunks.
pub fn accuracy(net: &Network, data: &[(&Array, usize)]) -> Result<f64> {
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut correct = 0usize;
    for chunk in data.chunks(256) {
        let imgs: Vec<&Array> = chunk.iter().map(|&(img, _)| img).collect();
        let preds = net.predict(&imgs)?;
        correct += preds
            .iter()
            .zip(chunk)
            .filter(|(p, (_, l))| *p == l)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Grow the classifier head by `num_unseen` rows. New rows are sampled from a
/// normal with the per-dimension mean and variance of the seen rows (diagonal
/// covariance); new biases take the mean seen bias. Existing parameters are
/// untouched, bit for bit.
pub fn expand_head(net: &Network, num_unseen: usize, seed: u64) -> Result<Network> {
    if num_unseen == 0 {
        return Err(ModelError::NoUnseen);
    }
    let (head_name, in_dim, out_dim) = net.spec.head();
    if out_dim < 2 {
        return Err(ModelError::InvalidSpec("head must have at least 2 seen rows".into()));
    }
    let head_name = head_name.to_string();
    let w = net.head_weight();
    let b = net.head_bias();

    let mut mean = vec![0.0; in_dim];
    let mut var = vec![0.0; in_dim];
    for r in 0..out_dim {
        for d in 0..in_dim {
            mean[d] += w.data()[r * in_dim + d];
        }
    }
    for m in &mut mean {
        *m /= out_dim as f64;
    }
    for r in 0..out_dim {
        for d in 0..in_dim {
            let diff = w.data()[r * in_dim + d] - mean[d];
            var[d] += diff * diff;
        }
    }
    for v in &mut var {
        *v /= out_dim as f64;
    }
    let mean_bias = b.data().iter().sum::<f64>() / out_dim as f64;

    let mut rng = SplitMix64::derive(seed, 0x657870616e64);
    let new_rows = out_dim + num_unseen;
    let mut wdata = w.data().to_vec();
    for _ in 0..num_unseen {
        for d in 0..in_dim {
            wdata.push(mean[d] + var[d].sqrt() * rng.normal());
        }
    }
    let mut bdata = b.data().to_vec();
    bdata.extend(std::iter::repeat(mean_bias).take(num_unseen));

    let mut spec = net.spec.clone();
    spec.layers.last_mut().unwrap().kind = LayerKind::Fc { in_dim, out_dim: new_rows };
    let mut params = net.params.clone();
    for (name, arr) in &mut params {
        if *name == format!("{head_name}.weight") {
            *arr = Array::from_parts(vec![new_rows, in_dim], wdata.clone());
        } else if *name == format!("{head_name}.bias") {
            *arr = Array::from_parts(vec![new_rows], bdata.clone());
        }
    }
    Ok(Network { spec, params })
}

pub fn save_checkpoint(net: &Network, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let header = serde_json::json!({
        "kind": "network",
        "spec": net.spec,
        "meta": meta,
    });
    let tensors: Vec<(String, &Array)> = net.params.iter().map(|(n, a)| (n.clone(), a)).collect();
    container::write_container(path, &header, &tensors)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Network, CheckpointMeta)> {
    let (header, tensors) = container::read_container(path)?;
    let spec: NetworkSpec = serde_json::from_value(
        header.get("spec").cloned().ok_or_else(|| ModelError::Checkpoint("missing spec".into()))?,
    )
    .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let meta: CheckpointMeta = serde_json::from_value(
        header.get("meta").cloned().ok_or_else(|| ModelError::Checkpoint("missing meta".into()))?,
    )
    .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    spec.validate()?;
    Ok((Network { spec, params: tensors }, meta))
}
