//! Unseen-class head synthesis: optimize each unseen head row so that the
//! importances observed on probe images match the importances predicted from
//! class knowledge. The observed importance is itself a gradient, so each
//! update differentiates through a backward pass.
//!
//! Per unseen class c the objective is
//!     mean over probe batch of [1 - cos(a_hat_c, a_c)] + lambda * ||w_c - w_bar||
//! with a_c fixed, w_bar the elementwise mean of seen head rows, and a_hat_c
//! the spatial-mean activation gradient of the class score on a probe.

use crate::array::Array;
use crate::autodiff::{AutodiffError, Graph, Tensor};
use crate::model::{stack_images, LayerKind, ModelError, Network};
use crate::optim::Adam;
use crate::rng::SplitMix64;
use crate::synthbench::{
    class_normalized_accuracy, render_background, BenchError, ClassIndex, DatasetManifest,
    GzslSplit, Role,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("probe pool is empty")]
    EmptyProbePool,
    #[error("probe mode {0:?} needs a dataset and split")]
    MissingDataset(ProbeMode),
    #[error("no seen training instances to sample probes from")]
    NoSeenTraining,
    #[error("lambda must be >= 0, got {0}")]
    NegativeLambda(f64),
    #[error("patience must be >= 1")]
    BadPatience,
    #[error("target for head row {0} is out of range (head has {1} rows)")]
    RowOutOfRange(usize, usize),
    #[error("importance target length {got} does not match layer width {expected}")]
    TargetWidth { expected: usize, got: usize },
    #[error("non-finite loss for class {class_id} at iteration {iteration}")]
    NonFiniteLoss { class_id: usize, iteration: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, TransferError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeMode {
    /// I.i.d. standard-normal pixels.
    Noise,
    /// Class-agnostic procedural textures (the benchmark's backgrounds).
    Generic,
    /// Seen-class training images, sampled with replacement.
    Seen,
}

#[derive(Debug, Clone)]
pub struct ProbePool {
    pub source: ProbeMode,
    pub images: Vec<Array>,
}

/// Build a probe pool. `dataset` is required for the generic and seen modes;
/// `shape` is the (channels, height, width) the network expects.
pub fn sample_probes(
    mode: ProbeMode,
    count: usize,
    shape: (usize, usize, usize),
    seed: u64,
    dataset: Option<(&DatasetManifest, &GzslSplit)>,
) -> Result<ProbePool> {
    if count == 0 {
        return Err(TransferError::EmptyProbePool);
    }
    let (c, h, w) = shape;
    let images = match mode {
        ProbeMode::Noise => (0..count)
            .map(|i| {
                let mut rng = SplitMix64::derive(seed, 0x6e6f697365_0000 ^ i as u64);
                Array::from_parts(vec![c, h, w], (0..c * h * w).map(|_| rng.normal()).collect())
            })
            .collect(),
        ProbeMode::Generic => {
            let _ = dataset.ok_or(TransferError::MissingDataset(mode))?;
            (0..count)
                .map(|i| {
                    let mut rng = SplitMix64::derive(seed, 0x74657874_0000 ^ i as u64);
                    render_background(h, w, &mut rng)
                })
                .collect()
        }
        ProbeMode::Seen => {
            let (manifest, split) = dataset.ok_or(TransferError::MissingDataset(mode))?;
            let train = split.instances_with_role(Role::Train);
            if train.is_empty() {
                return Err(TransferError::NoSeenTraining);
            }
            let mut rng = SplitMix64::derive(seed, 0x7365656e);
            (0..count)
                .map(|_| manifest.image(train[rng.below(train.len())]).clone())
                .collect()
        }
    };
    Ok(ProbePool { source: mode, images })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferConfig {
    pub lambda: f64,
    pub lr: f64,
    pub batch: usize,
    pub probe_mode: ProbeMode,
    /// Relative improvement of the best loss that resets the patience clock.
    pub min_rel_improvement: f64,
    /// Iterations without such an improvement before stopping.
    pub patience: usize,
    /// Hard iteration cap.
    pub max_iters: usize,
    pub layer: String,
    pub seed: u64,
    /// Square the regularizer norm instead of using it as written.
    pub reg_squared: bool,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            lambda: 1e-3,
            lr: 1e-3,
            batch: 32,
            probe_mode: ProbeMode::Generic,
            min_rel_improvement: 0.01,
            patience: 40,
            max_iters: 1500,
            layer: "conv3".into(),
            seed: 0,
            reg_squared: false,
        }
    }
}

/// One unseen class to synthesize: the head row to write and the fixed
/// predicted importance vector a_c.
#[derive(Debug, Clone)]
pub struct TransferTarget {
    pub head_row: usize,
    pub class_id: usize,
    pub importance: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub class_id: usize,
    pub cos_term: f64,
    pub reg_term: f64,
    pub total: f64,
}

/// `iteration,class_id,cos_term,reg_term,total` CSV.
pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "iteration,class_id,cos_term,reg_term,total")?;
    for r in rows {
        writeln!(f, "{},{},{},{},{}", r.iteration, r.class_id, r.cos_term, r.reg_term, r.total)?;
    }
    f.flush()?;
    Ok(())
}

/// A network whose head is a single row, equivalent to one class of `net`
/// for score (and hence importance) purposes.
fn single_row_net(net: &Network) -> Network {
    let (head_name, in_dim, _) = net.spec.head();
    let head_name = head_name.to_string();
    let mut spec = net.spec.clone();
    spec.layers.last_mut().unwrap().kind = LayerKind::Fc { in_dim, out_dim: 1 };
    let mut slim = Network::from_parts(spec, net.params().to_vec());
    *slim.param_mut(&format!("{head_name}.weight")).unwrap() = Array::zeros(&[1, in_dim]);
    *slim.param_mut(&format!("{head_name}.bias")).unwrap() = Array::zeros(&[1]);
    slim
}

struct Objective<'a> {
    graph: Graph,
    w_leaf: Tensor,
    b_leaf: Tensor,
    total: Tensor,
    cos_term: f64,
    reg_term: f64,
    _marker: std::marker::PhantomData<&'a ()>,
}

/// Detach the captured activation of `layer` for one probe batch. The
/// backbone below the head is frozen, so this value is constant across
/// optimizer iterations and can be computed once per batch.
fn capture_batch(net: &Network, layer: &str, batch: &Array) -> Result<Array> {
    let g = Graph::new();
    let input = g.constant(batch);
    let params = net.graph_params(&g, |_| false);
    let trace = net.forward_with(&g, &input, &params, Some(layer))?;
    Ok(trace.captured.expect("capture layer checked by forward_with").value())
}

/// Build the Eq.-style objective graph for one class on one probe batch.
/// `slim` must be a single-row-head network; `w`/`b` are the current head
/// row; `captured` is the batch's cached activation at the capture layer.
fn build_objective<'a>(
    slim: &Network,
    layer: &str,
    w: &Array,
    b: &Array,
    captured_batch: &Array,
    target: &[f64],
    w_bar: &[f64],
    lambda: f64,
    reg_squared: bool,
) -> Result<Objective<'a>> {
    let (head_name, in_dim, _) = slim.spec.head();
    let head_name = head_name.to_string();
    let g = Graph::new();
    let w_leaf = g.leaf(w);
    let b_leaf = g.leaf(b);
    let mut params = std::collections::BTreeMap::new();
    for (name, arr) in slim.params() {
        if *name == format!("{head_name}.weight") {
            params.insert(name.clone(), w_leaf.clone());
        } else if *name == format!("{head_name}.bias") {
            params.insert(name.clone(), b_leaf.clone());
        } else {
            params.insert(name.clone(), g.constant(arr));
        }
    }
    let captured = g.leaf(captured_batch);
    let trace = slim.forward_from(&g, layer, &captured, &params)?;
    // Probes are independent, so the gradient of the summed score carries
    // each probe's own activation gradient.
    let o_sum = g.sum(&trace.scores)?;
    let back = g.backward(&o_sum, &[&captured])?;
    let grad = &back.grads[0];
    let alpha_hat = if grad.shape().len() == 4 {
        g.global_average_pool(grad)?
    } else {
        grad.clone()
    };
    let n_probes = captured_batch.shape()[0];
    let width = alpha_hat.shape()[1];
    if target.len() != width {
        return Err(TransferError::TargetWidth { expected: width, got: target.len() });
    }
    let mut target_rows = Vec::with_capacity(n_probes * width);
    for _ in 0..n_probes {
        target_rows.extend_from_slice(target);
    }
    let target_t = g.constant(&Array::from_parts(vec![n_probes, width], target_rows));
    let cos_loss = g.mean_row_cosine_distance(&alpha_hat, &target_t)?;
    let cos_term = cos_loss.item();

    let diff_is_zero = w.data().iter().zip(w_bar).all(|(a, b)| a == b);
    let (total, reg_term) = if lambda == 0.0 || diff_is_zero {
        // Subgradient of the norm at zero is taken as 0: no reg node at all.
        (cos_loss, 0.0)
    } else {
        let w_row = g.reshape(&w_leaf, vec![in_dim])?;
        let diff = g.sub(&w_row, &g.constant(&Array::from_parts(vec![in_dim], w_bar.to_vec())))?;
        let norm = if reg_squared {
            g.dot(&diff, &diff)?
        } else {
            g.l2_norm(&diff)?
        };
        let reg = g.scale(&norm, lambda)?;
        let reg_term = reg.item();
        (g.add(&cos_loss, &reg)?, reg_term)
    };
    Ok(Objective {
        graph: g,
        w_leaf,
        b_leaf,
        total,
        cos_term,
        reg_term,
        _marker: std::marker::PhantomData,
    })
}

/// Elementwise mean of the first `num_seen` head rows.
pub fn mean_seen_row(net: &Network, num_seen: usize) -> Vec<f64> {
    let w = net.head_weight();
    let in_dim = w.shape()[1];
    let mut mean = vec![0.0; in_dim];
    for r in 0..num_seen {
        for d in 0..in_dim {
            mean[d] += w.data()[r * in_dim + d];
        }
    }
    for m in &mut mean {
        *m /= num_seen as f64;
    }
    mean
}

struct ClassResult {
    head_row: usize,
    w: Array,
    b: f64,
    trace: Vec<TraceRow>,
}

fn optimize_class(
    slim: &Network,
    target: &TransferTarget,
    init_w: Array,
    init_b: f64,
    captured_batches: &[Array],
    w_bar: &[f64],
    cfg: &TransferConfig,
) -> Result<ClassResult> {
    let in_dim = init_w.len();
    let mut w = init_w;
    let mut b = Array::from_vec(vec![init_b]);
    let mut adam = Adam::new(cfg.lr, &[in_dim, 1]);
    let mut best = (f64::INFINITY, w.clone(), b.data()[0]);
    let mut anchor = f64::INFINITY;
    let mut stale = 0usize;
    let mut trace = Vec::new();

    for iteration in 0..cfg.max_iters {
        let captured = &captured_batches[iteration % captured_batches.len()];
        let obj = build_objective(
            slim,
            &cfg.layer,
            &w,
            &b,
            captured,
            &target.importance,
            w_bar,
            cfg.lambda,
            cfg.reg_squared,
        )?;
        let total = obj.total.item();
        if !total.is_finite() {
            return Err(TransferError::NonFiniteLoss { class_id: target.class_id, iteration });
        }
        trace.push(TraceRow {
            iteration,
            class_id: target.class_id,
            cos_term: obj.cos_term,
            reg_term: obj.reg_term,
            total,
        });
        if total < best.0 {
            best = (total, w.clone(), b.data()[0]);
        }
        if total < anchor * (1.0 - cfg.min_rel_improvement) {
            anchor = total;
            stale = 0;
        } else {
            stale += 1;
        }
        if stale >= cfg.patience {
            break;
        }
        let grads = obj.graph.backward(&obj.total, &[&obj.w_leaf, &obj.b_leaf])?;
        let gw = grads.grads[0].value();
        let gb = grads.grads[1].value();
        adam.step(&mut [&mut w, &mut b], &[&gw, &gb]);
    }
    Ok(ClassResult { head_row: target.head_row, w: best.1, b: best.2, trace })
}

/// Optimize the given unseen head rows of an expanded network. Rows in
/// `0..num_seen` are the frozen seen rows (used for the regularizer mean);
/// all non-head parameters stay frozen. Returns the updated network and the
/// per-iteration loss trace of every class.
pub fn transfer_weights(
    net: &Network,
    num_seen: usize,
    targets: &[TransferTarget],
    probes: &ProbePool,
    cfg: &TransferConfig,
) -> Result<(Network, Vec<TraceRow>)> {
    if probes.images.is_empty() {
        return Err(TransferError::EmptyProbePool);
    }
    if cfg.lambda < 0.0 {
        return Err(TransferError::NegativeLambda(cfg.lambda));
    }
    if cfg.patience == 0 {
        return Err(TransferError::BadPatience);
    }
    let (_, _, rows) = net.spec.head();
    for t in targets {
        if t.head_row >= rows {
            return Err(TransferError::RowOutOfRange(t.head_row, rows));
        }
    }
    if net.spec.layer(&cfg.layer).is_none() {
        return Err(TransferError::Model(ModelError::UnknownLayer(cfg.layer.clone())));
    }
    let w_bar = mean_seen_row(net, num_seen);
    transfer_weights_with_mean(net, &w_bar, targets, probes, cfg)
}

/// Add set-scaled gaussian noise to each importance vector:
/// a~ = a + eps * (mean over vectors of ||a||_1) * z, z ~ N(0, I).
pub fn perturb_importances(targets: &[Vec<f64>], eps: f64, seed: u64) -> Vec<Vec<f64>> {
    if targets.is_empty() || eps == 0.0 {
        return targets.to_vec();
    }
    let avg_l1 = targets
        .iter()
        .map(|a| a.iter().map(|v| v.abs()).sum::<f64>())
        .sum::<f64>()
        / targets.len() as f64;
    let mut rng = SplitMix64::derive(seed, 0x70657274757262);
    targets
        .iter()
        .map(|a| a.iter().map(|v| v + eps * avg_l1 * rng.normal()).collect())
        .collect()
}

/// Mean importance of each head row of `net` over a fixed probe set, taken at
/// `layer`. Row order matches the head.
pub fn mean_probe_importances(net: &Network, layer: &str, probes: &ProbePool) -> Result<Vec<Vec<f64>>> {
    if probes.images.is_empty() {
        return Err(TransferError::EmptyProbePool);
    }
    let rows = net.spec.head().2;
    let slim_template = single_row_net(net);
    let (head_name, in_dim, _) = net.spec.head();
    let head_name = head_name.to_string();
    let probe_refs: Vec<&Array> = probes.images.iter().collect();
    let batch = stack_images(&probe_refs, net.spec.input)?;
    // One frozen-backbone pass serves every head row.
    let captured_arr = capture_batch(net, layer, &batch)?;
    (0..rows)
        .into_par_iter()
        .map(|row| {
            let mut slim = slim_template.clone();
            slim.param_mut(&format!("{head_name}.weight"))
                .unwrap()
                .data_mut()
                .copy_from_slice(&net.head_weight().data()[row * in_dim..(row + 1) * in_dim]);
            slim.param_mut(&format!("{head_name}.bias")).unwrap().data_mut()[0] =
                net.head_bias().data()[row];
            let g = Graph::new();
            let params = slim.graph_params(&g, |_| false);
            let captured = g.leaf(&captured_arr);
            let trace = slim.forward_from(&g, layer, &captured, &params)?;
            let o_sum = g.sum(&trace.scores)?;
            let back = g.backward(&o_sum, &[&captured])?;
            let grad = &back.grads[0];
            let alpha = if grad.shape().len() == 4 {
                g.global_average_pool(grad)?
            } else {
                grad.clone()
            };
            let v = alpha.value();
            let width = v.shape()[1];
            let n = v.shape()[0] as f64;
            let mut mean = vec![0.0; width];
            for row_vals in v.data().chunks(width) {
                for (m, x) in mean.iter_mut().zip(row_vals) {
                    *m += x / n;
                }
            }
            Ok(mean)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct RecoveryPoint {
    pub eps: f64,
    pub accuracy: f64,
}

/// Noise-robustness probe of the transfer objective: extract oracle per-class
/// importances from the trained head, perturb them at each eps, re-derive a
/// fresh head from scratch with the transfer objective, and measure seen-test
/// class-normalized accuracy of the recovered head.
#[allow(clippy::too_many_arguments)]
pub fn recover_seen_weights(
    net: &Network,
    manifest: &DatasetManifest,
    split: &GzslSplit,
    index: &ClassIndex,
    probes: &ProbePool,
    eps_levels: &[f64],
    cfg: &TransferConfig,
) -> Result<Vec<RecoveryPoint>> {
    let oracle = mean_probe_importances(net, &cfg.layer, probes)?;
    let (_, _, rows) = net.spec.head();
    let w_bar_scale = {
        // Fresh rows start from small noise around zero; the regularizer and
        // the seen-row statistics still come from the original head.
        let w = net.head_weight();
        (w.data().iter().map(|v| v * v).sum::<f64>() / w.len() as f64).sqrt()
    };
    let mean_bias = net.head_bias().data().iter().sum::<f64>() / rows as f64;

    let mut curve = Vec::with_capacity(eps_levels.len());
    for (li, &eps) in eps_levels.iter().enumerate() {
        let targets_vals = perturb_importances(&oracle, eps, cfg.seed ^ (li as u64) << 32);
        let mut fresh = net.clone();
        {
            let (head_name, _, _) = fresh.spec.head();
            let head_name = head_name.to_string();
            let mut rng = SplitMix64::derive(cfg.seed, 0x7265636f766572 ^ li as u64);
            let w = fresh.param_mut(&format!("{head_name}.weight")).unwrap();
            for v in w.data_mut() {
                *v = 0.1 * w_bar_scale * rng.normal();
            }
            let b = fresh.param_mut(&format!("{head_name}.bias")).unwrap();
            b.data_mut().fill(mean_bias);
        }
        let targets: Vec<TransferTarget> = targets_vals
            .iter()
            .enumerate()
            .map(|(row, vals)| TransferTarget {
                head_row: row,
                class_id: index.class_of(row),
                importance: vals.clone(),
            })
            .collect();
        // All rows are being recovered; the regularizer mean still uses the
        // original head's seen rows, so compute it before overwriting.
        let w_bar = mean_seen_row(net, rows);
        let (recovered, _) = transfer_weights_with_mean(&fresh, &w_bar, &targets, probes, cfg)?;

        let test_ids: Vec<usize> = split
            .instances_with_role(Role::Test)
            .into_iter()
            .filter(|&id| split.seen.contains(&manifest.records[id].class_id))
            .collect();
        let mut preds = Vec::with_capacity(test_ids.len());
        let mut labels = Vec::with_capacity(test_ids.len());
        for chunk in test_ids.chunks(256) {
            let imgs: Vec<&Array> = chunk.iter().map(|&id| manifest.image(id)).collect();
            for (row, &id) in recovered.predict(&imgs)?.into_iter().zip(chunk) {
                preds.push(index.class_of(row));
                labels.push(manifest.records[id].class_id);
            }
        }
        let accuracy = class_normalized_accuracy(&preds, &labels, &split.seen)?;
        curve.push(RecoveryPoint { eps, accuracy });
    }
    Ok(curve)
}

/// [`transfer_weights`] with an externally supplied regularizer mean, for
/// callers whose anchor rows are not a `0..num_seen` prefix (weight recovery,
/// pseudo-unseen validation).
pub fn transfer_weights_with_mean(
    net: &Network,
    w_bar: &[f64],
    targets: &[TransferTarget],
    probes: &ProbePool,
    cfg: &TransferConfig,
) -> Result<(Network, Vec<TraceRow>)> {
    if probes.images.is_empty() {
        return Err(TransferError::EmptyProbePool);
    }
    if cfg.lambda < 0.0 {
        return Err(TransferError::NegativeLambda(cfg.lambda));
    }
    if cfg.patience == 0 {
        return Err(TransferError::BadPatience);
    }
    let (_, in_dim, _) = net.spec.head();
    let slim = single_row_net(net);
    let probe_refs: Vec<&Array> = probes.images.iter().collect();
    let batch_size = cfg.batch.max(1).min(probes.images.len());
    // The backbone is frozen, so each batch's activation at the capture layer
    // is the same every iteration and for every class: compute it once here.
    let captured_batches: Vec<Array> = probe_refs
        .chunks(batch_size)
        .map(|chunk| capture_batch(net, &cfg.layer, &stack_images(chunk, net.spec.input)?))
        .collect::<Result<_>>()?;
    let head_w = net.head_weight();
    let head_b = net.head_bias();
    let results: Vec<ClassResult> = targets
        .par_iter()
        .map(|t| {
            let init_w = Array::from_parts(
                vec![1, in_dim],
                head_w.data()[t.head_row * in_dim..(t.head_row + 1) * in_dim].to_vec(),
            );
            let init_b = head_b.data()[t.head_row];
            optimize_class(&slim, t, init_w, init_b, &captured_batches, w_bar, cfg)
        })
        .collect::<Result<_>>()?;
    let mut out = net.clone();
    let (head_name, _, _) = out.spec.head();
    let head_name = head_name.to_string();
    let w = out.param_mut(&format!("{head_name}.weight")).unwrap();
    for r in &results {
        w.data_mut()[r.head_row * in_dim..(r.head_row + 1) * in_dim].copy_from_slice(r.w.data());
    }
    let b = out.param_mut(&format!("{head_name}.bias")).unwrap();
    let mut trace: Vec<TraceRow> = Vec::new();
    for r in results {
        b.data_mut()[r.head_row] = r.b;
        trace.extend(r.trace);
    }
    Ok((out, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::cosine;
    use crate::model::{expand_head, LayerSpec, NetworkSpec};

    /// gap -> head directly: observed importance at "gap" equals w exactly.
    fn gap_head_net(channels: usize, hw: usize, classes: usize, seed: u64) -> Network {
        let spec = NetworkSpec {
            input: (channels, hw, hw),
            layers: vec![
                LayerSpec { name: "gap".into(), kind: LayerKind::Gap },
                LayerSpec {
                    name: "head".into(),
                    kind: LayerKind::Fc { in_dim: channels, out_dim: classes },
                },
            ],
        };
        Network::build(spec, seed).unwrap()
    }

    fn noise_pool(count: usize, shape: (usize, usize, usize), seed: u64) -> ProbePool {
        sample_probes(ProbeMode::Noise, count, shape, seed, None).unwrap()
    }

    #[test]
    fn noise_probes_reproducible_and_centered() {
        let a = noise_pool(16, (3, 8, 8), 4);
        let b = noise_pool(16, (3, 8, 8), 4);
        for (x, y) in a.images.iter().zip(&b.images) {
            for (p, q) in x.data().iter().zip(y.data()) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
        }
        let big = noise_pool(10_000, (1, 2, 2), 9);
        let d = 4.0;
        let mean: f64 = big.images.iter().flat_map(|im| im.data()).sum::<f64>() / (10_000.0 * d);
        assert!(mean.abs() <= 3.0 / (10_000.0f64 * d).sqrt(), "mean {mean}");
        assert!(matches!(
            sample_probes(ProbeMode::Generic, 4, (3, 8, 8), 1, None),
            Err(TransferError::MissingDataset(ProbeMode::Generic))
        ));
    }

    #[test]
    fn seen_probes_sample_with_replacement() {
        let m = crate::synthbench::generate_dataset(4, 8, 3, 16, 2).unwrap();
        let s = crate::synthbench::split_gzsl(&m, 1, 1, 2).unwrap();
        let train = s.instances_with_role(Role::Train);
        let pool = sample_probes(ProbeMode::Seen, train.len() * 5, m.image_size, 3, Some((&m, &s))).unwrap();
        assert_eq!(pool.images.len(), train.len() * 5);
    }

    #[test]
    fn oracle_weight_recovery_on_linear_head() {
        // Target importances generated from an oracle row w*: with lambda=0
        // the optimum is any positive multiple of w*.
        let net = gap_head_net(12, 4, 3, 7);
        let expanded = expand_head(&net, 1, 3).unwrap();
        let mut rng = SplitMix64::new(21);
        let w_star: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
        let targets = vec![TransferTarget { head_row: 3, class_id: 99, importance: w_star.clone() }];
        let probes = noise_pool(32, (12, 4, 4), 5);
        let cfg = TransferConfig {
            lambda: 0.0,
            lr: 0.05,
            layer: "gap".into(),
            max_iters: 600,
            ..TransferConfig::default()
        };
        let (out, trace) = transfer_weights(&expanded, 3, &targets, &probes, &cfg).unwrap();
        let w = out.head_weight();
        let row = &w.data()[3 * 12..4 * 12];
        let cs = cosine(row, &w_star);
        assert!(cs >= 0.99, "cos {cs}");
        // Loss approaches 0 at the optimum and the running best never rises.
        let mut best = f64::INFINITY;
        for r in &trace {
            best = best.min(r.total);
        }
        assert!(best < 0.01, "best loss {best}");
        let mut running = f64::INFINITY;
        let mut prev_best = f64::INFINITY;
        for r in &trace {
            running = running.min(r.total);
            assert!(running <= prev_best + 1e-15);
            prev_best = running;
        }
    }

    #[test]
    fn huge_lambda_pins_weights_to_seen_mean() {
        let net = gap_head_net(8, 4, 4, 11);
        let expanded = expand_head(&net, 1, 5).unwrap();
        let mut rng = SplitMix64::new(31);
        let target: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let targets = vec![TransferTarget { head_row: 4, class_id: 50, importance: target }];
        let probes = noise_pool(16, (8, 4, 4), 6);
        let cfg = TransferConfig {
            lambda: 1e2,
            lr: 1e-3,
            layer: "gap".into(),
            max_iters: 5000,
            ..TransferConfig::default()
        };
        let (out, _) = transfer_weights(&expanded, 4, &targets, &probes, &cfg).unwrap();
        let w_bar = mean_seen_row(&expanded, 4);
        let row = &out.head_weight().data()[4 * 8..5 * 8];
        let diff: f64 = row.iter().zip(&w_bar).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let scale: f64 = w_bar.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(diff <= 1e-3 * scale, "diff {diff} vs scale {scale}");
    }

    #[test]
    fn seen_rows_bit_identical_after_transfer() {
        let net = gap_head_net(6, 4, 3, 13);
        let expanded = expand_head(&net, 2, 9).unwrap();
        let before_w = expanded.head_weight().clone();
        let before_conv = expanded.params().to_vec();
        let targets = vec![
            TransferTarget { head_row: 3, class_id: 10, importance: vec![1.0; 6] },
            TransferTarget { head_row: 4, class_id: 11, importance: vec![0.5; 6] },
        ];
        let probes = noise_pool(8, (6, 4, 4), 2);
        let cfg = TransferConfig { lr: 0.05, layer: "gap".into(), max_iters: 50, ..TransferConfig::default() };
        let (out, _) = transfer_weights(&expanded, 3, &targets, &probes, &cfg).unwrap();
        let w = out.head_weight();
        for i in 0..3 * 6 {
            assert_eq!(w.data()[i].to_bits(), before_w.data()[i].to_bits());
        }
        for ((n1, p1), (n2, p2)) in out.params().iter().zip(&before_conv) {
            if n1.starts_with("head") {
                continue;
            }
            assert_eq!(n1, n2);
            for (a, b) in p1.data().iter().zip(p2.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn objective_invariant_to_target_rescaling() {
        let net = gap_head_net(5, 4, 2, 3);
        let slim = single_row_net(&net);
        let mut rng = SplitMix64::new(41);
        let w = Array::from_parts(vec![1, 5], (0..5).map(|_| rng.normal()).collect());
        let b = Array::from_vec(vec![0.1]);
        let probes = noise_pool(4, (5, 4, 4), 8);
        let refs: Vec<&Array> = probes.images.iter().collect();
        let batch = stack_images(&refs, (5, 4, 4)).unwrap();
        let cap = capture_batch(&slim, "gap", &batch).unwrap();
        let target: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let scaled: Vec<f64> = target.iter().map(|v| v * 3.7).collect();
        let w_bar = vec![0.0; 5];
        let a = build_objective(&slim, "gap", &w, &b, &cap, &target, &w_bar, 0.5, false).unwrap();
        let bb = build_objective(&slim, "gap", &w, &b, &cap, &scaled, &w_bar, 0.5, false).unwrap();
        let (ta, tb) = (a.total.item(), bb.total.item());
        assert!((ta - tb).abs() <= 1e-10 * ta.abs().max(1.0), "{ta} vs {tb}");
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        // Full conv net so the gradient flows through a real double-backward.
        let spec = NetworkSpec {
            input: (2, 6, 6),
            layers: vec![
                LayerSpec { name: "conv".into(), kind: LayerKind::Conv { in_c: 2, out_c: 3, k: 3, stride: 1, pad: 1 } },
                LayerSpec { name: "relu".into(), kind: LayerKind::Relu },
                LayerSpec { name: "conv2".into(), kind: LayerKind::Conv { in_c: 3, out_c: 3, k: 3, stride: 1, pad: 1 } },
                LayerSpec { name: "relu2".into(), kind: LayerKind::Relu },
                LayerSpec { name: "gap".into(), kind: LayerKind::Gap },
                LayerSpec { name: "head".into(), kind: LayerKind::Fc { in_dim: 3, out_dim: 2 } },
            ],
        };
        let net = Network::build(spec, 17).unwrap();
        let slim = single_row_net(&net);
        let mut rng = SplitMix64::new(51);
        let w = Array::from_parts(vec![1, 3], (0..3).map(|_| rng.normal()).collect());
        let b = Array::from_vec(vec![0.0]);
        let probes = noise_pool(3, (2, 6, 6), 12);
        let refs: Vec<&Array> = probes.images.iter().collect();
        let batch = stack_images(&refs, (2, 6, 6)).unwrap();
        let cap = capture_batch(&slim, "conv", &batch).unwrap();
        let target: Vec<f64> = (0..3).map(|_| rng.normal().abs() + 0.2).collect();
        let w_bar: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let lambda = 0.3;

        let obj = build_objective(&slim, "conv", &w, &b, &cap, &target, &w_bar, lambda, false).unwrap();
        let grad = obj.graph.backward(&obj.total, &[&obj.w_leaf]).unwrap().grads[0].value();

        let eval = |wv: &Array| -> f64 {
            build_objective(&slim, "conv", wv, &b, &cap, &target, &w_bar, lambda, false)
                .unwrap()
                .total
                .item()
        };
        let step = 1e-6;
        for i in 0..3 {
            let mut wp = w.clone();
            wp.data_mut()[i] += step;
            let mut wm = w.clone();
            wm.data_mut()[i] -= step;
            let fd = (eval(&wp) - eval(&wm)) / (2.0 * step);
            let denom = fd.abs().max(grad.data()[i].abs()).max(1e-6);
            assert!((fd - grad.data()[i]).abs() / denom < 1e-3, "entry {i}: fd {fd} vs {}", grad.data()[i]);
        }
    }

    #[test]
    fn perturbation_identity_and_chi_mean() {
        let targets: Vec<Vec<f64>> = vec![vec![1.0, -2.0, 3.0], vec![0.5, 0.5, -1.0]];
        assert_eq!(perturb_importances(&targets, 0.0, 1), targets);
        let a = perturb_importances(&targets, 0.5, 7);
        let b = perturb_importances(&targets, 0.5, 7);
        assert_eq!(a, b);
        assert_ne!(a, perturb_importances(&targets, 0.5, 8));

        // E||a~ - a||_2 = eps * avgL1 * E||z||, E||z|| for d=8 via the chi
        // mean: sqrt(2) * Gamma(4.5) / Gamma(4).
        let d = 8;
        let base = vec![vec![1.0; d]];
        let avg_l1 = d as f64;
        let eps = 0.25;
        let chi_mean = std::f64::consts::SQRT_2 * gamma_ratio_45_over_4();
        let expected = eps * avg_l1 * chi_mean;
        let n = 100_000;
        let mut acc = 0.0;
        for i in 0..n {
            let p = perturb_importances(&base, eps, 1000 + i as u64);
            let norm: f64 = p[0]
                .iter()
                .zip(&base[0])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            acc += norm;
        }
        let emp = acc / n as f64;
        assert!((emp - expected).abs() / expected < 0.02, "emp {emp} vs {expected}");
    }

    /// Gamma(4.5)/Gamma(4) = 3.5 * 2.5 * 1.5 * 0.5 * Gamma(0.5) / 3!.
    fn gamma_ratio_45_over_4() -> f64 {
        let gamma_45 = 3.5 * 2.5 * 1.5 * 0.5 * std::f64::consts::PI.sqrt();
        let gamma_4 = 6.0;
        gamma_45 / gamma_4
    }

    #[test]
    fn rejects_bad_config() {
        let net = gap_head_net(4, 4, 2, 1);
        let expanded = expand_head(&net, 1, 1).unwrap();
        let probes = noise_pool(4, (4, 4, 4), 1);
        let t = vec![TransferTarget { head_row: 2, class_id: 5, importance: vec![1.0; 4] }];
        let bad_lambda = TransferConfig { lambda: -1.0, layer: "gap".into(), ..TransferConfig::default() };
        assert!(matches!(
            transfer_weights(&expanded, 2, &t, &probes, &bad_lambda),
            Err(TransferError::NegativeLambda(_))
        ));
        let bad_row = vec![TransferTarget { head_row: 9, class_id: 5, importance: vec![1.0; 4] }];
        let cfg = TransferConfig { layer: "gap".into(), ..TransferConfig::default() };
        assert!(matches!(
            transfer_weights(&expanded, 2, &bad_row, &probes, &cfg),
            Err(TransferError::RowOutOfRange(9, 3))
        ));
        let empty = ProbePool { source: ProbeMode::Noise, images: vec![] };
        assert!(matches!(
            transfer_weights(&expanded, 2, &t, &empty, &cfg),
            Err(TransferError::EmptyProbePool)
        ));
    }

    #[test]
    fn trace_csv_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let rows = vec![TraceRow { iteration: 0, class_id: 44, cos_term: 0.5, reg_term: 0.25, total: 0.75 }];
        write_trace_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "iteration,class_id,cos_term,reg_term,total");
        assert_eq!(text.lines().nth(1).unwrap(), "0,44,0.5,0.25,0.75");
    }
}
