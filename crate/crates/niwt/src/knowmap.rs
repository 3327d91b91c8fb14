//! Linear maps between class knowledge and neuron importances, fit with a
//! cosine-distance loss and rank-correlation early stopping on held-out
//! classes. The forward direction (knowledge -> importance) drives weight
//! transfer; the inverse direction (importance -> knowledge) drives textual
//! explanations.

use crate::array::Array;
use crate::autodiff::{AutodiffError, Graph};
use crate::container::{self, ContainerError};
use crate::importance::{spearman, ImportanceError};
use crate::optim::Adam;
use crate::rng::SplitMix64;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KnowmapError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("no training pairs after removing held-out classes")]
    EmptyTraining,
    #[error("no held-out instances for validation")]
    EmptyHeldout,
    #[error("validation rank correlation undefined: {0}")]
    DegenerateValidation(ImportanceError),
    #[error("map direction is {found:?}, operation needs {needs:?}")]
    WrongDirection { found: Direction, needs: Direction },
    #[error("knowledge csv malformed at line {line}: {reason}")]
    Csv { line: usize, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("map file malformed: {0}")]
    MapFile(String),
}

type Result<T> = std::result::Result<T, KnowmapError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Attributes,
    TextEmbedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeVector {
    pub class_id: usize,
    pub values: Vec<f64>,
    pub modality: Modality,
}

/// All class knowledge vectors for a run, L2-normalized at ingestion.
#[derive(Debug, Clone)]
pub struct KnowledgeSet {
    pub dim: usize,
    /// Attribute names from the CSV header, when present.
    pub names: Option<Vec<String>>,
    pub vectors: Vec<KnowledgeVector>,
}

impl KnowledgeSet {
    pub fn get(&self, class_id: usize) -> Option<&KnowledgeVector> {
        self.vectors.iter().find(|v| v.class_id == class_id)
    }

    /// Parse `class_id,k0,k1,...` rows. A first row whose leading field is not
    /// an integer is taken as a header of attribute names. Vectors are
    /// L2-normalized; an all-zero row is rejected.
    pub fn from_csv(path: &Path, modality: Modality) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_csv_str(&text, modality)
    }

    pub fn from_csv_str(text: &str, modality: Modality) -> Result<Self> {
        let mut names: Option<Vec<String>> = None;
        let mut vectors: Vec<KnowledgeVector> = Vec::new();
        let mut dim = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if i == 0 && fields[0].parse::<usize>().is_err() {
                names = Some(fields[1..].iter().map(|s| s.trim().to_string()).collect());
                continue;
            }
            if fields.len() < 2 {
                return Err(KnowmapError::Csv { line: i + 1, reason: "need class_id plus at least one value".into() });
            }
            let class_id = fields[0].trim().parse::<usize>().map_err(|e| KnowmapError::Csv {
                line: i + 1,
                reason: format!("bad class id: {e}"),
            })?;
            let mut values = Vec::with_capacity(fields.len() - 1);
            for f in &fields[1..] {
                let v = f.trim().parse::<f64>().map_err(|e| KnowmapError::Csv {
                    line: i + 1,
                    reason: format!("bad value: {e}"),
                })?;
                if !v.is_finite() {
                    return Err(KnowmapError::Csv { line: i + 1, reason: "non-finite value".into() });
                }
                values.push(v);
            }
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(KnowmapError::Csv { line: i + 1, reason: format!("expected {d} values, got {}", values.len()) })
                }
                _ => {}
            }
            let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(KnowmapError::Csv { line: i + 1, reason: "all-zero knowledge vector".into() });
            }
            for v in &mut values {
                *v /= norm;
            }
            if vectors.iter().any(|v| v.class_id == class_id) {
                return Err(KnowmapError::Csv { line: i + 1, reason: format!("duplicate class id {class_id}") });
            }
            vectors.push(KnowledgeVector { class_id, values, modality });
        }
        let dim = dim.ok_or(KnowmapError::Csv { line: 0, reason: "no data rows".into() })?;
        if let Some(n) = &names {
            if n.len() != dim {
                return Err(KnowmapError::Csv { line: 1, reason: format!("{} attribute names for {dim} values", n.len()) });
            }
        }
        Ok(KnowledgeSet { dim, names, vectors })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Knowledge to importance, W_{K->a}.
    KToA,
    /// Importance to knowledge, W_{a->K}.
    AToK,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MapMeta {
    pub heldout_classes: Vec<usize>,
    pub best_rho: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone)]
pub struct LinearMap {
    /// Shape [d_out, d_in].
    pub matrix: Array,
    pub direction: Direction,
    pub meta: MapMeta,
}

impl LinearMap {
    pub fn apply(&self, input: &[f64]) -> Result<Vec<f64>> {
        let (d_out, d_in) = (self.matrix.shape()[0], self.matrix.shape()[1]);
        if input.len() != d_in {
            return Err(KnowmapError::DimMismatch { expected: d_in, got: input.len() });
        }
        let m = self.matrix.data();
        Ok((0..d_out)
            .map(|r| m[r * d_in..(r + 1) * d_in].iter().zip(input).map(|(a, b)| a * b).sum())
            .collect())
    }
}

/// a_c = W_{K->a} k_c (predicted importance of an unseen class).
pub fn predict_importance(map: &LinearMap, k: &[f64]) -> Result<Vec<f64>> {
    if map.direction != Direction::KToA {
        return Err(KnowmapError::WrongDirection { found: map.direction, needs: Direction::KToA });
    }
    map.apply(k)
}

/// Attribute-space scores for an importance vector via W_{a->K}.
pub fn predict_knowledge(map: &LinearMap, a: &[f64]) -> Result<Vec<f64>> {
    if map.direction != Direction::AToK {
        return Err(KnowmapError::WrongDirection { found: map.direction, needs: Direction::AToK });
    }
    map.apply(a)
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { lr: 1e-3, max_epochs: 2000, seed: 0 }
    }
}

/// Improvement threshold and patience for rank-correlation early stopping.
pub const RHO_IMPROVEMENT: f64 = 0.001;
pub const RHO_PATIENCE: usize = 20;

#[derive(Debug, Clone)]
pub struct FitTrace {
    pub per_epoch_loss: Vec<f64>,
    pub per_epoch_rho: Vec<f64>,
}

/// One supervised pair: (input vector, target vector, class id).
pub type Pair<'a> = (&'a [f64], &'a [f64], usize);

/// Fit W_{K->a} from (importance, knowledge) pairs. `pairs` carry the
/// importance target first, matching how the dataset is built.
pub fn fit_forward_map(
    pairs: &[(&[f64], &[f64], usize)],
    heldout_classes: &[usize],
    cfg: &FitConfig,
) -> Result<(LinearMap, FitTrace)> {
    // Reorder to (input = knowledge, target = importance).
    let reordered: Vec<Pair> = pairs.iter().map(|&(a, k, c)| (k, a, c)).collect();
    let (map, trace) = fit_map(&reordered, heldout_classes, cfg)?;
    Ok((LinearMap { direction: Direction::KToA, ..map }, trace))
}

/// Fit the inverse map W_{a->K} with the roles of a and k exchanged.
pub fn fit_inverse_map(
    pairs: &[(&[f64], &[f64], usize)],
    heldout_classes: &[usize],
    cfg: &FitConfig,
) -> Result<(LinearMap, FitTrace)> {
    let reordered: Vec<Pair> = pairs.iter().map(|&(a, k, c)| (a, k, c)).collect();
    let (map, trace) = fit_map(&reordered, heldout_classes, cfg)?;
    Ok((LinearMap { direction: Direction::AToK, ..map }, trace))
}

/// Shared trainer: full-batch Adam on mean cosine distance between W*input
/// and target, keeping the weights with the best mean Spearman correlation on
/// held-out-class instances. Stops once that correlation fails to improve by
/// more than [`RHO_IMPROVEMENT`] for [`RHO_PATIENCE`] consecutive epochs.
fn fit_map(pairs: &[Pair], heldout_classes: &[usize], cfg: &FitConfig) -> Result<(LinearMap, FitTrace)> {
    let (train, val): (Vec<&Pair>, Vec<&Pair>) =
        pairs.iter().partition(|(_, _, c)| !heldout_classes.contains(c));
    if train.is_empty() {
        return Err(KnowmapError::EmptyTraining);
    }
    if val.is_empty() {
        return Err(KnowmapError::EmptyHeldout);
    }
    let d_in = train[0].0.len();
    let d_out = train[0].1.len();
    for &&(input, target, _) in train.iter().chain(&val) {
        if input.len() != d_in {
            return Err(KnowmapError::DimMismatch { expected: d_in, got: input.len() });
        }
        if target.len() != d_out {
            return Err(KnowmapError::DimMismatch { expected: d_out, got: target.len() });
        }
    }

    let n = train.len();
    let x = Array::from_parts(vec![n, d_in], train.iter().flat_map(|p| p.0.iter().copied()).collect());
    let y = Array::from_parts(vec![n, d_out], train.iter().flat_map(|p| p.1.iter().copied()).collect());

    let mut rng = SplitMix64::derive(cfg.seed, 0x6d61702d666974);
    let std = 1.0 / (d_in as f64).sqrt();
    let mut w = Array::from_parts(vec![d_out, d_in], (0..d_out * d_in).map(|_| rng.normal() * std).collect());

    let mut adam = Adam::new(cfg.lr, &[d_out * d_in]);
    let mut best_rho = f64::NEG_INFINITY;
    let mut best_w = w.clone();
    // Patience is measured against the correlation at the last reset, so a
    // slow but steady climb does not trip the stop condition.
    let mut anchor = f64::NEG_INFINITY;
    let mut stale = 0usize;
    let mut trace = FitTrace { per_epoch_loss: Vec::new(), per_epoch_rho: Vec::new() };
    let mut epochs = 0usize;

    for _ in 0..cfg.max_epochs {
        epochs += 1;
        let g = Graph::new();
        let wt = g.leaf(&w);
        let pred = g.matmul(&g.constant(&x), &g.transpose(&wt)?)?;
        let loss = g.mean_row_cosine_distance(&pred, &g.constant(&y))?;
        loss.check_finite()?;
        trace.per_epoch_loss.push(loss.item());
        let grads = g.backward(&loss, &[&wt])?;
        let grad = grads.grads[0].value();
        adam.step(&mut [&mut w], &[&grad]);

        let rho = validation_rho(&w, &val)?;
        trace.per_epoch_rho.push(rho);
        if rho > best_rho {
            best_w = w.clone();
            best_rho = rho;
        }
        if rho > anchor + RHO_IMPROVEMENT {
            anchor = rho;
            stale = 0;
        } else {
            stale += 1;
        }
        if stale >= RHO_PATIENCE {
            break;
        }
    }

    Ok((
        LinearMap {
            matrix: best_w,
            direction: Direction::KToA,
            meta: MapMeta { heldout_classes: heldout_classes.to_vec(), best_rho, epochs },
        },
        trace,
    ))
}

fn validation_rho(w: &Array, val: &[&Pair]) -> Result<f64> {
    let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
    let m = w.data();
    let mut acc = 0.0;
    for &&(input, target, _) in val {
        let pred: Vec<f64> = (0..d_out)
            .map(|r| m[r * d_in..(r + 1) * d_in].iter().zip(input).map(|(a, b)| a * b).sum())
            .collect();
        acc += spearman(&pred, target).map_err(KnowmapError::DegenerateValidation)?;
    }
    Ok(acc / val.len() as f64)
}

/// Mean cosine-distance loss of a candidate matrix on a pair set (full batch,
/// fixed order). Used for diagnostics and invariance tests.
pub fn cosine_fit_loss(w: &Array, inputs: &Array, targets: &Array) -> Result<f64> {
    let g = Graph::new();
    let pred = g.matmul(&g.constant(inputs), &g.transpose(&g.constant(w))?)?;
    Ok(g.mean_row_cosine_distance(&pred, &g.constant(targets))?.item())
}

pub fn save_map(map: &LinearMap, path: &Path) -> Result<()> {
    let header = serde_json::json!({
        "kind": "linear_map",
        "direction": map.direction,
        "meta": map.meta,
    });
    container::write_container(path, &header, &[("matrix".into(), &map.matrix)])?;
    Ok(())
}

pub fn load_map(path: &Path) -> Result<LinearMap> {
    let (header, mut tensors) = container::read_container(path)?;
    if header.get("kind").and_then(|v| v.as_str()) != Some("linear_map") {
        return Err(KnowmapError::MapFile("not a linear map container".into()));
    }
    let direction: Direction = serde_json::from_value(
        header.get("direction").cloned().ok_or_else(|| KnowmapError::MapFile("missing direction".into()))?,
    )
    .map_err(|e| KnowmapError::MapFile(e.to_string()))?;
    let meta: MapMeta = serde_json::from_value(
        header.get("meta").cloned().ok_or_else(|| KnowmapError::MapFile("missing meta".into()))?,
    )
    .map_err(|e| KnowmapError::MapFile(e.to_string()))?;
    let pos = tensors
        .iter()
        .position(|(n, _)| n == "matrix")
        .ok_or_else(|| KnowmapError::MapFile("missing matrix tensor".into()))?;
    let matrix = tensors.swap_remove(pos).1;
    if matrix.shape().len() != 2 {
        return Err(KnowmapError::MapFile("matrix is not 2-d".into()));
    }
    Ok(LinearMap { matrix, direction, meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::cosine;

    struct LinearWorld {
        m: Vec<Vec<f64>>, // d_a x d_k ground truth
        ks: Vec<Vec<f64>>,
        /// (importance, knowledge, class) with owned storage.
        data: Vec<(Vec<f64>, Vec<f64>, usize)>,
    }

    /// Exact linear generative model: a_i = M k_c + small noise.
    fn linear_world(classes: usize, per_class: usize, d_k: usize, d_a: usize, noise: f64, seed: u64) -> LinearWorld {
        let mut rng = SplitMix64::new(seed);
        let m: Vec<Vec<f64>> = (0..d_a).map(|_| (0..d_k).map(|_| rng.normal()).collect()).collect();
        let mut ks = Vec::new();
        let mut data = Vec::new();
        for c in 0..classes {
            let mut k: Vec<f64> = (0..d_k).map(|_| rng.normal()).collect();
            let norm = k.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in &mut k {
                *v /= norm;
            }
            for _ in 0..per_class {
                let a: Vec<f64> = m
                    .iter()
                    .map(|row| row.iter().zip(&k).map(|(x, y)| x * y).sum::<f64>() + noise * rng.normal())
                    .collect();
                data.push((a, k.clone(), c));
            }
            ks.push(k);
        }
        LinearWorld { m, ks, data }
    }

    fn as_pairs(data: &[(Vec<f64>, Vec<f64>, usize)]) -> Vec<(&[f64], &[f64], usize)> {
        data.iter().map(|(a, k, c)| (a.as_slice(), k.as_slice(), *c)).collect()
    }

    #[test]
    fn recovers_synthetic_linear_model() {
        let world = linear_world(30, 3, 16, 24, 0.01, 42);
        let pairs = as_pairs(&world.data);
        let heldout = vec![27, 28, 29];
        let cfg = FitConfig { lr: 0.1, max_epochs: 3000, seed: 1 };
        let (map, trace) = fit_forward_map(&pairs, &heldout, &cfg).unwrap();
        assert!(map.meta.best_rho >= 0.95, "held-out rho {}", map.meta.best_rho);
        assert_eq!(map.direction, Direction::KToA);
        assert!(!trace.per_epoch_loss.is_empty());
        // Predictions for a held-out class align with the true M k_c.
        for &c in &heldout {
            let pred = predict_importance(&map, &world.ks[c]).unwrap();
            let truth: Vec<f64> = world.m.iter().map(|row| row.iter().zip(&world.ks[c]).map(|(x, y)| x * y).sum()).collect();
            let cs = cosine(&pred, &truth);
            assert!(cs >= 0.99, "class {c}: cos {cs}");
        }
    }

    #[test]
    fn inverse_map_composes_with_forward() {
        // Invertible regime: d_a >= d_k.
        let world = linear_world(30, 3, 16, 24, 0.01, 42);
        let pairs = as_pairs(&world.data);
        let heldout = vec![27, 28, 29];
        let cfg = FitConfig { lr: 0.1, max_epochs: 3000, seed: 2 };
        let (fwd, _) = fit_forward_map(&pairs, &heldout, &cfg).unwrap();
        let (inv, _) = fit_inverse_map(&pairs, &heldout, &cfg).unwrap();
        assert_eq!(inv.direction, Direction::AToK);
        for &c in &heldout {
            let a = predict_importance(&fwd, &world.ks[c]).unwrap();
            let k_back = predict_knowledge(&inv, &a).unwrap();
            let cs = cosine(&k_back, &world.ks[c]);
            assert!(cs >= 0.95, "class {c}: roundtrip cos {cs}");
        }
    }

    #[test]
    fn degenerate_constant_targets_error() {
        // Constant importance vectors leave validation ranks tied.
        let data: Vec<(Vec<f64>, Vec<f64>, usize)> = (0..6)
            .map(|c| {
                (vec![1.0; 8], vec![c as f64 + 1.0, 1.0, 0.5, 2.0], c)
            })
            .collect();
        let pairs = as_pairs(&data);
        let res = fit_forward_map(&pairs, &[5], &FitConfig::default());
        assert!(matches!(res, Err(KnowmapError::DegenerateValidation(_))), "{res:?}");
    }

    #[test]
    fn predict_trivials() {
        let map = LinearMap {
            matrix: Array::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
            direction: Direction::KToA,
            meta: MapMeta { heldout_classes: vec![], best_rho: 1.0, epochs: 0 },
        };
        let k = vec![0.5, -1.0, 2.0];
        assert_eq!(predict_importance(&map, &k).unwrap(), k);
        assert_eq!(predict_importance(&map, &[0.0, 0.0, 0.0]).unwrap(), vec![0.0; 3]);
        assert!(matches!(
            predict_knowledge(&map, &k),
            Err(KnowmapError::WrongDirection { .. })
        ));
        assert!(matches!(
            predict_importance(&map, &[1.0]),
            Err(KnowmapError::DimMismatch { expected: 3, got: 1 })
        ));
    }

    #[test]
    fn loss_is_scale_invariant_and_bounded() {
        let mut rng = SplitMix64::new(3);
        let (n, d_in, d_out) = (5, 4, 6);
        let x = Array::from_parts(vec![n, d_in], (0..n * d_in).map(|_| rng.normal()).collect());
        let y = Array::from_parts(vec![n, d_out], (0..n * d_out).map(|_| rng.normal()).collect());
        let w = Array::from_parts(vec![d_out, d_in], (0..d_out * d_in).map(|_| rng.normal()).collect());
        let base = cosine_fit_loss(&w, &x, &y).unwrap();
        assert!((0.0..=2.0).contains(&base));
        // Positive rescaling of W and of each target leaves the loss unchanged.
        let w2 = Array::from_parts(vec![d_out, d_in], w.data().iter().map(|v| v * 3.7).collect());
        assert!((cosine_fit_loss(&w2, &x, &y).unwrap() - base).abs() < 1e-10 * base.max(1.0));
        let mut y2 = y.clone();
        for (r, row) in y2.data_mut().chunks_mut(d_out).enumerate() {
            let scale = 0.5 + r as f64;
            for v in row {
                *v *= scale;
            }
        }
        assert!((cosine_fit_loss(&w, &x, &y2).unwrap() - base).abs() < 1e-10 * base.max(1.0));
        // Positively collinear predictions give loss 0.
        let w_id = Array::new(vec![d_in, d_in], {
            let mut id = vec![0.0; d_in * d_in];
            for i in 0..d_in {
                id[i * d_in + i] = 2.0;
            }
            id
        })
        .unwrap();
        let zero = cosine_fit_loss(&w_id, &x, &x).unwrap();
        assert!(zero.abs() < 1e-12, "loss {zero}");
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = SplitMix64::new(8);
        let (n, d_in, d_out) = (4, 3, 5);
        let x = Array::from_parts(vec![n, d_in], (0..n * d_in).map(|_| rng.normal()).collect());
        let y = Array::from_parts(vec![n, d_out], (0..n * d_out).map(|_| rng.normal()).collect());
        let w = Array::from_parts(vec![d_out, d_in], (0..d_out * d_in).map(|_| rng.normal()).collect());

        let g = Graph::new();
        let wt = g.leaf(&w);
        let pred = g.matmul(&g.constant(&x), &g.transpose(&wt).unwrap()).unwrap();
        let loss = g.mean_row_cosine_distance(&pred, &g.constant(&y)).unwrap();
        let grad = g.backward(&loss, &[&wt]).unwrap().grads[0].value();

        let step = 1e-6;
        for i in (0..d_out * d_in).step_by(2) {
            let mut wp = w.clone();
            wp.data_mut()[i] += step;
            let mut wm = w.clone();
            wm.data_mut()[i] -= step;
            let fd = (cosine_fit_loss(&wp, &x, &y).unwrap() - cosine_fit_loss(&wm, &x, &y).unwrap()) / (2.0 * step);
            let denom = fd.abs().max(grad.data()[i].abs()).max(1e-6);
            assert!((fd - grad.data()[i]).abs() / denom < 1e-4, "entry {i}: fd {fd} vs {}", grad.data()[i]);
        }
    }

    #[test]
    fn full_batch_training_loss_is_non_increasing() {
        let world = linear_world(12, 2, 6, 9, 0.0, 55);
        let pairs = as_pairs(&world.data);
        let cfg = FitConfig { lr: 1e-3, max_epochs: 300, seed: 4 };
        let (_, trace) = fit_forward_map(&pairs, &[11], &cfg).unwrap();
        for win in trace.per_epoch_loss.windows(2) {
            assert!(win[1] <= win[0] + 1e-9, "loss rose: {} -> {}", win[0], win[1]);
        }
    }

    #[test]
    fn identity_data_reaches_perfect_validation() {
        // Targets equal inputs: the map should validate at rho = 1.
        let mut rng = SplitMix64::new(66);
        let data: Vec<(Vec<f64>, Vec<f64>, usize)> = (0..10)
            .map(|c| {
                let k: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
                (k.clone(), k, c)
            })
            .collect();
        let pairs = as_pairs(&data);
        let (map, _) = fit_forward_map(&pairs, &[9], &FitConfig { lr: 0.1, max_epochs: 3000, seed: 5 }).unwrap();
        assert!((map.meta.best_rho - 1.0).abs() < 1e-12, "rho {}", map.meta.best_rho);
    }

    #[test]
    fn csv_ingestion_normalizes_and_names() {
        let text = "class_id,furry,striped,aquatic\n0,3,4,0\n2,0,0,5\n";
        let set = KnowledgeSet::from_csv_str(text, Modality::Attributes).unwrap();
        assert_eq!(set.dim, 3);
        assert_eq!(set.names.as_deref().unwrap(), ["furry", "striped", "aquatic"]);
        let v0 = set.get(0).unwrap();
        assert!((v0.values[0] - 0.6).abs() < 1e-12);
        assert!((v0.values[1] - 0.8).abs() < 1e-12);
        let v2 = set.get(2).unwrap();
        assert_eq!(v2.values, vec![0.0, 0.0, 1.0]);
        assert!(KnowledgeSet::from_csv_str("0,1,2\n1,1\n", Modality::Attributes).is_err());
        assert!(KnowledgeSet::from_csv_str("0,0,0\n", Modality::Attributes).is_err());
        // Headerless form also parses.
        let plain = KnowledgeSet::from_csv_str("0,1,0\n1,0,1\n", Modality::Attributes).unwrap();
        assert!(plain.names.is_none());
        assert_eq!(plain.vectors.len(), 2);
    }

    #[test]
    fn map_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.niwt");
        let map = LinearMap {
            matrix: Array::new(vec![2, 3], vec![0.1, 0.2, 0.3, -0.4, 0.5, -0.6]).unwrap(),
            direction: Direction::AToK,
            meta: MapMeta { heldout_classes: vec![3, 9], best_rho: 0.42, epochs: 131 },
        };
        save_map(&map, &path).unwrap();
        let loaded = load_map(&path).unwrap();
        assert_eq!(loaded.direction, Direction::AToK);
        assert_eq!(loaded.meta, map.meta);
        assert_eq!(loaded.matrix, map.matrix);
    }
}
