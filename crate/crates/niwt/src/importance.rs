//! Class-conditional neuron importances and their rank-correlation
//! statistics.
//!
//! The importance of channel `n` for class `c` is the spatial mean of the
//! gradient of the pre-softmax score with respect to that channel's
//! activation map: alpha_c^n = (1/HW) * sum_ij d o_c / d a^n_ij. Layers
//! without spatial extent (the pooled feature vector) use the raw per-unit
//! gradient.

use crate::array::Array;
use crate::autodiff::{AutodiffError, Graph};
use crate::model::{stack_images, ModelError, Network};
use crate::rng::SplitMix64;
use rayon::prelude::*;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

/// Cross-class pair sample size for [`correlation_report`].
pub const CROSS_PAIR_SAMPLES: usize = 10_000;

#[derive(Debug, Error)]
pub enum ImportanceError {
    #[error("class {class} outside head range 0..{classes}")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("vectors have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("vector too short for rank correlation (len {0})")]
    TooShort(usize),
    #[error("zero variance in ranks; correlation undefined")]
    ZeroRankVariance,
    #[error("correlation report needs >= 2 classes with >= 2 instances each")]
    DegenerateGroups,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, ImportanceError>;

#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Instance(usize),
    ClassAggregate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceVector {
    pub layer: String,
    pub class_id: usize,
    pub source: Source,
    pub values: Vec<f64>,
}

/// Collapse a captured-layer gradient to one value per channel: spatial mean
/// for [1, c, h, w] maps, identity for [1, c] feature gradients.
pub fn spatial_mean_per_channel(grad: &Array) -> Vec<f64> {
    let shape = grad.shape();
    match shape.len() {
        4 => {
            let (c, h, w) = (shape[1], shape[2], shape[3]);
            let hw = (h * w) as f64;
            (0..c)
                .map(|n| grad.data()[n * h * w..(n + 1) * h * w].iter().sum::<f64>() / hw)
                .collect()
        }
        2 => grad.data().to_vec(),
        _ => unreachable!("captured gradients are [1,c,h,w] or [1,c]"),
    }
}

/// Importance of every channel of `layer` for class `class_c` on one input.
pub fn neuron_importance(
    net: &Network,
    layer: &str,
    input: &Array,
    class_c: usize,
) -> Result<ImportanceVector> {
    neuron_importance_with_source(net, layer, input, class_c, Source::ClassAggregate)
}

fn neuron_importance_with_source(
    net: &Network,
    layer: &str,
    input: &Array,
    class_c: usize,
    source: Source,
) -> Result<ImportanceVector> {
    let classes = net.num_classes();
    if class_c >= classes {
        return Err(ImportanceError::ClassOutOfRange { class: class_c, classes });
    }
    let g = Graph::new();
    let batch = g.constant(&stack_images(&[input], net.spec.input)?);
    let params = net.graph_params(&g, |_| false);
    let trace = net.forward_with(&g, &batch, &params, Some(layer))?;
    let captured = trace.captured.expect("capture layer verified by forward_with");
    let mut onehot = Array::zeros(&[1, classes]);
    onehot.data_mut()[class_c] = 1.0;
    let o_c = g.sum(&g.mul(&trace.scores, &g.constant(&onehot))?)?;
    let grads = g.backward(&o_c, &[&captured])?;
    let grad = grads.grads[0].value();
    grad.check_finite().map_err(AutodiffError::from)?;
    Ok(ImportanceVector {
        layer: layer.to_string(),
        class_id: class_c,
        source,
        values: spatial_mean_per_channel(&grad),
    })
}

/// One importance vector per instance, taken w.r.t. the instance's own label.
/// Instances are `(instance_id, image, label)`.
pub fn importance_dataset(
    net: &Network,
    layer: &str,
    instances: &[(usize, &Array, usize)],
) -> Result<Vec<ImportanceVector>> {
    instances
        .par_iter()
        .map(|&(id, image, label)| {
            neuron_importance_with_source(net, layer, image, label, Source::Instance(id))
        })
        .collect()
}

/// Fractional (average-tie) ranks, 1-based.
fn fractional_ranks(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with fractional ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(ImportanceError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(ImportanceError::TooShort(x.len()));
    }
    let rx = fractional_ranks(x);
    let ry = fractional_ranks(y);
    let n = x.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..x.len() {
        let dx = rx[i] - mean;
        let dy = ry[i] - mean;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(ImportanceError::ZeroRankVariance);
    }
    Ok(cov / (vx * vy).sqrt())
}

pub fn mean_spearman(pairs: &[(&[f64], &[f64])]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(ImportanceError::DegenerateGroups);
    }
    let mut acc = 0.0;
    for (a, b) in pairs {
        acc += spearman(a, b)?;
    }
    Ok(acc / pairs.len() as f64)
}

#[derive(Debug, Clone)]
pub struct CorrelationReport {
    pub within: f64,
    pub cross: f64,
    pub within_pairs: usize,
    pub cross_pairs: usize,
}

/// Mean Spearman correlation over all same-class instance pairs, and over
/// a fixed-seed sample of cross-class pairs.
pub fn correlation_report(
    groups: &[(usize, Vec<Vec<f64>>)],
    seed: u64,
) -> Result<CorrelationReport> {
    if groups.len() < 2 || groups.iter().any(|(_, vs)| vs.len() < 2) {
        return Err(ImportanceError::DegenerateGroups);
    }
    let mut within_sum = 0.0;
    let mut within_pairs = 0usize;
    for (_, vs) in groups {
        for i in 0..vs.len() {
            for j in i + 1..vs.len() {
                within_sum += spearman(&vs[i], &vs[j])?;
                within_pairs += 1;
            }
        }
    }
    let mut rng = SplitMix64::derive(seed, 0x63726f7373);
    let mut cross_sum = 0.0;
    for _ in 0..CROSS_PAIR_SAMPLES {
        let ga = rng.below(groups.len());
        let mut gb = rng.below(groups.len() - 1);
        if gb >= ga {
            gb += 1;
        }
        let a = &groups[ga].1[rng.below(groups[ga].1.len())];
        let b = &groups[gb].1[rng.below(groups[gb].1.len())];
        cross_sum += spearman(a, b)?;
    }
    Ok(CorrelationReport {
        within: within_sum / within_pairs as f64,
        cross: cross_sum / CROSS_PAIR_SAMPLES as f64,
        within_pairs,
        cross_pairs: CROSS_PAIR_SAMPLES,
    })
}

#[derive(Debug, Clone)]
pub struct PermutationReport {
    pub observed: f64,
    pub p_value: f64,
    pub permutations: usize,
}

/// Permutation test for the mean Spearman correlation of paired vectors.
/// Each round applies one shared random permutation of the channel order to
/// every target vector; the p-value is (1 + #{null >= observed}) / (1 + N).
pub fn spearman_permutation_pvalue(
    pairs: &[(&[f64], &[f64])],
    permutations: usize,
    seed: u64,
) -> Result<PermutationReport> {
    let observed = mean_spearman(pairs)?;
    let d = pairs[0].0.len();
    let mut rng = SplitMix64::derive(seed, 0x7065726d);
    let mut at_least = 0usize;
    let mut perm: Vec<usize> = (0..d).collect();
    let mut shuffled = vec![0.0; d];
    for _ in 0..permutations {
        rng.shuffle(&mut perm);
        let mut acc = 0.0;
        for (a, b) in pairs {
            for (dst, &src) in shuffled.iter_mut().zip(&perm) {
                *dst = b[src];
            }
            acc += spearman(a, &shuffled)?;
        }
        if acc / pairs.len() as f64 >= observed {
            at_least += 1;
        }
    }
    Ok(PermutationReport {
        observed,
        p_value: (1 + at_least) as f64 / (1 + permutations) as f64,
        permutations,
    })
}

/// Dump vectors as CSV: `instance_id,class_id,layer,n0,n1,...`.
pub fn write_importance_csv(path: &Path, vectors: &[ImportanceVector]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let width = vectors.first().map(|v| v.values.len()).unwrap_or(0);
    write!(f, "instance_id,class_id,layer")?;
    for n in 0..width {
        write!(f, ",n{n}")?;
    }
    writeln!(f)?;
    for v in vectors {
        match v.source {
            Source::Instance(id) => write!(f, "{id}")?,
            Source::ClassAggregate => write!(f, "class-aggregate")?,
        }
        write!(f, ",{},{}", v.class_id, v.layer)?;
        for x in &v.values {
            write!(f, ",{x}")?;
        }
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}
