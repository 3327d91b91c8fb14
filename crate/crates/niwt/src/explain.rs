//! Explanations for classifier decisions: Grad-CAM heatmaps weighted by the
//! per-channel importances, textual attribute explanations through the
//! inverse (importance -> knowledge) map, and neuron naming.

use crate::array::Array;
use crate::autodiff::{AutodiffError, Graph};
use crate::importance::spatial_mean_per_channel;
use crate::knowmap::{Direction, KnowmapError, LinearMap};
use crate::model::{stack_images, LayerKind, ModelError, Network};
use crate::synthbench::GlyphBox;
use serde::Serialize;
use std::io::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("layer {0} is not convolutional")]
    NotConvLayer(String),
    #[error("class row {class} out of range for a {classes}-way head")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("k must satisfy 1 <= k <= {d_k}, got {k}")]
    BadK { k: usize, d_k: usize },
    #[error("inverse map must run importance -> knowledge")]
    WrongDirection,
    #[error("neuron {neuron} out of range for {channels} channels")]
    NeuronOutOfRange { neuron: usize, channels: usize },
    #[error("ground-truth attribute set is empty for instance {0}")]
    EmptyGroundTruth(usize),
    #[error("explanation/ground-truth count mismatch: {explanations} vs {truths}")]
    CountMismatch { explanations: usize, truths: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Knowmap(#[from] KnowmapError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, ExplainError>;

/// Non-negative spatial support map for one (instance, class) decision,
/// max-normalized to 1 unless identically zero.
#[derive(Debug, Clone, Serialize)]
pub struct Heatmap {
    pub instance_id: usize,
    pub class_id: usize,
    pub layer: String,
    /// Shape [h, w] at the capture layer's resolution (or upsampled).
    pub values: Array,
}

impl Heatmap {
    /// Bilinearly resample to `(out_h, out_w)`, then re-normalize the max to
    /// 1 (bilinear interpolation can otherwise lower the peak slightly).
    pub fn upsample(&self, out_h: usize, out_w: usize) -> Heatmap {
        let shape = self.values.shape();
        let (h, w) = (shape[0], shape[1]);
        let src = self.values.data();
        let mut out = vec![0.0; out_h * out_w];
        for r in 0..out_h {
            // Pixel-center mapping: dst center (r + 0.5) lands at the source
            // coordinate (r + 0.5) * h / out_h.
            let sy = ((r as f64 + 0.5) * h as f64 / out_h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = sy - y0 as f64;
            for c in 0..out_w {
                let sx =
                    ((c as f64 + 0.5) * w as f64 / out_w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = sx - x0 as f64;
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                out[r * out_w + c] = top * (1.0 - fy) + bot * fy;
            }
        }
        let max = out.iter().cloned().fold(0.0f64, f64::max);
        if max > 0.0 {
            for v in &mut out {
                *v /= max;
            }
        }
        Heatmap {
            instance_id: self.instance_id,
            class_id: self.class_id,
            layer: self.layer.clone(),
            values: Array::from_parts(vec![out_h, out_w], out),
        }
    }

    /// 8-bit binary PGM, max value scaled to 255.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let shape = self.values.shape();
        let (h, w) = (shape[0], shape[1]);
        let max = self.values.data().iter().cloned().fold(0.0f64, f64::max);
        let mut bytes = Vec::with_capacity(h * w + 32);
        bytes.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
        for &v in self.values.data() {
            let scaled = if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 };
            bytes.push(scaled);
        }
        std::fs::write(path, bytes)?;
        Ok(())
    }

    /// Raw values as CSV, one image row per line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let shape = self.values.shape();
        let (h, w) = (shape[0], shape[1]);
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in 0..h {
            let row: Vec<String> =
                (0..w).map(|c| format!("{}", self.values.data()[r * w + c])).collect();
            writeln!(f, "{}", row.join(","))?;
        }
        f.flush()?;
        Ok(())
    }
}

/// relu(sum_n alpha_n * a_n), max-normalized. Exposed for the
/// dual-implementation oracle and for callers that already hold alpha and the
/// activation map.
pub fn weighted_activation_map(alpha: &[f64], activation: &Array) -> Array {
    let shape = activation.shape();
    let (c, h, w) = (shape[shape.len() - 3], shape[shape.len() - 2], shape[shape.len() - 1]);
    let data = activation.data();
    let mut out = vec![0.0; h * w];
    for n in 0..c {
        let plane = &data[n * h * w..(n + 1) * h * w];
        for (o, &a) in out.iter_mut().zip(plane) {
            *o += alpha[n] * a;
        }
    }
    for v in &mut out {
        *v = v.max(0.0);
    }
    let max = out.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        for v in &mut out {
            *v /= max;
        }
    }
    Array::from_parts(vec![h, w], out)
}

/// Grad-CAM at a convolutional layer: channel importances of `class_row` on
/// this instance weight the captured activation maps.
pub fn gradcam(
    net: &Network,
    layer: &str,
    input: &Array,
    class_row: usize,
    instance_id: usize,
) -> Result<Heatmap> {
    match net.spec.layer(layer).map(|l| &l.kind) {
        Some(LayerKind::Conv { .. }) => {}
        _ => return Err(ExplainError::NotConvLayer(layer.to_string())),
    }
    let classes = net.num_classes();
    if class_row >= classes {
        return Err(ExplainError::ClassOutOfRange { class: class_row, classes });
    }
    let g = Graph::new();
    let batch = g.constant(&stack_images(&[input], net.spec.input)?);
    let params = net.graph_params(&g, |_| false);
    let trace = net.forward_with(&g, &batch, &params, Some(layer))?;
    let captured = trace.captured.expect("capture layer checked above");
    let mut onehot = Array::zeros(&[1, classes]);
    onehot.data_mut()[class_row] = 1.0;
    let o_c = g.sum(&g.mul(&trace.scores, &g.constant(&onehot))?)?;
    let grads = g.backward(&o_c, &[&captured])?;
    let grad = grads.grads[0].value();
    grad.check_finite().map_err(AutodiffError::from)?;
    let alpha = spatial_mean_per_channel(&grad);
    let activation = captured.value();
    Ok(Heatmap {
        instance_id,
        class_id: class_row,
        layer: layer.to_string(),
        values: weighted_activation_map(&alpha, &activation),
    })
}

/// Fraction of heatmap energy inside the union of the boxes. The heatmap must
/// already be at image resolution.
pub fn bbox_energy_fraction(heatmap: &Heatmap, boxes: &[GlyphBox]) -> f64 {
    let shape = heatmap.values.shape();
    let (h, w) = (shape[0], shape[1]);
    let data = heatmap.values.data();
    let total: f64 = data.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    let mut inside = 0.0;
    for r in 0..h {
        for c in 0..w {
            if boxes.iter().any(|b| r >= b.row0 && r < b.row1 && c >= b.col0 && c < b.col1) {
                inside += data[r * w + c];
            }
        }
    }
    inside / total
}

#[derive(Debug, Clone, Serialize)]
pub struct AttributeScore {
    pub attribute: usize,
    pub name: String,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TextualExplanation {
    pub class_id: usize,
    pub k: usize,
    /// Non-increasing by score; ties broken by lowest attribute index.
    pub topk: Vec<AttributeScore>,
}

fn attribute_label(names: Option<&[String]>, j: usize) -> String {
    names.map(|n| n[j].clone()).unwrap_or_else(|| format!("attr{j}"))
}

/// Top-k attribute dimensions of W_{a->K} . a_c.
pub fn textual_explanation(
    inverse_map: &LinearMap,
    a_c: &[f64],
    class_id: usize,
    k: usize,
    names: Option<&[String]>,
) -> Result<TextualExplanation> {
    if inverse_map.direction != Direction::AToK {
        return Err(ExplainError::WrongDirection);
    }
    let scores = inverse_map.apply(a_c)?;
    let d_k = scores.len();
    if k == 0 || k > d_k {
        return Err(ExplainError::BadK { k, d_k });
    }
    let mut order: Vec<usize> = (0..d_k).collect();
    order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap().then(i.cmp(&j)));
    let topk = order[..k]
        .iter()
        .map(|&j| AttributeScore { attribute: j, name: attribute_label(names, j), score: scores[j] })
        .collect();
    Ok(TextualExplanation { class_id, k, topk })
}

/// Mean over instances of |top-k of the explanation ∩ ground truth| / |gt|.
pub fn explanation_fidelity(
    explanations: &[TextualExplanation],
    ground_truth: &[Vec<u8>],
) -> Result<f64> {
    if explanations.len() != ground_truth.len() {
        return Err(ExplainError::CountMismatch {
            explanations: explanations.len(),
            truths: ground_truth.len(),
        });
    }
    let mut acc = 0.0;
    for (i, (e, gt)) in explanations.iter().zip(ground_truth).enumerate() {
        if gt.is_empty() {
            return Err(ExplainError::EmptyGroundTruth(i));
        }
        let hits = e
            .topk
            .iter()
            .filter(|s| gt.contains(&(s.attribute as u8)))
            .count();
        acc += hits as f64 / gt.len() as f64;
    }
    Ok(acc / explanations.len() as f64)
}

/// Name a neuron by the attribute its one-hot importance maps to:
/// argmax of W_{a->K} . e_n, lowest index on ties.
pub fn neuron_name(
    inverse_map: &LinearMap,
    neuron: usize,
    names: Option<&[String]>,
) -> Result<(usize, String)> {
    if inverse_map.direction != Direction::AToK {
        return Err(ExplainError::WrongDirection);
    }
    let channels = inverse_map.matrix.shape()[1];
    if neuron >= channels {
        return Err(ExplainError::NeuronOutOfRange { neuron, channels });
    }
    let mut onehot = vec![0.0; channels];
    onehot[neuron] = 1.0;
    let scores = inverse_map.apply(&onehot)?;
    let mut best = 0;
    for (j, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = j;
        }
    }
    Ok((best, attribute_label(names, best)))
}

/// `{instance, class, topk: [{attribute, score}]}` records.
pub fn write_explanations_json(
    path: &Path,
    records: &[(usize, TextualExplanation)],
) -> Result<()> {
    #[derive(Serialize)]
    struct TopEntry<'a> {
        attribute: &'a str,
        score: f64,
    }
    #[derive(Serialize)]
    struct Record<'a> {
        instance: usize,
        class: usize,
        topk: Vec<TopEntry<'a>>,
    }
    let out: Vec<Record> = records
        .iter()
        .map(|(instance, e)| Record {
            instance: *instance,
            class: e.class_id,
            topk: e
                .topk
                .iter()
                .map(|s| TopEntry { attribute: &s.name, score: s.score })
                .collect(),
        })
        .collect();
    let json = serde_json::to_string_pretty(&out).expect("serializable");
    std::fs::write(path, json)?;
    Ok(())
}
