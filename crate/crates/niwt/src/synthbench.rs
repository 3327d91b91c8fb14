//! Attribute-grounded synthetic benchmark: classes are defined by small sets
//! of active attributes, each attribute always renders the same colored glyph
//! (injective linkage), and every rendered glyph's bounding box is recorded.
//! Also houses the generalized zero-shot split and evaluation metrics.

use crate::array::Array;
use crate::container::{self, ContainerError};
use crate::model::{ModelError, Network};
use crate::rng::SplitMix64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;
use thiserror::Error;

/// Maximum attribute dimension the renderer supports (4 shapes x 4 colors).
pub const MAX_ATTRIBUTES: usize = 16;
/// Active attributes per class in the default benchmark.
pub const ACTIVE_PER_CLASS: usize = 4;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("d_K must be in 1..={MAX_ATTRIBUTES}, got {0}")]
    BadAttributeDim(usize),
    #[error("cannot produce {classes} distinct attribute vectors over {d_k} attributes")]
    UnsatisfiableDistinctness { classes: usize, d_k: usize },
    #[error("sizes must be positive")]
    BadSize,
    #[error("image side must be at least 16 pixels, got {0}")]
    TooSmall(usize),
    #[error("split needs num_unseen >= 1")]
    NoUnseen,
    #[error("num_unseen + num_heldout must be < num_classes ({unseen}+{heldout} vs {classes})")]
    InfeasibleSplit { unseen: usize, heldout: usize, classes: usize },
    #[error("class {0} has no test instances")]
    EmptyClass(usize),
    #[error("empty class subset")]
    EmptySubset,
    #[error("predictions and labels differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("unseen-class instance {0} assigned outside the test split")]
    UnseenLeak(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest malformed: {0}")]
    Manifest(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

type Result<T> = std::result::Result<T, BenchError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Square,
    Disk,
    Triangle,
    Ring,
}

/// Glyph identity for attribute `j`: color cycles fastest, shape slowest, so
/// that low-dimensional attribute sets already differ in color (and are
/// therefore linearly separable in pixel space).
pub fn glyph_of_attribute(j: usize) -> (Shape, [f64; 3], String) {
    const SHAPES: [(Shape, &str); 4] = [
        (Shape::Square, "square"),
        (Shape::Disk, "disk"),
        (Shape::Triangle, "triangle"),
        (Shape::Ring, "ring"),
    ];
    const COLORS: [([f64; 3], &str); 4] = [
        ([1.0, 0.15, 0.15], "red"),
        ([0.15, 1.0, 0.15], "green"),
        ([0.2, 0.35, 1.0], "blue"),
        ([1.0, 1.0, 0.2], "yellow"),
    ];
    let (shape, sname) = SHAPES[(j / 4) % 4];
    let (color, cname) = COLORS[j % 4];
    (shape, color, format!("{cname}_{sname}"))
}

pub fn attribute_names(d_k: usize) -> Vec<String> {
    (0..d_k).map(|j| glyph_of_attribute(j).2).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AttributeClassSpec {
    pub class_id: usize,
    /// Binary attribute vector of length d_K.
    pub attributes: Vec<u8>,
}

/// Half-open pixel bounds of one rendered glyph.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GlyphBox {
    pub attribute: usize,
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ImageRecord {
    pub instance_id: usize,
    pub class_id: usize,
    pub boxes: Vec<GlyphBox>,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub d_k: usize,
    pub images_per_class: usize,
    /// (channels, height, width); always 3 channels.
    pub image_size: (usize, usize, usize),
    pub seed: u64,
    pub classes: Vec<AttributeClassSpec>,
    pub records: Vec<ImageRecord>,
    /// One [3, h, w] tensor per record, same order.
    pub images: Vec<Array>,
}

impl DatasetManifest {
    pub fn image(&self, instance_id: usize) -> &Array {
        &self.images[instance_id]
    }

    /// Attribute matrix as `class_id,k0,...` CSV text with a glyph-name header.
    pub fn attributes_csv(&self) -> String {
        let mut out = String::from("class_id");
        for name in attribute_names(self.d_k) {
            out.push(',');
            out.push_str(&name);
        }
        out.push('\n');
        for spec in &self.classes {
            out.push_str(&spec.class_id.to_string());
            for &v in &spec.attributes {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }
}

/// Distinct binary attribute vectors: fixed-size active sets when the space
/// allows, otherwise arbitrary distinct non-empty vectors.
fn sample_class_attributes(num_classes: usize, d_k: usize, rng: &mut SplitMix64) -> Result<Vec<Vec<u8>>> {
    if d_k == 0 || d_k > MAX_ATTRIBUTES {
        return Err(BenchError::BadAttributeDim(d_k));
    }
    let nonzero_vectors = (1u64 << d_k) - 1;
    if num_classes as u64 > nonzero_vectors {
        return Err(BenchError::UnsatisfiableDistinctness { classes: num_classes, d_k });
    }
    let active = ACTIVE_PER_CLASS.min(d_k);
    let n_choose_k = {
        let mut c = 1u64;
        for i in 0..active as u64 {
            c = c * (d_k as u64 - i) / (i + 1);
        }
        c
    };
    let fixed_size = n_choose_k >= num_classes as u64;
    let mut chosen: Vec<Vec<u8>> = Vec::with_capacity(num_classes);
    let mut attempts = 0usize;
    while chosen.len() < num_classes {
        attempts += 1;
        if attempts > 1000 * num_classes {
            return Err(BenchError::UnsatisfiableDistinctness { classes: num_classes, d_k });
        }
        let mut v = vec![0u8; d_k];
        if fixed_size {
            let mut idx: Vec<usize> = (0..d_k).collect();
            rng.shuffle(&mut idx);
            for &j in &idx[..active] {
                v[j] = 1;
            }
        } else {
            loop {
                for b in &mut v {
                    *b = (rng.next_u64() & 1) as u8;
                }
                if v.iter().any(|&b| b == 1) {
                    break;
                }
            }
        }
        if !chosen.contains(&v) {
            chosen.push(v);
        }
    }
    Ok(chosen)
}

/// Smooth low-frequency texture plus light pixel noise; values stay in [0, 1].
/// Also used by the transfer stage's class-agnostic probe pool.
pub fn render_background(h: usize, w: usize, rng: &mut SplitMix64) -> Array {
    let mut img = Array::zeros(&[3, h, w]);
    let waves: Vec<(f64, f64, f64, f64, usize)> = (0..4)
        .map(|_| {
            (
                rng.uniform(0.5, 3.0),            // spatial frequency (cycles per image)
                rng.uniform(0.0, std::f64::consts::TAU), // phase
                rng.uniform(0.0, std::f64::consts::TAU), // orientation
                rng.uniform(0.01, 0.04),          // amplitude
                rng.below(3),                     // channel
            )
        })
        .collect();
    // Near-gray base: luminance varies per image, per-channel tint stays
    // small so glyph colors dominate the channel statistics.
    let lum = rng.uniform(0.15, 0.35);
    let base: [f64; 3] = [
        lum + rng.uniform(-0.015, 0.015),
        lum + rng.uniform(-0.015, 0.015),
        lum + rng.uniform(-0.015, 0.015),
    ];
    let data = img.data_mut();
    for ch in 0..3 {
        for r in 0..h {
            for c in 0..w {
                let mut v = base[ch];
                for &(freq, phase, theta, amp, wch) in &waves {
                    if wch == ch {
                        let u = (r as f64 / h as f64) * theta.cos() + (c as f64 / w as f64) * theta.sin();
                        v += amp * (std::f64::consts::TAU * freq * u + phase).sin();
                    }
                }
                v += rng.uniform(-0.02, 0.02);
                data[(ch * h + r) * w + c] = v.clamp(0.0, 1.0);
            }
        }
    }
    img
}

fn draw_glyph(img: &mut Array, shape: Shape, color: [f64; 3], row0: usize, col0: usize, s: usize) {
    let shape_hit = |r: usize, c: usize| -> bool {
        let (fr, fc) = (r as f64 + 0.5, c as f64 + 0.5);
        let half = s as f64 / 2.0;
        let (dr, dc) = (fr - half, fc - half);
        match shape {
            Shape::Square => true,
            Shape::Disk => dr * dr + dc * dc <= half * half,
            // Upward-pointing triangle: row r spans a width growing with r.
            Shape::Triangle => dc.abs() <= half * (fr / s as f64),
            Shape::Ring => {
                let d2 = dr * dr + dc * dc;
                d2 <= half * half && d2 >= (half * 0.55) * (half * 0.55)
            }
        }
    };
    let shape_vec = img.shape().to_vec();
    let (h, w) = (shape_vec[1], shape_vec[2]);
    let data = img.data_mut();
    for r in 0..s {
        for c in 0..s {
            if shape_hit(r, c) {
                let (pr, pc) = (row0 + r, col0 + c);
                for ch in 0..3 {
                    data[(ch * h + pr) * w + pc] = color[ch];
                }
            }
        }
    }
}

/// Render the benchmark. Deterministic per seed; every image carries the
/// glyphs of its class's active attributes at random positions and scales.
pub fn generate_dataset(
    num_classes: usize,
    d_k: usize,
    images_per_class: usize,
    image_side: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    if num_classes == 0 || images_per_class == 0 {
        return Err(BenchError::BadSize);
    }
    if image_side < 16 {
        return Err(BenchError::TooSmall(image_side));
    }
    let mut rng = SplitMix64::derive(seed, 0x636c6173736573);
    let attrs = sample_class_attributes(num_classes, d_k, &mut rng)?;
    let classes: Vec<AttributeClassSpec> = attrs
        .into_iter()
        .enumerate()
        .map(|(class_id, attributes)| AttributeClassSpec { class_id, attributes })
        .collect();

    let (h, w) = (image_side, image_side);
    let total = num_classes * images_per_class;
    let mut records = Vec::with_capacity(total);
    let mut images = Vec::with_capacity(total);
    // Each image gets its own derived stream so rendering order is immaterial.
    let rendered: Vec<(ImageRecord, Array)> = (0..total)
        .into_par_iter()
        .map(|instance_id| {
            let class_id = instance_id / images_per_class;
            let mut rng = SplitMix64::derive(seed, 0x696d67_0000_0000 ^ instance_id as u64);
            let mut img = render_background(h, w, &mut rng);
            let mut boxes = Vec::new();
            for (j, &on) in classes[class_id].attributes.iter().enumerate() {
                if on == 0 {
                    continue;
                }
                let (shape, color, _) = glyph_of_attribute(j);
                let s = h / 4 + rng.below(h / 3 - h / 4 + 1);
                // Prefer positions that keep glyphs disjoint so no attribute
                // can be occluded out of its own image.
                let mut row0 = rng.below(h - s + 1);
                let mut col0 = rng.below(w - s + 1);
                for _ in 0..100 {
                    let clear = boxes.iter().all(|b: &GlyphBox| {
                        row0 + s <= b.row0 || b.row1 <= row0 || col0 + s <= b.col0 || b.col1 <= col0
                    });
                    if clear {
                        break;
                    }
                    row0 = rng.below(h - s + 1);
                    col0 = rng.below(w - s + 1);
                }
                draw_glyph(&mut img, shape, color, row0, col0, s);
                boxes.push(GlyphBox { attribute: j, row0, col0, row1: row0 + s, col1: col0 + s });
            }
            (ImageRecord { instance_id, class_id, boxes }, img)
        })
        .collect();
    for (rec, img) in rendered {
        records.push(rec);
        images.push(img);
    }
    Ok(DatasetManifest {
        num_classes,
        d_k,
        images_per_class,
        image_size: (3, h, w),
        seed,
        classes,
        records,
        images,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GzslSplit {
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
    /// Held-out validation classes (subset of `seen`, excluded from map fitting).
    pub heldout: Vec<usize>,
    /// Role per instance id.
    pub assignment: Vec<Role>,
}

/// Fractions of each seen class routed to train/val; the rest is test.
pub const SEEN_TRAIN_FRAC: f64 = 0.6;
pub const SEEN_VAL_FRAC: f64 = 0.2;

/// Random class partition: unseen classes contribute test instances only,
/// seen-class instances split 60/20/20 into train/val/test.
pub fn split_gzsl(
    manifest: &DatasetManifest,
    num_unseen: usize,
    num_heldout: usize,
    seed: u64,
) -> Result<GzslSplit> {
    if num_unseen == 0 {
        return Err(BenchError::NoUnseen);
    }
    if num_unseen + num_heldout >= manifest.num_classes {
        return Err(BenchError::InfeasibleSplit {
            unseen: num_unseen,
            heldout: num_heldout,
            classes: manifest.num_classes,
        });
    }
    let mut rng = SplitMix64::derive(seed, 0x73706c6974);
    let mut class_order: Vec<usize> = (0..manifest.num_classes).collect();
    rng.shuffle(&mut class_order);
    let mut unseen: Vec<usize> = class_order[..num_unseen].to_vec();
    let mut heldout: Vec<usize> = class_order[num_unseen..num_unseen + num_heldout].to_vec();
    let mut seen: Vec<usize> = class_order[num_unseen..].to_vec();
    unseen.sort_unstable();
    heldout.sort_unstable();
    seen.sort_unstable();

    let per = manifest.images_per_class;
    let n_train = (per as f64 * SEEN_TRAIN_FRAC).round() as usize;
    let n_val = (per as f64 * SEEN_VAL_FRAC).round() as usize;
    let mut assignment = vec![Role::Test; manifest.records.len()];
    for &c in &seen {
        let mut ids: Vec<usize> = (c * per..(c + 1) * per).collect();
        rng.shuffle(&mut ids);
        for (i, &id) in ids.iter().enumerate() {
            assignment[id] = if i < n_train {
                Role::Train
            } else if i < n_train + n_val {
                Role::Val
            } else {
                Role::Test
            };
        }
    }
    Ok(GzslSplit { seen, unseen, heldout, assignment })
}

impl GzslSplit {
    pub fn instances_with_role(&self, role: Role) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &r)| r == role)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Verify no unseen-class instance leaks into train or val.
pub fn audit_split(manifest: &DatasetManifest, split: &GzslSplit) -> Result<()> {
    for rec in &manifest.records {
        if split.unseen.contains(&rec.class_id) && split.assignment[rec.instance_id] != Role::Test {
            return Err(BenchError::UnseenLeak(rec.instance_id));
        }
    }
    Ok(())
}

/// Head-row order: sorted seen class ids, then sorted unseen class ids.
#[derive(Debug, Clone)]
pub struct ClassIndex {
    order: Vec<usize>,
    num_seen: usize,
}

impl ClassIndex {
    pub fn new(split: &GzslSplit) -> Self {
        let mut order = split.seen.clone();
        order.extend_from_slice(&split.unseen);
        ClassIndex { order, num_seen: split.seen.len() }
    }

    /// Seen classes only (the pre-expansion head).
    pub fn seen_only(split: &GzslSplit) -> Self {
        ClassIndex { order: split.seen.clone(), num_seen: split.seen.len() }
    }

    pub fn row_of(&self, class_id: usize) -> Option<usize> {
        self.order.iter().position(|&c| c == class_id)
    }

    pub fn class_of(&self, row: usize) -> usize {
        self.order[row]
    }

    pub fn num_seen(&self) -> usize {
        self.num_seen
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

/// Mean per-class accuracy over `subset` classes. Predictions and labels are
/// global class ids; predictions may range over the full label space.
pub fn class_normalized_accuracy(
    predictions: &[usize],
    labels: &[usize],
    subset: &[usize],
) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(BenchError::LengthMismatch(predictions.len(), labels.len()));
    }
    if subset.is_empty() {
        return Err(BenchError::EmptySubset);
    }
    let mut acc = 0.0;
    for &c in subset {
        let mut total = 0usize;
        let mut correct = 0usize;
        for (&p, &l) in predictions.iter().zip(labels) {
            if l == c {
                total += 1;
                if p == c {
                    correct += 1;
                }
            }
        }
        if total == 0 {
            return Err(BenchError::EmptyClass(c));
        }
        acc += correct as f64 / total as f64;
    }
    Ok(acc / subset.len() as f64)
}

/// Harmonic mean of the two accuracies; 0 when both are 0.
pub fn harmonic_mean(acc_u: f64, acc_s: f64) -> f64 {
    if acc_u + acc_s == 0.0 {
        0.0
    } else {
        2.0 * acc_u * acc_s / (acc_u + acc_s)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GzslReport {
    pub acc_u: f64,
    pub acc_s: f64,
    pub h: f64,
}

/// Class-normalized accuracies over the test split with the full S∪U label
/// space, for a network whose head rows follow `index`.
pub fn evaluate_gzsl(
    net: &Network,
    manifest: &DatasetManifest,
    split: &GzslSplit,
    index: &ClassIndex,
) -> Result<GzslReport> {
    let test_ids = split.instances_with_role(Role::Test);
    let mut preds = Vec::with_capacity(test_ids.len());
    let mut labels = Vec::with_capacity(test_ids.len());
    for chunk in test_ids.chunks(256) {
        let imgs: Vec<&Array> = chunk.iter().map(|&id| manifest.image(id)).collect();
        for (row, &id) in net.predict(&imgs)?.into_iter().zip(chunk) {
            preds.push(index.class_of(row));
            labels.push(manifest.records[id].class_id);
        }
    }
    let acc_u = class_normalized_accuracy(&preds, &labels, &split.unseen)?;
    let acc_s = class_normalized_accuracy(&preds, &labels, &split.seen)?;
    Ok(GzslReport { acc_u, acc_s, h: harmonic_mean(acc_u, acc_s) })
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    num_classes: usize,
    d_k: usize,
    images_per_class: usize,
    image_size: (usize, usize, usize),
    seed: u64,
    classes: Vec<AttributeClassSpec>,
    records: Vec<ImageRecord>,
}

/// Write manifest.json, images.niwt, and attributes.csv into `dir`.
pub fn save_manifest(manifest: &DatasetManifest, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let file = ManifestFile {
        num_classes: manifest.num_classes,
        d_k: manifest.d_k,
        images_per_class: manifest.images_per_class,
        image_size: manifest.image_size,
        seed: manifest.seed,
        classes: manifest.classes.clone(),
        records: manifest.records.clone(),
    };
    let json = serde_json::to_string_pretty(&file).map_err(|e| BenchError::Manifest(e.to_string()))?;
    std::fs::write(dir.join("manifest.json"), json)?;

    let (c, h, w) = manifest.image_size;
    let mut packed = Vec::with_capacity(manifest.images.len() * c * h * w);
    for img in &manifest.images {
        packed.extend_from_slice(img.data());
    }
    let images = Array::from_parts(vec![manifest.images.len(), c, h, w], packed);
    container::write_container(
        &dir.join("images.niwt"),
        &serde_json::json!({"kind": "images", "seed": manifest.seed}),
        &[("images".into(), &images)],
    )?;

    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("attributes.csv"))?);
    f.write_all(manifest.attributes_csv().as_bytes())?;
    f.flush()?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let json = std::fs::read_to_string(dir.join("manifest.json"))?;
    let file: ManifestFile = serde_json::from_str(&json).map_err(|e| BenchError::Manifest(e.to_string()))?;
    let (_, tensors) = container::read_container(&dir.join("images.niwt"))?;
    let packed = tensors
        .into_iter()
        .find(|(n, _)| n == "images")
        .ok_or_else(|| BenchError::Manifest("missing images tensor".into()))?
        .1;
    let (c, h, w) = file.image_size;
    let per = c * h * w;
    if packed.shape() != [file.records.len(), c, h, w] {
        return Err(BenchError::Manifest(format!(
            "image tensor shape {:?} does not match {} records of {:?}",
            packed.shape(),
            file.records.len(),
            file.image_size
        )));
    }
    let images: Vec<Array> = (0..file.records.len())
        .map(|i| Array::from_parts(vec![c, h, w], packed.data()[i * per..(i + 1) * per].to_vec()))
        .collect();
    Ok(DatasetManifest {
        num_classes: file.num_classes,
        d_k: file.d_k,
        images_per_class: file.images_per_class,
        image_size: file.image_size,
        seed: file.seed,
        classes: file.classes,
        records: file.records,
        images,
    })
}

pub fn save_split(split: &GzslSplit, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(split).map_err(|e| BenchError::Manifest(e.to_string()))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_split(path: &Path) -> Result<GzslSplit> {
    let json = std::fs::read_to_string(path)?;
    serde_json::from_str(&json).map_err(|e| BenchError::Manifest(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_mean_matches_reported_value() {
        let h = harmonic_mean(35.3, 75.5);
        assert!((h - 48.1).abs() <= 0.05, "H {h}");
        assert!((harmonic_mean(0.42, 0.42) - 0.42).abs() < 1e-15);
        assert_eq!(harmonic_mean(0.0, 0.9), 0.0);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
    }

    #[test]
    fn harmonic_mean_bounded_by_min_and_max() {
        let mut rng = SplitMix64::new(1);
        for _ in 0..100_000 {
            let a = rng.uniform(0.0, 1.0);
            let b = rng.uniform(0.0, 1.0);
            let h = harmonic_mean(a, b);
            assert!(h >= a.min(b) - 1e-12 && h <= a.max(b) + 1e-12, "({a},{b}) -> {h}");
        }
    }

    #[test]
    fn generation_is_deterministic_and_distinct() {
        let a = generate_dataset(10, 8, 2, 16, 5).unwrap();
        let b = generate_dataset(10, 8, 2, 16, 5).unwrap();
        for (x, y) in a.images.iter().zip(&b.images) {
            for (p, q) in x.data().iter().zip(y.data()) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
        }
        assert_eq!(a.records, b.records);
        // 50 classes over 8 attributes still yields distinct vectors.
        let big = generate_dataset(50, 8, 1, 16, 9).unwrap();
        for i in 0..50 {
            for j in i + 1..50 {
                assert_ne!(big.classes[i].attributes, big.classes[j].attributes);
            }
        }
        let c = generate_dataset(10, 8, 2, 16, 6).unwrap();
        assert_ne!(a.images[0].data(), c.images[0].data());
    }

    #[test]
    fn boxes_lie_within_bounds_and_pixels_in_range() {
        let m = generate_dataset(6, 16, 3, 32, 11).unwrap();
        for rec in &m.records {
            assert_eq!(rec.boxes.len(), ACTIVE_PER_CLASS);
            for b in &rec.boxes {
                assert!(b.row1 > b.row0 && b.col1 > b.col0);
                assert!(b.row1 <= 32 && b.col1 <= 32);
            }
        }
        for img in &m.images {
            assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn rejects_bad_generator_inputs() {
        assert!(matches!(generate_dataset(10, 3, 1, 16, 1), Err(BenchError::UnsatisfiableDistinctness { .. })));
        assert!(matches!(generate_dataset(10, 0, 1, 16, 1), Err(BenchError::BadAttributeDim(0))));
        assert!(matches!(generate_dataset(10, 17, 1, 16, 1), Err(BenchError::BadAttributeDim(17))));
        assert!(matches!(generate_dataset(0, 4, 1, 16, 1), Err(BenchError::BadSize)));
        assert!(matches!(generate_dataset(2, 4, 1, 8, 1), Err(BenchError::TooSmall(8))));
    }

    #[test]
    fn two_distinct_classes_are_linearly_separable() {
        // Logistic regression on raw pixels, trained on half of each class.
        use crate::autodiff::Graph;
        use crate::optim::Adam;
        // Seed 5 yields class vectors {1,1} vs {0,1}: exactly one differing
        // attribute (the red glyph).
        let m = generate_dataset(2, 2, 160, 24, 5).unwrap();
        assert_eq!(
            m.classes[0]
                .attributes
                .iter()
                .zip(&m.classes[1].attributes)
                .filter(|(a, b)| a != b)
                .count(),
            1
        );
        let dim: usize = 3 * 24 * 24;
        let mut train_px = Vec::new();
        let mut train_labels = Vec::new();
        let mut held = Vec::new();
        for rec in &m.records {
            if rec.instance_id % m.images_per_class < 80 {
                train_px.extend_from_slice(m.images[rec.instance_id].data());
                train_labels.push(rec.class_id);
            } else {
                held.push(rec);
            }
        }
        let x = Array::from_parts(vec![train_labels.len(), dim], train_px);
        let mut w = Array::zeros(&[2, dim]);
        let mut adam = Adam::new(0.05, &[2 * dim]);
        for _ in 0..150 {
            let g = Graph::new();
            let wt = g.leaf(&w);
            let scores = g.matmul(&g.constant(&x), &g.transpose(&wt).unwrap()).unwrap();
            let loss = g.softmax_cross_entropy(&scores, &train_labels).unwrap();
            let grad = g.backward(&loss, &[&wt]).unwrap().grads[0].value();
            adam.step(&mut [&mut w], &[&grad]);
        }
        let mut correct = 0usize;
        for rec in &held {
            let px = m.images[rec.instance_id].data();
            let s0: f64 = w.data()[..dim].iter().zip(px).map(|(a, b)| a * b).sum();
            let s1: f64 = w.data()[dim..].iter().zip(px).map(|(a, b)| a * b).sum();
            if usize::from(s1 > s0) == rec.class_id {
                correct += 1;
            }
        }
        let acc = correct as f64 / held.len() as f64;
        assert!(acc >= 0.95, "probe accuracy {acc}");
    }

    #[test]
    fn split_counts_and_errors() {
        let m = generate_dataset(50, 16, 10, 16, 7).unwrap();
        let s = split_gzsl(&m, 10, 5, 7).unwrap();
        assert_eq!(s.seen.len(), 40);
        assert_eq!(s.unseen.len(), 10);
        assert_eq!(s.heldout.len(), 5);
        assert!(s.heldout.iter().all(|c| s.seen.contains(c)));
        assert!(s.unseen.iter().all(|c| !s.seen.contains(c)));
        audit_split(&m, &s).unwrap();
        // Seen classes split 6/2/2 per 10 images.
        let train = s.instances_with_role(Role::Train);
        assert_eq!(train.len(), 40 * 6);
        assert_eq!(s.instances_with_role(Role::Val).len(), 40 * 2);
        assert_eq!(s.instances_with_role(Role::Test).len(), 40 * 2 + 10 * 10);
        // Determinism and error paths.
        assert_eq!(split_gzsl(&m, 10, 5, 7).unwrap(), s);
        assert!(matches!(split_gzsl(&m, 0, 5, 7), Err(BenchError::NoUnseen)));
        assert!(matches!(split_gzsl(&m, 45, 5, 7), Err(BenchError::InfeasibleSplit { .. })));
    }

    #[test]
    fn class_index_orders_seen_then_unseen() {
        let m = generate_dataset(6, 8, 2, 16, 3).unwrap();
        let s = split_gzsl(&m, 2, 1, 1).unwrap();
        let idx = ClassIndex::new(&s);
        assert_eq!(idx.len(), 6);
        assert_eq!(idx.num_seen(), 4);
        for (row, &c) in s.seen.iter().chain(&s.unseen).enumerate() {
            assert_eq!(idx.class_of(row), c);
            assert_eq!(idx.row_of(c), Some(row));
        }
    }

    #[test]
    fn class_normalized_accuracy_examples() {
        // Class 0 fully correct, class 1 fully wrong.
        let preds = vec![0, 0, 2, 2];
        let labels = vec![0, 0, 1, 1];
        assert_eq!(class_normalized_accuracy(&preds, &labels, &[0, 1]).unwrap(), 0.5);
        assert_eq!(class_normalized_accuracy(&labels, &labels, &[0, 1]).unwrap(), 1.0);
        assert!(matches!(
            class_normalized_accuracy(&preds, &labels, &[]),
            Err(BenchError::EmptySubset)
        ));
        assert!(matches!(
            class_normalized_accuracy(&preds, &labels, &[7]),
            Err(BenchError::EmptyClass(7))
        ));
        // Duplicating one class's instances leaves the metric unchanged.
        let mut preds2 = preds.clone();
        let mut labels2 = labels.clone();
        preds2.extend([0, 0]);
        labels2.extend([0, 0]);
        assert_eq!(
            class_normalized_accuracy(&preds2, &labels2, &[0, 1]).unwrap(),
            class_normalized_accuracy(&preds, &labels, &[0, 1]).unwrap()
        );
    }

    #[test]
    fn random_predictions_hit_chance_rate() {
        let classes = 50usize;
        let per = 40usize;
        let mut rng = SplitMix64::new(13);
        let labels: Vec<usize> = (0..classes).flat_map(|c| std::iter::repeat(c).take(per)).collect();
        let preds: Vec<usize> = labels.iter().map(|_| rng.below(classes)).collect();
        let subset: Vec<usize> = (0..classes).collect();
        let acc = class_normalized_accuracy(&preds, &labels, &subset).unwrap();
        let p = 1.0 / classes as f64;
        // 3 sigma over classes*per Bernoulli trials.
        let sigma = (p * (1.0 - p) / (classes * per) as f64).sqrt();
        assert!((acc - p).abs() <= 3.0 * sigma, "acc {acc} vs chance {p}");
    }

    #[test]
    fn manifest_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(4, 8, 3, 16, 21).unwrap();
        save_manifest(&m, dir.path()).unwrap();
        let loaded = load_manifest(dir.path()).unwrap();
        assert_eq!(loaded.classes, m.classes);
        assert_eq!(loaded.records, m.records);
        for (a, b) in loaded.images.iter().zip(&m.images) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let s = split_gzsl(&m, 1, 1, 2).unwrap();
        let path = dir.path().join("split.json");
        save_split(&s, &path).unwrap();
        assert_eq!(load_split(&path).unwrap(), s);
        // Attribute CSV parses through knowledge ingestion with glyph names.
        let set = crate::knowmap::KnowledgeSet::from_csv_str(
            &m.attributes_csv(),
            crate::knowmap::Modality::Attributes,
        )
        .unwrap();
        assert_eq!(set.dim, 8);
        assert_eq!(set.names.as_ref().unwrap()[0], "red_square");
        assert_eq!(set.vectors.len(), 4);
    }
}
