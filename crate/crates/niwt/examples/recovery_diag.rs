//! Diagnose what limits oracle weight recovery: row-norm calibration, bias
//! replacement, or unrecovered directions. Run against an existing run dir.

use niwt::model::load_checkpoint;
use niwt::synthbench::{class_normalized_accuracy, load_manifest, load_split, ClassIndex, Role};
use niwt::transfer::{
    mean_probe_importances, sample_probes, transfer_weights_with_mean, ProbeMode, TransferConfig,
    TransferTarget,
};
use niwt::SplitMix64;

fn main() {
    let out = std::env::args().nth(1).unwrap_or_else(|| "runs/default".into());
    let manifest = load_manifest(&std::path::Path::new(&out).join("data")).unwrap();
    let split = load_split(&std::path::Path::new(&out).join("split.json")).unwrap();
    let (net, _) = load_checkpoint(&std::path::Path::new(&out).join("checkpoint_seen.niwt")).unwrap();
    let index = ClassIndex::seen_only(&split);

    let test_ids: Vec<usize> = split
        .instances_with_role(Role::Test)
        .into_iter()
        .filter(|&id| split.seen.contains(&manifest.records[id].class_id))
        .collect();
    let acc = |net: &niwt::model::Network| -> f64 {
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        for chunk in test_ids.chunks(256) {
            let imgs: Vec<&niwt::Array> = chunk.iter().map(|&id| manifest.image(id)).collect();
            for (row, &id) in net.predict(&imgs).unwrap().into_iter().zip(chunk) {
                preds.push(index.class_of(row));
                labels.push(manifest.records[id].class_id);
            }
        }
        class_normalized_accuracy(&preds, &labels, &split.seen).unwrap()
    };

    println!("original: {:.4}", acc(&net));

    let rows = net.spec.head().2;
    let in_dim = net.spec.head().1;
    let mean_bias = net.head_bias().data().iter().sum::<f64>() / rows as f64;

    let mut mb = net.clone();
    mb.param_mut("head.bias").unwrap().data_mut().fill(mean_bias);
    println!("mean bias only: {:.4}", acc(&mb));

    let mut norm = mb.clone();
    {
        let w = norm.param_mut("head.weight").unwrap();
        for r in 0..rows {
            let row = &mut w.data_mut()[r * in_dim..(r + 1) * in_dim];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in row.iter_mut() {
                *v /= n;
            }
        }
    }
    println!("unit rows + mean bias: {:.4}", acc(&norm));

    // Recovery at eps=0, then per-row cosine to the original rows.
    let cfg = TransferConfig {
        lambda: 1e-4,
        lr: 1e-2,
        max_iters: 500,
        layer: "gap".into(),
        ..TransferConfig::default()
    };
    let probes = sample_probes(
        ProbeMode::Generic,
        128,
        net.spec.input,
        7 ^ 0x70726f6265,
        Some((&manifest, &split)),
    )
    .unwrap();
    let oracle = mean_probe_importances(&net, "gap", &probes).unwrap();
    let w_bar: Vec<f64> = {
        let w = net.head_weight();
        (0..in_dim)
            .map(|d| (0..rows).map(|r| w.data()[r * in_dim + d]).sum::<f64>() / rows as f64)
            .collect()
    };
    let mut fresh = net.clone();
    let rms = {
        let w = net.head_weight();
        (w.data().iter().map(|v| v * v).sum::<f64>() / w.len() as f64).sqrt()
    };
    let mut rng = SplitMix64::derive(0, 0x7265636f766572);
    for v in fresh.param_mut("head.weight").unwrap().data_mut() {
        *v = 0.1 * rms * rng.normal();
    }
    fresh.param_mut("head.bias").unwrap().data_mut().fill(mean_bias);
    let targets: Vec<TransferTarget> = oracle
        .iter()
        .enumerate()
        .map(|(row, vals)| TransferTarget {
            head_row: row,
            class_id: index.class_of(row),
            importance: vals.clone(),
        })
        .collect();
    let (rec, _) = transfer_weights_with_mean(&fresh, &w_bar, &targets, &probes, &cfg).unwrap();
    println!("recovered eps=0: {:.4}", acc(&rec));

    let wo = net.head_weight();
    let wr = rec.head_weight();
    let mut coss = Vec::new();
    let mut norms = Vec::new();
    for r in 0..rows {
        let a = &wo.data()[r * in_dim..(r + 1) * in_dim];
        let b = &wr.data()[r * in_dim..(r + 1) * in_dim];
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        coss.push(dot / (na * nb));
        norms.push(nb / na);
    }
    let mc = coss.iter().sum::<f64>() / rows as f64;
    println!(
        "row cos(orig, rec): mean {:.4} min {:.4}; norm ratio mean {:.3} min {:.3} max {:.3}",
        mc,
        coss.iter().cloned().fold(f64::INFINITY, f64::min),
        norms.iter().sum::<f64>() / rows as f64,
        norms.iter().cloned().fold(f64::INFINITY, f64::min),
        norms.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
}
