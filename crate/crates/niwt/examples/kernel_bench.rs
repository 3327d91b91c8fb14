//! Rough timing of the training hot path: one 64-image batch through the
//! default desk network, forward only and forward+backward.

use std::time::Instant;

use niwt::array::Array;
use niwt::autodiff::Graph;
use niwt::model::{stack_images, Network, NetworkSpec};
use niwt::rng::SplitMix64;

fn main() {
    let net = Network::build(NetworkSpec::default_desk((3, 32, 32), 40), 1).unwrap();
    let mut rng = SplitMix64::new(2);
    let imgs: Vec<Array> = (0..64)
        .map(|_| Array::new(vec![3, 32, 32], (0..3072).map(|_| rng.normal()).collect()).unwrap())
        .collect();
    let refs: Vec<&Array> = imgs.iter().collect();
    let batch = stack_images(&refs, (3, 32, 32)).unwrap();
    let labels: Vec<usize> = (0..64).map(|i| i % 40).collect();

    let t = Instant::now();
    let mut n = 0;
    while t.elapsed().as_secs_f64() < 3.0 {
        let g = Graph::new();
        let input = g.constant(&batch);
        let params = net.graph_params(&g, |_| true);
        let trace = net.forward_with(&g, &input, &params, None).unwrap();
        let loss = g.softmax_cross_entropy(&trace.scores, &labels).unwrap();
        std::hint::black_box(loss.item());
        n += 1;
    }
    println!("forward only: {:.1} ms/batch", t.elapsed().as_secs_f64() * 1000.0 / n as f64);

    let t = Instant::now();
    let mut n = 0;
    while t.elapsed().as_secs_f64() < 5.0 {
        let g = Graph::new();
        let input = g.constant(&batch);
        let params = net.graph_params(&g, |_| true);
        let trace = net.forward_with(&g, &input, &params, None).unwrap();
        let loss = g.softmax_cross_entropy(&trace.scores, &labels).unwrap();
        let wrt: Vec<_> = params.values().collect();
        let grads = g.backward(&loss, &wrt).unwrap();
        std::hint::black_box(grads.grads.len());
        n += 1;
    }
    println!(
        "forward+backward: {:.1} ms/batch",
        t.elapsed().as_secs_f64() * 1000.0 / n as f64
    );
}
