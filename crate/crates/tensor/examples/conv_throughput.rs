//! Rough conv throughput probe: `cargo run --release --example conv_throughput`.

use std::time::Instant;

use cisunet_tensor::{Graph, Tensor};

fn main() {
    for &(n, cin, cout) in &[(64usize, 64usize, 64usize), (32, 128, 128), (16, 256, 256)] {
        let g = Graph::<f32>::inference();
        let x = g.constant(Tensor::from_fn(vec![1, n, n, n, cin], |i| {
            (i % 7) as f32 * 0.1
        }));
        let w = g.constant(Tensor::from_fn(vec![cout, 3, 3, 3, cin], |i| {
            (i % 5) as f32 * 0.01
        }));
        let t = Instant::now();
        let y = g.conv3d(&x, &w, None, 1, 1).unwrap();
        let secs = t.elapsed().as_secs_f64();
        let flops = 2.0 * (n * n * n * 27 * cin * cout) as f64;
        println!(
            "{n}^3 {cin}->{cout}: {secs:.3}s {:.1} GFLOP/s ({})",
            flops / secs / 1e9,
            y.value().numel()
        );
        let g = Graph::<f32>::new();
        let xv = g.leaf(x.value().clone());
        let wv = g.leaf(w.value().clone());
        let y = g.conv3d(&xv, &wv, None, 1, 1).unwrap();
        let loss = g.sum(&y);
        let t = Instant::now();
        g.backward(&loss).unwrap();
        println!("   backward {:.3}s", t.elapsed().as_secs_f64());
    }
}
