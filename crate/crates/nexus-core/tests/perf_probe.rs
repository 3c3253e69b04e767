//! Rough per-step cost probe for the toy transformer. Ignored by default;
//! run with `cargo test --test perf_probe -- --ignored --nocapture`.

use nexus_core::numerics::{RngStream, Tape};
use std::time::Instant;

fn randn(rng: &mut RngStream, n: usize) -> Vec<f32> {
    let mut v = vec![0.0; n];
    rng.fill_normal(&mut v);
    v
}

#[test]
#[ignore]
fn transformer_step_cost() {
    let (n, d, blocks, heads) = (85usize, 64usize, 4usize, 4usize);
    let mut rng = RngStream::new(1);
    let weights: Vec<Vec<f32>> = (0..blocks * 6).map(|_| randn(&mut rng, d * d * 2)).collect();

    let sample = |rng: &mut RngStream| {
        let mut t = Tape::new();
        let mut h = t.leaf(&[n, d], randn(rng, n * d), false).unwrap();
        let g = t.leaf(&[1, d], vec![1.0; d], true).unwrap();
        let b = t.leaf(&[1, d], vec![0.0; d], true).unwrap();
        let mut params = vec![g, b];
        for bi in 0..blocks {
            let ln = t.layer_norm(h, g, b, 1e-5).unwrap();
            let wq = t.leaf(&[d, d], weights[bi * 6][..d * d].to_vec(), true).unwrap();
            let wk = t.leaf(&[d, d], weights[bi * 6 + 1][..d * d].to_vec(), true).unwrap();
            let wv = t.leaf(&[d, d], weights[bi * 6 + 2][..d * d].to_vec(), true).unwrap();
            let wo = t.leaf(&[d, d], weights[bi * 6 + 3][..d * d].to_vec(), true).unwrap();
            let q = t.matmul(ln, wq).unwrap();
            let k = t.matmul(ln, wk).unwrap();
            let v = t.matmul(ln, wv).unwrap();
            let a = t.attention(q, k, v, heads, true).unwrap();
            let o = t.matmul(a, wo).unwrap();
            h = t.add(h, o).unwrap();
            let ln2 = t.layer_norm(h, g, b, 1e-5).unwrap();
            let w1 = t.leaf(&[d, 2 * d], weights[bi * 6 + 4].to_vec(), true).unwrap();
            let w2 = t.leaf(&[2 * d, d], weights[bi * 6 + 5].to_vec(), true).unwrap();
            let m = t.matmul(ln2, w1).unwrap();
            let m = t.gelu(m).unwrap();
            let m = t.matmul(m, w2).unwrap();
            h = t.add(h, m).unwrap();
            params.extend([wq, wk, wv, wo, w1, w2]);
        }
        let sq = t.mul(h, h).unwrap();
        let loss = t.mean_all(sq).unwrap();
        let grads = t.backward(loss).unwrap();
        let mut acc = 0.0f32;
        for p in params {
            acc += grads.get(p).map(|g| g[0]).unwrap_or(0.0);
        }
        acc
    };

    // warmup
    let mut sink = 0.0;
    sink += sample(&mut rng);

    let batch = 32;
    let t0 = Instant::now();
    let seeds: Vec<u64> = (0..batch).map(|i| 100 + i as u64).collect();
    use rayon::prelude::*;
    let r: f32 = seeds
        .par_iter()
        .map(|&s| sample(&mut RngStream::new(s)))
        .sum();
    sink += r;
    let dt = t0.elapsed();
    println!("batch-32 fwd+bwd (seq {n}, d {d}, {blocks} blocks): {dt:?}  sink {sink}");
    println!("projected 2000 steps: {:?}", dt * 2000);
}
