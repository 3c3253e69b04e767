use nexus_core::numerics::{RngStream, Tape};
use std::time::Instant;

fn randn(rng: &mut RngStream, n: usize) -> Vec<f32> {
    let mut v = vec![0.0; n];
    rng.fill_normal(&mut v);
    v
}

fn main() {
    let (n, d, blocks, heads) = (100usize, 64usize, 4usize, 4usize);
    let mut rng = RngStream::new(1);
    let weights: Vec<Vec<f32>> = (0..blocks * 6).map(|_| randn(&mut rng, d * d * 4)).collect();

    let build = |rng: &mut RngStream| {
        let mut t = Tape::new();
        let mut h = t.leaf(&[n, d], randn(rng, n * d), false).unwrap();
        let g = t.leaf(&[1, d], vec![1.0; d], true).unwrap();
        let b = t.leaf(&[1, d], vec![0.0; d], true).unwrap();
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
            let w1 = t.leaf(&[d, 4 * d], weights[bi * 6 + 4].to_vec(), true).unwrap();
            let w2 = t.leaf(&[4 * d, d], weights[bi * 6 + 5].to_vec(), true).unwrap();
            let m = t.matmul(ln2, w1).unwrap();
            let m = t.gelu(m).unwrap();
            let m = t.matmul(m, w2).unwrap();
            h = t.add(h, m).unwrap();
        }
        let sq = t.mul(h, h).unwrap();
        let loss = t.mean_all(sq).unwrap();
        (t, loss)
    };

    let iters = 20;
    let mut r2 = RngStream::new(7);
    // forward
    let t0 = Instant::now();
    let mut sink = 0.0f32;
    for _ in 0..iters {
        let (t, loss) = build(&mut r2);
        sink += t.value(loss)[0];
    }
    let fwd = t0.elapsed() / iters;
    // forward + backward
    let t0 = Instant::now();
    for _ in 0..iters {
        let (t, loss) = build(&mut r2);
        let g = t.backward(loss).unwrap();
        sink += g.get(loss).unwrap()[0];
    }
    let tot = t0.elapsed() / iters;
    println!("per-sample fwd {fwd:?}, fwd+bwd {tot:?}, bwd {:?} (sink {sink})", tot - fwd);
}
