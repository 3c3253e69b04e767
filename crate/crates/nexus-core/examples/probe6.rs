use nexus_core::numerics::{RngStream, Tape, TensorRef};
use std::collections::BTreeMap;
use std::time::{Duration, Instant};

fn randn(rng: &mut RngStream, n: usize) -> Vec<f32> {
    let mut v = vec![0.0; n];
    rng.fill_normal(&mut v);
    v
}

fn main() {
    let (n, d, blocks, heads) = (100usize, 64usize, 4usize, 4usize);
    let mut rng = RngStream::new(1);
    let weights: Vec<Vec<f32>> = (0..blocks * 6).map(|_| randn(&mut rng, d * d * 4)).collect();
    let mut buckets: BTreeMap<&'static str, Duration> = BTreeMap::new();
    let mut sink = 0.0f32;
    let iters = 30;
    let mut bwd_total = Duration::ZERO;
    for it in 0..iters {
        let mut t = Tape::new();
        let mut time = |name: &'static str, f: &mut dyn FnMut(&mut Tape) -> TensorRef, t: &mut Tape| -> TensorRef {
            let t0 = Instant::now();
            let r = f(t);
            if it > 0 { *buckets.entry(name).or_default() += t0.elapsed(); }
            r
        };
        let x = randn(&mut rng, n * d);
        let mut h = time("leaf", &mut |t| t.leaf(&[n, d], x.clone(), false).unwrap(), &mut t);
        let g = t.leaf(&[1, d], vec![1.0; d], true).unwrap();
        let b = t.leaf(&[1, d], vec![0.0; d], true).unwrap();
        for bi in 0..blocks {
            let ln = time("layer_norm", &mut |t| t.layer_norm(h, g, b, 1e-5).unwrap(), &mut t);
            let wq = time("leaf", &mut |t| t.leaf(&[d, d], weights[bi*6][..d*d].to_vec(), true).unwrap(), &mut t);
            let wk = time("leaf", &mut |t| t.leaf(&[d, d], weights[bi*6+1][..d*d].to_vec(), true).unwrap(), &mut t);
            let wv = time("leaf", &mut |t| t.leaf(&[d, d], weights[bi*6+2][..d*d].to_vec(), true).unwrap(), &mut t);
            let wo = time("leaf", &mut |t| t.leaf(&[d, d], weights[bi*6+3][..d*d].to_vec(), true).unwrap(), &mut t);
            let q = time("matmul_qkvo", &mut |t| t.matmul(ln, wq).unwrap(), &mut t);
            let k = time("matmul_qkvo", &mut |t| t.matmul(ln, wk).unwrap(), &mut t);
            let v = time("matmul_qkvo", &mut |t| t.matmul(ln, wv).unwrap(), &mut t);
            let a = time("attention", &mut |t| t.attention(q, k, v, heads, true).unwrap(), &mut t);
            let o = time("matmul_qkvo", &mut |t| t.matmul(a, wo).unwrap(), &mut t);
            h = time("add", &mut |t| t.add(h, o).unwrap(), &mut t);
            let ln2 = time("layer_norm", &mut |t| t.layer_norm(h, g, b, 1e-5).unwrap(), &mut t);
            let w1 = time("leaf", &mut |t| t.leaf(&[d, 4*d], weights[bi*6+4].to_vec(), true).unwrap(), &mut t);
            let w2 = time("leaf", &mut |t| t.leaf(&[4*d, d], weights[bi*6+5].to_vec(), true).unwrap(), &mut t);
            let m = time("matmul_mlp", &mut |t| t.matmul(ln2, w1).unwrap(), &mut t);
            let m = time("gelu", &mut |t| t.gelu(m).unwrap(), &mut t);
            let m = time("matmul_mlp", &mut |t| t.matmul(m, w2).unwrap(), &mut t);
            h = time("add", &mut |t| t.add(h, m).unwrap(), &mut t);
        }
        let sq = t.mul(h, h).unwrap();
        let loss = t.mean_all(sq).unwrap();
        let t0 = Instant::now();
        let gr = t.backward(loss).unwrap();
        if it > 0 { bwd_total += t0.elapsed(); }
        sink += gr.get(loss).unwrap()[0];
    }
    let mut fwd_total = Duration::ZERO;
    for (name, dur) in &buckets {
        println!("{name:>14}: {:>9.1} us", dur.as_secs_f64() * 1e6 / (iters - 1) as f64);
        fwd_total += *dur;
    }
    println!("    fwd total: {:>9.1} us", fwd_total.as_secs_f64() * 1e6 / (iters - 1) as f64);
    println!("     backward: {:>9.1} us (sink {sink})", bwd_total.as_secs_f64() * 1e6 / (iters - 1) as f64);
}
