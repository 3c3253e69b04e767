use nexus_core::numerics::{RngStream, Tape};
use std::time::Instant;

fn randn(rng: &mut RngStream, n: usize) -> Vec<f32> {
    let mut v = vec![0.0; n];
    rng.fill_normal(&mut v);
    v
}

fn main() {
    let mut rng = RngStream::new(1);
    let iters = 200;

    // matmul through tape: (100,64) x (64,256)
    let a = randn(&mut rng, 100 * 64);
    let b = randn(&mut rng, 64 * 256);
    let t0 = Instant::now();
    let mut sink = 0.0;
    for _ in 0..iters {
        let mut t = Tape::new();
        let ar = t.leaf(&[100, 64], a.clone(), false).unwrap();
        let br = t.leaf(&[64, 256], b.clone(), true).unwrap();
        let o = t.matmul(ar, br).unwrap();
        sink += t.value(o)[0];
    }
    let per = t0.elapsed().as_secs_f64() / iters as f64;
    println!("tape matmul (100,64,256): {:.1} us -> {:.1} GFLOP/s", per * 1e6, 2.0 * (100*64*256) as f64 / per / 1e9);

    // raw kernel same shape
    let t0 = Instant::now();
    let mut out = vec![0.0f32; 100 * 256];
    for _ in 0..iters {
        out.fill(0.0);
        nexus_core::numerics::bench_matmul(&a, &b, &mut out, 100, 64, 256);
        sink += out[0];
    }
    let per = t0.elapsed().as_secs_f64() / iters as f64;
    println!("raw matmul  (100,64,256): {:.1} us -> {:.1} GFLOP/s", per * 1e6, 2.0 * (100*64*256) as f64 / per / 1e9);

    // attention op (100,64) 4 heads
    let q = randn(&mut rng, 100 * 64);
    let t0 = Instant::now();
    for _ in 0..iters {
        let mut t = Tape::new();
        let qr = t.leaf(&[100, 64], q.clone(), false).unwrap();
        let o = t.attention(qr, qr, qr, 4, true).unwrap();
        sink += t.value(o)[0];
    }
    println!("tape attention (100,64,h4): {:.1} us", t0.elapsed().as_secs_f64() / iters as f64 * 1e6);

    // gelu op on [100,256]
    let x = randn(&mut rng, 100 * 256);
    let t0 = Instant::now();
    for _ in 0..iters {
        let mut t = Tape::new();
        let xr = t.leaf(&[100, 256], x.clone(), false).unwrap();
        let o = t.gelu(xr).unwrap();
        sink += t.value(o)[0];
    }
    println!("tape gelu [100,256]: {:.1} us", t0.elapsed().as_secs_f64() / iters as f64 * 1e6);

    // layer_norm on [100,64]
    let t0 = Instant::now();
    for _ in 0..iters {
        let mut t = Tape::new();
        let xr = t.leaf(&[100, 64], q.clone(), false).unwrap();
        let g = t.leaf(&[1, 64], vec![1.0; 64], false).unwrap();
        let be = t.leaf(&[1, 64], vec![0.0; 64], false).unwrap();
        let o = t.layer_norm(xr, g, be, 1e-5).unwrap();
        sink += t.value(o)[0];
    }
    println!("tape layer_norm [100,64]: {:.1} us", t0.elapsed().as_secs_f64() / iters as f64 * 1e6);

    // leaf creation of 16K weights
    let w = randn(&mut rng, 64 * 256);
    let t0 = Instant::now();
    for _ in 0..(iters * 10) {
        let mut t = Tape::new();
        let r = t.leaf(&[64, 256], w.clone(), true).unwrap();
        sink += t.value(r)[0];
    }
    println!("leaf 16K floats: {:.1} us (sink {sink})", t0.elapsed().as_secs_f64() / (iters * 10) as f64 * 1e6);
}
