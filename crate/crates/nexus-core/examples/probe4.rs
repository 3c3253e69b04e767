use nexus_core::numerics::RngStream;
use std::time::Instant;

fn main() {
    let mut rng = RngStream::new(1);
    let mut a = vec![0.0f32; 100 * 64];
    let mut b = vec![0.0f32; 64 * 256];
    rng.fill_normal(&mut a);
    rng.fill_normal(&mut b);
    let iters = 500;
    let flops = 2.0 * (100 * 64 * 256) as f64;

    // reused buffer
    let mut out = vec![0.0f32; 100 * 256];
    let t0 = Instant::now();
    let mut sink = 0.0;
    for _ in 0..iters {
        out.fill(0.0);
        nexus_core::numerics::bench_matmul(&a, &b, &mut out, 100, 64, 256);
        sink += out[0];
    }
    let per = t0.elapsed().as_secs_f64() / iters as f64;
    println!("reused:    {:.1} us -> {:.1} GFLOP/s", per * 1e6, flops / per / 1e9);

    // fresh allocation each call
    let t0 = Instant::now();
    for _ in 0..iters {
        let mut out2 = vec![0.0f32; 100 * 256];
        nexus_core::numerics::bench_matmul(&a, &b, &mut out2, 100, 64, 256);
        sink += out2[0];
        std::mem::forget(out2); // simulate tape retention
    }
    let per = t0.elapsed().as_secs_f64() / iters as f64;
    println!("fresh+keep: {:.1} us -> {:.1} GFLOP/s (sink {sink})", per * 1e6, flops / per / 1e9);
}
