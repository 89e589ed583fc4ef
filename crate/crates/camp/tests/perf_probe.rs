use camp::tensor::matmul_raw;
use std::time::Instant;

#[test]
fn probe() {
    for (m, k, n) in [
        (53usize, 128usize, 128usize),
        (53, 128, 256),
        (53, 256, 128),
        (16, 128, 128),
        (128, 128, 53),
        (128, 53, 128),
    ] {
        let a = vec![0.5f32; m * k];
        let b = vec![0.25f32; k * n];
        let mut out = vec![0f32; m * n];
        let reps = 3000;
        let t0 = Instant::now();
        for _ in 0..reps {
            out.iter_mut().for_each(|v| *v = 0.0);
            matmul_raw(&a, &b, m, k, n, &mut out);
        }
        let dt = t0.elapsed().as_secs_f64();
        let gmacs = (m * k * n * reps) as f64 / dt / 1e9;
        println!("{m}x{k}x{n}: {gmacs:.2} GMAC/s");
        assert!(out[0] != 0.0);
    }

    let xs: Vec<f32> = (0..1_000_000).map(|i| (i as f32) * 1e-5 - 5.0).collect();
    let t0 = Instant::now();
    let s: f32 = xs.iter().map(|v| v.tanh()).sum();
    println!("tanh: {:.1} ns/elem (sum {s})", t0.elapsed().as_secs_f64() * 1e3);
    let t0 = Instant::now();
    let s: f32 = xs.iter().map(|v| v.exp()).sum();
    println!("exp: {:.1} ns/elem (sum {s})", t0.elapsed().as_secs_f64() * 1e3);
}
