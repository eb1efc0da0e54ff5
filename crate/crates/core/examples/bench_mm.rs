use cptlab::ops::{matmul, matmul_nt, matmul_tn};
use cptlab::tensor::Tensor;
use std::time::Instant;

fn bench(name: &str, f: &mut dyn FnMut(), flops: f64) {
    for _ in 0..3 { f(); }
    let n = 50;
    let s = Instant::now();
    for _ in 0..n { f(); }
    let el = s.elapsed().as_secs_f64() / n as f64;
    println!("{name}: {:.3} ms, {:.1} GFLOP/s", el * 1e3, flops / el / 1e9);
}

fn main() {
    let x = Tensor::<f32>::from_vec(&[1008, 64], (0..1008*64).map(|i| (i as f32).sin()).collect()).unwrap();
    let w = Tensor::<f32>::from_vec(&[256, 64], (0..256*64).map(|i| (i as f32).cos()).collect()).unwrap();
    let wt = {
        let mut t = Tensor::<f32>::zeros(&[64, 256]);
        for i in 0..256 { for j in 0..64 { t.data_mut()[j*256+i] = w.at(i, j); } }
        t
    };
    let flops = 2.0 * 1008.0 * 64.0 * 256.0;
    bench("nt  [1008x64]x[256x64]T", &mut || { let _ = matmul_nt(&x, &w).unwrap(); }, flops);
    bench("ikj [1008x64]x[64x256] ", &mut || { let _ = matmul(&x, &wt).unwrap(); }, flops);
    let dy = Tensor::<f32>::from_vec(&[1008, 256], (0..1008*256).map(|i| (i as f32).sin()).collect()).unwrap();
    bench("tn  [1008x256]Tx[1008x64]", &mut || { let _ = matmul_tn(&dy, &x).unwrap(); }, flops);
    // small attention shapes
    let q = Tensor::<f32>::from_vec(&[63, 16], (0..1008).map(|i| (i as f32).sin()).collect()).unwrap();
    let s63 = Tensor::<f32>::from_vec(&[63, 63], (0..3969).map(|i| (i as f32).sin()).collect()).unwrap();
    bench("nt  [63x16]x[63x16]T  ", &mut || { let _ = matmul_nt(&q, &q).unwrap(); }, 2.0*63.0*63.0*16.0);
    bench("ikj [63x63]x[63x16]   ", &mut || { let _ = matmul(&s63, &q).unwrap(); }, 2.0*63.0*63.0*16.0);
}
