use cptlab::model::{init_model, ModelConfig, TokenBatch};
use cptlab::tensor::Precision;
use std::time::Instant;

fn main() {
    let cfg = ModelConfig {
        n_layers: 2, d_model: 64, n_heads: 4, d_ff: 128,
        vocab_size: 256, max_seq_len: 128,
        precision: Precision::Single, init_seed: 7,
    };
    let m = init_model::<f32>(&cfg).unwrap();
    println!("params: {}", m.param_count());
    let b = 16usize; let t = 64usize;
    let tokens: Vec<u16> = (0..b*t).map(|i| ((i * 2654435761usize) % 256) as u16).collect();
    let batch = TokenBatch::new(tokens, b, t).unwrap();
    // warmup
    for _ in 0..3 { let _ = m.loss_and_grads(&batch).unwrap(); }
    let n = 20;
    let start = Instant::now();
    for _ in 0..n { let _ = m.loss_and_grads(&batch).unwrap(); }
    let el = start.elapsed();
    let per = el.as_secs_f64() / n as f64;
    println!("loss_and_grads: {:.1} ms/step -> 2000 steps = {:.1} s", per*1e3, per*2000.0);
    // forward only (eval path)
    let row: Vec<u16> = (0..64).map(|i| (i % 256) as u16).collect();
    let start = Instant::now();
    let evals = 200;
    for _ in 0..evals { let _ = m.forward(&row, None).unwrap(); }
    let fel = start.elapsed().as_secs_f64() / evals as f64;
    println!("forward 64 tokens: {:.3} ms -> 100k tokens eval = {:.1} s", fel*1e3, fel*100_000.0/64.0);
}
