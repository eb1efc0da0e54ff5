// Desk-scale experiment probe: does the bilingual setup show the expected
// forgetting/acquisition signals under FFT vs SSU at various ratios?
use cptlab::data::{default_lang_pair, sample_calibration, sample_corpus, Language};
use cptlab::eval::{perplexity, retention_report};
use cptlab::importance::{score_model, ScoringMethod};
use cptlab::masking::{build_freeze_mask, Granularity, MaskSpec};
use cptlab::model::{init_model, ModelConfig, ModelState};
use cptlab::tensor::Precision;
use cptlab::trainer::{cpt_run, Method, TrainConfig};
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let mcfg = ModelConfig {
        n_layers: 2, d_model: 64, n_heads: 4, d_ff: 128,
        vocab_size: 256, max_seq_len: 128,
        precision: Precision::Single, init_seed: 7,
    };
    let (src_spec, tgt_spec) = default_lang_pair(256, 16, 16, 6, 0.6, 4, 11, 12);
    let source = sample_corpus(&src_spec, 200_000, 11, Language::Source).unwrap();
    let target = sample_corpus(&tgt_spec, 200_000, 12, Language::Target).unwrap();
    let source_eval = sample_corpus(&src_spec, 100_000, 1011, Language::Source).unwrap();
    let target_eval = sample_corpus(&tgt_spec, 100_000, 1012, Language::Target).unwrap();

    // pretrain the base on source
    let mut base = init_model::<f32>(&mcfg).unwrap();
    let pre_cfg = TrainConfig {
        method: Method::Fft, total_steps: 2000, batch: 16, seq_len: 64,
        peak_lr: 5e-4, eval_interval: 1000, eval_tokens: 50_000,
        seed: 42, precision: Precision::Single, ..TrainConfig::default()
    };
    let log = cpt_run(&mut base, &source, &source_eval, &target_eval, None, &pre_cfg, None, "b").unwrap();
    for e in &log.entries {
        println!("pretrain step {}: loss {:.3} src_ppl {:.2} tgt_ppl {:.2}", e.step, e.loss, e.src_ppl, e.tgt_ppl);
    }
    println!("[{:.0}s] base ready", t0.elapsed().as_secs_f64());

    // scores on source calibration
    let calib = sample_calibration(&source, 64, 128, 500).unwrap();
    let wanda = score_model(&base, Some(&calib), ScoringMethod::Wanda).unwrap();

    let run = |base: &ModelState<f32>, method: Method, ratio: Option<f64>, seed: u64| {
        let mut model = base.clone();
        let cfg = TrainConfig {
            method, total_steps: 2000, batch: 16, seq_len: 64,
            peak_lr: 5e-4, eval_interval: 2000, eval_tokens: 50_000,
            seed, precision: Precision::Single, ..TrainConfig::default()
        };
        let mask = ratio.map(|r| build_freeze_mask(&wanda, &MaskSpec {
            ratio: r, granularity: Granularity::Column, method: "wanda".into(),
        }).unwrap());
        cpt_run(&mut model, &target, &source_eval, &target_eval, mask.as_ref(), &cfg, None, "x").unwrap();
        retention_report(base, &model, &source_eval, &target_eval, 64, 100_000).unwrap()
    };

    for seed in [0u64, 1, 2] {
        let fft = run(&base, Method::Fft, None, seed);
        let ssu = run(&base, Method::Ssu, Some(0.5), seed);
        println!(
            "seed {seed}: FFT forget {:+.2}% acq {:+.2}% | SSU-0.5 forget {:+.2}% acq {:+.2}% | acq ratio {:.3}",
            fft.forgetting_pct, fft.acquisition_pct, ssu.forgetting_pct, ssu.acquisition_pct,
            ssu.acquisition_pct / fft.acquisition_pct
        );
        let lo = run(&base, Method::Ssu, Some(0.125), seed);
        let hi = run(&base, Method::Ssu, Some(0.875), seed);
        println!(
            "seed {seed}: k=.125 forget {:+.2}% acq {:+.2}% | k=.875 forget {:+.2}% acq {:+.2}%",
            lo.forgetting_pct, lo.acquisition_pct, hi.forgetting_pct, hi.acquisition_pct
        );
        println!("[{:.0}s]", t0.elapsed().as_secs_f64());
    }
    let base_src = perplexity(&base, &source_eval, 64, 100_000).unwrap();
    let base_tgt = perplexity(&base, &target_eval, 64, 100_000).unwrap();
    println!("base src ppl {base_src:.2}, base tgt ppl {base_tgt:.2}; total {:.0}s", t0.elapsed().as_secs_f64());
}
