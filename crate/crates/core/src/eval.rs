//! Perplexity measurement, retention reporting and the freezing-ratio sweep.
//!
//! Source/target held-out perplexity stands in for the benchmark suite:
//! forgetting is the relative source-perplexity increase after adaptation,
//! acquisition the relative target-perplexity decrease.

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::importance::ImportanceScores;
use crate::masking::{build_freeze_mask, Granularity, MaskSpec};
use crate::model::{ModelState, TokenBatch};
use crate::tensor::Element;
use crate::trainer::{cpt_run, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// exp(mean next-token cross-entropy) over non-overlapping `seq_len`
/// windows, up to `max_tokens` tokens. Deterministic.
pub fn perplexity<E: Element>(
    model: &ModelState<E>,
    corpus: &Corpus,
    seq_len: usize,
    max_tokens: usize,
) -> Result<f64> {
    if seq_len < 2 {
        return Err(Error::InvalidConfig("perplexity needs seq_len >= 2".into()));
    }
    let usable = corpus.len().min(max_tokens);
    let n_windows = usable / seq_len;
    if n_windows == 0 {
        return Err(Error::CorpusTooSmall(format!(
            "corpus yields no {seq_len}-token window within max_tokens {max_tokens}"
        )));
    }
    // batch windows for throughput; every window weighs the same
    const ROWS: usize = 16;
    let mut loss_sum = 0.0f64;
    let mut rows_total = 0usize;
    let mut w = 0usize;
    while w < n_windows {
        let rows = ROWS.min(n_windows - w);
        let mut tokens = Vec::with_capacity(rows * seq_len);
        for r in 0..rows {
            let start = (w + r) * seq_len;
            tokens.extend_from_slice(&corpus.ids[start..start + seq_len]);
        }
        let batch = TokenBatch::new(tokens, rows, seq_len)?;
        let loss = model.loss(&batch)?;
        loss_sum += loss * rows as f64;
        rows_total += rows;
        w += rows;
    }
    Ok((loss_sum / rows_total as f64).exp())
}

/// Source/target perplexity before and after adaptation, with relative
/// changes (100 * (after - before) / before). Forgetting is the source
/// increase, acquisition the target decrease.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub source_ppl_before: f64,
    pub source_ppl_after: f64,
    pub source_rel_change_pct: f64,
    pub target_ppl_before: f64,
    pub target_ppl_after: f64,
    pub target_rel_change_pct: f64,
    pub forgetting_pct: f64,
    pub acquisition_pct: f64,
}

impl EvalReport {
    pub fn from_ppls(
        source_before: f64,
        source_after: f64,
        target_before: f64,
        target_after: f64,
    ) -> Self {
        let rel = |before: f64, after: f64| 100.0 * (after - before) / before;
        let source_rel = rel(source_before, source_after);
        let target_rel = rel(target_before, target_after);
        EvalReport {
            source_ppl_before: source_before,
            source_ppl_after: source_after,
            source_rel_change_pct: source_rel,
            target_ppl_before: target_before,
            target_ppl_after: target_after,
            target_rel_change_pct: target_rel,
            forgetting_pct: source_rel,
            acquisition_pct: -target_rel,
        }
    }
}

/// Compare an adapted model against its base on held-out source/target data.
pub fn retention_report<E: Element>(
    base: &ModelState<E>,
    adapted: &ModelState<E>,
    source_eval: &Corpus,
    target_eval: &Corpus,
    seq_len: usize,
    max_tokens: usize,
) -> Result<EvalReport> {
    if base.config != adapted.config {
        return Err(Error::InvalidConfig(
            "retention report needs base and adapted models with equal configs".into(),
        ));
    }
    let sb = perplexity(base, source_eval, seq_len, max_tokens)?;
    let sa = perplexity(adapted, source_eval, seq_len, max_tokens)?;
    let tb = perplexity(base, target_eval, seq_len, max_tokens)?;
    let ta = perplexity(adapted, target_eval, seq_len, max_tokens)?;
    Ok(EvalReport::from_ppls(sb, sa, tb, ta))
}

pub struct SweepCorpora<'a> {
    pub target_train: &'a Corpus,
    pub source_eval: &'a Corpus,
    pub target_eval: &'a Corpus,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: f64,
    #[serde(flatten)]
    pub report: EvalReport,
}

/// One masked CPT run per freezing ratio, identical seeds throughout.
pub fn ratio_sweep<E: Element>(
    base: &ModelState<E>,
    corpora: &SweepCorpora<'_>,
    scores: &ImportanceScores,
    ratios: &[f64],
    train_config: &TrainConfig,
    eval_seq_len: usize,
    eval_max_tokens: usize,
) -> Result<Vec<SweepRow>> {
    let source_before =
        perplexity(base, corpora.source_eval, eval_seq_len, eval_max_tokens)?;
    let target_before =
        perplexity(base, corpora.target_eval, eval_seq_len, eval_max_tokens)?;
    let mut rows = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let spec = MaskSpec {
            ratio,
            granularity: Granularity::Column,
            method: scores.method.tag().to_string(),
        };
        let mask = build_freeze_mask(scores, &spec)?;
        let mut model = base.clone();
        cpt_run(
            &mut model,
            corpora.target_train,
            corpora.source_eval,
            corpora.target_eval,
            Some(&mask),
            train_config,
            None,
            "sweep.ckpt",
        )?;
        let source_after =
            perplexity(&model, corpora.source_eval, eval_seq_len, eval_max_tokens)?;
        let target_after =
            perplexity(&model, corpora.target_eval, eval_seq_len, eval_max_tokens)?;
        rows.push(SweepRow {
            ratio,
            report: EvalReport::from_ppls(
                source_before,
                source_after,
                target_before,
                target_after,
            ),
        });
    }
    Ok(rows)
}

/// Plot-ready sweep outputs: a TSV summary and line-delimited JSON rows.
pub fn write_sweep_files(rows: &[SweepRow], dir: &Path) -> Result<()> {
    let mut tsv = String::from("ratio\tforgetting_pct\tacquisition_pct\tsrc_ppl_after\ttgt_ppl_after\n");
    let mut jsonl = String::new();
    for r in rows {
        tsv.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            r.ratio,
            r.report.forgetting_pct,
            r.report.acquisition_pct,
            r.report.source_ppl_after,
            r.report.target_ppl_after
        ));
        jsonl.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
        jsonl.push('\n');
    }
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("sweep.tsv"), tsv)?;
    std::fs::write(dir.join("sweep.jsonl"), jsonl)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{default_lang_pair, sample_corpus, Language};
    use crate::importance::{score_model, ScoringMethod};
    use crate::model::{init_model, ModelConfig};
    use crate::tensor::Precision;
    use crate::trainer::Method;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            d_ff: 24,
            vocab_size: 256,
            max_seq_len: 16,
            precision: Precision::Double,
            init_seed: 5,
        }
    }

    fn corpora() -> (Corpus, Corpus, Corpus) {
        let (src, tgt) = default_lang_pair(256, 16, 16, 6, 0.6, 4, 31, 32);
        (
            sample_corpus(&tgt, 4_000, 100, Language::Target).unwrap(),
            sample_corpus(&src, 2_000, 101, Language::Source).unwrap(),
            sample_corpus(&tgt, 2_000, 102, Language::Target).unwrap(),
        )
    }

    #[test]
    fn uniform_logit_head_gives_vocab_perplexity() {
        let mut m = init_model::<f64>(&small_cfg()).unwrap();
        let idx = m.registry.index_of("head").unwrap();
        for v in m.registry.tensor_mut(idx).data_mut() {
            *v = 0.0;
        }
        let (_, source_eval, _) = corpora();
        let ppl = perplexity(&m, &source_eval, 16, 2_000).unwrap();
        assert!((ppl - 256.0).abs() / 256.0 < 0.01, "ppl {ppl}");
    }

    #[test]
    fn repeated_token_after_fitting_approaches_one() {
        let m_cfg = ModelConfig {
            vocab_size: 32,
            ..small_cfg()
        };
        let mut m = init_model::<f64>(&m_cfg).unwrap();
        let corpus = Corpus {
            ids: vec![7u16; 2_000],
            vocab_size: 32,
            language: Language::Target,
            provenance: crate::data::Provenance::Synthetic,
            seed: 0,
        };
        let cfg = TrainConfig {
            method: Method::Fft,
            total_steps: 120,
            batch: 2,
            seq_len: 8,
            peak_lr: 5e-3,
            eval_interval: 120,
            eval_tokens: 256,
            precision: Precision::Double,
            ..TrainConfig::default()
        };
        cpt_run(&mut m, &corpus, &corpus, &corpus, None, &cfg, None, "x.ckpt").unwrap();
        let ppl = perplexity(&m, &corpus, 8, 512).unwrap();
        assert!(ppl < 1.1, "ppl {ppl}");
    }

    #[test]
    fn perplexity_matches_window_by_window_oracle() {
        let m = init_model::<f64>(&small_cfg()).unwrap();
        let (_, source_eval, _) = corpora();
        let seq = 16usize;
        let max_tokens = 800usize;
        let ppl = perplexity(&m, &source_eval, seq, max_tokens).unwrap();
        // oracle: one window at a time, mean of per-window losses
        let n_windows = max_tokens.min(source_eval.len()) / seq;
        let mut sum = 0.0;
        for w in 0..n_windows {
            let tokens = source_eval.ids[w * seq..(w + 1) * seq].to_vec();
            let batch = TokenBatch::new(tokens, 1, seq).unwrap();
            sum += m.loss(&batch).unwrap();
        }
        let expect = (sum / n_windows as f64).exp();
        assert!((ppl - expect).abs() < 1e-9, "{ppl} vs {expect}");
    }

    #[test]
    fn perplexity_deterministic() {
        let m = init_model::<f64>(&small_cfg()).unwrap();
        let (_, source_eval, _) = corpora();
        let a = perplexity(&m, &source_eval, 16, 1_000).unwrap();
        let b = perplexity(&m, &source_eval, 16, 1_000).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn retention_identity_and_arithmetic() {
        let m = init_model::<f64>(&small_cfg()).unwrap();
        let (_, source_eval, target_eval) = corpora();
        let r = retention_report(&m, &m, &source_eval, &target_eval, 16, 1_000).unwrap();
        assert_eq!(r.source_rel_change_pct, 0.0);
        assert_eq!(r.target_rel_change_pct, 0.0);
        assert_eq!(r.forgetting_pct, 0.0);

        // before=10, after=12 -> +20%
        let r = EvalReport::from_ppls(10.0, 12.0, 8.0, 6.0);
        assert!((r.source_rel_change_pct - 20.0).abs() < 1e-12);
        assert!((r.forgetting_pct - 20.0).abs() < 1e-12);
        assert!((r.target_rel_change_pct + 25.0).abs() < 1e-12);
        assert!((r.acquisition_pct - 25.0).abs() < 1e-12);
    }

    #[test]
    fn retention_config_mismatch_rejected() {
        let a = init_model::<f64>(&small_cfg()).unwrap();
        let b = init_model::<f64>(&ModelConfig {
            init_seed: 99,
            ..small_cfg()
        })
        .unwrap();
        let (_, source_eval, target_eval) = corpora();
        assert!(retention_report(&a, &b, &source_eval, &target_eval, 16, 500).is_err());
    }

    #[test]
    fn sweep_k0_bit_identical_to_fft() {
        let base = init_model::<f64>(&small_cfg()).unwrap();
        let (target, source_eval, target_eval) = corpora();
        let scores = score_model(&base, None, ScoringMethod::Magnitude).unwrap();
        let cfg = TrainConfig {
            method: Method::Ssu,
            total_steps: 25,
            batch: 2,
            seq_len: 8,
            peak_lr: 1e-3,
            eval_interval: 25,
            eval_tokens: 512,
            precision: Precision::Double,
            ..TrainConfig::default()
        };
        let rows = ratio_sweep(
            &base,
            &SweepCorpora {
                target_train: &target,
                source_eval: &source_eval,
                target_eval: &target_eval,
            },
            &scores,
            &[0.0],
            &cfg,
            8,
            512,
        )
        .unwrap();

        let mut fft = base.clone();
        let cfg_fft = TrainConfig {
            method: Method::Fft,
            ..cfg
        };
        cpt_run(
            &mut fft,
            &target,
            &source_eval,
            &target_eval,
            None,
            &cfg_fft,
            None,
            "x.ckpt",
        )
        .unwrap();
        let sa = perplexity(&fft, &source_eval, 8, 512).unwrap();
        let ta = perplexity(&fft, &target_eval, 8, 512).unwrap();
        assert_eq!(rows[0].report.source_ppl_after.to_bits(), sa.to_bits());
        assert_eq!(rows[0].report.target_ppl_after.to_bits(), ta.to_bits());
    }

    #[test]
    fn sweep_k1_with_pinned_embeddings_zero_forgetting() {
        let base = init_model::<f64>(&small_cfg()).unwrap();
        let (target, source_eval, target_eval) = corpora();
        let scores = score_model(&base, None, ScoringMethod::Magnitude).unwrap();
        let cfg = TrainConfig {
            method: Method::Ssu,
            total_steps: 10,
            batch: 2,
            seq_len: 8,
            peak_lr: 1e-3,
            eval_interval: 10,
            eval_tokens: 512,
            pin_embed_head: true,
            precision: Precision::Double,
            ..TrainConfig::default()
        };
        let rows = ratio_sweep(
            &base,
            &SweepCorpora {
                target_train: &target,
                source_eval: &source_eval,
                target_eval: &target_eval,
            },
            &scores,
            &[1.0],
            &cfg,
            8,
            512,
        )
        .unwrap();
        assert_eq!(rows[0].report.forgetting_pct, 0.0);
        assert_eq!(rows[0].report.acquisition_pct, 0.0);
    }

    #[test]
    fn sweep_files_written() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![SweepRow {
            ratio: 0.5,
            report: EvalReport::from_ppls(10.0, 11.0, 9.0, 5.0),
        }];
        write_sweep_files(&rows, dir.path()).unwrap();
        let tsv = std::fs::read_to_string(dir.path().join("sweep.tsv")).unwrap();
        assert!(tsv.starts_with("ratio\t"));
        assert!(tsv.lines().count() == 2);
        let jsonl = std::fs::read_to_string(dir.path().join("sweep.jsonl")).unwrap();
        let row: serde_json::Value = serde_json::from_str(jsonl.trim()).unwrap();
        assert_eq!(row["ratio"], 0.5);
    }
}
