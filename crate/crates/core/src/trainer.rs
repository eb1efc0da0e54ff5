//! Stage 3: continual pre-training with masked updates.
//!
//! The static mask multiplies incoming gradients, moment updates and the
//! final applied delta (weight decay included), so frozen entries are
//! byte-identical forever and their Adam moments stay exactly zero. An
//! all-ones mask reproduces full fine-tuning bit-exactly. GMT instead
//! filters accumulated gradients dynamically each interval.

use crate::data::{BatchStream, Corpus};
use crate::error::{Error, Result};
use crate::eval;
use crate::masking::FreezeMask;
use crate::model::{GradientSet, ModelState, ParamKind};
use crate::tensor::{Element, Precision, Tensor};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fft,
    #[default]
    Ssu,
    Hft,
    Gmt,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Fft => "fft",
            Method::Ssu => "ssu",
            Method::Hft => "hft",
            Method::Gmt => "gmt",
        }
    }

    pub fn needs_mask(self) -> bool {
        matches!(self, Method::Ssu | Method::Hft)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimKind {
    #[default]
    AdamW,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub total_steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub optimizer: OptimKind,
    pub gmt_drop_ratio: f64,
    pub gmt_interval: usize,
    pub eval_interval: usize,
    pub eval_tokens: usize,
    /// Diagnostic mode: also pin embedding/head parameters (normally they
    /// are always trainable under every method).
    pub pin_embed_head: bool,
    /// Verify per step that frozen entries received a zero delta.
    pub debug_checks: bool,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Ssu,
            total_steps: 2000,
            batch: 16,
            seq_len: 64,
            peak_lr: 5e-4,
            warmup_fraction: 0.05,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_clip_norm: 1.0,
            seed: 0,
            optimizer: OptimKind::AdamW,
            gmt_drop_ratio: 0.5,
            gmt_interval: 4,
            eval_interval: 500,
            eval_tokens: 50_000,
            pin_embed_head: false,
            debug_checks: false,
            precision: Precision::Single,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            errs.push(format!(
                "training.warmup_fraction {} out of [0,1)",
                self.warmup_fraction
            ));
        }
        if self.peak_lr <= 0.0 {
            errs.push("training.peak_lr must be > 0".into());
        }
        if self.total_steps == 0 {
            errs.push("training.total_steps must be >= 1".into());
        }
        if self.batch == 0 || self.seq_len < 2 {
            errs.push("training.batch >= 1 and seq_len >= 2 required".into());
        }
        if !(0.0..1.0).contains(&self.gmt_drop_ratio) {
            errs.push(format!(
                "training.gmt_drop_ratio {} out of [0,1)",
                self.gmt_drop_ratio
            ));
        }
        if self.gmt_interval == 0 {
            errs.push("training.gmt_interval must be >= 1".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigViolations(errs))
        }
    }
}

/// First/second Adam moments per parameter; frozen positions stay exactly
/// zero for all time.
#[derive(Debug, Clone)]
pub struct OptimizerState<E> {
    pub m: Vec<Tensor<E>>,
    pub v: Vec<Tensor<E>>,
    pub step: u64,
}

impl<E: Element> OptimizerState<E> {
    pub fn new(model: &ModelState<E>) -> Self {
        let zeros: Vec<Tensor<E>> = model
            .registry
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.tensor.shape()))
            .collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Linear warmup from 0 to the peak, then cosine decay to 0 at total_steps.
pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    debug_assert!(step <= config.total_steps);
    let total = config.total_steps as f64;
    let warmup = (config.warmup_fraction * total).round();
    let s = step as f64;
    if warmup > 0.0 && s < warmup {
        return config.peak_lr * s / warmup;
    }
    let denom = (total - warmup).max(1.0);
    let progress = ((s - warmup) / denom).clamp(0.0, 1.0);
    config.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, Default)]
pub struct UpdateStats {
    pub params_touched: usize,
    pub frozen_entries: usize,
}

/// One optimizer step. Gradients are masked before clipping and moment
/// updates; the applied delta (weight decay included) is masked as well, so
/// a frozen entry's bytes and moments never change. A missing mask means
/// all-ones (full fine-tuning).
pub fn masked_update_step<E: Element>(
    model: &mut ModelState<E>,
    grads: &mut GradientSet<E>,
    mask: Option<&FreezeMask>,
    opt: &mut OptimizerState<E>,
    lr: f64,
    config: &TrainConfig,
) -> Result<UpdateStats> {
    let n_params = model.registry.len();
    debug_assert_eq!(grads.grads.len(), n_params);

    // mask incoming gradients (embedding/head stay unmasked)
    if let Some(mask) = mask {
        for i in 0..n_params {
            let entry = model.registry.entry(i);
            if let Some(m) = mask.get(&entry.name) {
                for (g, &b) in grads.grads[i].data_mut().iter_mut().zip(&m.data) {
                    if b == 0 {
                        *g = E::zero();
                    }
                }
            }
        }
    }

    // global norm over masked gradients, then clip
    let mut sq_sum = 0.0f64;
    for (i, g) in grads.grads.iter().enumerate() {
        let mut local = E::zero();
        for &v in g.data() {
            local += v * v;
        }
        let local = local.to_f64();
        if !local.is_finite() {
            return Err(Error::NonFinite {
                context: format!(
                    "gradient of {} at optimizer step {}",
                    model.registry.entry(i).name,
                    opt.step
                ),
            });
        }
        sq_sum += local;
    }
    let norm = sq_sum.sqrt();
    if config.grad_clip_norm > 0.0 && norm > config.grad_clip_norm {
        let scale = E::from_f64(config.grad_clip_norm / norm);
        for g in grads.grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }

    let t = opt.step + 1;
    let lr_e = E::from_f64(lr);
    let wd = E::from_f64(config.weight_decay);
    let b1 = E::from_f64(config.beta1);
    let b2 = E::from_f64(config.beta2);
    let one_m_b1 = E::from_f64(1.0 - config.beta1);
    let one_m_b2 = E::from_f64(1.0 - config.beta2);
    let bc1 = E::from_f64(1.0 / (1.0 - config.beta1.powi(t as i32)));
    let bc2 = E::from_f64(1.0 / (1.0 - config.beta2.powi(t as i32)));
    let eps = E::from_f64(config.epsilon);

    let mut stats = UpdateStats::default();
    for i in 0..n_params {
        let entry_name = model.registry.entry(i).name.clone();
        let kind = model.registry.entry(i).kind;
        let pinned =
            config.pin_embed_head && matches!(kind, ParamKind::Embedding | ParamKind::Head);
        let mask_data = mask.and_then(|m| m.get(&entry_name)).map(|m| m.data.as_slice());
        let g = &grads.grads[i];
        let theta = model.registry.tensor_mut(i);
        let m_t = &mut opt.m[i];
        let v_t = &mut opt.v[i];
        stats.params_touched += 1;
        if pinned {
            stats.frozen_entries += theta.numel();
            continue;
        }
        match config.optimizer {
            OptimKind::AdamW => {
                for (j, w) in theta.data_mut().iter_mut().enumerate() {
                    if let Some(md) = mask_data {
                        if md[j] == 0 {
                            stats.frozen_entries += 1;
                            continue;
                        }
                    }
                    let gv = g.data()[j];
                    let m = &mut m_t.data_mut()[j];
                    let v = &mut v_t.data_mut()[j];
                    *m = b1 * *m + one_m_b1 * gv;
                    *v = b2 * *v + one_m_b2 * gv * gv;
                    let mhat = *m * bc1;
                    let vhat = *v * bc2;
                    let delta = -(lr_e * (mhat / (vhat.sqrt() + eps) + wd * *w));
                    *w += delta;
                }
            }
            OptimKind::Sgd => {
                for (j, w) in theta.data_mut().iter_mut().enumerate() {
                    if let Some(md) = mask_data {
                        if md[j] == 0 {
                            stats.frozen_entries += 1;
                            continue;
                        }
                    }
                    let gv = g.data()[j];
                    *w += -(lr_e * (gv + wd * *w));
                }
            }
        }
    }
    opt.step = t;
    Ok(stats)
}

/// GMT gradient filter: per parameter tensor, zero the entries whose |g|
/// falls below the drop-ratio quantile; exactly numel - floor(ratio*numel)
/// entries stay nonzero, ties at the quantile broken by flat index (lower
/// index kept).
pub fn gmt_filter<E: Element>(grads: &mut GradientSet<E>, drop_ratio: f64) {
    if drop_ratio <= 0.0 {
        return;
    }
    for g in grads.grads.iter_mut() {
        let n = g.numel();
        let keep = n - (drop_ratio * n as f64).floor() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        let data = g.data_mut();
        order.sort_by(|&a, &b| {
            data[b]
                .abs()
                .partial_cmp(&data[a].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        for &idx in &order[keep..] {
            data[idx] = E::zero();
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunLogEntry {
    pub step: usize,
    pub loss: f64,
    pub src_ppl: f64,
    pub tgt_ppl: f64,
}

/// Per-eval-interval observations plus the final checkpoint name.
#[derive(Debug, Clone, Default)]
pub struct RunLog {
    pub entries: Vec<RunLogEntry>,
    pub final_checkpoint: Option<String>,
}

impl RunLog {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).map_err(|e| Error::Format(e.to_string()))?);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Run `total_steps` masked update steps over a shuffled stream of the
/// target corpus, evaluating source/target perplexity at a fixed cadence.
/// Deterministic for fixed seeds and worker count. On divergence the last
/// cadence checkpoint (if any) is reported alongside the error.
pub fn cpt_run<E: Element>(
    model: &mut ModelState<E>,
    target: &Corpus,
    source_eval: &Corpus,
    target_eval: &Corpus,
    mask: Option<&FreezeMask>,
    config: &TrainConfig,
    out_dir: Option<&Path>,
    checkpoint_name: &str,
) -> Result<RunLog> {
    config.validate()?;
    if config.method.needs_mask() && mask.is_none() {
        return Err(Error::InvalidConfig(format!(
            "method {} needs a freeze mask",
            config.method.name()
        )));
    }
    if matches!(config.method, Method::Fft | Method::Gmt) && mask.is_some() {
        return Err(Error::InvalidConfig(format!(
            "method {} does not take a mask",
            config.method.name()
        )));
    }

    let mut stream = BatchStream::new(target, config.batch, config.seq_len, config.seed)?;
    let mut opt = OptimizerState::new(model);
    let mut log = RunLog::default();
    let mut last_checkpoint: Option<PathBuf> = None;
    let snapshot_init: Option<Vec<Vec<u8>>> = if config.debug_checks {
        Some(
            model
                .registry
                .entries()
                .iter()
                .map(|e| e.tensor.to_le_bytes())
                .collect(),
        )
    } else {
        None
    };

    for step in 0..config.total_steps {
        let lr = lr_at(step, config);
        let diverged = |e: Error, step: usize, last: &Option<PathBuf>| match e {
            Error::NonFinite { .. } => Error::Diverged {
                step,
                last_checkpoint: last.as_ref().map(|p| p.display().to_string()),
            },
            other => other,
        };

        let (loss, mut grads) = if config.method == Method::Gmt {
            // accumulate over the interval, average, then drop small entries
            let mut acc: Option<GradientSet<E>> = None;
            let mut loss_sum = 0.0f64;
            for _ in 0..config.gmt_interval {
                let batch = stream.next_batch();
                let (l, g) = model
                    .loss_and_grads(&batch)
                    .map_err(|e| diverged(e, step, &last_checkpoint))?;
                loss_sum += l;
                acc = Some(match acc {
                    None => g,
                    Some(mut a) => {
                        for (at, gt) in a.grads.iter_mut().zip(&g.grads) {
                            for (av, &gv) in at.data_mut().iter_mut().zip(gt.data()) {
                                *av += gv;
                            }
                        }
                        a
                    }
                });
            }
            let mut grads = acc.expect("gmt_interval >= 1");
            let inv = E::from_f64(1.0 / config.gmt_interval as f64);
            for g in grads.grads.iter_mut() {
                for v in g.data_mut() {
                    *v *= inv;
                }
            }
            gmt_filter(&mut grads, config.gmt_drop_ratio);
            (loss_sum / config.gmt_interval as f64, grads)
        } else {
            let batch = stream.next_batch();
            model
                .loss_and_grads(&batch)
                .map_err(|e| diverged(e, step, &last_checkpoint))?
        };

        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                last_checkpoint: last_checkpoint.as_ref().map(|p| p.display().to_string()),
            });
        }

        masked_update_step(model, &mut grads, mask, &mut opt, lr, config)
            .map_err(|e| diverged(e, step, &last_checkpoint))?;

        if let (Some(init), Some(mask)) = (&snapshot_init, mask) {
            verify_frozen_bytes(model, mask, init)?;
        }

        let done = step + 1 == config.total_steps;
        if (step + 1) % config.eval_interval == 0 || done {
            let src_ppl = eval::perplexity(model, source_eval, config.seq_len, config.eval_tokens)?;
            let tgt_ppl = eval::perplexity(model, target_eval, config.seq_len, config.eval_tokens)?;
            log.entries.push(RunLogEntry {
                step: step + 1,
                loss,
                src_ppl,
                tgt_ppl,
            });
            if let Some(dir) = out_dir {
                let name = if done {
                    checkpoint_name.to_string()
                } else {
                    format!("{checkpoint_name}.last")
                };
                let path = dir.join(&name);
                model.save_checkpoint(&path)?;
                last_checkpoint = Some(path);
                if done {
                    log.final_checkpoint = Some(name);
                }
            }
        }
    }
    Ok(log)
}

/// Debug-mode assertion: every masked-out entry is byte-identical to the
/// pre-run snapshot.
fn verify_frozen_bytes<E: Element>(
    model: &ModelState<E>,
    mask: &FreezeMask,
    init: &[Vec<u8>],
) -> Result<()> {
    for (i, e) in model.registry.entries().iter().enumerate() {
        let Some(m) = mask.get(&e.name) else { continue };
        let now = e.tensor.to_le_bytes();
        let was = &init[i];
        for (j, &b) in m.data.iter().enumerate() {
            if b == 0 && now[j * E::BYTES..(j + 1) * E::BYTES] != was[j * E::BYTES..(j + 1) * E::BYTES]
            {
                return Err(Error::InvalidConfig(format!(
                    "frozen entry {} [{}] changed bytes",
                    e.name, j
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{default_lang_pair, sample_corpus, Language};
    use crate::importance::{score_model, ScoringMethod};
    use crate::masking::{build_freeze_mask, Granularity, MaskSpec};
    use crate::model::{init_model, ModelConfig, TokenBatch};

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            d_ff: 24,
            vocab_size: 32,
            max_seq_len: 16,
            precision: Precision::Double,
            init_seed: 5,
        }
    }

    fn train_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            total_steps: steps,
            batch: 2,
            seq_len: 8,
            peak_lr: 1e-3,
            eval_interval: steps,
            eval_tokens: 512,
            precision: Precision::Double,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_boundaries_and_closed_form() {
        let cfg = TrainConfig {
            total_steps: 1000,
            peak_lr: 5e-4,
            warmup_fraction: 0.05,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, &cfg), 0.0);
        let warmup_end = 50;
        assert!((lr_at(warmup_end, &cfg) - 5e-4).abs() < 1e-18);
        // mid-decay closed form
        let step = 500;
        let progress = (step as f64 - 50.0) / 950.0;
        let expect = 5e-4 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        assert!((lr_at(step, &cfg) - expect).abs() < 1e-18);
        assert_eq!(lr_at(1000, &cfg), 5e-4 * 0.5 * (1.0 + (std::f64::consts::PI).cos()));
        assert!(lr_at(1000, &cfg).abs() < 1e-18);
    }

    #[test]
    fn lr_schedule_continuous_single_peak() {
        let cfg = TrainConfig {
            total_steps: 400,
            peak_lr: 1e-3,
            warmup_fraction: 0.1,
            ..TrainConfig::default()
        };
        let values: Vec<f64> = (0..=400).map(|s| lr_at(s, &cfg)).collect();
        let peak = values.iter().cloned().fold(0.0, f64::max);
        assert!((peak - 1e-3).abs() < 1e-15);
        assert_eq!(values[400], values.iter().cloned().fold(f64::MAX, f64::min));
        // continuity: neighboring steps differ by less than peak/20
        for w in values.windows(2) {
            assert!((w[1] - w[0]).abs() < 1e-3 / 20.0);
        }
        // single peak: rises to max then falls
        let argmax = values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert!(values[..argmax].windows(2).all(|w| w[0] <= w[1]));
        assert!(values[argmax..].windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn sgd_hand_case() {
        // theta=1.0, g=0.5, lr=0.1 -> 0.95
        let mut m = init_model::<f64>(&small_cfg()).unwrap();
        let idx = m.registry.index_of("layers.0.attn.wq").unwrap();
        m.registry.tensor_mut(idx).data_mut()[0] = 1.0;
        let mut grads = GradientSet::zeros_like(&m.registry);
        grads.grads[idx].data_mut()[0] = 0.5;
        let mut opt = OptimizerState::new(&m);
        let cfg = TrainConfig {
            optimizer: OptimKind::Sgd,
            weight_decay: 0.0,
            grad_clip_norm: 0.0,
            precision: Precision::Double,
            ..TrainConfig::default()
        };
        masked_update_step(&mut m, &mut grads, None, &mut opt, 0.1, &cfg).unwrap();
        assert!((m.registry.entry(idx).tensor.data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_matches_independent_calculator() {
        let mut m = init_model::<f64>(&small_cfg()).unwrap();
        let idx = m.registry.index_of("layers.0.attn.wq").unwrap();
        let theta0 = m.registry.entry(idx).tensor.data()[0];
        let g = 0.25f64;
        let mut grads = GradientSet::zeros_like(&m.registry);
        grads.grads[idx].data_mut()[0] = g;
        let mut opt = OptimizerState::new(&m);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            grad_clip_norm: 0.0,
            precision: Precision::Double,
            ..TrainConfig::default()
        };
        let lr = 1e-3;
        masked_update_step(&mut m, &mut grads, None, &mut opt, lr, &cfg).unwrap();
        // independent single-step Adam: mhat=g, vhat=g^2, delta=-lr*g/(|g|+eps)
        let expect = theta0 - lr * g / (g.abs() + cfg.epsilon);
        let got = m.registry.entry(idx).tensor.data()[0];
        assert!((got - expect).abs() < 1e-15, "got {got}, expect {expect}");
        assert!((got - (theta0 - lr)).abs() < 1e-6); // delta ~ -lr for g > 0
    }

    #[test]
    fn frozen_entries_bytes_unchanged_and_moments_zero() {
        let m_cfg = small_cfg();
        let mut m = init_model::<f64>(&m_cfg).unwrap();
        let scores = score_model(&m, None, ScoringMethod::Magnitude).unwrap();
        let mask = build_freeze_mask(
            &scores,
            &MaskSpec {
                ratio: 0.5,
                granularity: Granularity::Column,
                method: "magnitude".into(),
            },
        )
        .unwrap();
        let before: Vec<Vec<u8>> = m
            .registry
            .entries()
            .iter()
            .map(|e| e.tensor.to_le_bytes())
            .collect();
        let mut opt = OptimizerState::new(&m);
        let cfg = TrainConfig {
            precision: Precision::Double,
            ..TrainConfig::default()
        };
        for step in 0..5 {
            let batch = TokenBatch::new(vec![1, 2, 3, 4, 5, 6, 7, 8], 1, 8).unwrap();
            let (_, mut grads) = m.loss_and_grads(&batch).unwrap();
            masked_update_step(&mut m, &mut grads, Some(&mask), &mut opt, 1e-3, &cfg).unwrap();
            let _ = step;
        }
        for (i, e) in m.registry.entries().iter().enumerate() {
            let Some(mk) = mask.get(&e.name) else { continue };
            let now = e.tensor.to_le_bytes();
            for (j, &b) in mk.data.iter().enumerate() {
                if b == 0 {
                    assert_eq!(now[j * 8..j * 8 + 8], before[i][j * 8..j * 8 + 8]);
                    assert_eq!(opt.m[i].data()[j], 0.0);
                    assert_eq!(opt.v[i].data()[j], 0.0);
                }
            }
        }
    }

    #[test]
    fn update_touches_every_registry_entry_once() {
        let mut m = init_model::<f64>(&small_cfg()).unwrap();
        let batch = TokenBatch::new(vec![1, 2, 3, 4, 5, 6, 7, 8], 1, 8).unwrap();
        let (_, mut grads) = m.loss_and_grads(&batch).unwrap();
        let mut opt = OptimizerState::new(&m);
        let cfg = TrainConfig {
            precision: Precision::Double,
            ..TrainConfig::default()
        };
        let n = m.registry.len();
        let stats = masked_update_step(&mut m, &mut grads, None, &mut opt, 1e-3, &cfg).unwrap();
        assert_eq!(stats.params_touched, n);
    }

    #[test]
    fn gmt_filter_examples() {
        let mut m = init_model::<f64>(&small_cfg()).unwrap();
        let idx = m.registry.index_of("layers.0.attn.wq").unwrap();

        // drop_ratio = 0 leaves gradients unchanged
        let mut grads = GradientSet::zeros_like(&m.registry);
        grads.grads[idx].data_mut()[..4].copy_from_slice(&[1.0, -2.0, 3.0, -4.0]);
        let before = grads.grads[idx].data().to_vec();
        gmt_filter(&mut grads, 0.0);
        assert_eq!(grads.grads[idx].data(), &before[..]);

        // hand case: g=[1,-2,3,-4], ratio 0.5 -> [0,0,3,-4]
        let mut gs = GradientSet {
            grads: vec![Tensor::<f64>::from_vec(&[4], vec![1.0, -2.0, 3.0, -4.0]).unwrap()],
        };
        gmt_filter(&mut gs, 0.5);
        assert_eq!(gs.grads[0].data(), &[0.0, 0.0, 3.0, -4.0]);
    }

    #[test]
    fn gmt_exact_keep_counts_with_ties() {
        for (n, ratio) in [(7usize, 0.5f64), (8, 0.25), (9, 0.875), (5, 0.2)] {
            let data: Vec<f64> = vec![1.0; n]; // all tied
            let mut gs = GradientSet {
                grads: vec![Tensor::<f64>::from_vec(&[n], data).unwrap()],
            };
            gmt_filter(&mut gs, ratio);
            let kept = gs.grads[0].data().iter().filter(|&&v| v != 0.0).count();
            let expect = n - (ratio * n as f64).floor() as usize;
            assert_eq!(kept, expect, "n={n} ratio={ratio}");
            // ties resolved by flat index: kept entries are the lowest indices
            for (i, &v) in gs.grads[0].data().iter().enumerate() {
                assert_eq!(v != 0.0, i < kept);
            }
        }
    }

    fn tiny_corpora() -> (Corpus, Corpus, Corpus) {
        let (src, tgt) = default_lang_pair(32, 4, 8, 3, 0.6, 2, 21, 22);
        let target = sample_corpus(&tgt, 4_000, 100, Language::Target).unwrap();
        let source_eval = sample_corpus(&src, 1_000, 101, Language::Source).unwrap();
        let target_eval = sample_corpus(&tgt, 1_000, 102, Language::Target).unwrap();
        (target, source_eval, target_eval)
    }

    #[test]
    fn nothing_trainable_keeps_model_byte_identical() {
        let m_cfg = small_cfg();
        let mut m = init_model::<f64>(&m_cfg).unwrap();
        let scores = score_model(&m, None, ScoringMethod::Magnitude).unwrap();
        let mask = build_freeze_mask(
            &scores,
            &MaskSpec {
                ratio: 1.0,
                granularity: Granularity::Column,
                method: "magnitude".into(),
            },
        )
        .unwrap();
        let before: Vec<Vec<u8>> = m
            .registry
            .entries()
            .iter()
            .map(|e| e.tensor.to_le_bytes())
            .collect();
        let (target, source_eval, target_eval) = tiny_corpora();
        let cfg = TrainConfig {
            pin_embed_head: true,
            ..train_cfg(20)
        };
        cpt_run(
            &mut m,
            &target,
            &source_eval,
            &target_eval,
            Some(&mask),
            &cfg,
            None,
            "x.ckpt",
        )
        .unwrap();
        for (i, e) in m.registry.entries().iter().enumerate() {
            assert_eq!(e.tensor.to_le_bytes(), before[i], "{} changed", e.name);
        }
    }

    #[test]
    fn fft_equals_all_ones_ssu_bit_exactly() {
        let m_cfg = small_cfg();
        let (target, source_eval, target_eval) = tiny_corpora();

        let mut fft_model = init_model::<f64>(&m_cfg).unwrap();
        let cfg_fft = TrainConfig {
            method: Method::Fft,
            ..train_cfg(30)
        };
        let log_fft = cpt_run(
            &mut fft_model,
            &target,
            &source_eval,
            &target_eval,
            None,
            &cfg_fft,
            None,
            "x.ckpt",
        )
        .unwrap();

        let mut ssu_model = init_model::<f64>(&m_cfg).unwrap();
        let scores = score_model(&ssu_model, None, ScoringMethod::Magnitude).unwrap();
        let all_ones = build_freeze_mask(
            &scores,
            &MaskSpec {
                ratio: 0.0,
                granularity: Granularity::Column,
                method: "magnitude".into(),
            },
        )
        .unwrap();
        let cfg_ssu = TrainConfig {
            method: Method::Ssu,
            ..train_cfg(30)
        };
        let log_ssu = cpt_run(
            &mut ssu_model,
            &target,
            &source_eval,
            &target_eval,
            Some(&all_ones),
            &cfg_ssu,
            None,
            "x.ckpt",
        )
        .unwrap();

        for (a, b) in fft_model
            .registry
            .entries()
            .iter()
            .zip(ssu_model.registry.entries())
        {
            assert_eq!(a.tensor.to_le_bytes(), b.tensor.to_le_bytes(), "{}", a.name);
        }
        assert_eq!(
            serde_json::to_string(&log_fft.entries).unwrap(),
            serde_json::to_string(&log_ssu.entries).unwrap()
        );
    }

    #[test]
    fn training_reduces_target_loss() {
        let m_cfg = small_cfg();
        let mut m = init_model::<f64>(&m_cfg).unwrap();
        let (target, source_eval, target_eval) = tiny_corpora();
        let initial_tgt = eval::perplexity(&m, &target_eval, 8, 512).unwrap();
        let cfg = TrainConfig {
            method: Method::Fft,
            ..train_cfg(150)
        };
        let log = cpt_run(
            &mut m,
            &target,
            &source_eval,
            &target_eval,
            None,
            &cfg,
            None,
            "x.ckpt",
        )
        .unwrap();
        let final_tgt = log.entries.last().unwrap().tgt_ppl;
        assert!(
            final_tgt < initial_tgt,
            "target ppl {initial_tgt} -> {final_tgt}"
        );
    }

    #[test]
    fn gmt_runs_and_consumes_interval_batches() {
        let m_cfg = small_cfg();
        let mut m = init_model::<f64>(&m_cfg).unwrap();
        let (target, source_eval, target_eval) = tiny_corpora();
        let cfg = TrainConfig {
            method: Method::Gmt,
            gmt_drop_ratio: 0.5,
            gmt_interval: 4,
            ..train_cfg(10)
        };
        let log = cpt_run(
            &mut m,
            &target,
            &source_eval,
            &target_eval,
            None,
            &cfg,
            None,
            "x.ckpt",
        )
        .unwrap();
        assert_eq!(log.entries.last().unwrap().step, 10);
    }

    #[test]
    fn divergence_aborts_with_error() {
        let m_cfg = small_cfg();
        let mut m = init_model::<f64>(&m_cfg).unwrap();
        // blow up a weight so the forward overflows
        let idx = m.registry.index_of("head").unwrap();
        for v in m.registry.tensor_mut(idx).data_mut() {
            *v = 1e308;
        }
        let (target, source_eval, target_eval) = tiny_corpora();
        let cfg = TrainConfig {
            method: Method::Fft,
            ..train_cfg(5)
        };
        let err = cpt_run(
            &mut m,
            &target,
            &source_eval,
            &target_eval,
            None,
            &cfg,
            None,
            "x.ckpt",
        )
        .unwrap_err();
        assert!(
            matches!(err, Error::Diverged { .. } | Error::NonFinite { .. }),
            "unexpected error {err:?}"
        );
    }

    #[test]
    fn method_mask_consistency() {
        let m_cfg = small_cfg();
        let mut m = init_model::<f64>(&m_cfg).unwrap();
        let (target, source_eval, target_eval) = tiny_corpora();
        let cfg = TrainConfig {
            method: Method::Ssu,
            ..train_cfg(5)
        };
        assert!(cpt_run(
            &mut m,
            &target,
            &source_eval,
            &target_eval,
            None,
            &cfg,
            None,
            "x.ckpt"
        )
        .is_err());
    }
}
