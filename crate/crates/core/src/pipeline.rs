//! Stage orchestration shared by the CLI and the C API.
//!
//! Every stage is a pure function of (config file, out dir): artifacts are
//! reproducible byte-for-byte from the config and its seeds. Later stages
//! consume earlier stages' files and point at the missing stage on error.

use crate::config::RunConfigFile;
use crate::data::{
    gen_synthetic_bilingual, load_corpus, sample_calibration, sample_corpus, save_corpus,
    tv_distance, Corpus, Language,
};
use crate::error::{Error, Result};
use crate::eval::{ratio_sweep, retention_report, write_sweep_files, EvalReport, SweepCorpora};
use crate::importance::{load_scores, save_scores, score_model, ImportanceScores};
use crate::masking::{build_freeze_mask, hft_mask, load_mask, mask_stats, save_mask, MaskStats};
use crate::model::{init_model, ModelState};
use crate::tensor::{Element, Precision};
use crate::trainer::{cpt_run, Method};
use crate::container::CalibrationInfo;
use std::path::{Path, PathBuf};

pub const SOURCE_TRAIN: &str = "source_train.bin";
pub const SOURCE_EVAL: &str = "source_eval.bin";
pub const TARGET_TRAIN: &str = "target_train.bin";
pub const TARGET_EVAL: &str = "target_eval.bin";
pub const BASE_CKPT: &str = "base.ckpt";
pub const ADAPTED_CKPT: &str = "adapted.ckpt";
pub const SCORES_FILE: &str = "scores.bin";
pub const MASK_FILE: &str = "mask.bin";
pub const RUNLOG_FILE: &str = "runlog.jsonl";
pub const PRETRAIN_RUNLOG_FILE: &str = "runlog_pretrain.jsonl";
pub const REPORT_FILE: &str = "report.json";

const EVAL_SEED_SALT: u64 = 0xE7A1_5EED;

/// Overrides from command-line flags; `None` keeps the config value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub scoring_method: Option<String>,
    pub calib_samples: Option<usize>,
    pub mask_ratio: Option<f64>,
    pub granularity: Option<String>,
    pub train_method: Option<String>,
}

impl Overrides {
    /// Fold the overrides into a parsed config file.
    pub fn apply(&self, cfg: &mut RunConfigFile) -> Result<()> {
        if let Some(seed) = self.seed {
            cfg.training.seed = seed;
        }
        if let Some(m) = &self.scoring_method {
            cfg.scoring.method = m.clone();
        }
        if let Some(n) = self.calib_samples {
            cfg.scoring.calib_samples = n;
        }
        if let Some(r) = self.mask_ratio {
            cfg.masking.ratio = r;
        }
        if let Some(g) = &self.granularity {
            cfg.masking.granularity = crate::masking::Granularity::from_name(g)?;
        }
        if let Some(m) = &self.train_method {
            cfg.training.method = match m.as_str() {
                "fft" => Method::Fft,
                "ssu" => Method::Ssu,
                "hft" => Method::Hft,
                "gmt" => Method::Gmt,
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "train method {other} not one of fft|ssu|hft|gmt"
                    )))
                }
            };
        }
        Ok(())
    }
}

/// Load and validate the config, applying overrides. Error lists every
/// violation.
pub fn load_config(path: &Path, overrides: &Overrides) -> Result<RunConfigFile> {
    let mut cfg = RunConfigFile::load(path)?;
    overrides.apply(&mut cfg)?;
    let (errors, _) = cfg.validate();
    if !errors.is_empty() {
        return Err(Error::ConfigViolations(errors));
    }
    Ok(cfg)
}

fn require(path: PathBuf, what: &str, stage: &str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact {
            what: format!("{what} ({})", path.display()),
            stage: stage.to_string(),
        })
    }
}

pub struct Corpora {
    pub source_train: Corpus,
    pub source_eval: Corpus,
    pub target_train: Corpus,
    pub target_eval: Corpus,
}

pub fn load_corpora(out: &Path) -> Result<Corpora> {
    Ok(Corpora {
        source_train: load_corpus(&require(out.join(SOURCE_TRAIN), "source corpus", "gen-data")?)?,
        source_eval: load_corpus(&require(out.join(SOURCE_EVAL), "source eval corpus", "gen-data")?)?,
        target_train: load_corpus(&require(out.join(TARGET_TRAIN), "target corpus", "gen-data")?)?,
        target_eval: load_corpus(&require(out.join(TARGET_EVAL), "target eval corpus", "gen-data")?)?,
    })
}

/// gen-data: synthesize the bilingual corpora and their held-out splits.
pub fn gen_data(cfg: &RunConfigFile, out: &Path) -> Result<f64> {
    let (src_spec, tgt_spec) = cfg.lang_pair();
    let (source_train, target_train) =
        gen_synthetic_bilingual(&src_spec, &tgt_spec, cfg.data.train_tokens)?;
    let source_eval = sample_corpus(
        &src_spec,
        cfg.data.eval_tokens,
        src_spec.seed ^ EVAL_SEED_SALT,
        Language::Source,
    )?;
    let target_eval = sample_corpus(
        &tgt_spec,
        cfg.data.eval_tokens,
        tgt_spec.seed ^ EVAL_SEED_SALT,
        Language::Target,
    )?;
    std::fs::create_dir_all(out)?;
    save_corpus(&source_train, &out.join(SOURCE_TRAIN))?;
    save_corpus(&source_eval, &out.join(SOURCE_EVAL))?;
    save_corpus(&target_train, &out.join(TARGET_TRAIN))?;
    save_corpus(&target_eval, &out.join(TARGET_EVAL))?;
    Ok(tv_distance(&source_train.unigram(), &target_train.unigram()))
}

/// Materialize the base model: load base.ckpt if present, otherwise
/// pre-train a fresh init on the source corpus and save it. Deterministic
/// from (config, corpora), so any stage can rebuild the same base.
pub fn ensure_base<E: Element>(cfg: &RunConfigFile, out: &Path) -> Result<ModelState<E>> {
    let path = out.join(BASE_CKPT);
    if path.exists() {
        let model = ModelState::<E>::load_checkpoint(&path)?;
        if model.config != cfg.model_config() {
            return Err(Error::InvalidConfig(format!(
                "{} was built with a different model config; remove it or fix the config",
                path.display()
            )));
        }
        return Ok(model);
    }
    let corpora = load_corpora(out)?;
    let mut model = init_model::<E>(&cfg.model_config())?;
    let pre_cfg = cfg.pretrain_config();
    let log = cpt_run(
        &mut model,
        &corpora.source_train,
        &corpora.source_eval,
        &corpora.target_eval,
        None,
        &pre_cfg,
        Some(out),
        BASE_CKPT,
    )?;
    log.write_jsonl(&out.join(PRETRAIN_RUNLOG_FILE))?;
    Ok(model)
}

/// score: importance scores for the base model from source calibration data.
pub fn score_stage<E: Element>(cfg: &RunConfigFile, out: &Path) -> Result<()> {
    let model = ensure_base::<E>(cfg, out)?;
    let method = cfg.scoring_method()?;
    let calib = if method.needs_calibration() {
        let corpora = load_corpora(out)?;
        Some(sample_calibration(
            &corpora.source_train,
            cfg.scoring.calib_samples,
            cfg.scoring.calib_seq_len,
            cfg.scoring.calib_seed,
        )?)
    } else {
        None
    };
    let scores = score_model(&model, calib.as_ref(), method)?;
    save_scores(
        &scores,
        &model.config,
        Some(CalibrationInfo {
            samples: cfg.scoring.calib_samples,
            seq_len: cfg.scoring.calib_seq_len,
            seed: cfg.scoring.calib_seed,
        }),
        &out.join(SCORES_FILE),
    )?;
    Ok(())
}

/// mask: build the freeze mask from the score file (or the HFT mask).
pub fn mask_stage<E: Element>(cfg: &RunConfigFile, out: &Path) -> Result<MaskStats> {
    let mask = if cfg.training.method == Method::Hft {
        let model = ensure_base::<E>(cfg, out)?;
        hft_mask(&model.registry, cfg.masking.hft_seed)?
    } else {
        let path = require(out.join(SCORES_FILE), "score file", "score")?;
        let (scores, _) = load_scores(&path)?;
        let spec = crate::masking::MaskSpec {
            ratio: cfg.masking.ratio,
            granularity: cfg.masking.granularity,
            method: scores.method.tag().to_string(),
        };
        build_freeze_mask(&scores, &spec)?
    };
    save_mask(&mask, &cfg.model_config(), &out.join(MASK_FILE))?;
    Ok(mask_stats(&mask))
}

/// train: continual pre-training on the target corpus from the base model.
pub fn train_stage<E: Element>(cfg: &RunConfigFile, out: &Path) -> Result<()> {
    let mut model = ensure_base::<E>(cfg, out)?;
    let corpora = load_corpora(out)?;
    let train_cfg = cfg.train_config();
    let mask = if train_cfg.method.needs_mask() {
        let path = require(out.join(MASK_FILE), "freeze mask", "mask")?;
        Some(load_mask(&path)?.0)
    } else {
        None
    };
    let log = cpt_run(
        &mut model,
        &corpora.target_train,
        &corpora.source_eval,
        &corpora.target_eval,
        mask.as_ref(),
        &train_cfg,
        Some(out),
        ADAPTED_CKPT,
    )?;
    log.write_jsonl(&out.join(RUNLOG_FILE))?;
    Ok(())
}

/// eval: retention report of adapted vs base on the held-out corpora.
pub fn eval_stage<E: Element>(cfg: &RunConfigFile, out: &Path) -> Result<EvalReport> {
    let base = ensure_base::<E>(cfg, out)?;
    let adapted_path = require(out.join(ADAPTED_CKPT), "adapted checkpoint", "train")?;
    let adapted = ModelState::<E>::load_checkpoint(&adapted_path)?;
    let corpora = load_corpora(out)?;
    let report = retention_report(
        &base,
        &adapted,
        &corpora.source_eval,
        &corpora.target_eval,
        cfg.eval.seq_len,
        cfg.eval.max_tokens,
    )?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(out.join(REPORT_FILE), format!("{json}\n"))?;
    Ok(report)
}

/// sweep: one masked CPT run per freezing ratio with identical seeds.
pub fn sweep_stage<E: Element>(cfg: &RunConfigFile, out: &Path) -> Result<Vec<crate::eval::SweepRow>> {
    let base = ensure_base::<E>(cfg, out)?;
    let corpora = load_corpora(out)?;
    let scores = sweep_scores(cfg, out, &base, &corpora)?;
    let train_cfg = crate::trainer::TrainConfig {
        method: Method::Ssu,
        ..cfg.train_config()
    };
    let rows = ratio_sweep(
        &base,
        &SweepCorpora {
            target_train: &corpora.target_train,
            source_eval: &corpora.source_eval,
            target_eval: &corpora.target_eval,
        },
        &scores,
        &cfg.eval.ratios,
        &train_cfg,
        cfg.eval.seq_len,
        cfg.eval.max_tokens,
    )?;
    write_sweep_files(&rows, out)?;
    Ok(rows)
}

fn sweep_scores<E: Element>(
    cfg: &RunConfigFile,
    out: &Path,
    base: &ModelState<E>,
    corpora: &Corpora,
) -> Result<ImportanceScores> {
    // reuse the score stage's artifact when present, otherwise compute
    let path = out.join(SCORES_FILE);
    if path.exists() {
        return Ok(load_scores(&path)?.0);
    }
    let method = cfg.scoring_method()?;
    let calib = if method.needs_calibration() {
        Some(sample_calibration(
            &corpora.source_train,
            cfg.scoring.calib_samples,
            cfg.scoring.calib_seq_len,
            cfg.scoring.calib_seed,
        )?)
    } else {
        None
    };
    score_model(base, calib.as_ref(), method)
}

/// Precision-dispatched stage entry points used by the CLI and the C API.
pub fn run_score(cfg: &RunConfigFile, out: &Path) -> Result<()> {
    match cfg.model.precision {
        Precision::Single => score_stage::<f32>(cfg, out),
        Precision::Double => score_stage::<f64>(cfg, out),
    }
}

pub fn run_mask(cfg: &RunConfigFile, out: &Path) -> Result<MaskStats> {
    match cfg.model.precision {
        Precision::Single => mask_stage::<f32>(cfg, out),
        Precision::Double => mask_stage::<f64>(cfg, out),
    }
}

pub fn run_train(cfg: &RunConfigFile, out: &Path) -> Result<()> {
    match cfg.model.precision {
        Precision::Single => train_stage::<f32>(cfg, out),
        Precision::Double => train_stage::<f64>(cfg, out),
    }
}

pub fn run_eval(cfg: &RunConfigFile, out: &Path) -> Result<EvalReport> {
    match cfg.model.precision {
        Precision::Single => eval_stage::<f32>(cfg, out),
        Precision::Double => eval_stage::<f64>(cfg, out),
    }
}

pub fn run_sweep(cfg: &RunConfigFile, out: &Path) -> Result<Vec<crate::eval::SweepRow>> {
    match cfg.model.precision {
        Precision::Single => sweep_stage::<f32>(cfg, out),
        Precision::Double => sweep_stage::<f64>(cfg, out),
    }
}
