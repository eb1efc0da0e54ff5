//! Stage 1: per-weight importance scores from source calibration data.
//!
//! Wanda: s_ij = |theta_ij| * ||X_j||_2, the weight magnitude times the
//! L2 norm of the accumulated input activations of column j. Magnitude and
//! random need no calibration; SparseGPT uses the mean squared input
//! activation E[x_j^2]; FIM uses the mean squared loss gradient.
//!
//! Embedding and head parameters are never scored. 1-D parameters have no
//! input-activation axis, so Wanda and SparseGPT fall back to magnitude for
//! them; FIM and random score them directly.

use crate::container::{self, CalibrationInfo, ContainerHeader, ManifestEntry};
use crate::data::CalibrationSet;
use crate::error::{Error, Result};
use crate::model::{ActivationStats, ModelState, ParamKind, TokenBatch};
use crate::tensor::{Element, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "variant")]
pub enum ScoringMethod {
    Wanda,
    Magnitude,
    Random { seed: u64 },
    SparseGpt,
    Fim,
}

impl ScoringMethod {
    pub fn tag(&self) -> &'static str {
        match self {
            ScoringMethod::Wanda => "wanda",
            ScoringMethod::Magnitude => "magnitude",
            ScoringMethod::Random { .. } => "random",
            ScoringMethod::SparseGpt => "sparsegpt",
            ScoringMethod::Fim => "fim",
        }
    }

    pub fn needs_calibration(&self) -> bool {
        matches!(
            self,
            ScoringMethod::Wanda | ScoringMethod::SparseGpt | ScoringMethod::Fim
        )
    }
}

/// Per-parameter score tensors (f64, shape-congruent with the parameter)
/// for every shielding-eligible parameter.
#[derive(Debug, Clone)]
pub struct ImportanceScores {
    pub method: ScoringMethod,
    pub entries: Vec<ScoreEntry>,
}

#[derive(Debug, Clone)]
pub struct ScoreEntry {
    pub name: String,
    pub kind: ParamKind,
    pub scores: Tensor<f64>,
}

impl ImportanceScores {
    pub fn get(&self, name: &str) -> Option<&ScoreEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Run forward with capture over every calibration window, accumulating
/// squared input activations over all tokens of all windows.
pub fn capture_activation_stats<E: Element>(
    model: &ModelState<E>,
    calib: &CalibrationSet,
) -> Result<ActivationStats> {
    if calib.windows.is_empty() {
        return Err(Error::InvalidConfig("empty calibration set".into()));
    }
    let mut stats = ActivationStats::new_for(model);
    for window in &calib.windows {
        model.forward(window, Some(&mut stats))?;
    }
    Ok(stats)
}

/// Wanda score for one matrix2d parameter: |theta| times the column-wise
/// activation norm, broadcast down the output axis.
pub fn score_wanda<E: Element>(
    name: &str,
    theta: &Tensor<E>,
    stats: &ActivationStats,
) -> Result<Tensor<f64>> {
    let norms = stats.l2_norm(name)?;
    if norms.len() != theta.cols() {
        return Err(Error::ShapeMismatch {
            op: "score_wanda",
            detail: format!("{name}: {} norms for {} columns", norms.len(), theta.cols()),
        });
    }
    let (rows, cols) = (theta.rows(), theta.cols());
    let mut out = Tensor::<f64>::zeros(&[rows, cols]);
    for i in 0..rows {
        let trow = theta.row(i);
        let orow = out.row_mut(i);
        for j in 0..cols {
            orow[j] = trow[j].to_f64().abs() * norms[j];
        }
    }
    Ok(out)
}

/// s_ij = |theta_ij| for any parameter shape.
pub fn score_magnitude<E: Element>(theta: &Tensor<E>) -> Tensor<f64> {
    Tensor::from_vec(
        theta.shape(),
        theta.data().iter().map(|v| v.to_f64().abs()).collect(),
    )
    .expect("same shape")
}

/// I.i.d. uniform scores; downstream top-k selection over them picks a
/// uniformly random subset. Deterministic per seed.
pub fn score_random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random::<f64>()).collect()).expect("same shape")
}

/// SparseGPT importance metric: s_ij = E[x_j^2], identical down each column.
pub fn score_sparsegpt<E: Element>(
    name: &str,
    theta: &Tensor<E>,
    stats: &ActivationStats,
) -> Result<Tensor<f64>> {
    let mean_sq = stats.mean_sq(name)?;
    if mean_sq.len() != theta.cols() {
        return Err(Error::ShapeMismatch {
            op: "score_sparsegpt",
            detail: format!(
                "{name}: {} stats for {} columns",
                mean_sq.len(),
                theta.cols()
            ),
        });
    }
    let (rows, cols) = (theta.rows(), theta.cols());
    let mut out = Tensor::<f64>::zeros(&[rows, cols]);
    for i in 0..rows {
        out.row_mut(i).copy_from_slice(&mean_sq);
    }
    Ok(out)
}

/// Diagonal Fisher information: the per-window loss gradient squared,
/// averaged over calibration windows. Covers every eligible parameter,
/// 1-D vectors included.
pub fn score_fim<E: Element>(
    model: &ModelState<E>,
    calib: &CalibrationSet,
) -> Result<ImportanceScores> {
    if calib.windows.is_empty() {
        return Err(Error::InvalidConfig("empty calibration set".into()));
    }
    let eligible: Vec<usize> = (0..model.registry.len())
        .filter(|&i| model.registry.entry(i).kind.eligible())
        .collect();
    let mut acc: Vec<Tensor<f64>> = eligible
        .iter()
        .map(|&i| Tensor::zeros(model.registry.entry(i).tensor.shape()))
        .collect();
    for window in &calib.windows {
        let batch = TokenBatch::new(window.clone(), 1, window.len())?;
        let (_, grads) = model.loss_and_grads(&batch)?;
        for (slot, &idx) in acc.iter_mut().zip(&eligible) {
            for (a, g) in slot.data_mut().iter_mut().zip(grads.grads[idx].data()) {
                let gv = g.to_f64();
                *a += gv * gv;
            }
        }
    }
    let inv = 1.0 / calib.windows.len() as f64;
    let entries = eligible
        .iter()
        .zip(acc)
        .map(|(&idx, mut scores)| {
            for v in scores.data_mut() {
                *v *= inv;
            }
            let e = model.registry.entry(idx);
            ScoreEntry {
                name: e.name.clone(),
                kind: e.kind,
                scores,
            }
        })
        .collect();
    Ok(ImportanceScores {
        method: ScoringMethod::Fim,
        entries,
    })
}

fn name_mix(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the method seed
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed
}

/// Score every eligible parameter of the model under one method.
pub fn score_model<E: Element>(
    model: &ModelState<E>,
    calib: Option<&CalibrationSet>,
    method: ScoringMethod,
) -> Result<ImportanceScores> {
    if let ScoringMethod::Fim = method {
        let calib = calib.ok_or_else(|| {
            Error::InvalidConfig("fim scoring needs a calibration set".into())
        })?;
        return score_fim(model, calib);
    }
    let stats = match method {
        ScoringMethod::Wanda | ScoringMethod::SparseGpt => {
            let calib = calib.ok_or_else(|| {
                Error::InvalidConfig(format!("{} scoring needs a calibration set", method.tag()))
            })?;
            Some(capture_activation_stats(model, calib)?)
        }
        _ => None,
    };
    let mut entries = Vec::new();
    for e in model.registry.entries() {
        if !e.kind.eligible() {
            continue;
        }
        let scores = match (&method, e.kind) {
            (ScoringMethod::Magnitude, _) => score_magnitude(&e.tensor),
            (ScoringMethod::Random { seed }, _) => {
                score_random(e.tensor.shape(), name_mix(*seed, &e.name))
            }
            (ScoringMethod::Wanda, ParamKind::Matrix2d) => {
                score_wanda(&e.name, &e.tensor, stats.as_ref().expect("stats"))?
            }
            (ScoringMethod::SparseGpt, ParamKind::Matrix2d) => {
                score_sparsegpt(&e.name, &e.tensor, stats.as_ref().expect("stats"))?
            }
            // no input-activation axis on 1-D parameters
            (ScoringMethod::Wanda, _) | (ScoringMethod::SparseGpt, _) => {
                score_magnitude(&e.tensor)
            }
            (ScoringMethod::Fim, _) => unreachable!("handled above"),
        };
        entries.push(ScoreEntry {
            name: e.name.clone(),
            kind: e.kind,
            scores,
        });
    }
    Ok(ImportanceScores { method, entries })
}

/// Score file: checkpoint container with kind "scores" and the method tag.
pub fn save_scores(
    scores: &ImportanceScores,
    config: &crate::model::ModelConfig,
    calib_info: Option<CalibrationInfo>,
    path: &Path,
) -> Result<()> {
    let mut manifest = Vec::new();
    let mut payload = Vec::new();
    for e in &scores.entries {
        let blob = e.scores.to_le_bytes();
        manifest.push(ManifestEntry {
            name: e.name.clone(),
            kind: e.kind.name().to_string(),
            shape: e.scores.shape().to_vec(),
            offset: payload.len() as u64,
            nbytes: blob.len() as u64,
            frozen: None,
        });
        payload.extend_from_slice(&blob);
    }
    let header = ContainerHeader {
        format_version: container::FORMAT_VERSION,
        kind: "scores".to_string(),
        dtype: "f64".to_string(),
        config: config.clone(),
        method: Some(scores.method.tag().to_string()),
        calibration: calib_info,
        mask_spec: None,
        manifest,
    };
    container::write_file(path, &header, &payload)
}

pub fn load_scores(path: &Path) -> Result<(ImportanceScores, ContainerHeader)> {
    let (header, payload) = container::read_file(path)?;
    if header.kind != "scores" {
        return Err(Error::Format(format!(
            "{}: expected scores, found {}",
            path.display(),
            header.kind
        )));
    }
    let method = match header.method.as_deref() {
        Some("wanda") => ScoringMethod::Wanda,
        Some("magnitude") => ScoringMethod::Magnitude,
        Some("random") => ScoringMethod::Random { seed: 0 },
        Some("sparsegpt") => ScoringMethod::SparseGpt,
        Some("fim") => ScoringMethod::Fim,
        other => {
            return Err(Error::Format(format!(
                "{}: unknown scoring method {other:?}",
                path.display()
            )))
        }
    };
    let mut entries = Vec::new();
    for e in &header.manifest {
        let bytes = container::entry_bytes(e, &payload);
        entries.push(ScoreEntry {
            name: e.name.clone(),
            kind: ParamKind::from_name(&e.kind)?,
            scores: Tensor::<f64>::from_le_bytes(&e.shape, bytes)?,
        });
    }
    Ok((
        ImportanceScores { method, entries },
        header,
    ))
}
