//! Stage 2: aggregate element scores and emit the static binary freeze mask.
//!
//! Column granularity sums scores over the output axis (S_j = sum_i s_ij)
//! and freezes the round(k * d_in) highest-scoring columns of each matrix;
//! 1-D parameters treat each element as its own column. Row and element
//! granularities exist for the structured-freezing comparison, and the HFT
//! baseline freezes whole matrices per layer at random.

use crate::container::{self, ContainerHeader, ManifestEntry, MaskSpecEcho};
use crate::error::{Error, Result};
use crate::importance::ImportanceScores;
use crate::model::{ParamKind, ParameterRegistry};
use crate::tensor::Element;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    Column,
    Row,
    Element,
}

impl Granularity {
    pub fn name(self) -> &'static str {
        match self {
            Granularity::Column => "column",
            Granularity::Row => "row",
            Granularity::Element => "element",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "column" => Ok(Granularity::Column),
            "row" => Ok(Granularity::Row),
            "element" => Ok(Granularity::Element),
            other => Err(Error::Format(format!("unknown granularity {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    /// Freezing ratio k in [0, 1].
    pub ratio: f64,
    pub granularity: Granularity,
    /// Scoring method tag (or "hft"), echoed into the mask file header.
    pub method: String,
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::InvalidConfig(format!(
                "masking ratio {} out of [0,1]",
                self.ratio
            )));
        }
        Ok(())
    }
}

/// Per-column aggregate scores S_j (matrix2d) or the element scores
/// themselves (vector1d, each element its own column).
#[derive(Debug, Clone)]
pub struct ColumnScores {
    pub entries: Vec<(String, Vec<f64>)>,
}

impl ColumnScores {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }
}

/// One binary mask, shape-congruent with its parameter; 0 = frozen,
/// 1 = trainable, one byte per element.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl Mask {
    fn ones(shape: &[usize]) -> Self {
        Mask {
            shape: shape.to_vec(),
            data: vec![1u8; shape.iter().product()],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn frozen_count(&self) -> usize {
        self.data.iter().filter(|&&b| b == 0).count()
    }
}

/// The static binary freeze mask over every eligible parameter.
#[derive(Debug, Clone)]
pub struct FreezeMask {
    pub spec: MaskSpec,
    pub entries: Vec<(String, Mask)>,
}

impl FreezeMask {
    pub fn get(&self, name: &str) -> Option<&Mask> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
    }
}

/// round(k * units) with exact .5 ties resolved downward.
pub fn frozen_units(ratio: f64, units: usize) -> usize {
    let x = ratio * units as f64;
    let f = x.floor();
    let c = if x - f == 0.5 { f } else { x.round() };
    (c as usize).min(units)
}

/// Column sums over the output axis for matrix2d scores; identity for 1-D.
pub fn aggregate_columns(scores: &ImportanceScores) -> ColumnScores {
    let entries = scores
        .entries
        .iter()
        .map(|e| {
            let agg = match e.kind {
                ParamKind::Matrix2d => {
                    let (rows, cols) = (e.scores.rows(), e.scores.cols());
                    let mut sums = vec![0.0f64; cols];
                    for i in 0..rows {
                        for (s, &v) in sums.iter_mut().zip(e.scores.row(i)) {
                            *s += v;
                        }
                    }
                    sums
                }
                _ => e.scores.data().to_vec(),
            };
            (e.name.clone(), agg)
        })
        .collect();
    ColumnScores { entries }
}

/// Indices of the top `count` values, ranking ties by lower index first.
fn top_indices(values: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(count);
    order
}

/// Column-granularity mask: per matrix, the round(k*d_in) highest-S columns
/// freeze to 0; 1-D parameters freeze their top elements.
pub fn build_mask(colscores: &ColumnScores, scores: &ImportanceScores, spec: &MaskSpec) -> Result<FreezeMask> {
    if spec.granularity != Granularity::Column {
        return Err(Error::InvalidConfig(
            "build_mask expects column granularity".into(),
        ));
    }
    spec.validate()?;
    let mut entries = Vec::new();
    for e in &scores.entries {
        let sums = colscores
            .get(&e.name)
            .ok_or_else(|| Error::MissingStats(format!("column scores for {}", e.name)))?;
        let mut mask = Mask::ones(e.scores.shape());
        match e.kind {
            ParamKind::Matrix2d => {
                let (rows, cols) = (e.scores.rows(), e.scores.cols());
                for j in top_indices(sums, frozen_units(spec.ratio, cols)) {
                    for i in 0..rows {
                        mask.data[i * cols + j] = 0;
                    }
                }
            }
            _ => {
                for j in top_indices(sums, frozen_units(spec.ratio, sums.len())) {
                    mask.data[j] = 0;
                }
            }
        }
        entries.push((e.name.clone(), mask));
    }
    Ok(FreezeMask {
        spec: spec.clone(),
        entries,
    })
}

/// Row-granularity mask: aggregate over the input axis (R_i = sum_j s_ij)
/// and freeze the top round(k*d_out) rows.
pub fn build_row_mask(scores: &ImportanceScores, spec: &MaskSpec) -> Result<FreezeMask> {
    if spec.granularity != Granularity::Row {
        return Err(Error::InvalidConfig(
            "build_row_mask expects row granularity".into(),
        ));
    }
    spec.validate()?;
    let mut entries = Vec::new();
    for e in &scores.entries {
        let mut mask = Mask::ones(e.scores.shape());
        match e.kind {
            ParamKind::Matrix2d => {
                let (rows, cols) = (e.scores.rows(), e.scores.cols());
                let row_sums: Vec<f64> = (0..rows).map(|i| e.scores.row(i).iter().sum()).collect();
                for i in top_indices(&row_sums, frozen_units(spec.ratio, rows)) {
                    for j in 0..cols {
                        mask.data[i * cols + j] = 0;
                    }
                }
            }
            _ => {
                let v = e.scores.data();
                for j in top_indices(v, frozen_units(spec.ratio, v.len())) {
                    mask.data[j] = 0;
                }
            }
        }
        entries.push((e.name.clone(), mask));
    }
    Ok(FreezeMask {
        spec: spec.clone(),
        entries,
    })
}

/// Element-granularity mask: freeze the top round(k*numel) scores of each
/// parameter, ties by flat index.
pub fn build_element_mask(scores: &ImportanceScores, spec: &MaskSpec) -> Result<FreezeMask> {
    if spec.granularity != Granularity::Element {
        return Err(Error::InvalidConfig(
            "build_element_mask expects element granularity".into(),
        ));
    }
    spec.validate()?;
    let mut entries = Vec::new();
    for e in &scores.entries {
        let mut mask = Mask::ones(e.scores.shape());
        let v = e.scores.data();
        for j in top_indices(v, frozen_units(spec.ratio, v.len())) {
            mask.data[j] = 0;
        }
        entries.push((e.name.clone(), mask));
    }
    Ok(FreezeMask {
        spec: spec.clone(),
        entries,
    })
}

/// Dispatch on the spec's granularity.
pub fn build_freeze_mask(scores: &ImportanceScores, spec: &MaskSpec) -> Result<FreezeMask> {
    match spec.granularity {
        Granularity::Column => build_mask(&aggregate_columns(scores), scores, spec),
        Granularity::Row => build_row_mask(scores, spec),
        Granularity::Element => build_element_mask(scores, spec),
    }
}

/// HFT baseline: whole-matrix freezing. A random half of the layers freeze
/// two of the four attention matrices and two of the three feed-forward
/// matrices; the other half freeze one matrix per group. Norm gains stay
/// trainable.
pub fn hft_mask<E: Element>(registry: &ParameterRegistry<E>, seed: u64) -> Result<FreezeMask> {
    let mut layers = Vec::new();
    for l in 0.. {
        if registry.index_of(&format!("layers.{l}.attn.wq")).is_none() {
            break;
        }
        layers.push(l);
    }
    if layers.is_empty() {
        return Err(Error::InvalidConfig(
            "registry lacks the layers.N.attn/ffn naming the HFT mask needs".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = layers.clone();
    order.shuffle(&mut rng);
    let heavy: std::collections::HashSet<usize> =
        order[..layers.len() / 2].iter().copied().collect();

    let mut frozen_names = Vec::new();
    for &l in &layers {
        let attn = ["wq", "wk", "wv", "wo"];
        let ffn = ["w_gate", "w_up", "w_down"];
        let (attn_n, ffn_n) = if heavy.contains(&l) { (2, 1) } else { (1, 2) };
        let mut attn_pick: Vec<&str> = attn.to_vec();
        attn_pick.shuffle(&mut rng);
        for m in &attn_pick[..attn_n] {
            frozen_names.push(format!("layers.{l}.attn.{m}"));
        }
        let mut ffn_pick: Vec<&str> = ffn.to_vec();
        ffn_pick.shuffle(&mut rng);
        for m in &ffn_pick[..ffn_n] {
            frozen_names.push(format!("layers.{l}.ffn.{m}"));
        }
    }

    let mut entries = Vec::new();
    for e in registry.entries() {
        if !e.kind.eligible() {
            continue;
        }
        let mut mask = Mask::ones(e.tensor.shape());
        if frozen_names.iter().any(|n| n == &e.name) {
            mask.data.fill(0);
        }
        entries.push((e.name.clone(), mask));
    }
    Ok(FreezeMask {
        spec: MaskSpec {
            ratio: 0.5,
            granularity: Granularity::Column,
            method: "hft".to_string(),
        },
        entries,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskStats {
    pub granularity: String,
    pub ratio: f64,
    pub method: String,
    pub per_parameter: Vec<ParamMaskStats>,
    pub total_frozen: u64,
    pub total_elements: u64,
    pub global_frozen_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamMaskStats {
    pub name: String,
    pub frozen: u64,
    pub elements: u64,
    pub frozen_fraction: f64,
}

pub fn mask_stats(mask: &FreezeMask) -> MaskStats {
    let per_parameter: Vec<ParamMaskStats> = mask
        .entries
        .iter()
        .map(|(name, m)| {
            let frozen = m.frozen_count() as u64;
            let elements = m.numel() as u64;
            ParamMaskStats {
                name: name.clone(),
                frozen,
                elements,
                frozen_fraction: frozen as f64 / elements as f64,
            }
        })
        .collect();
    let total_frozen: u64 = per_parameter.iter().map(|p| p.frozen).sum();
    let total_elements: u64 = per_parameter.iter().map(|p| p.elements).sum();
    MaskStats {
        granularity: mask.spec.granularity.name().to_string(),
        ratio: mask.spec.ratio,
        method: mask.spec.method.clone(),
        per_parameter,
        total_frozen,
        total_elements,
        global_frozen_fraction: total_frozen as f64 / total_elements.max(1) as f64,
    }
}

/// Mask file: checkpoint container with one-byte binary blobs, the spec
/// echoed in the header and frozen counts in the manifest.
pub fn save_mask(
    mask: &FreezeMask,
    config: &crate::model::ModelConfig,
    path: &Path,
) -> Result<()> {
    let mut manifest = Vec::new();
    let mut payload = Vec::new();
    for (name, m) in &mask.entries {
        manifest.push(ManifestEntry {
            name: name.clone(),
            kind: "mask".to_string(),
            shape: m.shape.clone(),
            offset: payload.len() as u64,
            nbytes: m.data.len() as u64,
            frozen: Some(m.frozen_count() as u64),
        });
        payload.extend_from_slice(&m.data);
    }
    let header = ContainerHeader {
        format_version: container::FORMAT_VERSION,
        kind: "mask".to_string(),
        dtype: "u8".to_string(),
        config: config.clone(),
        method: Some(mask.spec.method.clone()),
        calibration: None,
        mask_spec: Some(MaskSpecEcho {
            ratio: mask.spec.ratio,
            granularity: mask.spec.granularity.name().to_string(),
            method: mask.spec.method.clone(),
        }),
        manifest,
    };
    container::write_file(path, &header, &payload)
}

pub fn load_mask(path: &Path) -> Result<(FreezeMask, ContainerHeader)> {
    let (header, payload) = container::read_file(path)?;
    if header.kind != "mask" {
        return Err(Error::Format(format!(
            "{}: expected a mask, found {}",
            path.display(),
            header.kind
        )));
    }
    let echo = header
        .mask_spec
        .as_ref()
        .ok_or_else(|| Error::Format(format!("{}: missing mask spec", path.display())))?;
    let spec = MaskSpec {
        ratio: echo.ratio,
        granularity: Granularity::from_name(&echo.granularity)?,
        method: echo.method.clone(),
    };
    let mut entries = Vec::new();
    for e in &header.manifest {
        let bytes = container::entry_bytes(e, &payload).to_vec();
        if bytes.iter().any(|&b| b > 1) {
            return Err(Error::Format(format!(
                "{}: mask {} has non-binary bytes",
                path.display(),
                e.name
            )));
        }
        entries.push((
            e.name.clone(),
            Mask {
                shape: e.shape.clone(),
                data: bytes,
            },
        ));
    }
    Ok((FreezeMask { spec, entries }, header))
}
