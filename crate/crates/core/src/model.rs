//! Tiny decoder-only transformer with a named parameter registry.
//!
//! Pre-norm blocks: rmsnorm -> multi-head causal attention -> rmsnorm ->
//! gated feed-forward, untied embedding and head, no linear biases. Linear
//! layers compute y = W x with W of shape [d_out, d_in]; column j of W is
//! the pathway of input feature j, and activation statistics are indexed by
//! that input axis.

use crate::container::{self, ContainerHeader, ManifestEntry};
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Element, Precision, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub precision: Precision,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            vocab_size: 256,
            max_seq_len: 128,
            precision: Precision::Single,
            init_seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v < 1 {
                errs.push(format!("model.{name} must be >= 1"));
            }
        }
        if self.vocab_size < 2 {
            errs.push("model.vocab_size must be >= 2".into());
        }
        if self.n_heads >= 1 && self.d_model % self.n_heads != 0 {
            errs.push(format!(
                "model.d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigViolations(errs))
        }
    }
}

/// Kind tag governing shielding eligibility: embedding and head parameters
/// are never scored or masked and stay fully trainable in every method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Embedding,
    Head,
    Matrix2d,
    Vector1d,
}

impl ParamKind {
    pub fn name(self) -> &'static str {
        match self {
            ParamKind::Embedding => "embedding",
            ParamKind::Head => "head",
            ParamKind::Matrix2d => "matrix2d",
            ParamKind::Vector1d => "vector1d",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "embedding" => Ok(ParamKind::Embedding),
            "head" => Ok(ParamKind::Head),
            "matrix2d" => Ok(ParamKind::Matrix2d),
            "vector1d" => Ok(ParamKind::Vector1d),
            other => Err(Error::Format(format!("unknown parameter kind {other}"))),
        }
    }

    /// Shielding candidates: matrix2d and vector1d parameters.
    pub fn eligible(self) -> bool {
        matches!(self, ParamKind::Matrix2d | ParamKind::Vector1d)
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry<E> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<E>,
}

/// Ordered, uniquely named model parameters.
#[derive(Debug, Clone)]
pub struct ParameterRegistry<E> {
    entries: Vec<ParamEntry<E>>,
    by_name: HashMap<String, usize>,
}

impl<E: Element> ParameterRegistry<E> {
    fn new() -> Self {
        ParameterRegistry {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    fn push(&mut self, name: &str, kind: ParamKind, tensor: Tensor<E>) -> usize {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let idx = self.entries.len();
        self.by_name.insert(name.to_string(), idx);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            kind,
            tensor,
        });
        idx
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<E>] {
        &self.entries
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<E>> {
        self.index_of(name).map(|i| &self.entries[i])
    }

    pub fn entry(&self, idx: usize) -> &ParamEntry<E> {
        &self.entries[idx]
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor<E> {
        &mut self.entries[idx].tensor
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }
}

/// Per-parameter gradients, aligned with registry order.
#[derive(Debug, Clone)]
pub struct GradientSet<E> {
    pub grads: Vec<Tensor<E>>,
}

impl<E: Element> GradientSet<E> {
    pub fn zeros_like(registry: &ParameterRegistry<E>) -> Self {
        GradientSet {
            grads: registry
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.tensor.shape()))
                .collect(),
        }
    }
}

/// Accumulated per-input-feature squared activations for matrix2d parameters.
///
/// `sq_sum[name][j]` is the sum over captured tokens of x_j^2 for the input
/// feature j of that linear layer; the activation L2-norm is its square root
/// and the mean squared activation is `sq_sum / token_count`. Sums are kept
/// in f64 regardless of the run precision.
#[derive(Debug, Clone, Default)]
pub struct ActivationStats {
    pub sq_sum: BTreeMap<String, Vec<f64>>,
    pub token_count: u64,
}

impl ActivationStats {
    pub fn new_for<E: Element>(model: &ModelState<E>) -> Self {
        let mut sq_sum = BTreeMap::new();
        for e in model.registry.entries() {
            if e.kind == ParamKind::Matrix2d {
                sq_sum.insert(e.name.clone(), vec![0.0f64; e.tensor.cols()]);
            }
        }
        ActivationStats {
            sq_sum,
            token_count: 0,
        }
    }

    /// sqrt(sum of squares) per input feature of one parameter.
    pub fn l2_norm(&self, name: &str) -> Result<Vec<f64>> {
        self.sq_sum
            .get(name)
            .map(|v| v.iter().map(|s| s.sqrt()).collect())
            .ok_or_else(|| Error::MissingStats(name.to_string()))
    }

    /// Mean squared activation per input feature.
    pub fn mean_sq(&self, name: &str) -> Result<Vec<f64>> {
        if self.token_count == 0 {
            return Err(Error::MissingStats(format!("{name} (no tokens captured)")));
        }
        let n = self.token_count as f64;
        self.sq_sum
            .get(name)
            .map(|v| v.iter().map(|s| s / n).collect())
            .ok_or_else(|| Error::MissingStats(name.to_string()))
    }

    fn accumulate<E: Element>(&mut self, name: &str, rows: &Tensor<E>) {
        let sums = self
            .sq_sum
            .get_mut(name)
            .unwrap_or_else(|| panic!("capture for unknown parameter {name}"));
        let n = rows.cols();
        debug_assert_eq!(sums.len(), n);
        for row in rows.data().chunks(n) {
            for (s, &x) in sums.iter_mut().zip(row) {
                let v = x.to_f64();
                *s += v * v;
            }
        }
    }
}

/// A [rows x cols] block of token ids.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub tokens: Vec<u16>,
    pub rows: usize,
    pub cols: usize,
}

impl TokenBatch {
    pub fn new(tokens: Vec<u16>, rows: usize, cols: usize) -> Result<Self> {
        if tokens.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "token_batch",
                detail: format!("{} tokens for {rows}x{cols}", tokens.len()),
            });
        }
        Ok(TokenBatch { tokens, rows, cols })
    }

    pub fn row(&self, b: usize) -> &[u16] {
        &self.tokens[b * self.cols..(b + 1) * self.cols]
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerIdx {
    attn_gain: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ffn_gain: usize,
    wg: usize,
    wu: usize,
    wd: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    tok: usize,
    pos: usize,
    final_gain: usize,
    head: usize,
    layers: Vec<LayerIdx>,
}

/// The model: config, registry and derived index layout.
#[derive(Debug, Clone)]
pub struct ModelState<E> {
    pub config: ModelConfig,
    pub registry: ParameterRegistry<E>,
    layout: Layout,
}

const RMS_EPS: f64 = 1e-6;

/// Deterministic initialization: scaled normal for matrices and embeddings,
/// ones for norm gains. Two calls with equal config give identical bytes.
pub fn init_model<E: Element>(config: &ModelConfig) -> Result<ModelState<E>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let (d, f, v, s) = (
        config.d_model,
        config.d_ff,
        config.vocab_size,
        config.max_seq_len,
    );
    let residual_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();

    let mut normal = |shape: &[usize], std: f64| -> Tensor<E> {
        let dist = Normal::new(0.0f64, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| E::from_f64(dist.sample(&mut rng)))
            .collect();
        Tensor::from_vec(shape, data).expect("shape/data agree")
    };

    let mut registry = ParameterRegistry::new();
    let tok = registry.push("embed.tok", ParamKind::Embedding, normal(&[v, d], 0.02));
    let pos = registry.push("embed.pos", ParamKind::Embedding, normal(&[s, d], 0.02));
    let proj_std = 1.0 / (d as f64).sqrt();
    let down_std = residual_scale / (f as f64).sqrt();
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let attn_gain = registry.push(
            &format!("layers.{l}.attn_norm.gain"),
            ParamKind::Vector1d,
            Tensor::filled(&[d], E::one()),
        );
        let wq = registry.push(
            &format!("layers.{l}.attn.wq"),
            ParamKind::Matrix2d,
            normal(&[d, d], proj_std),
        );
        let wk = registry.push(
            &format!("layers.{l}.attn.wk"),
            ParamKind::Matrix2d,
            normal(&[d, d], proj_std),
        );
        let wv = registry.push(
            &format!("layers.{l}.attn.wv"),
            ParamKind::Matrix2d,
            normal(&[d, d], proj_std),
        );
        let wo = registry.push(
            &format!("layers.{l}.attn.wo"),
            ParamKind::Matrix2d,
            normal(&[d, d], proj_std * residual_scale),
        );
        let ffn_gain = registry.push(
            &format!("layers.{l}.ffn_norm.gain"),
            ParamKind::Vector1d,
            Tensor::filled(&[d], E::one()),
        );
        let wg = registry.push(
            &format!("layers.{l}.ffn.w_gate"),
            ParamKind::Matrix2d,
            normal(&[f, d], proj_std),
        );
        let wu = registry.push(
            &format!("layers.{l}.ffn.w_up"),
            ParamKind::Matrix2d,
            normal(&[f, d], proj_std),
        );
        let wd = registry.push(
            &format!("layers.{l}.ffn.w_down"),
            ParamKind::Matrix2d,
            normal(&[d, f], down_std),
        );
        layers.push(LayerIdx {
            attn_gain,
            wq,
            wk,
            wv,
            wo,
            ffn_gain,
            wg,
            wu,
            wd,
        });
    }
    let final_gain = registry.push(
        "final_norm.gain",
        ParamKind::Vector1d,
        Tensor::filled(&[d], E::one()),
    );
    let head = registry.push("head", ParamKind::Head, normal(&[v, d], 0.02));

    Ok(ModelState {
        config: config.clone(),
        registry,
        layout: Layout {
            tok,
            pos,
            final_gain,
            head,
            layers,
        },
    })
}

struct LayerCache<E> {
    h_in: Tensor<E>,
    xn1: Tensor<E>,
    inv1: Vec<E>,
    q: Tensor<E>,
    k: Tensor<E>,
    v: Tensor<E>,
    probs: Vec<Tensor<E>>,
    att_in: Tensor<E>,
    h_mid: Tensor<E>,
    xn2: Tensor<E>,
    inv2: Vec<E>,
    gpre: Tensor<E>,
    up: Tensor<E>,
    hg: Tensor<E>,
}

struct ForwardCache<E> {
    layers: Vec<LayerCache<E>>,
    h_final: Tensor<E>,
    xnf: Tensor<E>,
    invf: Vec<E>,
}

fn sigmoid<E: Element>(z: E) -> E {
    E::one() / (E::one() + (-z).exp())
}

impl<E: Element> ModelState<E> {
    pub fn param_count(&self) -> usize {
        self.registry.param_count()
    }

    fn tensor(&self, idx: usize) -> &Tensor<E> {
        &self.registry.entry(idx).tensor
    }

    fn check_tokens(&self, tokens: &[u16]) -> Result<()> {
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id: t as usize,
                    vocab: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Forward pass over one token sequence; logits are [T x vocab_size].
    /// With `capture`, per-linear-layer input activations are accumulated.
    /// Capture is observation-only: logits are bit-identical either way.
    pub fn forward(
        &self,
        tokens: &[u16],
        mut capture: Option<&mut ActivationStats>,
    ) -> Result<Tensor<E>> {
        let batch = TokenBatch::new(tokens.to_vec(), 1, tokens.len())?;
        let (logits, _) = self.forward_batch(&batch, capture.as_deref_mut(), false)?;
        Ok(logits)
    }

    /// Batched forward over [rows x cols] input tokens (each row one
    /// sequence). Returns logits [rows*cols x vocab] and, when requested,
    /// the cache needed for the backward pass.
    fn forward_batch(
        &self,
        inputs: &TokenBatch,
        mut capture: Option<&mut ActivationStats>,
        want_cache: bool,
    ) -> Result<(Tensor<E>, Option<ForwardCache<E>>)> {
        let ti = inputs.cols;
        let b = inputs.rows;
        if ti == 0 || ti > self.config.max_seq_len {
            return Err(Error::InvalidConfig(format!(
                "sequence length {ti} not in [1, {}]",
                self.config.max_seq_len
            )));
        }
        self.check_tokens(&inputs.tokens)?;
        let n = b * ti;
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let scale = E::from_f64(1.0 / (dh as f64).sqrt());
        let eps = E::from_f64(RMS_EPS);

        // token + position embeddings
        let tok_emb = self.tensor(self.layout.tok);
        let pos_emb = self.tensor(self.layout.pos);
        let mut h = Tensor::<E>::zeros(&[n, d]);
        for r in 0..n {
            let tok = inputs.tokens[r] as usize;
            let p = r % ti;
            let out = h.row_mut(r);
            let te = tok_emb.row(tok);
            let pe = pos_emb.row(p);
            for j in 0..d {
                out[j] = te[j] + pe[j];
            }
        }

        let mut caches = Vec::new();
        for layer in &self.layout.layers {
            // attention sub-block
            let gain1 = self.tensor(layer.attn_gain);
            let mut xn1 = Tensor::<E>::zeros(&[n, d]);
            let mut inv1 = vec![E::zero(); n];
            for r in 0..n {
                inv1[r] = ops::rmsnorm_row(h.row(r), gain1.data(), eps, xn1.row_mut(r));
            }
            if let Some(stats) = capture.as_deref_mut() {
                stats.accumulate(&self.registry.entry(layer.wq).name, &xn1);
                stats.accumulate(&self.registry.entry(layer.wk).name, &xn1);
                stats.accumulate(&self.registry.entry(layer.wv).name, &xn1);
            }
            let q = ops::matmul_nt(&xn1, self.tensor(layer.wq))?;
            let k = ops::matmul_nt(&xn1, self.tensor(layer.wk))?;
            let v = ops::matmul_nt(&xn1, self.tensor(layer.wv))?;

            let mut att_in = Tensor::<E>::zeros(&[n, d]);
            let mut probs = Vec::with_capacity(b * heads);
            for bi in 0..b {
                for hi in 0..heads {
                    let qh = gather_head(&q, bi, hi, ti, dh);
                    let kh = gather_head(&k, bi, hi, ti, dh);
                    let vh = gather_head(&v, bi, hi, ti, dh);
                    let mut s = ops::matmul_nt(&qh, &kh)?;
                    for val in s.data_mut() {
                        *val *= scale;
                    }
                    causal_softmax(&mut s)?;
                    let oh = ops::matmul(&s, &vh)?;
                    scatter_head(&mut att_in, &oh, bi, hi, ti, dh);
                    if want_cache {
                        probs.push(s);
                    }
                }
            }
            if let Some(stats) = capture.as_deref_mut() {
                stats.accumulate(&self.registry.entry(layer.wo).name, &att_in);
            }
            let att = ops::matmul_nt(&att_in, self.tensor(layer.wo))?;
            let h_in = if want_cache { h.clone() } else { Tensor::zeros(&[0]) };
            for (hv, av) in h.data_mut().iter_mut().zip(att.data()) {
                *hv += *av;
            }
            let h_mid = if want_cache { h.clone() } else { Tensor::zeros(&[0]) };

            // feed-forward sub-block
            let gain2 = self.tensor(layer.ffn_gain);
            let mut xn2 = Tensor::<E>::zeros(&[n, d]);
            let mut inv2 = vec![E::zero(); n];
            for r in 0..n {
                inv2[r] = ops::rmsnorm_row(h.row(r), gain2.data(), eps, xn2.row_mut(r));
            }
            if let Some(stats) = capture.as_deref_mut() {
                stats.accumulate(&self.registry.entry(layer.wg).name, &xn2);
                stats.accumulate(&self.registry.entry(layer.wu).name, &xn2);
            }
            let gpre = ops::matmul_nt(&xn2, self.tensor(layer.wg))?;
            let up = ops::matmul_nt(&xn2, self.tensor(layer.wu))?;
            let mut hg = Tensor::<E>::zeros(gpre.shape());
            for ((o, &g), &u) in hg.data_mut().iter_mut().zip(gpre.data()).zip(up.data()) {
                *o = g * sigmoid(g) * u;
            }
            if let Some(stats) = capture.as_deref_mut() {
                stats.accumulate(&self.registry.entry(layer.wd).name, &hg);
            }
            let ffn = ops::matmul_nt(&hg, self.tensor(layer.wd))?;
            for (hv, fv) in h.data_mut().iter_mut().zip(ffn.data()) {
                *hv += *fv;
            }

            if want_cache {
                caches.push(LayerCache {
                    h_in,
                    xn1,
                    inv1,
                    q,
                    k,
                    v,
                    probs,
                    att_in,
                    h_mid,
                    xn2,
                    inv2,
                    gpre,
                    up,
                    hg,
                });
            }
        }

        // final norm + head
        let gain_f = self.tensor(self.layout.final_gain);
        let mut xnf = Tensor::<E>::zeros(&[n, d]);
        let mut invf = vec![E::zero(); n];
        for r in 0..n {
            invf[r] = ops::rmsnorm_row(h.row(r), gain_f.data(), eps, xnf.row_mut(r));
        }
        let logits = ops::matmul_nt(&xnf, self.tensor(self.layout.head))?;
        if let Some(stats) = capture {
            stats.token_count += n as u64;
        }
        let cache = if want_cache {
            Some(ForwardCache {
                layers: caches,
                h_final: h,
                xnf,
                invf,
            })
        } else {
            None
        };
        Ok((logits, cache))
    }

    /// Mean next-token cross-entropy of a batch, without gradients.
    pub fn loss(&self, batch: &TokenBatch) -> Result<f64> {
        if batch.cols < 2 {
            return Err(Error::InvalidConfig(
                "batch rows need at least 2 tokens for next-token loss".into(),
            ));
        }
        let ti = batch.cols - 1;
        let b = batch.rows;
        let mut inputs = Vec::with_capacity(b * ti);
        let mut targets = Vec::with_capacity(b * ti);
        for bi in 0..b {
            let row = batch.row(bi);
            inputs.extend_from_slice(&row[..ti]);
            targets.extend_from_slice(&row[1..]);
        }
        let input_batch = TokenBatch::new(inputs, b, ti)?;
        let (logits, _) = self.forward_batch(&input_batch, None, false)?;
        ops::cross_entropy_mean(&logits, &targets)
    }

    /// Mean next-token cross-entropy over a [B x T] batch, plus gradients
    /// shaped exactly like the registry. Inputs are positions 0..T-1 of each
    /// row; targets are positions 1..T.
    pub fn loss_and_grads(&self, batch: &TokenBatch) -> Result<(f64, GradientSet<E>)> {
        if batch.cols < 2 {
            return Err(Error::InvalidConfig(
                "batch rows need at least 2 tokens for next-token loss".into(),
            ));
        }
        let ti = batch.cols - 1;
        let b = batch.rows;
        let mut inputs = Vec::with_capacity(b * ti);
        let mut targets = Vec::with_capacity(b * ti);
        for bi in 0..b {
            let row = batch.row(bi);
            inputs.extend_from_slice(&row[..ti]);
            targets.extend_from_slice(&row[1..]);
        }
        let input_batch = TokenBatch::new(inputs, b, ti)?;
        let (logits, cache) = self.forward_batch(&input_batch, None, true)?;
        let cache = cache.expect("cache requested");
        let (loss, dlogits) = ops::cross_entropy_mean_with_grad(&logits, &targets, true)?;
        let dlogits = dlogits.expect("grad requested");
        let mut grads = GradientSet::zeros_like(&self.registry);
        self.backward(&input_batch, &cache, &dlogits, &mut grads)?;
        Ok((loss, grads))
    }

    fn backward(
        &self,
        inputs: &TokenBatch,
        cache: &ForwardCache<E>,
        dlogits: &Tensor<E>,
        grads: &mut GradientSet<E>,
    ) -> Result<()> {
        let ti = inputs.cols;
        let b = inputs.rows;
        let n = b * ti;
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let scale = E::from_f64(1.0 / (dh as f64).sqrt());

        // head and final norm
        grads.grads[self.layout.head] = ops::matmul_tn(dlogits, &cache.xnf)?;
        let dxnf = ops::matmul(dlogits, self.tensor(self.layout.head))?;
        let gain_f = self.tensor(self.layout.final_gain);
        let mut dh_stream = Tensor::<E>::zeros(&[n, d]);
        {
            let dgain = grads.grads[self.layout.final_gain].data_mut();
            for r in 0..n {
                let mut dx = vec![E::zero(); d];
                ops::rmsnorm_row_backward(
                    cache.h_final.row(r),
                    gain_f.data(),
                    cache.invf[r],
                    dxnf.row(r),
                    &mut dx,
                    dgain,
                );
                dh_stream.row_mut(r).copy_from_slice(&dx);
            }
        }

        for (layer, lc) in self.layout.layers.iter().zip(cache.layers.iter()).rev() {
            // feed-forward: h2 = h1 + Wd^T(hg); hg = silu(gpre) * up
            let dffn = &dh_stream; // gradient at ffn output
            grads.grads[layer.wd] = ops::matmul_tn(dffn, &lc.hg)?;
            let dhg = ops::matmul(dffn, self.tensor(layer.wd))?;
            let mut dgpre = Tensor::<E>::zeros(lc.gpre.shape());
            let mut dup = Tensor::<E>::zeros(lc.up.shape());
            for i in 0..dhg.numel() {
                let g = lc.gpre.data()[i];
                let u = lc.up.data()[i];
                let sg = sigmoid(g);
                let silu = g * sg;
                let dsilu = sg * (E::one() + g * (E::one() - sg));
                dgpre.data_mut()[i] = dhg.data()[i] * u * dsilu;
                dup.data_mut()[i] = dhg.data()[i] * silu;
            }
            grads.grads[layer.wg] = ops::matmul_tn(&dgpre, &lc.xn2)?;
            grads.grads[layer.wu] = ops::matmul_tn(&dup, &lc.xn2)?;
            let mut dxn2 = ops::matmul(&dgpre, self.tensor(layer.wg))?;
            let dxn2_u = ops::matmul(&dup, self.tensor(layer.wu))?;
            for (a, &bv) in dxn2.data_mut().iter_mut().zip(dxn2_u.data()) {
                *a += bv;
            }
            // through ffn rmsnorm; residual adds dh_stream unchanged
            let gain2 = self.tensor(layer.ffn_gain);
            let mut dh1 = dh_stream.clone();
            {
                let dgain = grads.grads[layer.ffn_gain].data_mut();
                let mut dx = vec![E::zero(); d];
                for r in 0..n {
                    ops::rmsnorm_row_backward(
                        lc.h_mid.row(r),
                        gain2.data(),
                        lc.inv2[r],
                        dxn2.row(r),
                        &mut dx,
                        dgain,
                    );
                    let out = dh1.row_mut(r);
                    for j in 0..d {
                        out[j] += dx[j];
                    }
                }
            }

            // attention: h1 = h0 + Wo^T(att_in)
            grads.grads[layer.wo] = ops::matmul_tn(&dh1, &lc.att_in)?;
            let datt_in = ops::matmul(&dh1, self.tensor(layer.wo))?;
            let mut dq = Tensor::<E>::zeros(&[n, d]);
            let mut dk = Tensor::<E>::zeros(&[n, d]);
            let mut dv = Tensor::<E>::zeros(&[n, d]);
            for bi in 0..b {
                for hi in 0..heads {
                    let p = &lc.probs[bi * heads + hi];
                    let doh = gather_head(&datt_in, bi, hi, ti, dh);
                    let vh = gather_head(&lc.v, bi, hi, ti, dh);
                    let qh = gather_head(&lc.q, bi, hi, ti, dh);
                    let kh = gather_head(&lc.k, bi, hi, ti, dh);
                    let dvh = ops::matmul_tn(p, &doh)?;
                    let dp = ops::matmul_nt(&doh, &vh)?;
                    let mut ds = ops::softmax_rows_backward(p, &dp);
                    for val in ds.data_mut() {
                        *val *= scale;
                    }
                    let dqh = ops::matmul(&ds, &kh)?;
                    let dkh = ops::matmul_tn(&ds, &qh)?;
                    scatter_head(&mut dq, &dqh, bi, hi, ti, dh);
                    scatter_head(&mut dk, &dkh, bi, hi, ti, dh);
                    scatter_head(&mut dv, &dvh, bi, hi, ti, dh);
                }
            }
            grads.grads[layer.wq] = ops::matmul_tn(&dq, &lc.xn1)?;
            grads.grads[layer.wk] = ops::matmul_tn(&dk, &lc.xn1)?;
            grads.grads[layer.wv] = ops::matmul_tn(&dv, &lc.xn1)?;
            let mut dxn1 = ops::matmul(&dq, self.tensor(layer.wq))?;
            let dxk = ops::matmul(&dk, self.tensor(layer.wk))?;
            let dxv = ops::matmul(&dv, self.tensor(layer.wv))?;
            for ((a, &kv), &vv) in dxn1.data_mut().iter_mut().zip(dxk.data()).zip(dxv.data()) {
                *a += kv + vv;
            }
            let gain1 = self.tensor(layer.attn_gain);
            let mut dh0 = dh1.clone();
            {
                let dgain = grads.grads[layer.attn_gain].data_mut();
                let mut dx = vec![E::zero(); d];
                for r in 0..n {
                    ops::rmsnorm_row_backward(
                        lc.h_in.row(r),
                        gain1.data(),
                        lc.inv1[r],
                        dxn1.row(r),
                        &mut dx,
                        dgain,
                    );
                    let out = dh0.row_mut(r);
                    for j in 0..d {
                        out[j] += dx[j];
                    }
                }
            }
            dh_stream = dh0;
        }

        // embeddings: scatter-add rows of the residual gradient
        for r in 0..n {
            let tok = inputs.tokens[r] as usize;
            let src = dh_stream.row(r);
            let dst = grads.grads[self.layout.tok].row_mut(tok);
            for j in 0..d {
                dst[j] += src[j];
            }
        }
        for r in 0..n {
            let p = r % ti;
            let src = dh_stream.row(r);
            let dst = grads.grads[self.layout.pos].row_mut(p);
            for j in 0..d {
                dst[j] += src[j];
            }
        }
        Ok(())
    }

    /// Write the checkpoint container: JSON header then raw LE parameter
    /// blobs in manifest order.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut manifest = Vec::with_capacity(self.registry.len());
        let mut payload = Vec::new();
        for e in self.registry.entries() {
            let blob = e.tensor.to_le_bytes();
            manifest.push(ManifestEntry {
                name: e.name.clone(),
                kind: e.kind.name().to_string(),
                shape: e.tensor.shape().to_vec(),
                offset: payload.len() as u64,
                nbytes: blob.len() as u64,
                frozen: None,
            });
            payload.extend_from_slice(&blob);
        }
        let header = ContainerHeader {
            format_version: container::FORMAT_VERSION,
            kind: "checkpoint".to_string(),
            dtype: E::PRECISION.dtype_name().to_string(),
            config: self.config.clone(),
            method: None,
            calibration: None,
            mask_spec: None,
            manifest,
        };
        container::write_file(path, &header, &payload)
    }

    pub fn load_checkpoint(path: &Path) -> Result<ModelState<E>> {
        let (header, payload) = container::read_file(path)?;
        if header.kind != "checkpoint" {
            return Err(Error::Format(format!(
                "{}: expected a checkpoint, found {}",
                path.display(),
                header.kind
            )));
        }
        if header.dtype != E::PRECISION.dtype_name() {
            return Err(Error::Format(format!(
                "{}: dtype {} does not match run precision {}",
                path.display(),
                header.dtype,
                E::PRECISION.dtype_name()
            )));
        }
        let mut model = init_model::<E>(&header.config)?;
        if header.manifest.len() != model.registry.len() {
            return Err(Error::Format(format!(
                "{}: manifest has {} entries, model has {}",
                path.display(),
                header.manifest.len(),
                model.registry.len()
            )));
        }
        for entry in &header.manifest {
            let idx = model.registry.index_of(&entry.name).ok_or_else(|| {
                Error::Format(format!("{}: unknown parameter {}", path.display(), entry.name))
            })?;
            let bytes = container::entry_bytes(entry, &payload);
            let tensor = Tensor::<E>::from_le_bytes(&entry.shape, bytes)?;
            if tensor.shape() != model.registry.entry(idx).tensor.shape() {
                return Err(Error::Format(format!(
                    "{}: shape mismatch for {}",
                    path.display(),
                    entry.name
                )));
            }
            *model.registry.tensor_mut(idx) = tensor;
        }
        Ok(model)
    }
}

fn gather_head<E: Element>(
    src: &Tensor<E>,
    b: usize,
    h: usize,
    ti: usize,
    dh: usize,
) -> Tensor<E> {
    let mut out = Tensor::zeros(&[ti, dh]);
    for t in 0..ti {
        let row = src.row(b * ti + t);
        out.row_mut(t).copy_from_slice(&row[h * dh..(h + 1) * dh]);
    }
    out
}

fn scatter_head<E: Element>(
    dst: &mut Tensor<E>,
    buf: &Tensor<E>,
    b: usize,
    h: usize,
    ti: usize,
    dh: usize,
) {
    for t in 0..ti {
        let dst_row = dst.row_mut(b * ti + t);
        dst_row[h * dh..(h + 1) * dh].copy_from_slice(buf.row(t));
    }
}

/// Softmax over the causal prefix of each score row; strictly-future entries
/// become exact zeros so position t only attends to positions <= t.
fn causal_softmax<E: Element>(scores: &mut Tensor<E>) -> Result<()> {
    let t_len = scores.rows();
    for i in 0..t_len {
        let row = scores.row_mut(i);
        ops::softmax_in_place(&mut row[..=i])?;
        for v in row[i + 1..].iter_mut() {
            *v = E::zero();
        }
    }
    Ok(())
}
