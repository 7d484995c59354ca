//! A small Llama-shaped decoder: pre-norm RMSNorm blocks with multi-head
//! rotary attention and a SiLU-gated feed-forward, no biases, untied output
//! head.
//!
//! [`Model::forward_step`] encodes a batch of new tokens against the global
//! cache. Each new token attends to whatever the mask grants it, so the same
//! function serves prefill, header encoding and interleaved decode steps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ChoreoError, Result};
use crate::kv_cache::{GlobalKvCache, KvEntry};
use crate::masking::{build_sparse_mask, VisibilitySpec};
use crate::tensor::{axpy, dot, rms_norm, silu, softmax_in_place, Matrix, RotationTable, Scalar};
use crate::tokenizer::{TokenId, RESERVED_VOCAB};
use crate::MessageId;

fn default_eps() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub context_window: usize,
    pub rope_base: f64,
    pub seed: u64,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            head_dim: 16,
            ffn_dim: 256,
            vocab_size: 512,
            context_window: 2048,
            rope_base: 10000.0,
            seed: 0,
            norm_eps: default_eps(),
        }
    }
}

impl ModelConfig {
    /// Two layers, two heads, model width 8. Used for golden checksums and
    /// fast unit tests.
    pub fn tiny() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            head_dim: 4,
            ffn_dim: 16,
            vocab_size: 260,
            context_window: 256,
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_window(mut self, window: usize) -> Self {
        self.context_window = window;
        self
    }

    pub fn model_dim(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ChoreoError::InvalidConfig(msg));
        if self.n_layers == 0 || self.n_heads == 0 || self.ffn_dim == 0 {
            return bad("layers, heads and ffn_dim must be positive".into());
        }
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return bad(format!("head_dim must be even, got {}", self.head_dim));
        }
        if self.vocab_size < RESERVED_VOCAB {
            return bad(format!(
                "vocab_size {} smaller than the {} reserved ids",
                self.vocab_size, RESERVED_VOCAB
            ));
        }
        if self.context_window == 0 {
            return bad("context_window must be at least 1".into());
        }
        if self.rope_base.is_nan() || self.rope_base <= 1.0 {
            return bad(format!("rope_base must exceed 1, got {}", self.rope_base));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub attn_norm: Vec<T>,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub ffn_norm: Vec<T>,
    pub w_gate: Matrix<T>,
    pub w_up: Matrix<T>,
    pub w_down: Matrix<T>,
}

/// All projection matrices are stored `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet<T> {
    pub config: ModelConfig,
    pub embedding: Matrix<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: Vec<T>,
    pub lm_head: Matrix<T>,
}

/// Description of one named tensor in canonical order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

impl<T: Scalar> WeightSet<T> {
    /// Named tensors in canonical (file and checksum) order.
    pub fn tensors(&self) -> Vec<(TensorInfo, &[T])> {
        fn mat<T: Scalar>(name: String, m: &Matrix<T>) -> (TensorInfo, &[T]) {
            let shape = vec![m.rows(), m.cols()];
            (TensorInfo { name, shape }, m.data())
        }
        fn vec1<T>(name: String, v: &[T]) -> (TensorInfo, &[T]) {
            let shape = vec![v.len()];
            (TensorInfo { name, shape }, v)
        }
        let mut out = vec![mat("embedding".into(), &self.embedding)];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push(vec1(format!("layers.{l}.attn_norm"), &layer.attn_norm));
            out.push(mat(format!("layers.{l}.wq"), &layer.wq));
            out.push(mat(format!("layers.{l}.wk"), &layer.wk));
            out.push(mat(format!("layers.{l}.wv"), &layer.wv));
            out.push(mat(format!("layers.{l}.wo"), &layer.wo));
            out.push(vec1(format!("layers.{l}.ffn_norm"), &layer.ffn_norm));
            out.push(mat(format!("layers.{l}.w_gate"), &layer.w_gate));
            out.push(mat(format!("layers.{l}.w_up"), &layer.w_up));
            out.push(mat(format!("layers.{l}.w_down"), &layer.w_down));
        }
        out.push(vec1("final_norm".into(), &self.final_norm));
        out.push(mat("lm_head".into(), &self.lm_head));
        out
    }

    /// Canonical tensor manifest for a config, without allocating weights.
    pub fn manifest(config: &ModelConfig) -> Vec<TensorInfo> {
        let d = config.model_dim();
        let f = config.ffn_dim;
        let mut out = vec![TensorInfo {
            name: "embedding".into(),
            shape: vec![config.vocab_size, d],
        }];
        for l in 0..config.n_layers {
            let t = |n: &str, shape: Vec<usize>| TensorInfo {
                name: format!("layers.{l}.{n}"),
                shape,
            };
            out.push(t("attn_norm", vec![d]));
            for n in ["wq", "wk", "wv", "wo"] {
                out.push(t(n, vec![d, d]));
            }
            out.push(t("ffn_norm", vec![d]));
            out.push(t("w_gate", vec![f, d]));
            out.push(t("w_up", vec![f, d]));
            out.push(t("w_down", vec![d, f]));
        }
        out.push(TensorInfo {
            name: "final_norm".into(),
            shape: vec![d],
        });
        out.push(TensorInfo {
            name: "lm_head".into(),
            shape: vec![config.vocab_size, d],
        });
        out
    }

    /// Inverse of [`Self::tensors`]: consume flat buffers in canonical order.
    pub fn from_flat(config: ModelConfig, mut flats: Vec<Vec<T>>) -> Result<Self> {
        config.validate()?;
        let manifest = Self::manifest(&config);
        if flats.len() != manifest.len() {
            return Err(ChoreoError::WeightFormat(format!(
                "expected {} tensors, got {}",
                manifest.len(),
                flats.len()
            )));
        }
        for (info, flat) in manifest.iter().zip(&flats) {
            let n: usize = info.shape.iter().product();
            if flat.len() != n {
                return Err(ChoreoError::WeightFormat(format!(
                    "tensor {} has {} values, expected {}",
                    info.name,
                    flat.len(),
                    n
                )));
            }
        }
        flats.reverse();
        let mut next = || flats.pop().unwrap();
        let d = config.model_dim();
        let f = config.ffn_dim;
        let v = config.vocab_size;
        let embedding = Matrix::from_vec(v, d, next())?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                attn_norm: next(),
                wq: Matrix::from_vec(d, d, next())?,
                wk: Matrix::from_vec(d, d, next())?,
                wv: Matrix::from_vec(d, d, next())?,
                wo: Matrix::from_vec(d, d, next())?,
                ffn_norm: next(),
                w_gate: Matrix::from_vec(f, d, next())?,
                w_up: Matrix::from_vec(f, d, next())?,
                w_down: Matrix::from_vec(d, f, next())?,
            });
        }
        let final_norm = next();
        let lm_head = Matrix::from_vec(v, d, next())?;
        Ok(Self {
            config,
            embedding,
            layers,
            final_norm,
            lm_head,
        })
    }

    pub fn cast<U: Scalar>(&self) -> WeightSet<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::from_f64(x.as_f64())).collect();
        WeightSet {
            config: self.config.clone(),
            embedding: self.embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_norm: conv(&l.attn_norm),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    ffn_norm: conv(&l.ffn_norm),
                    w_gate: l.w_gate.cast(),
                    w_up: l.w_up.cast(),
                    w_down: l.w_down.cast(),
                })
                .collect(),
            final_norm: conv(&self.final_norm),
            lm_head: self.lm_head.cast(),
        }
    }

    /// SHA-256 over every value as little-endian `f32`, in canonical order.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (_, data) in self.tensors() {
            for x in data {
                hasher.update((x.as_f64() as f32).to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Seeded scaled-uniform initialization.
///
/// Every value is drawn as an `f32` from ChaCha8 seeded with `config.seed`:
/// projections use `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the embedding
/// `U(-1, 1)`, norm gains are 1. Draw order follows the canonical manifest.
/// Values are exactly representable in `f32`, so saving and reloading
/// weights is lossless at either width.
pub fn init_weights<T: Scalar>(config: &ModelConfig) -> Result<WeightSet<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let flats = WeightSet::<T>::manifest(config)
        .iter()
        .map(|info| {
            let n: usize = info.shape.iter().product();
            if info.shape.len() == 1 {
                return vec![T::one(); n];
            }
            let bound = if info.name == "embedding" {
                1.0f32
            } else {
                1.0 / (info.shape[1] as f32).sqrt()
            };
            (0..n)
                .map(|_| {
                    let u: f32 = rng.random();
                    T::from_f32((2.0 * u - 1.0) * bound)
                })
                .collect()
        })
        .collect();
    WeightSet::from_flat(config.clone(), flats)
}

/// One token to encode in a forward step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NewToken {
    pub token: TokenId,
    pub message: MessageId,
    pub position: usize,
    pub want_logits: bool,
}

/// What the new tokens may attend to: the cache plus per-message parent sets.
#[derive(Debug, Clone, Copy)]
pub struct CacheView<'a, T> {
    pub cache: &'a GlobalKvCache<T>,
    pub specs: &'a [VisibilitySpec],
}

#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    pub logits: Vec<Option<Vec<T>>>,
    /// Ready to append; keys are rotated to each token's position.
    pub entries: Vec<KvEntry<T>>,
    /// Number of keys each token attended to (same at every layer).
    pub context_lens: Vec<usize>,
}

/// Weights plus the rotation table sized to the context window.
#[derive(Debug, Clone)]
pub struct Model<T> {
    weights: WeightSet<T>,
    rope: RotationTable<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(weights: WeightSet<T>) -> Result<Self> {
        weights.config.validate()?;
        let c = &weights.config;
        let rope = RotationTable::new(c.head_dim, c.context_window, c.rope_base)?;
        Ok(Self { weights, rope })
    }

    pub fn from_config(config: &ModelConfig) -> Result<Self> {
        Self::new(init_weights(config)?)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.weights.config
    }

    pub fn weights(&self) -> &WeightSet<T> {
        &self.weights
    }

    pub fn rope(&self) -> &RotationTable<T> {
        &self.rope
    }

    pub fn new_cache(&self, capacity: usize) -> GlobalKvCache<T> {
        let c = self.config();
        GlobalKvCache::new(c.n_layers, c.n_heads, c.head_dim, c.context_window, capacity)
    }

    pub fn forward_step(&self, view: CacheView<'_, T>, batch: &[NewToken]) -> Result<StepOutput<T>> {
        let cfg = self.config();
        let w = &self.weights;
        let d_model = cfg.model_dim();
        let hd = cfg.head_dim;
        let n_layers = cfg.n_layers;
        for t in batch {
            if t.position >= cfg.context_window {
                return Err(ChoreoError::PositionOutOfWindow {
                    position: t.position,
                    window: cfg.context_window,
                });
            }
            if t.token as usize >= cfg.vocab_size {
                return Err(ChoreoError::InvalidConfig(format!(
                    "token id {} outside vocabulary of {}",
                    t.token, cfg.vocab_size
                )));
            }
        }
        let messages: Vec<MessageId> = batch.iter().map(|t| t.message).collect();
        let mask = build_sparse_mask(view.cache, &messages, view.specs)?;
        let cache = view.cache;
        let cache_len = cache.token_count();
        let eps = T::from_f64(cfg.norm_eps);
        let scale = T::one() / T::from_f64(hd as f64).sqrt();

        let mut hidden: Vec<Vec<T>> = batch
            .iter()
            .map(|t| w.embedding.row(t.token as usize).to_vec())
            .collect();
        let mut keys: Vec<Vec<T>> = vec![Vec::with_capacity(n_layers * d_model); batch.len()];
        let mut values: Vec<Vec<T>> = vec![Vec::with_capacity(n_layers * d_model); batch.len()];
        let cols: Vec<Vec<usize>> = (0..batch.len()).map(|r| mask.row_cols(r).collect()).collect();
        let mut scores: Vec<T> = Vec::new();

        for (l, layer) in w.layers.iter().enumerate() {
            let mut queries = Vec::with_capacity(batch.len());
            for (b, t) in batch.iter().enumerate() {
                let x = rms_norm(&hidden[b], &layer.attn_norm, eps);
                let mut q = layer.wq.matvec(&x);
                let mut k = layer.wk.matvec(&x);
                let v = layer.wv.matvec(&x);
                for (qh, kh) in q.chunks_exact_mut(hd).zip(k.chunks_exact_mut(hd)) {
                    self.rope.rotate_in_place(qh, t.position as i64)?;
                    self.rope.rotate_in_place(kh, t.position as i64)?;
                }
                keys[b].extend_from_slice(&k);
                values[b].extend_from_slice(&v);
                queries.push(q);
            }
            let layer_off = l * d_model;
            for b in 0..batch.len() {
                let mut attn = vec![T::zero(); d_model];
                for h in 0..cfg.n_heads {
                    let hs = h * hd..(h + 1) * hd;
                    let q = &queries[b][hs.clone()];
                    scores.clear();
                    for &c in &cols[b] {
                        let k = if c < cache_len {
                            &cache.key(l, c)[hs.clone()]
                        } else {
                            let o = layer_off + h * hd;
                            &keys[c - cache_len][o..o + hd]
                        };
                        scores.push(dot(q, k) * scale);
                    }
                    softmax_in_place(&mut scores);
                    let out = &mut attn[hs.clone()];
                    for (&c, &p) in cols[b].iter().zip(&scores) {
                        let v = if c < cache_len {
                            &cache.value(l, c)[hs.clone()]
                        } else {
                            let o = layer_off + h * hd;
                            &values[c - cache_len][o..o + hd]
                        };
                        axpy(p, v, out);
                    }
                }
                let o = layer.wo.matvec(&attn);
                for (hv, ov) in hidden[b].iter_mut().zip(&o) {
                    *hv = *hv + *ov;
                }
                let x = rms_norm(&hidden[b], &layer.ffn_norm, eps);
                let gate = layer.w_gate.matvec(&x);
                let up = layer.w_up.matvec(&x);
                let act: Vec<T> = gate.iter().zip(&up).map(|(g, u)| silu(*g) * *u).collect();
                let down = layer.w_down.matvec(&act);
                for (hv, dv) in hidden[b].iter_mut().zip(&down) {
                    *hv = *hv + *dv;
                }
            }
        }

        let logits = batch
            .iter()
            .zip(&hidden)
            .map(|(t, h)| {
                t.want_logits
                    .then(|| w.lm_head.matvec(&rms_norm(h, &w.final_norm, eps)))
            })
            .collect();
        let entries = batch
            .iter()
            .zip(keys.into_iter().zip(values))
            .map(|(t, (k, v))| KvEntry {
                token: t.token,
                message: t.message,
                position: t.position,
                keys: k,
                values: v,
            })
            .collect();
        let context_lens = (0..batch.len()).map(|r| mask.row_len(r)).collect();
        Ok(StepOutput {
            logits,
            entries,
            context_lens,
        })
    }
}

/// Weight checksum of `ModelConfig::tiny()` at seed 0, frozen on first run.
pub const GOLDEN_TINY_SEED0: &str =
    "728ade5c014306083dc25542262fc733c3c6e7ef71f0b8b34e7c37e5d8a02007";
