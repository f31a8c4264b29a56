//! A configurable toy decoder-only transformer: pre-norm, grouped-query
//! attention, gated feed-forward. Exposes a mask-generalized forward pass,
//! a forward over an externally supplied KV prefix, and a per-block KV
//! encoder.

use crate::blocks::{TokenId, BYTE_VOCAB, RESERVED_SPECIALS};
use crate::mask::AttentionMask;
use crate::parallel::{for_each_row, for_each_row_scratch};
use crate::rng::{gaussian_stream, stream_seed};
use crate::rope::{rope_apply_inplace, RopeError, RopeParams};
use crate::scalar::{scalar, Scalar};
use crate::tensor::{dot, rms_norm_into, silu_scalar, softmax_row, Matrix, TensorError};
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const INIT_STD: f64 = 0.02;
const NORM_EPS: f64 = 1e-5;
const WEIGHTS_MAGIC: &[u8; 4] = b"BAW1";

/// Additive score bias for forbidden attention pairs. Large enough that
/// `exp(s - 1e9 - max)` underflows to exactly zero at any realistic score
/// scale, which makes additive masking equivalent to skipping the pair.
pub const MASK_BIAS: f64 = -1e9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {token} out of range for vocab {vocab}")]
    TokenOutOfRange { token: TokenId, vocab: usize },
    #[error("got {tokens} tokens but {positions} positions")]
    PositionCountMismatch { tokens: usize, positions: usize },
    #[error("mask side {side} does not match token count {tokens}")]
    MaskSideMismatch { side: usize, tokens: usize },
    #[error("input token sequence is empty")]
    EmptyInput,
    #[error("prefix has {got} layers, model has {expected}")]
    PrefixLayerMismatch { got: usize, expected: usize },
    #[error("prefix layers disagree on position count")]
    PrefixRagged,
    #[error(transparent)]
    Rope(#[from] RopeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("weights io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a weights file (bad magic at offset 0)")]
    BadMagic,
    #[error("weights file config fingerprint mismatch: file {file}, expected {expected}")]
    ConfigFingerprintMismatch { file: String, expected: String },
    #[error("weights file truncated at byte offset {offset}")]
    Truncated { offset: u64 },
}

/// Transformer hyperparameters. Scalar-free; rotary tables are derived on
/// demand via [`ModelConfig::rope_params`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub rope_theta: f64,
    pub max_positions: usize,
}

impl ModelConfig {
    /// Default desk-scale profile; the full verification suite runs on it in
    /// seconds.
    pub fn toy() -> Self {
        Self {
            n_layers: 4,
            d_model: 256,
            n_heads: 8,
            n_kv_heads: 2,
            head_dim: 32,
            d_ffn: 688,
            vocab_size: BYTE_VOCAB + RESERVED_SPECIALS,
            rope_theta: 10_000.0,
            max_positions: 16_384,
        }
    }

    /// Llama3-8B geometry, used only for analytic FLOPs accounting; never
    /// instantiated as weights.
    pub fn llama3_8b_shape() -> Self {
        Self {
            n_layers: 32,
            d_model: 4096,
            n_heads: 32,
            n_kv_heads: 8,
            head_dim: 128,
            d_ffn: 14_336,
            vocab_size: 128_256,
            rope_theta: 10_000.0,
            max_positions: 32_768,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.n_layers == 0
            || self.d_model == 0
            || self.n_heads == 0
            || self.n_kv_heads == 0
            || self.head_dim == 0
            || self.d_ffn == 0
            || self.vocab_size == 0
            || self.max_positions == 0
        {
            return fail("all counts must be >= 1".into());
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return fail(format!(
                "n_heads {} not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            ));
        }
        if self.d_model != self.n_heads * self.head_dim {
            return fail(format!(
                "d_model {} != n_heads {} * head_dim {}",
                self.d_model, self.n_heads, self.head_dim
            ));
        }
        if self.head_dim % 2 != 0 {
            return fail(format!("head_dim {} must be even for rotary pairs", self.head_dim));
        }
        if self.rope_theta <= 1.0 {
            return fail(format!("rope_theta {} must exceed 1", self.rope_theta));
        }
        Ok(())
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    pub fn rope_params<S: Scalar>(&self) -> RopeParams<S> {
        RopeParams::new(self.head_dim, self.rope_theta, self.max_positions)
            .expect("validated config yields valid rotary parameters")
    }

    /// Canonical byte encoding hashed into the config fingerprint.
    pub fn canonical_string(&self) -> String {
        format!(
            "blockattn-config-v1\nn_layers={}\nd_model={}\nn_heads={}\nn_kv_heads={}\nhead_dim={}\nd_ffn={}\nvocab_size={}\nrope_theta={}\nmax_positions={}\n",
            self.n_layers,
            self.d_model,
            self.n_heads,
            self.n_kv_heads,
            self.head_dim,
            self.d_ffn,
            self.vocab_size,
            self.rope_theta,
            self.max_positions,
        )
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_string().as_bytes()).into()
    }
}

/// Per-layer key/value tensors, `[positions x n_kv_heads*head_dim]`
/// row-major. Keys carry rotary encoding; values are position-free.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKV<S> {
    kv_dim: usize,
    k: Vec<S>,
    v: Vec<S>,
}

impl<S: Scalar> LayerKV<S> {
    pub fn empty(kv_dim: usize) -> Self {
        Self { kv_dim, k: Vec::new(), v: Vec::new() }
    }

    pub fn from_parts(kv_dim: usize, k: Vec<S>, v: Vec<S>) -> Self {
        assert_eq!(k.len() % kv_dim, 0);
        assert_eq!(k.len(), v.len());
        Self { kv_dim, k, v }
    }

    pub fn kv_dim(&self) -> usize {
        self.kv_dim
    }

    pub fn positions(&self) -> usize {
        self.k.len() / self.kv_dim
    }

    pub fn k(&self) -> &[S] {
        &self.k
    }

    pub fn v(&self) -> &[S] {
        &self.v
    }

    pub fn k_row(&self, p: usize) -> &[S] {
        &self.k[p * self.kv_dim..(p + 1) * self.kv_dim]
    }

    pub fn v_row(&self, p: usize) -> &[S] {
        &self.v[p * self.kv_dim..(p + 1) * self.kv_dim]
    }

    pub fn k_row_mut(&mut self, p: usize) -> &mut [S] {
        &mut self.k[p * self.kv_dim..(p + 1) * self.kv_dim]
    }

    pub fn append(&mut self, other: &LayerKV<S>) {
        assert_eq!(self.kv_dim, other.kv_dim);
        self.k.extend_from_slice(&other.k);
        self.v.extend_from_slice(&other.v);
    }

    pub fn append_row(&mut self, k_row: &[S], v_row: &[S]) {
        assert_eq!(k_row.len(), self.kv_dim);
        assert_eq!(v_row.len(), self.kv_dim);
        self.k.extend_from_slice(k_row);
        self.v.extend_from_slice(v_row);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<S> {
    pub attn_norm: Vec<S>,
    pub wq: Matrix<S>,
    pub wk: Matrix<S>,
    pub wv: Matrix<S>,
    pub wo: Matrix<S>,
    pub ffn_norm: Vec<S>,
    pub w_gate: Matrix<S>,
    pub w_up: Matrix<S>,
    pub w_down: Matrix<S>,
}

/// Model parameters. Projection matrices are stored `[out_dim x in_dim]`
/// so the hot path multiplies against contiguous rows.
#[derive(Debug, Clone)]
pub struct Weights<S> {
    config: ModelConfig,
    embedding: Matrix<S>,
    layers: Vec<LayerWeights<S>>,
    final_norm: Vec<S>,
    output: Matrix<S>,
    rope: RopeParams<S>,
}

/// Seeded parameter initialization.
///
/// Projection and embedding parameters are Normal(0, 0.02) draws from a
/// splitmix64 stream keyed by (seed, layer index, tensor index); norm gains
/// start at one so attention scores sit at a usable scale. Identical
/// (config, seed) gives bit-identical weights.
pub fn init_weights<S: Scalar>(config: &ModelConfig, seed: u64) -> Result<Weights<S>, ModelError> {
    config.validate()?;
    let d = config.d_model;
    let kv_dim = config.kv_dim();
    const GLOBAL: u64 = u64::MAX;

    let draw = |domain: u64, index: u64, rows: usize, cols: usize| -> Matrix<S> {
        let raw = gaussian_stream(stream_seed(seed, domain, index), rows * cols);
        let data = raw.iter().map(|&z| scalar::<S>(z * INIT_STD)).collect();
        Matrix::from_vec(rows, cols, data).expect("draw length matches shape")
    };

    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let li = l as u64;
        layers.push(LayerWeights {
            attn_norm: vec![S::one(); d],
            wq: draw(li, 0, config.n_heads * config.head_dim, d),
            wk: draw(li, 1, kv_dim, d),
            wv: draw(li, 2, kv_dim, d),
            wo: draw(li, 3, d, config.n_heads * config.head_dim),
            ffn_norm: vec![S::one(); d],
            w_gate: draw(li, 4, config.d_ffn, d),
            w_up: draw(li, 5, config.d_ffn, d),
            w_down: draw(li, 6, d, config.d_ffn),
        });
    }

    Ok(Weights {
        embedding: draw(GLOBAL, 0, config.vocab_size, d),
        output: draw(GLOBAL, 1, config.vocab_size, d),
        final_norm: vec![S::one(); d],
        rope: config.rope_params(),
        layers,
        config: config.clone(),
    })
}

/// Forward-pass output: one logits row per input token plus the KV stack
/// for the tokens computed in this call.
#[derive(Debug, Clone)]
pub struct ForwardOutput<S> {
    pub logits: Matrix<S>,
    pub kv: Vec<LayerKV<S>>,
}

enum Visibility<'a> {
    Mask(&'a AttentionMask),
    PrefixCausal { prefix_len: usize },
}

impl Visibility<'_> {
    /// Exclusive upper bound of key indices row `i` may see.
    #[inline]
    fn limit(&self, row: usize) -> usize {
        match self {
            Visibility::Mask(_) => row + 1,
            Visibility::PrefixCausal { prefix_len } => prefix_len + row + 1,
        }
    }

    #[inline]
    fn allowed(&self, row: usize, j: usize) -> bool {
        match self {
            Visibility::Mask(m) => m.allowed(row, j),
            Visibility::PrefixCausal { .. } => true,
        }
    }
}

impl<S: Scalar> Weights<S> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn rope(&self) -> &RopeParams<S> {
        &self.rope
    }

    pub fn layers(&self) -> &[LayerWeights<S>] {
        &self.layers
    }

    pub fn embedding(&self) -> &Matrix<S> {
        &self.embedding
    }

    /// Decoder forward over `tokens` at explicit per-token positions under
    /// an explicit visibility mask. Forbidden pairs contribute exactly zero
    /// attention weight, as if their scores carried a `-1e9` additive bias
    /// into the softmax.
    pub fn forward_masked(
        &self,
        tokens: &[TokenId],
        positions: &[usize],
        mask: &AttentionMask,
    ) -> Result<ForwardOutput<S>, ModelError> {
        if mask.side() != tokens.len() {
            return Err(ModelError::MaskSideMismatch { side: mask.side(), tokens: tokens.len() });
        }
        let vis = Visibility::Mask(mask);
        let (logits, kv) = self.forward_internal(tokens, positions, None, &vis, true)?;
        Ok(ForwardOutput { logits: logits.expect("logits requested"), kv })
    }

    /// Decoder forward for a token suffix attending an externally supplied,
    /// already position-encoded KV prefix, plus causal self-attention within
    /// the suffix. Returns logits and the KV of the new tokens only.
    pub fn forward_with_prefix(
        &self,
        tokens: &[TokenId],
        positions: &[usize],
        prefix: &[LayerKV<S>],
    ) -> Result<ForwardOutput<S>, ModelError> {
        if prefix.len() != self.config.n_layers {
            return Err(ModelError::PrefixLayerMismatch {
                got: prefix.len(),
                expected: self.config.n_layers,
            });
        }
        let prefix_len = prefix[0].positions();
        if prefix.iter().any(|l| l.positions() != prefix_len) {
            return Err(ModelError::PrefixRagged);
        }
        let vis = Visibility::PrefixCausal { prefix_len };
        let (logits, kv) = self.forward_internal(tokens, positions, Some(prefix), &vis, true)?;
        Ok(ForwardOutput { logits: logits.expect("logits requested"), kv })
    }

    /// KV states of one block computed in isolation: causal self-attention
    /// over the block alone, positions starting from zero (the cache storage
    /// convention). Equals the KV slice of a vanilla forward over the block.
    pub fn encode_block_kv(&self, tokens: &[TokenId]) -> Result<Vec<LayerKV<S>>, ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let vis = Visibility::PrefixCausal { prefix_len: 0 };
        let (_, kv) = self.forward_internal(tokens, &positions, None, &vis, false)?;
        Ok(kv)
    }

    fn forward_internal(
        &self,
        tokens: &[TokenId],
        positions: &[usize],
        prefix: Option<&[LayerKV<S>]>,
        vis: &Visibility,
        compute_logits: bool,
    ) -> Result<(Option<Matrix<S>>, Vec<LayerKV<S>>), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        if tokens.len() != positions.len() {
            return Err(ModelError::PositionCountMismatch {
                tokens: tokens.len(),
                positions: positions.len(),
            });
        }
        for (&t, &p) in tokens.iter().zip(positions) {
            if (t as usize) >= self.config.vocab_size {
                return Err(ModelError::TokenOutOfRange { token: t, vocab: self.config.vocab_size });
            }
            if p >= self.config.max_positions {
                return Err(ModelError::Rope(RopeError::PositionOverflow {
                    pos: p,
                    max: self.config.max_positions,
                }));
            }
        }

        let n = tokens.len();
        let d = self.config.d_model;
        let mut x = Matrix::zeros(n, d);
        for (i, &t) in tokens.iter().enumerate() {
            x.row_mut(i).copy_from_slice(self.embedding.row(t as usize));
        }

        let mut kv_out = Vec::with_capacity(self.config.n_layers);
        for (l, lw) in self.layers.iter().enumerate() {
            let layer_prefix = prefix.map(|p| &p[l]);
            let new_kv = self.decoder_layer(&mut x, lw, positions, layer_prefix, vis)?;
            kv_out.push(new_kv);
        }

        let logits = if compute_logits {
            let mut x_norm = Matrix::zeros(n, d);
            let eps = scalar::<S>(NORM_EPS);
            {
                let x_ref = &x;
                let gain = &self.final_norm;
                for_each_row(x_norm.data_mut(), d, |i, row| {
                    rms_norm_into(x_ref.row(i), gain, eps, row);
                });
            }
            Some(x_norm.matmul_nt(&self.output)?)
        } else {
            None
        };
        Ok((logits, kv_out))
    }

    fn decoder_layer(
        &self,
        x: &mut Matrix<S>,
        lw: &LayerWeights<S>,
        positions: &[usize],
        prefix: Option<&LayerKV<S>>,
        vis: &Visibility,
    ) -> Result<LayerKV<S>, ModelError> {
        let cfg = &self.config;
        let n = x.rows();
        let d = cfg.d_model;
        let hd = cfg.head_dim;
        let kv_dim = cfg.kv_dim();
        let eps = scalar::<S>(NORM_EPS);

        let mut x_norm = Matrix::zeros(n, d);
        {
            let x_ref = &*x;
            let gain = &lw.attn_norm;
            for_each_row(x_norm.data_mut(), d, |i, row| {
                rms_norm_into(x_ref.row(i), gain, eps, row);
            });
        }

        let mut q = x_norm.matmul_nt(&lw.wq)?;
        let mut k_new = x_norm.matmul_nt(&lw.wk)?;
        let v_new = x_norm.matmul_nt(&lw.wv)?;

        // Rotate queries and keys to their token positions.
        let rope = &self.rope;
        let q_cols = cfg.n_heads * hd;
        for_each_row(q.data_mut(), q_cols, |i, row| {
            for h in 0..cfg.n_heads {
                rope_apply_inplace(&mut row[h * hd..(h + 1) * hd], positions[i], rope)
                    .expect("positions validated");
            }
        });
        for_each_row(k_new.data_mut(), kv_dim, |i, row| {
            for g in 0..cfg.n_kv_heads {
                rope_apply_inplace(&mut row[g * hd..(g + 1) * hd], positions[i], rope)
                    .expect("positions validated");
            }
        });

        // Assemble the full key/value arrays this layer attends over.
        let prefix_len = prefix.map_or(0, |p| p.positions());
        let total = prefix_len + n;
        let (k_all, v_all) = match prefix {
            None => (k_new.clone(), v_new.clone()),
            Some(pre) => {
                let mut k = Vec::with_capacity(total * kv_dim);
                k.extend_from_slice(pre.k());
                k.extend_from_slice(k_new.data());
                let mut v = Vec::with_capacity(total * kv_dim);
                v.extend_from_slice(pre.v());
                v.extend_from_slice(v_new.data());
                (
                    Matrix::from_vec(total, kv_dim, k)?,
                    Matrix::from_vec(total, kv_dim, v)?,
                )
            }
        };

        let mut attn_out = Matrix::zeros(n, q_cols);
        attention(&mut attn_out, &q, &k_all, &v_all, vis, cfg);

        let proj = attn_out.matmul_nt(&lw.wo)?;
        add_assign(x.data_mut(), proj.data());

        {
            let x_ref = &*x;
            let gain = &lw.ffn_norm;
            for_each_row(x_norm.data_mut(), d, |i, row| {
                rms_norm_into(x_ref.row(i), gain, eps, row);
            });
        }
        let gate = x_norm.matmul_nt(&lw.w_gate)?;
        let up = x_norm.matmul_nt(&lw.w_up)?;
        let mut hidden = gate;
        for (h, &u) in hidden.data_mut().iter_mut().zip(up.data()) {
            *h = silu_scalar(*h) * u;
        }
        let ffn = hidden.matmul_nt(&lw.w_down)?;
        add_assign(x.data_mut(), ffn.data());

        Ok(LayerKV::from_parts(kv_dim, k_new.into_data(), v_new.into_data()))
    }

    pub fn weights_fingerprint(&self) -> [u8; 32]
    where
        Self: Persist,
    {
        Persist::fingerprint(self)
    }
}

fn add_assign<S: Scalar>(target: &mut [S], source: &[S]) {
    debug_assert_eq!(target.len(), source.len());
    for (t, &s) in target.iter_mut().zip(source) {
        *t = *t + s;
    }
}

/// Scaled-dot-product attention over explicit visibility. Each output row
/// is computed by one worker with fixed left-to-right reductions, so results
/// do not depend on thread count, and a prefix-causal row agrees bit-for-bit
/// with the same row under an equivalent explicit mask.
fn attention<S: Scalar>(
    out: &mut Matrix<S>,
    q: &Matrix<S>,
    k_all: &Matrix<S>,
    v_all: &Matrix<S>,
    vis: &Visibility,
    cfg: &ModelConfig,
) {
    let hd = cfg.head_dim;
    let group = cfg.n_heads / cfg.n_kv_heads;
    let total = k_all.rows();
    let scale = S::one() / scalar::<S>((hd as f64).sqrt());
    let q_cols = cfg.n_heads * hd;

    for_each_row_scratch(
        out.data_mut(),
        q_cols,
        || vec![S::zero(); total],
        |scores, i, out_row| {
            let limit = vis.limit(i).min(total);
            let q_row = q.row(i);
            for h in 0..cfg.n_heads {
                let g = h / group;
                let q_h = &q_row[h * hd..(h + 1) * hd];
                let mut m = 0;
                for j in 0..limit {
                    if vis.allowed(i, j) {
                        let k_h = &k_all.row(j)[g * hd..(g + 1) * hd];
                        scores[m] = dot(q_h, k_h) * scale;
                        m += 1;
                    }
                }
                softmax_row(&mut scores[..m]);
                let out_h = &mut out_row[h * hd..(h + 1) * hd];
                out_h.fill(S::zero());
                let mut w_ix = 0;
                for j in 0..limit {
                    if vis.allowed(i, j) {
                        let w = scores[w_ix];
                        w_ix += 1;
                        let v_h = &v_all.row(j)[g * hd..(g + 1) * hd];
                        for c in 0..hd {
                            out_h[c] = out_h[c] + w * v_h[c];
                        }
                    }
                }
            }
        },
    );
}

/// Binary persistence; implemented for `f32` weights (the on-disk format is
/// little-endian f32).
pub trait Persist: Sized {
    fn save(&self, path: &Path) -> Result<(), ModelError>;
    fn load(path: &Path, config: &ModelConfig) -> Result<Self, ModelError>;
    fn to_bytes(&self) -> Vec<u8>;
    fn fingerprint(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }
}

impl Weights<f32> {
    fn tensors(&self) -> Vec<&[f32]> {
        let mut t: Vec<&[f32]> = vec![self.embedding.data()];
        for lw in &self.layers {
            t.push(&lw.attn_norm);
            t.push(lw.wq.data());
            t.push(lw.wk.data());
            t.push(lw.wv.data());
            t.push(lw.wo.data());
            t.push(&lw.ffn_norm);
            t.push(lw.w_gate.data());
            t.push(lw.w_up.data());
            t.push(lw.w_down.data());
        }
        t.push(&self.final_norm);
        t.push(self.output.data());
        t
    }
}

impl Persist for Weights<f32> {
    fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(WEIGHTS_MAGIC);
        buf.extend_from_slice(&self.config.fingerprint());
        for tensor in self.tensors() {
            for &v in tensor {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(&self.to_bytes())?;
        Ok(())
    }

    fn load(path: &Path, config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut file = std::fs::File::open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;

        let mut offset = 0usize;
        let take = |bytes: &[u8], offset: &mut usize, len: usize| -> Result<Vec<u8>, ModelError> {
            if *offset + len > bytes.len() {
                return Err(ModelError::Truncated { offset: bytes.len() as u64 });
            }
            let out = bytes[*offset..*offset + len].to_vec();
            *offset += len;
            Ok(out)
        };

        let magic = take(&bytes, &mut offset, 4)?;
        if magic != WEIGHTS_MAGIC {
            return Err(ModelError::BadMagic);
        }
        let file_fp = take(&bytes, &mut offset, 32)?;
        let expected_fp = config.fingerprint();
        if file_fp != expected_fp {
            return Err(ModelError::ConfigFingerprintMismatch {
                file: hex(&file_fp),
                expected: hex(&expected_fp),
            });
        }

        let mut read_tensor = |len: usize| -> Result<Vec<f32>, ModelError> {
            let raw = take(&bytes, &mut offset, len * 4)?;
            Ok(raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        };

        let d = config.d_model;
        let q_dim = config.n_heads * config.head_dim;
        let kv_dim = config.kv_dim();
        let embedding = Matrix::from_vec(config.vocab_size, d, read_tensor(config.vocab_size * d)?)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                attn_norm: read_tensor(d)?,
                wq: Matrix::from_vec(q_dim, d, read_tensor(q_dim * d)?)?,
                wk: Matrix::from_vec(kv_dim, d, read_tensor(kv_dim * d)?)?,
                wv: Matrix::from_vec(kv_dim, d, read_tensor(kv_dim * d)?)?,
                wo: Matrix::from_vec(d, q_dim, read_tensor(d * q_dim)?)?,
                ffn_norm: read_tensor(d)?,
                w_gate: Matrix::from_vec(config.d_ffn, d, read_tensor(config.d_ffn * d)?)?,
                w_up: Matrix::from_vec(config.d_ffn, d, read_tensor(config.d_ffn * d)?)?,
                w_down: Matrix::from_vec(d, config.d_ffn, read_tensor(d * config.d_ffn)?)?,
            });
        }
        let final_norm = read_tensor(d)?;
        let output = Matrix::from_vec(config.vocab_size, d, read_tensor(config.vocab_size * d)?)?;

        Ok(Weights {
            config: config.clone(),
            embedding,
            layers,
            final_norm,
            output,
            rope: config.rope_params(),
        })
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
