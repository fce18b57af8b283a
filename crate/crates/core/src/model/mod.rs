//! The full captioning network: expansion encoder over an unordered feature
//! set, expansion decoder with cross-attention, embeddings, and the output
//! head. Baseline self-attention stacks are available per side for the
//! ablation harness.

pub mod decode;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{multi_head_attention, AttentionParams, AttnMask};
use crate::data::SOS;
use crate::error::{Error, Result};
use crate::expansion::{ExpansionLayer, ExpansionMode, Placement};
use crate::init;
use crate::tensor::ops::{add, add_row, layer_norm, matmul, relu, select_rows};
use crate::tensor::serialize::TensorRecord;
use crate::tensor::{Param, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Which sublayer a stack uses in place of self-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Expansion,
    BaselineAttention,
}

/// All architecture hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub enc_kind: LayerKind,
    pub dec_kind: LayerKind,
    /// Encoder expansion mode (ignored for baseline-attention encoders).
    pub enc_mode: ExpansionMode,
    /// Decoder expansion coefficient; the mode is always DynamicCausal.
    pub dec_n_e: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub d_feature: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::toy()
    }
}

impl ModelConfig {
    /// Default desk-scale configuration.
    pub fn toy() -> Self {
        ModelConfig {
            d_model: 64,
            d_ff: 128,
            n_enc_layers: 3,
            n_dec_layers: 3,
            enc_kind: LayerKind::Expansion,
            dec_kind: LayerKind::Expansion,
            enc_mode: ExpansionMode::Static { n_e: 16 },
            dec_n_e: 4,
            n_heads: 4,
            vocab_size: 32,
            max_seq_len: 40,
            d_feature: 32,
        }
    }

    /// Minimal configuration for the gradient suite.
    pub fn tiny() -> Self {
        ModelConfig {
            d_model: 8,
            d_ff: 16,
            n_enc_layers: 1,
            n_dec_layers: 1,
            enc_kind: LayerKind::Expansion,
            dec_kind: LayerKind::Expansion,
            enc_mode: ExpansionMode::Static { n_e: 2 },
            dec_n_e: 2,
            n_heads: 2,
            vocab_size: 7,
            max_seq_len: 8,
            d_feature: 5,
        }
    }

    /// Full-scale configuration as reported for the reference architecture;
    /// constructible, not trained here.
    pub fn paper_scale() -> Self {
        ModelConfig {
            d_model: 512,
            d_ff: 2048,
            n_enc_layers: 6,
            n_dec_layers: 6,
            enc_kind: LayerKind::Expansion,
            dec_kind: LayerKind::Expansion,
            enc_mode: ExpansionMode::Static { n_e: 64 },
            dec_n_e: 16,
            n_heads: 8,
            vocab_size: 10000,
            max_seq_len: 64,
            d_feature: 2048,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_ff == 0 || self.vocab_size <= 4 || self.d_feature == 0 {
            return Err(Error::config("model config: zero-sized dimension".to_string()));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "n_heads {} must divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::config("max_seq_len must be at least 2 (sos + eos)".to_string()));
        }
        if self.dec_n_e == 0 || self.enc_mode.n_e() == 0 {
            return Err(Error::config("expansion coefficients must be positive".to_string()));
        }
        if self.enc_mode.is_causal() {
            return Err(Error::config(
                "encoder expansion mode must be bidirectional".to_string(),
            ));
        }
        Ok(())
    }

    pub fn dec_mode(&self) -> ExpansionMode {
        ExpansionMode::DynamicCausal { n_e: self.dec_n_e }
    }
}

pub(crate) struct LayerNorm {
    pub gain: Param,
    pub bias: Param,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        LayerNorm { gain: init::ones(vec![d]), bias: init::zeros(vec![d]) }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, &self.gain.tensor(), &self.bias.tensor(), LN_EPS)
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((format!("{prefix}.gain"), &self.gain));
        out.push((format!("{prefix}.bias"), &self.bias));
    }
}

pub(crate) struct FeedForward {
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
}

impl FeedForward {
    fn new(rng: &mut ChaCha12Rng, d_model: usize, d_ff: usize) -> Self {
        FeedForward {
            w1: init::uniform_fan_in(rng, d_model, d_ff),
            b1: init::zeros(vec![d_ff]),
            w2: init::uniform_fan_in(rng, d_ff, d_model),
            b2: init::zeros(vec![d_model]),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = relu(&add_row(&matmul(x, &self.w1.tensor())?, &self.b1.tensor())?);
        add_row(&matmul(&h, &self.w2.tensor())?, &self.b2.tensor())
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((format!("{prefix}.w1"), &self.w1));
        out.push((format!("{prefix}.b1"), &self.b1));
        out.push((format!("{prefix}.w2"), &self.w2));
        out.push((format!("{prefix}.b2"), &self.b2));
    }
}

/// The sequence-mixing sublayer of a stack layer.
pub(crate) enum SeqTransform {
    Expansion(ExpansionLayer),
    SelfAttention(AttentionParams),
}

impl SeqTransform {
    fn forward(&self, x: &Tensor, causal: bool) -> Result<Tensor> {
        match self {
            SeqTransform::Expansion(layer) => layer.forward(x),
            SeqTransform::SelfAttention(params) => {
                let mask = causal.then(|| AttnMask::causal(x.rows()));
                multi_head_attention(x, x, params, mask.as_ref())
            }
        }
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        match self {
            SeqTransform::Expansion(layer) => layer.named(&format!("{prefix}.exp"), out),
            SeqTransform::SelfAttention(p) => p.named(&format!("{prefix}.attn"), out),
        }
    }
}

pub(crate) struct EncoderLayer {
    pub norm1: LayerNorm,
    pub transform: SeqTransform,
    pub norm2: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    /// Pre-layer-norm residual block: Y = X + T(Norm(X)); O = Y + FF(Norm(Y)).
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = add(x, &self.transform.forward(&self.norm1.forward(x)?, false)?)?;
        add(&y, &self.ff.forward(&self.norm2.forward(&y)?)?)
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.norm1.named(&format!("{prefix}.norm1"), out);
        self.transform.named(prefix, out);
        self.norm2.named(&format!("{prefix}.norm2"), out);
        self.ff.named(&format!("{prefix}.ff"), out);
    }
}

pub(crate) struct DecoderLayer {
    pub norm1: LayerNorm,
    pub self_transform: SeqTransform,
    pub norm2: LayerNorm,
    pub cross: AttentionParams,
    pub norm3: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderLayer {
    fn forward(&self, y: &Tensor, memory: &Tensor) -> Result<Tensor> {
        let z = add(y, &self.self_transform.forward(&self.norm1.forward(y)?, true)?)?;
        let w = add(
            &z,
            &multi_head_attention(&self.norm2.forward(&z)?, memory, &self.cross, None)?,
        )?;
        add(&w, &self.ff.forward(&self.norm3.forward(&w)?)?)
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.norm1.named(&format!("{prefix}.norm1"), out);
        self.self_transform.named(prefix, out);
        self.norm2.named(&format!("{prefix}.norm2"), out);
        self.cross.named(&format!("{prefix}.cross"), out);
        self.norm3.named(&format!("{prefix}.norm3"), out);
        self.ff.named(&format!("{prefix}.ff"), out);
    }
}

/// The assembled network.
pub struct Model {
    pub config: ModelConfig,
    pub(crate) in_w: Param,
    pub(crate) in_b: Param,
    pub(crate) enc_layers: Vec<EncoderLayer>,
    pub(crate) tok_emb: Param,
    pub(crate) pos_emb: Param,
    pub(crate) dec_layers: Vec<DecoderLayer>,
    pub(crate) final_norm: LayerNorm,
    pub(crate) out_w: Param,
    pub(crate) out_b: Param,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("params", &self.param_count())
            .finish()
    }
}

impl Model {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let d = config.d_model;

        let in_w = init::uniform_fan_in(&mut rng, config.d_feature, d);
        let in_b = init::zeros(vec![d]);

        let mut enc_layers = Vec::with_capacity(config.n_enc_layers);
        for _ in 0..config.n_enc_layers {
            let transform = match config.enc_kind {
                LayerKind::Expansion => SeqTransform::Expansion(ExpansionLayer::new(
                    &mut rng,
                    d,
                    config.enc_mode,
                    Placement::Bidirectional,
                )?),
                LayerKind::BaselineAttention => {
                    SeqTransform::SelfAttention(AttentionParams::init(&mut rng, d, config.n_heads)?)
                }
            };
            enc_layers.push(EncoderLayer {
                norm1: LayerNorm::new(d),
                transform,
                norm2: LayerNorm::new(d),
                ff: FeedForward::new(&mut rng, d, config.d_ff),
            });
        }

        let tok_emb = init::normal(&mut rng, vec![config.vocab_size, d], 0.02);
        let pos_emb = init::normal(&mut rng, vec![config.max_seq_len, d], 0.02);

        let mut dec_layers = Vec::with_capacity(config.n_dec_layers);
        for _ in 0..config.n_dec_layers {
            let self_transform = match config.dec_kind {
                LayerKind::Expansion => SeqTransform::Expansion(ExpansionLayer::new(
                    &mut rng,
                    d,
                    config.dec_mode(),
                    Placement::Autoregressive,
                )?),
                LayerKind::BaselineAttention => {
                    SeqTransform::SelfAttention(AttentionParams::init(&mut rng, d, config.n_heads)?)
                }
            };
            dec_layers.push(DecoderLayer {
                norm1: LayerNorm::new(d),
                self_transform,
                norm2: LayerNorm::new(d),
                cross: AttentionParams::init(&mut rng, d, config.n_heads)?,
                norm3: LayerNorm::new(d),
                ff: FeedForward::new(&mut rng, d, config.d_ff),
            });
        }

        Ok(Model {
            config: config.clone(),
            in_w,
            in_b,
            enc_layers,
            tok_emb,
            pos_emb,
            dec_layers,
            final_norm: LayerNorm::new(d),
            out_w: init::uniform_fan_in(&mut rng, d, config.vocab_size),
            out_b: init::zeros(vec![config.vocab_size]),
        })
    }

    /// Stable, ordered (name, param) registry; checkpoint record order.
    pub fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        out.push(("enc.in_w".to_string(), &self.in_w));
        out.push(("enc.in_b".to_string(), &self.in_b));
        for (i, layer) in self.enc_layers.iter().enumerate() {
            layer.named(&format!("enc.layers.{i}"), &mut out);
        }
        out.push(("dec.tok_emb".to_string(), &self.tok_emb));
        out.push(("dec.pos_emb".to_string(), &self.pos_emb));
        for (i, layer) in self.dec_layers.iter().enumerate() {
            layer.named(&format!("dec.layers.{i}"), &mut out);
        }
        self.final_norm.named("dec.final_norm", &mut out);
        out.push(("dec.out_w".to_string(), &self.out_w));
        out.push(("dec.out_b".to_string(), &self.out_b));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.numel()).sum()
    }

    /// Project features to d_model (linear + ReLU), then run the encoder
    /// stack. Output: one memory row per input feature row.
    pub fn encode(&self, features: &Tensor) -> Result<Tensor> {
        if features.cols() != self.config.d_feature {
            return Err(Error::dim(format!(
                "encode: feature width {} != configured {}",
                features.cols(),
                self.config.d_feature
            )));
        }
        let mut x = relu(&add_row(
            &matmul(features, &self.in_w.tensor())?,
            &self.in_b.tensor(),
        )?);
        for layer in &self.enc_layers {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }

    /// Teacher-forced logits: row t is the next-token distribution after
    /// consuming tokens[0..=t]. Row t conditions only on tokens ≤ t and the
    /// full memory.
    pub fn decode_logits(&self, tokens: &[u32], memory: &Tensor) -> Result<Tensor> {
        if tokens.first() != Some(&SOS) {
            return Err(Error::contract("decode_logits: tokens must begin with sos".to_string()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Length(format!(
                "decode_logits: {} tokens exceed max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::dim(format!(
                "decode_logits: token {bad} out of vocabulary {}",
                self.config.vocab_size
            )));
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..ids.len()).collect();
        let mut y = add(
            &select_rows(&self.tok_emb.tensor(), &ids)?,
            &select_rows(&self.pos_emb.tensor(), &positions)?,
        )?;
        for layer in &self.dec_layers {
            y = layer.forward(&y, memory)?;
        }
        let y = self.final_norm.forward(&y)?;
        add_row(&matmul(&y, &self.out_w.tensor())?, &self.out_b.tensor())
    }

    pub fn state_records(&self) -> Vec<TensorRecord> {
        self.named_params()
            .into_iter()
            .map(|(name, p)| TensorRecord {
                name,
                dims: p.shape().to_vec(),
                data: p.value(),
            })
            .collect()
    }

    /// Restore parameter values by name. Records the model does not own
    /// (e.g. optimizer state) are ignored; missing or misshaped parameters
    /// are errors.
    pub fn load_records(&self, records: &[TensorRecord]) -> Result<()> {
        let by_name: std::collections::HashMap<&str, &TensorRecord> =
            records.iter().map(|r| (r.name.as_str(), r)).collect();
        for (name, param) in self.named_params() {
            let rec = by_name.get(name.as_str()).ok_or_else(|| {
                Error::Format { offset: 0, message: format!("checkpoint is missing tensor {name}") }
            })?;
            if rec.dims != param.shape() {
                return Err(Error::dim(format!(
                    "checkpoint tensor {name}: dims {:?} != expected {:?}",
                    rec.dims,
                    param.shape()
                )));
            }
            param.set_value(rec.data.clone())?;
        }
        Ok(())
    }
}
