//! A small transformer masked LM trained from scratch on CPU.
//!
//! Token, position and segment embeddings feed a stack of post-norm
//! self-attention blocks. Vocabulary logits at a mask come from the final
//! hidden state against the tied token-embedding matrix plus an output bias,
//! so label-word scoring uses the LM head and nothing else.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::vocab::Vocab;
use crate::prompt::{SpecialTokens, TokenCounter};
use crate::scorer::{Encoded, MaskedLm, ScorerError, SpecialIds, TokenId, TrainExample, TrainableMlm};

const WEIGHTS_FILE: &str = "model.safetensors";
const VOCAB_FILE: &str = "vocab.json";
const CONFIG_FILE: &str = "model_config.json";
const MAX_SEGMENTS: usize = 16;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TinyMlmConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub init_std: f64,
}

impl Default for TinyMlmConfig {
    fn default() -> Self {
        TinyMlmConfig {
            d_model: 32,
            n_heads: 2,
            n_layers: 1,
            ff_dim: 64,
            max_len: 256,
            learning_rate: 3e-3,
            weight_decay: 0.0,
            init_std: 0.1,
        }
    }
}

fn backend_err(e: candle_core::Error) -> ScorerError {
    ScorerError::Backend(e.to_string())
}

/// Named parameters in a fixed order.
struct Params {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl Params {
    fn get(&self, name: &str) -> &Tensor {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[i].as_tensor()
    }
}

fn param_shapes(cfg: &TinyMlmConfig, vocab: usize) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let mut shapes = vec![
        ("tok_emb".to_string(), vec![vocab, d], Init::Normal),
        ("pos_emb".to_string(), vec![cfg.max_len, d], Init::Normal),
        ("seg_emb".to_string(), vec![MAX_SEGMENTS, d], Init::Normal),
        ("emb_ln.g".to_string(), vec![d], Init::Ones),
        ("emb_ln.b".to_string(), vec![d], Init::Zeros),
    ];
    for l in 0..cfg.n_layers {
        let p = |n: &str| format!("layer{l}.{n}");
        shapes.extend([
            (p("wq"), vec![d, d], Init::Normal),
            (p("wk"), vec![d, d], Init::Normal),
            (p("wv"), vec![d, d], Init::Normal),
            (p("wo"), vec![d, d], Init::Normal),
            (p("ln1.g"), vec![d], Init::Ones),
            (p("ln1.b"), vec![d], Init::Zeros),
            (p("ff1.w"), vec![d, cfg.ff_dim], Init::Normal),
            (p("ff1.b"), vec![cfg.ff_dim], Init::Zeros),
            (p("ff2.w"), vec![cfg.ff_dim, d], Init::Normal),
            (p("ff2.b"), vec![d], Init::Zeros),
            (p("ln2.g"), vec![d], Init::Ones),
            (p("ln2.b"), vec![d], Init::Zeros),
        ]);
    }
    shapes.extend([
        ("head.w".to_string(), vec![d, d], Init::Normal),
        ("head.b".to_string(), vec![d], Init::Zeros),
        ("head_ln.g".to_string(), vec![d], Init::Ones),
        ("head_ln.b".to_string(), vec![d], Init::Zeros),
        ("out_bias".to_string(), vec![vocab], Init::Zeros),
    ]);
    shapes
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Ones,
    Zeros,
}

pub struct TinyMlm {
    config: TinyMlmConfig,
    vocab: Vocab,
    device: Device,
    params: Params,
    optimizer: Option<AdamW>,
}

impl std::fmt::Debug for TinyMlm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TinyMlm")
            .field("config", &self.config)
            .field("vocab_size", &self.vocab.len())
            .finish()
    }
}

fn layer_norm(x: &Tensor, g: &Tensor, b: &Tensor) -> candle_core::Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
    normed.broadcast_mul(g)?.broadcast_add(b)
}

impl TinyMlm {
    /// Fresh parameters drawn from a generator seeded with `seed`.
    pub fn new(vocab: Vocab, config: TinyMlmConfig, seed: u64) -> Result<Self, ScorerError> {
        if config.d_model % config.n_heads.max(1) != 0 {
            return Err(ScorerError::Backend(format!(
                "d_model {} is not divisible by n_heads {}",
                config.d_model, config.n_heads
            )));
        }
        let device = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, config.init_std as f32)
            .map_err(|e| ScorerError::Backend(e.to_string()))?;
        let mut names = Vec::new();
        let mut vars = Vec::new();
        for (name, shape, init) in param_shapes(&config, vocab.len()) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = match init {
                Init::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                Init::Ones => vec![1.0; n],
                Init::Zeros => vec![0.0; n],
            };
            let t = Tensor::from_vec(data, shape, &device).map_err(backend_err)?;
            names.push(name);
            vars.push(Var::from_tensor(&t).map_err(backend_err)?);
        }
        let mut model = TinyMlm {
            config,
            vocab,
            device,
            params: Params { names, vars },
            optimizer: None,
        };
        model.reset_optimizer()?;
        Ok(model)
    }

    fn reset_optimizer(&mut self) -> Result<(), ScorerError> {
        let opt = AdamW::new(
            self.params.vars.clone(),
            ParamsAdamW {
                lr: self.config.learning_rate,
                weight_decay: self.config.weight_decay,
                ..Default::default()
            },
        )
        .map_err(backend_err)?;
        self.optimizer = Some(opt);
        Ok(())
    }

    pub fn config(&self) -> &TinyMlmConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
        if let Some(opt) = self.optimizer.as_mut() {
            opt.set_learning_rate(lr);
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), ScorerError> {
        let dir = dir.as_ref();
        let io = |e: std::io::Error| ScorerError::Backend(format!("{}: {e}", dir.display()));
        fs::create_dir_all(dir).map_err(io)?;
        let tensors: HashMap<String, Tensor> = self
            .params
            .names
            .iter()
            .cloned()
            .zip(self.params.vars.iter().map(|v| v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&tensors, dir.join(WEIGHTS_FILE)).map_err(backend_err)?;
        let vocab = serde_json::to_string(&self.vocab).expect("vocab serializes");
        fs::write(dir.join(VOCAB_FILE), vocab).map_err(io)?;
        let config = serde_json::to_string_pretty(&self.config).expect("config serializes");
        fs::write(dir.join(CONFIG_FILE), config).map_err(io)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, ScorerError> {
        let dir = dir.as_ref();
        let read = |name: &str| {
            fs::read_to_string(dir.join(name))
                .map_err(|e| ScorerError::Backend(format!("{}: {e}", dir.join(name).display())))
        };
        let vocab: Vocab = serde_json::from_str(&read(VOCAB_FILE)?)
            .map_err(|e| ScorerError::Backend(format!("vocab: {e}")))?;
        let config: TinyMlmConfig = serde_json::from_str(&read(CONFIG_FILE)?)
            .map_err(|e| ScorerError::Backend(format!("model config: {e}")))?;
        let model = TinyMlm::new(vocab, config, 0)?;
        let tensors =
            candle_core::safetensors::load(dir.join(WEIGHTS_FILE), &model.device).map_err(backend_err)?;
        for (name, var) in model.params.names.iter().zip(&model.params.vars) {
            let t = tensors
                .get(name)
                .ok_or_else(|| ScorerError::Backend(format!("checkpoint lacks {name}")))?;
            var.set(t).map_err(backend_err)?;
        }
        Ok(model)
    }

    pub fn checkpoint_exists(dir: impl AsRef<Path>) -> bool {
        let dir = dir.as_ref();
        [WEIGHTS_FILE, VOCAB_FILE, CONFIG_FILE]
            .iter()
            .all(|f| dir.join(f).is_file())
    }

    /// Final hidden states, one row per token.
    fn hidden(&self, enc: &Encoded) -> candle_core::Result<Tensor> {
        let p = &self.params;
        let n = enc.len();
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let ids = Tensor::new(enc.ids.as_slice(), &self.device)?;
        let segs: Vec<u32> = enc
            .segments
            .iter()
            .map(|&s| (s as u32).min(MAX_SEGMENTS as u32 - 1))
            .collect();
        let segs = Tensor::new(segs.as_slice(), &self.device)?;
        let mut x = p
            .get("tok_emb")
            .index_select(&ids, 0)?
            .add(&p.get("pos_emb").narrow(0, 0, n)?)?
            .add(&p.get("seg_emb").index_select(&segs, 0)?)?;
        x = layer_norm(&x, p.get("emb_ln.g"), p.get("emb_ln.b"))?;
        let scale = 1.0 / (dh as f64).sqrt();
        for l in 0..self.config.n_layers {
            let w = |name: &str| p.get(&format!("layer{l}.{name}"));
            let split = |t: Tensor| -> candle_core::Result<Tensor> {
                t.reshape((n, heads, dh))?.transpose(0, 1)?.contiguous()
            };
            let q = split(x.matmul(w("wq"))?)?;
            let k = split(x.matmul(w("wk"))?)?;
            let v = split(x.matmul(w("wv"))?)?;
            let scores = (q.matmul(&k.t()?)? * scale)?;
            let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
            let ctx = attn
                .matmul(&v)?
                .transpose(0, 1)?
                .contiguous()?
                .reshape((n, d))?;
            x = layer_norm(&(x + ctx.matmul(w("wo"))?)?, w("ln1.g"), w("ln1.b"))?;
            let ff = x
                .matmul(w("ff1.w"))?
                .broadcast_add(w("ff1.b"))?
                .gelu()?
                .matmul(w("ff2.w"))?
                .broadcast_add(w("ff2.b"))?;
            x = layer_norm(&(x + ff)?, w("ln2.g"), w("ln2.b"))?;
        }
        Ok(x)
    }

    /// LM-head logits at `position` for `candidates` (all tokens when `None`).
    fn head_logits(
        &self,
        enc: &Encoded,
        position: usize,
        candidates: Option<&[TokenId]>,
    ) -> candle_core::Result<Tensor> {
        let p = &self.params;
        let h = self.hidden(enc)?.narrow(0, position, 1)?;
        let h = h
            .matmul(p.get("head.w"))?
            .broadcast_add(p.get("head.b"))?
            .gelu()?;
        let h = layer_norm(&h, p.get("head_ln.g"), p.get("head_ln.b"))?;
        let (emb, bias) = match candidates {
            Some(c) => {
                let idx = Tensor::new(c, &self.device)?;
                (
                    p.get("tok_emb").index_select(&idx, 0)?,
                    p.get("out_bias").index_select(&idx, 0)?,
                )
            }
            None => (p.get("tok_emb").clone(), p.get("out_bias").clone()),
        };
        h.matmul(&emb.t()?)?.squeeze(0)?.add(&bias)
    }

    fn check_position(&self, enc: &Encoded, position: usize) -> Result<(), ScorerError> {
        if position >= enc.len() {
            return Err(ScorerError::BadPosition {
                position,
                len: enc.len(),
            });
        }
        if enc.len() > self.config.max_len {
            return Err(ScorerError::TooLong {
                len: enc.len(),
                max: self.config.max_len,
            });
        }
        Ok(())
    }
}

impl TokenCounter for TinyMlm {
    fn count_tokens(&self, text: &str) -> usize {
        self.vocab.count(text)
    }
}

impl MaskedLm for TinyMlm {
    fn special_tokens(&self) -> SpecialTokens {
        Vocab::special_tokens()
    }

    fn special_ids(&self) -> SpecialIds {
        self.vocab.special_ids()
    }

    fn tokenize(&self, text: &str) -> Vec<TokenId> {
        self.vocab.encode(text)
    }

    fn max_len(&self) -> usize {
        self.config.max_len
    }

    fn word_to_single_token(&self, word: &str) -> Result<TokenId, ScorerError> {
        self.vocab.single_token(word)
    }

    fn mask_logits(&self, enc: &Encoded, position: usize) -> Result<Vec<f32>, ScorerError> {
        self.check_position(enc, position)?;
        self.head_logits(enc, position, None)
            .and_then(|t| t.to_vec1::<f32>())
            .map_err(backend_err)
    }

    fn restricted_logits(
        &self,
        enc: &Encoded,
        position: usize,
        candidates: &[TokenId],
    ) -> Result<Vec<f32>, ScorerError> {
        self.check_position(enc, position)?;
        self.head_logits(enc, position, Some(candidates))
            .and_then(|t| t.to_vec1::<f32>())
            .map_err(backend_err)
    }
}

impl TrainableMlm for TinyMlm {
    fn train_step(&mut self, batch: &[TrainExample]) -> Result<f64, ScorerError> {
        if batch.is_empty() {
            return Ok(0.0);
        }
        let mut losses = Vec::with_capacity(batch.len());
        for ex in batch {
            self.check_position(&ex.encoded, ex.encoded.label_mask)?;
            let logits = self
                .head_logits(&ex.encoded, ex.encoded.label_mask, Some(&ex.label_tokens))
                .map_err(backend_err)?;
            let logp = candle_nn::ops::log_softmax(&logits, D::Minus1).map_err(backend_err)?;
            let nll = logp
                .narrow(0, ex.gold.index(), 1)
                .and_then(|t| t.neg())
                .map_err(backend_err)?;
            losses.push(nll);
        }
        let loss = Tensor::cat(&losses, 0)
            .and_then(|t| t.mean_all())
            .map_err(backend_err)?;
        let value = loss
            .to_dtype(DType::F64)
            .and_then(|t| t.to_scalar::<f64>())
            .map_err(backend_err)?;
        if !value.is_finite() {
            return Ok(value);
        }
        let opt = self.optimizer.as_mut().expect("optimizer initialised in new");
        opt.backward_step(&loss).map_err(backend_err)?;
        Ok(value)
    }
}
