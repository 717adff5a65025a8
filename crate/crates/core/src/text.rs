//! Instruction tokenization and the per-token language encoder.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use candle_core::{DType, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{shape_err, Error, Result};
use crate::nn::{masked_softmax, Init, LayerNorm, Linear, ParamPath};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Lowercases and splits on anything that is not alphanumeric.
pub fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Token-to-id map with `<pad>` = 0 and `<unk>` = 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::InvalidInput(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Sorted set of all words seen in `texts`, after the reserved tokens.
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<String> = texts.into_iter().flat_map(words).collect();
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(set);
        Self::from_tokens(tokens).expect("set has no duplicates")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < 2 || tokens[0] != PAD_TOKEN || tokens[1] != UNK_TOKEN {
            return Err(Error::format(path, "vocabulary must start with <pad> and <unk>"));
        }
        Self::from_tokens(tokens).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Fixed-length id sequence; ids at and beyond `valid_len` are `PAD_ID`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub valid_len: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid_len == 0
    }
}

/// Maps `text` to exactly `max_len` ids, truncating and padding as needed.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    let mut ids: Vec<u32> = words(text).iter().take(max_len).map(|w| vocab.id(w)).collect();
    let valid_len = ids.len();
    ids.resize(max_len, PAD_ID);
    TokenSequence { ids, valid_len }
}

/// Hyper-parameters of the instruction encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
}

/// Per-token features `(B, l, C)` plus the key mask `(B, l)` (1 = real token).
#[derive(Debug, Clone)]
pub struct LanguageFeatures {
    pub features: Tensor,
    pub mask: Tensor,
    pub valid_lengths: Vec<usize>,
}

impl LanguageFeatures {
    pub fn dim(&self) -> usize {
        self.features.dims()[2]
    }

    pub fn max_len(&self) -> usize {
        self.features.dims()[1]
    }
}

#[derive(Debug, Clone)]
struct SelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl SelfAttention {
    fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (b, l, c) = x.dims3()?;
        let h = self.heads;
        let d = c / h;
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((b, l, h, d))?.transpose(1, 2)?.contiguous()?.reshape((b * h, l, d))?)
        };
        let q = split(self.q.forward(x)?)?;
        let k = split(self.k.forward(x)?)?;
        let v = split(self.v.forward(x)?)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (d as f64).sqrt()))?;
        let key_mask = mask
            .unsqueeze(1)?
            .broadcast_as((b, h, l))?
            .contiguous()?
            .reshape((b * h, l))?;
        let attn = masked_softmax(&scores, &key_mask)?;
        let ctx = attn
            .matmul(&v)?
            .reshape((b, h, l, d))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, l, c))?;
        self.out.forward(&ctx)
    }
}

#[derive(Debug, Clone)]
struct Layer {
    norm1: LayerNorm,
    attn: SelfAttention,
    norm2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

/// Token + position embeddings followed by pre-norm transformer layers.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    token_embedding: Tensor,
    position_embedding: Tensor,
    layers: Vec<Layer>,
    final_norm: LayerNorm,
    config: TextEncoderConfig,
}

impl TextEncoder {
    pub fn new(p: &ParamPath<'_>, config: TextEncoderConfig) -> Result<Self> {
        let c = config.dim;
        if config.heads == 0 || c % config.heads != 0 {
            return Err(Error::Config(format!(
                "text dim {c} not divisible by {} heads",
                config.heads
            )));
        }
        let token_embedding = p.get((config.vocab_size, c), "token_embedding", Init::Normal { std: 0.5 })?;
        let position_embedding = p.get((config.max_len, c), "position_embedding", Init::Normal { std: 0.1 })?;
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let lp = p.pp(format!("layer{i}"));
            layers.push(Layer {
                norm1: LayerNorm::new(&lp.pp("norm1"), c)?,
                attn: SelfAttention {
                    q: Linear::new(&lp.pp("q"), c, c)?,
                    k: Linear::new(&lp.pp("k"), c, c)?,
                    v: Linear::new(&lp.pp("v"), c, c)?,
                    out: Linear::new(&lp.pp("out"), c, c)?,
                    heads: config.heads,
                },
                norm2: LayerNorm::new(&lp.pp("norm2"), c)?,
                ff1: Linear::new(&lp.pp("ff1"), c, 2 * c)?,
                ff2: Linear::new(&lp.pp("ff2"), 2 * c, c)?,
            });
        }
        Ok(Self {
            token_embedding,
            position_embedding,
            layers,
            final_norm: LayerNorm::new(&p.pp("final_norm"), c)?,
            config,
        })
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.config
    }

    /// Encodes a batch of token sequences. Features at padding positions are zero.
    pub fn encode(&self, batch: &[TokenSequence]) -> Result<LanguageFeatures> {
        let l = self.config.max_len;
        let v = self.config.vocab_size as u32;
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty token batch".into()));
        }
        let mut ids = Vec::with_capacity(batch.len() * l);
        let mut mask = Vec::with_capacity(batch.len() * l);
        for seq in batch {
            if seq.ids.len() != l || seq.valid_len > l {
                return Err(Error::Config(format!(
                    "token sequence of length {} (valid {}) for an encoder with l = {l}",
                    seq.ids.len(),
                    seq.valid_len
                )));
            }
            if let Some(bad) = seq.ids.iter().find(|&&i| i >= v) {
                return Err(Error::Config(format!("token id {bad} outside vocabulary of {v}")));
            }
            ids.extend_from_slice(&seq.ids);
            mask.extend((0..l).map(|i| if i < seq.valid_len { 1f32 } else { 0f32 }));
        }
        let b = batch.len();
        let device = self.token_embedding.device();
        let dtype = self.token_embedding.dtype();
        let ids = Tensor::from_vec(ids, b * l, device)?;
        let mask = Tensor::from_vec(mask, (b, l), device)?.to_dtype(dtype)?;

        let c = self.config.dim;
        let mut x = self
            .token_embedding
            .index_select(&ids, 0)?
            .reshape((b, l, c))?
            .broadcast_add(&self.position_embedding)?;
        for layer in &self.layers {
            let a = layer.attn.forward(&layer.norm1.forward(&x)?, &mask)?;
            x = (x + a)?;
            let h = layer.ff1.forward(&layer.norm2.forward(&x)?)?.relu()?;
            x = (&x + layer.ff2.forward(&h)?)?;
        }
        let x = self.final_norm.forward(&x)?;
        let features = x.broadcast_mul(&mask.unsqueeze(2)?)?;
        if features.dims() != [b, l, c] {
            return Err(shape_err!("text features {:?}", features.dims()));
        }
        Ok(LanguageFeatures {
            features,
            mask,
            valid_lengths: batch.iter().map(|s| s.valid_len).collect(),
        })
    }
}

/// Builds a standalone mask tensor for hand-made language features.
pub fn mask_from_lengths(lengths: &[usize], max_len: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let v: Vec<f32> = lengths
        .iter()
        .flat_map(|&n| (0..max_len).map(move |i| if i < n { 1.0 } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(v, (lengths.len(), max_len), device)?.to_dtype(dtype)?)
}
