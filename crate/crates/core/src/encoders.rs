//! Image and report encoders.
//!
//! The image path turns a pixel grid into `S` backbone tokens of width `F`
//! with a trainable patch embedding, then [`EncoderProjection`] maps them to
//! `S'` tokens of width `F'`. The text path embeds a token sequence with a
//! small bidirectional transformer and mean-pools the non-PAD positions.

use std::collections::HashMap;

use priorscan_autodiff::{AttentionMask, Graph, ParamStore, SeededRng, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{config, contract, Error, Result};
use crate::nn::{init_const, init_normal, AttentionDims, Block};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Default cap on content words per report.
pub const MAX_WORDS: usize = 60;

/// Fixed word list; the line number of a word in the vocabulary file is its id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary with the four special tokens followed by `words`.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for w in words {
            let w = w.into();
            if !all.contains(&w) {
                all.push(w);
            }
        }
        let index = all.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words: all, index }
    }

    /// Parses the one-token-per-line file format.
    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < SPECIALS.len() || lines[..4] != SPECIALS {
            return Err(Error::Format(format!(
                "vocabulary must start with {}",
                SPECIALS.join(", ")
            )));
        }
        Ok(Self::new(lines[4..].iter().copied()))
    }

    pub fn to_file_string(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// 32-bit FNV-1a hash of the file representation.
    pub fn fingerprint(&self) -> u32 {
        let mut h: u32 = 0x811c_9dc5;
        for b in self.to_file_string().bytes() {
            h ^= b as u32;
            h = h.wrapping_mul(0x0100_0193);
        }
        h
    }

    /// Content words of `ids`, skipping BOS and stopping at EOS or PAD.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .skip_while(|&&i| i == BOS)
            .take_while(|&&i| i != EOS && i != PAD)
            .map(|&i| self.word(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// `BOS content... EOS PAD...`, always exactly `max_len` ids long.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextTokenSeq {
    ids: Vec<usize>,
}

impl TextTokenSeq {
    pub fn from_ids(ids: Vec<usize>) -> Result<Self> {
        let eos = ids.iter().position(|&i| i == EOS);
        let valid = ids.first() == Some(&BOS)
            && ids.iter().skip(1).all(|&i| i != BOS)
            && match eos {
                Some(e) => ids[e + 1..].iter().all(|&i| i == PAD) && !ids[..e].contains(&PAD),
                None => false,
            };
        if !valid {
            return contract("token sequence must be BOS ... EOS PAD*");
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// `BOS ... EOS` without trailing padding.
    pub fn unpadded(&self) -> &[usize] {
        let end = self.ids.iter().position(|&i| i == EOS).expect("validated") + 1;
        &self.ids[..end]
    }

    pub fn content(&self) -> &[usize] {
        let u = self.unpadded();
        &u[1..u.len() - 1]
    }
}

/// Lowercases, splits on whitespace, keeps at most `max_words` words (and at
/// most `max_len - 2`), maps unknown words to UNK and pads to `max_len`.
pub fn tokenize_report(text: &str, vocab: &Vocabulary, max_words: usize, max_len: usize) -> Result<TextTokenSeq> {
    if max_len < 2 {
        return config("max_len must leave room for BOS and EOS");
    }
    let lower = text.to_lowercase();
    let keep = max_words.min(max_len - 2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(BOS);
    ids.extend(lower.split_whitespace().take(keep).map(|w| vocab.id(w)));
    ids.push(EOS);
    ids.resize(max_len, PAD);
    TextTokenSeq::from_ids(ids)
}

/// Single study image, channel-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * channels || pixels.is_empty() {
            return contract(format!(
                "{}x{}x{} image needs {} pixels, got {}",
                channels,
                height,
                width,
                height * width * channels,
                pixels.len()
            ));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return contract(format!("pixel value {p} outside [0, 1]"));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn square(side: usize, pixels: Vec<f64>) -> Result<Self> {
        Self::new(side, side, 1, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn scaled(&self, factor: f64) -> Vec<f64> {
        self.pixels.iter().map(|p| p * factor).collect()
    }

    /// Non-overlapping `patch x patch` tiles in row-major tile order, each
    /// flattened channel by channel then row by row.
    pub fn patches(&self, patch: usize) -> Result<Tensor> {
        patchify(&self.pixels, self.height, self.width, self.channels, patch)
    }
}

fn patchify(pixels: &[f64], height: usize, width: usize, channels: usize, patch: usize) -> Result<Tensor> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return config(format!("patch {patch} does not divide {height}x{width}"));
    }
    let (ph, pw) = (height / patch, width / patch);
    let dim = patch * patch * channels;
    let mut out = Vec::with_capacity(ph * pw * dim);
    for ty in 0..ph {
        for tx in 0..pw {
            for c in 0..channels {
                for dy in 0..patch {
                    let row = c * height * width + (ty * patch + dy) * width + tx * patch;
                    out.extend_from_slice(&pixels[row..row + patch]);
                }
            }
        }
    }
    Ok(Tensor::matrix(ph * pw, dim, out)?)
}

/// Pluggable image feature extractor producing `[S, F]` tokens.
pub trait ImageBackbone {
    fn init(&self, store: &mut ParamStore, std: f64, rng: &mut SeededRng);
    fn encode(&self, g: &mut Graph, store: &ParamStore, image: &ImageGrid) -> Result<Var>;
}

/// Linear patch embedding: `patches * W + b`.
#[derive(Clone, Debug)]
pub struct PatchEncoder {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
}

impl PatchEncoder {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        Self {
            image_size: cfg.image_size,
            channels: cfg.channels,
            patch: cfg.patch,
            dim: cfg.enc_dim,
        }
    }
}

impl ImageBackbone for PatchEncoder {
    fn init(&self, store: &mut ParamStore, std: f64, rng: &mut SeededRng) {
        let input = self.patch * self.patch * self.channels;
        init_normal(store, "image.patch.w".into(), &[input, self.dim], std, rng);
        init_const(store, "image.patch.b".into(), &[self.dim], 0.0);
    }

    fn encode(&self, g: &mut Graph, store: &ParamStore, image: &ImageGrid) -> Result<Var> {
        if image.height != self.image_size || image.width != self.image_size || image.channels != self.channels {
            return contract(format!(
                "expected {}x{}x{} image, got {}x{}x{}",
                self.channels, self.image_size, self.image_size, image.channels, image.height, image.width
            ));
        }
        let patches = g.constant(image.patches(self.patch)?);
        let w = g.param(store, "image.patch.w")?;
        let b = g.param(store, "image.patch.b")?;
        let t = g.matmul(patches, w)?;
        Ok(g.add_row(t, b)?)
    }
}

/// The projection layer between backbone and model width.
///
/// A per-token channel map `F -> F'` (the 1x1 convolution) followed by a
/// learned linear combination over the token axis `S -> S'`.
#[derive(Clone, Debug)]
pub struct EncoderProjection {
    pub tokens_in: usize,
    pub tokens_out: usize,
    pub dim_in: usize,
    pub dim_out: usize,
}

impl EncoderProjection {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        Self {
            tokens_in: cfg.patches(),
            tokens_out: cfg.tokens,
            dim_in: cfg.enc_dim,
            dim_out: cfg.d_model,
        }
    }

    pub fn init(&self, store: &mut ParamStore, std: f64, rng: &mut SeededRng) {
        init_normal(store, "proj.channel.w".into(), &[self.dim_in, self.dim_out], std, rng);
        init_const(store, "proj.channel.b".into(), &[self.dim_out], 0.0);
        init_normal(store, "proj.token.w".into(), &[self.tokens_out, self.tokens_in], std, rng);
    }

    /// Overwrites the projection with identity maps (requires `S == S'`, `F == F'`).
    pub fn set_identity(&self, store: &mut ParamStore) -> Result<()> {
        if self.tokens_in != self.tokens_out || self.dim_in != self.dim_out {
            return config("identity projection needs matching shapes");
        }
        store.insert("proj.channel.w", identity(self.dim_in));
        store.insert("proj.channel.b", Tensor::zeros(&[self.dim_out]));
        store.insert("proj.token.w", identity(self.tokens_in));
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tokens: Var) -> Result<Var> {
        let shape = g.value(tokens).shape().to_vec();
        if shape != [self.tokens_in, self.dim_in] {
            return contract(format!(
                "projection expects [{}, {}], got {shape:?}",
                self.tokens_in, self.dim_in
            ));
        }
        let wc = g.param(store, "proj.channel.w")?;
        let bc = g.param(store, "proj.channel.b")?;
        let wt = g.param(store, "proj.token.w")?;
        let x = g.matmul(tokens, wc)?;
        let x = g.add_row(x, bc)?;
        Ok(g.matmul(wt, x)?)
    }
}

fn identity(n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        t.data_mut()[i * n + i] = 1.0;
    }
    t
}

/// Pluggable report encoder producing one `[1, F']` embedding.
pub trait TextBackbone {
    fn init(&self, store: &mut ParamStore, std: f64, rng: &mut SeededRng);
    fn encode(&self, g: &mut Graph, store: &ParamStore, tokens: &[usize]) -> Result<Var>;
}

/// Token + learned position embeddings, bidirectional blocks that ignore
/// PAD keys, and a mean over the non-PAD positions.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    vocab_size: usize,
    max_len: usize,
    d_model: usize,
    blocks: Vec<Block>,
}

impl TextEncoder {
    pub fn from_config(cfg: &ModelConfig, vocab_size: usize) -> Result<Self> {
        let dims = AttentionDims::new(cfg.d_model, cfg.heads, cfg.attn_scale)?;
        Ok(Self {
            vocab_size,
            max_len: cfg.max_text_len,
            d_model: cfg.d_model,
            blocks: (0..cfg.text_layers)
                .map(|i| Block::new(format!("text.block{i}"), dims, false))
                .collect(),
        })
    }
}

impl TextBackbone for TextEncoder {
    fn init(&self, store: &mut ParamStore, std: f64, rng: &mut SeededRng) {
        init_normal(store, "text.embed".into(), &[self.vocab_size, self.d_model], std, rng);
        init_normal(store, "text.pos".into(), &[self.max_len, self.d_model], std, rng);
        for b in &self.blocks {
            b.init(store, std, rng);
        }
    }

    fn encode(&self, g: &mut Graph, store: &ParamStore, tokens: &[usize]) -> Result<Var> {
        let n = tokens.len();
        if n > self.max_len {
            return contract(format!("{n} tokens exceed text length {}", self.max_len));
        }
        let keep: Vec<usize> = (0..n).filter(|&i| tokens[i] != PAD).collect();
        if keep.is_empty() {
            return contract("cannot encode an all-PAD sequence");
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return contract(format!("token id {bad} outside vocabulary"));
        }
        let embed = g.param(store, "text.embed")?;
        let pos = g.param(store, "text.pos")?;
        let x = g.gather_rows(embed, tokens)?;
        let positions: Vec<usize> = (0..n).collect();
        let p = g.gather_rows(pos, &positions)?;
        let mut x = g.add(x, p)?;
        let mask = AttentionMask::from_fn(n, n, |_, c| tokens[c] != PAD)?;
        for b in &self.blocks {
            x = b.forward(g, store, x, &mask, None)?;
        }
        let kept = if keep.len() == n { x } else { g.gather_rows(x, &keep)? };
        Ok(g.mean_rows(kept)?)
    }
}
