//! Autoregressive report decoder with cross-attention over one study's
//! visual representation.

use priorscan_autodiff::kernels::argmax;
use priorscan_autodiff::{AttentionMask, Graph, ParamStore, SeededRng, Tensor, Var};

use crate::config::ModelConfig;
use crate::encoders::{BOS, EOS, PAD};
use crate::error::{config, contract, Result};
use crate::nn::{init_const, init_normal, layer_norm, AttentionDims, Block};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenerationConfig {
    /// Longest output, BOS included.
    pub max_len: usize,
}

impl GenerationConfig {
    pub fn new(max_len: usize) -> Result<Self> {
        if max_len < 2 {
            return config("generation max_len must be at least 2");
        }
        Ok(Self { max_len })
    }
}

#[derive(Clone, Debug)]
pub struct ReportDecoder {
    vocab_size: usize,
    max_len: usize,
    d_model: usize,
    blocks: Vec<Block>,
}

impl ReportDecoder {
    pub fn from_config(cfg: &ModelConfig, vocab_size: usize) -> Result<Self> {
        let dims = AttentionDims::new(cfg.d_model, cfg.heads, cfg.attn_scale)?;
        Ok(Self {
            vocab_size,
            max_len: cfg.max_text_len,
            d_model: cfg.d_model,
            blocks: (0..cfg.decoder_layers)
                .map(|i| Block::new(format!("decoder.block{i}"), dims, true))
                .collect(),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn init(&self, store: &mut ParamStore, std: f64, rng: &mut SeededRng) {
        let (v, d) = (self.vocab_size, self.d_model);
        init_normal(store, "decoder.embed".into(), &[v, d], std, rng);
        init_normal(store, "decoder.pos".into(), &[self.max_len, d], std, rng);
        for b in &self.blocks {
            b.init(store, std, rng);
        }
        init_const(store, "decoder.ln_f.g".into(), &[d], 1.0);
        init_const(store, "decoder.ln_f.b".into(), &[d], 0.0);
        init_normal(store, "decoder.head.w".into(), &[d, v], std, rng);
        init_const(store, "decoder.head.b".into(), &[v], 0.0);
    }

    /// Next-token logits `[n, vocab]` for every prefix of `inputs`.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, memory: Var, inputs: &[usize]) -> Result<Var> {
        let n = inputs.len();
        if n == 0 {
            return contract("decoder needs at least one input token");
        }
        if n > self.max_len {
            return contract(format!("{n} decoder positions exceed position table of {}", self.max_len));
        }
        if let Some(&bad) = inputs.iter().find(|&&t| t >= self.vocab_size) {
            return contract(format!("token id {bad} outside vocabulary"));
        }
        let embed = g.param(store, "decoder.embed")?;
        let pos = g.param(store, "decoder.pos")?;
        let x = g.gather_rows(embed, inputs)?;
        let positions: Vec<usize> = (0..n).collect();
        let p = g.gather_rows(pos, &positions)?;
        let mut x = g.add(x, p)?;
        let causal = AttentionMask::causal(n);
        for b in &self.blocks {
            x = b.forward(g, store, x, &causal, Some(memory))?;
        }
        let x = layer_norm(g, store, "decoder.ln_f", x)?;
        let w = g.param(store, "decoder.head.w")?;
        let bias = g.param(store, "decoder.head.b")?;
        let logits = g.matmul(x, w)?;
        Ok(g.add_row(logits, bias)?)
    }

    /// Mean next-token cross-entropy with inputs `report[..n-1]` and targets
    /// `report[1..]`; PAD targets are ignored.
    pub fn teacher_forced_loss(&self, g: &mut Graph, store: &ParamStore, memory: Var, report: &[usize]) -> Result<Var> {
        if report.first() != Some(&BOS) || !report.contains(&EOS) {
            return contract("report must start with BOS and contain EOS");
        }
        let n = report.len();
        let logits = self.logits(g, store, memory, &report[..n - 1])?;
        Ok(g.cross_entropy(logits, &report[1..], PAD)?.loss)
    }

    /// Greedy decoding from BOS; stops after EOS or at `max_len` tokens.
    /// Ties resolve to the lowest token id.
    pub fn generate_greedy(&self, store: &ParamStore, memory: &Tensor, cfg: GenerationConfig) -> Result<Vec<usize>> {
        let limit = cfg.max_len.min(self.max_len + 1);
        let mut ids = vec![BOS];
        while ids.len() < limit {
            let mut g = Graph::no_grad();
            let mem = g.constant(memory.clone());
            let logits = self.logits(&mut g, store, mem, &ids)?;
            let lv = g.value(logits);
            let next = argmax(lv.row(lv.rows() - 1));
            ids.push(next);
            if next == EOS {
                break;
            }
        }
        Ok(ids)
    }
}
