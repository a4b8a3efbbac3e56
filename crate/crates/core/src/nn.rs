//! Parameter initialization and the pre-LayerNorm transformer block shared by
//! the temporal transformer, the text encoder and the report decoder.

use priorscan_autodiff::{AttentionMask, Graph, ParamStore, SeededRng, Tensor, Var};

use crate::config::AttnScale;
use crate::error::{config, Result};

pub(crate) fn init_normal(store: &mut ParamStore, name: String, shape: &[usize], std: f64, rng: &mut SeededRng) {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.normal(0.0, std)).collect();
    store.insert(name, Tensor::new(shape.to_vec(), data).expect("positive shape"));
}

pub(crate) fn init_const(store: &mut ParamStore, name: String, shape: &[usize], value: f64) {
    store.insert(name, Tensor::filled(shape, value));
}

pub(crate) fn layer_norm(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let gamma = g.param(store, &format!("{prefix}.g"))?;
    let beta = g.param(store, &format!("{prefix}.b"))?;
    Ok(g.layer_norm(x, gamma, beta)?)
}

fn init_layer_norm(store: &mut ParamStore, prefix: &str, d: usize) {
    init_const(store, format!("{prefix}.g"), &[d], 1.0);
    init_const(store, format!("{prefix}.b"), &[d], 0.0);
}

/// Width, head count and logit scaling of one attention layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionDims {
    pub d_model: usize,
    pub heads: usize,
    pub scale: AttnScale,
}

impl AttentionDims {
    pub fn new(d_model: usize, heads: usize, scale: AttnScale) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return config(format!("{heads} heads do not divide width {d_model}"));
        }
        Ok(Self { d_model, heads, scale })
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Multi-head attention with projections `{prefix}.wq/.wk/.wv/.wo`.
///
/// Head `a` uses columns `a*d_head..(a+1)*d_head` of the query, key and
/// value projections. Returns the output and the per-head attention weights.
pub(crate) fn multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    queries: Var,
    keys: Var,
    mask: &AttentionMask,
    dims: AttentionDims,
) -> Result<(Var, Vec<Var>)> {
    let wq = g.param(store, &format!("{prefix}.wq"))?;
    let wk = g.param(store, &format!("{prefix}.wk"))?;
    let wv = g.param(store, &format!("{prefix}.wv"))?;
    let wo = g.param(store, &format!("{prefix}.wo"))?;
    let q = g.matmul(queries, wq)?;
    let k = g.matmul(keys, wk)?;
    let v = g.matmul(keys, wv)?;
    let dh = dims.d_head();
    let scale = dims.scale.factor(dh);
    let mut heads = Vec::with_capacity(dims.heads);
    let mut weights = Vec::with_capacity(dims.heads);
    for a in 0..dims.heads {
        let (lo, hi) = (a * dh, (a + 1) * dh);
        let (qa, ka, va) = if dims.heads == 1 {
            (q, k, v)
        } else {
            (g.slice_cols(q, lo, hi)?, g.slice_cols(k, lo, hi)?, g.slice_cols(v, lo, hi)?)
        };
        let logits = g.matmul_nt(qa, ka)?;
        let alpha = g.masked_softmax(logits, mask, scale)?;
        heads.push(g.matmul(alpha, va)?);
        weights.push(alpha);
    }
    let joined = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    Ok((g.matmul(joined, wo)?, weights))
}

fn init_attention(store: &mut ParamStore, prefix: &str, d: usize, std: f64, rng: &mut SeededRng) {
    for w in ["wq", "wk", "wv", "wo"] {
        init_normal(store, format!("{prefix}.{w}"), &[d, d], std, rng);
    }
}

/// Pre-LN transformer block: self-attention, optional cross-attention over a
/// memory sequence, then a GELU MLP of width `4 * d_model`, each with a residual.
#[derive(Clone, Debug)]
pub struct Block {
    prefix: String,
    dims: AttentionDims,
    cross: bool,
}

/// Attention weights captured during [`Block::forward_traced`].
#[derive(Debug, Default)]
pub struct BlockTrace {
    pub self_attention: Vec<Var>,
    pub cross_attention: Vec<Var>,
}

impl Block {
    pub fn new(prefix: impl Into<String>, dims: AttentionDims, cross: bool) -> Self {
        Self {
            prefix: prefix.into(),
            dims,
            cross,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn init(&self, store: &mut ParamStore, std: f64, rng: &mut SeededRng) {
        let d = self.dims.d_model;
        let p = &self.prefix;
        init_layer_norm(store, &format!("{p}.ln1"), d);
        init_attention(store, &format!("{p}.attn"), d, std, rng);
        if self.cross {
            init_layer_norm(store, &format!("{p}.ln_cross"), d);
            init_layer_norm(store, &format!("{p}.ln_mem"), d);
            init_attention(store, &format!("{p}.cross"), d, std, rng);
        }
        init_layer_norm(store, &format!("{p}.ln2"), d);
        init_normal(store, format!("{p}.mlp.w1"), &[d, 4 * d], std, rng);
        init_const(store, format!("{p}.mlp.b1"), &[4 * d], 0.0);
        init_normal(store, format!("{p}.mlp.w2"), &[4 * d, d], std, rng);
        init_const(store, format!("{p}.mlp.b2"), &[d], 0.0);
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mask: &AttentionMask,
        memory: Option<Var>,
    ) -> Result<Var> {
        Ok(self.forward_traced(g, store, x, mask, memory)?.0)
    }

    pub fn forward_traced(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mask: &AttentionMask,
        memory: Option<Var>,
    ) -> Result<(Var, BlockTrace)> {
        let p = &self.prefix;
        let mut trace = BlockTrace::default();

        let h = layer_norm(g, store, &format!("{p}.ln1"), x)?;
        let (attn, w) = multi_head_attention(g, store, &format!("{p}.attn"), h, h, mask, self.dims)?;
        trace.self_attention = w;
        let mut x = g.add(x, attn)?;

        match (self.cross, memory) {
            (true, Some(mem)) => {
                let h = layer_norm(g, store, &format!("{p}.ln_cross"), x)?;
                let m = layer_norm(g, store, &format!("{p}.ln_mem"), mem)?;
                let rows = g.value(h).rows();
                let cols = g.value(m).rows();
                let full = AttentionMask::full(rows, cols);
                let (c, w) = multi_head_attention(g, store, &format!("{p}.cross"), h, m, &full, self.dims)?;
                trace.cross_attention = w;
                x = g.add(x, c)?;
            }
            (false, None) => {}
            (true, None) => return config(format!("block {p} needs a memory sequence")),
            (false, Some(_)) => return config(format!("block {p} has no cross-attention")),
        }

        let h = layer_norm(g, store, &format!("{p}.ln2"), x)?;
        let w1 = g.param(store, &format!("{p}.mlp.w1"))?;
        let b1 = g.param(store, &format!("{p}.mlp.b1"))?;
        let w2 = g.param(store, &format!("{p}.mlp.w2"))?;
        let b2 = g.param(store, &format!("{p}.mlp.b2"))?;
        let hidden = g.matmul(h, w1)?;
        let hidden = g.add_row(hidden, b1)?;
        let hidden = g.gelu(hidden)?;
        let out = g.matmul(hidden, w2)?;
        let out = g.add_row(out, b2)?;
        Ok((g.add(x, out)?, trace))
    }
}
