//! Plain-loop reference implementations used as oracles.
#![allow(dead_code)]

use priorscan::nn::{AttentionDims, Block};
use priorscan::AttnScale;
use priorscan_autodiff::{Graph, ParamStore, SeededRng, Tensor, Var};

pub type Rows = Vec<Vec<f64>>;

pub fn random_rows(rng: &mut SeededRng, n: usize, d: usize) -> Rows {
    (0..n).map(|_| (0..d).map(|_| rng.normal(0.0, 1.0)).collect()).collect()
}

pub fn to_tensor(rows: &Rows) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

pub fn to_rows(t: &Tensor) -> Rows {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// A block with all parameters drawn from N(0, std), including LayerNorm gains.
pub fn random_block(prefix: &str, d: usize, heads: usize, cross: bool, std: f64, seed: u64) -> (Block, ParamStore) {
    let dims = AttentionDims::new(d, heads, AttnScale::SqrtDh).unwrap();
    let block = Block::new(prefix, dims, cross);
    let mut store = ParamStore::new();
    let mut rng = SeededRng::new(seed);
    block.init(&mut store, std, &mut rng);
    let names: Vec<String> = store.names().map(String::from).collect();
    for n in names {
        let t = store.get_mut(&n).unwrap();
        for x in t.data_mut() {
            *x = rng.normal(if n.ends_with(".g") { 1.0 } else { 0.0 }, std);
        }
    }
    (block, store)
}

fn p(store: &ParamStore, name: &str) -> Tensor {
    store.get(name).unwrap_or_else(|| panic!("missing {name}")).clone()
}

fn matmul(x: &Rows, w: &Tensor) -> Rows {
    let (k, n) = (w.rows(), w.cols());
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), k);
            (0..n).map(|j| (0..k).map(|i| row[i] * w.get(i, j)).sum()).collect()
        })
        .collect()
}

fn layer_norm(x: &Rows, g: &Tensor, b: &Tensor) -> Rows {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) * inv * g.data()[i] + b.data()[i])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn attention(store: &ParamStore, prefix: &str, q_in: &Rows, kv_in: &Rows, heads: usize, allow: &dyn Fn(usize, usize) -> bool) -> Rows {
    let q = matmul(q_in, &p(store, &format!("{prefix}.wq")));
    let k = matmul(kv_in, &p(store, &format!("{prefix}.wk")));
    let v = matmul(kv_in, &p(store, &format!("{prefix}.wv")));
    let d = q[0].len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut joined = vec![vec![0.0; d]; q.len()];
    for a in 0..heads {
        let cols = a * dh..(a + 1) * dh;
        for (i, qi) in q.iter().enumerate() {
            let logits: Vec<Option<f64>> = (0..k.len())
                .map(|j| allow(i, j).then(|| cols.clone().map(|c| qi[c] * k[j][c]).sum::<f64>() * scale))
                .collect();
            let max = logits.iter().flatten().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let exps: Vec<f64> = logits.iter().map(|l| l.map_or(0.0, |x| (x - max).exp())).collect();
            let z: f64 = exps.iter().sum();
            for c in cols.clone() {
                joined[i][c] = (0..k.len()).map(|j| exps[j] / z * v[j][c]).sum();
            }
        }
    }
    matmul(&joined, &p(store, &format!("{prefix}.wo")))
}

fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
}

/// Pre-LN self-attention + MLP block evaluated with explicit loops.
pub fn reference_block(store: &ParamStore, prefix: &str, x: &Rows, heads: usize, allow: &dyn Fn(usize, usize) -> bool) -> Rows {
    let h = layer_norm(x, &p(store, &format!("{prefix}.ln1.g")), &p(store, &format!("{prefix}.ln1.b")));
    let x = add(x, &attention(store, &format!("{prefix}.attn"), &h, &h, heads, allow));
    let h = layer_norm(&x, &p(store, &format!("{prefix}.ln2.g")), &p(store, &format!("{prefix}.ln2.b")));
    let b1 = p(store, &format!("{prefix}.mlp.b1"));
    let b2 = p(store, &format!("{prefix}.mlp.b2"));
    let hidden: Rows = matmul(&h, &p(store, &format!("{prefix}.mlp.w1")))
        .into_iter()
        .map(|r| r.iter().enumerate().map(|(i, v)| gelu(v + b1.data()[i])).collect())
        .collect();
    let out: Rows = matmul(&hidden, &p(store, &format!("{prefix}.mlp.w2")))
        .into_iter()
        .map(|r| r.iter().enumerate().map(|(i, v)| v + b2.data()[i]).collect())
        .collect();
    add(&x, &out)
}

pub fn max_abs_diff(a: &Rows, b: &Rows) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Parameter tensors of `store` in name order, for gradient checks.
pub fn param_list(store: &ParamStore) -> (Vec<String>, Vec<Tensor>) {
    store.iter().map(|(n, t)| (n.to_string(), t.clone())).unzip()
}

/// Makes `store` lookups inside `g` resolve to the checker's variables.
pub fn bind(g: &mut Graph, names: &[String], vars: &[Var]) {
    for (n, &v) in names.iter().zip(vars) {
        g.bind_param(n.clone(), v);
    }
}
