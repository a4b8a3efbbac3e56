use log::warn;
use priorscan_autodiff::{AdamW, AdamWConfig, Graph, ParamStore, SeededRng, Tensor};

use crate::error::{contract, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub classes: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-2,
            classes: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub macro_accuracy: f64,
    /// Test accuracy per class; `None` when the class was excluded.
    pub per_class: Vec<Option<f64>>,
}

/// Mean of per-class accuracies over classes that occur in `truth` and are
/// not listed in `excluded`.
pub fn macro_accuracy(predicted: &[usize], truth: &[usize], classes: usize, excluded: &[usize]) -> ProbeResult {
    let mut hit = vec![0usize; classes];
    let mut count = vec![0usize; classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        count[t] += 1;
        if p == t {
            hit[t] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..classes)
        .map(|c| (count[c] > 0 && !excluded.contains(&c)).then(|| hit[c] as f64 / count[c] as f64))
        .collect();
    let kept: Vec<f64> = per_class.iter().flatten().copied().collect();
    let macro_accuracy = if kept.is_empty() { 0.0 } else { kept.iter().sum::<f64>() / kept.len() as f64 };
    ProbeResult { macro_accuracy, per_class }
}

fn matrix(rows: &[Vec<f64>], mean: &[f64], std: &[f64]) -> Result<Tensor> {
    let d = mean.len();
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in rows {
        if r.len() != d {
            return contract("probe feature rows differ in width");
        }
        data.extend(r.iter().zip(mean).zip(std).map(|((x, m), s)| (x - m) / s));
    }
    Ok(Tensor::matrix(rows.len(), d, data)?)
}

/// Trains a linear softmax classifier on standardized frozen features with
/// full-batch AdamW and reports test macro-accuracy.
pub fn progression_probe(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
    cfg: ProbeConfig,
    rng: &mut SeededRng,
) -> Result<ProbeResult> {
    if train_x.is_empty() || train_x.len() != train_y.len() || test_x.len() != test_y.len() {
        return contract("probe needs matching, non-empty feature and label sets");
    }
    if let Some(&y) = train_y.iter().chain(test_y).find(|&&y| y >= cfg.classes) {
        return contract(format!("probe label {y} outside {} classes", cfg.classes));
    }
    let d = train_x[0].len();
    let n = train_x.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| train_x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..d)
        .map(|j| {
            let v = train_x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            v.sqrt().max(1e-8)
        })
        .collect();
    let x_train = matrix(train_x, &mean, &std)?;

    let excluded: Vec<usize> = (0..cfg.classes).filter(|c| !train_y.contains(c)).collect();
    for c in &excluded {
        warn!("probe class {c} absent from the training split; excluded from macro-accuracy");
    }

    let mut store = ParamStore::new();
    let w = (0..d * cfg.classes).map(|_| rng.normal(0.0, 0.01)).collect();
    store.insert("probe.w", Tensor::matrix(d, cfg.classes, w)?);
    store.insert("probe.b", Tensor::zeros(&[cfg.classes]));
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        ..AdamWConfig::default()
    });
    for _ in 0..cfg.epochs {
        let mut g = Graph::new();
        let x = g.constant(x_train.clone());
        let wv = g.param(&store, "probe.w")?;
        let bv = g.param(&store, "probe.b")?;
        let h = g.matmul(x, wv)?;
        let logits = g.add_row(h, bv)?;
        let loss = g.cross_entropy(logits, train_y, usize::MAX)?.loss;
        let grads = g.backward(loss)?;
        opt.step(&mut store, grads.params())?;
    }

    if test_x.is_empty() {
        return Ok(macro_accuracy(&[], &[], cfg.classes, &excluded));
    }
    let mut g = Graph::no_grad();
    let x = g.constant(matrix(test_x, &mean, &std)?);
    let wv = g.param(&store, "probe.w")?;
    let bv = g.param(&store, "probe.b")?;
    let h = g.matmul(x, wv)?;
    let logits = g.add_row(h, bv)?;
    let lv = g.value(logits);
    let predicted: Vec<usize> = (0..lv.rows())
        .map(|r| priorscan_autodiff::kernels::argmax(lv.row(r)))
        .collect();
    Ok(macro_accuracy(&predicted, test_y, cfg.classes, &excluded))
}
