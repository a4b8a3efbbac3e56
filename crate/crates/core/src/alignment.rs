//! Global visual pooling and the bidirectional image–report contrastive loss.

use priorscan_autodiff::{Graph, Var};

use crate::error::{contract, Result};

/// Default contrastive temperature.
pub const DEFAULT_TAU: f64 = 0.1;
/// Default weight of the contrastive term in the joint objective.
pub const DEFAULT_LAMBDA: f64 = 1.0;

/// Mean over the token rows of a study representation: `[S', F'] -> [1, F']`.
pub fn pool_visual(g: &mut Graph, study: Var) -> Result<Var> {
    Ok(g.mean_rows(study)?)
}

/// Symmetric InfoNCE over cosine similarities.
///
/// Row `r` of `visual` and of `text` describe the same study; every other
/// row in the batch is a negative. The result averages the image-to-report
/// and report-to-image cross-entropies, i.e. each of the `2 * N_B` terms is
/// weighted `1 / (2 * N_B)`.
pub fn contrastive_loss(g: &mut Graph, visual: Var, text: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0 && tau.is_finite()) {
        return contract(format!("temperature must be positive, got {tau}"));
    }
    let (vs, ts) = (g.value(visual).shape().to_vec(), g.value(text).shape().to_vec());
    if vs.len() != 2 || vs != ts {
        return contract(format!("alignment batch shapes {vs:?} vs {ts:?}"));
    }
    let n = vs[0];
    let v = g.l2_normalize_rows(visual)?;
    let t = g.l2_normalize_rows(text)?;
    let sim = g.matmul_nt(v, t)?;
    let logits = g.scale(sim, 1.0 / tau)?;
    let diag: Vec<usize> = (0..n).collect();
    let image_to_text = g.cross_entropy(logits, &diag, usize::MAX)?.loss;
    let logits_t = g.transpose(logits)?;
    let text_to_image = g.cross_entropy(logits_t, &diag, usize::MAX)?.loss;
    let both = g.add(image_to_text, text_to_image)?;
    Ok(g.scale(both, 0.5)?)
}

/// `ce + lambda * cont`.
pub fn joint_loss(g: &mut Graph, ce: Var, cont: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return contract(format!("lambda must be finite and non-negative, got {lambda}"));
    }
    let weighted = g.scale(cont, lambda)?;
    Ok(g.add(ce, weighted)?)
}
