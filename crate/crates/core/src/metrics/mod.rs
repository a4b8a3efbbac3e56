//! Report-generation metrics, label-based clinical efficacy scores and the
//! linear progression probe.

mod ce;
mod nlg;
mod probe;

pub use ce::{ce_prf, comparative_accuracy, extract_ce_labels, CeLabels, Comparative, ComparativeStats, FindingLabel, Prf};
pub use nlg::{bleu_n, meteor_em, rouge_l, words, NlgScores, METEOR_ALPHA, METEOR_GAMMA, ROUGE_BETA};
pub use probe::{macro_accuracy, progression_probe, ProbeConfig, ProbeResult};
