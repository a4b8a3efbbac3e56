use std::collections::{BTreeMap, HashMap};

use crate::error::{contract, Result};
use crate::synth::{FINDINGS, MAX_SEVERITY};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Comparative {
    Improved,
    Unchanged,
    Worsened,
}

impl Comparative {
    pub fn parse(word: &str) -> Option<Self> {
        match word {
            "improved" => Some(Comparative::Improved),
            "unchanged" => Some(Comparative::Unchanged),
            "worsened" => Some(Comparative::Worsened),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FindingLabel {
    pub severity: u8,
    pub comparative: Option<Comparative>,
}

/// Labels read from one report; `None` for findings the report does not mention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CeLabels {
    pub findings: [Option<FindingLabel>; 4],
}

impl CeLabels {
    pub fn present(&self, finding: usize) -> bool {
        self.findings[finding].is_some_and(|l| l.severity > 0)
    }

    pub fn comparative(&self, finding: usize) -> Option<Comparative> {
        self.findings[finding].and_then(|l| l.comparative)
    }
}

/// Scans for `<finding> severity <k> [comparative]`; anything else is skipped.
/// The first mention of a finding wins.
pub fn extract_ce_labels(report: &str) -> CeLabels {
    let toks: Vec<String> = report.split_whitespace().map(str::to_lowercase).collect();
    let mut out = CeLabels::default();
    let mut i = 0;
    while i < toks.len() {
        let finding = FINDINGS.iter().position(|f| *f == toks[i]);
        let severity = toks
            .get(i + 2)
            .and_then(|s| s.parse::<u8>().ok())
            .filter(|&s| s <= MAX_SEVERITY);
        match (finding, toks.get(i + 1).map(String::as_str), severity) {
            (Some(f), Some("severity"), Some(k)) => {
                let comparative = toks.get(i + 3).and_then(|w| Comparative::parse(w));
                if out.findings[f].is_none() {
                    out.findings[f] = Some(FindingLabel { severity: k, comparative });
                }
                i += if comparative.is_some() { 4 } else { 3 };
            }
            _ => i += 1,
        }
    }
    out
}

/// Macro precision, recall and F1 over finding presence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn align<'a>(predicted: &'a [(String, CeLabels)], truth: &'a [(String, CeLabels)]) -> Result<Vec<(&'a CeLabels, &'a CeLabels)>> {
    let by_id: HashMap<&str, &CeLabels> = predicted.iter().map(|(id, l)| (id.as_str(), l)).collect();
    if by_id.len() != predicted.len() || predicted.len() != truth.len() {
        return contract("predicted and ground-truth record sets differ");
    }
    truth
        .iter()
        .map(|(id, t)| match by_id.get(id.as_str()) {
            Some(p) => Ok((*p, t)),
            None => contract(format!("no prediction for record {id}")),
        })
        .collect()
}

/// Findings with no positive in either predictions or ground truth are left
/// out of the macro average; if no finding has any, every score is 1.
pub fn ce_prf(predicted: &[(String, CeLabels)], truth: &[(String, CeLabels)]) -> Result<Prf> {
    let pairs = align(predicted, truth)?;
    let (mut p_sum, mut r_sum, mut f_sum, mut n) = (0.0, 0.0, 0.0, 0usize);
    for f in 0..FINDINGS.len() {
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for (p, t) in &pairs {
            match (p.present(f), t.present(f)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                (false, false) => {}
            }
        }
        if tp + fp + fneg == 0 {
            continue;
        }
        let prec = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        let rec = if tp + fneg > 0 { tp as f64 / (tp + fneg) as f64 } else { 0.0 };
        let f1 = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
        p_sum += prec;
        r_sum += rec;
        f_sum += f1;
        n += 1;
    }
    if n == 0 {
        return Ok(Prf { precision: 1.0, recall: 1.0, f1: 1.0 });
    }
    let k = n as f64;
    Ok(Prf {
        precision: p_sum / k,
        recall: r_sum / k,
        f1: f_sum / k,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparativeStats {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    /// Share of the most frequent ground-truth comparative word.
    pub majority_rate: f64,
}

/// Fraction of ground-truth comparative words whose finding carries the same
/// comparative word in the prediction.
pub fn comparative_accuracy(predicted: &[(String, CeLabels)], truth: &[(String, CeLabels)]) -> Result<ComparativeStats> {
    let pairs = align(predicted, truth)?;
    let (mut correct, mut total) = (0usize, 0usize);
    let mut freq: BTreeMap<Comparative, usize> = BTreeMap::new();
    for (p, t) in &pairs {
        for f in 0..FINDINGS.len() {
            if let Some(c) = t.comparative(f) {
                total += 1;
                *freq.entry(c).or_insert(0) += 1;
                if p.comparative(f) == Some(c) {
                    correct += 1;
                }
            }
        }
    }
    let ratio = |a: usize| if total == 0 { 0.0 } else { a as f64 / total as f64 };
    Ok(ComparativeStats {
        correct,
        total,
        accuracy: ratio(correct),
        majority_rate: ratio(freq.values().copied().max().unwrap_or(0)),
    })
}
