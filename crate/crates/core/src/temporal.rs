//! Patient-level temporal aggregation.
//!
//! Each study's `S'` visual tokens get a date embedding indexed by days since
//! the patient's first study, all studies are concatenated into one sequence,
//! and a stack of blocks runs under the group causal mask: a token sees every
//! token of its own study and of all earlier studies, nothing later. The
//! output is split back into one `[S', F']` representation per study.

use std::fmt;

use log::warn;
use priorscan_autodiff::{AttentionMask, Graph, ParamStore, SeededRng, Var};

use crate::config::ModelConfig;
use crate::error::{contract, Error, Result};
use crate::nn::{init_normal, AttentionDims, Block};

/// Position of one study in a patient's history.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StudyMeta {
    pub patient_id: String,
    pub index: usize,
    /// Absolute study date in days.
    pub date: i64,
}

/// `dates[j] - dates[0]`; dates must be non-decreasing.
pub fn relative_dates(dates: &[i64]) -> Result<Vec<usize>> {
    let Some(&first) = dates.first() else {
        return contract("relative_dates needs at least one study");
    };
    if let Some(w) = dates.windows(2).find(|w| w[1] < w[0]) {
        return Err(Error::Ordering(format!("date {} follows {}", w[1], w[0])));
    }
    Ok(dates.iter().map(|&d| (d - first) as usize).collect())
}

/// Learnable `[max_offset + 1, F']` table indexed by relative date.
#[derive(Clone, Debug)]
pub struct TemporalEmbedding {
    max_offset: usize,
    d_model: usize,
}

pub const DATE_TABLE: &str = "temporal.date";

impl TemporalEmbedding {
    pub fn new(max_offset: usize, d_model: usize) -> Self {
        Self { max_offset, d_model }
    }

    pub fn max_offset(&self) -> usize {
        self.max_offset
    }

    pub fn init(&self, store: &mut ParamStore, std: f64, rng: &mut SeededRng) {
        init_normal(store, DATE_TABLE.to_string(), &[self.max_offset + 1, self.d_model], std, rng);
    }

    /// Offsets beyond the table saturate at its last row.
    pub fn row_for(&self, offset: usize) -> usize {
        offset.min(self.max_offset)
    }

    /// `V + table[offset]`, the row broadcast over every token.
    pub fn add(&self, g: &mut Graph, store: &ParamStore, visual: Var, offset: usize) -> Result<Var> {
        let table = g.param(store, DATE_TABLE)?;
        let row = g.gather_rows(table, &[self.row_for(offset)])?;
        Ok(g.add_row(visual, row)?)
    }
}

/// Concatenated study tokens of one patient.
#[derive(Clone, Debug)]
pub struct PatientSequence {
    pub tokens: Var,
    pub group_sizes: Vec<usize>,
    pub offsets: Vec<usize>,
    /// Studies dropped from the front by the `max_studies` cap.
    pub dropped: usize,
}

/// Row-concatenates studies in order, keeping only the most recent `max_studies`.
pub fn assemble_sequence(g: &mut Graph, studies: &[Var], offsets: &[usize], max_studies: usize) -> Result<PatientSequence> {
    if studies.is_empty() || studies.len() != offsets.len() {
        return contract(format!(
            "{} studies with {} offsets",
            studies.len(),
            offsets.len()
        ));
    }
    let dropped = studies.len().saturating_sub(max_studies);
    if dropped > 0 {
        warn!(
            "truncating patient sequence from {} to the {max_studies} most recent studies",
            studies.len()
        );
    }
    let kept = &studies[dropped..];
    let tokens_per_study = g.value(kept[0]).rows();
    if kept.iter().any(|&s| g.value(s).rows() != tokens_per_study) {
        return contract("all studies must have the same token count");
    }
    let tokens = if kept.len() == 1 { kept[0] } else { g.concat_rows(kept)? };
    Ok(PatientSequence {
        tokens,
        group_sizes: vec![tokens_per_study; kept.len()],
        offsets: offsets[dropped..].to_vec(),
        dropped,
    })
}

/// Attention permission `group(key) <= group(query)` over a grouped sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupCausalMask {
    mask: AttentionMask,
    group_of: Vec<usize>,
}

impl GroupCausalMask {
    pub fn mask(&self) -> &AttentionMask {
        &self.mask
    }

    /// Study index of each token.
    pub fn groups(&self) -> &[usize] {
        &self.group_of
    }

    pub fn len(&self) -> usize {
        self.group_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.group_of.is_empty()
    }
}

impl fmt::Display for GroupCausalMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.mask.fmt(f)
    }
}

pub fn build_group_causal_mask(group_sizes: &[usize]) -> Result<GroupCausalMask> {
    if group_sizes.is_empty() {
        return contract("group sizes must be non-empty");
    }
    if group_sizes.contains(&0) {
        return contract(format!("zero group size in {group_sizes:?}"));
    }
    let group_of: Vec<usize> = group_sizes
        .iter()
        .enumerate()
        .flat_map(|(gi, &n)| std::iter::repeat_n(gi, n))
        .collect();
    let n = group_of.len();
    // Tokens of group j may attend to the prefix ending at the last token of group j.
    let mut ends = Vec::with_capacity(group_sizes.len());
    let mut acc = 0;
    for &s in group_sizes {
        acc += s;
        ends.push(acc);
    }
    let mask = AttentionMask::from_fn(n, n, |r, c| c < ends[group_of[r]])?;
    Ok(GroupCausalMask { mask, group_of })
}

/// Date embedding plus `L` group causal blocks.
#[derive(Clone, Debug)]
pub struct TemporalTransformer {
    embedding: TemporalEmbedding,
    dated: bool,
    blocks: Vec<Block>,
    max_studies: usize,
}

impl TemporalTransformer {
    pub fn from_config(cfg: &ModelConfig, max_offset: usize) -> Result<Self> {
        let dims = AttentionDims::new(cfg.d_model, cfg.heads, cfg.attn_scale)?;
        Ok(Self {
            embedding: TemporalEmbedding::new(max_offset, cfg.d_model),
            dated: cfg.date_embedding,
            blocks: (0..cfg.temporal_layers)
                .map(|i| Block::new(format!("temporal.block{i}"), dims, false))
                .collect(),
            max_studies: cfg.max_studies,
        })
    }

    pub fn embedding(&self) -> &TemporalEmbedding {
        &self.embedding
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn max_studies(&self) -> usize {
        self.max_studies
    }

    pub fn init(&self, store: &mut ParamStore, std: f64, rng: &mut SeededRng) {
        if self.dated {
            self.embedding.init(store, std, rng);
        }
        for b in &self.blocks {
            b.init(store, std, rng);
        }
    }

    /// Adds date embeddings to each study and assembles the patient sequence.
    pub fn prepare(&self, g: &mut Graph, store: &ParamStore, visual: &[Var], dates: &[i64]) -> Result<PatientSequence> {
        let offsets = relative_dates(dates)?;
        if visual.len() != offsets.len() {
            return contract(format!("{} studies with {} dates", visual.len(), offsets.len()));
        }
        let start = visual.len().saturating_sub(self.max_studies);
        let mut embedded = Vec::with_capacity(visual.len() - start);
        for (&v, &o) in visual[start..].iter().zip(&offsets[start..]) {
            embedded.push(if self.dated { self.embedding.add(g, store, v, o)? } else { v });
        }
        let mut seq = assemble_sequence(g, &embedded, &offsets[start..], self.max_studies)?;
        seq.dropped = start;
        Ok(seq)
    }

    /// Runs every block under one shared mask and splits the result per study.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, seq: &PatientSequence) -> Result<Vec<Var>> {
        if self.blocks.is_empty() {
            return contract("temporal transformer needs at least one block");
        }
        let mask = build_group_causal_mask(&seq.group_sizes)?;
        let mut z = seq.tokens;
        for b in &self.blocks {
            z = b.forward(g, store, z, mask.mask(), None)?;
        }
        split_groups(g, z, &seq.group_sizes)
    }
}

pub(crate) fn split_groups(g: &mut Graph, z: Var, group_sizes: &[usize]) -> Result<Vec<Var>> {
    if group_sizes.len() == 1 {
        return Ok(vec![z]);
    }
    let mut out = Vec::with_capacity(group_sizes.len());
    let mut start = 0;
    for &n in group_sizes {
        out.push(g.slice_rows(z, start, start + n)?);
        start += n;
    }
    Ok(out)
}
