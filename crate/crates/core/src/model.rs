//! The full pipeline and the curriculum stages that switch parts of it on.

use std::fmt;

use priorscan_autodiff::{Graph, ParamStore, SeededRng, Tensor, Var};

use crate::alignment::{contrastive_loss, joint_loss, pool_visual};
use crate::config::ModelConfig;
use crate::decoder::{GenerationConfig, ReportDecoder};
use crate::encoders::{EncoderProjection, ImageBackbone, ImageGrid, PatchEncoder, TextBackbone, TextEncoder};
use crate::error::{config, contract, Result};
use crate::temporal::TemporalTransformer;

/// Curriculum stage.
///
/// 1. per-study report generation, visual tokens fed straight to the decoder
/// 2. adds the text encoder and the contrastive term
/// 3. adds the group causal temporal transformer over whole patients
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    One,
    Two,
    Three,
}

impl Stage {
    pub fn from_number(n: u64) -> Result<Self> {
        match n {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            3 => Ok(Stage::Three),
            _ => config(format!("stage must be 1, 2 or 3, got {n}")),
        }
    }

    pub fn number(self) -> u64 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
            Stage::Three => 3,
        }
    }

    pub fn temporal(self) -> bool {
        self == Stage::Three
    }

    pub fn aligned(self) -> bool {
        self != Stage::One
    }

    pub fn previous(self) -> Option<Stage> {
        match self {
            Stage::One => None,
            Stage::Two => Some(Stage::One),
            Stage::Three => Some(Stage::Two),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

/// One study as the model sees it.
#[derive(Clone, Copy, Debug)]
pub struct Study<'a> {
    pub image: &'a ImageGrid,
    pub date: i64,
    /// `BOS ... EOS` without padding.
    pub tokens: &'a [usize],
}

/// Loss value and its parts for one batch.
#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    pub total: Var,
    pub ce: f64,
    pub contrastive: f64,
    pub studies: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub vocab_size: usize,
    pub max_offset: usize,
    image: PatchEncoder,
    proj: EncoderProjection,
    text: TextEncoder,
    temporal: TemporalTransformer,
    decoder: ReportDecoder,
}

impl Model {
    pub fn new(cfg: ModelConfig, vocab_size: usize, max_offset: usize) -> Result<Self> {
        cfg.validate()?;
        if vocab_size < 5 {
            return config("vocabulary must hold the specials and at least one word");
        }
        Ok(Self {
            image: PatchEncoder::from_config(&cfg),
            proj: EncoderProjection::from_config(&cfg),
            text: TextEncoder::from_config(&cfg, vocab_size)?,
            temporal: TemporalTransformer::from_config(&cfg, max_offset)?,
            decoder: ReportDecoder::from_config(&cfg, vocab_size)?,
            cfg,
            vocab_size,
            max_offset,
        })
    }

    pub fn decoder(&self) -> &ReportDecoder {
        &self.decoder
    }

    pub fn temporal(&self) -> &TemporalTransformer {
        &self.temporal
    }

    pub fn projection(&self) -> &EncoderProjection {
        &self.proj
    }

    /// Initializes the parameters a stage introduces: encoder, projection and
    /// decoder at stage 1, the text encoder at 2, the temporal module at 3.
    pub fn init_stage(&self, store: &mut ParamStore, stage: Stage, rng: &mut SeededRng) {
        let std = self.cfg.init_std;
        match stage {
            Stage::One => {
                self.image.init(store, std, rng);
                self.proj.init(store, std, rng);
                self.decoder.init(store, std, rng);
            }
            Stage::Two => self.text.init(store, std, rng),
            Stage::Three => self.temporal.init(store, std, rng),
        }
    }

    /// Initializes every stage up to and including `stage`.
    pub fn init_through(&self, store: &mut ParamStore, stage: Stage, rng: &mut SeededRng) {
        for s in [Stage::One, Stage::Two, Stage::Three] {
            if s <= stage {
                self.init_stage(store, s, rng);
            }
        }
    }

    /// Projected visual tokens `V` of one image, `[S', F']`.
    pub fn visual(&self, g: &mut Graph, store: &ParamStore, image: &ImageGrid) -> Result<Var> {
        let p = self.image.encode(g, store, image)?;
        self.proj.forward(g, store, p)
    }

    /// Decoder memories `D_j` for a patient's studies in chronological order.
    ///
    /// Before stage 3 this is `V_j` unchanged. At stage 3, patients longer
    /// than `max_studies` are run as a sliding window of the most recent
    /// studies ending at each `j`.
    pub fn memories(&self, g: &mut Graph, store: &ParamStore, stage: Stage, images: &[&ImageGrid], dates: &[i64]) -> Result<Vec<Var>> {
        if images.is_empty() || images.len() != dates.len() {
            return contract(format!("{} images with {} dates", images.len(), dates.len()));
        }
        let visual = images
            .iter()
            .map(|im| self.visual(g, store, im))
            .collect::<Result<Vec<_>>>()?;
        if !stage.temporal() {
            return Ok(visual);
        }
        let n = visual.len();
        if n <= self.temporal.max_studies() {
            let seq = self.temporal.prepare(g, store, &visual, dates)?;
            return self.temporal.forward(g, store, &seq);
        }
        let mut out = Vec::with_capacity(n);
        for j in 0..n {
            let seq = self.temporal.prepare(g, store, &visual[..=j], &dates[..=j])?;
            let d = self.temporal.forward(g, store, &seq)?;
            out.push(*d.last().expect("non-empty window"));
        }
        Ok(out)
    }

    /// `L_CE` (mean over studies of each study's mean token loss), plus
    /// `lambda * L_cont` over all studies of the batch from stage 2 on.
    pub fn batch_loss(&self, g: &mut Graph, store: &ParamStore, stage: Stage, groups: &[Vec<Study<'_>>], tau: f64, lambda: f64) -> Result<BatchLoss> {
        let mut ce_terms = Vec::new();
        let mut pooled = Vec::new();
        let mut texts = Vec::new();
        for group in groups {
            let images: Vec<&ImageGrid> = group.iter().map(|s| s.image).collect();
            let dates: Vec<i64> = group.iter().map(|s| s.date).collect();
            let mems = self.memories(g, store, stage, &images, &dates)?;
            for (study, &mem) in group.iter().zip(&mems) {
                ce_terms.push(self.decoder.teacher_forced_loss(g, store, mem, study.tokens)?);
                if stage.aligned() {
                    pooled.push(pool_visual(g, mem)?);
                    texts.push(self.text.encode(g, store, study.tokens)?);
                }
            }
        }
        if ce_terms.is_empty() {
            return contract("empty batch");
        }
        let n = ce_terms.len();
        let stacked = if n == 1 { ce_terms[0] } else { g.concat_rows(&ce_terms)? };
        let summed = g.sum(stacked)?;
        let ce = g.scale(summed, 1.0 / n as f64)?;
        let ce_value = g.value(ce).item();
        if !stage.aligned() {
            return Ok(BatchLoss {
                total: ce,
                ce: ce_value,
                contrastive: 0.0,
                studies: n,
            });
        }
        let v = if n == 1 { pooled[0] } else { g.concat_rows(&pooled)? };
        let t = if n == 1 { texts[0] } else { g.concat_rows(&texts)? };
        let cont = contrastive_loss(g, v, t, tau)?;
        let contrastive = g.value(cont).item();
        Ok(BatchLoss {
            total: joint_loss(g, ce, cont, lambda)?,
            ce: ce_value,
            contrastive,
            studies: n,
        })
    }

    /// Greedy reports for every study of one patient.
    pub fn generate(&self, store: &ParamStore, stage: Stage, images: &[&ImageGrid], dates: &[i64]) -> Result<Vec<Vec<usize>>> {
        let mut g = Graph::no_grad();
        let mems = self.memories(&mut g, store, stage, images, dates)?;
        let gen = GenerationConfig::new(self.cfg.max_text_len)?;
        mems.iter()
            .map(|&m| {
                let memory: Tensor = g.value(m).clone();
                self.decoder.generate_greedy(store, &memory, gen)
            })
            .collect()
    }

    /// Mean-pooled memory of every study of one patient.
    pub fn pooled(&self, store: &ParamStore, stage: Stage, images: &[&ImageGrid], dates: &[i64]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::no_grad();
        let mems = self.memories(&mut g, store, stage, images, dates)?;
        mems.iter()
            .map(|&m| {
                let p = pool_visual(&mut g, m)?;
                Ok(g.value(p).data().to_vec())
            })
            .collect()
    }
}
