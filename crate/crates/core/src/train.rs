//! Curriculum training, evaluation and probe feature extraction.

use std::fmt::Write as _;

use log::info;
use priorscan_autodiff::{AdamW, AdamWConfig, Graph, ParamStore, SeededRng};

use crate::checkpoint::Checkpoint;
use crate::config::ModelConfig;
use crate::corpus::group_patients;
use crate::encoders::{tokenize_report, ImageGrid, Vocabulary, MAX_WORDS};
use crate::error::{config, Error, Result};
use crate::metrics::{bleu_n, ce_prf, comparative_accuracy, extract_ce_labels, progression_probe, words, NlgScores, ProbeConfig, ProbeResult};
use crate::model::{Model, Stage, Study};
use crate::synth::{CorpusRecord, FINDINGS};
use crate::temporal::relative_dates;

/// Settings read from a flat `key = value` file.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub seed: u64,
    /// Learning rate per stage.
    pub lr: [f64; 3],
    pub batch_single: usize,
    pub batch_temporal: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lambda: f64,
    pub tau: f64,
    pub weight_decay: f64,
    /// Parameter-name prefixes excluded from updates.
    pub freeze: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            seed: 0,
            lr: [5e-4, 5e-4, 2e-4],
            batch_single: 16,
            batch_temporal: 4,
            max_epochs: 100,
            patience: 10,
            lambda: crate::alignment::DEFAULT_LAMBDA,
            tau: crate::alignment::DEFAULT_TAU,
            weight_decay: 0.01,
            freeze: Vec::new(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("invalid value `{v}` for {key}")))
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return config(format!("line {}: expected `key = value`", i + 1));
            };
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "lr_stage1" => self.lr[0] = parse_num(key, v)?,
            "lr_stage2" => self.lr[1] = parse_num(key, v)?,
            "lr_stage3" => self.lr[2] = parse_num(key, v)?,
            "batch_single" => self.batch_single = parse_num(key, v)?,
            "batch_temporal" => self.batch_temporal = parse_num(key, v)?,
            "max_epochs" => self.max_epochs = parse_num(key, v)?,
            "patience" => self.patience = parse_num(key, v)?,
            "lambda" => self.lambda = parse_num(key, v)?,
            "tau" => self.tau = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "freeze" => self.freeze = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect(),
            "image_size" => m.image_size = parse_num(key, v)?,
            "channels" => m.channels = parse_num(key, v)?,
            "patch" => m.patch = parse_num(key, v)?,
            "enc_dim" => m.enc_dim = parse_num(key, v)?,
            "tokens" => m.tokens = parse_num(key, v)?,
            "d_model" => m.d_model = parse_num(key, v)?,
            "heads" => m.heads = parse_num(key, v)?,
            "temporal_layers" => m.temporal_layers = parse_num(key, v)?,
            "decoder_layers" => m.decoder_layers = parse_num(key, v)?,
            "text_layers" => m.text_layers = parse_num(key, v)?,
            "max_text_len" => m.max_text_len = parse_num(key, v)?,
            "max_studies" => m.max_studies = parse_num(key, v)?,
            "attn_scale" => m.attn_scale = v.parse()?,
            "init_std" => m.init_std = parse_num(key, v)?,
            "date_embedding" => m.date_embedding = parse_num(key, v)?,
            other => return config(format!("unknown config key `{other}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_single == 0 || self.batch_temporal == 0 {
            return config("batch sizes must be positive");
        }
        if self.patience == 0 || self.max_epochs == 0 {
            return config("patience and max_epochs must be positive");
        }
        if self.lr.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return config("learning rates must be positive");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return config("tau must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return config("lambda must be non-negative");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return config("weight_decay must be non-negative");
        }
        Ok(())
    }

    pub fn lr_for(&self, stage: Stage) -> f64 {
        self.lr[stage.number() as usize - 1]
    }
}

/// Patience counter over a metric where larger is better.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopState {
    pub best: f64,
    pub since_improvement: usize,
    pub patience: usize,
}

impl EarlyStopState {
    pub fn new(patience: usize) -> Self {
        assert!(patience >= 1, "patience must be at least 1");
        Self {
            best: f64::NEG_INFINITY,
            since_improvement: 0,
            patience,
        }
    }

    /// Records one validation value. Returns `(improved, stop)`.
    pub fn update(&mut self, metric: f64) -> (bool, bool) {
        if metric > self.best {
            self.best = metric;
            self.since_improvement = 0;
            (true, false)
        } else {
            self.since_improvement += 1;
            (false, self.since_improvement >= self.patience)
        }
    }
}

/// Tokenized records grouped by patient.
#[derive(Clone, Debug)]
pub struct PreparedSplit {
    pub records: Vec<CorpusRecord>,
    pub tokens: Vec<Vec<usize>>,
    /// Record index ranges, one per patient.
    pub patients: Vec<std::ops::Range<usize>>,
}

impl PreparedSplit {
    pub fn new(records: Vec<CorpusRecord>, vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        let tokens = records
            .iter()
            .map(|r| Ok(tokenize_report(&r.report, vocab, MAX_WORDS, max_len)?.unpadded().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let mut patients = Vec::new();
        let mut start = 0;
        for g in group_patients(&records)? {
            patients.push(start..start + g.len());
            start += g.len();
        }
        Ok(Self { records, tokens, patients })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn study(&self, i: usize) -> Study<'_> {
        Study {
            image: &self.records[i].image,
            date: self.records[i].date,
            tokens: &self.tokens[i],
        }
    }

    pub fn images(&self, range: std::ops::Range<usize>) -> (Vec<&ImageGrid>, Vec<i64>) {
        let rs = &self.records[range];
        (rs.iter().map(|r| &r.image).collect(), rs.iter().map(|r| r.date).collect())
    }

    /// Largest relative date over all patients.
    pub fn max_offset(&self) -> Result<usize> {
        let mut m = 0;
        for p in &self.patients {
            let dates: Vec<i64> = self.records[p.clone()].iter().map(|r| r.date).collect();
            m = m.max(*relative_dates(&dates)?.last().expect("non-empty patient"));
        }
        Ok(m)
    }
}

/// Losses and validation score of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub stage: Stage,
    pub epoch: u64,
    pub loss: f64,
    pub ce: f64,
    pub contrastive: f64,
    pub val_bleu4: f64,
    pub improved: bool,
}

pub struct StageOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochReport>,
}

/// Everything [`run_stage`] needs besides the data.
#[derive(Clone, Debug)]
pub struct StageConfig {
    pub stage: Stage,
    pub train: TrainConfig,
    pub from: Option<Checkpoint>,
    pub from_scratch: bool,
}

fn epoch_rng(seed: u64, stage: Stage, epoch: u64) -> SeededRng {
    SeededRng::stream(seed, stage.number() << 32 | epoch)
}

/// Builds model and parameters for `cfg.stage`, loading earlier stages from
/// the prerequisite checkpoint.
pub fn prepare_stage(cfg: &StageConfig, vocab: &Vocabulary, max_offset: usize) -> Result<(Model, ParamStore)> {
    let stage = cfg.stage;
    let mut init_rng = SeededRng::stream(cfg.train.seed, 0xC0FFEE + stage.number());
    let prerequisite = match (stage.previous(), &cfg.from) {
        (None, _) => None,
        (Some(_), _) if cfg.from_scratch => {
            info!("stage {stage}: --from-scratch, initializing all earlier stages fresh");
            None
        }
        (Some(prev), Some(ck)) if ck.stage == prev => Some(ck),
        (Some(prev), Some(ck)) => {
            return Err(Error::StageOrder(format!(
                "stage {stage} needs a stage-{prev} checkpoint, got stage {}",
                ck.stage
            )))
        }
        (Some(prev), None) => {
            return Err(Error::StageOrder(format!(
                "stage {stage} needs a stage-{prev} checkpoint (pass --from, or --from-scratch)"
            )))
        }
    };
    match prerequisite {
        Some(ck) => {
            check_vocab(ck, vocab)?;
            let mut arch = ck.model.clone();
            if stage.temporal() {
                // The temporal module is new in this stage, so its settings come from the run config.
                let t = &cfg.train.model;
                arch.temporal_layers = t.temporal_layers;
                arch.max_studies = t.max_studies;
                arch.date_embedding = t.date_embedding;
            }
            let model = Model::new(arch, vocab.len(), max_offset)?;
            let mut store = ck.params.clone();
            model.init_stage(&mut store, stage, &mut init_rng);
            Ok((model, store))
        }
        None => {
            let model = Model::new(cfg.train.model.clone(), vocab.len(), max_offset)?;
            let mut store = ParamStore::new();
            model.init_through(&mut store, stage, &mut init_rng);
            Ok((model, store))
        }
    }
}

pub fn check_vocab(ck: &Checkpoint, vocab: &Vocabulary) -> Result<()> {
    if ck.vocab_size != vocab.len() || ck.vocab_fingerprint != vocab.fingerprint() {
        return config(format!(
            "checkpoint vocabulary ({} words, fingerprint {:08x}) does not match the corpus ({} words, {:08x})",
            ck.vocab_size,
            ck.vocab_fingerprint,
            vocab.len(),
            vocab.fingerprint()
        ));
    }
    Ok(())
}

/// Mean per-report BLEU-4 of greedy generations.
pub fn validation_bleu4(model: &Model, store: &ParamStore, stage: Stage, split: &PreparedSplit, vocab: &Vocabulary) -> Result<f64> {
    let gens = generate_split(model, store, stage, split, vocab)?;
    if gens.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = gens
        .iter()
        .zip(&split.records)
        .map(|(g, r)| bleu_n(&words(g), &words(&r.report), 4))
        .sum();
    Ok(total / gens.len() as f64)
}

/// Trains one stage until early stopping or `max_epochs`, returning the
/// checkpoint of the best validation epoch.
pub fn run_stage(
    cfg: &StageConfig,
    train: &PreparedSplit,
    val: &PreparedSplit,
    vocab: &Vocabulary,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<StageOutcome> {
    cfg.train.validate()?;
    let stage = cfg.stage;
    let max_offset = train.max_offset()?;
    let (model, mut store) = prepare_stage(cfg, vocab, max_offset)?;
    for prefix in &cfg.train.freeze {
        store.freeze(prefix.clone());
    }
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.train.lr_for(stage),
        weight_decay: cfg.train.weight_decay,
        ..AdamWConfig::default()
    });
    let units: Vec<Vec<usize>> = if stage.temporal() {
        train.patients.iter().map(|r| r.clone().collect()).collect()
    } else {
        (0..train.len()).map(|i| vec![i]).collect()
    };
    let batch = if stage.temporal() { cfg.train.batch_temporal } else { cfg.train.batch_single };
    let mut stop = EarlyStopState::new(cfg.train.patience);
    let mut history = Vec::new();
    let mut best: Option<Checkpoint> = None;
    for epoch in 1..=cfg.train.max_epochs as u64 {
        let mut order: Vec<usize> = (0..units.len()).collect();
        epoch_rng(cfg.train.seed, stage, epoch).shuffle(&mut order);
        let (mut loss_sum, mut ce_sum, mut cont_sum, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(batch) {
            let groups: Vec<Vec<Study<'_>>> = chunk
                .iter()
                .map(|&u| units[u].iter().map(|&i| train.study(i)).collect())
                .collect();
            let mut g = Graph::new();
            let parts = model.batch_loss(&mut g, &store, stage, &groups, cfg.train.tau, cfg.train.lambda)?;
            let loss = g.value(parts.total).item();
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("stage {stage} epoch {epoch}: loss is {loss}")));
            }
            let grads = g.backward(parts.total)?;
            opt.step(&mut store, grads.params())?;
            loss_sum += loss;
            ce_sum += parts.ce;
            cont_sum += parts.contrastive;
            batches += 1;
        }
        let k = batches.max(1) as f64;
        let val_bleu4 = validation_bleu4(&model, &store, stage, val, vocab)?;
        let (improved, done) = stop.update(val_bleu4);
        let report = EpochReport {
            stage,
            epoch,
            loss: loss_sum / k,
            ce: ce_sum / k,
            contrastive: cont_sum / k,
            val_bleu4,
            improved,
        };
        info!(
            "stage {stage} epoch {epoch}: loss {:.6} ce {:.6} cont {:.6} val BLEU-4 {:.4}{}",
            report.loss,
            report.ce,
            report.contrastive,
            val_bleu4,
            if improved { " *" } else { "" }
        );
        on_epoch(&report);
        history.push(report);
        if improved {
            best = Some(Checkpoint {
                stage,
                epoch,
                best_bleu4: val_bleu4,
                seed: cfg.train.seed,
                model: model.cfg.clone(),
                vocab_size: vocab.len(),
                vocab_fingerprint: vocab.fingerprint(),
                max_offset,
                params: store.clone(),
                optimizer: opt.clone(),
            });
        }
        if done {
            info!("stage {stage}: early stop after epoch {epoch}");
            break;
        }
    }
    Ok(StageOutcome {
        checkpoint: best.expect("at least one epoch ran"),
        history,
    })
}

/// Rebuilds the model described by a checkpoint.
pub fn model_for(ck: &Checkpoint, vocab: &Vocabulary) -> Result<Model> {
    check_vocab(ck, vocab)?;
    Model::new(ck.model.clone(), ck.vocab_size, ck.max_offset)
}

/// Greedy report text for every record of the split, in record order.
pub fn generate_split(model: &Model, store: &ParamStore, stage: Stage, split: &PreparedSplit, vocab: &Vocabulary) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(split.len());
    for p in &split.patients {
        let (images, dates) = split.images(p.clone());
        for ids in model.generate(store, stage, &images, &dates)? {
            out.push(vocab.decode(&ids));
        }
    }
    Ok(out)
}

/// Metric name / value rows of one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub rows: Vec<(String, f64)>,
}

impl Evaluation {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.rows.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    /// Tab-separated table under a `# section` header.
    pub fn to_table(&self, section: &str) -> String {
        let mut s = format!("# {section}\n");
        for (name, v) in &self.rows {
            let _ = writeln!(s, "{name}\t{v:.6}");
        }
        s
    }
}

/// Scores candidate reports against the records' ground-truth reports.
pub fn score_reports(records: &[CorpusRecord], candidates: &[String]) -> Result<Evaluation> {
    if records.len() != candidates.len() {
        return Err(Error::Contract(format!("{} candidates for {} records", candidates.len(), records.len())));
    }
    let pairs: Vec<(&str, &str)> = candidates.iter().map(String::as_str).zip(records.iter().map(|r| r.report.as_str())).collect();
    let nlg = NlgScores::compute(&pairs);
    let pred: Vec<_> = records
        .iter()
        .zip(candidates)
        .map(|(r, c)| (r.study_id.clone(), extract_ce_labels(c)))
        .collect();
    let truth: Vec<_> = records
        .iter()
        .map(|r| (r.study_id.clone(), extract_ce_labels(&r.report)))
        .collect();
    let ce = ce_prf(&pred, &truth)?;
    let comp = comparative_accuracy(&pred, &truth)?;
    let mut rows: Vec<(String, f64)> = (0..4).map(|n| (format!("bleu{}", n + 1), nlg.bleu[n])).collect();
    rows.extend([
        ("meteor".to_string(), nlg.meteor),
        ("rouge_l".to_string(), nlg.rouge_l),
        ("ce_precision".to_string(), ce.precision),
        ("ce_recall".to_string(), ce.recall),
        ("ce_f1".to_string(), ce.f1),
        ("comparative_accuracy".to_string(), comp.accuracy),
        ("comparative_majority".to_string(), comp.majority_rate),
    ]);
    Ok(Evaluation { rows })
}

pub fn evaluate_checkpoint(ck: &Checkpoint, split: &PreparedSplit, vocab: &Vocabulary) -> Result<(Evaluation, Vec<String>)> {
    let model = model_for(ck, vocab)?;
    let gens = generate_split(&model, &ck.params, ck.stage, split, vocab)?;
    Ok((score_reports(&split.records, &gens)?, gens))
}

/// Frozen probe inputs: one row per consecutive study pair, with the
/// progression class of every finding.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProbeFeatures {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<[usize; 4]>,
}

/// Stage 3 uses `[pool(D_prev), pool(D_cur)]`; earlier stages see only the
/// current study, `pool(V_cur)`.
pub fn probe_features(model: &Model, store: &ParamStore, stage: Stage, split: &PreparedSplit) -> Result<ProbeFeatures> {
    let mut out = ProbeFeatures::default();
    for p in &split.patients {
        let (images, dates) = split.images(p.clone());
        let pooled = model.pooled(store, stage, &images, &dates)?;
        for j in 1..pooled.len() {
            let rec = &split.records[p.start + j];
            let y: Vec<usize> = rec
                .progression
                .iter()
                .map(|pr| pr.class().ok_or_else(|| Error::Format(format!("{} lacks a progression label", rec.study_id))))
                .collect::<Result<_>>()?;
            let x = if stage.temporal() {
                let mut x = pooled[j - 1].clone();
                x.extend_from_slice(&pooled[j]);
                x
            } else {
                pooled[j].clone()
            };
            out.x.push(x);
            out.y.push([y[0], y[1], y[2], y[3]]);
        }
    }
    Ok(out)
}

/// Linear progression probe per finding on frozen checkpoint features.
pub fn run_probe(ck: &Checkpoint, train: &PreparedSplit, test: &PreparedSplit, vocab: &Vocabulary) -> Result<Vec<ProbeResult>> {
    let model = model_for(ck, vocab)?;
    let tr = probe_features(&model, &ck.params, ck.stage, train)?;
    let te = probe_features(&model, &ck.params, ck.stage, test)?;
    (0..FINDINGS.len())
        .map(|f| {
            let ty: Vec<usize> = tr.y.iter().map(|y| y[f]).collect();
            let vy: Vec<usize> = te.y.iter().map(|y| y[f]).collect();
            let mut rng = SeededRng::stream(ck.seed, 0x9_0000 + f as u64);
            progression_probe(&tr.x, &ty, &te.x, &vy, ProbeConfig::default(), &mut rng)
        })
        .collect()
}
