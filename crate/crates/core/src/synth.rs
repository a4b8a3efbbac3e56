//! Synthetic longitudinal corpus.
//!
//! Four findings each sit in one image quadrant with brightness proportional
//! to severity. Reports state the current severities plus, from the second
//! visit on, a comparative word per finding relative to the previous visit.
//! The image only shows the current state, so the comparative words cannot
//! be read off a single study.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use priorscan_autodiff::SeededRng;

use crate::encoders::{ImageGrid, Vocabulary};
use crate::error::{config, Error, Result};

pub const FINDINGS: [&str; 4] = ["effusion", "edema", "consolidation", "pneumothorax"];
pub const MAX_SEVERITY: u8 = 3;
pub const IMAGE_SIDE: usize = 16;

/// Severity in `0..=3` per finding, in [`FINDINGS`] order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FindingState(pub [u8; 4]);

impl FindingState {
    pub fn new(severities: [u8; 4]) -> Result<Self> {
        if severities.iter().any(|&s| s > MAX_SEVERITY) {
            return config(format!("severities {severities:?} outside 0..=3"));
        }
        Ok(Self(severities))
    }

    pub fn severity(&self, finding: usize) -> u8 {
        self.0[finding]
    }

    /// Every reachable state, in lexicographic order.
    pub fn all() -> impl Iterator<Item = FindingState> {
        (0..256u32).map(|i| FindingState([(i >> 6) as u8 & 3, (i >> 4) as u8 & 3, (i >> 2) as u8 & 3, i as u8 & 3]))
    }
}

/// Per-finding change relative to the previous visit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Progression {
    Improving,
    Stable,
    Worsening,
    /// First visit of a patient.
    None,
}

impl Progression {
    pub fn between(prev: u8, cur: u8) -> Self {
        match cur.cmp(&prev) {
            std::cmp::Ordering::Less => Progression::Improving,
            std::cmp::Ordering::Equal => Progression::Stable,
            std::cmp::Ordering::Greater => Progression::Worsening,
        }
    }

    /// Probe class index, `None` for first visits.
    pub fn class(self) -> Option<usize> {
        match self {
            Progression::Improving => Some(0),
            Progression::Stable => Some(1),
            Progression::Worsening => Some(2),
            Progression::None => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Progression::Improving => "improving",
            Progression::Stable => "stable",
            Progression::Worsening => "worsening",
            Progression::None => "none",
        }
    }
}

impl fmt::Display for Progression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Progression {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "improving" => Ok(Progression::Improving),
            "stable" => Ok(Progression::Stable),
            "worsening" => Ok(Progression::Worsening),
            "none" => Ok(Progression::None),
            other => Err(Error::Format(format!("unknown progression label `{other}`"))),
        }
    }
}

pub fn progressions(state: &FindingState, prev: Option<&FindingState>) -> [Progression; 4] {
    std::array::from_fn(|f| match prev {
        Some(p) => Progression::between(p.0[f], state.0[f]),
        None => Progression::None,
    })
}

/// Generator knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub min_visits: usize,
    pub max_visits: usize,
    pub min_gap: u64,
    pub max_gap: u64,
    pub p_improve: f64,
    pub worsen_base: f64,
    pub worsen_per_day: f64,
    pub worsen_cap: f64,
    pub noise_scale: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            min_visits: 3,
            max_visits: 5,
            min_gap: 10,
            max_gap: 400,
            p_improve: 0.15,
            worsen_base: 0.15,
            worsen_per_day: 0.001,
            worsen_cap: 0.6,
            noise_scale: 1.0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.min_visits == 0 || self.min_visits > self.max_visits || self.max_visits > 6 {
            return config(format!("visit range {}..={} must lie in 1..=6", self.min_visits, self.max_visits));
        }
        if self.min_gap == 0 || self.min_gap > self.max_gap {
            return config(format!("gap range {}..={} is invalid", self.min_gap, self.max_gap));
        }
        let probs = [self.p_improve, self.worsen_base, self.worsen_cap, self.worsen_per_day];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || self.p_improve + self.worsen_cap > 1.0 {
            return config("transition probabilities must lie in [0, 1] and p_improve + worsen_cap <= 1");
        }
        if !(0.0..=1.0).contains(&self.noise_scale) {
            return config("noise_scale must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn worsen_probability(&self, gap_days: u64) -> f64 {
        self.worsen_cap.min(self.worsen_base + self.worsen_per_day * gap_days as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Visit {
    pub date: i64,
    pub state: FindingState,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiseaseTrajectory {
    pub patient_id: String,
    pub visits: Vec<Visit>,
}

const FIRST_DATE: u64 = 730_000;
const FIRST_DATE_SPREAD: u64 = 3_650;

pub fn simulate_trajectory(rng: &mut SeededRng, patient_id: &str, params: &SynthParams) -> Result<DiseaseTrajectory> {
    params.validate()?;
    let n = rng.range_inclusive(params.min_visits as u64, params.max_visits as u64) as usize;
    let mut date = rng.range_inclusive(FIRST_DATE, FIRST_DATE + FIRST_DATE_SPREAD) as i64;
    let mut state = FindingState(std::array::from_fn(|_| rng.range_inclusive(0, MAX_SEVERITY as u64) as u8));
    let mut visits = vec![Visit { date, state }];
    for _ in 1..n {
        let gap = rng.range_inclusive(params.min_gap, params.max_gap);
        date += gap as i64;
        let p_worsen = params.worsen_probability(gap);
        for s in state.0.iter_mut() {
            let u = rng.uniform();
            if u < params.p_improve {
                *s = s.saturating_sub(1);
            } else if u < params.p_improve + p_worsen {
                *s = (*s + 1).min(MAX_SEVERITY);
            }
        }
        visits.push(Visit { date, state });
    }
    Ok(DiseaseTrajectory {
        patient_id: patient_id.to_string(),
        visits,
    })
}

/// Quadrant brightness `severity / 3 * 0.8` plus uniform noise in
/// `[0, 0.2 * noise_scale]`, rounded to 6 decimals.
pub fn render_image(state: &FindingState, noise_scale: f64, rng: &mut SeededRng) -> ImageGrid {
    let half = IMAGE_SIDE / 2;
    let mut pixels = Vec::with_capacity(IMAGE_SIDE * IMAGE_SIDE);
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            let quadrant = (y >= half) as usize * 2 + (x >= half) as usize;
            let base = state.0[quadrant] as f64 / MAX_SEVERITY as f64 * 0.8;
            let noise = if noise_scale > 0.0 { rng.uniform() * 0.2 * noise_scale } else { 0.0 };
            pixels.push(((base + noise) * 1e6).round() / 1e6);
        }
    }
    ImageGrid::square(IMAGE_SIDE, pixels).expect("pixels within [0, 1]")
}

pub fn comparative_word(prev: u8, cur: u8) -> &'static str {
    match Progression::between(prev, cur) {
        Progression::Improving => "improved",
        Progression::Worsening => "worsened",
        _ => "unchanged",
    }
}

pub fn render_report(state: &FindingState, prev: Option<&FindingState>) -> String {
    let mut words: Vec<String> = Vec::new();
    for (f, name) in FINDINGS.iter().enumerate() {
        let k = state.0[f];
        let p = prev.map(|p| p.0[f]);
        if k == 0 && p.unwrap_or(0) == 0 {
            continue;
        }
        words.push(format!("{name} severity {k}"));
        if let Some(p) = p {
            words.push(comparative_word(p, k).to_string());
        }
    }
    if words.is_empty() {
        "no acute findings .".to_string()
    } else {
        words.push(".".to_string());
        words.join(" ")
    }
}

/// Every word a rendered report can contain.
pub fn template_vocabulary() -> Vocabulary {
    let mut words = vec![".", "no", "acute", "findings", "severity", "0", "1", "2", "3"];
    words.extend(FINDINGS);
    words.extend(["worsened", "improved", "unchanged"]);
    Vocabulary::new(words)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusRecord {
    pub patient_id: String,
    pub study_id: String,
    pub date: i64,
    pub report: String,
    pub state: FindingState,
    pub progression: [Progression; 4],
    pub image: ImageGrid,
}

pub fn patient_id(index: usize) -> String {
    format!("P{index:05}")
}

/// Simulates `n_patients` trajectories, one derived random stream per patient.
pub fn generate_corpus(seed: u64, n_patients: usize, params: &SynthParams) -> Result<(Vec<CorpusRecord>, Vocabulary)> {
    if n_patients == 0 {
        return config("n_patients must be at least 1");
    }
    params.validate()?;
    let mut records = Vec::new();
    for i in 0..n_patients {
        let mut rng = SeededRng::stream(seed, i as u64);
        let pid = patient_id(i);
        let traj = simulate_trajectory(&mut rng, &pid, params)?;
        let mut prev: Option<FindingState> = None;
        for (j, v) in traj.visits.iter().enumerate() {
            records.push(CorpusRecord {
                patient_id: pid.clone(),
                study_id: format!("{pid}-S{j}"),
                date: v.date,
                report: render_report(&v.state, prev.as_ref()),
                state: v.state,
                progression: progressions(&v.state, prev.as_ref()),
                image: render_image(&v.state, params.noise_scale, &mut rng),
            });
            prev = Some(v.state);
        }
    }
    records.sort_by(|a, b| (&a.patient_id, a.date).cmp(&(&b.patient_id, b.date)));
    Ok((records, template_vocabulary()))
}

/// Train / validation / test fractions over patients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<CorpusRecord>,
    pub val: Vec<CorpusRecord>,
    pub test: Vec<CorpusRecord>,
}

pub fn split_by_patient(records: &[CorpusRecord], spec: SplitSpec, seed: u64) -> Result<Splits> {
    let f = [spec.train, spec.val, spec.test];
    if f.iter().any(|x| !(0.0..=1.0).contains(x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return config(format!("split fractions {f:?} must be in [0, 1] and sum to 1"));
    }
    let patients: BTreeSet<&str> = records.iter().map(|r| r.patient_id.as_str()).collect();
    let mut patients: Vec<&str> = patients.into_iter().collect();
    let n = patients.len();
    if n < 3 {
        return config(format!("{n} patients cannot fill three splits"));
    }
    SeededRng::new(seed).shuffle(&mut patients);
    let mut n_val = (spec.val * n as f64).round() as usize;
    let mut n_test = (spec.test * n as f64).round() as usize;
    if spec.val > 0.0 {
        n_val = n_val.max(1);
    }
    if spec.test > 0.0 {
        n_test = n_test.max(1);
    }
    if n_val + n_test >= n && spec.train > 0.0 {
        return config(format!("{n} patients cannot fill three splits"));
    }
    let n_train = n - n_val - n_test;
    let train: BTreeSet<&str> = patients[..n_train].iter().copied().collect();
    let val: BTreeSet<&str> = patients[n_train..n_train + n_val].iter().copied().collect();
    let mut out = Splits::default();
    for r in records {
        let p = r.patient_id.as_str();
        let bucket = if train.contains(p) {
            &mut out.train
        } else if val.contains(p) {
            &mut out.val
        } else {
            &mut out.test
        };
        bucket.push(r.clone());
    }
    Ok(out)
}
