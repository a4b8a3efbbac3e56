//! Tab-separated corpus files.
//!
//! `DIR/corpus.tsv` holds every record, `train.tsv`, `val.tsv` and `test.tsv`
//! the patient-level splits, `vocab.txt` the vocabulary. One record per line:
//! patient id, study id, date, report, `severity:progression` labels, pixels.

use std::fs;
use std::path::Path;

use crate::encoders::{ImageGrid, Vocabulary};
use crate::error::{Error, Result};
use crate::synth::{CorpusRecord, FindingState, Progression, Splits, IMAGE_SIDE};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const CORPUS_FILE: &str = "corpus.tsv";

pub fn format_record(r: &CorpusRecord) -> String {
    let labels: Vec<String> = (0..4)
        .map(|f| format!("{}:{}", r.state.0[f], r.progression[f]))
        .collect();
    let pixels: Vec<String> = r.image.pixels().iter().map(|p| format!("{p:.6}")).collect();
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}",
        r.patient_id,
        r.study_id,
        r.date,
        r.report,
        labels.join(","),
        pixels.join(",")
    )
}

fn bad(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("line {line}: {msg}"))
}

pub fn parse_record(line: &str, line_no: usize) -> Result<CorpusRecord> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 6 {
        return Err(bad(line_no, format!("expected 6 fields, got {}", fields.len())));
    }
    let date: i64 = fields[2].parse().map_err(|e| bad(line_no, e))?;
    let labels: Vec<&str> = fields[4].split(',').collect();
    if labels.len() != 4 {
        return Err(bad(line_no, "expected 4 labels"));
    }
    let mut sev = [0u8; 4];
    let mut progression = [Progression::None; 4];
    for (f, l) in labels.iter().enumerate() {
        let (s, p) = l.split_once(':').ok_or_else(|| bad(line_no, format!("label `{l}`")))?;
        sev[f] = s.parse().map_err(|e| bad(line_no, e))?;
        progression[f] = p.parse()?;
    }
    let pixels = fields[5]
        .split(',')
        .map(|p| p.parse::<f64>().map_err(|e| bad(line_no, e)))
        .collect::<Result<Vec<_>>>()?;
    let image = ImageGrid::square(IMAGE_SIDE, pixels).map_err(|e| bad(line_no, e))?;
    Ok(CorpusRecord {
        patient_id: fields[0].to_string(),
        study_id: fields[1].to_string(),
        date,
        report: fields[3].to_string(),
        state: FindingState::new(sev).map_err(|e| bad(line_no, e))?,
        progression,
        image,
    })
}

pub fn format_records(records: &[CorpusRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&format_record(r));
        s.push('\n');
    }
    s
}

pub fn parse_records(text: &str) -> Result<Vec<CorpusRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| parse_record(l, i + 1))
        .collect()
}

pub fn write_dataset(dir: &Path, all: &[CorpusRecord], splits: &Splits, vocab: &Vocabulary) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CORPUS_FILE), format_records(all))?;
    fs::write(dir.join("train.tsv"), format_records(&splits.train))?;
    fs::write(dir.join("val.tsv"), format_records(&splits.val))?;
    fs::write(dir.join("test.tsv"), format_records(&splits.test))?;
    fs::write(dir.join(VOCAB_FILE), vocab.to_file_string())?;
    Ok(())
}

pub fn read_vocab(dir: &Path) -> Result<Vocabulary> {
    Vocabulary::parse(&fs::read_to_string(dir.join(VOCAB_FILE))?)
}

/// Reads `DIR/<split>.tsv` for `split` in `train`, `val`, `test`.
pub fn read_split(dir: &Path, split: &str) -> Result<Vec<CorpusRecord>> {
    if !matches!(split, "train" | "val" | "test") {
        return Err(Error::Config(format!("unknown split `{split}`")));
    }
    parse_records(&fs::read_to_string(dir.join(format!("{split}.tsv")))?)
}

/// Groups consecutive records by patient; dates must not decrease within a patient.
pub fn group_patients(records: &[CorpusRecord]) -> Result<Vec<&[CorpusRecord]>> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=records.len() {
        if i == records.len() || records[i].patient_id != records[start].patient_id {
            let group = &records[start..i];
            if let Some(w) = group.windows(2).find(|w| w[1].date < w[0].date) {
                return Err(Error::Ordering(format!(
                    "{} dated {} follows {} dated {}",
                    w[1].study_id, w[1].date, w[0].study_id, w[0].date
                )));
            }
            out.push(group);
            start = i;
        }
    }
    Ok(out)
}
