use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use priorscan::checkpoint::Checkpoint;
use priorscan::corpus::{read_split, read_vocab, write_dataset};
use priorscan::model::Stage;
use priorscan::synth::{generate_corpus, split_by_patient, SplitSpec, SynthParams, FINDINGS};
use priorscan::temporal::build_group_causal_mask;
use priorscan::train::{evaluate_checkpoint, run_probe, run_stage, PreparedSplit, StageConfig, TrainConfig};
use priorscan::{Error, Result};

#[derive(Parser)]
#[command(name = "priorscan", version, about = "Longitudinal report generation on a synthetic chest X-ray corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus with patient-level splits.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        patients: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one curriculum stage.
    Train {
        #[arg(long)]
        stage: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint of the previous stage.
        #[arg(long)]
        from: Option<PathBuf>,
        /// Start stage 2 or 3 without a previous checkpoint.
        #[arg(long)]
        from_scratch: bool,
        /// Comma-separated parameter-name prefixes to keep fixed.
        #[arg(long)]
        freeze: Option<String>,
    },
    /// Write greedy reports for a split.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score greedy reports for a split.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Linear progression probe on frozen features (train split -> test split).
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the group causal mask for comma-separated group sizes.
    DumpMask {
        #[arg(long)]
        groups: String,
    },
}

fn load_split(data: &Path, split: &str, max_len: usize) -> Result<(PreparedSplit, priorscan::encoders::Vocabulary)> {
    let vocab = read_vocab(data)?;
    let records = read_split(data, split)?;
    Ok((PreparedSplit::new(records, &vocab, max_len)?, vocab))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { seed, patients, out } => {
            let (records, vocab) = generate_corpus(seed, patients, &SynthParams::default())?;
            let splits = split_by_patient(&records, SplitSpec::default(), seed)?;
            write_dataset(&out, &records, &splits, &vocab)?;
            println!(
                "{} records: {} train, {} val, {} test",
                records.len(),
                splits.train.len(),
                splits.val.len(),
                splits.test.len()
            );
        }
        Command::Train {
            stage,
            config,
            data,
            out,
            from,
            from_scratch,
            freeze,
        } => {
            let stage = Stage::from_number(stage)?;
            let mut train = match config {
                Some(p) => TrainConfig::parse(&fs::read_to_string(&p)?)?,
                None => TrainConfig::default(),
            };
            if let Some(f) = freeze {
                train.set("freeze", &f)?;
            }
            let from = from.map(|p| Checkpoint::load(&p)).transpose()?;
            let max_len = from.as_ref().map_or(train.model.max_text_len, |c| c.model.max_text_len);
            let (train_split, vocab) = load_split(&data, "train", max_len)?;
            let (val_split, _) = load_split(&data, "val", max_len)?;
            let cfg = StageConfig {
                stage,
                train,
                from,
                from_scratch,
            };
            println!("stage\tepoch\tloss\tce\tcontrastive\tval_bleu4");
            let outcome = run_stage(&cfg, &train_split, &val_split, &vocab, |r| {
                println!("{}\t{}\t{:e}\t{:e}\t{:e}\t{:.6}", r.stage, r.epoch, r.loss, r.ce, r.contrastive, r.val_bleu4);
                let _ = std::io::stdout().flush();
            })?;
            outcome.checkpoint.save(&out)?;
            info!(
                "saved stage {stage} checkpoint from epoch {} (val BLEU-4 {:.4}) to {}",
                outcome.checkpoint.epoch,
                outcome.checkpoint.best_bleu4,
                out.display()
            );
        }
        Command::Generate { ckpt, data, split, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let (prepared, vocab) = load_split(&data, &split, ck.model.max_text_len)?;
            let (_, gens) = evaluate_checkpoint(&ck, &prepared, &vocab)?;
            let mut text = String::new();
            for (r, g) in prepared.records.iter().zip(&gens) {
                text.push_str(&format!("{}\t{}\t{}\n", r.patient_id, r.study_id, g));
            }
            fs::write(&out, text)?;
        }
        Command::Evaluate { ckpt, data, split, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let (prepared, vocab) = load_split(&data, &split, ck.model.max_text_len)?;
            let (ev, _) = evaluate_checkpoint(&ck, &prepared, &vocab)?;
            let table = ev.to_table(&format!("stage {} {} split {split}", ck.stage, ckpt.display()));
            print!("{table}");
            fs::write(&out, table)?;
        }
        Command::Probe { ckpt, data, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let (train, vocab) = load_split(&data, "train", ck.model.max_text_len)?;
            let (test, _) = load_split(&data, "test", ck.model.max_text_len)?;
            let results = run_probe(&ck, &train, &test, &vocab)?;
            let mut table = format!("# probe stage {} {}\n", ck.stage, ckpt.display());
            for (name, r) in FINDINGS.iter().zip(&results) {
                table.push_str(&format!("{name}_macro_accuracy\t{:.6}\n", r.macro_accuracy));
            }
            let mean = results.iter().map(|r| r.macro_accuracy).sum::<f64>() / results.len() as f64;
            table.push_str(&format!("mean_macro_accuracy\t{mean:.6}\n"));
            print!("{table}");
            fs::write(&out, table)?;
        }
        Command::DumpMask { groups } => {
            let sizes = groups
                .split(',')
                .map(|s| s.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad group size `{s}`"))))
                .collect::<Result<Vec<_>>>()?;
            print!("{}", build_group_causal_mask(&sizes)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
