//! Acceptance criteria 1-10. Runs without the libtest harness so each
//! criterion prints exactly one PASS/FAIL line in order, with its runtime.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use priorscan::alignment::{contrastive_loss, joint_loss};
use priorscan::checkpoint::Checkpoint;
use priorscan::decoder::ReportDecoder;
use priorscan::encoders::{Vocabulary, BOS, EOS};
use priorscan::metrics::{bleu_n, extract_ce_labels, rouge_l, words, Comparative};
use priorscan::model::{Model, Stage, Study};
use priorscan::synth::*;
use priorscan::temporal::{build_group_causal_mask, TemporalTransformer};
use priorscan::train::*;
use priorscan::{Error, ModelConfig};
use priorscan_autodiff::{finite_diff_check, AttentionMask, AutodiffError, Graph, ParamStore, SeededRng, Tensor};
use support::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn ad(e: Error) -> AutodiffError {
    AutodiffError::Contract(e.to_string())
}

fn criterion_1() -> Outcome {
    let mut rng = SeededRng::new(1);
    let mut mismatches = 0;
    for _ in 0..200 {
        let n = rng.range_inclusive(1, 6) as usize;
        let sizes: Vec<usize> = (0..n).map(|_| rng.range_inclusive(1, 8) as usize).collect();
        let group: Vec<usize> = sizes.iter().enumerate().flat_map(|(g, &s)| vec![g; s]).collect();
        let m = build_group_causal_mask(&sizes).unwrap();
        for (p, &gp) in group.iter().enumerate() {
            for (q, &gq) in group.iter().enumerate() {
                if m.mask().allows(p, q) != (gq <= gp) {
                    mismatches += 1;
                }
            }
        }
    }
    outcome(mismatches == 0, format!("{mismatches} mismatched entries over 200 group vectors"))
}

fn criterion_2() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let (block, store) = random_block("b", 8, 2, false, 0.3, 10 + seed);
        let n = 2 + seed as usize % 5;
        let x = random_rows(&mut SeededRng::new(100 + seed), n, 8);
        let mut g = Graph::no_grad();
        let xv = g.constant(to_tensor(&x));

        let unit = build_group_causal_mask(&vec![1; n]).unwrap();
        let grouped = block.forward(&mut g, &store, xv, unit.mask(), None).unwrap();
        let causal = AttentionMask::from_fn(n, n, |r, c| c <= r).unwrap();
        let token_causal = block.forward(&mut g, &store, xv, &causal, None).unwrap();
        let reference = reference_block(&store, "b", &x, 2, &|r, c| c <= r);
        worst = worst
            .max(g.value(grouped).max_abs_diff(g.value(token_causal)))
            .max(max_abs_diff(&to_rows(g.value(grouped)), &reference));

        let single = build_group_causal_mask(&[n]).unwrap();
        let grouped = block.forward(&mut g, &store, xv, single.mask(), None).unwrap();
        let full = block.forward(&mut g, &store, xv, &AttentionMask::full(n, n), None).unwrap();
        let reference = reference_block(&store, "b", &x, 2, &|_, _| true);
        worst = worst
            .max(g.value(grouped).max_abs_diff(g.value(full)))
            .max(max_abs_diff(&to_rows(g.value(grouped)), &reference));
    }
    outcome(worst < 1e-9, format!("max abs diff {worst:.3e}"))
}

fn run_temporal(t: &TemporalTransformer, store: &ParamStore, studies: &[Tensor], dates: &[i64]) -> Vec<Tensor> {
    let mut g = Graph::no_grad();
    let vs: Vec<_> = studies.iter().map(|s| g.constant(s.clone())).collect();
    let seq = t.prepare(&mut g, store, &vs, dates).unwrap();
    let out = t.forward(&mut g, store, &seq).unwrap();
    out.iter().map(|&v| g.value(v).clone()).collect()
}

fn criterion_3() -> Outcome {
    let cfg = ModelConfig {
        d_model: 8,
        heads: 2,
        tokens: 3,
        ..ModelConfig::default()
    };
    let mut worst = 0.0f64;
    let mut later_unchanged = 0;
    for trial in 0..50u64 {
        let t = TemporalTransformer::from_config(&cfg, 400).unwrap();
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(1000 + trial);
        t.init(&mut store, 0.3, &mut rng);
        let n = rng.range_inclusive(2, 5) as usize;
        let studies: Vec<Tensor> = (0..n).map(|_| to_tensor(&random_rows(&mut rng, 3, 8))).collect();
        let mut dates = vec![rng.range_inclusive(0, 1000) as i64];
        for _ in 1..n {
            let last = *dates.last().unwrap();
            dates.push(last + rng.range_inclusive(0, 200) as i64);
        }
        let j = rng.range_inclusive(0, n as u64 - 2) as usize;
        let base = run_temporal(&t, &store, &studies, &dates);
        let mut perturbed = studies.clone();
        for s in perturbed.iter_mut().skip(j + 1) {
            *s = to_tensor(&random_rows(&mut rng, 3, 8));
        }
        let after = run_temporal(&t, &store, &perturbed, &dates);
        for k in 0..=j {
            worst = worst.max(base[k].max_abs_diff(&after[k]));
        }
        if base[n - 1].max_abs_diff(&after[n - 1]) == 0.0 {
            later_unchanged += 1;
        }
    }
    outcome(
        worst < 1e-12 && later_unchanged == 0,
        format!("max diff on D_1..D_j {worst:.3e}; {later_unchanged} trials where the perturbed study did not move"),
    )
}

fn criterion_4() -> Outcome {
    let mut errs = Vec::new();

    let (block, store) = random_block("b", 8, 2, false, 0.3, 41);
    let (names, mut params) = param_list(&store);
    params.push(to_tensor(&random_rows(&mut SeededRng::new(42), 6, 8)));
    let weights = to_tensor(&random_rows(&mut SeededRng::new(43), 6, 8));
    let mask = build_group_causal_mask(&[3, 3]).unwrap();
    let err = finite_diff_check(&params, 1e-5, |g, v| {
        bind(g, &names, &v[..names.len()]);
        let out = block.forward(g, &store, v[names.len()], mask.mask(), None).map_err(ad)?;
        let w = g.constant(weights.clone());
        let p = g.mul(out, w)?;
        g.sum(p)
    })
    .unwrap();
    errs.push(("group_causal_block", err));

    let dcfg = ModelConfig {
        d_model: 8,
        heads: 2,
        tokens: 3,
        decoder_layers: 1,
        max_text_len: 8,
        ..ModelConfig::default()
    };
    let dec = ReportDecoder::from_config(&dcfg, 10).unwrap();
    let mut store = ParamStore::new();
    let mut rng = SeededRng::new(44);
    dec.init(&mut store, 0.3, &mut rng);
    let (names, mut params) = param_list(&store);
    params.push(to_tensor(&random_rows(&mut rng, 3, 8)));
    let report = [BOS, 5, 7, 5, EOS];
    let err = finite_diff_check(&params, 1e-5, |g, v| {
        bind(g, &names, &v[..names.len()]);
        dec.teacher_forced_loss(g, &store, v[names.len()], &report).map_err(ad)
    })
    .unwrap();
    errs.push(("decoder_loss", err));

    let mut rng = SeededRng::new(45);
    let pair = vec![to_tensor(&random_rows(&mut rng, 3, 5)), to_tensor(&random_rows(&mut rng, 3, 5))];
    let err = finite_diff_check(&pair, 1e-5, |g, v| contrastive_loss(g, v[0], v[1], 0.1).map_err(ad)).unwrap();
    errs.push(("contrastive_loss", err));

    // Stage 3 joint loss through encoder, projection, temporal transformer,
    // decoder and text encoder, differentiated with respect to every parameter.
    let mcfg = ModelConfig {
        image_size: 4,
        patch: 2,
        enc_dim: 4,
        tokens: 2,
        d_model: 4,
        heads: 2,
        temporal_layers: 1,
        decoder_layers: 1,
        text_layers: 1,
        max_text_len: 6,
        ..ModelConfig::default()
    };
    let vocab = Vocabulary::new(["a", "b", "c"]);
    let model = Model::new(mcfg.clone(), vocab.len(), 30).unwrap();
    let mut store = ParamStore::new();
    let mut rng = SeededRng::new(46);
    model.init_through(&mut store, Stage::Three, &mut rng);
    let all: Vec<String> = store.names().map(String::from).collect();
    for name in all {
        // Perturb gains and biases away from their constant init, and bring
        // matrices to std 0.5 = 1/sqrt(d_model). At init scale many attention
        // gradients sit near 1e-9, below what central differences resolve.
        let t = store.get_mut(&name).unwrap();
        if name.ends_with(".g") || name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") {
            for x in t.data_mut() {
                *x += rng.normal(0.0, 0.3);
            }
        } else {
            for x in t.data_mut() {
                *x *= 0.5 / mcfg.init_std;
            }
        }
    }
    let images: Vec<priorscan::encoders::ImageGrid> = (0..3)
        .map(|_| priorscan::encoders::ImageGrid::square(4, (0..16).map(|_| rng.uniform()).collect()).unwrap())
        .collect();
    let reports: [&[usize]; 3] = [&[BOS, 4, 5, EOS], &[BOS, 6, EOS], &[BOS, 5, 5, 6, EOS]];
    let groups = vec![
        vec![
            Study { image: &images[0], date: 100, tokens: reports[0] },
            Study { image: &images[1], date: 120, tokens: reports[1] },
        ],
        vec![Study { image: &images[2], date: 7, tokens: reports[2] }],
    ];
    let (names, params) = param_list(&store);
    let err = finite_diff_check(&params, 1e-5, |g, v| {
        bind(g, &names, v);
        Ok(model.batch_loss(g, &store, Stage::Three, &groups, 0.1, 1.0).map_err(ad)?.total)
    })
    .unwrap();
    errs.push(("joint_loss end-to-end", err));

    let mut g = Graph::no_grad();
    let ce = g.constant(Tensor::scalar(1.25));
    let c = g.constant(Tensor::scalar(0.5));
    let j = joint_loss(&mut g, ce, c, 2.0).unwrap();
    let arithmetic = g.value(j).item() == 2.25;

    let pass = arithmetic && errs.iter().all(|&(_, e)| e < 1e-4);
    let detail = errs.iter().map(|(n, e)| format!("{n} {e:.2e}")).collect::<Vec<_>>().join(", ");
    outcome(pass, format!("rel err: {detail}"))
}

fn cont(v: &Tensor, t: &Tensor, tau: f64) -> f64 {
    let mut g = Graph::no_grad();
    let (a, b) = (g.constant(v.clone()), g.constant(t.clone()));
    let l = contrastive_loss(&mut g, a, b, tau).unwrap();
    g.value(l).item()
}

fn criterion_5() -> Outcome {
    let mut rng = SeededRng::new(5);
    let single = cont(
        &to_tensor(&random_rows(&mut rng, 1, 6)),
        &to_tensor(&random_rows(&mut rng, 1, 6)),
        0.1,
    );
    let mut ok = single.abs() < 1e-12;
    let mut detail = format!("N_B=1 {single:.2e}");
    for n in [2usize, 4, 8] {
        let row = random_rows(&mut rng, 1, 6).remove(0);
        let same = to_tensor(&vec![row; n]);
        let l = cont(&same, &same, 0.1);
        ok &= (l - (n as f64).ln()).abs() < 1e-5;
        detail.push_str(&format!(", identical N_B={n} {l:.6}"));
    }
    let id = Tensor::matrix(2, 2, vec![1., 0., 0., 1.]).unwrap();
    let fixture = cont(&id, &id, 1.0);
    ok &= (fixture - 0.31326).abs() < 1e-5;
    detail.push_str(&format!(", identity fixture {fixture:.6}"));

    let dcfg = ModelConfig {
        d_model: 8,
        heads: 2,
        tokens: 3,
        decoder_layers: 2,
        max_text_len: 10,
        ..ModelConfig::default()
    };
    let dec = ReportDecoder::from_config(&dcfg, 64).unwrap();
    let mut store = ParamStore::new();
    dec.init(&mut store, 0.3, &mut rng);
    store.get_mut("decoder.head.w").unwrap().data_mut().iter_mut().for_each(|x| *x = 0.0);
    let mut g = Graph::no_grad();
    let m = g.constant(to_tensor(&random_rows(&mut rng, 3, 8)));
    let l = dec.teacher_forced_loss(&mut g, &store, m, &[BOS, 9, 12, 30, EOS]).unwrap();
    let uniform = g.value(l).item();
    ok &= (uniform - 64f64.ln()).abs() < 1e-9;
    detail.push_str(&format!(", uniform CE {uniform:.9} vs ln 64"));
    outcome(ok, detail)
}

fn criterion_6() -> Outcome {
    let cand = words("the the the the the the the");
    let reference = words("the cat is on the mat");
    let b1 = bleu_n(&cand, &reference, 1);
    let r = rouge_l(&words("a b c d"), &words("a c b d"));
    let same = words("effusion severity 2 worsened .");
    let identical = bleu_n(&same, &same, 4) == 1.0 && rouge_l(&same, &same) == 1.0;
    let mut bad = 0;
    let mut checked = 0;
    for cur in FindingState::all() {
        for prev in std::iter::once(None).chain(FindingState::all().map(Some)) {
            let labels = extract_ce_labels(&render_report(&cur, prev.as_ref()));
            for f in 0..FINDINGS.len() {
                let k = cur.0[f];
                let p = prev.map(|p| p.0[f]);
                let want = (k > 0 || p.unwrap_or(0) > 0).then(|| {
                    let c = p.map(|p| match k.cmp(&p) {
                        std::cmp::Ordering::Less => Comparative::Improved,
                        std::cmp::Ordering::Equal => Comparative::Unchanged,
                        std::cmp::Ordering::Greater => Comparative::Worsened,
                    });
                    (k, c)
                });
                if labels.findings[f].map(|l| (l.severity, l.comparative)) != want {
                    bad += 1;
                }
            }
            checked += 1;
        }
    }
    let pass = (b1 - 2.0 / 7.0).abs() < 1e-12 && (r - 0.75).abs() < 1e-12 && identical && bad == 0;
    outcome(
        pass,
        format!("BLEU-1 {b1:.6}, ROUGE-L {r:.6}, identical=1: {identical}, label round trip {bad} errors over {checked} state pairs"),
    )
}

/// Seed-fixed 300-patient curriculum shared by criteria 7-9.
struct Curriculum {
    test: PreparedSplit,
    train: PreparedSplit,
    vocab: Vocabulary,
    stage1: Checkpoint,
    stage3: Checkpoint,
    eval1: Evaluation,
    eval3: Evaluation,
    elapsed: Duration,
}

fn curriculum() -> Curriculum {
    let start = Instant::now();
    let seed = 42;
    let (records, vocab) = generate_corpus(seed, 300, &SynthParams::default()).unwrap();
    let splits = split_by_patient(&records, SplitSpec::default(), seed).unwrap();
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let len = cfg.model.max_text_len;
    let train = PreparedSplit::new(splits.train, &vocab, len).unwrap();
    let val = PreparedSplit::new(splits.val, &vocab, len).unwrap();
    let test = PreparedSplit::new(splits.test, &vocab, len).unwrap();
    let mut from = None;
    let mut done = Vec::new();
    for stage in [Stage::One, Stage::Two, Stage::Three] {
        let sc = StageConfig {
            stage,
            train: cfg.clone(),
            from: from.take(),
            from_scratch: false,
        };
        let out = run_stage(&sc, &train, &val, &vocab, |_| {}).unwrap();
        println!(
            "    stage {stage}: best epoch {} of {}, val BLEU-4 {:.4}",
            out.checkpoint.epoch,
            out.history.len(),
            out.checkpoint.best_bleu4
        );
        done.push(out.checkpoint.clone());
        from = Some(out.checkpoint);
    }
    let stage3 = done.pop().unwrap();
    let stage1 = done.remove(0);
    let eval1 = evaluate_checkpoint(&stage1, &test, &vocab).unwrap().0;
    let eval3 = evaluate_checkpoint(&stage3, &test, &vocab).unwrap().0;
    Curriculum {
        test,
        train,
        vocab,
        stage1,
        stage3,
        eval1,
        eval3,
        elapsed: start.elapsed(),
    }
}

fn criterion_7(c: &Curriculum) -> Outcome {
    let (b1, b3) = (c.eval1.get("bleu4").unwrap(), c.eval3.get("bleu4").unwrap());
    let (f1, f3) = (c.eval1.get("ce_f1").unwrap(), c.eval3.get("ce_f1").unwrap());
    let in_budget = c.elapsed < Duration::from_secs(30 * 60);
    outcome(
        b3 >= b1 + 0.01 && f3 >= f1 && in_budget,
        format!(
            "BLEU-4 stage1 {b1:.4} stage3 {b3:.4}; CE F1 stage1 {f1:.4} stage3 {f3:.4}; curriculum {:.0}s",
            c.elapsed.as_secs_f64()
        ),
    )
}

fn criterion_8(c: &Curriculum) -> Outcome {
    let a1 = c.eval1.get("comparative_accuracy").unwrap();
    let a3 = c.eval3.get("comparative_accuracy").unwrap();
    let majority = c.eval1.get("comparative_majority").unwrap();
    outcome(
        a1 <= majority + 0.05 && a3 >= a1 + 0.10,
        format!("comparative accuracy stage1 {a1:.4} (majority {majority:.4}), stage3 {a3:.4}"),
    )
}

fn criterion_9(c: &Curriculum) -> Outcome {
    let p1 = run_probe(&c.stage1, &c.train, &c.test, &c.vocab).unwrap();
    let p3 = run_probe(&c.stage3, &c.train, &c.test, &c.vocab).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for (f, name) in FINDINGS.iter().enumerate() {
        let (a1, a3) = (p1[f].macro_accuracy, p3[f].macro_accuracy);
        pass &= a3 >= 0.60 && a1 <= a3 - 0.10;
        parts.push(format!("{name} {a1:.3}/{a3:.3}"));
    }
    outcome(pass, format!("stage1/stage3 macro-accuracy: {}", parts.join(", ")))
}

fn cli(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_priorscan"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run priorscan binary");
    assert!(
        out.status.success(),
        "priorscan {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn first_epoch_loss(stdout: &[u8]) -> f64 {
    let text = String::from_utf8_lossy(stdout);
    let line = text.lines().nth(1).expect("first epoch line");
    line.split('\t').nth(2).unwrap().parse().unwrap()
}

fn criterion_10() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).to_string_lossy().into_owned();
    cli(&["gen-data", "--seed", "9", "--patients", "40", "--out", &p("a")]);
    cli(&["gen-data", "--seed", "9", "--patients", "40", "--out", &p("b")]);
    let data_same = dir_bytes(&tmp.path().join("a")) == dir_bytes(&tmp.path().join("b"));

    fs::write(p("train.cfg"), "seed = 5\nmax_epochs = 3\n").unwrap();
    let run = |out: &str| cli(&["train", "--stage", "1", "--config", &p("train.cfg"), "--data", &p("a"), "--out", &p(out)]);
    let first = run("one.ckpt");
    let second = run("two.ckpt");
    let (l1, l2) = (first_epoch_loss(&first.stdout), first_epoch_loss(&second.stdout));
    let ckpt_same = fs::read(p("one.ckpt")).unwrap() == fs::read(p("two.ckpt")).unwrap();
    outcome(
        data_same && (l1 - l2).abs() <= 1e-12 && ckpt_same,
        format!(
            "gen-data identical: {data_same}; first-epoch loss {l1:e} vs {l2:e}; checkpoints identical: {ckpt_same}"
        ),
    )
}

fn report(n: usize, budget: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let o = f();
    let elapsed = start.elapsed();
    let in_budget = budget.is_none_or(|b| elapsed < b);
    let pass = o.pass && in_budget;
    let budget_note = match budget {
        Some(b) if !in_budget => format!(" (over {:.0}s budget)", b.as_secs_f64()),
        _ => String::new(),
    };
    println!(
        "criterion {n:>2}: {} [{:.2}s{budget_note}] {}",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        o.detail
    );
    pass
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let s = Duration::from_secs;
    let mut results = vec![
        report(1, Some(s(1)), criterion_1),
        report(2, Some(s(5)), criterion_2),
        report(3, Some(s(10)), criterion_3),
        report(4, Some(s(120)), criterion_4),
        report(5, None, criterion_5),
        report(6, Some(s(5)), criterion_6),
    ];
    println!("    training the 300-patient curriculum for criteria 7-9");
    let c = curriculum();
    results.push(report(7, None, || criterion_7(&c)));
    results.push(report(8, None, || criterion_8(&c)));
    results.push(report(9, Some(s(300)), || criterion_9(&c)));
    results.push(report(10, None, criterion_10));
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
