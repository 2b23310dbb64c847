use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use dbvae::checkpoint::Checkpoint;
use dbvae::codebook::code_perplexity;
use dbvae::data::{batch_iter, read_corpus, synth_corpus, unigram_perplexity, Vocabulary, UNK};
use dbvae::model::{corpus_code_usage, eval_perplexity, LatentInjection, Mode, ModelState};
use dbvae::tape::Tape;
use dbvae::train::{monitor_batch, train as run_training, TrainConfig, TrainReport, DEFAULT_SIGMA_FRAC};
use dbvae::{Error, Result};
use serde_json::json;

use crate::args::{resolve_seed, EvalArgs, ExportArgs, InterpolateArgs, ModelArgs, SynthArgs, TopkArgs, TrainArgs};

const DEFAULT_BETA_R: f64 = 1.0;

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn output(path: Option<&PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn stdout_err(e: io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        other => Error::Argument(format!("{}: csv: {other:?}", path.display())),
    }
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let mode = a.mode.unwrap_or(d.mode);
    let k = a.codebook_size.unwrap_or(d.codebook_size);
    let sigma = match (a.sigma, a.sigma_frac) {
        (Some(_), Some(_)) => return Err(Error::Usage("give --sigma or --sigma-frac, not both".into())),
        (Some(s), None) => s,
        (None, f) => f.unwrap_or(DEFAULT_SIGMA_FRAC) * k as f64,
    };
    let latent_injection = match (a.latent_injection, a.latent_init_state) {
        (_, true) => LatentInjection::InitAndInput,
        (Some(l), false) => l,
        (None, false) => d.latent_injection,
    };
    let beta = a.beta.unwrap_or(if mode == Mode::R { DEFAULT_BETA_R } else { 0.0 });
    let cfg = TrainConfig {
        codebook_size: k,
        latent_dim: a.latent_dim.unwrap_or(d.latent_dim),
        slices: a.slices.unwrap_or(d.slices),
        hidden_dim: a.hidden_dim.unwrap_or(d.hidden_dim),
        embed_dim: a.embed_dim.unwrap_or(d.embed_dim),
        alpha: a.alpha.unwrap_or(d.alpha),
        beta,
        sigma,
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        lr_init: a.lr_init.unwrap_or(d.lr_init),
        decay_factor: a.decay_factor.unwrap_or(d.decay_factor),
        patience_epochs: a.patience_epochs.unwrap_or(d.patience_epochs),
        max_decays: a.max_decays.unwrap_or(d.max_decays),
        max_epochs: a.max_epochs.unwrap_or(d.max_epochs),
        seed: resolve_seed(a.seed)?,
        mode,
        dropout: a.dropout.unwrap_or(d.dropout),
        clip_norm: a.clip_norm.unwrap_or(d.clip_norm),
        latent_injection,
        skip_pretrain: a.skip_pretrain,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn encode_file(vocab: &Vocabulary, path: &Path) -> Result<Vec<Vec<usize>>> {
    let lines = read_corpus(path)?;
    if lines.is_empty() {
        return Err(Error::Argument(format!("{}: corpus is empty", path.display())));
    }
    Ok(vocab.encode_corpus(&lines))
}

fn checkpoint_meta(ck: &mut Checkpoint, cfg: &TrainConfig, report: &TrainReport) {
    let mut put = |k: &str, v: String| {
        ck.meta.insert(k.into(), v);
    };
    put("epoch", report.epoch.to_string());
    put("phase", report.phase.to_string());
    put("valid_ppl", format!("{:?}", report.valid_ppl));
    put("batch_size", cfg.batch_size.to_string());
    put("seed", cfg.seed.to_string());
    put("sigma", format!("{:?}", cfg.sigma));
}

pub fn train(a: TrainArgs) -> Result<()> {
    let cfg = train_config(&a)?;
    let lines = read_corpus(&a.corpus)?;
    if lines.is_empty() {
        return Err(Error::Argument(format!("{}: corpus is empty", a.corpus.display())));
    }
    let vocab = Vocabulary::build(&lines, a.max_vocab)?;
    let train_set = vocab.encode_corpus(&lines);
    let valid_set = encode_file(&vocab, &a.valid)?;

    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    vocab.save(&a.out.join("vocab.txt"))?;
    let metrics_path = a.out.join("metrics.jsonl");
    let usage_path = a.out.join("usage.csv");
    let mut metrics = create(&metrics_path)?;
    let mut usage = csv::Writer::from_path(&usage_path).map_err(|e| csv_err(&usage_path, e))?;
    let k = cfg.codebook_size;
    let header: Vec<String> = std::iter::once("epoch".to_string())
        .chain((0..k).map(|i| format!("atom_{i}")))
        .collect();
    usage.write_record(&header).map_err(|e| csv_err(&usage_path, e))?;
    let best_path = a.out.join("best.ckpt");
    let hash = vocab.hash();
    eprintln!(
        "training mode {} on {} sentences ({} valid), vocab {}, K={}, S={}, D={}, sigma={}",
        cfg.mode,
        train_set.len(),
        valid_set.len(),
        vocab.len(),
        cfg.codebook_size,
        cfg.slices,
        cfg.latent_dim,
        cfg.sigma
    );

    let mut observer = |report: &TrainReport, state: &ModelState, is_best: bool| -> Result<()> {
        let mut logged = report.clone();
        if !a.log_timing {
            logged.wall_seconds = 0.0;
        }
        let line = serde_json::to_string(&logged).expect("reports serialize");
        writeln!(metrics, "{line}").and_then(|_| metrics.flush()).map_err(io_err(&metrics_path))?;

        let batch = monitor_batch(&valid_set, cfg.batch_size, cfg.seed, report.epoch)?;
        let tape = Tape::new();
        let bound = state.bind_frozen(&tape);
        let asg = state.assign(&state.encode(&bound, &batch)?, &batch)?;
        let (v, _) = code_perplexity(&asg, k)?;
        let row: Vec<String> = std::iter::once(report.epoch.to_string())
            .chain(v.iter().map(|p| format!("{p:?}")))
            .collect();
        usage.write_record(&row).and_then(|_| usage.flush().map_err(Into::into)).map_err(|e| csv_err(&usage_path, e))?;

        if is_best {
            let mut ck = Checkpoint::new(state.clone(), hash.clone());
            checkpoint_meta(&mut ck, &cfg, report);
            ck.save(&best_path)?;
        }
        eprintln!(
            "epoch {:>3} {:<8} rec {:.4} kl {:.4} code {:.5} ppl_code {:.2} valid_ppl {:.4} lr {}{}",
            report.epoch,
            report.phase,
            report.loss_rec,
            report.loss_kl,
            report.loss_code,
            report.ppl_code,
            report.valid_ppl,
            report.lr,
            if is_best { " *" } else { "" }
        );
        Ok(())
    };
    let outcome = run_training(&cfg, vocab.len(), &train_set, &valid_set, &mut observer)?;
    let last = outcome.reports.last().expect("at least one epoch");
    let mut ck = Checkpoint::new(outcome.state.clone(), hash);
    checkpoint_meta(&mut ck, &cfg, last);
    ck.save(&a.out.join("final.ckpt"))?;

    let best = &outcome.reports[outcome.best_epoch - 1];
    let summary = json!({
        "epochs": outcome.reports.len(),
        "final_phase": last.phase,
        "final_valid_ppl": last.valid_ppl,
        "best_epoch": outcome.best_epoch,
        "best_valid_ppl": best.valid_ppl,
        "exit_ppl_code": outcome.exit_ppl_code,
        "sigma": cfg.sigma,
    });
    println!("{summary}");
    Ok(())
}

fn load_model(m: &ModelArgs) -> Result<(Checkpoint, Vocabulary)> {
    let ck = Checkpoint::load(&m.checkpoint)?;
    let vocab = Vocabulary::load(&m.vocab_path())?;
    if vocab.hash() != ck.vocab_hash {
        return Err(Error::Integrity(format!(
            "vocabulary {} (hash {}) does not match checkpoint (hash {})",
            m.vocab_path().display(),
            vocab.hash(),
            ck.vocab_hash
        )));
    }
    if vocab.len() != ck.state.config.vocab_size {
        return Err(Error::Integrity("vocabulary size differs from checkpoint".into()));
    }
    Ok((ck, vocab))
}

fn tokenize_warn(vocab: &Vocabulary, sentence: &str) -> Vec<usize> {
    let ids = vocab.tokenize(sentence);
    if ids.iter().all(|&i| i == UNK) {
        eprintln!("warning: {sentence:?} has no in-vocabulary tokens; proceeding with <unk>");
    }
    ids
}

fn checkpoint_batch_size(ck: &Checkpoint) -> usize {
    ck.meta.get("batch_size").and_then(|v| v.parse().ok()).unwrap_or(32)
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let (ck, vocab) = load_model(&a.model)?;
    let corpus = encode_file(&vocab, &a.corpus)?;
    let m = a.batch_size.unwrap_or_else(|| checkpoint_batch_size(&ck));
    let ppl = eval_perplexity(&ck.state, &corpus, m)?;
    let (_, ppl_code) = corpus_code_usage(&ck.state, &corpus, m)?;
    let tokens: usize = corpus.iter().map(|s| s.len() + 1).sum();
    let out = json!({
        "ppl": ppl,
        "ppl_code": ppl_code,
        "sentences": corpus.len(),
        "tokens": tokens,
    });
    println!("{out}");
    Ok(())
}

pub fn interpolate(a: InterpolateArgs) -> Result<()> {
    let (ck, vocab) = load_model(&a.model)?;
    let x1 = tokenize_warn(&vocab, &a.sentence1);
    let x2 = tokenize_warn(&vocab, &a.sentence2);
    let rows = ck.state.interpolate(&x1, &x2, a.steps, a.requantize, a.max_len)?;
    let mut out = io::stdout().lock();
    for (lambda, tokens) in rows {
        let line = json!({ "lambda": lambda, "text": vocab.detokenize(&tokens) });
        writeln!(out, "{line}").map_err(stdout_err)?;
    }
    Ok(())
}

pub fn topk(a: TopkArgs) -> Result<()> {
    let (ck, vocab) = load_model(&a.model)?;
    let x = tokenize_warn(&vocab, &a.sentence);
    let mut out = io::stdout().lock();
    for c in ck.state.generate_topk(&x, a.k, a.max_len)? {
        let line = json!({ "rank": c.rank, "distance": c.distance, "text": vocab.detokenize(&c.tokens) });
        writeln!(out, "{line}").map_err(stdout_err)?;
    }
    Ok(())
}

fn out_label(p: Option<&PathBuf>) -> PathBuf {
    p.cloned().unwrap_or_else(|| PathBuf::from("<stdout>"))
}

pub fn export_latents(a: ExportArgs) -> Result<()> {
    let (ck, vocab) = load_model(&a.model)?;
    let corpus = encode_file(&vocab, &a.corpus)?;
    let label = out_label(a.out.as_ref());
    let mut w = csv::Writer::from_writer(output(a.out.as_ref())?);
    let d = ck.state.config.latent_dim;
    let header: Vec<String> = (0..d).map(|j| format!("z{j}")).collect();
    w.write_record(&header).map_err(|e| csv_err(&label, e))?;
    for batch in batch_iter(&corpus, a.batch_size, None)? {
        let lat = ck.state.latent(&batch)?;
        for b in 0..batch.batch_size() {
            let row: Vec<String> = lat.row(b).iter().map(|v| format!("{v:?}")).collect();
            w.write_record(&row).map_err(|e| csv_err(&label, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&label, e))
}

pub fn export_usage(a: ExportArgs) -> Result<()> {
    let (ck, vocab) = load_model(&a.model)?;
    let corpus = encode_file(&vocab, &a.corpus)?;
    let (v, ppl_code) = corpus_code_usage(&ck.state, &corpus, a.batch_size)?;
    let label = out_label(a.out.as_ref());
    let mut w = csv::Writer::from_writer(output(a.out.as_ref())?);
    w.write_record(["atom", "probability"]).map_err(|e| csv_err(&label, e))?;
    for (i, p) in v.iter().enumerate() {
        w.write_record([i.to_string(), format!("{p:?}")]).map_err(|e| csv_err(&label, e))?;
    }
    w.flush().map_err(|e| Error::io(&label, e))?;
    eprintln!("ppl_code {ppl_code:.4} over {} sentences", corpus.len());
    Ok(())
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let seed = resolve_seed(a.seed)?;
    let (train, test) = synth_corpus(a.n_train, a.n_test, a.vocab_size, a.max_len, seed)?;
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let write_lines = |name: &str, lines: &[String]| -> Result<PathBuf> {
        let path = a.out.join(name);
        let mut text = lines.join("\n");
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    };
    let train_path = write_lines("train.txt", &train)?;
    let test_path = write_lines("test.txt", &test)?;
    let vocab = Vocabulary::build(&train, usize::MAX)?;
    let baseline = unigram_perplexity(&vocab.encode_corpus(&train), &vocab.encode_corpus(&test), vocab.len())?;
    let out = json!({
        "train": train_path,
        "test": test_path,
        "n_train": train.len(),
        "n_test": test.len(),
        "vocab_size": vocab.len(),
        "unigram_ppl": baseline,
        "seed": seed,
    });
    println!("{out}");
    Ok(())
}
