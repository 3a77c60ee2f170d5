use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use edgekit::eval::{
    attachment_scores, emit_report, gold_edge_vectors, hubness, identical_subclass_test, mean_report, EvalOptions,
    Report, ScoreReport,
};
use edgekit::infer::TaskScorer;
use edgekit::treebank::{parse_conllu, parse_conllu_with, write_conllu, ReadOptions, WordVectors};
use edgekit::{
    Checkpoint, Decoder, Error, ExplainIndex, InferenceMode, Parser, ScoringMode, Sentence, SupportSummary, Task,
    Treebank,
};

use crate::config;
use crate::{
    ArtifactKind, Command, DecoderArg, EvalArgs, ExplainArgs, HubnessArgs, InferArgs, ModeArg, ParseArgs,
    PrecomputeArgs, ScoringArg, SubclassArgs, Thresholds, TrainArgs,
};

pub fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Train(a) => train(a),
        Command::Precompute(a) => precompute(a),
        Command::Parse(a) => parse(a),
        Command::Explain(a) => explain(a),
        Command::Eval(a) => eval(a),
        Command::Subclass(a) => subclass(a),
        Command::Hubness(a) => hub(a),
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{what} {} does not exist", path.display()),
        )));
    }
    Ok(())
}

fn read_treebank(path: &Path, allow_unannotated: bool) -> Result<Treebank> {
    require(path, "treebank")?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let tb = if allow_unannotated {
        parse_conllu_with(&text, ReadOptions { allow_unannotated: true })
    } else {
        parse_conllu(&text)
    };
    tb.with_context(|| format!("in {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    require(path, "checkpoint")?;
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn artifact_path(ckpt: &Path, ext: &str) -> PathBuf {
    ckpt.with_extension(ext)
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let mut overrides = a.overrides.clone();
    if let Some(s) = a.seed {
        overrides.push(format!("seed={s}"));
    }
    let cfg = config::resolve(a.config.as_deref(), std::env::vars(), &overrides)?;
    if a.show_config {
        println!("{}", config::show(&cfg));
        return Ok(ExitCode::SUCCESS);
    }
    require(&a.train, "training treebank")?;
    require(&a.dev, "dev treebank")?;
    let vectors = match &a.vectors {
        Some(p) => {
            require(p, "word vectors")?;
            Some(WordVectors::parse(&fs::read_to_string(p)?)?)
        }
        None => None,
    };
    let train_tb = read_treebank(&a.train, false)?;
    let dev = read_treebank(&a.dev, false)?;
    fs::create_dir_all(&a.out_dir)?;
    let log_path = a.out_dir.join("train.log.jsonl");
    let mut log = fs::File::create(&log_path)?;
    let mut log_err = None;
    let ck = edgekit::train::train(&train_tb, &dev, &cfg, vectors.as_ref(), &mut |r| {
        eprintln!("epoch {:>3}  loss {:.4}  dev {:.2}  lr {:.3e}", r.epoch, r.loss, r.dev_score, r.lr);
        if let Err(e) = serde_json::to_string(r).map(|l| writeln!(log, "{l}")) {
            log_err = Some(e.to_string());
        }
    })?;
    if let Some(e) = log_err {
        bail!("writing {}: {e}", log_path.display());
    }
    let out = a.out_dir.join("model.ckpt");
    ck.save(&out)?;
    // the stored dev score must be reproducible from the saved file
    let back = Checkpoint::load(&out)?;
    let again = edgekit::train::dev_score(&back.model, back.task, cfg.scoring, &train_tb, &dev)?;
    if again != ck.dev_score {
        bail!(Error::Format(format!("reloaded checkpoint scores {again}, saved {}", ck.dev_score)));
    }
    println!(
        "{} task, best dev {:.2} at epoch {}; wrote {}",
        ck.task,
        ck.dev_score,
        ck.epoch,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn precompute(a: PrecomputeArgs) -> Result<ExitCode> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let tb = read_treebank(&a.train, false)?;
    let dir = a.out_dir.clone().unwrap_or_else(|| a.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
    fs::create_dir_all(&dir)?;
    let stem = a.checkpoint.file_stem().unwrap_or_default();
    let base = dir.join(stem);
    if matches!(a.kind, ArtifactKind::Summary | ArtifactKind::Both) {
        let s = ck.model.precompute_support(&tb)?;
        let p = base.with_extension("summary");
        s.save(&p)?;
        println!("support summary: {} edges -> {}", s.head_count, p.display());
    }
    if matches!(a.kind, ArtifactKind::Index | ArtifactKind::Both) {
        let ix = ck.model.precompute_index(&tb)?;
        let p = base.with_extension("index");
        ix.save(&p)?;
        println!("explain index: {} edges -> {}", ix.len(), p.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn scoring_of(ck: &Checkpoint, arg: Option<ScoringArg>) -> ScoringMode {
    match arg {
        Some(ScoringArg::Weight) => ScoringMode::Weight,
        Some(ScoringArg::Instance) => ScoringMode::Instance,
        None => ck.train_config.scoring,
    }
}

/// Attaches whichever artifacts exist; the parser reports missing ones.
fn task_scorer(
    ck: Checkpoint,
    path: &Path,
    scoring: ScoringMode,
    summary: Option<&Path>,
    index: Option<&Path>,
) -> Result<TaskScorer> {
    let mut ts = TaskScorer::new(ck.model, scoring)?;
    if scoring == ScoringMode::Weight {
        return Ok(ts);
    }
    let sp = summary.map(Path::to_path_buf).unwrap_or_else(|| artifact_path(path, "summary"));
    if sp.is_file() {
        ts = ts.with_summary(SupportSummary::load(&sp)?).with_context(|| format!("{}", sp.display()))?;
    }
    let ip = index.map(Path::to_path_buf).unwrap_or_else(|| artifact_path(path, "index"));
    if ip.is_file() {
        ts = ts.with_index(ExplainIndex::load(&ip)?).with_context(|| format!("{}", ip.display()))?;
    }
    Ok(ts)
}

fn decoder(d: DecoderArg, single_root: bool) -> Decoder {
    match d {
        DecoderArg::Greedy => Decoder::Greedy,
        DecoderArg::Cle => Decoder::Cle { single_root },
    }
}

fn mode(m: ModeArg) -> InferenceMode {
    match m {
        ModeArg::Fast => InferenceMode::Fast,
        ModeArg::Explainable => InferenceMode::Explainable,
    }
}

fn build_parser(a: &InferArgs) -> Result<Parser> {
    let ck = load_checkpoint(&a.checkpoint)?;
    if ck.task != Task::Edge {
        bail!(Error::Config(format!("{} is a {} checkpoint; --checkpoint needs an edge model", a.checkpoint.display(), ck.task)));
    }
    let scoring = scoring_of(&ck, a.scoring);
    let edge = task_scorer(ck, &a.checkpoint, scoring, a.summary.as_deref(), a.index.as_deref())?;
    let label = match &a.label_checkpoint {
        Some(p) => {
            let lc = load_checkpoint(p)?;
            if lc.task != Task::Label {
                bail!(Error::Config(format!("{} is not a label checkpoint", p.display())));
            }
            let s = scoring_of(&lc, a.scoring);
            Some(task_scorer(lc, p, s, None, None)?)
        }
        None => None,
    };
    Ok(Parser::new(edge, label, mode(a.mode), decoder(a.decoder, a.single_root))?)
}

fn parse(a: ParseArgs) -> Result<ExitCode> {
    let parser = build_parser(&a.infer)?;
    let tb = read_treebank(&a.input, true)?;
    let out = parser.parse_treebank(&tb)?;
    write_output(a.output.as_deref(), &write_conllu(&out))?;
    Ok(ExitCode::SUCCESS)
}

fn explain(a: ExplainArgs) -> Result<ExitCode> {
    let parser = build_parser(&a.infer)?;
    let tb = read_treebank(&a.input, true)?;
    let refs: Vec<&Sentence> = tb.sentences.iter().collect();
    let mut text = String::new();
    for r in parser.explain(&refs, a.k)? {
        text.push_str(&serde_json::to_string(&r)?);
        text.push('\n');
    }
    write_output(a.output.as_deref(), &text)?;
    Ok(ExitCode::SUCCESS)
}

fn print_scores(name: &str, r: &ScoreReport) {
    println!("{name}: UAS {:.2}  LAS {:.2}  ({} tokens)", r.uas, r.las, r.tokens);
}

fn check_thresholds(t: &Thresholds, r: &ScoreReport, reports: Vec<Report>) -> Result<ExitCode> {
    if let Some(dir) = &t.report_dir {
        for p in emit_report(&reports, dir)? {
            println!("wrote {}", p.display());
        }
    }
    let mut ok = true;
    if let Some(m) = t.min_uas {
        if r.uas < m {
            println!("FAIL: UAS {:.2} < {m}", r.uas);
            ok = false;
        }
    }
    if let Some(m) = t.min_las {
        if r.las < m {
            println!("FAIL: LAS {:.2} < {m}", r.las);
            ok = false;
        }
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let gold = read_treebank(&a.gold, false)?;
    let opts = EvalOptions {
        exclude_punct: a.thresholds.exclude_punct,
    };
    let mut runs: Vec<(String, ScoreReport)> = Vec::new();
    for p in &a.pred {
        let pred = read_treebank(p, false)?;
        runs.push((p.display().to_string(), attachment_scores(&pred, &gold, opts)?));
    }
    if !a.label_checkpoint.is_empty() && a.label_checkpoint.len() != a.checkpoint.len() {
        bail!(Error::Config("--label-checkpoint must pair one-to-one with --checkpoint".into()));
    }
    for (k, c) in a.checkpoint.iter().enumerate() {
        let args = InferArgs {
            checkpoint: c.clone(),
            label_checkpoint: a.label_checkpoint.get(k).cloned(),
            summary: None,
            index: None,
            mode: a.mode,
            decoder: a.decoder,
            single_root: a.single_root,
            scoring: a.scoring,
        };
        let pred = build_parser(&args)?.parse_treebank(&gold)?;
        runs.push((c.display().to_string(), attachment_scores(&pred, &gold, opts)?));
    }
    if runs.is_empty() {
        bail!(Error::Config("give --pred files or --checkpoint models".into()));
    }
    for (n, r) in &runs {
        print_scores(n, r);
    }
    let mean = mean_report(&runs.iter().map(|r| r.1.clone()).collect::<Vec<_>>()).expect("non-empty");
    if runs.len() > 1 {
        print_scores(&format!("mean of {}", runs.len()), &mean);
    }
    let mut reports: Vec<Report> = runs
        .into_iter()
        .map(|(name, report)| Report::Scores { name, report })
        .collect();
    if reports.len() > 1 {
        reports.push(Report::Scores {
            name: "mean".into(),
            report: mean.clone(),
        });
    }
    check_thresholds(&a.thresholds, &mean, reports)
}

/// Loads `<stem>.index` or builds the index from `train`.
fn index_for(ck: &Checkpoint, path: &Path, train: Option<&Path>) -> Result<(ExplainIndex, Option<Treebank>)> {
    match train {
        Some(t) => {
            let tb = read_treebank(t, false)?;
            Ok((ck.model.precompute_index(&tb)?, Some(tb)))
        }
        None => {
            let p = artifact_path(path, "index");
            if !p.is_file() {
                bail!(Error::MissingArtifact {
                    artifact: "explain index (or pass --train)",
                    hint: "edgekit precompute",
                });
            }
            let ix = ExplainIndex::load(&p)?;
            ix.check(&ck.model.param_hash())?;
            Ok((ix, None))
        }
    }
}

fn subclass(a: SubclassArgs) -> Result<ExitCode> {
    let dev = read_treebank(&a.dev, false)?;
    let opts = EvalOptions {
        exclude_punct: a.thresholds.exclude_punct,
    };
    let mut runs = Vec::new();
    for c in &a.checkpoint {
        let ck = load_checkpoint(c)?;
        if ck.task != Task::Edge {
            bail!(Error::Config(format!(
                "{} was trained with label supervision; the subclass test needs a head-selection (edge task) checkpoint",
                c.display()
            )));
        }
        let (index, train_tb) = index_for(&ck, c, a.train.as_deref())?;
        let summary = match &train_tb {
            Some(tb) => Some(ck.model.precompute_support(tb)?),
            None => {
                let p = artifact_path(c, "summary");
                if p.is_file() {
                    Some(SupportSummary::load(&p)?)
                } else {
                    None
                }
            }
        };
        let mut ts = TaskScorer::new(ck.model, ScoringMode::Instance)?.with_index(index)?;
        let m = match summary {
            Some(s) => {
                ts = ts.with_summary(s)?;
                InferenceMode::Fast
            }
            None => InferenceMode::Explainable,
        };
        let parser = Parser::new(ts, None, m, decoder(a.decoder, false))?;
        let r = identical_subclass_test(&parser, &dev, opts)?;
        println!("{}: subclass LAS {:.2}  (parse UAS {:.2}, {} tokens)", c.display(), r.las, r.uas, r.tokens);
        runs.push((c.display().to_string(), r));
    }
    let mean = mean_report(&runs.iter().map(|r| r.1.clone()).collect::<Vec<_>>()).expect("at least one checkpoint");
    if runs.len() > 1 {
        println!("mean of {}: subclass LAS {:.2}", runs.len(), mean.las);
    }
    let reports = runs
        .into_iter()
        .map(|(name, report)| Report::Subclass { name, report })
        .collect();
    check_thresholds(&a.thresholds, &mean, reports)
}

fn hub(a: HubnessArgs) -> Result<ExitCode> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let (index, _) = index_for(&ck, &a.checkpoint, a.train.as_deref())?;
    let queries_tb = read_treebank(&a.queries, false)?;
    let queries = gold_edge_vectors(&ck.model, &queries_tb)?;
    let sc = ck.model.scorer()?;
    let r = hubness(&index, &queries, a.k, sc.similarity, sc.tau, a.top)?;
    let conserved = r.is_conserved();
    println!(
        "k = {}, {} queries, {} support edges ({}): max N_k {}, median {}",
        r.k,
        r.queries,
        r.counts.len(),
        r.similarity,
        r.max,
        r.median
    );
    println!(
        "conservation: sum N_k = {} (expected {}) {}",
        r.total(),
        a.k.min(r.counts.len()) * r.queries,
        if conserved { "ok" } else { "VIOLATED" }
    );
    for h in r.top.iter().take(10) {
        println!(
            "  #{:<3} N_k {:<6} {} -> {} ({}) sentence {}",
            h.rank, h.n_k, h.entry.head_form, h.entry.dep_form, h.entry.label, h.entry.sentence
        );
    }
    if let Some(dir) = &a.report_dir {
        let name = a
            .name
            .clone()
            .unwrap_or_else(|| a.checkpoint.file_stem().unwrap_or_default().to_string_lossy().into_owned());
        for p in emit_report(&[Report::Hubness { name, report: r }], dir)? {
            println!("wrote {}", p.display());
        }
    }
    if !conserved {
        bail!(Error::Format("hubness counts do not sum to k × queries".into()));
    }
    Ok(ExitCode::SUCCESS)
}
