//! Command-line interface.
//!
//! Exit codes: 0 success, 1 failed gradient check, 2 configuration error
//! (including bad arguments and unknown sample ids), 3 data error, 4
//! numeric failure.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::clustering::hard_assignment;
use crate::config::RunConfig;
use crate::data::{evaluate, load_archive, make_split, save_archive, tokenize, Dataset};
use crate::encoders::Mode;
use crate::error::{Error, Result};
use crate::numgrad::Tape;
use crate::objective::{
    accuracy, batch_items, check_gradients, BatchItem, BatchSampler, Checkpoint, LossBreakdown,
    TrainData,
};
use crate::pipeline;

#[derive(Parser, Debug)]
#[command(
    name = "graphmatch",
    version,
    about = "Image-text graph matching for domain generalization"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write checkpoint, loss log and resolved config to --out.
    Train(TrainArgs),
    /// Report target-domain accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Finite-difference check of every loss term on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Print cluster memberships and matched pairs for selected samples.
    InspectMatch(InspectArgs),
    /// Write the synthetic dataset as a tensor archive.
    Synth(SynthArgs),
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key (repeatable), e.g. `--set lr=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Feature archive to read.
    #[arg(long, conflicts_with = "synthetic")]
    pub data: Option<PathBuf>,
    /// Use the built-in synthetic generator (configured by `synth_*` keys).
    #[arg(long)]
    pub synthetic: bool,
    /// Held-out domain, by index or name.
    #[arg(long)]
    pub target_domain: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub few_shot_k: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// One row per domain plus their average.
    #[arg(long)]
    pub all_targets: bool,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, hide = true)]
    pub corrupt_adjoint: bool,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated sample indices.
    #[arg(long, value_delimiter = ',', required = true)]
    pub samples: Vec<usize>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Archive(_) | Error::Io { .. } | Error::Graph(_) => 3,
        Error::Numeric(_) | Error::Num(_) | Error::Match(_) => 4,
    }
}

fn resolve_config(args: &ConfigArgs, base: RunConfig) -> Result<RunConfig> {
    let mut cfg = base;
    if let Some(path) = &args.config {
        cfg.apply_file(path)?;
    }
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{o}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_dataset(args: &DataArgs, cfg: &RunConfig) -> Result<Dataset> {
    match (&args.data, args.synthetic) {
        (Some(path), false) => load_archive(path),
        (None, true) => pipeline::synthetic(cfg),
        _ => Err(Error::Config(
            "pass exactly one of --data PATH or --synthetic".into(),
        )),
    }
}

fn resolve_domain(name: &str, dataset: &Dataset) -> Result<usize> {
    if let Ok(k) = name.parse::<usize>() {
        if k < dataset.num_domains() {
            return Ok(k);
        }
    }
    dataset.domain_index(name).ok_or_else(|| {
        Error::Config(format!(
            "unknown target domain '{name}' (domains: {})",
            dataset.domains.join(", ")
        ))
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loss-log line for one step: JSON with every breakdown field.
pub fn log_line(record: &crate::objective::StepRecord) -> String {
    serde_json::to_string(record).expect("record serializes")
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let mut cfg = resolve_config(&args.config, RunConfig::default())?;
    if let Some(k) = args.few_shot_k {
        cfg.few_shot_k = (k > 0).then_some(k);
    }
    if let Some(s) = args.steps {
        cfg.steps = s;
    }
    cfg.validate()?;
    let dataset = load_dataset(&args.data, &cfg)?;
    if let Some(t) = &args.data.target_domain {
        cfg.target_domain = resolve_domain(t, &dataset)?;
    }
    let prepared = pipeline::prepare(&cfg, dataset)?;
    for w in &prepared.split.warnings {
        eprintln!("warning: {w}");
    }
    if prepared.split.split.sources.len() < 2 {
        eprintln!("warning: only one source domain");
    }

    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    write(&args.out.join("config.resolved.txt"), &cfg.to_text())?;
    let log_path = args.out.join("train_log.jsonl");
    let timing_path = args.out.join("train_timing.tsv");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut timing = String::from("step\tseconds\n");
    let started = Instant::now();

    let initial = pipeline::build_model(&cfg, &prepared)?;
    if cfg.steps == 0 {
        pipeline::checkpoint(&initial, &prepared, 0).save(&args.out.join("checkpoint.gata"))?;
    }
    let every = cfg.checkpoint_every;
    let (model, records) = pipeline::train(&cfg, &prepared, |record, model| {
        writeln!(log, "{}", log_line(record)).map_err(|e| Error::io(&log_path, e))?;
        writeln!(
            timing,
            "{}\t{:.6}",
            record.step,
            started.elapsed().as_secs_f64()
        )
        .expect("write to string");
        if every > 0 && record.step % every == 0 && record.step < cfg.steps {
            let path = args
                .out
                .join(format!("checkpoint_step{:06}.gata", record.step));
            pipeline::checkpoint(model, &prepared, record.step).save(&path)?;
        }
        Ok(())
    })?;
    write(&timing_path, &timing)?;
    if cfg.steps > 0 {
        pipeline::checkpoint(&model, &prepared, cfg.steps)
            .save(&args.out.join("checkpoint.gata"))?;
    }

    let target = evaluate(&model, &prepared.split, &prepared.dataset)?;
    let val = accuracy(&model, &prepared.dataset, &prepared.split.val)?;
    let io = |e| Error::io("stdout", e);
    writeln!(out, "steps\t{}", records.len()).map_err(io)?;
    if let Some(last) = records.last() {
        writeln!(out, "final_total\t{}", last.losses.total).map_err(io)?;
    }
    writeln!(out, "val_accuracy\t{val:.4}").map_err(io)?;
    writeln!(
        out,
        "target\t{}\t{:.4}\t{}/{}",
        prepared.dataset.domains[target.domain],
        target.accuracy(),
        target.correct,
        target.total
    )
    .map_err(io)?;
    Ok(())
}

/// Accuracy table: `domain<TAB>accuracy<TAB>correct<TAB>total`, with a
/// trailing `Avg` row (mean of the per-domain accuracies) for several rows.
pub fn accuracy_table(rows: &[(String, usize, usize)]) -> String {
    let mut s = String::from("domain\taccuracy\tcorrect\ttotal\n");
    for (name, correct, total) in rows {
        let acc = if *total == 0 {
            0.0
        } else {
            *correct as f64 / *total as f64
        };
        writeln!(s, "{name}\t{acc:.4}\t{correct}\t{total}").expect("write to string");
    }
    if rows.len() > 1 {
        let mean = rows
            .iter()
            .map(|(_, c, t)| if *t == 0 { 0.0 } else { *c as f64 / *t as f64 })
            .sum::<f64>()
            / rows.len() as f64;
        let (c, t) = rows.iter().fold((0, 0), |(a, b), (_, c, t)| (a + c, b + t));
        writeln!(s, "Avg\t{mean:.4}\t{c}\t{t}").expect("write to string");
    }
    s
}

fn check_compatible(ckpt: &Checkpoint, dataset: &Dataset) -> Result<()> {
    if ckpt.model.feature_dim != dataset.feature_dim || ckpt.model.classes != dataset.num_classes()
    {
        return Err(Error::Config(format!(
            "checkpoint expects {} features and {} classes, data has {} and {}",
            ckpt.model.feature_dim,
            ckpt.model.classes,
            dataset.feature_dim,
            dataset.num_classes()
        )));
    }
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let cfg = ckpt.model.config.clone();
    let dataset = load_dataset(&args.data, &cfg)?;
    check_compatible(&ckpt, &dataset)?;
    let targets: Vec<usize> = if args.all_targets {
        (0..dataset.num_domains()).collect()
    } else {
        match &args.data.target_domain {
            Some(t) => vec![resolve_domain(t, &dataset)?],
            None => {
                if cfg.target_domain >= dataset.num_domains() {
                    return Err(Error::Config(format!(
                        "target domain {} out of range",
                        cfg.target_domain
                    )));
                }
                vec![cfg.target_domain]
            }
        }
    };
    let mut rows = Vec::new();
    for t in targets {
        let split = make_split(&dataset, t, None, cfg.seed)?;
        let acc = evaluate(&ckpt.model, &split, &dataset)?;
        rows.push((dataset.domains[t].clone(), acc.correct, acc.total));
    }
    out.write_all(accuracy_table(&rows).as_bytes())
        .map_err(|e| Error::io("stdout", e))
}

/// Runs the finite-difference suite. Returns the report text and whether
/// every term passed.
pub fn gradcheck_report(cfg: &RunConfig, corrupt: bool) -> Result<(String, bool)> {
    let prepared = pipeline::prepare(cfg, pipeline::synthetic(cfg)?)?;
    let model = pipeline::build_model(cfg, &prepared)?;
    let data = TrainData::new(
        &prepared.dataset,
        &prepared.split,
        &prepared.vocab,
        cfg.max_caption_len,
        true,
    )?;
    let (picks, seed) = BatchSampler::new(cfg.seed, cfg.batch_per_domain).next(&data);
    let items = batch_items(&data, &picks);
    let report = check_gradients(&model, &items, seed, corrupt)?;
    let mut s = String::from("term\tworst_rel_error\tparameter\tstatus\n");
    for t in &report.terms {
        let status = if t.worst <= report.tolerance {
            "ok"
        } else {
            "FAIL"
        };
        writeln!(
            s,
            "{}\t{:.3e}\t{}\t{status}",
            t.term, t.worst, t.worst_param
        )
        .expect("write to string");
    }
    writeln!(
        s,
        "coordinates\t{}\tskipped\t{}\ttolerance\t{:.0e}",
        report.coordinates, report.skipped, report.tolerance
    )
    .expect("write to string");
    let passed = report.passed();
    writeln!(s, "result\t{}", if passed { "pass" } else { "fail" }).expect("write to string");
    Ok((s, passed))
}

pub fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn std::io::Write) -> Result<bool> {
    let cfg = resolve_config(&args.config, RunConfig::tiny())?;
    cfg.validate()?;
    let (text, passed) = gradcheck_report(&cfg, args.corrupt_adjoint)?;
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("stdout", e))?;
    Ok(passed)
}

/// Match report for one sample, using its first caption in eval mode.
pub fn inspect_sample(ckpt: &Checkpoint, dataset: &Dataset, index: usize) -> Result<String> {
    let sample = dataset.samples.get(index).ok_or_else(|| {
        Error::Config(format!(
            "unknown sample id {index} (dataset has {})",
            dataset.len()
        ))
    })?;
    let caption = sample
        .captions
        .first()
        .ok_or_else(|| Error::Data(format!("sample {index} has no caption")))?;
    let mut model = ckpt.model.clone();
    model.config.use_local = true;
    let tokens = tokenize(caption, &ckpt.vocab, model.config.max_caption_len);
    let tape = Tape::new();
    let out = model.forward_sample(
        &tape,
        BatchItem {
            sample,
            tokens: &tokens,
        },
        Mode::Eval,
        model.config.seed,
    )?;
    let detail = &out.local[0];
    let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    let visual: Vec<usize> = hard_assignment(&detail.visual_assignment)
        .into_iter()
        .map(|(c, _)| c)
        .collect();
    let textual: Vec<usize> = hard_assignment(&detail.text_assignment)
        .into_iter()
        .map(|(c, _)| c)
        .collect();
    let words: Vec<&str> = tokens
        .iter()
        .filter(|&&t| t != crate::encoders::PAD_ID)
        .map(|&t| ckpt.vocab.word(t).unwrap_or("<unk>"))
        .collect();

    let mut s = String::new();
    writeln!(
        s,
        "sample\t{index}\tlabel\t{}\tdomain\t{}",
        dataset.classes[sample.label], dataset.domains[sample.domain]
    )
    .expect("write to string");
    writeln!(s, "caption\t{}", words.join(" ")).expect("write to string");
    writeln!(s, "visual_membership\t{}", join(&visual)).expect("write to string");
    writeln!(s, "text_membership\t{}", join(&textual)).expect("write to string");
    for c in 0..model.config.n_t {
        let members: Vec<&str> = words
            .iter()
            .zip(&textual)
            .filter(|(_, &m)| m == c)
            .map(|(w, _)| *w)
            .collect();
        writeln!(s, "text_cluster\t{c}\t{}", members.join(" ")).expect("write to string");
    }
    for (i, (&j, d)) in detail
        .matching
        .mu
        .iter()
        .zip(detail.matching.pair_costs())
        .enumerate()
    {
        writeln!(s, "pair\t{i}\t{j}\t{d:.6}").expect("write to string");
    }
    Ok(s)
}

pub fn cmd_inspect_match(args: &InspectArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let dataset = load_dataset(&args.data, &ckpt.model.config)?;
    check_compatible(&ckpt, &dataset)?;
    for &i in &args.samples {
        if i >= dataset.len() {
            return Err(Error::Config(format!(
                "unknown sample id {i} (dataset has {})",
                dataset.len()
            )));
        }
    }
    for &i in &args.samples {
        out.write_all(inspect_sample(&ckpt, &dataset, i)?.as_bytes())
            .map_err(|e| Error::io("stdout", e))?;
    }
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let cfg = resolve_config(&args.config, RunConfig::default())?;
    cfg.validate()?;
    save_archive(&pipeline::synthetic(&cfg)?, &args.out)
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let mut stdout = std::io::stdout().lock();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a, &mut stdout).map(|_| 0),
        Command::Eval(a) => cmd_eval(a, &mut stdout).map(|_| 0),
        Command::Gradcheck(a) => cmd_gradcheck(a, &mut stdout).map(|ok| if ok { 0 } else { 1 }),
        Command::InspectMatch(a) => cmd_inspect_match(a, &mut stdout).map(|_| 0),
        Command::Synth(a) => cmd_synth(a).map(|_| 0),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn main() -> i32 {
    run(Cli::parse())
}

#[doc(hidden)]
pub fn breakdown_terms() -> &'static [&'static str] {
    &LossBreakdown::TERMS
}
