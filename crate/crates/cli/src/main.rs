use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use gplan_core::config::RunConfig;
use gplan_core::curriculum::{schedule_csv, schedule_rows, LrRegime};
use gplan_core::filter::filter_dataset;
use gplan_core::metrics::{diagnose_prediction, evaluate, PredictionRecord};
use gplan_core::plan::DatasetRecord;
use gplan_core::policy::{
    compile_for_epoch, compile_record, pair_vocab, predict, train_picd, train_scdpo, Checkpoint,
    Order, PicdOptions, TabularPolicy,
};
use gplan_core::scaffold::LatentVocab;
use gplan_core::scdpo::PairRecord;
use gplan_core::synth::{build_dataset, SynthConfig};

#[derive(Parser)]
#[command(
    name = "gplan",
    version,
    about = "Intent-sequence planning pipeline: synthesize, filter, compile, train, align, evaluate"
)]
struct Cli {
    /// JSON run config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true, env = "GPLAN_SEED")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/test records, counterfactual anchors and preference pairs.
    Synth {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Output directory; the config data path by default.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Fraction of train records given a planted violation.
        #[arg(long, default_value_t = 0.0)]
        corrupt: f64,
    },
    /// Run the three-tier rule filter over a record file.
    Filter {
        /// Record JSONL; `<data>/train.jsonl` by default.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Directory for kept.jsonl, rejected.jsonl and filter_report.json; the input's directory by default.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exit with status 1 when the removal rate exceeds this.
        #[arg(long)]
        max_removal_rate: Option<f64>,
    },
    /// Compile records into curriculum training sequences.
    Compile {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Curriculum epoch whose stage to use.
        #[arg(long, default_value_t = 0, conflicts_with = "stage")]
        epoch: usize,
        /// Explicit number of compressed blocks, clamped per record.
        #[arg(long)]
        stage: Option<usize>,
    },
    /// Curriculum training of the toy policy.
    TrainPicd {
        /// `<data>/train.jsonl` by default; filter it first.
        #[arg(long)]
        train: Option<PathBuf>,
        /// `<data>/test.jsonl` by default.
        #[arg(long)]
        heldout: Option<PathBuf>,
        #[arg(long, default_value = "calr")]
        regime: LrRegime,
        #[arg(long, default_value = "prompt_conditioned")]
        order: Order,
        /// Multiplier on every scheduled learning rate.
        #[arg(long, default_value_t = 1e6)]
        lr_scale: f64,
        #[arg(long, default_value_t = 96)]
        max_decode_len: usize,
        /// Checkpoint file; `<checkpoints>/picd.json` by default.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory for picd_report.json, picd_epochs.csv and picd_preds.jsonl; `<reports>` by default.
        #[arg(long)]
        report_dir: Option<PathBuf>,
    },
    /// Preference alignment of the toy policy on counterfactual pairs.
    TrainDpo {
        /// `<data>/pairs.jsonl` by default.
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Starting checkpoint; a uniform policy over the pair vocabulary when omitted.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Order of the uniform starting policy.
        #[arg(long, default_value = "prompt_conditioned")]
        order: Order,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        /// Drop every regularizer, leaving the plain preference loss.
        #[arg(long)]
        vanilla: bool,
        /// Checkpoint file; `<checkpoints>/dpo.json` by default.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Report file; `<reports>/dpo_report.json` by default.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Score predictions against truth records.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        /// `<data>/test.jsonl` by default.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Report file; `<reports>/eval_report.json` by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Latent-structure diagnostics for predicted reasoning prefixes.
    Diagnose {
        #[arg(long)]
        pred: PathBuf,
        /// Report file; `<reports>/diagnose_report.json` by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the step-level learning-rate schedule as CSV.
    ScheduleDump {
        #[arg(long, default_value = "calr")]
        regime: LrRegime,
        /// Overrides the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 1)]
        steps_per_epoch: usize,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Status {
    Done,
    GateFailed,
}

struct Run {
    cfg: RunConfig,
    hash: String,
}

impl Run {
    fn stamp<T: Serialize>(&self, report: &T) -> Result<Value> {
        let mut v = serde_json::to_value(report)?;
        let map = v.as_object_mut().context("report is not an object")?;
        map.insert("config_hash".into(), json!(self.hash));
        map.insert("seed".into(), json!(self.cfg.seed));
        Ok(v)
    }

    fn csv_header(&self) -> String {
        format!("# config_hash={} seed={}\n", self.hash, self.cfg.seed)
    }

    fn data(&self, name: &str) -> PathBuf {
        self.cfg.paths.data.join(name)
    }

    fn checkpoint(&self, name: &str) -> PathBuf {
        self.cfg.paths.checkpoints.join(name)
    }

    fn report(&self, name: &str) -> PathBuf {
        self.cfg.paths.reports.join(name)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Status::Done) => ExitCode::SUCCESS,
        Ok(Status::GateFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<Status> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let hash = cfg.hash();
    let run = Run { cfg, hash };
    match cli.command {
        Command::Synth { n, out, corrupt } => synth(&run, n, out, corrupt),
        Command::Filter {
            input,
            out,
            max_removal_rate,
        } => filter(&run, input, out, max_removal_rate),
        Command::Compile {
            input,
            out,
            epoch,
            stage,
        } => compile(&run, &input, &out, epoch, stage),
        Command::TrainPicd {
            train,
            heldout,
            regime,
            order,
            lr_scale,
            max_decode_len,
            checkpoint,
            report_dir,
        } => {
            let opts = PicdOptions {
                curriculum: run.cfg.curriculum.clone(),
                regime,
                lr_scale,
                order,
                latent: LatentVocab::default(),
                max_decode_len,
                seed: run.cfg.seed,
            };
            let train = train.unwrap_or_else(|| run.data("train.jsonl"));
            let heldout = heldout.unwrap_or_else(|| run.data("test.jsonl"));
            let checkpoint = checkpoint.unwrap_or_else(|| run.checkpoint("picd.json"));
            let report_dir = report_dir.unwrap_or_else(|| run.cfg.paths.reports.clone());
            train_picd_cmd(&run, &train, &heldout, &opts, &checkpoint, &report_dir)
        }
        Command::TrainDpo {
            pairs,
            init,
            order,
            lr,
            vanilla,
            checkpoint,
            report,
        } => {
            let pairs = pairs.unwrap_or_else(|| run.data("pairs.jsonl"));
            let checkpoint = checkpoint.unwrap_or_else(|| run.checkpoint("dpo.json"));
            let report = report.unwrap_or_else(|| run.report("dpo_report.json"));
            train_dpo_cmd(
                &run,
                &pairs,
                init.as_deref(),
                order,
                lr,
                vanilla,
                &checkpoint,
                &report,
            )
        }
        Command::Eval { pred, truth, out } => {
            let truth = truth.unwrap_or_else(|| run.data("test.jsonl"));
            let out = out.unwrap_or_else(|| run.report("eval_report.json"));
            eval_cmd(&run, &pred, &truth, &out)
        }
        Command::Diagnose { pred, out } => {
            let out = out.unwrap_or_else(|| run.report("diagnose_report.json"));
            diagnose_cmd(&run, &pred, &out)
        }
        Command::ScheduleDump {
            regime,
            epochs,
            steps_per_epoch,
            out,
        } => schedule_dump(&run, regime, epochs, steps_per_epoch, out),
    }
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1))
        })
        .collect()
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    create_parent(path)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    write_text(path, &out)
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

/// Provenance sidecar `<file>.meta.json` for a JSONL artifact.
fn write_meta(path: &Path, meta: &Value) -> Result<()> {
    let mut meta_path = path.as_os_str().to_owned();
    meta_path.push(".meta.json");
    write_json(Path::new(&meta_path), meta)
}

fn print_json(value: &Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn synth(run: &Run, n: usize, out: Option<PathBuf>, corrupt: f64) -> Result<Status> {
    anyhow::ensure!(
        (0.0..=1.0).contains(&corrupt),
        "--corrupt must lie in [0, 1]"
    );
    let out = out.unwrap_or_else(|| run.cfg.paths.data.clone());
    let synth_cfg = SynthConfig {
        n,
        seed: run.cfg.seed,
        corrupt,
    };
    let d = build_dataset(&synth_cfg, &run.cfg.templates()?, &run.cfg.library()?)?;
    write_jsonl(&out.join("train.jsonl"), &d.train)?;
    write_jsonl(&out.join("test.jsonl"), &d.test)?;
    write_jsonl(&out.join("anchors.jsonl"), &d.anchors)?;
    write_jsonl(&out.join("pairs.jsonl"), &d.pairs)?;
    let manifest = run.stamp(&json!({
        "n": n,
        "corrupt": corrupt,
        "train": d.train.len(),
        "test": d.test.len(),
        "anchors": d.anchors.len(),
        "pairs": d.pairs.len(),
        "planted": d.train.iter().filter(|r| r.planted.is_some()).count(),
    }))?;
    write_json(&out.join("manifest.json"), &manifest)?;
    print_json(&manifest)?;
    Ok(Status::Done)
}

fn filter(
    run: &Run,
    input: Option<PathBuf>,
    out: Option<PathBuf>,
    max_removal_rate: Option<f64>,
) -> Result<Status> {
    let input = input.unwrap_or_else(|| run.data("train.jsonl"));
    let out = out.unwrap_or_else(|| input.parent().unwrap_or(Path::new("")).to_path_buf());
    let records: Vec<DatasetRecord> = read_jsonl(&input)?;
    let total = records.len();
    let outcome = filter_dataset(records, &run.cfg.library()?);
    write_jsonl(&out.join("kept.jsonl"), &outcome.kept)?;
    write_jsonl(&out.join("rejected.jsonl"), &outcome.rejected)?;
    let by_tier: BTreeMap<String, usize> = outcome
        .rejected_by_tier()
        .into_iter()
        .map(|(t, c)| (t.to_string(), c))
        .collect();
    let mut by_code: BTreeMap<String, usize> = BTreeMap::new();
    for r in &outcome.rejected {
        if let Some(code) = r.verdict.code() {
            *by_code
                .entry(
                    serde_json::to_value(code)?
                        .as_str()
                        .unwrap_or_default()
                        .to_string(),
                )
                .or_default() += 1;
        }
    }
    let report = run.stamp(&json!({
        "input": input.display().to_string(),
        "total": total,
        "kept": outcome.kept.len(),
        "rejected": outcome.rejected.len(),
        "removal_rate": outcome.removal_rate,
        "rejected_by_tier": by_tier,
        "rejected_by_code": by_code,
    }))?;
    write_json(&out.join("filter_report.json"), &report)?;
    print_json(&report)?;
    match max_removal_rate {
        Some(max) if outcome.removal_rate > max => {
            eprintln!("removal rate {} exceeds {max}", outcome.removal_rate);
            Ok(Status::GateFailed)
        }
        _ => Ok(Status::Done),
    }
}

fn compile(
    run: &Run,
    input: &Path,
    out: &Path,
    epoch: usize,
    stage: Option<usize>,
) -> Result<Status> {
    let records: Vec<DatasetRecord> = read_jsonl(input)?;
    let latent = LatentVocab::default();
    let compiled = records
        .iter()
        .map(|r| match stage {
            Some(s) => compile_record(r, s, &latent),
            None => compile_for_epoch(r, epoch, &run.cfg.curriculum, &latent),
        })
        .collect::<Result<Vec<_>, _>>()?;
    write_jsonl(out, &compiled)?;
    let meta = run.stamp(&json!({
        "input": input.display().to_string(),
        "records": compiled.len(),
        "epoch": if stage.is_some() { Value::Null } else { json!(epoch) },
        "stage": stage,
    }))?;
    write_meta(out, &meta)?;
    print_json(&meta)?;
    Ok(Status::Done)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| format!("{v}"))
}

fn train_picd_cmd(
    run: &Run,
    train: &Path,
    heldout: &Path,
    opts: &PicdOptions,
    checkpoint: &Path,
    report_dir: &Path,
) -> Result<Status> {
    let train: Vec<DatasetRecord> = read_jsonl(train)?;
    let heldout: Vec<DatasetRecord> = read_jsonl(heldout)?;
    let library = run.cfg.library()?;
    let (policy, report) = train_picd(&train, &heldout, &library, opts)?;
    write_json(
        checkpoint,
        &serde_json::to_value(policy.to_checkpoint(&run.hash, run.cfg.seed))?,
    )?;
    let preds = predict(&policy, &heldout, opts.max_decode_len)?;
    let preds_path = report_dir.join("picd_preds.jsonl");
    write_jsonl(&preds_path, &preds)?;
    write_meta(
        &preds_path,
        &run.stamp(&json!({ "predictions": preds.len() }))?,
    )?;
    let mut csv = run.csv_header();
    csv.push_str(
        "epoch,g,lr_first,lr_last,mean_l_cot,mean_l_json,fully_latent_targets,latent_valid\n",
    );
    for e in &report.epochs {
        writeln!(
            csv,
            "{},{},{:e},{:e},{},{},{},{}",
            e.epoch,
            e.g,
            e.lr_first,
            e.lr_last,
            e.mean_l_cot,
            e.mean_l_json,
            e.fully_latent_targets,
            fmt_opt(e.latent_valid)
        )?;
    }
    write_text(&report_dir.join("picd_epochs.csv"), &csv)?;
    let stamped = run.stamp(&report)?;
    write_json(&report_dir.join("picd_report.json"), &stamped)?;
    print_json(&json!({
        "checkpoint": checkpoint.display().to_string(),
        "final_latent_valid": report.final_latent_valid,
        "steps": report.steps,
        "t_star": report.t_star,
    }))?;
    Ok(Status::Done)
}

#[allow(clippy::too_many_arguments)]
fn train_dpo_cmd(
    run: &Run,
    pairs: &Path,
    init: Option<&Path>,
    order: Order,
    lr: f64,
    vanilla: bool,
    checkpoint: &Path,
    report: &Path,
) -> Result<Status> {
    let pairs: Vec<PairRecord> = read_jsonl(pairs)?;
    let init = match init {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let ck: Checkpoint = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))?;
            TabularPolicy::from_checkpoint(&ck)?
        }
        None => TabularPolicy::zeros(pair_vocab(&pairs), order),
    };
    let base = run.cfg.scdpo_config();
    let cfg = if vanilla { base.vanilla() } else { base };
    let (policy, dpo) = train_scdpo(&init, &pairs, &cfg, lr, run.cfg.seed)?;
    write_json(
        checkpoint,
        &serde_json::to_value(policy.to_checkpoint(&run.hash, run.cfg.seed))?,
    )?;
    let stamped = run.stamp(&json!({ "vanilla": vanilla, "scdpo": cfg, "result": dpo }))?;
    write_json(report, &stamped)?;
    print_json(&json!({
        "checkpoint": checkpoint.display().to_string(),
        "mean_gap_after": dpo.after.mean_gap,
        "mean_gap_before": dpo.before.mean_gap,
        "steps": dpo.steps,
    }))?;
    Ok(Status::Done)
}

fn eval_cmd(run: &Run, pred: &Path, truth: &Path, out: &Path) -> Result<Status> {
    let preds: Vec<PredictionRecord> = read_jsonl(pred)?;
    let truth: Vec<DatasetRecord> = read_jsonl(truth)?;
    let report = evaluate(&preds, &truth, &run.cfg.library()?, &run.cfg.eval_options());
    let stamped = run.stamp(&report)?;
    write_json(out, &stamped)?;
    print_json(&stamped)?;
    Ok(Status::Done)
}

fn diagnose_cmd(run: &Run, pred: &Path, out: &Path) -> Result<Status> {
    let preds: Vec<PredictionRecord> = read_jsonl(pred)?;
    let library = run.cfg.library()?;
    let latent = LatentVocab::default();
    let mut codes: BTreeMap<String, usize> = BTreeMap::new();
    let mut rows = Vec::new();
    let mut valid = 0;
    for p in &preds {
        let Some(d) = diagnose_prediction(p, &library, &latent) else {
            continue;
        };
        valid += usize::from(d.valid);
        if let Some(code) = d.code {
            *codes.entry(code.to_string()).or_default() += 1;
        }
        rows.push(
            json!({ "id": p.id, "valid": d.valid, "code": d.code, "step_count": d.step_count }),
        );
    }
    let rate = (!rows.is_empty()).then(|| valid as f64 / rows.len() as f64);
    let report = run.stamp(&json!({
        "predictions": preds.len(),
        "with_cot": rows.len(),
        "latent_valid": rate,
        "codes": codes,
        "records": rows,
    }))?;
    write_json(out, &report)?;
    print_json(&json!({ "codes": codes, "latent_valid": rate, "with_cot": rows.len() }))?;
    Ok(Status::Done)
}

fn schedule_dump(
    run: &Run,
    regime: LrRegime,
    epochs: Option<usize>,
    steps_per_epoch: usize,
    out: Option<PathBuf>,
) -> Result<Status> {
    let mut curriculum = run.cfg.curriculum.clone();
    if let Some(e) = epochs {
        curriculum.epochs = e;
    }
    curriculum.validate()?;
    anyhow::ensure!(steps_per_epoch > 0, "--steps-per-epoch must be positive");
    let csv =
        run.csv_header() + &schedule_csv(&schedule_rows(regime, &curriculum, steps_per_epoch));
    match out {
        Some(path) => write_text(&path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(Status::Done)
}
