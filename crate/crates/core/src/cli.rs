//! Command-line front end: `prepare`, `train`, `evaluate`, `simulate` and
//! the `synth` data generator.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{switch, RunConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::prepared::{load_prepared, prepare, save_prepared, PrepareOptions, PreparedData};
use crate::streaming::{run_simulation, stream_events, write_predictions};
use crate::synth::{generate, write_csvs, SynthKind, SynthSpec};
use crate::training::{evaluate, load_checkpoint, load_checkpoint_expecting, LogRow, MetricsReport, Trainer};

pub const CHECKPOINT_FILE: &str = "checkpoint.ktc";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const CONFIG_FILE: &str = "effective_config.txt";
pub const RUN_LOG: &str = "run.log";
pub const PREDICTIONS_FILE: &str = "predictions.csv";

#[derive(Debug, Parser)]
#[command(name = "timekt", version, about = "Time-weighted transformer for knowledge tracing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ingest raw CSVs into a prepared-data directory.
    Prepare(PrepareArgs),
    /// Train a model on a prepared-data directory.
    Train(TrainArgs),
    /// Offline evaluation of a checkpoint on the validation split.
    Evaluate(EvaluateArgs),
    /// Replay the validation split as a grouped stream.
    Simulate(SimulateArgs),
    /// Write a synthetic dataset in the raw CSV layout.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// `key=value` config file; command-line flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for splitting, initialisation and batching.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Any config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory holding train.csv, questions.csv and lectures.csv.
    #[arg(long)]
    pub raw: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Prepared-data directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Time-decayed attention on or off.
    #[arg(long, value_name = "on|off")]
    pub time_weighted: Option<String>,
    /// Training window length.
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Evaluation window length; defaults to `eval_seq_len`.
    #[arg(long)]
    pub seq_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub group_size: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value = "skill")]
    pub kind: String,
    #[arg(long, default_value_t = 100)]
    pub users: usize,
    #[arg(long, default_value_t = 200)]
    pub interactions: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses arguments, runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Prepare(a) => command_prepare(&a).map(|_| ()),
        Command::Train(a) => command_train(&a).map(|_| ()),
        Command::Evaluate(a) => command_evaluate(&a).map(|_| ()),
        Command::Simulate(a) => command_simulate(&a).map(|_| ()),
        Command::Synth(a) => command_synth(&a),
    }
}

fn split_kv(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{s}`")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Defaults, then the file, then `--set`, then dedicated flags.
fn effective_config(common: &Common, flags: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut overrides = common.set.iter().map(|s| split_kv(s)).collect::<Result<Vec<_>>>()?;
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    for (k, v) in flags {
        if let Some(v) = v {
            overrides.push((k.to_string(), v.clone()));
        }
    }
    RunConfig::load(common.config.as_deref(), &overrides)
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let dir = common
        .out
        .clone()
        .ok_or_else(|| Error::Config("--out is required".into()))?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// Dumps the effective config next to the artifacts and starts the run
/// log with the config source, seed and input digests.
fn record_run(dir: &Path, command: &str, common: &Common, cfg: &RunConfig, inputs: &[(String, String)]) -> Result<()> {
    let rendered = cfg.render();
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, &rendered).map_err(|e| Error::io(&path, e))?;
    let mut log = format!(
        "command={command}\nconfig_file={}\nseed={}\n",
        common
            .config
            .as_ref()
            .map_or("(defaults)".into(), |p| p.display().to_string()),
        cfg.train.seed
    );
    for (name, digest) in inputs {
        log.push_str(&format!("input.{name}={digest}\n"));
    }
    log.push_str(&rendered);
    let path = dir.join(RUN_LOG);
    fs::write(&path, &log).map_err(|e| Error::io(&path, e))?;
    eprint!("{rendered}");
    Ok(())
}

fn append_log(dir: &Path, line: &str) -> Result<()> {
    let path = dir.join(RUN_LOG);
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
}

fn print_metrics(m: &MetricsReport) {
    println!(
        "auc={}\naccuracy={}\nloss={}\ncount={}",
        m.auc, m.accuracy, m.loss, m.count
    );
}

pub fn command_prepare(a: &PrepareArgs) -> Result<PreparedData> {
    let cfg = effective_config(&a.common, &[])?;
    let dir = out_dir(&a.common)?;
    let opts = PrepareOptions {
        holdout_fraction: cfg.data.holdout_fraction,
        new_user_fraction: cfg.data.new_user_fraction,
        seed: cfg.train.seed,
    };
    let mut data = prepare(
        &a.raw.join("train.csv"),
        &a.raw.join("questions.csv"),
        &a.raw.join("lectures.csv"),
        opts,
    )?;
    data.manifest = save_prepared(&dir, &data)?;
    record_run(&dir, "prepare", &a.common, &cfg, &data.manifest.inputs)?;
    let m = &data.manifest;
    println!(
        "users={}\nrows={}\nquestions={}\nlectures={}\ntrain_rows={}\nvalid_rows={}",
        m.users, m.rows, m.questions, m.lectures, m.train_rows, m.valid_rows
    );
    Ok(data)
}

pub fn command_train(a: &TrainArgs) -> Result<Option<MetricsReport>> {
    let cfg = effective_config(
        &a.common,
        &[
            ("max_steps", a.max_steps.map(|v| v.to_string())),
            ("time_weighted", a.time_weighted.clone()),
            ("seq_len", a.seq_len.map(|v| v.to_string())),
        ],
    )?;
    let data = load_prepared(&a.data)?;
    let dir = out_dir(&a.common)?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    let metrics = dir.join(METRICS_FILE);

    let mut trainer = if a.resume {
        let c = load_checkpoint_expecting(&ckpt, &cfg.model.digest(&data.catalog))?;
        let state = c
            .trainer
            .ok_or_else(|| Error::Checkpoint("checkpoint has no trainer state to resume".into()))?;
        append_log(&dir, &format!("resume_step={}", state.step))?;
        Trainer::resume(c.model, state, cfg.train.clone(), &data.train, &data.valid)?
    } else {
        record_run(&dir, "train", &a.common, &cfg, &data.manifest.inputs)?;
        append_log(
            &dir,
            &format!("time_weighted_toggle={}", switch(cfg.model.time_weighted)),
        )?;
        fs::write(&metrics, format!("{}\n", LogRow::HEADER)).map_err(|e| Error::io(&metrics, e))?;
        let model = Model::new(cfg.model.clone(), data.catalog.clone(), cfg.train.seed)?;
        Trainer::new(model, cfg.train.clone(), &data.train, &data.valid)?
    };

    let mut write_err = None;
    let outcome = trainer.run(Some(&ckpt), |row| {
        eprintln!("{}", row.line());
        let r = fs::OpenOptions::new()
            .append(true)
            .open(&metrics)
            .and_then(|mut f| writeln!(f, "{}", row.line()));
        if let Err(e) = r {
            write_err.get_or_insert(Error::io(&metrics, e));
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    if outcome.history.is_empty() {
        // Nothing was due for evaluation; still leave a loadable checkpoint.
        crate::training::save_checkpoint(&ckpt, &trainer.model, Some(&trainer.state))?;
    }
    match outcome.final_metrics {
        Some(m) => {
            println!("final_val_auc={}\nfinal_val_accuracy={}", m.auc, m.accuracy);
            append_log(
                &dir,
                &format!("final_val_auc={}\nfinal_val_accuracy={}", m.auc, m.accuracy),
            )?;
        }
        None => println!("final_val_auc=nan\nfinal_val_accuracy=nan"),
    }
    if outcome.stopped_early {
        append_log(&dir, &format!("stopped_early_at_step={}", trainer.state.step))?;
    }
    Ok(outcome.final_metrics)
}

fn load_model(
    common: &Common,
    checkpoint: &Path,
    data: &PreparedData,
    flags: &[(&str, Option<String>)],
) -> Result<(RunConfig, Model)> {
    let cfg = effective_config(common, flags)?;
    let model = if common.config.is_some() || !common.set.is_empty() {
        load_checkpoint_expecting(checkpoint, &cfg.model.digest(&data.catalog))?.model
    } else {
        load_checkpoint(checkpoint)?.model
    };
    Ok((cfg, model))
}

pub fn command_evaluate(a: &EvaluateArgs) -> Result<MetricsReport> {
    let data = load_prepared(&a.data)?;
    let (cfg, model) = load_model(&a.common, &a.checkpoint, &data, &[])?;
    let seq_len = a.seq_len.unwrap_or(cfg.train.eval_seq_len);
    if seq_len == 0 {
        return Err(Error::Config("--seq-len must be >= 1".into()));
    }
    let m = evaluate(&model, &data.valid, seq_len)?;
    println!("seq_len={seq_len}");
    print_metrics(&m);
    if let Some(dir) = &a.common.out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("evaluate_{seq_len}.txt"));
        let text = format!(
            "seq_len={seq_len}\nauc={}\naccuracy={}\nloss={}\ncount={}\n",
            m.auc, m.accuracy, m.loss, m.count
        );
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(m)
}

/// Simulation metrics plus the offline metrics on the same rows.
pub struct SimulationSummary {
    pub streaming: MetricsReport,
    pub offline: MetricsReport,
    pub rows_per_second: f64,
}

pub fn command_simulate(a: &SimulateArgs) -> Result<SimulationSummary> {
    let data = load_prepared(&a.data)?;
    let (cfg, model) = load_model(
        &a.common,
        &a.checkpoint,
        &data,
        &[
            ("max_group_size", a.group_size.map(|v| v.to_string())),
            ("stream_window", a.window.map(|v| v.to_string())),
        ],
    )?;
    let dir = out_dir(&a.common)?;
    record_run(&dir, "simulate", &a.common, &cfg, &data.manifest.inputs)?;
    let (histories, events) = stream_events(&data.valid);
    let out = run_simulation(
        &model,
        &histories,
        &events,
        cfg.data.max_group_size,
        cfg.data.stream_window,
    )?;
    write_predictions(&dir.join(PREDICTIONS_FILE), &out.predictions)?;
    let offline = evaluate(&model, &data.valid, cfg.data.stream_window)?;
    let gap = (out.metrics.auc - offline.auc).abs();
    print_metrics(&out.metrics);
    println!(
        "offline_auc={}\nauc_gap={gap}\ngroups={}\nrows_per_second={:.1}",
        offline.auc, out.groups, out.rows_per_second
    );
    append_log(
        &dir,
        &format!(
            "stream_auc={}\noffline_auc={}\nauc_gap={gap}\ngroups={}\nrows_per_second={}",
            out.metrics.auc, offline.auc, out.groups, out.rows_per_second
        ),
    )?;
    Ok(SimulationSummary {
        streaming: out.metrics,
        offline,
        rows_per_second: out.rows_per_second,
    })
}

pub fn command_synth(a: &SynthArgs) -> Result<()> {
    let spec = SynthSpec::new(SynthKind::parse(&a.kind)?, a.users, a.interactions, a.seed);
    let data = generate(&spec)?;
    write_csvs(&data, &a.out)?;
    println!("rows={}\nusers={}", data.interactions.len(), a.users);
    Ok(())
}
