//! The `sep` command line: data synthesis, backbone pretraining, prompt
//! tuning, evaluation, ablation grids and the gradient audit.

use std::fmt;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use sep_core::backbone::save_checkpoint;
use sep_core::data::{domain_shift_variant, save_dataset, Dataset};
use sep_core::eval::reports_csv;
use sep_core::experiment::{
    ablation_csv, ablation_grid, ablation_runner, gradient_audit, load_seed_prompts, prompt_file, sep_key, targets_csv,
    Context, EvalMode, ModeOutput, PromptSource, RunConfig, GRADCHECK_TOLERANCE,
};
use sep_core::sep::save_prompts;
use sep_core::training::{metrics_csv, TuneOutcome};
use sep_core::Error;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;
pub const EXIT_GRADCHECK: u8 = 5;

#[derive(Debug, Parser)]
#[command(name = "sep", version, about = "Self-enhanced prompt tuning on a synthetic benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the benchmark, transfer and shifted datasets plus the split manifest.
    Synth(Common),
    /// Contrastively pretrain the frozen backbone.
    Pretrain(Common),
    /// Tune prompts on base classes, one checkpoint per seed.
    Tune(Common),
    /// Evaluate under one protocol.
    Eval(EvalArgs),
    /// Run the ablation grids.
    Ablate(Common),
    /// Finite-difference audit of the full objective.
    Gradcheck(Common),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run config.
    #[arg(long)]
    pub config: PathBuf,
    /// Replaces the configured seed lists with this single seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Parent directory for run directories.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// base-to-new, cross-dataset, domain-shift or few-shot.
    #[arg(long, default_value = "base-to-new", value_parser = parse_mode)]
    pub mode: EvalMode,
}

fn parse_mode(s: &str) -> Result<EvalMode, String> {
    EvalMode::parse(s).ok_or_else(|| format!("unknown mode `{s}`; expected base-to-new, cross-dataset, domain-shift or few-shot"))
}

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    /// The audit ran but exceeded its tolerance; names the worst entry.
    GradCheck(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) => match e {
                Error::Config(_) | Error::Template(_) | Error::Contract(_) => EXIT_CONFIG,
                Error::Io { .. } | Error::Format { .. } => EXIT_IO,
                Error::Numeric(_) | Error::Divergence { .. } | Error::Dimension { .. } | Error::Bounds { .. } => {
                    EXIT_NUMERIC
                }
            },
            CliError::GradCheck(_) => EXIT_GRADCHECK,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::GradCheck(worst) => write!(f, "gradient check failed; worst entry {worst}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// A run directory with its `log.txt`.
pub struct Run {
    pub dir: PathBuf,
    log: File,
    echo: bool,
}

impl Run {
    /// Creates `<out>/<command>-<UTC timestamp>`, suffixed on collision.
    pub fn create(out: &Path, command: &str, echo: bool) -> CliResult<Self> {
        fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
        let mut dir = out.join(format!("{command}-{stamp}"));
        let mut n = 1;
        loop {
            match fs::create_dir(&dir) {
                Ok(()) => break,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    dir = out.join(format!("{command}-{stamp}-{n}"));
                    n += 1;
                }
                Err(e) => return Err(io_err(&dir, e)),
            }
        }
        let path = dir.join("log.txt");
        let log = File::create(&path).map_err(|e| io_err(&path, e))?;
        Ok(Self { dir, log, echo })
    }

    /// Appends one `key=value` line.
    pub fn log(&mut self, fields: &[(&str, String)]) -> CliResult<()> {
        let line = format_fields(fields);
        if self.echo {
            println!("{line}");
        }
        let path = self.dir.join("log.txt");
        writeln!(self.log, "{line}").map_err(|e| io_err(&path, e))
    }

    pub fn write(&self, name: &str, contents: &str) -> CliResult<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> CliResult<PathBuf> {
        let text = serde_json::to_string_pretty(value).expect("serializable output");
        self.write(name, &(text + "\n"))
    }
}

/// `key=value` pairs separated by spaces; values with whitespace, quotes or
/// `=` are quoted.
pub fn format_fields(fields: &[(&str, String)]) -> String {
    fields
        .iter()
        .map(|(k, v)| {
            if v.is_empty() || v.contains(|c: char| c.is_whitespace() || c == '"' || c == '=') {
                format!("{k}={v:?}")
            } else {
                format!("{k}={v}")
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn f(v: f64) -> String {
    format!("{v:.4}")
}

/// Loads the config and applies `--seed`.
pub fn resolve_config(common: &Common) -> CliResult<RunConfig> {
    let mut config = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.train.seeds = vec![seed];
        config.ablation.seeds = vec![seed];
    }
    config.validate()?;
    Ok(config)
}

/// Runs a parsed command and returns its run directory.
pub fn run(cli: &Cli, echo: bool) -> CliResult<PathBuf> {
    let (name, common) = match &cli.command {
        Command::Synth(c) => ("synth", c),
        Command::Pretrain(c) => ("pretrain", c),
        Command::Tune(c) => ("tune", c),
        Command::Eval(a) => ("eval", &a.common),
        Command::Ablate(c) => ("ablate", c),
        Command::Gradcheck(c) => ("gradcheck", c),
    };
    let config = resolve_config(common)?;
    let mut run = Run::create(&common.out, name, echo)?;
    run.write("config.json", &(config.to_json() + "\n"))?;
    run.log(&[
        ("command", name.to_string()),
        ("config", common.config.display().to_string()),
        ("run_dir", run.dir.display().to_string()),
    ])?;
    let started = Instant::now();
    let result = match &cli.command {
        Command::Synth(_) => synth(&config, &mut run),
        Command::Pretrain(_) => pretrain(&config, &mut run),
        Command::Tune(_) => tune(config, &mut run),
        Command::Eval(a) => eval(config, a.mode, &mut run),
        Command::Ablate(_) => ablate(config, &mut run),
        Command::Gradcheck(_) => gradcheck(&config, &mut run),
    };
    let elapsed = format!("{:.1}", started.elapsed().as_secs_f64());
    match &result {
        Ok(()) => run.log(&[("status", "ok".into()), ("elapsed_s", elapsed)])?,
        Err(e) => {
            // The run directory keeps the failure even if stderr is lost.
            let _ = run.log(&[
                ("status", "error".into()),
                ("exit_code", e.exit_code().to_string()),
                ("error", e.to_string()),
                ("elapsed_s", elapsed),
            ]);
        }
    }
    result.map(|()| run.dir)
}

fn dataset_entry(run: &mut Run, name: &str, dataset: &Dataset) -> CliResult<serde_json::Value> {
    let file = format!("{name}.sepdata");
    save_dataset(&run.dir.join(&file), dataset)?;
    let checksum = dataset.checksum();
    run.log(&[
        ("dataset", name.to_string()),
        ("examples", dataset.len().to_string()),
        ("classes", dataset.classes().len().to_string()),
        ("sha256", checksum.clone()),
    ])?;
    Ok(json!({ "name": name, "file": file, "examples": dataset.len(), "sha256": checksum }))
}

fn synth(config: &RunConfig, run: &mut Run) -> CliResult<()> {
    let benchmark = config.benchmark_dataset()?;
    let mut entries = vec![dataset_entry(run, "benchmark", &benchmark)?];
    let split = config.split(&benchmark)?;
    run.write_json("split.json", &split)?;
    run.log(&[
        ("split", "base_to_new".into()),
        ("base", split.base.len().to_string()),
        ("new", split.new.len().to_string()),
    ])?;
    entries.push(dataset_entry(run, "pretrain_corpus", &config.pretrain_corpus()?)?);
    for (name, d) in config.transfer_datasets()? {
        entries.push(dataset_entry(run, &name, &d)?);
    }
    for (i, s) in config.domain_shifts.iter().enumerate() {
        let shifted = domain_shift_variant(&benchmark, &s.shift, config.data_seed + 1 + i as u64)?;
        entries.push(dataset_entry(run, &format!("shift_{}", s.name), &shifted)?);
    }
    run.write_json("datasets.json", &entries)?;
    Ok(())
}

fn pretrain(config: &RunConfig, run: &mut Run) -> CliResult<()> {
    let (backbone, report) = config.pretrain_backbone()?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    run.write("pretrain_losses.csv", &csv)?;
    save_checkpoint(&run.dir.join("backbone.ckpt"), &backbone)?;
    let tail = &report.losses[report.losses.len().saturating_sub(10)..];
    run.log(&[
        ("steps", report.losses.len().to_string()),
        ("first_loss", f(report.losses.first().copied().unwrap_or(f64::NAN))),
        ("final_loss", f(tail.iter().sum::<f64>() / tail.len().max(1) as f64)),
        ("backbone_sha256", backbone.checksum()),
    ])?;
    Ok(())
}

fn log_trace(run: &mut Run, seed: u64, outcome: &TuneOutcome) -> CliResult<()> {
    run.write(&format!("metrics_seed{seed}.csv"), &metrics_csv(&outcome.metrics))?;
    for (epoch, loss) in outcome.epoch_losses().iter().enumerate() {
        run.log(&[("seed", seed.to_string()), ("epoch", epoch.to_string()), ("loss", f(*loss))])?;
    }
    Ok(())
}

fn tune(config: RunConfig, run: &mut Run) -> CliResult<()> {
    let ctx = Context::prepare(config)?;
    run.log(&[("backbone_sha256", ctx.backbone.checksum()), ("benchmark_sha256", ctx.benchmark.checksum())])?;
    let c = &ctx.config;
    let mut summary = Vec::new();
    for &seed in &c.train.seeds {
        let started = Instant::now();
        let outcome = ctx.tune_base(&c.sep, &c.loss, seed)?;
        log_trace(run, seed, &outcome)?;
        save_prompts(&run.dir.join(prompt_file(seed)), &outcome.prompts, &c.sep, &c.backbone)?;
        let last = outcome.metrics.last();
        summary.push(json!({
            "seed": seed,
            "steps": outcome.metrics.len(),
            "final_total": last.map(|m| m.total),
            "final_train_acc": last.map(|m| m.train_acc),
            "backbone_sha256": outcome.backbone_checksum,
            "runtime_s": started.elapsed().as_secs_f64(),
        }));
        run.log(&[
            ("seed", seed.to_string()),
            ("prompts", prompt_file(seed)),
            ("final_loss", f(last.map_or(f64::NAN, |m| m.total))),
        ])?;
    }
    run.write_json("tune.json", &json!({ "key": sep_key(&c.sep), "seeds": summary }))?;
    Ok(())
}

fn eval(config: RunConfig, mode: EvalMode, run: &mut Run) -> CliResult<()> {
    let loaded = match &config.paths.prompts {
        Some(dir) if mode == EvalMode::BaseToNew => Some(load_seed_prompts(dir, &config)?),
        Some(_) => {
            return Err(Error::Config(format!(
                "paths.prompts holds base-class prompts and only applies to base-to-new, not {}",
                mode.name()
            ))
            .into())
        }
        None => None,
    };
    let ctx = Context::prepare(config)?;
    let c = &ctx.config;
    run.log(&[
        ("mode", mode.name().into()),
        ("backbone_sha256", ctx.backbone.checksum()),
        ("benchmark_sha256", ctx.benchmark.checksum()),
    ])?;
    let (zero, _) = ctx.evaluate(mode, PromptSource::ZeroShot)?;
    let source = match &loaded {
        Some(map) => PromptSource::Loaded(map),
        None => PromptSource::Tune,
    };
    let (tuned, traces) = ctx.evaluate(mode, source)?;
    for (seed, outcome) in &traces {
        log_trace(run, *seed, outcome)?;
    }
    match (zero, tuned) {
        (ModeOutput::BaseToNew(z), ModeOutput::BaseToNew(t)) => {
            for r in [&z, &t] {
                run.log(&[
                    ("key", r.key.clone()),
                    ("base", f(r.base)),
                    ("new", f(r.new)),
                    ("h", f(r.h)),
                ])?;
            }
            let reports = [z, t];
            run.write("eval.csv", &reports_csv(&reports))?;
            run.write_json("eval.json", &json!({ "mode": mode.name(), "reports": reports }))?;
        }
        (ModeOutput::Targets(z), ModeOutput::Targets(t)) => {
            let groups = vec![("zero_shot".to_string(), z), (sep_key(&c.sep), t)];
            for (key, rows) in &groups {
                for r in rows {
                    run.log(&[
                        ("key", key.clone()),
                        ("seed", r.seed.to_string()),
                        ("target", r.target.clone()),
                        ("accuracy", f(r.accuracy)),
                    ])?;
                }
            }
            run.write("eval.csv", &targets_csv(&groups))?;
            let json_groups: Vec<_> = groups
                .iter()
                .map(|(key, rows)| json!({ "key": key, "results": rows }))
                .collect();
            run.write_json("eval.json", &json!({ "mode": mode.name(), "groups": json_groups }))?;
        }
        _ => unreachable!("both evaluations ran the same mode"),
    }
    Ok(())
}

fn ablate(config: RunConfig, run: &mut Run) -> CliResult<()> {
    let ctx = Context::prepare(config)?;
    let cells = ablation_grid(&ctx.config);
    run.log(&[
        ("cells", cells.len().to_string()),
        ("seeds", format!("{:?}", ctx.config.ablation.seeds)),
        ("benchmark_sha256", ctx.benchmark.checksum()),
    ])?;
    let mut lines = Vec::new();
    let rows = ablation_runner(&ctx, &cells, &ctx.config.ablation.seeds, |row| {
        let opt = |v: Option<f64>| v.map(f).unwrap_or_else(|| "-".into());
        lines.push(vec![
            ("table", row.table.name().to_string()),
            ("key", row.key.clone()),
            ("seed", row.seed.to_string()),
            ("h", opt(row.h)),
            ("status", row.status.clone()),
        ]);
    });
    for line in &lines {
        run.log(line)?;
    }
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    run.log(&[("rows", rows.len().to_string()), ("failed", failed.to_string())])?;
    run.write("ablation.csv", &ablation_csv(&rows))?;
    run.write_json("ablation.json", &rows)?;
    Ok(())
}

fn gradcheck(config: &RunConfig, run: &mut Run) -> CliResult<()> {
    let seed = config.train.seeds[0];
    let audit = gradient_audit(config, seed)?;
    run.write_json("gradcheck.json", &audit)?;
    let worst = audit.worst.clone().unwrap_or_else(|| "-".into());
    run.log(&[
        ("checked", audit.checked.to_string()),
        ("max_rel_error", format!("{:.3e}", audit.max_rel_error)),
        ("max_abs_error", format!("{:.3e}", audit.max_abs_error)),
        ("worst", worst.clone()),
        ("frozen_with_grad", audit.frozen_with_grad.len().to_string()),
    ])?;
    if audit.passes(GRADCHECK_TOLERANCE) {
        Ok(())
    } else if let Some(name) = audit.frozen_with_grad.first() {
        Err(CliError::GradCheck(format!("{name} (frozen, received a gradient)")))
    } else {
        Err(CliError::GradCheck(format!("{worst} (relative error {:.3e})", audit.max_rel_error)))
    }
}
