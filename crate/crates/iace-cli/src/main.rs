//! `iace` — data generation, training, evaluation, ablation, gradient
//! checking, and report emission for the bimanual action-chunking policies.
//!
//! Exit codes: 0 success, 1 usage, 2 integrity/contract failure, 3 gradient
//! check failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use iace_core::harness::{
    ablation_direction, cmd_gen_data, evaluate, gradcheck_all, load_dataset, parse_train_log,
    run_ablation, train, write_reports, EvalReport, HarnessError, TrainConfig,
};
use iace_core::policy::{load_checkpoint, PolicyVariant};
use iace_core::sim::{task_by_name, SimConfig};

#[derive(Parser)]
#[command(
    name = "iace",
    version,
    about = "Bimanual action-chunking policies: train, evaluate, and ablate at desk scale"
)]
struct Cli {
    /// Root directory prepended to relative output paths.
    #[arg(long, global = true, env = "IACE_OUT_ROOT")]
    out_root: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate expert demonstrations and write a training dataset.
    GenData(GenDataArgs),
    /// Train a policy on a dataset manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint with closed-loop rollouts.
    Eval(EvalArgs),
    /// Train and evaluate the full four-variant x two-task grid.
    Ablate(AblateArgs),
    /// Verify analytic gradients of all four variants by finite differences.
    Gradcheck(GradcheckArgs),
    /// Emit the phase-column CSV table and SVG charts from saved reports.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Task name: handover or bar_lift.
    #[arg(long)]
    task: String,
    #[arg(long, default_value_t = 50)]
    count: usize,
    /// Gaussian noise on expert joint targets (radians).
    #[arg(long = "noise_scale", default_value_t = 0.01)]
    noise_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for episodes, manifest, and statistics.
    #[arg(long)]
    out: PathBuf,
}

/// Every TrainConfig field as an optional flag of the same name; flags
/// override the config file, which overrides the defaults.
#[derive(Args, Clone, Default)]
struct ConfigFlags {
    /// Line-oriented key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "learning_rate")]
    learning_rate: Option<f64>,
    #[arg(long = "weight_decay")]
    weight_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "steps_per_epoch")]
    steps_per_epoch: Option<usize>,
    #[arg(long = "batch_size")]
    batch_size: Option<usize>,
    #[arg(long = "kl_weight")]
    kl_weight: Option<f64>,
    #[arg(long = "chunk_len")]
    chunk_len: Option<usize>,
    #[arg(long = "d_model")]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long = "ffn_dim")]
    ffn_dim: Option<usize>,
    #[arg(long = "enc_depth")]
    enc_depth: Option<usize>,
    #[arg(long = "iace_depth")]
    iace_depth: Option<usize>,
    #[arg(long = "dec_depth")]
    dec_depth: Option<usize>,
    #[arg(long = "cvae_depth")]
    cvae_depth: Option<usize>,
    #[arg(long = "z_dim")]
    z_dim: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// single-iace | split-iace | single-plain | split-plain
    #[arg(long)]
    variant: Option<String>,
    #[arg(long = "learned_pos")]
    learned_pos: Option<bool>,
    #[arg(long = "ensemble_decay")]
    ensemble_decay: Option<f64>,
    #[arg(long = "ensemble_stride")]
    ensemble_stride: Option<usize>,
    #[arg(long = "checkpoint_every")]
    checkpoint_every: Option<usize>,
    #[arg(long = "eval_episodes")]
    eval_episodes: Option<usize>,
}

impl ConfigFlags {
    fn resolve(&self) -> Result<TrainConfig, CliError> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            cfg.load_file(path).map_err(usage)?;
        }
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = self.$field {
                    cfg.$field = v;
                }
            };
        }
        set!(learning_rate);
        set!(weight_decay);
        set!(epochs);
        set!(steps_per_epoch);
        set!(batch_size);
        set!(kl_weight);
        set!(chunk_len);
        set!(d_model);
        set!(heads);
        set!(ffn_dim);
        set!(enc_depth);
        set!(iace_depth);
        set!(dec_depth);
        set!(cvae_depth);
        set!(z_dim);
        set!(seed);
        set!(learned_pos);
        set!(ensemble_decay);
        set!(ensemble_stride);
        set!(checkpoint_every);
        set!(eval_episodes);
        if let Some(v) = &self.variant {
            cfg.variant = PolicyVariant::parse(v).map_err(|e| CliError::Usage(e.to_string()))?;
        }
        cfg.validate().map_err(usage)?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest written by gen-data.
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Training-log output path (epoch-mean losses).
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    task: String,
    /// Number of evaluation episodes (falls back to the config value).
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the evaluation report.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Args)]
struct AblateArgs {
    /// Dataset manifests as task=path pairs (repeatable).
    #[arg(long = "manifest", value_parser = parse_task_manifest)]
    manifests: Vec<(String, PathBuf)>,
    /// Comma-separated training seeds.
    #[arg(long, default_value = "0,1,2")]
    seeds: String,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Self-test: corrupt one analytic gradient; the check must then fail.
    #[arg(long = "inject_fault", default_value_t = false)]
    inject_fault: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Evaluation report files.
    #[arg(long = "reports", num_args = 0.., value_name = "FILE")]
    reports: Vec<PathBuf>,
    /// Training log files (loss curves).
    #[arg(long = "logs", num_args = 0.., value_name = "FILE")]
    logs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_task_manifest(s: &str) -> Result<(String, PathBuf), String> {
    s.split_once('=')
        .map(|(t, p)| (t.to_string(), PathBuf::from(p)))
        .ok_or_else(|| format!("expected task=path, got '{s}'"))
}

enum CliError {
    Usage(String),
    Harness(HarnessError),
}

fn usage(e: HarnessError) -> CliError {
    CliError::Usage(e.to_string())
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        CliError::Harness(e)
    }
}

impl From<iace_core::policy::PolicyError> for CliError {
    fn from(e: iace_core::policy::PolicyError) -> Self {
        CliError::Harness(HarnessError::Policy(e))
    }
}

impl From<iace_core::sim::SimError> for CliError {
    fn from(e: iace_core::sim::SimError) -> Self {
        CliError::Harness(HarnessError::Sim(e))
    }
}

fn rooted(root: &Option<PathBuf>, path: &Path) -> PathBuf {
    match root {
        Some(r) if path.is_relative() => r.join(path),
        _ => path.to_path_buf(),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap handles --help/--version as "errors" with exit 0
            if e.use_stderr() {
                eprint!("{e}");
                std::process::exit(1);
            }
            print!("{e}");
            std::process::exit(0);
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            std::process::exit(1);
        }
        Err(CliError::Harness(e)) => {
            let code = match &e {
                HarnessError::GradCheck(_) => 3,
                _ => 2,
            };
            eprintln!("error: {e}");
            std::process::exit(code);
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let root = cli.out_root;
    match cli.cmd {
        Cmd::GenData(args) => {
            let out = rooted(&root, &args.out);
            let manifest =
                cmd_gen_data(&args.task, args.count, args.noise_scale, args.seed, &out)?;
            println!(
                "wrote {} episodes for {} to {}",
                args.count,
                args.task,
                manifest.display()
            );
        }
        Cmd::Train(args) => {
            let cfg = args.flags.resolve()?;
            let data = load_dataset(&args.manifest)?;
            let out = rooted(&root, &args.out);
            let log = args.log.map(|l| rooted(&root, &l));
            println!(
                "training {} on {} episodes ({} epochs x {} steps, batch {})",
                cfg.variant,
                data.episodes.len(),
                cfg.epochs,
                cfg.steps_per_epoch,
                cfg.batch_size
            );
            let every = (cfg.epochs / 10).max(1);
            let outcome = train(&cfg, &data, &out, log.as_deref(), |e| {
                if e.epoch % every == 0 || e.epoch + 1 == cfg.epochs {
                    println!(
                        "epoch {:>4}  loss {:.5}  l1 {:.5}  kl {:.5}",
                        e.epoch, e.mean_loss, e.mean_l1, e.mean_kl
                    );
                }
            })?;
            println!("checkpoint written to {}", outcome.checkpoint.display());
        }
        Cmd::Eval(args) => {
            let cfg = {
                let mut c = args.flags.resolve()?;
                if let Some(n) = args.episodes {
                    c.eval_episodes = n;
                }
                c
            };
            let model = load_checkpoint(&args.checkpoint)?;
            let task = task_by_name(&args.task)?;
            // the rollout must use the checkpoint's own chunk horizon
            let mut run_cfg = cfg.clone();
            run_cfg.chunk_len = model.config.chunk_len;
            let report = evaluate(
                &model,
                &task,
                cfg.eval_episodes,
                args.seed,
                &run_cfg,
                &SimConfig::default(),
            )?;
            print_report(&report);
            if let Some(path) = args.report {
                let path = rooted(&root, &path);
                report.save(&path)?;
                println!("report written to {}", path.display());
            }
        }
        Cmd::Ablate(args) => {
            if args.manifests.is_empty() {
                return Err(CliError::Usage(
                    "ablate needs at least one --manifest task=path".into(),
                ));
            }
            let cfg = args.flags.resolve()?;
            let seeds: Vec<u64> = args
                .seeds
                .split(',')
                .map(|s| s.trim().parse::<u64>())
                .collect::<Result<_, _>>()
                .map_err(|_| CliError::Usage(format!("bad seed list '{}'", args.seeds)))?;
            let out = rooted(&root, &args.out);
            let reports = run_ablation(&cfg, &args.manifests, &seeds, &out, |run, report| {
                println!(
                    "{} / {} / seed {} -> {:.1}% success",
                    run.task,
                    run.variant,
                    run.seed,
                    report.success_rate()
                );
            })?;
            for task in ["handover", "bar_lift"] {
                if reports.iter().any(|r| r.task == task) {
                    let (with, without) = ablation_direction(&reports, task);
                    println!(
                        "{task}: mean success with IACE {with:.1}% vs without {without:.1}%"
                    );
                }
            }
            println!("grid written to {}", out.join("grid.csv").display());
        }
        Cmd::Gradcheck(args) => {
            let results = gradcheck_all(args.epsilon, args.tolerance, args.inject_fault)?;
            let mut all_pass = true;
            for r in &results {
                println!("{:<13} {}", r.variant.label(), r.report.summary());
                for e in &r.report.entries {
                    if e.max_rel_err >= args.tolerance {
                        println!("  {:<40} {:.3e}", e.name, e.max_rel_err);
                    }
                }
                all_pass &= r.report.pass;
            }
            if !all_pass {
                return Err(CliError::Harness(HarnessError::GradCheck(
                    "one or more variants failed the finite-difference check".into(),
                )));
            }
        }
        Cmd::Report(args) => {
            let out = rooted(&root, &args.out);
            let mut reports = Vec::new();
            for p in &args.reports {
                reports.push(EvalReport::load(p)?);
            }
            let mut logs = Vec::new();
            for p in &args.logs {
                let name = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "train".into());
                logs.push((name, parse_train_log(p)?));
            }
            write_reports(&reports, &logs, &out)?;
            println!("reports written to {}", out.display());
        }
    }
    Ok(())
}

fn print_report(report: &EvalReport) {
    println!(
        "{} / {} over {} episodes: {:.1}% overall",
        report.task,
        report.variant,
        report.episodes,
        report.success_rate()
    );
    for (name, _) in &report.subscore_counts {
        if let Some(rate) = report.subscore_rate(name) {
            println!("  {name:<12} {rate:.1}%");
        }
    }
    println!(
        "  mean per-action inference latency: {:.4} s",
        report.mean_latency_s
    );
}
