//! `vtp`: pre-train, fine-tune, evaluate and sweep visual tokenizers.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vtp_core::config::Config;
use vtp_core::data::DatasetManifest;
use vtp_core::eval::{evaluate, ReferenceExtractor};
use vtp_core::sweep::{self, Axis, Harness, Registry, SweepOptions, SweepSpec};
use vtp_core::trainer::{load_checkpoint, metrics_path, Trainer};
use vtp_core::{Error, Result};

#[derive(Parser)]
#[command(name = "vtp", version, about = "Visual tokenizer pre-training and scaling studies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stage-1 joint pre-training.
    Pretrain {
        /// Root config JSON; defaults apply to omitted fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run directory for the checkpoint and metrics.jsonl.
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many total steps (defaults to the full budget).
        #[arg(long)]
        steps: Option<u64>,
        /// Save a checkpoint every N steps; 0 saves only at the end.
        #[arg(long, default_value_t = 0)]
        checkpoint_every: u64,
    },
    /// Stage-2 decoder fine-tuning with the adversarial loss; the encoder is frozen.
    FinetuneGan {
        /// Stage-1 checkpoint directory.
        #[arg(long)]
        from: PathBuf,
        /// Stage-2 training settings come from this config's `train` section.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue a stage-2 run from this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Reconstruction and understanding metrics for a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset manifest; defaults to the checkpoint's dataset.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Cache directory for the reference feature extractor.
        #[arg(long, default_value = ".vtp-cache")]
        cache: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains the fixed generation harness on a tokenizer's latents and scores it.
    TrainDit {
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = ".vtp-cache")]
        cache: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs (or lists with --dry-run) every pending point of a sweep.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        /// Registry directory holding run records.
        #[arg(long, default_value = "registry")]
        registry: PathBuf,
        /// Print the job list without training or writing anything.
        #[arg(long)]
        dry_run: bool,
        /// Re-run completed points and store them under new ids.
        #[arg(long)]
        force_new_id: bool,
        /// Concurrent points (overrides `jobs` in the sweep file).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// CSV, SVG plots and trend summary for one sweep axis.
    Report {
        #[arg(long, default_value = "registry")]
        registry: PathBuf,
        /// compute | data | encoder | decoder | objective
        #[arg(long)]
        axis: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print or check configuration documents.
    Config {
        /// Print the default root config.
        #[arg(long)]
        print_defaults: bool,
        /// Print the default sweep spec.
        #[arg(long)]
        print_sweep_defaults: bool,
        /// Validate a root config file.
        #[arg(long)]
        check: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e)),
        _ => Ok(()),
    }
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(v)?).map_err(|e| Error::io(path, e))
}

/// Runs `tr` to `until`, appending metrics to `out/metrics.jsonl` and saving
/// checkpoints into `out`.
fn drive(tr: &mut Trainer, out: &Path, until: Option<u64>, every: u64) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mpath = metrics_path(out);
    let mut metrics = OpenOptions::new().create(true).append(true).open(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let target = until.unwrap_or(u64::MAX).min(tr.total_steps());
    let start = tr.state.step;
    while tr.state.step < target {
        let next = if every > 0 { ((tr.state.step / every) + 1) * every } else { target };
        tr.run(next.min(target), Some(&mut metrics as &mut dyn Write), Some(out))?;
        tr.save(out)?;
        log::info!("step {} / {}", tr.state.step, tr.total_steps());
    }
    if tr.state.step == start {
        tr.save(out)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain {
            config,
            out,
            resume,
            steps,
            checkpoint_every,
        } => {
            let mut tr = match resume {
                Some(ckpt) => load_checkpoint(&ckpt)?,
                None => {
                    let cfg = load_config(config.as_deref())?;
                    Trainer::new(cfg.model, cfg.train, cfg.dataset)?
                }
            };
            drive(&mut tr, &out, steps, checkpoint_every)?;
            print_json(&serde_json::json!({ "out": out, "step": tr.state.step, "flops": tr.state.flops_cum }))
        }
        Command::FinetuneGan { from, config, out, resume, steps } => {
            let mut tr = match resume {
                Some(ckpt) => load_checkpoint(&ckpt)?,
                None => {
                    let cfg = load_config(config.as_deref())?;
                    load_checkpoint(&from)?.into_finetune(cfg.train)?
                }
            };
            drive(&mut tr, &out, steps, 0)?;
            print_json(&serde_json::json!({ "out": out, "step": tr.state.step, "flops": tr.state.flops_cum }))
        }
        Command::Eval {
            ckpt,
            dataset,
            config,
            cache,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let tr = load_checkpoint(&ckpt)?;
            let ds = match dataset {
                Some(p) => DatasetManifest::load(&p)?.open()?,
                None => tr.dataset.clone(),
            };
            let harness = cfg.harness();
            let hds = harness.dataset.open()?;
            let extractor = ReferenceExtractor::load_or_train(&cache, &harness.extractor, &serde_json::to_string(&harness.dataset)?, &hds)?;
            let record = evaluate(&tr.model, &tr.vocab, &ds, &extractor, &cfg.eval)?;
            write_json(&out, &record)?;
            print_json(&record)
        }
        Command::TrainDit { tokenizer, config, cache, out } => {
            let cfg = load_config(config.as_deref())?;
            let tr = load_checkpoint(&tokenizer)?;
            let harness = Harness::prepare(&cfg.harness(), &cache)?;
            let train = vtp_core::genharness::DatasetSource::prefix(&harness.dataset, cfg.dit.train_images);
            let record = vtp_core::genharness::train_and_score(
                &tr.model,
                &train,
                &vtp_core::genharness::SampleSource(&harness.real),
                &cfg.dit,
                harness.extractor.as_ref(),
            )?;
            let doc = serde_json::json!({
                record.metric_name(): record.frechet_gen,
                "record": record,
            });
            write_json(&out, &doc)?;
            print_json(&doc)
        }
        Command::Sweep {
            spec,
            registry,
            dry_run,
            force_new_id,
            jobs,
        } => {
            let spec = SweepSpec::load(&spec)?;
            let reg = Registry::at(registry);
            let opts = SweepOptions { dry_run, force_new_id, jobs };
            let outcome = sweep::run_sweep(&spec, &reg, &opts)?;
            if dry_run {
                return print_json(&serde_json::json!({ "dry_run": true, "jobs": outcome.plan }));
            }
            let failed: Vec<_> = outcome.new_records.iter().filter(|r| !r.is_ok()).map(|r| &r.point_id).collect();
            print_json(&serde_json::json!({
                "planned": outcome.plan.len(),
                "ran": outcome.new_records.len(),
                "failed": failed,
            }))
        }
        Command::Report { registry, axis, out } => {
            let axis = Axis::parse(&axis)?;
            let records = Registry::at(registry).records()?;
            let summary = sweep::report(&records, axis, &out)?;
            for line in &summary.lines {
                let corr: Vec<String> = line.spearman.iter().map(|(k, v)| format!("{k} ρ={v}")).collect();
                eprintln!("{}: {}", line.label, corr.join(", "));
            }
            print_json(&summary)
        }
        Command::Config {
            print_defaults,
            print_sweep_defaults,
            check,
        } => {
            if let Some(p) = check {
                let cfg = Config::load(&p)?;
                return print_json(&serde_json::json!({ "valid": true, "schema_version": cfg.schema_version }));
            }
            if print_sweep_defaults {
                return print_json(&SweepSpec::default());
            }
            if print_defaults {
                return print_json(&Config::default());
            }
            Err(Error::InvalidArgument("config needs --print-defaults, --print-sweep-defaults or --check <file>".into()))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            if e.use_stderr() {
                eprintln!("{}", serde_json::json!({ "error": "usage", "message": e.kind().to_string() }));
            }
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
