//! `fgr`: data generation, filtering, training, evaluation and reporting.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use fgr_core::checkpoint;
use fgr_core::data::{load_cifar10, Corruption, SynthConfig};
use fgr_core::filter::filter_image;
use fgr_core::harness::{
    evaluate, finetune_fgr, read_csv, run_ablation, sweep, train_scratch, train_stage1, write_csv, AblationRow, Dataset,
    MetricsRow, Mode, StepLog, SweepParam, SweepRow, TrainConfig,
};
use fgr_core::image::ImageU8;
use fgr_core::rectify::{conflict_stats, StepRecord};

#[derive(Parser)]
#[command(name = "fgr", version, about = "Frequency-aware gradient rectification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shape/texture dataset, or ingest CIFAR-10 batches.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Training images; validation gets n/10 and each test split n/3.
        #[arg(long, default_value_t = 6000)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 0.03)]
        texture_strength: f64,
        /// Per-pixel Gaussian noise in 8-bit levels.
        #[arg(long, default_value_t = 6.0)]
        noise: f64,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        /// Image side in pixels (a multiple of 8).
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// CIFAR-10 binary batch files; names containing `test` form the test split.
        #[arg(long, num_args = 1..)]
        cifar: Vec<PathBuf>,
    },
    /// Low-pass filter a binary PPM image.
    Filter {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        lambda: u32,
        #[arg(long)]
        output: PathBuf,
    },
    /// Stage-1 cross-entropy training (or a full scratch-mode FGR run).
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Two-stage FGR fine-tuning of a checkpoint's head.
    FinetuneFgr {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        init: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "runs/fgr")]
        out: PathBuf,
    },
    /// Metrics over clean and corrupted splits, before and after temperature scaling.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated corruptions, `all` or `none`.
        #[arg(long, default_value = "all")]
        corruptions: String,
        #[arg(long, default_value_t = 15)]
        bins: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Baseline plus filter-only, rectify-only and full FGR.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "runs/ablation")]
        out: PathBuf,
        #[arg(long, default_value = "none")]
        corruptions: String,
    },
    /// One FGR run per value of gamma, rho or lambda.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long)]
        param: SweepParam,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<f64>,
        #[arg(long, default_value = "runs/sweep")]
        out: PathBuf,
        #[arg(long, default_value = "none")]
        corruptions: String,
    },
    /// Summarize the CSV outputs found in a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(TrainConfig::from_json(&text)?)
        }
        None => Ok(TrainConfig::default()),
    }
}

fn load_data(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

fn parse_grid(spec: &str) -> Result<Vec<Corruption>> {
    match spec {
        "all" => Ok(Corruption::ALL.to_vec()),
        "none" | "" => Ok(Vec::new()),
        list => list.split(',').map(|s| Ok(s.trim().parse::<Corruption>()?)).collect(),
    }
}

fn save_config(dir: &Path, cfg: &TrainConfig) -> Result<()> {
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    Ok(())
}

fn write_run(dir: &Path, run: &fgr_core::harness::RunResult) -> Result<()> {
    checkpoint::save(dir.join("model.ckpt"), &run.model, &run.params)?;
    write_csv(&dir.join("training_log.csv"), &run.log)?;
    if !run.warmup.is_empty() {
        write_csv(&dir.join("warmup_log.csv"), &run.warmup)?;
    }
    let summary = serde_json::json!({
        "steps": run.log.len(),
        "conflict_fraction": run.conflict.map(|c| c.fraction),
        "mean_cosine": run.conflict.map(|c| c.mean_cosine),
        "violations": run.violations,
    });
    std::fs::write(dir.join("conflict.json"), serde_json::to_string_pretty(&summary)?)?;
    println!(
        "{} steps, conflict fraction {:.3}, {} non-degradation violations",
        run.log.len(),
        run.conflict.map_or(0.0, |c| c.fraction),
        run.violations
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            n,
            seed,
            texture_strength,
            noise,
            classes,
            size,
            cifar,
        } => {
            let manifest = if cifar.is_empty() {
                let cfg = SynthConfig {
                    noise,
                    classes,
                    size,
                    ..SynthConfig::with_train_size(n, texture_strength, seed)
                };
                Dataset::synthetic(&cfg)?.save(&out, "synthetic", seed, serde_json::to_value(&cfg)?)?
            } else {
                let (mut train, mut test) = (Vec::new(), Vec::new());
                for path in &cifar {
                    let items = load_cifar10(path).with_context(|| format!("reading {}", path.display()))?;
                    let is_test = path.file_name().is_some_and(|f| f.to_string_lossy().contains("test"));
                    if is_test { &mut test } else { &mut train }.extend(items);
                }
                if test.is_empty() {
                    bail!("no CIFAR test batch given (expected a file name containing `test`)");
                }
                let files: Vec<String> = cifar.iter().map(|p| p.display().to_string()).collect();
                Dataset::cifar(train, test)?.save(&out, "cifar10", 1, serde_json::json!({ "files": files }))?
            };
            println!("{}", serde_json::to_string_pretty(&manifest)?);
        }
        Command::Filter { input, lambda, output } => {
            let img = ImageU8::read_ppm(BufReader::new(File::open(&input)?))?;
            let filtered = filter_image(&img, lambda)?;
            filtered.write_ppm(BufWriter::new(File::create(&output)?))?;
        }
        Command::Train { config, data, out } => {
            let cfg = load_config(config.as_deref())?;
            let data = load_data(&data)?;
            std::fs::create_dir_all(&out)?;
            save_config(&out, &cfg)?;
            match cfg.mode {
                Mode::TwoStage => {
                    let trained = train_stage1(&cfg, &data)?;
                    checkpoint::save(out.join("model.ckpt"), &trained.model, &trained.params)?;
                    write_csv(&out.join("stage1_log.csv"), &trained.epochs)?;
                    if let Some(last) = trained.epochs.last() {
                        println!("stage 1: {} epochs, final loss {:.4}, train accuracy {:.4}", trained.epochs.len(), last.loss, last.accuracy);
                    }
                }
                Mode::Scratch { .. } => write_run(&out, &train_scratch(&cfg, &data)?)?,
            }
        }
        Command::FinetuneFgr { config, init, data, out } => {
            let cfg = load_config(config.as_deref())?;
            let data = load_data(&data)?;
            let (model, params) = checkpoint::load(&init).with_context(|| format!("loading {}", init.display()))?;
            std::fs::create_dir_all(&out)?;
            save_config(&out, &cfg)?;
            write_run(&out, &finetune_fgr(&cfg, &model, &params, &data)?)?;
        }
        Command::Eval {
            ckpt,
            data,
            out,
            corruptions,
            bins,
            seed,
        } => {
            let (model, params) = checkpoint::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let data = load_data(&data)?;
            let report = evaluate(&model, &params, &data, &parse_grid(&corruptions)?, bins, seed)?;
            let out = out.unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).to_path_buf());
            report.write(&out)?;
            print_metrics(&report.rows);
        }
        Command::Ablate {
            config,
            data,
            out,
            corruptions,
        } => {
            let cfg = load_config(config.as_deref())?;
            let data = load_data(&data)?;
            let rows = run_ablation(&cfg, &data, &parse_grid(&corruptions)?)?;
            std::fs::create_dir_all(&out)?;
            save_config(&out, &cfg)?;
            write_csv(&out.join("ablation.csv"), &rows)?;
            print_ablation(&rows);
        }
        Command::Sweep {
            config,
            data,
            param,
            values,
            out,
            corruptions,
        } => {
            let cfg = load_config(config.as_deref())?;
            let data = load_data(&data)?;
            let rows = sweep(&cfg, &data, param, &values, &parse_grid(&corruptions)?)?;
            std::fs::create_dir_all(&out)?;
            save_config(&out, &cfg)?;
            write_csv(&out.join("sweep.csv"), &rows)?;
            print_sweep(&rows);
        }
        Command::Report { run } => report(&run)?,
    }
    Ok(())
}

fn print_metrics(rows: &[MetricsRow]) {
    println!(
        "{:<11} {:<15} {:>3} {:>8} {:>8} {:>8} {:>8} {:>8} {:>6}",
        "split", "corruption", "sev", "acc", "ece", "cece", "ece_ts", "cece_ts", "T*"
    );
    for r in rows {
        println!(
            "{:<11} {:<15} {:>3} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>6.2}",
            r.split, r.corruption, r.severity, r.accuracy, r.ece, r.cece, r.ece_ts, r.cece_ts, r.t_star
        );
    }
}

fn print_ablation(rows: &[AblationRow]) {
    println!(
        "{:<13} {:>8} {:>8} {:>9} {:>9} {:>9}",
        "variant", "acc_id", "ece_id", "acc_shift", "ece_shift", "conflict"
    );
    for r in rows {
        let conflict = r.conflict_fraction.map_or("-".to_string(), |c| format!("{c:.3}"));
        println!(
            "{:<13} {:>8.4} {:>8.4} {:>9.4} {:>9.4} {:>9}",
            r.variant, r.acc_id, r.ece_id, r.acc_shift, r.ece_shift, conflict
        );
    }
}

fn print_sweep(rows: &[SweepRow]) {
    println!(
        "{:<7} {:>8} {:>8} {:>8} {:>9} {:>9}",
        "param", "value", "acc_id", "ece_id", "acc_shift", "ece_shift"
    );
    for r in rows {
        println!(
            "{:<7} {:>8} {:>8.4} {:>8.4} {:>9.4} {:>9.4}",
            r.param, r.value, r.acc_id, r.ece_id, r.acc_shift, r.ece_shift
        );
    }
}

fn report(dir: &Path) -> Result<()> {
    let mut found = false;
    let metrics = dir.join("metrics.csv");
    if metrics.exists() {
        found = true;
        println!("# metrics");
        print_metrics(&read_csv::<MetricsRow>(&metrics)?);
    }
    let ablation = dir.join("ablation.csv");
    if ablation.exists() {
        found = true;
        println!("# ablation");
        print_ablation(&read_csv::<AblationRow>(&ablation)?);
    }
    let sweep_csv = dir.join("sweep.csv");
    if sweep_csv.exists() {
        found = true;
        println!("# sweep");
        print_sweep(&read_csv::<SweepRow>(&sweep_csv)?);
    }
    let log = dir.join("training_log.csv");
    if log.exists() {
        found = true;
        let steps: Vec<StepLog> = read_csv(&log)?;
        let history: Vec<StepRecord> = steps
            .iter()
            .map(|s| StepRecord {
                conflicted: s.conflicted,
                cosine: s.cosine,
            })
            .collect();
        let stats = conflict_stats(&history)?;
        let violations = steps.iter().filter(|s| s.violation).count();
        let min_alignment = steps.iter().map(|s| s.alignment).fold(f64::INFINITY, f64::min);
        println!("# training log");
        println!(
            "steps {}  conflict fraction {:.4}  mean cosine {:.4}  min alignment {:.3e}  violations {}",
            stats.steps, stats.fraction, stats.mean_cosine, min_alignment, violations
        );
    }
    if !found {
        bail!("no metrics.csv, ablation.csv, sweep.csv or training_log.csv in {}", dir.display());
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
