//! Command-line entry points: training runs, checkpoint evaluation, block
//! similarity analysis, reference-pattern export, and plot-ready data export.

use crate::error::{Error, Result};
use crate::harness::{evaluate, load_checkpoint, train, Task, TrainConfig};
use crate::structure::{block_representation, similarity_matrix};
use clap::{Parser, Subcommand};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "stagediff", version, about = "Stage-aware diffusion training harness")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Run a training loop and write logs, snapshots, and checkpoints.
    Train {
        /// Config file (flat key=value lines); defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config key, e.g. --set guidance_enabled=true. Applied
        /// after the file is parsed; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Output directory for CSVs, snapshots, and checkpoints.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a held-out set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Expected task; errors if it disagrees with the checkpoint.
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        n_eval: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compute block-similarity matrices for one or more checkpoints.
    AnalyzeCka {
        /// Checkpoint files, in the order they should appear in the summary.
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, default_value = "cka-out")]
        out: PathBuf,
    },
    /// Export a checkpoint's block-similarity matrix as a reference pattern.
    ExportRef {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge run CSVs into one downsampled long-format file for plotting.
    PlotData {
        /// Directory holding train.csv and monitor.csv.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Maximum emitted rows per series.
        #[arg(long, default_value_t = 500)]
        max_rows: usize,
    },
}

/// Exit code policy: 1 for configuration and usage problems, 2 for runtime
/// failures.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 1,
        _ => 2,
    }
}

fn load_config(path: Option<&Path>, sets: &[String]) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    for s in sets {
        let (key, value) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{}' is not key=value", s)))?;
        cfg.set(key.trim(), value.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Train { config, set, out } => cmd_train(config.as_deref(), &set, &out),
        Command::Eval { checkpoint, task, n_eval, seed } => {
            cmd_eval(&checkpoint, task.as_deref(), n_eval, seed)
        }
        Command::AnalyzeCka { checkpoints, out } => cmd_analyze_cka(&checkpoints, &out),
        Command::ExportRef { checkpoint, out } => cmd_export_ref(&checkpoint, &out),
        Command::PlotData { run, out, max_rows } => cmd_plot_data(&run, &out, max_rows),
    }
}

fn cmd_train(config: Option<&Path>, sets: &[String], out: &Path) -> Result<()> {
    let cfg = load_config(config, sets)?;
    let outcome = train(&cfg, Some(out))?;
    let final_loss = outcome.log.train.last().map(|r| r.diff_loss).unwrap_or(f64::NAN);
    println!("completed {} steps, final diff_loss {}", cfg.k_tot, final_loss);
    println!("outputs in {}", out.display());
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    task: Option<&str>,
    n_eval: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let mut cfg = TrainConfig::parse_str(&ck.config_lines.join("\n"))?;
    if let Some(task) = task {
        let want: Task = task.parse()?;
        if want != cfg.task {
            return Err(Error::Config(format!(
                "task mismatch: checkpoint was trained for {}, requested {}",
                cfg.task.as_str(),
                want.as_str()
            )));
        }
    }
    if let Some(n) = n_eval {
        cfg.n_eval = n;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let m = evaluate(&ck.params, &cfg, true)?;
    println!("step={}", ck.step);
    println!("diff_loss={}", m.diff_loss);
    println!("ssl_disc={}", m.ssl_disc);
    if let Some(l) = m.lsd {
        println!("lsd={}", l.full);
        println!("lsd_lf={}", l.low);
        println!("lsd_hf={}", l.high);
    }
    Ok(())
}

fn cmd_analyze_cka(checkpoints: &[PathBuf], out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut summary = Vec::new();
    for path in checkpoints {
        let result = load_checkpoint(path).and_then(|ck| similarity_matrix(&ck.params));
        let s = match result {
            Ok(s) => s,
            Err(e) => {
                eprintln!("warning: skipping {}: {}", path.display(), e);
                continue;
            }
        };
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
        s.write_csv(&out.join(format!("cka_{}.csv", stem)))?;
        let (mean, std) = s.off_diagonal_stats();
        summary.push((path.display().to_string(), mean, std));
    }
    if summary.is_empty() {
        return Err(Error::Contract("no checkpoint could be analyzed".into()));
    }
    let mut f = std::fs::File::create(out.join("summary.csv"))?;
    writeln!(f, "checkpoint,offdiag_mean,offdiag_std")?;
    for (name, mean, std) in &summary {
        writeln!(f, "{},{},{}", name, mean, std)?;
    }
    println!("analyzed {} of {} checkpoints into {}", summary.len(), checkpoints.len(), out.display());
    Ok(())
}

fn cmd_export_ref(checkpoint: &Path, out: &Path) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    for i in 0..ck.params.l_b() {
        let rep = block_representation(&ck.params, i)?;
        if rep.data.iter().all(|v| *v == 0.0) {
            return Err(Error::Contract(format!(
                "block {} has zero-norm weights, similarity undefined",
                i
            )));
        }
    }
    let s = similarity_matrix(&ck.params)?;
    s.write_csv(out)?;
    println!("wrote {} block reference pattern to {}", s.l_b, out.display());
    Ok(())
}

/// Stride-downsample to at most `cap` points, always keeping the last one.
fn downsample(points: &[(u64, f64)], cap: usize) -> Vec<(u64, f64)> {
    if points.len() <= cap {
        return points.to_vec();
    }
    let stride = points.len().div_ceil(cap);
    let mut out: Vec<(u64, f64)> = points.iter().copied().step_by(stride).collect();
    let last = *points.last().unwrap();
    if out.last() != Some(&last) {
        if out.len() == cap {
            out.pop();
        }
        out.push(last);
    }
    out
}

fn read_csv_columns(path: &Path, want: &[&str]) -> Result<Vec<Vec<(u64, f64)>>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {}", path.display(), e)))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Contract(format!("{}: empty file", path.display())))?
        .split(',')
        .collect();
    let cols: Vec<usize> = want
        .iter()
        .map(|name| {
            header.iter().position(|h| h == name).ok_or_else(|| {
                Error::Contract(format!("{}: missing column {}", path.display(), name))
            })
        })
        .collect::<Result<_>>()?;
    let mut series = vec![Vec::new(); want.len()];
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let step: u64 = fields[0]
            .parse()
            .map_err(|_| Error::Contract(format!("{}: bad step '{}'", path.display(), fields[0])))?;
        for (si, &ci) in cols.iter().enumerate() {
            let raw = fields.get(ci).copied().unwrap_or("");
            if raw.is_empty() {
                continue;
            }
            let v: f64 = raw.parse().map_err(|_| {
                Error::Contract(format!("{}: bad value '{}' in column {}", path.display(), raw, want[si]))
            })?;
            series[si].push((step, v));
        }
    }
    Ok(series)
}

fn cmd_plot_data(run: &Path, out: &Path, max_rows: usize) -> Result<()> {
    if max_rows == 0 {
        return Err(Error::Config("max_rows must be positive".into()));
    }
    let train_series = read_csv_columns(
        &run.join("train.csv"),
        &["diff_loss", "gamma", "beta_sp", "sp_loss"],
    )?;
    let monitor_series = read_csv_columns(&run.join("monitor.csv"), &["ssl_loss", "g", "mu"])?;

    let mut f = std::fs::File::create(out)?;
    writeln!(f, "series,step,value")?;
    let names = ["diff_loss", "gamma", "beta_sp", "sp_loss", "ssl_loss", "g", "mu"];
    for (name, series) in names.iter().zip(train_series.iter().chain(monitor_series.iter())) {
        for (step, value) in downsample(series, max_rows) {
            writeln!(f, "{},{},{}", name, step, value)?;
        }
    }
    println!("wrote plot data to {}", out.display());
    Ok(())
}
