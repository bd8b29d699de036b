use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use tpmamba_core::checkpoint::Checkpoint;
use tpmamba_core::config::TrainConfig;
use tpmamba_core::flops::{flops_sweep, AdapterKind};
use tpmamba_core::loss::DiceReport;
use tpmamba_core::selfcheck::{grad_suite, roundtrip_suite, scan_suite, CheckOutcome};
use tpmamba_core::synth::{gen_synth, read_dataset, write_dataset};
use tpmamba_core::train::{mean_report, EpochMetrics, Trainer};
use tpmamba_core::volume::{read_rvol, write_labels, VolumeRecord};

#[derive(Parser)]
#[command(name = "tpmamba", version, about = "Tri-plane Mamba adapters for volumetric segmentation")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labelled dataset of RVOL pairs.
    GenSynth {
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write a checkpoint plus a per-epoch metrics CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Metrics CSV path (default: the checkpoint path with a .csv extension).
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Sliding-window Dice per volume, plus a mean row.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict a label map for one RVOL volume.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run verification suites; exits non-zero if any check fails.
    Check {
        #[arg(long, value_enum, default_value_t = Suite::All)]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Analytic adapter cost over a sweep of input depths.
    BenchFlops {
        /// D,H,W
        #[arg(long, default_value = "96,96,96")]
        input: String,
        #[arg(long, default_value_t = 768)]
        dim: usize,
        #[arg(long, default_value_t = 96)]
        rank: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Grad,
    Scan,
    Roundtrip,
    All,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Command::GenSynth { n, size, classes, seed, out } => {
            let recs = gen_synth(n, size, classes, seed)?;
            write_dataset(&out, &recs)?;
            println!("wrote {n} volumes to {}", out.display());
        }
        Command::Train { config, data, out, epochs, seed, metrics } => {
            let text = std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let mut cfg = TrainConfig::parse_text(&text)?;
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let cfg = cfg.finish()?;
            let records = read_dataset(&data)?;
            let mut trainer = Trainer::new(cfg)?;
            let rows = trainer.fit(&records, |m| {
                println!("epoch {} lr {:.3e} loss {:.5} dice {:.4}", m.epoch, m.lr, m.loss, m.mean_dice);
            })?;
            trainer.checkpoint().save(&out)?;
            let metrics = metrics.unwrap_or_else(|| out.with_extension("csv"));
            write_metrics(&metrics, &rows)?;
        }
        Command::Eval { ckpt, data, out } => {
            let trainer = Trainer::from_checkpoint(&Checkpoint::load(&ckpt)?)?;
            let records = read_dataset(&data)?;
            let reports = records.iter().map(|r| trainer.evaluate(r)).collect::<tpmamba_core::Result<Vec<_>>>()?;
            write_eval(&out, &reports, trainer.cfg.classes)?;
            println!("mean dice {:.4}", mean_report(&reports).mean);
        }
        Command::Infer { ckpt, volume, out } => {
            let trainer = Trainer::from_checkpoint(&Checkpoint::load(&ckpt)?)?;
            let (vox, spacing) = read_rvol(&volume)?;
            let pred = trainer.infer(&VolumeRecord::new(vox, spacing, None)?)?;
            let mut labels = pred.labels;
            labels.shape.remove(0);
            write_labels(&out, &labels, [1.0; 3])?;
        }
        Command::Check { suite, seed } => {
            let mut results = Vec::new();
            if matches!(suite, Suite::Scan | Suite::All) {
                results.extend(scan_suite(seed)?);
            }
            if matches!(suite, Suite::Grad | Suite::All) {
                results.extend(grad_suite(seed)?);
            }
            if matches!(suite, Suite::Roundtrip | Suite::All) {
                results.extend(roundtrip_suite(seed)?);
            }
            return Ok(report_checks(&results));
        }
        Command::BenchFlops { input, dim, rank, out } => {
            let dims = parse_dims(&input)?;
            write_flops(&out, dims, dim, rank)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_dims(s: &str) -> Result<[usize; 3]> {
    let v: Vec<usize> = s.split(',').map(|p| p.trim().parse()).collect::<std::result::Result<_, _>>().with_context(|| format!("bad --input {s:?}"))?;
    match v.as_slice() {
        &[d, h, w] => Ok([d, h, w]),
        _ => bail!("--input needs D,H,W, got {s:?}"),
    }
}

fn report_checks(results: &[CheckOutcome]) -> ExitCode {
    for r in results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    if results.iter().all(|r| r.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn write_metrics(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "lr", "loss", "mean_dice"])?;
    for m in rows {
        w.write_record([m.epoch.to_string(), m.lr.to_string(), m.loss.to_string(), m.mean_dice.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn write_eval(path: &Path, reports: &[DiceReport], classes: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["volume".to_string()];
    header.extend((1..classes).map(|k| format!("class_{k}")));
    header.push("mean".into());
    w.write_record(&header)?;
    let row = |name: String, r: &DiceReport| {
        let mut v = vec![name];
        v.extend(r.per_class.iter().map(|d| format!("{d:.6}")));
        v.push(format!("{:.6}", r.mean));
        v
    };
    for (i, r) in reports.iter().enumerate() {
        w.write_record(row(format!("{i:03}"), r))?;
    }
    w.write_record(row("mean".into(), &mean_report(reports)))?;
    w.flush()?;
    Ok(())
}

fn write_flops(path: &Path, input: [usize; 3], dim: usize, rank: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["depth".to_string(), "height".into(), "width".into(), "tokens".into()];
    header.extend(AdapterKind::ALL.iter().map(|k| format!("{k}_gflops")));
    w.write_record(&header)?;
    for row in flops_sweep(input, dim, rank)? {
        let mut rec = vec![row.input[0].to_string(), row.input[1].to_string(), row.input[2].to_string(), row.tokens.to_string()];
        rec.extend(row.gflops.iter().map(|g| format!("{g:.6}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
