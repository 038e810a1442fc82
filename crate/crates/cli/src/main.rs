//! `synnet` command-line driver.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use synnet::data::{load_pgm, save_pgm, write_dataset, Dataset, PhantomSample};
use synnet::metrics::StandardSsim;
use synnet::optim::{eval_means, evaluate, history_csv, predict, train, HistoryRow, OptimState};
use synnet::persist::{load_checkpoint, save_checkpoint, Checkpoint, RunConfig};
use synnet::verify::gradcheck_suite;
use synnet::{DType, Error, Scalar};

#[derive(Parser)]
#[command(name = "synnet", version, about = "Train and run encoder-decoder image synthesis networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-contrast phantom dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Image size as HxW.
        #[arg(long, default_value = "64x64")]
        size: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a network and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint up to the configured epoch count.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Per-iteration loss CSV.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Synthesize target images from input PGM files.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated input PGMs, one per encoder arm.
        #[arg(long)]
        input: String,
        /// Comma-separated output PGMs, one per head.
        #[arg(long)]
        output: String,
    },
    /// Score a checkpoint on a dataset with PSNR and SSIM.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::All)]
        split: Split,
    },
    /// Run the finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    All,
    Train,
    Test,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            let kind = e.chain().find_map(|c| c.downcast_ref::<Error>()).map(Error::kind).unwrap_or("io");
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{kind}]: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> anyhow::Result<ExitCode> {
    match cmd {
        Command::GenData { out, count, size, seed } => {
            let (h, w) = parse_size(&size)?;
            let m = write_dataset(&out, count, h, w, seed).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} samples of {h}x{w} to {}", m.ids.len(), out.display());
        }
        Command::Train { config, data, out, resume, history } => {
            let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let cfg = RunConfig::parse(&text).with_context(|| format!("in {}", config.display()))?;
            let ds = Dataset::load(&data).with_context(|| format!("loading dataset {}", data.display()))?;
            let args = TrainArgs { cfg: &cfg, ds: &ds, out: &out, resume: resume.as_deref(), history: history.as_deref() };
            match cfg.precision {
                DType::Single => train_cmd::<f32>(&args)?,
                DType::Double => train_cmd::<f64>(&args)?,
            }
        }
        Command::Predict { ckpt, input, output } => {
            let cp = load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            match cp.dtype() {
                Some(DType::Double) => predict_cmd::<f64>(&cp, &input, &output)?,
                _ => predict_cmd::<f32>(&cp, &input, &output)?,
            }
        }
        Command::Eval { ckpt, data, report, split } => {
            let cp = load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let ds = Dataset::load(&data).with_context(|| format!("loading dataset {}", data.display()))?;
            match cp.dtype() {
                Some(DType::Double) => eval_cmd::<f64>(&cp, &ds, &report, split)?,
                _ => eval_cmd::<f32>(&cp, &ds, &report, split)?,
            }
        }
        Command::Gradcheck { seed } => {
            let r = gradcheck_suite(seed);
            println!("{r}");
            if !r.passed() {
                eprintln!("error[gradcheck]: {} failing check(s)", r.entries.iter().filter(|e| !e.passed).count());
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_size(s: &str) -> synnet::Result<(usize, usize)> {
    let bad = || Error::Usage(format!("size must look like HxW, got '{s}'"));
    let (h, w) = s.to_ascii_lowercase().split_once('x').map(|(a, b)| (a.trim().to_string(), b.trim().to_string())).ok_or_else(bad)?;
    Ok((h.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?))
}

struct TrainArgs<'a> {
    cfg: &'a RunConfig,
    ds: &'a Dataset,
    out: &'a Path,
    resume: Option<&'a Path>,
    history: Option<&'a Path>,
}

fn train_cmd<T: Scalar>(a: &TrainArgs<'_>) -> anyhow::Result<()> {
    let cfg = a.cfg;
    let (train_set, _) = a.ds.split(cfg.train_fraction)?;
    let model = cfg.model()?;
    let (mut params, mut state) = match a.resume {
        Some(path) => {
            let cp = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            let saved = cp.run_config()?;
            if saved.topology != cfg.topology {
                bail!(Error::Usage(format!("{} was trained with a different topology", path.display())));
            }
            let params = cp.params::<T>().with_context(|| format!("reading parameters from {}", path.display()))?;
            let state = cp.optim_state(&params, cfg.train.lr, cfg.train.momentum)?;
            (params, state)
        }
        None => {
            let params = cfg.initial_params::<T>()?;
            let state = OptimState::new(&params, cfg.train.lr, cfg.train.momentum)?;
            (params, state)
        }
    };
    let rows = train(&model, &mut params, &mut state, &train_set, &cfg.train)?;
    save_checkpoint(a.out, &Checkpoint::from_training(cfg, &params, &state))
        .with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(h) = a.history {
        write_history(h, &rows, a.resume.is_some())?;
    }
    let (p, s) = train_set_quality(&model, &params, &train_set, cfg)?;
    println!(
        "trained {} iteration(s) over {} epoch(s); train PSNR {p:.3} dB, SSIM {s:.4}",
        state.iteration, state.epoch
    );
    Ok(())
}

fn write_history(path: &Path, rows: &[HistoryRow], append: bool) -> anyhow::Result<()> {
    if append && path.exists() {
        let mut f = fs::OpenOptions::new().append(true).open(path)?;
        for r in rows {
            writeln!(f, "{}", r.to_csv())?;
        }
    } else {
        fs::write(path, history_csv(rows)).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn train_set_quality<T: Scalar>(
    model: &synnet::model::SynNetModel,
    params: &synnet::model::ParamSet<T>,
    samples: &[PhantomSample],
    cfg: &RunConfig,
) -> anyhow::Result<(f64, f64)> {
    let rows = evaluate(model, params, samples, &cfg.train.inputs, &cfg.train.targets, &metric_for(samples))?;
    Ok(eval_means(&rows))
}

/// Standard SSIM settings, shrinking the window for images smaller than 11 pixels.
fn metric_for(samples: &[PhantomSample]) -> StandardSsim {
    let side = samples.iter().map(|s| s.height().min(s.width())).min().unwrap_or(11);
    let mut m = StandardSsim::default();
    if side < m.window {
        m.window = if side % 2 == 1 { side } else { side - 1 };
    }
    m
}

fn split_paths(list: &str) -> Vec<PathBuf> {
    list.split(',').map(|p| PathBuf::from(p.trim())).filter(|p| !p.as_os_str().is_empty()).collect()
}

fn predict_cmd<T: Scalar>(cp: &Checkpoint, input: &str, output: &str) -> anyhow::Result<()> {
    let (_, model, params) = cp.restore::<T>()?;
    let topo = model.topology();
    let ins = split_paths(input);
    let outs = split_paths(output);
    if ins.len() != topo.in_arms() || outs.len() != topo.out_arms() {
        bail!(Error::Usage(format!(
            "{} checkpoint takes {} input and {} output file(s), got {} and {}",
            topo.kind,
            topo.in_arms(),
            topo.out_arms(),
            ins.len(),
            outs.len()
        )));
    }
    let images = ins
        .iter()
        .map(|p| load_pgm(p).with_context(|| format!("reading {}", p.display())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let preds = predict(&model, &params, &images)?;
    for (p, path) in preds.iter().zip(&outs) {
        save_pgm(path, p).with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        v.to_string()
    }
}

fn eval_cmd<T: Scalar>(cp: &Checkpoint, ds: &Dataset, report: &Path, split: Split) -> anyhow::Result<()> {
    let (cfg, model, params) = cp.restore::<T>()?;
    let samples = match split {
        Split::All => ds.samples.clone(),
        Split::Train => ds.split(cfg.train_fraction)?.0,
        Split::Test => ds.split(cfg.train_fraction)?.1,
    };
    if samples.is_empty() {
        bail!(Error::Usage("the selected split has no samples".into()));
    }
    let metric = metric_for(&samples);
    let rows = evaluate(&model, &params, &samples, &cfg.train.inputs, &cfg.train.targets, &metric)?;
    let (mp, ms) = eval_means(&rows);
    let mut csv = String::from("sample_id,head,psnr_db,ssim\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{}\n", r.sample_id, r.head, fmt_metric(r.psnr_db), fmt_metric(r.ssim)));
    }
    csv.push_str(&format!("mean,all,{},{}\n", fmt_metric(mp), fmt_metric(ms)));
    fs::write(report, csv).with_context(|| format!("writing {}", report.display()))?;
    println!("{} sample(s) x {} head(s): mean PSNR {} dB, mean SSIM {}", samples.len(), cfg.train.targets.len(), fmt_metric(mp), fmt_metric(ms));
    Ok(())
}
