use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fedopenmax::config::ExperimentConfig;
use fedopenmax::dataset::{format_samples, generate, load_external};
use fedopenmax::evaluation::MetricsReport;
use fedopenmax::experiment::{
    read_calibration, read_model, run_experiment, summary_rows, write_artifacts,
};
use fedopenmax::federation::RunOptions;
use fedopenmax::openmax::predict_open;
use fedopenmax::{Error, Label, Result};

#[derive(Parser)]
#[command(
    name = "fedopenmax",
    version,
    about = "Federated OpenMax open-set recognition experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportKind {
    /// In-process queues.
    Loopback,
}

#[derive(Subcommand)]
enum Command {
    /// Train, calibrate and evaluate as described by a config file.
    Run {
        config: PathBuf,
        /// Overrides the dataset and training seeds.
        #[arg(long)]
        seed: Option<u64>,
        /// Maximum number of clients training concurrently (default: all).
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, value_enum, default_value = "loopback")]
        transport: TransportKind,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Classify samples with a stored model and calibration.
    Infer {
        calibration: PathBuf,
        model: PathBuf,
        data: PathBuf,
    },
    /// Write the synthetic datasets of a config as delimited text files.
    Generate {
        config: PathBuf,
        #[arg(long)]
        emit: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(path)?;
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn cmd_run(
    config: &Path,
    seed: Option<u64>,
    workers: Option<usize>,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = load_config(config, seed)?;
    if workers == Some(0) {
        return Err(Error::Config("--workers must be at least 1".into()));
    }
    let opts = RunOptions {
        workers,
        ..RunOptions::default()
    };
    let outcome = run_experiment(&cfg, opts)?;
    let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
    let paths = write_artifacts(&cfg, &outcome, &dir)?;

    let mut stdout = io::stdout().lock();
    writeln!(stdout, "seed {}", cfg.seed())?;
    for r in &outcome.training.rounds {
        writeln!(
            stdout,
            "round {}: mean local accuracy {:.4}, global accuracy {:.4}",
            r.round + 1,
            r.mean_client_accuracy,
            r.global_accuracy
        )?;
    }
    writeln!(stdout)?;
    writeln!(stdout, "{:<12} {:<10} {:>8}", "phase", "metric", "value")?;
    for (phase, metric, value) in summary_rows(&outcome) {
        writeln!(stdout, "{phase:<12} {metric:<10} {value:>8.4}")?;
    }
    writeln!(stdout)?;
    writeln!(stdout, "{}", MetricsReport::summary_header())?;
    writeln!(stdout, "{}", outcome.closed_set.summary_row("closed_set"))?;
    writeln!(stdout, "{}", outcome.open_set.summary_row("open_set"))?;
    writeln!(stdout)?;
    for p in paths {
        writeln!(stdout, "wrote {}", p.display())?;
    }
    Ok(())
}

fn cmd_infer(calibration: &Path, model: &Path, data: &Path) -> Result<()> {
    let calibration = read_calibration(calibration)?;
    let model = read_model(model)?;
    if model.num_classes() != calibration.num_classes() {
        return Err(Error::Protocol(format!(
            "model has {} classes but calibration has {}",
            model.num_classes(),
            calibration.num_classes()
        )));
    }
    let samples = load_external(data)?;
    let mut stdout = io::stdout().lock();
    for (i, s) in samples.iter().enumerate() {
        let p = predict_open(&s.features, &model, &calibration).map_err(|e| e.in_file(data))?;
        writeln!(stdout, "{i},{},{:?}", p.label, p.top_probability())?;
    }
    Ok(())
}

fn cmd_generate(config: &Path, emit: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let data = generate(&cfg.dataset)?;
    fs::create_dir_all(emit).map_err(|e| Error::from(e).in_file(emit))?;
    let header = vec![format!("seed={}", cfg.dataset.seed)];
    let mut files = Vec::new();
    for (c, samples) in data.clients.iter().enumerate() {
        let text = format_samples(
            samples
                .iter()
                .map(|s| (Label::Known(s.label), s.features.as_slice())),
            &header,
        );
        files.push((format!("client_{c}.csv"), text));
    }
    files.push((
        "closed_test.csv".into(),
        format_samples(
            data.closed_test
                .iter()
                .map(|s| (Label::Known(s.label), s.features.as_slice())),
            &header,
        ),
    ));
    files.push((
        "open_test.csv".into(),
        format_samples(
            data.open_test
                .iter()
                .map(|s| (s.true_label, s.features.as_slice())),
            &header,
        ),
    ));
    for (name, text) in files {
        let path = emit.join(name);
        fs::write(&path, text).map_err(|e| Error::from(e).in_file(&path))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            workers,
            transport: TransportKind::Loopback,
            out,
        } => cmd_run(&config, seed, workers, out),
        Command::Infer {
            calibration,
            model,
            data,
        } => cmd_infer(&calibration, &model, &data),
        Command::Generate { config, emit, seed } => cmd_generate(&config, &emit, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
