use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use incws_core::encoding::LabelDomain;
use incws_core::estimator::EstimatorState;
use incws_core::harness::{self, EvalMode, FoldReport, HarnessConfig, LabeledData};
use incws_core::synthgen::generate;
use serde::Serialize;

mod config;
mod error;
mod records;
mod state;

use config::{Overrides, RunConfig};
use error::{CliError, CliResult};
use records::Record;

#[derive(Parser)]
#[command(
    name = "incws",
    version,
    about = "Streaming weak supervision: learn source accuracies batch by batch and label data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    /// ℓ1 weight of the sparse component.
    #[arg(long)]
    gamma: Option<f64>,
    /// Edge threshold: an absolute value, `auto` or `auto:<fraction>`.
    #[arg(long)]
    threshold: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self, prequential: bool) -> CliResult<RunConfig> {
        let o = Overrides {
            alpha: self.alpha,
            gamma: self.gamma,
            threshold: self.threshold.clone(),
            batch_size: self.batch_size,
            seed: self.seed,
            prequential,
        };
        RunConfig::load(self.config.as_deref(), &o)
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Incremental,
    Baseline,
    Sweep,
}

#[derive(Subcommand)]
enum Command {
    /// Update a state file from JSONL records, one batch at a time.
    FitStream {
        /// Input records; stdin when absent or `-`.
        input: Option<PathBuf>,
        #[arg(long)]
        state: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Emit posterior labels for JSONL records using a state file.
    Label {
        input: Option<PathBuf>,
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Generate a synthetic dataset from the `synth.*` config keys.
    Simulate {
        #[arg(short, long)]
        n: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the fold protocol on a dataset with true labels.
    Evaluate {
        input: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "incremental")]
        mode: Mode,
        /// Directory for the report files.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Label each batch with the state from before its update.
        #[arg(long)]
        prequential: bool,
        #[command(flatten)]
        common: Common,
    },
}

fn open_input(input: Option<&Path>) -> CliResult<Box<dyn BufRead>> {
    match input {
        None => Ok(Box::new(BufReader::new(io::stdin()))),
        Some(p) if p.as_os_str() == "-" => Ok(Box::new(BufReader::new(io::stdin()))),
        Some(p) => {
            let f = File::open(p).map_err(CliError::io(format!("opening {}", p.display())))?;
            Ok(Box::new(BufReader::new(f)))
        }
    }
}

fn open_output(output: Option<&Path>) -> CliResult<Box<dyn Write>> {
    match output {
        None => Ok(Box::new(BufWriter::new(io::stdout()))),
        Some(p) => {
            let f = File::create(p).map_err(CliError::io(format!("creating {}", p.display())))?;
            Ok(Box::new(BufWriter::new(f)))
        }
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(CliError::io(format!("creating {}", path.display())))?))
}

#[derive(Serialize)]
struct BatchMetrics {
    batch: usize,
    size: usize,
    initial: bool,
    updated: bool,
    error: Option<String>,
    accuracies: Vec<Option<f64>>,
}

fn fit_stream(input: Option<&Path>, state_path: &Path, common: &Common) -> CliResult<()> {
    let config = common.load(false)?;
    let est = config.estimator();
    let _lock = state::lock(state_path)?;
    let mut st = match state::load(state_path)? {
        Some(s) => {
            if s.domain().num_classes() != config.num_classes {
                return Err(CliError::State(format!(
                    "state has {} classes, config has {}",
                    s.domain().num_classes(),
                    config.num_classes
                )));
            }
            if s.alpha != est.alpha {
                log::warn!("continuing with the stored alpha {} (config asks for {})", s.alpha, est.alpha);
            }
            s
        }
        None => EstimatorState::new(config.num_classes, est)?,
    };
    let data = records::read_records(open_input(input)?, LabelDomain::new(config.num_classes)?)?;
    let m = data.votes.num_sources();
    if st.batches_seen() > 0 && m != st.num_sources() {
        return Err(CliError::Input(format!("records have {m} sources, state has {}", st.num_sources())));
    }

    let n = data.votes.num_examples();
    let mut out = BufWriter::new(io::stdout());
    let mut first_error = None;
    for start in (0..n).step_by(config.batch_size) {
        let range = start..(start + config.batch_size).min(n);
        let size = range.len();
        let batch = data.votes.slice(range, st.batches_seen());
        let metrics = match st.update(&batch, est) {
            Ok(report) => {
                state::save(state_path, &st)?;
                BatchMetrics {
                    batch: report.batch_index,
                    size,
                    initial: report.initial,
                    updated: true,
                    error: None,
                    accuracies: st.source_accuracies()?,
                }
            }
            Err(e) => {
                log::error!("batch starting at record {} rejected: {e}", data.lines[start]);
                let metrics = BatchMetrics {
                    batch: st.batches_seen(),
                    size,
                    initial: st.batches_seen() == 0,
                    updated: false,
                    error: Some(e.to_string()),
                    accuracies: Vec::new(),
                };
                first_error.get_or_insert(e);
                metrics
            }
        };
        serde_json::to_writer(&mut out, &metrics).expect("metrics serialize");
        writeln!(out).map_err(CliError::io("writing metrics"))?;
    }
    out.flush().map_err(CliError::io("writing metrics"))?;
    // Later batches still run; the exit status reports the first failure.
    match first_error {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn label(input: Option<&Path>, state_path: &Path, output: Option<&Path>) -> CliResult<()> {
    let st = state::require(state_path)?;
    let data = records::read_records(open_input(input)?, st.domain())?;
    if data.votes.num_sources() != st.num_sources() {
        return Err(CliError::Input(format!(
            "records have {} sources, state has {}",
            data.votes.num_sources(),
            st.num_sources()
        )));
    }
    let labeler = st.labeler()?;
    let mut out = open_output(output)?;
    for (id, row) in data.ids.iter().zip(data.votes.votes()) {
        let p = labeler.label(row)?;
        records::write_label(&mut out, id, &p).map_err(CliError::io("writing labels"))?;
    }
    out.flush().map_err(CliError::io("writing labels"))
}

fn simulate(n: Option<usize>, output: Option<&Path>, common: &Common) -> CliResult<()> {
    let config = common.load(false)?;
    let spec = config.synthetic_spec()?;
    let n = n.or(config.synth.n).ok_or_else(|| CliError::Input("give -n or the `synth.n` key".into()))?;
    let mut out = open_output(output)?;
    if n > 0 {
        let data = generate(&spec, n)?;
        for (i, (row, &y)) in data.batch.votes().iter().zip(&data.labels).enumerate() {
            let rec = Record {
                id: i.to_string(),
                labels: row.iter().map(|&v| i64::from(v)).collect(),
                true_label: Some(i64::from(y)),
            };
            records::write_record(&mut out, &rec).map_err(CliError::io("writing records"))?;
        }
    }
    out.flush().map_err(CliError::io("writing records"))
}

#[derive(Serialize)]
struct TestSummary {
    test: usize,
    folds: Vec<usize>,
    mean_accuracy: f64,
    baseline_accuracy: Option<f64>,
    failed_batches: usize,
    per_source_accuracy: Vec<f64>,
}

#[derive(Serialize)]
struct Summary<'a> {
    mode: EvalMode,
    examples: usize,
    mean_accuracy: f64,
    baseline_accuracy: Option<f64>,
    tests: Vec<TestSummary>,
    config: &'a HarnessConfig,
}

fn summarize<'a>(report: &FoldReport, examples: usize, config: &'a HarnessConfig) -> Summary<'a> {
    Summary {
        mode: report.mode,
        examples,
        mean_accuracy: report.mean_accuracy,
        baseline_accuracy: report.baseline_accuracy,
        tests: report
            .tests
            .iter()
            .map(|t| TestSummary {
                test: t.test,
                folds: t.folds.clone(),
                mean_accuracy: t.report.mean_accuracy,
                baseline_accuracy: t.report.baseline_accuracy,
                failed_batches: t.report.failed_batches,
                per_source_accuracy: t.report.per_source_accuracy.clone(),
            })
            .collect(),
        config,
    }
}

fn evaluate(input: Option<&Path>, mode: Mode, out_dir: &Path, prequential: bool, common: &Common) -> CliResult<()> {
    let config = common.load(prequential)?;
    let data = records::read_records(open_input(input)?, LabelDomain::new(config.num_classes)?)?;
    let truth =
        data.complete_truth().map_err(|line| CliError::Input(format!("line {line}: record has no true_label")))?;
    let labeled = LabeledData::new(data.votes, truth)?;
    std::fs::create_dir_all(out_dir).map_err(CliError::io(format!("creating {}", out_dir.display())))?;
    let write_err = |name: &str| CliError::io(format!("writing {name}"));

    match mode {
        Mode::Sweep => {
            let rows = harness::alpha_sweep_folds(&labeled, &config.harness, &config.alphas, config.folds)?;
            harness::write_sweep_csv(&rows, create(&out_dir.join("sweep.csv"))?).map_err(write_err("sweep.csv"))?;
            harness::write_json(&rows, create(&out_dir.join("sweep.json"))?).map_err(write_err("sweep.json"))?;
            for r in &rows {
                println!("alpha {}: mean accuracy {:.5}", r.alpha, r.mean_accuracy);
            }
        }
        Mode::Incremental | Mode::Baseline => {
            let eval_mode = if matches!(mode, Mode::Baseline) { EvalMode::Baseline } else { EvalMode::Incremental };
            let report = harness::run_folds(&labeled, &config.harness, eval_mode, config.folds)?;
            harness::write_fold_csv(&report, create(&out_dir.join("report.csv"))?).map_err(write_err("report.csv"))?;
            let summary = summarize(&report, labeled.len(), &config.harness);
            harness::write_json(&summary, create(&out_dir.join("summary.json"))?).map_err(write_err("summary.json"))?;
            println!("mean accuracy {:.5}", report.mean_accuracy);
            if let Some(b) = report.baseline_accuracy {
                println!("baseline accuracy {b:.5}");
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::FitStream { input, state, common } => fit_stream(input.as_deref(), &state, &common),
        Command::Label { input, state, output } => label(input.as_deref(), &state, output.as_deref()),
        Command::Simulate { n, output, common } => simulate(n, output.as_deref(), &common),
        Command::Evaluate { input, mode, out, prequential, common } => {
            evaluate(input.as_deref(), mode, &out, prequential, &common)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        // A closed downstream pipe (`| head`) is not a failure.
        Err(CliError::Io { source, .. }) if source.kind() == io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
