//! `septda`: train, run and evaluate the separator from the command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
//! failure.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use septda::eval::{
    evaluate_known_count, evaluate_unknown_count, load_manifest, simulate_dataset, write_synthetic_sources,
    EvalItem, ModelSeparator,
};
use septda::model::{count_parameters, load_checkpoint, load_checkpoint_for, save_checkpoint, SepTda, Speakers};
use septda::signal::{read_wav, write_wav};
use septda::training::{load_run_config, train, write_history, Dataset, Flow, LossRecord};
use septda::Error;

#[derive(Parser, Debug)]
#[command(name = "septda", version, about = "Speech separation for an unknown number of speakers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on a simulated dataset directory.
    Train(TrainArgs),
    /// Separate one mixture into per-speaker WAV files.
    Separate(SeparateArgs),
    /// Estimate the number of speakers in a mixture.
    Count(CountArgs),
    /// Score a model on the items of a manifest.
    Eval(EvalArgs),
    /// Build mixtures from a directory of clean sources.
    Simulate(SimulateArgs),
    /// Print the exact parameter count of a configuration.
    Params(ParamsArgs),
    /// Write synthetic harmonic sources, for trying the pipeline without a corpus.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Model and training keys, `key = value` per line.
    #[arg(long)]
    config: PathBuf,
    /// Directory with `manifest.tsv`; `valid/manifest.tsv` is used for validation if present.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Loss history CSV; defaults to `<out>.history.csv`.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Continue from a checkpoint saved with the same model config.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SeparateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    /// Number of speakers, or `auto`.
    #[arg(long, default_value = "auto")]
    speakers: Speakers,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct CountArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Separate with the true speaker count.
    #[arg(long, conflicts_with = "auto_count")]
    known_count: bool,
    /// Estimate the speaker count (the default).
    #[arg(long)]
    auto_count: bool,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    sources: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ParamsArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 4.0)]
    seconds: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8000)]
    sample_rate: u32,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFiniteLoss { .. } => 3,
        Error::TooManySpeakers { .. } => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> septda::Result<()> {
    match command {
        Command::Train(a) => cmd_train(a),
        Command::Separate(a) => cmd_separate(a),
        Command::Count(a) => cmd_count(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Simulate(a) => {
            let manifest = simulate_dataset(&a.sources, a.count, a.n, a.seed, &a.out)?;
            println!("wrote {} items to {}", a.n, manifest.display());
            Ok(())
        }
        Command::Params(a) => {
            let (model, _) = load_run_config(&a.config)?;
            println!("{}", count_parameters(&model)?);
            Ok(())
        }
        Command::Synth(a) => {
            write_synthetic_sources(&a.out, a.n, a.seconds, a.sample_rate, a.seed)?;
            println!("wrote {} sources to {}", a.n, a.out.display());
            Ok(())
        }
    }
}

fn format_probs(probs: &[f64]) -> String {
    probs.iter().map(|p| format!("{p:.4}")).collect::<Vec<_>>().join(" ")
}

fn training_items(manifest: &Path) -> septda::Result<Vec<septda::training::TrainingItem>> {
    Ok(load_manifest(manifest)?.iter().map(EvalItem::to_training).collect())
}

fn cmd_train(a: TrainArgs) -> septda::Result<()> {
    let (model_config, training) = load_run_config(&a.config)?;
    let valid = a.data.join("valid").join("manifest.tsv");
    let data = Dataset {
        train: training_items(&a.data.join("manifest.tsv"))?,
        validation: if valid.exists() { training_items(&valid)? } else { Vec::new() },
    };
    let (model, mut params, optimizer) = match &a.resume {
        Some(path) => {
            let ck = load_checkpoint_for(path, &model_config)?;
            (ck.model, ck.params, ck.optimizer)
        }
        None => {
            let (m, p) = SepTda::new::<f32>(&model_config, training.seed)?;
            (m, p, None)
        }
    };
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "{}", LossRecord::CSV_HEADER);
    let result = train(&model, &mut params, optimizer, &data, &training, |p| {
        let _ = writeln!(stdout, "{}", p.record.to_csv());
        Flow::Continue
    });
    let outcome = result?;
    let history = a.history.unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".history.csv");
        PathBuf::from(s)
    });
    write_history(&history, &outcome.history)?;
    save_checkpoint(&a.out, &model.config, &params, Some(&outcome.optimizer))?;
    eprintln!("saved {} after {} steps", a.out.display(), outcome.steps);
    Ok(())
}

fn cmd_separate(a: SeparateArgs) -> septda::Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let audio = read_wav(&a.input)?;
    let result = ck.model.separate(&ck.params, &audio, a.speakers, false)?;
    std::fs::create_dir_all(&a.out_dir)?;
    for (i, est) in result.estimates.iter().enumerate() {
        write_wav(a.out_dir.join(format!("est_{}.wav", i + 1)), est)?;
    }
    println!("probs: {}", format_probs(&result.probs));
    println!("speakers: {}", result.estimates.len());
    Ok(())
}

fn cmd_count(a: CountArgs) -> septda::Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let audio = read_wav(&a.input)?;
    let probs = ck.model.existence_probs(&ck.params, &audio)?;
    println!("speakers: {}", septda::tda::count_speakers(&probs, ck.model.config.max_speakers));
    println!("probs: {}", format_probs(&probs));
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> septda::Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let items = load_manifest(&a.manifest)?;
    let sep = ModelSeparator {
        model: &ck.model,
        params: &ck.params,
    };
    let report = if a.known_count {
        evaluate_known_count(&sep, &items)?
    } else {
        evaluate_unknown_count(&sep, &items)?
    };
    print!("{}", report.to_table());
    Ok(())
}
