use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use wakejam_cli::commands::{self, EvalMode};
use wakejam_cli::{CliError, CliResult, ExperimentConfig};

/// Adversarial music against a wake-word detector.
///
/// Any configuration key can be overridden with `--section.key value`,
/// e.g. `--attack.steps 50`.
#[derive(Parser, Debug)]
#[command(name = "wakejam", version)]
struct Cli {
    /// Experiment configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Baseline {
    None,
    RandomMusic,
    RandomNotes,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the labelled corpus from keyword and background audio.
    MakeCorpus,
    /// Train the detector and report held-out metrics.
    Train,
    /// Evaluate the detector, optionally under a perturbation and/or rooms.
    Eval {
        /// Play the optimized attack.
        #[arg(long)]
        attacked: bool,
        /// Play a random baseline at the attack's loudness.
        #[arg(long, value_enum, default_value = "none")]
        baseline: Baseline,
        /// Apply the held-out room impulse responses.
        #[arg(long)]
        rooms: bool,
    },
    /// Optimize the adversarial melody.
    Attack,
    /// Render sampled room impulse responses.
    Rir,
    /// Compare analytic and finite-difference gradients.
    Gradcheck,
}

/// Pulls `--a.b value` / `--a.b=value` pairs out of argv; clap sees the rest.
fn split_overrides(args: Vec<String>) -> CliResult<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(key) = arg.strip_prefix("--").filter(|k| k.split('=').next().is_some_and(|k| k.contains('.'))) else {
            rest.push(arg);
            continue;
        };
        if let Some((k, v)) = key.split_once('=') {
            overrides.push((k.to_string(), v.to_string()));
        } else {
            let v = it.next().ok_or_else(|| CliError::Usage(format!("override --{key} needs a value")))?;
            overrides.push((key.to_string(), v));
        }
    }
    Ok((rest, overrides))
}

fn run() -> CliResult<()> {
    let (args, overrides) = split_overrides(std::env::args().collect())?;
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.to_string())),
    };
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::MakeCorpus => {
            let s = commands::make_corpus(&cfg)?;
            for sp in &s.splits {
                println!(
                    "{:?}: {} clips, {} keyword events, {} raw utterances ({} keywords), {} augmented",
                    sp.split, sp.clips, sp.keyword_events, sp.raw_utterances, sp.raw_keywords, sp.augmented_utterances
                );
            }
        }
        Command::Train => {
            let s = commands::train_detector(&cfg)?;
            let r = &s.heldout;
            println!(
                "held-out F1 {:.4} (precision {:.4}, recall {:.4}, FAR {:.3}); best epoch {} of {}",
                r.f1, r.precision, r.recall, r.false_alarm_rate, s.best_epoch, s.epochs_run
            );
        }
        Command::Eval { attacked, baseline, rooms } => {
            let mode = match (attacked, baseline) {
                (false, Baseline::None) => EvalMode::Clean,
                (true, Baseline::None) => EvalMode::Attacked,
                (false, Baseline::RandomMusic) => EvalMode::RandomMusic,
                (false, Baseline::RandomNotes) => EvalMode::RandomNotes,
                (true, _) => return Err(CliError::Usage("--attacked and --baseline are exclusive".into())),
            };
            let s = commands::evaluate(&cfg, mode, rooms)?;
            let r = &s.report;
            println!(
                "{}{}: F1 {:.4} (precision {:.4}, recall {:.4}, FAR {:.3})",
                mode.name(),
                if rooms { " + rooms" } else { "" },
                r.f1,
                r.precision,
                r.recall,
                r.false_alarm_rate
            );
        }
        Command::Attack => {
            let s = commands::attack(&cfg, |row, _| {
                if row.step % 25 == 0 {
                    eprintln!(
                        "step {:4}  loss {:.4}  wake {:.4}  masking {:.4}",
                        row.step, row.attack_loss, row.wake_loss, row.masking_loss
                    );
                }
            })?;
            for (name, r) in [
                ("clean", &s.clean),
                ("attacked", &s.attacked),
                ("clean + rooms", &s.clean_rooms),
                ("attacked + rooms", &s.attacked_rooms),
            ] {
                println!("{name:>17}: F1 {:.4} (precision {:.4}, recall {:.4})", r.f1, r.precision, r.recall);
            }
        }
        Command::Rir => {
            let rows = commands::rir(&cfg)?;
            println!("wrote {} impulse responses to {}", rows.len(), cfg.paths.report_dir.join("rir").display());
        }
        Command::Gradcheck => {
            let report = commands::gradcheck(&cfg)?;
            for k in &report.summaries {
                println!(
                    "{:<16} checked {:4}  max rel err {:.2e} (tol {:.0e})",
                    k.kind.name(),
                    k.checked,
                    k.max_rel_error,
                    k.tolerance
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("wakejam: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
