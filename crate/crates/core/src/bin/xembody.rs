use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use xembody::config::RunConfig;
use xembody::pipeline::{self, Layout, TrainOptions, Which};
use xembody::{Error, Result};

/// Cross-embodiment trajectory transfer pipeline.
#[derive(Parser)]
#[command(name = "xembody", version)]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `io.out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite existing data or restart training from scratch.
    #[arg(long, global = true)]
    force: bool,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Cyclevae,
    Transformer,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scripted expert and learner corpora.
    GenData {
        /// 10000 expert / 1000 learner trajectories.
        #[arg(long)]
        paper_scale: bool,
    },
    /// Train or resume models.
    Train {
        #[arg(value_enum)]
        which: Model,
        /// Halt after N optimizer steps, leaving a resumable checkpoint.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Map expert trajectories, or a learner start state, to learner trajectories.
    Infer {
        /// Expert `.traj.jsonl` file.
        #[arg(long, conflicts_with = "from_learner_state", required_unless_present = "from_learner_state")]
        input: Option<PathBuf>,
        /// Comma-separated learner state; runs the transformer rollout.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        from_learner_state: Option<Vec<f64>>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Alignment metrics and end-to-end trials; writes the report files.
    Eval,
    /// Rebuild report files from the stored evaluation.
    Report,
    /// Finite-difference gradient checks of every loss term.
    Gradcheck {
        /// Detach one parameter so the check must fail.
        #[arg(long)]
        inject_fault: bool,
    },
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let text = cli
        .config
        .as_ref()
        .map(|p| std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display()))))
        .transpose()?;
    let mut overrides = Vec::new();
    for s in &cli.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(out) = &cli.out {
        overrides.push(("io.out".into(), out.display().to_string()));
    }
    if let Command::GenData { paper_scale: true } = cli.command {
        overrides.push(("sim.n_expert".into(), "10000".into()));
        overrides.push(("sim.n_learner".into(), "1000".into()));
    }
    RunConfig::resolve(text.as_deref(), std::env::vars(), &overrides)
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = resolve(&cli)?;
    let layout = Layout::new(&cfg.out);
    match &cli.command {
        Command::GenData { .. } => {
            let m = pipeline::gen_data(&cfg, &layout, cli.force)?;
            println!(
                "wrote {} expert and {} learner trajectories to {}",
                m.expert.count,
                m.learner.count,
                layout.data().display()
            );
        }
        Command::Train { which, stop_after } => {
            let which = match which {
                Model::Cyclevae => Which::Cyclevae,
                Model::Transformer => Which::Transformer,
                Model::All => Which::All,
            };
            let opts = TrainOptions {
                force: cli.force,
                stop_after: *stop_after,
            };
            for s in pipeline::train(&cfg, &layout, which, &opts)? {
                let state = if s.complete { "done" } else { "halted" };
                let loss = s.last_loss.map_or_else(|| "-".into(), |l| format!("{l:.6}"));
                println!("{}: steps {}..{} {state}, last logged loss {loss}", s.model, s.start_step, s.end_step);
            }
        }
        Command::Infer {
            input,
            from_learner_state,
            output,
        } => {
            let path = match (input, from_learner_state) {
                (_, Some(state)) => pipeline::infer_from_state(&cfg, &layout, state, output.clone())?,
                (Some(input), None) => pipeline::infer_file(&layout, input, output.clone())?,
                (None, None) => return Err(Error::Config("infer needs --input or --from-learner-state".into())),
            };
            println!("wrote {}", path.display());
        }
        Command::Eval | Command::Report => {
            let report = if matches!(cli.command, Command::Eval) {
                pipeline::eval(&cfg, &layout)?
            } else {
                pipeline::report(&cfg, &layout)?
            };
            let a = &report.alignment;
            println!(
                "mmd before {:.4}, after {:.4} (ratio {:.3})",
                a.mmd_before.value,
                a.mmd_after.value,
                a.mmd_after.value / a.mmd_before.value
            );
            for v in &report.variants {
                println!(
                    "{}: success {:.1}%, mean S_r {:.4}",
                    v.variant.label(),
                    v.success_ratio,
                    v.mean_smoothness
                );
            }
            println!("reports in {}", layout.reports().display());
        }
        Command::Gradcheck { inject_fault } => {
            let (terms, secs) = pipeline::gradcheck_cmd(&cfg, &layout, *inject_fault)?;
            for t in &terms {
                let status = if t.passed { "PASS" } else { "FAIL" };
                print!("{status} {} max_rel_error={:.3e}", t.name, t.max_rel_error);
                if !t.failing.is_empty() {
                    print!(" failing: {}", t.failing.join(", "));
                }
                println!();
            }
            println!("{} terms in {secs:.2}s", terms.len());
            return Ok(terms.iter().all(|t| t.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(4),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
