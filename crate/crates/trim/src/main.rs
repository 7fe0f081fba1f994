use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use trim::commands;
use trim::config::RunConfig;

/// Trajectory and instance-mask trimming for splat-grid diffusion.
#[derive(Debug, Parser)]
#[command(name = "trim", version, about)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration file; built-in defaults when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set denoiser.steps=10`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Shorthand for `--set output_dir=...`.
    #[arg(long, short, global = true)]
    output_dir: Option<PathBuf>,
    /// Shorthand for `--set denoiser.steps=...`.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Shorthand for `--set denoiser.side=...`.
    #[arg(long, global = true)]
    side: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate prompts and scored trajectories.
    SynthData {
        #[arg(long)]
        prompts: Option<usize>,
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Build the balanced pairwise train/test split.
    BuildPairs {
        #[arg(long)]
        quota: Option<usize>,
    },
    /// Train the pairwise selector.
    TrainSelector {
        /// Architecture name, e.g. `Conv1-FC2`.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Report pairwise accuracy of a checkpoint.
    EvalSelector,
    /// Run one inference mode over the prompt set.
    Infer {
        /// baseline, +IM, +TR or +TRIM.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        candidates: Option<usize>,
        #[arg(long)]
        reduce_at: Option<usize>,
        /// selector or oracle.
        #[arg(long)]
        judge: Option<String>,
    },
    /// Masked versus unmasked denoiser throughput.
    Bench,
    /// Score versus trajectory count or step count.
    Scaling {
        /// trajectories or steps.
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<usize>>,
    },
    /// Output diversity with and without reduction.
    Diversity {
        #[arg(long)]
        repeats: Option<usize>,
    },
}

fn push<T: std::fmt::Display>(out: &mut Vec<String>, key: &str, value: Option<T>) {
    if let Some(v) = value {
        out.push(format!("{key}={v}"));
    }
}

fn quoted(value: Option<String>) -> Option<String> {
    value.map(|v| format!("{v:?}"))
}

fn overrides(cli: &Cli) -> Vec<String> {
    let c = &cli.common;
    let mut o = Vec::new();
    push(
        &mut o,
        "output_dir",
        quoted(c.output_dir.as_ref().map(|p| p.display().to_string())),
    );
    push(&mut o, "denoiser.steps", c.steps);
    push(&mut o, "denoiser.side", c.side);
    match &cli.command {
        Command::SynthData { prompts, seeds } => {
            push(&mut o, "data.prompts", *prompts);
            push(&mut o, "data.seeds", *seeds);
        }
        Command::BuildPairs { quota } => push(&mut o, "pairs.quota", *quota),
        Command::TrainSelector { variant, epochs } => {
            push(&mut o, "selector.variant", quoted(variant.clone()));
            push(&mut o, "train.epochs", *epochs);
        }
        Command::Infer {
            mode,
            candidates,
            reduce_at,
            judge,
        } => {
            push(&mut o, "inference.mode", quoted(mode.clone()));
            push(&mut o, "inference.candidates", *candidates);
            push(&mut o, "inference.reduce_at", *reduce_at);
            push(&mut o, "inference.judge", quoted(judge.clone()));
        }
        Command::Scaling { axis, values } => {
            push(&mut o, "scaling.axis", quoted(axis.clone()));
            push(&mut o, "scaling.values", values.as_ref().map(|v| format!("{v:?}")));
        }
        Command::Diversity { repeats } => push(&mut o, "diversity.repeats", *repeats),
        Command::EvalSelector | Command::Bench => {}
    }
    // Explicit `--set` entries win over the shorthands.
    o.extend(c.overrides.iter().cloned());
    o
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = RunConfig::load(cli.common.config.as_deref(), &overrides(&cli))?;
    if cfg.output_dir.as_os_str().is_empty() {
        cfg.output_dir = PathBuf::from("out");
    }
    std::fs::create_dir_all(&cfg.output_dir)?;
    std::fs::write(cfg.output_dir.join("config.toml"), cfg.to_toml()?)?;

    match cli.command {
        Command::SynthData { .. } => {
            let ds = commands::synth_data(&cfg)?;
            println!(
                "synthesized {} trajectories over {} prompts (capture at t = {})",
                ds.trajectory_count(),
                ds.entries.len(),
                ds.capture_at
            );
        }
        Command::BuildPairs { .. } => {
            let set = commands::build_pair_set(&cfg)?;
            println!("{} train pairs, {} test pairs", set.train.len(), set.test.len());
        }
        Command::TrainSelector { .. } => {
            let model = commands::train_selector(&cfg)?;
            let last = model.state.loss_history.last().copied().unwrap_or(f64::NAN);
            println!(
                "trained {} ({} parameters), final loss {last:.4}",
                cfg.selector.variant,
                model.param_count()
            );
        }
        Command::EvalSelector => {
            for r in commands::eval_selector(&cfg)?.iter().filter(|r| r.bin == "all") {
                println!("{} accuracy {:.4} over {} pairs", r.split, r.accuracy, r.pairs);
            }
        }
        Command::Infer { .. } => {
            let outcomes = commands::infer(&cfg)?;
            let n = outcomes.len().max(1) as f64;
            let flops: u64 = outcomes.iter().map(|o| o.cost.flops).sum();
            let score: f64 = outcomes.iter().map(|o| o.score).sum::<f64>() / n;
            println!(
                "{} over {} prompts: mean score {score:.4}, total flops {flops}",
                cfg.inference.mode.name(),
                outcomes.len()
            );
        }
        Command::Bench => {
            let r = commands::bench(&cfg)?;
            println!(
                "unmasked {:.1} steps/s, masked {:.1} steps/s, speedup {:.2}x, foreground at most {:.1}%",
                r.unmasked_steps_per_second,
                r.masked_steps_per_second,
                r.speedup(),
                100.0 * r.max_foreground_fraction
            );
        }
        Command::Scaling { .. } => {
            for r in commands::scaling(&cfg)? {
                println!(
                    "{} = {:>3}: {:>4} steps, score {:.4} ± {:.4}",
                    r.axis, r.value, r.total_steps, r.score_mean, r.score_std
                );
            }
        }
        Command::Diversity { .. } => {
            let r = commands::diversity(&cfg)?;
            for s in [&r.plain, &r.reduced] {
                println!(
                    "{}: score {:.4} ± {:.4}, chamfer {:.3} [{:.3}, {:.3}]",
                    if s.reduced {
                        "with reduction"
                    } else {
                        "without reduction"
                    },
                    s.score_mean,
                    s.score_std,
                    s.chamfer_mean,
                    s.chamfer_min,
                    s.chamfer_max
                );
            }
        }
    }
    Ok(())
}
