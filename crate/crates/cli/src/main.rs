use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use bisimlab::autodiff::ParameterSet;
use bisimlab::certify::certify_all;
use bisimlab::envs::{
    compare_alignment, evaluate_distractor_invariance, initial_models, models_from_checkpoint, train, Distractor,
    EnvSpec, RunConfig,
};
use bisimlab::erank::{run_linear_experiment, LinearSetting};
use bisimlab::mdp::{Policy, TabularMdp};
use bisimlab::metric::solve_fixed_point;

#[derive(Parser)]
#[command(name = "bisimlab", version, about = "Bisimulation metrics, masked latent dynamics and effective rank")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train encoder and latent dynamics on a pixel gridworld.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory for config.json, metrics.csv and checkpoints.
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Evaluate a trained checkpoint against its untrained initialization.
    Eval {
        #[command(subcommand)]
        which: EvalCommand,
    },
    /// Exact bisimulation metrics of tabular MDPs.
    Metric {
        #[command(subcommand)]
        which: MetricCommand,
    },
    /// Effective-rank experiments.
    Erank {
        #[command(subcommand)]
        which: ErankCommand,
    },
    /// Run certifiers; exits non-zero if any check fails.
    Certify {
        #[command(subcommand)]
        which: CertifyCommand,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Environment JSON; must render frames the checkpoint's encoder accepts.
    #[arg(long)]
    env: PathBuf,
    /// Run configuration; defaults to the config.json of the checkpoint's run.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Significance level of the assertion.
    #[arg(long, default_value_t = 0.05)]
    level: f64,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Rank correlation of latent distances with the exact metric; asserts the
    /// trained encoder beats the untrained one.
    Align {
        #[command(flatten)]
        common: EvalArgs,
        #[arg(long, default_value_t = 500)]
        pairs: usize,
        #[arg(long, default_value_t = 999)]
        permutations: usize,
    },
    /// Latent drift between clean and distracted renders; asserts the trained
    /// encoder drifts less than the untrained one.
    Invariance {
        #[command(flatten)]
        common: EvalArgs,
        #[arg(long, default_value_t = 200)]
        states: usize,
    },
}

#[derive(Subcommand)]
enum MetricCommand {
    /// Exact fixed point of the on-policy bisimulation operator.
    Solve {
        #[arg(long)]
        mdp: PathBuf,
        /// Policy JSON (`{"probs": [[..], ..]}`); uniform when omitted.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        gamma_override: Option<f64>,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        #[arg(long, default_value_t = 10_000)]
        max_iter: usize,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ErankCommand {
    /// Linear two-view experiment with `d_i = 8·2^{-i}`.
    Run {
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = 1.0)]
        sigma2: f64,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 256)]
        batch: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum CertifyCommand {
    /// Every metric and effective-rank certifier.
    All {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn emit(value: &impl Serialize, to: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match to {
        Some(p) => std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

/// `run/config.json` for `run/final.ckpt` or `run/checkpoints/step_N.ckpt`.
fn locate_config(checkpoint: &Path) -> Result<PathBuf> {
    checkpoint
        .ancestors()
        .skip(1)
        .take(2)
        .map(|d| d.join("config.json"))
        .find(|p| p.is_file())
        .with_context(|| format!("no config.json next to {}; pass --config", checkpoint.display()))
}

#[derive(Serialize)]
struct Verdict<T> {
    passed: bool,
    #[serde(flatten)]
    report: T,
}

fn eval(cmd: EvalCommand) -> Result<bool> {
    let common = match &cmd {
        EvalCommand::Align { common, .. } | EvalCommand::Invariance { common, .. } => common,
    };
    let config_path = match &common.config {
        Some(p) => p.clone(),
        None => locate_config(&common.checkpoint)?,
    };
    let config = RunConfig::from_json(&read(&config_path)?)?;
    let env: EnvSpec = serde_json::from_str(&read(&common.env)?).context("parsing environment")?;
    let ckpt = ParameterSet::load(&common.checkpoint)?;
    let (trained, _) = models_from_checkpoint(&config, &ckpt)?;
    let (untrained, _) = initial_models(&config)?;
    match cmd {
        EvalCommand::Align { common, pairs, permutations } => {
            let r = compare_alignment(&trained, &untrained, &env, pairs, permutations, common.seed)?;
            let passed = r.significant(common.level);
            eprintln!(
                "spearman trained {:.4} untrained {:.4}, p = {:.4}",
                r.trained.spearman, r.untrained.spearman, r.test.p_value
            );
            emit(&Verdict { passed, report: r }, common.report.as_deref())?;
            Ok(passed)
        }
        EvalCommand::Invariance { common, states } => {
            let clean = EnvSpec {
                distractor: Distractor::None,
                ..env.clone()
            };
            let r = evaluate_distractor_invariance(&trained, &untrained, &clean, &env, states, common.seed)?;
            let passed = r.trained_mean < r.untrained_mean;
            eprintln!(
                "mean drift trained {:.4} untrained {:.4}",
                r.trained_mean, r.untrained_mean
            );
            emit(&Verdict { passed, report: r }, common.report.as_deref())?;
            Ok(passed)
        }
    }
}

fn erank_run(setting: &LinearSetting, steps: usize, batch: usize, out: &Path) -> Result<()> {
    let run = run_linear_experiment(setting, steps, batch)?;
    let mut w = csv::Writer::from_path(out).with_context(|| format!("writing {}", out.display()))?;
    let mut header = vec!["step".to_string(), "erank".into(), "loss".into()];
    header.extend((1..=setting.k).map(|i| format!("eig_{i}")));
    w.write_record(&header)?;
    for s in &run {
        let mut row = vec![
            s.step.to_string(),
            s.report.erank.to_string(),
            s.loss.map(|l| l.to_string()).unwrap_or_default(),
        ];
        row.extend(
            (0..setting.k).map(|i| s.report.eigenvalues.get(i).copied().unwrap_or(0.0).to_string()),
        );
        w.write_record(&row)?;
    }
    w.flush()?;
    if let (Some(first), Some(last)) = (run.first(), run.last()) {
        eprintln!("erank {:.4} -> {:.4} over {steps} steps", first.report.erank, last.report.erank);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, out } => {
            let config = RunConfig::from_json(&read(&config)?)?;
            let outcome = train(&config, Some(&out))?;
            if let Some(last) = outcome.metrics.last() {
                eprintln!(
                    "step {} total {:.5} erank {:.4}",
                    last.step, last.l_total, last.latent_erank
                );
            }
            println!("{}", out.join("final.ckpt").display());
            Ok(true)
        }
        Command::Eval { which } => eval(which),
        Command::Metric {
            which: MetricCommand::Solve { mdp, policy, gamma_override, tol, max_iter, report },
        } => {
            let mut mdp = TabularMdp::from_json(&read(&mdp)?)?;
            if let Some(g) = gamma_override {
                mdp = mdp.with_gamma(g)?;
            }
            let policy = match policy {
                Some(p) => serde_json::from_str::<Policy>(&read(&p)?).context("parsing policy")?,
                None => Policy::uniform(mdp.n_states(), mdp.n_actions()),
            };
            let r = solve_fixed_point(&mdp, &policy, tol, max_iter)?;
            eprintln!(
                "{} iterations, diameter {:.6} (bound {:.6})",
                r.iterations, r.diameter, r.diameter_bound
            );
            emit(&r, report.as_deref())?;
            Ok(true)
        }
        Command::Erank {
            which: ErankCommand::Run { n, k, sigma2, steps, seed, lr, batch, out },
        } => {
            let setting = LinearSetting {
                n,
                k,
                d: (0..n as i32).map(|i| 8.0 * 0.5f64.powi(i)).collect(),
                sigma2,
                lr,
                seed,
            };
            erank_run(&setting, steps, batch, &out)?;
            Ok(true)
        }
        Command::Certify { which: CertifyCommand::All { seed } } => {
            let checks = certify_all(seed)?;
            for c in &checks {
                eprintln!("{c}");
            }
            emit(&checks, None)?;
            Ok(checks.iter().all(|c| c.passed))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
