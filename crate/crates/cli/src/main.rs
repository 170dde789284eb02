use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use smallgain_cli::{exit, render, run, stamp, Command, CommandOutput, ScenarioConfig};

#[derive(Parser)]
#[command(name = "smallgain", version, about = "Small-gain certificates and simulations for infinite networks")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Bracket r(Psi), build the weights and the certificate.
    Analyze(Common),
    /// Simulate a truncation and check the certificate along it.
    Simulate(Common),
    /// Consensus error system.
    Consensus(Common),
    /// Distributed Luenberger observer.
    Observer(Common),
    /// Clock augmentation of a time-varying network.
    Timevarying(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Directory for report.json and CSV files; nothing is written without it.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Omit the wall-clock timestamp so reports are reproducible byte for byte.
    #[arg(long)]
    fixed_clock: bool,
    /// Integration step [default: 1e-3].
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    horizon: Option<f64>,
    /// Truncation length.
    #[arg(long)]
    blocks: Option<usize>,
    /// Weight-construction slack [default: 1e-3 * lambda_lo].
    #[arg(long)]
    rho: Option<f64>,
    /// Convergence tolerance of the truncation roots [default: 1e-3].
    #[arg(long)]
    bracket_tol: Option<f64>,
    /// Dini-derivative tolerance [default: 10 * max|V''| * dt].
    #[arg(long)]
    dissipation_tol: Option<f64>,
    /// Slack on envelope and bound margins [default: 1e-9].
    #[arg(long)]
    envelope_tol: Option<f64>,
}

impl Common {
    fn apply(&self, cfg: &mut ScenarioConfig) {
        let r = &mut cfg.run;
        if let Some(v) = self.seed {
            r.seed = v;
        }
        if let Some(v) = self.dt {
            r.dt = v;
        }
        if let Some(v) = self.horizon {
            r.horizon = v;
        }
        if let Some(v) = self.blocks {
            r.blocks = v;
        }
        if self.rho.is_some() {
            r.rho = self.rho;
        }
        if let Some(v) = self.bracket_tol {
            r.bracket_tol = v;
        }
        if self.dissipation_tol.is_some() {
            r.dissipation_tol = self.dissipation_tol;
        }
        if let Some(v) = self.envelope_tol {
            r.envelope_tol = v;
        }
    }
}

fn write_outputs(dir: &Path, out: &CommandOutput, report: &[u8]) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("report.json"), report).context("writing report.json")?;
    for (name, bytes) in &out.artifacts {
        std::fs::write(dir.join(name), bytes).with_context(|| format!("writing {name}"))?;
    }
    Ok(())
}

fn execute(cmd: Command, args: &Common) -> anyhow::Result<i32> {
    let mut cfg = ScenarioConfig::load(&args.config)?;
    args.apply(&mut cfg);
    let mut out = run(cmd, &cfg)?;
    stamp(&mut out.report, cfg.run.seed, args.fixed_clock);
    let report = render(&out.report)?;
    if let Some(line) = out.report.get("verdict_line").and_then(|v| v.as_str()) {
        println!("{line}");
    }
    match &args.out {
        Some(dir) => write_outputs(dir, &out, &report)?,
        None => print!("{}", String::from_utf8_lossy(&report)),
    }
    Ok(out.exit)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(exit::INPUT as u8);
        }
    };
    let (cmd, args) = match &cli.command {
        Cmd::Analyze(a) => (Command::Analyze, a),
        Cmd::Simulate(a) => (Command::Simulate, a),
        Cmd::Consensus(a) => (Command::Consensus, a),
        Cmd::Observer(a) => (Command::Observer, a),
        Cmd::Timevarying(a) => (Command::TimeVarying, a),
    };
    match execute(cmd, args) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::INPUT as u8)
        }
    }
}
