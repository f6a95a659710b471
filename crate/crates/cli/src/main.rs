mod commands;
mod config;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde_json::json;

use commands::{Ctx, Outcome, PkArgs};
use config::Config;

#[derive(Parser, Debug)]
#[command(name = "rankone", version, about = "Rank-one construction laboratory")]
struct Cli {
    /// Configuration file (schedule plus experiment sections).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for parallel stages.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[arg(long, global = true)]
    max_stage: Option<usize>,
    #[arg(long, global = true)]
    samples: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Tower heights, spacers and offsets.
    Build,
    /// Correlations over a lag range.
    Correlate {
        /// e.g. `-10..=10,50`.
        #[arg(long, allow_hyphen_values = true)]
        lags: Option<String>,
        #[arg(long)]
        eps: Option<String>,
    },
    /// Sidon and growth checks with the lag census.
    SidonCheck {
        #[arg(long)]
        census: Option<bool>,
    },
    /// Phase table of tensor powers.
    Classify {
        #[arg(long, allow_hyphen_values = true)]
        nu: Option<String>,
        #[arg(long)]
        dmax: Option<u32>,
    },
    /// Power sum against the product formula.
    #[command(name = "verify-41")]
    Verify41 {
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        d: Option<u32>,
    },
    /// Block averaging operator norms.
    PkDiagnose {
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        d: Option<u32>,
        /// Comma list of powers.
        #[arg(long, value_delimiter = ',')]
        p: Option<Vec<u32>>,
        /// Stages of the block actually used.
        #[arg(long)]
        cap: Option<usize>,
        #[arg(long)]
        decompose: bool,
    },
    /// Exact cylinder measures with an optional Monte Carlo check.
    Poisson,
    /// Divergent joint averages: windows, permutations and running means.
    Diverge {
        #[arg(long)]
        n_max: Option<i128>,
        #[arg(long)]
        no_verify: bool,
    },
    /// Repulsion measures and summability.
    Repulse {
        #[arg(long)]
        windows: Option<usize>,
        #[arg(long)]
        n_max: Option<String>,
    },
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::Build => "build",
            Cmd::Correlate { .. } => "correlate",
            Cmd::SidonCheck { .. } => "sidon-check",
            Cmd::Classify { .. } => "classify",
            Cmd::Verify41 { .. } => "verify-41",
            Cmd::PkDiagnose { .. } => "pk-diagnose",
            Cmd::Poisson => "poisson",
            Cmd::Diverge { .. } => "diverge",
            Cmd::Repulse { .. } => "repulse",
        }
    }
}

fn dispatch(cmd: Cmd, ctx: &Ctx) -> rankone::Result<Outcome> {
    match cmd {
        Cmd::Build => commands::build(ctx),
        Cmd::Correlate { lags, eps } => commands::correlate(ctx, lags, eps),
        Cmd::SidonCheck { census } => commands::sidon_check(ctx, census),
        Cmd::Classify { nu, dmax } => commands::classify(ctx, nu, dmax),
        Cmd::Verify41 { m, d } => commands::verify41(ctx, m, d),
        Cmd::PkDiagnose { k, d, p, cap, decompose } => commands::pk_diagnose(
            ctx,
            PkArgs { k, d, p, cap, decompose },
        ),
        Cmd::Poisson => commands::poisson(ctx),
        Cmd::Diverge { n_max, no_verify } => commands::diverge(ctx, n_max, !no_verify),
        Cmd::Repulse { windows, n_max } => commands::repulse(ctx, windows, n_max),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Config::parse(&text)?
        }
        None => Config::default(),
    };
    if cli.jobs == 0 {
        return Err(rankone::Error::InvalidSpec("--jobs must be positive".into()).into());
    }
    let ctx = Ctx {
        cfg: &cfg,
        seed: cli.seed,
        jobs: cli.jobs,
        max_stage: cli.max_stage,
        samples: cli.samples,
    };
    let name = cli.cmd.name();
    let outcome = dispatch(cli.cmd, &ctx)?;

    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    for (file, body) in &outcome.files {
        let path = cli.out.join(file);
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
    }
    let manifest = json!({
        "command": name,
        "seed": cli.seed,
        "jobs": cli.jobs,
        "max_stage": cli.max_stage,
        "samples": cli.samples,
        "schedule": cfg.schedule_lines(),
        "sections": cfg.sections,
        "params": outcome.params,
        "outputs": outcome.files.iter().map(|(f, _)| f).collect::<Vec<_>>(),
    });
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(cli.out.join("manifest.json"), text)?;
    println!("{}", json!({ "command": name, "summary": outcome.summary }));
    Ok(())
}

/// 1 invalid input, 2 budget exhausted, 3 violated internal invariant.
fn exit_code(err: &anyhow::Error) -> (u8, &'static str) {
    match err.downcast_ref::<rankone::Error>() {
        Some(e) if e.is_budget() => (2, e.code()),
        Some(e @ rankone::Error::InternalInvariant(_)) => (3, e.code()),
        Some(e) => (1, e.code()),
        None => (1, "io"),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, kind) = exit_code(&err);
            eprintln!("{}", json!({ "error": kind, "message": format!("{err:#}"), "exit": code }));
            ExitCode::from(code)
        }
    }
}
