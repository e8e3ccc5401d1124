//! Argument parsing and dispatch.

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::commands::{self, Context};
use crate::config::{ExperimentConfig, Overrides};
use crate::error::{CliError, Result};
use crate::manifest::Manifest;
use crate::plot::PlotKind;

#[derive(Debug, Parser)]
#[command(name = "llab", version, about = "Loss-landscape experiments on small quantized networks")]
pub struct Args {
    /// TOML experiment config; every key has a default.
    #[arg(long, global = true, env = "LLAB_CONFIG")]
    pub config: Option<PathBuf>,
    /// Output directory (overrides the config and LLAB_OUT).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Restrict the grid to these bit widths.
    #[arg(long, global = true, value_delimiter = ',')]
    pub bits: Option<Vec<u32>>,
    /// Restrict the grid to these variants (baseline, jacobian, orthogonal).
    #[arg(long, global = true, value_delimiter = ',')]
    pub variant: Option<Vec<String>>,
    /// Restrict the grid to these seeds.
    #[arg(long, global = true, value_delimiter = ',')]
    pub seed: Option<Vec<u64>>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Grid {
    /// The configured matrix as is.
    Default,
    /// Bits {4, 8, 12} with small data and few epochs.
    Quick,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Kind {
    Line,
    MultiLine,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train every grid cell; writes checkpoints and history CSVs.
    Train,
    /// Top eigenpairs and Hutchinson trace per checkpoint.
    Hessian {
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        /// Number of eigenpairs (overrides hessian.k).
        #[arg(long)]
        k: Option<usize>,
    },
    /// 1D slices along a random and the top-eigenvector direction.
    Landscape {
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
    },
    /// Pairwise CKA across seeds, per variant and bit width.
    Cka {
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
    },
    /// Bezier curves between seeds and their max mode connectivity.
    Modeconn {
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
    },
    /// Robustness curves under input noise and bit flips.
    Corrupt {
        /// gaussian, salt_pepper, fkeras, random_flips or all.
        #[arg(long, value_delimiter = ',')]
        stressor: Vec<String>,
    },
    /// Train and analyse the whole grid, then report.
    Sweep {
        #[arg(long, value_enum, default_value = "default")]
        grid: Grid,
    },
    /// Aggregate the out-dir, or render one CSV with --csv.
    Report {
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "multi-line")]
        kind: Kind,
        /// SVG path for --csv; defaults to the CSV path with .svg.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn effective_config(args: &Args) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let o = Overrides { bits: args.bits.clone(), variants: args.variant.clone(), seeds: args.seed.clone(), out: args.out.clone() };
    cfg.apply(&o)?;
    if let Command::Sweep { grid: Grid::Quick } = args.command {
        cfg = cfg.quick();
        // Explicit narrowing still wins over the preset.
        cfg.apply(&o)?;
    }
    Ok(cfg)
}

pub fn run(args: Args, command: String) -> Result<()> {
    if let Some(n) = args.jobs {
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let cfg = effective_config(&args)?;
    let ctx = Context::new(cfg, command);
    let files = match &args.command {
        Command::Train => commands::cmd_train(&ctx)?,
        Command::Hessian { checkpoints, k } => commands::cmd_hessian(&ctx, checkpoints, *k)?,
        Command::Landscape { checkpoints } => commands::cmd_landscape(&ctx, checkpoints)?,
        Command::Cka { checkpoints } => commands::cmd_cka(&ctx, checkpoints)?,
        Command::Modeconn { checkpoints } => commands::cmd_modeconn(&ctx, checkpoints)?,
        Command::Corrupt { stressor } => commands::cmd_corrupt(&ctx, stressor)?,
        // Stages are recorded as they finish.
        Command::Sweep { .. } => {
            commands::cmd_sweep(&ctx)?;
            return Ok(());
        }
        Command::Report { csv: Some(csv), kind, output } => {
            let kind = match kind {
                Kind::Line => PlotKind::Line,
                Kind::MultiLine => PlotKind::MultiLine,
            };
            let svg = commands::cmd_plot(csv, kind, output.as_deref())?;
            if svg.starts_with(&ctx.out) {
                ctx.record(&[svg])?;
            }
            return Ok(());
        }
        Command::Report { csv: None, .. } => commands::cmd_report(&ctx)?,
    };
    ctx.record(&files)?;
    Ok(())
}

/// Parses `argv`, runs, and returns the process exit status. Failures print
/// one JSON line on stderr.
pub fn main_with(argv: Vec<String>) -> i32 {
    let args = match Args::try_parse_from(&argv) {
        Ok(a) => a,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", CliError::config(first).diagnostic());
            return 2;
        }
    };
    let level = if args.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    let command = std::iter::once("llab".to_string()).chain(argv.into_iter().skip(1)).collect::<Vec<_>>().join(" ");
    match run(args, command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.diagnostic());
            e.exit_code()
        }
    }
}

/// Out-dir manifest, for callers that want to inspect it.
pub fn manifest(out: &std::path::Path) -> Result<Manifest> {
    Manifest::load(out)
}
