mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};
use xsdc::gradcheck::Sizes;

use commands::{BalanceArgs, Common, SmoothnessArgs};

#[derive(Parser)]
#[command(name = "xsdc", version, about = "Discriminative clustering with any mix of labeled and unlabeled data")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces the seed from the configuration or command defaults.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    /// Where artifacts are written; overrides the configuration.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the configured dataset and write metrics, checkpoint, labels and summary.
    Train,
    /// Train with all labels ignored and report Hungarian-matched accuracy.
    Cluster,
    /// Tune hyperparameters one at a time on validation accuracy.
    Sweep {
        /// Value grids (JSON); defaults cover powers of two.
        #[arg(long)]
        grids: Option<PathBuf>,
    },
    /// Balance a single matrix and write the equivalence matrix.
    Balance {
        #[arg(long)]
        a: PathBuf,
        /// Rows `i,j,value`; the unit diagonal is added automatically.
        #[arg(long)]
        constraints: Option<PathBuf>,
        #[arg(long)]
        n_min: f64,
        #[arg(long)]
        n_max: f64,
        #[arg(long)]
        mu: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = Sizes::default().n)]
        n: usize,
        #[arg(long, default_value_t = Sizes::default().d)]
        d: usize,
        #[arg(long, default_value_t = Sizes::default().p)]
        p: usize,
        #[arg(long, default_value_t = Sizes::default().k)]
        k: usize,
        #[arg(long, hide = true)]
        inject_sign_flip: bool,
    },
    /// Check sampled gradients against the closed-form Lipschitz bounds.
    Smoothness {
        #[arg(long)]
        b: f64,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        n_max: usize,
        #[arg(long)]
        lambda: f64,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 4)]
        d: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

pub const EXIT_VERIFICATION: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug)]
pub struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
    detail: Value,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            kind: "usage",
            message: message.into(),
            detail: Value::Null,
        }
    }

    fn verification(message: impl Into<String>, detail: Value) -> Self {
        Self {
            code: EXIT_VERIFICATION,
            kind: "verification",
            message: message.into(),
            detail,
        }
    }
}

impl From<xsdc::Error> for Failure {
    fn from(e: xsdc::Error) -> Self {
        use xsdc::Error::*;
        let kind = match &e {
            InvalidInput(_) => "invalid_input",
            ScaleUndefined => "scale_undefined",
            ContractViolation(_) => "contract_violation",
            Diverged { .. } => "diverged",
            BalanceDiverged { .. } => "balance_diverged",
            Aborted { .. } => "aborted",
            Parse { .. } => "parse",
            Refused(_) => "refused",
            Io(_) => "io",
            Json(_) => "config",
        };
        let code = if e.is_numeric() || matches!(e, ContractViolation(_)) {
            EXIT_NUMERIC
        } else {
            EXIT_USAGE
        };
        Self {
            code,
            kind,
            message: e.to_string(),
            detail: Value::Null,
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        xsdc::Error::from(e).into()
    }
}

/// One JSON line on standard error.
pub fn progress(event: Value) {
    eprintln!("{event}");
}

fn check_threads() -> Result<(), Failure> {
    match std::env::var("XSDC_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(()),
            _ => Err(Failure::usage(format!("XSDC_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(()),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    check_threads()?;
    let common = Common {
        config: cli.config,
        seed_override: cli.seed_override,
        out_dir: cli.out_dir,
    };
    match cli.command {
        Command::Train => commands::train(&common, false),
        Command::Cluster => commands::train(&common, true),
        Command::Sweep { grids } => commands::sweep(&common, grids.as_deref()),
        Command::Balance {
            a,
            constraints,
            n_min,
            n_max,
            mu,
            iters,
        } => commands::balance(
            &common,
            &BalanceArgs {
                a,
                constraints,
                n_min,
                n_max,
                mu,
                iters,
            },
        ),
        Command::Gradcheck {
            seed,
            n,
            d,
            p,
            k,
            inject_sign_flip,
        } => commands::gradcheck(&common, seed, Sizes { n, d, p, k }, inject_sign_flip),
        Command::Smoothness {
            b,
            n,
            n_max,
            lambda,
            samples,
            d,
            seed,
        } => commands::smoothness(
            &common,
            &SmoothnessArgs {
                b,
                n,
                n_max,
                lambda,
                samples,
                d,
                seed,
            },
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!(
                "{}",
                json!({"error": {"kind": f.kind, "message": f.message, "exit_code": f.code, "detail": f.detail}})
            );
            ExitCode::from(f.code)
        }
    }
}
