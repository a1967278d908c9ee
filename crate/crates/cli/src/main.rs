use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wsdc_cli::{
    cmd_ablate_alpha, cmd_channel_report, cmd_grad_check, cmd_sweep_snr, cmd_train, parse_snr, AblateArgs, ChannelReportArgs,
    CliError, GradCheckArgs, Snr, SweepArgs, TrainArgs,
};

#[derive(Parser)]
#[command(name = "wsdc", version, about = "Codebook training and evaluation over a simulated QAM/AWGN link")]
struct Cli {
    /// Worker threads for data-parallel work (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model; writes model.wsdc, metrics.csv and manifest.train.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Overrides the config mixing weight.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Evaluate a trained model across test SNRs; writes sweep.csv.
    SweepSnr {
        #[arg(long)]
        config: PathBuf,
        /// Model container (default: <out>/model.wsdc).
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
        /// Comma-separated SNRs in dB; "inf" is the noiseless sentinel.
        #[arg(long, value_delimiter = ',', value_parser = parse_snr)]
        snr: Option<Vec<Snr>>,
    },
    /// Train one model per mixing weight and evaluate each; writes ablation.csv.
    AblateAlpha {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        alpha: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', value_parser = parse_snr)]
        snr: Option<Vec<Snr>>,
    },
    /// Capacity and symbol error rates per constellation and SNR.
    ChannelReport {
        #[command(flatten)]
        common: Common,
        /// Constellation orders.
        #[arg(long, value_delimiter = ',', default_value = "4,16,64,256")]
        k: Vec<usize>,
        #[arg(long, value_delimiter = ',', value_parser = parse_snr, default_value = "4,8,12,16,20")]
        snr: Vec<Snr>,
        /// Simulated symbols per row.
        #[arg(long, default_value_t = 1_000_000)]
        symbols: usize,
    },
    /// Compare analytic gradients with finite differences on a fresh model.
    GradCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Train { config, common, alpha } => {
            let r = cmd_train(&TrainArgs { config, out: common.out, seed: common.seed, alpha })?;
            if let Some(last) = r.history.last() {
                println!(
                    "trained {} epochs: task_loss={} perplexity={} train_accuracy={}",
                    r.history.len(),
                    last.task_loss,
                    last.perplexity,
                    last.train_accuracy
                );
            }
            println!("model: {}", r.model_path.display());
        }
        Cmd::SweepSnr { config, model, common, snr } => {
            let rows = cmd_sweep_snr(&SweepArgs { config, model, out: common.out, seed: common.seed, snr })?;
            for r in rows {
                println!("snr={} accuracy={} index_error_rate={}", r.snr_db, r.accuracy, r.index_error_rate);
            }
        }
        Cmd::AblateAlpha { config, common, alpha, snr } => {
            let rows = cmd_ablate_alpha(&AblateArgs { config, out: common.out, seed: common.seed, alpha, snr })?;
            println!("{} rows", rows.len());
        }
        Cmd::ChannelReport { common, k, snr, symbols } => {
            let args = ChannelReportArgs { ks: k, snr, n_symbols: symbols, seed: common.seed.unwrap_or(0), out: common.out };
            let rows = cmd_channel_report(&args)?;
            println!("{} rows", rows.len());
        }
        Cmd::GradCheck { config, out, seed } => {
            let s = cmd_grad_check(&GradCheckArgs { config, out, seed })?;
            println!("max_rel_error={} threshold={} checked={}", s.max_rel_error, s.threshold, s.checked);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.jobs {
        if n == 0 {
            eprintln!("configuration error: --jobs must be >= 1");
            return ExitCode::from(2);
        }
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("internal error: {e}");
            return ExitCode::from(1);
        }
    };
    match pool.install(|| run(cli.cmd)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
