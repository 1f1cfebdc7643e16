use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use cbnt_cli::commands::{self, eval::EvalArgs, fdk::FdkArgs, fit::FitArgs, fit::FitMode, iterative::IterativeArgs};
use cbnt_cli::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "cbnt",
    about = "Cone-beam CT reconstruction toolkit: synthetic data, conditional neural fields, FDK and Landweber-TV baselines",
    version
)]
struct Cli {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override config keys, e.g. --set train.max_steps=500 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Cap worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Force fixed-order parallel reductions. Reductions are always
    /// fixed-order in this implementation; the flag is accepted for
    /// interface stability.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate phantoms, projections, and noisy stacks with a manifest.
    GenData {
        /// Overwrite a non-empty data directory.
        #[arg(long)]
        force: bool,
    },
    /// Train the shared conditional field on the train split.
    Train,
    /// Reconstruct one scan by fitting a neural field to its projections.
    Fit {
        #[arg(long, value_enum)]
        mode: FitMode,
        #[arg(long)]
        projections: PathBuf,
        /// Shared-field checkpoint (required for --mode nmf).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Patient/scan id; derived from the projection filename by default.
        #[arg(long)]
        patient: Option<String>,
        /// Ground-truth volume; enables the convergence CSV.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// FDK filtered backprojection.
    Fdk {
        #[arg(long)]
        projections: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the Hann window (defaults to on for noisy stacks).
        #[arg(long)]
        hann: Option<bool>,
        #[arg(long)]
        scan: Option<String>,
    },
    /// Landweber iteration with TV regularization.
    Iterative {
        #[arg(long)]
        projections: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Sweep tv_weight and n_iter against --reference, writing
        /// gridsearch.csv and keeping the best reconstruction.
        #[arg(long)]
        grid_search: bool,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        tv_weight: Option<f64>,
        #[arg(long)]
        n_iter: Option<usize>,
        #[arg(long)]
        scan: Option<String>,
    },
    /// PSNR/SSIM/MSE of a reconstruction against ground truth.
    Eval {
        #[arg(long)]
        recon: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = cbnt_core::metrics::DEFAULT_SSIM_WINDOW)]
        ssim_window: usize,
        /// Write mid-slice PNGs into this directory.
        #[arg(long)]
        dump_slices: Option<PathBuf>,
        /// Density display window for slice export, mm^-1.
        #[arg(long, default_value_t = 0.04)]
        window: f64,
    },
    /// Finite-difference verification of all analytic gradients.
    Gradcheck {
        /// Random cases per gradient group.
        #[arg(long, default_value_t = 50)]
        cases: usize,
    },
    /// Aggregate per-scan metrics into a per-method summary CSV.
    Report {
        /// Run directory; the configured out_dir by default.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .ok();
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.cmd {
        Command::GenData { force } => {
            let manifest = commands::gen_data::run(&cfg, force)?;
            println!(
                "wrote {} artifacts to {:?}",
                manifest.artifacts.len(),
                cfg.paths.data_dir
            );
        }
        Command::Train => {
            let out = commands::train::run(&cfg)?;
            println!("checkpoint at {:?}", out.checkpoint_dir);
        }
        Command::Fit { mode, projections, checkpoint, patient, reference, out } => {
            let artifacts = commands::fit::run(
                &cfg,
                &FitArgs { mode, projections, checkpoint, patient, reference, out },
            )?;
            println!(
                "reconstruction at {:?} (best step {}, early stop: {})",
                artifacts.recon, artifacts.outcome.best_step, artifacts.outcome.stopped_early
            );
        }
        Command::Fdk { projections, out, hann, scan } => {
            let recon = commands::fdk::run(&cfg, &FdkArgs { projections, out, hann, scan })?;
            println!("reconstruction at {recon:?}");
        }
        Command::Iterative {
            projections,
            out,
            grid_search,
            reference,
            tv_weight,
            n_iter,
            scan,
        } => {
            let (recon, chosen) = commands::iterative::run(
                &cfg,
                &IterativeArgs { projections, out, grid_search, reference, tv_weight, n_iter, scan },
            )?;
            println!(
                "reconstruction at {recon:?} (lambda_tv {}, {} iterations)",
                chosen.tv_weight, chosen.n_iter
            );
        }
        Command::Eval { recon, ground_truth, out, ssim_window, dump_slices, window } => {
            let mut args = EvalArgs::new(recon, ground_truth);
            args.out = out;
            args.ssim_window = ssim_window;
            args.dump_slices = dump_slices;
            args.window = window;
            commands::eval::run(&args)?;
        }
        Command::Gradcheck { cases } => {
            commands::gradcheck::run(cases)?;
        }
        Command::Report { run_dir, out } => {
            let dir = run_dir.unwrap_or_else(|| cfg.paths.out_dir.clone());
            let (_, path) = commands::report::run(&dir, out.as_deref())?;
            println!("report at {path:?}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(cbnt_cli::exit_code_for(&err) as u8)
        }
    }
}
