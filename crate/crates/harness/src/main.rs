use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use wsseg_harness::{
    export_prompt_masks, run_ablation, run_probe, run_sweep, run_until, Cache, HarnessError,
    RunConfig, Stage, SweepAxis,
};

#[derive(Parser)]
#[command(
    name = "wsseg",
    version,
    about = "Weakly supervised segmentation pipeline on synthetic co-occurrence data"
)]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; falls back to `out_dir` from the configuration, then `wsseg-out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset and export it.
    Gen,
    /// Generate, then cluster sub-classes.
    Cluster,
    /// Run through classifier training.
    Train,
    /// Run through CAM extraction.
    Cam,
    /// Run through affinity refinement.
    Refine,
    /// Run the full pipeline and score pseudo-labels.
    Eval,
    /// Module ablation grid over seeds.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
    /// Single-axis sweep (k, beta, t, gamma, theta).
    Sweep {
        /// One of k, beta, t, gamma, theta.
        #[arg(long)]
        axis: String,
        /// Comma-separated values for the axis.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Primary-only training with a frozen sub-class head, logging both losses.
    Probe {
        #[arg(long, default_value_t = 5)]
        eval_every: usize,
    },
    /// Write every grid-prompt mask in the external-oracle store layout.
    ExportMasks,
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| HarnessError::Config(format!("--jobs {n}: {e}")))?;
    }
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("wsseg-out"));
    let cache = Cache::new();
    let stage = match &cli.command {
        Command::Gen => Some(Stage::Gen),
        Command::Cluster => Some(Stage::Cluster),
        Command::Train => Some(Stage::Train),
        Command::Cam => Some(Stage::Cam),
        Command::Refine => Some(Stage::Refine),
        Command::Eval => Some(Stage::Eval),
        _ => None,
    };
    if let Some(stage) = stage {
        let report = run_until(&cfg, stage, Some(&out), &cache)?;
        if let Some(m) = &report.report {
            println!(
                "dsc {:.4}  jaccard {:.4}  assd {:.3}  hd95 {:.3}  n {}  skipped {}",
                m.dsc, m.jaccard, m.assd, m.hd95, m.n, m.skipped
            );
        }
        println!("artifacts in {}", out.display());
        return Ok(());
    }
    match cli.command {
        Command::Ablate { seeds } => {
            let table = run_ablation(&cfg, &seeds, Some(&out), &cache)?;
            for c in &table.cells {
                println!("{:8} dsc {:.4} ± {:.4}", c.cell.label, c.dsc_mean, c.dsc_sd);
            }
            for o in &table.orderings {
                let verdict = if o.holds { "holds" } else { "fails" };
                println!(
                    "{} > {}: {verdict} ({:+.2} points)",
                    o.better, o.worse, o.margin
                );
            }
        }
        Command::Sweep {
            axis,
            values,
            seeds,
        } => {
            let axis: SweepAxis = axis.parse()?;
            let table = run_sweep(&cfg, axis, &values, &seeds, Some(&out), &cache)?;
            for p in &table.points {
                println!(
                    "{} = {:<8} dsc {:.4} ± {:.4}",
                    axis.name(),
                    p.value,
                    p.dsc_mean,
                    p.dsc_sd
                );
            }
            println!("argmax {} = {}", axis.name(), table.argmax());
        }
        Command::Probe { eval_every } => {
            let rows = run_probe(&cfg, eval_every, Some(&out), &cache)?;
            if let Some(last) = rows.last() {
                println!(
                    "{} probe rows; final step {} loss_p {:.4} loss_s {:.4} cam dice {:.4}",
                    rows.len(),
                    last.step,
                    last.loss_p,
                    last.loss_s,
                    last.cam_dice
                );
            }
        }
        Command::ExportMasks => {
            let entries = export_prompt_masks(&cfg, &out, &cache)?;
            println!("{} masks written under {}", entries.len(), out.display());
        }
        _ => unreachable!("pipeline stages handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("wsseg: {e}");
            ExitCode::FAILURE
        }
    }
}
