mod commands;
mod log;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use seqloc::config::PipelineConfig;

use crate::log::Failure;

#[derive(Debug, Parser)]
#[command(name = "seqloc", version, about = "Multi-experience correspondence generation and descriptor training")]
struct Cli {
    /// JSON config; missing keys take defaults, unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed (and the RANSAC seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Relative output paths are written under this directory.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

/// `<experience>:<frame>`.
fn parse_frame_ref(s: &str) -> Result<(u32, usize), String> {
    let (e, f) = s.split_once(':').ok_or_else(|| format!("expected <exp>:<frame>, got {s:?}"))?;
    Ok((
        e.parse().map_err(|_| format!("bad experience id {e:?}"))?,
        f.parse().map_err(|_| format!("bad frame index {f:?}"))?,
    ))
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a simulated multi-experience dataset.
    Simulate {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Align two experiences by sequence matching.
    Seqslam {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        query: u32,
        #[arg(long = "ref")]
        reference: u32,
        /// Raw match CSV to write.
        #[arg(long)]
        out: PathBuf,
        /// Difference matrix CSV to write.
        #[arg(long)]
        diff_out: Option<PathBuf>,
    },
    /// Check raw matches against visual odometry.
    Validate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        query: u32,
        #[arg(long = "ref")]
        reference: u32,
        #[arg(long)]
        raw: PathBuf,
        #[arg(long)]
        e_sq: Option<f64>,
        /// Correspondence CSV to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the experience-association graph.
    Graph {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        /// graph.json to write; edge correspondences go next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample training pairs along minimum-cost paths of the graph.
    Sample {
        #[arg(long)]
        graph: PathBuf,
        /// Sample only along the path from `src` (query side) to `dst`;
        /// without them every pair of experiences contributes.
        #[arg(long, requires = "dst")]
        src: Option<u32>,
        #[arg(long, requires = "src")]
        dst: Option<u32>,
        /// Defaults to the config's `pairs`.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Also write this many held-out pairs, disjoint from `--out`.
        #[arg(long, requires = "heldout_out")]
        heldout_n: Option<usize>,
        #[arg(long)]
        heldout_out: Option<PathBuf>,
    },
    /// Detect keypoints on a dense feature map.
    Detect {
        /// SLFM feature map to read.
        #[arg(long, conflicts_with_all = ["dataset", "model", "frame"], required_unless_present = "model")]
        map: Option<PathBuf>,
        /// Render the map with a model instead.
        #[arg(long, requires_all = ["model", "frame"])]
        dataset: Option<PathBuf>,
        #[arg(long, requires = "dataset")]
        model: Option<PathBuf>,
        #[arg(long, value_parser = parse_frame_ref)]
        frame: Option<(u32, usize)>,
        /// Also write the rendered map.
        #[arg(long, requires = "model")]
        map_out: Option<PathBuf>,
        #[arg(long)]
        cell: Option<usize>,
        /// Keypoint CSV to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the relative pose between two frames.
    Pose {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_parser = parse_frame_ref)]
        src: (u32, usize),
        #[arg(long, value_parser = parse_frame_ref)]
        tgt: (u32, usize),
        /// `gt` for the dataset's rendered maps, otherwise a model file.
        #[arg(long, default_value = "gt")]
        maps: String,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        ransac_iters: Option<usize>,
        #[arg(long)]
        inlier_sq: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the descriptor model by expectation-maximization.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        model_out: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Held-out pairs whose ground-truth pose error fills the report.
        #[cfg(feature = "ground-truth")]
        #[arg(long)]
        heldout: Option<PathBuf>,
    },
    /// Pose error of a model against ground truth.
    #[cfg(feature = "ground-truth")]
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Quantile summary JSON to write.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Run every stage, writing all artifacts under --out-dir.
    Pipeline {
        /// Generate the dataset first.
        #[arg(long)]
        simulate: bool,
        /// Overrides the config's dataset path.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

/// Resolves relative output paths against `--out-dir`.
pub struct Outputs {
    pub dir: PathBuf,
}

impl Outputs {
    pub fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).map_err(|e| Failure::from_error("config", e))?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.train.pose.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::usage(&e.to_string()))?;
    }
    let cfg = load_config(&cli)?;
    let out = Outputs { dir: cli.out_dir.clone() };
    commands::dispatch(cli.command, &cfg, &out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            f.emit();
            ExitCode::from(f.code)
        }
    }
}
