use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use vlo_core::dataio::{load_gt_poses, write_poses, KittiSequence};
use vlo_core::eval::{kitti_eval, plot_trajectories, KITTI_LENGTHS};
use vlo_core::gradcheck::{run_all_with, CheckOptions};
use vlo_core::pipeline::{init_params, load_params, run_sequence, zero_pose_heads};
use vlo_core::synth::{generate_pair, pose_errors, synthetic_camera, write_sequence, PoseMagnitude, SequenceSpec, CANONICAL_SEED};
use vlo_core::train::micro_train;
use vlo_core::viz::{cluster_viz, write_ppm};
use vlo_core::{PipelineConfig, Result, VloError};

#[derive(Parser, Debug)]
#[command(name = "vlo", version, about = "Visual-LiDAR odometry: inference, evaluation and diagnostics")]
struct Cli {
    /// TOML pipeline configuration; overrides --profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in configuration used when no --config is given.
    #[arg(long, global = true, value_enum, default_value_t = Profile::Full)]
    profile: Profile,
    /// Seed for parameter init and synthetic data.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for data-parallel kernels (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Profile {
    Full,
    Micro,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate a trajectory for one sequence.
    Run {
        #[command(flatten)]
        seq: SequenceArgs,
        #[arg(long)]
        weights: PathBuf,
        /// Output trajectory in KITTI pose format.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score an estimated trajectory against ground truth.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        est: PathBuf,
        /// Optional PNG with both trajectories.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Write a synthetic sequence in the KITTI directory layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "00")]
        sequence: String,
        #[arg(long, default_value_t = 10)]
        frames: usize,
        #[command(flatten)]
        motion: MotionArgs,
    },
    /// Check every hand-written adjoint against finite differences.
    Gradcheck {
        /// Skip the whole-network check.
        #[arg(long)]
        skip_end_to_end: bool,
        /// Scale analytic adjoints by 1 + this value (checker self-test).
        #[arg(long, hide = true)]
        corrupt: Option<f64>,
    },
    /// Draw the local-fusion clusters of one frame.
    ClusterViz {
        #[command(flatten)]
        seq: SequenceArgs,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long)]
        weights: PathBuf,
        /// Pyramid level, 0 = finest.
        #[arg(long, default_value_t = 0)]
        level: usize,
        /// Output image (PPM).
        #[arg(long)]
        out: PathBuf,
    },
    /// Write freshly initialised weights.
    InitWeights {
        #[arg(long)]
        out: PathBuf,
        /// Zero the regression heads so every estimate is the identity.
        #[arg(long)]
        identity: bool,
    },
    /// Overfit a synthetic pair with Adam.
    Train {
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long)]
        lr: Option<f64>,
        #[command(flatten)]
        motion: MotionArgs,
        /// Save the trained weights here.
        #[arg(long)]
        weights_out: Option<PathBuf>,
        /// Write the loss curve, one value per line.
        #[arg(long)]
        losses: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct SequenceArgs {
    /// Dataset root containing `sequences/` and `poses/`.
    #[arg(long)]
    root: PathBuf,
    #[arg(long, default_value = "00")]
    sequence: String,
}

#[derive(Args, Debug)]
struct MotionArgs {
    #[arg(long, default_value_t = 512)]
    points: usize,
    /// Rotation per step, degrees.
    #[arg(long, default_value_t = 5.0)]
    rotation_deg: f64,
    /// Translation per step, meters.
    #[arg(long, default_value_t = 0.3)]
    translation: f64,
    /// Gaussian point noise, meters.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
}

impl MotionArgs {
    fn magnitude(&self) -> PoseMagnitude {
        PoseMagnitude::new(self.rotation_deg.to_radians(), self.translation)
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => match cli.profile {
            Profile::Full => PipelineConfig::default(),
            Profile::Micro => PipelineConfig::micro(),
        },
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn open_sequence(args: &SequenceArgs) -> Result<KittiSequence> {
    KittiSequence::open(&args.root, &args.sequence)
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => Err(VloError::InvalidInput(format!(
            "output directory {} does not exist",
            dir.display()
        ))),
        _ => Ok(()),
    }
}

/// Runs the command; `Ok(false)` means it completed but reported failure.
fn execute(cli: &Cli) -> Result<bool> {
    let cfg = load_config(cli)?;
    let seed = cli.seed.unwrap_or(CANONICAL_SEED);
    match &cli.command {
        Command::Run { seq, weights, out } => {
            ensure_parent(out)?;
            let params = load_params(&cfg, weights)?;
            let seq = open_sequence(seq)?;
            let run = run_sequence(&params, &cfg, &seq)?;
            write_poses(out, &run.trajectory)?;
            info!("mean pair time {:.1} ms over {} pairs", run.mean_ms(), run.pair_ms.len());
            println!("wrote {} poses to {}", run.trajectory.len(), out.display());
        }
        Command::Eval { gt, est, plot } => {
            let (g, e) = (load_gt_poses(gt)?, load_gt_poses(est)?);
            let report = kitti_eval(&g, &e, &KITTI_LENGTHS)?;
            print!("{}", report.report());
            if let Some(p) = plot {
                plot_trajectories(&g, &e, p)?;
            }
        }
        Command::Synth {
            out,
            sequence,
            frames,
            motion,
        } => {
            let spec = SequenceSpec {
                seed,
                frames: *frames,
                n_points: motion.points,
                magnitude: motion.magnitude(),
                noise_sigma: motion.noise,
            };
            let step = write_sequence(out, sequence, &spec)?;
            println!("wrote {frames} frames to {}", KittiSequence::sequence_dir(out, sequence).display());
            println!("relative lidar motion per step: {}", step.to_kitti_line());
        }
        Command::Gradcheck {
            skip_end_to_end,
            corrupt,
        } => {
            let opts = CheckOptions {
                corrupt: *corrupt,
                ..Default::default()
            };
            let reports = run_all_with(seed, !skip_end_to_end, opts)?;
            for r in &reports {
                println!("{}", r.line());
            }
            let failed = reports.iter().filter(|r| !r.passed()).count();
            println!("{} of {} suites passed", reports.len() - failed, reports.len());
            return Ok(failed == 0);
        }
        Command::ClusterViz {
            seq,
            frame,
            weights,
            level,
            out,
        } => {
            ensure_parent(out)?;
            let params = load_params(&cfg, weights)?;
            let seq = open_sequence(seq)?;
            let f = seq.load_frame(*frame, cfg.image.pad_height, cfg.image.pad_width)?;
            let img = cluster_viz(&params, &cfg, &f, *level)?;
            write_ppm(out, &img)?;
            println!("wrote {}", out.display());
        }
        Command::InitWeights { out, identity } => {
            ensure_parent(out)?;
            let mut params = init_params(&cfg)?;
            if *identity {
                zero_pose_heads(&mut params)?;
            }
            let blob = params.save(out)?;
            println!("wrote {} tensors to {} and {}", params.len(), out.display(), blob.display());
        }
        Command::Train {
            steps,
            lr,
            motion,
            weights_out,
            losses,
        } => {
            let pair = generate_pair(seed, motion.points, motion.magnitude(), motion.noise, &synthetic_camera())?;
            let outcome = micro_train(&cfg, &pair, *steps, lr.unwrap_or(cfg.train.learning_rate))?;
            let (rot, trans) = pose_errors(&outcome.pose, &pair.gt);
            println!(
                "loss {:.6} -> {:.6}; rotation error {:.4} deg; translation error {:.4} m",
                outcome.losses[0],
                outcome.losses[outcome.losses.len() - 1],
                rot.to_degrees(),
                trans
            );
            if let Some(p) = weights_out {
                outcome.params.save(p)?;
            }
            if let Some(p) = losses {
                let text: String = outcome.losses.iter().map(|l| format!("{l:e}\n")).collect();
                std::fs::write(p, text)?;
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: could not configure {n} threads: {e}");
            return ExitCode::FAILURE;
        }
    }
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
