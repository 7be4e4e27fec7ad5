use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hgg::interface::{self, BenchConfig, PoseSource};
use hgg::io::RunConfig;
use hgg::Error;

#[derive(Parser, Debug)]
#[command(name = "hgg", version, about = "Multi-frame Gaussian aggregation over a skinned body template")]
struct Cli {
    /// Worker threads; 1 gives bit-reproducible output.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// key = value run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable); applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    d0: Option<usize>,
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
}

impl ConfigArgs {
    fn resolve(&self) -> hgg::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got {kv:?}")))?;
            cfg.set(k, v)?;
        }
        let flags = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("steps", self.steps.map(|v| v.to_string())),
            ("layers", self.layers.map(|v| v.to_string())),
            ("dim", self.dim.map(|v| v.to_string())),
            ("d0", self.d0.map(|v| v.to_string())),
            ("learning_rate", self.learning_rate.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn scene_path(&self, cfg: &RunConfig, flag: &Option<PathBuf>) -> hgg::Result<PathBuf> {
        flag.clone()
            .or_else(|| cfg.scene_path.as_ref().map(PathBuf::from))
            .ok_or_else(|| Error::Config("no scene given (use --scene or the `scene` config key)".into()))
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene and its ground-truth renders.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Build the graph of a scene and write its edge tables.
    Build {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 2)]
        d0: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a scene; writes parameters and a metrics CSV.
    Fit {
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Re-pose the refined Gaussians and render one PNG per target pose.
    Animate {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// Draw a fresh pose trajectory from this seed instead of using the
        /// scene poses.
        #[arg(long)]
        pose_seed: Option<u64>,
        #[arg(long, default_value_t = 8)]
        pose_count: usize,
        #[arg(long, default_value_t = 0)]
        camera: usize,
        #[arg(long, default_value_t = 2)]
        d0: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one view of a scene, raw or refined.
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long, default_value_t = 0)]
        camera: usize,
        #[arg(long, default_value_t = 2)]
        d0: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export one frame (or the refined Gaussians) as a splat PLY.
    Export {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long, default_value_t = 2)]
        d0: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time grouped attention against dense all-pairs attention.
    Bench {
        #[arg(long, default_value_t = 4096)]
        gaussians: usize,
        #[arg(long, default_value_t = 642)]
        vertices: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [2, 4, 8, 16])]
        frames: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every registered finite-difference gradient check.
    Gradcheck,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        Error::Diverged { .. } => 3,
        _ => 2,
    }
}

fn write_file(path: &Path, contents: &str) -> hgg::Result<()> {
    std::fs::write(path, contents).map_err(Error::from)
}

fn run(command: Command) -> hgg::Result<()> {
    match command {
        Command::Synth { out, cfg } => {
            let run = cfg.resolve()?;
            let s = interface::cmd_synth(&run, &out)?;
            eprintln!(
                "wrote {} ({} frames, {} gaussians, {} images)",
                s.scene_path.display(),
                s.frames,
                s.gaussians,
                s.images
            );
        }
        Command::Build { scene, d0, out } => {
            let s = interface::cmd_build(&scene, d0, &out)?;
            eprintln!("partitions {} (gaussians {}), d0 {}", s.partition_count, s.gaussians, s.d0);
        }
        Command::Fit { scene, params, metrics, cfg } => {
            let run = cfg.resolve()?;
            let scene = cfg.scene_path(&run, &scene)?;
            let r = interface::cmd_fit(&scene, &run, &params, &metrics)?;
            eprintln!(
                "loss {:.6} -> {:.6}, held-out psnr {}",
                r.initial_loss(),
                r.final_loss(),
                r.final_psnr().map_or("n/a".to_string(), |p| format!("{p:.3} dB"))
            );
        }
        Command::Animate { params, scene, pose_seed, pose_count, camera, d0, out } => {
            let poses = match pose_seed {
                Some(seed) => PoseSource::Trajectory { count: pose_count, seed },
                None => PoseSource::Scene,
            };
            let frames = interface::cmd_animate(&params, &scene, &poses, camera, d0, &out)?;
            eprintln!("wrote {} frames to {}", frames.len(), out.display());
        }
        Command::Render { scene, params, frame, camera, d0, out } => {
            interface::cmd_render(&scene, params.as_deref(), frame, camera, d0, &out)?;
        }
        Command::Export { scene, params, frame, d0, out } => {
            let scene_data = interface::load_scene(&scene)?;
            let gaussians = match params {
                Some(p) => interface::refined_gaussians(&scene_data, &interface::load_params(&p)?, d0)?.1,
                None => scene_data
                    .frames
                    .get(frame)
                    .ok_or_else(|| Error::DimensionMismatch(format!("frame {frame} of {}", scene_data.frames.len())))?
                    .gaussians
                    .clone(),
            };
            interface::export_ply(&gaussians, &out)?;
        }
        Command::Bench { gaussians, vertices, dim, frames, reps, seed, out } => {
            let rows = interface::cmd_bench(&BenchConfig { gaussians, vertices, dim, frames, reps, seed })?;
            let csv = interface::bench_csv(&rows);
            match out {
                Some(path) => write_file(&path, &csv)?,
                None => print!("{csv}"),
            }
            for w in rows.windows(2) {
                eprintln!(
                    "T {} -> {}: hgg x{:.2}, naive x{:.2}",
                    w[0].frames,
                    w[1].frames,
                    w[1].hgg_ms / w[0].hgg_ms,
                    w[1].naive_ms / w[0].naive_ms
                );
            }
            let t: Vec<f64> = rows.iter().map(|r| r.frames as f64).collect();
            let hgg: Vec<f64> = rows.iter().map(|r| r.hgg_ms).collect();
            eprintln!("hgg linear fit r2 {:.4}", interface::linear_fit_r2(&t, &hgg));
        }
        Command::Gradcheck => {
            let rows = interface::cmd_gradcheck()?;
            let mut failed = 0;
            for r in &rows {
                let precision = if r.single_precision { "f32" } else { "f64" };
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                println!("{:<40} {precision} {:.3e} < {:.0e} {verdict}", r.name, r.error, r.tolerance);
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                return Err(Error::NonFiniteGradient(format!("{failed} gradient check(s) over tolerance")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
