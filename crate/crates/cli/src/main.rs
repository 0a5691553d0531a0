//! `gsedit`: fit, plan, select, edit, render and score dynamic Gaussian
//! scenes from the command line.
//!
//! Every command reads an optional TOML project file (`--config`); path
//! flags override the file's `[paths]` section. Results go to stdout as
//! JSON; failures print `{"error": ..., "context": ...}` on stderr and exit
//! with 2 (config/input), 3 (numeric) or 4 (remote service).

mod commands;

use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gsedit_core::config::ProjectConfig;

#[derive(Debug, Parser)]
#[command(name = "gsedit", version, about = "Instruction-driven editing of dynamic Gaussian splatting scenes")]
struct Cli {
    /// Project configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config file and GSEDIT_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(flatten)]
    paths: PathArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct PathArgs {
    /// Scene file (scene.json).
    #[arg(long, global = true)]
    scene: Option<PathBuf>,
    /// Camera list (cameras.json).
    #[arg(long, global = true)]
    cameras: Option<PathBuf>,
    /// Directory of %04d.png frames, one per camera.
    #[arg(long, global = true)]
    frames: Option<PathBuf>,
    /// Directory of %04d.png segmentation masks, one per camera.
    #[arg(long, global = true)]
    masks: Option<PathBuf>,
    /// Edit plan (plan.json).
    #[arg(long, global = true)]
    plan: Option<PathBuf>,
    /// Per-Gaussian edit mask (mask.json).
    #[arg(long, global = true)]
    mask: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the two-blob toy scene with cameras, frames, masks and a config.
    Toy {
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
    /// Fit a scene to observed frames.
    Fit {
        #[arg(long)]
        steps: Option<usize>,
        /// Number of Gaussians in the initialisation.
        #[arg(long, default_value_t = 64)]
        initial_count: usize,
        /// Hidden layer widths of the deformation field.
        #[arg(long, value_delimiter = ',', default_value = "64,64")]
        hidden: Vec<usize>,
        /// Order of the Fourier time embedding.
        #[arg(long, default_value_t = 6)]
        time_embed_order: usize,
    },
    /// Decompose an instruction into an ordered list of atomic edits.
    Plan {
        instruction: String,
        /// `rule` or `llm`.
        #[arg(long, value_parser = ["rule", "llm"])]
        backend: Option<String>,
        /// Base URL of the planning service (llm backend).
        #[arg(long)]
        endpoint: Option<String>,
        /// Instruction-to-grounding fixture map (rule backend).
        #[arg(long)]
        fixtures: Option<PathBuf>,
    },
    /// Learn the per-Gaussian edit mask from segmented frames.
    Select {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run an edit plan (or a single prompt) on a scene.
    Edit {
        /// Single edit instruction, used instead of a plan file.
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Render the scene from its cameras or along a turntable.
    Render {
        /// Render this many views on a circle around the origin instead.
        #[arg(long)]
        turntable: Option<usize>,
        /// Scene time for turntable views.
        #[arg(long, default_value_t = 0.0)]
        time: f64,
        /// Turntable image size.
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// PSNR/SSIM between two frame directories, split into edited and
    /// non-edited regions when a scene and mask are given.
    Metrics {
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
    },
    /// Replay an op log against a scene and mask, auditing alignment after
    /// every entry; without inputs, runs a seeded random densification demo.
    TrackDemo {
        #[arg(long)]
        op_log: Option<PathBuf>,
        /// Number of random operations in the demo.
        #[arg(long, default_value_t = 20)]
        ops: usize,
    },
}

fn load_config(cli: &Cli) -> gsedit_core::Result<ProjectConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ProjectConfig::load(p)?,
        None => {
            let mut c = ProjectConfig::default();
            c.apply_env_seed()?;
            c
        }
    };
    let p = &cli.paths;
    let slots = [
        (&p.scene, &mut cfg.paths.scene),
        (&p.cameras, &mut cfg.paths.cameras),
        (&p.frames, &mut cfg.paths.frames),
        (&p.masks, &mut cfg.paths.masks),
        (&p.plan, &mut cfg.paths.plan),
        (&p.mask, &mut cfg.paths.mask),
        (&p.out, &mut cfg.paths.out),
    ];
    for (flag, slot) in slots {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> gsedit_core::Result<serde_json::Value> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Toy { size } => commands::toy(&cfg, size),
        Command::Fit {
            steps,
            initial_count,
            hidden,
            time_embed_order,
        } => commands::fit(&cfg, steps, initial_count, hidden, time_embed_order),
        Command::Plan {
            instruction,
            backend,
            endpoint,
            fixtures,
        } => commands::plan(&cfg, &instruction, backend.as_deref(), endpoint, fixtures),
        Command::Select { steps } => commands::select(&cfg, steps),
        Command::Edit { prompt, steps } => commands::edit(&cfg, prompt.as_deref(), steps),
        Command::Render { turntable, time, size } => commands::render(&cfg, turntable, time, size),
        Command::Metrics { before, after } => commands::metrics(&cfg, &before, &after),
        Command::TrackDemo { op_log, ops } => commands::track_demo(&cfg, op_log.as_deref(), ops),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(value) => {
            let text = serde_json::to_string_pretty(&value).expect("JSON values serialize");
            // A closed pipe (e.g. `| head`) is not an error for the command.
            let _ = writeln!(std::io::stdout().lock(), "{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let body = serde_json::json!({ "error": e.kind(), "context": e.to_string() });
            eprintln!("{body}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
