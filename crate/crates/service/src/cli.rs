//! Command-line entry point.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use inverso_core::editing::{EditMode, EditRequest};
use inverso_core::Error;

use crate::config::RunConfig;
use crate::pipeline::{DirectionMethod, Pipeline};
use crate::server::{self, AppState, Models};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 1;
pub const EXIT_INTERNAL: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "inverso", version, about = "Aligned latent inversion and editing for a toy style-based generator")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory (overrides `run_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Svm,
    Pca,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    #[value(name = "latent_only", alias = "latent-only")]
    LatentOnly,
    #[value(name = "latent_and_feature", alias = "latent-and-feature")]
    LatentAndFeature,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Create and save a seeded generator.
    InitGenerator,
    /// Sample (image, w) pairs from the generator.
    GenPairs {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Contrastively pretrain the image/latent alignment model.
    PretrainAlign {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the inversion encoder.
    TrainEncoder {
        #[arg(long)]
        steps: Option<usize>,
        /// Save an intermediate checkpoint every N steps.
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// Train without the alignment loss.
        #[arg(long)]
        no_align: bool,
    },
    /// Fit editing directions in W.
    FitDirections {
        method: MethodArg,
        #[arg(long)]
        samples: Option<usize>,
        /// Number of attributes (svm) or components (pca).
        #[arg(long)]
        k: Option<usize>,
    },
    /// Invert an image and write latents and reconstructions.
    Invert { image: PathBuf },
    /// Invert an image, apply one direction and write the result.
    Edit {
        image: PathBuf,
        #[arg(long)]
        direction: String,
        #[arg(long, allow_hyphen_values = true)]
        alpha: f64,
        #[arg(long, value_enum, default_value = "latent_and_feature")]
        mode: ModeArg,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score the trained encoder.
    Eval {
        /// Folder of PNGs (defaults to the validation split).
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        limit: usize,
        #[arg(long)]
        skip_timing: bool,
    },
    /// Train and score the seven ablation variants.
    Ablate {
        #[arg(long, default_value_t = 256)]
        limit: usize,
        #[arg(long)]
        skip_timing: bool,
        /// Leave out the optimization row.
        #[arg(long)]
        no_optimization: bool,
    },
    /// Run the HTTP editing service.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
}

fn is_user_error(e: &Error) -> bool {
    matches!(
        e,
        Error::Config(_) | Error::Labels(_) | Error::Rank(_) | Error::UnknownDirection(_) | Error::Dataset(_) | Error::Checkpoint(_)
    ) || matches!(e, Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound)
}

fn report(e: &Error) -> i32 {
    if is_user_error(e) {
        eprintln!("error: {e}");
        EXIT_USER
    } else {
        eprintln!("internal error: {e}");
        EXIT_INTERNAL
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USER } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => report(&e),
    }
}

fn execute(cli: Cli) -> inverso_core::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(o) = &cli.out {
        cfg.run_dir = o.clone();
    }
    let p = Pipeline::new(cfg);
    match cli.command {
        Command::InitGenerator => println!("{}", p.init_generator()?.display()),
        Command::GenPairs { count } => println!("{}", p.gen_pairs(count)?.display()),
        Command::PretrainAlign { steps } => println!("val_retrieval_top1 {:.4}", p.pretrain_align(steps)?),
        Command::TrainEncoder { steps, checkpoint_every, no_align } => match p.train_encoder(steps, checkpoint_every, no_align)? {
            Some([w, wp, f]) => println!("val_psnr w {w:.3} wplus {wp:.3} f {f:.3}"),
            None => println!("trained (no validation split)"),
        },
        Command::FitDirections { method, samples, k } => {
            let m = match method {
                MethodArg::Svm => DirectionMethod::Svm,
                MethodArg::Pca => DirectionMethod::Pca,
            };
            println!("{}", p.fit_directions(m, samples, k)?.join(" "));
        }
        Command::Invert { image } => println!("{}", p.invert(&image)?.display()),
        Command::Edit { image, direction, alpha, mode, output } => {
            if !alpha.is_finite() {
                return Err(Error::Config("--alpha must be finite".into()));
            }
            let mode = match mode {
                ModeArg::LatentOnly => EditMode::LatentOnly,
                ModeArg::LatentAndFeature => EditMode::LatentAndFeature,
            };
            let req = EditRequest { direction, alpha, mode };
            println!("{}", p.edit(&image, &req, output.as_deref())?.display());
        }
        Command::Eval { images, limit, skip_timing } => print!("{}", p.eval(images.as_deref(), limit, skip_timing)?.to_markdown()),
        Command::Ablate { limit, skip_timing, no_optimization } => print!("{}", p.ablate(limit, skip_timing, !no_optimization)?.to_markdown()),
        Command::Serve { port, host, static_dir } => {
            let models = Models::new(p.generator()?, p.encoder()?, p.directions()?)?;
            let serve = &p.config.serve;
            let static_dir = static_dir.or_else(|| serve.static_dir.clone());
            if let Some(d) = &static_dir {
                if !d.is_dir() {
                    return Err(Error::Config(format!("static directory {} does not exist", d.display())));
                }
            }
            let state = AppState::new(models, serve.sessions);
            let host = host.unwrap_or_else(|| serve.host.clone());
            let port = port.unwrap_or(serve.port);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(server::serve(state, &host, port, static_dir))?;
        }
    }
    Ok(())
}
