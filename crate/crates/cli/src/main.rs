use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod verbs;

/// Structure-aware self-supervised pretraining on synthetic 3D volumes.
#[derive(Debug, Parser)]
#[command(name = "s2dc", version)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Verb {
    /// Generate benchmark scenes as svol/1 files plus a manifest.
    GenData(Common),
    /// Pretrain an encoder.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from an sckpt/1 checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Structure-consistency report of a model and an untrained baseline.
    Eval(Common),
    /// Anchor-patch similarity heatmap.
    Heatmap(Common),
    /// Patch matches between a scene and a transformed copy.
    Match(Common),
    /// Train and score the four loss-ablation arms.
    Ablate(Common),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    s2dc::parallel::init_from_env();
    let result = std::panic::catch_unwind(|| match cli.verb {
        Verb::GenData(c) => verbs::gen_data(&c.into()),
        Verb::Train { common, resume } => verbs::train(&common.into(), resume.as_deref()),
        Verb::Eval(c) => verbs::eval(&c.into()),
        Verb::Heatmap(c) => verbs::heatmap(&c.into()),
        Verb::Match(c) => verbs::match_views(&c.into()),
        Verb::Ablate(c) => verbs::ablate(&c.into()),
    });
    match result {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
        Err(_) => ExitCode::from(2),
    }
}

impl From<Common> for verbs::Invocation {
    fn from(c: Common) -> Self {
        Self {
            config: c.config,
            out: c.out,
            seed: c.seed,
        }
    }
}
