use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tmcdiff::Result;
use tmcdiff_cli::config::{parse_override, resolve, Settings};
use tmcdiff_cli::*;

// A closed stdout (e.g. piped into `head`) is not an error.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Parser)]
#[command(name = "tmcdiff", version, about = "Low-light raw restoration with a conditional diffusion model")]
struct Cli {
    /// Plain-text `key = value` settings file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    NoTmc,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConditionKind {
    Srgb,
    Raw,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a paired dataset and its manifest.
    Synth {
        #[arg(long)]
        source_dir: Option<PathBuf>,
    },
    /// Train the denoiser and condition path.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum)]
        ablate: Option<Ablation>,
        #[arg(long, value_enum)]
        condition: Option<ConditionKind>,
        #[arg(long)]
        tmc_mode: Option<String>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample restorations for a manifest split.
    Sample {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Write every reverse step as PNG.
        #[arg(long)]
        trace: bool,
    },
    /// Score sampled outputs against ground truth.
    Eval {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long = "samples")]
        samples: Vec<PathBuf>,
        #[arg(long = "method")]
        methods: Vec<String>,
    },
    /// Degradation tables and gradient histograms.
    Analyze {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

fn path(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn list(v: &[impl ToString]) -> Option<String> {
    (!v.is_empty()).then(|| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","))
}

fn settings<S: Settings>(cli: &Cli, flags: Vec<(&str, Option<String>)>) -> Result<S> {
    let mut overrides = Vec::new();
    if let Some(seed) = cli.seed {
        overrides.push(("seed".to_string(), seed.to_string()));
    }
    if let Some(out) = path(&cli.out) {
        overrides.push(("out".to_string(), out));
    }
    overrides.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
    for s in &cli.sets {
        overrides.push(parse_override(s)?);
    }
    resolve(cli.config.as_deref(), &overrides)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { source_dir } => {
            let s: SynthSettings = settings(cli, vec![("source_dir", path(source_dir))])?;
            let o = cmd_synth(&s)?;
            say!("wrote {} ({} scenes, {} low-light, {} ground-truth images)", o.manifest.display(), o.scenes, o.low_light, o.ground_truth);
        }
        Command::Train { manifest, ablate, condition, tmc_mode, resume } => {
            let mut flags = vec![("manifest", path(manifest)), ("tmc_mode", tmc_mode.clone()), ("resume", path(resume))];
            if let Some(Ablation::NoTmc) = ablate {
                flags.push(("tmc", Some("false".into())));
            }
            if let Some(c) = condition {
                flags.push(("condition", Some(match c { ConditionKind::Srgb => "srgb", ConditionKind::Raw => "raw" }.into())));
            }
            let s: TrainSettings = settings(cli, flags)?;
            let o = cmd_train(&s)?;
            say!("trained on {} pairs; checkpoint {}, losses {}", o.pairs, o.checkpoint.display(), o.loss_csv.display());
        }
        Command::Sample { checkpoint, manifest, trace } => {
            let flags = vec![("checkpoint", path(checkpoint)), ("manifest", path(manifest)), ("trace", trace.then(|| "true".into()))];
            let s: SampleSettings = settings(cli, flags)?;
            let o = cmd_sample(&s)?;
            say!("wrote {} samples, index {}", o.images.len(), o.index.display());
        }
        Command::Eval { manifest, samples, methods } => {
            let flags = vec![("manifest", path(manifest)), ("samples", list(&samples.iter().map(|p| p.display()).collect::<Vec<_>>())), ("methods", list(methods))];
            let s: EvalSettings = settings(cli, flags)?;
            let o = cmd_eval(&s)?;
            for m in &o.summary {
                say!("{:<24} n={:<5} psnr={:.3} ssim={:.4}", m.method, m.count, m.psnr, m.ssim);
            }
            say!("wrote {}", o.csv.display());
        }
        Command::Analyze { manifest } => {
            let s: AnalyzeSettings = settings(cli, vec![("manifest", path(manifest))])?;
            let o = cmd_analyze(&s)?;
            for m in &o.missing {
                eprintln!("warning: unpaired {m}");
            }
            say!("wrote {}, {}, {}", o.degradation_csv.display(), o.stats_csv.display(), o.histogram_csv.display());
            say!("note: synthetic noise is a shot + read proxy; statistics describe that model only");
        }
    }
    Ok(())
}

fn report(code: &str, msg: &str) {
    eprintln!("error[{code}]: {}", msg.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join(" "));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report("E_USAGE", &e.to_string().replace("error: ", ""));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(e.code(), &e.to_string());
            ExitCode::from(1)
        }
    }
}
