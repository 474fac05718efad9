use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use flashback_core::experiment::{
    compare, load_summaries, render_table, run_adapt, run_warmup, verify_adapt, verify_warmup, write_comparison,
    ExperimentConfig, VerifyOutcome,
};

#[derive(Parser)]
#[command(name = "flashback", version, about = "Warm-up, adaptation and reporting for flashback experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one reference model per seed on the old tasks.
    Warmup(RunArgs),
    /// Adapt the warm-up checkpoints to the new tasks with the configured method.
    Adapt(RunArgs),
    /// Compare finished runs.
    Report {
        /// Variant directories (each holding a summary.json).
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        /// Where the table, CSV and plots are written.
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Re-run into a scratch directory and compare every file hash with the
    /// recorded manifests instead of writing new results.
    #[arg(long)]
    verify: bool,
    /// Suppress per-epoch progress on stderr.
    #[arg(long, short)]
    quiet: bool,
}

impl RunArgs {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let cfg = ExperimentConfig::load(&self.config)?;
        let out = self
            .out
            .clone()
            .or_else(|| cfg.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        Ok((cfg, out))
    }

    fn progress(&self) -> impl FnMut(&str) {
        let quiet = self.quiet;
        move |msg: &str| {
            if !quiet {
                eprintln!("{msg}");
            }
        }
    }
}

fn scratch_dir(out: &Path) -> Result<PathBuf> {
    let dir = out.join(".verify");
    if dir.exists() {
        std::fs::remove_dir_all(&dir).with_context(|| format!("removing {}", dir.display()))?;
    }
    Ok(dir)
}

fn report_verify(v: &VerifyOutcome, scratch: &Path) -> Result<()> {
    for (manifest, n, bad) in &v.checked {
        if bad.is_empty() {
            println!("verified {n} files against {}", manifest.display());
        } else {
            println!("MISMATCH in {}: {}", manifest.display(), bad.join(", "));
        }
    }
    if v.ok() {
        std::fs::remove_dir_all(scratch).with_context(|| format!("removing {}", scratch.display()))?;
        Ok(())
    } else {
        bail!("verification failed; the re-run is kept in {}", scratch.display())
    }
}

fn warmup(args: &RunArgs) -> Result<()> {
    let (cfg, out) = args.load()?;
    let mut progress = args.progress();
    if args.verify {
        let scratch = scratch_dir(&out)?;
        let v = verify_warmup(&cfg, &out, &scratch, &mut progress)?;
        return report_verify(&v, &scratch);
    }
    for r in run_warmup(&cfg, &out, &mut progress)? {
        let scores: Vec<String> = r.test.iter().map(|e| format!("{} {:.3}", e.task, e.exact_match)).collect();
        println!("seed {}: {} ({})", r.seed, r.checkpoint, scores.join(", "));
    }
    Ok(())
}

fn adapt(args: &RunArgs) -> Result<()> {
    let (cfg, out) = args.load()?;
    let mut progress = args.progress();
    if args.verify {
        let scratch = scratch_dir(&out)?;
        let v = verify_adapt(&cfg, &out, &scratch, &mut progress)?;
        return report_verify(&v, &scratch);
    }
    let summaries = run_adapt(&cfg, &out, &mut progress)?;
    print!("{}", render_table(&compare(&summaries)));
    Ok(())
}

fn report(run_dirs: &[PathBuf], out: &Path) -> Result<()> {
    let (summaries, warnings) = load_summaries(run_dirs);
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    if summaries.is_empty() {
        bail!("none of the {} run directories held a readable summary.json", run_dirs.len());
    }
    let cmp = compare(&summaries);
    print!("{}", render_table(&cmp));
    for p in write_comparison(&cmp, out)? {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

/// The error chain, skipping causes whose text the outer message already includes.
fn describe(e: &anyhow::Error) -> String {
    let mut text = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !text.contains(&c) {
            text = format!("{text}: {c}");
        }
    }
    text
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Warmup(a) => warmup(a),
        Command::Adapt(a) => adapt(a),
        Command::Report { run_dirs, out } => report(run_dirs, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}
