use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use blockpair::linemap::Resolver;
use blockpair::pipeline::{run, run_stage, PipelineError, RunManifest, Stage};

/// Build basic-block equivalence datasets from disassembly dumps.
#[derive(Debug, Parser)]
#[command(name = "blockpair", version)]
struct Args {
    /// Run manifest (JSON).
    #[arg(long)]
    manifest: Option<PathBuf>,

    /// Stop at one stage and print its output; needs --dump.
    #[arg(long)]
    stage: Option<Stage>,

    /// Dump file for a --stage run (twice for bpair and dataset).
    #[arg(long)]
    dump: Vec<PathBuf>,

    /// addr2line-compatible executable, or `file:<annotations.json>`.
    #[arg(long)]
    resolver: Vec<String>,

    #[arg(long)]
    seed: Option<u64>,

    /// Keep all records of a function on one side of the split.
    #[arg(long)]
    split_by_function: bool,

    /// Output directory (overrides the manifest).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Worker threads (default: available processors).
    #[arg(long)]
    jobs: Option<usize>,
}

fn execute(args: Args) -> Result<(), PipelineError> {
    let resolvers: Vec<Resolver> = args.resolver.iter().map(|r| Resolver::from_flag(r)).collect();

    if let Some(stage) = args.stage {
        if !args.dump.is_empty() {
            let text = run_stage(stage, &args.dump, &resolvers, args.seed.unwrap_or(0))?;
            print!("{text}");
            return Ok(());
        }
        if stage != Stage::Dataset || args.manifest.is_none() {
            return Err(PipelineError::Validation(format!("--stage {stage} needs --dump")));
        }
    }

    let path = args
        .manifest
        .ok_or_else(|| PipelineError::Validation("either --manifest or --stage with --dump is required".into()))?;
    let mut manifest = RunManifest::load(&path)?;
    if resolvers.len() > 1 {
        return Err(PipelineError::Validation(
            "a manifest run takes at most one --resolver".into(),
        ));
    }
    if let Some(r) = resolvers.into_iter().next() {
        manifest.resolver = Some(r);
    }
    if args.seed.is_some() {
        manifest.seed = args.seed;
    }
    if let Some(out) = args.out {
        manifest.out = out;
    }
    if args.jobs.is_some() {
        manifest.jobs = args.jobs;
    }
    manifest.split_by_function |= args.split_by_function;

    let report = run(&manifest)?;
    for (dir, pair) in report.run_dirs.iter().zip(&report.pairs) {
        let s = pair.stats();
        println!(
            "{}: {} positive, {} negative ({} train / {} test)",
            dir.display(),
            s.positives,
            s.negatives,
            s.train,
            s.test
        );
    }
    println!("log: {}", report.log_path.display());
    Ok(())
}

fn main() -> ExitCode {
    match execute(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
