//! Compiles C sources on the host, exports dumps with objdump and resolves
//! every instruction address with addr2line into an annotation file.
//!
//!     cargo run --example compile_and_export -- --out /tmp/fx --program ternary \
//!         --opt O0 --opt O3 crates/core/fixtures/ternary/ternary.c
//!
//! The written dumps reference their binary by file name, so the output
//! directory can be moved as a unit.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Parser;

use blockpair::ingest::{Compiler, OptLevel};
use blockpair::linemap::{resolve_addresses, Resolver};
use blockpair::objdump::{export_binary, host_isa, objdump_for};
use blockpair::toolchain::{build_matrix, SourceProgram};

#[derive(Parser)]
struct Args {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    program: String,
    #[arg(long = "opt", default_values = ["O0", "O3"])]
    opts: Vec<OptLevel>,
    #[arg(long, default_value = "gcc")]
    compiler: Compiler,
    #[arg(long, default_value = "addr2line")]
    resolver: PathBuf,
    sources: Vec<PathBuf>,
}

fn main() -> Result<()> {
    let args = Args::parse();
    let isa = host_isa().context("unsupported host architecture")?;
    let program = SourceProgram {
        name: args.program.clone(),
        files: args.sources.clone(),
    };
    let matrix: Vec<_> = args.opts.iter().map(|&o| (isa, args.compiler, o)).collect();
    let built = build_matrix(&[program], &matrix, &args.out)?;

    for b in built {
        println!("{}", b.command.join(" "));
        let objdump = PathBuf::from(objdump_for(isa));
        let mut dump = export_binary(&objdump, b.config.clone())?;
        let cache = resolve_addresses(
            &Resolver::External(args.resolver.clone()),
            &b.config.binary_path,
            &dump.instruction_addresses(),
        )?;

        let stem = format!("{}-{}", b.config.program_name, b.config.key());
        dump.config.binary_path = stem.clone();
        let dump_path = args.out.join(format!("{stem}.dump.json"));
        let ann_path = args.out.join(format!("{stem}.annotations.json"));
        std::fs::write(&dump_path, dump.to_json())?;
        std::fs::write(&ann_path, cache.to_json())?;
        println!(
            "  {} functions, {} blocks -> {}",
            dump.functions.len(),
            dump.block_count(),
            dump_path.display()
        );
    }
    Ok(())
}
