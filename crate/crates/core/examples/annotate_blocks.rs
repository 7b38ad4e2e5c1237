//! Labels every block of a dump with source lines, either from an
//! annotation file (`file:<path>`) or by running addr2line.
//!
//!     cargo run --example annotate_blocks -- crates/core/fixtures/unlzw/gzip-aarch64-gcc-O0.dump.json \
//!         file:crates/core/fixtures/unlzw/gzip-aarch64-gcc-O0.annotations.json

use anyhow::{Context, Result};

use blockpair::ingest::{parse_dump, sanitize};
use blockpair::linemap::{annotate_blocks, resolve_addresses, Resolver};

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args.next().context("usage: annotate_blocks <dump.json> [resolver]")?;
    let resolver = Resolver::from_flag(&args.next().unwrap_or_else(|| "addr2line".into()));

    let dump = sanitize(&parse_dump(&path)?);
    let cache = resolve_addresses(&resolver, &dump.config.binary_path, &dump.instruction_addresses())?;
    let annotated = annotate_blocks(&dump, &cache)?;
    for f in &annotated.functions {
        let before = dump.function(&f.name).map_or(0, |d| d.blocks.len());
        println!("{} ({} of {} blocks labelled)", f.name, f.blocks.len(), before);
        for b in &f.blocks {
            println!("  {} {}", b.id, b.labels);
        }
    }
    Ok(())
}
