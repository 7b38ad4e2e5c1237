//! Loads a dump, drops external and library functions, and lists what is
//! left.
//!
//!     cargo run --example parse_and_sanitize -- crates/core/fixtures/ternary/ternary-x86_64-gcc-O3.dump.json

use anyhow::{Context, Result};

use blockpair::ingest::{parse_dump, sanitize};

fn main() -> Result<()> {
    let path = std::env::args()
        .nth(1)
        .context("usage: parse_and_sanitize <dump.json>")?;
    let dump = parse_dump(&path)?;
    let clean = sanitize(&dump);
    println!(
        "{} ({} functions before, {} after)",
        dump.config,
        dump.functions.len(),
        clean.functions.len()
    );
    for f in &clean.functions {
        println!(
            "  {:<24} {:#x}  {} blocks, {} instructions",
            f.name,
            f.entry_address,
            f.blocks.len(),
            f.instruction_count()
        );
    }
    println!(
        "library dictionary: {}",
        clean.library_dictionary.iter().cloned().collect::<Vec<_>>().join(" ")
    );
    Ok(())
}
