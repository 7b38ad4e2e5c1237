//! Runs a manifest end to end and prints the corpus statistics.
//!
//!     cargo run --example build_dataset -- crates/core/fixtures/ternary/manifest.json /tmp/ternary-out

use anyhow::{Context, Result};

use blockpair::pipeline::{run, RunManifest};

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args.next().context("usage: build_dataset <manifest.json> [out dir]")?;
    let mut manifest = RunManifest::load(&path)?;
    if let Some(out) = args.next() {
        manifest.out = out.into();
    }
    let report = run(&manifest)?;
    for (dir, pair) in report.run_dirs.iter().zip(&report.pairs) {
        println!("{}", dir.display());
        print!("{}", pair.stats().to_json());
    }
    Ok(())
}
