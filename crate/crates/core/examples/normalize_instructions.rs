//! Normalizes instructions read from stdin, one per line.
//!
//!     printf 'mov eax, 0x5\ncall 401030 <puts@plt>\n' | cargo run --example normalize_instructions -- x86_64 puts

use std::collections::BTreeSet;
use std::io::BufRead;

use anyhow::{Context, Result};

use blockpair::normalize::normalize_text_for;

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let isa = args
        .next()
        .context("usage: normalize_instructions <isa> [library names...]")?;
    let dict: BTreeSet<String> = args.collect();
    for line in std::io::stdin().lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        println!("{:<48} {}", line.trim(), normalize_text_for(&line, &isa, &dict)?);
    }
    Ok(())
}
