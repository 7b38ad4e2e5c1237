//! Pairs the unlzw fixture's O0 and O3 builds and prints every component.

use std::path::Path;

use anyhow::Result;

use blockpair::bmerge::bmerge_dump;
use blockpair::bpair::pair_programs;
use blockpair::ingest::{parse_dump, sanitize, ProgramDump};
use blockpair::linemap::{annotate_blocks, resolve_addresses, Resolver};

fn load(dir: &Path, opt: &str) -> Result<ProgramDump> {
    let dump = sanitize(&parse_dump(dir.join(format!("gzip-aarch64-gcc-{opt}.dump.json")))?);
    let resolver = Resolver::AnnotationFile(dir.join(format!("gzip-aarch64-gcc-{opt}.annotations.json")));
    let cache = resolve_addresses(&resolver, &dump.config.binary_path, &dump.instruction_addresses())?;
    Ok(bmerge_dump(&annotate_blocks(&dump, &cache)?)?.0)
}

fn main() -> Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/unlzw");
    let (left, right) = (load(&dir, "O0")?, load(&dir, "O3")?);
    let paired = pair_programs(&left, &right)?;
    for p in &paired.pairs {
        let ids = |v: &[blockpair::ingest::BlockId]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ");
        println!(
            "{}: [{}] <-> [{}]",
            p.function_name,
            ids(&p.left_block.merged_from),
            ids(&p.right_block.merged_from)
        );
        println!("    shared {}", p.shared_labels);
    }
    print!("{}", paired.unmatched.to_json());
    Ok(())
}
