//! Consolidates blocks with equal or nested label sets. Without arguments
//! it runs on a small hand-made function.

use anyhow::Result;

use blockpair::bmerge::bmerge;
use blockpair::ingest::{BasicBlock, Instruction};
use blockpair::linemap::{LabelSet, SourceLine};

fn block(start: u64, text: &[&str], lines: &[u32]) -> Result<BasicBlock> {
    let ins = text
        .iter()
        .enumerate()
        .map(|(k, t)| Instruction::from_text(start + 4 * k as u64, t).expect("non-empty instruction"))
        .collect();
    let labels: LabelSet = lines
        .iter()
        .map(|&l| SourceLine::new("demo.c", l))
        .collect::<Result<_, _>>()?;
    Ok(BasicBlock::new(ins).with_labels(labels))
}

fn main() -> Result<()> {
    let blocks = vec![
        block(0x1000, &["ldr w0, [sp, #12]", "cmp w0, #0"], &[10, 11])?,
        block(0x1008, &["b.eq 1014"], &[11])?,
        block(0x100c, &["mov w0, #1", "b 1018"], &[10])?,
        block(0x1014, &["mov w0, #2"], &[12])?,
        block(0x1018, &["ret"], &[12])?,
    ];
    for b in bmerge(&blocks)? {
        let ids: Vec<String> = b.merged_from.iter().map(ToString::to_string).collect();
        println!("{} {} <- [{}]", b.id, b.labels, ids.join(", "));
        for i in &b.instructions {
            println!("    {:#x}  {}", i.address, i.raw_text);
        }
    }
    Ok(())
}
