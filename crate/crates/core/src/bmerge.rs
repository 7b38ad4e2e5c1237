//! Per-function block consolidation.
//!
//! Within one build, blocks whose label sets are equal or nested describe
//! the same source and would make cross-build pairing ambiguous. They are
//! merged until every surviving block carries a label set that is neither
//! equal to nor a subset of any other.
//!
//! Resolution order:
//! 1. blocks with identical label sets are merged into one group;
//! 2. groups whose labels are not contained in any other group's labels are
//!    the survivors (the maximal label sets);
//! 3. every other group is merged directly into the survivor that contains
//!    its labels. When several incomparable survivors qualify, the one whose
//!    group had the lowest start address before step 3 wins.
//!
//! The tie-break in step 3 makes the result independent of input order.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::ingest::{BasicBlock, BlockId, FunctionRecord, ProgramDump};
use crate::linemap::LabelSet;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BMergeError {
    #[error("block {block} in function `{function}` has no source labels")]
    EmptyLabels { function: String, block: BlockId },
}

/// Merges `q` into `p` (or the other way round): the result starts at the
/// lower address, keeps that block's id, and holds both instruction lists in
/// address order. Symmetric in its arguments.
pub fn merge_blocks(p: &BasicBlock, q: &BasicBlock) -> BasicBlock {
    let (anchor, other) = if (q.start_address, q.id) < (p.start_address, p.id) {
        (q, p)
    } else {
        (p, q)
    };

    let mut instructions = Vec::with_capacity(anchor.instructions.len() + other.instructions.len());
    let (mut a, mut b) = (
        anchor.instructions.iter().peekable(),
        other.instructions.iter().peekable(),
    );
    loop {
        let next = match (a.peek(), b.peek()) {
            (Some(x), Some(y)) if y.address < x.address => b.next(),
            (Some(_), _) => a.next(),
            (None, Some(_)) => b.next(),
            (None, None) => break,
        };
        instructions.extend(next.cloned());
    }

    let mut merged_from: Vec<BlockId> = anchor.merged_from.iter().chain(&other.merged_from).copied().collect();
    merged_from.sort_unstable();
    merged_from.dedup();

    BasicBlock {
        id: anchor.id,
        start_address: anchor.start_address,
        end_address: None,
        instructions,
        labels: anchor.labels.union(&other.labels),
        merged_from,
    }
}

fn fold(blocks: impl IntoIterator<Item = BasicBlock>) -> Option<BasicBlock> {
    blocks.into_iter().reduce(|acc, b| merge_blocks(&acc, &b))
}

/// Consolidates one function's blocks. Output is sorted by start address.
pub fn bmerge(blocks: &[BasicBlock]) -> Result<Vec<BasicBlock>, BMergeError> {
    bmerge_named("", blocks)
}

fn bmerge_named(function: &str, blocks: &[BasicBlock]) -> Result<Vec<BasicBlock>, BMergeError> {
    if let Some(b) = blocks.iter().find(|b| b.labels.is_empty()) {
        return Err(BMergeError::EmptyLabels {
            function: function.to_string(),
            block: b.id,
        });
    }

    let mut by_labels: BTreeMap<&LabelSet, Vec<BasicBlock>> = BTreeMap::new();
    for b in blocks {
        by_labels.entry(&b.labels).or_default().push(b.clone());
    }
    let groups: Vec<BasicBlock> = by_labels
        .into_values()
        .map(|g| fold(g).expect("groups are non-empty"))
        .collect();

    let is_maximal: Vec<bool> = groups
        .iter()
        .map(|g| !groups.iter().any(|h| g.labels.is_strict_subset(&h.labels)))
        .collect();

    let mut survivors: BTreeMap<usize, Vec<BasicBlock>> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        let target = if is_maximal[i] {
            i
        } else {
            (0..groups.len())
                .filter(|&j| is_maximal[j] && g.labels.is_strict_subset(&groups[j].labels))
                .min_by_key(|&j| (groups[j].start_address, groups[j].id))
                .expect("a non-maximal group has a maximal superset")
        };
        survivors.entry(target).or_default().push(g.clone());
    }

    let mut out: Vec<BasicBlock> = survivors
        .into_values()
        .map(|members| fold(members).expect("survivor groups are non-empty"))
        .collect();
    out.sort_by_key(|b| (b.start_address, b.id));
    Ok(out)
}

/// Before/after block counts for one function.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MergeOutcome {
    pub function: String,
    pub original_blocks: usize,
    pub resulting_blocks: usize,
}

impl MergeOutcome {
    pub fn changed(&self) -> bool {
        self.resulting_blocks != self.original_blocks
    }

    pub fn ratio(&self) -> f64 {
        self.resulting_blocks as f64 / self.original_blocks as f64
    }
}

pub fn bmerge_function(function: &FunctionRecord) -> Result<(FunctionRecord, MergeOutcome), BMergeError> {
    let blocks = bmerge_named(&function.name, &function.blocks)?;
    let outcome = MergeOutcome {
        function: function.name.clone(),
        original_blocks: function.blocks.len(),
        resulting_blocks: blocks.len(),
    };
    let mut merged = function.clone();
    merged.blocks = blocks;
    Ok((merged, outcome))
}

/// Applies [`bmerge`] to every function of an annotated dump.
pub fn bmerge_dump(dump: &ProgramDump) -> Result<(ProgramDump, Vec<MergeOutcome>), BMergeError> {
    let mut functions = Vec::with_capacity(dump.functions.len());
    let mut outcomes = Vec::with_capacity(dump.functions.len());
    for f in &dump.functions {
        let (merged, outcome) = bmerge_function(f)?;
        functions.push(merged);
        outcomes.push(outcome);
    }
    Ok((
        ProgramDump {
            config: dump.config.clone(),
            functions,
            library_dictionary: dump.library_dictionary.clone(),
        },
        outcomes,
    ))
}
