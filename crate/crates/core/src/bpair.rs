//! Cross-build block pairing.
//!
//! Two builds of the same function yield block sets U and V. A bipartite
//! graph connects u and v whenever their label sets intersect; every
//! connected component holding vertices from both sides becomes one
//! equivalent pair, each side folded into a single block. Components with
//! only one side (code the other build dropped) are reported, not paired.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::bmerge::merge_blocks;
use crate::ingest::{BasicBlock, BlockId, BuildConfig, ProgramDump};
use crate::linemap::LabelSet;

/// Union-find with path halving and union by size.
#[derive(Clone, Debug)]
pub struct DisjointSet {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl DisjointSet {
    pub fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        true
    }
}

#[derive(Clone, Debug)]
pub struct BipartiteGraph {
    pub left: Vec<BasicBlock>,
    pub right: Vec<BasicBlock>,
    /// `(left index, right index)` for every intersecting pair.
    pub edges: BTreeSet<(usize, usize)>,
}

impl BipartiteGraph {
    /// Connected components as (left indices, right indices), both sorted.
    pub fn components(&self) -> Vec<(Vec<usize>, Vec<usize>)> {
        let n = self.left.len();
        let mut dsu = DisjointSet::new(n + self.right.len());
        for &(u, v) in &self.edges {
            dsu.union(u, n + v);
        }
        let mut by_root: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        for u in 0..n {
            by_root.entry(dsu.find(u)).or_default().0.push(u);
        }
        for v in 0..self.right.len() {
            by_root.entry(dsu.find(n + v)).or_default().1.push(v);
        }
        by_root.into_values().collect()
    }
}

pub fn build_graph(left: &[BasicBlock], right: &[BasicBlock]) -> BipartiteGraph {
    let mut edges = BTreeSet::new();
    for (u, a) in left.iter().enumerate() {
        for (v, b) in right.iter().enumerate() {
            if a.labels.intersects(&b.labels) {
                edges.insert((u, v));
            }
        }
    }
    BipartiteGraph {
        left: left.to_vec(),
        right: right.to_vec(),
        edges,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockPair {
    pub left: BasicBlock,
    pub right: BasicBlock,
    pub shared_labels: LabelSet,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct OneSidedComponent {
    pub side: Side,
    pub block_ids: Vec<BlockId>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Pairing {
    pub pairs: Vec<BlockPair>,
    pub one_sided: Vec<OneSidedComponent>,
}

/// Folds blocks into the lowest-addressed one.
fn fold_side(blocks: &[BasicBlock], indices: &[usize]) -> Option<BasicBlock> {
    let mut members: Vec<&BasicBlock> = indices.iter().map(|&i| &blocks[i]).collect();
    members.sort_by_key(|b| (b.start_address, b.id));
    let (anchor, rest) = members.split_first()?;
    Some(rest.iter().fold((*anchor).clone(), |acc, b| merge_blocks(&acc, b)))
}

fn merged_ids(blocks: &[BasicBlock], indices: &[usize]) -> Vec<BlockId> {
    let mut ids: Vec<BlockId> = indices
        .iter()
        .flat_map(|&i| blocks[i].merged_from.iter().copied())
        .collect();
    ids.sort_unstable();
    ids
}

/// One pair per two-sided component, ordered by the left anchor's address.
pub fn bpair(left: &[BasicBlock], right: &[BasicBlock]) -> Pairing {
    let graph = build_graph(left, right);
    let mut out = Pairing::default();
    for (us, vs) in graph.components() {
        match (fold_side(left, &us), fold_side(right, &vs)) {
            (Some(l), Some(r)) => {
                let shared_labels = l.labels.intersection(&r.labels);
                debug_assert!(!shared_labels.is_empty());
                out.pairs.push(BlockPair {
                    left: l,
                    right: r,
                    shared_labels,
                });
            }
            (Some(_), None) => out.one_sided.push(OneSidedComponent {
                side: Side::Left,
                block_ids: merged_ids(left, &us),
            }),
            (None, Some(_)) => out.one_sided.push(OneSidedComponent {
                side: Side::Right,
                block_ids: merged_ids(right, &vs),
            }),
            (None, None) => {}
        }
    }
    out.pairs
        .sort_by_key(|p| (p.left.start_address, p.left.id, p.right.start_address, p.right.id));
    out.one_sided.sort();
    out
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PairError {
    #[error("both dumps have build coordinate {0}; pairs need two distinct builds")]
    IdenticalConfigs(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EquivalentPair {
    pub function_name: String,
    pub left_block: BasicBlock,
    pub right_block: BasicBlock,
    pub left_config: BuildConfig,
    pub right_config: BuildConfig,
    pub shared_labels: LabelSet,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct UnmatchedComponent {
    pub function: String,
    pub side: Side,
    pub block_ids: Vec<BlockId>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct UnmatchedReport {
    pub left_only_functions: Vec<String>,
    pub right_only_functions: Vec<String>,
    pub one_sided_components: Vec<UnmatchedComponent>,
}

impl UnmatchedReport {
    pub fn extend(&mut self, other: UnmatchedReport) {
        self.left_only_functions.extend(other.left_only_functions);
        self.right_only_functions.extend(other.right_only_functions);
        self.one_sided_components.extend(other.one_sided_components);
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serialization cannot fail");
        text.push('\n');
        text
    }
}

/// Per-function pairing counts, reported for logging.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FunctionPairing {
    pub function: String,
    pub components: usize,
    pub pairs: usize,
    pub one_sided: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ProgramPairing {
    pub pairs: Vec<EquivalentPair>,
    pub unmatched: UnmatchedReport,
    pub per_function: Vec<FunctionPairing>,
}

/// Cross-build join key: the symbol name without a `@GLIBC_…` version tag.
pub fn function_key(name: &str) -> &str {
    match name.find("@GLIBC_") {
        Some(i) => name[..i].trim_end_matches('@'),
        None => name,
    }
}

fn keyed(dump: &ProgramDump) -> (BTreeMap<&str, usize>, Vec<String>) {
    let mut map = BTreeMap::new();
    let mut shadowed = Vec::new();
    for (i, f) in dump.functions.iter().enumerate() {
        let key = function_key(&f.name);
        if let Some(prev) = map.insert(key, i) {
            // two symbols collapse to one key; the exact match keeps it
            let (keep, drop) = if dump.functions[prev].name == key {
                (prev, i)
            } else {
                (i, prev)
            };
            map.insert(key, keep);
            shadowed.push(dump.functions[drop].name.clone());
        }
    }
    (map, shadowed)
}

/// Pairs every function present (by name) in both dumps. Both dumps must be
/// annotated and consolidated.
pub fn pair_programs(left: &ProgramDump, right: &ProgramDump) -> Result<ProgramPairing, PairError> {
    if left.config.coordinate() == right.config.coordinate() {
        return Err(PairError::IdenticalConfigs(left.config.key()));
    }
    let (lmap, lshadow) = keyed(left);
    let (rmap, rshadow) = keyed(right);

    let only =
        |mine: &BTreeMap<&str, usize>, theirs: &BTreeMap<&str, usize>, dump: &ProgramDump, shadow: Vec<String>| {
            let mut names: Vec<String> = mine
                .iter()
                .filter(|(k, _)| !theirs.contains_key(*k))
                .map(|(_, &i)| dump.functions[i].name.clone())
                .chain(shadow)
                .collect();
            names.sort();
            names
        };
    let unmatched = UnmatchedReport {
        left_only_functions: only(&lmap, &rmap, left, lshadow),
        right_only_functions: only(&rmap, &lmap, right, rshadow),
        one_sided_components: Vec::new(),
    };

    let matched: Vec<(&str, usize, usize)> = lmap
        .iter()
        .filter_map(|(k, &i)| rmap.get(k).map(|&j| (*k, i, j)))
        .collect();

    let results: Vec<(String, Pairing, usize)> = matched
        .par_iter()
        .map(|&(key, i, j)| {
            let (lf, rf) = (&left.functions[i], &right.functions[j]);
            let components = build_graph(&lf.blocks, &rf.blocks).components().len();
            (key.to_string(), bpair(&lf.blocks, &rf.blocks), components)
        })
        .collect();

    let mut out = ProgramPairing {
        unmatched,
        ..ProgramPairing::default()
    };
    for (function, pairing, components) in results {
        out.per_function.push(FunctionPairing {
            function: function.clone(),
            components,
            pairs: pairing.pairs.len(),
            one_sided: pairing.one_sided.len(),
        });
        for p in pairing.pairs {
            out.pairs.push(EquivalentPair {
                function_name: function.clone(),
                left_block: p.left,
                right_block: p.right,
                left_config: left.config.clone(),
                right_config: right.config.clone(),
                shared_labels: p.shared_labels,
            });
        }
        for c in pairing.one_sided {
            out.unmatched.one_sided_components.push(UnmatchedComponent {
                function: function.clone(),
                side: c.side,
                block_ids: c.block_ids,
            });
        }
    }
    Ok(out)
}
