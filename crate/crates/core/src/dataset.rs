//! Corpus assembly: positive records, dedup, negatives, truncation, split,
//! statistics and the on-disk files.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bmerge::MergeOutcome;
use crate::bpair::EquivalentPair;
use crate::ingest::ProgramDump;
use crate::linemap::LabelSet;
use crate::normalize::{normalize_block, render_block, INSTRUCTION_SEPARATOR};

pub const MAX_INSTRUCTIONS: usize = 100;
pub const TRAIN_FRACTION: f64 = 0.8;

/// Rejection-sampling attempts before falling back to an exhaustive scan.
const SAMPLE_TRIES: usize = 64;

const NEGATIVE_STREAM: u64 = 0;
const SPLIT_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairMeta {
    pub function: String,
    pub right_function: String,
    pub left_config: String,
    pub right_config: String,
    pub left_labels: LabelSet,
    pub right_labels: LabelSet,
    pub shared_labels: Option<LabelSet>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub left: String,
    pub right: String,
    pub label: u8,
    pub meta: PairMeta,
}

impl PairRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serialization cannot fail")
    }
}

/// A normalized block available as a negative partner.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolBlock {
    pub function: String,
    pub config: String,
    pub rendering: String,
    pub labels: LabelSet,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DatasetError {
    #[error("no negative partner for a block of `{function}` ({config}): every pool block shares a source line or renders identically")]
    PoolExhausted { function: String, config: String },
}

/// Normalizes both sides of every cross-build pair.
pub fn positive_records(pairs: &[EquivalentPair], left: &ProgramDump, right: &ProgramDump) -> Vec<PairRecord> {
    pairs
        .iter()
        .map(|p| PairRecord {
            left: render_block(&normalize_block(
                &p.left_block,
                p.left_config.isa,
                &left.library_dictionary,
            )),
            right: render_block(&normalize_block(
                &p.right_block,
                p.right_config.isa,
                &right.library_dictionary,
            )),
            label: 1,
            meta: PairMeta {
                function: p.function_name.clone(),
                right_function: right_function_name(right, &p.function_name),
                left_config: p.left_config.key(),
                right_config: p.right_config.key(),
                left_labels: p.left_block.labels.clone(),
                right_labels: p.right_block.labels.clone(),
                shared_labels: Some(p.shared_labels.clone()),
            },
        })
        .collect()
}

fn right_function_name(right: &ProgramDump, left_name: &str) -> String {
    let key = crate::bpair::function_key(left_name);
    right
        .functions
        .iter()
        .map(|f| f.name.as_str())
        .filter(|n| crate::bpair::function_key(n) == key)
        .min_by_key(|n| (*n != left_name, *n))
        .unwrap_or(left_name)
        .to_string()
}

/// Every block of a (merged) dump, normalized.
pub fn block_pool(dump: &ProgramDump) -> Vec<PoolBlock> {
    let config = dump.config.key();
    dump.functions
        .iter()
        .flat_map(|f| {
            let config = config.clone();
            f.blocks.iter().map(move |b| PoolBlock {
                function: f.name.clone(),
                config: config.clone(),
                rendering: render_block(&normalize_block(b, dump.config.isa, &dump.library_dictionary)),
                labels: b.labels.clone(),
            })
        })
        .collect()
}

/// Drops records whose (left, right) rendering was already seen, then sorts
/// by rendering.
pub fn dedup(pairs: Vec<PairRecord>) -> Vec<PairRecord> {
    let mut seen: HashSet<(String, String)> = HashSet::new();
    let mut out: Vec<PairRecord> = pairs
        .into_iter()
        .filter(|p| seen.insert((p.left.clone(), p.right.clone())))
        .collect();
    out.sort_by(|a, b| (&a.left, &a.right).cmp(&(&b.left, &b.right)));
    out
}

fn valid_partner(positive: &PairRecord, candidate: &PoolBlock) -> bool {
    !candidate.labels.intersects(&positive.meta.left_labels) && candidate.rendering != positive.right
}

/// One negative per positive: the positive's left side against a pool block
/// that shares no source line with it and does not render like the true
/// partner.
pub fn sample_negatives(
    positives: &[PairRecord],
    pool: &[PoolBlock],
    seed: u64,
) -> Result<Vec<PairRecord>, DatasetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(NEGATIVE_STREAM);
    let mut out = Vec::with_capacity(positives.len());
    for p in positives {
        let mut chosen = None;
        if !pool.is_empty() {
            for _ in 0..SAMPLE_TRIES {
                let c = &pool[rng.gen_range(0..pool.len())];
                if valid_partner(p, c) {
                    chosen = Some(c);
                    break;
                }
            }
        }
        let partner = match chosen {
            Some(c) => c,
            None => {
                let valid: Vec<&PoolBlock> = pool.iter().filter(|c| valid_partner(p, c)).collect();
                *valid.choose(&mut rng).ok_or_else(|| DatasetError::PoolExhausted {
                    function: p.meta.function.clone(),
                    config: p.meta.left_config.clone(),
                })?
            }
        };
        out.push(PairRecord {
            left: p.left.clone(),
            right: partner.rendering.clone(),
            label: 0,
            meta: PairMeta {
                function: p.meta.function.clone(),
                right_function: partner.function.clone(),
                left_config: p.meta.left_config.clone(),
                right_config: partner.config.clone(),
                left_labels: p.meta.left_labels.clone(),
                right_labels: partner.labels.clone(),
                shared_labels: None,
            },
        });
    }
    Ok(out)
}

/// Keeps the first `max` instructions of a flat rendering. Returns whether
/// anything was cut.
pub fn truncate_rendering(rendering: &str, max: usize) -> (String, bool) {
    let sep = format!(" {INSTRUCTION_SEPARATOR} ");
    let parts: Vec<&str> = rendering.split(sep.as_str()).collect();
    if parts.len() <= max {
        (rendering.to_string(), false)
    } else {
        (parts[..max].join(&sep), true)
    }
}

pub fn instruction_count(rendering: &str) -> usize {
    rendering.split(&format!(" {INSTRUCTION_SEPARATOR} ")).count()
}

/// Truncates both sides in place; returns the number of sides cut.
pub fn truncate(records: &mut [PairRecord], max: usize) -> usize {
    let mut cut = 0;
    for r in records {
        for side in [&mut r.left, &mut r.right] {
            let (text, was_cut) = truncate_rendering(side, max);
            if was_cut {
                *side = text;
                cut += 1;
            }
        }
    }
    cut
}

/// Number of training records for a corpus of `n`.
pub fn train_size(n: usize, train_frac: f64) -> usize {
    ((n as f64) * train_frac).round() as usize
}

/// Seeded shuffle split. Returns (train, test) index lists into `records`,
/// each in ascending order. With `by_function`, records of one function stay
/// on the same side and the train side is grown group by group until it
/// reaches its target size.
pub fn split_indices(
    records: &[PairRecord],
    train_frac: f64,
    seed: u64,
    by_function: bool,
) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);
    let target = train_size(records.len(), train_frac);
    let (mut train, mut test) = if by_function {
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            groups.entry(&r.meta.function).or_default().push(i);
        }
        let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
        groups.shuffle(&mut rng);
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for g in groups {
            if train.len() < target {
                train.extend(g);
            } else {
                test.extend(g);
            }
        }
        (train, test)
    } else {
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.shuffle(&mut rng);
        let test = order.split_off(target);
        (order, test)
    };
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Truncates and splits, returning (train, test, truncated side count).
pub fn truncate_and_split(
    mut records: Vec<PairRecord>,
    max_len: usize,
    train_frac: f64,
    seed: u64,
    by_function: bool,
) -> (Vec<PairRecord>, Vec<PairRecord>, usize) {
    let cut = truncate(&mut records, max_len);
    let (train, test) = split_indices(&records, train_frac, seed, by_function);
    let pick = |ix: &[usize]| ix.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    (pick(&train), pick(&test), cut)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ConfigStats {
    pub functions: usize,
    pub bmerge_affected_functions: usize,
    pub bmerge_affected_function_ratio: f64,
    pub blocks_before_bmerge: usize,
    pub blocks_after_bmerge: usize,
    /// Resulting ÷ original block count, per function.
    pub block_change_ratios: BTreeMap<String, f64>,
}

pub fn config_stats(outcomes: &[MergeOutcome]) -> ConfigStats {
    let affected = outcomes.iter().filter(|o| o.changed()).count();
    ConfigStats {
        functions: outcomes.len(),
        bmerge_affected_functions: affected,
        bmerge_affected_function_ratio: if outcomes.is_empty() {
            0.0
        } else {
            affected as f64 / outcomes.len() as f64
        },
        blocks_before_bmerge: outcomes.iter().map(|o| o.original_blocks).sum(),
        blocks_after_bmerge: outcomes.iter().map(|o| o.resulting_blocks).sum(),
        block_change_ratios: outcomes.iter().map(|o| (o.function.clone(), o.ratio())).collect(),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CorpusStats {
    /// Keyed by `program:config`.
    pub configs: BTreeMap<String, ConfigStats>,
    /// Deduplicated positive pairs keyed by `configA__configB`.
    pub pair_counts: BTreeMap<String, usize>,
    pub positives_before_dedup: usize,
    pub dedup_removed: usize,
    pub positives: usize,
    pub negatives: usize,
    pub max_instructions: usize,
    pub truncated_sides: usize,
    pub train: usize,
    pub test: usize,
}

impl CorpusStats {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("stats serialization cannot fail");
        text.push('\n');
        text
    }
}

/// The finished corpus for one config pair.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub records: Vec<PairRecord>,
    pub train: Vec<PairRecord>,
    pub test: Vec<PairRecord>,
    pub stats: CorpusStats,
}

#[derive(Clone, Debug)]
pub struct CorpusOptions {
    /// `None` disables negative sampling.
    pub seed: Option<u64>,
    pub split_by_function: bool,
    pub max_instructions: usize,
    pub train_fraction: f64,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        CorpusOptions {
            seed: Some(0),
            split_by_function: false,
            max_instructions: MAX_INSTRUCTIONS,
            train_fraction: TRAIN_FRACTION,
        }
    }
}

/// Dedup → negatives → truncate → split. `positives` are the raw positive
/// records in collection order; `pool` supplies negative partners.
pub fn assemble(
    positives: Vec<PairRecord>,
    pool: &[PoolBlock],
    options: &CorpusOptions,
) -> Result<Corpus, DatasetError> {
    let before = positives.len();
    let positives = dedup(positives);
    let negatives = match options.seed {
        Some(seed) => sample_negatives(&positives, pool, seed)?,
        None => Vec::new(),
    };
    let mut pair_counts: BTreeMap<String, usize> = BTreeMap::new();
    for p in &positives {
        *pair_counts
            .entry(format!("{}__{}", p.meta.left_config, p.meta.right_config))
            .or_default() += 1;
    }
    let stats = CorpusStats {
        pair_counts,
        positives_before_dedup: before,
        dedup_removed: before - positives.len(),
        positives: positives.len(),
        negatives: negatives.len(),
        max_instructions: options.max_instructions,
        ..CorpusStats::default()
    };
    let mut records = positives;
    records.extend(negatives);
    let truncated = truncate(&mut records, options.max_instructions);
    let (train_ix, test_ix) = split_indices(
        &records,
        options.train_fraction,
        options.seed.unwrap_or(0),
        options.split_by_function,
    );
    let pick = |ix: &[usize]| ix.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    let (train, test) = (pick(&train_ix), pick(&test_ix));
    Ok(Corpus {
        stats: CorpusStats {
            truncated_sides: truncated,
            train: train.len(),
            test: test.len(),
            ..stats
        },
        records,
        train,
        test,
    })
}

pub fn to_jsonl(records: &[PairRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_json_line());
        out.push('\n');
    }
    out
}

pub fn read_jsonl(path: impl AsRef<Path>) -> io::Result<Vec<PairRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e)))
        .collect()
}

/// Negative records whose sides share a source line. Empty for a sound corpus.
pub fn unsound_negatives(records: &[PairRecord]) -> Vec<&PairRecord> {
    records
        .iter()
        .filter(|r| r.label == 0 && r.meta.left_labels.intersects(&r.meta.right_labels))
        .collect()
}

/// Distinct functions among the records, for reporting.
pub fn functions(records: &[PairRecord]) -> BTreeSet<&str> {
    records.iter().map(|r| r.meta.function.as_str()).collect()
}
