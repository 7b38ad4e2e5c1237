#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use blockpair::ingest::{BasicBlock, BlockId, Instruction, Isa};
use blockpair::linemap::{LabelSet, SourceLine};

pub fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(rel)
}

pub fn labels(lines: &[u32]) -> LabelSet {
    lines.iter().map(|&l| SourceLine::new("t.c", l).unwrap()).collect()
}

/// A block of `len` instructions starting at `start`, 4 bytes apart.
pub fn block(start: u64, len: usize, lines: &[u32]) -> BasicBlock {
    let ins = (0..len as u64)
        .map(|k| Instruction::from_text(start + 4 * k, &format!("op{:x} x0", start + 4 * k)).unwrap())
        .collect();
    BasicBlock::new(ins).with_labels(labels(lines))
}

/// Random blocks for one function: distinct starts, each with 1..=3 labels
/// drawn from a universe of `universe` lines.
pub fn random_blocks(rng: &mut impl Rng, max_blocks: usize, universe: u32, base: u64) -> Vec<BasicBlock> {
    let n = rng.gen_range(1..=max_blocks);
    let mut starts: Vec<u64> = (0..max_blocks as u64 * 2).collect();
    starts.shuffle(rng);
    starts.truncate(n);
    starts
        .into_iter()
        .map(|s| {
            let k = rng.gen_range(1..=3.min(universe as usize));
            let lines: Vec<u32> = (0..k).map(|_| rng.gen_range(1..=universe)).collect();
            block(base + s * 0x40, rng.gen_range(1..=3), &lines)
        })
        .collect()
}

pub type LabelKey = BTreeSet<(String, u32)>;

pub fn label_key(l: &LabelSet) -> LabelKey {
    l.iter().map(|s| (s.file().to_string(), s.line())).collect()
}

/// Order-free description of one block: label set and sorted instruction
/// addresses.
pub type Signature = (LabelKey, Vec<u64>);

pub fn signature(b: &BasicBlock) -> Signature {
    let mut addrs: Vec<u64> = b.instructions.iter().map(|i| i.address).collect();
    addrs.sort_unstable();
    (label_key(&b.labels), addrs)
}

pub fn signatures(blocks: &[BasicBlock]) -> BTreeSet<Signature> {
    blocks.iter().map(signature).collect()
}

struct Item {
    labels: LabelKey,
    addrs: Vec<u64>,
    start: u64,
    anchor: u64,
}

fn absorb(items: &mut Vec<Item>, into: usize, from: usize) {
    let f = items.remove(from);
    let into = if from < into { into - 1 } else { into };
    let t = &mut items[into];
    t.labels.extend(f.labels);
    t.addrs.extend(f.addrs);
    t.addrs.sort_unstable();
    t.start = t.start.min(f.start);
}

/// Brute-force fixpoint: merge equal label sets one pair at a time, then
/// fold each strict subset, one at a time, into the maximal superset whose
/// start address was lowest when the equal-set pass ended.
pub fn bmerge_oracle(blocks: &[BasicBlock]) -> BTreeSet<Signature> {
    let mut items: Vec<Item> = blocks
        .iter()
        .map(|b| Item {
            labels: label_key(&b.labels),
            addrs: b.instructions.iter().map(|i| i.address).collect(),
            start: b.start_address,
            anchor: 0,
        })
        .collect();

    loop {
        items.sort_by_key(|i| i.start);
        let hit = (0..items.len())
            .flat_map(|i| (i + 1..items.len()).map(move |j| (i, j)))
            .find(|&(i, j)| items[i].labels == items[j].labels);
        match hit {
            Some((i, j)) => absorb(&mut items, i, j),
            None => break,
        }
    }
    for it in &mut items {
        it.anchor = it.start;
    }

    loop {
        let strict = |a: &LabelKey, b: &LabelKey| a.len() < b.len() && a.is_subset(b);
        let maximal: Vec<bool> = (0..items.len())
            .map(|i| !(0..items.len()).any(|j| strict(&items[i].labels, &items[j].labels)))
            .collect();
        let Some(k) = (0..items.len()).find(|&k| !maximal[k]) else {
            break;
        };
        let target = (0..items.len())
            .filter(|&j| maximal[j] && strict(&items[k].labels, &items[j].labels))
            .min_by_key(|&j| items[j].anchor)
            .unwrap();
        absorb(&mut items, target, k);
    }

    items.into_iter().map(|i| (i.labels, i.addrs)).collect()
}

/// Components of the label-intersection graph by transitive closure over an
/// adjacency matrix. Returns (left ids, right ids) per component.
#[allow(clippy::needless_range_loop)]
pub fn closure_components(left: &[BasicBlock], right: &[BasicBlock]) -> BTreeSet<(Vec<BlockId>, Vec<BlockId>)> {
    let n = left.len() + right.len();
    let node = |k: usize| {
        if k < left.len() {
            &left[k]
        } else {
            &right[k - left.len()]
        }
    };
    let mut reach = vec![vec![false; n]; n];
    for a in 0..n {
        reach[a][a] = true;
        for b in 0..n {
            let cross = (a < left.len()) != (b < left.len());
            if cross && node(a).labels.intersects(&node(b).labels) {
                reach[a][b] = true;
            }
        }
    }
    for m in 0..n {
        for a in 0..n {
            for b in 0..n {
                if reach[a][m] && reach[m][b] {
                    reach[a][b] = true;
                }
            }
        }
    }
    let mut out = BTreeSet::new();
    for a in 0..n {
        let class: Vec<usize> = (0..n).filter(|&b| reach[a][b]).collect();
        let ids = |side_left: bool| {
            let mut v: Vec<BlockId> = class
                .iter()
                .filter(|&&k| (k < left.len()) == side_left)
                .flat_map(|&k| node(k).merged_from.iter().copied())
                .collect();
            v.sort_unstable();
            v
        };
        out.insert((ids(true), ids(false)));
    }
    out
}

pub const FUZZ_MNEMONICS: &[(Isa, &[&str])] = &[
    (
        Isa::X86,
        &[
            "mov", "add", "sub", "cmp", "lea", "call", "jmp", "jne", "push", "imul", "movzx", "ret",
        ],
    ),
    (
        Isa::X86_64,
        &[
            "mov", "add", "sub", "cmp", "lea", "call", "jmp", "je", "test", "movss", "and", "callq",
        ],
    ),
    (
        Isa::Arm32,
        &[
            "mov", "add", "sub", "ldr", "str", "bl", "blx", "b", "bne", "cmp", "push", "ldm",
        ],
    ),
    (
        Isa::Aarch64,
        &[
            "mov", "add", "sub", "ldr", "str", "stp", "bl", "b", "b.ne", "cbz", "tbnz", "adrp",
        ],
    ),
];

fn fuzz_number(rng: &mut impl Rng) -> String {
    let v: i64 = match rng.gen_range(0..4) {
        0 => 0,
        1 => rng.gen_range(1..256),
        2 => -rng.gen_range(1..0x10000),
        _ => rng.gen_range(0x400000..0x500000),
    };
    let mag = v.unsigned_abs();
    let sign = if v < 0 { "-" } else { "" };
    if rng.gen_bool(0.5) {
        format!("{sign}0x{mag:x}")
    } else {
        format!("{sign}{mag}")
    }
}

fn fuzz_operand(rng: &mut impl Rng, isa: Isa) -> String {
    let regs: &[&str] = match isa {
        Isa::X86 => &["eax", "ebx", "ecx", "esp", "ebp"],
        Isa::X86_64 => &["rax", "rbx", "rdi", "rsp", "rbp", "r12", "xmm0"],
        Isa::Arm32 => &["r0", "r3", "fp", "sp", "lr", "pc"],
        Isa::Aarch64 => &["x0", "w1", "x29", "sp", "xzr", "v0.4s"],
    };
    let reg = regs[rng.gen_range(0..regs.len())];
    let reg2 = regs[rng.gen_range(0..regs.len())];
    let arm = matches!(isa, Isa::Arm32 | Isa::Aarch64);
    let num = fuzz_number(rng);
    match rng.gen_range(0..8) {
        0 | 1 => reg.to_string(),
        2 if arm => format!("#{num}"),
        2 => num,
        3 if arm => format!("[{reg}, #{num}]"),
        3 => format!(
            "DWORD PTR [{reg}{}{}]",
            if num.starts_with('-') { "" } else { "+" },
            num
        ),
        4 if arm => format!("[{reg}, {reg2}]"),
        4 => format!("[{reg}+{reg2}*{}+{num}]", [1, 2, 4, 8][rng.gen_range(0..4)]),
        5 => format!(
            "{:x} <f{}+0x{:x}>",
            rng.gen_range(0x400000..0x500000u64),
            rng.gen_range(0..9),
            rng.gen_range(0..0x100)
        ),
        6 => format!("LAB_{:08x}", rng.gen_range(0x400000..0x500000u64)),
        _ if arm => format!("{{{reg}, {reg2}}}"),
        _ => format!("QWORD PTR [rip+{num}]"),
    }
}

/// A random instruction string for `isa` built from common operand shapes.
pub fn fuzz_instruction(rng: &mut impl Rng, isa: Isa) -> String {
    let mnemonics = FUZZ_MNEMONICS.iter().find(|(i, _)| *i == isa).unwrap().1;
    let m = mnemonics[rng.gen_range(0..mnemonics.len())];
    let n = rng.gen_range(0..=3);
    let ops: Vec<String> = (0..n).map(|_| fuzz_operand(rng, isa)).collect();
    if ops.is_empty() {
        m.to_string()
    } else {
        format!("{m} {}", ops.join(", "))
    }
}

/// Golden file contents: library names and (input, string operands,
/// expected rendering) cases.
pub struct Golden {
    pub isa: Isa,
    pub dict: BTreeSet<String>,
    pub cases: Vec<(String, Vec<usize>, String)>,
}

pub fn load_golden(name: &str) -> Golden {
    let text = std::fs::read_to_string(fixture(&format!("normalize/{name}.json"))).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let isa: Isa = v["isa"].as_str().unwrap().parse().unwrap();
    let dict = v["library_functions"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s.as_str().unwrap().to_string())
        .collect();
    let cases = v["cases"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| {
            let marks = c
                .get("string_operands")
                .map(|m| {
                    m.as_array()
                        .unwrap()
                        .iter()
                        .map(|x| x.as_u64().unwrap() as usize)
                        .collect()
                })
                .unwrap_or_default();
            (
                c["input"].as_str().unwrap().to_string(),
                marks,
                c["expected"].as_str().unwrap().to_string(),
            )
        })
        .collect();
    Golden { isa, dict, cases }
}

pub const GOLDEN_ISAS: [&str; 4] = ["x86", "x86_64", "arm32", "aarch64"];

pub fn count_by<T: Ord + Clone>(items: impl IntoIterator<Item = T>) -> BTreeMap<T, usize> {
    let mut m = BTreeMap::new();
    for i in items {
        *m.entry(i).or_insert(0) += 1;
    }
    m
}

/// Parses, sanitizes and annotates a fixture dump from its annotation file.
pub fn annotated_fixture(dump: &str, annotations: &str) -> blockpair::ingest::ProgramDump {
    use blockpair::ingest::{parse_dump, sanitize};
    use blockpair::linemap::{annotate_blocks, resolve_addresses, Resolver};
    let d = sanitize(&parse_dump(fixture(dump)).unwrap());
    let cache = resolve_addresses(
        &Resolver::AnnotationFile(fixture(annotations)),
        &d.config.binary_path,
        &d.instruction_addresses(),
    )
    .unwrap();
    annotate_blocks(&d, &cache).unwrap()
}

pub fn unlzw(opt: &str) -> blockpair::ingest::ProgramDump {
    annotated_fixture(
        &format!("unlzw/gzip-aarch64-gcc-{opt}.dump.json"),
        &format!("unlzw/gzip-aarch64-gcc-{opt}.annotations.json"),
    )
}

pub const TERNARY_RUN: &str = "ternary__x86_64-gcc-O0__x86_64-gcc-O3";
pub const RUN_FILES: [&str; 3] = ["pairs.jsonl", "stats.json", "unmatched.json"];

/// Runs the committed ternary manifest with its output redirected to `out`.
pub fn run_ternary(out: &Path) -> blockpair::pipeline::RunReport {
    let mut m = blockpair::pipeline::RunManifest::load(fixture("ternary/manifest.json")).unwrap();
    m.out = out.to_path_buf();
    blockpair::pipeline::run(&m).unwrap()
}
