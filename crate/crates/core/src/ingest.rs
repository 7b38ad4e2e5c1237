//! Disassembler-neutral program dump model.
//!
//! A dump is one binary's disassembly export: its build coordinate, its
//! functions with their basic blocks and instructions, and the names of
//! functions the disassembler identified as third-party library code.
//! Dumps are exchanged as JSON; [`parse_dump`] validates every structural
//! invariant before handing back a [`ProgramDump`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linemap::LabelSet;

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("cannot read dump {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("function `{function}` has overlapping blocks at {first:#x} and {second:#x}")]
    Overlap { function: String, first: u64, second: u64 },
    #[error("duplicate function symbol `{0}`")]
    DuplicateSymbol(String),
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> DumpError {
    DumpError::Schema {
        path: path.into(),
        message: message.into(),
    }
}

#[derive(Debug, Error)]
#[error("unknown {kind} `{value}`")]
pub struct UnknownVariant {
    pub kind: &'static str,
    pub value: String,
}

macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident, $kind:literal, { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = UnknownVariant;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(UnknownVariant { kind: $kind, value: s.to_string() }),
                }
            }
        }

        impl Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(self.as_str())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

string_enum!(
    /// Instruction set architecture of a build.
    Isa, "isa", {
        X86 => "x86",
        X86_64 => "x86_64",
        Arm32 => "arm32",
        Aarch64 => "aarch64",
    }
);

string_enum!(Compiler, "compiler", {
    Gcc => "gcc",
    Clang => "clang",
});

string_enum!(OptLevel, "optimization level", {
    O0 => "O0",
    O1 => "O1",
    O2 => "O2",
    O3 => "O3",
});

/// One coordinate of the build matrix.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BuildConfig {
    pub isa: Isa,
    pub compiler: Compiler,
    pub opt_level: OptLevel,
    pub program_name: String,
    pub binary_path: String,
}

impl BuildConfig {
    /// `<isa>-<compiler>-<opt>`, e.g. `x86_64-gcc-O0`. Identifies the
    /// build coordinate independently of the program.
    pub fn key(&self) -> String {
        format!("{}-{}-{}", self.isa, self.compiler, self.opt_level)
    }

    pub fn coordinate(&self) -> (Isa, Compiler, OptLevel) {
        (self.isa, self.compiler, self.opt_level)
    }
}

impl fmt::Display for BuildConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.program_name, self.key())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instruction {
    pub address: u64,
    pub mnemonic: String,
    pub operands: Vec<String>,
    pub raw_text: String,
    /// Indices into `operands` that the exporter marked as referring to a
    /// string literal.
    pub string_operands: Vec<usize>,
}

impl Instruction {
    /// Builds an instruction from assembler text such as `mov eax, 0x5`.
    /// Operands are split at top-level commas; commas nested inside
    /// brackets or braces stay with their operand.
    pub fn from_text(address: u64, text: &str) -> Option<Instruction> {
        let text = text.trim();
        let (mnemonic, rest) = match text.find(char::is_whitespace) {
            Some(i) => (&text[..i], text[i..].trim()),
            None => (text, ""),
        };
        if mnemonic.is_empty() {
            return None;
        }
        Some(Instruction {
            address,
            mnemonic: mnemonic.to_string(),
            operands: split_operands(rest),
            raw_text: text.to_string(),
            string_operands: Vec::new(),
        })
    }
}

/// Splits an operand string at commas that are not nested in `[]`, `{}` or `()`.
pub fn split_operands(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut current = String::new();
    for c in text.chars() {
        match c {
            '[' | '{' | '(' => depth += 1,
            ']' | '}' | ')' => depth -= 1,
            _ => {}
        }
        if c == ',' && depth <= 0 {
            let piece = current.trim();
            if !piece.is_empty() {
                out.push(piece.to_string());
            }
            current.clear();
        } else {
            current.push(c);
        }
    }
    let piece = current.trim();
    if !piece.is_empty() {
        out.push(piece.to_string());
    }
    out
}

/// Original block identity: the start address the disassembler reported.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockId(pub u64);

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

impl Serialize for BlockId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BasicBlock {
    pub id: BlockId,
    pub start_address: u64,
    /// Exclusive end address when the exporter reported one.
    pub end_address: Option<u64>,
    pub instructions: Vec<Instruction>,
    pub labels: LabelSet,
    pub merged_from: Vec<BlockId>,
}

impl BasicBlock {
    /// A fresh, unannotated block. `instructions` must be non-empty and
    /// sorted by address.
    pub fn new(instructions: Vec<Instruction>) -> BasicBlock {
        let start = instructions
            .first()
            .map(|i| i.address)
            .expect("basic block needs at least one instruction");
        BasicBlock {
            id: BlockId(start),
            start_address: start,
            end_address: None,
            instructions,
            labels: LabelSet::default(),
            merged_from: vec![BlockId(start)],
        }
    }

    pub fn with_labels(mut self, labels: LabelSet) -> BasicBlock {
        self.labels = labels;
        self
    }

    pub fn last_address(&self) -> u64 {
        self.instructions.last().map_or(self.start_address, |i| i.address)
    }

    /// Half-open address range used for overlap checks.
    pub fn range_end(&self) -> u64 {
        self.end_address
            .unwrap_or_else(|| self.last_address().saturating_add(1))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FunctionRecord {
    pub name: String,
    pub entry_address: u64,
    pub blocks: Vec<BasicBlock>,
    pub is_external: bool,
    pub is_library: bool,
}

impl FunctionRecord {
    pub fn instruction_count(&self) -> usize {
        self.blocks.iter().map(|b| b.instructions.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProgramDump {
    pub config: BuildConfig,
    pub functions: Vec<FunctionRecord>,
    pub library_dictionary: BTreeSet<String>,
}

impl ProgramDump {
    pub fn block_count(&self) -> usize {
        self.functions.iter().map(|f| f.blocks.len()).sum()
    }

    pub fn instruction_count(&self) -> usize {
        self.functions.iter().map(FunctionRecord::instruction_count).sum()
    }

    pub fn function(&self, name: &str) -> Option<&FunctionRecord> {
        self.functions.iter().find(|f| f.name == name)
    }

    /// Every instruction address in the dump, ascending and deduplicated.
    pub fn instruction_addresses(&self) -> Vec<u64> {
        let set: BTreeSet<u64> = self
            .functions
            .iter()
            .flat_map(|f| f.blocks.iter())
            .flat_map(|b| b.instructions.iter().map(|i| i.address))
            .collect();
        set.into_iter().collect()
    }

    /// Serializes back to the exchange schema. Labels and merge provenance
    /// are not part of the schema and are dropped.
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(&RawDump::from(self)).expect("dump serialization cannot fail");
        text.push('\n');
        text
    }
}

// ---------------------------------------------------------------------------
// Exchange schema

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDump {
    config: RawConfig,
    library_functions: Vec<String>,
    functions: Vec<RawFunction>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    isa: String,
    compiler: String,
    opt_level: String,
    program: String,
    binary_path: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFunction {
    name: String,
    entry: String,
    external: bool,
    library: bool,
    blocks: Vec<RawBlock>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBlock {
    start: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    end: Option<String>,
    instructions: Vec<RawInstruction>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInstruction {
    addr: String,
    mnemonic: String,
    operands: Vec<String>,
    raw: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    string_operands: Vec<usize>,
}

/// Formats an address the way the schema requires: lowercase, `0x`-prefixed,
/// no leading zeros.
pub fn format_hex(value: u64) -> String {
    format!("{value:#x}")
}

/// Parses a schema hex string, rejecting uppercase digits and leading zeros.
pub fn parse_hex(text: &str) -> Result<u64, String> {
    let digits = text
        .strip_prefix("0x")
        .ok_or_else(|| format!("`{text}` is not 0x-prefixed"))?;
    if digits.is_empty() {
        return Err(format!("`{text}` has no digits"));
    }
    if !digits.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
        return Err(format!("`{text}` is not lowercase hex"));
    }
    if digits.len() > 1 && digits.starts_with('0') {
        return Err(format!("`{text}` has leading zeros"));
    }
    u64::from_str_radix(digits, 16).map_err(|_| format!("`{text}` does not fit in 64 bits"))
}

fn hex_at(text: &str, path: &str) -> Result<u64, DumpError> {
    parse_hex(text).map_err(|m| schema(path, m))
}

impl From<&ProgramDump> for RawDump {
    fn from(dump: &ProgramDump) -> Self {
        RawDump {
            config: RawConfig {
                isa: dump.config.isa.to_string(),
                compiler: dump.config.compiler.to_string(),
                opt_level: dump.config.opt_level.to_string(),
                program: dump.config.program_name.clone(),
                binary_path: dump.config.binary_path.clone(),
            },
            library_functions: dump.library_dictionary.iter().cloned().collect(),
            functions: dump
                .functions
                .iter()
                .map(|f| RawFunction {
                    name: f.name.clone(),
                    entry: format_hex(f.entry_address),
                    external: f.is_external,
                    library: f.is_library,
                    blocks: f
                        .blocks
                        .iter()
                        .map(|b| RawBlock {
                            start: format_hex(b.start_address),
                            end: b.end_address.map(format_hex),
                            instructions: b
                                .instructions
                                .iter()
                                .map(|i| RawInstruction {
                                    addr: format_hex(i.address),
                                    mnemonic: i.mnemonic.clone(),
                                    operands: i.operands.clone(),
                                    raw: i.raw_text.clone(),
                                    string_operands: i.string_operands.clone(),
                                })
                                .collect(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

pub fn parse_dump(path: impl AsRef<Path>) -> Result<ProgramDump, DumpError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DumpError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_dump_str(&text)
}

pub fn parse_dump_str(text: &str) -> Result<ProgramDump, DumpError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let raw: RawDump = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        schema(path, e.into_inner().to_string())
    })?;
    validate(raw)
}

fn validate(raw: RawDump) -> Result<ProgramDump, DumpError> {
    let c = raw.config;
    let config = BuildConfig {
        isa: c
            .isa
            .parse()
            .map_err(|e: UnknownVariant| schema("config.isa", e.to_string()))?,
        compiler: c
            .compiler
            .parse()
            .map_err(|e: UnknownVariant| schema("config.compiler", e.to_string()))?,
        opt_level: c
            .opt_level
            .parse()
            .map_err(|e: UnknownVariant| schema("config.opt_level", e.to_string()))?,
        program_name: c.program,
        binary_path: c.binary_path,
    };
    if config.program_name.is_empty() {
        return Err(schema("config.program", "program name is empty"));
    }

    let library_dictionary: BTreeSet<String> = raw.library_functions.into_iter().collect();
    let mut seen = BTreeMap::new();
    let mut functions = Vec::with_capacity(raw.functions.len());

    for (fi, rf) in raw.functions.into_iter().enumerate() {
        let fpath = format!("functions[{fi}]");
        if rf.name.is_empty() {
            return Err(schema(format!("{fpath}.name"), "function name is empty"));
        }
        if seen.insert(rf.name.clone(), fi).is_some() {
            return Err(DumpError::DuplicateSymbol(rf.name));
        }
        let entry_address = hex_at(&rf.entry, &format!("{fpath}.entry"))?;
        if rf.external && !rf.blocks.is_empty() {
            return Err(schema(
                format!("{fpath}.blocks"),
                format!("external function `{}` must not have blocks", rf.name),
            ));
        }
        if rf.library && !library_dictionary.contains(&rf.name) {
            return Err(schema(
                format!("{fpath}.library"),
                format!("library function `{}` missing from library_functions", rf.name),
            ));
        }

        let mut blocks = Vec::with_capacity(rf.blocks.len());
        for (bi, rb) in rf.blocks.into_iter().enumerate() {
            blocks.push(validate_block(rb, &format!("{fpath}.blocks[{bi}]"))?);
        }
        check_overlap(&rf.name, &blocks)?;

        functions.push(FunctionRecord {
            name: rf.name,
            entry_address,
            blocks,
            is_external: rf.external,
            is_library: rf.library,
        });
    }

    Ok(ProgramDump {
        config,
        functions,
        library_dictionary,
    })
}

fn validate_block(rb: RawBlock, bpath: &str) -> Result<BasicBlock, DumpError> {
    let start = hex_at(&rb.start, &format!("{bpath}.start"))?;
    if rb.instructions.is_empty() {
        return Err(schema(format!("{bpath}.instructions"), "block has no instructions"));
    }
    let mut instructions = Vec::with_capacity(rb.instructions.len());
    for (ii, ri) in rb.instructions.into_iter().enumerate() {
        let ipath = format!("{bpath}.instructions[{ii}]");
        let address = hex_at(&ri.addr, &format!("{ipath}.addr"))?;
        if ri.mnemonic.trim().is_empty() {
            return Err(schema(format!("{ipath}.mnemonic"), "mnemonic is empty"));
        }
        if let Some(prev) = instructions.last().map(|i: &Instruction| i.address) {
            if address <= prev {
                return Err(schema(
                    format!("{ipath}.addr"),
                    format!("address {address:#x} does not increase past {prev:#x}"),
                ));
            }
        }
        if let Some(&bad) = ri.string_operands.iter().find(|&&k| k >= ri.operands.len()) {
            return Err(schema(
                format!("{ipath}.string_operands"),
                format!("operand index {bad} out of range"),
            ));
        }
        instructions.push(Instruction {
            address,
            mnemonic: ri.mnemonic,
            operands: ri.operands,
            raw_text: ri.raw,
            string_operands: ri.string_operands,
        });
    }
    if instructions[0].address != start {
        return Err(schema(
            format!("{bpath}.start"),
            format!(
                "start {start:#x} differs from first instruction {:#x}",
                instructions[0].address
            ),
        ));
    }
    let mut block = BasicBlock::new(instructions);
    if let Some(end) = rb.end {
        let end = hex_at(&end, &format!("{bpath}.end"))?;
        if end <= block.last_address() {
            return Err(schema(
                format!("{bpath}.end"),
                format!("end {end:#x} does not cover the last instruction"),
            ));
        }
        block.end_address = Some(end);
    }
    Ok(block)
}

fn check_overlap(function: &str, blocks: &[BasicBlock]) -> Result<(), DumpError> {
    let mut ranges: Vec<(u64, u64)> = blocks.iter().map(|b| (b.start_address, b.range_end())).collect();
    ranges.sort_unstable();
    for w in ranges.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(DumpError::Overlap {
                function: function.to_string(),
                first: w[0].0,
                second: w[1].0,
            });
        }
    }
    Ok(())
}

/// Drops external functions (import stubs without bodies). The library
/// dictionary is left untouched so their names stay available to call
/// normalization.
pub fn sanitize(dump: &ProgramDump) -> ProgramDump {
    ProgramDump {
        config: dump.config.clone(),
        functions: dump.functions.iter().filter(|f| !f.is_external).cloned().collect(),
        library_dictionary: dump.library_dictionary.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal(extra_functions: &str) -> String {
        format!(
            r#"{{
  "config": {{"isa": "x86_64", "compiler": "gcc", "opt_level": "O0", "program": "t", "binary_path": "t.elf"}},
  "library_functions": ["printf"],
  "functions": [
    {{"name": "main", "entry": "0x10", "external": false, "library": false,
      "blocks": [{{"start": "0x10", "instructions": [{{"addr": "0x10", "mnemonic": "ret", "operands": [], "raw": "ret"}}]}}]}}
    {extra_functions}
  ]
}}"#
        )
    }

    #[test]
    fn minimal_dump_counts() {
        let d = parse_dump_str(&minimal("")).unwrap();
        assert_eq!(d.functions.len(), 1);
        assert_eq!(d.block_count(), 1);
        assert_eq!(d.instruction_count(), 1);
        assert_eq!(d.config.key(), "x86_64-gcc-O0");
        let b = &d.functions[0].blocks[0];
        assert_eq!(b.merged_from, vec![b.id]);
        assert!(b.labels.is_empty());
    }

    #[test]
    fn overlapping_blocks_rejected() {
        let f = r#", {"name": "f", "entry": "0x10", "external": false, "library": false, "blocks": [
            {"start": "0x10", "end": "0x20", "instructions": [{"addr": "0x10", "mnemonic": "nop", "operands": [], "raw": "nop"}]},
            {"start": "0x18", "end": "0x30", "instructions": [{"addr": "0x18", "mnemonic": "nop", "operands": [], "raw": "nop"}]}
        ]}"#;
        match parse_dump_str(&minimal(f)) {
            Err(DumpError::Overlap {
                function,
                first,
                second,
            }) => {
                assert_eq!(function, "f");
                assert_eq!((first, second), (0x10, 0x18));
            }
            other => panic!("expected overlap, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_symbol_rejected() {
        let f = r#", {"name": "main", "entry": "0x40", "external": true, "library": false, "blocks": []}"#;
        assert!(matches!(
            parse_dump_str(&minimal(f)),
            Err(DumpError::DuplicateSymbol(n)) if n == "main"
        ));
    }

    #[test]
    fn schema_errors_carry_paths() {
        let bad = minimal("").replace(r#""addr": "0x10""#, r#""addr": "0x010""#);
        let err = parse_dump_str(&bad).unwrap_err();
        assert!(
            err.to_string().contains("functions[0].blocks[0].instructions[0].addr"),
            "{err}"
        );

        let bad = minimal("").replace(r#""mnemonic": "ret""#, r#""mnemonic": 7"#);
        let err = parse_dump_str(&bad).unwrap_err();
        assert!(
            err.to_string()
                .contains("functions[0].blocks[0].instructions[0].mnemonic"),
            "{err}"
        );

        let bad = minimal("").replace(r#""opt_level": "O0""#, r#""opt_level": "O4""#);
        assert!(parse_dump_str(&bad)
            .unwrap_err()
            .to_string()
            .contains("config.opt_level"));
    }

    #[test]
    fn hex_format_rules() {
        assert_eq!(parse_hex("0x0"), Ok(0));
        assert_eq!(parse_hex("0x401136"), Ok(0x401136));
        assert!(parse_hex("0x00").is_err());
        assert!(parse_hex("0xABC").is_err());
        assert!(parse_hex("401136").is_err());
        assert!(parse_hex("0x").is_err());
        assert!(parse_hex("0x10000000000000000").is_err());
        assert_eq!(format_hex(0x401136), "0x401136");
    }

    #[test]
    fn split_operands_respects_brackets() {
        assert_eq!(
            split_operands("DWORD PTR [rbp+rax*4-0x10], edi"),
            vec!["DWORD PTR [rbp+rax*4-0x10]", "edi"]
        );
        assert_eq!(split_operands("{r4, lr}"), vec!["{r4, lr}"]);
        assert_eq!(split_operands("r3, [r3, #4]!"), vec!["r3", "[r3, #4]!"]);
        assert!(split_operands("").is_empty());
    }

    #[test]
    fn sanitize_keeps_dictionary() {
        let f = r#", {"name": "printf@plt", "entry": "0x40", "external": true, "library": false, "blocks": []}"#;
        let d = parse_dump_str(&minimal(f)).unwrap();
        let s = sanitize(&d);
        assert_eq!(s.functions.len(), 1);
        assert!(s.library_dictionary.contains("printf"));
        assert_eq!(d.functions.len(), 2, "input untouched");
        assert_eq!(sanitize(&s), s);
    }
}
