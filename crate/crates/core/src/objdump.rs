//! Dump export from GNU objdump output.
//!
//! `objdump -d` gives a linear listing per symbol. Functions in `.text`
//! become internal functions split into basic blocks; PLT stubs become
//! external library functions whose names form the library dictionary.
//! Block leaders are the entry, every in-function branch target and every
//! instruction following a branch or return.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::Command;

use thiserror::Error;

use crate::ingest::{
    parse_dump_str, BasicBlock, BuildConfig, DumpError, FunctionRecord, Instruction, Isa, ProgramDump,
};
use crate::normalize::{instruction_kind, InstructionKind};

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("cannot run `{tool}`: {source}")]
    Spawn {
        tool: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("`{tool}` failed: {stderr}")]
    Failed { tool: PathBuf, stderr: String },
    #[error("exported dump is invalid: {0}")]
    Dump(#[from] DumpError),
}

/// GNU triple used for cross tools.
pub fn triple(isa: Isa) -> &'static str {
    match isa {
        Isa::X86 => "i686-linux-gnu",
        Isa::X86_64 => "x86_64-linux-gnu",
        Isa::Arm32 => "arm-linux-gnueabihf",
        Isa::Aarch64 => "aarch64-linux-gnu",
    }
}

pub fn host_isa() -> Option<Isa> {
    match std::env::consts::ARCH {
        "x86_64" => Some(Isa::X86_64),
        "x86" => Some(Isa::X86),
        "arm" => Some(Isa::Arm32),
        "aarch64" => Some(Isa::Aarch64),
        _ => None,
    }
}

/// The objdump able to read binaries of `isa` on this host.
pub fn objdump_for(isa: Isa) -> String {
    // the host objdump reads both x86 flavours
    let native = match host_isa() {
        Some(Isa::X86_64) | Some(Isa::X86) => matches!(isa, Isa::X86 | Isa::X86_64),
        h => h == Some(isa),
    };
    if native {
        "objdump".to_string()
    } else {
        format!("{}-objdump", triple(isa))
    }
}

fn run(tool: &Path, args: &[&str], binary: &Path) -> Result<String, ExportError> {
    let out = Command::new(tool)
        .args(args)
        .arg(binary)
        .output()
        .map_err(|source| ExportError::Spawn {
            tool: tool.to_path_buf(),
            source,
        })?;
    if !out.status.success() {
        return Err(ExportError::Failed {
            tool: tool.to_path_buf(),
            stderr: String::from_utf8_lossy(&out.stderr).trim().to_string(),
        });
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

/// Disassembles `config.binary_path` and returns a validated dump.
pub fn export_binary(objdump: &Path, config: BuildConfig) -> Result<ProgramDump, ExportError> {
    let binary = PathBuf::from(&config.binary_path);
    let mut args = vec!["-d", "--no-show-raw-insn", "-w"];
    if matches!(config.isa, Isa::X86 | Isa::X86_64) {
        args.extend(["-M", "intel"]);
    }
    let listing = run(objdump, &args, &binary)?;
    // a binary without .rodata makes objdump warn and exit non-zero
    let rodata = run(objdump, &["-s", "-j", ".rodata"], &binary).unwrap_or_default();
    let dump = parse_listing(&listing, &rodata, config);
    // round-trip through the schema so every exported dump is one the
    // ingest stage accepts
    Ok(parse_dump_str(&dump.to_json())?)
}

struct Symbol {
    name: String,
    section: String,
    lines: Vec<(u64, String)>,
}

fn symbol_header(line: &str) -> Option<(u64, String)> {
    let (addr, rest) = line.split_once(' ')?;
    let name = rest.strip_prefix('<')?.strip_suffix(">:")?;
    Some((u64::from_str_radix(addr, 16).ok()?, name.to_string()))
}

fn instruction_line(line: &str) -> Option<(u64, String)> {
    let (addr, text) = line.trim_start().split_once(":\t")?;
    let addr = u64::from_str_radix(addr, 16).ok()?;
    let text = text.trim();
    if text.is_empty() || text == "(bad)" || text.starts_with("...") {
        return None;
    }
    Some((addr, text.to_string()))
}

fn symbols(listing: &str) -> Vec<Symbol> {
    let mut out: Vec<Symbol> = Vec::new();
    let mut section = String::new();
    for line in listing.lines() {
        if let Some(s) = line.strip_prefix("Disassembly of section ") {
            section = s.trim_end_matches(':').to_string();
        } else if let Some((_, name)) = symbol_header(line) {
            out.push(Symbol {
                name,
                section: section.clone(),
                lines: Vec::new(),
            });
        } else if let (Some(sym), Some(ins)) = (out.last_mut(), instruction_line(line)) {
            sym.lines.push(ins);
        }
    }
    out
}

/// `.rodata` bytes from `objdump -s -j .rodata`.
fn rodata_bytes(text: &str) -> BTreeMap<u64, u8> {
    let mut out = BTreeMap::new();
    for line in text.lines() {
        let Some(line) = line.strip_prefix(' ') else { continue };
        let Some((addr, rest)) = line.split_once(' ') else {
            continue;
        };
        let Ok(addr) = u64::from_str_radix(addr, 16) else {
            continue;
        };
        // four 8-digit groups, then the ASCII column
        let hex: String = rest.chars().take(35).filter(|c| !c.is_whitespace()).collect();
        if !hex.len().is_multiple_of(2) || !hex.bytes().all(|b| b.is_ascii_hexdigit()) {
            continue;
        }
        for (k, pair) in hex.as_bytes().chunks(2).enumerate() {
            let byte = u8::from_str_radix(std::str::from_utf8(pair).unwrap_or("00"), 16).unwrap_or(0);
            out.insert(addr + k as u64, byte);
        }
    }
    out
}

fn is_string_at(rodata: &BTreeMap<u64, u8>, addr: u64) -> bool {
    let mut len = 0;
    let mut a = addr;
    while let Some(&b) = rodata.get(&a) {
        if b == 0 {
            return len >= 2;
        }
        if !(b.is_ascii_graphic() || b == b' ' || b == b'\t' || b == b'\n' || b == b'\r') {
            return false;
        }
        len += 1;
        a += 1;
    }
    false
}

const DROPPED_PREFIXES: [&str; 2] = ["bnd", "notrack"];
const KEPT_PREFIXES: [&str; 8] = ["rep", "repz", "repe", "repnz", "repne", "lock", "data16", "addr32"];

/// Splits objdump text into an instruction, separating the trailing `#`
/// comment (whose leading hex number is the referenced address).
fn decode(addr: u64, text: &str, isa: Isa, rodata: &BTreeMap<u64, u8>) -> Option<Instruction> {
    let x86 = matches!(isa, Isa::X86 | Isa::X86_64);
    let (body, comment) = match (x86, text.find('#')) {
        (true, Some(i)) => (text[..i].trim(), Some(text[i + 1..].trim())),
        _ => (text, None),
    };
    let mut words: Vec<&str> = body.split_whitespace().collect();
    while words.len() > 1 && DROPPED_PREFIXES.contains(&words[0]) {
        words.remove(0);
    }
    let mut mnemonic = Vec::new();
    while words.len() > 1 && KEPT_PREFIXES.contains(&words[0]) {
        mnemonic.push(words.remove(0));
    }
    let head = *words.first()?;
    mnemonic.push(head);
    let operand_text = words[1..].join(" ");
    let mut ins = Instruction::from_text(addr, &format!("x {operand_text}"))?;
    ins.mnemonic = mnemonic.join(" ");
    ins.raw_text = text.split_whitespace().collect::<Vec<_>>().join(" ");
    if let Some(target) = comment
        .and_then(|c| c.split_whitespace().next())
        .and_then(|h| u64::from_str_radix(h, 16).ok())
    {
        if is_string_at(rodata, target) {
            ins.string_operands = ins
                .operands
                .iter()
                .enumerate()
                .filter(|(_, o)| o.contains("rip") || o.contains("eip"))
                .map(|(k, _)| k)
                .collect();
        }
    }
    Some(ins)
}

fn branch_target(ins: &Instruction) -> Option<u64> {
    let first = ins.operands.first()?.split_whitespace().next()?;
    let hex = first.strip_prefix("0x").unwrap_or(first);
    u64::from_str_radix(hex, 16).ok()
}

fn split_blocks(instructions: Vec<Instruction>, isa: Isa) -> Vec<BasicBlock> {
    let Some(first) = instructions.first() else {
        return Vec::new();
    };
    let start = first.address;
    let end = instructions.last().map_or(start, |i| i.address + 1);
    let mut leaders: BTreeSet<u64> = BTreeSet::from([start]);
    for (k, ins) in instructions.iter().enumerate() {
        match instruction_kind(isa, &ins.mnemonic) {
            InstructionKind::Branch => {
                if let Some(t) = branch_target(ins).filter(|t| (start..end).contains(t)) {
                    leaders.insert(t);
                }
                if let Some(next) = instructions.get(k + 1) {
                    leaders.insert(next.address);
                }
            }
            InstructionKind::Return => {
                if let Some(next) = instructions.get(k + 1) {
                    leaders.insert(next.address);
                }
            }
            _ => {}
        }
    }
    let mut blocks: Vec<Vec<Instruction>> = Vec::new();
    for ins in instructions {
        if leaders.contains(&ins.address) || blocks.is_empty() {
            blocks.push(Vec::new());
        }
        blocks.last_mut().expect("pushed above").push(ins);
    }
    blocks.into_iter().map(BasicBlock::new).collect()
}

fn clean_import(name: &str) -> String {
    let name = name.strip_suffix("@plt").unwrap_or(name);
    crate::bpair::function_key(name).to_string()
}

/// Builds a dump from `objdump -d` and `objdump -s -j .rodata` text.
pub fn parse_listing(listing: &str, rodata: &str, config: BuildConfig) -> ProgramDump {
    let rodata = rodata_bytes(rodata);
    let mut functions = Vec::new();
    let mut dictionary = BTreeSet::new();
    let mut seen = BTreeSet::new();
    for sym in symbols(listing) {
        let Some(&(entry, _)) = sym.lines.first() else { continue };
        if sym.name.starts_with('.') {
            continue;
        }
        if sym.section.starts_with(".plt") {
            let name = clean_import(&sym.name);
            if seen.insert(name.clone()) {
                dictionary.insert(name.clone());
                functions.push(FunctionRecord {
                    name,
                    entry_address: entry,
                    blocks: Vec::new(),
                    is_external: true,
                    is_library: true,
                });
            }
        } else if sym.section == ".text" && seen.insert(sym.name.clone()) {
            let instructions: Vec<Instruction> = sym
                .lines
                .iter()
                .filter_map(|(a, t)| decode(*a, t, config.isa, &rodata))
                .collect();
            functions.push(FunctionRecord {
                name: sym.name,
                entry_address: entry,
                blocks: split_blocks(instructions, config.isa),
                is_external: false,
                is_library: false,
            });
        }
    }
    functions.sort_by_key(|f| f.entry_address);
    ProgramDump {
        config,
        functions,
        library_dictionary: dictionary,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{Compiler, OptLevel};

    const LISTING: &str = "\
t:     file format elf64-x86-64


Disassembly of section .plt:

0000000000001020 <.plt>:
    1020:\tpush   QWORD PTR [rip+0x2f82]        # 3fa8 <_GLOBAL_OFFSET_TABLE_+0x8>

Disassembly of section .plt.sec:

0000000000001080 <puts@plt>:
    1080:\tendbr64
    1084:\tbnd jmp QWORD PTR [rip+0x2f2d]        # 3fb8 <puts@GLIBC_2.2.5>

Disassembly of section .text:

00000000000010c0 <main>:
    10c0:\tendbr64
    10c4:\tcmp    edi,0x3
    10c7:\tjle    10d8 <main+0x18>
    10c9:\tlea    rdi,[rip+0xf34]        # 2004 <_IO_stdin_used+0x4>
    10d0:\tcall   1080 <puts@plt>
    10d5:\txor    eax,eax
    10d7:\tret
    10d8:\trep stos QWORD PTR es:[rdi],rax
    10db:\tbnd jmp 10c4 <main+0x4>
";

    const RODATA: &str = "
t:     file format elf64-x86-64

Contents of section .rodata:
 2000 01000200 68692025 640a00             ....hi %d..
";

    fn config() -> BuildConfig {
        BuildConfig {
            isa: Isa::X86_64,
            compiler: Compiler::Gcc,
            opt_level: OptLevel::O0,
            program_name: "t".into(),
            binary_path: "t".into(),
        }
    }

    #[test]
    fn listing_to_dump() {
        let dump = parse_listing(LISTING, RODATA, config());
        assert_eq!(dump.library_dictionary, BTreeSet::from(["puts".to_string()]));
        let names: Vec<&str> = dump.functions.iter().map(|f| f.name.as_str()).collect();
        assert_eq!(names, ["puts", "main"]);
        let main = dump.function("main").unwrap();
        let starts: Vec<u64> = main.blocks.iter().map(|b| b.start_address).collect();
        assert_eq!(starts, [0x10c0, 0x10c4, 0x10c9, 0x10d8]);
        let lea = &main.blocks[2].instructions[0];
        assert_eq!(lea.operands, ["rdi", "[rip+0xf34]"]);
        assert_eq!(lea.string_operands, [1]);
        let last = main.blocks[3].instructions.last().unwrap();
        assert_eq!(last.mnemonic, "jmp");
        assert_eq!(main.blocks[3].instructions[0].mnemonic, "rep stos");
        parse_dump_str(&dump.to_json()).unwrap();
    }

    #[test]
    fn rodata_strings() {
        let bytes = rodata_bytes(RODATA);
        assert!(is_string_at(&bytes, 0x2004));
        assert!(!is_string_at(&bytes, 0x2000));
    }
}
