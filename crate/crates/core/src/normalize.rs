//! Instruction normalization.
//!
//! Operands are tokenized (whitespace and commas separate, brackets and
//! arithmetic punctuation are kept as tokens) and rewritten:
//!
//! * numeric constants become `<POSITIVE>`, `<NEGATIVE>` or `<ZERO>` by the
//!   sign they were printed with;
//! * direct call targets become `<FOO>` unless the callee is in the library
//!   dictionary, in which case its bare name is kept;
//! * code addresses (branch targets, pc/rip-relative references, absolute
//!   memory operands, symbolic address annotations) become `<ADDRESS>`;
//! * operands the exporter marked as string references become `<STRING>`.
//!
//! Registers and mnemonics pass through unchanged.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use crate::ingest::{BasicBlock, Instruction, Isa};

pub const POSITIVE: &str = "<POSITIVE>";
pub const NEGATIVE: &str = "<NEGATIVE>";
pub const ZERO: &str = "<ZERO>";
pub const ADDRESS: &str = "<ADDRESS>";
pub const STRING: &str = "<STRING>";
pub const FOO: &str = "<FOO>";

pub const PLACEHOLDERS: [&str; 6] = [POSITIVE, NEGATIVE, ZERO, ADDRESS, STRING, FOO];

/// Separator token between instructions in a block rendering.
pub const INSTRUCTION_SEPARATOR: &str = ";";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NormalizeError {
    #[error("unknown ISA `{0}`")]
    UnknownIsa(String),
    #[error("empty instruction text")]
    EmptyInstruction,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NormalizedInstruction {
    pub tokens: Vec<String>,
}

impl fmt::Display for NormalizedInstruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tokens.join(" "))
    }
}

/// Control-flow role of a mnemonic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InstructionKind {
    Call,
    Branch,
    Return,
    Other,
}

const ARM_CONDITIONS: [&str; 17] = [
    "eq", "ne", "cs", "cc", "mi", "pl", "vs", "vc", "hi", "ls", "ge", "lt", "gt", "le", "al", "hs", "lo",
];

pub fn instruction_kind(isa: Isa, mnemonic: &str) -> InstructionKind {
    use InstructionKind::*;
    let last = mnemonic.split_whitespace().last().unwrap_or("").to_ascii_lowercase();
    let m = last.as_str();
    match isa {
        Isa::X86 | Isa::X86_64 => match m {
            "call" | "callq" | "calll" => Call,
            "ret" | "retq" | "retl" | "retn" | "hlt" | "ud2" => Return,
            _ if m.starts_with('j') || m.starts_with("loop") || m == "xbegin" => Branch,
            _ => Other,
        },
        Isa::Arm32 => {
            let m = m.trim_end_matches(".w").trim_end_matches(".n");
            let is_cond = |rest: &str| ARM_CONDITIONS.contains(&rest);
            match m {
                "bl" | "blx" => Call,
                _ if m.strip_prefix("blx").is_some_and(is_cond) => Call,
                _ if m.strip_prefix("bl").is_some_and(is_cond) && m.len() == 4 => Call,
                "bx" => Return,
                "b" | "cbz" | "cbnz" => Branch,
                _ if m.strip_prefix('b').is_some_and(is_cond) => Branch,
                _ if m.strip_prefix("bx").is_some_and(is_cond) => Return,
                _ => Other,
            }
        }
        Isa::Aarch64 => match m {
            "bl" => Call,
            "ret" | "eret" => Return,
            "b" | "br" | "cbz" | "cbnz" | "tbz" | "tbnz" => Branch,
            _ if m.starts_with("b.") || m.starts_with("bc.") => Branch,
            _ => Other,
        },
    }
}

fn is_x86_register(t: &str) -> bool {
    let t = t.to_ascii_lowercase();
    let t = t.as_str();
    const NAMED: [&str; 49] = [
        "rax", "rbx", "rcx", "rdx", "rsi", "rdi", "rbp", "rsp", "eax", "ebx", "ecx", "edx", "esi", "edi", "ebp", "esp",
        "ax", "bx", "cx", "dx", "si", "di", "bp", "sp", "al", "bl", "cl", "dl", "ah", "bh", "ch", "dh", "sil", "dil",
        "bpl", "spl", "rip", "eip", "ip", "cs", "ds", "es", "fs", "gs", "ss", "st", "rflags", "eflags", "mxcsr",
    ];
    if NAMED.contains(&t) {
        return true;
    }
    let numbered = |prefix: &str, max: u32| {
        t.strip_prefix(prefix)
            .and_then(|n| n.parse::<u32>().ok())
            .is_some_and(|n| n <= max)
    };
    if let Some(rest) = t.strip_prefix('r') {
        let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
        let suffix = &rest[digits.len()..];
        if let Ok(n) = digits.parse::<u32>() {
            if (8..=15).contains(&n) && ["", "d", "w", "b", "l"].contains(&suffix) {
                return true;
            }
        }
    }
    numbered("xmm", 31)
        || numbered("ymm", 31)
        || numbered("zmm", 31)
        || numbered("mm", 7)
        || numbered("k", 7)
        || numbered("cr", 15)
        || numbered("dr", 15)
        || numbered("bnd", 3)
        || (t.starts_with("st(") && t.ends_with(')'))
}

fn is_arm32_register(t: &str) -> bool {
    let t = t.to_ascii_lowercase();
    let t = t.as_str();
    const NAMED: [&str; 13] = [
        "sp",
        "lr",
        "pc",
        "ip",
        "fp",
        "sl",
        "sb",
        "apsr",
        "cpsr",
        "spsr",
        "fpscr",
        "apsr_nzcv",
        "fpexc",
    ];
    if NAMED.contains(&t) || t.starts_with("cpsr_") || t.starts_with("spsr_") {
        return true;
    }
    let numbered = |prefix: char, max: u32| {
        t.strip_prefix(prefix)
            .and_then(|n| n.parse::<u32>().ok())
            .is_some_and(|n| n <= max)
    };
    numbered('r', 15) || numbered('s', 31) || numbered('d', 31) || numbered('q', 15)
}

fn is_aarch64_register(t: &str) -> bool {
    let t = t.to_ascii_lowercase();
    let t = t.as_str();
    const NAMED: [&str; 10] = ["sp", "wsp", "xzr", "wzr", "lr", "fp", "pc", "nzcv", "fpcr", "fpsr"];
    if NAMED.contains(&t) {
        return true;
    }
    let base = t.split('.').next().unwrap_or(t);
    let numbered = |prefix: char, max: u32| {
        base.strip_prefix(prefix)
            .and_then(|n| n.parse::<u32>().ok())
            .is_some_and(|n| n <= max)
    };
    numbered('x', 30)
        || numbered('w', 30)
        || numbered('v', 31)
        || numbered('b', 31)
        || numbered('h', 31)
        || numbered('s', 31)
        || numbered('d', 31)
        || numbered('q', 31)
}

pub fn is_register(isa: Isa, token: &str) -> bool {
    if let Some(rest) = token.strip_prefix('%') {
        return !rest.is_empty();
    }
    match isa {
        Isa::X86 | Isa::X86_64 => is_x86_register(token),
        Isa::Arm32 => is_arm32_register(token),
        Isa::Aarch64 => is_aarch64_register(token),
    }
}

fn is_pc_register(isa: Isa, token: &str) -> bool {
    let t = token.trim_start_matches('%').to_ascii_lowercase();
    match isa {
        Isa::X86 | Isa::X86_64 => t == "rip" || t == "eip",
        Isa::Arm32 | Isa::Aarch64 => t == "pc",
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Sign {
    Negative,
    Zero,
    Positive,
}

impl Sign {
    fn placeholder(self) -> &'static str {
        match self {
            Sign::Negative => NEGATIVE,
            Sign::Zero => ZERO,
            Sign::Positive => POSITIVE,
        }
    }
}

/// Numeric literal forms: optional `#`/`$` immediate prefix, optional sign,
/// then `0x` hex, or decimal with optional fraction/exponent.
fn numeric_sign(token: &str) -> Option<Sign> {
    let body = token
        .strip_prefix('#')
        .or_else(|| token.strip_prefix('$'))
        .unwrap_or(token);
    let (negative, body) = match body.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, body.strip_prefix('+').unwrap_or(body)),
    };
    let zero = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        if hex.is_empty() || !hex.bytes().all(|b| b.is_ascii_hexdigit()) {
            return None;
        }
        hex.bytes().all(|b| b == b'0')
    } else {
        let (mantissa, exponent) = match body.find(['e', 'E']) {
            Some(i) => (&body[..i], Some(&body[i + 1..])),
            None => (body, None),
        };
        if let Some(exp) = exponent {
            let exp = exp.strip_prefix(['-', '+']).unwrap_or(exp);
            if exp.is_empty() || !exp.bytes().all(|b| b.is_ascii_digit()) {
                return None;
            }
        }
        let (int, frac) = match mantissa.split_once('.') {
            Some((i, f)) => (i, f),
            None => (mantissa, ""),
        };
        let frac_ok = !mantissa.contains('.') || !frac.is_empty();
        if int.is_empty()
            || !frac_ok
            || !int.bytes().all(|b| b.is_ascii_digit())
            || !frac.bytes().all(|b| b.is_ascii_digit())
        {
            return None;
        }
        int.bytes().chain(frac.bytes()).all(|b| b == b'0')
    };
    Some(if zero {
        Sign::Zero
    } else if negative {
        Sign::Negative
    } else {
        Sign::Positive
    })
}

/// True when `token` reads as a raw numeric literal.
pub fn is_raw_literal(token: &str) -> bool {
    numeric_sign(token).is_some()
}

fn has_immediate_prefix(token: &str) -> bool {
    token.starts_with('#') || token.starts_with('$')
}

/// Hex digits without a prefix, as objdump prints branch targets.
fn is_bare_hex(token: &str) -> bool {
    !token.is_empty() && token.bytes().all(|b| b.is_ascii_hexdigit()) && token.bytes().any(|b| b.is_ascii_digit())
}

fn is_placeholder(token: &str) -> bool {
    PLACEHOLDERS.contains(&token)
}

/// `<main+0x20>`-style symbolic annotations.
fn is_annotation(token: &str) -> bool {
    token.len() > 2 && token.starts_with('<') && token.ends_with('>') && !is_placeholder(token)
}

/// Disassembler-generated address labels such as `LAB_00101234`.
fn is_auto_label(token: &str) -> bool {
    const PREFIXES: [&str; 9] = [
        "LAB_", "DAT_", "PTR_", "FUN_", "SUB_", "LOC_", "OFF_", "UNK_", "switchD_",
    ];
    PREFIXES.iter().any(|p| {
        token
            .strip_prefix(p)
            .is_some_and(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_'))
    })
}

fn is_punct(token: &str) -> bool {
    matches!(
        token,
        "[" | "]" | "{" | "}" | "(" | ")" | "!" | "+" | "-" | "*" | ":" | "^"
    )
}

fn strip_comment(isa: Isa, operand: &str) -> &str {
    let mut cut = operand.len();
    let bytes = operand.as_bytes();
    let after_space = |i: usize| i == 0 || bytes[i - 1].is_ascii_whitespace();
    for (i, c) in operand.char_indices() {
        let hit = match isa {
            Isa::X86 | Isa::X86_64 => c == '#' || c == ';',
            Isa::Arm32 => (c == '@' && after_space(i)) || c == ';',
            Isa::Aarch64 => c == ';' || (c == '/' && operand[i..].starts_with("//")),
        };
        if hit {
            cut = i;
            break;
        }
    }
    operand[..cut].trim_end()
}

/// `1.5e` or `#2E`: a decimal mantissa waiting for its exponent sign.
fn exponent_pending(word: &str) -> bool {
    let w = word.trim_start_matches(['#', '$']).trim_start_matches('-');
    let Some(m) = w.strip_suffix(['e', 'E']) else {
        return false;
    };
    let (int, frac) = m.split_once('.').unwrap_or((m, "0"));
    !int.is_empty() && int.bytes().all(|b| b.is_ascii_digit()) && frac.bytes().all(|b| b.is_ascii_digit())
}

/// Splits operand text into tokens. Whitespace and commas separate; brackets,
/// braces, parentheses, `!`, `+`, `*`, `:`, `^` and binary `-` are tokens of
/// their own; `<…>` is kept whole.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut current = String::new();
    let mut chars = text.chars().peekable();

    fn flush(current: &mut String, out: &mut Vec<String>) {
        if !current.is_empty() {
            out.push(std::mem::take(current));
        }
    }

    while let Some(c) = chars.next() {
        match c {
            c if c.is_whitespace() || c == ',' => flush(&mut current, &mut out),
            '<' if current.is_empty() => {
                let mut tok = String::from('<');
                let mut closed = false;
                for d in chars.by_ref() {
                    tok.push(d);
                    if d == '>' {
                        closed = true;
                        break;
                    }
                }
                if closed {
                    out.push(tok);
                } else {
                    current = tok;
                }
            }
            '-' | '+' if exponent_pending(&current) => current.push(c),
            '-' => {
                let prefix_only = current.is_empty() || current == "#" || current == "$";
                let unary = prefix_only
                    && (!current.is_empty() || out.last().is_none_or(|t| is_punct(t) && t != ")" && t != "]"));
                if unary {
                    current.push('-');
                } else {
                    flush(&mut current, &mut out);
                    out.push("-".to_string());
                }
            }
            '[' | ']' | '{' | '}' | '(' | ')' | '!' | '+' | '*' | ':' | '^' => {
                flush(&mut current, &mut out);
                out.push(c.to_string());
            }
            c => current.push(c),
        }
    }
    flush(&mut current, &mut out);

    // x87 stack registers print as st(N)
    let mut merged = Vec::with_capacity(out.len());
    let mut i = 0;
    while i < out.len() {
        if out[i].eq_ignore_ascii_case("st")
            && out.get(i + 1).is_some_and(|t| t == "(")
            && out
                .get(i + 2)
                .is_some_and(|t| t.len() == 1 && t.as_bytes()[0].is_ascii_digit())
            && out.get(i + 3).is_some_and(|t| t == ")")
        {
            merged.push(format!("{}({})", out[i], out[i + 2]));
            i += 4;
        } else {
            merged.push(std::mem::take(&mut out[i]));
            i += 1;
        }
    }
    merged
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum MemoryMode {
    /// Base/index-relative: constants are offsets.
    Displacement,
    /// pc/rip-relative or absolute: constants are addresses.
    Address,
}

struct Ctx<'a> {
    isa: Isa,
    kind: InstructionKind,
    dict: &'a BTreeSet<String>,
}

fn memory_mode(ctx: &Ctx, inner: &[String], before: &[String]) -> MemoryMode {
    let arm = matches!(ctx.isa, Isa::Arm32 | Isa::Aarch64);
    // AArch64 lane index: v0.s[1]
    if arm
        && before
            .last()
            .is_some_and(|t| is_register(ctx.isa, t) && t.contains('.'))
    {
        return MemoryMode::Displacement;
    }
    if inner.iter().any(|t| is_pc_register(ctx.isa, t)) {
        return MemoryMode::Address;
    }
    // x86 index-only forms such as [rax*8+0x402010] address a table
    let base = inner.iter().enumerate().any(|(k, t)| {
        is_register(ctx.isa, t)
            && (arm || (inner.get(k + 1).is_none_or(|n| n != "*") && (k == 0 || inner[k - 1] != "*")))
    });
    if base {
        return MemoryMode::Displacement;
    }
    // fs:/gs: segment offsets are thread-local slots, not code addresses
    let segment = before.len() >= 2
        && before[before.len() - 1] == ":"
        && ["fs", "gs", "%fs", "%gs"].contains(&before[before.len() - 2].to_ascii_lowercase().as_str());
    if segment {
        MemoryMode::Displacement
    } else {
        MemoryMode::Address
    }
}

fn rewrite_in_memory(token: &str, mode: MemoryMode, scale: bool) -> String {
    if is_placeholder(token) || is_punct(token) {
        token.to_string()
    } else if let Some(sign) = numeric_sign(token) {
        match mode {
            MemoryMode::Address if !scale => ADDRESS.to_string(),
            _ => sign.placeholder().to_string(),
        }
    } else if is_annotation(token) || is_auto_label(token) {
        ADDRESS.to_string()
    } else {
        token.to_string()
    }
}

fn matching_close(tokens: &[String], open: usize) -> usize {
    let (o, c) = if tokens[open] == "[" { ("[", "]") } else { ("(", ")") };
    let mut depth = 0;
    for (i, t) in tokens.iter().enumerate().skip(open) {
        if t == o {
            depth += 1;
        } else if t == c {
            depth -= 1;
            if depth == 0 {
                return i;
            }
        }
    }
    tokens.len()
}

fn rewrite_operand(ctx: &Ctx, tokens: &[String]) -> Vec<String> {
    let arm = matches!(ctx.isa, Isa::Arm32 | Isa::Aarch64);
    let mut out: Vec<String> = Vec::with_capacity(tokens.len());
    let mut last_was_address = false;
    let mut i = 0;
    while i < tokens.len() {
        let t = tokens[i].as_str();
        if t == "[" || t == "(" {
            let close = matching_close(tokens, i);
            let inner = &tokens[i + 1..close.min(tokens.len())];
            let mode = memory_mode(ctx, inner, &tokens[..i]);
            out.push(t.to_string());
            out.extend(
                inner
                    .iter()
                    .enumerate()
                    .map(|(k, x)| rewrite_in_memory(x, mode, k > 0 && inner[k - 1] == "*")),
            );
            if close < tokens.len() {
                out.push(tokens[close].clone());
            }
            last_was_address = false;
            i = close + 1;
            continue;
        }

        let replaced = if is_placeholder(t) || is_punct(t) || is_register(ctx.isa, t) {
            last_was_address = false;
            t.to_string()
        } else if is_annotation(t) {
            if last_was_address {
                // `401136 <main+0x20>` names the same target twice
                i += 1;
                continue;
            }
            last_was_address = true;
            ADDRESS.to_string()
        } else if let Some(sign) = numeric_sign(t) {
            let address = if arm {
                !has_immediate_prefix(t)
            } else {
                let rip_group = tokens.get(i + 1).is_some_and(|n| n == "(") && {
                    let close = matching_close(tokens, i + 1);
                    tokens[i + 2..close.min(tokens.len())]
                        .iter()
                        .any(|x| is_pc_register(ctx.isa, x))
                };
                // mov eax, ds:0x804a020
                let moffs = i >= 2
                    && tokens[i - 1] == ":"
                    && ["ds", "cs", "es", "ss"].contains(&tokens[i - 2].to_ascii_lowercase().as_str());
                (ctx.kind == InstructionKind::Branch && !has_immediate_prefix(t)) || rip_group || moffs
            };
            last_was_address = address;
            if address {
                ADDRESS.to_string()
            } else {
                sign.placeholder().to_string()
            }
        } else if is_auto_label(t)
            || (is_bare_hex(t)
                && (arm || ctx.kind == InstructionKind::Branch || tokens.get(i + 1).is_some_and(|n| is_annotation(n))))
        {
            last_was_address = true;
            ADDRESS.to_string()
        } else {
            last_was_address = false;
            t.to_string()
        };
        out.push(replaced);
        i += 1;
    }
    out
}

/// Callee name from a direct call operand, with `@plt`, symbol version and
/// `+offset` decorations removed. `None` for raw addresses.
fn call_target_name(tokens: &[String]) -> Option<String> {
    // Ghidra prints thunked imports as `<EXTERNAL>::name`
    let tokens = match tokens {
        [ext, a, b, rest @ ..] if ext == "<EXTERNAL>" && a == ":" && b == ":" => rest,
        _ => tokens,
    };
    let raw = tokens
        .iter()
        .find(|t| is_annotation(t))
        .map(|t| t[1..t.len() - 1].to_string())
        .or_else(|| {
            tokens
                .iter()
                .find(|t| !is_raw_literal(t) && !is_bare_hex(t) && !is_punct(t))
                .cloned()
        })?;
    let mut name = raw.as_str();
    if let Some(i) = name.rfind("::") {
        name = &name[i + 2..];
    }
    if let Some(i) = name.find('+') {
        name = &name[..i];
    }
    if let Some(i) = name.find('@') {
        name = &name[..i];
    }
    (!name.is_empty()).then(|| name.to_string())
}

fn is_direct_target(ctx: &Ctx, tokens: &[String]) -> bool {
    let core: Vec<&String> = tokens.iter().filter(|t| !is_annotation(t)).collect();
    !core.is_empty()
        && !core
            .iter()
            .any(|t| ["[", "(", "{", "*"].contains(&t.as_str()) || is_placeholder(t))
        && !is_register(ctx.isa, core[0])
}

fn rewrite_call_target(ctx: &Ctx, tokens: &[String]) -> String {
    match call_target_name(tokens) {
        Some(name) if ctx.dict.contains(&name) => name,
        _ => FOO.to_string(),
    }
}

pub fn normalize_instruction(ins: &Instruction, isa: Isa, dict: &BTreeSet<String>) -> NormalizedInstruction {
    let ctx = Ctx {
        isa,
        kind: instruction_kind(isa, &ins.mnemonic),
        dict,
    };
    let mut tokens: Vec<String> = ins.mnemonic.split_whitespace().map(str::to_string).collect();
    for (k, operand) in ins.operands.iter().enumerate() {
        if ins.string_operands.contains(&k) {
            tokens.push(STRING.to_string());
            continue;
        }
        let op_tokens = tokenize(strip_comment(isa, operand));
        if op_tokens.is_empty() {
            continue;
        }
        if ctx.kind == InstructionKind::Call && k == 0 && is_direct_target(&ctx, &op_tokens) {
            tokens.push(rewrite_call_target(&ctx, &op_tokens));
        } else {
            tokens.extend(rewrite_operand(&ctx, &op_tokens));
        }
    }
    NormalizedInstruction { tokens }
}

/// Normalizes assembler text (raw or an earlier normalized rendering).
pub fn normalize_text(text: &str, isa: Isa, dict: &BTreeSet<String>) -> Result<NormalizedInstruction, NormalizeError> {
    let ins = Instruction::from_text(0, text).ok_or(NormalizeError::EmptyInstruction)?;
    Ok(normalize_instruction(&ins, isa, dict))
}

/// Same as [`normalize_text`] with the ISA given by name.
pub fn normalize_text_for(
    text: &str,
    isa: &str,
    dict: &BTreeSet<String>,
) -> Result<NormalizedInstruction, NormalizeError> {
    let isa: Isa = isa.parse().map_err(|_| NormalizeError::UnknownIsa(isa.to_string()))?;
    normalize_text(text, isa, dict)
}

pub fn normalize_block(block: &BasicBlock, isa: Isa, dict: &BTreeSet<String>) -> Vec<NormalizedInstruction> {
    block
        .instructions
        .iter()
        .map(|i| normalize_instruction(i, isa, dict))
        .collect()
}

/// Flat block rendering: instructions joined by a `;` token.
pub fn render_block(instructions: &[NormalizedInstruction]) -> String {
    instructions
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(&format!(" {INSTRUCTION_SEPARATOR} "))
}
