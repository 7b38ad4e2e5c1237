//! Source-line ground truth.
//!
//! Every instruction address is resolved to the `(file, line)` pairs the
//! debug information attributes to it, and each basic block is labeled with
//! the union over its instructions. Resolution goes through an
//! addr2line-compatible executable or a pre-resolved annotation file.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{format_hex, parse_hex, ProgramDump};

#[derive(Debug, Error)]
pub enum LineMapError {
    #[error("cannot start resolver `{resolver}`: {source}")]
    ResolverSpawn {
        resolver: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unexpected resolver output: {0}")]
    ResolverProtocol(String),
    #[error("cannot read annotation file {path}: {message}")]
    AnnotationFile { path: PathBuf, message: String },
    #[error("address {address:#x} in function `{function}` is not covered by the annotation cache")]
    Coverage { function: String, address: u64 },
    #[error("invalid source line: {0}")]
    InvalidSourceLine(String),
}

/// A `(file, line)` label. Files use forward slashes and carry no build
/// directory prefix.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "(String, u32)", try_from = "(String, u32)")]
pub struct SourceLine {
    file: String,
    line: u32,
}

impl SourceLine {
    pub fn new(file: impl Into<String>, line: u32) -> Result<SourceLine, LineMapError> {
        let file = file.into();
        if file.is_empty() {
            return Err(LineMapError::InvalidSourceLine("empty file name".into()));
        }
        if file.contains('\\') {
            return Err(LineMapError::InvalidSourceLine(format!(
                "`{file}` contains a backslash"
            )));
        }
        if line == 0 {
            return Err(LineMapError::InvalidSourceLine(format!("{file}:0")));
        }
        Ok(SourceLine { file, line })
    }

    pub fn file(&self) -> &str {
        &self.file
    }

    pub fn line(&self) -> u32 {
        self.line
    }
}

impl fmt::Display for SourceLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.file, self.line)
    }
}

impl From<SourceLine> for (String, u32) {
    fn from(s: SourceLine) -> Self {
        (s.file, s.line)
    }
}

impl TryFrom<(String, u32)> for SourceLine {
    type Error = LineMapError;

    fn try_from((file, line): (String, u32)) -> Result<Self, Self::Error> {
        SourceLine::new(file, line)
    }
}

/// Set of source lines attributed to one block.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSet(BTreeSet<SourceLine>);

impl LabelSet {
    pub fn new() -> LabelSet {
        LabelSet::default()
    }

    pub fn insert(&mut self, line: SourceLine) -> bool {
        self.0.insert(line)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &SourceLine> {
        self.0.iter()
    }

    pub fn contains(&self, line: &SourceLine) -> bool {
        self.0.contains(line)
    }

    pub fn is_subset(&self, other: &LabelSet) -> bool {
        self.0.is_subset(&other.0)
    }

    pub fn is_strict_subset(&self, other: &LabelSet) -> bool {
        self.0.len() < other.0.len() && self.0.is_subset(&other.0)
    }

    pub fn intersects(&self, other: &LabelSet) -> bool {
        !self.0.is_disjoint(&other.0)
    }

    pub fn intersection(&self, other: &LabelSet) -> LabelSet {
        LabelSet(self.0.intersection(&other.0).cloned().collect())
    }

    pub fn union(&self, other: &LabelSet) -> LabelSet {
        LabelSet(self.0.union(&other.0).cloned().collect())
    }

    pub fn extend(&mut self, lines: impl IntoIterator<Item = SourceLine>) {
        self.0.extend(lines);
    }
}

impl FromIterator<SourceLine> for LabelSet {
    fn from_iter<I: IntoIterator<Item = SourceLine>>(iter: I) -> Self {
        LabelSet(iter.into_iter().collect())
    }
}

impl fmt::Display for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, l) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{l}")?;
        }
        f.write_str("}")
    }
}

/// Resolved addresses for one binary. An address that resolved to nothing
/// maps to an empty list; an address that was never resolved is absent.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AnnotationCache {
    pub binary_path: String,
    pub mapping: BTreeMap<u64, Vec<SourceLine>>,
}

impl AnnotationCache {
    pub fn get(&self, address: u64) -> Option<&[SourceLine]> {
        self.mapping.get(&address).map(Vec::as_slice)
    }

    /// Renders the cache in the annotation-file format.
    /// Annotation-file form, one address per line in address order.
    pub fn to_json(&self) -> String {
        let entries: Vec<String> = self
            .mapping
            .iter()
            .map(|(a, v)| {
                let lines = serde_json::to_string(v).expect("cache serialization cannot fail");
                format!("  \"{}\": {lines}", format_hex(*a))
            })
            .collect();
        if entries.is_empty() {
            "{}\n".to_string()
        } else {
            format!("{{\n{}\n}}\n", entries.join(",\n"))
        }
    }
}

/// Where source lines come from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Resolver {
    /// An addr2line-compatible executable, run once per binary.
    External(PathBuf),
    /// A JSON file mapping hex addresses to `[[file, line], ...]`.
    AnnotationFile(PathBuf),
}

impl Resolver {
    /// Parses the command-line form: `file:<path>` selects an annotation
    /// file, anything else names a resolver executable.
    pub fn from_flag(flag: &str) -> Resolver {
        match flag.strip_prefix("file:") {
            Some(path) => Resolver::AnnotationFile(PathBuf::from(path)),
            None => Resolver::External(PathBuf::from(flag)),
        }
    }
}

pub fn resolve_addresses(
    resolver: &Resolver,
    binary_path: &str,
    addresses: &[u64],
) -> Result<AnnotationCache, LineMapError> {
    let raw = match resolver {
        Resolver::External(exe) => run_resolver(exe, binary_path, addresses)?,
        Resolver::AnnotationFile(path) => {
            let all = read_annotation_file(path)?;
            addresses
                .iter()
                .filter_map(|a| all.get(a).map(|frames| (*a, frames.clone())))
                .collect()
        }
    };
    Ok(AnnotationCache {
        binary_path: binary_path.to_string(),
        mapping: normalize_paths(raw)?,
    })
}

type RawFrames = BTreeMap<u64, Vec<(String, u32)>>;

fn read_annotation_file(path: &Path) -> Result<RawFrames, LineMapError> {
    let err = |message: String| LineMapError::AnnotationFile {
        path: path.to_path_buf(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let map: BTreeMap<String, Vec<(String, u32)>> = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
    let mut out = BTreeMap::new();
    for (key, frames) in map {
        let address = parse_hex(&key).map_err(err)?;
        let frames = frames
            .into_iter()
            .filter(|(file, line)| *line != 0 && !file.is_empty() && file != "??")
            .collect();
        out.insert(address, frames);
    }
    Ok(out)
}

fn run_resolver(exe: &Path, binary_path: &str, addresses: &[u64]) -> Result<RawFrames, LineMapError> {
    let mut child = Command::new(exe)
        .args(["-e", binary_path, "-a", "-i", "-f"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|source| LineMapError::ResolverSpawn {
            resolver: exe.to_path_buf(),
            source,
        })?;

    let mut stdin = child.stdin.take().expect("stdin is piped");
    let input: String = addresses.iter().map(|a| format!("{a:#x}\n")).collect();
    let writer = std::thread::spawn(move || {
        // The resolver may exit early on a bad binary; its stderr says why.
        let _ = stdin.write_all(input.as_bytes());
    });

    let mut stdout = String::new();
    let mut stderr = String::new();
    child
        .stdout
        .take()
        .expect("stdout is piped")
        .read_to_string(&mut stdout)
        .map_err(|e| LineMapError::ResolverProtocol(e.to_string()))?;
    child
        .stderr
        .take()
        .expect("stderr is piped")
        .read_to_string(&mut stderr)
        .map_err(|e| LineMapError::ResolverProtocol(e.to_string()))?;
    let status = child
        .wait()
        .map_err(|e| LineMapError::ResolverProtocol(e.to_string()))?;
    let _ = writer.join();
    if !status.success() {
        return Err(LineMapError::ResolverProtocol(format!(
            "resolver exited with {status}: {}",
            stderr.trim()
        )));
    }
    parse_resolver_output(&stdout, addresses)
}

fn parse_address_echo(line: &str) -> Option<u64> {
    let digits = line.strip_prefix("0x")?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_hexdigit()) {
        return None;
    }
    u64::from_str_radix(digits, 16).ok()
}

/// Parses a location line. `Ok(None)` means "known unresolvable".
fn parse_location(line: &str) -> Result<Option<(String, u32)>, LineMapError> {
    let bad = || LineMapError::ResolverProtocol(line.to_string());
    let loc = match line.find(" (discriminator") {
        Some(i) => &line[..i],
        None => line,
    }
    .trim_end();
    let (mut file, mut tail) = loc.rsplit_once(':').ok_or_else(bad)?;
    // llvm tools may append a column: file:line:column
    if let Some((f, l)) = file.rsplit_once(':') {
        if !l.is_empty() && l.bytes().all(|b| b.is_ascii_digit()) && tail.bytes().all(|b| b.is_ascii_digit()) {
            file = f;
            tail = l;
        }
    }
    if file == "??" || tail == "?" {
        return Ok(None);
    }
    let line_no: u32 = tail.parse().map_err(|_| bad())?;
    if line_no == 0 || file.is_empty() {
        return Ok(None);
    }
    Ok(Some((file.to_string(), line_no)))
}

/// Parses `addr2line -a -i -f` output: each request is echoed as `0x…`,
/// followed by one or more (function, location) line pairs.
pub fn parse_resolver_output(output: &str, requested: &[u64]) -> Result<RawFrames, LineMapError> {
    let mut out = RawFrames::new();
    let mut lines = output.lines().filter(|l| !l.trim().is_empty()).peekable();
    let mut expected = requested.iter();

    while let Some(line) = lines.next() {
        let address =
            parse_address_echo(line.trim()).ok_or_else(|| LineMapError::ResolverProtocol(line.to_string()))?;
        match expected.next() {
            Some(&want) if want == address => {}
            Some(&want) => {
                return Err(LineMapError::ResolverProtocol(format!(
                    "{line} (expected echo of {want:#x})"
                )))
            }
            None => return Err(LineMapError::ResolverProtocol(format!("{line} (unrequested)"))),
        }
        let frames = out.entry(address).or_default();
        while let Some(next) = lines.peek() {
            if parse_address_echo(next.trim()).is_some() {
                break;
            }
            let function = lines.next().unwrap_or_default();
            let location = lines
                .next()
                .ok_or_else(|| LineMapError::ResolverProtocol(format!("missing location after `{function}`")))?;
            if let Some(frame) = parse_location(location.trim())? {
                frames.push(frame);
            }
        }
    }
    if let Some(missing) = expected.next() {
        return Err(LineMapError::ResolverProtocol(format!(
            "output ended before address {missing:#x}"
        )));
    }
    Ok(out)
}

/// Canonical form of one path: forward slashes, `.` and `..` collapsed.
pub fn clean_path(path: &str) -> String {
    let path = path.replace('\\', "/");
    let absolute = path.starts_with('/');
    let mut parts: Vec<&str> = Vec::new();
    for comp in path.split('/') {
        match comp {
            "" | "." => {}
            ".." => {
                if matches!(parts.last(), Some(p) if *p != "..") {
                    parts.pop();
                } else if !absolute {
                    parts.push("..");
                }
            }
            c => parts.push(c),
        }
    }
    let joined = parts.join("/");
    if absolute {
        format!("/{joined}")
    } else {
        joined
    }
}

/// Toolchain and system headers, left out of prefix computation.
fn is_system_path(path: &str) -> bool {
    ["/usr/", "/lib/", "/lib64/", "/opt/"]
        .iter()
        .any(|p| path.starts_with(p))
}

/// Cleans every path, then strips the longest directory prefix shared by
/// all non-system files of the binary. System headers keep their absolute
/// path, so inlined library code does not shift the prefix between builds.
fn normalize_paths(raw: RawFrames) -> Result<BTreeMap<u64, Vec<SourceLine>>, LineMapError> {
    let cleaned: BTreeMap<u64, Vec<(String, u32)>> = raw
        .into_iter()
        .map(|(a, frames)| (a, frames.into_iter().map(|(f, l)| (clean_path(&f), l)).collect()))
        .collect();

    let files: BTreeSet<&str> = cleaned
        .values()
        .flatten()
        .map(|(f, _)| f.as_str())
        .filter(|f| !is_system_path(f))
        .collect();
    let prefix = common_dir_prefix(files.iter().copied());

    let mut out = BTreeMap::new();
    for (address, frames) in &cleaned {
        let mut lines = Vec::with_capacity(frames.len());
        for (file, line) in frames {
            let stripped = file.strip_prefix(prefix.as_str()).unwrap_or(file);
            let sl = SourceLine::new(stripped, *line)?;
            if !lines.contains(&sl) {
                lines.push(sl);
            }
        }
        out.insert(*address, lines);
    }
    Ok(out)
}

/// Longest shared sequence of leading directories, returned with its
/// trailing slash (or empty).
fn common_dir_prefix<'a>(mut files: impl Iterator<Item = &'a str>) -> String {
    let Some(first) = files.next() else {
        return String::new();
    };
    let dir_of = |f: &'a str| -> Vec<&'a str> {
        let mut parts: Vec<&str> = f.split('/').collect();
        parts.pop();
        parts
    };
    let mut common = dir_of(first);
    for f in files {
        let dirs = dir_of(f);
        let n = common.iter().zip(&dirs).take_while(|(a, b)| a == b).count();
        common.truncate(n);
    }
    if common.is_empty() {
        String::new()
    } else {
        let mut p = common.join("/");
        p.push('/');
        p
    }
}

/// Labels every block with the union of its instructions' source lines,
/// then drops blocks with no label and functions with no surviving block.
pub fn annotate_blocks(dump: &ProgramDump, cache: &AnnotationCache) -> Result<ProgramDump, LineMapError> {
    let mut functions = Vec::with_capacity(dump.functions.len());
    for f in &dump.functions {
        let mut blocks = Vec::with_capacity(f.blocks.len());
        for b in &f.blocks {
            let mut labels = LabelSet::new();
            for ins in &b.instructions {
                let lines = cache.get(ins.address).ok_or_else(|| LineMapError::Coverage {
                    function: f.name.clone(),
                    address: ins.address,
                })?;
                labels.extend(lines.iter().cloned());
            }
            if !labels.is_empty() {
                blocks.push(b.clone().with_labels(labels));
            }
        }
        if !blocks.is_empty() {
            let mut kept = f.clone();
            kept.blocks = blocks;
            functions.push(kept);
        }
    }
    Ok(ProgramDump {
        config: dump.config.clone(),
        functions,
        library_dictionary: dump.library_dictionary.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sl(file: &str, line: u32) -> SourceLine {
        SourceLine::new(file, line).unwrap()
    }

    #[test]
    fn source_line_invariants() {
        assert!(SourceLine::new("", 1).is_err());
        assert!(SourceLine::new("a.c", 0).is_err());
        assert!(SourceLine::new("a\\b.c", 3).is_err());
        assert_eq!(sl("a.c", 3).to_string(), "a.c:3");
    }

    #[test]
    fn label_set_relations() {
        let a: LabelSet = [sl("f.c", 1), sl("f.c", 2)].into_iter().collect();
        let b: LabelSet = [sl("f.c", 2)].into_iter().collect();
        let c: LabelSet = [sl("g.c", 2)].into_iter().collect();
        assert!(b.is_strict_subset(&a));
        assert!(!a.is_strict_subset(&a));
        assert!(a.is_subset(&a));
        assert!(a.intersects(&b));
        assert!(!a.intersects(&c), "same line in another file never intersects");
        assert_eq!(a.intersection(&b), b);
        assert_eq!(b.union(&c).len(), 2);
    }

    #[test]
    fn label_set_serializes_as_pairs() {
        let a: LabelSet = [sl("f.c", 10), sl("f.c", 2)].into_iter().collect();
        assert_eq!(serde_json::to_string(&a).unwrap(), r#"[["f.c",2],["f.c",10]]"#);
        let back: LabelSet = serde_json::from_str(r#"[["f.c",10],["f.c",2]]"#).unwrap();
        assert_eq!(back, a);
        assert!(serde_json::from_str::<LabelSet>(r#"[["f.c",0]]"#).is_err());
    }

    #[test]
    fn resolver_output_groups() {
        let out = "0x0000000000001136\nmain\n/build/gzip/gzip.c:123\n\
                   0x0000000000001140\ninlined\n/build/gzip/util.h:7 (discriminator 2)\nmain\n/build/gzip/gzip.c:130\n\
                   0x0000000000001150\n??\n??:0\n\
                   0x0000000000001160\n??\n??:?\n";
        let frames = parse_resolver_output(out, &[0x1136, 0x1140, 0x1150, 0x1160]).unwrap();
        assert_eq!(frames[&0x1136], vec![("/build/gzip/gzip.c".to_string(), 123)]);
        assert_eq!(frames[&0x1140].len(), 2);
        assert_eq!(frames[&0x1140][0], ("/build/gzip/util.h".to_string(), 7));
        assert!(frames[&0x1150].is_empty());
        assert!(frames[&0x1160].is_empty());
    }

    #[test]
    fn resolver_output_with_columns() {
        let frames = parse_resolver_output("0x10\nf\n/src/a.c:4:9\n", &[0x10]).unwrap();
        assert_eq!(frames[&0x10], vec![("/src/a.c".to_string(), 4)]);
    }

    #[test]
    fn resolver_protocol_errors() {
        let err = parse_resolver_output("0x10\nmain\nnot a location\n", &[0x10]).unwrap_err();
        assert!(err.to_string().contains("not a location"));
        assert!(parse_resolver_output("main\na.c:1\n", &[0x10]).is_err());
        assert!(parse_resolver_output("0x10\nmain\na.c:1\n", &[0x10, 0x20]).is_err());
        assert!(parse_resolver_output("0x20\nmain\na.c:1\n", &[0x10]).is_err());
        assert!(parse_resolver_output("0x10\nmain\n", &[0x10]).is_err());
    }

    #[test]
    fn path_cleaning() {
        assert_eq!(clean_path("C:\\src\\gzip\\gzip.c"), "C:/src/gzip/gzip.c");
        assert_eq!(clean_path("/a/./b/../c.c"), "/a/c.c");
        assert_eq!(clean_path("../x/./y.c"), "../x/y.c");
        assert_eq!(clean_path("/../a.c"), "/a.c");
    }

    #[test]
    fn common_prefix_stripped() {
        let mut raw = RawFrames::new();
        raw.insert(1, vec![("/tmp/b1/src/gzip.c".into(), 3)]);
        raw.insert(2, vec![("/tmp/b1/src/../lib/util.c".into(), 9)]);
        let m = normalize_paths(raw).unwrap();
        assert_eq!(m[&1], vec![sl("src/gzip.c", 3)]);
        assert_eq!(m[&2], vec![sl("lib/util.c", 9)]);

        let mut raw = RawFrames::new();
        raw.insert(1, vec![("/home/u/build-O3/tiny.c".into(), 3)]);
        assert_eq!(normalize_paths(raw).unwrap()[&1], vec![sl("tiny.c", 3)]);
    }

    #[test]
    fn system_headers_do_not_shift_prefix() {
        let mut raw = RawFrames::new();
        raw.insert(1, vec![("/w/p/tiny.c".into(), 3)]);
        raw.insert(
            2,
            vec![
                ("/usr/include/x86_64-linux-gnu/bits/stdio2.h".into(), 86),
                ("/w/p/tiny.c".into(), 7),
            ],
        );
        let m = normalize_paths(raw).unwrap();
        assert_eq!(m[&1], vec![sl("tiny.c", 3)]);
        assert_eq!(
            m[&2],
            vec![sl("/usr/include/x86_64-linux-gnu/bits/stdio2.h", 86), sl("tiny.c", 7)]
        );
    }

    #[test]
    fn missing_resolver_is_spawn_error() {
        let r = Resolver::External(PathBuf::from("/nonexistent/addr2line-xyz"));
        assert!(matches!(
            resolve_addresses(&r, "a.out", &[0x10]),
            Err(LineMapError::ResolverSpawn { .. })
        ));
    }

    #[test]
    fn resolver_flag_forms() {
        assert_eq!(
            Resolver::from_flag("file:a.json"),
            Resolver::AnnotationFile("a.json".into())
        );
        assert_eq!(
            Resolver::from_flag("llvm-addr2line"),
            Resolver::External("llvm-addr2line".into())
        );
    }
}
