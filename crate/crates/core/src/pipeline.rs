//! End-to-end runs driven by a JSON manifest, and single-stage debug runs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::bmerge::{bmerge_dump, BMergeError, MergeOutcome};
use crate::bpair::{pair_programs, PairError, UnmatchedReport};
use crate::dataset::{
    self, assemble, block_pool, config_stats, positive_records, CorpusOptions, CorpusStats, DatasetError,
};
use crate::ingest::{parse_dump, sanitize, Compiler, DumpError, Isa, OptLevel, ProgramDump};
use crate::linemap::{annotate_blocks, resolve_addresses, LabelSet, LineMapError, Resolver};
use crate::normalize::{normalize_block, render_block};
use crate::objdump::{export_binary, objdump_for, ExportError};
use crate::toolchain::{build_matrix, SourceProgram, ToolchainError};

pub const DEFAULT_RESOLVER: &str = "addr2line";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("{}", stage_message(.stage, .config, .function, .message))]
    Stage {
        stage: Stage,
        config: String,
        function: Option<String>,
        message: String,
    },
    #[error("missing external tool: {0}")]
    MissingTool(String),
}

fn stage_message(stage: &Stage, config: &str, function: &Option<String>, message: &str) -> String {
    match function {
        Some(f) => format!("stage {stage} failed for {config}, function `{f}`: {message}"),
        None => format!("stage {stage} failed for {config}: {message}"),
    }
}

impl From<PairError> for PipelineError {
    fn from(e: PairError) -> Self {
        PipelineError::Validation(e.to_string())
    }
}

impl PipelineError {
    /// Process exit status: 2 validation, 3 stage failure, 4 missing tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Validation(_) => 2,
            PipelineError::Stage { .. } => 3,
            PipelineError::MissingTool(_) => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Build,
    Export,
    Ingest,
    Sanitize,
    Annotate,
    Bmerge,
    Bpair,
    Normalize,
    Dataset,
}

impl Stage {
    pub const DEBUGGABLE: [Stage; 7] = [
        Stage::Ingest,
        Stage::Sanitize,
        Stage::Annotate,
        Stage::Bmerge,
        Stage::Bpair,
        Stage::Normalize,
        Stage::Dataset,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Build => "build",
            Stage::Export => "export",
            Stage::Ingest => "ingest",
            Stage::Sanitize => "sanitize",
            Stage::Annotate => "annotate",
            Stage::Bmerge => "bmerge",
            Stage::Bpair => "bpair",
            Stage::Normalize => "normalize",
            Stage::Dataset => "dataset",
        }
    }

    /// Stages that need two dumps.
    pub fn is_cross_build(self) -> bool {
        matches!(self, Stage::Bpair | Stage::Dataset)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::DEBUGGABLE
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Stage::DEBUGGABLE.iter().map(|s| s.as_str()).collect();
                format!("unknown stage `{s}` (expected one of {})", names.join(", "))
            })
    }
}

fn dump_error(config: &str, e: DumpError) -> PipelineError {
    let function = match &e {
        DumpError::Overlap { function, .. } => Some(function.clone()),
        DumpError::DuplicateSymbol(name) => Some(name.clone()),
        _ => None,
    };
    PipelineError::Stage {
        stage: Stage::Ingest,
        config: config.to_string(),
        function,
        message: e.to_string(),
    }
}

fn linemap_error(config: &str, e: LineMapError) -> PipelineError {
    match e {
        LineMapError::ResolverSpawn { resolver, source } if source.kind() == std::io::ErrorKind::NotFound => {
            PipelineError::MissingTool(resolver.display().to_string())
        }
        e => PipelineError::Stage {
            stage: Stage::Annotate,
            config: config.to_string(),
            function: match &e {
                LineMapError::Coverage { function, .. } => Some(function.clone()),
                _ => None,
            },
            message: e.to_string(),
        },
    }
}

fn bmerge_error(config: &str, e: BMergeError) -> PipelineError {
    let BMergeError::EmptyLabels { function, .. } = &e;
    PipelineError::Stage {
        stage: Stage::Bmerge,
        config: config.to_string(),
        function: Some(function.clone()),
        message: e.to_string(),
    }
}

fn dataset_error(config: &str, e: DatasetError) -> PipelineError {
    let DatasetError::PoolExhausted { function, .. } = &e;
    PipelineError::Stage {
        stage: Stage::Dataset,
        config: config.to_string(),
        function: Some(function.clone()),
        message: e.to_string(),
    }
}

fn io_error(stage: Stage, config: &str, path: &Path, e: std::io::Error) -> PipelineError {
    PipelineError::Stage {
        stage,
        config: config.to_string(),
        function: None,
        message: format!("{}: {e}", path.display()),
    }
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    matrix: Vec<RawCoordinate>,
    #[serde(default)]
    inputs: Vec<InputSpec>,
    #[serde(default)]
    sources: Vec<SourceSpec>,
    #[serde(default)]
    resolver: Option<String>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default = "default_true")]
    negatives: bool,
    #[serde(default)]
    split_by_function: bool,
    #[serde(default)]
    out: Option<PathBuf>,
    #[serde(default)]
    jobs: Option<usize>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCoordinate {
    isa: String,
    compiler: String,
    opt_level: String,
}

/// A prebuilt dump, optionally with its own annotation file.
#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSpec {
    pub dump: PathBuf,
    #[serde(default)]
    pub annotations: Option<PathBuf>,
}

/// Source files compiled across the matrix before the run.
#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub program: String,
    pub files: Vec<PathBuf>,
}

pub type Coordinate = (Isa, Compiler, OptLevel);

pub fn coordinate_key((isa, compiler, opt): Coordinate) -> String {
    format!("{isa}-{compiler}-{opt}")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunManifest {
    pub matrix: Vec<Coordinate>,
    pub inputs: Vec<InputSpec>,
    pub sources: Vec<SourceSpec>,
    /// Fallback resolver for inputs without their own annotation file.
    pub resolver: Option<Resolver>,
    pub seed: Option<u64>,
    pub negatives: bool,
    pub split_by_function: bool,
    pub out: PathBuf,
    pub jobs: Option<usize>,
}

fn resolve_against(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunManifest {
    /// Reads a manifest; relative paths are taken from the manifest's
    /// directory. The result is not yet validated.
    pub fn load(path: impl AsRef<Path>) -> Result<RunManifest, PipelineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Validation(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        RunManifest::from_json(&text, base)
    }

    pub fn from_json(text: &str, base: &Path) -> Result<RunManifest, PipelineError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let raw: RawManifest = serde_path_to_error::deserialize(de)
            .map_err(|e| PipelineError::Validation(format!("{}: {}", e.path(), e.inner())))?;
        let mut matrix = Vec::with_capacity(raw.matrix.len());
        for (k, c) in raw.matrix.iter().enumerate() {
            let bad = |e: crate::ingest::UnknownVariant| PipelineError::Validation(format!("matrix[{k}]: {e}"));
            matrix.push((
                c.isa.parse().map_err(bad)?,
                c.compiler.parse().map_err(bad)?,
                c.opt_level.parse().map_err(bad)?,
            ));
        }
        let resolver = raw.resolver.as_deref().map(|r| match Resolver::from_flag(r) {
            Resolver::AnnotationFile(p) => Resolver::AnnotationFile(resolve_against(base, &p)),
            Resolver::External(p) if p.components().count() > 1 => Resolver::External(resolve_against(base, &p)),
            other => other,
        });
        Ok(RunManifest {
            matrix,
            inputs: raw
                .inputs
                .into_iter()
                .map(|i| InputSpec {
                    dump: resolve_against(base, &i.dump),
                    annotations: i.annotations.map(|a| resolve_against(base, &a)),
                })
                .collect(),
            sources: raw
                .sources
                .into_iter()
                .map(|s| SourceSpec {
                    program: s.program,
                    files: s.files.iter().map(|f| resolve_against(base, f)).collect(),
                })
                .collect(),
            resolver,
            seed: raw.seed,
            negatives: raw.negatives,
            split_by_function: raw.split_by_function,
            out: resolve_against(base, &raw.out.unwrap_or_else(|| PathBuf::from("out"))),
            jobs: raw.jobs,
        })
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let invalid = |m: String| Err(PipelineError::Validation(m));
        let distinct: BTreeSet<String> = self.matrix.iter().map(|&c| coordinate_key(c)).collect();
        if distinct.len() != self.matrix.len() {
            return invalid("matrix lists a build config twice".into());
        }
        if self.matrix.len() < 2 {
            return invalid(format!(
                "matrix has {} build config(s); pairing needs at least two",
                self.matrix.len()
            ));
        }
        if self.negatives && self.seed.is_none() {
            return invalid("negatives requested but no seed given".into());
        }
        if self.inputs.is_empty() && self.sources.is_empty() {
            return invalid("no inputs and no sources".into());
        }
        if self.jobs == Some(0) {
            return invalid("jobs must be at least 1".into());
        }
        for i in &self.inputs {
            if !i.dump.is_file() {
                return invalid(format!("dump {} does not exist", i.dump.display()));
            }
            if let Some(a) = &i.annotations {
                if !a.is_file() {
                    return invalid(format!("annotation file {} does not exist", a.display()));
                }
            }
        }
        if let Some(Resolver::AnnotationFile(p)) = &self.resolver {
            if !p.is_file() {
                return invalid(format!("annotation file {} does not exist", p.display()));
            }
        }
        for s in &self.sources {
            if s.files.is_empty() {
                return invalid(format!("source program `{}` lists no files", s.program));
            }
            if let Some(f) = s.files.iter().find(|f| !f.is_file()) {
                return invalid(format!("source file {} does not exist", f.display()));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Log

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogEvent {
    pub stage: Stage,
    pub config: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub function: Option<String>,
    pub counts: BTreeMap<String, Value>,
}

impl LogEvent {
    fn new(stage: Stage, config: &str, function: Option<&str>, counts: Value) -> LogEvent {
        let counts = match counts {
            Value::Object(m) => m.into_iter().collect(),
            _ => BTreeMap::new(),
        };
        LogEvent {
            stage,
            config: config.to_string(),
            function: function.map(str::to_string),
            counts,
        }
    }
}

// ---------------------------------------------------------------------------
// Per-build preparation

struct Input {
    source: InputSource,
    resolver: Resolver,
}

enum InputSource {
    File(PathBuf),
    Exported(ProgramDump),
}

/// A build after ingest, sanitize, annotate and bmerge.
#[derive(Clone, Debug)]
pub struct PreparedBuild {
    pub merged: ProgramDump,
    pub outcomes: Vec<MergeOutcome>,
}

/// A relative `binary_path` is taken from the directory holding the dump.
fn binary_location(dump: &ProgramDump, dump_path: Option<&Path>) -> String {
    let binary = Path::new(&dump.config.binary_path);
    match dump_path.and_then(Path::parent) {
        Some(dir) if binary.is_relative() => dir.join(binary).display().to_string(),
        _ => dump.config.binary_path.clone(),
    }
}

fn annotate(
    dump: &ProgramDump,
    dump_path: Option<&Path>,
    resolver: &Resolver,
    config: &str,
) -> Result<ProgramDump, PipelineError> {
    let binary = binary_location(dump, dump_path);
    let cache =
        resolve_addresses(resolver, &binary, &dump.instruction_addresses()).map_err(|e| linemap_error(config, e))?;
    annotate_blocks(dump, &cache).map_err(|e| linemap_error(config, e))
}

fn prepare(input: &Input) -> Result<(PreparedBuild, Vec<LogEvent>), PipelineError> {
    let mut events = Vec::new();
    let dump = match &input.source {
        InputSource::File(path) => parse_dump(path).map_err(|e| dump_error(&path.display().to_string(), e))?,
        InputSource::Exported(d) => d.clone(),
    };
    let config = dump.config.to_string();
    events.push(LogEvent::new(
        Stage::Ingest,
        &config,
        None,
        json!({"functions": dump.functions.len(), "blocks": dump.block_count(), "instructions": dump.instruction_count()}),
    ));

    let clean = sanitize(&dump);
    events.push(LogEvent::new(
        Stage::Sanitize,
        &config,
        None,
        json!({"functions": clean.functions.len(), "dropped_external": dump.functions.len() - clean.functions.len()}),
    ));

    let dump_path = match &input.source {
        InputSource::File(path) => Some(path.as_path()),
        InputSource::Exported(_) => None,
    };
    let annotated = annotate(&clean, dump_path, &input.resolver, &config)?;
    events.push(LogEvent::new(
        Stage::Annotate,
        &config,
        None,
        json!({
            "blocks_before": clean.block_count(),
            "blocks_after": annotated.block_count(),
            "functions_after": annotated.functions.len(),
        }),
    ));

    let (merged, outcomes) = bmerge_dump(&annotated).map_err(|e| bmerge_error(&config, e))?;
    for o in &outcomes {
        events.push(LogEvent::new(
            Stage::Bmerge,
            &config,
            Some(&o.function),
            json!({"original_blocks": o.original_blocks, "resulting_blocks": o.resulting_blocks}),
        ));
    }
    Ok((PreparedBuild { merged, outcomes }, events))
}

// ---------------------------------------------------------------------------
// Cross-build assembly

/// What one config pair produced.
#[derive(Clone, Debug)]
pub struct PairRun {
    pub dir_name: String,
    pub corpus: dataset::Corpus,
    pub unmatched: BTreeMap<String, UnmatchedReport>,
}

impl PairRun {
    pub fn stats(&self) -> &CorpusStats {
        &self.corpus.stats
    }

    pub fn unmatched_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(&self.unmatched).expect("report serialization cannot fail");
        text.push('\n');
        text
    }

    /// Writes pairs.jsonl, train.jsonl, test.jsonl, stats.json and
    /// unmatched.json into `dir`.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("pairs.jsonl"), dataset::to_jsonl(&self.corpus.records))?;
        fs::write(dir.join("train.jsonl"), dataset::to_jsonl(&self.corpus.train))?;
        fs::write(dir.join("test.jsonl"), dataset::to_jsonl(&self.corpus.test))?;
        fs::write(dir.join("stats.json"), self.corpus.stats.to_json())?;
        fs::write(dir.join("unmatched.json"), self.unmatched_json())?;
        Ok(())
    }
}

/// Pairs every program present in both builds and assembles the corpus.
/// `left` and `right` map program names to prepared builds.
pub fn assemble_pair(
    left: &BTreeMap<String, PreparedBuild>,
    right: &BTreeMap<String, PreparedBuild>,
    options: &CorpusOptions,
    events: &mut Vec<LogEvent>,
) -> Result<Option<PairRun>, PipelineError> {
    let programs: Vec<&String> = left.keys().filter(|p| right.contains_key(*p)).collect();
    let Some(first) = programs.first() else { return Ok(None) };
    let left_key = left[*first].merged.config.key();
    let right_key = right[*first].merged.config.key();
    let pair_key = format!("{left_key}__{right_key}");

    let mut positives = Vec::new();
    let mut pool = Vec::new();
    let mut unmatched = BTreeMap::new();
    let mut config_stats_map = BTreeMap::new();
    for program in &programs {
        let (l, r) = (&left[*program], &right[*program]);
        let label = format!("{program}:{pair_key}");
        let pairing = pair_programs(&l.merged, &r.merged)?;
        for f in &pairing.per_function {
            events.push(LogEvent::new(
                Stage::Bpair,
                &label,
                Some(&f.function),
                json!({"components": f.components, "pairs": f.pairs, "one_sided": f.one_sided}),
            ));
        }
        let records = positive_records(&pairing.pairs, &l.merged, &r.merged);
        events.push(LogEvent::new(
            Stage::Normalize,
            &label,
            None,
            json!({"records": records.len()}),
        ));
        positives.extend(records);
        pool.extend(block_pool(&r.merged));
        unmatched.insert(program.to_string(), pairing.unmatched);
        config_stats_map.insert(l.merged.config.to_string(), config_stats(&l.outcomes));
        config_stats_map.insert(r.merged.config.to_string(), config_stats(&r.outcomes));
    }

    let mut corpus = assemble(positives, &pool, options).map_err(|e| dataset_error(&pair_key, e))?;
    corpus.stats.configs = config_stats_map;
    let s = &corpus.stats;
    events.push(LogEvent::new(
        Stage::Dataset,
        &pair_key,
        None,
        json!({
            "positives_before_dedup": s.positives_before_dedup,
            "dedup_removed": s.dedup_removed,
            "positives": s.positives,
            "negatives": s.negatives,
            "truncated_sides": s.truncated_sides,
            "train": s.train,
            "test": s.test,
        }),
    ));

    let names: Vec<&str> = programs.iter().map(|p| p.as_str()).collect();
    Ok(Some(PairRun {
        dir_name: format!("{}__{pair_key}", names.join("+")),
        corpus,
        unmatched,
    }))
}

// ---------------------------------------------------------------------------
// Full run

#[derive(Clone, Debug)]
pub struct RunReport {
    pub run_dirs: Vec<PathBuf>,
    pub pairs: Vec<PairRun>,
    pub log_path: PathBuf,
}

fn missing_tool_or_stage(stage: Stage, config: &str, e: ExportError) -> PipelineError {
    match e {
        ExportError::Spawn { tool, source } if source.kind() == std::io::ErrorKind::NotFound => {
            PipelineError::MissingTool(tool.display().to_string())
        }
        e => PipelineError::Stage {
            stage,
            config: config.to_string(),
            function: None,
            message: e.to_string(),
        },
    }
}

fn build_sources(
    manifest: &RunManifest,
    fallback: &Resolver,
    events: &mut Vec<LogEvent>,
) -> Result<Vec<Input>, PipelineError> {
    if manifest.sources.is_empty() {
        return Ok(Vec::new());
    }
    let programs: Vec<SourceProgram> = manifest
        .sources
        .iter()
        .map(|s| SourceProgram {
            name: s.program.clone(),
            files: s.files.clone(),
        })
        .collect();
    let build_dir = manifest.out.join("build");
    let built = build_matrix(&programs, &manifest.matrix, &build_dir).map_err(|e| match e {
        ToolchainError::Missing { .. } => PipelineError::MissingTool(e.to_string()),
        ToolchainError::Spawn { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
            PipelineError::MissingTool(e.to_string())
        }
        e => PipelineError::Stage {
            stage: Stage::Build,
            config: "matrix".into(),
            function: None,
            message: e.to_string(),
        },
    })?;
    let mut inputs = Vec::new();
    for b in built {
        let config = b.config.to_string();
        events.push(LogEvent::new(
            Stage::Build,
            &config,
            None,
            json!({"command": b.command}),
        ));
        let objdump = PathBuf::from(objdump_for(b.config.isa));
        let dump =
            export_binary(&objdump, b.config.clone()).map_err(|e| missing_tool_or_stage(Stage::Export, &config, e))?;
        let dump_path = build_dir.join(format!("{}-{}.dump.json", b.config.program_name, b.config.key()));
        fs::write(&dump_path, dump.to_json()).map_err(|e| io_error(Stage::Export, &config, &dump_path, e))?;
        events.push(LogEvent::new(
            Stage::Export,
            &config,
            None,
            json!({"functions": dump.functions.len(), "blocks": dump.block_count()}),
        ));
        inputs.push(Input {
            source: InputSource::Exported(dump),
            resolver: fallback.clone(),
        });
    }
    Ok(inputs)
}

/// Runs every stage for every config pair and writes the run directories
/// and `log.jsonl` under `manifest.out`.
pub fn run(manifest: &RunManifest) -> Result<RunReport, PipelineError> {
    manifest.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = manifest.jobs {
        builder = builder.num_threads(j);
    }
    let pool = builder
        .build()
        .map_err(|e| PipelineError::Validation(format!("cannot start worker pool: {e}")))?;
    pool.install(|| run_in_pool(manifest))
}

fn run_in_pool(manifest: &RunManifest) -> Result<RunReport, PipelineError> {
    let fallback = manifest
        .resolver
        .clone()
        .unwrap_or_else(|| Resolver::External(PathBuf::from(DEFAULT_RESOLVER)));
    let mut events = Vec::new();
    let mut inputs: Vec<Input> = manifest
        .inputs
        .iter()
        .map(|i| Input {
            source: InputSource::File(i.dump.clone()),
            resolver: i
                .annotations
                .clone()
                .map(Resolver::AnnotationFile)
                .unwrap_or_else(|| fallback.clone()),
        })
        .collect();
    inputs.extend(build_sources(manifest, &fallback, &mut events)?);

    let prepared: Vec<Result<(PreparedBuild, Vec<LogEvent>), PipelineError>> = inputs.par_iter().map(prepare).collect();
    let mut by_config: BTreeMap<String, BTreeMap<String, PreparedBuild>> = BTreeMap::new();
    for result in prepared {
        let (build, ev) = result?;
        events.extend(ev);
        let config = build.merged.config.clone();
        let key = config.key();
        if !manifest.matrix.contains(&config.coordinate()) {
            return Err(PipelineError::Validation(format!(
                "input {config} is not in the build matrix"
            )));
        }
        let program = config.program_name.clone();
        if by_config.entry(key).or_default().insert(program, build).is_some() {
            return Err(PipelineError::Validation(format!("two inputs for {config}")));
        }
    }

    let options = CorpusOptions {
        seed: manifest.negatives.then_some(manifest.seed).flatten(),
        split_by_function: manifest.split_by_function,
        ..CorpusOptions::default()
    };
    let empty = BTreeMap::new();
    let mut report = RunReport {
        run_dirs: Vec::new(),
        pairs: Vec::new(),
        log_path: manifest.out.join("log.jsonl"),
    };
    fs::create_dir_all(&manifest.out).map_err(|e| io_error(Stage::Dataset, "run", &manifest.out, e))?;
    for i in 0..manifest.matrix.len() {
        for j in i + 1..manifest.matrix.len() {
            let left = by_config.get(&coordinate_key(manifest.matrix[i])).unwrap_or(&empty);
            let right = by_config.get(&coordinate_key(manifest.matrix[j])).unwrap_or(&empty);
            if let Some(pair) = assemble_pair(left, right, &options, &mut events)? {
                let dir = manifest.out.join(&pair.dir_name);
                pair.write(&dir)
                    .map_err(|e| io_error(Stage::Dataset, &pair.dir_name, &dir, e))?;
                report.run_dirs.push(dir);
                report.pairs.push(pair);
            }
        }
    }

    let mut log = String::new();
    for e in &events {
        log.push_str(&serde_json::to_string(e).expect("log serialization cannot fail"));
        log.push('\n');
    }
    fs::write(&report.log_path, log).map_err(|e| io_error(Stage::Dataset, "run", &report.log_path, e))?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Single-stage debug runs

#[derive(Serialize)]
struct BlockView<'a> {
    id: String,
    start: String,
    instructions: usize,
    labels: &'a LabelSet,
    merged_from: Vec<String>,
}

#[derive(Serialize)]
struct FunctionView<'a> {
    function: &'a str,
    blocks: Vec<BlockView<'a>>,
}

fn block_sets(dump: &ProgramDump) -> String {
    let view: Vec<FunctionView> = dump
        .functions
        .iter()
        .map(|f| FunctionView {
            function: &f.name,
            blocks: f
                .blocks
                .iter()
                .map(|b| BlockView {
                    id: b.id.to_string(),
                    start: crate::ingest::format_hex(b.start_address),
                    instructions: b.instructions.len(),
                    labels: &b.labels,
                    merged_from: b.merged_from.iter().map(ToString::to_string).collect(),
                })
                .collect(),
        })
        .collect();
    pretty(&view)
}

fn pretty<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("view serialization cannot fail");
    text.push('\n');
    text
}

fn normalized_view(dump: &ProgramDump) -> String {
    let view: Vec<Value> = dump
        .functions
        .iter()
        .map(|f| {
            let blocks: Vec<Value> = f
                .blocks
                .iter()
                .map(|b| {
                    json!({
                        "id": b.id.to_string(),
                        "rendering": render_block(&normalize_block(b, dump.config.isa, &dump.library_dictionary)),
                    })
                })
                .collect();
            json!({"function": f.name, "blocks": blocks})
        })
        .collect();
    pretty(&view)
}

/// Runs the pipeline on `dumps` up to `stage` and returns that stage's
/// output as text. Cross-build stages need exactly two dumps; the others
/// exactly one. `resolvers` holds one resolver for all dumps or one per
/// dump.
pub fn run_stage(stage: Stage, dumps: &[PathBuf], resolvers: &[Resolver], seed: u64) -> Result<String, PipelineError> {
    let wanted = if stage.is_cross_build() { 2 } else { 1 };
    if dumps.len() != wanted {
        return Err(PipelineError::Validation(format!(
            "stage {stage} takes {wanted} --dump argument(s), got {}",
            dumps.len()
        )));
    }
    if resolvers.len() > 1 && resolvers.len() != dumps.len() {
        return Err(PipelineError::Validation(
            "give one --resolver, or one per --dump".into(),
        ));
    }
    let resolver_for = |k: usize| {
        resolvers
            .get(k)
            .or(resolvers.first())
            .cloned()
            .unwrap_or_else(|| Resolver::External(PathBuf::from(DEFAULT_RESOLVER)))
    };

    let load = |k: usize| -> Result<ProgramDump, PipelineError> {
        parse_dump(&dumps[k]).map_err(|e| dump_error(&dumps[k].display().to_string(), e))
    };
    let through_bmerge = |k: usize| -> Result<PreparedBuild, PipelineError> {
        let input = Input {
            source: InputSource::File(dumps[k].clone()),
            resolver: resolver_for(k),
        };
        Ok(prepare(&input)?.0)
    };

    match stage {
        Stage::Ingest => Ok(load(0)?.to_json()),
        Stage::Sanitize => Ok(sanitize(&load(0)?).to_json()),
        Stage::Annotate => {
            let dump = sanitize(&load(0)?);
            let annotated = annotate(&dump, Some(&dumps[0]), &resolver_for(0), &dump.config.to_string())?;
            Ok(block_sets(&annotated))
        }
        Stage::Bmerge => Ok(block_sets(&through_bmerge(0)?.merged)),
        Stage::Normalize => Ok(normalized_view(&through_bmerge(0)?.merged)),
        Stage::Bpair | Stage::Dataset => {
            let (l, r) = (through_bmerge(0)?, through_bmerge(1)?);
            if l.merged.config.program_name != r.merged.config.program_name {
                return Err(PipelineError::Validation(format!(
                    "dumps are of different programs: {} and {}",
                    l.merged.config.program_name, r.merged.config.program_name
                )));
            }
            if stage == Stage::Bpair {
                let pairing = pair_programs(&l.merged, &r.merged)?;
                let pairs: Vec<Value> = pairing
                    .pairs
                    .iter()
                    .map(|p| {
                        json!({
                            "function": p.function_name,
                            "left": p.left_block.id.to_string(),
                            "right": p.right_block.id.to_string(),
                            "left_merged_from": p.left_block.merged_from.iter().map(ToString::to_string).collect::<Vec<_>>(),
                            "right_merged_from": p.right_block.merged_from.iter().map(ToString::to_string).collect::<Vec<_>>(),
                            "shared_labels": p.shared_labels,
                        })
                    })
                    .collect();
                return Ok(pretty(&json!({"pairs": pairs, "unmatched": pairing.unmatched})));
            }
            let program = l.merged.config.program_name.clone();
            let left = BTreeMap::from([(program.clone(), l)]);
            let right = BTreeMap::from([(program, r)]);
            let options = CorpusOptions {
                seed: Some(seed),
                ..CorpusOptions::default()
            };
            let run = assemble_pair(&left, &right, &options, &mut Vec::new())?.expect("one common program");
            Ok(dataset::to_jsonl(&run.corpus.records))
        }
        Stage::Build | Stage::Export => Err(PipelineError::Validation(format!("stage {stage} cannot be run alone"))),
    }
}
