//! Compiling source programs across the build matrix.

use std::path::{Path, PathBuf};
use std::process::Command;

use thiserror::Error;

use crate::ingest::{BuildConfig, Compiler, Isa, OptLevel};
use crate::objdump::{host_isa, triple};

#[derive(Debug, Error)]
pub enum ToolchainError {
    #[error("no {compiler} toolchain for {triple}")]
    Missing { compiler: Compiler, triple: String },
    #[error("compilation failed: {command}\n{stderr}")]
    CompileFailed { command: String, stderr: String },
    #[error("cannot run `{command}`: {source}")]
    Spawn {
        command: String,
        #[source]
        source: std::io::Error,
    },
}

/// Finds an executable on `PATH`.
pub fn find_executable(name: &str) -> Option<PathBuf> {
    let path = std::env::var_os("PATH")?;
    std::env::split_paths(&path)
        .map(|dir| dir.join(name))
        .find(|candidate| candidate.is_file())
}

/// The argv prefix that compiles for `isa` with `compiler`, or the missing
/// triple.
pub fn compiler_argv(compiler: Compiler, isa: Isa) -> Result<Vec<String>, ToolchainError> {
    let native = host_isa() == Some(isa);
    let t = triple(isa);
    let missing = || ToolchainError::Missing {
        compiler,
        triple: t.to_string(),
    };
    match compiler {
        Compiler::Gcc => {
            let name = if native { "gcc".to_string() } else { format!("{t}-gcc") };
            find_executable(&name).ok_or_else(missing)?;
            Ok(vec![name])
        }
        Compiler::Clang => {
            find_executable("clang").ok_or_else(missing)?;
            if native {
                Ok(vec!["clang".into()])
            } else if Path::new("/usr").join(t).is_dir() {
                Ok(vec![
                    "clang".into(),
                    format!("--target={t}"),
                    format!("--sysroot=/usr/{t}"),
                ])
            } else {
                Err(missing())
            }
        }
    }
}

/// A source program to build, possibly from several files.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceProgram {
    pub name: String,
    pub files: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BuiltBinary {
    pub config: BuildConfig,
    pub command: Vec<String>,
}

pub fn compile_command(
    program: &SourceProgram,
    compiler: Compiler,
    isa: Isa,
    opt: OptLevel,
    output: &Path,
) -> Result<Vec<String>, ToolchainError> {
    let mut argv = compiler_argv(compiler, isa)?;
    argv.push("-g".into());
    argv.push(format!("-{opt}"));
    argv.extend(program.files.iter().map(|f| f.display().to_string()));
    argv.push("-o".into());
    argv.push(output.display().to_string());
    Ok(argv)
}

/// Compiles every program for every `(isa, compiler, opt)` coordinate into
/// `out_dir`, named `<program>-<config key>`.
pub fn build_matrix(
    programs: &[SourceProgram],
    matrix: &[(Isa, Compiler, OptLevel)],
    out_dir: &Path,
) -> Result<Vec<BuiltBinary>, ToolchainError> {
    std::fs::create_dir_all(out_dir).map_err(|source| ToolchainError::Spawn {
        command: format!("mkdir {}", out_dir.display()),
        source,
    })?;
    let mut built = Vec::new();
    for program in programs {
        for &(isa, compiler, opt) in matrix {
            let mut config = BuildConfig {
                isa,
                compiler,
                opt_level: opt,
                program_name: program.name.clone(),
                binary_path: String::new(),
            };
            let output = out_dir.join(format!("{}-{}", program.name, config.key()));
            let argv = compile_command(program, compiler, isa, opt, &output)?;
            let command = argv.join(" ");
            let result = Command::new(&argv[0])
                .args(&argv[1..])
                .output()
                .map_err(|source| ToolchainError::Spawn {
                    command: command.clone(),
                    source,
                })?;
            if !result.status.success() {
                return Err(ToolchainError::CompileFailed {
                    command,
                    stderr: String::from_utf8_lossy(&result.stderr).trim().to_string(),
                });
            }
            config.binary_path = output.display().to_string();
            built.push(BuiltBinary { config, command: argv });
        }
    }
    Ok(built)
}
