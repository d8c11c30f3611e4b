use std::path::{Path, PathBuf};
use std::process::Command;

use crate::error::{Error, Result};
use crate::wat;

use super::{OptLevel, RawFunctionRecord};

pub const ENV_CC: &str = "WASMREV_CC";
pub const ENV_WASM2TEXT: &str = "WASMREV_WASM2TEXT";

/// External compiler and binary-to-text converter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToolchainConfig {
    pub cc: PathBuf,
    pub wasm2text: PathBuf,
    /// Passed to the compiler before the optimization flag. The defaults build
    /// a standalone wasm32 module with every function exported.
    pub cc_args: Vec<String>,
}

impl ToolchainConfig {
    pub fn new(cc: impl Into<PathBuf>, wasm2text: impl Into<PathBuf>) -> Self {
        ToolchainConfig {
            cc: cc.into(),
            wasm2text: wasm2text.into(),
            cc_args: ["--target=wasm32", "-nostdlib", "-Wl,--no-entry", "-Wl,--export-all"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }

    /// Flags take precedence over `WASMREV_CC` / `WASMREV_WASM2TEXT`.
    pub fn resolve(cc: Option<PathBuf>, wasm2text: Option<PathBuf>) -> Result<Self> {
        let from_env = |k: &str| std::env::var_os(k).filter(|v| !v.is_empty()).map(PathBuf::from);
        let cc = cc.or_else(|| from_env(ENV_CC)).ok_or_else(|| {
            Error::ToolchainMissing(format!("no compiler configured (use --cc or {ENV_CC})"))
        })?;
        let w2t = wasm2text.or_else(|| from_env(ENV_WASM2TEXT)).ok_or_else(|| {
            Error::ToolchainMissing(format!("no wasm-to-text converter configured (use --wasm2text or {ENV_WASM2TEXT})"))
        })?;
        Ok(ToolchainConfig::new(cc, w2t))
    }

    pub fn check(&self) -> Result<()> {
        for tool in [&self.cc, &self.wasm2text] {
            if find_executable(tool).is_none() {
                return Err(Error::ToolchainMissing(format!("{} not found", tool.display())));
            }
        }
        Ok(())
    }
}

fn find_executable(tool: &Path) -> Option<PathBuf> {
    if tool.components().count() > 1 {
        return tool.is_file().then(|| tool.to_path_buf());
    }
    std::env::var_os("PATH").and_then(|paths| {
        std::env::split_paths(&paths).map(|dir| dir.join(tool)).find(|p| p.is_file())
    })
}

/// Compiles one function and returns the linear Wasm text of it.
pub fn compile_adapter(record: &RawFunctionRecord, opt_level: OptLevel, toolchain: &ToolchainConfig) -> Result<String> {
    toolchain.check()?;
    let dir = tempfile::tempdir()?;
    let src = dir.path().join("input.c");
    let bin = dir.path().join("output.wasm");
    std::fs::write(&src, &record.source_text)?;

    let fail = |message: String| Error::CompileFailure { function: record.function_name.clone(), message };
    let out = Command::new(&toolchain.cc)
        .args(&toolchain.cc_args)
        .arg(opt_level.flag())
        .arg("-o")
        .arg(&bin)
        .arg(&src)
        .output()?;
    if !out.status.success() {
        return Err(fail(String::from_utf8_lossy(&out.stderr).trim().to_string()));
    }
    let text = Command::new(&toolchain.wasm2text).arg(&bin).output()?;
    if !text.status.success() {
        return Err(fail(String::from_utf8_lossy(&text.stderr).trim().to_string()));
    }
    let text = String::from_utf8(text.stdout).map_err(|e| fail(e.to_string()))?;
    let funcs = wat::extract_functions(&text).map_err(|e| fail(e.to_string()))?;
    let wanted = format!("${}", record.function_name);
    let func = funcs
        .iter()
        .find(|f| f.name_or_index == wanted)
        .or_else(|| if funcs.len() == 1 { funcs.first() } else { None })
        .ok_or_else(|| fail(format!("function {wanted} not found in converter output")))?;
    Ok(wat::render_module(std::slice::from_ref(func)))
}
