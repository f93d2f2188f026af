//! Result files. JSON carries `tool`, `version`, `command`, the resolved
//! `config` and the `result`; CSV grids carry the same metadata as leading
//! `#` comment lines followed by a `d,re,im[,stderr]` header.
//!
//! Files are written to a temporary sibling and renamed into place.

use std::io::Write;
use std::path::Path;

use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::{CliError, Command, TOOL, VERSION};

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<f64>>,
    /// Extra `# key: value` lines (scalars that accompany the grid).
    pub notes: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommandOutput {
    pub config: RunConfig,
    pub result: Value,
    pub grid: Option<Grid>,
}

pub fn render_json(command: Command, out: &CommandOutput) -> Result<String, CliError> {
    let doc = json!({
        "tool": TOOL,
        "version": VERSION,
        "command": command.name(),
        "config": out.config,
        "result": out.result,
    });
    let mut s = serde_json::to_string_pretty(&doc)
        .map_err(|e| CliError::Validation(format!("serializing result: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn render_csv(command: Command, out: &CommandOutput) -> Result<String, CliError> {
    let grid = out.grid.as_ref().ok_or_else(|| {
        CliError::Validation(format!(
            "`{}` has no grid output; write JSON instead of CSV",
            command.name()
        ))
    })?;
    let config = serde_json::to_string(&out.config)
        .map_err(|e| CliError::Validation(format!("serializing config: {e}")))?;
    let mut s = format!("# {TOOL} {VERSION} {}\n# config: {config}\n", command.name());
    for (k, v) in &grid.notes {
        s.push_str(&format!("# {k}: {v}\n"));
    }
    s.push_str(&grid.header.join(","));
    s.push('\n');
    for row in &grid.rows {
        let cells: Vec<String> = row.iter().map(|x| format!("{x:?}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    Ok(s)
}

pub fn write(path: &Path, command: Command, out: &CommandOutput) -> Result<(), CliError> {
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let text = if is_csv {
        render_csv(command, out)?
    } else {
        render_json(command, out)?
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let io = |e: std::io::Error| CliError::Validation(format!("writing {}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(text.as_bytes()).map_err(io)?;
    tmp.flush().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}
