//! Result files: JSON envelopes, CSV and atomic writes.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{CliError, CliResult};

/// Bumped whenever a field of an emitted JSON or CSV file changes meaning.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    schema_version: u32,
    kind: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let fail = |source| CliError::Write {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(fail)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(fail)?;
    tmp.write_all(bytes).map_err(fail)?;
    tmp.as_file().sync_all().map_err(fail)?;
    tmp.persist(path).map_err(|e| fail(e.error))?;
    Ok(())
}

/// `body` with `schema_version` and `kind` fields added. `body` must
/// serialize to a JSON object.
pub fn to_json<T: Serialize>(kind: &str, body: &T) -> CliResult<String> {
    let env = Envelope {
        schema_version: SCHEMA_VERSION,
        kind,
        body,
    };
    let mut s = serde_json::to_string_pretty(&env).map_err(|e| CliError::Usage(format!("serializing {kind}: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, kind: &str, body: &T) -> CliResult<()> {
    write_atomic(path, to_json(kind, body)?.as_bytes())
}

/// CSV with a leading `# schema_version: N` comment line.
pub fn write_csv(path: &Path, csv: &str) -> CliResult<()> {
    write_atomic(path, format!("# schema_version: {SCHEMA_VERSION}\n{csv}").as_bytes())
}

/// Quotes a CSV field when needed.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) || s.starts_with(' ') || s.ends_with(' ') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

/// Files written by one command, relative to nothing (absolute or as given).
#[derive(Debug, Default, Clone, Serialize)]
pub struct Written(pub Vec<PathBuf>);

impl Written {
    pub fn json<T: Serialize>(&mut self, path: PathBuf, kind: &str, body: &T) -> CliResult<()> {
        write_json(&path, kind, body)?;
        self.0.push(path);
        Ok(())
    }

    pub fn csv(&mut self, path: PathBuf, csv: &str) -> CliResult<()> {
        write_csv(&path, csv)?;
        self.0.push(path);
        Ok(())
    }

    pub fn text(&mut self, path: PathBuf, text: &str) -> CliResult<()> {
        write_atomic(&path, text.as_bytes())?;
        self.0.push(path);
        Ok(())
    }
}
