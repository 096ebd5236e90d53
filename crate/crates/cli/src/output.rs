//! Small writers for the files the commands emit.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use edpa::{EdpaError, Result};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EdpaError + '_ {
    move |source| EdpaError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Append-only JSON-lines log, flushed after every record so a crashed run
/// keeps everything written before the failure.
pub struct JsonLines {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonLines {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let file = File::create(path).map_err(io_err(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn write(&mut self, value: &serde_json::Value) -> Result<()> {
        let line = serde_json::to_string(value).map_err(|e| EdpaError::Format {
            context: self.path.display().to_string(),
            message: e.to_string(),
        })?;
        writeln!(self.out, "{line}").map_err(io_err(&self.path))?;
        self.out.flush().map_err(io_err(&self.path))
    }
}

/// `<path>` with `suffix` appended to the full file name.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

/// Serialises any record to a JSON object, optionally tagging it.
pub fn tagged<T: serde::Serialize>(tag: (&str, &str), record: &T) -> serde_json::Value {
    let mut v = serde_json::to_value(record).expect("records serialise to JSON");
    if let serde_json::Value::Object(map) = &mut v {
        map.insert(tag.0.into(), tag.1.into());
    }
    v
}

/// Prefixes every CSV line with one extra leading column.
pub fn prefix_csv_column(csv: &[u8], header: &str, values: &[&str]) -> Vec<u8> {
    let text = String::from_utf8_lossy(csv);
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let first = if i == 0 {
            header
        } else {
            values.get(i - 1).copied().unwrap_or("")
        };
        out.push_str(first);
        out.push(',');
        out.push_str(line);
        out.push('\n');
    }
    out.into_bytes()
}
