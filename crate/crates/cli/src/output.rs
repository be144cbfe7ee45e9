use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

/// Where results go. Timings are kept out of the main JSON so that
/// identical runs produce identical result files.
pub struct OutDir(PathBuf);

impl OutDir {
    pub fn create(path: &Path) -> Result<Self> {
        std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self(path.to_path_buf()))
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.0.join(file)
    }

    /// Writes `<name>.json`.
    pub fn result<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let path = self.path(&format!("{name}.json"));
        write_json(&path, value)?;
        Ok(path)
    }

    /// Writes `<name>.timing.json`.
    pub fn timing<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        write_json(&self.path(&format!("{name}.timing.json")), value)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
