use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// One `image<TAB>depth` line, with paths resolved against the manifest's
/// directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub depth: PathBuf,
}

/// Writes entries verbatim; relative paths stay relative to the manifest.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        let (i, d) = (e.image.to_string_lossy(), e.depth.to_string_lossy());
        if i.contains(['\t', '\n']) || d.contains(['\t', '\n']) {
            return Err(Error::Manifest(format!(
                "path contains a tab or newline: {i:?} / {d:?}"
            )));
        }
        out.push_str(&format!("{i}\t{d}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::Manifest(format!(
                "{}:{}: expected `image<TAB>depth`, found {line:?}",
                path.display(),
                n + 1
            )));
        }
        entries.push(ManifestEntry {
            image: base.join(fields[0]),
            depth: base.join(fields[1]),
        });
    }
    Ok(entries)
}
