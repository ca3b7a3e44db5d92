use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::EmbeddingSet;
use crate::dataset::StoneClass;
use crate::error::{Error, Result};

/// Writes to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// Pretty JSON with a trailing newline, written atomically.
pub fn write_json<V: Serialize + ?Sized>(path: &Path, value: &V) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<V: DeserializeOwned>(path: &Path) -> Result<V> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Columns `feature_0..feature_{d-1}, label, x, y, z`; coordinates are blank before projection.
pub fn write_embeddings_csv(path: &Path, set: &EmbeddingSet) -> Result<()> {
    let d = set.features.ncols();
    let mut out = String::new();
    for j in 0..d {
        let _ = write!(out, "feature_{j},");
    }
    out.push_str("label,x,y,z\n");
    for (i, row) in set.features.rows().into_iter().enumerate() {
        for v in row {
            let _ = write!(out, "{v},");
        }
        let label = StoneClass::from_index(set.labels[i]).map_or("?", |c| c.as_str());
        out.push_str(label);
        match &set.coords3d {
            Some(c) => {
                let _ = writeln!(out, ",{},{},{}", c[[i, 0]], c[[i, 1]], c[[i, 2]]);
            }
            None => out.push_str(",,,\n"),
        }
    }
    write_atomic(path, out.as_bytes())
}
