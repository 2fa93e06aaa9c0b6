use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::AdapterError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: PathBuf,
    pub activation_path: PathBuf,
}

/// `{images: [{id, image_path, activation_path}], layer, model}`. Relative
/// paths are resolved against the manifest's own directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchManifest {
    pub images: Vec<ManifestEntry>,
    pub layer: String,
    pub model: String,
}

impl BatchManifest {
    pub fn load(path: &Path) -> Result<Self, AdapterError> {
        let text = fs::read_to_string(path).map_err(|e| AdapterError::io(path, e))?;
        let mut manifest: BatchManifest = serde_json::from_str(&text)
            .map_err(|e| AdapterError::Manifest(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for entry in &mut manifest.images {
            entry.image_path = resolve(base, &entry.image_path);
            entry.activation_path = resolve(base, &entry.activation_path);
        }
        manifest.check_unique_ids()?;
        Ok(manifest)
    }

    /// Writes the manifest with paths made relative to its directory where
    /// possible.
    pub fn save(&self, path: &Path) -> Result<(), AdapterError> {
        let base = path.parent().unwrap_or(Path::new(""));
        let mut out = self.clone();
        for entry in &mut out.images {
            entry.image_path = relativize(base, &entry.image_path);
            entry.activation_path = relativize(base, &entry.activation_path);
        }
        let text = serde_json::to_string_pretty(&out).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| AdapterError::io(path, e))
    }

    fn check_unique_ids(&self) -> Result<(), AdapterError> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.images {
            if !seen.insert(e.id.as_str()) {
                return Err(AdapterError::Manifest(format!("duplicate image id {:?}", e.id)));
            }
        }
        Ok(())
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn relativize(base: &Path, p: &Path) -> PathBuf {
    p.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf())
}
