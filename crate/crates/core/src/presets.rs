//! Catalog of evaluator heads detected on public models.
//!
//! The built-in catalog is compiled in from `presets/presets.json`. Setting
//! `EHPC_PRESETS` to a JSON file, or to a directory holding `presets.json`,
//! replaces it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pilot::EvaluatorHeadSet;

pub const PRESETS_ENV: &str = "EHPC_PRESETS";
pub const PRESETS_FILE: &str = "presets.json";

const BUILTIN: &str = include_str!("../presets/presets.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    pub num_layers: usize,
    pub num_heads: usize,
    pub layer: usize,
    pub heads: Vec<usize>,
    /// Recommended observation window, when one was published.
    #[serde(default)]
    pub observation_window: Option<usize>,
    #[serde(default)]
    pub kernel: Option<usize>,
}

impl Preset {
    pub fn head_set(&self) -> EvaluatorHeadSet {
        EvaluatorHeadSet {
            layer: self.layer,
            heads: self.heads.clone(),
            k: self.heads.len(),
            provenance: format!("preset:{}", self.name),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Catalog {
    presets: Vec<Preset>,
}

fn parse(text: &str, origin: &str) -> Result<Vec<Preset>> {
    let catalog: Catalog = serde_json::from_str(text)
        .map_err(|e| Error::Format(format!("preset catalog {origin}: {e}")))?;
    for p in &catalog.presets {
        p.head_set()
            .check(Some(p.num_heads))
            .map_err(|e| Error::Format(format!("preset `{}` in {origin}: {e}", p.name)))?;
    }
    Ok(catalog.presets)
}

fn catalog_path(root: &Path) -> PathBuf {
    if root.is_dir() {
        root.join(PRESETS_FILE)
    } else {
        root.to_path_buf()
    }
}

pub fn builtin_presets() -> Vec<Preset> {
    parse(BUILTIN, "built-in").expect("built-in preset catalog is valid")
}

/// Catalog honoring `EHPC_PRESETS`.
pub fn presets() -> Result<Vec<Preset>> {
    match std::env::var_os(PRESETS_ENV) {
        Some(root) => {
            let path = catalog_path(Path::new(&root));
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            parse(&text, &path.display().to_string())
        }
        None => Ok(builtin_presets()),
    }
}

pub fn find_preset(name: &str) -> Result<Preset> {
    presets()?
        .into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::Lookup(name.to_string()))
}

pub fn load_preset(name: &str) -> Result<EvaluatorHeadSet> {
    find_preset(name).map(|p| p.head_set())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_catalog_entries() {
        let all = builtin_presets();
        let names: Vec<_> = all.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(
            names,
            ["llama-3.1-8b-instruct", "codellama-7b", "phi-3.5-mini-instruct"]
        );
        let llama = &all[0];
        assert_eq!(llama.layer, 13);
        assert_eq!(llama.heads, [18, 13, 21, 8, 11, 1, 4, 3]);
        assert_eq!((llama.observation_window, llama.kernel), (Some(16), Some(32)));
        let phi = &all[2];
        assert_eq!((phi.observation_window, phi.kernel), (Some(4), Some(32)));
    }

    #[test]
    fn file_or_directory_path() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(catalog_path(dir.path()), dir.path().join(PRESETS_FILE));
        let file = dir.path().join("custom.json");
        assert_eq!(catalog_path(&file), file);
    }

    #[test]
    fn rejects_duplicate_heads() {
        let text = r#"{"presets":[{"name":"x","num_layers":2,"num_heads":4,"layer":1,"heads":[1,1]}]}"#;
        assert!(matches!(parse(text, "test"), Err(Error::Format(_))));
    }
}
