use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::types::ScanMetadata;
use crate::error::{Error, Result};

/// One entry of a dataset manifest. Relative paths resolve against the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub case_id: String,
    pub volume_path: PathBuf,
    pub mask_path: PathBuf,
    pub metadata: ScanMetadata,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub cases: Vec<CaseEntry>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, cases: Vec<CaseEntry>) -> Result<Self> {
        let m = Self { root: root.into(), cases };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.cases {
            c.metadata.validate()?;
            if !seen.insert(c.case_id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate case_id {}", c.case_id)));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cases: Vec<CaseEntry> = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(root, cases)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(&self.cases).map_err(|e| Error::json("manifest", e))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn volume_path(&self, c: &CaseEntry) -> PathBuf {
        self.resolve(&c.volume_path)
    }

    pub fn mask_path(&self, c: &CaseEntry) -> PathBuf {
        self.resolve(&c.mask_path)
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn subset(&self, cases: Vec<CaseEntry>) -> Self {
        Self { root: self.root.clone(), cases }
    }
}
