//! Dataset manifests: CSV rows of (audio path, label, fold) with a required
//! header.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub path: PathBuf,
    pub label: String,
    pub fold: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Distinct labels in first-appearance order.
    pub fn label_set(&self) -> Vec<String> {
        let mut labels = Vec::new();
        for row in &self.rows {
            if !labels.contains(&row.label) {
                labels.push(row.label.clone());
            }
        }
        labels
    }

    pub fn folds(&self) -> Vec<u32> {
        let mut folds: Vec<u32> = self.rows.iter().map(|r| r.fold).collect();
        folds.sort_unstable();
        folds.dedup();
        folds
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::format(format!("cannot open manifest {}: {e}", path.display())))?;
    {
        let headers = reader
            .headers()
            .map_err(|e| Error::format(format!("manifest header: {e}")))?;
        let expect = ["path", "label", "fold"];
        if headers.len() != 3 || headers.iter().zip(expect).any(|(h, e)| h != e) {
            return Err(Error::format(format!(
                "manifest header must be path,label,fold, got {headers:?}"
            )));
        }
    }
    let base = path.parent().unwrap_or(Path::new(""));
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::format(format!("manifest row {}: {e}", i + 2)))?;
        let raw_path = record.get(0).unwrap_or("");
        if raw_path.is_empty() {
            return Err(Error::format(format!("manifest row {}: empty path", i + 2)));
        }
        let label = record.get(1).unwrap_or("").to_string();
        let fold_raw = record.get(2).unwrap_or("");
        let fold: u32 = fold_raw
            .trim()
            .parse()
            .map_err(|_| Error::format(format!("manifest row {}: bad fold {fold_raw:?}", i + 2)))?;
        let p = Path::new(raw_path);
        let path = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        rows.push(ManifestRow { path, label, fold });
    }
    Ok(Manifest { rows })
}

pub fn save_manifest(path: &Path, manifest: &Manifest, relative_to: Option<&Path>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::format(format!("cannot write manifest: {e}")))?;
    writer
        .write_record(["path", "label", "fold"])
        .map_err(|e| Error::format(format!("manifest write: {e}")))?;
    for row in &manifest.rows {
        let p = match relative_to {
            Some(base) => row.path.strip_prefix(base).unwrap_or(&row.path).to_path_buf(),
            None => row.path.clone(),
        };
        writer
            .write_record([p.to_string_lossy().as_ref(), &row.label, &row.fold.to_string()])
            .map_err(|e| Error::format(format!("manifest write: {e}")))?;
    }
    writer.flush()?;
    Ok(())
}
