//! Dataset manifests and in-memory datasets. Images are CTNS tensor files
//! (H x W x 1, values in [0, 1]).

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::error::{CapsError, Result};
use crate::tensor::Tensor;

pub const MANIFEST_HEADER: &str = "path,classes";

#[derive(Debug, Clone)]
pub struct Manifest {
    /// (resolved image path, class indices)
    pub entries: Vec<(PathBuf, Vec<usize>)>,
}

/// Rows of `path,c0;c1;...` after a fixed header. Class indices must lie in
/// [0, num_classes); duplicate paths are rejected.
pub fn load_manifest(path: &Path, num_classes: usize) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CapsError::Io(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == MANIFEST_HEADER => {}
        other => {
            return Err(CapsError::Format(format!(
                "manifest header must be `{MANIFEST_HEADER}`, got {:?}",
                other.map(|(_, h)| h)
            )))
        }
    }
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (p, classes) = line.split_once(',').ok_or_else(|| {
            CapsError::Format(format!("manifest row {}: expected `path,classes`", lineno + 1))
        })?;
        let resolved = base.join(p.trim());
        if !seen.insert(resolved.clone()) {
            return Err(CapsError::Data(format!(
                "manifest row {}: duplicate path {}",
                lineno + 1,
                resolved.display()
            )));
        }
        if !resolved.exists() {
            return Err(CapsError::Data(format!(
                "manifest row {}: path does not resolve: {}",
                lineno + 1,
                resolved.display()
            )));
        }
        let mut idxs = Vec::new();
        for c in classes.split(';') {
            let c = c.trim();
            if c.is_empty() {
                continue;
            }
            let idx: usize = c.parse().map_err(|_| {
                CapsError::Format(format!("manifest row {}: bad class index `{c}`", lineno + 1))
            })?;
            if idx >= num_classes {
                return Err(CapsError::Data(format!(
                    "manifest row {}: class index {idx} out of range [0, {num_classes})",
                    lineno + 1
                )));
            }
            idxs.push(idx);
        }
        entries.push((resolved, idxs));
    }
    Ok(Manifest { entries })
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    /// Multi-hot label vectors of length J.
    pub labels: Vec<Vec<u8>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i].clone()).collect(),
        }
    }
}

pub fn load_dataset(manifest: &Manifest, num_classes: usize) -> Result<Dataset> {
    let mut images = Vec::with_capacity(manifest.entries.len());
    let mut labels = Vec::with_capacity(manifest.entries.len());
    for (path, classes) in &manifest.entries {
        let img = Tensor::load_ctns(path)?;
        if img.rank() != 3 || img.shape()[2] != 1 {
            return Err(CapsError::Data(format!(
                "{}: expected H x W x 1 image tensor, got {:?}",
                path.display(),
                img.shape()
            )));
        }
        let mut hot = vec![0u8; num_classes];
        for &c in classes {
            hot[c] = 1;
        }
        images.push(img);
        labels.push(hot);
    }
    Ok(Dataset { images, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DTYPE_F32;

    fn write_img(dir: &Path, name: &str) -> PathBuf {
        let p = dir.join(name);
        Tensor::zeros(vec![4, 4, 1]).save_ctns(&p, DTYPE_F32).unwrap();
        p
    }

    #[test]
    fn loads_and_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        write_img(dir.path(), "a.ctns");
        write_img(dir.path(), "b.ctns");
        let mpath = dir.path().join("m.csv");
        std::fs::write(&mpath, "path,classes\na.ctns,0;2\nb.ctns,1\n").unwrap();
        let m = load_manifest(&mpath, 3).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[0].1, vec![0, 2]);
        let ds = load_dataset(&m, 3).unwrap();
        assert_eq!(ds.labels[0], vec![1, 0, 1]);
        assert_eq!(ds.labels[1], vec![0, 1, 0]);
    }

    #[test]
    fn out_of_range_class_reports_row() {
        let dir = tempfile::tempdir().unwrap();
        write_img(dir.path(), "a.ctns");
        let mpath = dir.path().join("m.csv");
        std::fs::write(&mpath, "path,classes\na.ctns,5\n").unwrap();
        let err = load_manifest(&mpath, 3).unwrap_err().to_string();
        assert!(err.contains("row 2") && err.contains("out of range"), "{err}");
    }

    #[test]
    fn duplicate_paths_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_img(dir.path(), "a.ctns");
        let mpath = dir.path().join("m.csv");
        std::fs::write(&mpath, "path,classes\na.ctns,0\na.ctns,1\n").unwrap();
        let err = load_manifest(&mpath, 3).unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn missing_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mpath = dir.path().join("m.csv");
        std::fs::write(&mpath, "a.ctns,0\n").unwrap();
        assert!(load_manifest(&mpath, 3).is_err());
    }
}
