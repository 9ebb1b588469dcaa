use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest root.
    pub path: PathBuf,
    pub class_id: usize,
}

/// Image-folder dataset index. Class ids are dense and follow the
/// lexicographic order of class names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub class_names: Vec<String>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.class_id).collect()
    }

    pub fn absolute_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.entries[i].path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Indexes `root/<class>/<image>`. Files whose header cannot be decoded are
/// skipped and returned alongside the manifest.
pub fn load_image_folder(root: &Path) -> Result<(DatasetManifest, Vec<PathBuf>)> {
    let mut class_names: Vec<String> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().map(|t| t.is_dir()).unwrap_or(false))
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    class_names.sort();
    if class_names.is_empty() {
        return Err(Error::Empty(format!("no class directories under {}", root.display())));
    }
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for (class_id, name) in class_names.iter().enumerate() {
        let mut files: Vec<PathBuf> = fs::read_dir(root.join(name))?
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
            .map(|e| e.path())
            .collect();
        files.sort();
        for file in files {
            if image::image_dimensions(&file).is_ok() {
                let rel = file.strip_prefix(root).expect("listed under root").to_path_buf();
                entries.push(ManifestEntry { path: rel, class_id });
            } else {
                skipped.push(file);
            }
        }
    }
    if !skipped.is_empty() {
        log::warn!("skipped {} unreadable files under {}", skipped.len(), root.display());
    }
    if entries.is_empty() {
        return Err(Error::Empty(format!("no readable images under {}", root.display())));
    }
    Ok((
        DatasetManifest {
            root: root.to_path_buf(),
            entries,
            class_names,
        },
        skipped,
    ))
}

/// Up to `k` indices per class drawn without replacement; output keeps the
/// original index order.
pub fn subsample_indices_per_class(labels: &[usize], classes: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::config("subsample_per_class", "k must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for c in 0..classes {
        let mut members: Vec<usize> = labels.iter().enumerate().filter(|(_, &y)| y == c).map(|(i, _)| i).collect();
        if members.len() < k {
            log::warn!("class {c} has {} samples, fewer than the requested {k}", members.len());
        }
        members.shuffle(&mut rng);
        members.truncate(k);
        keep.extend(members);
    }
    keep.sort_unstable();
    Ok(keep)
}

pub fn subsample_per_class(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<DatasetManifest> {
    let keep = subsample_indices_per_class(&manifest.labels(), manifest.classes(), k, seed)?;
    Ok(DatasetManifest {
        root: manifest.root.clone(),
        entries: keep.into_iter().map(|i| manifest.entries[i].clone()).collect(),
        class_names: manifest.class_names.clone(),
    })
}
