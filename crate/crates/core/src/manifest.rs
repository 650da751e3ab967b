//! Dataset manifests: CSV with header `path,label,fold`, one clip per row.
//! Relative paths resolve against the manifest's directory.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frontend::{Frontend, LogMelFeature};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Path as written in the manifest.
    pub path: PathBuf,
    pub label: usize,
    pub fold: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    /// Directory relative paths resolve against.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Self {
        Self {
            root: root.into(),
            entries,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::Reader::from_reader(file);
        let header = reader.headers()?.clone();
        if header.iter().map(str::trim).collect::<Vec<_>>() != ["path", "label", "fold"] {
            return Err(Error::Format(format!(
                "{}: manifest header must be path,label,fold",
                path.display()
            )));
        }
        let mut entries = Vec::new();
        for (i, row) in reader.records().enumerate() {
            let row = row?;
            let bad = |what: &str| Error::Format(format!("{} row {}: {what}", path.display(), i + 2));
            let label = row[1]
                .trim()
                .parse()
                .map_err(|_| bad("label must be a non-negative integer"))?;
            let fold = row[2]
                .trim()
                .parse()
                .map_err(|_| bad("fold must be a non-negative integer"))?;
            if row[0].trim().is_empty() {
                return Err(bad("empty path"));
            }
            entries.push(ManifestEntry {
                path: PathBuf::from(row[0].trim()),
                label,
                fold,
            });
        }
        if entries.is_empty() {
            return Err(Error::Config(format!("{}: manifest has no rows", path.display())));
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Format(format!("{other:?}")),
        })?;
        w.write_record(["path", "label", "fold"])?;
        for e in &self.entries {
            w.write_record([
                e.path.to_string_lossy().as_ref(),
                &e.label.to_string(),
                &e.fold.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// One more than the largest label.
    pub fn n_classes(&self) -> usize {
        self.entries.iter().map(|e| e.label + 1).max().unwrap_or(0)
    }

    pub fn folds(&self) -> Vec<u32> {
        let mut f: Vec<u32> = self.entries.iter().map(|e| e.fold).collect();
        f.sort_unstable();
        f.dedup();
        f
    }

    /// Rows in `fold`, in manifest order.
    pub fn with_fold(&self, fold: u32) -> Manifest {
        self.filtered(|e| e.fold == fold)
    }

    /// Rows outside `fold`, in manifest order.
    pub fn without_fold(&self, fold: u32) -> Manifest {
        self.filtered(|e| e.fold != fold)
    }

    fn filtered(&self, keep: impl Fn(&ManifestEntry) -> bool) -> Manifest {
        Manifest {
            root: self.root.clone(),
            entries: self.entries.iter().filter(|e| keep(e)).cloned().collect(),
        }
    }

    /// Cache location of an entry's feature: its manifest path under `cache_dir`
    /// with the extension replaced by `.tsfa`.
    pub fn cache_path(&self, cache_dir: &Path, entry: &ManifestEntry) -> PathBuf {
        let rel: PathBuf = entry
            .path
            .components()
            .filter(|c| matches!(c, std::path::Component::Normal(_)))
            .collect();
        cache_dir.join(rel).with_extension("tsfa")
    }
}

/// Features for every row, in manifest order.
///
/// Reads the cached `.tsfa` when `cache_dir` holds one, otherwise
/// featurizes the audio. Clips are processed in parallel.
pub fn load_features(
    manifest: &Manifest,
    frontend: &Frontend,
    cache_dir: Option<&Path>,
) -> Result<Vec<LogMelFeature<f32>>> {
    manifest
        .entries
        .par_iter()
        .map(|e| {
            if let Some(dir) = cache_dir {
                let cached = manifest.cache_path(dir, e);
                if cached.exists() {
                    return LogMelFeature::load(&cached, &frontend.config);
                }
            }
            frontend.featurize_path(manifest.resolve(e))
        })
        .collect()
}
