use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use active_testing::dataset::{DatasetError, DatasetSource, TagFormat, DETECTIONS_FILE};

/// Named datasets a session can refer to.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    datasets: BTreeMap<String, Arc<DatasetSource>>,
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .or_else(|| path.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

impl Catalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, source: DatasetSource) {
        self.datasets.insert(name.into(), Arc::new(source));
    }

    /// A tag file or instance directory registers under its stem. Any
    /// other directory registers every dataset directly inside it.
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let mut catalog = Catalog::new();
        let io = |e: std::io::Error| DatasetError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        if !path.exists() {
            return Err(io(std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
        if !path.is_dir() || path.join(DETECTIONS_FILE).exists() {
            catalog.insert(stem(path), DatasetSource::load(path)?);
            return Ok(catalog);
        }
        let mut entries: Vec<_> = fs::read_dir(path)
            .map_err(io)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()
            .map_err(io)?;
        entries.sort();
        for entry in entries {
            let is_dataset = if entry.is_dir() {
                entry.join(DETECTIONS_FILE).exists()
            } else {
                TagFormat::from_path(&entry).is_some()
            };
            if is_dataset {
                catalog.insert(stem(&entry), DatasetSource::load(&entry)?);
            }
        }
        Ok(catalog)
    }

    pub fn get(&self, name: &str) -> Option<&Arc<DatasetSource>> {
        self.datasets.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.datasets.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.datasets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.datasets.is_empty()
    }
}
