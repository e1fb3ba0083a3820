//! Key-value document store.
//!
//! Values are opaque bytes addressed by `(collection, key)`. Collections may
//! nest with `/`; keys may not. Both are restricted to `[A-Za-z0-9._-]`
//! segments so that the file-backed layout is a plain directory tree.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("invalid {what} `{name}`")]
    InvalidName { what: &'static str, name: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub trait DocumentStore: Send + Sync {
    fn get(&self, collection: &str, key: &str) -> Result<Option<Vec<u8>>, StoreError>;

    /// Replaces any previous value atomically.
    fn put(&self, collection: &str, key: &str, value: &[u8]) -> Result<(), StoreError>;

    /// Keys of the collection in ascending order.
    fn list(&self, collection: &str) -> Result<Vec<String>, StoreError>;

    fn delete(&self, collection: &str, key: &str) -> Result<bool, StoreError>;
}

fn valid_segment(s: &str) -> bool {
    !s.is_empty()
        && s != "."
        && s != ".."
        && s.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
}

fn check(collection: &str, key: Option<&str>) -> Result<(), StoreError> {
    if !collection.split('/').all(valid_segment) {
        return Err(StoreError::InvalidName {
            what: "collection",
            name: collection.to_string(),
        });
    }
    if let Some(k) = key {
        // A trailing `.tmp` is reserved for in-flight writes.
        if !valid_segment(k) || k.ends_with(".tmp") {
            return Err(StoreError::InvalidName {
                what: "key",
                name: k.to_string(),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Default)]
pub struct MemoryStore {
    data: RwLock<BTreeMap<String, BTreeMap<String, Vec<u8>>>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl DocumentStore for MemoryStore {
    fn get(&self, collection: &str, key: &str) -> Result<Option<Vec<u8>>, StoreError> {
        check(collection, Some(key))?;
        let data = self.data.read().unwrap();
        Ok(data.get(collection).and_then(|c| c.get(key)).cloned())
    }

    fn put(&self, collection: &str, key: &str, value: &[u8]) -> Result<(), StoreError> {
        check(collection, Some(key))?;
        let mut data = self.data.write().unwrap();
        data.entry(collection.to_string())
            .or_default()
            .insert(key.to_string(), value.to_vec());
        Ok(())
    }

    fn list(&self, collection: &str) -> Result<Vec<String>, StoreError> {
        check(collection, None)?;
        let data = self.data.read().unwrap();
        Ok(data
            .get(collection)
            .map(|c| c.keys().cloned().collect())
            .unwrap_or_default())
    }

    fn delete(&self, collection: &str, key: &str) -> Result<bool, StoreError> {
        check(collection, Some(key))?;
        let mut data = self.data.write().unwrap();
        Ok(data
            .get_mut(collection)
            .is_some_and(|c| c.remove(key).is_some()))
    }
}

/// One file per value at `<root>/<collection>/<key>`. Writes go through a
/// sibling temp file and a rename.
#[derive(Debug, Clone)]
pub struct FileStore {
    root: PathBuf,
}

impl FileStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|source| StoreError::Io {
            path: root.clone(),
            source,
        })?;
        Ok(FileStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, collection: &str, key: &str) -> PathBuf {
        let mut p = self.root.clone();
        p.extend(collection.split('/'));
        p.push(key);
        p
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl DocumentStore for FileStore {
    fn get(&self, collection: &str, key: &str) -> Result<Option<Vec<u8>>, StoreError> {
        check(collection, Some(key))?;
        let path = self.path(collection, key);
        match fs::read(&path) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io(&path)(e)),
        }
    }

    fn put(&self, collection: &str, key: &str, value: &[u8]) -> Result<(), StoreError> {
        check(collection, Some(key))?;
        let path = self.path(collection, key);
        let dir = path.parent().expect("store paths have a parent");
        fs::create_dir_all(dir).map_err(io(dir))?;
        let tmp = path.with_file_name(format!("{key}.tmp"));
        let mut f = fs::File::create(&tmp).map_err(io(&tmp))?;
        f.write_all(value).and_then(|_| f.sync_all()).map_err(io(&tmp))?;
        fs::rename(&tmp, &path).map_err(io(&path))
    }

    fn list(&self, collection: &str) -> Result<Vec<String>, StoreError> {
        check(collection, None)?;
        let mut dir = self.root.clone();
        dir.extend(collection.split('/'));
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io(&dir)(e)),
        };
        let mut keys = Vec::new();
        for e in entries {
            let e = e.map_err(io(&dir))?;
            if !e.file_type().map_err(io(&dir))?.is_file() {
                continue;
            }
            if let Some(name) = e.file_name().to_str() {
                if !name.ends_with(".tmp") {
                    keys.push(name.to_string());
                }
            }
        }
        keys.sort();
        Ok(keys)
    }

    fn delete(&self, collection: &str, key: &str) -> Result<bool, StoreError> {
        check(collection, Some(key))?;
        let path = self.path(collection, key);
        match fs::remove_file(&path) {
            Ok(()) => Ok(true),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
            Err(e) => Err(io(&path)(e)),
        }
    }
}
