//! Content-addressed artifact cache. Keys are SHA-256 over labeled input
//! parts (mesh bytes, relevant config fields), so warm reruns reload
//! bit-identical artifacts.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::io;

#[derive(Debug, Clone)]
pub struct Cache {
    dir: PathBuf,
}

/// Hex SHA-256 over length-delimited labeled parts; labels keep
/// `("ab", "c")` and `("a", "bc")` distinct.
pub fn content_key<'a>(parts: impl IntoIterator<Item = (&'a str, &'a [u8])>) -> String {
    let mut hasher = Sha256::new();
    for (label, bytes) in parts {
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label.as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(bytes);
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl Cache {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, kind: &str, key: &str, ext: &str) -> PathBuf {
        self.dir.join(format!("{kind}-{key}.{ext}"))
    }

    pub fn has(&self, kind: &str, key: &str, ext: &str) -> bool {
        self.path(kind, key, ext).exists()
    }

    /// Loads the cached matrix or computes, stores, and returns it.
    pub fn matrix<F>(&self, kind: &str, key: &str, compute: F) -> Result<DMatrix<f64>>
    where
        F: FnOnce() -> Result<DMatrix<f64>>,
    {
        let path = self.path(kind, key, "fmat");
        if path.exists() {
            return io::load_fmat(&path);
        }
        let value = compute()?;
        io::save_fmat(&value, &path)?;
        Ok(value)
    }

    /// Loads the cached JSON value or computes, stores, and returns it.
    pub fn json<T, F>(&self, kind: &str, key: &str, compute: F) -> Result<T>
    where
        T: serde::Serialize + serde::de::DeserializeOwned,
        F: FnOnce() -> Result<T>,
    {
        let path = self.path(kind, key, "json");
        if path.exists() {
            return io::load_json(&path);
        }
        let value = compute()?;
        io::save_json(&value, &path)?;
        Ok(value)
    }
}
