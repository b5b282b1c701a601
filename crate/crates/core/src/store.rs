//! Content-addressed resource store.
//!
//! Resources are addressed as `resources/<hex digest>`. Reads return the
//! stored bytes as-is; verifying them against an expected digest is the
//! caller's job, so tampering on disk is detectable rather than hidden.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::digest::{compute_digest, Digest};

pub const URI_PREFIX: &str = "resources/";

pub fn uri_for(digest: &Digest) -> String {
    format!("{URI_PREFIX}{}", digest.to_hex())
}

fn key_of(uri: &str) -> Option<&str> {
    let key = uri.strip_prefix(URI_PREFIX)?;
    Digest::from_hex(key).ok().map(|_| key)
}

pub trait ResourceStore {
    /// Store `body` and return its uri and digest.
    fn put(&mut self, body: &[u8]) -> io::Result<(String, Digest)>;

    /// Fetch the bytes at `uri`, or `None` if nothing is stored there.
    fn get(&self, uri: &str) -> io::Result<Option<Vec<u8>>>;
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MemoryResourceStore {
    items: BTreeMap<String, Vec<u8>>,
}

impl MemoryResourceStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<u8>)> {
        self.items.iter()
    }

    /// Replace the bytes stored at `uri` without re-addressing them.
    pub fn overwrite(&mut self, uri: &str, body: Vec<u8>) {
        if let Some(key) = key_of(uri) {
            self.items.insert(key.to_string(), body);
        }
    }

    pub fn remove(&mut self, uri: &str) -> Option<Vec<u8>> {
        key_of(uri).and_then(|k| self.items.remove(k))
    }

    /// Write every resource to `<dir>/<hex>`.
    pub fn save_to_dir(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        for (key, body) in &self.items {
            fs::write(dir.join(key), body)?;
        }
        Ok(())
    }
}

impl ResourceStore for MemoryResourceStore {
    fn put(&mut self, body: &[u8]) -> io::Result<(String, Digest)> {
        let digest = compute_digest(body);
        self.items.insert(digest.to_hex(), body.to_vec());
        Ok((uri_for(&digest), digest))
    }

    fn get(&self, uri: &str) -> io::Result<Option<Vec<u8>>> {
        Ok(key_of(uri).and_then(|k| self.items.get(k).cloned()))
    }
}

/// A store backed by a directory holding one file per resource.
#[derive(Debug, Clone)]
pub struct DirResourceStore {
    root: PathBuf,
}

impl DirResourceStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DirResourceStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl ResourceStore for DirResourceStore {
    fn put(&mut self, body: &[u8]) -> io::Result<(String, Digest)> {
        let digest = compute_digest(body);
        fs::create_dir_all(&self.root)?;
        fs::write(self.root.join(digest.to_hex()), body)?;
        Ok((uri_for(&digest), digest))
    }

    fn get(&self, uri: &str) -> io::Result<Option<Vec<u8>>> {
        let Some(key) = key_of(uri) else {
            return Ok(None);
        };
        match fs::read(self.root.join(key)) {
            Ok(bytes) => Ok(Some(bytes)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn memory_store_addresses_by_digest() {
        let mut store = MemoryResourceStore::new();
        let (uri, digest) = store.put(b"hello").unwrap();
        assert_eq!(uri, format!("resources/{}", compute_digest(b"hello")));
        assert_eq!(digest, compute_digest(b"hello"));
        assert_eq!(store.get(&uri).unwrap().unwrap(), b"hello");
        assert_eq!(store.get("resources/zz").unwrap(), None);
        assert_eq!(store.get("elsewhere").unwrap(), None);
    }

    #[test]
    fn dir_store_round_trip_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = DirResourceStore::new(dir.path().join("resources"));
        let (uri, digest) = store.put(b"body").unwrap();
        assert!(dir.path().join("resources").join(digest.to_hex()).exists());
        assert_eq!(store.get(&uri).unwrap().unwrap(), b"body");
        fs::remove_file(dir.path().join("resources").join(digest.to_hex())).unwrap();
        assert_eq!(store.get(&uri).unwrap(), None);
    }
}
