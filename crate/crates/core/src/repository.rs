//! Off-chain content-addressed storage with mirroring.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::crypto::{digest, Digest};
use crate::ledger::Chain;

pub const DEFAULT_STORES: [&str; 3] = ["primary", "mirror-a", "mirror-b"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RepoError {
    #[error("mirror count {requested} outside 1..={available}")]
    MirrorCount { requested: usize, available: usize },
    #[error("no store named {0:?}")]
    UnknownStore(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredObject {
    pub content_hash: Digest,
    pub bytes: Vec<u8>,
    pub mirrors: BTreeSet<String>,
}

/// Result of a lookup: the verified bytes, if any copy was intact, plus the
/// stores whose copy failed to re-hash.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Fetched {
    pub bytes: Option<Vec<u8>>,
    pub corrupt: Vec<String>,
}

#[derive(Debug, Clone)]
struct Store {
    name: String,
    objects: BTreeMap<Digest, Vec<u8>>,
}

#[derive(Debug, Clone)]
pub struct Repository {
    stores: Vec<Store>,
}

impl Default for Repository {
    fn default() -> Self {
        Self::new(&DEFAULT_STORES)
    }
}

impl Repository {
    pub fn new(names: &[&str]) -> Self {
        let stores = names
            .iter()
            .map(|n| Store {
                name: n.to_string(),
                objects: BTreeMap::new(),
            })
            .collect();
        Self { stores }
    }

    pub fn store_names(&self) -> Vec<&str> {
        self.stores.iter().map(|s| s.name.as_str()).collect()
    }

    /// Replicates `bytes` into the first `mirrors` stores.
    pub fn put(&mut self, bytes: &[u8], mirrors: usize) -> Result<Digest, RepoError> {
        if mirrors == 0 || mirrors > self.stores.len() {
            return Err(RepoError::MirrorCount {
                requested: mirrors,
                available: self.stores.len(),
            });
        }
        let hash = digest(bytes);
        for store in &mut self.stores[..mirrors] {
            store.objects.insert(hash, bytes.to_vec());
        }
        Ok(hash)
    }

    pub fn fetch(&self, hash: &Digest) -> Fetched {
        let mut out = Fetched::default();
        for store in &self.stores {
            let Some(copy) = store.objects.get(hash) else {
                continue;
            };
            if digest(copy) == *hash {
                if out.bytes.is_none() {
                    out.bytes = Some(copy.clone());
                }
            } else {
                out.corrupt.push(store.name.clone());
            }
        }
        out
    }

    pub fn get(&self, hash: &Digest) -> Option<Vec<u8>> {
        self.fetch(hash).bytes
    }

    pub fn object(&self, hash: &Digest) -> Option<StoredObject> {
        let bytes = self.get(hash)?;
        let mirrors = self
            .stores
            .iter()
            .filter(|s| s.objects.get(hash).is_some_and(|c| digest(c) == *hash))
            .map(|s| s.name.clone())
            .collect();
        Some(StoredObject {
            content_hash: *hash,
            bytes,
            mirrors,
        })
    }

    pub fn hashes(&self) -> BTreeSet<Digest> {
        self.stores
            .iter()
            .flat_map(|s| s.objects.keys().copied())
            .collect()
    }

    /// Fault injection: rewrite one store's copy in place.
    pub fn corrupt(
        &mut self,
        store: &str,
        hash: &Digest,
        f: impl FnOnce(&mut Vec<u8>),
    ) -> Result<bool, RepoError> {
        let s = self.store_mut(store)?;
        Ok(match s.objects.get_mut(hash) {
            Some(copy) => {
                f(copy);
                true
            }
            None => false,
        })
    }

    pub fn remove(&mut self, store: &str, hash: &Digest) -> Result<bool, RepoError> {
        Ok(self.store_mut(store)?.objects.remove(hash).is_some())
    }

    fn store_mut(&mut self, name: &str) -> Result<&mut Store, RepoError> {
        self.stores
            .iter_mut()
            .find(|s| s.name == name)
            .ok_or_else(|| RepoError::UnknownStore(name.to_string()))
    }

    /// Writes every retrievable object to `dir`, one file per hex hash.
    pub fn export_to_dir(&self, dir: &Path) -> io::Result<usize> {
        let store = DirStore::create(dir)?;
        let mut n = 0;
        for hash in self.hashes() {
            if let Some(bytes) = self.get(&hash) {
                store.put(&bytes)?;
                n += 1;
            }
        }
        Ok(n)
    }
}

/// True iff `hash` appears in a registry record on the mined chain.
pub fn verify_anchored(hash: &Digest, chain: &Chain) -> bool {
    chain.contracts().registry.references(hash)
}

/// Directory-backed store: each object is a file named by its hex hash.
#[derive(Debug, Clone)]
pub struct DirStore {
    root: PathBuf,
}

impl DirStore {
    pub fn open(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    pub fn create(root: &Path) -> io::Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self::open(root))
    }

    pub fn put(&self, bytes: &[u8]) -> io::Result<Digest> {
        let hash = digest(bytes);
        fs::write(self.root.join(hash.to_hex()), bytes)?;
        Ok(hash)
    }

    /// `Ok(None)` when the file is absent or its contents do not re-hash.
    pub fn get(&self, hash: &Digest) -> io::Result<Option<Vec<u8>>> {
        match fs::read(self.root.join(hash.to_hex())) {
            Ok(bytes) if digest(&bytes) == *hash => Ok(Some(bytes)),
            Ok(_) => Ok(None),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop, prop_assert, proptest};

    #[test]
    fn put_get_round_trip() {
        let mut repo = Repository::default();
        let h = repo.put(b"hello", 1).unwrap();
        assert_eq!(h, digest(b"hello"));
        assert_eq!(repo.put(b"hello", 1).unwrap(), h);
        assert_eq!(repo.get(&h).unwrap(), b"hello");
        assert_eq!(repo.get(&digest(b"nope")), None);
        assert_eq!(repo.object(&h).unwrap().mirrors.len(), 1);
    }

    #[test]
    fn mirror_count_bounds() {
        let mut repo = Repository::default();
        assert_eq!(
            repo.put(b"x", 4),
            Err(RepoError::MirrorCount {
                requested: 4,
                available: 3
            })
        );
        assert!(repo.put(b"x", 0).is_err());
        assert!(repo.put(b"x", 3).is_ok());
    }

    #[test]
    fn corrupt_copy_is_skipped_and_flagged() {
        let mut repo = Repository::default();
        let h = repo.put(b"payload", 2).unwrap();
        repo.corrupt("primary", &h, |b| b[0] ^= 1).unwrap();
        let f = repo.fetch(&h);
        assert_eq!(f.bytes.as_deref(), Some(&b"payload"[..]));
        assert_eq!(f.corrupt, vec!["primary".to_string()]);

        repo.corrupt("mirror-a", &h, |b| b.push(0)).unwrap();
        let f = repo.fetch(&h);
        assert_eq!(f.bytes, None);
        assert_eq!(f.corrupt.len(), 2);
    }

    #[test]
    fn dir_store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut repo = Repository::default();
        let h = repo.put(b"abc", 2).unwrap();
        assert_eq!(repo.export_to_dir(dir.path()).unwrap(), 1);
        let ds = DirStore::open(dir.path());
        assert_eq!(ds.get(&h).unwrap().unwrap(), b"abc");
        fs::write(dir.path().join(h.to_hex()), b"abd").unwrap();
        assert_eq!(ds.get(&h).unwrap(), None);
        assert_eq!(ds.get(&digest(b"zzz")).unwrap(), None);
    }

    proptest! {
        #[test]
        fn get_never_returns_wrong_bytes(
            objs in prop::collection::vec((prop::collection::vec(any::<u8>(), 1..64), 1usize..=3, any::<u8>(), 0usize..64), 1..20)
        ) {
            let mut repo = Repository::default();
            for (bytes, n, mask, pos) in &objs {
                let h = repo.put(bytes, *n).unwrap();
                let store = DEFAULT_STORES[pos % 3];
                repo.corrupt(store, &h, |b| { let i = pos % b.len(); b[i] ^= mask; }).unwrap();
            }
            for (bytes, _, _, _) in &objs {
                let h = digest(bytes);
                if let Some(got) = repo.get(&h) {
                    prop_assert!(digest(&got) == h);
                }
            }
        }
    }
}
