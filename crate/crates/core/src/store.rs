//! Content-addressed artifact store.
//!
//! Layout: `<root>/<first-2-hex>/<full-hash-hex>.<ext>`. Writes go to a
//! temporary file in the target directory and are published with an atomic
//! rename, so readers never observe a partially written artifact and
//! concurrent writers of the same content are harmless.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::artifact::{Artifact, ArtifactType, Digest};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("stored file {0} holds different content than its name claims")]
    HashCollisionMismatch(PathBuf),
    #[error("artifact {0} not found")]
    NotFound(ArtifactRef),
    #[error("artifact {reference} has type {found}, expected {expected}")]
    TypeMismatch {
        reference: ArtifactRef,
        expected: ArtifactType,
        found: ArtifactType,
    },
    #[error("artifact {0} failed integrity check")]
    HashMismatch(ArtifactRef),
    #[error("invalid artifact reference `{0}`")]
    InvalidRef(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reference to a stored artifact: its type plus content digest.
///
/// Text form is `<ArtifactType>:<hex digest>`, e.g. `PersonImage:c492…`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ArtifactRef {
    pub artifact_type: ArtifactType,
    pub digest: Digest,
}

impl ArtifactRef {
    pub fn of(artifact: &Artifact) -> Self {
        ArtifactRef {
            artifact_type: artifact.artifact_type(),
            digest: artifact.content_hash(),
        }
    }

    /// Path relative to a store root.
    pub fn relative_path(&self) -> PathBuf {
        let hex = self.digest.to_hex();
        PathBuf::from(&hex[..2]).join(format!("{hex}.{}", self.artifact_type.extension()))
    }

    /// Whether `s` looks like a reference rather than a file path.
    pub fn is_ref_syntax(s: &str) -> bool {
        s.parse::<ArtifactRef>().is_ok()
    }
}

impl fmt::Display for ArtifactRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.artifact_type, self.digest)
    }
}

impl FromStr for ArtifactRef {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let invalid = || StoreError::InvalidRef(s.to_string());
        let (ty, hex) = s.split_once(':').ok_or_else(invalid)?;
        Ok(ArtifactRef {
            artifact_type: ty.parse().map_err(|_| invalid())?,
            digest: Digest::from_hex(hex).ok_or_else(invalid)?,
        })
    }
}

impl Serialize for ArtifactRef {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ArtifactRef {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Write `bytes` to `path` through a temp file and an atomic rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let tmp = dir.join(format!(".tmp-{}", uuid::Uuid::new_v4().simple()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(io_err(path))
}

#[derive(Debug, Clone)]
pub struct ArtifactStore {
    root: PathBuf,
}

impl ArtifactStore {
    /// Opens (creating if needed) a store rooted at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        Ok(ArtifactStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_of(&self, reference: &ArtifactRef) -> PathBuf {
        self.root.join(reference.relative_path())
    }

    pub fn contains(&self, reference: &ArtifactRef) -> bool {
        self.path_of(reference).is_file()
    }

    /// Stores `artifact`; storing identical content again is a no-op.
    pub fn store(&self, artifact: &Artifact) -> Result<ArtifactRef, StoreError> {
        let reference = ArtifactRef::of(artifact);
        let path = self.path_of(&reference);
        if path.is_file() {
            let existing = fs::read(&path).map_err(io_err(&path))?;
            return match Artifact::decode(reference.artifact_type, &existing) {
                Ok(a) if a.content_hash() == reference.digest => Ok(reference),
                _ => Err(StoreError::HashCollisionMismatch(path)),
            };
        }
        write_atomic(&path, &artifact.encode_payload())?;
        Ok(reference)
    }

    /// Raw payload bytes as stored on disk.
    pub fn read_payload(&self, reference: &ArtifactRef) -> Result<Vec<u8>, StoreError> {
        let path = self.path_of(reference);
        match fs::read(&path) {
            Ok(b) => Ok(b),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(StoreError::NotFound(*reference)),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    /// Loads and re-verifies an artifact.
    pub fn load(
        &self,
        reference: &ArtifactRef,
        expected_type: ArtifactType,
    ) -> Result<Artifact, StoreError> {
        if reference.artifact_type != expected_type {
            return Err(StoreError::TypeMismatch {
                reference: *reference,
                expected: expected_type,
                found: reference.artifact_type,
            });
        }
        let bytes = self.read_payload(reference)?;
        let artifact = Artifact::decode(expected_type, &bytes)
            .map_err(|_| StoreError::HashMismatch(*reference))?;
        if artifact.content_hash() != reference.digest {
            return Err(StoreError::HashMismatch(*reference));
        }
        Ok(artifact)
    }
}

pub fn store_artifact(artifact: &Artifact, store_root: &Path) -> Result<ArtifactRef, StoreError> {
    ArtifactStore::open(store_root)?.store(artifact)
}

pub fn load_artifact(
    reference: &ArtifactRef,
    expected_type: ArtifactType,
    store_root: &Path,
) -> Result<Artifact, StoreError> {
    ArtifactStore {
        root: store_root.to_path_buf(),
    }
    .load(reference, expected_type)
}
