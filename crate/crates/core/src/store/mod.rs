//! Content-addressed, append-only object store.
//!
//! Layout under the store root:
//!
//! ```text
//! objects/ab/cdef...   CAS objects, keyed by SHA-256 of their uncompressed bytes
//! refs/<layer>         latest commit hash of a layer, as hex text
//! memo/<key>           memoized task outputs (JSON)
//! prov/<ref>           provenance record hash for a produced object
//! runs/<run id>        run record hash
//! ```
//!
//! Object files carry a one-byte codec prefix (0 = raw, 1 = zlib/Deflate)
//! followed by the payload. Identity is always over the uncompressed bytes.

mod chunk;
mod manifest;
pub mod quantize;

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::ZlibDecoder;
use flate2::write::ZlibEncoder;
use serde::de::DeserializeOwned;
use serde::Serialize;

pub use chunk::{Chunk, ChunkRef, DType};
pub use manifest::{diff_versions, Commit, LayerVersion, RasterKind, TileKey};

use crate::canonical::{to_canonical_json, Digest};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("store i/o: {0}")]
    Io(#[from] io::Error),
    #[error("missing object {0}")]
    MissingObject(Digest),
    #[error("object {digest} is corrupt: {detail}")]
    Corruption { digest: Digest, detail: String },
    #[error("manifest references missing chunk {0}")]
    DanglingRef(Digest),
    #[error("manifest for {0} does not cover its tile grid")]
    IncompleteManifest(String),
    #[error("layer geometries differ")]
    GeometryMismatch,
    #[error("invalid chunk: {0}")]
    InvalidChunk(String),
    #[error("lossy quantization needs a float chunk")]
    NotFloat,
    #[error("quantization bound must be positive, finite and above the data's float precision")]
    InvalidBound,
    #[error("object encoding: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid name {0:?}")]
    InvalidName(String),
    #[error("ref {0} is locked by another writer")]
    RefLocked(String),
    #[error("ref {name} moved concurrently (expected {expected:?})")]
    RefConflict { name: String, expected: Option<Digest> },
}

/// At-rest codec for object files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Compression {
    #[default]
    None,
    Deflate,
}

/// Names usable for layers, refs and pipeline aliases.
pub fn valid_name(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        && name.len() <= 128
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
    compression: Compression,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        Self::open_with(root, Compression::default())
    }

    pub fn open_with(root: impl Into<PathBuf>, compression: Compression) -> Result<Self, StoreError> {
        let root = root.into();
        for sub in ["objects", "refs", "memo", "prov", "runs", "tmp"] {
            fs::create_dir_all(root.join(sub))?;
        }
        Ok(Store { root, compression })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn object_path(&self, digest: &Digest) -> PathBuf {
        object_path_in(&self.root.join("objects"), digest)
    }

    /// Writes `contents` to `path` via a temp file and rename, so readers
    /// never observe a partial file.
    fn write_atomic(&self, path: &Path, contents: &[u8]) -> Result<(), StoreError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let tmp = self.root.join("tmp").join(uuid::Uuid::new_v4().to_string());
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(contents)?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Stores bytes under their digest. Re-putting existing content is a no-op.
    pub fn put_object(&self, bytes: &[u8]) -> Result<Digest, StoreError> {
        let digest = Digest::of(bytes);
        let path = self.object_path(&digest);
        if !path.exists() {
            self.write_atomic(&path, &encode_object(bytes, self.compression)?)?;
        }
        Ok(digest)
    }

    pub fn has_object(&self, digest: &Digest) -> bool {
        self.object_path(digest).exists()
    }

    /// Reads an object and re-hashes it; any mismatch is reported as corruption.
    pub fn get_object(&self, digest: &Digest) -> Result<Vec<u8>, StoreError> {
        let raw = match fs::read(self.object_path(digest)) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(StoreError::MissingObject(*digest))
            }
            Err(e) => return Err(e.into()),
        };
        decode_object(digest, &raw)
    }

    /// Copies the stored file of an object verbatim (used by bundles).
    pub fn raw_object_file(&self, digest: &Digest) -> Result<Vec<u8>, StoreError> {
        fs::read(self.object_path(digest)).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => StoreError::MissingObject(*digest),
            _ => e.into(),
        })
    }

    pub fn list_objects(&self) -> Result<Vec<Digest>, StoreError> {
        list_objects_in(&self.root.join("objects"))
    }

    pub fn object_count(&self) -> Result<usize, StoreError> {
        Ok(self.list_objects()?.len())
    }

    pub fn put_chunk(&self, chunk: &Chunk) -> Result<ChunkRef, StoreError> {
        chunk.validate()?;
        Ok(ChunkRef(self.put_object(&chunk.canonical_bytes())?))
    }

    pub fn get_chunk(&self, r: &ChunkRef) -> Result<Chunk, StoreError> {
        let bytes = self.get_object(&r.0)?;
        Chunk::from_canonical_bytes(&bytes).map_err(|e| StoreError::Corruption {
            digest: r.0,
            detail: e.to_string(),
        })
    }

    pub fn put_json<T: Serialize + ?Sized>(&self, value: &T) -> Result<Digest, StoreError> {
        self.put_object(&to_canonical_json(value)?)
    }

    pub fn get_json<T: DeserializeOwned>(&self, digest: &Digest) -> Result<T, StoreError> {
        let bytes = self.get_object(digest)?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn get_json_value(&self, digest: &Digest) -> Result<serde_json::Value, StoreError> {
        self.get_json(digest)
    }

    pub fn put_layer(&self, version: &LayerVersion) -> Result<Digest, StoreError> {
        self.put_object(&version.manifest_bytes())
    }

    pub fn get_layer(&self, manifest: &Digest) -> Result<LayerVersion, StoreError> {
        self.get_json(manifest)
    }

    /// Stores the manifest and a commit on top of `parent`. Every chunk the
    /// manifest references must already be present.
    pub fn commit_layer(
        &self,
        version: &LayerVersion,
        parent: Option<Digest>,
        message: &str,
        created_at: String,
    ) -> Result<(Digest, Commit), StoreError> {
        version.check_complete()?;
        if let Some(missing) = version.chunks.values().find(|r| !self.has_object(&r.0)) {
            return Err(StoreError::DanglingRef(missing.0));
        }
        let manifest = self.put_layer(version)?;
        let commit = Commit::new(parent, vec![manifest], message, created_at);
        let hash = self.put_json(&commit)?;
        Ok((hash, commit))
    }

    pub fn get_commit(&self, hash: &Digest) -> Result<Commit, StoreError> {
        self.get_json(hash)
    }

    fn ref_path(&self, name: &str) -> Result<PathBuf, StoreError> {
        if !valid_name(name) {
            return Err(StoreError::InvalidName(name.to_string()));
        }
        Ok(self.root.join("refs").join(name))
    }

    pub fn read_ref(&self, name: &str) -> Result<Option<Digest>, StoreError> {
        match fs::read_to_string(self.ref_path(name)?) {
            Ok(s) => Digest::from_hex(s.trim())
                .map(Some)
                .map_err(|e| StoreError::InvalidName(e.to_string())),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Moves a ref from `expected` to `new`. A lock file enforces one writer
    /// per ref; a stale `expected` fails instead of overwriting.
    pub fn update_ref(
        &self,
        name: &str,
        expected: Option<Digest>,
        new: Digest,
    ) -> Result<(), StoreError> {
        let path = self.ref_path(name)?;
        let lock = path.with_extension("lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => {}
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                return Err(StoreError::RefLocked(name.to_string()))
            }
            Err(e) => return Err(e.into()),
        }
        let result = (|| {
            if self.read_ref(name)? != expected {
                return Err(StoreError::RefConflict { name: name.to_string(), expected });
            }
            self.write_atomic(&path, format!("{new}\n").as_bytes())
        })();
        let _ = fs::remove_file(&lock);
        result
    }

    pub fn list_refs(&self) -> Result<Vec<String>, StoreError> {
        let mut names: Vec<String> = fs::read_dir(self.root.join("refs"))?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| valid_name(n))
            .collect();
        names.sort();
        Ok(names)
    }

    /// Commit chain of a ref, newest first.
    pub fn history(&self, name: &str) -> Result<Vec<(Digest, Commit)>, StoreError> {
        let mut out = Vec::new();
        let mut cursor = self.read_ref(name)?;
        while let Some(hash) = cursor {
            let commit = self.get_commit(&hash)?;
            cursor = commit.parent;
            out.push((hash, commit));
        }
        Ok(out)
    }

    fn index_get(&self, dir: &str, key: &str) -> Result<Option<Vec<u8>>, StoreError> {
        match fs::read(self.root.join(dir).join(key)) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn index_put(&self, dir: &str, key: &str, value: &[u8]) -> Result<(), StoreError> {
        self.write_atomic(&self.root.join(dir).join(key), value)
    }

    pub fn memo_get(&self, key: &Digest) -> Result<Option<Vec<u8>>, StoreError> {
        self.index_get("memo", &key.to_hex())
    }

    pub fn memo_put(&self, key: &Digest, value: &[u8]) -> Result<(), StoreError> {
        self.index_put("memo", &key.to_hex(), value)
    }

    /// Provenance record of a produced object; the first writer wins, since
    /// equal content from any derivation is interchangeable.
    pub fn prov_get(&self, output: &Digest) -> Result<Option<Digest>, StoreError> {
        self.index_get("prov", &output.to_hex())?
            .map(|b| {
                Digest::from_hex(String::from_utf8_lossy(&b).trim())
                    .map_err(|e| StoreError::InvalidName(e.to_string()))
            })
            .transpose()
    }

    pub fn prov_put(&self, output: &Digest, record: &Digest) -> Result<(), StoreError> {
        if self.prov_get(output)?.is_none() {
            self.index_put("prov", &output.to_hex(), record.to_hex().as_bytes())?;
        }
        Ok(())
    }

    pub fn run_get(&self, run_id: &str) -> Result<Option<Digest>, StoreError> {
        if !valid_run_id(run_id) {
            return Ok(None);
        }
        self.index_get("runs", run_id)?
            .map(|b| {
                Digest::from_hex(String::from_utf8_lossy(&b).trim())
                    .map_err(|e| StoreError::InvalidName(e.to_string()))
            })
            .transpose()
    }

    pub fn run_put(&self, run_id: &str, record: &Digest) -> Result<(), StoreError> {
        if !valid_run_id(run_id) {
            return Err(StoreError::InvalidName(run_id.to_string()));
        }
        self.index_put("runs", run_id, record.to_hex().as_bytes())
    }
}

fn valid_run_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-')
}

/// `objects/ab/cdef...` two-hex-character fanout.
pub fn object_path_in(objects_dir: &Path, digest: &Digest) -> PathBuf {
    let hex = digest.to_hex();
    objects_dir.join(&hex[..2]).join(&hex[2..])
}

pub fn list_objects_in(objects_dir: &Path) -> Result<Vec<Digest>, StoreError> {
    let mut out = Vec::new();
    if !objects_dir.exists() {
        return Ok(out);
    }
    for fan in fs::read_dir(objects_dir)? {
        let fan = fan?;
        let prefix = fan.file_name().to_string_lossy().into_owned();
        if !fan.file_type()?.is_dir() {
            continue;
        }
        for obj in fs::read_dir(fan.path())? {
            let name = obj?.file_name().to_string_lossy().into_owned();
            if let Ok(d) = Digest::from_hex(&format!("{prefix}{name}")) {
                out.push(d);
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn encode_object(bytes: &[u8], compression: Compression) -> Result<Vec<u8>, StoreError> {
    match compression {
        Compression::None => {
            let mut out = Vec::with_capacity(bytes.len() + 1);
            out.push(0);
            out.extend_from_slice(bytes);
            Ok(out)
        }
        Compression::Deflate => {
            let mut enc = ZlibEncoder::new(vec![1u8], flate2::Compression::fast());
            enc.write_all(bytes)?;
            Ok(enc.finish()?)
        }
    }
}

/// Decodes an object file and checks its digest.
pub fn decode_object(digest: &Digest, raw: &[u8]) -> Result<Vec<u8>, StoreError> {
    let corrupt = |detail: String| StoreError::Corruption { digest: *digest, detail };
    let bytes = match raw.split_first() {
        Some((0, rest)) => rest.to_vec(),
        Some((1, rest)) => {
            let mut out = Vec::new();
            ZlibDecoder::new(rest)
                .read_to_end(&mut out)
                .map_err(|e| corrupt(format!("inflate failed: {e}")))?;
            out
        }
        _ => return Err(corrupt("unknown codec byte".into())),
    };
    let actual = Digest::of(&bytes);
    if actual != *digest {
        return Err(corrupt(format!("content hashes to {actual}")));
    }
    Ok(bytes)
}
