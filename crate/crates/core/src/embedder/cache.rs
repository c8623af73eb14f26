//! Content-addressed embedding cache.
//!
//! One file per key under `cache_dir/<first two hex chars>/<key>.emb`,
//! format: `TSLAB-EMB v1\n`, u32 LE dimension, then little-endian f32
//! values. Writes go through a unique temp file plus atomic rename, so
//! concurrent writers of the same key cannot interleave.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use super::{EmbedError, EmbeddingVector};

const EMB_MAGIC: &[u8] = b"TSLAB-EMB v1\n";

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

fn entry_path(dir: &Path, key: &str) -> PathBuf {
    dir.join(&key[..2]).join(format!("{key}.emb"))
}

pub fn read(dir: &Path, key: &str, want_dim: usize) -> Result<Option<EmbeddingVector>, EmbedError> {
    let path = entry_path(dir, key);
    let mut bytes = Vec::new();
    match fs::File::open(&path) {
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => {
            return Err(EmbedError::Cache {
                entry: key.to_string(),
                message: e.to_string(),
            })
        }
        Ok(mut f) => f.read_to_end(&mut bytes).map_err(|e| EmbedError::Cache {
            entry: key.to_string(),
            message: e.to_string(),
        })?,
    };
    let fail = |message: String| EmbedError::Cache {
        entry: key.to_string(),
        message,
    };
    if bytes.len() < EMB_MAGIC.len() + 4 || &bytes[..EMB_MAGIC.len()] != EMB_MAGIC {
        return Err(fail("bad or missing header".into()));
    }
    let mut pos = EMB_MAGIC.len();
    let dim = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
    pos += 4;
    if dim != want_dim {
        return Err(fail(format!("dimension {dim}, expected {want_dim}")));
    }
    if bytes.len() != pos + 4 * dim {
        return Err(fail(format!(
            "payload length {} does not match dimension {dim}",
            bytes.len() - pos
        )));
    }
    let mut values = Vec::with_capacity(dim);
    for i in 0..dim {
        let b = &bytes[pos + 4 * i..pos + 4 * i + 4];
        values.push(f32::from_le_bytes(b.try_into().unwrap()));
    }
    Ok(Some(EmbeddingVector { values }))
}

pub fn write(dir: &Path, key: &str, v: &EmbeddingVector) -> Result<(), EmbedError> {
    let path = entry_path(dir, key);
    let fail = |message: String| EmbedError::Cache {
        entry: key.to_string(),
        message,
    };
    let parent = path.parent().expect("entry path has a parent");
    fs::create_dir_all(parent).map_err(|e| fail(e.to_string()))?;
    let tmp = parent.join(format!(
        "{key}.{}.{}.tmp",
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let mut out = Vec::with_capacity(EMB_MAGIC.len() + 4 + 4 * v.dim());
    out.extend_from_slice(EMB_MAGIC);
    out.extend_from_slice(&(v.dim() as u32).to_le_bytes());
    for &x in &v.values {
        out.extend_from_slice(&x.to_le_bytes());
    }
    let mut f = fs::File::create(&tmp).map_err(|e| fail(e.to_string()))?;
    f.write_all(&out).map_err(|e| fail(e.to_string()))?;
    f.sync_all().map_err(|e| fail(e.to_string()))?;
    fs::rename(&tmp, &path).map_err(|e| fail(e.to_string()))?;
    Ok(())
}
