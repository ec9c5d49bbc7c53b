//! On-disk synthetic corpus: `manifest.json` plus little-endian f32 `kv.bin`.

use std::fs;
use std::path::Path;

use kvfetch_core::kv::{KvCache, SyntheticSpec};
use kvfetch_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::report::sha256_hex;

pub const MANIFEST: &str = "manifest.json";
pub const DATA_FILE: &str = "kv.bin";
pub const CORPUS_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub spec: SyntheticSpec,
    pub data_file: String,
    pub dtype: String,
    pub sha256: String,
}

pub struct Corpus {
    pub manifest: Manifest,
    pub kv: KvCache,
}

fn to_bytes(kv: &KvCache) -> Vec<u8> {
    kv.data().iter().flat_map(|x| x.to_le_bytes()).collect()
}

/// Writes the corpus and returns the manifest bytes.
pub fn write(dir: &Path, spec: &SyntheticSpec, kv: &KvCache) -> Result<Vec<u8>> {
    fs::create_dir_all(dir)?;
    let data = to_bytes(kv);
    let manifest = Manifest {
        schema_version: CORPUS_SCHEMA,
        spec: *spec,
        data_file: DATA_FILE.into(),
        dtype: "f32le".into(),
        sha256: sha256_hex(&data),
    };
    fs::write(dir.join(DATA_FILE), &data)?;
    let mut m = serde_json::to_vec_pretty(&manifest)?;
    m.push(b'\n');
    fs::write(dir.join(MANIFEST), &m)?;
    Ok(m)
}

/// Loads a corpus and checks its digest.
pub fn read(dir: &Path) -> Result<Corpus> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
    if manifest.schema_version != CORPUS_SCHEMA {
        return Err(Error::Protocol(format!(
            "corpus schema {} is not supported",
            manifest.schema_version
        )));
    }
    if manifest.dtype != "f32le" {
        return Err(Error::Protocol(format!("unsupported dtype {:?}", manifest.dtype)));
    }
    let data = fs::read(dir.join(&manifest.data_file))?;
    if sha256_hex(&data) != manifest.sha256 {
        return Err(Error::Protocol(format!("{} does not match its manifest digest", dir.display())));
    }
    let shape = manifest.spec.shape();
    shape.validate()?;
    if data.len() != shape.len() * 4 {
        return Err(Error::Protocol(format!(
            "data holds {} bytes, shape needs {}",
            data.len(),
            shape.len() * 4
        )));
    }
    let values = data
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let kv = KvCache::new(shape, values)?;
    Ok(Corpus { manifest, kv })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec { tokens: 9, layers: 4, heads: 2, head_dim: 4, smoothness: 0.7, seed: 3 };
        let kv = spec.generate().unwrap();
        write(dir.path(), &spec, &kv).unwrap();
        let back = read(dir.path()).unwrap();
        assert_eq!(back.manifest.spec, spec);
        assert_eq!(back.kv, kv);
    }

    #[test]
    fn tampered_data_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec { tokens: 2, layers: 1, heads: 1, head_dim: 2, smoothness: 0.0, seed: 0 };
        write(dir.path(), &spec, &spec.generate().unwrap()).unwrap();
        let p = dir.path().join(DATA_FILE);
        let mut b = fs::read(&p).unwrap();
        b[0] ^= 1;
        fs::write(&p, b).unwrap();
        assert!(matches!(read(dir.path()), Err(Error::Protocol(_))));
    }
}
