//! On-disk directory of chunk containers.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};

use crate::codec::{cache_id_hex, ChunkContainer, ContainerHeader};
use crate::error::{Error, Result};
use crate::layout::ResolutionClass;

pub const CONTAINER_EXT: &str = "kvfc";

#[derive(Debug, Clone, PartialEq)]
pub struct StoredChunk {
    pub path: PathBuf,
    pub header: ContainerHeader,
}

/// Index of `(cache_id, chunk_index)` to container files under one root.
#[derive(Debug, Clone)]
pub struct ChunkStore {
    root: PathBuf,
    index: BTreeMap<([u8; 16], u32), StoredChunk>,
}

pub fn container_file_name(header: &ContainerHeader) -> String {
    format!("{}-{:08}.{CONTAINER_EXT}", cache_id_hex(&header.cache_id), header.chunk_index)
}

impl ChunkStore {
    /// Scans `root` for container files and indexes their headers.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&root)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        paths.retain(|p| p.extension().is_some_and(|e| e == CONTAINER_EXT));
        paths.sort();
        let mut index = BTreeMap::new();
        for path in paths {
            let header = ContainerHeader::read_from(&mut BufReader::new(File::open(&path)?))
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let key = (header.cache_id, header.chunk_index);
            if let Some(prev) = index.insert(key, StoredChunk { path: path.clone(), header }) {
                return Err(Error::Config(format!(
                    "{} and {} hold the same chunk",
                    prev.path.display(),
                    path.display()
                )));
            }
        }
        Ok(ChunkStore { root, index })
    }

    /// Writes a container into `root` under its canonical file name.
    pub fn write(root: impl AsRef<Path>, c: &ChunkContainer) -> Result<PathBuf> {
        std::fs::create_dir_all(root.as_ref())?;
        let path = root.as_ref().join(container_file_name(c.header()));
        std::fs::write(&path, c.bytes())?;
        Ok(path)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn get(&self, cache_id: &[u8; 16], chunk_index: u32) -> Option<&StoredChunk> {
        self.index.get(&(*cache_id, chunk_index))
    }

    /// Chunks in `(cache_id, chunk_index)` order.
    pub fn chunks(&self) -> impl Iterator<Item = &StoredChunk> {
        self.index.values()
    }

    /// Header and bitstream of one resolution entry.
    pub fn read_payload(
        &self,
        cache_id: &[u8; 16],
        chunk_index: u32,
        class: ResolutionClass,
    ) -> Result<(ContainerHeader, Vec<u8>)> {
        let stored = self.get(cache_id, chunk_index).ok_or_else(|| {
            Error::NotFound(format!("chunk {} of cache {}", chunk_index, cache_id_hex(cache_id)))
        })?;
        let entry = stored.header.entry(class).ok_or_else(|| {
            Error::NotFound(format!("chunk {chunk_index} has no {class} entry"))
        })?;
        let mut f = File::open(&stored.path)?;
        f.seek(SeekFrom::Start(entry.offset))?;
        let mut payload = Vec::with_capacity(entry.length as usize);
        f.take(entry.length).read_to_end(&mut payload)?;
        if payload.len() as u64 != entry.length {
            return Err(Error::Protocol(format!("{} is truncated", stored.path.display())));
        }
        Ok((stored.header.clone(), payload))
    }

    pub fn read_container(&self, cache_id: &[u8; 16], chunk_index: u32) -> Result<ChunkContainer> {
        let stored = self
            .get(cache_id, chunk_index)
            .ok_or_else(|| Error::NotFound(format!("chunk {chunk_index} of cache {}", cache_id_hex(cache_id))))?;
        ChunkContainer::from_bytes(std::fs::read(&stored.path)?)
    }
}
