//! Paged KV memory that restored token slots are written into.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub const DEFAULT_PAGE_SIZE_TOKENS: usize = 16;

#[derive(Debug, Clone)]
struct Page {
    data: Vec<i8>,
    written: Vec<bool>,
}

/// Token-slot memory organised in fixed-size pages.
///
/// A slot is one `(token, layer)` row of `H × D` int8 values. Pages are allocated
/// lazily on first write.
#[derive(Debug, Clone)]
pub struct PagedMemory {
    page_size_tokens: usize,
    layers: usize,
    slot_len: usize,
    pages: BTreeMap<usize, Page>,
    allocated_bytes: u64,
    peak_bytes: u64,
}

impl PagedMemory {
    pub fn new(page_size_tokens: usize, layers: usize, slot_len: usize) -> Result<Self> {
        if page_size_tokens == 0 || layers == 0 || slot_len == 0 {
            return Err(Error::invalid("page size, layer count and slot length must be positive"));
        }
        Ok(PagedMemory {
            page_size_tokens,
            layers,
            slot_len,
            pages: BTreeMap::new(),
            allocated_bytes: 0,
            peak_bytes: 0,
        })
    }

    pub fn page_size_tokens(&self) -> usize {
        self.page_size_tokens
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn slot_len(&self) -> usize {
        self.slot_len
    }

    pub fn allocated_bytes(&self) -> u64 {
        self.allocated_bytes
    }

    pub fn peak_bytes(&self) -> u64 {
        self.peak_bytes
    }

    pub fn page_count(&self) -> usize {
        self.pages.len()
    }

    fn locate(&self, token: usize, layer: usize) -> Result<(usize, usize)> {
        if layer >= self.layers {
            return Err(Error::invalid(format!(
                "layer {layer} out of range (memory holds {} layers)",
                self.layers
            )));
        }
        let page = token / self.page_size_tokens;
        let slot = (token % self.page_size_tokens) * self.layers + layer;
        Ok((page, slot))
    }

    /// Stores one slot. Writing a slot that already holds data is a conflict.
    pub fn write(&mut self, token: usize, layer: usize, data: &[i8]) -> Result<()> {
        if data.len() != self.slot_len {
            return Err(Error::invalid(format!(
                "slot expects {} values, got {}",
                self.slot_len,
                data.len()
            )));
        }
        let (page_idx, slot) = self.locate(token, layer)?;
        let slots = self.page_size_tokens * self.layers;
        let slot_len = self.slot_len;
        let page = self.pages.entry(page_idx).or_insert_with(|| Page {
            data: vec![0; slots * slot_len],
            written: vec![false; slots],
        });
        if page.written[slot] {
            return Err(Error::Conflict { token, layer });
        }
        page.written[slot] = true;
        page.data[slot * slot_len..(slot + 1) * slot_len].copy_from_slice(data);
        self.allocated_bytes += slot_len as u64;
        self.peak_bytes = self.peak_bytes.max(self.allocated_bytes);
        Ok(())
    }

    pub fn read(&self, token: usize, layer: usize) -> Option<&[i8]> {
        let (page_idx, slot) = self.locate(token, layer).ok()?;
        let page = self.pages.get(&page_idx)?;
        page.written[slot].then(|| &page.data[slot * self.slot_len..(slot + 1) * self.slot_len])
    }

    pub fn is_written(&self, token: usize, layer: usize) -> bool {
        self.read(token, layer).is_some()
    }

    /// Releases one slot; returns whether it held data. Empty pages are dropped.
    pub fn free(&mut self, token: usize, layer: usize) -> bool {
        let Ok((page_idx, slot)) = self.locate(token, layer) else {
            return false;
        };
        let Some(page) = self.pages.get_mut(&page_idx) else {
            return false;
        };
        if !page.written[slot] {
            return false;
        }
        page.written[slot] = false;
        self.allocated_bytes -= self.slot_len as u64;
        if page.written.iter().all(|w| !w) {
            self.pages.remove(&page_idx);
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_slot_accounts_h_times_d_bytes() {
        let mut mem = PagedMemory::new(16, 1, 8 * 128).unwrap();
        mem.write(0, 0, &[1; 1024]).unwrap();
        assert_eq!(mem.allocated_bytes(), 1024);
        assert_eq!(mem.read(0, 0).unwrap()[5], 1);
    }

    #[test]
    fn double_write_conflicts() {
        let mut mem = PagedMemory::new(4, 3, 2).unwrap();
        mem.write(5, 2, &[1, 2]).unwrap();
        let err = mem.write(5, 2, &[3, 4]).unwrap_err();
        assert!(matches!(err, Error::Conflict { token: 5, layer: 2 }));
        assert_eq!(mem.read(5, 2).unwrap(), &[1, 2]);
    }

    #[test]
    fn ten_thousand_tokens_three_layers() {
        let mut mem = PagedMemory::new(DEFAULT_PAGE_SIZE_TOKENS, 3, 1024).unwrap();
        let row = vec![0i8; 1024];
        for t in 0..10_000 {
            for l in 0..3 {
                mem.write(t, l, &row).unwrap();
            }
        }
        assert_eq!(mem.allocated_bytes(), 10_000 * 3 * 1024);
        assert_eq!(mem.page_count(), 10_000 / 16);
    }

    #[test]
    fn rejects_bad_slots() {
        let mut mem = PagedMemory::new(4, 3, 2).unwrap();
        assert!(mem.write(0, 3, &[0, 0]).is_err());
        assert!(mem.write(0, 0, &[0]).is_err());
        assert!(!mem.free(0, 0));
    }

    proptest! {
        #[test]
        fn peak_matches_replayed_maximum(script in prop::collection::vec((any::<bool>(), 0usize..40, 0usize..3), 1..200)) {
            let mut mem = PagedMemory::new(4, 3, 8).unwrap();
            let mut live = std::collections::HashSet::new();
            let mut oracle_peak = 0u64;
            for (is_write, token, layer) in script {
                if is_write {
                    let fresh = live.insert((token, layer));
                    let res = mem.write(token, layer, &[1; 8]);
                    prop_assert_eq!(res.is_ok(), fresh);
                } else {
                    let was = live.remove(&(token, layer));
                    prop_assert_eq!(mem.free(token, layer), was);
                }
                let allocated = live.len() as u64 * 8;
                prop_assert_eq!(mem.allocated_bytes(), allocated);
                oracle_peak = oracle_peak.max(allocated);
                prop_assert_eq!(mem.peak_bytes(), oracle_peak);
            }
        }
    }
}
