//! Offline intra-frame layout search.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kv::QuantizedKv;
use crate::layout::tiling::{tiling_candidates, LayoutConfig};

/// Anything that can report the encoded size of a three-layer slab under a layout.
pub trait LayoutEncoder: Sync {
    fn encoded_size(&self, slab: &QuantizedKv, layout: &LayoutConfig) -> Result<usize>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CandidateSize {
    pub layout: LayoutConfig,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SearchReport {
    pub chosen: LayoutConfig,
    /// Every candidate in enumeration order.
    pub candidates: Vec<CandidateSize>,
}

/// Encodes every slab of the corpus under every tiling candidate and keeps the
/// smallest total. Ties go to the smallest `(tile_h, tile_w, a_h)`.
pub fn search_intra_layout(corpus: &[QuantizedKv], encoder: &dyn LayoutEncoder) -> Result<SearchReport> {
    let first = corpus.first().ok_or_else(|| Error::invalid("layout search needs a non-empty corpus"))?;
    let (h, d) = (first.shape().heads, first.shape().head_dim);
    let mut slabs = Vec::new();
    for q in corpus {
        if (q.shape().heads, q.shape().head_dim) != (h, d) {
            return Err(Error::invalid("corpus entries disagree on H and D"));
        }
        let padded = q.padded_to_triplets();
        for triplet in 0..padded.layer_triplets() {
            slabs.push(padded.slab(triplet, 0..padded.shape().tokens)?);
        }
    }
    let candidates = tiling_candidates(h, d)?;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(candidates.len());
    let sizes: Vec<Result<usize>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let (slabs, candidates) = (&slabs, &candidates);
                s.spawn(move || {
                    candidates
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| i % workers == w)
                        .map(|(i, layout)| {
                            let total = slabs
                                .iter()
                                .map(|slab| encoder.encoded_size(slab, layout))
                                .sum::<Result<usize>>();
                            (i, total)
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        let mut out: Vec<(usize, Result<usize>)> =
            handles.into_iter().flat_map(|h| h.join().expect("search worker panicked")).collect();
        out.sort_by_key(|(i, _)| *i);
        out.into_iter().map(|(_, r)| r).collect()
    });
    let mut table = Vec::with_capacity(candidates.len());
    for (layout, bytes) in candidates.into_iter().zip(sizes) {
        table.push(CandidateSize { layout, bytes: bytes? });
    }
    let chosen = table
        .iter()
        .min_by_key(|c| (c.bytes, c.layout.sort_key()))
        .expect("at least one candidate")
        .layout;
    Ok(SearchReport { chosen, candidates: table })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kv::{quantize, KvCache, KvShape};

    struct Constant;

    impl LayoutEncoder for Constant {
        fn encoded_size(&self, _: &QuantizedKv, _: &LayoutConfig) -> Result<usize> {
            Ok(100)
        }
    }

    struct Failing;

    impl LayoutEncoder for Failing {
        fn encoded_size(&self, _: &QuantizedKv, _: &LayoutConfig) -> Result<usize> {
            Err(Error::InvalidState("boom".into()))
        }
    }

    fn corpus() -> Vec<QuantizedKv> {
        let shape = KvShape::new(4, 3, 4, 8).unwrap();
        vec![quantize(&KvCache::zeros(shape).unwrap(), 8).unwrap()]
    }

    #[test]
    fn ties_go_to_the_smallest_tile_height() {
        let report = search_intra_layout(&corpus(), &Constant).unwrap();
        assert_eq!(report.candidates.len(), 3 * 4);
        assert_eq!(report.chosen.tile_h(), 1);
        assert_eq!(report.chosen, LayoutConfig::identity(4, 8).unwrap());
    }

    #[test]
    fn errors_propagate_and_empty_corpus_rejected() {
        assert!(matches!(search_intra_layout(&corpus(), &Failing), Err(Error::InvalidState(_))));
        assert!(search_intra_layout(&[], &Constant).is_err());
    }
}
