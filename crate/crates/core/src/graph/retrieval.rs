//! Exhaustive nearest-neighbor retrieval in the embedding space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::squared_distance;

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub lesion_id: u64,
    pub patient_id: u64,
    pub embedding: Vec<f64>,
}

/// One retrieved lesion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub lesion_id: u64,
    pub distance: f64,
}

/// Linear-scan index. Results are ordered by ascending distance, ties by
/// ascending lesion id.
#[derive(Debug, Clone, Default)]
pub struct RetrievalIndex {
    entries: Vec<IndexEntry>,
}

impl RetrievalIndex {
    pub fn new(entries: Vec<IndexEntry>) -> Result<Self> {
        if let Some(first) = entries.first() {
            let dim = first.embedding.len();
            if let Some(bad) = entries.iter().find(|e| e.embedding.len() != dim) {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: bad.embedding.len(),
                });
            }
        }
        Ok(RetrievalIndex { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn get(&self, lesion_id: u64) -> Option<&IndexEntry> {
        self.entries.iter().find(|e| e.lesion_id == lesion_id)
    }

    /// The `k` nearest neighbors of an indexed lesion, excluding the query
    /// itself and, optionally, every lesion of the query's patient.
    pub fn retrieve(&self, query_id: u64, k: usize, exclude_same_patient: bool) -> Result<Vec<Hit>> {
        let q = self.get(query_id).ok_or(Error::UnknownLesion(query_id))?;
        let mut hits: Vec<Hit> = self
            .entries
            .iter()
            .filter(|e| e.lesion_id != query_id)
            .filter(|e| !exclude_same_patient || e.patient_id != q.patient_id)
            .map(|e| Hit {
                lesion_id: e.lesion_id,
                distance: squared_distance(&e.embedding, &q.embedding).sqrt(),
            })
            .collect();
        if k == 0 || k > hits.len() {
            return Err(Error::RetrievalDepth {
                k,
                available: hits.len(),
            });
        }
        let cmp = |a: &Hit, b: &Hit| {
            a.distance
                .total_cmp(&b.distance)
                .then(a.lesion_id.cmp(&b.lesion_id))
        };
        hits.select_nth_unstable_by(k - 1, cmp);
        hits.truncate(k);
        hits.sort_by(cmp);
        Ok(hits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: u64, patient: u64, e: &[f64]) -> IndexEntry {
        IndexEntry {
            lesion_id: id,
            patient_id: patient,
            embedding: e.to_vec(),
        }
    }

    #[test]
    fn duplicate_ranks_first_and_depth_is_checked() {
        let idx = RetrievalIndex::new(vec![
            entry(1, 1, &[1.0, 0.0]),
            entry(2, 2, &[0.0, 1.0]),
            entry(3, 3, &[1.0, 0.0]),
            entry(4, 1, &[0.9, 0.1]),
        ])
        .unwrap();
        let hits = idx.retrieve(1, 3, false).unwrap();
        assert_eq!(hits[0].lesion_id, 3);
        assert_eq!(hits[0].distance, 0.0);
        assert_eq!(hits.iter().map(|h| h.lesion_id).collect::<Vec<_>>(), vec![3, 4, 2]);
        let other = idx.retrieve(1, 2, true).unwrap();
        assert_eq!(other.iter().map(|h| h.lesion_id).collect::<Vec<_>>(), vec![3, 2]);
        assert!(matches!(idx.retrieve(1, 4, false), Err(Error::RetrievalDepth { .. })));
        assert!(matches!(idx.retrieve(1, 3, true), Err(Error::RetrievalDepth { .. })));
        assert!(idx.retrieve(1, 0, false).is_err());
        assert!(matches!(idx.retrieve(99, 1, false), Err(Error::UnknownLesion(99))));
    }

    #[test]
    fn ties_resolve_by_lesion_id() {
        let idx = RetrievalIndex::new(vec![
            entry(9, 1, &[0.0]),
            entry(7, 2, &[1.0]),
            entry(5, 3, &[-1.0]),
        ])
        .unwrap();
        let hits = idx.retrieve(9, 2, false).unwrap();
        assert_eq!(hits.iter().map(|h| h.lesion_id).collect::<Vec<_>>(), vec![5, 7]);
    }
}
