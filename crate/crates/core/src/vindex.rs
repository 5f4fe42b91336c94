//! Exact flat vector index with stable ids, top-K search and O(1) removal.
//!
//! Vectors live in one row-major buffer. Removal swap-removes the row and
//! patches the id→slot map, so slot order does not track insertion order;
//! each row carries an insertion sequence number that breaks distance ties.
//!
//! # Snapshot layout
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic   8 bytes  "TRVIDX01"
//! metric  u8       0 = squared L2, 1 = cosine
//! dim     u32
//! count   u64
//! ids     count x (id: u64, boarding_stop: u32, door: u8)   in insertion order
//! vectors count x dim x f64                                 same order
//! ```

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Door, FeatureVector, PassengerId};

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"TRVIDX01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Squared Euclidean distance; ranks identically to L2.
    #[default]
    L2,
    /// `1 - cos(a, b)`, clamped at zero. A zero vector has distance 1 to anything.
    Cosine,
}

impl Metric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::L2 => a
                .iter()
                .zip(b)
                .map(|(x, y)| {
                    let d = x - y;
                    d * d
                })
                .sum(),
            Metric::Cosine => {
                let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                for (x, y) in a.iter().zip(b) {
                    dot += x * y;
                    na += x * x;
                    nb += y * y;
                }
                if na == 0.0 || nb == 0.0 {
                    return 1.0;
                }
                (1.0 - dot / (libm::sqrt(na) * libm::sqrt(nb))).max(0.0)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub boarding_stop: u32,
    pub door: Door,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub id: PassengerId,
    pub vector: FeatureVector,
    pub meta: EntryMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: PassengerId,
    pub distance: f64,
}

/// Candidates in ascending distance order, ties in insertion order.
pub type SearchResult = Vec<Neighbor>;

#[derive(Debug, Clone)]
pub struct FlatIndex {
    dim: usize,
    metric: Metric,
    data: Vec<f64>,
    ids: Vec<PassengerId>,
    metas: Vec<EntryMeta>,
    seqs: Vec<u64>,
    slots: BTreeMap<PassengerId, usize>,
    next_seq: u64,
}

impl FlatIndex {
    pub fn new(dim: usize, metric: Metric) -> Self {
        Self {
            dim,
            metric,
            data: Vec::new(),
            ids: Vec::new(),
            metas: Vec::new(),
            seqs: Vec::new(),
            slots: BTreeMap::new(),
            next_seq: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn size(&self) -> usize {
        self.ids.len()
    }

    pub fn len(&self) -> usize {
        self.size()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: PassengerId) -> bool {
        self.slots.contains_key(&id)
    }

    pub fn clear(&mut self) {
        self.data.clear();
        self.ids.clear();
        self.metas.clear();
        self.seqs.clear();
        self.slots.clear();
    }

    pub fn add(&mut self, entry: GalleryEntry) -> Result<()> {
        self.add_vector(entry.id, entry.vector.values(), entry.meta)
    }

    /// Adds a plain vector of length `dim`.
    pub fn add_vector(&mut self, id: PassengerId, vector: &[f64], meta: EntryMeta) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: vector.len(),
            });
        }
        if self.slots.contains_key(&id) {
            return Err(Error::DuplicateId(id));
        }
        self.slots.insert(id, self.ids.len());
        self.data.extend_from_slice(vector);
        self.ids.push(id);
        self.metas.push(meta);
        self.seqs.push(self.next_seq);
        self.next_seq += 1;
        Ok(())
    }

    pub fn remove(&mut self, id: PassengerId) -> Result<()> {
        let slot = self.slots.remove(&id).ok_or(Error::UnknownId(id))?;
        let last = self.ids.len() - 1;
        if slot != last {
            let (head, tail) = self.data.split_at_mut(last * self.dim);
            head[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(&tail[..self.dim]);
            self.ids.swap(slot, last);
            self.metas.swap(slot, last);
            self.seqs.swap(slot, last);
            self.slots.insert(self.ids[slot], slot);
        }
        self.data.truncate(last * self.dim);
        self.ids.pop();
        self.metas.pop();
        self.seqs.pop();
        Ok(())
    }

    fn row(&self, slot: usize) -> &[f64] {
        &self.data[slot * self.dim..(slot + 1) * self.dim]
    }

    pub fn vector(&self, id: PassengerId) -> Option<&[f64]> {
        self.slots.get(&id).map(|&s| self.row(s))
    }

    pub fn meta(&self, id: PassengerId) -> Option<EntryMeta> {
        self.slots.get(&id).map(|&s| self.metas[s])
    }

    /// Distance from `query` to a stored entry.
    pub fn distance_to(&self, id: PassengerId, query: &[f64]) -> Option<f64> {
        self.vector(id).map(|v| self.metric.distance(query, v))
    }

    /// Live ids in insertion order.
    pub fn ids(&self) -> Vec<PassengerId> {
        let mut order: Vec<usize> = (0..self.ids.len()).collect();
        order.sort_by_key(|&s| self.seqs[s]);
        order.into_iter().map(|s| self.ids[s]).collect()
    }

    pub fn search(&self, query: &[f64], k: usize) -> Result<SearchResult> {
        self.search_filtered(query, k, |_| true)
    }

    /// Exact top-`k` over entries accepted by `keep`.
    pub fn search_filtered(
        &self,
        query: &[f64],
        k: usize,
        mut keep: impl FnMut(PassengerId) -> bool,
    ) -> Result<SearchResult> {
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        let mut cands: Vec<(f64, u64, usize)> = (0..self.ids.len())
            .filter(|&s| keep(self.ids[s]))
            .map(|s| (self.metric.distance(query, self.row(s)), self.seqs[s], s))
            .collect();
        let by_rank = |a: &(f64, u64, usize), b: &(f64, u64, usize)| -> Ordering {
            a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
        };
        if k == 0 {
            return Ok(Vec::new());
        }
        if cands.len() > k {
            cands.select_nth_unstable_by(k - 1, by_rank);
            cands.truncate(k);
        }
        cands.sort_unstable_by(by_rank);
        Ok(cands
            .into_iter()
            .map(|(distance, _, s)| Neighbor {
                id: self.ids[s],
                distance,
            })
            .collect())
    }

    /// Ranks an explicit candidate set by distance to `query`, ties in
    /// insertion order. Ids not in the index are skipped.
    pub fn rank_ids(&self, query: &[f64], ids: &[PassengerId]) -> Result<SearchResult> {
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        let mut cands: Vec<(f64, u64, PassengerId)> = ids
            .iter()
            .filter_map(|id| {
                let s = *self.slots.get(id)?;
                Some((self.metric.distance(query, self.row(s)), self.seqs[s], *id))
            })
            .collect();
        cands.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        cands.dedup_by_key(|c| c.2);
        Ok(cands
            .into_iter()
            .map(|(distance, _, id)| Neighbor { id, distance })
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.ids.len();
        let mut out = Vec::with_capacity(21 + n * (13 + 8 * self.dim));
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.push(match self.metric {
            Metric::L2 => 0,
            Metric::Cosine => 1,
        });
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&s| self.seqs[s]);
        for &s in &order {
            out.extend_from_slice(&self.ids[s].0.to_le_bytes());
            out.extend_from_slice(&self.metas[s].boarding_stop.to_le_bytes());
            out.push(match self.metas[s].door {
                Door::Front => 0,
                Door::Rear => 1,
            });
        }
        for &s in &order {
            for v in self.row(s) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != SNAPSHOT_MAGIC {
            return Err(Error::Snapshot("bad magic"));
        }
        let metric = match r.take(1)?[0] {
            0 => Metric::L2,
            1 => Metric::Cosine,
            _ => return Err(Error::Snapshot("unknown metric")),
        };
        let dim = r.u32()? as usize;
        let count = usize::try_from(r.u64()?).map_err(|_| Error::Snapshot("count overflow"))?;
        let expected = count
            .checked_mul(13 + 8 * dim)
            .ok_or(Error::Snapshot("count overflow"))?;
        if bytes.len() - r.pos != expected {
            return Err(Error::Snapshot("length does not match header"));
        }
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let id = PassengerId(r.u64()?);
            let boarding_stop = r.u32()?;
            let door = match r.take(1)?[0] {
                0 => Door::Front,
                1 => Door::Rear,
                _ => return Err(Error::Snapshot("unknown door")),
            };
            table.push((id, EntryMeta { boarding_stop, door }));
        }
        let mut index = FlatIndex::new(dim, metric);
        let mut row = Vec::with_capacity(dim);
        for (id, meta) in table {
            row.clear();
            for _ in 0..dim {
                let v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                if !v.is_finite() {
                    return Err(Error::Snapshot("non-finite vector value"));
                }
                row.push(v);
            }
            index
                .add_vector(id, &row, meta)
                .map_err(|_| Error::Snapshot("duplicate id"))?;
        }
        Ok(index)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(Error::Snapshot("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const META: EntryMeta = EntryMeta {
        boarding_stop: 1,
        door: Door::Front,
    };

    fn entry(id: u64, v: &[f64]) -> GalleryEntry {
        GalleryEntry {
            id: PassengerId(id),
            vector: FeatureVector::new(v.to_vec(), v.len() / 3).unwrap(),
            meta: META,
        }
    }

    fn ids(r: &SearchResult) -> Vec<u64> {
        r.iter().map(|n| n.id.0).collect()
    }

    /// Full scan, stable sort on distance: ties keep insertion order.
    fn naive(rows: &[(u64, Vec<f64>)], q: &[f64], k: usize, metric: Metric) -> Vec<u64> {
        let mut all: Vec<(f64, u64)> = rows.iter().map(|(id, v)| (metric.distance(q, v), *id)).collect();
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        all.into_iter().take(k).map(|x| x.1).collect()
    }

    #[test]
    fn add_then_search_finds_self() {
        let mut idx = FlatIndex::new(3, Metric::L2);
        idx.add(entry(7, &[1.0, 2.0, 3.0])).unwrap();
        idx.add(entry(8, &[0.0, 0.0, 0.0])).unwrap();
        let r = idx.search(&[1.0, 2.0, 3.0], 5).unwrap();
        assert_eq!(r[0], Neighbor { id: PassengerId(7), distance: 0.0 });
        assert_eq!(r.len(), 2);
    }

    #[test]
    fn ties_follow_insertion_order() {
        let mut idx = FlatIndex::new(3, Metric::L2);
        idx.add(entry(9, &[1.0, 1.0, 1.0])).unwrap();
        idx.add(entry(2, &[1.0, 1.0, 1.0])).unwrap();
        idx.add(entry(5, &[5.0, 5.0, 5.0])).unwrap();
        assert_eq!(ids(&idx.search(&[0.0; 3], 2).unwrap()), vec![9, 2]);
        // Swap-remove moves entry 5 into slot 0; order must still be by insertion.
        idx.remove(PassengerId(9)).unwrap();
        idx.add(entry(9, &[1.0, 1.0, 1.0])).unwrap();
        assert_eq!(ids(&idx.search(&[0.0; 3], 3).unwrap()), vec![2, 9, 5]);
    }

    #[test]
    fn add_errors() {
        let mut idx = FlatIndex::new(3, Metric::L2);
        idx.add(entry(1, &[0.0; 3])).unwrap();
        assert_eq!(idx.add(entry(1, &[1.0; 3])), Err(Error::DuplicateId(PassengerId(1))));
        assert!(matches!(idx.add(entry(2, &[0.0; 6])), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(idx.search(&[0.0; 2], 1), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn remove_cases() {
        let mut idx = FlatIndex::new(3, Metric::L2);
        idx.add(entry(1, &[0.0; 3])).unwrap();
        idx.remove(PassengerId(1)).unwrap();
        assert!(idx.search(&[0.0; 3], 5).unwrap().is_empty());
        assert_eq!(idx.remove(PassengerId(1)), Err(Error::UnknownId(PassengerId(1))));

        idx.add(entry(1, &[0.0; 3])).unwrap();
        idx.add(entry(2, &[1.0; 3])).unwrap();
        idx.remove(PassengerId(1)).unwrap();
        assert_eq!(ids(&idx.search(&[0.0; 3], 1).unwrap()), vec![2]);
    }

    #[test]
    fn size_tracks_adds_and_removes() {
        let mut idx = FlatIndex::new(3, Metric::L2);
        assert_eq!(idx.size(), 0);
        for i in 0..3 {
            idx.add(entry(i, &[i as f64; 3])).unwrap();
        }
        idx.remove(PassengerId(1)).unwrap();
        assert_eq!(idx.size(), 2);
        assert_eq!(idx.ids(), vec![PassengerId(0), PassengerId(2)]);
        idx.clear();
        assert_eq!(idx.size(), 0);
    }

    #[test]
    fn search_edge_cases() {
        let idx = FlatIndex::new(3, Metric::L2);
        assert!(idx.search(&[0.0; 3], 5).unwrap().is_empty());

        let mut idx = FlatIndex::new(3, Metric::L2);
        for i in 0..4 {
            idx.add(entry(i, &[(3 - i) as f64; 3])).unwrap();
        }
        assert_eq!(ids(&idx.search(&[0.0; 3], 10).unwrap()), vec![3, 2, 1, 0]);
        assert!(idx.search(&[0.0; 3], 0).unwrap().is_empty());
    }

    #[test]
    fn matches_naive_scan_on_100_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut idx = FlatIndex::new(12, Metric::L2);
        let mut rows = Vec::new();
        for i in 0..100u64 {
            let v: Vec<f64> = (0..12).map(|_| rng.random::<f64>()).collect();
            idx.add(entry(i, &v)).unwrap();
            rows.push((i, v));
        }
        for _ in 0..20 {
            let q: Vec<f64> = (0..12).map(|_| rng.random::<f64>()).collect();
            assert_eq!(ids(&idx.search(&q, 5).unwrap()), naive(&rows, &q, 5, Metric::L2));
        }
    }

    #[test]
    fn filtered_search_and_rank_ids() {
        let mut idx = FlatIndex::new(3, Metric::L2);
        for i in 0..5 {
            idx.add(entry(i, &[i as f64; 3])).unwrap();
        }
        let r = idx.search_filtered(&[0.0; 3], 2, |id| id.0 % 2 == 1).unwrap();
        assert_eq!(ids(&r), vec![1, 3]);
        let r = idx
            .rank_ids(&[4.0; 3], &[PassengerId(0), PassengerId(9), PassengerId(3), PassengerId(3)])
            .unwrap();
        assert_eq!(ids(&r), vec![3, 0]);
    }

    #[test]
    fn cosine_distance() {
        let m = Metric::Cosine;
        assert_eq!(m.distance(&[1.0, 0.0], &[2.0, 0.0]), 0.0);
        assert!((m.distance(&[1.0, 0.0], &[0.0, 1.0]) - 1.0).abs() < 1e-15);
        assert!((m.distance(&[1.0, 0.0], &[-1.0, 0.0]) - 2.0).abs() < 1e-15);
        assert_eq!(m.distance(&[0.0, 0.0], &[1.0, 0.0]), 1.0);
    }

    #[test]
    fn snapshot_roundtrip_preserves_order() {
        let mut idx = FlatIndex::new(3, Metric::Cosine);
        idx.add(entry(4, &[1.0, 0.5, 0.25])).unwrap();
        idx.add(GalleryEntry {
            meta: EntryMeta { boarding_stop: 3, door: Door::Rear },
            ..entry(2, &[1.0, 0.5, 0.25])
        })
        .unwrap();
        idx.add(entry(6, &[-1.0, 2.0, 0.0])).unwrap();
        idx.remove(PassengerId(4)).unwrap();
        idx.add(entry(4, &[1.0, 0.5, 0.25])).unwrap();

        let bytes = idx.to_bytes();
        assert_eq!(&bytes[..8], SNAPSHOT_MAGIC);
        let back = FlatIndex::from_bytes(&bytes).unwrap();
        assert_eq!(back.metric(), Metric::Cosine);
        assert_eq!(back.ids(), idx.ids());
        assert_eq!(back.meta(PassengerId(2)), Some(EntryMeta { boarding_stop: 3, door: Door::Rear }));
        let q = [1.0, 0.5, 0.25];
        assert_eq!(back.search(&q, 3).unwrap(), idx.search(&q, 3).unwrap());

        assert_eq!(FlatIndex::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err(), Error::Snapshot("length does not match header"));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(FlatIndex::from_bytes(&bad).unwrap_err(), Error::Snapshot("bad magic"));
        assert!(FlatIndex::from_bytes(&bytes[..5]).is_err());
    }

    proptest! {
        #[test]
        fn distance_axioms(a in proptest::collection::vec(-10.0f64..10.0, 6), b in proptest::collection::vec(-10.0f64..10.0, 6)) {
            for m in [Metric::L2, Metric::Cosine] {
                prop_assert!(m.distance(&a, &a).abs() < 1e-12);
                prop_assert_eq!(m.distance(&a, &b), m.distance(&b, &a));
                prop_assert!(m.distance(&a, &b) >= 0.0);
            }
        }

        #[test]
        fn remove_after_add_is_identity(
            rows in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 3), 1..30),
            extra in proptest::collection::vec(-1.0f64..1.0, 3),
            q in proptest::collection::vec(-1.0f64..1.0, 3),
            k in 1usize..10,
        ) {
            let mut idx = FlatIndex::new(3, Metric::L2);
            for (i, r) in rows.iter().enumerate() {
                idx.add(entry(i as u64, r)).unwrap();
            }
            let before = idx.search(&q, k).unwrap();
            idx.add(entry(999, &extra)).unwrap();
            idx.remove(PassengerId(999)).unwrap();
            prop_assert_eq!(idx.search(&q, k).unwrap(), before);
        }

        #[test]
        fn exact_against_naive_with_removals(
            rows in proptest::collection::vec(proptest::collection::vec(0i8..4, 3), 1..60),
            drop_mask in proptest::collection::vec(any::<bool>(), 60),
            q in proptest::collection::vec(0i8..4, 3),
            k in 1usize..20,
        ) {
            // Small integer coordinates force plenty of exact ties.
            let mut idx = FlatIndex::new(3, Metric::L2);
            let mut live = Vec::new();
            for (i, r) in rows.iter().enumerate() {
                let v: Vec<f64> = r.iter().map(|&x| x as f64).collect();
                idx.add(entry(i as u64, &v)).unwrap();
                live.push((i as u64, v));
            }
            for (i, drop) in drop_mask.iter().enumerate().take(rows.len()) {
                if *drop {
                    idx.remove(PassengerId(i as u64)).unwrap();
                    live.retain(|(id, _)| *id != i as u64);
                }
            }
            let qv: Vec<f64> = q.iter().map(|&x| x as f64).collect();
            prop_assert_eq!(ids(&idx.search(&qv, k).unwrap()), naive(&live, &qv, k, Metric::L2));
            prop_assert_eq!(idx.size(), live.len());
        }
    }
}
