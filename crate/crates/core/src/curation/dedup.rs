//! Near-duplicate clustering by Hamming distance on perceptual hashes.
//!
//! Candidate pairs come from pigeonhole banding: with `k + 1` disjoint bands
//! covering all 64 bits, two hashes at distance `<= k` agree exactly on at
//! least one band. Candidates are verified with the exact distance and merged
//! with union-find, so clusters are the connected components of the
//! "distance <= k" graph.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;

use super::{hamming, CurationError};
use crate::datamodel::ImageRecord;

pub struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect(), rank: vec![0; n] }
    }

    pub fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cur = x;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }

    pub fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

/// `(shift, width)` of each band, `max_hamming + 1` bands with sizes as equal
/// as possible (larger bands first). Empty when every pair is a neighbor.
pub fn band_layout(max_hamming: u32) -> Vec<(u32, u32)> {
    if max_hamming >= 64 {
        return Vec::new();
    }
    let bands = max_hamming + 1;
    let (base, extra) = (64 / bands, 64 % bands);
    let mut shift = 64;
    (0..bands)
        .map(|i| {
            let width = base + u32::from(i < extra);
            shift -= width;
            (shift, width)
        })
        .collect()
}

/// All index pairs `(i, j)`, `i < j`, within `max_hamming` of each other.
/// Sorted and free of duplicates. Only pairs sharing a band are compared,
/// and candidates are checked inside their bucket so the (often much larger)
/// candidate set is never materialized.
pub fn near_pairs(hashes: &[u64], max_hamming: u32) -> Vec<(usize, usize)> {
    let n = hashes.len();
    let near = |i: usize, j: usize| hamming(hashes[i], hashes[j]) <= max_hamming;
    if max_hamming >= 64 {
        return (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    }
    let mut pairs: Vec<(usize, usize)> = band_layout(max_hamming)
        .into_par_iter()
        .flat_map_iter(|(shift, width)| {
            let mask = if width == 64 { u64::MAX } else { (1u64 << width) - 1 };
            let mut buckets: HashMap<u64, Vec<usize>> = HashMap::new();
            for (i, h) in hashes.iter().enumerate() {
                buckets.entry((h >> shift) & mask).or_default().push(i);
            }
            let mut out = Vec::new();
            for members in buckets.into_values() {
                for (a, &i) in members.iter().enumerate() {
                    out.extend(members[a + 1..].iter().filter(|&&j| near(i, j)).map(|&j| (i, j)));
                }
            }
            out
        })
        .collect();
    pairs.par_sort_unstable();
    pairs.dedup();
    pairs
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dedup {
    /// One representative per cluster, in input order.
    pub retained: Vec<ImageRecord>,
    /// Every input id mapped to its cluster representative.
    pub clusters: BTreeMap<String, String>,
}

/// Representative preference: higher aesthetic, then smaller id.
fn better(a: &ImageRecord, b: &ImageRecord) -> bool {
    let score = |r: &ImageRecord| r.aesthetic.unwrap_or(f64::NEG_INFINITY);
    match score(a).total_cmp(&score(b)) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => a.id < b.id,
    }
}

pub fn dedup(records: &[ImageRecord], max_hamming: u32) -> Result<Dedup, CurationError> {
    let hashes: Vec<u64> = records
        .iter()
        .map(|r| r.phash.map(|p| p.0).ok_or_else(|| CurationError::MissingHash(r.id.clone())))
        .collect::<Result<_, _>>()?;

    let mut uf = UnionFind::new(records.len());
    for (i, j) in near_pairs(&hashes, max_hamming) {
        uf.union(i, j);
    }

    let mut best: HashMap<usize, usize> = HashMap::new();
    for i in 0..records.len() {
        let root = uf.find(i);
        best.entry(root)
            .and_modify(|cur| {
                if better(&records[i], &records[*cur]) {
                    *cur = i;
                }
            })
            .or_insert(i);
    }

    let mut clusters = BTreeMap::new();
    let mut retained = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let rep = best[&uf.find(i)];
        clusters.insert(r.id.clone(), records[rep].id.clone());
        if rep == i {
            retained.push(r.clone());
        }
    }
    Ok(Dedup { retained, clusters })
}
