//! Set-associative storage with pluggable replacement.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    Lru,
    TreePlru,
    Random,
}

impl std::str::FromStr for Policy {
    type Err = crate::Error;
    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "lru" => Ok(Policy::Lru),
            "tree-plru" | "plru" => Ok(Policy::TreePlru),
            "random" => Ok(Policy::Random),
            _ => Err(crate::Error::Config(format!("unknown replacement policy `{s}`"))),
        }
    }
}

/// Entry payload mask; the bits above hold per-structure flags.
pub const KEY_MASK: u64 = (1 << 48) - 1;

#[derive(Debug, Clone, Copy)]
enum Child {
    Node(u8),
    Leaf(u8),
}

/// Binary tree over an arbitrary number of ways. For non-power-of-two way
/// counts the split is as even as possible, so some leaves sit one level
/// shallower than others.
#[derive(Debug, Clone)]
struct PlruTree {
    nodes: Vec<(Child, Child)>,
    paths: Vec<Vec<(u8, bool)>>,
}

impl PlruTree {
    fn new(ways: usize) -> Self {
        let mut t = PlruTree { nodes: Vec::new(), paths: vec![Vec::new(); ways] };
        if ways > 1 {
            t.build(0, ways, &mut Vec::new());
        }
        t
    }

    fn build(&mut self, lo: usize, hi: usize, path: &mut Vec<(u8, bool)>) -> Child {
        if hi - lo == 1 {
            self.paths[lo] = path.clone();
            return Child::Leaf(lo as u8);
        }
        let id = self.nodes.len() as u8;
        self.nodes.push((Child::Leaf(0), Child::Leaf(0)));
        let mid = lo + (hi - lo).div_ceil(2);
        path.push((id, false));
        let l = self.build(lo, mid, path);
        path.pop();
        path.push((id, true));
        let r = self.build(mid, hi, path);
        path.pop();
        self.nodes[id as usize] = (l, r);
        Child::Node(id)
    }

    #[inline]
    fn touch(&self, bits: &mut u32, way: usize) {
        for &(node, right) in &self.paths[way] {
            // point the node away from the touched side
            if right {
                *bits &= !(1 << node);
            } else {
                *bits |= 1 << node;
            }
        }
    }

    #[inline]
    fn victim(&self, bits: u32) -> usize {
        if self.nodes.is_empty() {
            return 0;
        }
        let mut node = 0u8;
        loop {
            let (l, r) = self.nodes[node as usize];
            let next = if bits >> node & 1 == 1 { r } else { l };
            match next {
                Child::Leaf(w) => return w as usize,
                Child::Node(n) => node = n,
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Meta {
    /// Stamps live right after each set's entries.
    Lru { clock: u64 },
    Plru { bits: Vec<u32>, tree: PlruTree },
    Random { rng: ChaCha8Rng },
}

/// `sets × ways` entries; an entry of 0 is invalid.
#[derive(Debug, Clone)]
pub struct SetArray {
    ways: usize,
    sets: usize,
    stride: usize,
    entries: Vec<u64>,
    meta: Meta,
}

impl SetArray {
    pub fn new(sets: usize, ways: usize, policy: Policy, seed: u64) -> Self {
        let meta = match policy {
            Policy::Lru => Meta::Lru { clock: 0 },
            Policy::TreePlru => Meta::Plru { bits: vec![0; sets], tree: PlruTree::new(ways) },
            Policy::Random => Meta::Random { rng: ChaCha8Rng::seed_from_u64(seed) },
        };
        let stride = if policy == Policy::Lru { 2 * ways } else { ways };
        SetArray { ways, sets, stride, entries: vec![0; sets * stride], meta }
    }

    pub fn ways(&self) -> usize {
        self.ways
    }

    pub fn sets(&self) -> usize {
        self.sets
    }

    #[inline]
    pub fn set_entries(&self, set: usize) -> &[u64] {
        let base = set * self.stride;
        &self.entries[base..base + self.ways]
    }

    #[inline]
    pub fn find(&self, set: usize, key: u64) -> Option<usize> {
        self.set_entries(set).iter().position(|&e| e & KEY_MASK == key)
    }

    #[inline]
    pub fn entry(&self, set: usize, way: usize) -> u64 {
        self.entries[set * self.stride + way]
    }

    #[inline]
    pub fn set_entry(&mut self, set: usize, way: usize, value: u64) {
        self.entries[set * self.stride + way] = value;
    }

    #[inline]
    pub fn touch(&mut self, set: usize, way: usize) {
        match &mut self.meta {
            Meta::Lru { clock } => {
                *clock += 1;
                self.entries[set * self.stride + self.ways + way] = *clock;
            }
            Meta::Plru { bits, tree } => tree.touch(&mut bits[set], way),
            Meta::Random { .. } => {}
        }
    }

    /// Way that the next fill will use: an invalid way if any, else the policy's choice.
    #[inline]
    pub fn victim(&mut self, set: usize) -> usize {
        let base = set * self.stride;
        if let Some(w) = self.entries[base..base + self.ways].iter().position(|&e| e == 0) {
            return w;
        }
        match &mut self.meta {
            Meta::Lru { .. } => {
                let s = &self.entries[base + self.ways..base + 2 * self.ways];
                let mut best = 0;
                for w in 1..self.ways {
                    if s[w] < s[best] {
                        best = w;
                    }
                }
                best
            }
            Meta::Plru { bits, tree } => tree.victim(bits[set]),
            Meta::Random { rng } => rng.random_range(0..self.ways),
        }
    }

    /// Fill `value` into `set`; returns the way used and the displaced entry.
    #[inline]
    pub fn insert(&mut self, set: usize, value: u64) -> (usize, Option<u64>) {
        let way = self.victim(set);
        let old = self.entry(set, way);
        self.set_entry(set, way, value);
        self.touch(set, way);
        (way, (old != 0).then_some(old))
    }

    #[inline]
    pub fn invalidate(&mut self, set: usize, way: usize) {
        self.set_entry(set, way, 0);
    }

    /// Remove `key` if present; returns the removed entry.
    #[inline]
    pub fn remove(&mut self, set: usize, key: u64) -> Option<u64> {
        let way = self.find(set, key)?;
        let old = self.entry(set, way);
        self.invalidate(set, way);
        Some(old)
    }

    pub fn occupancy(&self, set: usize) -> usize {
        self.set_entries(set).iter().filter(|&&e| e != 0).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fill_and_count_evictions(policy: Policy, ways: usize, lines: u64) -> usize {
        let mut a = SetArray::new(1, ways, policy, 1);
        let mut ev = 0;
        for k in 1..=lines {
            if a.find(0, k).is_none() && a.insert(0, k).1.is_some() {
                ev += 1;
            }
        }
        ev
    }

    #[test]
    fn pigeonhole_evictions() {
        for p in [Policy::Lru, Policy::TreePlru, Policy::Random] {
            assert_eq!(fill_and_count_evictions(p, 12, 13), 1);
            assert_eq!(fill_and_count_evictions(p, 12, 12), 0);
        }
    }

    #[test]
    fn lru_evicts_oldest() {
        let mut a = SetArray::new(1, 4, Policy::Lru, 0);
        for k in 1..=4 {
            a.insert(0, k);
        }
        let w = a.find(0, 1).unwrap();
        a.touch(0, w);
        let (_, old) = a.insert(0, 5);
        assert_eq!(old, Some(2));
    }

    #[test]
    fn plru_power_of_two_cycles_all_ways() {
        // W misses on a full power-of-two tree PLRU replace every way once.
        let mut a = SetArray::new(1, 16, Policy::TreePlru, 0);
        for k in 1..=16 {
            a.insert(0, k);
        }
        let mut ways = std::collections::BTreeSet::new();
        for k in 17..=32 {
            ways.insert(a.insert(0, k).0);
        }
        assert_eq!(ways.len(), 16);
    }

    #[test]
    fn plru_tree_shapes() {
        for ways in 1..=20 {
            let t = PlruTree::new(ways);
            assert_eq!(t.nodes.len(), ways.saturating_sub(1));
            let max_depth = t.paths.iter().map(Vec::len).max().unwrap();
            let min_depth = t.paths.iter().map(Vec::len).min().unwrap();
            assert!(max_depth - min_depth <= 1);
            // touching a way never leaves the victim pointer on it
            for w in 0..ways {
                let mut bits = 0u32;
                t.touch(&mut bits, w);
                if ways > 1 {
                    assert_ne!(t.victim(bits), w);
                }
            }
        }
    }

    #[test]
    fn remove_and_occupancy() {
        let mut a = SetArray::new(2, 3, Policy::Random, 7);
        a.insert(1, 10);
        a.insert(1, 11);
        assert_eq!(a.occupancy(1), 2);
        assert_eq!(a.remove(1, 10), Some(10));
        assert_eq!(a.remove(1, 10), None);
        assert_eq!(a.occupancy(1), 1);
        assert_eq!(a.occupancy(0), 0);
    }
}
