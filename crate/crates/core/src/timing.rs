//! The attacker's only window onto the machine: timed accesses and the two
//! TestEviction primitives, with a latency / memory-level-parallelism cost
//! model driving the simulated clock.

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::address::{AddressSpace, VirtAddr};
use crate::cache::{AccessKind, Hit, Machine, ATTACKER_SPACE, MAIN};
use crate::error::{Error, Result};
use crate::geometry::{CacheGeometry, Level};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub l1: u64,
    pub l2: u64,
    pub llc: u64,
    pub memory: u64,
    /// Misses that can be in flight at once.
    pub mlp_width: u64,
    /// Pipeline cost of issuing one more overlapped access.
    pub issue: u64,
    /// Fixed cost of a parallel TestEviction (fences, loop setup).
    pub par_overhead: u64,
    pub flush: u64,
    /// Cost of reading the timestamp counter around a measured access.
    pub timer: u64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            l1: 4,
            l2: 14,
            llc: 60,
            memory: 200,
            mlp_width: 10,
            issue: 2,
            par_overhead: 100,
            flush: 40,
            timer: 80,
        }
    }
}

impl LatencyModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.l1 < self.l2 && self.l2 < self.llc && self.llc < self.memory) {
            return Err(Error::Config("latencies must increase strictly from L1 to memory".into()));
        }
        if self.mlp_width == 0 {
            return Err(Error::Config("mlp_width must be positive".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn latency(&self, hit: Hit) -> u64 {
        match hit {
            Hit::L1 => self.l1,
            Hit::L2 => self.l2,
            Hit::Llc => self.llc,
            Hit::Memory => self.memory,
        }
    }

    /// Fast/slow boundary for a target held at `level`. A target kept in the
    /// LLC is slow once it has to come from memory; a private target is slow
    /// once it has left the private caches.
    pub fn threshold(&self, level: Level) -> u64 {
        match level {
            Level::Llc => (self.llc + self.memory) / 2,
            Level::L1 | Level::L2 | Level::Sf => (self.l2 + self.llc) / 2,
        }
    }

    /// Duration of `n` overlapped accesses with the given latencies.
    pub fn batch_latency(&self, lats: &[u64]) -> u64 {
        lats.chunks(self.mlp_width as usize)
            .map(|wave| wave.iter().copied().max().unwrap_or(0) + self.issue * (wave.len() as u64 - 1))
            .sum()
    }

    /// Duration of independent loads issued back to back: misses overlap up
    /// to `mlp_width` at a time and hits hide behind them.
    pub fn overlapped(&self, lats: &[u64]) -> u64 {
        if lats.is_empty() {
            return 0;
        }
        let issue = self.issue * (lats.len() as u64 - 1);
        let mut slow: Vec<u64> = lats.iter().copied().filter(|&l| l > self.l2).collect();
        if slow.is_empty() {
            return lats.iter().copied().max().unwrap_or(0) + issue;
        }
        slow.sort_unstable_by(|a, b| b.cmp(a));
        slow.chunks(self.mlp_width as usize).map(|w| w[0]).sum::<u64>() + issue
    }

    /// Clock cost of a parallel TestEviction over `n` candidates.
    pub fn par_cost(&self, n: u64) -> u64 {
        n.div_ceil(self.mlp_width) * self.memory + self.par_overhead
    }

    pub fn seq_cost(&self, n: u64) -> u64 {
        n * self.memory
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimedClass {
    CachedFast,
    EvictedSlow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimedResult {
    pub latency: u64,
    pub class: TimedClass,
}

impl TimedResult {
    pub fn evicted(&self) -> bool {
        self.class == TimedClass::EvictedSlow
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestStyle {
    Sequential,
    Parallel,
}

/// What pruning algorithms are allowed to do.
///
/// `level` selects how lines are held during a test: `Llc` keeps the target
/// and candidates shared in the LLC (a helper core re-reads them); `Sf` and
/// `L2` keep them private to the main core, flushing them first so every test
/// starts from misses.
pub trait EvictionOracle {
    fn geometry(&self) -> &CacheGeometry;
    fn latency(&self) -> &LatencyModel;
    /// Simulated clock, cycles.
    fn now(&self) -> u64;
    fn cycles_per_ms(&self) -> f64;
    /// Memory accesses issued so far.
    fn accesses(&self) -> u64;
    /// The attacker's address space, for allocating candidates.
    fn space(&mut self) -> &mut AddressSpace;

    fn test_eviction(&mut self, target: VirtAddr, addrs: &[VirtAddr], level: Level, style: TestStyle) -> bool;

    /// Load the target, then access `addrs` one at a time checking after each
    /// whether the target is still cached; returns the index of the access
    /// after which it was gone.
    fn scope_scan(&mut self, target: VirtAddr, addrs: &[VirtAddr], level: Level) -> Option<usize>;

    /// Ground-truth count of addresses congruent with `target`. Only consulted
    /// by optional self-checks in tests; `None` when the backend has no
    /// ground truth (as real hardware would not).
    fn debug_congruent_count(&mut self, _target: VirtAddr, _addrs: &[VirtAddr], _level: Level) -> Option<usize> {
        None
    }
}

/// Oracle backed by the full simulator.
#[derive(Debug, Clone)]
pub struct SimOracle {
    pub machine: Machine,
    pub lat: LatencyModel,
    /// Flush candidates before LLC-level tests too, so that every test starts
    /// from cold fills. Needed for crisp answers under tree-PLRU.
    pub flush_llc_tests: bool,
    accesses: u64,
    /// Lines of the last flushing test; flushed again by the next one so no
    /// stale line sits in the set.
    last_flushed: Vec<VirtAddr>,
}

impl SimOracle {
    pub fn new(machine: Machine, lat: LatencyModel) -> Result<Self> {
        lat.validate()?;
        Ok(SimOracle { machine, lat, flush_llc_tests: false, accesses: 0, last_flushed: Vec::new() })
    }

    #[inline]
    fn pa(&mut self, va: VirtAddr) -> crate::address::PhysAddr {
        self.machine.translate(ATTACKER_SPACE, va)
    }

    /// One measured read by the main core.
    pub fn timed_access(&mut self, va: VirtAddr, level: Level) -> TimedResult {
        let pa = self.pa(va);
        let hit = self.machine.access(MAIN, pa, AccessKind::Read);
        self.accesses += 1;
        let latency = self.lat.latency(hit);
        self.machine.advance(latency + self.lat.timer);
        let class = if latency > self.lat.threshold(level) { TimedClass::EvictedSlow } else { TimedClass::CachedFast };
        TimedResult { latency, class }
    }

    /// Untimed read by the main core; returns its latency without moving the
    /// clock, so callers can charge batches as they see fit.
    pub fn read(&mut self, va: VirtAddr) -> u64 {
        let pa = self.pa(va);
        let hit = self.machine.access(MAIN, pa, AccessKind::Read);
        self.accesses += 1;
        self.lat.latency(hit)
    }

    /// clflush of one attacker line, charged at the flush cost.
    pub fn flush_line(&mut self, va: VirtAddr) {
        let pa = self.pa(va);
        self.machine.flush(pa);
        self.machine.advance(self.lat.flush);
    }

    pub fn test_eviction_seq(&mut self, target: VirtAddr, addrs: &[VirtAddr], n: usize) -> bool {
        self.test_eviction(target, &addrs[..n], Level::Llc, TestStyle::Sequential)
    }

    pub fn test_eviction_par(&mut self, target: VirtAddr, addrs: &[VirtAddr], n: usize) -> bool {
        self.test_eviction(target, &addrs[..n], Level::Llc, TestStyle::Parallel)
    }

    fn load_target(&mut self, target: VirtAddr, level: Level) {
        let t = self.pa(target);
        match level {
            Level::Llc => self.machine.make_shared(t),
            _ => {
                self.machine.flush(t);
                self.machine.access(MAIN, t, AccessKind::Read);
            }
        }
        self.accesses += 1;
        self.machine.advance(self.lat.memory);
    }

    #[inline]
    fn touch(&mut self, va: VirtAddr, level: Level) {
        let pa = self.pa(va);
        match level {
            Level::Llc => self.machine.make_shared(pa),
            _ => {
                self.machine.access(MAIN, pa, AccessKind::Read);
            }
        }
        self.accesses += 1;
    }
}

impl EvictionOracle for SimOracle {
    fn geometry(&self) -> &CacheGeometry {
        self.machine.geometry()
    }

    fn latency(&self) -> &LatencyModel {
        &self.lat
    }

    fn now(&self) -> u64 {
        self.machine.now()
    }

    fn cycles_per_ms(&self) -> f64 {
        self.machine.cycles_per_ms()
    }

    fn accesses(&self) -> u64 {
        self.accesses
    }

    fn space(&mut self) -> &mut AddressSpace {
        self.machine.space(ATTACKER_SPACE)
    }

    fn test_eviction(&mut self, target: VirtAddr, addrs: &[VirtAddr], level: Level, style: TestStyle) -> bool {
        let lat = self.lat;
        if level != Level::Llc || self.flush_llc_tests {
            let mut last = std::mem::take(&mut self.last_flushed);
            let stale = last.len();
            for &a in last.iter().chain([&target]).chain(addrs) {
                let pa = self.pa(a);
                self.machine.flush(pa);
            }
            self.machine.advance((stale + addrs.len() + 1).div_ceil(lat.mlp_width as usize) as u64 * lat.flush);
            last.clear();
            last.push(target);
            last.extend_from_slice(addrs);
            self.last_flushed = last;
        }
        self.load_target(target, level);
        match style {
            TestStyle::Sequential => {
                for &a in addrs {
                    self.touch(a, level);
                    self.machine.advance(lat.memory);
                }
            }
            TestStyle::Parallel => {
                for (i, &a) in addrs.iter().enumerate() {
                    if i > 0 && i as u64 % lat.mlp_width == 0 {
                        self.machine.advance(lat.memory);
                    }
                    self.touch(a, level);
                }
                if !addrs.is_empty() {
                    self.machine.advance(lat.memory);
                }
                self.machine.advance(lat.par_overhead);
            }
        }
        self.timed_access(target, level).evicted()
    }

    fn scope_scan(&mut self, target: VirtAddr, addrs: &[VirtAddr], level: Level) -> Option<usize> {
        assert_eq!(level, Level::Llc, "scope scans run against the LLC");
        self.load_target(target, level);
        let t = self.pa(target);
        let lat = self.lat;
        for (i, &a) in addrs.iter().enumerate() {
            self.touch(a, level);
            self.machine.advance(lat.memory);
            // the scope line sits in L1; checking it leaves replacement state alone
            self.accesses += 1;
            self.machine.advance(lat.l1 + lat.issue);
            if !self.machine.in_llc(t) {
                return Some(i);
            }
        }
        None
    }

    fn debug_congruent_count(&mut self, target: VirtAddr, addrs: &[VirtAddr], level: Level) -> Option<usize> {
        let t = self.pa(target);
        let geom = self.machine.geometry().clone();
        Some(
            addrs
                .iter()
                .filter(|&&a| {
                    let pa = self.pa(a);
                    geom.congruent(t.0, pa.0, level)
                })
                .count(),
        )
    }
}

/// Noise-free oracle that answers from address congruence alone, as an
/// idealised LRU machine would, while charging the same clock costs as
/// [`SimOracle`]. Orders of magnitude cheaper than full simulation; useful
/// for driver-level counting experiments.
#[derive(Debug, Clone)]
pub struct IdealOracle {
    geom: CacheGeometry,
    lat: LatencyModel,
    space: AddressSpace,
    clock: u64,
    accesses: u64,
    last_flushed: u64,
    classes: FxHashMap<u64, (u32, u32)>,
}

impl IdealOracle {
    pub fn new(geom: CacheGeometry, lat: LatencyModel, seed: u64) -> Result<Self> {
        geom.validate()?;
        lat.validate()?;
        Ok(IdealOracle {
            geom,
            lat,
            space: AddressSpace::new(ATTACKER_SPACE as u8, seed),
            clock: 0,
            accesses: 0,
            last_flushed: 0,
            classes: FxHashMap::default(),
        })
    }

    #[inline]
    fn class(&mut self, va: VirtAddr) -> (u32, u32) {
        if let Some(&c) = self.classes.get(&va.0) {
            return c;
        }
        let pa = self.space.translate(va).0;
        let c = (self.geom.set_of(pa, Level::L2) as u32, self.geom.llc_global_set(pa) as u32);
        self.classes.insert(va.0, c);
        c
    }

    #[inline]
    fn key(&mut self, va: VirtAddr, level: Level) -> u32 {
        let (l2, g) = self.class(va);
        match level {
            Level::L1 | Level::L2 => l2,
            Level::Llc | Level::Sf => g,
        }
    }

    /// Position of the `w`-th address congruent with the target, if any.
    fn tipping_point(&mut self, target: VirtAddr, addrs: &[VirtAddr], level: Level) -> Option<usize> {
        let w = self.geom.ways(level);
        let tk = self.key(target, level);
        let mut seen = 0;
        for (i, &a) in addrs.iter().enumerate() {
            if self.key(a, level) == tk {
                seen += 1;
                if seen == w {
                    return Some(i);
                }
            }
        }
        None
    }

    /// Flat LLC/SF set of `va`.
    pub fn global_set(&mut self, va: VirtAddr) -> usize {
        self.class(va).1 as usize
    }

    /// Ground-truth congruence, for tests.
    pub fn congruent(&mut self, a: VirtAddr, b: VirtAddr, level: Level) -> bool {
        self.key(a, level) == self.key(b, level)
    }
}

impl EvictionOracle for IdealOracle {
    fn geometry(&self) -> &CacheGeometry {
        &self.geom
    }

    fn latency(&self) -> &LatencyModel {
        &self.lat
    }

    fn now(&self) -> u64 {
        self.clock
    }

    fn cycles_per_ms(&self) -> f64 {
        2.0e6
    }

    fn accesses(&self) -> u64 {
        self.accesses
    }

    fn space(&mut self) -> &mut AddressSpace {
        &mut self.space
    }

    fn test_eviction(&mut self, target: VirtAddr, addrs: &[VirtAddr], level: Level, style: TestStyle) -> bool {
        let n = addrs.len() as u64;
        let lat = self.lat;
        if level != Level::Llc {
            self.clock += (self.last_flushed + n + 1).div_ceil(lat.mlp_width) * lat.flush;
            self.last_flushed = n + 1;
        }
        self.clock += lat.memory;
        self.clock += match style {
            TestStyle::Sequential => lat.seq_cost(n),
            TestStyle::Parallel => lat.par_cost(n),
        };
        let evicted = self.tipping_point(target, addrs, level).is_some();
        self.clock += if evicted { lat.memory } else { lat.llc } + lat.timer;
        self.accesses += n + 2;
        evicted
    }

    fn scope_scan(&mut self, target: VirtAddr, addrs: &[VirtAddr], level: Level) -> Option<usize> {
        assert_eq!(level, Level::Llc, "scope scans run against the LLC");
        let found = self.tipping_point(target, addrs, level);
        let examined = found.map(|i| i + 1).unwrap_or(addrs.len()) as u64;
        self.clock += self.lat.memory + examined * (self.lat.memory + self.lat.l1 + self.lat.issue);
        self.accesses += 1 + 2 * examined;
        found
    }

    fn debug_congruent_count(&mut self, target: VirtAddr, addrs: &[VirtAddr], level: Level) -> Option<usize> {
        let tk = self.key(target, level);
        Some(addrs.iter().filter(|&&a| self.key(a, level) == tk).count())
    }
}

#[cfg(test)]
mod tests;
