//! Non-inclusive cache hierarchy: per-core L1/L2, sliced LLC and sliced
//! snoop filter (SF), with the coherence transitions between them.
//!
//! Lines held privately in E state are tracked by the SF and are absent from
//! the LLC. Lines shared between cores live in the LLC and have no SF entry.

mod replacement;

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use replacement::{Policy, SetArray, KEY_MASK};

use crate::address::{AddressSpace, PhysAddr, VirtAddr};
use crate::error::{Error, Result};
use crate::geometry::{CacheGeometry, Level};
use crate::noise::{NoiseModel, NoiseState};

/// Core ids. The attacker owns two cores (main and helper); the victim and the
/// background tenant each get their own.
pub const MAIN: usize = 0;
pub const HELPER: usize = 1;
pub const VICTIM: usize = 2;
pub const TENANT: usize = 3;
pub const N_CORES: usize = 4;

/// Address-space ids.
pub const ATTACKER_SPACE: usize = 0;
pub const VICTIM_SPACE: usize = 1;
const N_SPACES: usize = 2;

const EXCL: u64 = 1 << 48;
const OWNER_SHIFT: u32 = 48;
/// LLC entries carry a superset of the cores that may hold S copies.
const SHARERS_SHIFT: u32 = 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessKind {
    Read,
    CodeFetch,
}

/// Where an access was served from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hit {
    L1,
    L2,
    /// LLC hit, or a snoop of another core's private copy.
    Llc,
    Memory,
}

impl Hit {
    pub fn as_str(self) -> &'static str {
        match self {
            Hit::L1 => "l1",
            Hit::L2 => "l2",
            Hit::Llc => "llc",
            Hit::Memory => "mem",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policies {
    pub l1: Policy,
    pub l2: Policy,
    pub llc: Policy,
    pub sf: Policy,
}

impl Default for Policies {
    fn default() -> Self {
        Policies { l1: Policy::TreePlru, l2: Policy::TreePlru, llc: Policy::Lru, sf: Policy::Lru }
    }
}

impl Policies {
    pub fn uniform(p: Policy) -> Self {
        Policies { l1: p, l2: p, llc: p, sf: p }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineConfig {
    pub geometry: CacheGeometry,
    pub policies: Policies,
    /// Probability that an SF victim (or an E line leaving L2) is kept in the LLC.
    pub p_reuse: f64,
    pub seed: u64,
    pub clock_hz: f64,
    pub check_invariants: bool,
    pub log_events: bool,
}

impl MachineConfig {
    pub fn new(geometry: CacheGeometry, seed: u64) -> Self {
        MachineConfig {
            geometry,
            policies: Policies::default(),
            p_reuse: 1.0,
            seed,
            clock_hz: 2.0e9,
            check_invariants: false,
            log_events: false,
        }
    }

    pub fn cycles_per_ms(&self) -> f64 {
        self.clock_hz / 1000.0
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if !(0.0..=1.0).contains(&self.p_reuse) {
            return Err(Error::Config(format!("p_reuse {} outside [0, 1]", self.p_reuse)));
        }
        if !(self.clock_hz > 0.0) {
            return Err(Error::Config("clock frequency must be positive".into()));
        }
        Ok(())
    }
}

/// Coherence state of one line, from the ground-truth view.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CoherenceState {
    Invalid,
    Exclusive { owner: usize },
    SharedInLlc { sharers: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub cycle: u64,
    pub core: u8,
    pub pa: u64,
    pub hit: Hit,
    pub evicted_set: Option<u32>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineStats {
    pub accesses: u64,
    pub sf_evictions: u64,
    pub llc_evictions: u64,
    pub back_invalidations: u64,
    pub flushes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Scheduled {
    time: u64,
    seq: u64,
    core: usize,
    pa: u64,
    flush_after: bool,
}

/// Full simulated hierarchy plus clock, address spaces, scheduled foreign
/// accesses and the background-noise process.
#[derive(Debug, Clone)]
pub struct Machine {
    cfg: MachineConfig,
    geom: CacheGeometry,
    l1: Vec<SetArray>,
    l2: Vec<SetArray>,
    llc: SetArray,
    sf: SetArray,
    clock: u64,
    spaces: Vec<AddressSpace>,
    reuse_rng: ChaCha8Rng,
    log: Option<Vec<Event>>,
    noise: Option<NoiseState>,
    noise_buf: Vec<u64>,
    schedule: BinaryHeap<Reverse<Scheduled>>,
    sched_seq: u64,
    stats: MachineStats,
    evicted: Option<u32>,
}

#[inline]
fn key_of(line: u64) -> u64 {
    line + 1
}

impl Machine {
    pub fn new(cfg: MachineConfig) -> Result<Self> {
        cfg.validate()?;
        let g = cfg.geometry.clone();
        let seed = cfg.seed;
        let sub = |k: u64| seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(k);
        let p = cfg.policies;
        let l1 = (0..N_CORES)
            .map(|c| SetArray::new(g.l1.sets, g.l1.ways, p.l1, sub(10 + c as u64)))
            .collect();
        let l2 = (0..N_CORES)
            .map(|c| SetArray::new(g.l2.sets, g.l2.ways, p.l2, sub(20 + c as u64)))
            .collect();
        let total = g.llc_total_sets();
        Ok(Machine {
            llc: SetArray::new(total, g.llc.ways, p.llc, sub(1)),
            sf: SetArray::new(total, g.sf.ways, p.sf, sub(2)),
            l1,
            l2,
            clock: 0,
            spaces: (0..N_SPACES).map(|i| AddressSpace::new(i as u8, sub(100 + i as u64))).collect(),
            reuse_rng: ChaCha8Rng::seed_from_u64(sub(3)),
            log: cfg.log_events.then(Vec::new),
            noise: None,
            noise_buf: Vec::new(),
            schedule: BinaryHeap::new(),
            sched_seq: 0,
            stats: MachineStats::default(),
            evicted: None,
            geom: g,
            cfg,
        })
    }

    pub fn config(&self) -> &MachineConfig {
        &self.cfg
    }

    pub fn geometry(&self) -> &CacheGeometry {
        &self.geom
    }

    pub fn stats(&self) -> MachineStats {
        self.stats
    }

    pub fn now(&self) -> u64 {
        self.clock
    }

    pub fn cycles_per_ms(&self) -> f64 {
        self.cfg.cycles_per_ms()
    }

    pub fn space(&mut self, id: usize) -> &mut AddressSpace {
        &mut self.spaces[id]
    }

    #[inline]
    pub fn translate(&mut self, space: usize, va: VirtAddr) -> PhysAddr {
        self.spaces[space].translate(va)
    }

    /// Ground-truth congruence of two attacker addresses.
    pub fn congruent(&mut self, a: VirtAddr, b: VirtAddr, level: Level) -> bool {
        let pa = self.translate(ATTACKER_SPACE, a);
        let pb = self.translate(ATTACKER_SPACE, b);
        self.geom.congruent(pa.0, pb.0, level)
    }

    // ---- clock, noise and foreign activity ----

    /// Move the clock forward; foreign activity up to the new time is applied
    /// lazily by the next access or query.
    #[inline]
    pub fn advance(&mut self, cycles: u64) {
        self.clock += cycles;
    }

    /// Jump the clock to `t` (never backwards) and apply everything due.
    pub fn run_until(&mut self, t: u64) {
        self.clock = self.clock.max(t);
        self.drain_schedule();
    }

    pub fn attach_noise(&mut self, model: NoiseModel) -> Result<()> {
        model.validate()?;
        self.noise = Some(NoiseState::new(model, self.geom.llc_total_sets(), self.cycles_per_ms()));
        Ok(())
    }

    pub fn noise_model(&self) -> Option<NoiseModel> {
        self.noise.as_ref().map(|n| n.model)
    }

    /// Noise is injected into this flat LLC/SF set under target-only scope.
    pub fn register_noised_set(&mut self, g: usize) {
        if let Some(n) = &mut self.noise {
            n.register(g);
        }
    }

    /// Keep every arrival time for set `g` (for inter-arrival statistics).
    pub fn record_noise_arrivals(&mut self, g: Option<usize>) {
        if let Some(n) = &mut self.noise {
            n.record_set(g);
        }
    }

    pub fn recorded_noise_arrivals(&self) -> &[u64] {
        self.noise.as_ref().map(|n| n.recorded.as_slice()).unwrap_or(&[])
    }

    pub fn noise_injected(&self) -> u64 {
        self.noise.as_ref().map(|n| n.total_injected).unwrap_or(0)
    }

    pub fn noise_injected_in(&self, g: usize) -> u64 {
        self.noise.as_ref().map(|n| n.injected_in(g) as u64).unwrap_or(0)
    }

    /// Earliest time after which the contents of flat set `g` may change
    /// without any attacker action.
    pub fn next_foreign_event(&self, g: usize) -> u64 {
        let sched = self.schedule.peek().map(|Reverse(s)| s.time).unwrap_or(u64::MAX);
        let noise = self.noise.as_ref().and_then(|n| n.next_arrival(g)).unwrap_or(u64::MAX);
        sched.min(noise)
    }

    /// Queue an access by another core at absolute time `time`.
    pub fn schedule_access(&mut self, time: u64, core: usize, pa: PhysAddr) {
        self.sched_seq += 1;
        self.schedule.push(Reverse(Scheduled { time, seq: self.sched_seq, core, pa: pa.0, flush_after: false }));
    }

    /// Queue an access followed at once by a clflush of the same line, so
    /// every such access misses and allocates afresh.
    pub fn schedule_access_flush(&mut self, time: u64, core: usize, pa: PhysAddr) {
        self.sched_seq += 1;
        self.schedule.push(Reverse(Scheduled { time, seq: self.sched_seq, core, pa: pa.0, flush_after: true }));
    }

    pub fn pending_scheduled(&self) -> usize {
        self.schedule.len()
    }

    pub fn clear_schedule(&mut self) {
        self.schedule.clear();
    }

    #[inline]
    fn drain_schedule(&mut self) {
        while let Some(Reverse(s)) = self.schedule.peek().copied() {
            if s.time > self.clock {
                break;
            }
            self.schedule.pop();
            let g = self.geom.llc_global_set(s.pa);
            self.catch_up_noise(g, s.time);
            self.raw_access(s.core, s.pa, s.time);
            if s.flush_after {
                self.flush_raw(g, s.pa);
            }
        }
    }

    #[inline]
    fn catch_up_noise(&mut self, g: usize, t: u64) {
        let Some(noise) = self.noise.as_mut() else { return };
        let mut buf = std::mem::take(&mut self.noise_buf);
        let first = noise.due(g, t, &mut buf);
        if first {
            // start the set in steady state: tenant lines already fill the SF set
            for _ in 0..self.geom.sf.ways {
                let pa = self.noise.as_mut().unwrap().tenant_line(&self.geom, g);
                self.raw_access(TENANT, pa, t);
            }
        }
        for i in 0..buf.len() {
            let pa = self.noise.as_mut().unwrap().tenant_line(&self.geom, g);
            self.raw_access(TENANT, pa, buf[i]);
        }
        self.noise_buf = buf;
    }

    /// Apply everything due on set `g` up to now.
    #[inline]
    fn sync(&mut self, g: usize) {
        self.drain_schedule();
        self.catch_up_noise(g, self.clock);
    }

    // ---- attacker-visible operations ----

    /// One access by `core` at the current time.
    pub fn access(&mut self, core: usize, pa: PhysAddr, _kind: AccessKind) -> Hit {
        assert!(core < N_CORES, "core {core} out of range");
        let g = self.geom.llc_global_set(pa.0);
        self.sync(g);
        self.raw_access(core, pa.0, self.clock)
    }

    /// Leave the line shared in the LLC, as if a helper core had read it
    /// alongside the main core. Private copies stay valid in S state.
    pub fn make_shared(&mut self, pa: PhysAddr) {
        let g = self.geom.llc_global_set(pa.0);
        self.sync(g);
        self.evicted = None;
        let key = key_of(self.geom.line_of(pa.0));
        self.stats.accesses += 1;
        if let Some(w) = self.sf.find(g, key) {
            let owner = (self.sf.entry(g, w) >> OWNER_SHIFT) as usize;
            self.sf.invalidate(g, w);
            self.downgrade(owner, pa.0, key);
            self.llc_insert(g, key, 1 << owner);
        } else if let Some(w) = self.llc.find(g, key) {
            self.llc.touch(g, w);
        } else {
            self.llc_insert(g, key, 0);
        }
        self.log_event(HELPER, pa.0, self.clock, Hit::Llc);
        self.after_access(pa.0);
    }

    /// clflush: drop the line from every structure.
    pub fn flush(&mut self, pa: PhysAddr) {
        let g = self.geom.llc_global_set(pa.0);
        self.sync(g);
        self.flush_raw(g, pa.0);
    }

    fn flush_raw(&mut self, g: usize, pa: u64) {
        let key = key_of(self.geom.line_of(pa));
        // private copies are always tracked by the SF owner or the LLC sharer mask
        let holders = if let Some(e) = self.sf.remove(g, key) {
            1 << (e >> OWNER_SHIFT)
        } else if let Some(e) = self.llc.remove(g, key) {
            e >> SHARERS_SHIFT
        } else {
            0
        };
        for c in (0..N_CORES).filter(|c| holders >> c & 1 == 1) {
            self.drop_private(c, pa, key);
        }
        self.stats.flushes += 1;
    }

    // ---- ground-truth queries (they apply due foreign activity first) ----

    pub fn private_level(&mut self, core: usize, pa: PhysAddr) -> Option<Level> {
        let g = self.geom.llc_global_set(pa.0);
        self.sync(g);
        let key = key_of(self.geom.line_of(pa.0));
        if self.l1[core].find(self.geom.set_of(pa.0, Level::L1), key).is_some() {
            Some(Level::L1)
        } else if self.l2[core].find(self.geom.set_of(pa.0, Level::L2), key).is_some() {
            Some(Level::L2)
        } else {
            None
        }
    }

    pub fn in_llc(&mut self, pa: PhysAddr) -> bool {
        let g = self.geom.llc_global_set(pa.0);
        self.sync(g);
        self.llc.find(g, key_of(self.geom.line_of(pa.0))).is_some()
    }

    pub fn in_sf(&mut self, pa: PhysAddr) -> bool {
        let g = self.geom.llc_global_set(pa.0);
        self.sync(g);
        self.sf.find(g, key_of(self.geom.line_of(pa.0))).is_some()
    }

    pub fn state_of(&mut self, pa: PhysAddr) -> CoherenceState {
        let g = self.geom.llc_global_set(pa.0);
        self.sync(g);
        let key = key_of(self.geom.line_of(pa.0));
        if let Some(w) = self.sf.find(g, key) {
            return CoherenceState::Exclusive { owner: (self.sf.entry(g, w) >> OWNER_SHIFT) as usize };
        }
        if self.llc.find(g, key).is_some() {
            let l2s = self.geom.set_of(pa.0, Level::L2);
            let sharers = (0..N_CORES).filter(|&c| self.l2[c].find(l2s, key).is_some()).collect();
            return CoherenceState::SharedInLlc { sharers };
        }
        CoherenceState::Invalid
    }

    /// Lines (as physical line addresses) currently held in an SF or LLC set.
    pub fn set_lines(&mut self, level: Level, g: usize) -> Vec<PhysAddr> {
        self.drain_schedule();
        self.catch_up_noise(g, self.clock);
        let arr = match level {
            Level::Sf => &self.sf,
            Level::Llc => &self.llc,
            _ => panic!("set_lines is only defined for the LLC and SF"),
        };
        arr.set_entries(g)
            .iter()
            .filter(|&&e| e != 0)
            .map(|&e| PhysAddr(((e & KEY_MASK) - 1) << self.geom.line_bits))
            .collect()
    }

    /// Owner core of every line in an SF set.
    pub fn sf_owners(&mut self, g: usize) -> Vec<usize> {
        self.sync(g);
        self.sf
            .set_entries(g)
            .iter()
            .filter(|&&e| e != 0)
            .map(|&e| (e >> OWNER_SHIFT) as usize)
            .collect()
    }

    pub fn events(&self) -> &[Event] {
        self.log.as_deref().unwrap_or(&[])
    }

    pub fn take_events(&mut self) -> Vec<Event> {
        self.log.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn write_events_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        write_events_csv(self.events(), w)
    }

    // ---- the coherence engine ----

    fn raw_access(&mut self, core: usize, pa: u64, t: u64) -> Hit {
        self.evicted = None;
        self.stats.accesses += 1;
        let hit = self.lookup_and_fill(core, pa);
        self.log_event(core, pa, t, hit);
        self.after_access(pa);
        hit
    }

    #[inline]
    fn lookup_and_fill(&mut self, core: usize, pa: u64) -> Hit {
        let geom = &self.geom;
        let key = key_of(geom.line_of(pa));
        let s1 = geom.set_of(pa, Level::L1);
        let s2 = geom.set_of(pa, Level::L2);
        let g = geom.llc_global_set(pa);
        if let Some(w) = self.l1[core].find(s1, key) {
            self.l1[core].touch(s1, w);
            return Hit::L1;
        }
        if let Some(w) = self.l2[core].find(s2, key) {
            self.l2[core].touch(s2, w);
            self.fill_l1(core, s1, key);
            return Hit::L2;
        }
        if let Some(w) = self.sf.find(g, key) {
            // private to another core: becomes shared, SF entry freed
            let owner = (self.sf.entry(g, w) >> OWNER_SHIFT) as usize;
            debug_assert_ne!(owner, core);
            self.sf.invalidate(g, w);
            self.downgrade(owner, pa, key);
            self.llc_insert(g, key, 1 << owner | 1 << core);
            self.fill_private(core, pa, key, false);
            return Hit::Llc;
        }
        if let Some(w) = self.llc.find(g, key) {
            let e = self.llc.entry(g, w);
            let others = (e >> SHARERS_SHIFT) & !(1 << core);
            let shared = (0..N_CORES).any(|c| others >> c & 1 == 1 && self.l2[c].find(s2, key).is_some());
            if shared {
                self.llc.set_entry(g, w, e | 1 << (SHARERS_SHIFT as usize + core));
                self.llc.touch(g, w);
                self.fill_private(core, pa, key, false);
            } else {
                // sole user again: migrate back to private E
                self.llc.invalidate(g, w);
                self.sf_alloc(g, key, core);
                self.fill_private(core, pa, key, true);
            }
            return Hit::Llc;
        }
        self.sf_alloc(g, key, core);
        self.fill_private(core, pa, key, true);
        Hit::Memory
    }

    #[inline]
    fn fill_l1(&mut self, core: usize, s1: usize, key: u64) {
        self.l1[core].insert(s1, key);
    }

    fn fill_private(&mut self, core: usize, pa: u64, key: u64, exclusive: bool) {
        let s2 = self.geom.set_of(pa, Level::L2);
        let entry = if exclusive { key | EXCL } else { key };
        let (_, old) = self.l2[core].insert(s2, entry);
        if let Some(old) = old {
            self.l2_evicted(core, old);
        }
        self.fill_l1(core, self.geom.set_of(pa, Level::L1), key);
    }

    /// A line left `core`'s L2 through capacity pressure.
    fn l2_evicted(&mut self, core: usize, entry: u64) {
        let key = entry & KEY_MASK;
        let pa = (key - 1) << self.geom.line_bits;
        self.l1[core].remove(self.geom.set_of(pa, Level::L1), key);
        if entry & EXCL != 0 {
            let g = self.geom.llc_global_set(pa);
            self.sf.remove(g, key);
            if self.reuse() {
                self.llc_insert(g, key, 0);
            }
        }
    }

    fn sf_alloc(&mut self, g: usize, key: u64, core: usize) {
        let (_, old) = self.sf.insert(g, key | (core as u64) << OWNER_SHIFT);
        if let Some(old) = old {
            self.stats.sf_evictions += 1;
            self.evicted.get_or_insert(g as u32);
            let owner = (old >> OWNER_SHIFT) as usize;
            let vkey = old & KEY_MASK;
            let vpa = (vkey - 1) << self.geom.line_bits;
            self.drop_private(owner, vpa, vkey);
            self.stats.back_invalidations += 1;
            if self.reuse() {
                self.llc_insert(g, vkey, 0);
            }
        }
    }

    fn llc_insert(&mut self, g: usize, key: u64, sharers: u64) {
        let (_, old) = self.llc.insert(g, key | sharers << SHARERS_SHIFT);
        if let Some(old) = old {
            self.stats.llc_evictions += 1;
            self.evicted.get_or_insert(g as u32);
            let vkey = old & KEY_MASK;
            let vpa = (vkey - 1) << self.geom.line_bits;
            let mask = old >> SHARERS_SHIFT;
            for c in (0..N_CORES).filter(|c| mask >> c & 1 == 1) {
                if self.drop_private(c, vpa, vkey) {
                    self.stats.back_invalidations += 1;
                }
            }
        }
    }

    #[inline]
    fn reuse(&mut self) -> bool {
        self.cfg.p_reuse >= 1.0 || self.reuse_rng.random::<f64>() < self.cfg.p_reuse
    }

    fn drop_private(&mut self, core: usize, pa: u64, key: u64) -> bool {
        // L1 is inclusive in L2
        if self.l2[core].remove(self.geom.set_of(pa, Level::L2), key).is_none() {
            return false;
        }
        self.l1[core].remove(self.geom.set_of(pa, Level::L1), key);
        true
    }

    fn downgrade(&mut self, core: usize, pa: u64, key: u64) {
        let s2 = self.geom.set_of(pa, Level::L2);
        if let Some(w) = self.l2[core].find(s2, key) {
            let e = self.l2[core].entry(s2, w);
            self.l2[core].set_entry(s2, w, e & !EXCL);
        }
    }

    #[inline]
    fn log_event(&mut self, core: usize, pa: u64, t: u64, hit: Hit) {
        if let Some(log) = &mut self.log {
            log.push(Event { cycle: t, core: core as u8, pa, hit, evicted_set: self.evicted });
        }
    }

    #[inline]
    fn after_access(&mut self, pa: u64) {
        if self.cfg.check_invariants {
            if let Err(e) = self.check_line(pa) {
                panic!("coherence invariant broken after access to {pa:#x}: {e}");
            }
        }
    }

    /// Coherence invariants for one line.
    pub fn check_line(&self, pa: u64) -> std::result::Result<(), String> {
        let geom = &self.geom;
        let key = key_of(geom.line_of(pa));
        let g = geom.llc_global_set(pa);
        let s1 = geom.set_of(pa, Level::L1);
        let s2 = geom.set_of(pa, Level::L2);
        let in_sf = self.sf.find(g, key);
        let llc_way = self.llc.find(g, key);
        let in_llc = llc_way.is_some();
        let sharers = llc_way.map_or(0, |w| self.llc.entry(g, w) >> SHARERS_SHIFT);
        if in_sf.is_some() && in_llc {
            return Err("line is both SF-tracked and LLC-resident".into());
        }
        let mut excl_holders = Vec::new();
        for c in 0..N_CORES {
            let l2 = self.l2[c].find(s2, key);
            if self.l1[c].find(s1, key).is_some() && l2.is_none() {
                return Err(format!("core {c} holds the line in L1 but not L2"));
            }
            if let Some(w) = l2 {
                if self.l2[c].entry(s2, w) & EXCL != 0 {
                    excl_holders.push(c);
                } else if !in_llc {
                    return Err(format!("core {c} holds a shared copy absent from the LLC"));
                } else if sharers >> c & 1 == 0 {
                    return Err(format!("core {c} holds a shared copy missing from the sharer mask"));
                }
            }
        }
        match (in_sf, excl_holders.as_slice()) {
            (None, []) => Ok(()),
            (Some(w), [c]) => {
                let owner = (self.sf.entry(g, w) >> OWNER_SHIFT) as usize;
                if owner == *c {
                    Ok(())
                } else {
                    Err(format!("SF owner {owner} differs from E holder {c}"))
                }
            }
            (Some(_), []) => Err("SF entry without a private E copy".into()),
            (None, _) => Err("E copy without an SF entry".into()),
            (Some(_), _) => Err("several E holders".into()),
        }
    }

    /// Check every line in every structure.
    pub fn check_all(&self) -> std::result::Result<(), String> {
        let lb = self.geom.line_bits;
        let mut lines = Vec::new();
        for arr in [&self.sf, &self.llc] {
            for g in 0..arr.sets() {
                lines.extend(arr.set_entries(g).iter().filter(|&&e| e != 0).map(|&e| e & KEY_MASK));
            }
        }
        for c in 0..N_CORES {
            for arr in [&self.l1[c], &self.l2[c]] {
                for s in 0..arr.sets() {
                    lines.extend(arr.set_entries(s).iter().filter(|&&e| e != 0).map(|&e| e & KEY_MASK));
                }
            }
        }
        for arr in [&self.sf, &self.llc] {
            for g in 0..arr.sets() {
                if arr.occupancy(g) > arr.ways() {
                    return Err(format!("set {g} over capacity"));
                }
            }
        }
        for key in lines {
            self.check_line((key - 1) << lb)?;
        }
        Ok(())
    }
}

/// Stable, non-reversible tag for a physical address in exported logs.
pub fn pa_hash(pa: u64) -> u64 {
    let mut z = pa.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn write_events_csv<W: std::io::Write>(events: &[Event], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["cycle", "core", "pa_hash", "level_hit", "evicted_set"])?;
    for e in events {
        out.write_record([
            e.cycle.to_string(),
            e.core.to_string(),
            format!("{:016x}", pa_hash(e.pa)),
            e.hit.as_str().to_string(),
            e.evicted_set.map(|s| s.to_string()).unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
