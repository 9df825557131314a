//! Eviction-set construction: group testing, Prime+Scope, binary search,
//! L2-driven candidate filtering and the bulk driver.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::address::VirtAddr;
use crate::error::{Error, Result};
use crate::geometry::Level;
use crate::timing::{EvictionOracle, TestStyle};

mod binary;
mod bulk;
mod filter;
mod group;
mod scope;

pub use binary::binary_search_prune;
pub use bulk::{build_bulk, estimate_bulk_time, BulkConfig, BulkReport, Scope};
pub use filter::{build_l2_groups, extend_llc_to_sf, l2_filter, L2Groups};
pub use group::{group_test_prune, song_prune};
pub use scope::prime_scope_prune;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    Gt,
    GtOp,
    Song,
    Ps,
    PsOp,
    BinS,
}

impl Algorithm {
    pub const REPORTED: [Algorithm; 5] = [Algorithm::Gt, Algorithm::GtOp, Algorithm::Ps, Algorithm::PsOp, Algorithm::BinS];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Gt => "Gt",
            Algorithm::GtOp => "GtOp",
            Algorithm::Song => "Song",
            Algorithm::Ps => "Ps",
            Algorithm::PsOp => "PsOp",
            Algorithm::BinS => "BinS",
        }
    }

    /// Default configuration for this algorithm.
    pub fn config(self, filtered: bool) -> PruneConfig {
        let mut c = PruneConfig::new(filtered);
        c.early_termination = self == Algorithm::Gt;
        c.recharge = self == Algorithm::PsOp;
        c
    }

    /// Prime+Scope variants can only work sequentially.
    pub fn style(self) -> TestStyle {
        match self {
            Algorithm::Ps | Algorithm::PsOp => TestStyle::Sequential,
            _ => TestStyle::Parallel,
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gt" => Ok(Algorithm::Gt),
            "gtop" => Ok(Algorithm::GtOp),
            "song" => Ok(Algorithm::Song),
            "ps" => Ok(Algorithm::Ps),
            "psop" => Ok(Algorithm::PsOp),
            "bins" => Ok(Algorithm::BinS),
            _ => Err(Error::Config(format!("unknown algorithm `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub max_attempts: u32,
    pub max_backtracks: u32,
    /// Budget for the whole construction, simulated milliseconds.
    pub time_limit_ms: f64,
    /// Group count; `None` means W+1.
    pub groups: Option<usize>,
    pub early_termination: bool,
    pub recharge: bool,
    /// Candidates moved forward per recharge.
    pub recharge_count: usize,
    /// Seed for the randomised group-testing variant.
    pub seed: u64,
    /// Assert algorithm invariants against ground truth (noiseless use only).
    pub check_invariants: bool,
}

impl PruneConfig {
    pub fn new(filtered: bool) -> Self {
        PruneConfig {
            max_attempts: 10,
            max_backtracks: 20,
            time_limit_ms: if filtered { 100.0 } else { 1000.0 },
            groups: None,
            early_termination: false,
            recharge: false,
            recharge_count: 4,
            seed: 0,
            check_invariants: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_attempts == 0 || self.max_backtracks == 0 || self.recharge_count == 0 {
            return Err(Error::Config("attempt, backtrack and recharge counts must be positive".into()));
        }
        if !(self.time_limit_ms > 0.0) {
            return Err(Error::Config("time limit must be positive".into()));
        }
        if self.groups == Some(0) || self.groups == Some(1) {
            return Err(Error::Config("group count must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvictionSet {
    pub target: VirtAddr,
    pub level: Level,
    pub addrs: Vec<VirtAddr>,
}

impl EvictionSet {
    pub fn len(&self) -> usize {
        self.addrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.addrs.is_empty()
    }

    /// Does the set evict its target right now?
    pub fn evicts<O: EvictionOracle + ?Sized>(&self, o: &mut O) -> bool {
        o.test_eviction(self.target, &self.addrs, self.level, TestStyle::Parallel)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PruneStats {
    pub success: bool,
    pub cycles: u64,
    pub duration_ms: f64,
    pub accesses: u64,
    pub tests: u64,
    pub backtracks: u32,
    pub attempts: u32,
    /// Candidates touched by scope scans (Prime+Scope only).
    pub examined: u64,
}

impl PruneStats {
    /// Sum of several runs; `success` is true only if all succeeded.
    pub fn accumulate(&mut self, other: &PruneStats) {
        self.success &= other.success;
        self.cycles += other.cycles;
        self.duration_ms += other.duration_ms;
        self.accesses += other.accesses;
        self.tests += other.tests;
        self.backtracks += other.backtracks;
        self.attempts += other.attempts;
        self.examined += other.examined;
    }
}

/// Why a single attempt stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Stop {
    Backtracks,
    Time,
    Exhausted,
}

/// Bookkeeping shared by all algorithms: counters and limits for one construction.
pub(crate) struct Run<'a, O: EvictionOracle + ?Sized> {
    pub o: &'a mut O,
    pub target: VirtAddr,
    pub level: Level,
    pub ways: usize,
    pub cfg: PruneConfig,
    pub stats: PruneStats,
    start_cycles: u64,
    start_accesses: u64,
    deadline: u64,
    backtracks_this_attempt: u32,
}

impl<'a, O: EvictionOracle + ?Sized> Run<'a, O> {
    pub fn new(o: &'a mut O, target: VirtAddr, level: Level, cfg: PruneConfig) -> Self {
        let ways = o.geometry().ways(level);
        let start_cycles = o.now();
        let deadline = start_cycles + (cfg.time_limit_ms * o.cycles_per_ms()) as u64;
        let start_accesses = o.accesses();
        Run {
            o,
            target,
            level,
            ways,
            cfg,
            stats: PruneStats::default(),
            start_cycles,
            start_accesses,
            deadline,
            backtracks_this_attempt: 0,
        }
    }

    #[inline]
    pub fn test(&mut self, addrs: &[VirtAddr], style: TestStyle) -> bool {
        self.stats.tests += 1;
        self.o.test_eviction(self.target, addrs, self.level, style)
    }

    pub fn check_time(&self) -> std::result::Result<(), Stop> {
        if self.o.now() > self.deadline {
            Err(Stop::Time)
        } else {
            Ok(())
        }
    }

    pub fn backtrack(&mut self) -> std::result::Result<(), Stop> {
        self.stats.backtracks += 1;
        self.backtracks_this_attempt += 1;
        if self.backtracks_this_attempt > self.cfg.max_backtracks {
            Err(Stop::Backtracks)
        } else {
            Ok(())
        }
    }

    pub fn congruent_count(&mut self, addrs: &[VirtAddr]) -> Option<usize> {
        self.o.debug_congruent_count(self.target, addrs, self.level)
    }

    /// Retry `attempt` until it yields a set that passes a final eviction
    /// test, or a limit is hit.
    pub fn drive<F>(mut self, mut attempt: F) -> (Option<EvictionSet>, PruneStats)
    where
        F: FnMut(&mut Self) -> std::result::Result<Vec<VirtAddr>, Stop>,
    {
        let mut result = None;
        while self.stats.attempts < self.cfg.max_attempts {
            self.stats.attempts += 1;
            self.backtracks_this_attempt = 0;
            match attempt(&mut self) {
                Ok(set) => {
                    debug_assert_eq!(set.len(), self.ways);
                    if self.test(&set, TestStyle::Parallel) {
                        result = Some(EvictionSet { target: self.target, level: self.level, addrs: set });
                        break;
                    }
                }
                Err(Stop::Time) | Err(Stop::Exhausted) => break,
                Err(Stop::Backtracks) => {}
            }
            if self.check_time().is_err() {
                break;
            }
        }
        self.stats.success = result.is_some();
        self.stats.cycles = self.o.now() - self.start_cycles;
        self.stats.duration_ms = self.stats.cycles as f64 / self.o.cycles_per_ms();
        self.stats.accesses = self.o.accesses() - self.start_accesses;
        (result, self.stats)
    }
}

/// Dispatch to the algorithm's pruning routine.
pub fn prune<O: EvictionOracle + ?Sized>(
    o: &mut O,
    algorithm: Algorithm,
    target: VirtAddr,
    candidates: &[VirtAddr],
    level: Level,
    cfg: &PruneConfig,
) -> (Option<EvictionSet>, PruneStats) {
    match algorithm {
        Algorithm::Gt | Algorithm::GtOp => group_test_prune(o, target, candidates, level, cfg),
        Algorithm::Song => song_prune(o, target, candidates, level, cfg),
        Algorithm::Ps | Algorithm::PsOp => prime_scope_prune(o, target, candidates, level, cfg),
        Algorithm::BinS => binary_search_prune(o, target, candidates, level, cfg),
    }
}

/// One CSV row per construction run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub algorithm: Algorithm,
    pub scope: String,
    pub noise_rate: f64,
    pub success: bool,
    pub sim_duration_ms: f64,
    pub access_count: u64,
    pub backtracks: u32,
}

impl RunRecord {
    pub fn new(algorithm: Algorithm, scope: &str, noise_rate: f64, stats: &PruneStats) -> Self {
        RunRecord {
            algorithm,
            scope: scope.to_string(),
            noise_rate,
            success: stats.success,
            sim_duration_ms: stats.duration_ms,
            access_count: stats.accesses,
            backtracks: stats.backtracks,
        }
    }
}

pub fn write_runs_csv<W: Write>(records: &[RunRecord], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in records {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}
