use rustc_hash::FxHashSet;
use serde::{Deserialize, Serialize};

use super::{extend_llc_to_sf, prune, Algorithm, EvictionSet, L2Groups, PruneConfig, PruneStats};
use crate::address::{default_candidate_count, gen_candidates, uncertainty, CandidateSet, VirtAddr, LINE_SIZE, PAGE_SIZE};
use crate::error::{Error, Result};
use crate::geometry::Level;
use crate::pruning::build_l2_groups;
use crate::timing::{EvictionOracle, TestStyle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    SingleSet,
    PageOffset,
    WholeSys,
}

impl Scope {
    pub fn as_str(self) -> &'static str {
        match self {
            Scope::SingleSet => "single-set",
            Scope::PageOffset => "page-offset",
            Scope::WholeSys => "whole-sys",
        }
    }
}

impl std::str::FromStr for Scope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "single-set" | "singleset" | "single" => Ok(Scope::SingleSet),
            "page-offset" | "pageoffset" => Ok(Scope::PageOffset),
            "whole-sys" | "wholesys" => Ok(Scope::WholeSys),
            _ => Err(Error::Config(format!("unknown scope `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BulkConfig {
    pub scope: Scope,
    pub algorithm: Algorithm,
    /// `Llc` for minimal LLC sets; `Sf` extends each LLC set to the SF.
    pub level: Level,
    pub filter: bool,
    /// Candidate-set size as a multiple of U·W.
    pub candidate_multiplier: usize,
    pub page_offset: u64,
    pub prune: PruneConfig,
}

impl BulkConfig {
    pub fn new(scope: Scope, algorithm: Algorithm, filter: bool) -> Self {
        BulkConfig {
            scope,
            algorithm,
            level: Level::Sf,
            filter,
            candidate_multiplier: 3,
            page_offset: 0,
            prune: algorithm.config(filter),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BulkReport {
    pub sets: Vec<EvictionSet>,
    /// Targets for which a construction was started.
    pub attempted: usize,
    pub failures: usize,
    /// L2 eviction-set constructions spent on filtering.
    pub filter_constructions: usize,
    pub runs: Vec<PruneStats>,
    pub filter_stats: PruneStats,
    pub cycles: u64,
    pub duration_ms: f64,
    pub accesses: u64,
}

impl BulkReport {
    pub fn success_rate(&self) -> f64 {
        if self.attempted == 0 {
            0.0
        } else {
            (self.attempted - self.failures) as f64 / self.attempted as f64
        }
    }
}

/// Build eviction sets for one set, every set at one page offset, or every
/// set in the system.
///
/// Per page offset: take targets from the (filtered) candidates in order,
/// skip any address an existing eviction set already evicts, prune the rest
/// of the pool for the target and remove the result from the pool. With
/// filtering each L2 group gets an equal share of the offset's targets, and
/// the groups built at offset 0 are reused at every other offset.
pub fn build_bulk<O: EvictionOracle + ?Sized>(o: &mut O, cfg: &BulkConfig) -> Result<BulkReport> {
    cfg.prune.validate()?;
    if !matches!(cfg.level, Level::Llc | Level::Sf) {
        return Err(Error::Precondition("bulk construction targets the LLC or SF".into()));
    }
    let geom = o.geometry().clone();
    let unc = uncertainty(&geom)?;
    let start = (o.now(), o.accesses());
    let n = default_candidate_count(&geom, cfg.level, cfg.candidate_multiplier)?;
    let base = gen_candidates(o.space(), cfg.page_offset, n)?;
    let mut report = BulkReport::default();

    let base_groups = if cfg.filter {
        let g = build_l2_groups(o, &base)?;
        report.filter_constructions += g.constructions;
        report.filter_stats.accumulate(&g.stats);
        Some(g)
    } else {
        None
    };

    let offsets: Vec<u64> = match cfg.scope {
        Scope::WholeSys => (0..PAGE_SIZE / LINE_SIZE)
            .map(|k| (cfg.page_offset + k * LINE_SIZE) % PAGE_SIZE)
            .collect(),
        _ => vec![cfg.page_offset],
    };
    let per_offset = match cfg.scope {
        Scope::SingleSet => 1,
        _ => unc.u_llc,
    };

    for off in offsets {
        let pools: Vec<CandidateSet> = match &base_groups {
            Some(g) => {
                let g: L2Groups = if off == g.page_offset { g.clone() } else { g.shifted(off) };
                g.groups
            }
            None => vec![if off == base.page_offset { base.clone() } else { base.shifted(off) }],
        };
        let n_pools = pools.len().max(1);
        for (k, pool) in pools.into_iter().enumerate() {
            // spread the offset's targets evenly over the groups
            let quota = per_offset * (k + 1) / n_pools - per_offset * k / n_pools;
            build_from_pool(o, cfg, pool.addrs, quota, &mut report);
        }
    }

    report.cycles = o.now() - start.0;
    report.duration_ms = report.cycles as f64 / o.cycles_per_ms();
    report.accesses = o.accesses() - start.1;
    Ok(report)
}

fn build_from_pool<O: EvictionOracle + ?Sized>(
    o: &mut O,
    cfg: &BulkConfig,
    pool: Vec<VirtAddr>,
    quota: usize,
    report: &mut BulkReport,
) {
    let w_llc = o.geometry().ways(Level::Llc);
    let first_set = report.sets.len();
    let mut gone: FxHashSet<VirtAddr> = FxHashSet::default();
    let mut started = 0;
    for (i, &a) in pool.iter().enumerate() {
        if started == quota {
            break;
        }
        if gone.contains(&a) {
            continue;
        }
        gone.insert(a);
        // an address some set in this pool already evicts is discarded
        let covered = report.sets[first_set..]
            .iter()
            .any(|e| o.test_eviction(a, &e.addrs[..w_llc], Level::Llc, TestStyle::Parallel));
        if covered {
            continue;
        }
        started += 1;
        report.attempted += 1;
        let cands: Vec<VirtAddr> = pool[i + 1..].iter().copied().filter(|c| !gone.contains(c)).collect();
        let (set, stats) = prune(o, cfg.algorithm, a, &cands, Level::Llc, &cfg.prune);
        report.runs.push(stats);
        let set = match (set, cfg.level) {
            (Some(s), Level::Sf) => extend_llc_to_sf(o, &s, &cands).ok(),
            (s, _) => s,
        };
        match set {
            Some(s) => {
                gone.extend(s.addrs.iter().copied());
                report.sets.push(s);
            }
            None => report.failures += 1,
        }
    }
}

/// `n_sets × mean duration / success rate`, in simulated milliseconds.
pub fn estimate_bulk_time(stats: &[PruneStats], n_sets: usize) -> Result<f64> {
    if stats.is_empty() {
        return Err(Error::InsufficientData("no construction runs to estimate from".into()));
    }
    let sr = stats.iter().filter(|s| s.success).count() as f64 / stats.len() as f64;
    if sr == 0.0 {
        return Err(Error::Undefined("success rate is zero".into()));
    }
    let mean = stats.iter().map(|s| s.duration_ms).sum::<f64>() / stats.len() as f64;
    Ok(n_sets as f64 * mean / sr)
}
