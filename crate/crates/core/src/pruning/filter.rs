use serde::{Deserialize, Serialize};

use super::{binary_search_prune, EvictionSet, PruneConfig, PruneStats};
use crate::address::{uncertainty, CandidateSet, VirtAddr};
use crate::error::{Error, Result};
use crate::geometry::Level;
use crate::timing::{EvictionOracle, TestStyle};

/// Candidates used to build an L2 eviction set: three times what the L2
/// uncertainty needs on average.
fn l2_pool_size<O: EvictionOracle + ?Sized>(o: &O) -> usize {
    let g = o.geometry();
    let u = uncertainty(g).map(|u| u.u_l2).unwrap_or(1);
    3 * u * g.ways(Level::L2)
}

fn build_l2_evset<O: EvictionOracle + ?Sized>(
    o: &mut O,
    target: VirtAddr,
    pool: &[VirtAddr],
    cfg: &PruneConfig,
    stats: &mut PruneStats,
) -> Result<EvictionSet> {
    let pool: Vec<VirtAddr> = pool.iter().copied().filter(|&a| a != target).collect();
    let (set, s) = binary_search_prune(o, target, &pool, Level::L2, cfg);
    stats.accumulate(&s);
    set.ok_or_else(|| Error::Construction(format!("no L2 eviction set for {target:?}")))
}

/// Does `evset` push `addr` out of the L2?
fn l2_evicts<O: EvictionOracle + ?Sized>(o: &mut O, evset: &EvictionSet, addr: VirtAddr) -> bool {
    if evset.addrs.contains(&addr) {
        return true;
    }
    o.test_eviction(addr, &evset.addrs, Level::L2, TestStyle::Parallel)
}

/// Keep only candidates sharing the target's L2 set, as decided by the
/// target's L2 eviction set.
pub fn l2_filter<O: EvictionOracle + ?Sized>(
    o: &mut O,
    target: VirtAddr,
    candidates: &CandidateSet,
) -> Result<(CandidateSet, PruneStats)> {
    let mut stats = PruneStats { success: true, ..Default::default() };
    let start = (o.now(), o.accesses());
    let pool_len = l2_pool_size(o).min(candidates.len());
    let evset = build_l2_evset(o, target, &candidates.addrs[..pool_len], &PruneConfig::new(true), &mut stats)?;
    let kept = candidates
        .addrs
        .iter()
        .copied()
        .filter(|&a| a != target && l2_evicts(o, &evset, a))
        .collect();
    stats.cycles = o.now() - start.0;
    stats.duration_ms = stats.cycles as f64 / o.cycles_per_ms();
    stats.accesses = o.accesses() - start.1;
    Ok((CandidateSet::new(kept, candidates.page_offset, true), stats))
}

/// Candidates at one page offset split by L2 set, with one L2 eviction set
/// per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct L2Groups {
    pub page_offset: u64,
    pub evsets: Vec<EvictionSet>,
    pub groups: Vec<CandidateSet>,
    /// Candidates no eviction set claimed.
    pub unassigned: usize,
    /// L2 eviction sets built, including failed attempts.
    pub constructions: usize,
    pub stats: PruneStats,
}

impl L2Groups {
    /// The same grouping at another page offset. Candidates stay on the same
    /// pages, so their L2 set bits above the page offset are unchanged.
    pub fn shifted(&self, new_offset: u64) -> L2Groups {
        let shift = |a: &VirtAddr| VirtAddr(a.0 & !0xfff | new_offset);
        L2Groups {
            page_offset: new_offset,
            evsets: self
                .evsets
                .iter()
                .map(|e| EvictionSet { target: shift(&e.target), level: e.level, addrs: e.addrs.iter().map(shift).collect() })
                .collect(),
            groups: self.groups.iter().map(|g| g.shifted(new_offset)).collect(),
            unassigned: self.unassigned,
            constructions: 0,
            stats: PruneStats::default(),
        }
    }

    pub fn total(&self) -> usize {
        self.groups.iter().map(CandidateSet::len).sum()
    }
}

/// Assign every candidate to the L2 eviction set that evicts it, building a
/// new eviction set whenever none does, up to the L2 uncertainty.
pub fn build_l2_groups<O: EvictionOracle + ?Sized>(o: &mut O, candidates: &CandidateSet) -> Result<L2Groups> {
    let max_groups = uncertainty(o.geometry())?.u_l2;
    let pool_len = l2_pool_size(o).min(candidates.len());
    let pool: Vec<VirtAddr> = candidates.addrs[..pool_len].to_vec();
    let cfg = PruneConfig::new(true);
    let mut stats = PruneStats { success: true, ..Default::default() };
    let start = (o.now(), o.accesses());
    let mut evsets: Vec<EvictionSet> = Vec::new();
    let mut members: Vec<Vec<VirtAddr>> = Vec::new();
    let mut unassigned = 0;
    let mut constructions = 0;
    for &a in &candidates.addrs {
        if let Some(k) = (0..evsets.len()).find(|&k| l2_evicts(o, &evsets[k], a)) {
            members[k].push(a);
            continue;
        }
        if evsets.len() == max_groups {
            unassigned += 1;
            continue;
        }
        constructions += 1;
        match build_l2_evset(o, a, &pool, &cfg, &mut stats) {
            Ok(e) => {
                evsets.push(e);
                members.push(vec![a]);
            }
            Err(_) => unassigned += 1,
        }
    }
    stats.cycles = o.now() - start.0;
    stats.duration_ms = stats.cycles as f64 / o.cycles_per_ms();
    stats.accesses = o.accesses() - start.1;
    stats.success = evsets.len() == max_groups;
    let groups = members
        .into_iter()
        .map(|m| CandidateSet::new(m, candidates.page_offset, true))
        .collect();
    Ok(L2Groups { page_offset: candidates.page_offset, evsets, groups, unassigned, constructions, stats })
}

/// Grow a minimal LLC eviction set into an SF eviction set by finding the
/// extra congruent candidates the SF's higher associativity needs.
/// Consecutive positive tests needed to accept an extension candidate.
pub const EXTEND_CONFIRMATIONS: usize = 3;

pub fn extend_llc_to_sf<O: EvictionOracle + ?Sized>(
    o: &mut O,
    llc_evset: &EvictionSet,
    candidates: &[VirtAddr],
) -> Result<EvictionSet> {
    let w_llc = o.geometry().ways(Level::Llc);
    let w_sf = o.geometry().ways(Level::Sf);
    if llc_evset.len() != w_llc {
        return Err(Error::Precondition(format!(
            "LLC eviction set has {} addresses, expected {w_llc}",
            llc_evset.len()
        )));
    }
    // c is congruent iff it can stand in for one member of the LLC set
    let mut probe = llc_evset.addrs[1..].to_vec();
    probe.push(llc_evset.target);
    let mut addrs = llc_evset.addrs.clone();
    for &c in candidates {
        if addrs.len() == w_sf {
            break;
        }
        if c == llc_evset.target || addrs.contains(&c) {
            continue;
        }
        *probe.last_mut().unwrap() = c;
        // noise only adds evictions, so a hit has to repeat before it counts
        if (0..EXTEND_CONFIRMATIONS).all(|_| o.test_eviction(llc_evset.target, &probe, Level::Llc, TestStyle::Parallel)) {
            addrs.push(c);
        }
    }
    if addrs.len() == w_sf && o.test_eviction(llc_evset.target, &addrs, Level::Sf, TestStyle::Parallel) {
        Ok(EvictionSet { target: llc_evset.target, level: Level::Sf, addrs })
    } else {
        Err(Error::Construction("no further congruent candidate for the SF eviction set".into()))
    }
}
