use super::{EvictionSet, PruneConfig, PruneStats, Run, Stop};
use crate::address::VirtAddr;
use crate::geometry::Level;
use crate::timing::{EvictionOracle, TestStyle};

/// Binary-search pruning. Finds the tipping point τᵢ for each i in 1..=W by
/// bisecting on prefix length and swaps the congruent address found to
/// position i, so the first W addresses end up forming the eviction set.
pub fn binary_search_prune<O: EvictionOracle + ?Sized>(
    o: &mut O,
    target: VirtAddr,
    candidates: &[VirtAddr],
    level: Level,
    cfg: &PruneConfig,
) -> (Option<EvictionSet>, PruneStats) {
    let run = Run::new(o, target, level, *cfg);
    run.drive(|r| binary_attempt(r, candidates, &mut |_| {}))
}

/// Same as [`binary_search_prune`] but reports every prefix length tested
/// during bisection.
#[cfg(test)]
pub(crate) fn binary_search_traced<O: EvictionOracle + ?Sized>(
    o: &mut O,
    target: VirtAddr,
    candidates: &[VirtAddr],
    level: Level,
    cfg: &PruneConfig,
    trace: &mut Vec<usize>,
) -> (Option<EvictionSet>, PruneStats) {
    let run = Run::new(o, target, level, *cfg);
    run.drive(|r| binary_attempt(r, candidates, &mut |n| trace.push(n)))
}

fn binary_attempt<O: EvictionOracle + ?Sized>(
    r: &mut Run<'_, O>,
    candidates: &[VirtAddr],
    trace: &mut dyn FnMut(usize),
) -> Result<Vec<VirtAddr>, Stop> {
    let w = r.ways;
    let big_n = candidates.len();
    if big_n < w {
        return Err(Stop::Exhausted);
    }
    let mut addrs = candidates.to_vec();
    let base_stride = (big_n / 16).max(8);
    // indices are 1-based in the prose of the algorithm; prefixes are addrs[..n]
    let mut ub = big_n;
    let mut i = 1;
    let mut stride = base_stride;
    while i <= w {
        let mut lb = i - 1;
        while ub - lb != 1 {
            r.check_time()?;
            let n = (lb + ub) / 2;
            trace(n);
            if r.test(&addrs[..n], TestStyle::Parallel) {
                ub = n;
            } else {
                lb = n;
            }
            if r.cfg.check_invariants {
                check_bounds(r, &addrs, lb, ub);
            }
        }
        // the first UB addresses must still evict; otherwise a false positive
        // pulled UB below the true tipping point
        if !r.test(&addrs[..ub], TestStyle::Parallel) {
            r.backtrack()?;
            loop {
                r.check_time()?;
                if ub == big_n {
                    return Err(Stop::Backtracks);
                }
                ub = (ub + stride).min(big_n);
                if r.test(&addrs[..ub], TestStyle::Parallel) {
                    break;
                }
                stride *= 2;
            }
            continue;
        }
        stride = base_stride;
        addrs.swap(i - 1, ub - 1);
        i += 1;
    }
    addrs.truncate(w);
    Ok(addrs)
}

fn check_bounds<O: EvictionOracle + ?Sized>(r: &mut Run<'_, O>, addrs: &[VirtAddr], lb: usize, ub: usize) {
    let w = r.ways;
    if let (Some(cl), Some(cu)) = (r.congruent_count(&addrs[..lb]), r.congruent_count(&addrs[..ub])) {
        assert!(cl < w, "first LB={lb} addresses hold {cl} congruent lines");
        assert!(cu >= w, "first UB={ub} addresses hold only {cu} congruent lines");
    }
}
