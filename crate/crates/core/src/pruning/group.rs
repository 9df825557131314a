use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EvictionSet, PruneConfig, PruneStats, Run, Stop};
use crate::address::VirtAddr;
use crate::geometry::Level;
use crate::timing::{EvictionOracle, TestStyle};

/// Group testing with backtracking. `early_termination` selects between the
/// classic re-split-after-first-removal behaviour and sweeping the whole
/// partition before re-splitting.
pub fn group_test_prune<O: EvictionOracle + ?Sized>(
    o: &mut O,
    target: VirtAddr,
    candidates: &[VirtAddr],
    level: Level,
    cfg: &PruneConfig,
) -> (Option<EvictionSet>, PruneStats) {
    let run = Run::new(o, target, level, *cfg);
    let groups = cfg.groups.unwrap_or(run.ways + 1);
    run.drive(|r| group_attempt(r, candidates, groups))
}

fn group_attempt<O: EvictionOracle + ?Sized>(
    r: &mut Run<'_, O>,
    candidates: &[VirtAddr],
    groups: usize,
) -> Result<Vec<VirtAddr>, Stop> {
    let w = r.ways;
    if candidates.len() < w {
        return Err(Stop::Exhausted);
    }
    let mut s = candidates.to_vec();
    let mut removed: Vec<Vec<VirtAddr>> = Vec::new();
    let mut rest = Vec::with_capacity(s.len());
    while s.len() > w {
        r.check_time()?;
        let n = s.len();
        let g = groups.min(n);
        let parts: Vec<&[VirtAddr]> = (0..g).map(|k| &s[k * n / g..(k + 1) * n / g]).collect();
        let mut alive = vec![true; g];
        let mut alive_len = n;
        let mut found = false;
        for k in 0..g {
            if alive_len - parts[k].len() < w {
                continue;
            }
            rest.clear();
            for (j, p) in parts.iter().enumerate() {
                if j != k && alive[j] {
                    rest.extend_from_slice(p);
                }
            }
            if r.test(&rest, TestStyle::Parallel) {
                alive[k] = false;
                alive_len -= parts[k].len();
                removed.push(parts[k].to_vec());
                found = true;
                if r.cfg.early_termination || alive_len == w {
                    break;
                }
            }
            r.check_time()?;
        }
        let next: Vec<VirtAddr> =
            parts.iter().zip(&alive).filter(|(_, &a)| a).flat_map(|(p, _)| p.iter().copied()).collect();
        s = next;
        if !found {
            r.backtrack()?;
            match removed.pop() {
                Some(grp) => s.extend(grp),
                None => return Err(Stop::Backtracks),
            }
        }
    }
    Ok(s)
}

/// Group-testing variant that withholds a random `n/W` addresses per test.
pub fn song_prune<O: EvictionOracle + ?Sized>(
    o: &mut O,
    target: VirtAddr,
    candidates: &[VirtAddr],
    level: Level,
    cfg: &PruneConfig,
) -> (Option<EvictionSet>, PruneStats) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let run = Run::new(o, target, level, *cfg);
    run.drive(|r| song_attempt(r, candidates, &mut rng))
}

fn song_attempt<O: EvictionOracle + ?Sized>(
    r: &mut Run<'_, O>,
    candidates: &[VirtAddr],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<VirtAddr>, Stop> {
    let w = r.ways;
    if candidates.len() < w {
        return Err(Stop::Exhausted);
    }
    let mut s = candidates.to_vec();
    let mut removed: Vec<Vec<VirtAddr>> = Vec::new();
    let mut misses = 0;
    let mut withheld = vec![false; s.len()];
    while s.len() > w {
        r.check_time()?;
        let n = s.len();
        let k = (n / w).clamp(1, n - w);
        withheld.clear();
        withheld.resize(n, false);
        for i in sample(rng, n, k) {
            withheld[i] = true;
        }
        let rest: Vec<VirtAddr> = s.iter().zip(&withheld).filter(|(_, &h)| !h).map(|(a, _)| *a).collect();
        if r.test(&rest, TestStyle::Parallel) {
            removed.push(s.iter().zip(&withheld).filter(|(_, &h)| h).map(|(a, _)| *a).collect());
            s = rest;
            misses = 0;
        } else {
            misses += 1;
            // about one partition sweep without progress
            if misses > w {
                misses = 0;
                r.backtrack()?;
                match removed.pop() {
                    Some(grp) => s.extend(grp),
                    None => return Err(Stop::Backtracks),
                }
            }
        }
    }
    Ok(s)
}
