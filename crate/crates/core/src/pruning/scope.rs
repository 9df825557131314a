use super::{EvictionSet, PruneConfig, PruneStats, Run, Stop};
use crate::address::VirtAddr;
use crate::geometry::Level;
use crate::timing::EvictionOracle;

/// Prime+Scope pruning: scan the list one access at a time and take the
/// address after which the target disappeared. With `recharge`, candidates
/// from the back of the list are moved into the gap left by each find.
///
/// Only LLC targets are supported; other levels fail immediately.
pub fn prime_scope_prune<O: EvictionOracle + ?Sized>(
    o: &mut O,
    target: VirtAddr,
    candidates: &[VirtAddr],
    level: Level,
    cfg: &PruneConfig,
) -> (Option<EvictionSet>, PruneStats) {
    let run = Run::new(o, target, level, *cfg);
    run.drive(|r| scope_attempt(r, candidates))
}

fn scope_attempt<O: EvictionOracle + ?Sized>(r: &mut Run<'_, O>, candidates: &[VirtAddr]) -> Result<Vec<VirtAddr>, Stop> {
    let w = r.ways;
    if r.level != Level::Llc || candidates.len() < w {
        return Err(Stop::Exhausted);
    }
    let mut list = candidates.to_vec();
    let mut found = Vec::with_capacity(w);
    while found.len() < w {
        r.check_time()?;
        r.stats.tests += 1;
        match r.o.scope_scan(r.target, &list, Level::Llc) {
            Some(i) => {
                r.stats.examined += i as u64 + 1;
                found.push(list.remove(i));
                if r.cfg.recharge {
                    let k = r.cfg.recharge_count.min(list.len() - i);
                    let tail = list.split_off(list.len() - k);
                    list.splice(i..i, tail);
                }
            }
            None => {
                r.stats.examined += list.len() as u64;
                r.backtrack()?;
                // give up the most recent find and rescan
                match found.pop() {
                    Some(a) => list.push(a),
                    None => return Err(Stop::Backtracks),
                }
            }
        }
    }
    Ok(found)
}
