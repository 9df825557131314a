//! Prime+Probe monitoring of one SF set and the covert-channel harness that
//! measures how many sender accesses a strategy catches.

use serde::{Deserialize, Serialize};

use crate::address::{gen_candidates, VirtAddr};
use crate::cache::{Machine, VICTIM};
use crate::error::{Error, Result};
use crate::geometry::Level;
use crate::timing::SimOracle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    /// Prime+Scope: load, flush and sequentially reload one eviction set,
    /// then watch its first line.
    PsFlush,
    /// Prime+Scope alternating between two eviction sets: each prime chases
    /// through the set not primed last time.
    PsAlt,
    /// Prime by traversing the set repeatedly, probe every line at once.
    ParallelProbe,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 3] = [StrategyKind::PsFlush, StrategyKind::PsAlt, StrategyKind::ParallelProbe];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::PsFlush => "ps-flush",
            StrategyKind::PsAlt => "ps-alt",
            StrategyKind::ParallelProbe => "parallel-probe",
        }
    }

    /// Eviction sets the strategy needs.
    pub fn set_count(self) -> usize {
        if self == StrategyKind::PsAlt {
            2
        } else {
            1
        }
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "ps-flush" | "psflush" => Ok(StrategyKind::PsFlush),
            "ps-alt" | "psalt" => Ok(StrategyKind::PsAlt),
            "parallel-probe" | "parallelprobe" | "parallel" => Ok(StrategyKind::ParallelProbe),
            _ => Err(Error::Config(format!("unknown monitoring strategy `{s}`"))),
        }
    }
}

pub const DEFAULT_PRIME_REPS: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorStrategy {
    pub kind: StrategyKind,
    pub sets: Vec<Vec<VirtAddr>>,
    /// Traversals per ParallelProbe prime.
    pub prime_reps: usize,
    /// PsAlt: index of the set primed last.
    active: usize,
}

impl MonitorStrategy {
    pub fn new(kind: StrategyKind, sets: Vec<Vec<VirtAddr>>) -> Result<Self> {
        if sets.len() != kind.set_count() {
            return Err(Error::Precondition(format!(
                "{kind} needs {} eviction set(s), got {}",
                kind.set_count(),
                sets.len()
            )));
        }
        if sets.iter().any(Vec::is_empty) {
            return Err(Error::Precondition("empty eviction set".into()));
        }
        Ok(MonitorStrategy { kind, sets, prime_reps: DEFAULT_PRIME_REPS, active: 0 })
    }

    /// Lines currently expected to occupy the monitored set.
    pub fn monitored(&self) -> &[VirtAddr] {
        &self.sets[self.active]
    }

    /// The eviction candidate watched by the scope strategies.
    pub fn scope_line(&self) -> VirtAddr {
        self.sets[self.active][0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub cycle: u64,
    pub latency: u64,
}

fn sequential(o: &mut SimOracle, lines: &[VirtAddr]) {
    for &a in lines {
        let l = o.read(a);
        o.machine.advance(l + o.lat.issue);
    }
}

fn overlapped(o: &mut SimOracle, lines: &[VirtAddr], reps: usize) -> Vec<u64> {
    let mut lats = Vec::with_capacity(lines.len() * reps);
    for _ in 0..reps {
        for &a in lines {
            lats.push(o.read(a));
        }
    }
    lats
}

/// Fill the monitored set with attacker lines; returns the cycles spent.
pub fn prime(o: &mut SimOracle, s: &mut MonitorStrategy) -> u64 {
    let start = o.machine.now();
    match s.kind {
        StrategyKind::PsFlush => {
            let set = s.sets[0].clone();
            let lats = overlapped(o, &set, 1);
            let d = o.lat.overlapped(&lats);
            o.machine.advance(d);
            for &a in &set {
                o.flush_line(a);
            }
            sequential(o, &set);
        }
        StrategyKind::PsAlt => {
            s.active = 1 - s.active;
            let set = s.sets[s.active].clone();
            sequential(o, &set);
        }
        StrategyKind::ParallelProbe => {
            let set = s.sets[0].clone();
            let lats = overlapped(o, &set, s.prime_reps);
            let d = o.lat.overlapped(&lats) + o.lat.par_overhead;
            o.machine.advance(d);
        }
    }
    o.machine.now() - start
}

/// Was any attacker line evicted since the last prime? Returns the verdict
/// and the measured latency.
pub fn probe(o: &mut SimOracle, s: &MonitorStrategy) -> (bool, u64) {
    let threshold = o.lat.threshold(Level::Sf);
    match s.kind {
        StrategyKind::PsFlush | StrategyKind::PsAlt => {
            let lat = o.read(s.scope_line());
            o.machine.advance(lat + o.lat.timer);
            (lat > threshold, lat)
        }
        StrategyKind::ParallelProbe => {
            let lats = overlapped(o, s.monitored(), 1);
            let lat = o.lat.overlapped(&lats);
            o.machine.advance(lat + o.lat.timer);
            (lats.iter().any(|&l| l > threshold), lat)
        }
    }
}

/// Flat LLC/SF set the strategy watches.
pub fn monitored_set(o: &mut SimOracle, s: &MonitorStrategy) -> usize {
    let pa = o.machine.translate(crate::cache::ATTACKER_SPACE, s.scope_line());
    o.machine.geometry().llc_global_set(pa.0)
}

/// Prime, then probe until `until`, re-priming after every detection.
pub fn monitor(o: &mut SimOracle, s: &mut MonitorStrategy, until: u64) -> Vec<DetectionEvent> {
    prime(o, s);
    monitor_primed(o, s, until)
}

/// [`monitor`] for a set that is already primed.
///
/// Between foreign events nothing can change the set, so runs of probes
/// that would all come back clean are skipped by moving the clock forward a
/// whole number of probe periods.
pub fn monitor_primed(o: &mut SimOracle, s: &mut MonitorStrategy, until: u64) -> Vec<DetectionEvent> {
    let g = monitored_set(o, s);
    let mut events = Vec::new();
    while o.machine.now() < until {
        let t0 = o.machine.now();
        let (evicted, latency) = probe(o, s);
        let now = o.machine.now();
        if evicted {
            events.push(DetectionEvent { cycle: now, latency });
            prime(o, s);
            continue;
        }
        let period = now - t0;
        let horizon = o.machine.next_foreign_event(g).min(until);
        if horizon > now + period {
            let skip = (horizon - now) / period;
            o.machine.advance(skip.saturating_sub(1) * period);
        }
    }
    events
}

/// `count` attacker lines at `page_offset` in flat set `g`, picked by ground
/// truth. Lets monitoring experiments skip eviction-set construction.
pub fn congruent_lines(
    m: &mut Machine,
    space: usize,
    page_offset: u64,
    g: usize,
    count: usize,
) -> Result<Vec<VirtAddr>> {
    let geom = m.geometry().clone();
    let (lo, _) = geom.index_range(Level::Llc);
    if (g % geom.llc.sets) as u64 & ((1 << (geom.page_bits - lo)) - 1) != page_offset >> lo {
        return Err(Error::Precondition(format!("set {g} is not reachable from page offset {page_offset:#x}")));
    }
    let u = geom.llc_total_sets() >> (geom.page_bits - lo);
    let mut out = Vec::with_capacity(count);
    for _ in 0..64 {
        let cands = gen_candidates(m.space(space), page_offset, 4 * u * count.max(1))?;
        for a in cands.addrs {
            if geom.llc_global_set(m.translate(space, a).0) == g {
                out.push(a);
                if out.len() == count {
                    return Ok(out);
                }
            }
        }
    }
    Err(Error::Exhausted(format!("found only {} of {count} lines for set {g}", out.len())))
}

/// Ground-truth eviction sets of `count` lines for every flat set reachable
/// from each page offset, in offset order then set order.
pub fn congruent_sets(
    m: &mut Machine,
    space: usize,
    page_offsets: &[u64],
    count: usize,
) -> Result<Vec<(usize, Vec<VirtAddr>)>> {
    let geom = m.geometry().clone();
    let (lo, _) = geom.index_range(Level::Llc);
    let u = geom.llc_total_sets() >> (geom.page_bits - lo);
    let mut base = gen_candidates(m.space(space), 0, 2 * u * count.max(1))?;
    let mut out = Vec::with_capacity(u * page_offsets.len());
    for &off in page_offsets {
        let mut by_set: std::collections::BTreeMap<usize, Vec<VirtAddr>> = Default::default();
        let mut rounds = 0;
        loop {
            by_set.clear();
            for a in base.shifted(off).addrs {
                let g = geom.llc_global_set(m.translate(space, a).0);
                let v = by_set.entry(g).or_default();
                if v.len() < count {
                    v.push(a);
                }
            }
            if by_set.len() == u && by_set.values().all(|v| v.len() == count) {
                break;
            }
            rounds += 1;
            if rounds == 64 {
                return Err(Error::Exhausted(format!("could not fill every set at offset {off:#x}")));
            }
            let more = gen_candidates(m.space(space), 0, u * count.max(1))?;
            base.addrs.extend(more.addrs);
        }
        out.extend(by_set);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovertReport {
    pub strategy: StrategyKind,
    pub interval: u64,
    pub sent: usize,
    pub detected: usize,
    pub rate: f64,
    pub events: Vec<DetectionEvent>,
    /// First cycle of the sender's schedule.
    pub start: u64,
}

/// The sender on the victim core touches `sender` every `interval` cycles,
/// `n_accesses` times, flushing it right after each access so the next one
/// misses again. An access at t counts as detected when some event
/// falls in (t, t + epsilon].
pub fn covert_run(
    o: &mut SimOracle,
    s: &mut MonitorStrategy,
    sender: VirtAddr,
    interval: u64,
    n_accesses: usize,
    epsilon: u64,
) -> Result<CovertReport> {
    if interval == 0 {
        return Err(Error::Precondition("sender interval must be positive".into()));
    }
    let spa = o.machine.translate(crate::cache::VICTIM_SPACE, sender);
    prime(o, s);
    let start = o.machine.now() + interval;
    for k in 0..n_accesses as u64 {
        o.machine.schedule_access_flush(start + k * interval, VICTIM, spa);
    }
    let end = start + n_accesses as u64 * interval + epsilon;
    let events = monitor_primed(o, s, end);
    let sends: Vec<u64> = (0..n_accesses as u64).map(|k| start + k * interval).collect();
    let detected = count_detected(&sends, &events, epsilon);
    Ok(CovertReport {
        strategy: s.kind,
        interval,
        sent: n_accesses,
        detected,
        rate: if n_accesses == 0 { 0.0 } else { detected as f64 / n_accesses as f64 },
        events,
        start,
    })
}

/// Sends with an event in (t, t + epsilon].
pub fn count_detected(sends: &[u64], events: &[DetectionEvent], epsilon: u64) -> usize {
    let mut j = 0;
    let mut n = 0;
    for &t in sends {
        while j < events.len() && events[j].cycle <= t {
            j += 1;
        }
        if j < events.len() && events[j].cycle <= t + epsilon {
            n += 1;
        }
    }
    n
}

pub fn write_trace_csv<W: std::io::Write>(events: &[DetectionEvent], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["cycle", "latency"])?;
    for e in events {
        wr.write_record([e.cycle.to_string(), e.latency.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub interval: u64,
    pub strategy: StrategyKind,
    pub rate: f64,
}

pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["interval", "strategy", "rate"])?;
    for r in rows {
        wr.write_record([r.interval.to_string(), r.strategy.to_string(), format!("{:.6}", r.rate)])?;
    }
    wr.flush()?;
    Ok(())
}
