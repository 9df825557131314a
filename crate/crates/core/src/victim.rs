//! A Montgomery-ladder signing loop reduced to its code-fetch schedule, and
//! the decoder that turns a monitor's detections back into nonce bits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::address::{check_page_offset, VirtAddr, LINE_SIZE, PAGE_BITS, PAGE_SIZE};
use crate::cache::{Machine, VICTIM, VICTIM_SPACE};
use crate::error::{Error, Result};

pub mod attack;

pub const NONCE_BITS: usize = 571;
pub const ITERATION_CYCLES: u64 = 9700;
pub const ITERATION_JITTER: u64 = 1000;

/// Virtual code lines of the victim. `monitored` is fetched at every
/// iteration boundary; `if_line` / `else_line` hold the two branch bodies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeLayout {
    pub monitored: VirtAddr,
    pub if_line: VirtAddr,
    pub else_line: VirtAddr,
}

impl CodeLayout {
    /// One fresh code page in the victim's address space, with the monitored
    /// line at `page_offset` and the branch lines a quarter and half a page
    /// further on.
    pub fn allocate(m: &mut Machine, page_offset: u64) -> Result<Self> {
        check_page_offset(page_offset)?;
        let vpn = m.space(VICTIM_SPACE).alloc_pages(1)?;
        let base = vpn << PAGE_BITS;
        let at = |off: u64| VirtAddr(base | (off % PAGE_SIZE) & !(LINE_SIZE - 1));
        let layout = CodeLayout {
            monitored: at(page_offset),
            if_line: at(page_offset + PAGE_SIZE / 4),
            else_line: at(page_offset + PAGE_SIZE / 2),
        };
        let geom = m.geometry().clone();
        let set = |m: &mut Machine, va| geom.llc_global_set(m.translate(VICTIM_SPACE, va).0);
        let (a, b, c) = (set(m, layout.monitored), set(m, layout.if_line), set(m, layout.else_line));
        if b == c || a == b || a == c {
            return Err(Error::Precondition("victim code lines share an SF set".into()));
        }
        Ok(layout)
    }

    pub fn line(&self, role: LineRole) -> VirtAddr {
        match role {
            LineRole::Monitored => self.monitored,
            LineRole::If => self.if_line,
            LineRole::Else => self.else_line,
        }
    }

    /// Flat SF set of the monitored line.
    pub fn monitored_set(&self, m: &mut Machine) -> usize {
        let pa = m.translate(VICTIM_SPACE, self.monitored);
        m.geometry().llc_global_set(pa.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderVictim {
    pub nonce: Vec<bool>,
    /// Mean iteration length, cycles.
    pub iteration: u64,
    /// Iteration lengths are uniform on `iteration ± jitter`.
    pub jitter: u64,
    pub layout: CodeLayout,
    /// Fraction of time spent signing when running in the background.
    pub duty_cycle: f64,
    /// The extra mid-iteration fetch happens for 0 bits (otherwise for 1 bits).
    pub extra_on_zero: bool,
}

impl LadderVictim {
    pub fn new(layout: CodeLayout, nonce: Vec<bool>) -> Self {
        LadderVictim {
            nonce,
            iteration: ITERATION_CYCLES,
            jitter: ITERATION_JITTER,
            layout,
            duty_cycle: 0.25,
            extra_on_zero: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nonce.is_empty() {
            return Err(Error::Config("nonce must have at least one bit".into()));
        }
        if self.jitter >= self.iteration {
            return Err(Error::Config("iteration jitter must be below the iteration length".into()));
        }
        if !(self.duty_cycle > 0.0 && self.duty_cycle <= 1.0) {
            return Err(Error::Config(format!("duty cycle {} must lie in (0, 1]", self.duty_cycle)));
        }
        Ok(())
    }

    fn has_extra(&self, bit: bool) -> bool {
        bit != self.extra_on_zero
    }

    /// Expected signing length, cycles.
    pub fn signing_cycles(&self) -> u64 {
        self.nonce.len() as u64 * self.iteration
    }
}

pub fn random_nonce(rng: &mut impl Rng, bits: usize) -> Vec<bool> {
    (0..bits).map(|_| rng.random::<bool>()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LineRole {
    Monitored,
    If,
    Else,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fetch {
    pub cycle: u64,
    pub role: LineRole,
    /// Iteration the fetch belongs to; the closing fetch has index `nonce.len()`.
    pub iteration: usize,
}

/// Ground truth of one signing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderSchedule {
    pub start: u64,
    pub end: u64,
    /// Start of every iteration plus the end of the last one.
    pub boundaries: Vec<u64>,
    pub fetches: Vec<Fetch>,
    pub nonce: Vec<bool>,
}

/// The fetch schedule of one signing starting at `start`, without touching
/// any machine.
pub fn ladder_schedule(v: &LadderVictim, start: u64, rng: &mut impl Rng) -> LadderSchedule {
    let n = v.nonce.len();
    let mut boundaries = Vec::with_capacity(n + 1);
    let mut fetches = Vec::with_capacity(3 * n + 1);
    let mut t = start;
    for (i, &bit) in v.nonce.iter().enumerate() {
        let d = rng.random_range(v.iteration - v.jitter..=v.iteration + v.jitter);
        boundaries.push(t);
        fetches.push(Fetch { cycle: t, role: LineRole::Monitored, iteration: i });
        let branch = if bit { LineRole::If } else { LineRole::Else };
        fetches.push(Fetch { cycle: t + d / 4, role: branch, iteration: i });
        if v.has_extra(bit) {
            fetches.push(Fetch { cycle: t + d / 2, role: LineRole::Monitored, iteration: i });
        }
        t += d;
    }
    boundaries.push(t);
    fetches.push(Fetch { cycle: t, role: LineRole::Monitored, iteration: n });
    LadderSchedule { start, end: t, boundaries, fetches, nonce: v.nonce.clone() }
}

/// Run one signing: queue its fetches on the victim core and return the
/// ground truth.
pub fn run_ladder(m: &mut Machine, v: &LadderVictim, start: u64, rng: &mut impl Rng) -> Result<LadderSchedule> {
    v.validate()?;
    let s = ladder_schedule(v, start, rng);
    for f in &s.fetches {
        let p = m.translate(VICTIM_SPACE, v.layout.line(f.role));
        m.schedule_access(f.cycle, VICTIM, p);
    }
    Ok(s)
}

/// Keep the victim signing in the background from `from` to `until` with
/// its duty cycle: one signing per period, a fresh random nonce each time,
/// and a random phase for the first one.
pub fn run_background(
    m: &mut Machine,
    v: &LadderVictim,
    from: u64,
    until: u64,
    seed: u64,
) -> Result<Vec<LadderSchedule>> {
    v.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let period = (v.signing_cycles() as f64 / v.duty_cycle).round() as u64;
    // random phase: the first signing may already be under way at `from`
    let mut t = from.saturating_sub(rng.random_range(0..period));
    let mut out = Vec::new();
    while t < until {
        let mut w = v.clone();
        w.nonce = random_nonce(&mut rng, v.nonce.len());
        // a signing whose start falls before `from` only contributes its tail
        let s = ladder_schedule(&w, t, &mut rng);
        for f in s.fetches.iter().filter(|f| f.cycle >= from) {
            let p = m.translate(VICTIM_SPACE, w.layout.line(f.role));
            m.schedule_access(f.cycle, VICTIM, p);
        }
        out.push(s);
        t += period;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractConfig {
    pub expected_iteration: u64,
    /// Neighbouring boundaries must be this far apart, cycles.
    pub min_gap: u64,
    pub max_gap: u64,
    /// After a gap, a detection k iterations on is a boundary if it lies
    /// within this fraction of an iteration of k·expected.
    pub resync_tolerance: f64,
    pub n_bits: usize,
    pub extra_on_zero: bool,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            expected_iteration: ITERATION_CYCLES,
            min_gap: 8000,
            max_gap: 12000,
            resync_tolerance: 0.2,
            n_bits: NONCE_BITS,
            extra_on_zero: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionResult {
    /// One entry per nonce position; `None` where the trace could not tell.
    pub bits: Vec<Option<bool>>,
    pub recovered: usize,
    pub fraction: f64,
    /// Boundaries found, as (cycle, iteration index).
    pub boundaries: Vec<(u64, usize)>,
}

impl ExtractionResult {
    /// Wrong bits among the recovered ones.
    pub fn errors(&self, truth: &[bool]) -> usize {
        self.bits
            .iter()
            .zip(truth)
            .filter(|(b, t)| matches!(b, Some(b) if b != *t))
            .count()
    }

    /// Bit error rate over recovered positions; 0 when nothing was recovered.
    pub fn bit_error_rate(&self, truth: &[bool]) -> f64 {
        if self.recovered == 0 {
            0.0
        } else {
            self.errors(truth) as f64 / self.recovered as f64
        }
    }

    /// Recovered bits in order, ignoring positions.
    pub fn stream(&self) -> Vec<bool> {
        self.bits.iter().flatten().copied().collect()
    }
}

fn nearest_multiple(d: u64, e: u64) -> (u64, u64) {
    let k = ((d as f64) / e as f64).round() as u64;
    (k, d.abs_diff(k * e))
}

/// Continue a boundary chain from its first boundary.
fn chain(events: &[u64], first: (u64, usize), cfg: &ExtractConfig) -> Vec<(u64, usize)> {
    let e = cfg.expected_iteration;
    let tol = (cfg.resync_tolerance * e as f64) as u64;
    let mut bounds = vec![first];
    while let Some(&(b, idx)) = bounds.last() {
        if idx >= cfg.n_bits {
            break;
        }
        let lo = events.partition_point(|&t| t < b + cfg.min_gap);
        let hi = events.partition_point(|&t| t <= b + cfg.max_gap);
        if lo < hi {
            let j = (lo..hi).min_by_key(|&j| (events[j] - b).abs_diff(e)).unwrap();
            bounds.push((events[j], idx + 1));
            continue;
        }
        let next = events[hi..].iter().find_map(|&t| {
            let (k, off) = nearest_multiple(t - b, e);
            (k >= 2 && off <= tol).then_some((t, idx + k as usize))
        });
        match next {
            Some((t, k)) if k <= cfg.n_bits => bounds.push((t, k)),
            _ => break,
        }
    }
    bounds
}

/// Decode nonce bits from detection times.
///
/// `anchor` is the cycle at which the signing was triggered, when known; the
/// first boundary is then the first detection within the resync tolerance of
/// a whole number of iterations after it. Without an anchor, every detection
/// in the first `max_gap` cycles is tried as the start of iteration 0 and the
/// longest chain wins, so a chain cannot lock onto the mid-iteration fetches.
///
/// Boundaries: after a boundary at b, the next one is the detection in
/// [b + min_gap, b + max_gap] closest to b + expected. If that window is
/// empty, the first later detection within the resync tolerance of a whole
/// number of iterations continues the chain. A bit is decoded only between
/// neighbouring boundaries: it carries the extra fetch iff some detection
/// falls in the middle third of the interval.
pub fn extract_nonce(events: &[u64], anchor: Option<u64>, cfg: &ExtractConfig) -> Result<ExtractionResult> {
    if events.is_empty() {
        return Err(Error::InsufficientData("empty detection trace".into()));
    }
    if cfg.min_gap == 0 || cfg.min_gap > cfg.max_gap || cfg.expected_iteration == 0 {
        return Err(Error::Config("boundary gaps must satisfy 0 < min_gap <= max_gap".into()));
    }
    let e = cfg.expected_iteration;
    let tol = (cfg.resync_tolerance * e as f64) as u64;
    let bounds = match anchor {
        Some(a) => events
            .iter()
            .filter(|&&t| t >= a)
            .find_map(|&t| {
                let (k, off) = nearest_multiple(t - a, e);
                (off <= tol && (k as usize) <= cfg.n_bits).then_some((t, k as usize))
            })
            .map(|first| chain(events, first, cfg))
            .unwrap_or_default(),
        None => {
            let horizon = events[0] + cfg.max_gap;
            let mut best: Vec<(u64, usize)> = Vec::new();
            for &t in events.iter().take_while(|&&t| t <= horizon) {
                let c = chain(events, (t, 0), cfg);
                if c.len() > best.len() {
                    best = c;
                }
            }
            best
        }
    };
    let mut bits = vec![None; cfg.n_bits];
    for w in bounds.windows(2) {
        let ((a, ia), (b, ib)) = (w[0], w[1]);
        let d = b - a;
        if ib != ia + 1 || d < cfg.min_gap || d > cfg.max_gap {
            continue;
        }
        let (m0, m1) = (a + d / 3, a + 2 * d / 3);
        let lo = events.partition_point(|&t| t <= m0);
        let extra = lo < events.len() && events[lo] < m1;
        bits[ia] = Some(extra != cfg.extra_on_zero);
    }
    let recovered = bits.iter().filter(|b| b.is_some()).count();
    Ok(ExtractionResult { fraction: recovered as f64 / cfg.n_bits as f64, recovered, bits, boundaries: bounds })
}
