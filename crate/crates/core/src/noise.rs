//! Background tenant activity: a Poisson stream of accesses per noised set,
//! plus inter-arrival statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::address::MAX_SPACE_ID;
use crate::error::{Error, Result};
use crate::geometry::{CacheGeometry, Level};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseScope {
    /// Every LLC/SF set receives an independent stream.
    PerSetUniform,
    /// Only sets registered with [`crate::cache::Machine::register_noised_set`].
    TargetSetOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Accesses per simulated millisecond per set.
    pub rate_per_ms: f64,
    pub scope: NoiseScope,
    pub seed: u64,
}

/// Mean background rate observed on the cloud host, accesses/ms/set.
pub const CLOUD_RATE: f64 = 11.5;
/// Mean background rate on a quiet local machine.
pub const LOCAL_RATE: f64 = 0.29;

impl NoiseModel {
    pub fn new(rate_per_ms: f64, scope: NoiseScope, seed: u64) -> Self {
        NoiseModel { rate_per_ms, scope, seed }
    }

    pub fn quiet() -> Self {
        NoiseModel::new(0.0, NoiseScope::PerSetUniform, 0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate_per_ms >= 0.0) || !self.rate_per_ms.is_finite() {
            return Err(Error::Config(format!("noise rate {} must be finite and non-negative", self.rate_per_ms)));
        }
        Ok(())
    }

    pub fn enabled(&self) -> bool {
        self.rate_per_ms > 0.0
    }
}

/// Probability that a set sees no background access during `window_ms`.
pub fn quiet_probability(rate_per_ms: f64, window_ms: f64) -> f64 {
    (-rate_per_ms * window_ms).exp()
}

const NOT_STARTED: u64 = u64::MAX;

/// Lazily-advanced arrival process; the machine asks for due arrivals
/// whenever it touches a set.
#[derive(Debug, Clone)]
pub(crate) struct NoiseState {
    pub model: NoiseModel,
    rng: ChaCha8Rng,
    exp: Option<Exp<f64>>,
    next: Vec<u64>,
    registered: Vec<bool>,
    injected: Vec<u32>,
    pub total_injected: u64,
    pub total_applied: u64,
    recorded_set: Option<usize>,
    pub recorded: Vec<u64>,
    /// At most this many of the most recent arrivals are simulated per catch-up.
    pub cap: usize,
}

impl NoiseState {
    pub fn new(model: NoiseModel, total_sets: usize, cycles_per_ms: f64) -> Self {
        let exp = model
            .enabled()
            .then(|| Exp::new(model.rate_per_ms / cycles_per_ms).expect("positive rate"));
        NoiseState {
            model,
            rng: ChaCha8Rng::seed_from_u64(model.seed ^ 0x6e6f_6973_65),
            exp,
            next: vec![NOT_STARTED; total_sets],
            registered: vec![false; total_sets],
            injected: vec![0; total_sets],
            total_injected: 0,
            total_applied: 0,
            recorded_set: None,
            recorded: Vec::new(),
            cap: 64,
        }
    }

    #[inline]
    pub fn is_noised(&self, g: usize) -> bool {
        self.exp.is_some() && (self.model.scope == NoiseScope::PerSetUniform || self.registered[g])
    }

    pub fn register(&mut self, g: usize) {
        self.registered[g] = true;
    }

    pub fn record_set(&mut self, g: Option<usize>) {
        self.recorded_set = g;
        self.recorded.clear();
    }

    pub fn injected_in(&self, g: usize) -> u32 {
        self.injected[g]
    }

    fn gap(&mut self) -> u64 {
        let e = self.exp.expect("noise enabled");
        (e.sample(&mut self.rng).ceil() as u64).max(1)
    }

    /// Arrivals in set `g` at or before `t`, oldest first, truncated to the
    /// newest `cap`. Returns true when the set is touched for the first time.
    #[inline]
    pub fn due(&mut self, g: usize, t: u64, out: &mut Vec<u64>) -> bool {
        out.clear();
        if !self.is_noised(g) {
            return false;
        }
        let first = self.next[g] == NOT_STARTED;
        if first {
            self.next[g] = t + self.gap();
            return true;
        }
        while self.next[g] <= t {
            out.push(self.next[g]);
            let gap = self.gap();
            self.next[g] += gap;
        }
        let n = out.len();
        if n > 0 {
            self.injected[g] += n as u32;
            self.total_injected += n as u64;
            if self.recorded_set == Some(g) {
                self.recorded.extend_from_slice(out);
            }
            if n > self.cap {
                out.drain(..n - self.cap);
            }
            self.total_applied += out.len() as u64;
        }
        first
    }

    /// Time of the next arrival in `g`, if the set is noised and started.
    pub fn next_arrival(&self, g: usize) -> Option<u64> {
        (self.is_noised(g) && self.next[g] != NOT_STARTED).then_some(self.next[g])
    }

    /// Fresh tenant line congruent with LLC/SF set `g`.
    pub fn tenant_line(&mut self, geom: &CacheGeometry, g: usize) -> u64 {
        tenant_line(&mut self.rng, geom, g)
    }
}

/// A physical address in the tenant's frame range that maps to flat set `g`.
pub fn tenant_line(rng: &mut impl Rng, geom: &CacheGeometry, g: usize) -> u64 {
    let sets = geom.llc.sets;
    let (slice, set) = (g / sets, g % sets);
    let line_bits = geom.line_bits;
    let (_, hi) = geom.index_range(Level::Llc);
    let frame_bits = geom.phys_bits - geom.page_bits;
    let fixed_hi = (hi + 1).saturating_sub(geom.page_bits);
    let page_part = ((set as u64) << line_bits) & ((1 << geom.page_bits) - 1);
    let frame_fixed = (set as u64) >> (geom.page_bits - line_bits);
    let space_tag = (MAX_SPACE_ID as u64) << (frame_bits - 2);
    loop {
        let r: u64 = rng.random::<u64>() & ((1 << (frame_bits - 2)) - 1);
        let frame = space_tag | (r & !((1 << fixed_hi) - 1)) | frame_fixed;
        let pa = frame << geom.page_bits | page_part;
        if geom.slice_of(pa) == slice {
            debug_assert_eq!(geom.set_of(pa, Level::Llc), set);
            return pa;
        }
    }
}

/// Sorted sample with quantile and CDF lookup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalCdf {
    pub sorted: Vec<f64>,
}

impl EmpiricalCdf {
    pub fn from_samples(mut xs: Vec<f64>) -> Self {
        xs.sort_by(f64::total_cmp);
        EmpiricalCdf { sorted: xs }
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    /// Fraction of samples ≤ x.
    pub fn cdf(&self, x: f64) -> f64 {
        let k = self.sorted.partition_point(|&v| v <= x);
        k as f64 / self.sorted.len() as f64
    }

    /// Smallest sample with CDF ≥ p.
    pub fn quantile(&self, p: f64) -> f64 {
        let n = self.sorted.len();
        let k = ((p.clamp(0.0, 1.0) * n as f64).ceil() as usize).clamp(1, n);
        self.sorted[k - 1]
    }

    pub fn mean(&self) -> f64 {
        self.sorted.iter().sum::<f64>() / self.sorted.len() as f64
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["interval", "cdf"])?;
        let n = self.sorted.len() as f64;
        for (i, v) in self.sorted.iter().enumerate() {
            out.write_record([format!("{v}"), format!("{:.6}", (i + 1) as f64 / n)])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Inter-arrival distribution of a sorted event-time trace.
pub fn inter_access_cdf(times: &[u64]) -> Result<EmpiricalCdf> {
    if times.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least two events, got {}",
            times.len()
        )));
    }
    let gaps = times.windows(2).map(|w| w[1].saturating_sub(w[0]) as f64).collect();
    Ok(EmpiricalCdf::from_samples(gaps))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_cdf_for_fixed_spacing() {
        let ms = 2_000_000u64;
        let times: Vec<u64> = (0..10).map(|i| i * ms).collect();
        let c = inter_access_cdf(&times).unwrap();
        assert_eq!(c.cdf(ms as f64 - 1.0), 0.0);
        assert_eq!(c.cdf(ms as f64), 1.0);
        assert_eq!(c.quantile(0.5), ms as f64);
    }

    #[test]
    fn too_few_events() {
        assert!(matches!(inter_access_cdf(&[5]), Err(Error::InsufficientData(_))));
        assert!(inter_access_cdf(&[]).is_err());
    }

    #[test]
    fn quiet_window_matches_reported_figure() {
        let d = (1.0f64 / 0.184).ln() / CLOUD_RATE;
        assert!((quiet_probability(CLOUD_RATE, d) - 0.184).abs() < 1e-12);
        // about 147 µs
        assert!((d - 0.147).abs() < 0.001);
    }

    #[test]
    fn tenant_lines_hit_requested_set() {
        let g = CacheGeometry::skylake_sp_28();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for flat in [0usize, 5, 2047, 2048, 28 * 2048 - 1, 13_337] {
            for _ in 0..20 {
                let pa = tenant_line(&mut rng, &g, flat);
                assert_eq!(g.llc_global_set(pa), flat);
                assert!(pa < 1 << 46);
                assert_eq!(pa >> 44, 3);
            }
        }
    }

    #[test]
    fn rate_validation() {
        assert!(NoiseModel::new(-1.0, NoiseScope::PerSetUniform, 0).validate().is_err());
        assert!(NoiseModel::new(f64::NAN, NoiseScope::PerSetUniform, 0).validate().is_err());
        assert!(NoiseModel::new(0.0, NoiseScope::TargetSetOnly, 0).validate().is_ok());
        assert!(!NoiseModel::quiet().enabled());
    }

    #[test]
    fn due_counts_arrivals() {
        let mut s = NoiseState::new(NoiseModel::new(CLOUD_RATE, NoiseScope::PerSetUniform, 3), 4, 2.0e6);
        let mut out = Vec::new();
        assert!(s.due(1, 0, &mut out));
        let hundred_ms = 200_000_000;
        let mut total = 0;
        for k in 1..=1000 {
            s.due(1, hundred_ms * k / 1000, &mut out);
            total += out.len();
        }
        assert_eq!(total as u32, s.injected_in(1));
        // 1150 ± 3σ
        let sd = 1150f64.sqrt();
        assert!((total as f64 - 1150.0).abs() < 3.0 * sd, "{total}");
    }
}
