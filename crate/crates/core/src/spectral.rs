//! Welch power-spectral-density estimates of access traces and the scanner
//! that looks for the victim's set by its access frequency.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::address::VirtAddr;
use crate::error::{Error, Result};
use crate::probing::{monitor, MonitorStrategy, StrategyKind};
use crate::timing::SimOracle;
use crate::victim::{extract_nonce, ExtractConfig};

/// Detection times of one monitored set, relative to the trace start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccessTrace {
    pub timestamps: Vec<u64>,
    pub duration: u64,
    pub set: usize,
}

impl AccessTrace {
    pub fn new(timestamps: Vec<u64>, duration: u64, set: usize) -> Result<Self> {
        if timestamps.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Precondition("trace timestamps must be sorted".into()));
        }
        if timestamps.last().is_some_and(|&t| t > duration) {
            return Err(Error::Precondition("trace timestamp beyond its duration".into()));
        }
        Ok(AccessTrace { timestamps, duration, set })
    }

    /// Events in [start, start + duration], shifted to start at 0.
    pub fn from_cycles(events: &[u64], start: u64, duration: u64, set: usize) -> Self {
        let ts = events
            .iter()
            .filter(|&&t| t >= start && t - start <= duration)
            .map(|&t| t - start)
            .collect();
        AccessTrace { timestamps: ts, duration, set }
    }
}

/// Sample i is 1 iff some detection falls in [i·T, (i+1)·T).
pub fn binarize(trace: &AccessTrace, sample_period: u64) -> Result<Vec<f64>> {
    if sample_period == 0 {
        return Err(Error::Precondition("sample period must be positive".into()));
    }
    let n = (trace.duration / sample_period + 1) as usize;
    let mut out = vec![0.0; n];
    for &t in &trace.timestamps {
        out[(t / sample_period) as usize] = 1.0;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsdEstimate {
    /// Bin centres, Hz.
    pub freqs: Vec<f64>,
    /// One-sided power density per bin.
    pub power: Vec<f64>,
    pub sample_rate: f64,
    pub segment_len: usize,
    pub overlap: f64,
}

impl PsdEstimate {
    pub fn bin_width(&self) -> f64 {
        self.sample_rate / self.segment_len as f64
    }

    pub fn nyquist(&self) -> f64 {
        self.sample_rate / 2.0
    }

    /// Bin nearest to `f`.
    pub fn bin_of(&self, f: f64) -> usize {
        ((f / self.bin_width()).round() as usize).min(self.power.len() - 1)
    }

    /// Bin with the most power, ignoring DC.
    pub fn dominant_bin(&self) -> usize {
        (1..self.power.len())
            .max_by(|&a, &b| self.power[a].total_cmp(&self.power[b]).then(b.cmp(&a)))
            .unwrap_or(0)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["frequency_hz", "power"])?;
        for (f, p) in self.freqs.iter().zip(&self.power) {
            wr.write_record([format!("{f:.3}"), format!("{p:.6e}")])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Welch's method: Hann-windowed, mean-removed segments of `segment_len`
/// samples advancing by `segment_len · (1 − overlap)`; the one-sided
/// periodograms are averaged with density scaling, so the summed power times
/// the bin width equals the signal variance.
pub fn welch_psd(samples: &[f64], sample_rate: f64, segment_len: usize, overlap: f64) -> Result<PsdEstimate> {
    if segment_len < 2 {
        return Err(Error::Precondition("segment length must be at least 2".into()));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Precondition(format!("overlap {overlap} must lie in [0, 1)")));
    }
    if !(sample_rate > 0.0) {
        return Err(Error::Precondition("sample rate must be positive".into()));
    }
    if samples.len() < segment_len {
        return Err(Error::InsufficientData(format!(
            "{} samples, need at least one segment of {segment_len}",
            samples.len()
        )));
    }
    let step = ((segment_len as f64 * (1.0 - overlap)).round() as usize).max(1);
    let win = hann(segment_len);
    let scale = 1.0 / (sample_rate * win.iter().map(|w| w * w).sum::<f64>());
    let fft = FftPlanner::<f64>::new().plan_fft_forward(segment_len);
    let bins = segment_len / 2 + 1;
    let mut power = vec![0.0; bins];
    let mut buf = vec![Complex::new(0.0, 0.0); segment_len];
    let mut segments = 0;
    let mut start = 0;
    while start + segment_len <= samples.len() {
        let seg = &samples[start..start + segment_len];
        let mean = seg.iter().sum::<f64>() / segment_len as f64;
        for (b, (&x, &w)) in buf.iter_mut().zip(seg.iter().zip(&win)) {
            *b = Complex::new((x - mean) * w, 0.0);
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p += buf[k].norm_sqr();
        }
        segments += 1;
        start += step;
    }
    let last_doubled = if segment_len % 2 == 0 { bins - 1 } else { bins };
    for (k, p) in power.iter_mut().enumerate() {
        *p *= scale / segments as f64;
        if k > 0 && k < last_doubled {
            *p *= 2.0;
        }
    }
    let df = sample_rate / segment_len as f64;
    Ok(PsdEstimate {
        freqs: (0..bins).map(|k| k as f64 * df).collect(),
        power,
        sample_rate,
        segment_len,
        overlap,
    })
}

/// Bins within `tolerance` of `f_expected` and of its next three harmonics
/// below Nyquist.
fn harmonic_bins(psd: &PsdEstimate, f_expected: f64, tolerance: usize) -> Vec<bool> {
    let mut mask = vec![false; psd.power.len()];
    for h in 1..=4 {
        let f = f_expected * h as f64;
        if f > psd.nyquist() {
            break;
        }
        let c = psd.bin_of(f);
        for k in c.saturating_sub(tolerance).max(1)..=(c + tolerance).min(psd.power.len() - 1) {
            mask[k] = true;
        }
    }
    mask
}

/// Highest power near `f_expected` or its first three harmonics, over the
/// median power of all other bins (DC excluded). 0 for an all-zero spectrum.
pub fn score_peak(psd: &PsdEstimate, f_expected: f64, tolerance_bins: usize) -> Result<f64> {
    if !(f_expected > 0.0 && f_expected <= psd.nyquist()) {
        return Err(Error::Precondition(format!(
            "expected frequency {f_expected} Hz outside (0, {}] Hz",
            psd.nyquist()
        )));
    }
    if psd.power.iter().all(|&p| p == 0.0) {
        return Ok(0.0);
    }
    let mask = harmonic_bins(psd, f_expected, tolerance_bins);
    let peak = (1..psd.power.len()).filter(|&k| mask[k]).map(|k| psd.power[k]).fold(0.0, f64::max);
    let mut rest: Vec<f64> = (1..psd.power.len()).filter(|&k| !mask[k]).map(|k| psd.power[k]).collect();
    if rest.is_empty() {
        return Err(Error::Precondition("tolerance covers the whole spectrum".into()));
    }
    rest.sort_unstable_by(f64::total_cmp);
    let mid = rest.len() / 2;
    let median = if rest.len() % 2 == 0 { (rest[mid - 1] + rest[mid]) / 2.0 } else { rest[mid] };
    let mean = psd.power.iter().sum::<f64>() / psd.power.len() as f64;
    Ok(peak / median.max(1e-12 * mean))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanConfig {
    /// Simulated time each set is monitored for, microseconds.
    pub trace_us: f64,
    /// Give up after this much simulated time, milliseconds.
    pub timeout_ms: f64,
    pub sample_period: u64,
    pub segment_len: usize,
    pub overlap: f64,
    /// Access period the victim's set shows, cycles.
    pub expected_period: u64,
    pub tolerance_bins: usize,
    pub threshold: f64,
    /// Traces with fewer or more detections are skipped.
    pub min_accesses: usize,
    pub max_accesses: usize,
    /// A candidate must decode to at least this many bits ...
    pub min_bits: usize,
    /// ... with neither value making up more than this fraction.
    pub max_bias: f64,
    pub extract: ExtractConfig,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            trace_us: 500.0,
            timeout_ms: 1000.0,
            sample_period: 500,
            segment_len: 256,
            overlap: 0.5,
            expected_period: 4850,
            tolerance_bins: 3,
            threshold: 8.0,
            min_accesses: 50,
            max_accesses: 400,
            min_bits: 16,
            max_bias: 0.9,
            extract: ExtractConfig::default(),
        }
    }
}

impl ScanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.trace_us > 0.0 && self.timeout_ms > 0.0) {
            return Err(Error::Config("trace length and timeout must be positive".into()));
        }
        if self.sample_period == 0 || self.expected_period == 0 {
            return Err(Error::Config("sample and expected periods must be positive".into()));
        }
        if self.min_accesses > self.max_accesses {
            return Err(Error::Config("min_accesses exceeds max_accesses".into()));
        }
        if !(0.5..=1.0).contains(&self.max_bias) {
            return Err(Error::Config("max_bias must lie in [0.5, 1]".into()));
        }
        Ok(())
    }

    pub fn expected_hz(&self, clock_hz: f64) -> f64 {
        clock_hz / self.expected_period as f64
    }
}

/// Binarize, estimate the PSD and score it against the expected frequency.
pub fn trace_score(trace: &AccessTrace, clock_hz: f64, cfg: &ScanConfig) -> Result<f64> {
    let samples = binarize(trace, cfg.sample_period)?;
    let psd = welch_psd(&samples, clock_hz / cfg.sample_period as f64, cfg.segment_len, cfg.overlap)?;
    score_peak(&psd, cfg.expected_hz(clock_hz), cfg.tolerance_bins)
}

/// Does the trace decode to a usable bit stream?
pub fn decodes(events: &[u64], cfg: &ScanConfig) -> bool {
    let Ok(r) = extract_nonce(events, None, &cfg.extract) else {
        return false;
    };
    let bits = r.stream();
    if bits.len() < cfg.min_bits {
        return false;
    }
    let ones = bits.iter().filter(|&&b| b).count() as f64 / bits.len() as f64;
    ones <= cfg.max_bias && ones >= 1.0 - cfg.max_bias
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    /// Index of the accepted eviction set.
    pub set: Option<usize>,
    pub score: f64,
    pub decision: bool,
    pub elapsed_cycles: u64,
    pub elapsed_ms: f64,
    pub traces: usize,
    pub passes: usize,
}

impl ScanReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))
    }
}

/// Watch every eviction set in turn for one trace length, repeating passes
/// until a set passes the count filter, the PSD score and the decoding check,
/// or the timeout expires.
pub fn scan(o: &mut SimOracle, evsets: &[Vec<VirtAddr>], cfg: &ScanConfig) -> Result<ScanReport> {
    cfg.validate()?;
    if evsets.is_empty() {
        return Err(Error::Precondition("no eviction sets to scan".into()));
    }
    let clock_hz = o.machine.config().clock_hz;
    let per_us = clock_hz / 1e6;
    let trace_cycles = (cfg.trace_us * per_us).round() as u64;
    let start = o.machine.now();
    let deadline = start + (cfg.timeout_ms * 1000.0 * per_us).round() as u64;
    let mut report = ScanReport { set: None, score: 0.0, decision: false, elapsed_cycles: 0, elapsed_ms: 0.0, traces: 0, passes: 0 };
    'passes: loop {
        report.passes += 1;
        for (i, set) in evsets.iter().enumerate() {
            if o.machine.now() >= deadline {
                break 'passes;
            }
            let mut s = MonitorStrategy::new(StrategyKind::ParallelProbe, vec![set.clone()])?;
            let t0 = o.machine.now();
            let events: Vec<u64> = monitor(o, &mut s, t0 + trace_cycles).iter().map(|e| e.cycle).collect();
            report.traces += 1;
            if events.len() < cfg.min_accesses || events.len() > cfg.max_accesses {
                continue;
            }
            let trace = AccessTrace::from_cycles(&events, t0, trace_cycles, i);
            let score = trace_score(&trace, clock_hz, cfg)?;
            if score > cfg.threshold && decodes(&events, cfg) {
                report.set = Some(i);
                report.score = score;
                report.decision = true;
                break 'passes;
            }
        }
    }
    report.elapsed_cycles = o.machine.now() - start;
    report.elapsed_ms = report.elapsed_cycles as f64 / o.machine.cycles_per_ms();
    Ok(report)
}

#[cfg(test)]
mod tests;
