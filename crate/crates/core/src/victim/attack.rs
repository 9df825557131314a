//! The whole attack against the ladder victim: build eviction sets, find the
//! victim's set, then collect and decode traces of triggered signings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{extract_nonce, random_nonce, run_background, run_ladder, CodeLayout, ExtractConfig, LadderVictim, NONCE_BITS};
use crate::address::VirtAddr;
use crate::cache::{Machine, MachineConfig, Policies, ATTACKER_SPACE};
use crate::error::{Error, Result};
use crate::geometry::{CacheGeometry, Level};
use crate::noise::{NoiseModel, NoiseScope};
use crate::probing::{congruent_lines, monitor, MonitorStrategy, StrategyKind};
use crate::pruning::{build_bulk, Algorithm, BulkConfig, Scope};
use crate::spectral::{scan, ScanConfig, ScanReport};
use crate::timing::{LatencyModel, SimOracle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub geometry: CacheGeometry,
    pub policies: Policies,
    pub latency: LatencyModel,
    pub noise_rate: f64,
    pub algorithm: Algorithm,
    pub scope: Scope,
    pub filter: bool,
    pub seed: u64,
    /// Page offset of the victim's monitored code line.
    pub page_offset: u64,
    /// Signings to trace after the set is found.
    pub traces: usize,
    /// Skip construction and scanning: monitor this flat set directly, with
    /// an eviction set taken from ground truth.
    pub target_set: Option<usize>,
    pub scan: ScanConfig,
    pub duty_cycle: f64,
    pub extract: ExtractConfig,
}

impl AttackConfig {
    pub fn new(geometry: CacheGeometry, seed: u64) -> Self {
        AttackConfig {
            geometry,
            policies: Policies::default(),
            latency: LatencyModel::default(),
            noise_rate: 0.0,
            algorithm: Algorithm::BinS,
            scope: Scope::PageOffset,
            filter: true,
            seed,
            page_offset: 0x2c0,
            traces: 10,
            target_set: None,
            scan: ScanConfig::default(),
            duty_cycle: 0.25,
            extract: ExtractConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub name: String,
    pub success: bool,
    pub sim_ms: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceReport {
    pub detections: usize,
    pub recovered: usize,
    pub errors: usize,
    pub fraction: f64,
    pub bit_error_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub seed: u64,
    pub noise_rate: f64,
    pub algorithm: Algorithm,
    pub scope: Scope,
    pub stages: Vec<StageReport>,
    pub victim_set: usize,
    pub eviction_sets: usize,
    pub scan: Option<ScanReport>,
    /// Whether the scanned set really is the victim's (ground truth).
    pub scan_correct: Option<bool>,
    pub traces: Vec<TraceReport>,
    pub median_fraction: f64,
    pub bit_error_rate: f64,
    pub success: bool,
    pub total_sim_ms: f64,
}

impl AttackReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))
    }
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 0 {
        (v[m - 1] + v[m]) / 2.0
    } else {
        v[m]
    }
}

fn stage(o: &SimOracle, name: &str, since: u64, success: bool, detail: String) -> StageReport {
    StageReport {
        name: name.into(),
        success,
        sim_ms: (o.machine.now() - since) as f64 / o.machine.cycles_per_ms(),
        detail,
    }
}

/// Run the attack pipeline, stopping at the first stage that fails.
pub fn end_to_end(cfg: &AttackConfig) -> Result<AttackReport> {
    let mut mc = MachineConfig::new(cfg.geometry.clone(), cfg.seed);
    mc.policies = cfg.policies;
    let mut m = Machine::new(mc)?;
    if cfg.noise_rate > 0.0 {
        m.attach_noise(NoiseModel::new(cfg.noise_rate, NoiseScope::PerSetUniform, cfg.seed))?;
    }
    let layout = CodeLayout::allocate(&mut m, cfg.page_offset)?;
    let victim_set = layout.monitored_set(&mut m);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7669_6374_696d);
    let mut victim = LadderVictim::new(layout, random_nonce(&mut rng, NONCE_BITS));
    victim.duty_cycle = cfg.duty_cycle;
    victim.validate()?;
    let mut o = SimOracle::new(m, cfg.latency)?;
    let mut report = AttackReport {
        seed: cfg.seed,
        noise_rate: cfg.noise_rate,
        algorithm: cfg.algorithm,
        scope: cfg.scope,
        stages: Vec::new(),
        victim_set,
        eviction_sets: 0,
        scan: None,
        scan_correct: None,
        traces: Vec::new(),
        median_fraction: 0.0,
        bit_error_rate: 0.0,
        success: false,
        total_sim_ms: 0.0,
    };

    let evset: Vec<VirtAddr> = match cfg.target_set {
        Some(g) => {
            let t = o.machine.now();
            let lines = congruent_lines(&mut o.machine, ATTACKER_SPACE, cfg.page_offset, g, cfg.geometry.ways(Level::Sf))?;
            report.stages.push(stage(&o, "target", t, true, format!("set {g} given")));
            lines
        }
        None => {
            let t = o.machine.now();
            let mut bc = BulkConfig::new(cfg.scope, cfg.algorithm, cfg.filter);
            bc.page_offset = cfg.page_offset;
            bc.prune.seed = cfg.seed;
            let bulk = build_bulk(&mut o, &bc)?;
            let sets: Vec<Vec<VirtAddr>> = bulk.sets.iter().map(|e| e.addrs.clone()).collect();
            report.eviction_sets = sets.len();
            let ok = !sets.is_empty();
            report.stages.push(stage(&o, "bulk", t, ok, format!("{} sets from {} targets", sets.len(), bulk.attempted)));
            if !ok {
                return Ok(finish(o, report));
            }

            let t = o.machine.now();
            let until = t + (cfg.scan.timeout_ms * o.machine.cycles_per_ms()) as u64 + 1;
            run_background(&mut o.machine, &victim, t, until, cfg.seed ^ 0x6267)?;
            let sr = scan(&mut o, &sets, &cfg.scan)?;
            o.machine.clear_schedule();
            let found = sr.set.map(|i| sets[i].clone());
            report.scan_correct = found.as_ref().map(|s| {
                let pa = o.machine.translate(ATTACKER_SPACE, s[0]);
                o.machine.geometry().llc_global_set(pa.0) == victim_set
            });
            let detail = match sr.set {
                Some(i) => format!("set #{i} after {} traces", sr.traces),
                None => format!("nothing found in {} traces", sr.traces),
            };
            report.stages.push(stage(&o, "scan", t, found.is_some(), detail));
            report.scan = Some(sr);
            match found {
                Some(s) => s,
                None => return Ok(finish(o, report)),
            }
        }
    };

    let t = o.machine.now();
    let mut s = MonitorStrategy::new(StrategyKind::ParallelProbe, vec![evset])?;
    for _ in 0..cfg.traces {
        victim.nonce = random_nonce(&mut rng, NONCE_BITS);
        let start = o.machine.now() + 20_000;
        let truth = run_ladder(&mut o.machine, &victim, start, &mut rng)?;
        let events: Vec<u64> =
            monitor(&mut o, &mut s, truth.end + cfg.extract.max_gap).iter().map(|e| e.cycle).collect();
        let r = match extract_nonce(&events, Some(start), &cfg.extract) {
            Ok(r) => r,
            Err(Error::InsufficientData(_)) => {
                report.traces.push(TraceReport { detections: 0, recovered: 0, errors: 0, fraction: 0.0, bit_error_rate: 0.0 });
                continue;
            }
            Err(e) => return Err(e),
        };
        report.traces.push(TraceReport {
            detections: events.len(),
            recovered: r.recovered,
            errors: r.errors(&truth.nonce),
            fraction: r.fraction,
            bit_error_rate: r.bit_error_rate(&truth.nonce),
        });
    }
    let fractions: Vec<f64> = report.traces.iter().map(|t| t.fraction).collect();
    report.median_fraction = median(&fractions);
    let (rec, err) = report.traces.iter().fold((0, 0), |(r, e), t| (r + t.recovered, e + t.errors));
    report.bit_error_rate = if rec == 0 { 0.0 } else { err as f64 / rec as f64 };
    let ok = rec > 0;
    report.stages.push(stage(&o, "extract", t, ok, format!("{rec} bits over {} traces", report.traces.len())));
    report.success = ok;
    Ok(finish(o, report))
}

fn finish(o: SimOracle, mut report: AttackReport) -> AttackReport {
    report.total_sim_ms = o.machine.now() as f64 / o.machine.cycles_per_ms();
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[]), 0.0);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
