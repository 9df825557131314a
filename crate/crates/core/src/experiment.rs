//! Experiment configuration and the runners behind each CLI subcommand.
//!
//! Runners return their output files as `(name, contents)` pairs so callers
//! can compare runs byte for byte before anything touches the disk.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize};

use crate::address::{default_candidate_count, gen_candidates, CandidateSet, VirtAddr, LINE_SIZE, PAGE_SIZE};
use crate::cache::{Machine, MachineConfig, Policies, Policy, ATTACKER_SPACE, VICTIM_SPACE};
use crate::error::{Error, Result};
use crate::geometry::{CacheGeometry, Level};
use crate::noise::{NoiseModel, NoiseScope};
use crate::probing::{congruent_lines, congruent_sets, covert_run, monitor, prime, write_sweep_csv, MonitorStrategy, StrategyKind, SweepRow};
use crate::pruning::{build_bulk, build_l2_groups, extend_llc_to_sf, l2_filter, prune, Algorithm, BulkConfig, Scope};
use crate::spectral::{binarize, scan, score_peak, welch_psd, AccessTrace, PsdEstimate, ScanConfig};
use crate::timing::{IdealOracle, LatencyModel, SimOracle};
use crate::victim::attack::{end_to_end, median, AttackConfig, AttackReport};
use crate::victim::{random_nonce, run_background, run_ladder, CodeLayout, LadderVictim, NONCE_BITS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    PruneBench,
    Bulk,
    CovertSweep,
    PsdDemo,
    Scan,
    EndToEnd,
}

impl Command {
    pub const ALL: [Command; 6] =
        [Command::PruneBench, Command::Bulk, Command::CovertSweep, Command::PsdDemo, Command::Scan, Command::EndToEnd];

    pub fn as_str(self) -> &'static str {
        match self {
            Command::PruneBench => "prune-bench",
            Command::Bulk => "bulk",
            Command::CovertSweep => "covert-sweep",
            Command::PsdDemo => "psd-demo",
            Command::Scan => "scan",
            Command::EndToEnd => "end-to-end",
        }
    }
}

impl std::str::FromStr for Command {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown command `{s}`")))
    }
}

/// Which eviction oracle bulk construction runs against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleKind {
    Sim,
    Ideal,
}

fn de_algorithm<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<Algorithm>, D::Error> {
    let s: Option<String> = Option::deserialize(d)?;
    s.map(|s| s.parse().map_err(serde::de::Error::custom)).transpose()
}

fn de_scope<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Scope, D::Error> {
    String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// A preset name, `skylake-<slices>`, or `custom`.
    pub geometry: String,
    /// Used when `geometry = "custom"`.
    pub custom_geometry: Option<CacheGeometry>,
    /// Background accesses per SF set per millisecond.
    pub noise_rate: f64,
    /// prune-bench sweeps these; empty means `noise_rate` alone.
    pub noise_rates: Vec<f64>,
    /// None: every reported algorithm for prune-bench, BinS elsewhere.
    #[serde(deserialize_with = "de_algorithm")]
    pub algorithm: Option<Algorithm>,
    #[serde(deserialize_with = "de_scope")]
    pub scope: Scope,
    pub filter: bool,
    pub oracle: OracleKind,
    pub seed: u64,
    pub replicas: usize,
    pub page_offset: u64,
    /// Replacement policy for the LLC and SF. covert-sweep defaults to
    /// tree-PLRU, everything else to LRU.
    pub sf_policy: Option<Policy>,
    /// prune-bench targets per machine.
    pub targets: usize,
    /// covert-sweep sender intervals, cycles.
    pub intervals: Vec<u64>,
    /// covert-sweep sends per run.
    pub accesses: usize,
    /// A send counts as detected if an event follows within this many cycles.
    pub epsilon: u64,
    /// end-to-end traced signings per run.
    pub traces: usize,
    pub timeout_ms: f64,
    /// psd-demo window, microseconds.
    pub trace_us: f64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            geometry: "skylake-sp-28".into(),
            custom_geometry: None,
            noise_rate: 0.0,
            noise_rates: Vec::new(),
            algorithm: None,
            scope: Scope::PageOffset,
            filter: true,
            oracle: OracleKind::Sim,
            seed: 0,
            replicas: 10,
            page_offset: 0x2c0,
            sf_policy: None,
            targets: 1,
            intervals: vec![500, 1000, 2000, 5000, 10_000, 20_000, 50_000, 100_000],
            accesses: 2000,
            epsilon: 500,
            traces: 10,
            timeout_ms: 1000.0,
            trace_us: 1000.0,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let c: ExperimentConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn geometry(&self) -> Result<CacheGeometry> {
        let g = match self.geometry.as_str() {
            "custom" => self
                .custom_geometry
                .clone()
                .ok_or_else(|| Error::Config("geometry `custom` needs a [custom_geometry] table".into()))?,
            name => match name.strip_prefix("skylake-").and_then(|n| n.parse::<usize>().ok()) {
                Some(n) => CacheGeometry::skylake_with_slices(n),
                None => CacheGeometry::preset(name)?,
            },
        };
        g.validate()?;
        Ok(g)
    }

    pub fn policies(&self, cmd: Command) -> Policies {
        let default = if cmd == Command::CovertSweep { Policy::TreePlru } else { Policy::Lru };
        let p = self.sf_policy.unwrap_or(default);
        Policies { llc: p, sf: p, ..Policies::default() }
    }

    pub fn rates(&self) -> Vec<f64> {
        if self.noise_rates.is_empty() {
            vec![self.noise_rate]
        } else {
            self.noise_rates.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry()?;
        if self.replicas == 0 {
            return Err(Error::Config("replicas must be at least 1".into()));
        }
        let bad_rate = |r: &f64| !(r.is_finite() && *r >= 0.0);
        if bad_rate(&self.noise_rate) || self.noise_rates.iter().any(bad_rate) {
            return Err(Error::Config("noise rates must be finite and non-negative".into()));
        }
        if self.intervals.is_empty() || self.intervals.contains(&0) {
            return Err(Error::Config("intervals must be non-empty and positive".into()));
        }
        if self.accesses == 0 || self.traces == 0 || self.targets == 0 {
            return Err(Error::Config("accesses, traces and targets must be positive".into()));
        }
        if !(self.timeout_ms > 0.0 && self.trace_us > 0.0) {
            return Err(Error::Config("timeout_ms and trace_us must be positive".into()));
        }
        crate::address::check_page_offset(self.page_offset)?;
        Ok(())
    }
}

/// Seed of replica `r`. Replicas share seeds across algorithms and rates, so
/// comparisons are paired.
pub fn replica_seed(base: u64, r: usize) -> u64 {
    base.wrapping_add(r as u64)
}

fn machine(geom: &CacheGeometry, policies: Policies, rate: f64, seed: u64) -> Result<Machine> {
    let mut mc = MachineConfig::new(geom.clone(), seed);
    mc.policies = policies;
    let mut m = Machine::new(mc)?;
    if rate > 0.0 {
        m.attach_noise(NoiseModel::new(rate, NoiseScope::PerSetUniform, seed))?;
    }
    Ok(m)
}

pub type Outputs = Vec<(String, String)>;

pub fn run(cmd: Command, cfg: &ExperimentConfig) -> Result<Outputs> {
    cfg.validate()?;
    match cmd {
        Command::PruneBench => prune_bench(cfg),
        Command::Bulk => bulk(cfg),
        Command::CovertSweep => covert_sweep(cfg),
        Command::PsdDemo => psd_demo(cfg),
        Command::Scan => scan_experiment(cfg),
        Command::EndToEnd => end_to_end_experiment(cfg),
    }
}

pub fn write_outputs(dir: &Path, outputs: &Outputs) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (name, body) in outputs {
        let p = dir.join(name);
        std::fs::write(&p, body)?;
        paths.push(p);
    }
    Ok(paths)
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::Io(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn csv_string(rows: Vec<Vec<String>>, header: &[&str]) -> Result<String> {
    let mut wr = csv::Writer::from_writer(Vec::new());
    wr.write_record(header)?;
    for r in rows {
        wr.write_record(r)?;
    }
    let bytes = wr.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
}

// ---------------------------------------------------------------- prune-bench

/// One single-target SF eviction-set construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneRow {
    pub algorithm: Algorithm,
    pub noise_rate: f64,
    pub replica: usize,
    /// Index of the target within its machine.
    pub target: usize,
    pub seed: u64,
    pub filter: bool,
    /// Candidates handed to the pruning algorithm.
    pub candidates: usize,
    pub success: bool,
    pub set_size: usize,
    /// Every member shares the target's SF set (ground truth).
    pub congruent: bool,
    /// Pruning plus SF extension.
    pub sim_duration_ms: f64,
    /// L2 filtering charged to this run.
    pub filter_ms: f64,
    pub access_count: u64,
    pub backtracks: u32,
}

pub const PRUNE_HEADER: [&str; 14] = [
    "algorithm",
    "noise_rate",
    "replica",
    "target",
    "seed",
    "filter",
    "candidates",
    "success",
    "set_size",
    "congruent",
    "sim_duration_ms",
    "filter_ms",
    "access_count",
    "backtracks",
];

impl PruneRow {
    fn record(&self) -> Vec<String> {
        vec![
            self.algorithm.to_string(),
            format!("{}", self.noise_rate),
            self.replica.to_string(),
            self.target.to_string(),
            self.seed.to_string(),
            self.filter.to_string(),
            self.candidates.to_string(),
            self.success.to_string(),
            self.set_size.to_string(),
            self.congruent.to_string(),
            format!("{:.6}", self.sim_duration_ms),
            format!("{:.6}", self.filter_ms),
            self.access_count.to_string(),
            self.backtracks.to_string(),
        ]
    }
}

/// Run `targets` single-target SF constructions on one fresh machine.
///
/// The machine gets 3·U·W candidates at `page_offset`. With one target, the
/// first candidate is the target and the rest are L2-filtered against it
/// when `filter` is set. With several, the candidates are grouped by L2 set
/// once and targets are taken round-robin from the groups, each pruning its
/// own group; the grouping cost is split evenly over the targets. Every run
/// prunes to an LLC set and extends it to the SF.
pub fn prune_machine(
    geom: &CacheGeometry,
    policies: Policies,
    algorithm: Algorithm,
    rate: f64,
    filter: bool,
    page_offset: u64,
    seed: u64,
    targets: usize,
) -> Result<Vec<PruneRow>> {
    if targets == 0 {
        return Err(Error::Config("targets per machine must be positive".into()));
    }
    let m = machine(geom, policies, rate, seed)?;
    let mut o = SimOracle::new(m, LatencyModel::default())?;
    let n = default_candidate_count(geom, Level::Sf, 3)?;
    let all = gen_candidates(o.machine.space(ATTACKER_SPACE), page_offset, n + targets)?;

    // (target, pool, filter cost)
    let mut jobs: Vec<(VirtAddr, Vec<VirtAddr>, f64)> = Vec::with_capacity(targets);
    if targets == 1 {
        let target = all.addrs[0];
        let rest = CandidateSet::new(all.addrs[1..=n].to_vec(), page_offset, false);
        if filter {
            let (f, s) = l2_filter(&mut o, target, &rest)?;
            jobs.push((target, f.addrs, s.duration_ms));
        } else {
            jobs.push((target, rest.addrs, 0.0));
        }
    } else if filter {
        let groups = build_l2_groups(&mut o, &all)?;
        let share = groups.stats.duration_ms / targets as f64;
        let k = groups.groups.len();
        if k == 0 {
            return Err(Error::Construction("no L2 groups".into()));
        }
        for i in 0..targets {
            let g = &groups.groups[i % k].addrs;
            let j = i / k;
            if j >= g.len() {
                return Err(Error::Exhausted("more targets than group members".into()));
            }
            let pool = g.iter().enumerate().filter(|&(x, _)| x != j).map(|(_, &a)| a).collect();
            jobs.push((g[j], pool, share));
        }
    } else {
        for i in 0..targets {
            let pool = all.addrs.iter().enumerate().filter(|&(x, _)| x != i).map(|(_, &a)| a).take(n).collect();
            jobs.push((all.addrs[i], pool, 0.0));
        }
    }

    let mut rows = Vec::with_capacity(targets);
    for (i, (target, pool, filter_ms)) in jobs.into_iter().enumerate() {
        let t0 = o.machine.now();
        let mut pc = algorithm.config(filter);
        pc.seed = seed.wrapping_add(i as u64);
        let (llc, stats) = prune(&mut o, algorithm, target, &pool, Level::Llc, &pc);
        let sf = llc.and_then(|s| extend_llc_to_sf(&mut o, &s, &pool).ok());
        let set = sf.map(|s| s.addrs).unwrap_or_default();
        let congruent = !set.is_empty() && set.iter().all(|&a| o.machine.congruent(a, target, Level::Sf));
        rows.push(PruneRow {
            algorithm,
            noise_rate: rate,
            replica: 0,
            target: i,
            seed,
            filter,
            candidates: pool.len(),
            success: !set.is_empty(),
            set_size: set.len(),
            congruent,
            sim_duration_ms: (o.machine.now() - t0) as f64 / o.machine.cycles_per_ms(),
            filter_ms,
            access_count: stats.accesses,
            backtracks: stats.backtracks,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSummary {
    pub algorithm: Algorithm,
    pub noise_rate: f64,
    pub runs: usize,
    pub success_rate: f64,
    pub mean_duration_ms: f64,
    pub median_accesses: f64,
}

pub fn prune_bench_rows(cfg: &ExperimentConfig) -> Result<Vec<PruneRow>> {
    let geom = cfg.geometry()?;
    let algs: Vec<Algorithm> = match cfg.algorithm {
        Some(a) => vec![a],
        None => Algorithm::REPORTED.to_vec(),
    };
    let pol = cfg.policies(Command::PruneBench);
    let mut rows = Vec::new();
    for &a in &algs {
        for rate in cfg.rates() {
            for r in 0..cfg.replicas {
                let seed = replica_seed(cfg.seed, r);
                for mut row in prune_machine(&geom, pol, a, rate, cfg.filter, cfg.page_offset, seed, cfg.targets)? {
                    row.replica = r;
                    rows.push(row);
                }
            }
        }
    }
    Ok(rows)
}

pub fn summarize(rows: &[PruneRow]) -> Vec<PruneSummary> {
    let mut keys: Vec<(Algorithm, f64)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|&(a, x)| a == r.algorithm && x == r.noise_rate) {
            keys.push((r.algorithm, r.noise_rate));
        }
    }
    keys.into_iter()
        .map(|(a, x)| {
            let g: Vec<&PruneRow> = rows.iter().filter(|r| r.algorithm == a && r.noise_rate == x).collect();
            let n = g.len() as f64;
            let acc: Vec<f64> = g.iter().map(|r| r.access_count as f64).collect();
            PruneSummary {
                algorithm: a,
                noise_rate: x,
                runs: g.len(),
                success_rate: g.iter().filter(|r| r.success).count() as f64 / n,
                mean_duration_ms: g.iter().map(|r| r.sim_duration_ms + r.filter_ms).sum::<f64>() / n,
                median_accesses: median(&acc),
            }
        })
        .collect()
}

fn prune_bench(cfg: &ExperimentConfig) -> Result<Outputs> {
    let rows = prune_bench_rows(cfg)?;
    let csv = csv_string(rows.iter().map(PruneRow::record).collect(), &PRUNE_HEADER)?;
    Ok(vec![("prune_bench.csv".into(), csv), ("prune_bench_summary.json".into(), to_json(&summarize(&rows))?)])
}

// ----------------------------------------------------------------------- bulk

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BulkSummary {
    pub replica: usize,
    pub seed: u64,
    pub algorithm: Algorithm,
    pub scope: Scope,
    pub filter: bool,
    pub oracle: OracleKind,
    pub attempted: usize,
    pub built: usize,
    pub failures: usize,
    pub filter_constructions: usize,
    /// Sets whose members all share the target's set (ground truth).
    pub congruent_sets: usize,
    pub distinct_targets: usize,
    pub duration_ms: f64,
    pub accesses: u64,
}

fn bulk(cfg: &ExperimentConfig) -> Result<Outputs> {
    let geom = cfg.geometry()?;
    let alg = cfg.algorithm.unwrap_or(Algorithm::BinS);
    let mut summaries = Vec::new();
    let mut rows = Vec::new();
    for r in 0..cfg.replicas {
        let seed = replica_seed(cfg.seed, r);
        let mut bc = BulkConfig::new(cfg.scope, alg, cfg.filter);
        bc.page_offset = cfg.page_offset;
        bc.prune.seed = seed;
        let (report, verdicts) = match cfg.oracle {
            OracleKind::Sim => {
                let m = machine(&geom, cfg.policies(Command::Bulk), cfg.noise_rate, seed)?;
                let mut o = SimOracle::new(m, LatencyModel::default())?;
                let rep = build_bulk(&mut o, &bc)?;
                let v: Vec<(usize, bool)> = rep
                    .sets
                    .iter()
                    .map(|s| {
                        let g = geom.llc_global_set(o.machine.translate(ATTACKER_SPACE, s.target).0);
                        (g, s.addrs.iter().all(|&a| o.machine.congruent(a, s.target, s.level)))
                    })
                    .collect();
                (rep, v)
            }
            OracleKind::Ideal => {
                let mut o = IdealOracle::new(geom.clone(), LatencyModel::default(), seed)?;
                let rep = build_bulk(&mut o, &bc)?;
                let v: Vec<(usize, bool)> = rep
                    .sets
                    .iter()
                    .map(|s| {
                        let g = o.global_set(s.target);
                        (g, s.addrs.iter().all(|&a| o.congruent(a, s.target, s.level)))
                    })
                    .collect();
                (rep, v)
            }
        };
        let mut targets: Vec<usize> = verdicts.iter().map(|v| v.0).collect();
        targets.sort_unstable();
        targets.dedup();
        for (s, &(g, ok)) in report.sets.iter().zip(&verdicts) {
            rows.push(vec![
                r.to_string(),
                format!("{:#x}", s.target.page_offset()),
                g.to_string(),
                s.len().to_string(),
                ok.to_string(),
            ]);
        }
        summaries.push(BulkSummary {
            replica: r,
            seed,
            algorithm: alg,
            scope: cfg.scope,
            filter: cfg.filter,
            oracle: cfg.oracle,
            attempted: report.attempted,
            built: report.sets.len(),
            failures: report.failures,
            filter_constructions: report.filter_constructions,
            congruent_sets: verdicts.iter().filter(|v| v.1).count(),
            distinct_targets: targets.len(),
            duration_ms: report.duration_ms,
            accesses: report.accesses,
        });
    }
    let csv = csv_string(rows, &["replica", "page_offset", "target_set", "size", "congruent"])?;
    Ok(vec![("bulk.json".into(), to_json(&summaries)?), ("bulk_sets.csv".into(), csv)])
}

// --------------------------------------------------------------- covert-sweep

/// A flat set reachable from `page_offset`, picked at random.
fn random_set(geom: &CacheGeometry, page_offset: u64, rng: &mut impl Rng) -> usize {
    let per_page = (PAGE_SIZE / LINE_SIZE) as usize;
    let u = geom.llc_total_sets() / per_page;
    (page_offset / LINE_SIZE) as usize + per_page * rng.random_range(0..u)
}

/// One covert-channel run on a fresh machine.
pub fn covert_replica(
    geom: &CacheGeometry,
    policies: Policies,
    kind: StrategyKind,
    interval: u64,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<f64> {
    let mut m = machine(geom, policies, cfg.noise_rate, seed)?;
    let g = random_set(geom, cfg.page_offset, &mut ChaCha8Rng::seed_from_u64(seed));
    let lines = congruent_lines(&mut m, ATTACKER_SPACE, cfg.page_offset, g, 24)?;
    let sender = congruent_lines(&mut m, VICTIM_SPACE, cfg.page_offset, g, 1)?[0];
    let mut o = SimOracle::new(m, LatencyModel::default())?;
    let sets = match kind {
        StrategyKind::PsAlt => vec![lines[..12].to_vec(), lines[12..].to_vec()],
        _ => vec![lines[..12].to_vec()],
    };
    let mut s = MonitorStrategy::new(kind, sets)?;
    Ok(covert_run(&mut o, &mut s, sender, interval, cfg.accesses, cfg.epsilon)?.rate)
}

fn covert_sweep(cfg: &ExperimentConfig) -> Result<Outputs> {
    let geom = cfg.geometry()?;
    let pol = cfg.policies(Command::CovertSweep);
    let mut sweep = Vec::new();
    let mut runs = Vec::new();
    for &interval in &cfg.intervals {
        for kind in StrategyKind::ALL {
            let mut total = 0.0;
            for r in 0..cfg.replicas {
                let rate = covert_replica(&geom, pol, kind, interval, cfg, replica_seed(cfg.seed, r))?;
                runs.push(vec![interval.to_string(), kind.to_string(), r.to_string(), format!("{rate:.6}")]);
                total += rate;
            }
            sweep.push(SweepRow { interval, strategy: kind, rate: total / cfg.replicas as f64 });
        }
    }
    let mut buf = Vec::new();
    write_sweep_csv(&sweep, &mut buf)?;
    Ok(vec![
        ("covert_sweep.csv".into(), String::from_utf8(buf).map_err(|e| Error::Io(e.to_string()))?),
        ("covert_runs.csv".into(), csv_string(runs, &["interval", "strategy", "replica", "rate"])?),
    ])
}

// ------------------------------------------------------------------ psd-demo

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsdTrial {
    pub seed: u64,
    pub expected_hz: f64,
    pub target_set: usize,
    pub other_set: usize,
    pub target_detections: usize,
    pub other_detections: usize,
    pub target_score: f64,
    pub other_score: f64,
    pub target_peak_hz: f64,
    pub other_peak_hz: f64,
}

/// Monitor the victim's set and one other set at the same page offset while
/// the victim signs, over `trace_us` each, and score both spectra.
pub fn psd_trial(
    geom: &CacheGeometry,
    rate: f64,
    page_offset: u64,
    trace_us: f64,
    seed: u64,
) -> Result<(PsdTrial, PsdEstimate, PsdEstimate)> {
    let sc = ScanConfig::default();
    let mut m = machine(geom, Policies::default(), rate, seed)?;
    let layout = CodeLayout::allocate(&mut m, page_offset)?;
    let g = layout.monitored_set(&mut m);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let other = loop {
        let s = random_set(geom, page_offset, &mut rng);
        if s != g {
            break s;
        }
    };
    let victim = LadderVictim::new(layout, random_nonce(&mut rng, NONCE_BITS));
    let mut o = SimOracle::new(m, LatencyModel::default())?;
    let clock = o.machine.config().clock_hz;
    let window = (trace_us * clock / 1e6).round() as u64;
    let watch = |o: &mut SimOracle, set: usize, rng: &mut ChaCha8Rng| -> Result<(Vec<u64>, PsdEstimate)> {
        let lines = congruent_lines(&mut o.machine, ATTACKER_SPACE, page_offset, set, 12)?;
        let mut s = MonitorStrategy::new(StrategyKind::ParallelProbe, vec![lines])?;
        prime(o, &mut s);
        let start = o.machine.now() + 1000;
        run_ladder(&mut o.machine, &victim, start, rng)?;
        let ev: Vec<u64> = monitor(o, &mut s, start + window).iter().map(|e| e.cycle).collect();
        o.machine.clear_schedule();
        let trace = AccessTrace::from_cycles(&ev, start, window, set);
        let x = binarize(&trace, sc.sample_period)?;
        let psd = welch_psd(&x, clock / sc.sample_period as f64, sc.segment_len, sc.overlap)?;
        Ok((trace.timestamps, psd))
    };
    let (te, tp) = watch(&mut o, g, &mut rng)?;
    let (oe, op) = watch(&mut o, other, &mut rng)?;
    let f = sc.expected_hz(clock);
    let peak = |p: &PsdEstimate| p.freqs[p.dominant_bin()];
    let trial = PsdTrial {
        seed,
        expected_hz: f,
        target_set: g,
        other_set: other,
        target_detections: te.len(),
        other_detections: oe.len(),
        target_score: score_peak(&tp, f, sc.tolerance_bins)?,
        other_score: score_peak(&op, f, sc.tolerance_bins)?,
        target_peak_hz: peak(&tp),
        other_peak_hz: peak(&op),
    };
    Ok((trial, tp, op))
}

fn psd_demo(cfg: &ExperimentConfig) -> Result<Outputs> {
    let geom = cfg.geometry()?;
    let (trial, tp, op) = psd_trial(&geom, cfg.noise_rate, cfg.page_offset, cfg.trace_us, cfg.seed)?;
    let csv = |p: &PsdEstimate| -> Result<String> {
        let mut buf = Vec::new();
        p.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Io(e.to_string()))
    };
    Ok(vec![
        ("psd_target.csv".into(), csv(&tp)?),
        ("psd_nontarget.csv".into(), csv(&op)?),
        ("psd_demo.json".into(), to_json(&trial)?),
    ])
}

// ---------------------------------------------------------------------- scan

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanTrial {
    pub replica: usize,
    pub seed: u64,
    pub scope: Scope,
    pub victim_set: usize,
    pub sets_scanned: usize,
    pub found_set: Option<usize>,
    pub correct: bool,
    pub score: f64,
    pub elapsed_ms: f64,
    pub traces: usize,
    pub passes: usize,
}

/// Scan ground-truth eviction sets for the victim's page offset
/// (`PageOffset`) or for every offset (`WholeSys`), in a seeded random
/// order, while the victim signs in the background.
pub fn scan_replica(geom: &CacheGeometry, cfg: &ExperimentConfig, scope: Scope, seed: u64) -> Result<ScanTrial> {
    let mut m = machine(geom, cfg.policies(Command::Scan), cfg.noise_rate, seed)?;
    let layout = CodeLayout::allocate(&mut m, cfg.page_offset)?;
    let g = layout.monitored_set(&mut m);
    let offsets: Vec<u64> = match scope {
        Scope::WholeSys => (0..PAGE_SIZE / LINE_SIZE).map(|k| k * LINE_SIZE).collect(),
        _ => vec![cfg.page_offset & !(LINE_SIZE - 1)],
    };
    let mut sets = match scope {
        Scope::SingleSet => vec![(g, congruent_lines(&mut m, ATTACKER_SPACE, cfg.page_offset, g, 12)?)],
        _ => congruent_sets(&mut m, ATTACKER_SPACE, &offsets, 12)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7363_616e);
    sets.shuffle(&mut rng);
    let victim = LadderVictim::new(layout, random_nonce(&mut rng, NONCE_BITS));
    let mut o = SimOracle::new(m, LatencyModel::default())?;
    let sc = ScanConfig { timeout_ms: cfg.timeout_ms, ..ScanConfig::default() };
    let now = o.machine.now();
    let until = now + (cfg.timeout_ms * o.machine.cycles_per_ms()) as u64 + 1;
    run_background(&mut o.machine, &victim, now, until, seed ^ 0x6267)?;
    let evsets: Vec<Vec<VirtAddr>> = sets.iter().map(|s| s.1.clone()).collect();
    let rep = scan(&mut o, &evsets, &sc)?;
    let found = rep.set.map(|i| sets[i].0);
    Ok(ScanTrial {
        replica: 0,
        seed,
        scope,
        victim_set: g,
        sets_scanned: sets.len(),
        found_set: found,
        correct: found == Some(g),
        score: rep.score,
        elapsed_ms: rep.elapsed_ms,
        traces: rep.traces,
        passes: rep.passes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanSummary {
    pub scope: Scope,
    pub noise_rate: f64,
    pub timeout_ms: f64,
    pub runs: usize,
    pub success_rate: f64,
    pub trials: Vec<ScanTrial>,
}

fn scan_experiment(cfg: &ExperimentConfig) -> Result<Outputs> {
    let geom = cfg.geometry()?;
    let mut trials = Vec::new();
    for r in 0..cfg.replicas {
        let mut t = scan_replica(&geom, cfg, cfg.scope, replica_seed(cfg.seed, r))?;
        t.replica = r;
        trials.push(t);
    }
    let ok = trials.iter().filter(|t| t.correct).count();
    let summary = ScanSummary {
        scope: cfg.scope,
        noise_rate: cfg.noise_rate,
        timeout_ms: cfg.timeout_ms,
        runs: trials.len(),
        success_rate: ok as f64 / trials.len() as f64,
        trials,
    };
    Ok(vec![("scan.json".into(), to_json(&summary)?)])
}

// ---------------------------------------------------------------- end-to-end

pub fn attack_config(geom: &CacheGeometry, cfg: &ExperimentConfig, seed: u64) -> AttackConfig {
    let mut a = AttackConfig::new(geom.clone(), seed);
    a.policies = cfg.policies(Command::EndToEnd);
    a.noise_rate = cfg.noise_rate;
    a.algorithm = cfg.algorithm.unwrap_or(Algorithm::BinS);
    a.scope = cfg.scope;
    a.filter = cfg.filter;
    a.page_offset = cfg.page_offset;
    a.traces = cfg.traces;
    a.scan.timeout_ms = cfg.timeout_ms;
    a
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndToEndSummary {
    pub noise_rate: f64,
    pub runs: usize,
    pub successes: usize,
    pub median_fraction: f64,
    pub bit_error_rate: f64,
    pub reports: Vec<AttackReport>,
}

fn end_to_end_experiment(cfg: &ExperimentConfig) -> Result<Outputs> {
    let geom = cfg.geometry()?;
    let mut reports = Vec::new();
    for r in 0..cfg.replicas {
        reports.push(end_to_end(&attack_config(&geom, cfg, replica_seed(cfg.seed, r)))?);
    }
    let fractions: Vec<f64> = reports.iter().map(|r| r.median_fraction).collect();
    let bers: Vec<f64> = reports.iter().map(|r| r.bit_error_rate).collect();
    let summary = EndToEndSummary {
        noise_rate: cfg.noise_rate,
        runs: reports.len(),
        successes: reports.iter().filter(|r| r.success).count(),
        median_fraction: median(&fractions),
        bit_error_rate: median(&bers),
        reports,
    };
    Ok(vec![("end_to_end.json".into(), to_json(&summary)?)])
}
