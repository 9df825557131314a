//! Acceptance checks, one PASS/FAIL line each.
//!
//! Runs every criterion by default; pass criterion numbers to run a subset,
//! e.g. `cargo test -p llcprobe-core --test acceptance -- 3 5`.

use std::collections::HashSet;
use std::time::Instant;

use llcprobe_core::address::default_candidate_count;
use llcprobe_core::cache::ATTACKER_SPACE;
use llcprobe_core::experiment::{
    attack_config, covert_replica, prune_machine, psd_trial, run, scan_replica, Command, ExperimentConfig,
};
use llcprobe_core::probing::StrategyKind;
use llcprobe_core::pruning::{build_bulk, l2_filter, prune, Algorithm, BulkConfig, Scope};
use llcprobe_core::victim::attack::{end_to_end, median};
use llcprobe_core::victim::NONCE_BITS;
use llcprobe_core::*;
use statrs::distribution::{DiscreteCDF, Hypergeometric};

const CLOUD: f64 = 11.5;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn sp28() -> CacheGeometry {
    CacheGeometry::skylake_sp_28()
}

fn small() -> CacheGeometry {
    CacheGeometry::skylake_with_slices(2)
}

/// One-sided Fisher exact test: p of seeing `a`/`n1` or more successes in
/// group 1 if both groups shared one success rate.
fn fisher_greater(a: u64, n1: u64, b: u64, n2: u64) -> f64 {
    if a == 0 {
        return 1.0;
    }
    let h = Hypergeometric::new(n1 + n2, a + b, n1).unwrap();
    h.sf(a - 1)
}

/// Probability that a random positive outscores a random negative.
fn auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut s = 0.0;
    for p in pos {
        for n in neg {
            s += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    s / (pos.len() * neg.len()) as f64
}

fn c1() -> Verdict {
    let t = Instant::now();
    let geom = sp28();
    let mut lines = Vec::new();
    let mut pass = true;
    for alg in Algorithm::REPORTED {
        let (mut runs, mut good) = (0, 0);
        for m in 0..5 {
            for r in prune_machine(&geom, Policies::default(), alg, 0.0, true, 0x2c0, 1000 + m, 200).unwrap() {
                runs += 1;
                good += (r.success && r.congruent && r.set_size == geom.ways(Level::Sf)) as usize;
            }
        }
        pass &= runs >= 1000 && good == runs;
        lines.push(format!("{alg} {good}/{runs}"));
    }
    let secs = t.elapsed().as_secs_f64();
    pass &= secs < 300.0;
    verdict(pass, format!("{}, {secs:.0} s", lines.join(", ")))
}

fn c2() -> Verdict {
    let ratio = |ways: usize| {
        let mut g = sp28();
        g.sf.ways = ways;
        let n = default_candidate_count(&g, Level::Sf, 3).unwrap();
        let (mut gt, mut bs) = (0u64, 0u64);
        for seed in 0..200 {
            for (alg, acc) in [(Algorithm::Gt, &mut gt), (Algorithm::BinS, &mut bs)] {
                let mut o = IdealOracle::new(g.clone(), LatencyModel::default(), seed).unwrap();
                let c = gen_candidates(o.space(), 0, n + 1).unwrap();
                let (set, stats) = prune(&mut o, alg, c.addrs[0], &c.addrs[1..], Level::Sf, &alg.config(false));
                assert!(set.is_some(), "{alg} failed without noise");
                *acc += stats.accesses;
            }
        }
        gt as f64 / bs as f64
    };
    let (r12, r16) = (ratio(12), ratio(16));
    verdict(r16 > r12, format!("Gt/BinS accesses {r12:.2} at 12 ways, {r16:.2} at 16 ways, 200 replicas"))
}

fn c3() -> Verdict {
    let geom = sp28();
    let n = default_candidate_count(&geom, Level::Sf, 3).unwrap();
    let expected = n as f64 / 16.0;
    let (mut worst, mut lost, mut outside) = (0.0f64, 0usize, 0usize);
    for seed in 0..500 {
        let mut o = SimOracle::new(Machine::new(MachineConfig::new(geom.clone(), seed)).unwrap(), LatencyModel::default()).unwrap();
        let all = gen_candidates(o.machine.space(ATTACKER_SPACE), 0x2c0, n + 1).unwrap();
        let target = all.addrs[0];
        let rest = CandidateSet::new(all.addrs[1..].to_vec(), 0x2c0, false);
        let (f, _) = l2_filter(&mut o, target, &rest).unwrap();
        let dev = (f.len() as f64 - expected).abs() / expected;
        worst = worst.max(dev);
        outside += (dev > 0.10) as usize;
        let kept: HashSet<_> = f.addrs.iter().collect();
        lost += rest.addrs.iter().filter(|a| !kept.contains(a) && o.machine.congruent(**a, target, Level::Sf)).count();
    }
    verdict(
        outside == 0 && lost == 0,
        format!("500 runs, worst size deviation {:.1}% of N/16={expected:.0}, {lost} congruent lost", 100.0 * worst),
    )
}

fn c4() -> Verdict {
    let geom = sp28();
    let reps = 500u64;
    let rate = |alg: Algorithm, filter: bool| -> u64 {
        (0..reps)
            .map(|s| prune_machine(&geom, Policies::default(), alg, CLOUD, filter, 0x2c0, s, 1).unwrap()[0].clone())
            .filter(|r| r.success && r.congruent)
            .count() as u64
    };
    let bins_f = rate(Algorithm::BinS, true);
    let gtop_f = rate(Algorithm::GtOp, true);
    let gt = rate(Algorithm::Gt, false);
    let ps = rate(Algorithm::Ps, false);
    let p_ge = fisher_greater(gtop_f, reps, bins_f, reps);
    let p1 = fisher_greater(gtop_f, reps, gt, reps);
    let p2 = fisher_greater(gt, reps, ps, reps);
    verdict(
        p_ge >= 0.01 && p1 < 0.01 && p2 < 0.01,
        format!(
            "successes/{reps}: BinS+f {bins_f}, GtOp+f {gtop_f}, Gt {gt}, Ps {ps}; p(GtOp+f>BinS+f)={p_ge:.3}, p(GtOp+f>Gt)={p1:.2e}, p(Gt>Ps)={p2:.2e}"
        ),
    )
}

fn c5() -> Verdict {
    let geom = sp28();
    let mut o = IdealOracle::new(geom.clone(), LatencyModel::default(), 5).unwrap();
    let po = build_bulk(&mut o, &BulkConfig::new(Scope::PageOffset, Algorithm::BinS, true)).unwrap();
    let mut o = IdealOracle::new(geom, LatencyModel::default(), 5).unwrap();
    let ws = build_bulk(&mut o, &BulkConfig::new(Scope::WholeSys, Algorithm::BinS, true)).unwrap();
    verdict(
        po.attempted == 896 && ws.attempted == 57344 && ws.filter_constructions == 16,
        format!(
            "PageOffset {} targets, WholeSys {} targets with {} L2 filter constructions",
            po.attempted, ws.attempted, ws.filter_constructions
        ),
    )
}

fn c6() -> Verdict {
    let geom = sp28();
    let cfg = ExperimentConfig { noise_rate: CLOUD, accesses: 2000, ..Default::default() };
    let pol = cfg.policies(Command::CovertSweep);
    let n = 50 * cfg.accesses as u64;
    // detections over all replicas
    let hits = |kind: StrategyKind, interval: u64| -> u64 {
        (0..50)
            .map(|s| (covert_replica(&geom, pol, kind, interval, &cfg, s).unwrap() * cfg.accesses as f64).round() as u64)
            .sum()
    };
    let pp = hits(StrategyKind::ParallelProbe, 2000);
    let pf = hits(StrategyKind::PsFlush, 2000);
    let pa = hits(StrategyKind::PsAlt, 2000);
    let pp_long = hits(StrategyKind::ParallelProbe, 100_000);
    let p1 = fisher_greater(pp, n, pf, n);
    let p2 = fisher_greater(pf, n, pa, n);
    let p_ge = fisher_greater(pp, n, pp_long, n);
    let r = |h: u64| h as f64 / n as f64;
    verdict(
        p1 < 0.01 && p2 < 0.01 && p_ge >= 0.01,
        format!(
            "interval 2000: ParallelProbe {:.4}, PsFlush {:.4}, PsAlt {:.4}; ParallelProbe at 100000: {:.4}, p(2000>100000)={p_ge:.3}",
            r(pp),
            r(pf),
            r(pa),
            r(pp_long)
        ),
    )
}

fn c7() -> Verdict {
    let geom = sp28();
    let trials = |rate: f64| -> Vec<_> { (0..100).map(|s| psd_trial(&geom, rate, 0x2c0, 1000.0, s).unwrap().0).collect() };
    let quiet = trials(0.0);
    let (_, tp, _) = psd_trial(&geom, 0.0, 0x2c0, 1000.0, 0).unwrap();
    let want = tp.bin_of(0.41e6);
    let off_peak = quiet.iter().filter(|t| tp.bin_of(t.target_peak_hz).abs_diff(want) > 1).count();
    let min_t = quiet.iter().map(|t| t.target_score).fold(f64::INFINITY, f64::min);
    let max_o = quiet.iter().map(|t| t.other_score).fold(0.0, f64::max);
    let noisy = trials(CLOUD);
    let pos: Vec<f64> = noisy.iter().map(|t| t.target_score).collect();
    let neg: Vec<f64> = noisy.iter().map(|t| t.other_score).collect();
    let a = auc(&pos, &neg);
    verdict(
        off_peak == 0 && min_t > max_o && a >= 0.9,
        format!(
            "{off_peak}/100 peaks off 0.41 MHz by more than one bin; noiseless target min {min_t:.1} vs non-target max {max_o:.1}; AUC at {CLOUD}/ms {a:.3}"
        ),
    )
}

fn c8() -> Verdict {
    let geom = small();
    let cfg = |rate: f64| ExperimentConfig { noise_rate: rate, timeout_ms: 1000.0, ..Default::default() };
    let success = |c: &ExperimentConfig, scope: Scope| {
        (0..50).filter(|&s| scan_replica(&geom, c, scope, s).unwrap().correct).count() as f64 / 50.0
    };
    let quiet = success(&cfg(0.0), Scope::PageOffset);
    let noisy = success(&cfg(CLOUD), Scope::PageOffset);
    let whole = success(&cfg(CLOUD), Scope::WholeSys);
    verdict(
        quiet >= 0.95 && noisy > 0.5 && whole <= noisy,
        format!("PageOffset {quiet:.2} noiseless, {noisy:.2} at {CLOUD}/ms; WholeSys {whole:.2} at {CLOUD}/ms; 50 runs, 1000 ms timeout"),
    )
}

fn c9() -> Verdict {
    let geom = small();
    let mut medians = Vec::new();
    let mut pass = true;
    let mut notes = Vec::new();
    for rate in [0.0, 3.0, CLOUD, 30.0] {
        let cfg = ExperimentConfig { noise_rate: rate, ..Default::default() };
        let reports: Vec<_> = (0..50).map(|s| end_to_end(&attack_config(&geom, &cfg, s)).unwrap()).collect();
        let m = median(&reports.iter().map(|r| r.median_fraction).collect::<Vec<_>>());
        let ber = median(&reports.iter().map(|r| r.bit_error_rate).collect::<Vec<_>>());
        if rate == 0.0 {
            let perfect = reports
                .iter()
                .filter(|r| !r.traces.is_empty() && r.traces.iter().all(|t| t.recovered == NONCE_BITS && t.errors == 0))
                .count();
            pass &= perfect == 50;
            notes.push(format!("noiseless {perfect}/50 runs with {NONCE_BITS} bits and 0 errors"));
        }
        if rate == CLOUD {
            pass &= m >= 0.5 && ber <= 0.05;
            notes.push(format!("{CLOUD}/ms median fraction {m:.3}, BER {ber:.4}"));
        }
        medians.push(m);
    }
    let monotone = medians.windows(2).all(|w| w[1] <= w[0]);
    pass &= monotone;
    notes.push(format!("fractions over 0/3/11.5/30 per ms {medians:.3?}"));
    verdict(pass, notes.join("; "))
}

fn c10() -> Verdict {
    let cfg = ExperimentConfig {
        geometry: "skylake-2".into(),
        noise_rate: 3.0,
        replicas: 2,
        targets: 3,
        intervals: vec![2000, 20_000],
        accesses: 300,
        traces: 2,
        timeout_ms: 200.0,
        seed: 42,
        ..Default::default()
    };
    let mut differing = Vec::new();
    for cmd in Command::ALL {
        if run(cmd, &cfg).unwrap() != run(cmd, &cfg).unwrap() {
            differing.push(cmd.as_str());
        }
    }
    verdict(differing.is_empty(), format!("all six commands twice with seed 42; differing: {differing:?}"))
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, fn() -> Verdict); 10] =
        [(1, c1), (2, c2), (3, c3), (4, c4), (5, c5), (6, c6), (7, c7), (8, c8), (9, c9), (10, c10)];
    let mut failed = 0;
    for (k, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&k) {
            continue;
        }
        let t = Instant::now();
        let v = f();
        failed += !v.pass as usize;
        println!(
            "criterion {k}: {} ({}; {:.0} s)",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            t.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        eprintln!("{failed} criteria failed");
        std::process::exit(1);
    }
}
