use super::*;
use crate::address::gen_candidates;
use crate::cache::{MachineConfig, Policies, Policy};

fn oracle(slices: usize, seed: u64) -> SimOracle {
    let cfg = MachineConfig::new(CacheGeometry::skylake_with_slices(slices), seed);
    SimOracle::new(Machine::new(cfg).unwrap(), LatencyModel::default()).unwrap()
}

/// First `k` candidates congruent with `target`, by ground truth.
fn congruent_subset(o: &mut SimOracle, target: VirtAddr, cands: &[VirtAddr], level: Level, k: usize) -> Vec<VirtAddr> {
    cands
        .iter()
        .copied()
        .filter(|&a| o.machine.congruent(a, target, level))
        .take(k)
        .collect()
}

#[test]
fn default_threshold_is_llc_memory_midpoint() {
    let l = LatencyModel::default();
    assert_eq!(l.threshold(Level::Llc), (l.llc + l.memory) / 2);
    assert!(l.threshold(Level::Llc) > l.llc && l.threshold(Level::Llc) < l.memory);
    l.validate().unwrap();
    let bad = LatencyModel { llc: 300, ..l };
    assert!(bad.validate().is_err());
}

#[test]
fn timed_access_classifies() {
    let mut o = oracle(2, 1);
    let c = gen_candidates(o.space(), 0, 4).unwrap();
    let pa = o.machine.translate(ATTACKER_SPACE, c.addrs[0]);
    o.machine.make_shared(pa);
    assert_eq!(o.timed_access(c.addrs[0], Level::Llc).class, TimedClass::CachedFast);
    o.machine.flush(pa);
    assert_eq!(o.timed_access(c.addrs[0], Level::Llc).class, TimedClass::EvictedSlow);
}

#[test]
fn empty_test_does_not_evict() {
    let mut o = oracle(2, 1);
    let c = gen_candidates(o.space(), 0, 4).unwrap();
    assert!(!o.test_eviction_seq(c.addrs[0], &c.addrs[1..], 0));
    assert!(!o.test_eviction_par(c.addrs[0], &c.addrs[1..], 0));
}

#[test]
fn whole_candidate_set_evicts_and_styles_agree() {
    for p in [Policy::Lru, Policy::TreePlru] {
        let mut cfg = MachineConfig::new(CacheGeometry::skylake_with_slices(2), 3);
        cfg.policies = Policies::uniform(p);
        let mut o = SimOracle::new(Machine::new(cfg).unwrap(), LatencyModel::default()).unwrap();
        o.flush_llc_tests = p != Policy::Lru;
        let c = gen_candidates(o.space(), 0x80, 3 * 64 * 12).unwrap();
        let (t, rest) = c.addrs.split_first().unwrap();
        let n_cong = o.debug_congruent_count(*t, rest, Level::Llc).unwrap();
        assert!(n_cong >= 11);
        assert!(o.test_eviction_seq(*t, rest, rest.len()));
        assert!(o.test_eviction_par(*t, rest, rest.len()));
        // exactly W congruent lines, nothing else
        let ev = congruent_subset(&mut o, *t, rest, Level::Llc, 11);
        assert!(o.test_eviction_seq(*t, &ev, 11));
        assert!(o.test_eviction_par(*t, &ev, 11));
        assert!(!o.test_eviction_seq(*t, &ev, 10));
        assert!(!o.test_eviction_par(*t, &ev, 10));
    }
}

#[test]
fn sequential_duration_is_linear_in_n() {
    let mut o = oracle(2, 5);
    let c = gen_candidates(o.space(), 0, 401).unwrap();
    let mut durations = Vec::new();
    for n in [100, 200, 400] {
        let t0 = o.now();
        o.test_eviction_seq(c.addrs[0], &c.addrs[1..], n);
        durations.push(o.now() - t0);
    }
    // slope is the miss latency; the final timed reload may differ by one hit/miss
    let miss = o.lat.memory;
    let slack = o.lat.memory - o.lat.llc;
    assert!((durations[1] - durations[0]).abs_diff(100 * miss) <= slack);
    assert!((durations[2] - durations[1]).abs_diff(200 * miss) <= slack);
}

#[test]
fn parallel_is_about_mlp_times_faster() {
    let mut o = oracle(28, 5);
    let n = 11 * 896;
    let c = gen_candidates(o.space(), 0, n + 1).unwrap();
    let t0 = o.now();
    o.test_eviction_seq(c.addrs[0], &c.addrs[1..], n);
    let seq = o.now() - t0;
    let t1 = o.now();
    o.test_eviction_par(c.addrs[0], &c.addrs[1..], n);
    let par = o.now() - t1;
    let ratio = seq as f64 / par as f64;
    assert!(ratio > 9.0 && ratio <= 10.0, "{ratio}");
    // an order of magnitude
    assert!(seq >= 9 * par);
}

#[test]
fn sf_level_test_detects_back_invalidation() {
    let mut o = oracle(2, 9);
    let c = gen_candidates(o.space(), 0x140, 3 * 64 * 12).unwrap();
    let (t, rest) = c.addrs.split_first().unwrap();
    let ev = congruent_subset(&mut o, *t, rest, Level::Sf, 12);
    assert!(o.test_eviction(*t, &ev, Level::Sf, TestStyle::Parallel));
    assert!(!o.test_eviction(*t, &ev[..11], Level::Sf, TestStyle::Parallel));
}

#[test]
fn scope_scan_finds_wth_congruent_line() {
    let mut o = oracle(2, 9);
    let c = gen_candidates(o.space(), 0x1c0, 3 * 64 * 11).unwrap();
    let (t, rest) = c.addrs.split_first().unwrap();
    let idx = o.scope_scan(*t, rest, Level::Llc).unwrap();
    assert!(o.machine.congruent(rest[idx], *t, Level::Llc));
    assert_eq!(o.debug_congruent_count(*t, &rest[..=idx], Level::Llc), Some(11));
}

#[test]
fn ideal_oracle_agrees_with_simulation_noiselessly() {
    let geom = CacheGeometry::skylake_with_slices(2);
    let mut ideal = IdealOracle::new(geom.clone(), LatencyModel::default(), 77).unwrap();
    let mut sim = SimOracle::new(
        Machine::new(MachineConfig::new(geom, 0)).unwrap(),
        LatencyModel::default(),
    )
    .unwrap();
    // same seed for the attacker space gives the same mapping
    *sim.space() = AddressSpace::new(0, 77);
    let c = gen_candidates(ideal.space(), 0x40, 1500).unwrap();
    let c2 = gen_candidates(sim.space(), 0x40, 1500).unwrap();
    assert_eq!(c, c2);
    let (t, rest) = c.addrs.split_first().unwrap();
    for n in (0..rest.len()).step_by(37) {
        let a = ideal.test_eviction(*t, &rest[..n], Level::Llc, TestStyle::Parallel);
        let b = sim.test_eviction(*t, &rest[..n], Level::Llc, TestStyle::Parallel);
        assert_eq!(a, b, "n={n}");
    }
    assert_eq!(ideal.scope_scan(*t, rest, Level::Llc), sim.scope_scan(*t, rest, Level::Llc));
}
