use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use llcprobe_core::address::default_candidate_count;
use llcprobe_core::cache::ATTACKER_SPACE;
use llcprobe_core::pruning::{l2_filter, prune, Algorithm};
use llcprobe_core::spectral::welch_psd;
use llcprobe_core::victim::{extract_nonce, ExtractConfig};
use llcprobe_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ideal_prune(c: &mut Criterion) {
    let geom = CacheGeometry::skylake_with_slices(4);
    let n = default_candidate_count(&geom, Level::Llc, 3).unwrap();
    let mut g = c.benchmark_group("ideal_prune_llc");
    for alg in Algorithm::REPORTED {
        g.bench_function(BenchmarkId::from_parameter(alg), |b| {
            b.iter_batched(
                || {
                    let mut o = IdealOracle::new(geom.clone(), LatencyModel::default(), 1).unwrap();
                    let cands = gen_candidates(o.space(), 0, n + 1).unwrap();
                    (o, cands)
                },
                |(mut o, cands)| prune(&mut o, alg, cands.addrs[0], &cands.addrs[1..], Level::Llc, &alg.config(false)).0,
                BatchSize::LargeInput,
            )
        });
    }
    g.finish();
}

fn sim_test_eviction(c: &mut Criterion) {
    let geom = CacheGeometry::skylake_with_slices(2);
    let mut o = SimOracle::new(Machine::new(MachineConfig::new(geom.clone(), 1)).unwrap(), LatencyModel::default()).unwrap();
    let n = default_candidate_count(&geom, Level::Sf, 3).unwrap();
    let cands = gen_candidates(o.machine.space(ATTACKER_SPACE), 0, n + 1).unwrap();
    c.bench_function("sim_test_eviction_3uw", |b| {
        b.iter(|| o.test_eviction(cands.addrs[0], black_box(&cands.addrs[1..]), Level::Llc, TestStyle::Parallel))
    });
    let rest = CandidateSet::new(cands.addrs[1..].to_vec(), 0, false);
    c.bench_function("sim_l2_filter_3uw", |b| b.iter(|| l2_filter(&mut o, cands.addrs[0], black_box(&rest)).unwrap().0.len()));
}

fn spectral(c: &mut Criterion) {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<f64> = (0..4000).map(|_| r.random_range(0..2) as f64).collect();
    c.bench_function("welch_psd_4000", |b| b.iter(|| welch_psd(black_box(&x), 4e6, 256, 0.5).unwrap()));

    let mut t = 0u64;
    let mut ev = Vec::new();
    for _ in 0..571 {
        ev.push(t);
        if r.random::<bool>() {
            ev.push(t + 4850);
        }
        t += 9700 + r.random_range(0..200);
    }
    c.bench_function("extract_nonce_571", |b| b.iter(|| extract_nonce(black_box(&ev), Some(0), &ExtractConfig::default()).unwrap().recovered));
}

criterion_group!(benches, ideal_prune, sim_test_eviction, spectral);
criterion_main!(benches);
