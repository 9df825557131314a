use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cache::{Machine, MachineConfig, ATTACKER_SPACE};
use crate::geometry::CacheGeometry;
use crate::probing::congruent_lines;
use crate::timing::LatencyModel;
use crate::victim::{random_nonce, run_background, CodeLayout, LadderVictim, NONCE_BITS};

/// Direct O(n²) Welch reference.
fn welch_reference(x: &[f64], fs: f64, n: usize, overlap: f64) -> Vec<f64> {
    let step = ((n as f64 * (1.0 - overlap)).round() as usize).max(1);
    let w: Vec<f64> = (0..n).map(|i| (std::f64::consts::PI * i as f64 / n as f64).sin().powi(2)).collect();
    let u: f64 = w.iter().map(|v| v * v).sum();
    let mut p = vec![0.0; n / 2 + 1];
    let mut segs = 0;
    let mut s = 0;
    while s + n <= x.len() {
        let mean = x[s..s + n].iter().sum::<f64>() / n as f64;
        for (k, pk) in p.iter_mut().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for i in 0..n {
                let ang = -2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64;
                let v = (x[s + i] - mean) * w[i];
                re += v * ang.cos();
                im += v * ang.sin();
            }
            let one_sided = if k == 0 || 2 * k == n { 1.0 } else { 2.0 };
            *pk += one_sided * (re * re + im * im) / (fs * u);
        }
        segs += 1;
        s += step;
    }
    p.iter().map(|v| v / segs as f64).collect()
}

fn noise(seed: u64, n: usize) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| r.random::<f64>() - 0.5).collect()
}

#[test]
fn welch_matches_direct_dft() {
    for (n, ov) in [(64, 0.5), (50, 0.0), (33, 0.25)] {
        let x = noise(n as u64, 300);
        let psd = welch_psd(&x, 1000.0, n, ov).unwrap();
        let r = welch_reference(&x, 1000.0, n, ov);
        assert_eq!(psd.power.len(), r.len());
        for (a, b) in psd.power.iter().zip(&r) {
            assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }
}

#[test]
fn power_integrates_to_variance() {
    let x = noise(1, 1 << 14);
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64;
    let psd = welch_psd(&x, 4e6, 256, 0.5).unwrap();
    let total: f64 = psd.power.iter().sum::<f64>() * psd.bin_width();
    assert!((total / var - 1.0).abs() < 0.05, "{total} vs {var}");
}

#[test]
fn white_noise_is_flat() {
    let psd = welch_psd(&noise(2, 1 << 14), 1.0, 256, 0.5).unwrap();
    let inner = &psd.power[1..psd.power.len() - 1];
    let mean = inner.iter().sum::<f64>() / inner.len() as f64;
    let max = inner.iter().cloned().fold(0.0, f64::max);
    assert!(max / mean < 10.0);
}

#[test]
fn square_wave_has_odd_harmonics() {
    // period 16 samples at fs 256: fundamental on bin 16 of a 256-point segment
    let x: Vec<f64> = (0..4096).map(|i| if i % 16 < 8 { 1.0 } else { 0.0 }).collect();
    let psd = welch_psd(&x, 256.0, 256, 0.5).unwrap();
    assert_eq!(psd.dominant_bin(), 16);
    assert!(psd.power[48] > 100.0 * psd.power[32].max(1e-30));
    assert!(psd.power[48] < psd.power[16]);
}

#[test]
fn access_period_lands_on_its_bin() {
    // one access every 4850 cycles at 2 GHz, each off by up to 500 cycles
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let ts: Vec<u64> = (1..400).map(|k| k * 4850 + r.random_range(0..1000) - 500).collect();
    let dur = 2_000_000;
    let trace = AccessTrace::new(ts.into_iter().filter(|&t| t <= dur).collect(), dur, 0).unwrap();
    let x = binarize(&trace, 500).unwrap();
    let psd = welch_psd(&x, 4e6, 256, 0.5).unwrap();
    let want = psd.bin_of(2e9 / 4850.0);
    assert!(psd.dominant_bin().abs_diff(want) <= 1, "{} vs {want}", psd.dominant_bin());
    assert!((psd.freqs[want] - 0.41e6).abs() <= psd.bin_width());
}

#[test]
fn binarize_cases() {
    let t = AccessTrace::new(vec![0, 499, 500, 1999, 2000], 2000, 0).unwrap();
    assert_eq!(binarize(&t, 500).unwrap(), vec![1.0, 1.0, 0.0, 1.0, 1.0]);
    let empty = AccessTrace::new(vec![], 999, 0).unwrap();
    assert_eq!(binarize(&empty, 500).unwrap(), vec![0.0, 0.0]);
    assert!(binarize(&t, 0).is_err());
    assert!(AccessTrace::new(vec![5, 3], 10, 0).is_err());
    assert!(AccessTrace::new(vec![11], 10, 0).is_err());
    let f = AccessTrace::from_cycles(&[5, 100, 150, 400], 100, 100, 7);
    assert_eq!(f.timestamps, vec![0, 50]);
}

#[test]
fn score_cases() {
    let flat = PsdEstimate { freqs: (0..129).map(|k| k as f64).collect(), power: vec![1.0; 129], sample_rate: 256.0, segment_len: 256, overlap: 0.5 };
    assert_eq!(score_peak(&flat, 20.0, 2).unwrap(), 1.0);
    let mut peaked = flat.clone();
    peaked.power[20] = 50.0;
    assert_eq!(score_peak(&peaked, 21.0, 2).unwrap(), 50.0);
    assert_eq!(score_peak(&peaked, 60.0, 2).unwrap(), 1.0);
    // a harmonic counts too
    assert_eq!(score_peak(&peaked, 10.0, 0).unwrap(), 50.0);
    let zero = PsdEstimate { power: vec![0.0; 129], ..flat.clone() };
    assert_eq!(score_peak(&zero, 20.0, 2).unwrap(), 0.0);
    assert!(score_peak(&flat, 0.0, 2).is_err());
    assert!(score_peak(&flat, 200.0, 2).is_err());
    assert!(welch_psd(&[0.0; 10], 1.0, 256, 0.5).is_err());
    assert!(welch_psd(&[0.0; 300], 1.0, 256, 1.0).is_err());
}

#[test]
fn csv_layout() {
    let p = PsdEstimate { freqs: vec![0.0, 15625.0], power: vec![0.0, 2.5], sample_rate: 31250.0, segment_len: 2, overlap: 0.0 };
    let mut buf = Vec::new();
    p.write_csv(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "frequency_hz,power\n0.000,0.000000e0\n15625.000,2.500000e0\n");
}

struct ScanRig {
    o: SimOracle,
    sets: Vec<Vec<VirtAddr>>,
    target: usize,
    victim: LadderVictim,
}

/// Eight candidate sets at the victim's page offset, one of them the victim's.
fn scan_rig(seed: u64) -> ScanRig {
    let off = 0x2c0;
    let mut m = Machine::new(MachineConfig::new(CacheGeometry::skylake_with_slices(2), seed)).unwrap();
    let layout = CodeLayout::allocate(&mut m, off).unwrap();
    let g = layout.monitored_set(&mut m);
    let total = m.geometry().llc_total_sets();
    let stride = m.geometry().llc.sets.min(1 << (m.geometry().page_bits - 6));
    let mut sets = Vec::new();
    let mut target = 0;
    for k in 0..8 {
        let s = (g + k * 5 * stride) % total;
        if s == g {
            target = k;
        }
        sets.push(congruent_lines(&mut m, ATTACKER_SPACE, off, s, 12).unwrap());
    }
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let victim = LadderVictim::new(layout, random_nonce(&mut r, NONCE_BITS));
    ScanRig { o: SimOracle::new(m, LatencyModel::default()).unwrap(), sets, target, victim }
}

#[test]
fn scan_finds_the_active_victim() {
    let mut r = scan_rig(20);
    let now = r.o.machine.now();
    run_background(&mut r.o.machine, &r.victim, now, now + 2_000_000_000, 1).unwrap();
    let rep = scan(&mut r.o, &r.sets, &ScanConfig::default()).unwrap();
    assert_eq!(rep.set, Some(r.target), "{rep:?}");
    assert!(rep.decision && rep.score > 8.0);
    assert!(rep.elapsed_ms <= 1000.0 + 1.0);
}

#[test]
fn scan_reports_nothing_for_an_idle_victim() {
    let mut r = scan_rig(21);
    let cfg = ScanConfig { timeout_ms: 20.0, ..Default::default() };
    let rep = scan(&mut r.o, &r.sets, &cfg).unwrap();
    assert_eq!(rep.set, None);
    assert!(!rep.decision);
    assert!(rep.passes >= 2);
    assert!(rep.elapsed_ms >= 20.0);
    assert!(scan(&mut r.o, &[], &cfg).is_err());
}
