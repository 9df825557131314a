//! Cache geometry: per-level way/set counts, index bit fields and the slice hash.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    L1,
    L2,
    Llc,
    Sf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelGeometry {
    pub ways: usize,
    pub sets: usize,
}

impl LevelGeometry {
    pub const fn new(ways: usize, sets: usize) -> Self {
        LevelGeometry { ways, sets }
    }

    fn index_bits(&self) -> u32 {
        self.sets.trailing_zeros()
    }
}

/// Geometry of the simulated machine. LLC and SF share set count, slice count
/// and slice hash; L1/L2 are per core.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheGeometry {
    pub name: String,
    pub line_bits: u32,
    pub page_bits: u32,
    pub phys_bits: u32,
    pub l1: LevelGeometry,
    pub l2: LevelGeometry,
    pub llc: LevelGeometry,
    pub sf: LevelGeometry,
    pub n_slices: usize,
    /// Width of the XOR fold feeding the slice reduction.
    pub slice_fold_width: u32,
}

/// Fold width used when none is given: exact for power-of-two slice counts,
/// eight spare bits otherwise so the modular reduction stays near-uniform.
pub fn default_fold_width(n_slices: usize) -> u32 {
    let k = ceil_log2(n_slices);
    if n_slices.is_power_of_two() {
        k
    } else {
        k + 8
    }
}

fn ceil_log2(n: usize) -> u32 {
    if n <= 1 {
        0
    } else {
        usize::BITS - (n - 1).leading_zeros()
    }
}

impl CacheGeometry {
    fn skylake_like(name: &str, n_slices: usize) -> Self {
        CacheGeometry {
            name: name.to_string(),
            line_bits: 6,
            page_bits: 12,
            phys_bits: 46,
            l1: LevelGeometry::new(8, 64),
            l2: LevelGeometry::new(16, 1024),
            llc: LevelGeometry::new(11, 2048),
            sf: LevelGeometry::new(12, 2048),
            n_slices,
            slice_fold_width: default_fold_width(n_slices),
        }
    }

    pub fn skylake_sp_28() -> Self {
        Self::skylake_like("skylake-sp-28", 28)
    }

    /// Local Xeon Gold 6152 part.
    pub fn skylake_sp_22() -> Self {
        Self::skylake_like("skylake-sp-22", 22)
    }

    pub fn icelake_sp_26() -> Self {
        CacheGeometry {
            name: "icelake-sp-26".to_string(),
            l2: LevelGeometry::new(20, 1024),
            llc: LevelGeometry::new(12, 2048),
            sf: LevelGeometry::new(16, 2048),
            ..Self::skylake_like("icelake-sp-26", 26)
        }
    }

    /// Skylake-SP private caches and slice layout with a different slice count.
    /// Handy for keeping statistical experiments cheap.
    pub fn skylake_with_slices(n_slices: usize) -> Self {
        Self::skylake_like(&format!("skylake-{n_slices}"), n_slices)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "skylake-sp-28" => Ok(Self::skylake_sp_28()),
            "skylake-sp-22" => Ok(Self::skylake_sp_22()),
            "icelake-sp-26" => Ok(Self::icelake_sp_26()),
            other => Err(Error::Config(format!("unknown geometry preset `{other}`"))),
        }
    }

    pub fn level(&self, level: Level) -> &LevelGeometry {
        match level {
            Level::L1 => &self.l1,
            Level::L2 => &self.l2,
            Level::Llc => &self.llc,
            Level::Sf => &self.sf,
        }
    }

    pub fn ways(&self, level: Level) -> usize {
        self.level(level).ways
    }

    /// Inclusive (low, high) physical-address bit range of the set index.
    pub fn index_range(&self, level: Level) -> (u32, u32) {
        let bits = self.level(level).index_bits();
        let lo = self.line_bits;
        (lo, lo + bits.max(1) - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.phys_bits == 0 || self.phys_bits > 64 {
            return bad(format!("physical address width {} out of range", self.phys_bits));
        }
        if self.line_bits >= self.page_bits {
            return bad("line must be smaller than a page".into());
        }
        for (lvl, g) in [
            (Level::L1, self.l1),
            (Level::L2, self.l2),
            (Level::Llc, self.llc),
            (Level::Sf, self.sf),
        ] {
            if g.ways == 0 || g.ways > 32 {
                return bad(format!("{lvl:?}: ways must be in 1..=32, got {}", g.ways));
            }
            if g.sets == 0 || !g.sets.is_power_of_two() {
                return bad(format!("{lvl:?}: set count must be a power of two, got {}", g.sets));
            }
            let top = self.line_bits as u64 + g.index_bits() as u64;
            if top > 64 || top > self.phys_bits as u64 {
                return bad(format!("{lvl:?}: index range exceeds the address width"));
            }
        }
        if self.sf.sets != self.llc.sets {
            return bad("SF and LLC slices must have the same number of sets".into());
        }
        if self.n_slices == 0 {
            return bad("need at least one slice".into());
        }
        if self.slice_fold_width == 0 && self.n_slices > 1 || self.slice_fold_width > 32 {
            return bad(format!("slice fold width {} invalid", self.slice_fold_width));
        }
        if self.n_slices > 1 && (1usize << self.slice_fold_width) < self.n_slices {
            return bad("slice fold width too narrow for the slice count".into());
        }
        Ok(())
    }

    /// Whether every L2 index bit is also an LLC index bit, which is what
    /// makes L2-driven candidate filtering sound.
    pub fn l2_index_within_llc(&self) -> bool {
        let (l2lo, l2hi) = self.index_range(Level::L2);
        let (llo, lhi) = self.index_range(Level::Llc);
        l2lo >= llo && l2hi <= lhi
    }

    #[inline]
    pub fn line_of(&self, pa: u64) -> u64 {
        pa >> self.line_bits
    }

    #[inline]
    pub fn set_of(&self, pa: u64, level: Level) -> usize {
        let g = self.level(level);
        ((pa >> self.line_bits) as usize) & (g.sets - 1)
    }

    #[inline]
    pub fn slice_of(&self, pa: u64) -> usize {
        if self.n_slices == 1 {
            return 0;
        }
        let w = self.slice_fold_width;
        let usable = self.phys_bits - self.line_bits;
        let mut bits = (pa >> self.line_bits) & mask(usable);
        let m = mask(w);
        let mut v = 0u64;
        while bits != 0 {
            v ^= bits & m;
            bits >>= w;
        }
        (v % self.n_slices as u64) as usize
    }

    /// Flat (slice, set) index into the LLC or SF.
    #[inline]
    pub fn llc_global_set(&self, pa: u64) -> usize {
        self.slice_of(pa) * self.llc.sets + self.set_of(pa, Level::Llc)
    }

    pub fn llc_total_sets(&self) -> usize {
        self.n_slices * self.llc.sets
    }

    pub fn congruent(&self, a: u64, b: u64, level: Level) -> bool {
        match level {
            Level::L1 | Level::L2 => self.set_of(a, level) == self.set_of(b, level),
            Level::Llc | Level::Sf => self.llc_global_set(a) == self.llc_global_set(b),
        }
    }
}

#[inline]
fn mask(bits: u32) -> u64 {
    if bits >= 64 {
        u64::MAX
    } else {
        (1u64 << bits) - 1
    }
}
