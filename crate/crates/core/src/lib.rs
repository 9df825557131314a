//! LLC Prime+Probe laboratory.
//!
//! A seeded simulator of a non-inclusive cache hierarchy (private L1/L2,
//! sliced LLC, sliced snoop filter) together with the attacker side:
//! eviction-set construction, Prime+Probe monitoring, spectral identification
//! of a victim's target set and nonce-bit extraction.

pub mod address;
pub mod cache;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod noise;
pub mod probing;
pub mod pruning;
pub mod spectral;
pub mod timing;
pub mod victim;

pub use address::{gen_candidates, uncertainty, AddressSpace, CandidateSet, PhysAddr, Uncertainty, VirtAddr};
pub use cache::{AccessKind, Hit, Machine, MachineConfig, Policies, Policy};
pub use error::{Error, Result};
pub use geometry::{CacheGeometry, Level};
pub use noise::{inter_access_cdf, EmpiricalCdf, NoiseModel, NoiseScope};
pub use probing::{covert_run, monitor, probe, prime, CovertReport, DetectionEvent, MonitorStrategy, StrategyKind};
pub use pruning::{
    build_bulk, estimate_bulk_time, prune, Algorithm, BulkConfig, BulkReport, EvictionSet, PruneConfig, PruneStats, Scope,
};
pub use timing::{EvictionOracle, IdealOracle, LatencyModel, SimOracle, TestStyle, TimedClass, TimedResult};
