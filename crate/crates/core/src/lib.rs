//! Simulation library for Mixture-of-Experts decode inference on multi-GPU
//! systems whose HBM stacks carry processing-in-memory (PIM) units.
//!
//! The library models one serving iteration as a per-layer dependency graph
//! over routing, inter-GPU communication, GPU expert execution, and PIM expert
//! execution, and provides four expert-placement policies behind a common
//! scheduler interface:
//!
//! * `sieve`  — greedy dynamic partitioning that balances interconnect, GPU,
//!   and PIM time using a runtime cost table,
//! * `noexp`  — attention on PIM, every expert on the GPU,
//! * `allexp` — every expert on PIM,
//! * `pimoe`  — static threshold balancing with expert-parallel PIM channels.
//!
//! Modules follow the pipeline: [`config`] loads hardware/model descriptors,
//! [`workload`] produces token-to-expert distributions, [`timing`] estimates
//! component times, [`sched`] picks partitions, [`engine`] simulates the
//! dependency graph, and [`metrics`] turns runs into report files.

pub mod config;
pub mod engine;
pub mod metrics;
pub mod sched;
pub mod timing;
pub mod workload;

pub use config::{DramTiming, HardwareConfig, KvConfig, ModelConfig};
pub use engine::{RunResult, SimOptions, WorkloadSpec};
pub use metrics::{ChannelUtilization, ParetoPoint};
pub use sched::{Partition, PolicyKind};
pub use timing::{GemvShape, PimCostTable, TimingEstimate};
pub use workload::{ExpertBinSummary, ExpertDistribution, RoutingRecord};
