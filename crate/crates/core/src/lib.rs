//! Trace-driven memory order buffer simulator comparing three dependence
//! prediction schemes:
//!
//! * `m1`: forwarding decided purely on virtual addresses;
//! * `m2`: fixed 8-bit partial physical-address speculation;
//! * `m3`: randomized 12-bit masked comparison with remasking on
//!   misspeculation and per-store PC tagging.
//!
//! The crate also generates attack and benign traces, replays the fixed-mask
//! model with an independent reference, and summarizes leakage metrics.

pub mod address;
pub mod cli;
pub mod harness;
pub mod metrics;
pub mod mob;
pub mod oracle;
pub mod trace;

pub use address::{AddressSpace, BitMask, BitPool, PhysAddr, VirtAddr};
pub use mob::{run_trace, Model, SimConfig, SimStats};
pub use trace::{Trace, TraceOp};
