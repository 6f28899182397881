//! Reference replay of the fixed-mask model, stepped one cycle at a time.
//!
//! This is a second, deliberately naive implementation of the M2 pipeline
//! rules used to cross-check the simulator's violation counter. It keeps its
//! own store queue and never calls into `mob`.

use std::collections::VecDeque;

use thiserror::Error;

use crate::address::{AddressError, AddressSpace};
use crate::mob::{Model, SimConfig};
use crate::trace::{OpKind, Trace};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("the violation oracle only models the fixed-mask configuration (m2), got {0}")]
    NotFixedMask(Model),
    #[error(transparent)]
    Address(#[from] AddressError),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OracleReport {
    pub violations: u64,
    pub total_cycles: u64,
    pub load_latencies: Vec<u64>,
}

struct QueuedStore {
    va: u64,
    pa: u64,
    ready: u64,
    leave: u64,
}

enum Phase {
    Check,
    Hold { until: u64 },
}

pub fn oracle_replay(trace: &Trace, space: &AddressSpace, config: &SimConfig) -> Result<OracleReport, OracleError> {
    if config.model != Model::M2 {
        return Err(OracleError::NotFixedMask(config.model));
    }
    let mut space = space.clone();
    let select: u64 = ((1u64 << config.mask_width) - 1) << config.pool.lo;
    let lat = config.latencies;

    let mut clock = 0u64;
    let mut queue: VecDeque<QueuedStore> = VecDeque::new();
    let mut prev_leave: Option<u64> = None;
    let mut last_load_done = 0u64;
    let mut report = OracleReport::default();

    for op in &trace.ops {
        let va = op.va.value();
        let pa = space.translate(op.va)?.value();
        match op.kind {
            OpKind::Store => {
                loop {
                    queue.retain(|s| s.leave > clock);
                    if queue.len() < config.sab_capacity {
                        break;
                    }
                    clock += 1;
                }
                let ready = clock + config.store_resolve_delay;
                let mut leave = ready + config.drain_delay;
                leave = leave.max(last_load_done);
                if let Some(p) = prev_leave {
                    leave = leave.max(p + 1);
                }
                prev_leave = Some(leave);
                queue.push_back(QueuedStore { va, pa, ready, leave });
                clock += 1;
            }
            OpKind::Load => {
                let start = clock;
                let mut phase = Phase::Check;
                let mut replays = 0u32;
                let done = 'cycle: loop {
                    queue.retain(|s| s.leave > clock);
                    loop {
                        match phase {
                            Phase::Hold { until } if clock < until => break,
                            Phase::Hold { .. } => phase = Phase::Check,
                            Phase::Check => {
                                if queue.iter().any(|s| s.va == va) {
                                    break 'cycle clock + lat.forward;
                                }
                                let Some(s) = queue.iter().rev().find(|s| s.va & 0xfff == va & 0xfff) else {
                                    break 'cycle clock + lat.base_load;
                                };
                                if clock < s.ready {
                                    phase = Phase::Hold { until: s.ready + lat.alias4k_stall };
                                    break;
                                }
                                if (s.pa ^ pa) & select != 0 {
                                    break 'cycle clock + lat.base_load;
                                }
                                if s.pa == pa {
                                    break 'cycle clock + lat.forward;
                                }
                                report.violations += 1;
                                replays += 1;
                                if replays >= config.max_reissues {
                                    break 'cycle clock + lat.squash_penalty + lat.alias4k_stall + lat.base_load;
                                }
                                phase = Phase::Hold { until: clock + lat.squash_penalty };
                                break;
                            }
                        }
                    }
                    clock += 1;
                };
                report.load_latencies.push(done - start);
                clock = done;
                last_load_done = done;
            }
        }
    }
    report.total_cycles = clock;
    Ok(report)
}

/// Independent count of M2 misspeculation events for `trace`.
pub fn expected_violations_oracle(trace: &Trace, space: &AddressSpace, config: &SimConfig) -> Result<u64, OracleError> {
    oracle_replay(trace, space, config).map(|r| r.violations)
}
