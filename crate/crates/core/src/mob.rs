//! Memory order buffer model: store address buffer, loosenet/finenet
//! dependence checks, partial-PA speculative forwarding, squash-and-reissue
//! and remasking.
//!
//! Timing model: ops issue in program order, one per cycle. A store occupies
//! one issue cycle and an SAB slot until it drains. A load blocks issue until
//! it completes, so every SAB entry a load sees is older than it.
//!
//! Store lifecycle: the full PA is known `store_resolve_delay` cycles after
//! insertion. Resolved entries drain in program order, at most one per cycle,
//! no earlier than `drain_delay` cycles after resolution.
//!
//! Load latency is `base_load` (or `forward` when supplied by a store), plus
//! any 4K-alias stall time (waiting for a blocking store's PA, then
//! `alias4k_stall`), plus `squash_penalty` per reissue.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::address::{extract_bits, make_mask, AddressError, AddressSpace, BitMask, BitPool, PhysAddr, VirtAddr};
use crate::trace::{OpKind, Trace, TraceError, TraceOp};

#[derive(Debug, Error)]
pub enum MobError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Address(#[from] AddressError),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    /// Forwarding decided on virtual addresses only.
    M1,
    /// Fixed 8-bit partial-PA speculation.
    M2,
    /// Randomized masked partial-PA speculation with remasking and store tagging.
    M3,
}

impl Model {
    pub const ALL: [Model; 3] = [Model::M1, Model::M2, Model::M3];

    pub fn name(self) -> &'static str {
        match self {
            Model::M1 => "m1",
            Model::M2 => "m2",
            Model::M3 => "m3",
        }
    }

    fn speculates(self) -> bool {
        !matches!(self, Model::M1)
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Model {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "m1" => Ok(Model::M1),
            "m2" => Ok(Model::M2),
            "m3" => Ok(Model::M3),
            other => Err(format!("unknown model {other:?} (expected m1, m2 or m3)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Latencies {
    pub base_load: u64,
    pub forward: u64,
    pub alias4k_stall: u64,
    pub squash_penalty: u64,
}

impl Default for Latencies {
    fn default() -> Self {
        Self { base_load: 4, forward: 5, alias4k_stall: 3, squash_penalty: 12 }
    }
}

pub const DEFAULT_SAB_CAPACITY: usize = 56;
pub const DEFAULT_MAX_REISSUES: u32 = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimConfig {
    pub model: Model,
    pub sab_capacity: usize,
    /// Compared bit count: the fixed mask width under M2, the random mask
    /// width under M3. Unused by M1.
    pub mask_width: usize,
    pub pool: BitPool,
    pub latencies: Latencies,
    pub store_resolve_delay: u64,
    pub drain_delay: u64,
    pub max_reissues: u32,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(model: Model, seed: u64) -> Self {
        Self {
            model,
            sab_capacity: DEFAULT_SAB_CAPACITY,
            mask_width: if model == Model::M2 { 8 } else { 12 },
            pool: BitPool::DEFAULT,
            latencies: Latencies::default(),
            store_resolve_delay: 8,
            drain_delay: 32,
            max_reissues: DEFAULT_MAX_REISSUES,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), MobError> {
        let l = &self.latencies;
        if l.base_load == 0 || l.forward == 0 || l.alias4k_stall == 0 || l.squash_penalty == 0 {
            return Err(MobError::Config("all latencies must be positive".into()));
        }
        if self.sab_capacity == 0 {
            return Err(MobError::Config("sab_capacity must be at least 1".into()));
        }
        if self.max_reissues == 0 {
            return Err(MobError::Config("max_reissues must be at least 1".into()));
        }
        if self.mask_width > self.pool.size() {
            return Err(MobError::Config(format!(
                "mask width {} exceeds pool size {}",
                self.mask_width,
                self.pool.size()
            )));
        }
        Ok(())
    }

    /// The fixed M2 mask: `mask_width` contiguous bits from the bottom of the pool.
    fn fixed_mask(&self) -> Result<BitMask, AddressError> {
        let lo = self.pool.lo;
        BitMask::new((0..self.mask_width as u8).map(|i| lo + i), self.pool)
    }
}

/// One store address buffer slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SabEntry {
    pub seq: u64,
    pub store_pc: u64,
    pub va: VirtAddr,
    /// Full physical address. Only meaningful once `resolved` is set; kept for
    /// re-extraction when the mask changes.
    pub pa: PhysAddr,
    pub partial_pa: Option<u32>,
    pub resolved: bool,
    pub pc_tag: Option<u64>,
    pub vuln_flag: bool,
    pub inserted_at: u64,
    pub resolve_at: u64,
    pub drain_at: u64,
}

impl SabEntry {
    pub fn resolved_pa(&self) -> Option<PhysAddr> {
        self.resolved.then_some(self.pa)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoadOp {
    pub seq: u64,
    pub load_pc: u64,
    pub va: VirtAddr,
    pub is_probe: bool,
}

impl From<&TraceOp> for LoadOp {
    fn from(op: &TraceOp) -> Self {
        Self { seq: op.seq, load_pc: op.pc, va: op.va, is_probe: op.is_probe }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StallCause {
    /// Offset alias against a store whose VA differs (M1).
    VirtualAlias,
    /// Offset alias against a store whose PA is not yet known.
    Unresolved,
    /// Partial hit on a store already flagged by a misspeculation (M3).
    Suppressed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardDecision {
    NoDependence,
    TrueForward(u64),
    SpeculativeForward(u64),
    Alias4kStall { seq: u64, cause: StallCause },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Correct,
    Misspeculation,
}

/// Where a completed load finally took its value from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadSource {
    Memory,
    Store(u64),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadRecord {
    pub seq: u64,
    pub page: u64,
    pub pc: u64,
    pub is_probe: bool,
    pub reissues: u32,
    pub latency_cycles: u64,
    pub source: LoadSource,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MisspecEvent {
    pub cycle: u64,
    pub load_seq: u64,
    pub load_pc: u64,
    pub store_seq: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimStats {
    pub total_cycles: u64,
    pub per_load_latency: Vec<LoadRecord>,
    pub spoiler_violations: u64,
    pub attacker_stalls: u64,
    pub misspeculations: u64,
    pub total_loads: u64,
    pub total_stores: u64,
    pub remask_events: u64,
    pub reissue_cap_hits: u64,
    pub sab_full_stalls: u64,
    pub sab_stall_cycles: u64,
    pub misspec_log: Vec<MisspecEvent>,
}

/// Same page offset (VA bits [11:0]).
pub fn loosenet_check(load: &LoadOp, entry: &SabEntry) -> bool {
    load.va.page_offset() == entry.va.page_offset()
}

/// Full virtual address equality; only meaningful after a loosenet hit.
pub fn finenet_check(load: &LoadOp, entry: &SabEntry) -> bool {
    load.va == entry.va
}

/// Dependence prediction for `load` against older SAB entries, given
/// youngest first.
///
/// A full-VA match anywhere supplies the load directly. Otherwise the
/// youngest loosenet-hitting store is the forwarding candidate and decides.
pub fn predict_dependence<'a, I>(load: &LoadOp, load_pa: PhysAddr, older: I, model: Model, mask: &BitMask) -> ForwardDecision
where
    I: IntoIterator<Item = &'a SabEntry>,
{
    let mut candidate: Option<&SabEntry> = None;
    for entry in older {
        debug_assert!(entry.seq < load.seq);
        if !loosenet_check(load, entry) {
            continue;
        }
        if finenet_check(load, entry) {
            return ForwardDecision::TrueForward(entry.seq);
        }
        candidate.get_or_insert(entry);
    }
    let Some(store) = candidate else {
        return ForwardDecision::NoDependence;
    };
    if !model.speculates() {
        return ForwardDecision::Alias4kStall { seq: store.seq, cause: StallCause::VirtualAlias };
    }
    let Some(partial) = store.partial_pa.filter(|_| store.resolved) else {
        return ForwardDecision::Alias4kStall { seq: store.seq, cause: StallCause::Unresolved };
    };
    if partial != extract_bits(load_pa, mask) {
        return ForwardDecision::NoDependence;
    }
    // a flagged entry never forwards speculatively again, whichever PC asks
    if model == Model::M3 && store.vuln_flag {
        return ForwardDecision::Alias4kStall { seq: store.seq, cause: StallCause::Suppressed };
    }
    ForwardDecision::SpeculativeForward(store.seq)
}

/// Checks a forwarding decision once both full PAs are known.
pub fn resolve_and_check(load_pa: PhysAddr, decision: ForwardDecision, store: &SabEntry) -> Outcome {
    match decision {
        ForwardDecision::SpeculativeForward(seq) if seq == store.seq && store.pa != load_pa => Outcome::Misspeculation,
        _ => Outcome::Correct,
    }
}

/// A single simulation instance.
pub struct Mob<'s> {
    config: SimConfig,
    space: &'s mut AddressSpace,
    mask: BitMask,
    rng: ChaCha8Rng,
    sab: VecDeque<SabEntry>,
    now: u64,
    last_drain_at: Option<u64>,
    last_load_done: u64,
    stats: SimStats,
}

impl<'s> Mob<'s> {
    pub fn new(config: SimConfig, space: &'s mut AddressSpace) -> Result<Self, MobError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        // initial mask, set once at startup
        let mask = match config.model {
            Model::M1 => BitMask::empty(),
            Model::M2 => config.fixed_mask()?,
            Model::M3 => make_mask(&mut rng, config.mask_width, config.pool)?,
        };
        Ok(Self {
            config,
            space,
            mask,
            rng,
            sab: VecDeque::new(),
            now: 0,
            last_drain_at: None,
            last_load_done: 0,
            stats: SimStats::default(),
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn active_mask(&self) -> &BitMask {
        &self.mask
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn occupancy(&self) -> usize {
        self.sab.len()
    }

    pub fn entries(&self) -> impl DoubleEndedIterator<Item = &SabEntry> {
        self.sab.iter()
    }

    pub fn entry(&self, seq: u64) -> Option<&SabEntry> {
        self.sab.iter().find(|e| e.seq == seq)
    }

    pub fn stats(&self) -> &SimStats {
        &self.stats
    }

    /// Brings the SAB up to cycle `t`: drains departed entries and resolves
    /// entries whose PA is now known.
    pub fn advance_to(&mut self, t: u64) {
        while self.sab.front().is_some_and(|e| e.drain_at <= t) {
            self.sab.pop_front();
        }
        for entry in self.sab.iter_mut() {
            if !entry.resolved && entry.resolve_at <= t {
                entry.resolved = true;
                entry.partial_pa = Some(extract_bits(entry.pa, &self.mask));
            }
        }
    }

    /// Allocates an SAB slot for a store, stalling issue while the SAB is full.
    pub fn sab_insert(&mut self, store: &TraceOp) -> Result<&SabEntry, MobError> {
        debug_assert_eq!(store.kind, OpKind::Store);
        self.advance_to(self.now);
        if self.sab.len() >= self.config.sab_capacity {
            let free_at = self.sab.front().map(|e| e.drain_at).unwrap_or(self.now);
            self.stats.sab_full_stalls += 1;
            self.stats.sab_stall_cycles += free_at - self.now;
            self.now = free_at;
            self.advance_to(self.now);
        }
        let pa = self.space.translate(store.va)?;
        let resolve_at = self.now + self.config.store_resolve_delay;
        let mut drain_at = (resolve_at + self.config.drain_delay).max(self.last_load_done);
        if let Some(prev) = self.last_drain_at {
            drain_at = drain_at.max(prev + 1);
        }
        self.last_drain_at = Some(drain_at);
        self.sab.push_back(SabEntry {
            seq: store.seq,
            store_pc: store.pc,
            va: store.va,
            pa,
            partial_pa: None,
            resolved: false,
            pc_tag: None,
            vuln_flag: false,
            inserted_at: self.now,
            resolve_at,
            drain_at,
        });
        self.now += 1;
        self.stats.total_stores += 1;
        // entries with zero resolve delay are resolved immediately
        self.advance_to(self.now - 1);
        Ok(self.sab.back().expect("entry just pushed"))
    }

    /// Records a misspeculation of `load` against store `store_seq`. Under M3
    /// the entry is flagged and tagged and a fresh mask is drawn.
    pub fn on_misspeculation(&mut self, store_seq: u64, load: &LoadOp) -> Result<(), MobError> {
        self.stats.spoiler_violations += 1;
        self.stats.misspeculations += 1;
        if load.is_probe {
            self.stats.attacker_stalls += 1;
        }
        self.stats.misspec_log.push(MisspecEvent {
            cycle: self.now,
            load_seq: load.seq,
            load_pc: load.load_pc,
            store_seq,
        });
        if self.config.model != Model::M3 {
            return Ok(());
        }
        if let Some(entry) = self.sab.iter_mut().find(|e| e.seq == store_seq) {
            // the tag keeps the first offender
            if !entry.vuln_flag {
                entry.vuln_flag = true;
                entry.pc_tag = Some(load.load_pc);
            }
        }
        self.remask()
    }

    fn remask(&mut self) -> Result<(), MobError> {
        self.mask = make_mask(&mut self.rng, self.config.mask_width, self.config.pool)?;
        self.stats.remask_events += 1;
        for entry in self.sab.iter_mut().filter(|e| e.resolved) {
            entry.partial_pa = Some(extract_bits(entry.pa, &self.mask));
        }
        Ok(())
    }

    fn decide(&self, load: &LoadOp, load_pa: PhysAddr) -> ForwardDecision {
        let older = self.sab.iter().rev().filter(|e| e.seq < load.seq);
        predict_dependence(load, load_pa, older, self.config.model, &self.mask)
    }

    fn resolve_wait(&self, seq: u64, t: u64) -> u64 {
        self.entry(seq).map_or(0, |e| e.resolve_at.saturating_sub(t))
    }

    /// Executes one load to completion and returns its record.
    pub fn execute_load(&mut self, op: &TraceOp) -> Result<LoadRecord, MobError> {
        debug_assert_eq!(op.kind, OpKind::Load);
        let load = LoadOp::from(op);
        let load_pa = self.space.translate(load.va)?;
        let lat = self.config.latencies;
        let issued = self.now;
        let mut t = issued;
        let mut reissues = 0u32;

        let (done, source) = loop {
            self.advance_to(t);
            self.now = t;
            match self.decide(&load, load_pa) {
                ForwardDecision::NoDependence => break (t + lat.base_load, LoadSource::Memory),
                ForwardDecision::TrueForward(seq) => break (t + lat.forward, LoadSource::Store(seq)),
                ForwardDecision::Alias4kStall { seq, cause } => {
                    t += self.resolve_wait(seq, t) + lat.alias4k_stall;
                    if cause != StallCause::Unresolved {
                        break (t + lat.base_load, LoadSource::Memory);
                    }
                    // PA now known: predict again
                }
                decision @ ForwardDecision::SpeculativeForward(seq) => {
                    let store = self.entry(seq).expect("decision names a live entry");
                    if resolve_and_check(load_pa, decision, store) == Outcome::Correct {
                        break (t + lat.forward, LoadSource::Store(seq));
                    }
                    self.on_misspeculation(seq, &load)?;
                    t += lat.squash_penalty;
                    reissues += 1;
                    if reissues >= self.config.max_reissues {
                        self.stats.reissue_cap_hits += 1;
                        t += lat.alias4k_stall;
                        break (t + lat.base_load, LoadSource::Memory);
                    }
                }
            }
        };

        self.now = done;
        self.last_load_done = done;
        self.stats.total_loads += 1;
        let record = LoadRecord {
            seq: load.seq,
            page: load.va.page_number(),
            pc: load.load_pc,
            is_probe: load.is_probe,
            reissues,
            latency_cycles: done - issued,
            source,
        };
        self.stats.per_load_latency.push(record.clone());
        Ok(record)
    }

    pub fn step(&mut self, op: &TraceOp) -> Result<(), MobError> {
        match op.kind {
            OpKind::Store => self.sab_insert(op).map(|_| ()),
            OpKind::Load => self.execute_load(op).map(|_| ()),
        }
    }

    pub fn finish(mut self) -> SimStats {
        self.stats.total_cycles = self.now;
        self.stats
    }
}

/// Runs a trace against the address space recorded in its metadata.
pub fn run_trace(trace: &Trace, config: &SimConfig) -> Result<SimStats, MobError> {
    let mut space = trace.meta.address_space()?;
    run_trace_in(trace, config, &mut space)
}

pub fn run_trace_in(trace: &Trace, config: &SimConfig, space: &mut AddressSpace) -> Result<SimStats, MobError> {
    trace.validate()?;
    let mut mob = Mob::new(config.clone(), space)?;
    for op in &trace.ops {
        mob.step(op)?;
    }
    Ok(mob.finish())
}
