//! Trace generators: the store-window/probe attack loop and benign workloads.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::address::{AddressError, AddressSpace, BitMask, PhysAddr, VirtAddr, PPN_BITS};
use crate::trace::{OpKind, SpoilerLabels, Trace, TraceMeta, TraceOp};

/// Attacker store buffer, one page per window store.
pub const STORE_BUF_VPN: u64 = 0x7f00_0000;
/// Measurement buffer, one page per measured page.
pub const PROBE_BUF_VPN: u64 = 0x5500_0000;
pub const BENIGN_VPN: u64 = 0x1000_0000;
pub const STORE_PC: u64 = 0x40_1a30;
pub const PROBE_PC: u64 = 0x40_1a58;

const BENIGN_WORKING_PAGES: u64 = 64;
const BENIGN_LOAD_PC: u64 = 0x40_8000;
const BENIGN_STORE_PC: u64 = 0x40_9000;
const BENIGN_PCS: u64 = 16;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Address(#[from] AddressError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpoilerParams {
    pub pages: usize,
    pub rounds: usize,
    pub window: usize,
    pub aliased_pages: Vec<usize>,
    pub seed: u64,
}

impl SpoilerParams {
    /// Desk-scale defaults: 128 pages, 20 rounds, a 56-store window.
    pub fn desk(aliased: usize, seed: u64) -> Result<Self, HarnessError> {
        Self::with_aliased_count(128, 20, 56, aliased, seed)
    }

    /// Picks `count` planted pages uniformly from `[0, pages)` using `seed`.
    pub fn with_aliased_count(
        pages: usize,
        rounds: usize,
        window: usize,
        count: usize,
        seed: u64,
    ) -> Result<Self, HarnessError> {
        if count > pages {
            return Err(HarnessError::Params(format!("{count} aliased pages requested out of {pages}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa11a_5ed0);
        let mut aliased_pages = index::sample(&mut rng, pages, count).into_vec();
        aliased_pages.sort_unstable();
        Ok(Self { pages, rounds, window, aliased_pages, seed })
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.window == 0 {
            return Err(HarnessError::Params("window must be at least 1".into()));
        }
        if let Some(&p) = self.aliased_pages.iter().find(|&&p| p >= self.pages) {
            return Err(HarnessError::Params(format!("aliased page {p} outside [0, {})", self.pages)));
        }
        if self.aliased_pages.windows(2).any(|w| w[0] >= w[1]) {
            return Err(HarnessError::Params("aliased pages must be sorted and distinct".into()));
        }
        Ok(())
    }

    pub fn op_count(&self) -> usize {
        self.pages * self.rounds * (self.window + 1)
    }
}

/// Memory layout shared by the attack generators.
struct AttackLayout {
    offset: u64,
    donor: PhysAddr,
    probe_vpns: Vec<u64>,
}

impl AttackLayout {
    fn store_va(&self, i: usize) -> VirtAddr {
        VirtAddr::from_parts(STORE_BUF_VPN + i as u64, self.offset).expect("store buffer fits in 48 bits")
    }

    fn probe_va(&self, page: usize) -> VirtAddr {
        VirtAddr::from_parts(self.probe_vpns[page], self.offset).expect("probe buffer fits in 48 bits")
    }

    /// Plants every window page and every labelled probe page against one
    /// donor pattern on PA bits [19:12]; other probe pages map randomly.
    fn build(params: &SpoilerParams, space: &mut AddressSpace) -> Result<Self, HarnessError> {
        params.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let offset = rng.gen_range(0..512u64) * 8;
        let donor = PhysAddr::from_parts(rng.gen_range(0..1u64 << PPN_BITS), offset)?;
        let layout = Self {
            offset,
            donor,
            probe_vpns: (0..params.pages as u64).map(|p| PROBE_BUF_VPN + p).collect(),
        };
        let fixed = BitMask::fixed8();
        for i in 0..params.window {
            space.plant_alias(layout.store_va(i), donor, &fixed)?;
        }
        for page in 0..params.pages {
            let va = layout.probe_va(page);
            if params.aliased_pages.binary_search(&page).is_ok() {
                space.plant_alias(va, donor, &fixed)?;
            } else {
                space.translate(va)?;
            }
        }
        Ok(layout)
    }

    fn labels(&self, params: &SpoilerParams) -> SpoilerLabels {
        SpoilerLabels {
            probe_vpns: self.probe_vpns.clone(),
            aliased_pages: params.aliased_pages.clone(),
            donor_pa: self.donor.value(),
            rounds: params.rounds,
        }
    }
}

struct OpSink {
    ops: Vec<TraceOp>,
}

impl OpSink {
    fn new(capacity: usize) -> Self {
        Self { ops: Vec::with_capacity(capacity) }
    }

    fn push(&mut self, kind: OpKind, va: VirtAddr, pc: u64, is_probe: bool) {
        let seq = self.ops.len() as u64;
        self.ops.push(TraceOp { seq, kind, va, pc, is_probe });
    }

    fn attack_round(&mut self, layout: &AttackLayout, page: usize, window: usize) {
        for i in 0..window {
            self.push(OpKind::Store, layout.store_va(i), STORE_PC, false);
        }
        self.push(OpKind::Load, layout.probe_va(page), PROBE_PC, true);
    }
}

/// Attack loop: for each page, `rounds` times, fill the store window then
/// issue one timed probe load at the same page offset.
pub fn gen_spoiler_trace(params: &SpoilerParams, space: &mut AddressSpace) -> Result<Trace, HarnessError> {
    let layout = AttackLayout::build(params, space)?;
    let mut sink = OpSink::new(params.op_count());
    for page in 0..params.pages {
        for _ in 0..params.rounds {
            sink.attack_round(&layout, page, params.window);
        }
    }
    let meta = TraceMeta {
        generator: "spoiler".into(),
        params: serde_json::to_value(params).expect("params serialize"),
        seed: params.seed,
        space_seed: space.seed(),
        page_map: space.mapping(),
        labels: Some(layout.labels(params)),
    };
    Ok(Trace::new(meta, sink.ops))
}

/// Attack rounds interleaved with benign random traffic: after every probe,
/// `benign_per_round` random loads/stores over a separate working set.
pub fn gen_stress_trace(
    params: &SpoilerParams,
    benign_per_round: usize,
    space: &mut AddressSpace,
) -> Result<Trace, HarnessError> {
    let layout = AttackLayout::build(params, space)?;
    let mut benign = BenignGen::new(params.seed ^ 0x5eed_b3e1, space)?;
    let mut sink = OpSink::new(params.op_count() + params.pages * params.rounds * benign_per_round);
    for page in 0..params.pages {
        for _ in 0..params.rounds {
            sink.attack_round(&layout, page, params.window);
            for _ in 0..benign_per_round {
                benign.random_op(&mut sink);
            }
        }
    }
    let meta = TraceMeta {
        generator: "stress".into(),
        params: serde_json::json!({ "spoiler": params, "benign_per_round": benign_per_round }),
        seed: params.seed,
        space_seed: space.seed(),
        page_map: space.mapping(),
        labels: Some(layout.labels(params)),
    };
    Ok(Trace::new(meta, sink.ops))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenignKind {
    Random,
    Sequential,
    ForwardHeavy,
}

impl fmt::Display for BenignKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenignKind::Random => "random",
            BenignKind::Sequential => "sequential",
            BenignKind::ForwardHeavy => "forward-heavy",
        })
    }
}

impl FromStr for BenignKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(BenignKind::Random),
            "sequential" => Ok(BenignKind::Sequential),
            "forward-heavy" => Ok(BenignKind::ForwardHeavy),
            other => Err(format!("unknown benign kind {other:?}")),
        }
    }
}

struct BenignGen {
    rng: ChaCha8Rng,
}

impl BenignGen {
    fn new(seed: u64, space: &mut AddressSpace) -> Result<Self, HarnessError> {
        for p in 0..BENIGN_WORKING_PAGES {
            space.translate(VirtAddr::from_parts(BENIGN_VPN + p, 0)?)?;
        }
        Ok(Self { rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    fn random_va(&mut self) -> VirtAddr {
        let page = self.rng.gen_range(0..BENIGN_WORKING_PAGES);
        let offset = self.rng.gen_range(0..512u64) * 8;
        VirtAddr::from_parts(BENIGN_VPN + page, offset).expect("working set fits in 48 bits")
    }

    fn pc(&mut self, base: u64) -> u64 {
        base + 4 * self.rng.gen_range(0..BENIGN_PCS)
    }

    fn random_op(&mut self, sink: &mut OpSink) {
        let va = self.random_va();
        if self.rng.gen_bool(0.5) {
            let pc = self.pc(BENIGN_LOAD_PC);
            sink.push(OpKind::Load, va, pc, false);
        } else {
            let pc = self.pc(BENIGN_STORE_PC);
            sink.push(OpKind::Store, va, pc, false);
        }
    }
}

/// Synthetic non-attack workloads.
///
/// * `random`: even load/store mix over a 64-page working set.
/// * `sequential`: one stream of strictly increasing 8-byte addresses, one
///   store per four ops.
/// * `forward-heavy`: store/load pairs to the same address.
pub fn gen_benign_trace(kind: BenignKind, ops: usize, seed: u64) -> Result<Trace, HarnessError> {
    if ops == 0 {
        return Err(HarnessError::Params("ops must be positive".into()));
    }
    let mut space = AddressSpace::new(seed);
    let mut sink = OpSink::new(ops);
    match kind {
        BenignKind::Random => {
            let mut g = BenignGen::new(seed, &mut space)?;
            for _ in 0..ops {
                g.random_op(&mut sink);
            }
        }
        BenignKind::Sequential => {
            for i in 0..ops as u64 {
                let va = VirtAddr::new((BENIGN_VPN << 12) + 8 * i)?;
                space.translate(va)?;
                if i % 4 == 3 {
                    sink.push(OpKind::Store, va, BENIGN_STORE_PC, false);
                } else {
                    sink.push(OpKind::Load, va, BENIGN_LOAD_PC, false);
                }
            }
        }
        BenignKind::ForwardHeavy => {
            let mut g = BenignGen::new(seed, &mut space)?;
            while sink.ops.len() < ops {
                let va = g.random_va();
                let spc = g.pc(BENIGN_STORE_PC);
                sink.push(OpKind::Store, va, spc, false);
                if sink.ops.len() < ops {
                    let lpc = g.pc(BENIGN_LOAD_PC);
                    sink.push(OpKind::Load, va, lpc, false);
                }
            }
        }
    }
    let meta = TraceMeta {
        generator: format!("benign-{kind}"),
        params: serde_json::json!({ "kind": kind, "ops": ops }),
        seed,
        space_seed: space.seed(),
        page_map: space.mapping(),
        labels: None,
    };
    Ok(Trace::new(meta, sink.ops))
}
