//! Virtual/physical addresses, the seeded page map, and partial-address bit
//! arithmetic used by the dependence predictor.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const VA_BITS: u32 = 48;
pub const PA_BITS: u32 = 40;
pub const PAGE_SHIFT: u32 = 12;
pub const PAGE_SIZE: u64 = 1 << PAGE_SHIFT;
pub const PAGE_OFFSET_MASK: u64 = PAGE_SIZE - 1;

/// Number of physical page-number bits (PA bits [39:12]).
pub const PPN_BITS: u32 = PA_BITS - PAGE_SHIFT;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AddressError {
    #[error("virtual address {0:#x} exceeds 48 bits")]
    VirtOutOfRange(u64),
    #[error("physical address {0:#x} exceeds 40 bits")]
    PhysOutOfRange(u64),
    #[error("bit position {pos} outside pool [{lo}, {hi}]")]
    PositionOutOfPool { pos: u8, lo: u8, hi: u8 },
    #[error("duplicate bit position {0} in mask")]
    DuplicatePosition(u8),
    #[error("mask width {width} exceeds pool size {pool}")]
    WidthExceedsPool { width: usize, pool: usize },
    #[error("invalid bit pool [{lo}, {hi}]")]
    InvalidPool { lo: u8, hi: u8 },
    #[error("physical page pool exhausted ({0} pages in use)")]
    PhysPagesExhausted(u64),
    #[error("no free physical page satisfies the requested alias for va page {vpn:#x}")]
    ImpossiblePlant { vpn: u64 },
    #[error("page-map entry {vpn:#x} -> {ppn:#x} is invalid or not injective")]
    BadMapping { vpn: u64, ppn: u64 },
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct VirtAddr(u64);

impl VirtAddr {
    pub fn new(value: u64) -> Result<Self, AddressError> {
        if value >> VA_BITS != 0 {
            return Err(AddressError::VirtOutOfRange(value));
        }
        Ok(Self(value))
    }

    pub fn from_parts(vpn: u64, offset: u64) -> Result<Self, AddressError> {
        Self::new((vpn << PAGE_SHIFT) | (offset & PAGE_OFFSET_MASK))
    }

    pub fn value(self) -> u64 {
        self.0
    }

    pub fn page_offset(self) -> u64 {
        self.0 & PAGE_OFFSET_MASK
    }

    /// Virtual page number, VA bits [47:12].
    pub fn page_number(self) -> u64 {
        self.0 >> PAGE_SHIFT
    }
}

impl fmt::Debug for VirtAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VirtAddr({:#x})", self.0)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct PhysAddr(u64);

impl PhysAddr {
    pub fn new(value: u64) -> Result<Self, AddressError> {
        if value >> PA_BITS != 0 {
            return Err(AddressError::PhysOutOfRange(value));
        }
        Ok(Self(value))
    }

    pub fn from_parts(ppn: u64, offset: u64) -> Result<Self, AddressError> {
        Self::new((ppn << PAGE_SHIFT) | (offset & PAGE_OFFSET_MASK))
    }

    pub fn value(self) -> u64 {
        self.0
    }

    pub fn page_offset(self) -> u64 {
        self.0 & PAGE_OFFSET_MASK
    }

    pub fn page_number(self) -> u64 {
        self.0 >> PAGE_SHIFT
    }
}

impl fmt::Debug for PhysAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PhysAddr({:#x})", self.0)
    }
}

/// Inclusive range of PA bit positions a mask may draw from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitPool {
    pub lo: u8,
    pub hi: u8,
}

impl BitPool {
    pub const DEFAULT: BitPool = BitPool { lo: 12, hi: 31 };

    pub fn new(lo: u8, hi: u8) -> Result<Self, AddressError> {
        if lo > hi || u32::from(hi) >= PA_BITS {
            return Err(AddressError::InvalidPool { lo, hi });
        }
        Ok(Self { lo, hi })
    }

    pub fn size(self) -> usize {
        usize::from(self.hi - self.lo) + 1
    }

    pub fn contains(self, pos: u8) -> bool {
        (self.lo..=self.hi).contains(&pos)
    }
}

impl Default for BitPool {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// A set of PA bit positions compared for partial dependence checks.
///
/// Positions are kept in ascending order; bit `i` of an extracted value is
/// PA bit `positions[i]`.
#[derive(Clone, PartialEq, Eq, Hash, Serialize)]
pub struct BitMask {
    positions: Vec<u8>,
    select: u64,
}

impl BitMask {
    pub fn new(positions: impl IntoIterator<Item = u8>, pool: BitPool) -> Result<Self, AddressError> {
        let mut positions: Vec<u8> = positions.into_iter().collect();
        positions.sort_unstable();
        let mut select = 0u64;
        for &pos in &positions {
            if !pool.contains(pos) {
                return Err(AddressError::PositionOutOfPool { pos, lo: pool.lo, hi: pool.hi });
            }
            if select & (1 << pos) != 0 {
                return Err(AddressError::DuplicatePosition(pos));
            }
            select |= 1 << pos;
        }
        Ok(Self { positions, select })
    }

    /// Contiguous mask `lo..=hi` validated against the default pool.
    pub fn range(lo: u8, hi: u8) -> Result<Self, AddressError> {
        Self::new(lo..=hi, BitPool::DEFAULT)
    }

    /// The fixed 8-bit mask, PA bits [19:12].
    pub fn fixed8() -> Self {
        Self::range(12, 19).expect("[19:12] lies inside the default pool")
    }

    pub fn empty() -> Self {
        Self { positions: Vec::new(), select: 0 }
    }

    pub fn positions(&self) -> &[u8] {
        &self.positions
    }

    pub fn width(&self) -> usize {
        self.positions.len()
    }

    /// PA bits selected by the mask, as a 64-bit select word.
    pub fn select_bits(&self) -> u64 {
        self.select
    }
}

impl fmt::Debug for BitMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(&self.positions).finish()
    }
}

/// Gathers the bits of `pa` named by `mask` into a dense `width`-bit value.
pub fn extract_bits(pa: PhysAddr, mask: &BitMask) -> u32 {
    mask.positions
        .iter()
        .enumerate()
        .fold(0u32, |acc, (i, &pos)| acc | ((((pa.0 >> pos) & 1) as u32) << i))
}

pub fn masked_compare(a: PhysAddr, b: PhysAddr, mask: &BitMask) -> bool {
    (a.0 ^ b.0) & mask.select == 0
}

/// Draws `width` distinct positions uniformly without replacement from `pool`.
pub fn make_mask<R: Rng + ?Sized>(rng: &mut R, width: usize, pool: BitPool) -> Result<BitMask, AddressError> {
    let size = pool.size();
    if width > size {
        return Err(AddressError::WidthExceedsPool { width, pool: size });
    }
    let picks = index::sample(rng, size, width);
    BitMask::new(picks.into_iter().map(|i| pool.lo + i as u8), pool)
}

/// Seeded virtual-to-physical page map.
///
/// Unmapped pages are assigned a uniformly random unused physical page the
/// first time they are translated. The map stays injective under every
/// operation.
#[derive(Clone, Debug)]
pub struct AddressSpace {
    seed: u64,
    ppn_bits: u32,
    rng: ChaCha8Rng,
    pages: BTreeMap<u64, u64>,
    owners: HashMap<u64, u64>,
}

const PLANT_RANDOM_ATTEMPTS: usize = 256;

impl AddressSpace {
    pub fn new(seed: u64) -> Self {
        Self::with_phys_page_bits(seed, PPN_BITS)
    }

    /// Restricts the physical page pool to `2^ppn_bits` pages.
    pub fn with_phys_page_bits(seed: u64, ppn_bits: u32) -> Self {
        assert!(ppn_bits <= PPN_BITS, "physical page pool wider than the PA");
        Self {
            seed,
            ppn_bits,
            rng: ChaCha8Rng::seed_from_u64(seed),
            pages: BTreeMap::new(),
            owners: HashMap::new(),
        }
    }

    /// Rebuilds a space from a previously captured page map.
    pub fn from_mapping(seed: u64, mapping: &[(u64, u64)]) -> Result<Self, AddressError> {
        let mut space = Self::new(seed);
        for &(vpn, ppn) in mapping {
            if vpn >> (VA_BITS - PAGE_SHIFT) != 0 || ppn >> PPN_BITS != 0 {
                return Err(AddressError::BadMapping { vpn, ppn });
            }
            if space.owners.contains_key(&ppn) || space.pages.contains_key(&vpn) {
                return Err(AddressError::BadMapping { vpn, ppn });
            }
            space.bind(vpn, ppn);
        }
        Ok(space)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mapped_pages(&self) -> usize {
        self.pages.len()
    }

    pub fn phys_page_capacity(&self) -> u64 {
        1u64 << self.ppn_bits
    }

    /// Snapshot of the page map in ascending virtual page order.
    pub fn mapping(&self) -> Vec<(u64, u64)> {
        self.pages.iter().map(|(&v, &p)| (v, p)).collect()
    }

    pub fn lookup(&self, va: VirtAddr) -> Option<PhysAddr> {
        self.pages
            .get(&va.page_number())
            .map(|&ppn| PhysAddr((ppn << PAGE_SHIFT) | va.page_offset()))
    }

    pub fn translate(&mut self, va: VirtAddr) -> Result<PhysAddr, AddressError> {
        let vpn = va.page_number();
        let ppn = match self.pages.get(&vpn) {
            Some(&ppn) => ppn,
            None => {
                let ppn = self.fresh_page()?;
                self.bind(vpn, ppn);
                ppn
            }
        };
        Ok(PhysAddr((ppn << PAGE_SHIFT) | va.page_offset()))
    }

    /// Remaps the page of `va` so that the PA bits named by `bits` agree with
    /// `donor`. Bits outside the mask are random.
    pub fn plant_alias(&mut self, va: VirtAddr, donor: PhysAddr, bits: &BitMask) -> Result<PhysAddr, AddressError> {
        let vpn = va.page_number();
        let pool_mask = self.phys_page_capacity() - 1;
        let fixed = (bits.select_bits() >> PAGE_SHIFT) & !pool_mask;
        if fixed != 0 && (donor.page_number() & fixed) != 0 {
            // donor demands a page-number bit the pool cannot represent
            return Err(AddressError::ImpossiblePlant { vpn });
        }
        let constrained = (bits.select_bits() >> PAGE_SHIFT) & pool_mask;
        let want = donor.page_number() & constrained;
        let free = pool_mask & !constrained;

        let previous = self.pages.remove(&vpn);
        if let Some(old) = previous {
            self.owners.remove(&old);
        }

        let mut chosen = None;
        for _ in 0..PLANT_RANDOM_ATTEMPTS {
            let candidate = (self.rng.gen::<u64>() & free) | want;
            if !self.owners.contains_key(&candidate) {
                chosen = Some(candidate);
                break;
            }
        }
        if chosen.is_none() {
            // near-saturated pool: walk every assignment of the free bits
            let mut sub = free;
            loop {
                let candidate = sub | want;
                if !self.owners.contains_key(&candidate) {
                    chosen = Some(candidate);
                    break;
                }
                if sub == 0 {
                    break;
                }
                sub = (sub - 1) & free;
            }
        }

        match chosen {
            Some(ppn) => {
                self.bind(vpn, ppn);
                Ok(PhysAddr((ppn << PAGE_SHIFT) | va.page_offset()))
            }
            None => {
                if let Some(old) = previous {
                    self.bind(vpn, old);
                }
                Err(AddressError::ImpossiblePlant { vpn })
            }
        }
    }

    fn bind(&mut self, vpn: u64, ppn: u64) {
        self.pages.insert(vpn, ppn);
        self.owners.insert(ppn, vpn);
    }

    fn fresh_page(&mut self) -> Result<u64, AddressError> {
        let capacity = self.phys_page_capacity();
        let used = self.owners.len() as u64;
        if used >= capacity {
            return Err(AddressError::PhysPagesExhausted(used));
        }
        // Rejection sampling; fall back to a linear probe once the pool is
        // mostly consumed.
        if used < capacity / 2 {
            loop {
                let ppn = self.rng.gen_range(0..capacity);
                if !self.owners.contains_key(&ppn) {
                    return Ok(ppn);
                }
            }
        }
        let start = self.rng.gen_range(0..capacity);
        (0..capacity)
            .map(|k| (start + k) % capacity)
            .find(|ppn| !self.owners.contains_key(ppn))
            .ok_or(AddressError::PhysPagesExhausted(used))
    }
}
