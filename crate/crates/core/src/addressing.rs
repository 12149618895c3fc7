//! Address spaces, page tables, and the memory request record shared by the
//! whole hierarchy.
//!
//! Pages are 4 KB and translations walk a 4-level radix table with 9-bit
//! indices per level (x86-64-like), so a virtual page number occupies 36 bits.
//! Physical frames for all applications come from one seeded, shuffled free
//! list, which keeps allocations deterministic and per-ASID spaces disjoint.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

pub const PAGE_SHIFT: u32 = 12;
pub const PAGE_SIZE: u64 = 1 << PAGE_SHIFT;
/// Levels of the page table radix tree. Level 1 is the root.
pub const WALK_LEVELS: u8 = 4;
pub const INDEX_BITS: u32 = 9;
/// Bytes per page-table entry; a 4 KB table frame holds 512 of them.
pub const PTE_BYTES: u64 = 8;
/// Virtual page numbers must fit in 4 * 9 index bits.
pub const MAX_VPN_BITS: u32 = INDEX_BITS * WALK_LEVELS as u32;

/// Address-space identifier. One per concurrently running application.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Asid(pub u8);

/// Queue counters elsewhere in the hierarchy are 6 bits wide, so at most 64
/// address spaces can run concurrently.
pub const MAX_CONCURRENT_ASIDS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VirtualAddress(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PhysicalAddress(pub u64);

impl VirtualAddress {
    pub fn from_page(vpn: u64, offset: u64) -> Self {
        debug_assert!(offset < PAGE_SIZE);
        VirtualAddress((vpn << PAGE_SHIFT) | offset)
    }

    pub fn vpn(self) -> u64 {
        self.0 >> PAGE_SHIFT
    }

    pub fn offset(self) -> u64 {
        self.0 & (PAGE_SIZE - 1)
    }
}

impl PhysicalAddress {
    pub fn from_frame(pfn: u64, offset: u64) -> Self {
        debug_assert!(offset < PAGE_SIZE);
        PhysicalAddress((pfn << PAGE_SHIFT) | offset)
    }

    pub fn pfn(self) -> u64 {
        self.0 >> PAGE_SHIFT
    }
}

/// Page-walk depth tag carried by every memory request: 0 for data requests,
/// 1..=6 for walk levels, 7 for any depth above 6.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WalkDepth(u8);

impl WalkDepth {
    pub const DATA: WalkDepth = WalkDepth(0);
    pub const MAX: u8 = 7;

    /// Tag for a page-walk request at `level` (1-based). Depths above 6
    /// saturate to 7.
    pub fn for_level(level: u8) -> Self {
        debug_assert!(level >= 1);
        WalkDepth(level.min(Self::MAX))
    }

    pub fn raw(self) -> u8 {
        self.0
    }

    pub fn is_walk(self) -> bool {
        self.0 != 0
    }
}

/// Index into the page-table node map: (level, table frame, entry index).
type NodeKey = (u8, u64, u16);

/// Extracts the 9-bit table index used at `level` (1..=4) of a walk.
pub fn level_index(vpn: u64, level: u8) -> u16 {
    debug_assert!((1..=WALK_LEVELS).contains(&level));
    let shift = INDEX_BITS * (WALK_LEVELS - level) as u32;
    ((vpn >> shift) & ((1 << INDEX_BITS) - 1)) as u16
}

/// Physical address of the entry read at one walk level.
pub fn pte_address(table_frame: u64, index: u16) -> PhysicalAddress {
    PhysicalAddress((table_frame << PAGE_SHIFT) | (index as u64 * PTE_BYTES))
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AddressingError {
    /// A walk found no entry at `level`; page faults are out of scope, so
    /// runs treat this as a fatal trace/page-table mismatch.
    #[error("asid {} vpn {vpn:#x} unmapped at walk level {level}", asid.0)]
    Unmapped { asid: Asid, vpn: u64, level: u8 },
    #[error("physical memory exhausted: {needed} frames needed, {available} available")]
    CapacityExceeded { needed: u64, available: u64 },
    #[error("vpn {vpn:#x} does not fit in {MAX_VPN_BITS} bits")]
    VpnTooLarge { vpn: u64 },
    #[error("page set for asid {} is empty", asid.0)]
    EmptyPageSet { asid: Asid },
    #[error("duplicate asid {}", asid.0)]
    DuplicateAsid { asid: Asid },
}

/// One step of a page walk: the depth tag and the physical address of the
/// table entry the walker reads at that level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WalkStep {
    pub depth: WalkDepth,
    pub addr: PhysicalAddress,
}

/// A fully built radix page table for one address space.
///
/// Immutable after construction; the node map doubles as the mock "memory"
/// that the walker reads intermediate entries from (the simulator tracks
/// timing, not byte contents).
#[derive(Debug, Clone)]
pub struct PageTable {
    asid: Asid,
    root_frame: u64,
    nodes: HashMap<NodeKey, u64>,
    mapped_pages: u64,
}

impl PageTable {
    pub fn asid(&self) -> Asid {
        self.asid
    }

    pub fn root_frame(&self) -> u64 {
        self.root_frame
    }

    pub fn mapped_pages(&self) -> u64 {
        self.mapped_pages
    }

    /// Child frame stored at (level, table frame, index), if present. For
    /// level 4 the child is the data frame of the translated page.
    pub fn node_lookup(&self, level: u8, table_frame: u64, index: u16) -> Option<u64> {
        self.nodes.get(&(level, table_frame, index)).copied()
    }

    /// Number of distinct table frames at each level (root counts as the one
    /// level-1 table).
    pub fn tables_per_level(&self) -> [u64; WALK_LEVELS as usize] {
        let mut frames: [BTreeSet<u64>; WALK_LEVELS as usize] = Default::default();
        frames[0].insert(self.root_frame);
        for (&(level, _, _), &child) in &self.nodes {
            if level < WALK_LEVELS {
                frames[level as usize].insert(child);
            }
        }
        [
            frames[0].len() as u64,
            frames[1].len() as u64,
            frames[2].len() as u64,
            frames[3].len() as u64,
        ]
    }

    /// Full virtual-to-physical translation via the 4-level walk.
    pub fn translate(&self, va: VirtualAddress) -> Result<PhysicalAddress, AddressingError> {
        let vpn = va.vpn();
        let leaf = self.walk_frames(vpn)?[WALK_LEVELS as usize - 1];
        Ok(PhysicalAddress::from_frame(leaf, va.offset()))
    }

    /// Ordered addresses of the four dependent table-entry reads performed by
    /// a walk of `va`'s page. Step `k` is computable only once the frame read
    /// at step `k - 1` is known.
    pub fn walk_addresses(
        &self,
        va: VirtualAddress,
    ) -> Result<[WalkStep; WALK_LEVELS as usize], AddressingError> {
        let vpn = va.vpn();
        let mut steps = [WalkStep {
            depth: WalkDepth::DATA,
            addr: PhysicalAddress(0),
        }; WALK_LEVELS as usize];
        let mut frame = self.root_frame;
        for level in 1..=WALK_LEVELS {
            let index = level_index(vpn, level);
            steps[level as usize - 1] = WalkStep {
                depth: WalkDepth::for_level(level),
                addr: pte_address(frame, index),
            };
            frame = self.child_frame(vpn, level, frame)?;
        }
        Ok(steps)
    }

    /// Resolves the child frame read at `level` when the walk sits at
    /// `table_frame`. Used by the timed walker to advance one level at a time.
    pub fn child_frame(
        &self,
        vpn: u64,
        level: u8,
        table_frame: u64,
    ) -> Result<u64, AddressingError> {
        let index = level_index(vpn, level);
        self.node_lookup(level, table_frame, index)
            .ok_or(AddressingError::Unmapped {
                asid: self.asid,
                vpn,
                level,
            })
    }

    fn walk_frames(&self, vpn: u64) -> Result<[u64; WALK_LEVELS as usize], AddressingError> {
        if vpn >> MAX_VPN_BITS != 0 {
            return Err(AddressingError::Unmapped {
                asid: self.asid,
                vpn,
                level: 1,
            });
        }
        let mut out = [0u64; WALK_LEVELS as usize];
        let mut frame = self.root_frame;
        for level in 1..=WALK_LEVELS {
            frame = self.child_frame(vpn, level, frame)?;
            out[level as usize - 1] = frame;
        }
        Ok(out)
    }
}

/// The page tables of every application in a run, built over one shared
/// physical frame pool.
#[derive(Debug, Clone)]
pub struct PageTableSet {
    tables: BTreeMap<Asid, PageTable>,
    frames_used: u64,
    total_frames: u64,
}

impl PageTableSet {
    pub fn get(&self, asid: Asid) -> Option<&PageTable> {
        self.tables.get(&asid)
    }

    pub fn table(&self, asid: Asid) -> &PageTable {
        &self.tables[&asid]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Asid, &PageTable)> {
        self.tables.iter()
    }

    pub fn frames_used(&self) -> u64 {
        self.frames_used
    }

    pub fn total_frames(&self) -> u64 {
        self.total_frames
    }
}

/// Builds disjoint page tables for every application.
///
/// Frames are handed out by popping a free list shuffled with `seed`, so the
/// same inputs always produce the same physical layout. Table frames and data
/// frames of all ASIDs draw from the same pool and therefore never collide.
pub fn build_page_tables(
    per_app_pages: &[(Asid, BTreeSet<u64>)],
    seed: u64,
    total_frames: u64,
) -> Result<PageTableSet, AddressingError> {
    let mut seen = BTreeSet::new();
    for (asid, pages) in per_app_pages {
        if pages.is_empty() {
            return Err(AddressingError::EmptyPageSet { asid: *asid });
        }
        if !seen.insert(*asid) {
            return Err(AddressingError::DuplicateAsid { asid: *asid });
        }
        if let Some(&vpn) = pages.iter().next_back() {
            if vpn >> MAX_VPN_BITS != 0 {
                return Err(AddressingError::VpnTooLarge { vpn });
            }
        }
    }

    let mut free: Vec<u64> = (0..total_frames).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    free.shuffle(&mut rng);

    let mut next = 0usize;
    let mut alloc = |needed_for_err: &mut u64| -> Result<u64, AddressingError> {
        if next >= free.len() {
            return Err(AddressingError::CapacityExceeded {
                needed: *needed_for_err,
                available: total_frames,
            });
        }
        let f = free[next];
        next += 1;
        Ok(f)
    };

    let mut needed: u64 = 0;
    let mut tables = BTreeMap::new();
    for (asid, pages) in per_app_pages {
        needed += 1;
        let root_frame = alloc(&mut needed)?;
        let mut nodes = HashMap::new();
        for &vpn in pages {
            let mut frame = root_frame;
            for level in 1..=WALK_LEVELS {
                let key = (level, frame, level_index(vpn, level));
                frame = match nodes.get(&key) {
                    Some(&child) => child,
                    None => {
                        needed += 1;
                        let child = alloc(&mut needed)?;
                        nodes.insert(key, child);
                        child
                    }
                };
            }
        }
        tables.insert(
            *asid,
            PageTable {
                asid: *asid,
                root_frame,
                nodes,
                mapped_pages: pages.len() as u64,
            },
        );
    }

    Ok(PageTableSet {
        tables,
        frames_used: next as u64,
        total_frames,
    })
}

/// Who is waiting on a request's completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequestOrigin {
    /// A warp's own data access; `warp` is the global warp index.
    Data { warp: u32 },
    /// A page-walk read issued on behalf of walker slot `slot`.
    Walk { slot: u8 },
}

/// A tagged request flowing through the TLBs, cache, and DRAM.
#[derive(Debug, Clone)]
pub struct MemoryRequest {
    pub asid: Asid,
    pub vaddr: VirtualAddress,
    pub paddr: Option<PhysicalAddress>,
    pub is_write: bool,
    pub walk_depth: WalkDepth,
    pub issuing_core: u16,
    /// Warps coalesced onto this request when it was created.
    pub stalled_warps: Vec<u32>,
    pub issue_cycle: u64,
    pub origin: RequestOrigin,
}

impl MemoryRequest {
    pub fn data(
        asid: Asid,
        vaddr: VirtualAddress,
        paddr: PhysicalAddress,
        is_write: bool,
        core: u16,
        warp: u32,
        cycle: u64,
    ) -> Self {
        MemoryRequest {
            asid,
            vaddr,
            paddr: Some(paddr),
            is_write,
            walk_depth: WalkDepth::DATA,
            issuing_core: core,
            stalled_warps: vec![warp],
            issue_cycle: cycle,
            origin: RequestOrigin::Data { warp },
        }
    }

    pub fn walk(
        asid: Asid,
        vaddr: VirtualAddress,
        pte_addr: PhysicalAddress,
        level: u8,
        core: u16,
        waiters: Vec<u32>,
        slot: u8,
        cycle: u64,
    ) -> Self {
        MemoryRequest {
            asid,
            vaddr,
            paddr: Some(pte_addr),
            is_write: false,
            walk_depth: WalkDepth::for_level(level),
            issuing_core: core,
            stalled_warps: waiters,
            issue_cycle: cycle,
            origin: RequestOrigin::Walk { slot },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pages(vpns: &[u64]) -> BTreeSet<u64> {
        vpns.iter().copied().collect()
    }

    /// Independent radix-tree reference: tables at level l+1 = distinct
    /// l-index prefixes of the page set.
    fn reference_tables_per_level(vpns: &BTreeSet<u64>) -> [u64; 4] {
        let mut counts = [1u64, 0, 0, 0];
        for depth in 1..=3usize {
            let prefixes: BTreeSet<u64> = vpns
                .iter()
                .map(|vpn| vpn >> (INDEX_BITS as usize * (4 - depth)))
                .collect();
            counts[depth] = prefixes.len() as u64;
        }
        counts
    }

    #[test]
    fn single_page_builds_minimal_tree() {
        let set = build_page_tables(&[(Asid(0), pages(&[42]))], 1, 1024).unwrap();
        let pt = set.table(Asid(0));
        assert_eq!(pt.tables_per_level(), [1, 1, 1, 1]);
        // 4 table frames + 1 data frame.
        assert_eq!(set.frames_used(), 5);
        assert_eq!(pt.nodes.len(), 4);
    }

    #[test]
    fn same_vpn_in_two_asids_maps_to_disjoint_frames() {
        let set = build_page_tables(
            &[(Asid(0), pages(&[7])), (Asid(1), pages(&[7]))],
            3,
            1024,
        )
        .unwrap();
        let va = VirtualAddress::from_page(7, 0);
        let p0 = set.table(Asid(0)).translate(va).unwrap();
        let p1 = set.table(Asid(1)).translate(va).unwrap();
        assert_ne!(p0.pfn(), p1.pfn());

        let frames = |pt: &PageTable| -> BTreeSet<u64> {
            let mut f: BTreeSet<u64> = pt.nodes.values().copied().collect();
            f.insert(pt.root_frame());
            f
        };
        let f0 = frames(set.table(Asid(0)));
        let f1 = frames(set.table(Asid(1)));
        assert!(f0.is_disjoint(&f1));
    }

    #[test]
    fn spillover_page_set_matches_reference_builder() {
        // 513 pages sharing one level-3 subtree spill into two level-4 tables.
        let vpns: BTreeSet<u64> = (0..513).collect();
        let set = build_page_tables(&[(Asid(2), vpns.clone())], 9, 4096).unwrap();
        let got = set.table(Asid(2)).tables_per_level();
        assert_eq!(got, reference_tables_per_level(&vpns));
        assert_eq!(got, [1, 1, 1, 2]);
    }

    #[test]
    fn random_page_sets_match_reference_builder() {
        use rand::Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        for _ in 0..20 {
            let vpns: BTreeSet<u64> = (0..200)
                .map(|_| rng.random_range(0..(1u64 << 20)))
                .collect();
            let set = build_page_tables(&[(Asid(0), vpns.clone())], 5, 1 << 16).unwrap();
            assert_eq!(
                set.table(Asid(0)).tables_per_level(),
                reference_tables_per_level(&vpns)
            );
        }
    }

    #[test]
    fn translate_passes_offset_through() {
        let set = build_page_tables(&[(Asid(0), pages(&[10]))], 4, 256).unwrap();
        let pa = set
            .table(Asid(0))
            .translate(VirtualAddress::from_page(10, 0x123))
            .unwrap();
        assert_eq!(pa.0 & 0xFFF, 0x123);
    }

    #[test]
    fn translate_unlisted_page_is_unmapped() {
        let set = build_page_tables(&[(Asid(0), pages(&[10]))], 4, 256).unwrap();
        let err = set
            .table(Asid(0))
            .translate(VirtualAddress::from_page(11, 0))
            .unwrap_err();
        assert!(matches!(err, AddressingError::Unmapped { .. }));
    }

    #[test]
    fn walk_addresses_has_four_increasing_depths() {
        let set = build_page_tables(&[(Asid(0), pages(&[0x12345]))], 8, 1024).unwrap();
        let steps = set
            .table(Asid(0))
            .walk_addresses(VirtualAddress::from_page(0x12345, 0))
            .unwrap();
        for (i, step) in steps.iter().enumerate() {
            assert_eq!(step.depth.raw(), i as u8 + 1);
        }
        // Leaf of the walk equals translate().
        let leaf = set
            .table(Asid(0))
            .walk_frames(0x12345)
            .unwrap()[3];
        let pa = set
            .table(Asid(0))
            .translate(VirtualAddress::from_page(0x12345, 0))
            .unwrap();
        assert_eq!(leaf, pa.pfn());
    }

    #[test]
    fn shared_prefix_walks_share_first_three_addresses() {
        // Two vpns equal in the top 27 index bits differ only at level 4.
        let a = 0b000000001_000000010_000000011_000000100u64;
        let b = 0b000000001_000000010_000000011_000000101u64;
        let set = build_page_tables(&[(Asid(0), pages(&[a, b]))], 2, 1024).unwrap();
        let pt = set.table(Asid(0));
        let sa = pt.walk_addresses(VirtualAddress::from_page(a, 0)).unwrap();
        let sb = pt.walk_addresses(VirtualAddress::from_page(b, 0)).unwrap();
        assert_eq!(&sa[..3], &sb[..3]);
        assert_ne!(sa[3].addr, sb[3].addr);
    }

    #[test]
    fn walk_addresses_matches_reference_walker_on_random_pages() {
        use rand::Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let vpns: BTreeSet<u64> = (0..500)
            .map(|_| rng.random_range(0..(1u64 << 30)))
            .collect();
        let set = build_page_tables(&[(Asid(0), vpns.clone())], 6, 1 << 16).unwrap();
        let pt = set.table(Asid(0));
        for &vpn in vpns.iter().take(64) {
            let steps = pt.walk_addresses(VirtualAddress::from_page(vpn, 0)).unwrap();
            // Reference walker: follow node_lookup level by level.
            let mut frame = pt.root_frame();
            for level in 1..=4u8 {
                let idx = level_index(vpn, level);
                let expect = pte_address(frame, idx);
                assert_eq!(steps[level as usize - 1].addr, expect);
                frame = pt.node_lookup(level, frame, idx).unwrap();
            }
        }
    }

    #[test]
    fn withholding_a_level_breaks_the_walk_at_that_level() {
        let set = build_page_tables(&[(Asid(0), pages(&[0x777]))], 13, 1024).unwrap();
        for withheld in 1..=4u8 {
            let mut pt = set.table(Asid(0)).clone();
            let mut frame = pt.root_frame();
            for level in 1..withheld {
                frame = pt.child_frame(0x777, level, frame).unwrap();
            }
            let idx = level_index(0x777, withheld);
            pt.nodes.remove(&(withheld, frame, idx));
            let err = pt
                .walk_addresses(VirtualAddress::from_page(0x777, 0))
                .unwrap_err();
            assert_eq!(
                err,
                AddressingError::Unmapped {
                    asid: Asid(0),
                    vpn: 0x777,
                    level: withheld
                }
            );
        }
    }

    #[test]
    fn capacity_exceeded_when_frames_run_out() {
        let err = build_page_tables(&[(Asid(0), pages(&[1, 2, 3]))], 1, 4).unwrap_err();
        assert!(matches!(err, AddressingError::CapacityExceeded { .. }));
    }

    #[test]
    fn allocation_is_deterministic_per_seed() {
        let apps = [(Asid(0), pages(&[1, 2, 3])), (Asid(1), pages(&[9, 10]))];
        let a = build_page_tables(&apps, 42, 4096).unwrap();
        let b = build_page_tables(&apps, 42, 4096).unwrap();
        let c = build_page_tables(&apps, 43, 4096).unwrap();
        let roots = |s: &PageTableSet| -> Vec<u64> {
            s.iter().map(|(_, pt)| pt.root_frame()).collect()
        };
        assert_eq!(roots(&a), roots(&b));
        assert_ne!(roots(&a), roots(&c));
    }

    #[test]
    fn walk_depth_saturates_at_seven() {
        assert_eq!(WalkDepth::for_level(6).raw(), 6);
        assert_eq!(WalkDepth::for_level(9).raw(), 7);
        assert!(!WalkDepth::DATA.is_walk());
        assert!(WalkDepth::for_level(1).is_walk());
    }
}
