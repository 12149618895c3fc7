//! Shared multi-threaded page-table walker.
//!
//! Turns shared-TLB misses into the chain of dependent per-level memory
//! requests. Walks beyond the slot limit queue in FIFO order. The walker
//! itself adds no latency beyond its memory requests; with the optional page
//! walk cache enabled, levels that hit in the cache are skipped outright.

use std::collections::VecDeque;

use crate::addressing::{
    pte_address, Asid, AddressingError, MemoryRequest, PageTableSet, WALK_LEVELS,
};
use crate::setassoc::{SetAssoc, SetKey};

/// Key of one page-table entry in the page walk cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PwcKey {
    pub asid: Asid,
    pub level: u8,
    pub frame: u64,
    pub index: u16,
}

impl SetKey for PwcKey {
    fn set_index(&self, num_sets: usize) -> usize {
        let mixed = (self.frame << 9 | self.index as u64) ^ ((self.level as u64) << 57);
        (mixed % num_sets as u64) as usize
    }
}

#[derive(Debug, Clone)]
struct WalkSlot {
    asid: Asid,
    vpn: u64,
    app: usize,
    core: u16,
    level: u8,
    table_frame: u64,
    waiters: Vec<u32>,
}

#[derive(Debug, Clone)]
struct PendingWalk {
    asid: Asid,
    vpn: u64,
    app: usize,
    core: u16,
    waiters: Vec<u32>,
}

/// What the walker wants the engine to do next.
#[derive(Debug)]
pub enum WalkerEvent {
    /// Inject a page-walk memory request into the cache/DRAM path.
    Emit(MemoryRequest),
    /// A walk finished; the translation is ready to fill and wake its MSHR.
    Completed { asid: Asid, vpn: u64, pfn: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartOutcome {
    Started,
    /// All slots busy; the walk waits in the FIFO.
    Queued,
}

const CONCURRENT_COUNTER_MAX: u8 = 63;

#[derive(Debug)]
pub struct Walker {
    slots: Vec<Option<WalkSlot>>,
    pending: VecDeque<PendingWalk>,
    pwc: Option<SetAssoc<PwcKey, u64>>,
    active: usize,
    /// Active + queued walks per application.
    per_app_current: Vec<u32>,
    /// Saturating 6-bit epoch high-water mark per application.
    per_app_epoch_max: Vec<u8>,
    pub walks_started: u64,
    pub walks_completed: u64,
    pub pwc_hits: u64,
    pub pwc_misses: u64,
    pub max_concurrent_ever: u32,
}

impl Walker {
    pub fn new(slots: usize, apps: usize, pwc: Option<(usize, usize)>) -> Self {
        let pwc = pwc.map(|(entries, assoc)| {
            assert!(entries % assoc == 0);
            SetAssoc::new(entries / assoc, assoc)
        });
        Walker {
            slots: vec![None; slots],
            pending: VecDeque::new(),
            pwc,
            active: 0,
            per_app_current: vec![0; apps],
            per_app_epoch_max: vec![0; apps],
            walks_started: 0,
            walks_completed: 0,
            pwc_hits: 0,
            pwc_misses: 0,
            max_concurrent_ever: 0,
        }
    }

    pub fn active_slots(&self) -> usize {
        self.active
    }

    pub fn queued(&self) -> usize {
        self.pending.len()
    }

    pub fn concurrent(&self, app: usize) -> u32 {
        self.per_app_current[app]
    }

    pub fn epoch_max(&self, app: usize) -> u8 {
        self.per_app_epoch_max[app]
    }

    pub fn reset_epoch_counters(&mut self) {
        for (max, &cur) in self
            .per_app_epoch_max
            .iter_mut()
            .zip(self.per_app_current.iter())
        {
            *max = cur.min(CONCURRENT_COUNTER_MAX as u32) as u8;
        }
    }

    fn bump_app(&mut self, app: usize) {
        self.per_app_current[app] += 1;
        let cur = self.per_app_current[app].min(CONCURRENT_COUNTER_MAX as u32) as u8;
        if cur > self.per_app_epoch_max[app] {
            self.per_app_epoch_max[app] = cur;
        }
        let total: u32 = self.per_app_current.iter().sum();
        if total > self.max_concurrent_ever {
            self.max_concurrent_ever = total;
        }
    }

    /// Starts a walk for an (asid, vpn) with no slot already active (the MSHR
    /// table guarantees uniqueness). Emits the level-1 request immediately,
    /// or queues the walk when all slots are busy.
    pub fn start(
        &mut self,
        asid: Asid,
        vpn: u64,
        app: usize,
        core: u16,
        waiters: Vec<u32>,
        tables: &PageTableSet,
        cycle: u64,
        events: &mut Vec<WalkerEvent>,
    ) -> Result<StartOutcome, AddressingError> {
        self.bump_app(app);
        match self.free_slot() {
            Some(slot) => {
                self.begin_in_slot(
                    slot,
                    PendingWalk {
                        asid,
                        vpn,
                        app,
                        core,
                        waiters,
                    },
                    tables,
                    cycle,
                    events,
                )?;
                Ok(StartOutcome::Started)
            }
            None => {
                self.pending.push_back(PendingWalk {
                    asid,
                    vpn,
                    app,
                    core,
                    waiters,
                });
                Ok(StartOutcome::Queued)
            }
        }
    }

    /// Memory data for `slot`'s current level arrived; advance the walk.
    pub fn on_level_complete(
        &mut self,
        slot: u8,
        tables: &PageTableSet,
        cycle: u64,
        events: &mut Vec<WalkerEvent>,
    ) -> Result<(), AddressingError> {
        let state = self.slots[slot as usize]
            .as_mut()
            .expect("level completion for an empty walk slot");
        let table = tables.table(state.asid);
        let child = table.child_frame(state.vpn, state.level, state.table_frame)?;
        if let Some(pwc) = &mut self.pwc {
            pwc.fill(
                PwcKey {
                    asid: state.asid,
                    level: state.level,
                    frame: state.table_frame,
                    index: crate::addressing::level_index(state.vpn, state.level),
                },
                child,
            );
        }
        if state.level == WALK_LEVELS {
            self.finish_slot(slot, child, tables, cycle, events)?;
        } else {
            state.level += 1;
            state.table_frame = child;
            self.step_slot(slot, tables, cycle, events)?;
        }
        Ok(())
    }

    fn free_slot(&self) -> Option<u8> {
        self.slots
            .iter()
            .position(|s| s.is_none())
            .map(|idx| idx as u8)
    }

    fn begin_in_slot(
        &mut self,
        slot: u8,
        walk: PendingWalk,
        tables: &PageTableSet,
        cycle: u64,
        events: &mut Vec<WalkerEvent>,
    ) -> Result<(), AddressingError> {
        debug_assert!(self.slots[slot as usize].is_none());
        let root = tables.table(walk.asid).root_frame();
        self.slots[slot as usize] = Some(WalkSlot {
            asid: walk.asid,
            vpn: walk.vpn,
            app: walk.app,
            core: walk.core,
            level: 1,
            table_frame: root,
            waiters: walk.waiters,
        });
        self.active += 1;
        self.walks_started += 1;
        self.step_slot(slot, tables, cycle, events)
    }

    /// Emits the memory request for the slot's current level, skipping levels
    /// that hit in the page walk cache.
    fn step_slot(
        &mut self,
        slot: u8,
        tables: &PageTableSet,
        cycle: u64,
        events: &mut Vec<WalkerEvent>,
    ) -> Result<(), AddressingError> {
        loop {
            let state = self.slots[slot as usize].as_mut().unwrap();
            let index = crate::addressing::level_index(state.vpn, state.level);
            if let Some(pwc) = &mut self.pwc {
                let key = PwcKey {
                    asid: state.asid,
                    level: state.level,
                    frame: state.table_frame,
                    index,
                };
                if let Some(child) = pwc.probe(key) {
                    self.pwc_hits += 1;
                    if state.level == WALK_LEVELS {
                        return self.finish_slot(slot, child, tables, cycle, events);
                    }
                    state.level += 1;
                    state.table_frame = child;
                    continue;
                }
                self.pwc_misses += 1;
            }
            let vaddr = crate::addressing::VirtualAddress::from_page(state.vpn, 0);
            events.push(WalkerEvent::Emit(MemoryRequest::walk(
                state.asid,
                vaddr,
                pte_address(state.table_frame, index),
                state.level,
                state.core,
                state.waiters.clone(),
                slot,
                cycle,
            )));
            return Ok(());
        }
    }

    fn finish_slot(
        &mut self,
        slot: u8,
        pfn: u64,
        tables: &PageTableSet,
        cycle: u64,
        events: &mut Vec<WalkerEvent>,
    ) -> Result<(), AddressingError> {
        let state = self.slots[slot as usize].take().unwrap();
        self.active -= 1;
        self.walks_completed += 1;
        self.per_app_current[state.app] -= 1;
        events.push(WalkerEvent::Completed {
            asid: state.asid,
            vpn: state.vpn,
            pfn,
        });
        // A freed slot immediately admits the oldest queued walk.
        if let Some(next) = self.pending.pop_front() {
            self.begin_in_slot(slot, next, tables, cycle, events)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addressing::{build_page_tables, Asid, RequestOrigin, VirtualAddress};
    use std::collections::BTreeSet;

    fn tables_with(vpns: &[u64]) -> PageTableSet {
        let pages: BTreeSet<u64> = vpns.iter().copied().collect();
        build_page_tables(&[(Asid(0), pages)], 7, 1 << 16).unwrap()
    }

    fn drive_walk_to_completion(
        walker: &mut Walker,
        tables: &PageTableSet,
        vpn: u64,
    ) -> (Vec<u8>, u64) {
        let mut events = Vec::new();
        walker
            .start(Asid(0), vpn, 0, 0, vec![0], tables, 0, &mut events)
            .unwrap();
        let mut depths = Vec::new();
        let mut pfn = None;
        while let Some(event) = events.pop() {
            match event {
                WalkerEvent::Emit(req) => {
                    depths.push(req.walk_depth.raw());
                    let RequestOrigin::Walk { slot } = req.origin else {
                        panic!("walk request with data origin");
                    };
                    walker
                        .on_level_complete(slot, tables, 0, &mut events)
                        .unwrap();
                }
                WalkerEvent::Completed { pfn: p, .. } => pfn = Some(p),
            }
        }
        (depths, pfn.expect("walk completed"))
    }

    #[test]
    fn fresh_walk_emits_levels_one_through_four() {
        let tables = tables_with(&[0x42]);
        let mut walker = Walker::new(64, 1, None);
        let (depths, pfn) = drive_walk_to_completion(&mut walker, &tables, 0x42);
        assert_eq!(depths, vec![1, 2, 3, 4]);
        let expect = tables
            .table(Asid(0))
            .translate(VirtualAddress::from_page(0x42, 0))
            .unwrap()
            .pfn();
        assert_eq!(pfn, expect);
        assert_eq!(walker.active_slots(), 0);
    }

    #[test]
    fn sixty_fifth_walk_queues() {
        let vpns: Vec<u64> = (0..65).collect();
        let tables = tables_with(&vpns);
        let mut walker = Walker::new(64, 1, None);
        let mut events = Vec::new();
        for &vpn in &vpns[..64] {
            let out = walker
                .start(Asid(0), vpn, 0, 0, vec![], &tables, 0, &mut events)
                .unwrap();
            assert_eq!(out, StartOutcome::Started);
        }
        let out = walker
            .start(Asid(0), 64, 0, 0, vec![], &tables, 0, &mut events)
            .unwrap();
        assert_eq!(out, StartOutcome::Queued);
        assert_eq!(walker.active_slots(), 64);
        assert_eq!(walker.queued(), 1);
        assert_eq!(walker.concurrent(0), 65);
        // 6-bit epoch counter saturates at 63.
        assert_eq!(walker.epoch_max(0), 63);

        // Completing one walk starts the queued one in the freed slot.
        events.clear();
        let mut evs = Vec::new();
        for _ in 0..4 {
            // Walk slot 0 (vpn 0) to completion.
            walker.on_level_complete(0, &tables, 0, &mut evs).unwrap();
        }
        assert!(evs
            .iter()
            .any(|e| matches!(e, WalkerEvent::Completed { vpn: 0, .. })));
        assert!(evs.iter().any(
            |e| matches!(e, WalkerEvent::Emit(req) if req.vaddr.vpn() == 64 && req.walk_depth.raw() == 1)
        ));
        assert_eq!(walker.active_slots(), 64);
        assert_eq!(walker.queued(), 0);
    }

    #[test]
    fn pwc_repeat_walk_hits_all_levels_with_zero_requests() {
        let tables = tables_with(&[0x99]);
        let mut walker = Walker::new(64, 1, Some((1024, 16)));
        let (depths, _) = drive_walk_to_completion(&mut walker, &tables, 0x99);
        assert_eq!(depths, vec![1, 2, 3, 4]); // cold cache: 4 misses
        let mut events = Vec::new();
        walker
            .start(Asid(0), 0x99, 0, 0, vec![], &tables, 1, &mut events)
            .unwrap();
        assert_eq!(events.len(), 1);
        assert!(matches!(
            events[0],
            WalkerEvent::Completed { vpn: 0x99, .. }
        ));
    }

    #[test]
    fn pwc_shared_prefix_issues_one_request_for_second_page() {
        // Pages differing only in the level-4 index share levels 1..3.
        let a = 0x1000;
        let b = 0x1001;
        let tables = tables_with(&[a, b]);
        let mut walker = Walker::new(64, 1, Some((1024, 16)));
        drive_walk_to_completion(&mut walker, &tables, a);
        let (depths, _) = drive_walk_to_completion(&mut walker, &tables, b);
        assert_eq!(depths, vec![4]);
    }

    #[test]
    fn epoch_reset_rebases_to_current_occupancy() {
        let vpns: Vec<u64> = (0..8).collect();
        let tables = tables_with(&vpns);
        let mut walker = Walker::new(64, 1, None);
        let mut events = Vec::new();
        for &vpn in &vpns {
            walker
                .start(Asid(0), vpn, 0, 0, vec![], &tables, 0, &mut events)
                .unwrap();
        }
        assert_eq!(walker.epoch_max(0), 8);
        // Complete one: current drops to 7; epoch max stays 8 until the reset.
        let mut evs = Vec::new();
        for _ in 0..4 {
            walker.on_level_complete(0, &tables, 0, &mut evs).unwrap();
        }
        assert_eq!(walker.concurrent(0), 7);
        assert_eq!(walker.epoch_max(0), 8);
        walker.reset_epoch_counters();
        assert_eq!(walker.epoch_max(0), 7);
    }
}
