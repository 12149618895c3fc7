//! Private L1 TLBs, the shared ASID-tagged L2 TLB with its bypass cache and
//! MSHR coalescing, and the epoch-driven fill-token controller.

use std::collections::BTreeMap;

use crate::addressing::Asid;
use crate::setassoc::{SetAssoc, SetKey};

/// Lookup key for every translation structure: ASID tag plus virtual page
/// number. Two address spaces never alias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TlbKey {
    pub asid: Asid,
    pub vpn: u64,
}

impl SetKey for TlbKey {
    fn set_index(&self, num_sets: usize) -> usize {
        (self.vpn % num_sets as u64) as usize
    }
}

/// A translation held by a TLB structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TlbEntry {
    pub asid: Asid,
    pub vpn: u64,
    pub pfn: u64,
}

fn sat16(c: &mut u16) {
    *c = c.saturating_add(1);
}

/// Per-core private L1 TLB (fully associative by default) with saturating
/// epoch hit/miss counters and cumulative totals for reporting.
#[derive(Debug, Clone)]
pub struct L1Tlb {
    store: SetAssoc<TlbKey, u64>,
    pub epoch_hits: u16,
    pub epoch_misses: u16,
    pub total_hits: u64,
    pub total_misses: u64,
}

impl L1Tlb {
    pub fn new(entries: usize) -> Self {
        L1Tlb {
            store: SetAssoc::new(1, entries),
            epoch_hits: 0,
            epoch_misses: 0,
            total_hits: 0,
            total_misses: 0,
        }
    }

    pub fn probe(&mut self, asid: Asid, vpn: u64) -> Option<u64> {
        match self.store.probe(TlbKey { asid, vpn }) {
            Some(pfn) => {
                sat16(&mut self.epoch_hits);
                self.total_hits += 1;
                Some(pfn)
            }
            None => {
                sat16(&mut self.epoch_misses);
                self.total_misses += 1;
                None
            }
        }
    }

    pub fn fill(&mut self, asid: Asid, vpn: u64, pfn: u64) {
        self.store.fill(TlbKey { asid, vpn }, pfn);
    }

    pub fn flush(&mut self) {
        self.store.clear();
    }

    pub fn reset_epoch_counters(&mut self) {
        self.epoch_hits = 0;
        self.epoch_misses = 0;
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }
}

/// Where an L2 probe hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum L2HitSource {
    Main,
    BypassCache,
}

/// Where a completed walk's translation was filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FillTarget {
    Main,
    Bypass,
}

/// The shared L2 TLB: a set-associative main array probed in parallel with a
/// small fully-associative bypass cache. A hit in either structure counts as
/// an L2 hit. Only fills are token-gated; every warp may probe.
#[derive(Debug, Clone)]
pub struct SharedTlb {
    main: SetAssoc<TlbKey, u64>,
    bypass: SetAssoc<TlbKey, u64>,
    /// Saturating per-core epoch counters driving the token controller.
    pub epoch_hits: Vec<u16>,
    pub epoch_misses: Vec<u16>,
    pub total_hits_main: u64,
    pub total_hits_bypass: u64,
    pub total_misses: u64,
    per_core_total_hits: Vec<u64>,
    per_core_total_misses: Vec<u64>,
}

impl SharedTlb {
    pub fn new(entries: usize, assoc: usize, bypass_entries: usize, cores: usize) -> Self {
        assert!(entries % assoc == 0);
        SharedTlb {
            main: SetAssoc::new(entries / assoc, assoc),
            bypass: SetAssoc::new(1, bypass_entries),
            epoch_hits: vec![0; cores],
            epoch_misses: vec![0; cores],
            total_hits_main: 0,
            total_hits_bypass: 0,
            total_misses: 0,
            per_core_total_hits: vec![0; cores],
            per_core_total_misses: vec![0; cores],
        }
    }

    /// Probes main array and bypass cache in parallel. Called only after an
    /// L1 miss that did not coalesce onto an existing MSHR.
    pub fn probe(&mut self, core: usize, asid: Asid, vpn: u64) -> Option<(u64, L2HitSource)> {
        let key = TlbKey { asid, vpn };
        if let Some(pfn) = self.main.probe(key) {
            sat16(&mut self.epoch_hits[core]);
            self.total_hits_main += 1;
            self.per_core_total_hits[core] += 1;
            return Some((pfn, L2HitSource::Main));
        }
        if let Some(pfn) = self.bypass.probe(key) {
            sat16(&mut self.epoch_hits[core]);
            self.total_hits_bypass += 1;
            self.per_core_total_hits[core] += 1;
            return Some((pfn, L2HitSource::BypassCache));
        }
        sat16(&mut self.epoch_misses[core]);
        self.total_misses += 1;
        self.per_core_total_misses[core] += 1;
        None
    }

    /// Fills a completed translation. Token holders fill the main array;
    /// token-less warps fill the bypass cache. Never both.
    pub fn fill(&mut self, entry: TlbEntry, warp_has_token: bool) -> FillTarget {
        let key = TlbKey {
            asid: entry.asid,
            vpn: entry.vpn,
        };
        if warp_has_token {
            debug_assert!(!self.bypass.contains(key));
            self.main.fill(key, entry.pfn);
            FillTarget::Main
        } else {
            debug_assert!(!self.main.contains(key));
            self.bypass.fill(key, entry.pfn);
            FillTarget::Bypass
        }
    }

    /// Invalidates every entry tagged with `asid` in both structures.
    pub fn flush_asid(&mut self, asid: Asid) {
        self.main.retain(|k| k.asid != asid);
        self.bypass.retain(|k| k.asid != asid);
    }

    pub fn reset_epoch_counters(&mut self) {
        self.epoch_hits.iter_mut().for_each(|c| *c = 0);
        self.epoch_misses.iter_mut().for_each(|c| *c = 0);
    }

    pub fn core_totals(&self, core: usize) -> (u64, u64) {
        (
            self.per_core_total_hits[core],
            self.per_core_total_misses[core],
        )
    }

    pub fn main_len(&self) -> usize {
        self.main.len()
    }

    pub fn bypass_len(&self) -> usize {
        self.bypass.len()
    }

    pub fn resident_in_main(&self, asid: Asid, vpn: u64) -> bool {
        self.main.contains(TlbKey { asid, vpn })
    }

    pub fn resident_in_bypass(&self, asid: Asid, vpn: u64) -> bool {
        self.bypass.contains(TlbKey { asid, vpn })
    }

    /// No key may live in the main array and the bypass cache at once.
    pub fn check_disjoint(&self) -> bool {
        self.bypass.iter_keys().all(|k| !self.main.contains(*k))
    }
}

const MSHR_WARP_COUNTER_MAX: u8 = 63;

/// In-flight translation miss and the warps coalesced onto it.
#[derive(Debug, Clone)]
pub struct Mshr {
    pub asid: Asid,
    pub vpn: u64,
    /// (core, global warp id) pairs stalled on this translation.
    pub waiters: Vec<(u16, u32)>,
    /// Saturating 6-bit high-water mark of coalesced warps.
    pub max_warps: u8,
    /// Warp that allocated the MSHR; its token status classifies the fill.
    pub allocator_warp: u32,
}

impl Mshr {
    fn add_waiter(&mut self, core: u16, warp: u32) {
        self.waiters.push((core, warp));
        if self.max_warps < MSHR_WARP_COUNTER_MAX {
            self.max_warps = self.waiters.len().min(MSHR_WARP_COUNTER_MAX as usize) as u8;
        }
    }
}

/// One MSHR per in-flight (asid, vpn).
#[derive(Debug, Clone, Default)]
pub struct MshrTable {
    entries: BTreeMap<(Asid, u64), Mshr>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MshrOutcome {
    Allocated,
    Coalesced,
}

impl MshrTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Allocates an MSHR for (asid, vpn) or coalesces onto the existing one.
    pub fn join(&mut self, asid: Asid, vpn: u64, core: u16, warp: u32) -> MshrOutcome {
        match self.entries.get_mut(&(asid, vpn)) {
            Some(mshr) => {
                mshr.add_waiter(core, warp);
                MshrOutcome::Coalesced
            }
            None => {
                let mut mshr = Mshr {
                    asid,
                    vpn,
                    waiters: Vec::new(),
                    max_warps: 0,
                    allocator_warp: warp,
                };
                mshr.add_waiter(core, warp);
                self.entries.insert((asid, vpn), mshr);
                MshrOutcome::Allocated
            }
        }
    }

    pub fn get(&self, asid: Asid, vpn: u64) -> Option<&Mshr> {
        self.entries.get(&(asid, vpn))
    }

    /// Removes a resolved MSHR, returning its waiters.
    pub fn resolve(&mut self, asid: Asid, vpn: u64) -> Option<Mshr> {
        self.entries.remove(&(asid, vpn))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_stalled_warps(&self) -> usize {
        self.entries.values().map(|m| m.waiters.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Mshr> {
        self.entries.values()
    }

    pub fn has_waiters_for_core(&self, core: u16) -> bool {
        self.entries
            .values()
            .any(|m| m.waiters.iter().any(|&(c, _)| c == core))
    }
}

/// How fill tokens are managed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenPolicy {
    /// Epoch hill-climbing on the per-application shared-TLB miss rate.
    Adaptive,
    /// Every warp always holds a token; fills are never diverted.
    AllWarps,
}

#[derive(Debug, Clone)]
struct AppTokens {
    total_warps: u32,
    count: u32,
    direction: i32,
    prev_miss_rate: Option<f64>,
    initialized: bool,
    cursor: usize,
}

/// Per-application token counts with round-robin, retention-first assignment
/// to warps.
#[derive(Debug, Clone)]
pub struct TokenController {
    policy: TokenPolicy,
    initial_fraction: f64,
    step_fraction: f64,
    apps: Vec<AppTokens>,
    /// Token flag per global warp index.
    pub flags: Vec<bool>,
}

impl TokenController {
    /// `app_warp_counts[i]` is the number of warps of application `i`;
    /// `total_warps` is the global warp count. All warps start with tokens
    /// (no gating before the first epoch boundary).
    pub fn new(
        policy: TokenPolicy,
        initial_fraction: f64,
        step_fraction: f64,
        app_warp_counts: &[u32],
        total_warps: usize,
    ) -> Self {
        let apps = app_warp_counts
            .iter()
            .map(|&total| AppTokens {
                total_warps: total,
                count: total,
                direction: -1,
                prev_miss_rate: None,
                initialized: false,
                cursor: 0,
            })
            .collect();
        TokenController {
            policy,
            initial_fraction,
            step_fraction,
            apps,
            flags: vec![true; total_warps],
        }
    }

    pub fn count(&self, app: usize) -> u32 {
        self.apps[app].count
    }

    pub fn has_token(&self, warp: u32) -> bool {
        self.flags[warp as usize]
    }

    /// Epoch-boundary token count update for one application, fed with that
    /// application's shared-TLB epoch counters.
    ///
    /// First boundary: count = floor(initial_fraction * total warps).
    /// Afterwards: hill-climb — an improved (strictly lower) miss rate keeps
    /// the current direction, anything else flips it, then the count steps by
    /// `step_fraction * total warps` (at least one warp), clamped to
    /// [1, total warps]. Epochs with no probes leave the state untouched.
    pub fn epoch_update(&mut self, app: usize, epoch_hits: u64, epoch_misses: u64) -> u32 {
        let state = &mut self.apps[app];
        if self.policy == TokenPolicy::AllWarps {
            state.count = state.total_warps;
            return state.count;
        }
        let probes = epoch_hits + epoch_misses;
        if probes == 0 {
            return state.count;
        }
        let rate = epoch_misses as f64 / probes as f64;
        if !state.initialized {
            state.initialized = true;
            state.count = ((self.initial_fraction * state.total_warps as f64).floor() as u32)
                .clamp(1, state.total_warps);
        } else {
            let improved = match state.prev_miss_rate {
                Some(prev) => rate < prev,
                None => false,
            };
            if !improved {
                state.direction = -state.direction;
            }
            let step = ((self.step_fraction * state.total_warps as f64).floor() as u32).max(1);
            let next = state.count as i64 + state.direction as i64 * step as i64;
            state.count = next.clamp(1, state.total_warps as i64) as u32;
        }
        state.prev_miss_rate = Some(rate);
        state.count
    }

    /// Reassigns tokens to warps: previous holders retain theirs first (in
    /// warp order), and any remaining tokens are handed out round-robin
    /// starting from where the previous epoch's assignment ended.
    /// `app_warps[i]` lists application i's global warp ids in
    /// (core, warp) order.
    pub fn assign(&mut self, app_warps: &[Vec<u32>]) {
        for (app, warps) in app_warps.iter().enumerate() {
            let count = self.apps[app].count.min(warps.len() as u32) as usize;
            let held: Vec<bool> = warps.iter().map(|&w| self.flags[w as usize]).collect();

            let mut selected = vec![false; warps.len()];
            let mut granted = 0usize;
            for (i, &was_held) in held.iter().enumerate() {
                if was_held && granted < count {
                    selected[i] = true;
                    granted += 1;
                }
            }
            let mut cursor = self.apps[app].cursor % warps.len().max(1);
            if granted < count {
                for _ in 0..warps.len() {
                    if !selected[cursor] {
                        selected[cursor] = true;
                        granted += 1;
                        if granted == count {
                            cursor = (cursor + 1) % warps.len();
                            break;
                        }
                    }
                    cursor = (cursor + 1) % warps.len();
                }
            }
            self.apps[app].cursor = cursor;
            for (i, &w) in warps.iter().enumerate() {
                self.flags[w as usize] = selected[i];
            }
        }
    }

    /// Forces a count (used by tests and the all-warps policy).
    pub fn set_count(&mut self, app: usize, count: u32) {
        self.apps[app].count = count;
    }

    pub fn total_count(&self) -> u64 {
        self.apps.iter().map(|a| a.count as u64).sum()
    }

    pub fn total_warps(&self) -> u64 {
        self.apps.iter().map(|a| a.total_warps as u64).sum()
    }
}
