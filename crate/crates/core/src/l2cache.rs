//! Shared L2 data cache serving data requests and page-walk reads.
//!
//! Tags only: the simulator tracks hit/miss timing, not byte contents (page
//! table nodes come from the page table structure). Lines allocate at access
//! time, so cache content is a pure function of the access sequence. Writes
//! are write-through no-allocate. Per-walk-depth hit-rate counters drive the
//! epoch bypass decision: a walk level whose previous-epoch hit rate fell
//! below the data hit rate skips the cache entirely until a later epoch
//! reverses the decision.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};
use std::ops::Range;

use crate::addressing::MemoryRequest;
use crate::setassoc::SetAssoc;

pub const BYPASS_CLASSES: usize = 8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassCount {
    pub hits: u64,
    pub accesses: u64,
}

impl ClassCount {
    fn rate(&self) -> f64 {
        if self.accesses == 0 {
            0.0
        } else {
            self.hits as f64 / self.accesses as f64
        }
    }
}

/// Per-walk-depth cache hit statistics and the bypass decisions derived from
/// them at each epoch boundary.
#[derive(Debug, Clone)]
pub struct BypassStats {
    pub epoch: [ClassCount; BYPASS_CLASSES],
    pub cumulative: [ClassCount; BYPASS_CLASSES],
    decisions: [bool; BYPASS_CLASSES],
    min_samples: u64,
}

impl BypassStats {
    pub fn new(min_samples: u64) -> Self {
        BypassStats {
            epoch: Default::default(),
            cumulative: Default::default(),
            decisions: [false; BYPASS_CLASSES],
            min_samples,
        }
    }

    pub fn record(&mut self, class: u8, hit: bool) {
        let class = class as usize;
        self.epoch[class].accesses += 1;
        self.cumulative[class].accesses += 1;
        if hit {
            self.epoch[class].hits += 1;
            self.cumulative[class].hits += 1;
        }
    }

    /// True when walk requests of `depth` should skip the cache this epoch.
    /// Depth 0 (data) never bypasses.
    pub fn should_bypass(&self, depth: u8) -> bool {
        depth != 0 && self.decisions[depth as usize]
    }

    pub fn decision(&self, depth: u8) -> bool {
        self.decisions[depth as usize]
    }

    /// Epoch boundary: recompute decisions from the finished epoch's rates.
    /// Classes with fewer than `min_samples` accesses (on either side of the
    /// comparison) inherit the prior decision, then epoch counters reset.
    pub fn refresh_decisions(&mut self) {
        let data = self.epoch[0];
        for class in 1..BYPASS_CLASSES {
            let walk = self.epoch[class];
            if walk.accesses >= self.min_samples && data.accesses >= self.min_samples {
                self.decisions[class] = walk.rate() < data.rate();
            }
        }
        self.epoch = Default::default();
    }

    /// Forces a decision (tests of the degenerate configurations).
    pub fn set_decision(&mut self, depth: u8, bypass: bool) {
        self.decisions[depth as usize] = bypass;
    }
}

/// What happens to a request submitted to the cache.
#[derive(Debug)]
pub enum CacheOutcome {
    /// Read hit; completion delivered after the hit latency.
    HitAfter(MemoryRequest),
    /// Read miss (line allocated) or write-through: forward to DRAM.
    MissToDram(MemoryRequest),
}

#[derive(Debug)]
struct PendingHit {
    done: u64,
    seq: u64,
    req: MemoryRequest,
}

impl PartialEq for PendingHit {
    fn eq(&self, other: &Self) -> bool {
        (self.done, self.seq) == (other.done, other.seq)
    }
}
impl Eq for PendingHit {}
impl PartialOrd for PendingHit {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for PendingHit {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.done, self.seq).cmp(&(other.done, other.seq))
    }
}

/// Banked, set-associative shared cache with a fixed hit latency and one
/// serviced access per bank per cycle.
#[derive(Debug)]
pub struct L2Cache {
    tags: SetAssoc<u64, ()>,
    bank_queues: Vec<VecDeque<MemoryRequest>>,
    hits_in_flight: BinaryHeap<Reverse<PendingHit>>,
    line_shift: u32,
    hit_latency: u64,
    seq: u64,
    /// Way range per application when statically partitioned.
    way_partitions: Option<Vec<Range<usize>>>,
    pub stats: BypassStats,
    pub bypassed_walks: u64,
    pub write_accesses: u64,
}

impl L2Cache {
    pub fn new(
        total_bytes: u64,
        assoc: usize,
        line_bytes: u64,
        banks: usize,
        hit_latency: u64,
        min_bypass_samples: u64,
    ) -> Self {
        let lines = (total_bytes / line_bytes) as usize;
        assert!(lines % assoc == 0);
        assert!(line_bytes.is_power_of_two());
        L2Cache {
            tags: SetAssoc::new(lines / assoc, assoc),
            bank_queues: (0..banks).map(|_| VecDeque::new()).collect(),
            hits_in_flight: BinaryHeap::new(),
            line_shift: line_bytes.trailing_zeros(),
            hit_latency,
            seq: 0,
            way_partitions: None,
            stats: BypassStats::new(min_bypass_samples),
            bypassed_walks: 0,
            write_accesses: 0,
        }
    }

    /// Restricts line allocation of application `i` to `partitions[i]`.
    pub fn set_way_partitions(&mut self, partitions: Vec<Range<usize>>) {
        self.way_partitions = Some(partitions);
    }

    pub fn line_of(&self, paddr: u64) -> u64 {
        paddr >> self.line_shift
    }

    pub fn bank_of(&self, paddr: u64) -> usize {
        (self.line_of(paddr) % self.bank_queues.len() as u64) as usize
    }

    /// Queues a request on its bank port. The caller has already made the
    /// bypass decision for walk requests.
    pub fn submit(&mut self, req: MemoryRequest) {
        let bank = self.bank_of(req.paddr.expect("cache access without paddr").0);
        self.bank_queues[bank].push_back(req);
    }

    pub fn pending_ports(&self) -> usize {
        self.bank_queues.iter().map(|q| q.len()).sum::<usize>() + self.hits_in_flight.len()
    }

    /// One cycle: each bank services at most one queued access. Returns
    /// completed hits and the requests that move on to DRAM.
    pub fn tick(&mut self, cycle: u64, app_of_asid: &dyn Fn(crate::addressing::Asid) -> usize)
        -> (Vec<MemoryRequest>, Vec<MemoryRequest>) {
        let mut to_dram = Vec::new();
        for bank in 0..self.bank_queues.len() {
            let Some(req) = self.bank_queues[bank].pop_front() else {
                continue;
            };
            let line = self.line_of(req.paddr.unwrap().0);
            let class = req.walk_depth.raw();
            if req.is_write {
                // Write-through, no-allocate: probe refreshes LRU on a hit,
                // misses never allocate, and the write always goes to DRAM.
                self.write_accesses += 1;
                let hit = self.tags.probe(line).is_some();
                self.stats.record(class, hit);
                to_dram.push(req);
                continue;
            }
            let hit = self.tags.probe(line).is_some();
            self.stats.record(class, hit);
            if hit {
                self.seq += 1;
                self.hits_in_flight.push(Reverse(PendingHit {
                    done: cycle + self.hit_latency,
                    seq: self.seq,
                    req,
                }));
            } else {
                match &self.way_partitions {
                    Some(parts) => {
                        let ways = parts[app_of_asid(req.asid)].clone();
                        self.tags.fill_in_ways(line, (), ways);
                    }
                    None => {
                        self.tags.fill(line, ());
                    }
                }
                to_dram.push(req);
            }
        }

        let mut done = Vec::new();
        while let Some(Reverse(head)) = self.hits_in_flight.peek() {
            if head.done > cycle {
                break;
            }
            done.push(self.hits_in_flight.pop().unwrap().0.req);
        }
        (done, to_dram)
    }

    pub fn contains_line(&self, paddr: u64) -> bool {
        self.tags.contains(self.line_of(paddr))
    }

    pub fn resident_lines(&self) -> Vec<u64> {
        let mut lines: Vec<u64> = self.tags.iter_keys().copied().collect();
        lines.sort_unstable();
        lines
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addressing::{Asid, MemoryRequest, PhysicalAddress, VirtualAddress};

    fn read(paddr: u64, depth: u8) -> MemoryRequest {
        let mut req = MemoryRequest::data(
            Asid(0),
            VirtualAddress(0),
            PhysicalAddress(paddr),
            false,
            0,
            0,
            0,
        );
        if depth > 0 {
            req.walk_depth = crate::addressing::WalkDepth::for_level(depth);
        }
        req
    }

    fn write(paddr: u64) -> MemoryRequest {
        MemoryRequest::data(
            Asid(0),
            VirtualAddress(0),
            PhysicalAddress(paddr),
            true,
            0,
            0,
            0,
        )
    }

    fn small_cache() -> L2Cache {
        // 4 sets x 2 ways, 128 B lines, 1 bank, 10-cycle hits.
        L2Cache::new(8 * 128, 2, 128, 1, 10, 32)
    }

    fn app0(_: Asid) -> usize {
        0
    }

    #[test]
    fn second_access_to_same_line_hits() {
        let mut cache = small_cache();
        cache.submit(read(0x1000, 0));
        let (_, dram) = cache.tick(0, &app0);
        assert_eq!(dram.len(), 1); // cold miss
        cache.submit(read(0x1040, 0)); // same 128 B line
        let (_, dram) = cache.tick(1, &app0);
        assert!(dram.is_empty());
        let (done, _) = cache.tick(11, &app0);
        assert_eq!(done.len(), 1);
    }

    #[test]
    fn same_cycle_bank_conflict_serializes() {
        let mut cache = small_cache();
        cache.submit(read(0x1000, 0));
        cache.submit(read(0x1000, 0));
        let (_, dram) = cache.tick(0, &app0);
        assert_eq!(dram.len(), 1);
        // Second access waits a cycle, then hits the just-allocated line.
        let (_, dram) = cache.tick(1, &app0);
        assert!(dram.is_empty());
    }

    #[test]
    fn writes_are_write_through_no_allocate() {
        let mut cache = small_cache();
        cache.submit(write(0x2000));
        let (done, dram) = cache.tick(0, &app0);
        assert!(done.is_empty());
        assert_eq!(dram.len(), 1);
        assert!(!cache.contains_line(0x2000));
        // A write hit also forwards to DRAM but keeps the line.
        cache.submit(read(0x3000, 0));
        cache.tick(1, &app0);
        cache.submit(write(0x3000));
        let (_, dram) = cache.tick(2, &app0);
        assert_eq!(dram.len(), 1);
        assert!(cache.contains_line(0x3000));
    }

    #[test]
    fn bypass_rule_compares_against_data_class() {
        let mut stats = BypassStats::new(32);
        for i in 0..100 {
            stats.record(0, i % 10 < 7); // data: 70 %
            stats.record(4, i % 10 < 3); // depth 4: 30 %
            stats.record(1, i % 10 < 9); // depth 1: 90 %
        }
        stats.refresh_decisions();
        assert!(stats.should_bypass(4));
        assert!(!stats.should_bypass(1));
        assert!(!stats.should_bypass(0));
    }

    #[test]
    fn first_epoch_defaults_to_fill() {
        let stats = BypassStats::new(32);
        for depth in 0..8 {
            assert!(!stats.should_bypass(depth));
        }
    }

    #[test]
    fn sparse_classes_inherit_previous_decision() {
        let mut stats = BypassStats::new(32);
        for i in 0..100 {
            stats.record(0, i % 10 < 7);
            stats.record(4, false);
        }
        stats.refresh_decisions();
        assert!(stats.should_bypass(4));
        // Next epoch the bypassed class produces no samples: decision sticks.
        for i in 0..100 {
            stats.record(0, i % 10 < 7);
        }
        stats.refresh_decisions();
        assert!(stats.should_bypass(4));
    }

    #[test]
    fn per_class_stats_recomputable_from_access_log() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        let mut cache = L2Cache::new(16 * 128, 2, 128, 2, 10, 32);
        let mut log: Vec<(u8, bool)> = Vec::new();
        let mut reference = crate::setassoc::SetAssoc::<u64, ()>::new(8, 2);
        let mut t = 0u64;
        for _ in 0..5_000 {
            let depth = rng.random_range(0..5u8);
            let paddr = rng.random_range(0..64u64) * 128;
            let line = paddr >> 7;
            let hit = reference.probe(line).is_some();
            if !hit {
                reference.fill(line, ());
            }
            log.push((depth, hit));
            cache.submit(read(paddr, depth));
            // One access in flight at a time, so probe order matches
            // submission order.
            cache.tick(t, &app0);
            t += 1;
        }
        let mut expect = [ClassCount::default(); BYPASS_CLASSES];
        for (depth, hit) in log {
            expect[depth as usize].accesses += 1;
            if hit {
                expect[depth as usize].hits += 1;
            }
        }
        for class in 0..BYPASS_CLASSES {
            assert_eq!(cache.stats.cumulative[class], expect[class]);
        }
    }
}
