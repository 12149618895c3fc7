//! Multi-channel DRAM with per-bank row buffers.
//!
//! Two scheduling modes share the bank/row timing model:
//!
//! * single-queue FR-FCFS (the baseline request buffer), and
//! * the translation-aware three-queue scheduler: walk requests enter a small
//!   FIFO served with strict priority, one quota-selected application's data
//!   requests enter the second queue, everything else lands in the third.
//!   Quotas come from per-application concurrent-walk and stalled-warp
//!   counters snapshotted every epoch.
//!
//! Timing is deliberately lumped: a row hit and a row miss each cost one
//! fixed latency, plus a burst occupancy during which the channel cannot
//! start another service. The mechanisms under study depend on ordering,
//! not nanosecond fidelity.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use crate::addressing::MemoryRequest;

#[derive(Debug, Clone)]
pub struct DramConfig {
    pub channels: usize,
    pub banks_per_channel: usize,
    pub row_bytes: u64,
    pub line_bytes: u64,
    pub row_hit_latency: u64,
    pub row_miss_latency: u64,
    pub burst_cycles: u64,
    pub single_queue_entries: usize,
    pub golden_entries: usize,
    pub silver_entries: usize,
    pub normal_entries: usize,
    pub three_queue: bool,
    pub thres_max: u64,
    /// Cycles without an enqueue from the silver application before the
    /// rotation moves on.
    pub idle_window: u64,
}

impl Default for DramConfig {
    fn default() -> Self {
        DramConfig {
            channels: 8,
            banks_per_channel: 8,
            row_bytes: 2048,
            line_bytes: 128,
            row_hit_latency: 20,
            row_miss_latency: 50,
            burst_cycles: 4,
            single_queue_entries: 256,
            golden_entries: 16,
            silver_entries: 64,
            normal_entries: 192,
            three_queue: false,
            thres_max: 500,
            idle_window: 1000,
        }
    }
}

/// thres_i per application: each application's share of thres_max weighted by
/// concurrent walks times stalled warps. A zero denominator splits equally.
pub fn compute_quotas(thres_max: u64, per_app: &[(u64, u64)]) -> Vec<u64> {
    let products: Vec<u64> = per_app.iter().map(|&(c, w)| c * w).collect();
    let denom: u64 = products.iter().sum();
    if denom == 0 {
        let n = per_app.len().max(1) as u64;
        return vec![thres_max / n; per_app.len()];
    }
    products
        .iter()
        .map(|&p| thres_max * p / denom)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueueId {
    Golden,
    Silver,
    Normal,
}

#[derive(Debug, Clone)]
struct QueuedRequest {
    req: MemoryRequest,
    row: u64,
    bank: usize,
    arrival: u64,
    seq: u64,
}

#[derive(Debug, Clone, Copy)]
struct Bank {
    open_row: Option<u64>,
    busy_until: u64,
}

#[derive(Debug)]
struct InService {
    done: u64,
    seq: u64,
    entry: QueuedRequest,
    queue: QueueId,
    row_hit: bool,
}

impl PartialEq for InService {
    fn eq(&self, other: &Self) -> bool {
        (self.done, self.seq) == (other.done, other.seq)
    }
}
impl Eq for InService {}
impl PartialOrd for InService {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for InService {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.done, self.seq).cmp(&(other.done, other.seq))
    }
}

#[derive(Debug)]
struct Channel {
    golden: VecDeque<QueuedRequest>,
    silver: VecDeque<QueuedRequest>,
    normal: VecDeque<QueuedRequest>,
    staging: VecDeque<(MemoryRequest, u64)>,
    banks: Vec<Bank>,
    bus_free_at: u64,
    in_service: BinaryHeap<Reverse<InService>>,
}

impl Channel {
    fn new(banks: usize) -> Self {
        Channel {
            golden: VecDeque::new(),
            silver: VecDeque::new(),
            normal: VecDeque::new(),
            staging: VecDeque::new(),
            banks: vec![
                Bank {
                    open_row: None,
                    busy_until: 0
                };
                banks
            ],
            bus_free_at: 0,
            in_service: BinaryHeap::new(),
        }
    }

    fn occupancy(&self) -> usize {
        self.golden.len()
            + self.silver.len()
            + self.normal.len()
            + self.staging.len()
            + self.in_service.len()
    }
}

/// A serviced request handed back to the engine, with its measured DRAM
/// residency (staging arrival to completion).
#[derive(Debug)]
pub struct DramCompletion {
    pub req: MemoryRequest,
    pub latency: u64,
    pub queue: QueueId,
    pub row_hit: bool,
}

#[derive(Debug, Default, Clone)]
pub struct DramStats {
    pub enqueued: u64,
    pub serviced: u64,
    pub data_serviced: u64,
    pub data_latency_sum: u64,
    pub walk_serviced: u64,
    pub walk_latency_sum: u64,
    pub row_hits: u64,
    pub golden_serviced: u64,
    pub silver_serviced: u64,
    pub normal_serviced: u64,
    pub silver_admissions: Vec<u64>,
    pub silver_admissions_epoch: Vec<u64>,
}

#[derive(Debug)]
pub struct Dram {
    cfg: DramConfig,
    channels: Vec<Channel>,
    seq: u64,
    /// Remaining silver budget per application for the current epoch.
    budgets: Vec<u64>,
    current_app: usize,
    last_silver_activity: u64,
    /// Channel subset per application (address interleaving domain); `None`
    /// means all applications interleave over every channel.
    channel_partitions: Option<Vec<Vec<usize>>>,
    pub stats: DramStats,
}

impl Dram {
    pub fn new(cfg: DramConfig, apps: usize) -> Self {
        let channels = (0..cfg.channels)
            .map(|_| Channel::new(cfg.banks_per_channel))
            .collect();
        let budgets = compute_quotas(cfg.thres_max, &vec![(0, 0); apps]);
        Dram {
            channels,
            seq: 0,
            budgets,
            current_app: 0,
            last_silver_activity: 0,
            channel_partitions: None,
            stats: DramStats {
                silver_admissions: vec![0; apps],
                silver_admissions_epoch: vec![0; apps],
                ..Default::default()
            },
            cfg,
        }
    }

    pub fn set_channel_partitions(&mut self, partitions: Vec<Vec<usize>>) {
        self.channel_partitions = Some(partitions);
    }

    /// (channel, bank, row) for a physical address, honoring the issuing
    /// application's channel subset. Channels interleave on low line-address
    /// bits; rows live above the bank bits.
    pub fn decode(&self, paddr: u64, app: usize) -> (usize, usize, u64) {
        let line = paddr / self.cfg.line_bytes;
        let (channel, widthless) = match &self.channel_partitions {
            Some(parts) => {
                let set = &parts[app];
                (set[(line % set.len() as u64) as usize], line / set.len() as u64)
            }
            None => (
                (line % self.cfg.channels as u64) as usize,
                line / self.cfg.channels as u64,
            ),
        };
        let bank = (widthless % self.cfg.banks_per_channel as u64) as usize;
        let above = widthless / self.cfg.banks_per_channel as u64;
        let lines_per_row = (self.cfg.row_bytes / self.cfg.line_bytes).max(1);
        let row = above / lines_per_row;
        (channel, bank, row)
    }

    /// Hands a request to its channel's staging buffer; queue placement
    /// happens in `tick`, preserving arrival order under backpressure.
    pub fn push(&mut self, req: MemoryRequest, app: usize, cycle: u64) {
        let (channel, _, _) = self.decode(req.paddr.expect("dram request without paddr").0, app);
        self.channels[channel].staging.push_back((req, cycle));
    }

    /// Epoch boundary: recompute silver quotas from the per-application
    /// (concurrent walks, stalled warps) counter snapshot and reset the
    /// admission counters and rotation.
    pub fn epoch_reset(&mut self, per_app_counters: &[(u64, u64)], cycle: u64) {
        self.budgets = compute_quotas(self.cfg.thres_max, per_app_counters);
        self.stats
            .silver_admissions_epoch
            .iter_mut()
            .for_each(|c| *c = 0);
        self.current_app = self
            .budgets
            .iter()
            .position(|&b| b > 0)
            .unwrap_or(0);
        self.last_silver_activity = cycle;
    }

    pub fn budget(&self, app: usize) -> u64 {
        self.budgets[app]
    }

    pub fn current_app(&self) -> usize {
        self.current_app
    }

    fn advance_rotation(&mut self, cycle: u64) {
        let napps = self.budgets.len();
        for offset in 1..=napps {
            let candidate = (self.current_app + offset) % napps;
            if self.budgets[candidate] > 0 {
                self.current_app = candidate;
                self.last_silver_activity = cycle;
                return;
            }
        }
        // No budget anywhere: rotation parks; all data requests go Normal.
        self.last_silver_activity = cycle;
    }

    /// Queue placement rule in three-queue mode: walks always go Golden; the
    /// quota-selected application's data goes Silver while budget remains;
    /// everything else goes Normal.
    fn classify(&mut self, is_walk: bool, app: usize, cycle: u64) -> QueueId {
        if is_walk {
            return QueueId::Golden;
        }
        if app == self.current_app {
            self.last_silver_activity = cycle;
            if self.budgets[app] > 0 {
                return QueueId::Silver;
            }
        }
        QueueId::Normal
    }

    /// One cycle for every channel: deliver completions, drain staging into
    /// the queues, then start at most one service per channel.
    pub fn tick(
        &mut self,
        cycle: u64,
        app_of_asid: &dyn Fn(crate::addressing::Asid) -> usize,
    ) -> Vec<DramCompletion> {
        let mut completions = Vec::new();
        // Idle silver application: move on so it cannot park the rotation.
        if self.cfg.three_queue
            && self.budgets.iter().any(|&b| b > 0)
            && cycle.saturating_sub(self.last_silver_activity) > self.cfg.idle_window
        {
            self.advance_rotation(cycle);
        }

        for ch in 0..self.channels.len() {
            // 1. Completions due this cycle.
            while let Some(Reverse(head)) = self.channels[ch].in_service.peek() {
                if head.done > cycle {
                    break;
                }
                let Reverse(svc) = self.channels[ch].in_service.pop().unwrap();
                self.stats.serviced += 1;
                if svc.row_hit {
                    self.stats.row_hits += 1;
                }
                match svc.queue {
                    QueueId::Golden => self.stats.golden_serviced += 1,
                    QueueId::Silver => self.stats.silver_serviced += 1,
                    QueueId::Normal => self.stats.normal_serviced += 1,
                }
                let latency = svc.done - svc.entry.arrival;
                if svc.entry.req.walk_depth.is_walk() {
                    self.stats.walk_serviced += 1;
                    self.stats.walk_latency_sum += latency;
                } else {
                    self.stats.data_serviced += 1;
                    self.stats.data_latency_sum += latency;
                }
                completions.push(DramCompletion {
                    req: svc.entry.req,
                    latency,
                    queue: svc.queue,
                    row_hit: svc.row_hit,
                });
            }

            // 2. Staging into queues, in arrival order, stopping at the first
            //    request whose target queue is full.
            loop {
                let Some((req, _)) = self.channels[ch].staging.front() else {
                    break;
                };
                let app = app_of_asid(req.asid);
                let is_walk = req.walk_depth.is_walk();
                let target = if self.cfg.three_queue {
                    self.classify(is_walk, app, cycle)
                } else {
                    QueueId::Normal
                };
                let (queue_len, cap) = match target {
                    QueueId::Golden => (self.channels[ch].golden.len(), self.cfg.golden_entries),
                    QueueId::Silver => (self.channels[ch].silver.len(), self.cfg.silver_entries),
                    QueueId::Normal => {
                        let cap = if self.cfg.three_queue {
                            self.cfg.normal_entries
                        } else {
                            self.cfg.single_queue_entries
                        };
                        (self.channels[ch].normal.len(), cap)
                    }
                };
                if queue_len >= cap {
                    break;
                }
                let (req, arrival) = self.channels[ch].staging.pop_front().unwrap();
                let (_, bank, row) = self.decode(req.paddr.unwrap().0, app);
                self.seq += 1;
                let entry = QueuedRequest {
                    req,
                    row,
                    bank,
                    arrival,
                    seq: self.seq,
                };
                self.stats.enqueued += 1;
                match target {
                    QueueId::Golden => self.channels[ch].golden.push_back(entry),
                    QueueId::Silver => {
                        self.budgets[app] -= 1;
                        self.stats.silver_admissions[app] += 1;
                        self.stats.silver_admissions_epoch[app] += 1;
                        self.channels[ch].silver.push_back(entry);
                        if self.budgets[app] == 0 {
                            self.advance_rotation(cycle);
                        }
                    }
                    QueueId::Normal => self.channels[ch].normal.push_back(entry),
                }
            }

            // 3. Start one service if the channel bus is free.
            if self.channels[ch].bus_free_at > cycle {
                continue;
            }
            if let Some((queue, idx)) = self.pick(ch, cycle) {
                let entry = match queue {
                    QueueId::Golden => self.channels[ch].golden.remove(idx).unwrap(),
                    QueueId::Silver => self.channels[ch].silver.remove(idx).unwrap(),
                    QueueId::Normal => self.channels[ch].normal.remove(idx).unwrap(),
                };
                let bank = &mut self.channels[ch].banks[entry.bank];
                let row_hit = bank.open_row == Some(entry.row);
                let (latency, bank_busy) = if row_hit {
                    (self.cfg.row_hit_latency, self.cfg.burst_cycles)
                } else {
                    (
                        self.cfg.row_miss_latency,
                        self.cfg.burst_cycles + (self.cfg.row_miss_latency - self.cfg.row_hit_latency),
                    )
                };
                bank.open_row = Some(entry.row);
                bank.busy_until = cycle + bank_busy;
                self.channels[ch].bus_free_at = cycle + self.cfg.burst_cycles;
                self.seq += 1;
                self.channels[ch].in_service.push(Reverse(InService {
                    done: cycle + latency,
                    seq: self.seq,
                    entry,
                    queue,
                    row_hit,
                }));
            }
        }
        completions
    }

    /// Scheduling decision for one channel. Golden is FIFO and strictly
    /// first: when its head's bank is free it wins outright. Silver then
    /// Normal are FR-FCFS: the oldest row-buffer hit among requests with a
    /// free bank, else the oldest request with a free bank.
    fn pick(&self, ch: usize, cycle: u64) -> Option<(QueueId, usize)> {
        let channel = &self.channels[ch];
        let bank_free =
            |entry: &QueuedRequest| channel.banks[entry.bank].busy_until <= cycle;

        if let Some(head) = channel.golden.front() {
            if bank_free(head) {
                return Some((QueueId::Golden, 0));
            }
            // FIFO head blocked on its bank: golden yields this cycle.
        }
        for (queue, list) in [
            (QueueId::Silver, &channel.silver),
            (QueueId::Normal, &channel.normal),
        ] {
            let mut best_hit: Option<(u64, usize)> = None;
            let mut best_any: Option<(u64, usize)> = None;
            for (idx, entry) in list.iter().enumerate() {
                if !bank_free(entry) {
                    continue;
                }
                let is_hit = channel.banks[entry.bank].open_row == Some(entry.row);
                if is_hit && best_hit.map_or(true, |(s, _)| entry.seq < s) {
                    best_hit = Some((entry.seq, idx));
                }
                if best_any.map_or(true, |(s, _)| entry.seq < s) {
                    best_any = Some((entry.seq, idx));
                }
            }
            if let Some((_, idx)) = best_hit.or(best_any) {
                return Some((queue, idx));
            }
        }
        None
    }

    /// Total requests currently inside the DRAM subsystem.
    pub fn in_flight(&self) -> usize {
        self.channels.iter().map(|c| c.occupancy()).sum()
    }

    /// Conservation audit: everything handed to `push` has been serviced and
    /// delivered exactly once.
    pub fn conservation_ok(&self) -> bool {
        self.in_flight() == 0 && self.stats.enqueued == self.stats.serviced
    }
}
