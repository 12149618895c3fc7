//! Trace-driven, cycle-approximate simulator of a GPU memory hierarchy under
//! concurrent multi-address-space execution.
//!
//! The model covers private L1 TLBs, a shared ASID-tagged L2 TLB, a shared
//! multi-threaded page-table walker, a banked shared L2 data cache, and a
//! multi-channel DRAM with row-buffer state. On top of the baseline it
//! implements three translation-aware mechanisms that can be enabled
//! independently: TLB-fill tokens with a bypass cache, walk-depth-aware L2
//! cache bypassing, and a three-queue DRAM scheduler that prioritizes page
//! walks while rotating one application's data traffic through a reserved
//! queue.
//!
//! A workload generator, experiment harness, metrics (weighted speedup, max
//! slowdown, hit/latency breakdowns), and a CLI live in the same crate; see
//! the `workload`, `experiment`, and `metrics` modules and `src/bin/masksim.rs`.

pub mod addressing;
pub mod dram;
pub mod l2cache;
pub mod setassoc;
pub mod tlb;
pub mod walker;

pub use addressing::{Asid, MemoryRequest, PhysicalAddress, VirtualAddress, WalkDepth};
