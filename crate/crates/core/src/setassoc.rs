//! Generic set-associative tag store with LRU replacement.
//!
//! Backs the private L1 TLBs, the shared L2 TLB, the bypass cache, the page
//! walk cache, and the shared L2 data cache tags. Ways have fixed positions
//! so that replacement can be restricted to a sub-range of ways (used by the
//! statically partitioned cache configuration).

use std::ops::Range;

/// Keys know which set they live in.
pub trait SetKey: Copy + Eq {
    fn set_index(&self, num_sets: usize) -> usize;
}

#[derive(Debug, Clone)]
struct Slot<K, V> {
    key: K,
    value: V,
    stamp: u64,
}

#[derive(Debug, Clone)]
pub struct SetAssoc<K: SetKey, V: Copy> {
    sets: Vec<Vec<Option<Slot<K, V>>>>,
    assoc: usize,
    stamp: u64,
}

impl<K: SetKey, V: Copy> SetAssoc<K, V> {
    pub fn new(num_sets: usize, assoc: usize) -> Self {
        assert!(num_sets > 0 && assoc > 0);
        SetAssoc {
            sets: vec![vec![None; assoc]; num_sets],
            assoc,
            stamp: 0,
        }
    }

    pub fn num_sets(&self) -> usize {
        self.sets.len()
    }

    pub fn assoc(&self) -> usize {
        self.assoc
    }

    /// Looks up `key`, refreshing its LRU stamp on a hit.
    pub fn probe(&mut self, key: K) -> Option<V> {
        let set = key.set_index(self.sets.len());
        self.stamp += 1;
        let stamp = self.stamp;
        for slot in self.sets[set].iter_mut().flatten() {
            if slot.key == key {
                slot.stamp = stamp;
                return Some(slot.value);
            }
        }
        None
    }

    /// Lookup without touching LRU state.
    pub fn peek(&self, key: K) -> Option<V> {
        let set = key.set_index(self.sets.len());
        self.sets[set]
            .iter()
            .flatten()
            .find(|slot| slot.key == key)
            .map(|slot| slot.value)
    }

    pub fn contains(&self, key: K) -> bool {
        self.peek(key).is_some()
    }

    /// Inserts `key`, evicting the LRU way of its set if the set is full.
    /// Returns the evicted entry, if any.
    pub fn fill(&mut self, key: K, value: V) -> Option<(K, V)> {
        let assoc = self.assoc;
        self.fill_in_ways(key, value, 0..assoc)
    }

    /// Inserts `key` using only `ways` for free-way search and victim
    /// selection. A key already resident anywhere in the set is refreshed in
    /// place.
    pub fn fill_in_ways(&mut self, key: K, value: V, ways: Range<usize>) -> Option<(K, V)> {
        debug_assert!(ways.start < ways.end && ways.end <= self.assoc);
        let set = key.set_index(self.sets.len());
        self.stamp += 1;
        let stamp = self.stamp;
        let slots = &mut self.sets[set];

        for slot in slots.iter_mut().flatten() {
            if slot.key == key {
                slot.value = value;
                slot.stamp = stamp;
                return None;
            }
        }

        let mut victim = None;
        let mut victim_stamp = u64::MAX;
        for way in ways {
            match &slots[way] {
                None => {
                    slots[way] = Some(Slot { key, value, stamp });
                    return None;
                }
                Some(slot) if slot.stamp < victim_stamp => {
                    victim_stamp = slot.stamp;
                    victim = Some(way);
                }
                Some(_) => {}
            }
        }
        let way = victim.expect("non-empty way range");
        let old = slots[way].replace(Slot { key, value, stamp });
        old.map(|s| (s.key, s.value))
    }

    pub fn invalidate(&mut self, key: K) -> bool {
        let set = key.set_index(self.sets.len());
        for slot in self.sets[set].iter_mut() {
            if matches!(slot, Some(s) if s.key == key) {
                *slot = None;
                return true;
            }
        }
        false
    }

    /// Drops every entry whose key fails `keep`.
    pub fn retain(&mut self, mut keep: impl FnMut(&K) -> bool) {
        for set in &mut self.sets {
            for slot in set.iter_mut() {
                if matches!(slot, Some(s) if !keep(&s.key)) {
                    *slot = None;
                }
            }
        }
    }

    pub fn clear(&mut self) {
        for set in &mut self.sets {
            for slot in set.iter_mut() {
                *slot = None;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.sets.iter().flatten().flatten().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter_keys(&self) -> impl Iterator<Item = &K> {
        self.sets.iter().flatten().flatten().map(|s| &s.key)
    }
}

impl SetKey for u64 {
    fn set_index(&self, num_sets: usize) -> usize {
        (*self % num_sets as u64) as usize
    }
}
