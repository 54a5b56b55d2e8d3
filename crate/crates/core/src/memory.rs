//! In-memory tier: the stream buffer that receives incoming task data and the
//! episodic memory (EM) replayed during training.
//!
//! The EM is a fixed array of slots split into contiguous partitions. Each
//! partition sits behind its own `RwLock`, so a training reader and the swap
//! worker touching different partitions never contend, and a reader always
//! sees one complete sample (old or new), never a torn one.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::ops::Range;
use std::sync::{Mutex, RwLock, RwLockWriteGuard};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sample::Sample;

pub const DEFAULT_PARTITIONS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MemoryError {
    #[error("stream buffer full (capacity {capacity})")]
    BufferFull { capacity: usize },
    #[error("requested {requested} samples but only {available} slots are occupied")]
    InsufficientSamples { requested: usize, available: usize },
    #[error("slot {slot} out of range for memory of capacity {capacity}")]
    InvalidSlot { slot: usize, capacity: usize },
    #[error("slot {slot} is empty")]
    EmptySlot { slot: usize },
}

/// FIFO staging area for samples of the task currently arriving.
#[derive(Debug, Clone)]
pub struct StreamBuffer {
    entries: Vec<Sample>,
    capacity: usize,
}

impl StreamBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "stream buffer capacity must be positive");
        StreamBuffer {
            entries: Vec::with_capacity(capacity),
            capacity,
        }
    }

    pub fn enqueue(&mut self, sample: Sample) -> Result<(), MemoryError> {
        if self.entries.len() >= self.capacity {
            return Err(MemoryError::BufferFull {
                capacity: self.capacity,
            });
        }
        self.entries.push(sample);
        Ok(())
    }

    pub fn entries(&self) -> &[Sample] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Empties the buffer, handing back its contents in arrival order.
    pub fn drain(&mut self) -> Vec<Sample> {
        std::mem::take(&mut self.entries)
    }
}

/// How the EM decides which samples to keep when it is full.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdatePolicy {
    /// Every observed class owns an equal share of slots, each share used as a FIFO ring.
    RingBufferEqualClass,
    /// Classical reservoir sampling over the whole stream.
    Reservoir,
    /// Admit a sample only if its class is not among the largest, evicting from a largest class.
    GreedyBalanced,
}

#[derive(Debug, Default)]
struct PolicyState {
    seen_count: u64,
    observed: BTreeSet<u32>,
    /// Ring policy only: occupied slots per class, oldest first.
    rings: BTreeMap<u32, VecDeque<usize>>,
}

/// Fixed-capacity, partitioned replay memory.
#[derive(Debug)]
pub struct EpisodicMemory {
    capacity: usize,
    ranges: Vec<Range<usize>>,
    partitions: Vec<RwLock<Vec<Option<Sample>>>>,
    policy: UpdatePolicy,
    state: Mutex<PolicyState>,
}

impl EpisodicMemory {
    pub fn new(capacity: usize, policy: UpdatePolicy) -> Self {
        Self::with_partitions(capacity, DEFAULT_PARTITIONS, policy)
    }

    /// Splits `[0, capacity)` into `partitions` contiguous ranges of near-equal size.
    /// The partition count is clamped to `[1, capacity]`.
    pub fn with_partitions(capacity: usize, partitions: usize, policy: UpdatePolicy) -> Self {
        let count = partitions.clamp(1, capacity.max(1));
        let base = capacity / count;
        let extra = capacity % count;
        let mut ranges = Vec::with_capacity(count);
        let mut start = 0;
        for p in 0..count {
            let len = base + usize::from(p < extra);
            ranges.push(start..start + len);
            start += len;
        }
        let partitions = ranges
            .iter()
            .map(|r| RwLock::new(vec![None; r.len()]))
            .collect();
        EpisodicMemory {
            capacity,
            ranges,
            partitions,
            policy,
            state: Mutex::new(PolicyState::default()),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn policy(&self) -> UpdatePolicy {
        self.policy
    }

    pub fn partition_ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn partition_of(&self, slot: usize) -> Option<usize> {
        if slot >= self.capacity {
            return None;
        }
        Some(self.ranges.partition_point(|r| r.end <= slot))
    }

    /// Number of samples ever offered to [`update`](Self::update).
    pub fn seen_count(&self) -> u64 {
        self.state.lock().unwrap().seen_count
    }

    pub fn get(&self, slot: usize) -> Result<Option<Sample>, MemoryError> {
        let p = self.partition_of(slot).ok_or(MemoryError::InvalidSlot {
            slot,
            capacity: self.capacity,
        })?;
        let guard = self.partitions[p].read().unwrap();
        Ok(guard[slot - self.ranges[p].start].clone())
    }

    /// Copy of every slot, in slot order.
    pub fn snapshot(&self) -> Vec<Option<Sample>> {
        let mut out = Vec::with_capacity(self.capacity);
        for part in &self.partitions {
            out.extend(part.read().unwrap().iter().cloned());
        }
        out
    }

    pub fn occupied(&self) -> usize {
        self.partitions
            .iter()
            .map(|p| p.read().unwrap().iter().filter(|s| s.is_some()).count())
            .sum()
    }

    pub fn class_counts(&self) -> BTreeMap<u32, usize> {
        let mut counts = BTreeMap::new();
        for part in &self.partitions {
            for s in part.read().unwrap().iter().flatten() {
                *counts.entry(s.label).or_insert(0) += 1;
            }
        }
        counts
    }

    pub fn observed_classes(&self) -> BTreeSet<u32> {
        self.state.lock().unwrap().observed.clone()
    }

    /// Slot share of `label` under the ring policy, given the classes observed so far.
    pub fn class_quota(&self, label: u32) -> usize {
        let state = self.state.lock().unwrap();
        ring_quota(&state.observed, self.capacity, label)
    }

    /// Offers `incoming` to the memory in order, applying the update policy.
    ///
    /// Returns every sample that did not end up in memory: both displaced
    /// residents and incoming samples that were not admitted. Nothing is
    /// dropped; the caller forwards the result to storage.
    pub fn update<R: Rng + ?Sized>(&self, incoming: Vec<Sample>, rng: &mut R) -> Vec<Sample> {
        let mut state = self.state.lock().unwrap();
        let mut slots = SlotsMut::lock(self);
        let mut evicted = Vec::new();
        match self.policy {
            UpdatePolicy::Reservoir => {
                for s in incoming {
                    state.observed.insert(s.label);
                    state.seen_count += 1;
                    if let Some(free) = slots.first_free() {
                        slots.put(free, s);
                    } else {
                        let j = rng.random_range(0..state.seen_count);
                        if (j as usize) < self.capacity {
                            evicted.push(slots.put(j as usize, s).expect("full memory"));
                        } else {
                            evicted.push(s);
                        }
                    }
                }
            }
            UpdatePolicy::GreedyBalanced => {
                let mut by_class = slots.slots_by_class();
                for s in incoming {
                    state.observed.insert(s.label);
                    state.seen_count += 1;
                    if let Some(free) = slots.first_free() {
                        by_class.entry(s.label).or_default().push(free);
                        slots.put(free, s);
                        continue;
                    }
                    let max = by_class.values().map(Vec::len).max().unwrap_or(0);
                    let own = by_class.get(&s.label).map_or(0, Vec::len);
                    if own >= max {
                        evicted.push(s);
                        continue;
                    }
                    let largest: Vec<u32> = by_class
                        .iter()
                        .filter(|(_, v)| v.len() == max)
                        .map(|(&c, _)| c)
                        .collect();
                    let victim_class = largest[rng.random_range(0..largest.len())];
                    let members = by_class.get_mut(&victim_class).unwrap();
                    let slot = members.swap_remove(rng.random_range(0..members.len()));
                    by_class.entry(s.label).or_default().push(slot);
                    evicted.push(slots.put(slot, s).expect("occupied victim slot"));
                }
            }
            UpdatePolicy::RingBufferEqualClass => {
                let state = &mut *state;
                resync_rings(&mut state.rings, &slots);
                for s in incoming {
                    state.seen_count += 1;
                    if state.observed.insert(s.label) {
                        // a new class shrinks everyone's share
                        for (&c, ring) in state.rings.iter_mut() {
                            let quota = ring_quota(&state.observed, self.capacity, c);
                            while ring.len() > quota {
                                let slot = ring.pop_front().unwrap();
                                evicted.push(slots.take(slot).expect("ring slot occupied"));
                            }
                        }
                    }
                    let quota = ring_quota(&state.observed, self.capacity, s.label);
                    let ring = state.rings.entry(s.label).or_default();
                    if quota == 0 {
                        evicted.push(s);
                    } else if ring.len() < quota {
                        let free = slots.first_free().expect("quotas sum to capacity");
                        ring.push_back(free);
                        slots.put(free, s);
                    } else {
                        let oldest = ring.pop_front().unwrap();
                        ring.push_back(oldest);
                        evicted.push(slots.put(oldest, s).expect("ring slot occupied"));
                    }
                }
            }
        }
        evicted
    }

    /// Draws `k` distinct occupied slots uniformly at random, copying their samples out.
    pub fn draw<R: Rng + ?Sized>(
        &self,
        k: usize,
        rng: &mut R,
    ) -> Result<Vec<(usize, Sample)>, MemoryError> {
        loop {
            let occupied: Vec<usize> = self
                .ranges
                .iter()
                .zip(&self.partitions)
                .flat_map(|(range, part)| {
                    let guard = part.read().unwrap();
                    range
                        .clone()
                        .zip(guard.iter())
                        .filter(|(_, s)| s.is_some())
                        .map(|(i, _)| i)
                        .collect::<Vec<_>>()
                })
                .collect();
            if k > occupied.len() {
                return Err(MemoryError::InsufficientSamples {
                    requested: k,
                    available: occupied.len(),
                });
            }
            let picked: Option<Vec<_>> = index::sample(rng, occupied.len(), k)
                .into_iter()
                .map(|i| {
                    let slot = occupied[i];
                    self.get(slot).ok().flatten().map(|s| (slot, s))
                })
                .collect();
            // a slot can only vanish under a concurrent `update`; retry on a fresh listing
            if let Some(picked) = picked {
                return Ok(picked);
            }
        }
    }

    /// Overwrites an occupied slot in place and returns its previous occupant.
    pub fn replace(&self, slot: usize, replacement: Sample) -> Result<Sample, MemoryError> {
        let p = self.partition_of(slot).ok_or(MemoryError::InvalidSlot {
            slot,
            capacity: self.capacity,
        })?;
        let mut guard = self.partitions[p].write().unwrap();
        let cell = &mut guard[slot - self.ranges[p].start];
        match cell {
            Some(old) => Ok(std::mem::replace(old, replacement)),
            None => Err(MemoryError::EmptySlot { slot }),
        }
    }
}

fn ring_quota(observed: &BTreeSet<u32>, capacity: usize, label: u32) -> usize {
    let k = observed.len();
    if k == 0 {
        return 0;
    }
    let Some(rank) = observed.iter().position(|&c| c == label) else {
        return 0;
    };
    capacity / k + usize::from(rank < capacity % k)
}

/// Drops ring entries whose slot no longer holds that class and appends
/// slots that hold a class but are missing from its ring.
fn resync_rings(rings: &mut BTreeMap<u32, VecDeque<usize>>, slots: &SlotsMut<'_>) {
    let mut tracked = BTreeSet::new();
    for (&c, ring) in rings.iter_mut() {
        ring.retain(|&slot| slots.label(slot) == Some(c) && tracked.insert(slot));
    }
    for slot in 0..slots.capacity {
        if let Some(label) = slots.label(slot) {
            if !tracked.contains(&slot) {
                rings.entry(label).or_default().push_back(slot);
            }
        }
    }
}

/// All partitions write-locked at once, addressed by global slot index.
struct SlotsMut<'a> {
    capacity: usize,
    ranges: &'a [Range<usize>],
    guards: Vec<RwLockWriteGuard<'a, Vec<Option<Sample>>>>,
}

impl<'a> SlotsMut<'a> {
    fn lock(em: &'a EpisodicMemory) -> Self {
        SlotsMut {
            capacity: em.capacity,
            ranges: &em.ranges,
            guards: em.partitions.iter().map(|p| p.write().unwrap()).collect(),
        }
    }

    fn cell(&mut self, slot: usize) -> &mut Option<Sample> {
        let p = self.ranges.partition_point(|r| r.end <= slot);
        let start = self.ranges[p].start;
        &mut self.guards[p][slot - start]
    }

    fn label(&self, slot: usize) -> Option<u32> {
        let p = self.ranges.partition_point(|r| r.end <= slot);
        self.guards[p][slot - self.ranges[p].start]
            .as_ref()
            .map(|s| s.label)
    }

    fn first_free(&self) -> Option<usize> {
        self.ranges.iter().zip(&self.guards).find_map(|(r, g)| {
            g.iter().position(Option::is_none).map(|i| r.start + i)
        })
    }

    fn put(&mut self, slot: usize, s: Sample) -> Option<Sample> {
        self.cell(slot).replace(s)
    }

    fn take(&mut self, slot: usize) -> Option<Sample> {
        self.cell(slot).take()
    }

    fn slots_by_class(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for slot in 0..self.capacity {
            if let Some(label) = self.label(slot) {
                map.entry(label).or_default().push(slot);
            }
        }
        map
    }
}
