use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};

use parking_lot::{Condvar, Mutex, RwLock, RwLockReadGuard};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::CacheError;

/// A cache entry's identity: a run of `entry_bytes` within one region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct GroupId {
    pub region_id: u16,
    pub group: u64,
}

impl GroupId {
    pub fn new(region_id: u16, group: u64) -> Self {
        GroupId { region_id, group }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SlotState {
    Empty,
    Filling { group: GroupId, generation: u64 },
    Valid { group: GroupId },
    /// Out of the index but still pinned by someone.
    Stale,
}

struct Slot {
    data: RwLock<Box<[u8]>>,
    refcount: AtomicU32,
}

struct Meta {
    index: HashMap<GroupId, usize>,
    state: Vec<SlotState>,
    free: Vec<usize>,
    generations: HashMap<GroupId, u64>,
    rng: ChaCha8Rng,
}

impl Meta {
    fn generation(&self, g: GroupId) -> u64 {
        self.generations.get(&g).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableStats {
    pub fills: u64,
    pub aborted_fills: u64,
    pub evictions: u64,
    pub invalidations: u64,
}

/// Fixed set of equal-size slots indexed by group id. Slots with a positive
/// refcount are never evicted; victims are drawn uniformly among the rest.
pub struct CacheTable {
    entry_bytes: usize,
    slots: Vec<Slot>,
    meta: Mutex<Meta>,
    cond: Condvar,
    fills: AtomicU64,
    aborted: AtomicU64,
    evictions: AtomicU64,
    invalidations: AtomicU64,
}

/// Read access to a cached group. The slot cannot be evicted while held.
pub struct Pin<'a> {
    table: &'a CacheTable,
    slot: usize,
    pub group: GroupId,
}

impl Pin<'_> {
    pub fn data(&self) -> RwLockReadGuard<'_, Box<[u8]>> {
        self.table.slots[self.slot].data.read()
    }

    pub fn slot(&self) -> usize {
        self.slot
    }

    pub fn refcount(&self) -> u32 {
        self.table.slots[self.slot].refcount.load(Ordering::Acquire)
    }
}

impl Drop for Pin<'_> {
    fn drop(&mut self) {
        self.table.slots[self.slot].refcount.fetch_sub(1, Ordering::AcqRel);
    }
}

pub enum Lookup<'a> {
    Hit(Pin<'a>),
    /// Being filled; only returned by [`CacheTable::try_lookup`].
    Pending,
    Miss,
}

impl<'a> Lookup<'a> {
    pub fn is_hit(&self) -> bool {
        matches!(self, Lookup::Hit(_))
    }

    pub fn pin(self) -> Option<Pin<'a>> {
        match self {
            Lookup::Hit(p) => Some(p),
            Lookup::Pending | Lookup::Miss => None,
        }
    }
}

/// Permission to fill one slot, from [`CacheTable::begin_fill`].
#[derive(Debug)]
#[must_use]
pub struct FillTicket {
    slot: usize,
    group: GroupId,
    generation: u64,
}

impl FillTicket {
    pub fn group(&self) -> GroupId {
        self.group
    }
}

impl CacheTable {
    pub fn new(cache_bytes: u64, entry_bytes: usize, seed: u64) -> Result<CacheTable, CacheError> {
        if entry_bytes == 0 {
            return Err(CacheError::Config("entry size must be positive".into()));
        }
        let n = (cache_bytes / entry_bytes as u64) as usize;
        if n == 0 {
            return Err(CacheError::Config(format!("cache of {cache_bytes} bytes holds no {entry_bytes}-byte entry")));
        }
        let slots = (0..n).map(|_| Slot { data: RwLock::new(Box::default()), refcount: AtomicU32::new(0) }).collect();
        Ok(CacheTable {
            entry_bytes,
            slots,
            meta: Mutex::new(Meta {
                index: HashMap::new(),
                state: vec![SlotState::Empty; n],
                free: (0..n).rev().collect(),
                generations: HashMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            }),
            cond: Condvar::new(),
            fills: AtomicU64::new(0),
            aborted: AtomicU64::new(0),
            evictions: AtomicU64::new(0),
            invalidations: AtomicU64::new(0),
        })
    }

    pub fn entry_bytes(&self) -> usize {
        self.entry_bytes
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn len(&self) -> usize {
        self.meta.lock().state.iter().filter(|s| matches!(s, SlotState::Valid { .. })).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, group: GroupId) -> bool {
        let m = self.meta.lock();
        m.index.get(&group).is_some_and(|&s| matches!(m.state[s], SlotState::Valid { .. }))
    }

    /// Present or being filled.
    pub fn is_tracked(&self, group: GroupId) -> bool {
        self.meta.lock().index.contains_key(&group)
    }

    /// Pin `group` if cached. A lookup that finds the group being filled
    /// waits for the fill to finish.
    pub fn lookup(&self, group: GroupId) -> Lookup<'_> {
        let mut m = self.meta.lock();
        loop {
            let Some(&slot) = m.index.get(&group) else { return Lookup::Miss };
            match m.state[slot] {
                SlotState::Valid { .. } => {
                    self.slots[slot].refcount.fetch_add(1, Ordering::AcqRel);
                    return Lookup::Hit(Pin { table: self, slot, group });
                }
                SlotState::Filling { .. } => self.cond.wait(&mut m),
                SlotState::Empty | SlotState::Stale => return Lookup::Miss,
            }
        }
    }

    /// Like [`lookup`](Self::lookup) but reports an in-progress fill instead
    /// of waiting for it.
    pub fn try_lookup(&self, group: GroupId) -> Lookup<'_> {
        let m = self.meta.lock();
        let Some(&slot) = m.index.get(&group) else { return Lookup::Miss };
        match m.state[slot] {
            SlotState::Valid { .. } => {
                self.slots[slot].refcount.fetch_add(1, Ordering::AcqRel);
                Lookup::Hit(Pin { table: self, slot, group })
            }
            SlotState::Filling { .. } => Lookup::Pending,
            SlotState::Empty | SlotState::Stale => Lookup::Miss,
        }
    }

    /// Reserve a slot for `group`. `None` when the group is already present or
    /// every slot is pinned or being filled.
    pub fn begin_fill(&self, group: GroupId) -> Option<FillTicket> {
        let mut m = self.meta.lock();
        if m.index.contains_key(&group) {
            return None;
        }
        let slot = self.take_slot(&mut m)?;
        let generation = m.generation(group);
        m.state[slot] = SlotState::Filling { group, generation };
        m.index.insert(group, slot);
        Some(FillTicket { slot, group, generation })
    }

    fn take_slot(&self, m: &mut Meta) -> Option<usize> {
        if let Some(s) = m.free.pop() {
            return Some(s);
        }
        let stale = (0..self.slots.len())
            .find(|&s| m.state[s] == SlotState::Stale && self.slots[s].refcount.load(Ordering::Acquire) == 0);
        if stale.is_some() {
            return stale;
        }
        let victim = self.pick_victim(m)?;
        if let SlotState::Valid { group } = m.state[victim] {
            m.index.remove(&group);
        }
        m.state[victim] = SlotState::Empty;
        self.evictions.fetch_add(1, Ordering::Relaxed);
        Some(victim)
    }

    fn pick_victim(&self, m: &mut Meta) -> Option<usize> {
        let candidates: Vec<usize> = (0..self.slots.len())
            .filter(|&s| {
                matches!(m.state[s], SlotState::Valid { .. }) && self.slots[s].refcount.load(Ordering::Acquire) == 0
            })
            .collect();
        if candidates.is_empty() {
            return None;
        }
        let i = m.rng.gen_range(0..candidates.len());
        Some(candidates[i])
    }

    /// Install the fetched bytes. Dropped if the group was invalidated since
    /// `begin_fill`. Returns whether the data became visible.
    pub fn complete_fill(&self, ticket: FillTicket, data: &[u8]) -> bool {
        {
            let mut slot = self.slots[ticket.slot].data.write();
            if slot.len() == data.len() {
                slot.copy_from_slice(data);
            } else {
                *slot = data.to_vec().into_boxed_slice();
            }
        }
        let mut m = self.meta.lock();
        let current = m.generation(ticket.group) == ticket.generation && m.index.get(&ticket.group) == Some(&ticket.slot);
        if current {
            m.state[ticket.slot] = SlotState::Valid { group: ticket.group };
            self.fills.fetch_add(1, Ordering::Relaxed);
        } else {
            self.release_ticket(&mut m, &ticket);
            self.aborted.fetch_add(1, Ordering::Relaxed);
        }
        drop(m);
        self.cond.notify_all();
        current
    }

    pub fn abort_fill(&self, ticket: FillTicket) {
        let mut m = self.meta.lock();
        self.release_ticket(&mut m, &ticket);
        self.aborted.fetch_add(1, Ordering::Relaxed);
        drop(m);
        self.cond.notify_all();
    }

    fn release_ticket(&self, m: &mut Meta, ticket: &FillTicket) {
        if m.index.get(&ticket.group) == Some(&ticket.slot) {
            m.index.remove(&ticket.group);
        }
        m.state[ticket.slot] = SlotState::Empty;
        m.free.push(ticket.slot);
    }

    /// Drop `group` and make any fill of it already in progress void.
    pub fn invalidate(&self, group: GroupId) {
        let mut m = self.meta.lock();
        *m.generations.entry(group).or_insert(0) += 1;
        if let Some(&slot) = m.index.get(&group) {
            match m.state[slot] {
                SlotState::Valid { .. } => {
                    m.index.remove(&group);
                    if self.slots[slot].refcount.load(Ordering::Acquire) == 0 {
                        m.state[slot] = SlotState::Empty;
                        m.free.push(slot);
                    } else {
                        m.state[slot] = SlotState::Stale;
                    }
                    self.invalidations.fetch_add(1, Ordering::Relaxed);
                }
                SlotState::Filling { .. } => {
                    m.index.remove(&group);
                    self.invalidations.fetch_add(1, Ordering::Relaxed);
                }
                SlotState::Empty | SlotState::Stale => {}
            }
        }
        drop(m);
        self.cond.notify_all();
    }

    /// Invalidate every group of one region.
    pub fn invalidate_region(&self, region_id: u16) {
        let groups: Vec<GroupId> = self.meta.lock().index.keys().filter(|g| g.region_id == region_id).copied().collect();
        for g in groups {
            self.invalidate(g);
        }
    }

    /// Evict one random unpinned entry. Used to apply pressure in tests.
    pub fn evict_random(&self) -> Option<GroupId> {
        let mut m = self.meta.lock();
        let victim = self.pick_victim(&mut m)?;
        let SlotState::Valid { group } = m.state[victim] else { unreachable!("victims are valid") };
        m.index.remove(&group);
        m.state[victim] = SlotState::Empty;
        m.free.push(victim);
        self.evictions.fetch_add(1, Ordering::Relaxed);
        Some(group)
    }

    pub fn stats(&self) -> TableStats {
        TableStats {
            fills: self.fills.load(Ordering::Relaxed),
            aborted_fills: self.aborted.load(Ordering::Relaxed),
            evictions: self.evictions.load(Ordering::Relaxed),
            invalidations: self.invalidations.load(Ordering::Relaxed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fill(t: &CacheTable, g: u64, byte: u8) {
        let ticket = t.begin_fill(GroupId::new(1, g)).expect("slot");
        assert!(t.complete_fill(ticket, &[byte; 8]));
    }

    #[test]
    fn hit_pins_and_release_unpins() {
        let t = CacheTable::new(32, 8, 1).unwrap();
        assert_eq!(t.slot_count(), 4);
        assert!(!t.lookup(GroupId::new(1, 0)).is_hit());
        fill(&t, 0, 3);
        let pin = t.lookup(GroupId::new(1, 0)).pin().unwrap();
        assert_eq!(pin.refcount(), 1);
        assert_eq!(&**pin.data(), &[3; 8]);
        let slot = pin.slot();
        drop(pin);
        assert_eq!(t.slots[slot].refcount.load(Ordering::Relaxed), 0);
    }

    #[test]
    fn pinned_slots_survive_pressure() {
        let t = CacheTable::new(16, 8, 7).unwrap();
        fill(&t, 0, 0);
        fill(&t, 1, 1);
        let pin = t.lookup(GroupId::new(1, 0)).pin().unwrap();
        for g in 2..50 {
            fill(&t, g, g as u8);
            assert!(t.contains(GroupId::new(1, 0)));
        }
        assert_eq!(&**pin.data(), &[0; 8]);
        drop(pin);
        let p2 = t.lookup(GroupId::new(1, 49)).pin().unwrap();
        assert!(t.begin_fill(GroupId::new(1, 99)).is_some_and(|tk| t.complete_fill(tk, &[9; 8])));
        drop(p2);
    }

    #[test]
    fn all_pinned_means_no_fill() {
        let t = CacheTable::new(8, 8, 7).unwrap();
        fill(&t, 0, 0);
        let _pin = t.lookup(GroupId::new(1, 0)).pin().unwrap();
        assert!(t.begin_fill(GroupId::new(1, 1)).is_none());
    }

    #[test]
    fn invalidation_voids_inflight_fill() {
        let t = CacheTable::new(32, 8, 1).unwrap();
        let g = GroupId::new(1, 5);
        let ticket = t.begin_fill(g).unwrap();
        t.invalidate(g);
        assert!(!t.complete_fill(ticket, &[1; 8]));
        assert!(!t.lookup(g).is_hit());
        fill(&t, 5, 2);
        t.invalidate(g);
        assert!(!t.contains(g));
        assert_eq!(t.stats().invalidations, 2);
    }

    #[test]
    fn invalidating_pinned_entry_defers_reuse() {
        let t = CacheTable::new(8, 8, 1).unwrap();
        fill(&t, 0, 4);
        let pin = t.lookup(GroupId::new(1, 0)).pin().unwrap();
        t.invalidate(GroupId::new(1, 0));
        assert!(t.begin_fill(GroupId::new(1, 1)).is_none());
        assert_eq!(&**pin.data(), &[4; 8]);
        drop(pin);
        fill(&t, 1, 5);
    }
}
