//! Set-associative LRU storage shared by the TLB, cache and 3C models.
//!
//! Every set is an intrusive doubly-linked recency list over a fixed block of
//! `ways` slots; a hash index maps keys to slots so lookups stay O(1) even for
//! fully-associative structures with thousands of entries.

use std::hash::Hash;

use rustc_hash::FxHashMap;

const NIL: u32 = u32::MAX;

#[derive(Clone, Debug)]
struct Slot<K, V> {
    key: K,
    value: V,
    prev: u32,
    next: u32,
    live: bool,
}

#[derive(Clone, Debug)]
pub struct SetAssocLru<K, V> {
    sets: usize,
    ways: usize,
    slots: Vec<Slot<K, V>>,
    // Most recently used at the head.
    head: Vec<u32>,
    tail: Vec<u32>,
    len: Vec<u32>,
    index: FxHashMap<K, u32>,
}

impl<K, V> SetAssocLru<K, V>
where
    K: Copy + Eq + Hash + Default,
    V: Copy + Default,
{
    pub fn new(sets: usize, ways: usize) -> Self {
        assert!(sets >= 1 && ways >= 1, "empty LRU geometry");
        let total = sets * ways;
        assert!(total < NIL as usize, "LRU too large");
        let slots = (0..total)
            .map(|_| Slot { key: K::default(), value: V::default(), prev: NIL, next: NIL, live: false })
            .collect();
        Self {
            sets,
            ways,
            slots,
            head: vec![NIL; sets],
            tail: vec![NIL; sets],
            len: vec![0; sets],
            index: FxHashMap::default(),
        }
    }

    #[inline]
    pub fn sets(&self) -> usize {
        self.sets
    }

    #[inline]
    pub fn capacity(&self) -> usize {
        self.sets * self.ways
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    #[inline]
    fn set_of_slot(&self, slot: u32) -> usize {
        slot as usize / self.ways
    }

    fn unlink(&mut self, slot: u32) {
        let set = self.set_of_slot(slot);
        let (prev, next) = {
            let s = &self.slots[slot as usize];
            (s.prev, s.next)
        };
        if prev == NIL {
            self.head[set] = next;
        } else {
            self.slots[prev as usize].next = next;
        }
        if next == NIL {
            self.tail[set] = prev;
        } else {
            self.slots[next as usize].prev = prev;
        }
        let s = &mut self.slots[slot as usize];
        s.prev = NIL;
        s.next = NIL;
    }

    fn push_front(&mut self, slot: u32) {
        let set = self.set_of_slot(slot);
        let old = self.head[set];
        {
            let s = &mut self.slots[slot as usize];
            s.prev = NIL;
            s.next = old;
        }
        if old == NIL {
            self.tail[set] = slot;
        } else {
            self.slots[old as usize].prev = slot;
        }
        self.head[set] = slot;
    }

    /// Looks a key up and promotes it to most-recently-used.
    #[inline]
    pub fn get(&mut self, key: &K) -> Option<V> {
        let slot = *self.index.get(key)?;
        let set = self.set_of_slot(slot);
        if self.head[set] != slot {
            self.unlink(slot);
            self.push_front(slot);
        }
        Some(self.slots[slot as usize].value)
    }

    /// Looks a key up without touching recency.
    pub fn peek(&self, key: &K) -> Option<V> {
        self.index.get(key).map(|&s| self.slots[s as usize].value)
    }

    /// Inserts `key` into `set` as most-recently-used.
    ///
    /// An existing entry for `key` is updated in place. Returns the evicted
    /// least-recently-used entry when the set was full.
    pub fn insert(&mut self, set: usize, key: K, value: V) -> Option<(K, V)> {
        debug_assert!(set < self.sets);
        if let Some(&slot) = self.index.get(&key) {
            debug_assert_eq!(self.set_of_slot(slot), set, "key moved between sets");
            self.slots[slot as usize].value = value;
            self.unlink(slot);
            self.push_front(slot);
            return None;
        }
        let mut evicted = None;
        let slot = if (self.len[set] as usize) < self.ways {
            let base = set * self.ways;
            let free = (base..base + self.ways).find(|&i| !self.slots[i].live).expect("set has a free slot") as u32;
            self.len[set] += 1;
            free
        } else {
            let victim = self.tail[set];
            self.unlink(victim);
            let old = &self.slots[victim as usize];
            evicted = Some((old.key, old.value));
            self.index.remove(&old.key);
            victim
        };
        {
            let s = &mut self.slots[slot as usize];
            s.key = key;
            s.value = value;
            s.live = true;
        }
        self.push_front(slot);
        self.index.insert(key, slot);
        evicted
    }

    pub fn remove(&mut self, key: &K) -> Option<V> {
        let slot = self.index.remove(key)?;
        self.unlink(slot);
        let set = self.set_of_slot(slot);
        self.len[set] -= 1;
        let s = &mut self.slots[slot as usize];
        s.live = false;
        Some(s.value)
    }

    /// Keys of one set from most- to least-recently-used.
    pub fn recency_order(&self, set: usize) -> Vec<K> {
        let mut out = Vec::with_capacity(self.len[set] as usize);
        let mut cur = self.head[set];
        while cur != NIL {
            out.push(self.slots[cur as usize].key);
            cur = self.slots[cur as usize].next;
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = (K, V)> + '_ {
        self.slots.iter().filter(|s| s.live).map(|s| (s.key, s.value))
    }

    pub fn clear(&mut self) {
        for s in &mut self.slots {
            s.live = false;
            s.prev = NIL;
            s.next = NIL;
        }
        self.head.fill(NIL);
        self.tail.fill(NIL);
        self.len.fill(0);
        self.index.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evicts_least_recent() {
        let mut lru: SetAssocLru<u64, u64> = SetAssocLru::new(1, 3);
        assert_eq!(lru.insert(0, 1, 10), None);
        assert_eq!(lru.insert(0, 2, 20), None);
        assert_eq!(lru.insert(0, 3, 30), None);
        assert_eq!(lru.get(&1), Some(10));
        assert_eq!(lru.insert(0, 4, 40), Some((2, 20)));
        assert_eq!(lru.recency_order(0), vec![4, 1, 3]);
    }

    #[test]
    fn remove_frees_a_way() {
        let mut lru: SetAssocLru<u64, ()> = SetAssocLru::new(2, 2);
        lru.insert(1, 7, ());
        lru.insert(1, 9, ());
        assert_eq!(lru.remove(&7), Some(()));
        assert_eq!(lru.insert(1, 11, ()), None);
        assert_eq!(lru.recency_order(1), vec![11, 9]);
        assert_eq!(lru.len(), 2);
        lru.clear();
        assert!(lru.is_empty());
        assert!(lru.recency_order(1).is_empty());
    }

    #[test]
    fn reinsert_updates_in_place() {
        let mut lru: SetAssocLru<u64, u64> = SetAssocLru::new(1, 2);
        lru.insert(0, 1, 1);
        lru.insert(0, 2, 2);
        assert_eq!(lru.insert(0, 1, 5), None);
        assert_eq!(lru.len(), 2);
        assert_eq!(lru.peek(&1), Some(5));
        assert_eq!(lru.recency_order(0), vec![1, 2]);
    }
}
