//! Scratchpad directory and Plan-stage victim selection.
//!
//! One controller manages one table's slot array. The Hit-Map maps resident
//! sparse IDs to slots and runs ahead of the physical Storage contents: an ID
//! is reported as present as soon as a slot is assigned to it, before the
//! fill lands. Each slot carries a hold mask covering the sliding window of
//! in-flight batches; only zero-mask slots may be evicted.
//!
//! Bit layout for a window of `past` + 1 + `future` batches: the batch being
//! planned sets bit `past`, the batch `k` steps ahead sets bit `past + k`.
//! Every plan shifts all masks right by one, so a bit set for batch `B`
//! reaches position `past` exactly when `B` is planned and clears once `B`
//! is more than `past` batches old.
//!
//! Masks are stored lazily as `(bits, stamp)` and shifted on read; a ring of
//! expiry buckets returns slots to the candidate set when their mask drains.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use indexmap::IndexSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const EMPTY: u64 = u64::MAX;
const MAX_WIDTH: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplacementPolicy {
    #[default]
    Lru,
    Lfu,
    Random,
}

impl ReplacementPolicy {
    pub const ALL: [ReplacementPolicy; 3] = [Self::Lru, Self::Lfu, Self::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Lru => "lru",
            Self::Lfu => "lfu",
            Self::Random => "random",
        }
    }
}

impl fmt::Display for ReplacementPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReplacementPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lru" => Ok(Self::Lru),
            "lfu" => Ok(Self::Lfu),
            "random" => Ok(Self::Random),
            other => Err(Error::Config(format!("unknown replacement policy {other:?}"))),
        }
    }
}

/// Number of past and future batches whose slots are protected around the
/// batch being planned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowShape {
    pub past: u32,
    pub future: u32,
}

impl WindowShape {
    pub const SCRATCHPIPE: WindowShape = WindowShape { past: 3, future: 2 };
    pub const CURRENT_ONLY: WindowShape = WindowShape { past: 0, future: 0 };

    pub fn width(self) -> u32 {
        self.past + 1 + self.future
    }

    fn validate(self) -> Result<()> {
        if self.width() > MAX_WIDTH {
            return Err(Error::Config(format!(
                "window width {} exceeds {MAX_WIDTH}",
                self.width()
            )));
        }
        Ok(())
    }
}

impl Default for WindowShape {
    fn default() -> Self {
        Self::SCRATCHPIPE
    }
}

impl FromStr for WindowShape {
    type Err = Error;

    /// Parses `"P,F"`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("window must be PAST,FUTURE, got {s:?}"));
        let (p, f) = s.split_once(',').ok_or_else(bad)?;
        let shape = WindowShape {
            past: p.trim().parse().map_err(|_| bad())?,
            future: f.trim().parse().map_err(|_| bad())?,
        };
        shape.validate()?;
        Ok(shape)
    }
}

/// Result of planning one batch against one table's scratchpad.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PlanOutcome {
    pub cycle: u64,
    pub hits: Vec<(u64, u32)>,
    pub misses: Vec<(u64, u32)>,
    /// `(victim id, slot)`, one per miss that displaced a resident row.
    pub evictions: Vec<(u64, u32)>,
    pub vacancies_used: u32,
}

impl PlanOutcome {
    /// Every `(id, slot)` pair the batch will touch.
    pub fn assignments(&self) -> impl Iterator<Item = (u64, u32)> + '_ {
        self.hits.iter().chain(&self.misses).copied()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SlotDump {
    pub slot: u32,
    pub resident_id: Option<u64>,
    pub mask_bits: u32,
    pub last_touch: u64,
    pub touch_count: u64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PlanLogRow {
    pub cycle: u64,
    pub hits: usize,
    pub misses: usize,
    pub evictions: usize,
    pub vacancies_used: u32,
}

impl From<&PlanOutcome> for PlanLogRow {
    fn from(o: &PlanOutcome) -> Self {
        Self {
            cycle: o.cycle,
            hits: o.hits.len(),
            misses: o.misses.len(),
            evictions: o.evictions.len(),
            vacancies_used: o.vacancies_used,
        }
    }
}

enum Candidates {
    /// `(key, slot)`: last touch for LRU, touch count for LFU.
    Ordered(BTreeSet<(u64, u32)>),
    Random(IndexSet<u32>, ChaCha8Rng),
}

pub struct CacheController {
    table: usize,
    window: WindowShape,
    policy: ReplacementPolicy,
    now: u64,
    plans: u64,
    hit_map: FxHashMap<u64, u32>,
    resident: Vec<u64>,
    mask_bits: Vec<u32>,
    mask_stamp: Vec<u64>,
    expiry: Vec<u64>,
    last_touch: Vec<u64>,
    touch_count: Vec<u64>,
    filling: Vec<bool>,
    /// Slots `next_vacant..` have never been assigned since the last clear.
    next_vacant: u32,
    candidates: Candidates,
    expiry_ring: Vec<Vec<u32>>,
}

impl CacheController {
    pub fn new(
        table: usize,
        slots: u32,
        window: WindowShape,
        policy: ReplacementPolicy,
        seed: u64,
    ) -> Result<Self> {
        window.validate()?;
        if slots == 0 {
            return Err(Error::Config("scratchpad needs at least one slot".into()));
        }
        let n = slots as usize;
        let candidates = match policy {
            ReplacementPolicy::Random => {
                Candidates::Random(IndexSet::new(), ChaCha8Rng::seed_from_u64(seed))
            }
            _ => Candidates::Ordered(BTreeSet::new()),
        };
        Ok(Self {
            table,
            window,
            policy,
            now: 0,
            plans: 0,
            hit_map: FxHashMap::default(),
            resident: vec![EMPTY; n],
            mask_bits: vec![0; n],
            mask_stamp: vec![0; n],
            expiry: vec![0; n],
            last_touch: vec![0; n],
            touch_count: vec![0; n],
            filling: vec![false; n],
            next_vacant: 0,
            candidates,
            expiry_ring: vec![Vec::new(); window.width() as usize + 1],
        })
    }

    pub fn table(&self) -> usize {
        self.table
    }

    pub fn slots(&self) -> u32 {
        self.resident.len() as u32
    }

    pub fn window(&self) -> WindowShape {
        self.window
    }

    pub fn policy(&self) -> ReplacementPolicy {
        self.policy
    }

    /// Number of window advances so far (plans plus idle cycles).
    pub fn cycle(&self) -> u64 {
        self.now
    }

    pub fn resident_count(&self) -> usize {
        self.hit_map.len()
    }

    pub fn query(&self, id: u64) -> Option<u32> {
        self.hit_map.get(&id).copied()
    }

    pub fn resident(&self, slot: u32) -> Option<u64> {
        let id = self.resident[slot as usize];
        (id != EMPTY).then_some(id)
    }

    pub fn is_filling(&self, slot: u32) -> bool {
        self.filling[slot as usize]
    }

    /// Hold mask of `slot` as of the current cycle.
    pub fn mask(&self, slot: u32) -> u32 {
        let s = slot as usize;
        let age = self.now - self.mask_stamp[s];
        if age >= 32 {
            0
        } else {
            self.mask_bits[s] >> age
        }
    }

    /// Shifts the window by one cycle without planning a batch.
    pub fn advance_idle(&mut self) {
        self.advance();
    }

    fn advance(&mut self) {
        self.now += 1;
        let bucket = (self.now % self.expiry_ring.len() as u64) as usize;
        let due = std::mem::take(&mut self.expiry_ring[bucket]);
        for slot in due {
            let s = slot as usize;
            if self.expiry[s] == self.now && self.resident[s] != EMPTY && self.mask(slot) == 0 {
                self.insert_candidate(slot);
            }
        }
    }

    fn key(&self, slot: u32) -> u64 {
        match self.policy {
            ReplacementPolicy::Lfu => self.touch_count[slot as usize],
            _ => self.last_touch[slot as usize],
        }
    }

    fn insert_candidate(&mut self, slot: u32) {
        let key = self.key(slot);
        match &mut self.candidates {
            Candidates::Ordered(set) => {
                set.insert((key, slot));
            }
            Candidates::Random(set, _) => {
                set.insert(slot);
            }
        }
    }

    fn remove_candidate(&mut self, slot: u32) {
        let key = self.key(slot);
        match &mut self.candidates {
            Candidates::Ordered(set) => {
                set.remove(&(key, slot));
            }
            Candidates::Random(set, _) => {
                set.swap_remove(&slot);
            }
        }
    }

    fn set_bit(&mut self, slot: u32, bit: u32) {
        let current = self.mask(slot);
        if current == 0 && self.resident[slot as usize] != EMPTY {
            self.remove_candidate(slot);
        }
        let bits = current | (1 << bit);
        let s = slot as usize;
        self.mask_bits[s] = bits;
        self.mask_stamp[s] = self.now;
        let expires = self.now + (32 - bits.leading_zeros()) as u64;
        if expires != self.expiry[s] {
            self.expiry[s] = expires;
            let bucket = (expires % self.expiry_ring.len() as u64) as usize;
            self.expiry_ring[bucket].push(slot);
        }
    }

    fn touch(&mut self, slot: u32) {
        let s = slot as usize;
        self.last_touch[s] = self.now;
        self.touch_count[s] += 1;
    }

    /// Picks the slot for a new row: the lowest never-used slot if any,
    /// otherwise a zero-mask slot chosen by the replacement policy. The slot
    /// is removed from the candidate set.
    pub fn choose_victim(&mut self) -> Result<u32> {
        if self.next_vacant < self.slots() {
            self.next_vacant += 1;
            return Ok(self.next_vacant - 1);
        }
        let picked = match &mut self.candidates {
            Candidates::Ordered(set) => set.pop_first().map(|(_, slot)| slot),
            Candidates::Random(set, rng) => {
                if set.is_empty() {
                    None
                } else {
                    let i = rng.random_range(0..set.len());
                    set.swap_remove_index(i)
                }
            }
        };
        picked.ok_or(Error::NoEvictableSlot {
            table: self.table,
            batch: self.plans.saturating_sub(1),
            slots: self.slots(),
        })
    }

    fn hold_future(&mut self, future: &[&[u64]]) {
        let past = self.window.past;
        for (k, ids) in future.iter().take(self.window.future as usize).enumerate() {
            for id in ids.iter() {
                if let Some(&slot) = self.hit_map.get(id) {
                    self.set_bit(slot, past + 1 + k as u32);
                }
            }
        }
    }

    /// Plans one batch: advances the window, pins the batch's hits, protects
    /// rows the next batches will reuse, then assigns a slot to every miss.
    ///
    /// `current` must hold unique IDs. `future[k]` are the unique IDs of the
    /// batch `k + 1` steps ahead; entries beyond the window are ignored.
    pub fn plan_batch(&mut self, current: &[u64], future: &[&[u64]]) -> Result<PlanOutcome> {
        self.advance();
        self.plans += 1;
        let past = self.window.past;
        let mut outcome = PlanOutcome {
            cycle: self.now,
            ..PlanOutcome::default()
        };

        // Hits first so no miss below can evict a row this batch reads.
        let mut pending = Vec::new();
        for &id in current {
            match self.hit_map.get(&id) {
                Some(&slot) => {
                    self.set_bit(slot, past);
                    self.touch(slot);
                    outcome.hits.push((id, slot));
                }
                None => pending.push(id),
            }
        }
        // Rows resident now and needed by the next batches must survive this
        // plan, or their Collect would read a CPU row whose write-back is
        // still in flight.
        self.hold_future(future);

        for id in pending {
            if self.hit_map.contains_key(&id) {
                continue;
            }
            let slot = self.choose_victim()?;
            let s = slot as usize;
            let victim = self.resident[s];
            if victim == EMPTY {
                outcome.vacancies_used += 1;
            } else {
                self.hit_map.remove(&victim);
                outcome.evictions.push((victim, slot));
            }
            self.resident[s] = id;
            self.hit_map.insert(id, slot);
            self.filling[s] = true;
            self.touch_count[s] = 0;
            self.set_bit(slot, past);
            self.touch(slot);
            outcome.misses.push((id, slot));
        }
        // Newly assigned rows may also be reused ahead.
        if !outcome.misses.is_empty() {
            self.hold_future(future);
        }
        Ok(outcome)
    }

    /// Marks the fill of `slot` as landed in Storage.
    pub fn complete_fill(&mut self, slot: u32) {
        self.filling[slot as usize] = false;
    }

    /// IDs whose slots carry any hold bit, ascending.
    pub fn window_superset(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = (0..self.slots())
            .filter(|&slot| self.mask(slot) != 0)
            .filter_map(|slot| self.resident(slot))
            .collect();
        ids.sort_unstable();
        ids
    }

    /// Every `(id, slot)` currently resident, by slot.
    pub fn resident_entries(&self) -> Vec<(u64, u32)> {
        (0..self.slots())
            .filter_map(|slot| self.resident(slot).map(|id| (id, slot)))
            .collect()
    }

    /// Empties the directory, returning what was resident so the caller can
    /// write it back.
    pub fn clear(&mut self) -> Vec<(u64, u32)> {
        let entries = self.resident_entries();
        let (table, slots, window, policy) = (self.table, self.slots(), self.window, self.policy);
        let rng = match std::mem::replace(&mut self.candidates, Candidates::Ordered(BTreeSet::new()))
        {
            Candidates::Random(_, rng) => Some(rng),
            Candidates::Ordered(_) => None,
        };
        let (now, plans) = (self.now, self.plans);
        *self = Self::new(table, slots, window, policy, 0).expect("shape was validated");
        if let (Some(rng), Candidates::Random(_, slot)) = (rng, &mut self.candidates) {
            *slot = rng;
        }
        self.now = now;
        self.plans = plans;
        entries
    }

    /// Checks that the Hit-Map and the slot directory are exact inverses.
    pub fn check_bijection(&self) -> std::result::Result<(), String> {
        let mut valid = 0usize;
        for slot in 0..self.slots() {
            if let Some(id) = self.resident(slot) {
                valid += 1;
                if self.hit_map.get(&id) != Some(&slot) {
                    return Err(format!("slot {slot} holds {id} but the hit map disagrees"));
                }
            } else if self.mask(slot) != 0 {
                return Err(format!("vacant slot {slot} carries a hold mask"));
            }
        }
        if valid != self.hit_map.len() {
            return Err(format!(
                "{} hit-map entries for {valid} valid slots",
                self.hit_map.len()
            ));
        }
        Ok(())
    }

    pub fn dump(&self) -> Vec<SlotDump> {
        (0..self.slots())
            .map(|slot| SlotDump {
                slot,
                resident_id: self.resident(slot),
                mask_bits: self.mask(slot),
                last_touch: self.last_touch[slot as usize],
                touch_count: self.touch_count[slot as usize],
            })
            .collect()
    }
}

pub fn write_plan_log<'a>(
    outcomes: impl IntoIterator<Item = &'a PlanOutcome>,
    out: impl std::io::Write,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for o in outcomes {
        w.serialize(PlanLogRow::from(o)).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}
