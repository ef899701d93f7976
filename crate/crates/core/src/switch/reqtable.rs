//! Multi-stage hash table that pins a request id to the server chosen for its
//! first packet. Each stage is an independent hash bucket array; an insert
//! takes the first stage whose slot is free and reports `Fallback` when all
//! candidate slots are taken.

use crate::sim::{mix64, SimTime};

#[derive(Clone, Copy, Debug, PartialEq)]
struct Slot {
    key: u64,
    server: usize,
    inserted: SimTime,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InsertOutcome {
    Stored { stage: usize },
    /// Every candidate slot is occupied by another request.
    Fallback,
}

pub struct ReqTable {
    slots_per_stage: usize,
    seeds: Vec<u64>,
    cells: Vec<Option<Slot>>,
    occupied: usize,
}

impl ReqTable {
    /// `seeds` must contain one distinct hash seed per stage.
    pub fn new(slots_per_stage: usize, seeds: Vec<u64>) -> Self {
        assert!(slots_per_stage > 0 && !seeds.is_empty(), "empty request table");
        ReqTable {
            slots_per_stage,
            cells: vec![None; slots_per_stage * seeds.len()],
            seeds,
            occupied: 0,
        }
    }

    /// Derives stage seeds from a run seed.
    pub fn with_seed(stages: usize, slots_per_stage: usize, seed: u64) -> Self {
        let seeds = (0..stages as u64)
            .map(|i| mix64(seed ^ mix64(i.wrapping_add(0x5bd1_e995))))
            .collect();
        Self::new(slots_per_stage, seeds)
    }

    pub fn stages(&self) -> usize {
        self.seeds.len()
    }

    pub fn capacity(&self) -> usize {
        self.cells.len()
    }

    /// Slot index of `key` within stage `stage`.
    pub fn stage_index(&self, stage: usize, key: u64) -> usize {
        (mix64(key ^ self.seeds[stage]) % self.slots_per_stage as u64) as usize
    }

    fn cell(&self, stage: usize, key: u64) -> usize {
        stage * self.slots_per_stage + self.stage_index(stage, key)
    }

    pub fn insert(&mut self, key: u64, server: usize, now: SimTime) -> InsertOutcome {
        // A re-sent first packet keeps its original mapping.
        if let Some(stage) = self.stage_of(key) {
            return InsertOutcome::Stored { stage };
        }
        for stage in 0..self.stages() {
            let c = self.cell(stage, key);
            if self.cells[c].is_none() {
                self.cells[c] = Some(Slot { key, server, inserted: now });
                self.occupied += 1;
                return InsertOutcome::Stored { stage };
            }
        }
        InsertOutcome::Fallback
    }

    fn stage_of(&self, key: u64) -> Option<usize> {
        (0..self.stages()).find(|&stage| self.cells[self.cell(stage, key)].is_some_and(|s| s.key == key))
    }

    pub fn read(&self, key: u64) -> Option<usize> {
        self.stage_of(key).and_then(|stage| self.cells[self.cell(stage, key)]).map(|s| s.server)
    }

    /// Clears the entry for `key`; removing an absent key is a no-op.
    pub fn remove(&mut self, key: u64) -> bool {
        for stage in 0..self.stages() {
            let c = self.cell(stage, key);
            if self.cells[c].is_some_and(|s| s.key == key) {
                self.cells[c] = None;
                self.occupied -= 1;
                return true;
            }
        }
        false
    }

    fn retain(&mut self, mut keep: impl FnMut(&Slot) -> bool) -> usize {
        let mut removed = 0;
        for cell in &mut self.cells {
            if cell.as_ref().is_some_and(|s| !keep(s)) {
                *cell = None;
                removed += 1;
            }
        }
        self.occupied -= removed;
        removed
    }

    /// Drops every mapping that points at `server`.
    pub fn purge_server(&mut self, server: usize) -> usize {
        self.retain(|s| s.server != server)
    }

    /// Drops mappings inserted strictly before `cutoff`.
    pub fn purge_older_than(&mut self, cutoff: SimTime) -> usize {
        self.retain(|s| s.inserted >= cutoff)
    }

    pub fn clear(&mut self) {
        self.cells.iter_mut().for_each(|c| *c = None);
        self.occupied = 0;
    }

    pub fn occupancy(&self) -> usize {
        self.occupied
    }
}
