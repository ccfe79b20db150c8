//! Piano rolls and the edit-event algebra.
//!
//! A roll is a binary `time_steps x pitch_count` grid. An edit event toggles
//! one cell, so a sequence of events realizes the roll whose cells are the
//! ones toggled an odd number of times. Adjacent occupied cells at the same
//! pitch form a single held note.

use std::collections::BTreeSet;
use std::hash::{DefaultHasher, Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `(time, pitch)` cell index, pitch relative to the roll's `pitch_offset`.
pub type Cell = (usize, usize);

/// One cell toggle. Adds a note if the cell is empty, removes it otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EditEvent {
    pub time: usize,
    pub pitch: usize,
}

impl EditEvent {
    pub fn new(time: usize, pitch: usize) -> Self {
        Self { time, pitch }
    }

    pub fn cell(&self) -> Cell {
        (self.time, self.pitch)
    }
}

impl From<Cell> for EditEvent {
    fn from((time, pitch): Cell) -> Self {
        Self { time, pitch }
    }
}

/// Ordered list of edit events.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditSequence {
    pub events: Vec<EditEvent>,
}

impl EditSequence {
    pub fn new(events: Vec<EditEvent>) -> Self {
        Self { events }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

impl FromIterator<EditEvent> for EditSequence {
    fn from_iter<I: IntoIterator<Item = EditEvent>>(iter: I) -> Self {
        Self {
            events: iter.into_iter().collect(),
        }
    }
}

/// Set of cells, iterated in lexicographic `(time, pitch)` order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellSet(BTreeSet<Cell>);

impl CellSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, cell: Cell) -> bool {
        self.0.insert(cell)
    }

    pub fn remove(&mut self, cell: &Cell) -> bool {
        self.0.remove(cell)
    }

    pub fn contains(&self, cell: &Cell) -> bool {
        self.0.contains(cell)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Cell> + '_ {
        self.0.iter()
    }

    pub fn is_subset(&self, other: &CellSet) -> bool {
        self.0.is_subset(&other.0)
    }
}

impl FromIterator<Cell> for CellSet {
    fn from_iter<I: IntoIterator<Item = Cell>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl IntoIterator for CellSet {
    type Item = Cell;
    type IntoIter = std::collections::btree_set::IntoIter<Cell>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.into_iter()
    }
}

impl<'a> IntoIterator for &'a CellSet {
    type Item = &'a Cell;
    type IntoIter = std::collections::btree_set::Iter<'a, Cell>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

/// Binary time x pitch occupancy grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RollJson", into = "RollJson")]
pub struct PianoRoll {
    time_steps: usize,
    pitch_count: usize,
    pitch_offset: u8,
    cells: Vec<bool>,
}

impl PianoRoll {
    /// Empty roll. Fails if a dimension is zero or the pitch range leaves MIDI.
    pub fn new(time_steps: usize, pitch_count: usize, pitch_offset: u8) -> Result<Self> {
        if time_steps == 0 || pitch_count == 0 {
            return Err(Error::Shape(format!(
                "roll dimensions must be positive, got {time_steps}x{pitch_count}"
            )));
        }
        if pitch_offset as usize + pitch_count - 1 > 127 {
            return Err(Error::Shape(format!(
                "pitch range {pitch_offset}+{pitch_count} exceeds MIDI pitch 127"
            )));
        }
        Ok(Self {
            time_steps,
            pitch_count,
            pitch_offset,
            cells: vec![false; time_steps * pitch_count],
        })
    }

    pub fn from_notes<I>(time_steps: usize, pitch_count: usize, pitch_offset: u8, notes: I) -> Result<Self>
    where
        I: IntoIterator<Item = Cell>,
    {
        let mut roll = Self::new(time_steps, pitch_count, pitch_offset)?;
        for (t, p) in notes {
            roll.check(t, p)?;
            roll.set(t, p, true);
        }
        Ok(roll)
    }

    /// An empty roll with the same dimensions.
    pub fn empty_like(&self) -> Self {
        Self {
            cells: vec![false; self.cells.len()],
            ..self.clone()
        }
    }

    pub fn time_steps(&self) -> usize {
        self.time_steps
    }

    pub fn pitch_count(&self) -> usize {
        self.pitch_count
    }

    pub fn pitch_offset(&self) -> u8 {
        self.pitch_offset
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn same_shape(&self, other: &PianoRoll) -> bool {
        self.time_steps == other.time_steps
            && self.pitch_count == other.pitch_count
            && self.pitch_offset == other.pitch_offset
    }

    pub fn check(&self, time: usize, pitch: usize) -> Result<()> {
        if time < self.time_steps && pitch < self.pitch_count {
            Ok(())
        } else {
            Err(Error::Bounds {
                time,
                pitch,
                time_steps: self.time_steps,
                pitch_count: self.pitch_count,
            })
        }
    }

    /// Row-major index of a cell. Callers must have bounds-checked.
    pub fn index(&self, time: usize, pitch: usize) -> usize {
        time * self.pitch_count + pitch
    }

    pub fn cell_at(&self, index: usize) -> Cell {
        (index / self.pitch_count, index % self.pitch_count)
    }

    pub fn get(&self, time: usize, pitch: usize) -> bool {
        self.cells[self.index(time, pitch)]
    }

    pub fn set(&mut self, time: usize, pitch: usize, on: bool) {
        let i = self.index(time, pitch);
        self.cells[i] = on;
    }

    /// Flat row-major view of the grid.
    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    /// Number of occupied cells (N).
    pub fn note_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Absolute MIDI pitch of a pitch row.
    pub fn midi_pitch(&self, pitch: usize) -> u8 {
        self.pitch_offset + pitch as u8
    }

    /// Toggle a cell in place.
    pub fn toggle(&mut self, event: EditEvent) -> Result<()> {
        self.check(event.time, event.pitch)?;
        let i = self.index(event.time, event.pitch);
        self.cells[i] = !self.cells[i];
        Ok(())
    }

    /// 64-bit fingerprint of the grid contents.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.hash(&mut h);
        h.finish()
    }

    /// Copy of rows `start..start + len` in time.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.time_steps {
            return Err(Error::Shape(format!(
                "window {start}..{} outside {} time steps",
                start + len,
                self.time_steps
            )));
        }
        let from = start * self.pitch_count;
        let to = (start + len) * self.pitch_count;
        Ok(Self {
            time_steps: len,
            pitch_count: self.pitch_count,
            pitch_offset: self.pitch_offset,
            cells: self.cells[from..to].to_vec(),
        })
    }
}

impl PianoRoll {
    /// Same roll cropped or zero-padded to `len` time steps.
    pub fn with_time_steps(&self, len: usize) -> Result<Self> {
        let mut out = Self::new(len, self.pitch_count, self.pitch_offset)?;
        let keep = len.min(self.time_steps) * self.pitch_count;
        out.cells[..keep].copy_from_slice(&self.cells[..keep]);
        Ok(out)
    }
}

/// Apply one event, returning the new roll. The input is left untouched.
pub fn apply_event(roll: &PianoRoll, event: EditEvent) -> Result<PianoRoll> {
    let mut out = roll.clone();
    out.toggle(event)?;
    Ok(out)
}

/// Realize a sequence on an empty roll: a cell is on iff it occurs an odd
/// number of times.
pub fn realize(seq: &EditSequence, time_steps: usize, pitch_count: usize, pitch_offset: u8) -> Result<PianoRoll> {
    let mut roll = PianoRoll::new(time_steps, pitch_count, pitch_offset)?;
    for &e in &seq.events {
        roll.toggle(e)?;
    }
    Ok(roll)
}

/// Cells where `a` and `b` differ.
pub fn symmetric_difference(a: &PianoRoll, b: &PianoRoll) -> Result<CellSet> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "{}x{}@{} vs {}x{}@{}",
            a.time_steps, a.pitch_count, a.pitch_offset, b.time_steps, b.pitch_count, b.pitch_offset
        )));
    }
    Ok(a.cells
        .iter()
        .zip(&b.cells)
        .enumerate()
        .filter(|(_, (x, y))| x != y)
        .map(|(i, _)| a.cell_at(i))
        .collect())
}

/// All occupied cells.
pub fn note_list(roll: &PianoRoll) -> CellSet {
    roll.cells
        .iter()
        .enumerate()
        .filter(|(_, &on)| on)
        .map(|(i, _)| roll.cell_at(i))
        .collect()
}

/// A held note: a maximal run of occupied cells at one pitch row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeldNote {
    pub pitch: usize,
    pub start: usize,
    pub len: usize,
}

/// Maximal horizontal runs, ordered by start time then pitch.
pub fn held_notes(roll: &PianoRoll) -> Vec<HeldNote> {
    let mut notes = Vec::new();
    for p in 0..roll.pitch_count {
        let mut t = 0;
        while t < roll.time_steps {
            if roll.get(t, p) {
                let start = t;
                while t < roll.time_steps && roll.get(t, p) {
                    t += 1;
                }
                notes.push(HeldNote {
                    pitch: p,
                    start,
                    len: t - start,
                });
            } else {
                t += 1;
            }
        }
    }
    notes.sort_by_key(|n| (n.start, n.pitch));
    notes
}

/// Canonical JSON shape: notes sorted lexicographically.
#[derive(Debug, Serialize, Deserialize)]
struct RollJson {
    time_steps: usize,
    pitch_count: usize,
    pitch_offset: u8,
    notes: Vec<[usize; 2]>,
}

impl From<PianoRoll> for RollJson {
    fn from(roll: PianoRoll) -> Self {
        RollJson {
            time_steps: roll.time_steps,
            pitch_count: roll.pitch_count,
            pitch_offset: roll.pitch_offset,
            notes: note_list(&roll).into_iter().map(|(t, p)| [t, p]).collect(),
        }
    }
}

impl TryFrom<RollJson> for PianoRoll {
    type Error = Error;

    fn try_from(j: RollJson) -> Result<Self> {
        PianoRoll::from_notes(
            j.time_steps,
            j.pitch_count,
            j.pitch_offset,
            j.notes.into_iter().map(|[t, p]| (t, p)),
        )
    }
}

impl PianoRoll {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("roll serialization is infallible")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
