//! Direct ancestral sampling of edit events, plus editing sessions where a
//! person and the model take turns on the same roll.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::CellDistribution;
use crate::error::{Error, Result};
use crate::roll::{realize, CellSet, EditEvent, EditSequence, PianoRoll};
use crate::scorer::Scorer;

/// A roll fingerprint seen this many times ends a run.
pub const STABLE_VISITS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub temperature: f64,
    /// Model removals allowed per session; `None` is unlimited.
    pub max_removals: Option<usize>,
    pub max_iterations: usize,
    /// Cells in the protected set may not be removed by the model.
    pub protect_input: bool,
    /// Only additions are sampled.
    pub add_only: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            max_removals: None,
            max_iterations: 2000,
            protect_input: false,
            add_only: false,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Add,
    Remove,
    User,
    Undo,
    Redo,
}

/// One line of the session transcript.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub index: usize,
    pub kind: EventKind,
    pub t: usize,
    pub p: usize,
    /// Log probability of a sampled event under the tempered, masked
    /// distribution. Absent for user edits, undo and redo.
    pub logprob: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopReason {
    Budget,
    Stabilized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Origin {
    Model { removed: bool },
    User { newly_protected: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Entry {
    event: EditEvent,
    origin: Origin,
}

/// Result of one model step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sampled {
    pub event: EditEvent,
    pub kind: EventKind,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub roll: PianoRoll,
    pub stop: StopReason,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct EditSession {
    initial: PianoRoll,
    current: PianoRoll,
    history: Vec<Entry>,
    redo_stack: Vec<Entry>,
    protected: CellSet,
    removals_used: usize,
    visits: HashMap<u64, usize>,
    transcript: Vec<TranscriptRecord>,
}

impl EditSession {
    /// Start from `initial`. With `protect_input` every initial note is
    /// protected.
    pub fn new(initial: PianoRoll, cfg: &SamplerConfig) -> Self {
        let protected = if cfg.protect_input {
            crate::roll::note_list(&initial)
        } else {
            CellSet::new()
        };
        Self {
            current: initial.clone(),
            initial,
            history: Vec::new(),
            redo_stack: Vec::new(),
            protected,
            removals_used: 0,
            visits: HashMap::new(),
            transcript: Vec::new(),
        }
    }

    pub fn initial(&self) -> &PianoRoll {
        &self.initial
    }

    pub fn current(&self) -> &PianoRoll {
        &self.current
    }

    pub fn protected(&self) -> &CellSet {
        &self.protected
    }

    pub fn removals_used(&self) -> usize {
        self.removals_used
    }

    pub fn transcript(&self) -> &[TranscriptRecord] {
        &self.transcript
    }

    pub fn can_undo(&self) -> bool {
        !self.history.is_empty()
    }

    pub fn can_redo(&self) -> bool {
        !self.redo_stack.is_empty()
    }

    /// Events currently in effect, oldest first.
    pub fn history(&self) -> EditSequence {
        self.history.iter().map(|e| e.event).collect()
    }

    pub fn redo_events(&self) -> EditSequence {
        self.redo_stack.iter().map(|e| e.event).collect()
    }

    /// Times the most visited roll has been seen after a model step.
    pub fn max_visits(&self) -> usize {
        self.visits.values().copied().max().unwrap_or(0)
    }

    /// True when the current roll equals the initial notes plus the history.
    pub fn is_consistent(&self) -> bool {
        let mut seq = EditSequence::new(
            crate::roll::note_list(&self.initial)
                .into_iter()
                .map(EditEvent::from)
                .collect(),
        );
        seq.events.extend(self.history.iter().map(|e| e.event));
        let c = &self.current;
        realize(&seq, c.time_steps(), c.pitch_count(), c.pitch_offset()).is_ok_and(|r| r == *c)
    }

    fn log(&mut self, kind: EventKind, event: EditEvent, logprob: Option<f64>) {
        self.transcript.push(TranscriptRecord {
            index: self.transcript.len(),
            kind,
            t: event.time,
            p: event.pitch,
            logprob,
        });
    }

    /// Cells the model may not toggle under `cfg` right now.
    pub fn step_mask(&self, cfg: &SamplerConfig) -> Vec<bool> {
        let c = &self.current;
        let no_removals = cfg.add_only || cfg.max_removals.is_some_and(|m| self.removals_used >= m);
        let mut mask = vec![false; c.cell_count()];
        if no_removals {
            for (m, &on) in mask.iter_mut().zip(c.cells()) {
                *m = on;
            }
        } else if cfg.protect_input {
            for &(t, p) in &self.protected {
                if c.get(t, p) {
                    mask[c.index(t, p)] = true;
                }
            }
        }
        mask
    }

    /// Sample one event from the model and apply it.
    pub fn step<S: Scorer + ?Sized>(&mut self, model: &S, cfg: &SamplerConfig, rng: &mut impl Rng) -> Result<Sampled> {
        cfg.validate()?;
        let logits = model.logits(&self.current)?;
        if logits.len() != self.current.cell_count() {
            return Err(Error::Shape(format!(
                "scorer returned {} logits for {} cells",
                logits.len(),
                self.current.cell_count()
            )));
        }
        let mask = self.step_mask(cfg);
        let probs = masked_tempered_softmax(&logits, cfg.temperature, &mask)?;
        let index = draw_index(&probs, rng);
        let event = EditEvent::from(self.current.cell_at(index));
        let removed = self.current.cells()[index];
        self.current.toggle(event)?;
        if removed {
            self.removals_used += 1;
        }
        self.history.push(Entry {
            event,
            origin: Origin::Model { removed },
        });
        self.redo_stack.clear();
        *self.visits.entry(self.current.fingerprint()).or_insert(0) += 1;
        let kind = if removed { EventKind::Remove } else { EventKind::Add };
        let logprob = probs[index].ln();
        self.log(kind, event, Some(logprob));
        Ok(Sampled { event, kind, logprob })
    }

    /// Step until the iteration budget is spent or the roll stabilizes.
    pub fn run<S: Scorer + ?Sized>(
        &mut self,
        model: &S,
        cfg: &SamplerConfig,
        rng: &mut impl Rng,
    ) -> Result<RunOutcome> {
        cfg.validate()?;
        for i in 1..=cfg.max_iterations {
            self.step(model, cfg, rng)?;
            if self.visits[&self.current.fingerprint()] >= STABLE_VISITS {
                return Ok(RunOutcome {
                    roll: self.current.clone(),
                    stop: StopReason::Stabilized,
                    steps: i,
                });
            }
        }
        Ok(RunOutcome {
            roll: self.current.clone(),
            stop: StopReason::Budget,
            steps: cfg.max_iterations,
        })
    }

    /// Toggle a cell on the user's behalf. `protect` adds it to the
    /// protected set.
    pub fn user_edit(&mut self, event: EditEvent, protect: bool) -> Result<()> {
        self.current.toggle(event)?;
        let newly_protected = protect && self.protected.insert(event.cell());
        self.history.push(Entry {
            event,
            origin: Origin::User { newly_protected },
        });
        self.redo_stack.clear();
        self.log(EventKind::User, event, None);
        Ok(())
    }

    pub fn undo(&mut self) -> Result<EditEvent> {
        let entry = self.history.pop().ok_or(Error::StackEmpty("undo"))?;
        self.current.toggle(entry.event)?;
        match entry.origin {
            Origin::Model { removed: true } => self.removals_used -= 1,
            Origin::User { newly_protected: true } => {
                self.protected.remove(&entry.event.cell());
            }
            _ => {}
        }
        self.redo_stack.push(entry);
        self.log(EventKind::Undo, entry.event, None);
        Ok(entry.event)
    }

    pub fn redo(&mut self) -> Result<EditEvent> {
        let entry = self.redo_stack.pop().ok_or(Error::StackEmpty("redo"))?;
        self.current.toggle(entry.event)?;
        match entry.origin {
            Origin::Model { removed: true } => self.removals_used += 1,
            Origin::User { newly_protected: true } => {
                self.protected.insert(entry.event.cell());
            }
            _ => {}
        }
        self.history.push(entry);
        self.log(EventKind::Redo, entry.event, None);
        Ok(entry.event)
    }
}

/// `softmax(logits / temperature)` restricted to cells outside `exclude`.
pub fn temperature_softmax(
    logits: &[f64],
    time_steps: usize,
    pitch_count: usize,
    temperature: f64,
    exclude: &CellSet,
) -> Result<CellDistribution> {
    if logits.len() != time_steps * pitch_count {
        return Err(Error::Shape(format!(
            "{} logits for a {time_steps}x{pitch_count} grid",
            logits.len()
        )));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let mut mask = vec![false; logits.len()];
    for &(t, p) in exclude {
        if t < time_steps && p < pitch_count {
            mask[t * pitch_count + p] = true;
        }
    }
    Ok(CellDistribution {
        time_steps,
        pitch_count,
        mass: masked_tempered_softmax(logits, temperature, &mask)?,
    })
}

fn masked_tempered_softmax(logits: &[f64], temperature: f64, mask: &[bool]) -> Result<Vec<f64>> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| !m)
        .map(|(&l, _)| l / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::NoLegalEvent);
    }
    let mut probs: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&l, &m)| if m { 0.0 } else { (l / temperature - max).exp() })
        .collect();
    let z: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= z;
    }
    Ok(probs)
}

/// Inverse-CDF draw; never returns a zero-probability index.
fn draw_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Rebuild the final roll from the initial roll and a transcript. Every
/// record, undo and redo included, is one cell toggle.
pub fn replay_transcript(initial: &PianoRoll, records: &[TranscriptRecord]) -> Result<PianoRoll> {
    let mut roll = initial.clone();
    for r in records {
        roll.toggle(EditEvent::new(r.t, r.p))?;
    }
    Ok(roll)
}

pub fn transcript_jsonl(records: &[TranscriptRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let line = serde_json::to_string(r).expect("transcript records serialize");
        writeln!(out, "{line}").expect("writing to a String");
    }
    out
}

pub fn parse_transcript(text: &str) -> Result<Vec<TranscriptRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::FnScorer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64]) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn softmax_examples() {
        let d = temperature_softmax(&[0.7; 6], 2, 3, 1.0, &CellSet::new()).unwrap();
        close(&d.mass, &[1.0 / 6.0; 6]);
        let d = temperature_softmax(&[0.0, 3f64.ln()], 1, 2, 1.0, &CellSet::new()).unwrap();
        close(&d.mass, &[0.25, 0.75]);
        let d = temperature_softmax(&[0.0, 3f64.ln()], 1, 2, 0.5, &CellSet::new()).unwrap();
        close(&d.mass, &[0.1, 0.9]);
    }

    #[test]
    fn softmax_mask() {
        let ex: CellSet = [(0, 1)].into_iter().collect();
        let d = temperature_softmax(&[0.0, 5.0, 0.0], 1, 3, 1.0, &ex).unwrap();
        close(&d.mass, &[0.5, 0.0, 0.5]);
        let all: CellSet = [(0, 0), (0, 1)].into_iter().collect();
        assert!(matches!(
            temperature_softmax(&[0.0, 1.0], 1, 2, 1.0, &all),
            Err(Error::NoLegalEvent)
        ));
        assert!(temperature_softmax(&[0.0, 1.0], 1, 2, 0.0, &CellSet::new()).is_err());
    }

    fn flat() -> FnScorer<impl Fn(&PianoRoll) -> Vec<f64>> {
        FnScorer(|r: &PianoRoll| vec![0.0; r.cell_count()])
    }

    #[test]
    fn add_only_on_empty_roll_adds() {
        let cfg = SamplerConfig {
            add_only: true,
            ..Default::default()
        };
        let mut s = EditSession::new(PianoRoll::new(4, 4, 60).unwrap(), &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..16 {
            assert_eq!(s.step(&flat(), &cfg, &mut rng).unwrap().kind, EventKind::Add);
        }
        assert_eq!(s.current().note_count(), 16);
        assert!(matches!(s.step(&flat(), &cfg, &mut rng), Err(Error::NoLegalEvent)));
    }

    #[test]
    fn removal_budget() {
        let cfg = SamplerConfig {
            max_removals: Some(2),
            ..Default::default()
        };
        let mut s = EditSession::new(PianoRoll::new(2, 2, 60).unwrap(), &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        loop {
            match s.step(&flat(), &cfg, &mut rng) {
                Ok(_) => assert!(s.removals_used() <= 2),
                Err(Error::NoLegalEvent) => break,
                Err(e) => panic!("{e}"),
            }
        }
        assert_eq!(s.removals_used(), 2);
        assert_eq!(s.current().note_count(), 4);
    }

    #[test]
    fn protected_cells_survive() {
        let cfg = SamplerConfig {
            protect_input: true,
            ..Default::default()
        };
        let mut s = EditSession::new(PianoRoll::new(4, 12, 60).unwrap(), &cfg);
        s.user_edit(EditEvent::new(3, 10), true).unwrap();
        // a scorer that badly wants to remove the protected note
        let greedy = FnScorer(|r: &PianoRoll| {
            let mut l = vec![0.0; r.cell_count()];
            l[r.index(3, 10)] = 50.0;
            l
        });
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            s.step(&greedy, &cfg, &mut rng).unwrap();
            assert!(s.current().get(3, 10));
        }
    }

    #[test]
    fn undo_redo() {
        let cfg = SamplerConfig::default();
        let start = PianoRoll::from_notes(4, 4, 60, [(0, 0)]).unwrap();
        let mut s = EditSession::new(start.clone(), &cfg);
        assert!(matches!(s.undo(), Err(Error::StackEmpty(_))));
        assert!(matches!(s.redo(), Err(Error::StackEmpty(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        s.step(&flat(), &cfg, &mut rng).unwrap();
        let after = s.current().clone();
        s.undo().unwrap();
        assert_eq!(s.current(), &start);
        s.redo().unwrap();
        assert_eq!(s.current(), &after);
        s.undo().unwrap();
        s.user_edit(EditEvent::new(1, 1), false).unwrap();
        assert!(!s.can_redo());
        assert!(s.is_consistent());
    }

    #[test]
    fn double_toggle_by_user() {
        let cfg = SamplerConfig::default();
        let start = PianoRoll::new(4, 4, 60).unwrap();
        let mut s = EditSession::new(start.clone(), &cfg);
        s.user_edit(EditEvent::new(2, 3), false).unwrap();
        s.user_edit(EditEvent::new(2, 3), false).unwrap();
        assert_eq!(s.current(), &start);
        assert_eq!(s.history().len(), 2);
        assert!(s.user_edit(EditEvent::new(4, 0), false).is_err());
    }

    #[test]
    fn undo_restores_removal_budget_and_protection() {
        let cfg = SamplerConfig {
            max_removals: Some(1),
            protect_input: true,
            ..Default::default()
        };
        let full = PianoRoll::from_notes(1, 2, 60, [(0, 0), (0, 1)]).unwrap();
        let mut s = EditSession::new(full, &SamplerConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = s.step(&flat(), &cfg, &mut rng).unwrap();
        assert_eq!(e.kind, EventKind::Remove);
        assert_eq!(s.removals_used(), 1);
        s.undo().unwrap();
        assert_eq!(s.removals_used(), 0);
        s.redo().unwrap();
        assert_eq!(s.removals_used(), 1);

        s.user_edit(EditEvent::new(0, 0), true).unwrap();
        assert!(s.protected().contains(&(0, 0)));
        s.undo().unwrap();
        assert!(!s.protected().contains(&(0, 0)));
    }

    #[test]
    fn oscillation_is_detected() {
        let cfg = SamplerConfig::default();
        let start = PianoRoll::from_notes(2, 2, 60, [(1, 1)]).unwrap();
        let sticky = FnScorer(|r: &PianoRoll| {
            let mut l = vec![-60.0; r.cell_count()];
            l[r.index(1, 1)] = 60.0;
            l
        });
        let mut s = EditSession::new(start, &cfg);
        let out = s.run(&sticky, &cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert_eq!(out.stop, StopReason::Stabilized);
        assert_eq!(out.steps, 5);
    }

    #[test]
    fn budget_of_one() {
        let cfg = SamplerConfig {
            max_iterations: 1,
            ..Default::default()
        };
        let mut s = EditSession::new(PianoRoll::new(3, 3, 60).unwrap(), &cfg);
        let out = s.run(&flat(), &cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(out.stop, StopReason::Budget);
        assert_eq!(s.history().len(), 1);
    }

    #[test]
    fn transcript_round_trip_and_replay() {
        let cfg = SamplerConfig::default();
        let start = PianoRoll::from_notes(3, 3, 60, [(0, 0), (2, 1)]).unwrap();
        let mut s = EditSession::new(start.clone(), &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for i in 0..20 {
            match i % 5 {
                0 => s.user_edit(EditEvent::new(i % 3, 2), i % 2 == 0).unwrap(),
                3 => {
                    s.undo().unwrap();
                }
                4 => {
                    s.redo().unwrap();
                }
                _ => {
                    s.step(&flat(), &cfg, &mut rng).unwrap();
                }
            }
        }
        let text = transcript_jsonl(s.transcript());
        assert_eq!(text.lines().count(), 20);
        let parsed = parse_transcript(&text).unwrap();
        assert_eq!(parsed, s.transcript());
        assert_eq!(&replay_transcript(&start, &parsed).unwrap(), s.current());
        assert!(s.is_consistent());
    }
}
