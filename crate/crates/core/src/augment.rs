//! Training-pair generation.
//!
//! An input roll is made from a target by removing some of its notes and
//! adding some extraneous ones. The model learns to undo the corruption one
//! event at a time, with the next event uniform over the cells that still
//! differ.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roll::{symmetric_difference, Cell, CellSet, PianoRoll};

/// Upper bound on the extraneous-note fraction.
pub const MAX_EXTRANEOUS_FRACTION: f64 = 0.015;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Fraction of the target's notes to mask, drawn uniformly per pair.
    pub mask_fraction_range: (f64, f64),
    /// Fraction of all `T * P` cells to add as extraneous notes.
    pub extraneous_fraction_range: (f64, f64),
    pub pairs_per_target: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            mask_fraction_range: (0.0, 1.0),
            extraneous_fraction_range: (0.0, MAX_EXTRANEOUS_FRACTION),
            pairs_per_target: 4,
        }
    }
}

impl AugmentConfig {
    /// Masking only; the add-only baseline trains on these pairs.
    pub fn mask_only() -> Self {
        Self {
            extraneous_fraction_range: (0.0, 0.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (m0, m1) = self.mask_fraction_range;
        let (e0, e1) = self.extraneous_fraction_range;
        if !(0.0 <= m0 && m0 <= m1 && m1 <= 1.0) {
            return Err(Error::Config(format!(
                "mask fraction range ({m0}, {m1}) must lie in [0, 1]"
            )));
        }
        if !(0.0 <= e0 && e0 <= e1 && e1 <= MAX_EXTRANEOUS_FRACTION) {
            return Err(Error::Config(format!(
                "extraneous fraction range ({e0}, {e1}) must lie in [0, {MAX_EXTRANEOUS_FRACTION}]"
            )));
        }
        if self.pairs_per_target == 0 {
            return Err(Error::Config("pairs_per_target must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub input: PianoRoll,
    pub target: PianoRoll,
    /// Cells where input and target differ.
    pub support: CellSet,
}

/// Probability mass over every cell of a roll, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CellDistribution {
    pub time_steps: usize,
    pub pitch_count: usize,
    pub mass: Vec<f64>,
}

impl CellDistribution {
    pub fn get(&self, time: usize, pitch: usize) -> f64 {
        self.mass[time * self.pitch_count + pitch]
    }

    pub fn total(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// Indices with positive mass.
    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.mass.iter().enumerate().filter(|(_, &m)| m > 0.0).map(|(i, _)| i)
    }
}

fn draw(range: (f64, f64), rng: &mut impl Rng) -> f64 {
    if range.1 > range.0 {
        rng.random_range(range.0..=range.1)
    } else {
        range.0
    }
}

/// Corrupt `target` with fractions drawn from `cfg`.
pub fn make_pair(target: &PianoRoll, cfg: &AugmentConfig, rng: &mut impl Rng) -> TrainingPair {
    let f_mask = draw(cfg.mask_fraction_range, rng);
    let f_extra = draw(cfg.extraneous_fraction_range, rng);
    make_pair_with(target, f_mask, f_extra, rng)
}

/// Corrupt `target` with fixed fractions: `round(f_mask * N)` of its notes are
/// removed and `round(f_extra * T * P)` empty cells are filled.
pub fn make_pair_with(target: &PianoRoll, f_mask: f64, f_extra: f64, rng: &mut impl Rng) -> TrainingPair {
    let notes: Vec<usize> = (0..target.cell_count()).filter(|&i| target.cells()[i]).collect();
    let empty: Vec<usize> = (0..target.cell_count()).filter(|&i| !target.cells()[i]).collect();
    let n_mask = ((f_mask * notes.len() as f64).round() as usize).min(notes.len());
    let n_extra = ((f_extra * target.cell_count() as f64).round() as usize).min(empty.len());

    let mut input = target.clone();
    let mut support = CellSet::new();
    for k in sample(rng, notes.len(), n_mask) {
        let (t, p) = target.cell_at(notes[k]);
        input.set(t, p, false);
        support.insert((t, p));
    }
    for k in sample(rng, empty.len(), n_extra) {
        let (t, p) = target.cell_at(empty[k]);
        input.set(t, p, true);
        support.insert((t, p));
    }
    debug_assert_eq!(Some(&support), symmetric_difference(&input, target).ok().as_ref());
    TrainingPair {
        input,
        target: target.clone(),
        support,
    }
}

/// Uniform distribution over the pair's support.
pub fn uniform_target(pair: &TrainingPair) -> Result<CellDistribution> {
    uniform_over(
        pair.target.time_steps(),
        pair.target.pitch_count(),
        pair.support.iter().copied(),
    )
}

pub fn uniform_over(
    time_steps: usize,
    pitch_count: usize,
    cells: impl IntoIterator<Item = Cell>,
) -> Result<CellDistribution> {
    let cells: Vec<Cell> = cells.into_iter().collect();
    if cells.is_empty() {
        return Err(Error::EmptySupport);
    }
    let w = 1.0 / cells.len() as f64;
    let mut mass = vec![0.0; time_steps * pitch_count];
    for (t, p) in cells {
        mass[t * pitch_count + p] = w;
    }
    Ok(CellDistribution {
        time_steps,
        pitch_count,
        mass,
    })
}

/// Per-worker seed derived from a master seed.
pub fn worker_seed(master: u64, worker: u64) -> u64 {
    master ^ worker
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scale_roll() -> PianoRoll {
        PianoRoll::from_notes(16, 8, 60, (0..10).map(|i| (i, i % 8))).unwrap()
    }

    #[test]
    fn identity_augmentation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let target = scale_roll();
        let pair = make_pair_with(&target, 0.0, 0.0, &mut rng);
        assert_eq!(pair.input, target);
        assert!(pair.support.is_empty());
        assert!(matches!(uniform_target(&pair), Err(Error::EmptySupport)));
    }

    #[test]
    fn full_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let target = scale_roll();
        assert_eq!(target.note_count(), 10);
        let pair = make_pair_with(&target, 1.0, 0.0, &mut rng);
        assert_eq!(pair.input.note_count(), 0);
        assert_eq!(pair.support, crate::roll::note_list(&target));
    }

    #[test]
    fn extraneous_count_on_full_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let target = PianoRoll::new(128, 46, 36).unwrap();
        let pair = make_pair_with(&target, 0.0, 0.015, &mut rng);
        // 0.015 * 5888 = 88.32
        assert_eq!(pair.input.note_count(), 88);
        assert_eq!(pair.support.len(), 88);
    }

    #[test]
    fn uniform_target_values() {
        let roll = PianoRoll::new(2, 2, 60).unwrap();
        let one = TrainingPair {
            input: roll.clone(),
            target: roll.clone(),
            support: [(1, 0)].into_iter().collect(),
        };
        assert_eq!(uniform_target(&one).unwrap().get(1, 0), 1.0);

        let d = uniform_over(4, 4, [(0, 0), (1, 1), (2, 2), (3, 3)]).unwrap();
        assert!(d.support().all(|i| d.mass[i] == 0.25));
        assert_eq!(d.support().count(), 4);

        let d = uniform_over(2, 2, [(0, 0), (1, 1)]).unwrap();
        assert_eq!(d.mass, vec![0.5, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn config_bounds() {
        assert!(AugmentConfig::default().validate().is_ok());
        assert!(AugmentConfig::mask_only().validate().is_ok());
        let bad = AugmentConfig {
            extraneous_fraction_range: (0.0, 0.02),
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentConfig {
            mask_fraction_range: (0.6, 0.4),
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn same_seed_same_pair() {
        let cfg = AugmentConfig::default();
        let target = scale_roll();
        let a = make_pair(&target, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let b = make_pair(&target, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }
}
