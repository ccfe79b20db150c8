//! Anything that assigns a logit to every cell of a roll.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::ScorerModel;
use crate::roll::PianoRoll;

/// Produces one logit per `(time, pitch)` cell, row-major.
///
/// Implementations must be deterministic: the same roll always yields the
/// same logits.
pub trait Scorer {
    fn logits(&self, roll: &PianoRoll) -> Result<Vec<f64>>;

    /// Reject rolls this scorer cannot handle, before any work is done.
    fn check_roll(&self, _roll: &PianoRoll) -> Result<()> {
        Ok(())
    }
}

impl Scorer for ScorerModel {
    fn check_roll(&self, roll: &PianoRoll) -> Result<()> {
        let c = &self.config;
        if roll.time_steps() != c.time_steps || roll.pitch_count() != c.pitch_count {
            return Err(Error::Shape(format!(
                "model expects {}x{} rolls, got {}x{}",
                c.time_steps,
                c.pitch_count,
                roll.time_steps(),
                roll.pitch_count()
            )));
        }
        Ok(())
    }

    fn logits(&self, roll: &PianoRoll) -> Result<Vec<f64>> {
        // inference draws no randomness; the rng is never consulted
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self.forward(roll, false, &mut rng)?.into_data())
    }
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn logits(&self, roll: &PianoRoll) -> Result<Vec<f64>> {
        (**self).logits(roll)
    }

    fn check_roll(&self, roll: &PianoRoll) -> Result<()> {
        (**self).check_roll(roll)
    }
}

impl<S: Scorer + ?Sized> Scorer for std::sync::Arc<S> {
    fn logits(&self, roll: &PianoRoll) -> Result<Vec<f64>> {
        (**self).logits(roll)
    }

    fn check_roll(&self, roll: &PianoRoll) -> Result<()> {
        (**self).check_roll(roll)
    }
}

/// Adapter turning a closure into a scorer.
pub struct FnScorer<F>(pub F);

impl<F> Scorer for FnScorer<F>
where
    F: Fn(&PianoRoll) -> Vec<f64>,
{
    fn logits(&self, roll: &PianoRoll) -> Result<Vec<f64>> {
        let l = (self.0)(roll);
        if l.len() != roll.cell_count() {
            return Err(Error::Shape(format!(
                "{} logits for {} cells",
                l.len(),
                roll.cell_count()
            )));
        }
        Ok(l)
    }
}
