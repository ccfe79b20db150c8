//! Music generation as a self-correcting sequence of note add/remove events
//! on a piano roll.
//!
//! The pieces, bottom up:
//!
//! * [`roll`]: piano rolls, edit events and their mod-2 algebra.
//! * [`midi`]: MIDI parsing, sixteenth-note quantization and export.
//! * [`augment`]: corrupted/clean training pairs and their uniform targets.
//! * [`nn`]: a small autodiff core, the U-Net scorer, the KL loss and Adam.
//! * [`sampler`]: ancestral sampling with undo/redo editing sessions.
//! * [`likelihood`]: approximate notewise log likelihood by path traversal.
//! * [`metrics`]: pitch and polyphony statistics and histogram distances.
//! * [`service`]: JSON session protocol used by the studio front end.

pub mod augment;
pub mod error;
pub mod likelihood;
pub mod metrics;
pub mod midi;
pub mod nn;
pub mod roll;
pub mod sampler;
pub mod scorer;
pub mod service;

pub use error::{Error, Result};
pub use roll::{apply_event, note_list, realize, symmetric_difference, CellSet, EditEvent, EditSequence, PianoRoll};
pub use scorer::Scorer;
