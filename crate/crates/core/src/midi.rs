//! Standard MIDI file ingestion and export.
//!
//! Files are reduced to timed notes, quantized onto a sixteenth-note grid and
//! merged across tracks into one piano roll, then cut into fixed-length
//! samples. Only 4/4 meter is supported.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roll::{held_notes, PianoRoll};

/// A note recovered from a MIDI track, in ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimedNote {
    pub onset: u64,
    pub duration: u64,
    pub pitch: u8,
    pub track: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizeConfig {
    pub steps_per_bar: usize,
    pub bars_per_sample: usize,
    pub pitch_offset: u8,
    pub pitch_count: usize,
}

impl Default for QuantizeConfig {
    fn default() -> Self {
        Self {
            steps_per_bar: 16,
            bars_per_sample: 8,
            pitch_offset: 36,
            pitch_count: 46,
        }
    }
}

impl QuantizeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_bar == 0 || !self.steps_per_bar.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "steps_per_bar must be a positive multiple of 4, got {}",
                self.steps_per_bar
            )));
        }
        if self.bars_per_sample == 0 {
            return Err(Error::Config("bars_per_sample must be positive".into()));
        }
        if self.pitch_count == 0 || self.pitch_offset as usize + self.pitch_count > 128 {
            return Err(Error::Config(format!(
                "pitch range {}+{} is outside MIDI",
                self.pitch_offset, self.pitch_count
            )));
        }
        Ok(())
    }

    pub fn window(&self) -> usize {
        self.bars_per_sample * self.steps_per_bar
    }
}

/// Result of parsing one file.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedMidi {
    pub format: u16,
    /// Ticks per quarter note.
    pub ppq: u16,
    pub notes: Vec<TimedNote>,
    /// Latest end-of-track tick over all tracks.
    pub end_tick: u64,
    /// Tempo changes as (tick, microseconds per quarter).
    pub tempos: Vec<(u64, u32)>,
    pub warnings: Vec<String>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::MidiParse {
            offset: self.pos,
            message: message.into(),
        })
    }

    fn u8(&mut self) -> Result<u8> {
        match self.bytes.get(self.pos) {
            Some(&b) => {
                self.pos += 1;
                Ok(b)
            }
            None => self.err("unexpected end of data"),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return self.err(format!("need {n} bytes, {} left", self.bytes.len() - self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u64> {
        let start = self.pos;
        let mut value = 0u64;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | u64::from(b & 0x7f);
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(Error::MidiParse {
            offset: start,
            message: "variable-length quantity longer than 4 bytes".into(),
        })
    }
}

/// Parse a format 0 or 1 standard MIDI file.
pub fn parse_midi(bytes: &[u8]) -> Result<ParsedMidi> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != b"MThd" {
        r.pos = 0;
        return r.err("missing MThd header");
    }
    let header_len = r.u32()? as usize;
    if header_len < 6 {
        return r.err(format!("header length {header_len} < 6"));
    }
    let header_start = r.pos;
    let format = r.u16()?;
    let ntracks = r.u16()?;
    let division = r.u16()?;
    if format > 1 {
        r.pos = header_start;
        return r.err(format!("unsupported MIDI format {format}"));
    }
    if division & 0x8000 != 0 {
        r.pos = header_start + 4;
        return r.err("SMPTE time division is not supported");
    }
    if division == 0 {
        r.pos = header_start + 4;
        return r.err("ticks per quarter note is zero");
    }
    r.pos = header_start + header_len;

    let mut out = ParsedMidi {
        format,
        ppq: division,
        notes: Vec::new(),
        end_tick: 0,
        tempos: Vec::new(),
        warnings: Vec::new(),
    };
    let mut track = 0usize;
    while track < ntracks as usize {
        if r.pos >= bytes.len() {
            out.warnings
                .push(format!("header declares {ntracks} tracks, found {track}"));
            break;
        }
        let id = r.take(4)?;
        let len = r.u32()? as usize;
        if id != b"MTrk" {
            // unknown chunk types are skipped
            r.take(len)?;
            continue;
        }
        let body = r.take(len)?;
        let body_offset = r.pos - len;
        parse_track(body, body_offset, track, &mut out)?;
        track += 1;
    }
    for w in &out.warnings {
        log::warn!("{w}");
    }
    Ok(out)
}

fn parse_track(body: &[u8], base: usize, track: usize, out: &mut ParsedMidi) -> Result<()> {
    let mut r = Reader { bytes: body, pos: 0 };
    let remap = |e: Error| match e {
        Error::MidiParse { offset, message } => Error::MidiParse {
            offset: offset + base,
            message,
        },
        other => other,
    };
    let mut tick = 0u64;
    let mut running: Option<u8> = None;
    let mut open: HashMap<(u8, u8), VecDeque<u64>> = HashMap::new();
    let mut ended = false;

    let close = |open: &mut HashMap<(u8, u8), VecDeque<u64>>, ch: u8, key: u8, tick: u64, out: &mut ParsedMidi| {
        if let Some(onset) = open.get_mut(&(ch, key)).and_then(VecDeque::pop_front) {
            if tick > onset {
                out.notes.push(TimedNote {
                    onset,
                    duration: tick - onset,
                    pitch: key,
                    track,
                });
            } else {
                out.warnings
                    .push(format!("track {track}: zero-length note {key} at tick {tick} dropped"));
            }
        }
    };

    while r.pos < body.len() {
        tick += r.vlq().map_err(remap)?;
        let first = r.u8().map_err(remap)?;
        let status = if first & 0x80 != 0 {
            first
        } else {
            r.pos -= 1;
            match running {
                Some(s) => s,
                None => return Err(remap(r.err::<()>("data byte without running status").unwrap_err())),
            }
        };
        match status {
            0x80..=0xef => {
                running = Some(status);
                let kind = status & 0xf0;
                let ch = status & 0x0f;
                let a = r.u8().map_err(remap)?;
                if kind == 0xc0 || kind == 0xd0 {
                    continue;
                }
                let b = r.u8().map_err(remap)?;
                if a > 127 || b > 127 {
                    r.pos -= 2;
                    return Err(remap(r.err::<()>("data byte has high bit set").unwrap_err()));
                }
                match kind {
                    0x90 if b > 0 => open.entry((ch, a)).or_default().push_back(tick),
                    0x80 | 0x90 => close(&mut open, ch, a, tick, out),
                    _ => {}
                }
            }
            0xff => {
                running = None;
                let kind = r.u8().map_err(remap)?;
                let len = r.vlq().map_err(remap)? as usize;
                let data = r.take(len).map_err(remap)?;
                match kind {
                    0x2f => {
                        ended = true;
                        break;
                    }
                    0x51 if len == 3 => {
                        let us = u32::from_be_bytes([0, data[0], data[1], data[2]]);
                        out.tempos.push((tick, us));
                    }
                    0x58 if len >= 2 && (data[0] != 4 || data[1] != 2) => {
                        out.warnings.push(format!(
                            "track {track}: time signature {}/{} ignored, assuming 4/4",
                            data[0],
                            1u32 << data[1].min(31)
                        ));
                    }
                    _ => {}
                }
            }
            0xf0 | 0xf7 => {
                running = None;
                let len = r.vlq().map_err(remap)? as usize;
                r.take(len).map_err(remap)?;
            }
            _ => {
                r.pos -= 1;
                return Err(remap(
                    r.err::<()>(format!("unexpected status byte {status:#04x}"))
                        .unwrap_err(),
                ));
            }
        }
    }
    if !ended {
        out.warnings.push(format!("track {track}: missing end-of-track event"));
    }
    let mut dangling: Vec<_> = open.into_iter().filter(|(_, q)| !q.is_empty()).collect();
    dangling.sort_by_key(|(k, _)| *k);
    for ((_, key), onsets) in dangling {
        for onset in onsets {
            out.warnings.push(format!(
                "track {track}: note {key} at tick {onset} never released, closed at track end"
            ));
            if tick > onset {
                out.notes.push(TimedNote {
                    onset,
                    duration: tick - onset,
                    pitch: key,
                    track,
                });
            }
        }
    }
    out.end_tick = out.end_tick.max(tick);
    Ok(())
}

/// A quantized, track-merged roll plus what was lost on the way.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub roll: PianoRoll,
    pub dropped: usize,
}

/// Round `num / den` to the nearest integer, ties up.
fn round_ratio(num: u64, den: u64) -> u64 {
    (2 * num + den) / (2 * den)
}

/// Snap notes to the grid and merge all tracks into one roll.
///
/// The roll spans at least `length_ticks` (the file's end-of-track), so
/// trailing silence survives a round trip.
pub fn quantize_merge(notes: &[TimedNote], ppq: u16, length_ticks: u64, cfg: &QuantizeConfig) -> Result<Quantized> {
    cfg.validate()?;
    if ppq == 0 {
        return Err(Error::Config("ppq must be positive".into()));
    }
    let spb = cfg.steps_per_bar as u64;
    let ticks_per_bar = 4 * u64::from(ppq);
    let to_step = |tick: u64| round_ratio(tick * spb, ticks_per_bar) as usize;

    let lo = cfg.pitch_offset as usize;
    let hi = lo + cfg.pitch_count;
    let mut dropped = 0;
    let mut spans = Vec::with_capacity(notes.len());
    for n in notes {
        let pitch = n.pitch as usize;
        if pitch < lo || pitch >= hi {
            dropped += 1;
            continue;
        }
        let start = to_step(n.onset);
        let end = to_step(n.onset + n.duration).max(start + 1);
        spans.push((pitch - lo, start, end));
    }
    let time_steps = spans
        .iter()
        .map(|s| s.2)
        .max()
        .unwrap_or(0)
        .max(to_step(length_ticks))
        .max(1);
    let mut roll = PianoRoll::new(time_steps, cfg.pitch_count, cfg.pitch_offset)?;
    for (p, start, end) in spans {
        for t in start..end {
            roll.set(t, p, true);
        }
    }
    Ok(Quantized { roll, dropped })
}

/// Cut a roll into consecutive non-overlapping windows, dropping the tail.
pub fn split_samples(roll: &PianoRoll, cfg: &QuantizeConfig) -> Vec<PianoRoll> {
    let w = cfg.window();
    if w == 0 {
        return Vec::new();
    }
    (0..roll.time_steps() / w)
        .map(|i| roll.window(i * w, w).expect("window lies inside the roll"))
        .collect()
}

pub const EXPORT_PPQ: u16 = 480;
pub const DEFAULT_TEMPO_BPM: f64 = 120.0;

fn write_vlq(out: &mut Vec<u8>, mut v: u64) {
    let mut buf = [0u8; 10];
    let mut n = 0;
    loop {
        buf[n] = (v & 0x7f) as u8;
        n += 1;
        v >>= 7;
        if v == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(if i > 0 { buf[i] | 0x80 } else { buf[i] });
    }
}

/// Write a format-0 file. Each held note becomes one note-on/note-off pair.
pub fn export_midi(roll: &PianoRoll, cfg: &QuantizeConfig, tempo_bpm: f64) -> Result<Vec<u8>> {
    cfg.validate()?;
    if !(tempo_bpm > 0.0 && tempo_bpm.is_finite()) {
        return Err(Error::Config(format!("tempo must be positive, got {tempo_bpm}")));
    }
    let ticks_per_bar = 4 * u64::from(EXPORT_PPQ);
    if ticks_per_bar % cfg.steps_per_bar as u64 != 0 {
        return Err(Error::Config(format!(
            "{} steps per bar do not divide {ticks_per_bar} ticks",
            cfg.steps_per_bar
        )));
    }
    let tps = ticks_per_bar / cfg.steps_per_bar as u64;

    // (tick, is_on, pitch); offs sort before ons at the same tick
    let mut events: Vec<(u64, bool, u8)> = Vec::new();
    for n in held_notes(roll) {
        let pitch = roll.midi_pitch(n.pitch);
        events.push((n.start as u64 * tps, true, pitch));
        events.push(((n.start + n.len) as u64 * tps, false, pitch));
    }
    events.sort();

    let mut track = Vec::new();
    let us_per_quarter = (60_000_000.0 / tempo_bpm).round().clamp(1.0, 16_777_215.0) as u32;
    track.extend_from_slice(&[0x00, 0xff, 0x51, 0x03]);
    track.extend_from_slice(&us_per_quarter.to_be_bytes()[1..]);
    let mut last = 0u64;
    for (tick, on, pitch) in events {
        write_vlq(&mut track, tick - last);
        last = tick;
        if on {
            track.extend_from_slice(&[0x90, pitch, 80]);
        } else {
            track.extend_from_slice(&[0x80, pitch, 0]);
        }
    }
    let end = roll.time_steps() as u64 * tps;
    write_vlq(&mut track, end - last);
    track.extend_from_slice(&[0xff, 0x2f, 0x00]);

    let mut out = Vec::with_capacity(track.len() + 22);
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&EXPORT_PPQ.to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    Ok(out)
}

/// Parse and quantize a whole file into one roll.
pub fn midi_to_roll(bytes: &[u8], cfg: &QuantizeConfig) -> Result<Quantized> {
    let parsed = parse_midi(bytes)?;
    quantize_merge(&parsed.notes, parsed.ppq, parsed.end_tick, cfg)
}

/// One training sample cut from a source file.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub source: String,
    pub roll: PianoRoll,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    id: String,
    source: String,
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case(ext))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Ingest every `.mid` file in a directory (sorted by name) into samples.
pub fn ingest_dir(dir: &Path, cfg: &QuantizeConfig) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    let mut files = sorted_files(dir, "mid")?;
    files.extend(sorted_files(dir, "midi")?);
    for path in files {
        let bytes = fs::read(&path)?;
        let q = midi_to_roll(&bytes, cfg)?;
        if q.dropped > 0 {
            log::info!(
                "{}: {} notes outside the pitch range dropped",
                path.display(),
                q.dropped
            );
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("sample")
            .to_string();
        let source = path
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        for (i, roll) in split_samples(&q.roll, cfg).into_iter().enumerate() {
            samples.push(Sample {
                id: format!("{stem}-{i:04}"),
                source: source.clone(),
                roll,
            });
        }
    }
    Ok(samples)
}

/// Write one roll JSON per sample plus `index.json`.
pub fn write_corpus(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = Vec::with_capacity(samples.len());
    for s in samples {
        fs::write(dir.join(format!("{}.json", s.id)), s.roll.to_json())?;
        index.push(IndexEntry {
            id: s.id.clone(),
            source: s.source.clone(),
        });
    }
    fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

/// Load rolls from a directory: an ingested corpus (`index.json`), loose
/// piano-roll JSON files, or MIDI files to ingest on the fly.
pub fn load_rolls(dir: &Path, cfg: &QuantizeConfig) -> Result<Vec<PianoRoll>> {
    let index_path = dir.join("index.json");
    if index_path.is_file() {
        let index: Vec<IndexEntry> = serde_json::from_str(&fs::read_to_string(&index_path)?)?;
        return index
            .iter()
            .map(|e| PianoRoll::from_json(&fs::read_to_string(dir.join(format!("{}.json", e.id)))?))
            .collect();
    }
    let mut rolls = Vec::new();
    for path in sorted_files(dir, "json")? {
        rolls.push(PianoRoll::from_json(&fs::read_to_string(path)?)?);
    }
    rolls.extend(ingest_dir(dir, cfg)?.into_iter().map(|s| s.roll));
    Ok(rolls)
}
