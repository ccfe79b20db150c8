//! Corpus statistics and distances between pitch histograms.
//!
//! A note is a maximal run of occupied cells at one pitch, so a held
//! quarter note counts once.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roll::{held_notes, PianoRoll};

/// Pitch classes as a 12-bit mask, bit 0 = C.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scale(pub u16);

impl Scale {
    pub const C_MAJOR: Scale = Scale(0b1010_1011_0101);

    pub fn from_classes(classes: &[u8]) -> Self {
        Scale(classes.iter().fold(0, |m, &c| m | 1 << (c % 12)))
    }

    pub fn contains(&self, midi_pitch: u8) -> bool {
        self.0 >> (midi_pitch % 12) & 1 == 1
    }
}

impl Default for Scale {
    fn default() -> Self {
        Self::C_MAJOR
    }
}

fn midi_notes(rolls: &[PianoRoll]) -> impl Iterator<Item = u8> + '_ {
    rolls
        .iter()
        .flat_map(|r| held_notes(r).into_iter().map(move |n| r.midi_pitch(n.pitch)))
}

/// Distinct pitch classes over every note in the corpus.
pub fn pitch_class_count(rolls: &[PianoRoll]) -> usize {
    midi_notes(rolls).map(|p| p % 12).collect::<BTreeSet<_>>().len()
}

/// Distinct absolute pitches over every note in the corpus.
pub fn pitch_count(rolls: &[PianoRoll]) -> usize {
    midi_notes(rolls).collect::<BTreeSet<_>>().len()
}

/// Fraction of notes inside `scale`; `None` for a corpus without notes.
pub fn in_scale_rate(rolls: &[PianoRoll], scale: Scale) -> Option<f64> {
    let (mut inside, mut total) = (0usize, 0usize);
    for p in midi_notes(rolls) {
        total += 1;
        inside += usize::from(scale.contains(p));
    }
    (total > 0).then(|| inside as f64 / total as f64)
}

/// Fraction of time steps, pooled over the corpus, sounding 4 or more pitches.
pub fn polyphonic_rate(rolls: &[PianoRoll]) -> f64 {
    let (mut poly, mut steps) = (0usize, 0usize);
    for r in rolls {
        for row in r.cells().chunks(r.pitch_count().max(1)).take(r.time_steps()) {
            steps += 1;
            poly += usize::from(row.iter().filter(|&&on| on).count() >= 4);
        }
    }
    if steps == 0 {
        0.0
    } else {
        poly as f64 / steps as f64
    }
}

/// Note count per pitch row. All rolls must share pitch range.
pub fn pitch_histogram(rolls: &[PianoRoll]) -> Result<Vec<u64>> {
    let Some(first) = rolls.first() else {
        return Ok(Vec::new());
    };
    let mut hist = vec![0u64; first.pitch_count()];
    for r in rolls {
        if r.pitch_count() != first.pitch_count() || r.pitch_offset() != first.pitch_offset() {
            return Err(Error::Shape("corpus mixes pitch ranges".into()));
        }
        for n in held_notes(r) {
            hist[n.pitch] += 1;
        }
    }
    Ok(hist)
}

/// Sum adjacent bins in groups of `width`; a short last group is kept.
pub fn bin(hist: &[u64], width: usize) -> Vec<u64> {
    hist.chunks(width.max(1)).map(|c| c.iter().sum()).collect()
}

fn normalized(h: &[f64]) -> Result<Vec<f64>> {
    if h.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::Config(
            "histogram entries must be finite and non-negative".into(),
        ));
    }
    let total: f64 = h.iter().sum();
    if total <= 0.0 {
        return Err(Error::EmptySupport);
    }
    Ok(h.iter().map(|v| v / total).collect())
}

fn same_len(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() == q.len() {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "histograms of length {} and {}",
            p.len(),
            q.len()
        )))
    }
}

/// `-ln Σ sqrt(p_i q_i)` over normalized histograms. Infinite for disjoint
/// supports.
pub fn bhattacharyya(p: &[f64], q: &[f64]) -> Result<f64> {
    same_len(p, q)?;
    let (p, q) = (normalized(p)?, normalized(q)?);
    let bc: f64 = p.iter().zip(&q).map(|(a, b)| (a * b).sqrt()).sum();
    // rounding can push the coefficient a hair above 1
    Ok((-bc.ln()).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub df: usize,
    pub d: f64,
    pub p_value: f64,
}

/// Survival function of the Kolmogorov distribution, `P(K > x)`.
pub fn kolmogorov_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < 1.18 {
        // small-x series converges fast where the alternating one does not
        let c = std::f64::consts::PI * std::f64::consts::PI / (8.0 * x * x);
        let s: f64 = (1..=20)
            .map(|j| {
                let k = (2 * j - 1) as f64;
                (-k * k * c).exp()
            })
            .sum();
        (1.0 - (2.0 * std::f64::consts::PI).sqrt() / x * s).clamp(0.0, 1.0)
    } else {
        let s: f64 = (1..=100)
            .map(|j| {
                let sign = if j % 2 == 1 { 1.0 } else { -1.0 };
                sign * (-2.0 * (j * j) as f64 * x * x).exp()
            })
            .sum();
        (2.0 * s).clamp(0.0, 1.0)
    }
}

/// Two-sample Kolmogorov-Smirnov comparison of two histograms over the same
/// support. `D` is the largest gap between the cumulative distributions.
/// The p-value treats each histogram as a sample of size `n` = number of
/// bins, giving effective size `n*n/(n+n)`, with the usual small-sample
/// correction to the asymptotic distribution.
pub fn ks_test(p: &[f64], q: &[f64]) -> Result<KsResult> {
    same_len(p, q)?;
    let (p, q) = (normalized(p)?, normalized(q)?);
    let (mut cp, mut cq, mut d) = (0.0, 0.0, 0.0f64);
    for (a, b) in p.iter().zip(&q) {
        cp += a;
        cq += b;
        d = d.max((cp - cq).abs());
    }
    let n = p.len() as f64;
    let ne = (n * n / (n + n)).sqrt();
    let lambda = (ne + 0.12 + 0.11 / ne) * d;
    Ok(KsResult {
        df: p.len(),
        d,
        p_value: kolmogorov_sf(lambda),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pc: usize,
    pub p: usize,
    /// `None` when the corpus has no notes.
    pub isr: Option<f64>,
    pub pr: f64,
    pub pitch_histogram: Vec<u64>,
}

pub fn report(rolls: &[PianoRoll], scale: Scale) -> Result<MetricReport> {
    Ok(MetricReport {
        pc: pitch_class_count(rolls),
        p: pitch_count(rolls),
        isr: in_scale_rate(rolls, scale),
        pr: polyphonic_rate(rolls),
        pitch_histogram: pitch_histogram(rolls)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub generated: MetricReport,
    pub training: MetricReport,
    pub bhattacharyya: f64,
    pub ks: KsResult,
    /// Both pitch histograms with two pitches per bin, for plotting.
    pub binned_generated: Vec<u64>,
    pub binned_training: Vec<u64>,
}

/// Reports for both corpora plus distances between their per-pitch
/// histograms, so the KS support is the full pitch range.
pub fn evaluate_corpus(generated: &[PianoRoll], training: &[PianoRoll], scale: Scale) -> Result<Comparison> {
    if let (Some(g), Some(t)) = (generated.first(), training.first()) {
        if g.pitch_count() != t.pitch_count() || g.pitch_offset() != t.pitch_offset() {
            return Err(Error::Shape("corpora cover different pitch ranges".into()));
        }
    }
    let generated = report(generated, scale)?;
    let training = report(training, scale)?;
    let as_f64 = |h: &[u64]| h.iter().map(|&v| v as f64).collect::<Vec<_>>();
    let (g, t) = (as_f64(&generated.pitch_histogram), as_f64(&training.pitch_histogram));
    Ok(Comparison {
        bhattacharyya: bhattacharyya(&g, &t)?,
        ks: ks_test(&g, &t)?,
        binned_generated: bin(&generated.pitch_histogram, 2),
        binned_training: bin(&training.pitch_histogram, 2),
        generated,
        training,
    })
}

/// Aligned text table with columns PC, P, ISR, PR.
pub fn table(rows: &[(&str, &MetricReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
    let mut s = format!("{:<width$}  {:>4}  {:>4}  {:>6}  {:>6}\n", "", "PC", "P", "ISR", "PR");
    for (name, r) in rows {
        let isr = r.isr.map_or("n/a".to_string(), |v| format!("{v:.3}"));
        writeln!(s, "{name:<width$}  {:>4}  {:>4}  {isr:>6}  {:>6.3}", r.pc, r.p, r.pr).expect("writing to a String");
    }
    s
}
