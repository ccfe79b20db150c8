//! Approximate notewise log likelihood of a target roll given an input.
//!
//! Many edit sequences lead from one roll to another. The estimate sums
//! `p(s)` over a tractable family of them: every ordering of the `K`
//! required toggles (level 0), and at level `d` those orderings with `d`
//! extra add/remove pairs on cells the model found likely along the way.
//! Every level contributes `(K+2d)!/2^d` times the mean path probability
//! over the paths it visits, and the total is divided by `K`.

use std::collections::HashMap;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roll::{symmetric_difference, Cell, CellSet, EditEvent, EditSequence, PianoRoll};
use crate::scorer::Scorer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LLConfig {
    pub max_level: usize,
    pub orderings_per_level: usize,
    pub pool_size: usize,
    pub seed: u64,
    /// Allow `max_level >= 2`, which combines distinct pool cells.
    pub experimental_levels: bool,
}

impl Default for LLConfig {
    fn default() -> Self {
        Self {
            max_level: 1,
            orderings_per_level: 64,
            pool_size: 8,
            seed: 0,
            experimental_levels: false,
        }
    }
}

impl LLConfig {
    pub fn validate(&self) -> Result<()> {
        if self.orderings_per_level == 0 {
            return Err(Error::Config("orderings_per_level must be at least 1".into()));
        }
        if self.max_level >= 2 && !self.experimental_levels {
            return Err(Error::Config(format!(
                "max_level {} needs the experimental levels flag",
                self.max_level
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LLResult {
    pub notewise_ll: f64,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "D")]
    pub max_level: usize,
    /// Log of each level's contribution before the division by `K`.
    pub per_level_mass: Vec<f64>,
    pub sequences_evaluated: usize,
}

impl LLResult {
    /// Log of the summed mass over all levels, not divided by `K`.
    pub fn log_mass(&self) -> f64 {
        log_sum_exp(&self.per_level_mass)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }
}

/// Cells that must be toggled to turn `input` into `target`.
pub fn min_edits(input: &PianoRoll, target: &PianoRoll) -> Result<CellSet> {
    symmetric_difference(input, target)
}

/// `ln n!`, summed in log space.
pub fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|i| (i as f64).ln()).sum()
}

/// `ln Σ exp(x)`, summed in ascending order so the result does not depend on
/// the order the terms were produced in.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let mut v: Vec<f64> = xs.iter().copied().filter(|x| *x > f64::NEG_INFINITY).collect();
    if v.is_empty() {
        return f64::NEG_INFINITY;
    }
    v.sort_by(f64::total_cmp);
    let max = v[v.len() - 1];
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn log_softmax(logits: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    let ok = |i: usize| mask.is_none_or(|m| !m[i]);
    let max = (0..logits.len())
        .filter(|&i| ok(i))
        .map(|i| logits[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let z = (0..logits.len())
        .filter(|&i| ok(i))
        .map(|i| (logits[i] - max).exp())
        .sum::<f64>()
        .ln();
    (0..logits.len())
        .map(|i| if ok(i) { logits[i] - max - z } else { f64::NEG_INFINITY })
        .collect()
}

/// Upper bound on cached floats, about 64 MB.
const CACHE_FLOATS: usize = 1 << 23;

/// Memoized log-softmax per roll state.
struct Evaluator<'a, S: ?Sized> {
    model: &'a S,
    add_only: bool,
    cache: HashMap<Vec<bool>, Rc<[f64]>>,
}

impl<'a, S: Scorer + ?Sized> Evaluator<'a, S> {
    fn new(model: &'a S, add_only: bool) -> Self {
        Self {
            model,
            add_only,
            cache: HashMap::new(),
        }
    }

    fn log_probs(&mut self, roll: &PianoRoll) -> Result<Rc<[f64]>> {
        if let Some(v) = self.cache.get(roll.cells()) {
            return Ok(v.clone());
        }
        let logits = self.model.logits(roll)?;
        if logits.len() != roll.cell_count() {
            return Err(Error::Shape(format!(
                "scorer returned {} logits for {} cells",
                logits.len(),
                roll.cell_count()
            )));
        }
        let mask = self.add_only.then(|| roll.cells());
        let lp: Rc<[f64]> = log_softmax(&logits, mask).into();
        if (self.cache.len() + 1) * lp.len() <= CACHE_FLOATS {
            self.cache.insert(roll.cells().to_vec(), lp.clone());
        }
        Ok(lp)
    }

    /// Log probability of `seq` from `input`. With `pool` set, records for
    /// every cell outside `exclude` the largest probability seen.
    fn path(&mut self, input: &PianoRoll, seq: &[Cell], mut pool: Option<(&mut [f64], &[bool])>) -> Result<f64> {
        let mut roll = input.clone();
        let mut total = 0.0;
        for &(t, p) in seq {
            roll.check(t, p)?;
            let lp = self.log_probs(&roll)?;
            if let Some((best, exclude)) = pool.as_mut() {
                for (i, &l) in lp.iter().enumerate() {
                    if !exclude[i] && l > best[i] {
                        best[i] = l;
                    }
                }
            }
            total += lp[roll.index(t, p)];
            roll.toggle(EditEvent::new(t, p))?;
        }
        Ok(total)
    }
}

/// `Σ_i log softmax(forward(roll_{i-1}))[event_i]`.
pub fn sequence_logprob<S: Scorer + ?Sized>(model: &S, input: &PianoRoll, seq: &EditSequence) -> Result<f64> {
    let cells: Vec<Cell> = seq.events.iter().map(|e| e.cell()).collect();
    Evaluator::new(model, false).path(input, &cells, None)
}

/// Next lexicographic permutation in place; false after the last one.
fn next_permutation(v: &mut [usize]) -> bool {
    let Some(i) = (1..v.len()).rev().find(|&i| v[i - 1] < v[i]) else {
        return false;
    };
    let j = (i..v.len())
        .rev()
        .find(|&j| v[j] > v[i - 1])
        .expect("a larger element exists");
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

/// `ln(n!/2^d)` compared against `ln |S|` without forming the integer.
fn fits(ln_count: f64, budget: usize) -> bool {
    ln_count <= (budget as f64).ln() + 1e-9
}

struct Level {
    log_mass: f64,
    evaluated: usize,
}

/// Level 0: orderings of `required`, all of them when `K! <= |S|`.
fn level_zero<S: Scorer + ?Sized>(
    eval: &mut Evaluator<'_, S>,
    input: &PianoRoll,
    required: &[Cell],
    budget: usize,
    rng: &mut ChaCha8Rng,
    mut pool: Option<(&mut [f64], &[bool])>,
) -> Result<Level> {
    let k = required.len();
    let mut logs = Vec::new();
    if fits(ln_factorial(k), budget) {
        let mut order: Vec<usize> = (0..k).collect();
        loop {
            let seq: Vec<Cell> = order.iter().map(|&i| required[i]).collect();
            logs.push(eval.path(input, &seq, pool.as_mut().map(|(b, e)| (&mut **b, *e)))?);
            if !next_permutation(&mut order) {
                break;
            }
        }
        Ok(Level {
            log_mass: log_sum_exp(&logs),
            evaluated: logs.len(),
        })
    } else {
        let mut seq = required.to_vec();
        for _ in 0..budget {
            seq.shuffle(rng);
            logs.push(eval.path(input, &seq, pool.as_mut().map(|(b, e)| (&mut **b, *e)))?);
        }
        Ok(Level {
            log_mass: ln_factorial(k) + log_sum_exp(&logs) - (budget as f64).ln(),
            evaluated: budget,
        })
    }
}

/// Paths through `required` plus one add/remove pair on each of `extra`.
/// Every distinct arrangement is visited when there are at most `budget` of
/// them; otherwise `budget` arrangements are drawn uniformly.
fn level_with_pairs<S: Scorer + ?Sized>(
    eval: &mut Evaluator<'_, S>,
    input: &PianoRoll,
    required: &[Cell],
    extra: &[Cell],
    budget: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Level> {
    let k = required.len();
    let d = extra.len();
    let n = k + 2 * d;
    let ln_count = ln_factorial(n) - d as f64 * 2f64.ln();
    let mut logs = Vec::new();
    if d == 1 && fits(ln_count, budget) {
        let q = extra[0];
        let mut order: Vec<usize> = (0..k).collect();
        loop {
            for i in 0..n {
                for j in i + 1..n {
                    let mut rest = order.iter().map(|&o| required[o]);
                    let seq: Vec<Cell> = (0..n)
                        .map(|pos| {
                            if pos == i || pos == j {
                                q
                            } else {
                                rest.next().expect("k slots")
                            }
                        })
                        .collect();
                    logs.push(eval.path(input, &seq, None)?);
                }
            }
            if !next_permutation(&mut order) {
                break;
            }
        }
        return Ok(Level {
            log_mass: log_sum_exp(&logs),
            evaluated: logs.len(),
        });
    }
    // a uniform shuffle of the multiset is uniform over its distinct arrangements
    let mut seq: Vec<Cell> = required
        .iter()
        .copied()
        .chain(extra.iter().flat_map(|&q| [q, q]))
        .collect();
    for _ in 0..budget {
        seq.shuffle(rng);
        logs.push(eval.path(input, &seq, None)?);
    }
    Ok(Level {
        log_mass: ln_count + log_sum_exp(&logs) - (budget as f64).ln(),
        evaluated: budget,
    })
}

fn level_rng(seed: u64, level: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(level as u64);
    rng
}

/// Top `size` cells by recorded log probability, ties to the lower index.
fn top_cells(best: &[f64], roll: &PianoRoll, size: usize) -> Vec<Cell> {
    let mut idx: Vec<usize> = (0..best.len()).filter(|&i| best[i] > f64::NEG_INFINITY).collect();
    idx.sort_by(|&a, &b| best[b].total_cmp(&best[a]).then(a.cmp(&b)));
    idx.into_iter().take(size).map(|i| roll.cell_at(i)).collect()
}

fn combinations(n: usize, d: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(d);
    fn rec(start: usize, n: usize, d: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == d {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, d, cur, out);
            cur.pop();
        }
    }
    rec(0, n, d, &mut cur, &mut out);
    out
}

pub fn approx_notewise_ll<S: Scorer + ?Sized>(
    model: &S,
    input: &PianoRoll,
    target: &PianoRoll,
    cfg: &LLConfig,
) -> Result<LLResult> {
    cfg.validate()?;
    let required: Vec<Cell> = min_edits(input, target)?.into_iter().collect();
    let k = required.len();
    if k == 0 {
        return Err(Error::UndefinedLikelihood);
    }
    let mut eval = Evaluator::new(model, false);
    let mut exclude = vec![false; input.cell_count()];
    for &(t, p) in &required {
        exclude[input.index(t, p)] = true;
    }
    let mut best = vec![f64::NEG_INFINITY; input.cell_count()];
    let zero = level_zero(
        &mut eval,
        input,
        &required,
        cfg.orderings_per_level,
        &mut level_rng(cfg.seed, 0),
        Some((&mut best, &exclude)),
    )?;
    let pool = top_cells(&best, input, cfg.pool_size);
    let mut per_level_mass = vec![zero.log_mass];
    let mut evaluated = zero.evaluated;

    for d in 1..=cfg.max_level {
        let mut rng = level_rng(cfg.seed, d);
        let mut terms = Vec::new();
        for combo in combinations(pool.len(), d) {
            let extra: Vec<Cell> = combo.iter().map(|&i| pool[i]).collect();
            let level = level_with_pairs(&mut eval, input, &required, &extra, cfg.orderings_per_level, &mut rng)?;
            terms.push(level.log_mass);
            evaluated += level.evaluated;
        }
        per_level_mass.push(log_sum_exp(&terms));
    }
    let total = log_sum_exp(&per_level_mass);
    Ok(LLResult {
        notewise_ll: total / k as f64,
        k,
        max_level: cfg.max_level,
        per_level_mass,
        sequences_evaluated: evaluated,
    })
}

/// Same estimate for an add-only model: only level 0, and each step's
/// softmax covers the empty cells alone.
pub fn onade_notewise_ll<S: Scorer + ?Sized>(
    model: &S,
    input: &PianoRoll,
    target: &PianoRoll,
    cfg: &LLConfig,
) -> Result<LLResult> {
    if cfg.orderings_per_level == 0 {
        return Err(Error::Config("orderings_per_level must be at least 1".into()));
    }
    let diff = min_edits(input, target)?;
    if diff.iter().any(|&(t, p)| input.get(t, p)) {
        return Err(Error::Unreachable);
    }
    let required: Vec<Cell> = diff.into_iter().collect();
    let k = required.len();
    if k == 0 {
        return Err(Error::UndefinedLikelihood);
    }
    let mut eval = Evaluator::new(model, true);
    let zero = level_zero(
        &mut eval,
        input,
        &required,
        cfg.orderings_per_level,
        &mut level_rng(cfg.seed, 0),
        None,
    )?;
    Ok(LLResult {
        notewise_ll: zero.log_mass / k as f64,
        k,
        max_level: 0,
        per_level_mass: vec![zero.log_mass],
        sequences_evaluated: zero.evaluated,
    })
}
