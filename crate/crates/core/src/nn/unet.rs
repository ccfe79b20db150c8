//! U-Net scorer: one logit per (time, pitch) cell of the input roll.
//!
//! Down block: batch norm, conv, ReLU, conv, ReLU, 2x2 max pool, dropout.
//! The output of the last down block is the bottleneck. Up block: nearest
//! x2 upsampling, conv, ReLU, concatenation with the mirrored skip, batch
//! norm, conv, ReLU, conv, ReLU, dropout. A 1x1 linear conv produces the
//! logits. Filters double per down block and halve per up block.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::autodiff::{masked_log_softmax, BatchStats, Tape, Var};
use super::tensor::Tensor;
use crate::augment::CellDistribution;
use crate::error::{Error, Result};
use crate::roll::PianoRoll;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_filters: usize,
    pub kernel: usize,
    pub dropout_rate: f64,
    pub time_steps: usize,
    pub pitch_count: usize,
    pub pitch_offset: u8,
}

impl UNetConfig {
    /// Five blocks, 32 filters, eight bars of sixteenths over MIDI 36..=81.
    pub fn full() -> Self {
        Self {
            depth: 5,
            base_filters: 32,
            kernel: 3,
            dropout_rate: 0.5,
            time_steps: 128,
            pitch_count: 46,
            pitch_offset: 36,
        }
    }

    /// Small enough to train on a laptop CPU: two bars, three blocks.
    pub fn desk() -> Self {
        Self {
            depth: 3,
            base_filters: 16,
            time_steps: 32,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 8 {
            return Err(Error::Config(format!("depth must be in 1..=8, got {}", self.depth)));
        }
        if self.base_filters == 0 {
            return Err(Error::Config("base_filters must be positive".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel must be odd, got {}", self.kernel)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        PianoRoll::new(self.time_steps, self.pitch_count, self.pitch_offset)?;
        Ok(())
    }

    /// Grid size after zero padding so that `2^depth` divides both sides.
    pub fn padded(&self) -> (usize, usize) {
        let m = 1usize << self.depth;
        (self.time_steps.div_ceil(m) * m, self.pitch_count.div_ceil(m) * m)
    }

    fn filters(&self, level: usize) -> usize {
        self.base_filters << level
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Copy)]
struct ConvIx {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct BnIx {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone, Copy)]
struct DownIx {
    bn: BnIx,
    conv1: ConvIx,
    conv2: ConvIx,
}

#[derive(Debug, Clone, Copy)]
struct UpIx {
    up: ConvIx,
    bn: BnIx,
    conv1: ConvIx,
    conv2: ConvIx,
}

#[derive(Debug, Clone)]
struct Layout {
    down: Vec<DownIx>,
    up: Vec<UpIx>,
    head: ConvIx,
    bn_count: usize,
}

/// Parameter and buffer shapes in creation order, plus the index layout.
struct Plan {
    params: Vec<(String, Vec<usize>)>,
    buffers: Vec<(String, Vec<usize>)>,
    layout: Layout,
}

fn plan(cfg: &UNetConfig) -> Plan {
    let mut params = Vec::new();
    let mut buffers = Vec::new();
    let k = cfg.kernel;
    let conv = |params: &mut Vec<(String, Vec<usize>)>, name: String, cin: usize, cout: usize, k: usize| {
        params.push((format!("{name}.weight"), vec![cout, cin, k, k]));
        params.push((format!("{name}.bias"), vec![cout]));
        ConvIx {
            w: params.len() - 2,
            b: params.len() - 1,
        }
    };
    let mut bn_count = 0;
    let mut bn =
        |params: &mut Vec<(String, Vec<usize>)>, buffers: &mut Vec<(String, Vec<usize>)>, name: String, c: usize| {
            bn_count += 1;
            params.push((format!("{name}.gamma"), vec![c]));
            params.push((format!("{name}.beta"), vec![c]));
            buffers.push((format!("{name}.running_mean"), vec![c]));
            buffers.push((format!("{name}.running_var"), vec![c]));
            BnIx {
                gamma: params.len() - 2,
                beta: params.len() - 1,
                mean: buffers.len() - 2,
                var: buffers.len() - 1,
            }
        };

    let mut down = Vec::new();
    let mut cin = 1;
    for level in 0..cfg.depth {
        let c = cfg.filters(level);
        let b = bn(&mut params, &mut buffers, format!("down{level}.bn"), cin);
        let conv1 = conv(&mut params, format!("down{level}.conv1"), cin, c, k);
        let conv2 = conv(&mut params, format!("down{level}.conv2"), c, c, k);
        down.push(DownIx { bn: b, conv1, conv2 });
        cin = c;
    }
    let mut up = Vec::new();
    for j in 0..cfg.depth {
        let level = cfg.depth - 1 - j;
        let c = cfg.filters(level);
        let upc = conv(&mut params, format!("up{j}.upconv"), cin, c, k);
        let b = bn(&mut params, &mut buffers, format!("up{j}.bn"), 2 * c);
        let conv1 = conv(&mut params, format!("up{j}.conv1"), 2 * c, c, k);
        let conv2 = conv(&mut params, format!("up{j}.conv2"), c, c, k);
        up.push(UpIx {
            up: upc,
            bn: b,
            conv1,
            conv2,
        });
        cin = c;
    }
    let head = conv(&mut params, "head".into(), cin, 1, 1);
    Plan {
        params,
        buffers,
        layout: Layout {
            down,
            up,
            head,
            bn_count,
        },
    }
}

/// Trained (or freshly initialized) U-Net parameters.
///
/// Parameter values are kept exactly representable as `f32`, which is what
/// the checkpoint stores; arithmetic runs in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerModel {
    pub config: UNetConfig,
    pub params: Vec<NamedTensor>,
    pub buffers: Vec<NamedTensor>,
}

/// Output of a batched forward pass kept for the backward pass.
pub struct ForwardPass {
    pub tape: Tape,
    pub params: Vec<Var>,
    /// `[N, 1, Hp, Wp]` logits over the padded grid.
    pub logits: Var,
    /// Batch statistics per batch-norm layer, present in batch-stat mode.
    pub stats: Vec<Option<BatchStats>>,
}

/// Gradients aligned with `ScorerModel::params`.
pub type Grads = Vec<Tensor>;

pub(crate) fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

impl ScorerModel {
    /// He-uniform convolution weights, zero biases, unit batch-norm scale.
    pub fn new(config: UNetConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let plan = plan(&config);
        let params = plan
            .params
            .into_iter()
            .map(|(name, shape)| {
                let tensor = if name.ends_with(".weight") {
                    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                    let limit = (6.0 / fan_in).sqrt();
                    let data = (0..shape.iter().product())
                        .map(|_| round_f32(rng.random_range(-limit..limit)))
                        .collect();
                    Tensor::from_vec(&shape, data).expect("shape from plan")
                } else if name.ends_with(".gamma") {
                    Tensor::full(&shape, 1.0)
                } else {
                    Tensor::zeros(&shape)
                };
                NamedTensor { name, tensor }
            })
            .collect();
        Ok(Self {
            config,
            params,
            buffers: init_buffers(plan.buffers),
        })
    }

    /// Every parameter zero (batch-norm scales included).
    pub fn zeros(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let plan = plan(&config);
        Ok(Self {
            config,
            params: plan
                .params
                .into_iter()
                .map(|(name, shape)| NamedTensor {
                    name,
                    tensor: Tensor::zeros(&shape),
                })
                .collect(),
            buffers: init_buffers(plan.buffers),
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Check that tensor names and shapes agree with the config.
    pub fn check_layout(&self) -> Result<()> {
        let plan = plan(&self.config);
        let same = |have: &[NamedTensor], want: &[(String, Vec<usize>)]| {
            have.len() == want.len()
                && have
                    .iter()
                    .zip(want)
                    .all(|(h, (n, s))| &h.name == n && h.tensor.shape() == s.as_slice())
        };
        if !same(&self.params, &plan.params) || !same(&self.buffers, &plan.buffers) {
            return Err(Error::Shape("tensor table does not match the model config".into()));
        }
        Ok(())
    }

    fn check_roll(&self, roll: &PianoRoll) -> Result<()> {
        let c = &self.config;
        if roll.time_steps() != c.time_steps
            || roll.pitch_count() != c.pitch_count
            || roll.pitch_offset() != c.pitch_offset
        {
            return Err(Error::Shape(format!(
                "model expects {}x{}@{}, roll is {}x{}@{}",
                c.time_steps,
                c.pitch_count,
                c.pitch_offset,
                roll.time_steps(),
                roll.pitch_count(),
                roll.pitch_offset()
            )));
        }
        Ok(())
    }

    /// Which padded cells belong to the roll.
    pub fn valid_mask(&self) -> Vec<bool> {
        let (hp, wp) = self.config.padded();
        let mut v = vec![false; hp * wp];
        for t in 0..self.config.time_steps {
            for p in 0..self.config.pitch_count {
                v[t * wp + p] = true;
            }
        }
        v
    }

    fn input_tensor(&self, rolls: &[&PianoRoll]) -> Result<Tensor> {
        let (hp, wp) = self.config.padded();
        let mut x = Tensor::zeros(&[rolls.len(), 1, hp, wp]);
        for (i, roll) in rolls.iter().enumerate() {
            self.check_roll(roll)?;
            let d = x.data_mut();
            for t in 0..roll.time_steps() {
                for p in 0..roll.pitch_count() {
                    if roll.get(t, p) {
                        d[i * hp * wp + t * wp + p] = 1.0;
                    }
                }
            }
        }
        Ok(x)
    }

    /// Run the network on a batch, recording everything needed for gradients.
    ///
    /// In training mode dropout is active and batch norm uses batch
    /// statistics, except for single-sample batches, which fall back to the
    /// running statistics.
    pub fn forward_pass(&self, rolls: &[&PianoRoll], training: bool, rng: &mut impl Rng) -> Result<ForwardPass> {
        if rolls.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let layout = plan(&self.config).layout;
        let mut tape = Tape::new();
        let params: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.tensor.clone())).collect();
        let x = self.input_tensor(rolls)?;
        let mut h = tape.leaf(x);
        let batch_stats = training && rolls.len() > 1;
        let k = self.config.kernel;
        let pad = k / 2;
        let rate = self.config.dropout_rate;
        let mut stats = vec![None; layout.bn_count];
        let mut bn_i = 0;

        let check = |tape: &Tape, v: Var, layer: &str| -> Result<()> {
            if tape.value(v).is_finite() {
                Ok(())
            } else {
                Err(Error::Numeric { layer: layer.into() })
            }
        };
        let mut norm =
            |tape: &mut Tape, h: Var, ix: BnIx, stats: &mut Vec<Option<BatchStats>>, name: &str| -> Result<Var> {
                let running =
                    (!batch_stats).then(|| (self.buffers[ix.mean].tensor.data(), self.buffers[ix.var].tensor.data()));
                let (out, s) = tape.batch_norm(h, params[ix.gamma], params[ix.beta], running);
                stats[bn_i] = s;
                bn_i += 1;
                check(tape, out, name)?;
                Ok(out)
            };
        let conv_relu = |tape: &mut Tape, h: Var, ix: ConvIx, name: &str| -> Result<Var> {
            let c = tape.conv2d(h, params[ix.w], params[ix.b], pad);
            check(tape, c, name)?;
            Ok(tape.relu(c))
        };
        let drop = |tape: &mut Tape, h: Var, rng: &mut dyn FnMut() -> f64| -> Var {
            if !training || rate == 0.0 {
                return h;
            }
            let keep = 1.0 / (1.0 - rate);
            let mask = (0..tape.value(h).len())
                .map(|_| if rng() < rate { 0.0 } else { keep })
                .collect();
            tape.dropout(h, mask)
        };
        let mut uniform = || rng.random::<f64>();

        let mut skips = Vec::with_capacity(self.config.depth);
        for (level, ix) in layout.down.iter().enumerate() {
            h = norm(&mut tape, h, ix.bn, &mut stats, &format!("down{level}.bn"))?;
            h = conv_relu(&mut tape, h, ix.conv1, &format!("down{level}.conv1"))?;
            h = conv_relu(&mut tape, h, ix.conv2, &format!("down{level}.conv2"))?;
            skips.push(h);
            h = tape.max_pool2(h);
            h = drop(&mut tape, h, &mut uniform);
        }
        for (j, ix) in layout.up.iter().enumerate() {
            h = tape.upsample2(h);
            h = conv_relu(&mut tape, h, ix.up, &format!("up{j}.upconv"))?;
            let skip = skips.pop().expect("one skip per level");
            h = tape.concat(h, skip);
            h = norm(&mut tape, h, ix.bn, &mut stats, &format!("up{j}.bn"))?;
            h = conv_relu(&mut tape, h, ix.conv1, &format!("up{j}.conv1"))?;
            h = conv_relu(&mut tape, h, ix.conv2, &format!("up{j}.conv2"))?;
            h = drop(&mut tape, h, &mut uniform);
        }
        let logits = tape.conv2d(h, params[layout.head.w], params[layout.head.b], 0);
        check(&tape, logits, "head")?;
        Ok(ForwardPass {
            tape,
            params,
            logits,
            stats,
        })
    }

    /// `[T, P]` logits for one roll.
    pub fn forward(&self, roll: &PianoRoll, training: bool, rng: &mut impl Rng) -> Result<Tensor> {
        let pass = self.forward_pass(&[roll], training, rng)?;
        Ok(self.crop(pass.tape.value(pass.logits).data()))
    }

    fn crop(&self, padded: &[f64]) -> Tensor {
        let (_, wp) = self.config.padded();
        let (t, p) = (self.config.time_steps, self.config.pitch_count);
        let mut out = Vec::with_capacity(t * p);
        for row in 0..t {
            out.extend_from_slice(&padded[row * wp..row * wp + p]);
        }
        Tensor::from_vec(&[t, p], out).expect("cropped size")
    }

    fn pad_target(&self, target: &CellDistribution) -> Result<Vec<f64>> {
        let c = &self.config;
        if target.time_steps != c.time_steps || target.pitch_count != c.pitch_count {
            return Err(Error::Shape("target distribution does not match the model grid".into()));
        }
        if !target.mass.iter().any(|&m| m > 0.0) {
            return Err(Error::EmptySupport);
        }
        let (hp, wp) = c.padded();
        let mut out = vec![0.0; hp * wp];
        for t in 0..c.time_steps {
            out[t * wp..t * wp + c.pitch_count]
                .copy_from_slice(&target.mass[t * c.pitch_count..(t + 1) * c.pitch_count]);
        }
        Ok(out)
    }

    /// Mean loss over a batch and its gradient for every parameter.
    pub fn backward_batch(
        &self,
        batch: &[(&PianoRoll, &CellDistribution)],
        rng: &mut impl Rng,
    ) -> Result<(Grads, f64, Vec<Option<BatchStats>>)> {
        let rolls: Vec<&PianoRoll> = batch.iter().map(|(r, _)| *r).collect();
        let mut targets = Vec::new();
        for (_, d) in batch {
            targets.extend(self.pad_target(d)?);
        }
        let mut pass = self.forward_pass(&rolls, true, rng)?;
        let valid = self.valid_mask();
        let loss = pass.tape.softmax_kl(pass.logits, targets, &valid);
        let value = pass.tape.value(loss).data()[0];
        let mut grads = pass.tape.backward(loss);
        let out = pass
            .params
            .iter()
            .zip(&self.params)
            .map(|(v, p)| {
                grads[v.index()]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(p.tensor.shape()))
            })
            .collect::<Vec<_>>();
        if let Some(bad) = out.iter().zip(&self.params).find(|(g, _)| !g.is_finite()) {
            return Err(Error::Numeric {
                layer: format!("gradient of {}", bad.1.name),
            });
        }
        Ok((out, value, pass.stats))
    }

    /// Loss and gradients for a single roll.
    pub fn backward(&self, roll: &PianoRoll, target: &CellDistribution, rng: &mut impl Rng) -> Result<(Grads, f64)> {
        let (g, l, _) = self.backward_batch(&[(roll, target)], rng)?;
        Ok((g, l))
    }

    /// Blend batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[Option<BatchStats>], momentum: f64) {
        let layout = plan(&self.config).layout;
        let bns = layout.down.iter().map(|d| d.bn).chain(layout.up.iter().map(|u| u.bn));
        for (ix, s) in bns.zip(stats) {
            let Some(s) = s else { continue };
            for (r, b) in self.buffers[ix.mean].tensor.data_mut().iter_mut().zip(&s.mean) {
                *r = round_f32((1.0 - momentum) * *r + momentum * b);
            }
            for (r, b) in self.buffers[ix.var].tensor.data_mut().iter_mut().zip(&s.var) {
                *r = round_f32((1.0 - momentum) * *r + momentum * b);
            }
        }
    }
}

fn init_buffers(shapes: Vec<(String, Vec<usize>)>) -> Vec<NamedTensor> {
    shapes
        .into_iter()
        .map(|(name, shape)| {
            let fill = if name.ends_with("running_var") { 1.0 } else { 0.0 };
            NamedTensor {
                name,
                tensor: Tensor::full(&shape, fill),
            }
        })
        .collect()
}

/// `KL(target || softmax(logits))` for one `[T, P]` logit grid.
pub fn loss(logits: &Tensor, target: &CellDistribution) -> Result<f64> {
    if logits.len() != target.mass.len() {
        return Err(Error::Shape(format!(
            "{} logits for a {}-cell target",
            logits.len(),
            target.mass.len()
        )));
    }
    if !target.mass.iter().any(|&m| m > 0.0) {
        return Err(Error::EmptySupport);
    }
    let valid = vec![true; logits.len()];
    let log_p = masked_log_softmax(logits.data(), &valid);
    Ok(target
        .mass
        .iter()
        .zip(&log_p)
        .filter(|(u, _)| **u > 0.0)
        .map(|(u, lp)| u * (u.ln() - lp))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::uniform_over;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(depth: usize, filters: usize, t: usize, p: usize) -> UNetConfig {
        UNetConfig {
            depth,
            base_filters: filters,
            time_steps: t,
            pitch_count: p,
            pitch_offset: 48,
            ..UNetConfig::full()
        }
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn scale(t: usize, p: usize) -> PianoRoll {
        PianoRoll::from_notes(t, p, 48, (0..t).map(|i| (i, (i * 2) % p))).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let m = ScorerModel::zeros(toy(2, 4, 8, 8)).unwrap();
        let l = m.forward(&scale(8, 8), false, &mut rng(0)).unwrap();
        assert_eq!(l.shape(), &[8, 8]);
        assert!(l.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_config_parameter_layout() {
        let cfg = UNetConfig::full();
        assert_eq!(cfg.padded(), (128, 64));
        let plan = plan(&cfg);
        let names: Vec<&str> = plan.params.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names.iter().filter(|n| n.ends_with("conv1.weight")).count(), 10);
        let bottleneck = &plan.params.iter().find(|(n, _)| n == "down4.conv2.weight").unwrap().1;
        assert_eq!(bottleneck, &vec![512, 512, 3, 3]);
        let last = &plan.params.iter().find(|(n, _)| n == "up4.conv2.weight").unwrap().1;
        assert_eq!(last, &vec![32, 32, 3, 3]);
        assert_eq!(plan.params.last().unwrap().1, vec![1]);
    }

    #[test]
    fn padded_cells_are_cropped() {
        let cfg = toy(3, 2, 10, 46);
        assert_eq!(cfg.padded(), (16, 48));
        let m = ScorerModel::new(cfg, &mut rng(1)).unwrap();
        let l = m.forward(&scale(10, 46), false, &mut rng(0)).unwrap();
        assert_eq!(l.shape(), &[10, 46]);
        assert_eq!(m.valid_mask().iter().filter(|&&v| v).count(), 460);
    }

    #[test]
    fn inference_is_deterministic_and_local_changes_matter() {
        let m = ScorerModel::new(toy(2, 4, 16, 16), &mut rng(2)).unwrap();
        let roll = scale(16, 16);
        let a = m.forward(&roll, false, &mut rng(10)).unwrap();
        let b = m.forward(&roll, false, &mut rng(99)).unwrap();
        assert_eq!(a, b);
        let mut toggled = roll.clone();
        toggled.toggle((5, 3).into()).unwrap();
        let c = m.forward(&toggled, false, &mut rng(10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn training_forward_depends_on_seed_only() {
        let m = ScorerModel::new(toy(2, 4, 16, 16), &mut rng(2)).unwrap();
        let roll = scale(16, 16);
        let a = m.forward(&roll, true, &mut rng(10)).unwrap();
        let b = m.forward(&roll, true, &mut rng(10)).unwrap();
        let c = m.forward(&roll, true, &mut rng(11)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn wrong_roll_shape() {
        let m = ScorerModel::new(toy(2, 4, 16, 16), &mut rng(2)).unwrap();
        assert!(matches!(
            m.forward(&scale(8, 16), false, &mut rng(0)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn non_finite_weights_name_the_layer() {
        let mut m = ScorerModel::new(toy(2, 4, 8, 8), &mut rng(2)).unwrap();
        let i = m.params.iter().position(|p| p.name == "down1.conv1.weight").unwrap();
        m.params[i].tensor.data_mut()[0] = f64::NAN;
        match m.forward(&scale(8, 8), false, &mut rng(0)) {
            Err(Error::Numeric { layer }) => assert_eq!(layer, "down1.conv1"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn loss_closed_forms() {
        let uniform = Tensor::zeros(&[2, 2]);
        let u = uniform_over(2, 2, [(0, 0), (1, 1)]).unwrap();
        assert!((loss(&uniform, &u).unwrap() - 2f64.ln()).abs() < 1e-12);

        // softmax equal to U: mass only on the support
        let peaked = Tensor::from_vec(&[2, 2], vec![0.0, -800.0, -800.0, 0.0]).unwrap();
        assert!(loss(&peaked, &u).unwrap().abs() < 1e-12);

        let l = Tensor::from_vec(&[2, 2], vec![0.2, -1.0, 0.7, 0.0]).unwrap();
        let point = uniform_over(2, 2, [(1, 0)]).unwrap();
        let z: f64 = l.data().iter().map(|v| v.exp()).sum();
        let q = 0.7f64.exp() / z;
        assert!((loss(&l, &point).unwrap() + q.ln()).abs() < 1e-12);

        let empty = CellDistribution {
            time_steps: 2,
            pitch_count: 2,
            mass: vec![0.0; 4],
        };
        assert!(matches!(loss(&l, &empty), Err(Error::EmptySupport)));
    }

    /// Central differences of the loss, recomputed from a fresh forward pass
    /// and the standalone loss function.
    fn jitter_biases(m: &mut ScorerModel, seed: u64) {
        let mut r = rng(seed);
        for p in m.params.iter_mut().filter(|p| p.name.ends_with("bias")) {
            for v in p.tensor.data_mut() {
                *v = round_f32(r.random_range(-0.1..0.1));
            }
        }
    }

    fn fd_check(model: &ScorerModel, batch: &[(&PianoRoll, &CellDistribution)], seed: u64, probes: usize) -> usize {
        let loss_of = |m: &ScorerModel| -> f64 {
            let rolls: Vec<&PianoRoll> = batch.iter().map(|b| b.0).collect();
            let pass = m.forward_pass(&rolls, true, &mut rng(seed)).unwrap();
            let padded = pass.tape.value(pass.logits).data();
            let (hp, wp) = m.config.padded();
            batch
                .iter()
                .enumerate()
                .map(|(i, (_, d))| loss(&m.crop(&padded[i * hp * wp..(i + 1) * hp * wp]), d).unwrap())
                .sum::<f64>()
                / batch.len() as f64
        };
        let (grads, l, _) = model.backward_batch(batch, &mut rng(seed)).unwrap();
        assert!((l - loss_of(model)).abs() < 1e-12);
        let h = 1e-5;
        let mut bad = 0;
        for (pi, p) in model.params.iter().enumerate() {
            let n = p.tensor.len();
            let step = (n / probes).max(1);
            for k in (0..n).step_by(step) {
                let mut plus = model.clone();
                plus.params[pi].tensor.data_mut()[k] += h;
                let mut minus = model.clone();
                minus.params[pi].tensor.data_mut()[k] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let an = grads[pi].data()[k];
                if (fd - an).abs() > 1e-3 * fd.abs().max(an.abs()) + 1e-6 {
                    eprintln!("{}[{k}]: analytic {an} vs fd {fd}", p.name);
                    bad += 1;
                }
            }
        }
        bad
    }

    #[test]
    fn gradients_match_finite_differences_with_batch_statistics() {
        let cfg = UNetConfig {
            dropout_rate: 0.25,
            ..toy(2, 2, 8, 8)
        };
        let mut m = ScorerModel::new(cfg, &mut rng(3)).unwrap();
        // Zero biases put exact zeros at ReLU kinks wherever dropout blanks
        // a receptive field, where finite differences are meaningless.
        jitter_biases(&mut m, 4);
        let a = scale(8, 8);
        let b = PianoRoll::from_notes(8, 8, 48, [(0, 0), (3, 5), (7, 7)]).unwrap();
        let ua = uniform_over(8, 8, [(1, 2), (4, 4), (6, 1)]).unwrap();
        let ub = uniform_over(8, 8, [(3, 5)]).unwrap();
        assert_eq!(fd_check(&m, &[(&a, &ua), (&b, &ub)], 17, 6), 0);
    }
}
