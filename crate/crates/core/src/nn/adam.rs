use super::tensor::Tensor;
use super::unet::{round_f32, Grads, NamedTensor, ScorerModel};
use crate::error::{Error, Result};

/// Bias-corrected Adam moments for a list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(params: &[NamedTensor], learning_rate: f64) -> Self {
        Self {
            first_moment: params.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect(),
            second_moment: params.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect(),
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn for_model(model: &ScorerModel) -> Self {
        Self::new(&model.params, 0.001)
    }
}

/// One Adam update of `params` in place. Updated values are rounded to `f32`.
pub fn adam_update(params: &mut [NamedTensor], grads: &[Tensor], opt: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() || params.len() != opt.first_moment.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            opt.first_moment.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&opt.first_moment) {
        if p.tensor.shape() != g.shape() || p.tensor.shape() != m.shape() {
            return Err(Error::Shape(format!(
                "gradient for {} has shape {:?}",
                p.name,
                g.shape()
            )));
        }
    }
    opt.step += 1;
    let t = opt.step as i32;
    let c1 = 1.0 - opt.beta1.powi(t);
    let c2 = 1.0 - opt.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = opt.first_moment[i].data_mut();
        let v = opt.second_moment[i].data_mut();
        for (k, theta) in p.tensor.data_mut().iter_mut().enumerate() {
            m[k] = opt.beta1 * m[k] + (1.0 - opt.beta1) * g[k];
            v[k] = opt.beta2 * v[k] + (1.0 - opt.beta2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *theta = round_f32(*theta - opt.learning_rate * m_hat / (v_hat.sqrt() + opt.epsilon));
        }
    }
    Ok(())
}

pub fn adam_step(model: &mut ScorerModel, grads: &Grads, opt: &mut OptimizerState) -> Result<()> {
    adam_update(&mut model.params, grads, opt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(name: &str, v: f64) -> NamedTensor {
        NamedTensor {
            name: name.into(),
            tensor: Tensor::scalar(v),
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut params = vec![scalar("a", 0.5), scalar("b", -2.0)];
        let before = params.clone();
        let mut opt = OptimizerState::new(&params, 0.001);
        for _ in 0..5 {
            adam_update(&mut params, &[Tensor::scalar(0.0), Tensor::scalar(0.0)], &mut opt).unwrap();
        }
        assert_eq!(params, before);
        assert_eq!(opt.step, 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m = 0.1, v = 0.001; bias correction gives m_hat = v_hat = 1
        let mut params = vec![scalar("a", 1.0)];
        let mut opt = OptimizerState::new(&params, 0.001);
        adam_update(&mut params, &[Tensor::scalar(1.0)], &mut opt).unwrap();
        let expected = 1.0 - 0.001 / (1.0 + 1e-8);
        assert!((params[0].tensor.data()[0] - expected).abs() < 1e-7);
    }

    #[test]
    fn identical_parameters_stay_identical() {
        let mut params = vec![scalar("a", 0.3), scalar("b", 0.3)];
        let mut opt = OptimizerState::new(&params, 0.001);
        for s in 0..20 {
            let g = (s as f64 * 0.7).sin();
            adam_update(&mut params, &[Tensor::scalar(g), Tensor::scalar(g)], &mut opt).unwrap();
            assert_eq!(params[0].tensor, params[1].tensor);
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut params = vec![scalar("a", 0.3)];
        let mut opt = OptimizerState::new(&params, 0.001);
        let bad = Tensor::zeros(&[2]);
        assert!(matches!(
            adam_update(&mut params, &[bad], &mut opt),
            Err(Error::Shape(_))
        ));
        assert!(adam_update(&mut params, &[], &mut opt).is_err());
    }
}
