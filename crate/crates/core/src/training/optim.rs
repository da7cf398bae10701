//! Decoupled-weight-decay adaptive-moment optimizer and the one-cycle
//! learning-rate schedule.

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tensor::{Scalar, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One-cycle schedule: linear ramp from `base/25` to `base` over the first
/// 10% of steps, cosine decay to `base/100` afterwards.
#[derive(Debug, Clone, Copy)]
pub struct OneCycle {
    pub base_lr: f64,
    pub total_steps: usize,
}

impl OneCycle {
    pub fn lr_at(&self, step: usize) -> f64 {
        let start = self.base_lr / 25.0;
        let floor = self.base_lr / 100.0;
        let warmup = ((self.total_steps as f64) * 0.1).round() as usize;
        if self.total_steps <= 1 {
            return self.base_lr;
        }
        if warmup > 0 && step < warmup {
            let f = step as f64 / warmup as f64;
            return start + (self.base_lr - start) * f;
        }
        let span = (self.total_steps - warmup).max(1);
        let f = ((step - warmup) as f64 / span as f64).min(1.0);
        floor + (self.base_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * f).cos())
    }
}

/// First/second moment accumulators mirroring the parameter list, plus the
/// step counter.
#[derive(Debug, Clone)]
pub struct OptimState<S: Scalar> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub step: u64,
}

impl<S: Scalar> OptimState<S> {
    pub fn new(params: &ModelParams<S>) -> Self {
        let zeros: Vec<Tensor<S>> = (0..params.len())
            .map(|i| Tensor::zeros(params.tensor_at(i).shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn matches(&self, params: &ModelParams<S>) -> bool {
        self.m.len() == params.len()
            && self
                .m
                .iter()
                .enumerate()
                .all(|(i, t)| t.shape() == params.tensor_at(i).shape())
    }
}

/// One update over all parameters. `grads[i]` pairs with parameter i;
/// missing entries are treated as zero gradients.
#[allow(clippy::needless_range_loop)]
pub fn optimizer_step<S: Scalar>(
    params: &mut ModelParams<S>,
    grads: &[Option<Tensor<S>>],
    state: &mut OptimState<S>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() || !state.matches(params) {
        return Err(Error::InvalidInput(
            "optimizer state/gradients do not mirror the parameter list".into(),
        ));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NanGradient {
                    param: params.name_at(i).to_string(),
                });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    let zero = Tensor::zeros(&[0]);
    for i in 0..params.len() {
        let g = match &grads[i] {
            Some(g) => g,
            None if weight_decay == 0.0 => continue,
            None => &zero,
        };
        let p = params.tensor_at(i);
        let n = p.len();
        let mut new_p = Vec::with_capacity(n);
        let mut new_m = Vec::with_capacity(n);
        let mut new_v = Vec::with_capacity(n);
        let (mt, vt) = (&state.m[i], &state.v[i]);
        for j in 0..n {
            let gj = if g.len() == n { g.data()[j].to_f64() } else { 0.0 };
            let m = BETA1 * mt.data()[j].to_f64() + (1.0 - BETA1) * gj;
            let v = BETA2 * vt.data()[j].to_f64() + (1.0 - BETA2) * gj * gj;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            let pj = p.data()[j].to_f64();
            let update = m_hat / (v_hat.sqrt() + ADAM_EPS) + weight_decay * pj;
            new_p.push(S::from_f64(pj - lr * update));
            new_m.push(S::from_f64(m));
            new_v.push(S::from_f64(v));
        }
        let shape = p.shape().to_vec();
        params.set_at(i, Tensor::new(shape.clone(), new_p)?);
        state.m[i] = Tensor::new(shape.clone(), new_m)?;
        state.v[i] = Tensor::new(shape, new_v)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, ParamSpecs};

    fn single_param(value: f64) -> ModelParams<f64> {
        let mut specs = ParamSpecs::default();
        specs.declare("p", &[1], Init::Zeros);
        let mut params = specs.build::<f64>(0);
        params.set("p", Tensor::new(vec![1], vec![value]).unwrap()).unwrap();
        params
    }

    #[test]
    fn zero_gradient_zero_decay_is_a_fixed_point() {
        let mut params = single_param(1.25);
        let mut state = OptimState::new(&params);
        let grads = vec![Some(Tensor::zeros(&[1]))];
        optimizer_step(&mut params, &grads, &mut state, 0.01, 0.0).unwrap();
        assert_eq!(params.get("p").unwrap().item(), 1.25);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn single_step_matches_hand_trace() {
        // p=1, g=0.5, lr=0.01, wd=0.1:
        //   m = 0.1*0.5 = 0.05, v = 0.001*0.25 = 2.5e-4
        //   m_hat = 0.05/0.1 = 0.5, v_hat = 2.5e-4/1e-3 = 0.25
        //   p' = 1 - 0.01*(0.5/(0.5+1e-8) + 0.1*1)
        let mut params = single_param(1.0);
        let mut state = OptimState::new(&params);
        let grads = vec![Some(Tensor::new(vec![1], vec![0.5]).unwrap())];
        optimizer_step(&mut params, &grads, &mut state, 0.01, 0.1).unwrap();
        let expect = 1.0 - 0.01 * (0.5 / (0.25f64.sqrt() + 1e-8) + 0.1);
        assert!((params.get("p").unwrap().item() - expect).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_aborts_with_parameter_name() {
        let mut params = single_param(1.0);
        let mut state = OptimState::new(&params);
        let grads = vec![Some(Tensor::new(vec![1], vec![f64::NAN]).unwrap())];
        let err = optimizer_step(&mut params, &grads, &mut state, 0.01, 0.0).unwrap_err();
        assert!(err.to_string().contains("`p`"), "{err}");
    }

    #[test]
    fn one_cycle_endpoints() {
        let sched = OneCycle {
            base_lr: 5e-4,
            total_steps: 1000,
        };
        assert!((sched.lr_at(0) - 5e-4 / 25.0).abs() < 1e-12);
        assert!((sched.lr_at(100) - 5e-4).abs() < 1e-12); // 10% of steps
        assert!((sched.lr_at(1000) - 5e-4 / 100.0).abs() < 1e-9);
        // monotone ramp then decay
        assert!(sched.lr_at(50) > sched.lr_at(0));
        assert!(sched.lr_at(500) < sched.lr_at(100));
        assert!(sched.lr_at(900) > sched.lr_at(1000));
    }
}
