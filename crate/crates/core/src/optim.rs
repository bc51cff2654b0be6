//! Parameter update rules: SGD, RMSProp and Adam.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use libm::{pow, sqrt};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;
pub const RMSPROP_RHO: f64 = 0.9;
pub const RMSPROP_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    RmsProp,
    Adam,
}

impl OptimizerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::RmsProp => "rmsprop",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "rmsprop" => Ok(OptimizerKind::RmsProp),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(alloc::format!("unknown optimizer '{other}'"))),
        }
    }
}

/// Per-parameter auxiliary buffers plus the shared step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub t: u64,
    /// First moment (Adam) keyed by parameter name.
    pub m: BTreeMap<String, Vec<f64>>,
    /// Second moment (Adam) / squared average (RMSProp).
    pub v: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind) -> Self {
        OptimizerState {
            kind,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One optimizer step over all parameters with gradients. Frozen parameters
/// are never touched, not even their moment buffers.
pub fn optimizer_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Vec<f64>>,
    frozen: &BTreeSet<String>,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::Param("learning rate must be positive".into()));
    }
    state.t += 1;
    let t = state.t;
    for (name, grad) in grads {
        if frozen.contains(name) {
            continue;
        }
        let param = params.get_mut(name).ok_or_else(|| Error::Config(alloc::format!(
            "gradient for unknown parameter '{name}'"
        )))?;
        if param.numel() != grad.len() {
            return Err(Error::Shape {
                op: "optimizer_step",
                axis: "gradient length",
                expected: param.numel(),
                got: grad.len(),
            });
        }
        match state.kind {
            OptimizerKind::Sgd => {
                for (p, &g) in param.data_mut().iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::RmsProp => {
                let v = state
                    .v
                    .entry(name.to_string())
                    .or_insert_with(|| vec![0.0; grad.len()]);
                for ((p, &g), vv) in param.data_mut().iter_mut().zip(grad).zip(v.iter_mut()) {
                    *vv = RMSPROP_RHO * *vv + (1.0 - RMSPROP_RHO) * g * g;
                    *p -= lr * g / sqrt(*vv + RMSPROP_EPSILON);
                }
            }
            OptimizerKind::Adam => {
                let m = state
                    .m
                    .entry(name.to_string())
                    .or_insert_with(|| vec![0.0; grad.len()]);
                let v = state
                    .v
                    .entry(name.to_string())
                    .or_insert_with(|| vec![0.0; grad.len()]);
                let bc1 = 1.0 - pow(ADAM_BETA1, t as f64);
                let bc2 = 1.0 - pow(ADAM_BETA2, t as f64);
                for (((p, &g), mm), vv) in param
                    .data_mut()
                    .iter_mut()
                    .zip(grad)
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                {
                    *mm = ADAM_BETA1 * *mm + (1.0 - ADAM_BETA1) * g;
                    *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * g * g;
                    let mhat = *mm / bc1;
                    let vhat = *vv / bc2;
                    *p -= lr * mhat / (sqrt(vhat) + ADAM_EPSILON);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(v: f64) -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert("p".to_string(), Tensor::from_vec(&[1], vec![v]));
        m
    }

    fn single_grad(g: f64) -> BTreeMap<String, Vec<f64>> {
        let mut m = BTreeMap::new();
        m.insert("p".to_string(), vec![g]);
        m
    }

    #[test]
    fn sgd_definition() {
        let mut params = single_param(1.0);
        let grads = single_grad(2.0);
        let mut st = OptimizerState::new(OptimizerKind::Sgd);
        optimizer_step(&mut params, &grads, &BTreeSet::new(), &mut st, 0.1).unwrap();
        assert!((params["p"].data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_first_step_hand_iterated() {
        // m=0.1, v=0.001, mhat=1, vhat=1 => delta ~= -lr
        let mut params = single_param(0.0);
        let grads = single_grad(1.0);
        let mut st = OptimizerState::new(OptimizerKind::Adam);
        optimizer_step(&mut params, &grads, &BTreeSet::new(), &mut st, 1e-4).unwrap();
        let delta = params["p"].data()[0];
        assert!((delta + 9.9999e-5).abs() < 1e-8, "delta {delta}");
    }

    #[test]
    fn rmsprop_first_step_hand_iterated() {
        // v = 0.1 * 4 = 0.4; delta = -0.01 * 2 / sqrt(0.4)
        let mut params = single_param(0.0);
        let grads = single_grad(2.0);
        let mut st = OptimizerState::new(OptimizerKind::RmsProp);
        optimizer_step(&mut params, &grads, &BTreeSet::new(), &mut st, 0.01).unwrap();
        let delta = params["p"].data()[0];
        assert!((delta + 0.03162).abs() < 1e-5, "delta {delta}");
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::RmsProp, OptimizerKind::Adam] {
            let mut params = single_param(3.5);
            let grads = single_grad(0.0);
            let mut st = OptimizerState::new(kind);
            for _ in 0..10 {
                optimizer_step(&mut params, &grads, &BTreeSet::new(), &mut st, 0.1).unwrap();
            }
            assert_eq!(params["p"].data()[0], 3.5, "{kind:?}");
        }
    }

    #[test]
    fn frozen_parameters_untouched() {
        let mut params = single_param(1.0);
        let grads = single_grad(5.0);
        let mut frozen = BTreeSet::new();
        frozen.insert("p".to_string());
        let mut st = OptimizerState::new(OptimizerKind::Adam);
        optimizer_step(&mut params, &grads, &frozen, &mut st, 0.1).unwrap();
        assert_eq!(params["p"].data()[0], 1.0);
        assert!(st.m.is_empty());
    }

    #[test]
    fn step_counter_increments_once_per_call() {
        let mut params = single_param(1.0);
        let grads = single_grad(1.0);
        let mut st = OptimizerState::new(OptimizerKind::Adam);
        for expected in 1..=5u64 {
            optimizer_step(&mut params, &grads, &BTreeSet::new(), &mut st, 1e-3).unwrap();
            assert_eq!(st.t, expected);
        }
    }
}
