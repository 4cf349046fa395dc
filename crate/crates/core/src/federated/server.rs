use serde::{Deserialize, Serialize};

use super::{aggregate, average_models, ClientUpdate, FedError, Weighting};
use crate::autodiff::ParamTree;

/// Server optimizer and its hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ServerOptimizer {
    FedAdam { learning_rate: f64, beta1: f64, beta2: f64, tau: f64 },
    SgdMomentum { learning_rate: f64, momentum: f64 },
}

impl ServerOptimizer {
    pub fn fedadam(learning_rate: f64) -> Self {
        ServerOptimizer::FedAdam { learning_rate, beta1: 0.9, beta2: 0.999, tau: 1e-8 }
    }

    pub fn sgdm(learning_rate: f64, momentum: f64) -> Self {
        ServerOptimizer::SgdMomentum { learning_rate, momentum }
    }

    /// Plain SGD with unit rate and no momentum: `params += delta`.
    pub fn is_identity(&self) -> bool {
        matches!(*self, ServerOptimizer::SgdMomentum { learning_rate, momentum } if learning_rate == 1.0 && momentum == 0.0)
    }

    pub fn validate(&self) -> Result<(), FedError> {
        let bad = |m: String| Err(FedError::InvalidArgument(m));
        match *self {
            ServerOptimizer::FedAdam { learning_rate, beta1, beta2, tau } => {
                if !(learning_rate >= 0.0) || !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                    return bad("fedadam needs learning_rate >= 0 and betas in [0, 1)".into());
                }
                if !(tau > 0.0) {
                    return bad(format!("fedadam tau {tau} must be positive"));
                }
            }
            ServerOptimizer::SgdMomentum { learning_rate, momentum } => {
                if !(learning_rate >= 0.0) || !(0.0..1.0).contains(&momentum) {
                    return bad("sgdm needs learning_rate >= 0 and momentum in [0, 1)".into());
                }
            }
        }
        Ok(())
    }
}

/// Optimizer buffers, each as long as the flattened parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum OptimizerState {
    FedAdam { m: Vec<f64>, v: Vec<f64> },
    SgdMomentum { velocity: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServerState {
    pub params: ParamTree,
    pub optimizer: OptimizerState,
    /// Completed server steps.
    pub round: u64,
}

impl ServerState {
    /// Fresh state with zeroed optimizer buffers.
    pub fn new(params: ParamTree, optimizer: &ServerOptimizer) -> Self {
        let n = params.num_elements();
        let optimizer = match optimizer {
            ServerOptimizer::FedAdam { .. } => OptimizerState::FedAdam { m: vec![0.0; n], v: vec![0.0; n] },
            ServerOptimizer::SgdMomentum { .. } => OptimizerState::SgdMomentum { velocity: vec![0.0; n] },
        };
        Self { params, optimizer, round: 0 }
    }

    fn check_len(&self, delta: &[f64]) -> Result<(), FedError> {
        let expected = self.params.num_elements();
        if delta.len() != expected {
            return Err(FedError::LengthMismatch { expected, found: delta.len() });
        }
        Ok(())
    }

    fn apply(&mut self, increment: impl Fn(usize) -> f64) {
        let mut flat = self.params.flatten();
        for (i, p) in flat.iter_mut().enumerate() {
            *p += increment(i);
        }
        self.params.assign_flat(&flat).expect("length unchanged");
        self.round += 1;
    }

    /// Adam on the mean delta, without bias correction.
    pub fn fedadam_step(&mut self, delta: &[f64], lr: f64, beta1: f64, beta2: f64, tau: f64) -> Result<(), FedError> {
        self.check_len(delta)?;
        let OptimizerState::FedAdam { m, v } = &mut self.optimizer else {
            return Err(FedError::OptimizerMismatch("fedadam"));
        };
        for ((m, v), d) in m.iter_mut().zip(v.iter_mut()).zip(delta) {
            *m = beta1 * *m + (1.0 - beta1) * d;
            *v = beta2 * *v + (1.0 - beta2) * d * d;
        }
        let (m, v) = (m.clone(), v.clone());
        self.apply(|i| lr * m[i] / (v[i].sqrt() + tau));
        Ok(())
    }

    /// `velocity = momentum · velocity + delta; params += lr · velocity`.
    pub fn sgdm_step(&mut self, delta: &[f64], lr: f64, momentum: f64) -> Result<(), FedError> {
        self.check_len(delta)?;
        let OptimizerState::SgdMomentum { velocity } = &mut self.optimizer else {
            return Err(FedError::OptimizerMismatch("sgdm"));
        };
        for (vel, d) in velocity.iter_mut().zip(delta) {
            *vel = momentum * *vel + d;
        }
        let velocity = velocity.clone();
        self.apply(|i| lr * velocity[i]);
        Ok(())
    }

    /// Aggregates a round of client updates and steps. With the identity
    /// optimizer the new global model is the average of the local models,
    /// which avoids the rounding of `global + (local - global)`.
    pub fn apply_round(
        &mut self,
        opt: &ServerOptimizer,
        updates: &[ClientUpdate],
        weighting: Weighting,
    ) -> Result<Vec<f64>, FedError> {
        let mean = aggregate(updates, weighting)?;
        if opt.is_identity() {
            self.check_len(&mean)?;
            let OptimizerState::SgdMomentum { velocity } = &mut self.optimizer else {
                return Err(FedError::OptimizerMismatch("sgdm"));
            };
            velocity.copy_from_slice(&mean);
            let models = average_models(updates, weighting)?;
            self.check_len(&models)?;
            self.params.assign_flat(&models).expect("length checked");
            self.round += 1;
        } else {
            self.step(opt, &mean)?;
        }
        Ok(mean)
    }

    pub fn step(&mut self, opt: &ServerOptimizer, delta: &[f64]) -> Result<(), FedError> {
        match *opt {
            ServerOptimizer::FedAdam { learning_rate, beta1, beta2, tau } => {
                self.fedadam_step(delta, learning_rate, beta1, beta2, tau)
            }
            ServerOptimizer::SgdMomentum { learning_rate, momentum } => self.sgdm_step(delta, learning_rate, momentum),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn scalar_state(opt: &ServerOptimizer, x: f64) -> ServerState {
        let mut p = ParamTree::new();
        p.insert("w", Tensor::vector(vec![x]));
        ServerState::new(p, opt)
    }

    fn value(s: &ServerState) -> f64 {
        s.params.get("w").unwrap().data()[0]
    }

    #[test]
    fn zero_delta_is_a_fixed_point() {
        for opt in [ServerOptimizer::fedadam(0.01), ServerOptimizer::sgdm(1.0, 0.9)] {
            let mut s = scalar_state(&opt, 0.75);
            s.step(&opt, &[0.0]).unwrap();
            assert_eq!(value(&s), 0.75);
            assert_eq!(s.round, 1);
        }
    }

    #[test]
    fn fedadam_scalar_reference() {
        let opt = ServerOptimizer::fedadam(0.001);
        let mut s = scalar_state(&opt, 0.0);
        s.step(&opt, &[1.0]).unwrap();
        let m = 0.1f64;
        let v = 0.001f64;
        let expected = 0.001 * m / (v.sqrt() + 1e-8);
        assert!((value(&s) - expected).abs() < 1e-15);
        assert!((value(&s) - 3.1622e-3).abs() < 1e-7);
    }

    #[test]
    fn sgdm_two_rounds() {
        let opt = ServerOptimizer::sgdm(1.0, 0.9);
        let mut s = scalar_state(&opt, 0.0);
        s.step(&opt, &[1.0]).unwrap();
        s.step(&opt, &[1.0]).unwrap();
        assert!((value(&s) - 2.9).abs() < 1e-15);
        assert_eq!(s.round, 2);
    }

    #[test]
    fn identity_step_adopts_the_averaged_model() {
        let opt = ServerOptimizer::sgdm(1.0, 0.0);
        let mut s = scalar_state(&opt, 0.1);
        // 0.1 + (-0.3 - 0.1) rounds to -0.30000000000000004.
        let u = ClientUpdate {
            delta: vec![-0.3 - 0.1],
            local: vec![-0.3],
            weight: 4.0,
            batches: 1,
            train: Default::default(),
        };
        s.apply_round(&opt, std::slice::from_ref(&u), Weighting::ExampleWeighted).unwrap();
        assert_eq!(value(&s), -0.3);
        assert_eq!(s.round, 1);

        let other = ClientUpdate { local: vec![0.5], weight: 12.0, ..u };
        s.apply_round(&opt, &[other.clone(), other], Weighting::Uniform).unwrap();
        assert_eq!(value(&s), 0.5);
        assert!(!ServerOptimizer::sgdm(1.0, 0.9).is_identity());
    }

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let opt = ServerOptimizer::sgdm(0.5, 0.0);
        let mut s = scalar_state(&opt, 1.0);
        s.step(&opt, &[0.25]).unwrap();
        s.step(&opt, &[-1.0]).unwrap();
        assert_eq!(value(&s), 1.0 + 0.5 * 0.25 - 0.5);
    }

    #[test]
    fn mismatches_are_errors() {
        let opt = ServerOptimizer::sgdm(1.0, 0.9);
        let mut s = scalar_state(&opt, 0.0);
        assert!(matches!(s.step(&opt, &[1.0, 2.0]), Err(FedError::LengthMismatch { .. })));
        assert_eq!(s.step(&ServerOptimizer::fedadam(0.1), &[1.0]), Err(FedError::OptimizerMismatch("fedadam")));
        assert!(ServerOptimizer::sgdm(1.0, 1.0).validate().is_err());
    }
}
