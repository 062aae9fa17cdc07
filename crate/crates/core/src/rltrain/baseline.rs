//! Two-layer ReLU regressor predicting the expected return at each decoding
//! step from the decoder state. Its inputs are treated as constants, so its
//! loss never reaches the translation model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::optim::{AdamConfig, OptimizerState};
use crate::tensor::{ParamSet, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineParams {
    /// `[hidden, input]`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `[1, hidden]`
    pub w2: Tensor,
    pub b2: Tensor,
}

impl ParamSet for BaselineParams {
    fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }
}

impl BaselineParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[hidden, input_dim]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[1, hidden]),
            b2: Tensor::zeros(&[1]),
        }
    }

    /// Uniform weights in `±1/√fan_in`, zero biases.
    pub fn init(input_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut p = Self::zeros(input_dim, hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s1 = 1.0 / (input_dim as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        p.w1.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-s1..=s1));
        p.w2.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-s2..=s2));
        p
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    fn hidden_activations(&self, state: &[f64]) -> Vec<f64> {
        let mut a = self.b1.data().to_vec();
        self.w1.matvec_acc(state, &mut a);
        a.iter_mut().for_each(|x| *x = x.max(0.0));
        a
    }

    fn predict_one(&self, state: &[f64]) -> f64 {
        let a = self.hidden_activations(state);
        self.b2.data()[0] + crate::tensor::dot(self.w2.data(), &a)
    }
}

/// One prediction per decoder state.
pub fn baseline_predict(bp: &BaselineParams, decoder_states: &[Vec<f64>]) -> Vec<f64> {
    decoder_states.iter().map(|s| bp.predict_one(s)).collect()
}

/// Mean squared error and its gradient with respect to the regressor.
pub fn baseline_loss(
    bp: &BaselineParams,
    decoder_states: &[Vec<f64>],
    targets: &[f64],
) -> Result<(f64, BaselineParams)> {
    if decoder_states.len() != targets.len() {
        return Err(Error::WeightMismatch {
            expected: decoder_states.len(),
            got: targets.len(),
        });
    }
    let mut grads = bp.clone();
    grads.zero();
    if targets.is_empty() {
        return Ok((0.0, grads));
    }
    let n = targets.len() as f64;
    let mut mse = 0.0;
    for (state, &target) in decoder_states.iter().zip(targets) {
        let a = bp.hidden_activations(state);
        let err = bp.b2.data()[0] + crate::tensor::dot(bp.w2.data(), &a) - target;
        mse += err * err / n;
        let dout = 2.0 * err / n;
        grads.b2.data_mut()[0] += dout;
        crate::tensor::axpy(dout, &a, grads.w2.data_mut());
        let dhidden: Vec<f64> = a
            .iter()
            .zip(bp.w2.data())
            .map(|(&ai, &w)| if ai > 0.0 { dout * w } else { 0.0 })
            .collect();
        grads.w1.add_outer(&dhidden, state);
        crate::tensor::axpy(1.0, &dhidden, grads.b1.data_mut());
    }
    Ok((mse, grads))
}

/// One Adam step on the mean squared error; returns the error before the step.
pub fn baseline_update(
    bp: &mut BaselineParams,
    optimizer: &mut OptimizerState,
    decoder_states: &[Vec<f64>],
    targets: &[f64],
    adam: &AdamConfig,
) -> Result<f64> {
    let (mse, grads) = baseline_loss(bp, decoder_states, targets)?;
    if !mse.is_finite() || !grads.all_finite() {
        return Err(Error::DivergedTraining("baseline loss"));
    }
    optimizer.update(bp, &grads, adam);
    Ok(mse)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_regressor_predicts_zero() {
        let bp = BaselineParams::zeros(3, 4);
        assert_eq!(baseline_predict(&bp, &[vec![1.0, -2.0, 0.5]]), vec![0.0]);
    }

    #[test]
    fn hand_computed_single_unit() {
        // hidden = relu(w1·s + b1) = relu(0.5·1 − 1·2 + 3) = 1.5; out = 2·1.5 − 0.25
        let bp = BaselineParams {
            w1: Tensor::from_vec(&[1, 2], vec![0.5, -1.0]),
            b1: Tensor::from_vec(&[1], vec![3.0]),
            w2: Tensor::from_vec(&[1, 1], vec![2.0]),
            b2: Tensor::from_vec(&[1], vec![-0.25]),
        };
        assert_eq!(baseline_predict(&bp, &[vec![1.0, 2.0]]), vec![2.75]);
    }

    #[test]
    fn negative_preactivation_leaves_output_bias() {
        let bp = BaselineParams {
            w1: Tensor::from_vec(&[2, 2], vec![1.0, 1.0, -1.0, 2.0]),
            b1: Tensor::from_vec(&[2], vec![-10.0, -10.0]),
            w2: Tensor::from_vec(&[1, 2], vec![3.0, 4.0]),
            b2: Tensor::from_vec(&[1], vec![0.7]),
        };
        assert_eq!(baseline_predict(&bp, &[vec![1.0, 1.0]]), vec![0.7]);
    }

    #[test]
    fn exact_predictions_have_zero_loss_and_gradient() {
        let bp = BaselineParams::init(3, 5, 1);
        let states = vec![vec![0.1, 0.2, -0.3], vec![1.0, 0.0, 0.5]];
        let targets = baseline_predict(&bp, &states);
        let (mse, g) = baseline_loss(&bp, &states, &targets).unwrap();
        assert_eq!(mse, 0.0);
        assert_eq!(g.sq_norm(), 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let bp = BaselineParams::init(3, 4, 2);
        let states = vec![vec![0.4, -0.2, 0.9], vec![-0.5, 0.3, 0.1], vec![0.2, 0.2, 0.2]];
        let targets = [1.0, -0.5, 2.0];
        let (_, g) = baseline_loss(&bp, &states, &targets).unwrap();
        let mut probe = bp.clone();
        for i in 0..bp.num_params() {
            let orig = probe.coord(i);
            *probe.coord_mut(i) = orig + 1e-6;
            let plus = baseline_loss(&probe, &states, &targets).unwrap().0;
            *probe.coord_mut(i) = orig - 1e-6;
            let minus = baseline_loss(&probe, &states, &targets).unwrap().0;
            *probe.coord_mut(i) = orig;
            let numeric = (plus - minus) / 2e-6;
            assert!((numeric - g.coord(i)).abs() < 1e-6, "coord {i}");
        }
    }

    #[test]
    fn learns_a_constant() {
        let mut bp = BaselineParams::init(4, 4, 3);
        let mut opt = OptimizerState::new(&bp);
        let states: Vec<Vec<f64>> = (0..8)
            .map(|i| (0..4).map(|j| ((i * 4 + j) as f64 * 0.37).sin()).collect())
            .collect();
        let targets = vec![3.0; 8];
        let adam = AdamConfig::with_lr(1e-2);
        let mut mse = f64::INFINITY;
        for _ in 0..2000 {
            mse = baseline_update(&mut bp, &mut opt, &states, &targets, &adam).unwrap();
        }
        assert!(mse < 1e-3, "mse {mse}");
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let mut bp = BaselineParams::init(2, 2, 4);
        let before = bp.clone();
        let mut opt = OptimizerState::new(&bp);
        baseline_update(&mut bp, &mut opt, &[vec![1.0, 1.0]], &[5.0], &AdamConfig::with_lr(0.0)).unwrap();
        assert_eq!(bp, before);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let bp = BaselineParams::zeros(2, 2);
        assert!(matches!(
            baseline_loss(&bp, &[vec![0.0, 0.0]], &[1.0, 2.0]),
            Err(Error::WeightMismatch { .. })
        ));
    }
}
