use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Stochastic gradient descent, optionally with heavy-ball momentum:
/// `v ← μ·v + g`, `p ← p − lr·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor<T>>, grads: &BTreeMap<String, Vec<T>>, lr: f64) -> Result<()> {
        let lr = T::lit(lr);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Parameter(format!("gradient for unknown parameter `{name}`")))?;
            if g.len() != p.numel() {
                return Err(Error::Dimension {
                    op: "sgd",
                    lhs: p.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            if self.momentum == 0.0 {
                for (w, &d) in p.values_mut().iter_mut().zip(g) {
                    *w -= lr * d;
                }
            } else {
                let mu = T::lit(self.momentum);
                let v = self.velocity.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
                for ((w, vi), &d) in p.values_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                    *vi = mu * *vi + d;
                    *w -= lr * *vi;
                }
            }
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` once the monitored loss has failed
/// to improve by more than `threshold` for `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub lr: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
    pub decays: usize,
}

impl Plateau {
    pub fn new(lr: f64, factor: f64, patience: usize, threshold: f64) -> Self {
        Plateau {
            factor,
            patience,
            threshold,
            lr,
            best: None,
            bad_epochs: 0,
            decays: 0,
        }
    }

    /// Records one epoch's loss; returns true if the learning rate was decayed.
    pub fn observe(&mut self, loss: f64) -> bool {
        match self.best {
            Some(best) if loss >= best - self.threshold => self.bad_epochs += 1,
            _ => {
                self.best = Some(loss);
                self.bad_epochs = 0;
            }
        }
        if self.bad_epochs >= self.patience {
            self.lr *= self.factor;
            self.decays += 1;
            self.bad_epochs = 0;
            true
        } else {
            false
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_decay_takes_the_paper_rate_to_0_00095() {
        let mut p = Plateau::new(0.001, 0.95, 2, 1e-5);
        assert!(!p.observe(1.0));
        assert!(!p.observe(1.0));
        assert!(p.observe(0.999_995));
        assert!((p.lr - 0.00095).abs() < 1e-15);
        assert_eq!(p.decays, 1);
    }

    #[test]
    fn improvements_reset_patience() {
        let mut p = Plateau::new(0.1, 0.5, 2, 1e-5);
        for loss in [3.0, 3.0, 2.0, 2.0, 1.0] {
            assert!(!p.observe(loss));
        }
        assert_eq!(p.lr, 0.1);
    }

    #[test]
    fn plain_sgd_moves_against_the_gradient() {
        let mut params = BTreeMap::from([("w".to_string(), Tensor::from_f64(vec![2], &[1.0, -1.0]).unwrap())]);
        let grads = BTreeMap::from([("w".to_string(), vec![0.5, -2.0])]);
        let mut opt = Sgd::<f64>::new(0.0);
        opt.step(&mut params, &grads, 0.1).unwrap();
        assert_eq!(params["w"].values(), &[0.95, -0.8]);
        assert!(opt.velocity.is_empty());
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut params = BTreeMap::from([("w".to_string(), Tensor::from_f64(vec![1], &[0.0]).unwrap())]);
        let grads = BTreeMap::from([("w".to_string(), vec![1.0])]);
        let mut opt = Sgd::<f64>::new(0.5);
        opt.step(&mut params, &grads, 1.0).unwrap();
        opt.step(&mut params, &grads, 1.0).unwrap();
        assert_eq!(params["w"].values(), &[-2.5]);
        assert_eq!(opt.velocity["w"], vec![1.5]);
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn lr_is_initial_times_factor_to_the_decays(losses in prop::collection::vec(0.0..2.0f64, 1..40)) {
            let mut p = Plateau::new(0.001, 0.95, 2, 1e-5);
            let mut prev = p.lr;
            for l in losses {
                p.observe(l);
                prop_assert!(p.lr <= prev);
                prev = p.lr;
            }
            prop_assert!((p.lr - 0.001 * 0.95f64.powi(p.decays as i32)).abs() < 1e-18);
        }
    }
}
