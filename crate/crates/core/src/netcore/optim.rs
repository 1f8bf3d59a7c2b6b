use crate::error::{Error, Result};
use crate::netcore::amcm::AmcmParams;
use crate::netcore::conv::Conv2d;
use crate::netcore::Tensor;

/// A fixed, ordered collection of parameter tensors.
///
/// Gradients are stored in a value of the same type so the two line up
/// tensor-for-tensor.
pub trait ParamSet {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

impl ParamSet for Conv2d {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

impl ParamSet for AmcmParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.gate.tensors();
        v.extend(self.spatial.tensors());
        v.extend(self.channel.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.gate.tensors_mut();
        v.extend(self.spatial.tensors_mut());
        v.extend(self.channel.tensors_mut());
        v
    }
}

/// SGD with a momentum buffer and L2 weight decay folded into the gradient:
/// `v ← μ·v + g + λ·θ`, `θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let grads = grads.tensors();
        let mut params = params.tensors_mut();
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameter tensors, {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(&grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() || v.len() != p.len() {
                return Err(Error::Shape(format!(
                    "parameter {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vv = self.momentum * *vv + gv + self.weight_decay * *pv;
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}

/// Exponential per-epoch decay: `lr₀ · decay^epoch`.
pub fn lr_at_epoch(lr0: f64, decay: f64, epoch: usize) -> f64 {
    lr0 * decay.powi(epoch as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Conv2d {
        Conv2d {
            weight: Tensor::from_vec(&[1, 1, 1, 1], vec![v]).unwrap(),
            bias: Tensor::zeros(&[1]),
        }
    }

    #[test]
    fn plain_gradient_step() {
        let mut p = scalar(0.0);
        let mut opt = Sgd::new(0.1, 0.0, 0.0);
        opt.step(&mut p, &scalar(1.0)).unwrap();
        assert!((p.weight.data()[0] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_decays_velocity() {
        let mut p = scalar(0.0);
        let mut opt = Sgd::new(1.0, 0.9, 0.0);
        opt.step(&mut p, &scalar(1.0)).unwrap();
        let before = p.weight.data()[0];
        opt.step(&mut p, &scalar(0.0)).unwrap();
        assert!((opt.velocity()[0][0] - 0.9).abs() < 1e-15);
        assert!((p.weight.data()[0] - (before - 0.9)).abs() < 1e-15);
    }

    #[test]
    fn two_momentum_steps() {
        let mut p = scalar(0.0);
        let mut opt = Sgd::new(1.0, 0.9, 0.0);
        opt.step(&mut p, &scalar(1.0)).unwrap();
        assert_eq!(opt.velocity()[0][0], 1.0);
        assert_eq!(p.weight.data()[0], -1.0);
        opt.step(&mut p, &scalar(1.0)).unwrap();
        assert!((opt.velocity()[0][0] - 1.9).abs() < 1e-15);
        assert!((p.weight.data()[0] + 2.9).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut p = scalar(2.0);
        let mut opt = Sgd::new(0.5, 0.0, 0.1);
        opt.step(&mut p, &scalar(0.0)).unwrap();
        assert!((p.weight.data()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = scalar(0.0);
        let g = Conv2d::zeros(2, 1, 1, 1);
        assert!(Sgd::new(0.1, 0.9, 0.0).step(&mut p, &g).is_err());
    }

    #[test]
    fn schedule() {
        assert_eq!(lr_at_epoch(0.005, 0.99, 0), 0.005);
        assert!((lr_at_epoch(0.005, 0.99, 2) - 0.005 * 0.9801).abs() < 1e-15);
    }
}
