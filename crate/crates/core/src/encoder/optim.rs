use ndarray::{Array, Dimension};

use super::network::StageGrads;
use super::Encoder;

/// Adam moments for one parameter tensor.
#[derive(Clone, Debug)]
pub(crate) struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

impl Adam {
    pub fn new(len: usize) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step<D: Dimension>(&mut self, param: &mut Array<f64, D>, grad: &Array<f64, D>, lr: f64) {
        debug_assert_eq!(param.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for (((p, &g), m), v) in param
            .iter_mut()
            .zip(grad.iter())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
        }
    }

    pub fn step_scalar(&mut self, param: &mut f64, grad: f64, lr: f64) {
        let mut p = ndarray::arr1(&[*param]);
        self.step(&mut p, &ndarray::arr1(&[grad]), lr);
        *param = p[0];
    }
}

/// One set of Adam moments per convolution-stage tensor.
#[derive(Clone, Debug)]
pub(crate) struct StageOptimizers {
    stages: Vec<[Adam; 4]>,
}

impl StageOptimizers {
    pub fn new(enc: &Encoder) -> Self {
        StageOptimizers {
            stages: enc
                .stages
                .iter()
                .map(|s| {
                    [
                        Adam::new(s.weight.len()),
                        Adam::new(s.bias.len()),
                        Adam::new(s.scale.len()),
                        Adam::new(s.shift.len()),
                    ]
                })
                .collect(),
        }
    }

    /// Updates every stage that has a gradient, each at its own rate.
    pub fn step(&mut self, enc: &mut Encoder, grads: &[Option<StageGrads>], lrs: &[f64]) {
        for ((stage, adam), (grad, &lr)) in enc
            .stages
            .iter_mut()
            .zip(self.stages.iter_mut())
            .zip(grads.iter().zip(lrs))
        {
            if let Some(grad) = grad {
                adam[0].step(&mut stage.weight, &grad.weight, lr);
                adam[1].step(&mut stage.bias, &grad.bias, lr);
                adam[2].step(&mut stage.scale, &grad.scale, lr);
                adam[3].step(&mut stage.shift, &grad.shift, lr);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut a = Adam::new(2);
        let mut p = ndarray::arr1(&[1.0, 1.0]);
        a.step(&mut p, &ndarray::arr1(&[3.0, -0.01]), 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] - 1.1).abs() < 1e-4);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut a = Adam::new(1);
        let mut x = 5.0;
        for _ in 0..2000 {
            let g = 2.0 * (x - 2.0);
            a.step_scalar(&mut x, g, 0.05);
        }
        assert!((x - 2.0).abs() < 1e-3);
    }
}
