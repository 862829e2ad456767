use crate::nn::conv::{Conv2d, ConvGrad};
use crate::nn::graph::Gradients;

/// Adam with bias correction. Moments are kept per trainable slot.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<ConvGrad>,
    v: Vec<ConvGrad>,
}

impl Adam {
    pub fn new(layers: &[&Conv2d]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: layers.iter().map(|l| ConvGrad::zeros_like(l)).collect(),
            v: layers.iter().map(|l| ConvGrad::zeros_like(l)).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update; `layers[k]` receives `grads.slots[k]`. Slots without a
    /// gradient are treated as zero gradient.
    pub fn step(&mut self, layers: &mut [&mut Conv2d], grads: &Gradients, lr: f64) {
        assert_eq!(layers.len(), self.m.len(), "layer count changed");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (k, layer) in layers.iter_mut().enumerate() {
            let g = grads.slots.get(k).and_then(|g| g.as_ref());
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let update = |p: &mut [f64], m: &mut [f64], v: &mut [f64], g: Option<&[f64]>| {
                for i in 0..p.len() {
                    let gi = g.map_or(0.0, |g| g[i]);
                    m[i] = b1 * m[i] + (1.0 - b1) * gi;
                    v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                    p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
            };
            update(layer.weight_mut(), &mut m.weight, &mut v.weight, g.map(|g| g.weight.as_slice()));
            update(layer.bias_mut(), &mut m.bias, &mut v.bias, g.map(|g| g.bias.as_slice()));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut layer = Conv2d::from_parts(1, 1, 1, vec![1.0], vec![0.0]).unwrap();
        let mut opt = Adam::new(&[&layer]);
        let grads = Gradients {
            slots: vec![Some(ConvGrad { weight: vec![3.0], bias: vec![-2.0] })],
        };
        opt.step(&mut [&mut layer], &grads, 0.1);
        assert!((layer.weight()[0] - 0.9).abs() < 1e-6);
        assert!((layer.bias()[0] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut layer = Conv2d::from_parts(1, 1, 1, vec![5.0], vec![-4.0]).unwrap();
        let mut opt = Adam::new(&[&layer]);
        for _ in 0..2000 {
            let g = Gradients {
                slots: vec![Some(ConvGrad {
                    weight: vec![2.0 * (layer.weight()[0] - 1.0)],
                    bias: vec![2.0 * layer.bias()[0]],
                })],
            };
            opt.step(&mut [&mut layer], &g, 0.05);
        }
        assert!((layer.weight()[0] - 1.0).abs() < 1e-3);
        assert!(layer.bias()[0].abs() < 1e-3);
    }
}
