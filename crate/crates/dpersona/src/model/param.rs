//! Trainable tensors with per-parameter Adam state, plus checksum and
//! traversal plumbing shared by every network component.

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};

/// One tensor of weights together with its Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: ArrayD<f64>,
    m: ArrayD<f64>,
    v: ArrayD<f64>,
    t: u64,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        let m = ArrayD::zeros(value.raw_dim());
        let v = ArrayD::zeros(value.raw_dim());
        Self { value, m, v, t: 0 }
    }

    /// He-style init: N(0, 2/fan_in), suited to the leaky-ReLU stacks here.
    pub fn he(rng: &mut ChaCha12Rng, shape: &[usize], fan_in: usize) -> Self {
        let sd = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, sd).expect("he init: bad std");
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
        Self::new(ArrayD::from_shape_vec(IxDyn(shape), data).unwrap())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    /// Registers this parameter on a tape: a leaf when trainable, otherwise
    /// a constant that the backward pass skips entirely.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Var {
        if trainable {
            tape.leaf(self.value.clone())
        } else {
            tape.constant(self.value.clone())
        }
    }

    /// One Adam update with classic L2 regularization folded into the
    /// gradient (`g += l2 * theta`).
    pub fn adam_step(&mut self, grad: &ArrayD<f64>, cfg: &AdamConfig) {
        assert_eq!(
            grad.shape(),
            self.value.shape(),
            "adam_step: gradient shape mismatch"
        );
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        ndarray::Zip::from(&mut self.value)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(grad)
            .for_each(|th, m, v, &g| {
                let g = g + cfg.l2 * *th;
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *th -= cfg.lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
            });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub l2: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, l2: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l2,
        }
    }
}

/// Ordered, named traversal over a component's parameters. The visit order
/// is the canonical order for checksums and checkpoint layout.
pub trait ParamSet {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param));
}

pub fn param_count(set: &dyn ParamSet) -> usize {
    let mut n = 0;
    set.visit(&mut |_, p| n += p.len());
    n
}

/// SHA-256 over names, shapes, and exact value bits, in visit order.
pub fn component_checksum(set: &dyn ParamSet) -> String {
    let mut hasher = Sha256::new();
    set.visit(&mut |name, p| {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        hasher.update((p.value.ndim() as u64).to_le_bytes());
        for &d in p.value.shape() {
            hasher.update((d as u64).to_le_bytes());
        }
        for &v in p.value.iter() {
            hasher.update(v.to_bits().to_le_bytes());
        }
    });
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from;
    use ndarray::arr1;

    struct Pair {
        a: Param,
        b: Param,
    }

    impl ParamSet for Pair {
        fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Param)) {
            f("a", &self.a);
            f("b", &self.b);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
            f("a", &mut self.a);
            f("b", &mut self.b);
        }
    }

    #[test]
    fn adam_matches_scalar_oracle() {
        let cfg = AdamConfig::new(0.1, 0.01);
        let mut p = Param::new(arr1(&[1.0, -2.0]).into_dyn());
        let grads = [arr1(&[0.5, -0.25]).into_dyn(), arr1(&[-1.0, 2.0]).into_dyn()];

        // Scalar reimplementation, stepped by hand.
        let mut theta = [1.0f64, -2.0];
        let mut m = [0.0f64; 2];
        let mut v = [0.0f64; 2];
        for (t, g) in grads.iter().enumerate() {
            let t = t as i32 + 1;
            for k in 0..2 {
                let gk = g[[k]] + cfg.l2 * theta[k];
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
                let mh = m[k] / (1.0 - cfg.beta1.powi(t));
                let vh = v[k] / (1.0 - cfg.beta2.powi(t));
                theta[k] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
        for g in &grads {
            p.adam_step(g, &cfg);
        }
        for k in 0..2 {
            assert!((p.value[[k]] - theta[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_without_l2_leaves_zero_gradient_params_alone() {
        let cfg = AdamConfig::new(0.1, 0.0);
        let mut p = Param::new(arr1(&[3.0, -4.0]).into_dyn());
        p.adam_step(&arr1(&[0.0, 0.0]).into_dyn(), &cfg);
        assert_eq!(p.value, arr1(&[3.0, -4.0]).into_dyn());
    }

    #[test]
    fn checksum_tracks_values_names_and_shapes() {
        let mut rng = rng_from(71, "param-sum");
        let set = Pair {
            a: Param::he(&mut rng, &[2, 3], 3),
            b: Param::zeros(&[4]),
        };
        let base = component_checksum(&set);
        assert_eq!(base.len(), 64);
        assert_eq!(base, component_checksum(&set));

        let mut bumped = Pair {
            a: Param::new(set.a.value.clone()),
            b: Param::zeros(&[4]),
        };
        bumped.a.value[[0, 0]] += 1e-12;
        assert_ne!(base, component_checksum(&bumped));

        // Same bits under different shape hash differently.
        let reshaped = Pair {
            a: Param::new(set.a.value.clone().into_shape_with_order(IxDyn(&[3, 2])).unwrap()),
            b: Param::zeros(&[4]),
        };
        assert_ne!(base, component_checksum(&reshaped));
    }

    #[test]
    fn he_init_spread_scales_with_fan_in() {
        let mut rng = rng_from(72, "he");
        let p = Param::he(&mut rng, &[64, 64], 576);
        let sd = (p.value.mapv(|v| v * v).mean().unwrap()).sqrt();
        let expect = (2.0f64 / 576.0).sqrt();
        assert!((sd - expect).abs() < 0.15 * expect, "sd {sd} vs {expect}");
        assert_eq!(param_count(&Pair { a: p, b: Param::zeros(&[4]) }), 64 * 64 + 4);
    }
}
