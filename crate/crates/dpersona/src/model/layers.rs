//! Weight-plus-bias layer primitives. Each layer binds to a tape as a
//! `BoundLayer` and knows how to route gradients back into its Adam state.

use rand_chacha::ChaCha12Rng;

use crate::autodiff::{Grads, Tape, Var};

use super::param::{AdamConfig, Param};

/// Tape handles for one layer's weights and bias.
#[derive(Debug, Clone, Copy)]
pub struct BoundLayer {
    pub w: Var,
    pub b: Var,
}

/// Records `(name, var)` pairs while binding so optimizers can address
/// gradients by parameter name instead of tape position.
pub type BindOrder = Vec<(String, Var)>;

fn bind_pair(
    w: &Param,
    b: &Param,
    tape: &mut Tape,
    trainable: bool,
    name: &str,
    order: &mut BindOrder,
) -> BoundLayer {
    let w = w.bind(tape, trainable);
    let b = b.bind(tape, trainable);
    order.push((format!("{name}.w"), w));
    order.push((format!("{name}.b"), b));
    BoundLayer { w, b }
}

macro_rules! layer_common {
    () => {
        pub fn bind(
            &self,
            tape: &mut Tape,
            trainable: bool,
            name: &str,
            order: &mut BindOrder,
        ) -> BoundLayer {
            bind_pair(&self.w, &self.b, tape, trainable, name, order)
        }

        pub fn visit<'a>(&'a self, name: &str, f: &mut dyn FnMut(&str, &'a Param)) {
            f(&format!("{name}.w"), &self.w);
            f(&format!("{name}.b"), &self.b);
        }

        pub fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(&str, &mut Param)) {
            f(&format!("{name}.w"), &mut self.w);
            f(&format!("{name}.b"), &mut self.b);
        }
    };
}

/// 3x3 same-padding convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    pub w: Param,
    pub b: Param,
}

impl Conv3x3 {
    pub fn init(rng: &mut ChaCha12Rng, cin: usize, cout: usize) -> Self {
        Self {
            w: Param::he(rng, &[cout, cin, 3, 3], cin * 9),
            b: Param::zeros(&[cout]),
        }
    }

    pub fn fwd(&self, tape: &mut Tape, v: &BoundLayer, x: Var) -> Var {
        tape.conv2d(x, v.w, v.b)
    }

    layer_common!();
}

/// 1x1 (channel-mixing) convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct PointConv {
    pub w: Param,
    pub b: Param,
}

impl PointConv {
    pub fn init(rng: &mut ChaCha12Rng, cin: usize, cout: usize) -> Self {
        Self {
            w: Param::he(rng, &[cout, cin], cin),
            b: Param::zeros(&[cout]),
        }
    }

    pub fn fwd(&self, tape: &mut Tape, v: &BoundLayer, x: Var) -> Var {
        tape.conv1x1(x, v.w, v.b)
    }

    layer_common!();
}

/// Fully connected layer on vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Param,
    pub b: Param,
}

impl Dense {
    pub fn init(rng: &mut ChaCha12Rng, din: usize, dout: usize) -> Self {
        Self {
            w: Param::he(rng, &[dout, din], din),
            b: Param::zeros(&[dout]),
        }
    }

    /// All-zero weights; the layer outputs zero for every input until the
    /// first update reaches it.
    pub fn zeroed(din: usize, dout: usize) -> Self {
        Self {
            w: Param::zeros(&[dout, din]),
            b: Param::zeros(&[dout]),
        }
    }

    pub fn fwd(&self, tape: &mut Tape, v: &BoundLayer, x: Var) -> Var {
        tape.linear(x, v.w, v.b)
    }

    layer_common!();
}

/// Applies accumulated name-keyed mean gradients to one layer.
pub fn apply_named(
    w: &mut Param,
    b: &mut Param,
    name: &str,
    grads: &std::collections::BTreeMap<String, ndarray::ArrayD<f64>>,
    cfg: &AdamConfig,
) {
    if let Some(g) = grads.get(&format!("{name}.w")) {
        w.adam_step(g, cfg);
    }
    if let Some(g) = grads.get(&format!("{name}.b")) {
        b.adam_step(g, cfg);
    }
}

/// Collects per-parameter gradients from one backward pass, keyed by the
/// names recorded at bind time. `mean` divides by the number of passes so a
/// minibatch of per-sample tapes averages cleanly.
#[derive(Debug, Default)]
pub struct GradAccum {
    sums: std::collections::BTreeMap<String, ndarray::ArrayD<f64>>,
    passes: usize,
}

impl GradAccum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, order: &BindOrder, grads: &Grads) {
        for (name, var) in order {
            if let Some(g) = grads.get(*var) {
                match self.sums.get_mut(name) {
                    Some(acc) => *acc += g,
                    None => {
                        self.sums.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        self.passes += 1;
    }

    pub fn passes(&self) -> usize {
        self.passes
    }

    pub fn mean(mut self) -> std::collections::BTreeMap<String, ndarray::ArrayD<f64>> {
        assert!(self.passes > 0, "GradAccum::mean before any backward pass");
        let scale = 1.0 / self.passes as f64;
        for g in self.sums.values_mut() {
            *g *= scale;
        }
        self.sums
    }
}
