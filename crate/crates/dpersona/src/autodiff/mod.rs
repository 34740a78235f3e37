//! Reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! A [`Tape`] records one forward computation; [`Tape::backward`] replays it
//! in reverse and accumulates gradients. Nodes hold only their output values;
//! anything else a backward step needs (e.g. convolution patches) is
//! recomputed, which keeps peak memory proportional to the activations.
//!
//! The op set is exactly what the segmentation models and losses need:
//! elementwise arithmetic, `exp`/`sigmoid`/`leaky_relu`, reductions, 3x3
//! convolution, 2x pooling/upsampling, channel concat, spatial broadcast,
//! dense layers, softmax, and matrix-vector products against constant
//! matrices. Shape mismatches are programming errors and panic.

mod conv;
#[cfg(any(test, feature = "testutil"))]
pub mod check;

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};

pub use conv::{col2im3x3, im2col3x3};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Per-node gradients produced by [`Tape::backward`].
pub struct Grads(Vec<Option<ArrayD<f64>>>);

impl Grads {
    /// Gradient of the root with respect to `v`, if `v` participated.
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.0[v.0].as_ref()
    }

    /// Like [`Grads::get`] but panics when the gradient is absent.
    pub fn expect(&self, v: Var) -> &ArrayD<f64> {
        self.get(v).expect("variable did not receive a gradient")
    }
}

type BackFn = Box<dyn Fn(&[ArrayD<f64>], &ArrayD<f64>, &mut Vec<Option<ArrayD<f64>>>)>;

struct Node {
    back: Option<BackFn>,
    needs_grad: bool,
}

/// One recorded forward computation.
#[derive(Default)]
pub struct Tape {
    vals: Vec<ArrayD<f64>>,
    nodes: Vec<Node>,
}

fn accumulate(grads: &mut [Option<ArrayD<f64>>], idx: usize, contrib: ArrayD<f64>) {
    match &mut grads[idx] {
        Some(g) => *g += &contrib,
        slot @ None => *slot = Some(contrib),
    }
}

/// Split an upstream gradient between the two arguments of min/max.
fn route_by(
    av: &ArrayD<f64>,
    bv: &ArrayD<f64>,
    g: &ArrayD<f64>,
    a_wins: impl Fn(f64, f64) -> bool,
) -> (ArrayD<f64>, ArrayD<f64>) {
    let mut ga = ArrayD::zeros(g.raw_dim());
    let mut gb = ArrayD::zeros(g.raw_dim());
    ndarray::Zip::from(&mut ga)
        .and(&mut gb)
        .and(g)
        .and(av)
        .and(bv)
        .for_each(|gai, gbi, &gi, &ai, &bi| {
            if a_wins(ai, bi) {
                *gai = gi;
            } else {
                *gbi = gi;
            }
        });
    (ga, gb)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.vals[v.0]
    }

    /// Value of a zero-dimensional node.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        assert_eq!(a.ndim(), 0, "scalar() on a non-scalar node");
        *a.first().expect("0-d array has one element")
    }

    fn push(&mut self, val: ArrayD<f64>, needs_grad: bool, back: Option<BackFn>) -> Var {
        self.vals.push(val);
        self.nodes.push(Node { back, needs_grad });
        Var(self.vals.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Insert a value that does not require gradients.
    pub fn constant(&mut self, val: ArrayD<f64>) -> Var {
        self.push(val, false, None)
    }

    /// Insert a trainable leaf.
    pub fn leaf(&mut self, val: ArrayD<f64>) -> Var {
        self.push(val, true, None)
    }

    /// Run reverse accumulation from a scalar root (seed gradient 1).
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).ndim(), 0, "backward root must be scalar");
        self.backward_seeded(root, ArrayD::from_elem(IxDyn(&[]), 1.0))
    }

    /// Reverse accumulation from any node with an explicit seed gradient.
    pub fn backward_seeded(&self, root: Var, seed: ArrayD<f64>) -> Grads {
        assert_eq!(seed.shape(), self.value(root).shape());
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.vals.len()];
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad {
                grads[idx] = None;
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            if let Some(back) = &self.nodes[idx].back {
                back(&self.vals, &gout, &mut grads);
            }
            grads[idx] = Some(gout);
        }
        Grads(grads)
    }

    fn binary_elementwise(
        &mut self,
        a: Var,
        b: Var,
        val: ArrayD<f64>,
        back: impl Fn(&[ArrayD<f64>], &ArrayD<f64>) -> (ArrayD<f64>, ArrayD<f64>) + 'static,
    ) -> Var {
        let needs = self.needs(a) || self.needs(b);
        let (na, nb) = (self.needs(a), self.needs(b));
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |vals: &[ArrayD<f64>], g: &ArrayD<f64>, grads: &mut Vec<Option<ArrayD<f64>>>| {
                let (ga, gb) = back(vals, g);
                if na {
                    accumulate(grads, a.0, ga);
                }
                if nb {
                    accumulate(grads, b.0, gb);
                }
            }) as BackFn
        });
        self.push(val, needs, back)
    }

    fn unary(
        &mut self,
        a: Var,
        val: ArrayD<f64>,
        back: impl Fn(&[ArrayD<f64>], &ArrayD<f64>, usize) -> ArrayD<f64> + 'static,
    ) -> Var {
        let needs = self.needs(a);
        let out_idx = self.vals.len();
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |vals: &[ArrayD<f64>], g: &ArrayD<f64>, grads: &mut Vec<Option<ArrayD<f64>>>| {
                let ga = back(vals, g, out_idx);
                accumulate(grads, a.0, ga);
            }) as BackFn
        });
        self.push(val, needs, back)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add: shape mismatch");
        let val = self.value(a) + self.value(b);
        self.binary_elementwise(a, b, val, |_, g| (g.clone(), g.clone()))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub: shape mismatch");
        let val = self.value(a) - self.value(b);
        self.binary_elementwise(a, b, val, |_, g| (g.clone(), -g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul: shape mismatch");
        let val = self.value(a) * self.value(b);
        self.binary_elementwise(a, b, val, move |vals, g| (g * &vals[b.0], g * &vals[a.0]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "div: shape mismatch");
        let val = self.value(a) / self.value(b);
        self.binary_elementwise(a, b, val, move |vals, g| {
            let gb = -(g * &vals[a.0]) / (&vals[b.0] * &vals[b.0]);
            (g / &vals[b.0], gb)
        })
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let val = self.value(a) + s;
        self.unary(a, val, |_, g, _| g.clone())
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let val = self.value(a) * s;
        self.unary(a, val, move |_, g, _| g * s)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let val = self.value(a).mapv(f64::exp);
        self.unary(a, val, |vals, g, out| g * &vals[out])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let val = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.unary(a, val, |vals, g, out| {
            let y = &vals[out];
            g * y * (1.0 - y)
        })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let val = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        self.unary(a, val, move |vals, g, _| {
            let mut ga = g.clone();
            ga.zip_mut_with(&vals[a.0], |gi, &xi| {
                if xi <= 0.0 {
                    *gi *= slope;
                }
            });
            ga
        })
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn min2(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "min2: shape mismatch");
        let mut val = self.value(a).clone();
        val.zip_mut_with(self.value(b), |x, &y| *x = x.min(y));
        self.binary_elementwise(a, b, val, move |vals, g| {
            route_by(&vals[a.0], &vals[b.0], g, |ai, bi| ai <= bi)
        })
    }

    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn max2(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "max2: shape mismatch");
        let mut val = self.value(a).clone();
        val.zip_mut_with(self.value(b), |x, &y| *x = x.max(y));
        self.binary_elementwise(a, b, val, move |vals, g| {
            route_by(&vals[a.0], &vals[b.0], g, |ai, bi| ai >= bi)
        })
    }

    /// Sum of all elements, as a 0-d node.
    pub fn sum(&mut self, a: Var) -> Var {
        let shape = self.value(a).raw_dim();
        let val = ArrayD::from_elem(IxDyn(&[]), self.value(a).sum());
        self.unary(a, val, move |_, g, _| {
            let gs = *g.first().expect("scalar grad");
            ArrayD::from_elem(shape.clone(), gs)
        })
    }

    /// Mean of all elements, as a 0-d node.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.mul_scalar(s, 1.0 / n)
    }
}

// Structured ops (vectors, matrices, feature maps).
impl Tape {
    /// Tile a length-D vector into a `[D, H, W]` map.
    pub fn broadcast_hw(&mut self, z: Var, h: usize, w: usize) -> Var {
        assert_eq!(self.value(z).ndim(), 1, "broadcast_hw: expected a vector");
        assert!(h >= 1 && w >= 1);
        let d = self.value(z).len();
        let mut out = ArrayD::zeros(IxDyn(&[d, h, w]));
        for (di, &zv) in self.value(z).iter().enumerate() {
            out.index_axis_mut(Axis(0), di).fill(zv);
        }
        self.unary(z, out, move |_, g, _| {
            let g3 = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let mut gz = Array1::<f64>::zeros(d);
            for di in 0..d {
                gz[di] = g3.index_axis(Axis(0), di).sum();
            }
            gz.into_dyn()
        })
    }

    /// Spatial mean per channel: `[C, H, W] -> [C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let v = self.value(x);
        assert_eq!(v.ndim(), 3, "global_avg_pool: expected [C,H,W]");
        let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let mut out = Array1::<f64>::zeros(c);
        for ci in 0..c {
            out[ci] = v.index_axis(Axis(0), ci).mean().unwrap();
        }
        self.unary(x, out.into_dyn(), move |_, g, _| {
            let scale = 1.0 / (h * w) as f64;
            let mut gx = ArrayD::zeros(IxDyn(&[c, h, w]));
            for ci in 0..c {
                gx.index_axis_mut(Axis(0), ci).fill(g[ci] * scale);
            }
            gx
        })
    }

    /// Concatenate two `[C, H, W]` maps along the channel axis.
    pub fn concat_c(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ndim(), 3);
        assert_eq!(vb.ndim(), 3);
        assert_eq!(va.shape()[1..], vb.shape()[1..], "concat_c: spatial mismatch");
        let ca = va.shape()[0];
        let val = ndarray::concatenate(Axis(0), &[va.view(), vb.view()]).unwrap();
        self.binary_elementwise(a, b, val, move |_, g| {
            let ga = g.slice_axis(Axis(0), ndarray::Slice::from(..ca)).to_owned();
            let gb = g.slice_axis(Axis(0), ndarray::Slice::from(ca..)).to_owned();
            (ga, gb)
        })
    }

    /// 2x2 average pooling with stride 2. Spatial dims must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let v = self.value(x);
        assert_eq!(v.ndim(), 3);
        let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2: odd spatial size");
        let v3 = v.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let mut out = ndarray::Array3::<f64>::zeros((c, h / 2, w / 2));
        for ci in 0..c {
            for y in 0..h / 2 {
                for xq in 0..w / 2 {
                    out[(ci, y, xq)] = 0.25
                        * (v3[(ci, 2 * y, 2 * xq)]
                            + v3[(ci, 2 * y, 2 * xq + 1)]
                            + v3[(ci, 2 * y + 1, 2 * xq)]
                            + v3[(ci, 2 * y + 1, 2 * xq + 1)]);
                }
            }
        }
        self.unary(x, out.into_dyn(), move |_, g, _| {
            let g3 = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let mut gx = ndarray::Array3::<f64>::zeros((c, h, w));
            for ci in 0..c {
                for y in 0..h / 2 {
                    for xq in 0..w / 2 {
                        let gv = 0.25 * g3[(ci, y, xq)];
                        gx[(ci, 2 * y, 2 * xq)] = gv;
                        gx[(ci, 2 * y, 2 * xq + 1)] = gv;
                        gx[(ci, 2 * y + 1, 2 * xq)] = gv;
                        gx[(ci, 2 * y + 1, 2 * xq + 1)] = gv;
                    }
                }
            }
            gx.into_dyn()
        })
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let v = self.value(x);
        assert_eq!(v.ndim(), 3);
        let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let v3 = v.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let mut out = ndarray::Array3::<f64>::zeros((c, 2 * h, 2 * w));
        for ci in 0..c {
            for y in 0..h {
                for xq in 0..w {
                    let s = v3[(ci, y, xq)];
                    out[(ci, 2 * y, 2 * xq)] = s;
                    out[(ci, 2 * y, 2 * xq + 1)] = s;
                    out[(ci, 2 * y + 1, 2 * xq)] = s;
                    out[(ci, 2 * y + 1, 2 * xq + 1)] = s;
                }
            }
        }
        self.unary(x, out.into_dyn(), move |_, g, _| {
            let g3 = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let mut gx = ndarray::Array3::<f64>::zeros((c, h, w));
            for ci in 0..c {
                for y in 0..h {
                    for xq in 0..w {
                        gx[(ci, y, xq)] = g3[(ci, 2 * y, 2 * xq)]
                            + g3[(ci, 2 * y, 2 * xq + 1)]
                            + g3[(ci, 2 * y + 1, 2 * xq)]
                            + g3[(ci, 2 * y + 1, 2 * xq + 1)];
                    }
                }
            }
            gx.into_dyn()
        })
    }

    /// Dense layer: `w [O,I] · x [I] + b [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self
            .value(x)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("linear: x must be a vector");
        let wv = self
            .value(w)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("linear: w must be a matrix");
        let bv = self
            .value(b)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("linear: b must be a vector");
        assert_eq!(wv.shape()[1], xv.len(), "linear: in-dim mismatch");
        assert_eq!(wv.shape()[0], bv.len(), "linear: out-dim mismatch");
        let val = (wv.dot(&xv) + bv).into_dyn();
        let (nx, nw, nb) = (self.needs(x), self.needs(w), self.needs(b));
        let needs = nx || nw || nb;
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |vals: &[ArrayD<f64>], g: &ArrayD<f64>, grads: &mut Vec<Option<ArrayD<f64>>>| {
                let g1 = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let xv = vals[x.0].view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let wv = vals[w.0].view().into_dimensionality::<ndarray::Ix2>().unwrap();
                if nx {
                    accumulate(grads, x.0, wv.t().dot(&g1).into_dyn());
                }
                if nw {
                    let gw = g1
                        .view()
                        .insert_axis(Axis(1))
                        .dot(&xv.view().insert_axis(Axis(0)));
                    accumulate(grads, w.0, gw.into_dyn());
                }
                if nb {
                    accumulate(grads, b.0, g1.to_owned().into_dyn());
                }
            }) as BackFn
        });
        self.push(val, needs, back)
    }

    /// `z^T · m` for a constant matrix `m [D, M]`, giving logits `[M]`.
    pub fn vec_mat_const(&mut self, z: Var, m: &Array2<f64>) -> Var {
        let zv = self
            .value(z)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("vec_mat_const: z must be a vector");
        assert_eq!(zv.len(), m.shape()[0], "vec_mat_const: dim mismatch");
        let val = m.t().dot(&zv).into_dyn();
        let m_back = m.clone();
        self.unary(z, val, move |_, g, _| {
            let g1 = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            m_back.dot(&g1).into_dyn()
        })
    }

    /// `m · w` for a constant matrix `m [D, M]`, giving `[D]`.
    pub fn mat_vec_const(&mut self, m: &Array2<f64>, w: Var) -> Var {
        let wv = self
            .value(w)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("mat_vec_const: w must be a vector");
        assert_eq!(wv.len(), m.shape()[1], "mat_vec_const: dim mismatch");
        let val = m.dot(&wv).into_dyn();
        let m_back = m.clone();
        self.unary(w, val, move |_, g, _| {
            let g1 = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            m_back.t().dot(&g1).into_dyn()
        })
    }

    /// Softmax over a vector.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self
            .value(x)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("softmax: expected a vector");
        let max = xv.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut y = xv.mapv(|v| (v - max).exp());
        let s = y.sum();
        y /= s;
        self.unary(x, y.into_dyn(), |vals, g, out| {
            let y = vals[out].view().into_dimensionality::<ndarray::Ix1>().unwrap();
            let g1 = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            let dot = g1.dot(&y);
            ((&g1 - dot) * &y).into_dyn()
        })
    }

    /// Slice `[start, end)` of a vector.
    pub fn slice1d(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = self
            .value(x)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("slice1d: expected a vector");
        assert!(start <= end && end <= xv.len(), "slice1d: range out of bounds");
        let n = xv.len();
        let val = xv.slice(ndarray::s![start..end]).to_owned().into_dyn();
        self.unary(x, val, move |_, g, _| {
            let mut gx = Array1::<f64>::zeros(n);
            gx.slice_mut(ndarray::s![start..end])
                .assign(&g.view().into_dimensionality::<ndarray::Ix1>().unwrap());
            gx.into_dyn()
        })
    }
}
