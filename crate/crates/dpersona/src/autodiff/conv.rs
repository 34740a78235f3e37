//! 3x3 same-padding convolution, lowered to GEMM via im2col.

use ndarray::{Array2, Array3, ArrayD, ArrayView3, Axis};

use super::{accumulate, BackFn, Tape, Var};

/// Unfold a `[C, H, W]` map into `[C*9, H*W]` patch columns (zero padding 1).
pub fn im2col3x3(x: &ArrayView3<f64>) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut out = Array2::<f64>::zeros((c * 9, h * w));
    for ci in 0..c {
        for ky in 0..3usize {
            let dy = ky as isize - 1;
            for kx in 0..3usize {
                let dx = kx as isize - 1;
                let row = ci * 9 + ky * 3 + kx;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = x.slice(ndarray::s![
                        ci,
                        sy as usize,
                        (x0 as isize + dx) as usize..(x1 as isize + dx) as usize
                    ]);
                    out.row_mut(row)
                        .slice_mut(ndarray::s![y * w + x0..y * w + x1])
                        .assign(&src);
                }
            }
        }
    }
    out
}

/// Fold `[C*9, H*W]` patch columns back onto a `[C, H, W]` map (adjoint of
/// [`im2col3x3`]).
pub fn col2im3x3(cols: &Array2<f64>, c: usize, h: usize, w: usize) -> Array3<f64> {
    assert_eq!(cols.dim(), (c * 9, h * w));
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..3usize {
            let dy = ky as isize - 1;
            for kx in 0..3usize {
                let dx = kx as isize - 1;
                let row = ci * 9 + ky * 3 + kx;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = cols.row(row);
                    let mut dst = out.slice_mut(ndarray::s![
                        ci,
                        sy as usize,
                        (x0 as isize + dx) as usize..(x1 as isize + dx) as usize
                    ]);
                    dst += &src.slice(ndarray::s![y * w + x0..y * w + x1]);
                }
            }
        }
    }
    out
}

impl Tape {
    /// 3x3 convolution with padding 1: `x [Cin,H,W]`, `w [Cout,Cin,3,3]`,
    /// `b [Cout]` -> `[Cout,H,W]`.
    ///
    /// Patches are recomputed during backward instead of cached.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self
            .value(x)
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("conv2d: x must be [C,H,W]");
        let wv = self.value(w);
        assert_eq!(wv.ndim(), 4, "conv2d: w must be [Cout,Cin,3,3]");
        let (cout, cin) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(wv.shape()[2..], [3, 3]);
        let (cx, h, wd) = xv.dim();
        assert_eq!(cx, cin, "conv2d: channel mismatch");
        let bv = self
            .value(b)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("conv2d: b must be a vector");
        assert_eq!(bv.len(), cout);

        let patches = im2col3x3(&xv);
        let wmat = wv.to_shape((cout, cin * 9)).unwrap();
        let mut out2 = wmat.dot(&patches); // [cout, hw]
        out2 += &bv.insert_axis(Axis(1));
        let val = out2.into_shape_with_order((cout, h, wd)).unwrap().into_dyn();

        let (nx, nw, nb) = (self.needs(x), self.needs(w), self.needs(b));
        let needs = nx || nw || nb;
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |vals: &[ArrayD<f64>], g: &ArrayD<f64>, grads: &mut Vec<Option<ArrayD<f64>>>| {
                let g2 = g
                    .view()
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap()
                    .into_shape_with_order((cout, h * wd))
                    .unwrap()
                    .to_owned();
                let xv = vals[x.0].view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let patches = im2col3x3(&xv);
                if nw {
                    let gw = g2.dot(&patches.t());
                    accumulate(
                        grads,
                        w.0,
                        gw.into_shape_with_order((cout, cin, 3, 3)).unwrap().into_dyn(),
                    );
                }
                if nb {
                    let gb = g2.sum_axis(Axis(1));
                    accumulate(grads, b.0, gb.into_dyn());
                }
                if nx {
                    let wmat = vals[w.0].to_shape((cout, cin * 9)).unwrap();
                    let gcols = wmat.t().dot(&g2);
                    let gx = col2im3x3(&gcols, cin, h, wd);
                    accumulate(grads, x.0, gx.into_dyn());
                }
            }) as BackFn
        });
        self.push(val, needs, back)
    }

    /// Pointwise (1x1) convolution: `w [Cout,Cin] . x [Cin,H,W] + b [Cout]`.
    ///
    /// A plain channel-mixing GEMM with no patch extraction, so it is cheap
    /// enough to run once per latent sample inside the prediction head.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self
            .value(x)
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("conv1x1: x must be [C,H,W]");
        let wv = self
            .value(w)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("conv1x1: w must be [Cout,Cin]");
        let (cout, cin) = wv.dim();
        let (cx, h, wd) = xv.dim();
        assert_eq!(cx, cin, "conv1x1: channel mismatch");
        let bv = self
            .value(b)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("conv1x1: b must be a vector");
        assert_eq!(bv.len(), cout);

        let xmat = xv.into_shape_with_order((cin, h * wd)).unwrap();
        let mut out2 = wv.dot(&xmat);
        out2 += &bv.insert_axis(Axis(1));
        let val = out2.into_shape_with_order((cout, h, wd)).unwrap().into_dyn();

        let (nx, nw, nb) = (self.needs(x), self.needs(w), self.needs(b));
        let needs = nx || nw || nb;
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |vals: &[ArrayD<f64>], g: &ArrayD<f64>, grads: &mut Vec<Option<ArrayD<f64>>>| {
                let g2 = g
                    .view()
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap()
                    .into_shape_with_order((cout, h * wd))
                    .unwrap()
                    .to_owned();
                if nw {
                    let xmat = vals[x.0]
                        .view()
                        .into_dimensionality::<ndarray::Ix3>()
                        .unwrap()
                        .into_shape_with_order((cin, h * wd))
                        .unwrap();
                    accumulate(grads, w.0, g2.dot(&xmat.t()).into_dyn());
                }
                if nb {
                    accumulate(grads, b.0, g2.sum_axis(Axis(1)).into_dyn());
                }
                if nx {
                    let wv = vals[w.0].view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    let gx = wv.t().dot(&g2);
                    accumulate(
                        grads,
                        x.0,
                        gx.into_shape_with_order((cin, h, wd)).unwrap().into_dyn(),
                    );
                }
            }) as BackFn
        });
        self.push(val, needs, back)
    }
}
