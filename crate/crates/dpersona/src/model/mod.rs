//! Network components: shared U-Net backbone, prior/posterior Gaussian
//! encoders, the latent-conditioned prediction head, and per-rater
//! projection heads, assembled into a [`ModelBundle`] with freeze flags and
//! parameter checksums.

pub mod layers;
pub mod param;

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, ArrayD};
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{Tape, Var};
use crate::latentmath::{DiagonalGaussian, GaussianVars, LatentCode};
use crate::metrics::Mask;

use layers::{apply_named, BindOrder, BoundLayer, Conv3x3, Dense, PointConv};
use param::{AdamConfig, Param, ParamSet};

pub use layers::GradAccum;
pub use param::{component_checksum, param_count};

pub const DEFAULT_CHANNELS: usize = 16;
pub const LEAKY_SLOPE: f64 = 0.1;

/// Three-level U-Net: C / 2C / 4C channels, average-pool downsampling,
/// nearest-neighbor upsampling with skip concatenation. Maps `[1,H,W]`
/// images to `[C,H,W]` features; H and W must be divisible by 4.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub channels: usize,
    e1a: Conv3x3,
    e1b: Conv3x3,
    e2a: Conv3x3,
    e2b: Conv3x3,
    ba: Conv3x3,
    bb: Conv3x3,
    d2a: Conv3x3,
    d2b: Conv3x3,
    d1a: Conv3x3,
    d1b: Conv3x3,
}

#[derive(Debug, Clone)]
pub struct BackboneVars {
    e1a: BoundLayer,
    e1b: BoundLayer,
    e2a: BoundLayer,
    e2b: BoundLayer,
    ba: BoundLayer,
    bb: BoundLayer,
    d2a: BoundLayer,
    d2b: BoundLayer,
    d1a: BoundLayer,
    d1b: BoundLayer,
}

impl Backbone {
    pub fn init(rng: &mut ChaCha12Rng, channels: usize) -> Self {
        let c = channels;
        Self {
            channels: c,
            e1a: Conv3x3::init(rng, 1, c),
            e1b: Conv3x3::init(rng, c, c),
            e2a: Conv3x3::init(rng, c, 2 * c),
            e2b: Conv3x3::init(rng, 2 * c, 2 * c),
            ba: Conv3x3::init(rng, 2 * c, 4 * c),
            bb: Conv3x3::init(rng, 4 * c, 4 * c),
            d2a: Conv3x3::init(rng, 6 * c, 2 * c),
            d2b: Conv3x3::init(rng, 2 * c, 2 * c),
            d1a: Conv3x3::init(rng, 3 * c, c),
            d1b: Conv3x3::init(rng, c, c),
        }
    }

    pub fn bind(
        &self,
        tape: &mut Tape,
        trainable: bool,
        prefix: &str,
        order: &mut BindOrder,
    ) -> BackboneVars {
        BackboneVars {
            e1a: self.e1a.bind(tape, trainable, &format!("{prefix}.e1a"), order),
            e1b: self.e1b.bind(tape, trainable, &format!("{prefix}.e1b"), order),
            e2a: self.e2a.bind(tape, trainable, &format!("{prefix}.e2a"), order),
            e2b: self.e2b.bind(tape, trainable, &format!("{prefix}.e2b"), order),
            ba: self.ba.bind(tape, trainable, &format!("{prefix}.ba"), order),
            bb: self.bb.bind(tape, trainable, &format!("{prefix}.bb"), order),
            d2a: self.d2a.bind(tape, trainable, &format!("{prefix}.d2a"), order),
            d2b: self.d2b.bind(tape, trainable, &format!("{prefix}.d2b"), order),
            d1a: self.d1a.bind(tape, trainable, &format!("{prefix}.d1a"), order),
            d1b: self.d1b.bind(tape, trainable, &format!("{prefix}.d1b"), order),
        }
    }

    /// `x [1,H,W]` -> features `[C,H,W]`.
    pub fn forward(&self, t: &mut Tape, v: &BackboneVars, x: Var) -> Var {
        let (h, w) = {
            let s = t.value(x).shape().to_vec();
            assert_eq!(s.len(), 3, "backbone input must be [1,H,W]");
            assert_eq!(s[0], 1, "backbone input must have one channel");
            assert!(s[1] % 4 == 0 && s[2] % 4 == 0, "H and W must be multiples of 4");
            (s[1], s[2])
        };
        let _ = (h, w);
        let a = self.e1a.fwd(t, &v.e1a, x);
        let a = t.leaky_relu(a, LEAKY_SLOPE);
        let a = self.e1b.fwd(t, &v.e1b, a);
        let e1 = t.leaky_relu(a, LEAKY_SLOPE);

        let p1 = t.avg_pool2(e1);
        let a = self.e2a.fwd(t, &v.e2a, p1);
        let a = t.leaky_relu(a, LEAKY_SLOPE);
        let a = self.e2b.fwd(t, &v.e2b, a);
        let e2 = t.leaky_relu(a, LEAKY_SLOPE);

        let p2 = t.avg_pool2(e2);
        let a = self.ba.fwd(t, &v.ba, p2);
        let a = t.leaky_relu(a, LEAKY_SLOPE);
        let a = self.bb.fwd(t, &v.bb, a);
        let bt = t.leaky_relu(a, LEAKY_SLOPE);

        let u2 = t.upsample2(bt);
        let c2 = t.concat_c(u2, e2);
        let a = self.d2a.fwd(t, &v.d2a, c2);
        let a = t.leaky_relu(a, LEAKY_SLOPE);
        let a = self.d2b.fwd(t, &v.d2b, a);
        let d2 = t.leaky_relu(a, LEAKY_SLOPE);

        let u1 = t.upsample2(d2);
        let c1 = t.concat_c(u1, e1);
        let a = self.d1a.fwd(t, &v.d1a, c1);
        let a = t.leaky_relu(a, LEAKY_SLOPE);
        let a = self.d1b.fwd(t, &v.d1b, a);
        t.leaky_relu(a, LEAKY_SLOPE)
    }

    fn layer_list(&self) -> [(&'static str, &Conv3x3); 10] {
        [
            ("e1a", &self.e1a),
            ("e1b", &self.e1b),
            ("e2a", &self.e2a),
            ("e2b", &self.e2b),
            ("ba", &self.ba),
            ("bb", &self.bb),
            ("d2a", &self.d2a),
            ("d2b", &self.d2b),
            ("d1a", &self.d1a),
            ("d1b", &self.d1b),
        ]
    }
}

impl ParamSet for Backbone {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Param)) {
        for (name, layer) in self.layer_list() {
            layer.visit(name, f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.e1a.visit_mut("e1a", f);
        self.e1b.visit_mut("e1b", f);
        self.e2a.visit_mut("e2a", f);
        self.e2b.visit_mut("e2b", f);
        self.ba.visit_mut("ba", f);
        self.bb.visit_mut("bb", f);
        self.d2a.visit_mut("d2a", f);
        self.d2b.visit_mut("d2b", f);
        self.d1a.visit_mut("d1a", f);
        self.d1b.visit_mut("d1b", f);
    }
}

fn apply_conv(l: &mut Conv3x3, name: &str, g: &BTreeMap<String, ArrayD<f64>>, cfg: &AdamConfig) {
    apply_named(&mut l.w, &mut l.b, name, g, cfg);
}

impl Backbone {
    fn apply(&mut self, g: &BTreeMap<String, ArrayD<f64>>, cfg: &AdamConfig) {
        apply_conv(&mut self.e1a, "e1a", g, cfg);
        apply_conv(&mut self.e1b, "e1b", g, cfg);
        apply_conv(&mut self.e2a, "e2a", g, cfg);
        apply_conv(&mut self.e2b, "e2b", g, cfg);
        apply_conv(&mut self.ba, "ba", g, cfg);
        apply_conv(&mut self.bb, "bb", g, cfg);
        apply_conv(&mut self.d2a, "d2a", g, cfg);
        apply_conv(&mut self.d2b, "d2b", g, cfg);
        apply_conv(&mut self.d1a, "d1a", g, cfg);
        apply_conv(&mut self.d1b, "d1b", g, cfg);
    }
}

/// Small convolutional encoder ending in a dense layer that emits the 2D
/// vector (mu, log_sigma). The dense layer starts all-zero so every input
/// maps to N(0, I) until training moves it.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianEncoder {
    pub in_channels: usize,
    pub d: usize,
    c1: Conv3x3,
    c2: Conv3x3,
    c3: Conv3x3,
    pub fc: Dense,
}

#[derive(Debug, Clone)]
pub struct EncoderVars {
    c1: BoundLayer,
    c2: BoundLayer,
    c3: BoundLayer,
    fc: BoundLayer,
}

impl GaussianEncoder {
    pub fn init(rng: &mut ChaCha12Rng, in_channels: usize, channels: usize, d: usize) -> Self {
        Self {
            in_channels,
            d,
            c1: Conv3x3::init(rng, in_channels, channels),
            c2: Conv3x3::init(rng, channels, 2 * channels),
            c3: Conv3x3::init(rng, 2 * channels, 2 * channels),
            fc: Dense::zeroed(2 * channels, 2 * d),
        }
    }

    pub fn bind(
        &self,
        tape: &mut Tape,
        trainable: bool,
        prefix: &str,
        order: &mut BindOrder,
    ) -> EncoderVars {
        EncoderVars {
            c1: self.c1.bind(tape, trainable, &format!("{prefix}.c1"), order),
            c2: self.c2.bind(tape, trainable, &format!("{prefix}.c2"), order),
            c3: self.c3.bind(tape, trainable, &format!("{prefix}.c3"), order),
            fc: self.fc.bind(tape, trainable, &format!("{prefix}.fc"), order),
        }
    }

    /// `x [in_channels,H,W]` -> Gaussian parameters on the tape.
    pub fn forward(&self, t: &mut Tape, v: &EncoderVars, x: Var) -> GaussianVars {
        assert_eq!(
            t.value(x).shape()[0],
            self.in_channels,
            "encoder channel mismatch"
        );
        let a = self.c1.fwd(t, &v.c1, x);
        let a = t.leaky_relu(a, LEAKY_SLOPE);
        let a = t.avg_pool2(a);
        let a = self.c2.fwd(t, &v.c2, a);
        let a = t.leaky_relu(a, LEAKY_SLOPE);
        let a = t.avg_pool2(a);
        let a = self.c3.fwd(t, &v.c3, a);
        let a = t.leaky_relu(a, LEAKY_SLOPE);
        let pooled = t.global_avg_pool(a);
        let out = self.fc.fwd(t, &v.fc, pooled);
        GaussianVars {
            mean: t.slice1d(out, 0, self.d),
            log_sigma: t.slice1d(out, self.d, 2 * self.d),
        }
    }

    fn apply(&mut self, g: &BTreeMap<String, ArrayD<f64>>, cfg: &AdamConfig) {
        apply_conv(&mut self.c1, "c1", g, cfg);
        apply_conv(&mut self.c2, "c2", g, cfg);
        apply_conv(&mut self.c3, "c3", g, cfg);
        apply_named(&mut self.fc.w, &mut self.fc.b, "fc", g, cfg);
    }
}

impl ParamSet for GaussianEncoder {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Param)) {
        self.c1.visit("c1", f);
        self.c2.visit("c2", f);
        self.c3.visit("c3", f);
        self.fc.visit("fc", f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.c1.visit_mut("c1", f);
        self.c2.visit_mut("c2", f);
        self.c3.visit_mut("c3", f);
        self.fc.visit_mut("fc", f);
    }
}

/// Latent-conditioned decoder: concat(broadcast z, features) through three
/// 1x1 convolutions down to one logit plane. Pointwise layers keep the
/// many-samples-per-image passes cheap.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionHead {
    pub d: usize,
    pub channels: usize,
    p1: PointConv,
    p2: PointConv,
    p3: PointConv,
}

#[derive(Debug, Clone)]
pub struct HeadVars {
    p1: BoundLayer,
    p2: BoundLayer,
    p3: BoundLayer,
}

impl PredictionHead {
    pub fn init(rng: &mut ChaCha12Rng, d: usize, channels: usize) -> Self {
        Self {
            d,
            channels,
            p1: PointConv::init(rng, d + channels, channels),
            p2: PointConv::init(rng, channels, channels),
            p3: PointConv::init(rng, channels, 1),
        }
    }

    pub fn bind(
        &self,
        tape: &mut Tape,
        trainable: bool,
        prefix: &str,
        order: &mut BindOrder,
    ) -> HeadVars {
        HeadVars {
            p1: self.p1.bind(tape, trainable, &format!("{prefix}.p1"), order),
            p2: self.p2.bind(tape, trainable, &format!("{prefix}.p2"), order),
            p3: self.p3.bind(tape, trainable, &format!("{prefix}.p3"), order),
        }
    }

    /// `z_map [D,H,W]`, `features [C,H,W]` -> logits `[1,H,W]`.
    pub fn forward(&self, t: &mut Tape, v: &HeadVars, z_map: Var, features: Var) -> Var {
        assert_eq!(t.value(z_map).shape()[0], self.d, "latent dimension mismatch");
        assert_eq!(
            t.value(features).shape()[0],
            self.channels,
            "feature channel mismatch"
        );
        let cat = t.concat_c(z_map, features);
        let a = self.p1.fwd(t, &v.p1, cat);
        let a = t.leaky_relu(a, LEAKY_SLOPE);
        let a = self.p2.fwd(t, &v.p2, a);
        let a = t.leaky_relu(a, LEAKY_SLOPE);
        self.p3.fwd(t, &v.p3, a)
    }

    fn apply(&mut self, g: &BTreeMap<String, ArrayD<f64>>, cfg: &AdamConfig) {
        apply_named(&mut self.p1.w, &mut self.p1.b, "p1", g, cfg);
        apply_named(&mut self.p2.w, &mut self.p2.b, "p2", g, cfg);
        apply_named(&mut self.p3.w, &mut self.p3.b, "p3", g, cfg);
    }
}

impl ParamSet for PredictionHead {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Param)) {
        self.p1.visit("p1", f);
        self.p2.visit("p2", f);
        self.p3.visit("p3", f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.p1.visit_mut("p1", f);
        self.p2.visit_mut("p2", f);
        self.p3.visit_mut("p3", f);
    }
}

/// Per-rater projection from backbone features into the latent's spatial
/// map: two 3x3 convolutions, `[C,H,W] -> [C,H,W] -> [D,H,W]`. Kept
/// lightweight by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub d: usize,
    pub channels: usize,
    c1: Conv3x3,
    c2: Conv3x3,
}

#[derive(Debug, Clone)]
pub struct ProjVars {
    c1: BoundLayer,
    c2: BoundLayer,
}

impl ProjectionHead {
    pub fn init(rng: &mut ChaCha12Rng, channels: usize, d: usize) -> Self {
        Self {
            d,
            channels,
            c1: Conv3x3::init(rng, channels, channels),
            c2: Conv3x3::init(rng, channels, d),
        }
    }

    pub fn bind(
        &self,
        tape: &mut Tape,
        trainable: bool,
        prefix: &str,
        order: &mut BindOrder,
    ) -> ProjVars {
        ProjVars {
            c1: self.c1.bind(tape, trainable, &format!("{prefix}.c1"), order),
            c2: self.c2.bind(tape, trainable, &format!("{prefix}.c2"), order),
        }
    }

    pub fn forward(&self, t: &mut Tape, v: &ProjVars, features: Var) -> Var {
        let a = self.c1.fwd(t, &v.c1, features);
        let a = t.leaky_relu(a, LEAKY_SLOPE);
        self.c2.fwd(t, &v.c2, a)
    }

    fn apply(&mut self, g: &BTreeMap<String, ArrayD<f64>>, cfg: &AdamConfig) {
        apply_conv(&mut self.c1, "c1", g, cfg);
        apply_conv(&mut self.c2, "c2", g, cfg);
    }
}

impl ParamSet for ProjectionHead {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Param)) {
        self.c1.visit("c1", f);
        self.c2.visit("c2", f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.c1.visit_mut("c1", f);
        self.c2.visit_mut("c2", f);
    }
}

/// Builds the `[1+R,H,W]` posterior input: the image plane followed by one
/// 0/1 plane per annotation, in rater order (the order is part of the
/// dataset contract; the encoder is sensitive to it).
pub fn posterior_input(image: &Array2<f64>, annotations: &[Mask]) -> Array3<f64> {
    let (h, w) = image.dim();
    let mut out = Array3::zeros((1 + annotations.len(), h, w));
    out.index_axis_mut(ndarray::Axis(0), 0).assign(image);
    for (i, a) in annotations.iter().enumerate() {
        assert_eq!(a.dim(), (h, w), "annotation shape mismatch");
        out.index_axis_mut(ndarray::Axis(0), i + 1)
            .assign(&a.mapv(|v| v as u8 as f64));
    }
    out
}

/// All five components plus freeze bookkeeping. Frozen components bind to
/// tapes as constants and are skipped by `apply_grads`; their checksums are
/// recorded at freeze time and re-verified by `assert_frozen`.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub d: usize,
    pub r: usize,
    pub channels: usize,
    pub backbone: Backbone,
    pub prior: GaussianEncoder,
    pub posterior: GaussianEncoder,
    pub head: PredictionHead,
    pub projections: Vec<ProjectionHead>,
    frozen: BTreeMap<String, String>,
}

/// Tape handles for every component, with the bind-order name/var pairs
/// used to collect gradients by name.
#[derive(Debug, Clone)]
pub struct BundleVars {
    pub backbone: BackboneVars,
    pub prior: EncoderVars,
    pub posterior: EncoderVars,
    pub head: HeadVars,
    pub projections: Vec<ProjVars>,
    pub order: BindOrder,
}

impl ModelBundle {
    pub fn init(rng: &mut ChaCha12Rng, d: usize, r: usize, channels: usize) -> Self {
        assert!(d >= 1, "latent dimension must be positive");
        assert!(r >= 1, "need at least one rater");
        assert!(channels >= 2, "channel width too small");
        Self {
            d,
            r,
            channels,
            backbone: Backbone::init(rng, channels),
            prior: GaussianEncoder::init(rng, 1, channels, d),
            posterior: GaussianEncoder::init(rng, 1 + r, channels, d),
            head: PredictionHead::init(rng, d, channels),
            projections: (0..r).map(|_| ProjectionHead::init(rng, channels, d)).collect(),
            frozen: BTreeMap::new(),
        }
    }

    pub fn component_names(&self) -> Vec<String> {
        let mut names = vec![
            "backbone".to_string(),
            "prior".to_string(),
            "posterior".to_string(),
            "head".to_string(),
        ];
        for i in 0..self.r {
            names.push(format!("proj.{i}"));
        }
        names
    }

    pub fn component(&self, name: &str) -> &dyn ParamSet {
        match name {
            "backbone" => &self.backbone,
            "prior" => &self.prior,
            "posterior" => &self.posterior,
            "head" => &self.head,
            _ => {
                let idx = name
                    .strip_prefix("proj.")
                    .and_then(|s| s.parse::<usize>().ok())
                    .unwrap_or_else(|| panic!("unknown component {name}"));
                &self.projections[idx]
            }
        }
    }

    pub fn component_mut(&mut self, name: &str) -> &mut dyn ParamSet {
        match name {
            "backbone" => &mut self.backbone,
            "prior" => &mut self.prior,
            "posterior" => &mut self.posterior,
            "head" => &mut self.head,
            _ => {
                let idx = name
                    .strip_prefix("proj.")
                    .and_then(|s| s.parse::<usize>().ok())
                    .unwrap_or_else(|| panic!("unknown component {name}"));
                &mut self.projections[idx]
            }
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains_key(name)
    }

    pub fn frozen_names(&self) -> Vec<String> {
        self.frozen.keys().cloned().collect()
    }

    /// Records checksums and excludes the named components from binding as
    /// leaves and from optimizer updates.
    pub fn freeze(&mut self, names: &[&str]) {
        for &name in names {
            let sum = component_checksum(self.component(name));
            self.frozen.insert(name.to_string(), sum);
        }
    }

    /// Recomputes every frozen component's checksum and compares against
    /// the value recorded at freeze time. Returns the full current map.
    pub fn assert_frozen(&self) -> BTreeMap<String, String> {
        for (name, recorded) in &self.frozen {
            let now = component_checksum(self.component(name));
            assert_eq!(
                &now, recorded,
                "frozen component {name} drifted since freeze"
            );
        }
        self.checksums()
    }

    pub fn checksums(&self) -> BTreeMap<String, String> {
        self.component_names()
            .into_iter()
            .map(|n| {
                let sum = component_checksum(self.component(&n));
                (n, sum)
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.component_names()
            .iter()
            .map(|n| param_count(self.component(n)))
            .sum()
    }

    /// Binds every component; frozen ones become tape constants.
    pub fn bind(&self, tape: &mut Tape) -> BundleVars {
        let mut order = BindOrder::new();
        let backbone =
            self.backbone
                .bind(tape, !self.is_frozen("backbone"), "backbone", &mut order);
        let prior = self.prior.bind(tape, !self.is_frozen("prior"), "prior", &mut order);
        let posterior =
            self.posterior
                .bind(tape, !self.is_frozen("posterior"), "posterior", &mut order);
        let head = self.head.bind(tape, !self.is_frozen("head"), "head", &mut order);
        let projections = self
            .projections
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let name = format!("proj.{i}");
                p.bind(tape, !self.is_frozen(&name), &name, &mut order)
            })
            .collect();
        BundleVars {
            backbone,
            prior,
            posterior,
            head,
            projections,
            order,
        }
    }

    /// One optimizer step from name-keyed mean gradients; frozen components
    /// are skipped even if gradients were recorded for them.
    pub fn apply_grads(&mut self, grads: &BTreeMap<String, ArrayD<f64>>, cfg: &AdamConfig) {
        let by_component = |prefix: &str| -> BTreeMap<String, ArrayD<f64>> {
            grads
                .iter()
                .filter_map(|(k, v)| {
                    k.strip_prefix(prefix)
                        .and_then(|rest| rest.strip_prefix('.'))
                        .map(|rest| (rest.to_string(), v.clone()))
                })
                .collect()
        };
        if !self.is_frozen("backbone") {
            self.backbone.apply(&by_component("backbone"), cfg);
        }
        if !self.is_frozen("prior") {
            self.prior.apply(&by_component("prior"), cfg);
        }
        if !self.is_frozen("posterior") {
            self.posterior.apply(&by_component("posterior"), cfg);
        }
        if !self.is_frozen("head") {
            self.head.apply(&by_component("head"), cfg);
        }
        for i in 0..self.projections.len() {
            let name = format!("proj.{i}");
            if !self.is_frozen(&name) {
                self.projections[i].apply(&by_component(&name), cfg);
            }
        }
    }

    /// Eval-mode diversified forward: sigmoid(head(broadcast z, backbone(x))).
    pub fn forward_diverse(&self, image: &Array2<f64>, z: &LatentCode) -> Array2<f64> {
        assert_eq!(z.len(), self.d, "latent dimension mismatch");
        let (h, w) = image.dim();
        let mut tape = Tape::new();
        let mut scratch = BindOrder::new();
        let bv = self.backbone.bind(&mut tape, false, "backbone", &mut scratch);
        let hv = self.head.bind(&mut tape, false, "head", &mut scratch);
        let x = tape.constant(
            image
                .clone()
                .into_shape_with_order((1, h, w))
                .unwrap()
                .into_dyn(),
        );
        let features = self.backbone.forward(&mut tape, &bv, x);
        let zc = tape.constant(z.clone().into_dyn());
        let z_map = tape.broadcast_hw(zc, h, w);
        let logits = self.head.forward(&mut tape, &hv, z_map, features);
        let probs = tape.sigmoid(logits);
        tape.value(probs)
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()
            .index_axis(ndarray::Axis(0), 0)
            .to_owned()
    }

    /// Eval-mode prior encoding; inference never sees annotations.
    pub fn encode_prior(&self, image: &Array2<f64>) -> DiagonalGaussian {
        let (h, w) = image.dim();
        let mut tape = Tape::new();
        let mut scratch = BindOrder::new();
        let pv = self.prior.bind(&mut tape, false, "prior", &mut scratch);
        let x = tape.constant(
            image
                .clone()
                .into_shape_with_order((1, h, w))
                .unwrap()
                .into_dyn(),
        );
        let g = self.prior.forward(&mut tape, &pv, x);
        g.detach(&tape)
    }

    /// Eval-mode posterior encoding from the image plus all R annotations.
    pub fn encode_posterior(&self, image: &Array2<f64>, annotations: &[Mask]) -> DiagonalGaussian {
        assert_eq!(
            annotations.len(),
            self.r,
            "posterior expects exactly R annotations"
        );
        let mut tape = Tape::new();
        let mut scratch = BindOrder::new();
        let pv = self.posterior.bind(&mut tape, false, "posterior", &mut scratch);
        let x = tape.constant(posterior_input(image, annotations).into_dyn());
        let g = self.posterior.forward(&mut tape, &pv, x);
        g.detach(&tape)
    }
}
