//! Base-shape generation: star-convex blobs with ambiguous boundaries.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::metrics::Mask;

/// Harmonics of the boundary perturbation.
pub const SHAPE_HARMONICS: usize = 4;

/// Rasterizes a star-convex region around `(cy, cx)`: an ellipse with
/// semi-axes `a`, `b` rotated by `rot`, whose radius is modulated by
/// `1 + sum_k amps[k] * cos((k+1) * phi + phases[k])`.
pub fn rasterize_star_shape(
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    rot: f64,
    amps: &[f64],
    phases: &[f64],
    h: usize,
    w: usize,
) -> Mask {
    assert_eq!(amps.len(), phases.len());
    Array2::from_shape_fn((h, w), |(y, x)| {
        let dy = y as f64 - cy;
        let dx = x as f64 - cx;
        let rho = (dy * dy + dx * dx).sqrt();
        let phi = dy.atan2(dx);
        let pr = phi - rot;
        let (s, c) = pr.sin_cos();
        let ellipse = a * b / ((b * c).powi(2) + (a * s).powi(2)).sqrt();
        let mut mod_factor = 1.0;
        for (k, (&amp, &phase)) in amps.iter().zip(phases.iter()).enumerate() {
            mod_factor += amp * ((k + 1) as f64 * phi + phase).cos();
        }
        rho <= ellipse * mod_factor
    })
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_blur(img: &Array2<f64>, sigma: f64) -> Array2<f64> {
    assert!(sigma > 0.0);
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }
    let (h, w) = img.dim();
    let clamp = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sx = clamp(x as i64 + ki as i64 - radius, w);
                acc += k * img[[y, sx]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sy = clamp(y as i64 + ki as i64 - radius, h);
                acc += k * tmp[[sy, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Draws one blob mask and its intensity image.
///
/// The image is foreground contrast softened by a Gaussian blur of the mask
/// (sigma in [1, 3] px) plus pixel noise, then standardized to zero mean and
/// unit variance. Draw order is fixed: shape parameters, then blur sigma,
/// then noise level, then row-major pixel noise.
pub fn generate_base_shape(rng: &mut ChaCha12Rng, h: usize, w: usize) -> (Mask, Array2<f64>) {
    assert!(h >= 32 && w >= 32, "images smaller than 32x32 unsupported");
    let side = h.min(w) as f64;
    let mut mask = None;
    for _attempt in 0..10 {
        let cy = h as f64 / 2.0 + rng.random_range(-(h as f64) / 8.0..h as f64 / 8.0);
        let cx = w as f64 / 2.0 + rng.random_range(-(w as f64) / 8.0..w as f64 / 8.0);
        let a = rng.random_range(0.09..0.22) * side;
        let b = rng.random_range(0.09..0.22) * side;
        let rot = rng.random_range(0.0..std::f64::consts::PI);
        let mut amps = [0.0; SHAPE_HARMONICS];
        let mut phases = [0.0; SHAPE_HARMONICS];
        for k in 0..SHAPE_HARMONICS {
            amps[k] = rng.random_range(0.0..0.12 / (k + 1) as f64);
            phases[k] = rng.random_range(0.0..2.0 * std::f64::consts::PI);
        }
        let m = rasterize_star_shape(cy, cx, a, b, rot, &amps, &phases, h, w);
        if m.iter().filter(|&&v| v).count() >= 16 {
            mask = Some(m);
            break;
        }
    }
    let mask = mask.expect("degenerate blob after 10 retries");

    let sigma = rng.random_range(1.0..3.0);
    let noise_sd = rng.random_range(0.05..0.15);
    let soft = gaussian_blur(&mask.mapv(|v| v as u8 as f64), sigma);
    let mut img = soft.mapv(|v| 0.25 + 0.5 * v);
    for v in img.iter_mut() {
        *v += noise_sd * rng.sample::<f64, _>(StandardNormal);
    }
    let mean = img.mean().unwrap();
    let sd = img.mapv(|v| (v - mean).powi(2)).mean().unwrap().sqrt();
    assert!(sd > 0.0, "degenerate contrast");
    let img = img.mapv(|v| (v - mean) / sd);
    (mask, img)
}
