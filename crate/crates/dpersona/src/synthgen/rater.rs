//! Simulated raters: smooth boundary warps, signed morphological offsets,
//! and boundary-banded flip noise, ranked conservative to aggressive.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::Mask;

/// Style of one simulated rater.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RaterProfile {
    pub rank_index: usize,
    /// Pixels of disk dilation (positive) or erosion (negative).
    pub boundary_offset: i32,
    /// Peak displacement of the smooth boundary warp, in pixels.
    pub deformation_amplitude: f64,
    /// Per-pixel flip probability inside the boundary band.
    pub flip_noise: f64,
}

impl RaterProfile {
    /// Default ranked profile set: offsets strictly increasing with rank,
    /// shared warp amplitude and flip noise.
    pub fn ranked_set(r: usize) -> Vec<RaterProfile> {
        assert!(r >= 2, "need at least two raters");
        let max_off = 2.0f64.max(((r - 1) as f64 / 2.0).ceil());
        let set: Vec<RaterProfile> = (0..r)
            .map(|i| {
                let t = i as f64 / (r - 1) as f64 - 0.5;
                RaterProfile {
                    rank_index: i,
                    boundary_offset: (t * 2.0 * max_off).round() as i32,
                    deformation_amplitude: 1.5,
                    flip_noise: 0.02,
                }
            })
            .collect();
        validate_profiles(&set);
        set
    }
}

/// Checks the profile-set invariants.
pub fn validate_profiles(profiles: &[RaterProfile]) {
    assert!(!profiles.is_empty());
    for (i, p) in profiles.iter().enumerate() {
        assert_eq!(p.rank_index, i, "rank_index must match position");
        assert!(
            (0.0..=0.05).contains(&p.flip_noise),
            "flip_noise out of range"
        );
        assert!(p.deformation_amplitude >= 0.0);
        if i > 0 {
            assert!(
                p.boundary_offset > profiles[i - 1].boundary_offset,
                "boundary offsets must increase strictly with rank"
            );
        }
    }
}

fn disk_offsets(radius: i32) -> Vec<(i32, i32)> {
    let mut out = Vec::new();
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            if dy * dy + dx * dx <= radius * radius {
                out.push((dy, dx));
            }
        }
    }
    out
}

pub(crate) fn dilate(mask: &Mask, radius: i32) -> Mask {
    assert!(radius >= 0);
    let (h, w) = mask.dim();
    let offsets = disk_offsets(radius);
    let mut out = Array2::from_elem((h, w), false);
    for ((y, x), &v) in mask.indexed_iter() {
        if v {
            for &(dy, dx) in &offsets {
                let ny = y as i32 + dy;
                let nx = x as i32 + dx;
                if ny >= 0 && ny < h as i32 && nx >= 0 && nx < w as i32 {
                    out[[ny as usize, nx as usize]] = true;
                }
            }
        }
    }
    out
}

pub(crate) fn erode(mask: &Mask, radius: i32) -> Mask {
    assert!(radius >= 0);
    let (h, w) = mask.dim();
    let offsets = disk_offsets(radius);
    let mut out = Array2::from_elem((h, w), false);
    for ((y, x), &v) in mask.indexed_iter() {
        if v {
            // Out-of-bounds neighborhoods count as background.
            let keep = offsets.iter().all(|&(dy, dx)| {
                let ny = y as i32 + dy;
                let nx = x as i32 + dx;
                ny >= 0
                    && ny < h as i32
                    && nx >= 0
                    && nx < w as i32
                    && mask[[ny as usize, nx as usize]]
            });
            out[[y, x]] = keep;
        }
    }
    out
}

/// Pixels within `radius` of the mask boundary, on either side.
pub(crate) fn boundary_band(mask: &Mask, radius: i32) -> Mask {
    let grown = dilate(mask, radius);
    let shrunk = erode(mask, radius);
    ndarray::Zip::from(&grown)
        .and(&shrunk)
        .map_collect(|&g, &s| g && !s)
}

/// The most interior foreground pixel: maximal 4-connected BFS distance to
/// the background, row-major first on ties.
pub(crate) fn most_interior_pixel(mask: &Mask) -> (usize, usize) {
    let (h, w) = mask.dim();
    let mut dist = Array2::from_elem((h, w), u32::MAX);
    let mut queue = std::collections::VecDeque::new();
    for ((y, x), &v) in mask.indexed_iter() {
        if !v {
            dist[[y, x]] = 0;
            queue.push_back((y, x));
        }
    }
    assert!(
        queue.len() < h * w,
        "mask has no foreground; no interior pixel exists"
    );
    // A mask with no background would leave dist = MAX everywhere inside;
    // treat the border as adjacent to background by seeding ring distance 1.
    if queue.is_empty() {
        for y in 0..h {
            for x in 0..w {
                if y == 0 || x == 0 || y == h - 1 || x == w - 1 {
                    dist[[y, x]] = 1;
                    queue.push_back((y, x));
                }
            }
        }
    }
    while let Some((y, x)) = queue.pop_front() {
        let d = dist[[y, x]];
        let push = |ny: usize, nx: usize, dist: &mut Array2<u32>, queue: &mut std::collections::VecDeque<(usize, usize)>| {
            if dist[[ny, nx]] == u32::MAX {
                dist[[ny, nx]] = d + 1;
                queue.push_back((ny, nx));
            }
        };
        if y > 0 {
            push(y - 1, x, &mut dist, &mut queue);
        }
        if y + 1 < h {
            push(y + 1, x, &mut dist, &mut queue);
        }
        if x > 0 {
            push(y, x - 1, &mut dist, &mut queue);
        }
        if x + 1 < w {
            push(y, x + 1, &mut dist, &mut queue);
        }
    }
    let mut best = (0usize, 0usize);
    let mut best_d = 0u32;
    for ((y, x), &v) in mask.indexed_iter() {
        if v && dist[[y, x]] > best_d {
            best_d = dist[[y, x]];
            best = (y, x);
        }
    }
    best
}

/// Smooth displacement field built from two low-frequency sinusoids per
/// axis; peak displacement equals `amplitude`.
fn smooth_warp(
    rng: &mut ChaCha12Rng,
    h: usize,
    w: usize,
    amplitude: f64,
) -> (Array2<f64>, Array2<f64>) {
    let field = |rng: &mut ChaCha12Rng| {
        let f1x = rng.random_range(1..=3) as f64;
        let f1y = rng.random_range(1..=3) as f64;
        let p1 = rng.random_range(0.0..2.0 * std::f64::consts::PI);
        let f2x = rng.random_range(1..=3) as f64;
        let f2y = rng.random_range(1..=3) as f64;
        let p2 = rng.random_range(0.0..2.0 * std::f64::consts::PI);
        Array2::from_shape_fn((h, w), |(y, x)| {
            let ux = x as f64 / w as f64;
            let uy = y as f64 / h as f64;
            let tau = 2.0 * std::f64::consts::PI;
            0.5 * amplitude
                * ((tau * (f1x * ux + f1y * uy) + p1).sin()
                    + (tau * (f2x * ux + f2y * uy) + p2).sin())
        })
    };
    let dx = field(rng);
    let dy = field(rng);
    (dy, dx)
}

fn apply_warp(mask: &Mask, dy: &Array2<f64>, dx: &Array2<f64>) -> Mask {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let sy = (y as f64 + dy[[y, x]]).round().clamp(0.0, h as f64 - 1.0) as usize;
        let sx = (x as f64 + dx[[y, x]]).round().clamp(0.0, w as f64 - 1.0) as usize;
        mask[[sy, sx]]
    })
}

/// Produces one rater's annotation of `true_mask`.
///
/// Pipeline: smooth warp, then the signed disk offset, then independent
/// flips restricted to a 3 px band around the boundary. Guaranteed nonempty:
/// if the offset or the flips empty the mask, the most interior pixel of the
/// warped mask is kept instead.
pub fn rater_annotate(true_mask: &Mask, profile: &RaterProfile, rng: &mut ChaCha12Rng) -> Mask {
    assert!(
        true_mask.iter().any(|&v| v),
        "true mask must have foreground"
    );
    let (dy, dx) = smooth_warp(rng, true_mask.dim().0, true_mask.dim().1, profile.deformation_amplitude);
    let mut warped = apply_warp(true_mask, &dy, &dx);
    if !warped.iter().any(|&v| v) {
        // The warp can only empty hairline masks; keep their core.
        let (y, x) = most_interior_pixel(true_mask);
        warped[[y, x]] = true;
    }

    let mut shifted = match profile.boundary_offset.cmp(&0) {
        std::cmp::Ordering::Greater => dilate(&warped, profile.boundary_offset),
        std::cmp::Ordering::Less => erode(&warped, -profile.boundary_offset),
        std::cmp::Ordering::Equal => warped.clone(),
    };
    if !shifted.iter().any(|&v| v) {
        let (y, x) = most_interior_pixel(&warped);
        shifted[[y, x]] = true;
    }

    if profile.flip_noise > 0.0 {
        let band = boundary_band(&shifted, 3);
        for ((y, x), &in_band) in band.indexed_iter() {
            if in_band && rng.random::<f64>() < profile.flip_noise {
                shifted[[y, x]] = !shifted[[y, x]];
            }
        }
    }
    if !shifted.iter().any(|&v| v) {
        let (y, x) = most_interior_pixel(&warped);
        shifted[[y, x]] = true;
    }
    shifted
}
