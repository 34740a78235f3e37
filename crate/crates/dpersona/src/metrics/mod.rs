//! Evaluation metrics for multi-rater segmentation.
//!
//! Two families: set-to-set metrics that compare a sampled prediction set
//! against the annotation set (GED, soft Dice, Dice matrix with max / optimal
//! matching), and personalized metrics that compare one prediction per rater
//! against that rater's annotation.
//!
//! Conventions used throughout:
//! - empty vs empty counts as perfect overlap (IoU = Dice = 1);
//! - probability maps are binarized with strict `> tau`, hard threshold 0.5;
//! - Dice matrices have one row per prediction and one column per annotation.

mod assignment;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use assignment::max_weight_assignment;

/// Binary segmentation mask.
pub type Mask = Array2<bool>;

/// Thresholds averaged over by [`dice_soft`].
pub const SOFT_THRESHOLDS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

/// Hard binarization threshold for Dice matrices and per-rater Dice.
pub const HARD_THRESHOLD: f64 = 0.5;

/// `map > tau`, elementwise and strict.
pub fn binarize(map: &Array2<f64>, tau: f64) -> Mask {
    map.mapv(|v| v > tau)
}

fn counts(a: &Mask, b: &Mask) -> (usize, usize, usize) {
    assert_eq!(a.dim(), b.dim(), "mask shape mismatch");
    let mut inter = 0;
    let mut ca = 0;
    let mut cb = 0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        inter += (x && y) as usize;
        ca += x as usize;
        cb += y as usize;
    }
    (inter, ca, cb)
}

/// Intersection over union; 1 when both masks are empty.
pub fn iou(a: &Mask, b: &Mask) -> f64 {
    let (inter, ca, cb) = counts(a, b);
    let union = ca + cb - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Dice overlap; 1 when both masks are empty.
pub fn dice(a: &Mask, b: &Mask) -> f64 {
    let (inter, ca, cb) = counts(a, b);
    if ca + cb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (ca + cb) as f64
    }
}

/// Generalized Energy Distance between a prediction set and an annotation
/// set under d = 1 - IoU. Self-pairs sit on the diagonals and contribute 0.
pub fn ged(preds: &[Mask], anns: &[Mask]) -> f64 {
    assert!(!preds.is_empty() && !anns.is_empty(), "ged needs nonempty sets");
    let m = preds.len() as f64;
    let n = anns.len() as f64;
    let d = |a: &Mask, b: &Mask| 1.0 - iou(a, b);
    let mut cross = 0.0;
    for p in preds {
        for a in anns {
            cross += d(p, a);
        }
    }
    let mut pp = 0.0;
    for p in preds {
        for q in preds {
            pp += d(p, q);
        }
    }
    let mut aa = 0.0;
    for a in anns {
        for b in anns {
            aa += d(a, b);
        }
    }
    // Group as means first so ged(S, S) cancels exactly; the Jaccard
    // distance is of negative type, so the true value is nonnegative and
    // any residue below zero is roundoff.
    (2.0 * (cross / (m * n)) - pp / (m * m) - aa / (n * n)).max(0.0)
}

/// Soft Dice between the two set averages, swept over [`SOFT_THRESHOLDS`].
pub fn dice_soft(preds: &[Array2<f64>], anns: &[Mask]) -> f64 {
    assert!(!preds.is_empty() && !anns.is_empty(), "dice_soft needs nonempty sets");
    let shape = preds[0].dim();
    let mut p_soft = Array2::<f64>::zeros(shape);
    for p in preds {
        p_soft += p;
    }
    p_soft /= preds.len() as f64;
    let mut a_soft = Array2::<f64>::zeros(shape);
    for a in anns {
        a_soft += &a.mapv(|v| v as u8 as f64);
    }
    a_soft /= anns.len() as f64;
    SOFT_THRESHOLDS
        .iter()
        .map(|&tau| dice(&binarize(&p_soft, tau), &binarize(&a_soft, tau)))
        .sum::<f64>()
        / SOFT_THRESHOLDS.len() as f64
}

/// Pairwise Dice between binarized predictions (rows) and annotations
/// (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct DiceMatrix {
    values: Array2<f64>,
}

impl DiceMatrix {
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Predictions (rows).
    pub fn m(&self) -> usize {
        self.values.nrows()
    }

    /// Annotations (columns).
    pub fn n(&self) -> usize {
        self.values.ncols()
    }
}

pub fn dice_matrix(preds: &[Array2<f64>], anns: &[Mask]) -> DiceMatrix {
    assert!(!preds.is_empty() && !anns.is_empty(), "dice_matrix needs nonempty sets");
    let hard: Vec<Mask> = preds.iter().map(|p| binarize(p, HARD_THRESHOLD)).collect();
    let values = Array2::from_shape_fn((preds.len(), anns.len()), |(i, j)| {
        dice(&hard[i], &anns[j])
    });
    DiceMatrix { values }
}

/// Mean over annotations of the best-matching prediction.
pub fn dice_max(m: &DiceMatrix) -> f64 {
    let mut acc = 0.0;
    for j in 0..m.n() {
        acc += m
            .values
            .column(j)
            .iter()
            .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    }
    acc / m.n() as f64
}

/// Mean Dice under the best one-to-one matching of annotations to distinct
/// predictions. Requires at least as many predictions as annotations.
pub fn dice_match(m: &DiceMatrix) -> f64 {
    assert!(
        m.m() >= m.n(),
        "dice_match needs m >= n (got {} predictions, {} annotations)",
        m.m(),
        m.n()
    );
    let weights = m.values.t().to_owned(); // one row per annotation
    let cols = max_weight_assignment(&weights);
    let total: f64 = cols
        .iter()
        .enumerate()
        .map(|(j, &i)| m.values[[i, j]])
        .sum();
    let matched = total / m.n() as f64;
    let upper = dice_max(m);
    assert!(
        matched <= upper + 1e-12,
        "dice_match {matched} exceeded dice_max {upper}"
    );
    matched
}

/// Per-rater Dice of personalized predictions, plus their mean.
pub fn per_rater_dice(preds: &[Array2<f64>], anns: &[Mask]) -> (Vec<f64>, f64) {
    assert_eq!(preds.len(), anns.len(), "one prediction per rater required");
    assert!(!preds.is_empty());
    let scores: Vec<f64> = preds
        .iter()
        .zip(anns.iter())
        .map(|(p, a)| dice(&binarize(p, HARD_THRESHOLD), a))
        .collect();
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    (scores, mean)
}

/// Aggregated evaluation results for one method on one dataset split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub ged: f64,
    pub dice_soft: f64,
    /// Absent for methods that emit a single map (no sample set).
    pub dice_max: Option<f64>,
    /// Absent for methods that emit a single map.
    pub dice_match: Option<f64>,
    pub dice_per_rater: Vec<f64>,
    pub dice_mean: f64,
    /// Number of evaluated cases.
    pub case_count: usize,
    /// Size of the sampled prediction set per case.
    pub sampling_number: usize,
    /// Seeds that produced this report.
    pub seeds: Vec<u64>,
}

impl EvalReport {
    /// Builds a report, deriving `dice_mean` and checking the matching bound.
    pub fn new(
        ged: f64,
        dice_soft: f64,
        dice_max: Option<f64>,
        dice_match: Option<f64>,
        dice_per_rater: Vec<f64>,
        case_count: usize,
        sampling_number: usize,
        seeds: Vec<u64>,
    ) -> Self {
        if let (Some(mx), Some(mt)) = (dice_max, dice_match) {
            assert!(mt <= mx + 1e-12, "dice_match {mt} exceeds dice_max {mx}");
        }
        assert!(!dice_per_rater.is_empty(), "per-rater scores required");
        let dice_mean = dice_per_rater.iter().sum::<f64>() / dice_per_rater.len() as f64;
        Self {
            ged,
            dice_soft,
            dice_max,
            dice_match,
            dice_per_rater,
            dice_mean,
            case_count,
            sampling_number,
            seeds,
        }
    }
}
