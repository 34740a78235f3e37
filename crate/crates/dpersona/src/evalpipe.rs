//! Test-set evaluation for every method. Diversified methods are scored as
//! prediction sets (GED, soft Dice, Dice_max, Dice_match), personalized
//! output as rater-aligned maps, and fused-label baselines as one
//! deterministic map. Per-rater Dice always uses the map the method would
//! actually deliver for that rater: the matched personalized map, or the
//! binarized mean prediction for set and single-map methods.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ExperimentConfig;
use crate::io::dataset::SplitData;
use crate::metrics::{binarize, dice_match, dice_matrix, dice_max, dice_soft, ged, per_rater_dice, HARD_THRESHOLD};
use crate::model::ModelBundle;
use crate::seeding::{derive_seed, rng_from};
use crate::stage1::{infer_diverse, predict_mean};
use crate::stage2::personalize_all;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Method {
    Stage1,
    Stage2,
    ProbUnet,
    Mv,
    Rs,
    Staple,
    SingleRater(usize),
}

impl Method {
    pub fn parse(s: &str) -> Result<Self, String> {
        match s {
            "stage1" => Ok(Self::Stage1),
            "stage2" => Ok(Self::Stage2),
            "prob-unet" => Ok(Self::ProbUnet),
            "mv" => Ok(Self::Mv),
            "rs" => Ok(Self::Rs),
            "staple" => Ok(Self::Staple),
            other => match other.strip_prefix("single-rater:") {
                Some(idx) => idx
                    .parse::<usize>()
                    .map(Self::SingleRater)
                    .map_err(|_| format!("bad rater index in {other:?}")),
                None => Err(format!(
                    "unknown method {other:?}; expected stage1|stage2|prob-unet|mv|rs|staple|single-rater:<i>"
                )),
            },
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Stage1 => "stage1".into(),
            Self::Stage2 => "stage2".into(),
            Self::ProbUnet => "prob-unet".into(),
            Self::Mv => "mv".into(),
            Self::Rs => "rs".into(),
            Self::Staple => "staple".into(),
            Self::SingleRater(i) => format!("single-rater-{i}"),
        }
    }

    /// File the method's model lives in, relative to the run directory.
    /// `prob-unet` is a Stage-I run trained with `beta = 0`, so it shares
    /// the Stage-I artifact name; keep it in its own run directory.
    pub fn checkpoint_file(&self) -> String {
        match self {
            Self::Stage1 | Self::ProbUnet => "stage1.dpck".into(),
            Self::Stage2 => "stage2.dpck".into(),
            other => format!("baseline_{}.dpck", other.label()),
        }
    }

    /// Whether the method emits a sampled prediction set whose size is the
    /// `--samples` knob.
    pub fn is_diverse(&self) -> bool {
        matches!(self, Self::Stage1 | Self::ProbUnet)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    /// Prediction-set size: the sampling number for diverse methods, R for
    /// personalized output, 1 for fused-label baselines.
    pub sampling_number: usize,
    pub sample_count: usize,
    pub seeds: std::collections::BTreeMap<String, u64>,
    pub config_hash: String,
    pub ged: f64,
    pub dice_soft: f64,
    pub dice_max: Option<f64>,
    pub dice_match: Option<f64>,
    pub per_rater_dice: Vec<f64>,
    pub dice_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRow {
    pub sample: usize,
    pub ged: f64,
    pub dice_soft: f64,
    pub dice_max: Option<f64>,
    pub dice_match: Option<f64>,
    pub per_rater: Vec<f64>,
    pub dice_mean: f64,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("bad report: {0}")]
    Parse(String),
}

/// Index-deterministic parallel map: results land in input order no matter
/// how the work is scheduled.
pub fn par_map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    if n == 0 {
        return Vec::new();
    }
    let threads = std::thread::available_parallelism()
        .map(|v| v.get())
        .unwrap_or(1)
        .min(n);
    if threads <= 1 {
        return (0..n).map(f).collect();
    }
    let mut out: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(threads);
    std::thread::scope(|s| {
        for (t, slot) in out.chunks_mut(chunk).enumerate() {
            let f = &f;
            s.spawn(move || {
                for (k, cell) in slot.iter_mut().enumerate() {
                    *cell = Some(f(t * chunk + k));
                }
            });
        }
    });
    out.into_iter().map(|o| o.unwrap()).collect()
}

fn mean_map(maps: &[Array2<f64>]) -> Array2<f64> {
    let mut acc = Array2::zeros(maps[0].dim());
    for m in maps {
        acc += m;
    }
    acc / maps.len() as f64
}

fn score_sample(i: usize, preds: &[Array2<f64>], anns: &[crate::metrics::Mask], matched: bool) -> SampleRow {
    let hard: Vec<_> = preds.iter().map(|m| binarize(m, HARD_THRESHOLD)).collect();
    let g = ged(&hard, anns);
    let soft = dice_soft(preds, anns);
    let matrix = dice_matrix(preds, anns);
    let d_max = dice_max(&matrix);
    // An injective assignment needs at least as many predictions as
    // annotations; single-map baselines cannot be matched.
    let d_match = (preds.len() >= anns.len()).then(|| dice_match(&matrix));
    if let Some(dm) = d_match {
        assert!(dm <= d_max + 1e-12, "dice_match exceeded dice_max");
    }
    let (per_rater, d_mean) = if matched {
        per_rater_dice(preds, anns)
    } else {
        let consensus = mean_map(preds);
        let maps: Vec<_> = (0..anns.len()).map(|_| consensus.clone()).collect();
        per_rater_dice(&maps, anns)
    };
    SampleRow {
        sample: i,
        ged: g,
        dice_soft: soft,
        dice_max: (preds.len() > 1).then_some(d_max),
        dice_match: if preds.len() > 1 { d_match } else { None },
        per_rater,
        dice_mean: d_mean,
    }
}

/// Scores one method over the whole test split. Deterministic in
/// (parameters, test data, eval seed); samples are processed in parallel
/// and aggregated in index order.
pub fn evaluate_method(
    bundle: &ModelBundle,
    test: &SplitData,
    method: &Method,
    samples: usize,
    cfg: &ExperimentConfig,
    config_hash: &str,
) -> (EvalReport, Vec<SampleRow>) {
    assert!(samples >= 1, "need at least one sample");
    let eval_seed = cfg.metrics.eval_seed;
    let rows = par_map_indexed(test.n(), |i| {
        let image = test.image(i);
        let anns = test.rater_masks(i);
        match method {
            Method::Stage1 | Method::ProbUnet => {
                let mut rng = rng_from(eval_seed, &format!("eval-s{i}"));
                let preds = infer_diverse(bundle, &image, samples, &mut rng);
                score_sample(i, &preds, &anns, false)
            }
            Method::Stage2 => {
                let bank_seed = derive_seed(eval_seed, &format!("eval-bank-s{i}"));
                let preds = personalize_all(bundle, &image, &cfg.stage2, bank_seed);
                score_sample(i, &preds, &anns, true)
            }
            Method::Mv | Method::Rs | Method::Staple | Method::SingleRater(_) => {
                let preds = vec![predict_mean(bundle, &image)];
                score_sample(i, &preds, &anns, false)
            }
        }
    });

    let n = rows.len() as f64;
    let r = test.r();
    let mut per_rater = vec![0.0; r];
    for row in &rows {
        for (acc, v) in per_rater.iter_mut().zip(&row.per_rater) {
            *acc += v;
        }
    }
    for v in &mut per_rater {
        *v /= n;
    }
    let dice_mean = per_rater.iter().sum::<f64>() / r as f64;
    let mean_of = |get: fn(&SampleRow) -> f64| rows.iter().map(get).sum::<f64>() / n;
    let opt_mean = |get: fn(&SampleRow) -> Option<f64>| {
        rows.iter()
            .map(get)
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / n)
    };

    let mut seeds = std::collections::BTreeMap::new();
    seeds.insert("eval".to_string(), eval_seed);
    seeds.insert("data".to_string(), cfg.synthgen.master_seed);
    seeds.insert("stage1".to_string(), cfg.stage1.seed);
    seeds.insert("stage2".to_string(), cfg.stage2.seed);

    let report = EvalReport {
        method: method.label(),
        sampling_number: match method {
            Method::Stage1 | Method::ProbUnet => samples,
            Method::Stage2 => r,
            _ => 1,
        },
        sample_count: rows.len(),
        seeds,
        config_hash: config_hash.to_string(),
        ged: mean_of(|r| r.ged),
        dice_soft: mean_of(|r| r.dice_soft),
        dice_max: opt_mean(|r| r.dice_max),
        dice_match: opt_mean(|r| r.dice_match),
        per_rater_dice: per_rater,
        dice_mean,
    };
    (report, rows)
}

pub fn write_report_json(path: &Path, report: &EvalReport) -> Result<(), EvalError> {
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_report_json(path: &Path) -> Result<EvalReport, EvalError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| EvalError::Parse(e.to_string()))
}

/// Per-sample metric table for downstream plots.
pub fn write_sample_csv(path: &Path, r: usize, rows: &[SampleRow]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![
        "sample".to_string(),
        "ged".to_string(),
        "dice_soft".to_string(),
        "dice_max".to_string(),
        "dice_match".to_string(),
    ];
    header.extend((1..=r).map(|j| format!("dice_a{j}")));
    header.push("dice_mean".to_string());
    w.write_record(&header)?;
    let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for row in rows {
        let mut record = vec![
            row.sample.to_string(),
            row.ged.to_string(),
            row.dice_soft.to_string(),
            fmt_opt(row.dice_max),
            fmt_opt(row.dice_match),
        ];
        record.extend(row.per_rater.iter().map(|v| v.to_string()));
        record.push(row.dice_mean.to_string());
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}
