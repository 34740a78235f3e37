//! Command-line surface: dataset generation, two-stage training, fused-label
//! baselines, evaluation, and report rendering, sharing one run directory.
//!
//! Flag precedence: `--seed`/`--samples` override config keys, which
//! override built-in defaults. Training and generation refuse to clobber
//! artifacts without `--force`; `eval` and `report` are pure renderers of
//! existing artifacts and always overwrite their outputs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use ndarray::Array4;

use dpersona::config::{self, ExperimentConfig, Overrides, RunRecord};
use dpersona::evalpipe::{self, Method};
use dpersona::fusion::{majority_vote, staple, StapleOptions};
use dpersona::io::checkpoint::{
    read_checkpoint, write_checkpoint, CheckpointInfo, CheckpointMeta,
};
use dpersona::io::dataset::SplitData;
use dpersona::metrics::Mask;
use dpersona::report;
use dpersona::runlog;
use dpersona::seeding::{derive_seed, rng_from};
use dpersona::stage1::{self, Stage1Mode};
use dpersona::stage2;
use dpersona::synthgen;

const ALLOWED_SAMPLES: [usize; 3] = [10, 30, 50];

#[derive(Parser)]
#[command(name = "d-persona", version, about = "Diversified and personalized multi-rater segmentation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; built-in defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config (data, stage1, stage2, eval).
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory holding all artifacts.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Overwrite existing expensive artifacts.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic multi-rater dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the diversified-segmentation stage.
    TrainStage1 {
        #[command(flatten)]
        common: Common,
    },
    /// Train per-rater personalization on a frozen stage-1 checkpoint.
    TrainStage2 {
        #[command(flatten)]
        common: Common,
    },
    /// Train a baseline on fused or selected labels.
    Baseline {
        #[command(flatten)]
        common: Common,
        /// mv | rs | staple | single-rater:<i>
        #[arg(long)]
        method: String,
    },
    /// Score a trained method on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// stage1 | stage2 | prob-unet | mv | rs | staple | single-rater:<i>
        #[arg(long)]
        method: String,
        /// Sampling number for diverse methods; all of 10/30/50 when omitted.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Render the combined metric table and overlay images.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.cmd {
        Cmd::GenData { common } => gen_data(&common),
        Cmd::TrainStage1 { common } => train_stage1(&common),
        Cmd::TrainStage2 { common } => train_stage2(&common),
        Cmd::Baseline { common, method } => baseline(&common, &method),
        Cmd::Eval {
            common,
            method,
            samples,
        } => eval(&common, &method, samples),
        Cmd::Report { common } => render_report(&common),
    }
}

fn setup(common: &Common, samples: Option<usize>) -> Result<(ExperimentConfig, String), String> {
    let mut cfg = config::load_config(common.config.as_deref()).map_err(|e| e.to_string())?;
    config::apply_overrides(
        &mut cfg,
        &Overrides {
            seed: common.seed,
            samples,
        },
    );
    cfg.validate().map_err(|e| e.to_string())?;
    let hash = config::config_hash(&cfg);
    Ok((cfg, hash))
}

fn data_dir(out: &Path) -> PathBuf {
    out.join("data")
}

fn load_split(out: &Path, name: &str) -> Result<SplitData, String> {
    let path = data_dir(out).join(format!("{name}.dpak"));
    if !path.exists() {
        return Err(format!(
            "missing dataset split {}; run `d-persona gen-data` first",
            path.display()
        ));
    }
    SplitData::read(&path).map_err(|e| format!("cannot read {}: {e}", path.display()))
}

fn refuse_existing(path: &Path, force: bool) -> Result<(), String> {
    if path.exists() && !force {
        return Err(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        ));
    }
    Ok(())
}

fn finish(
    common: &Common,
    command: &str,
    cfg: &ExperimentConfig,
    hash: &str,
    artifacts: &[PathBuf],
    started: Instant,
) -> Result<(), String> {
    let mut rec = RunRecord::new(command, cfg, hash);
    rec.artifacts = artifacts.iter().map(|p| p.display().to_string()).collect();
    rec.wall_clock_secs = started.elapsed().as_secs_f64();
    config::append_run_record(&common.out, &rec).map_err(|e| e.to_string())?;
    Ok(())
}

fn gen_data(common: &Common) -> Result<(), String> {
    let started = Instant::now();
    let (cfg, hash) = setup(common, None)?;
    let dir = data_dir(&common.out);
    let manifest =
        synthgen::build_dataset(&cfg.synthgen, &dir, common.force).map_err(|e| e.to_string())?;
    println!(
        "generated {} train / {} val / {} test cases, {}x{}, {} raters",
        manifest.train_count,
        manifest.val_count,
        manifest.test_count,
        manifest.h,
        manifest.w,
        manifest.raters
    );
    let artifacts: Vec<PathBuf> = ["train.dpak", "val.dpak", "test.dpak", "manifest.json"]
        .iter()
        .map(|f| dir.join(f))
        .collect();
    finish(common, "gen-data", &cfg, &hash, &artifacts, started)
}

fn train_stage1(common: &Common) -> Result<(), String> {
    let started = Instant::now();
    let (cfg, hash) = setup(common, None)?;
    let train = load_split(&common.out, "train")?;
    let val = load_split(&common.out, "val")?;
    refuse_existing(&common.out.join("stage1.dpck"), common.force)?;
    let output = stage1::train_stage1(&train, &val, &cfg.stage1).map_err(|e| e.to_string())?;
    let info = CheckpointInfo {
        stage: "stage1".into(),
        h: train.h(),
        w: train.w(),
        kl_direction: cfg.stage1.kl_direction,
        config_hash: hash.clone(),
    };
    let (ckpt, log) =
        stage1::save_outputs(&output, &info, &common.out).map_err(|e| e.to_string())?;
    println!(
        "stage1: {} epochs, best epoch {} with val ged {:.4}",
        output.logs.len(),
        output.best_epoch,
        output.best_val_ged
    );
    finish(common, "train-stage1", &cfg, &hash, &[ckpt, log], started)
}

fn describe_mismatches(
    meta: &CheckpointMeta,
    d: usize,
    channels: usize,
    r: usize,
    h: usize,
    w: usize,
) -> Vec<String> {
    let mut out = Vec::new();
    if meta.d != d {
        out.push(format!("d {} vs {}", meta.d, d));
    }
    if meta.channels != channels {
        out.push(format!("channels {} vs {}", meta.channels, channels));
    }
    if meta.r != r {
        out.push(format!("raters {} vs {}", meta.r, r));
    }
    if meta.h != h || meta.w != w {
        out.push(format!("size {}x{} vs {}x{}", meta.h, meta.w, h, w));
    }
    out
}

fn train_stage2(common: &Common) -> Result<(), String> {
    let started = Instant::now();
    let (cfg, hash) = setup(common, None)?;
    let train = load_split(&common.out, "train")?;
    let val = load_split(&common.out, "val")?;
    let s1_path = common.out.join("stage1.dpck");
    if !s1_path.exists() {
        return Err(format!(
            "missing stage-1 checkpoint {}; run `d-persona train-stage1` first",
            s1_path.display()
        ));
    }
    let (bundle, meta) =
        read_checkpoint(&s1_path).map_err(|e| format!("cannot read {}: {e}", s1_path.display()))?;
    let mismatches = describe_mismatches(
        &meta,
        cfg.stage1.d,
        cfg.stage1.channels,
        train.r(),
        train.h(),
        train.w(),
    );
    if !mismatches.is_empty() {
        return Err(format!(
            "stage-1 checkpoint (config {}) is incompatible with this run (config {hash}): {}",
            meta.config_hash,
            mismatches.join(", ")
        ));
    }
    refuse_existing(&common.out.join("stage2.dpck"), common.force)?;
    let output =
        stage2::train_stage2(&train, &val, &bundle, &cfg.stage2).map_err(|e| e.to_string())?;
    let info = CheckpointInfo {
        stage: "stage2".into(),
        h: train.h(),
        w: train.w(),
        kl_direction: meta.kl_direction,
        config_hash: hash.clone(),
    };
    let (ckpt, log) =
        stage2::save_outputs(&output, &info, &common.out).map_err(|e| e.to_string())?;
    println!(
        "stage2: {} epochs, best epoch {} with val dice {:.4}",
        output.logs.len(),
        output.best_epoch,
        output.best_val_dice
    );
    finish(common, "train-stage2", &cfg, &hash, &[ckpt, log], started)
}

/// Replaces each case's annotations with one fused mask, keeping images
/// and hidden truths.
fn fuse_split(split: &SplitData, mut fuse: impl FnMut(&[Mask]) -> Mask) -> SplitData {
    let (n, h, w) = (split.n(), split.h(), split.w());
    let mut annotations = Array4::<u8>::zeros((n, 1, h, w));
    for i in 0..n {
        let fused = fuse(&split.rater_masks(i));
        for ((y, x), &v) in fused.indexed_iter() {
            annotations[[i, 0, y, x]] = v as u8;
        }
    }
    SplitData {
        images: split.images.clone(),
        annotations,
        true_masks: split.true_masks.clone(),
    }
}

fn baseline(common: &Common, method_str: &str) -> Result<(), String> {
    let started = Instant::now();
    let method = Method::parse(method_str)?;
    let label = method.label();
    if !matches!(
        method,
        Method::Mv | Method::Rs | Method::Staple | Method::SingleRater(_)
    ) {
        return Err(format!(
            "{label} is not a baseline; use train-stage1 / train-stage2"
        ));
    }
    let (cfg, hash) = setup(common, None)?;
    let train = load_split(&common.out, "train")?;
    let val = load_split(&common.out, "val")?;
    let ckpt_path = common.out.join(method.checkpoint_file());
    refuse_existing(&ckpt_path, common.force)?;

    let mut artifacts = Vec::new();
    // RS keeps the full annotation stack: the single-label trainer redraws
    // one annotation per case every epoch. The other baselines train on a
    // fused R=1 archive, written out as an artifact.
    let train_for_fit = match &method {
        Method::Rs => train.clone(),
        Method::Mv => fuse_split(&train, |anns| majority_vote(anns)),
        Method::Staple => {
            let opts = StapleOptions {
                max_iters: cfg.baselines.staple_max_iters,
                tol: cfg.baselines.staple_tol,
                ..StapleOptions::default()
            };
            fuse_split(&train, |anns| staple(anns, &opts).fused_mask())
        }
        Method::SingleRater(i) => {
            if *i >= train.r() {
                return Err(format!(
                    "rater index {i} out of range; the dataset has {} raters",
                    train.r()
                ));
            }
            fuse_split(&train, |anns| anns[*i].clone())
        }
        _ => unreachable!(),
    };
    if !matches!(method, Method::Rs) {
        let fused_path = common.out.join(format!("fused_{label}.dpak"));
        train_for_fit
            .write(&fused_path)
            .map_err(|e| e.to_string())?;
        artifacts.push(fused_path);
    }

    let mut cfg1 = cfg.stage1.clone();
    cfg1.mode = Stage1Mode::SingleLabel;
    let output = stage1::train_stage1(&train_for_fit, &val, &cfg1).map_err(|e| e.to_string())?;
    let info = CheckpointInfo {
        stage: format!("baseline-{label}"),
        h: train.h(),
        w: train.w(),
        kl_direction: cfg1.kl_direction,
        config_hash: hash.clone(),
    };
    write_checkpoint(&ckpt_path, &output.bundle, &info).map_err(|e| e.to_string())?;
    let log_path = common.out.join(format!("baseline_{label}_log.jsonl"));
    runlog::write_jsonl(&log_path, &output.logs).map_err(|e| e.to_string())?;
    println!(
        "baseline {label}: best epoch {} with val ged {:.4}",
        output.best_epoch, output.best_val_ged
    );
    artifacts.push(ckpt_path);
    artifacts.push(log_path);
    finish(common, "baseline", &cfg, &hash, &artifacts, started)
}

fn expected_stage(method: &Method) -> String {
    match method {
        Method::Stage1 | Method::ProbUnet => "stage1".into(),
        Method::Stage2 => "stage2".into(),
        other => format!("baseline-{}", other.label()),
    }
}

fn eval(common: &Common, method_str: &str, samples: Option<usize>) -> Result<(), String> {
    let started = Instant::now();
    let method = Method::parse(method_str)?;
    let label = method.label();
    if let Some(s) = samples {
        if !ALLOWED_SAMPLES.contains(&s) {
            return Err(format!("--samples must be one of {ALLOWED_SAMPLES:?}, got {s}"));
        }
    }
    let (cfg, hash) = setup(common, samples)?;
    let test = load_split(&common.out, "test")?;
    let ckpt_path = common.out.join(method.checkpoint_file());
    if !ckpt_path.exists() {
        let hint = match &method {
            Method::Stage1 | Method::ProbUnet => "train-stage1".to_string(),
            Method::Stage2 => "train-stage2".to_string(),
            _ => format!("baseline --method {method_str}"),
        };
        return Err(format!(
            "missing checkpoint {}; run `d-persona {hint}` first",
            ckpt_path.display()
        ));
    }
    let (bundle, meta) =
        read_checkpoint(&ckpt_path).map_err(|e| format!("cannot read {}: {e}", ckpt_path.display()))?;
    let expected = expected_stage(&method);
    if meta.stage != expected {
        return Err(format!(
            "{} holds a {} model; eval --method {label} needs {expected}",
            ckpt_path.display(),
            meta.stage
        ));
    }
    // Fused-label baselines are trained on an R=1 split; everything else
    // must have seen the same rater stack as the test data.
    let expected_r = match &method {
        Method::Mv | Method::Staple | Method::SingleRater(_) => 1,
        _ => test.r(),
    };
    if meta.r != expected_r || meta.h != test.h() || meta.w != test.w() {
        return Err(format!(
            "checkpoint geometry ({} raters, {}x{}) disagrees with the test split (expected {} raters, {}x{})",
            meta.r,
            meta.h,
            meta.w,
            expected_r,
            test.h(),
            test.w()
        ));
    }

    let sampling: Vec<usize> = if method.is_diverse() {
        samples.map(|s| vec![s]).unwrap_or_else(|| ALLOWED_SAMPLES.to_vec())
    } else {
        vec![1]
    };
    let mut artifacts = Vec::new();
    for s in sampling {
        let (report, rows) = evalpipe::evaluate_method(&bundle, &test, &method, s, &cfg, &hash);
        let stem = if method.is_diverse() {
            format!("eval_{label}_{s}")
        } else {
            format!("eval_{label}")
        };
        let json_path = common.out.join(format!("{stem}.json"));
        evalpipe::write_report_json(&json_path, &report).map_err(|e| e.to_string())?;
        let csv_path = common.out.join(format!("{stem}_samples.csv"));
        evalpipe::write_sample_csv(&csv_path, test.r(), &rows).map_err(|e| e.to_string())?;
        println!(
            "{label} (#{}): ged {:.4}, dice_soft {:.4}, dice_mean {:.4}",
            report.sampling_number, report.ged, report.dice_soft, report.dice_mean
        );
        artifacts.push(json_path);
        artifacts.push(csv_path);
    }
    finish(common, "eval", &cfg, &hash, &artifacts, started)
}

fn render_report(common: &Common) -> Result<(), String> {
    let started = Instant::now();
    let (cfg, hash) = setup(common, None)?;
    let mut names: Vec<String> = std::fs::read_dir(&common.out)
        .map_err(|e| format!("cannot read {}: {e}", common.out.display()))?
        .filter_map(|entry| entry.ok())
        .filter_map(|entry| entry.file_name().into_string().ok())
        .filter(|name| name.starts_with("eval_") && name.ends_with(".json"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(format!(
            "no evaluation artifacts in {}; run `d-persona eval` first",
            common.out.display()
        ));
    }
    let reports = names
        .iter()
        .map(|n| evalpipe::read_report_json(&common.out.join(n)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;

    let table = report::render_text_table(&reports);
    let txt_path = common.out.join("report.txt");
    std::fs::write(&txt_path, &table).map_err(|e| e.to_string())?;
    let csv_path = common.out.join("report.csv");
    report::write_csv_table(&csv_path, &reports).map_err(|e| e.to_string())?;
    print!("{table}");
    let mut artifacts = vec![txt_path, csv_path];

    match load_split(&common.out, "test") {
        Ok(test) => {
            let image = test.image(0);
            let anns = test.rater_masks(0);
            let s1_path = common.out.join("stage1.dpck");
            if s1_path.exists() {
                let (bundle, _) = read_checkpoint(&s1_path).map_err(|e| e.to_string())?;
                let mut rng = rng_from(cfg.metrics.eval_seed, "overlay-diverse");
                let preds = stage1::infer_diverse(&bundle, &image, 6, &mut rng);
                let panel = report::overlay_panel(&image, &anns, &preds, 6);
                let path = common.out.join("overlay_diverse.png");
                report::save_overlay(&path, &panel).map_err(|e| e.to_string())?;
                artifacts.push(path);
            }
            let s2_path = common.out.join("stage2.dpck");
            if s2_path.exists() {
                let (bundle, _) = read_checkpoint(&s2_path).map_err(|e| e.to_string())?;
                let bank_seed = derive_seed(cfg.metrics.eval_seed, "overlay-bank");
                let preds = stage2::personalize_all(&bundle, &image, &cfg.stage2, bank_seed);
                let panel = report::overlay_panel(&image, &anns, &preds, preds.len());
                let path = common.out.join("overlay_personalized.png");
                report::save_overlay(&path, &panel).map_err(|e| e.to_string())?;
                artifacts.push(path);
            }
        }
        Err(_) => println!("skipping overlays: test split not found"),
    }
    finish(common, "report", &cfg, &hash, &artifacts, started)
}
