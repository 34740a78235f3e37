//! Report rendering: one combined metric table (text and CSV) across all
//! evaluated methods, plus static PNG overlays showing diversified samples
//! and personalized per-rater predictions against the annotations.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;

use crate::evalpipe::{EvalError, EvalReport};
use crate::metrics::Mask;

fn fmt(v: f64) -> String {
    format!("{v:.4}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_else(|| "-".to_string())
}

fn table_cells(reports: &[EvalReport]) -> (Vec<String>, Vec<Vec<String>>) {
    let max_r = reports
        .iter()
        .map(|r| r.per_rater_dice.len())
        .max()
        .unwrap_or(0);
    let mut header = vec![
        "method".to_string(),
        "n".to_string(),
        "ged".to_string(),
        "dice_soft".to_string(),
        "dice_max".to_string(),
        "dice_match".to_string(),
    ];
    header.extend((1..=max_r).map(|j| format!("dice_a{j}")));
    header.push("dice_mean".to_string());

    let rows = reports
        .iter()
        .map(|rep| {
            if let (Some(lo), Some(hi)) = (rep.dice_match, rep.dice_max) {
                assert!(lo <= hi + 1e-12, "dice_match exceeded dice_max in a report row");
            }
            let mut row = vec![
                rep.method.clone(),
                rep.sampling_number.to_string(),
                fmt(rep.ged),
                fmt(rep.dice_soft),
                fmt_opt(rep.dice_max),
                fmt_opt(rep.dice_match),
            ];
            for j in 0..max_r {
                row.push(
                    rep.per_rater_dice
                        .get(j)
                        .map(|&v| fmt(v))
                        .unwrap_or_else(|| "-".to_string()),
                );
            }
            row.push(fmt(rep.dice_mean));
            row
        })
        .collect();
    (header, rows)
}

/// Fixed-width table, one row per evaluated (method, sampling number).
pub fn render_text_table(reports: &[EvalReport]) -> String {
    let (header, rows) = table_cells(reports);
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let render_row = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}", w = w))
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = render_row(&header);
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for row in &rows {
        out.push_str(&render_row(row));
        out.push('\n');
    }
    out
}

pub fn write_csv_table(path: &Path, reports: &[EvalReport]) -> Result<(), EvalError> {
    let (header, rows) = table_cells(reports);
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&header)?;
    for row in &rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

const ANNOTATION_TINT: Rgb<u8> = Rgb([64, 220, 96]);
const PREDICTION_TINT: Rgb<u8> = Rgb([235, 72, 72]);

fn gray_levels(image: &Array2<f64>) -> Array2<u8> {
    let lo = image.fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = image.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let span = (hi - lo).max(1e-12);
    image.mapv(|v| (255.0 * (v - lo) / span).round().clamp(0.0, 255.0) as u8)
}

fn tinted_cell(gray: &Array2<u8>, overlay: Option<(&Array2<bool>, Rgb<u8>)>) -> RgbImage {
    let (h, w) = gray.dim();
    let mut cell = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let g = gray[[y, x]];
            let px = match overlay {
                Some((mask, tint)) if mask[[y, x]] => {
                    let blend = |t: u8| ((0.6 * t as f64) + (0.4 * g as f64)).round() as u8;
                    Rgb([blend(tint[0]), blend(tint[1]), blend(tint[2])])
                }
                _ => Rgb([g, g, g]),
            };
            cell.put_pixel(x as u32, y as u32, px);
        }
    }
    cell
}

fn blit(target: &mut RgbImage, cell: &RgbImage, row: usize, col: usize) {
    let (w, h) = cell.dimensions();
    for y in 0..h {
        for x in 0..w {
            target.put_pixel(
                col as u32 * w + x,
                row as u32 * h + y,
                *cell.get_pixel(x, y),
            );
        }
    }
}

/// Two-row panel: input plus green-tinted annotations on top, input plus
/// red-tinted predictions below. At most `max_preds` predictions shown.
pub fn overlay_panel(
    image: &Array2<f64>,
    anns: &[Mask],
    preds: &[Array2<f64>],
    max_preds: usize,
) -> RgbImage {
    assert!(!anns.is_empty() && !preds.is_empty());
    let gray = gray_levels(image);
    let shown = preds.len().min(max_preds.max(1));
    let cols = 1 + anns.len().max(shown);
    let (h, w) = image.dim();
    let mut panel = RgbImage::new((cols * w) as u32, (2 * h) as u32);
    let plain = tinted_cell(&gray, None);
    blit(&mut panel, &plain, 0, 0);
    blit(&mut panel, &plain, 1, 0);
    for (j, ann) in anns.iter().enumerate() {
        blit(
            &mut panel,
            &tinted_cell(&gray, Some((ann, ANNOTATION_TINT))),
            0,
            1 + j,
        );
    }
    for (j, pred) in preds.iter().take(shown).enumerate() {
        let hard = crate::metrics::binarize(pred, crate::metrics::HARD_THRESHOLD);
        blit(
            &mut panel,
            &tinted_cell(&gray, Some((&hard, PREDICTION_TINT))),
            1,
            1 + j,
        );
    }
    panel
}

pub fn save_overlay(path: &Path, panel: &RgbImage) -> Result<(), EvalError> {
    panel
        .save(path)
        .map_err(|e| EvalError::Parse(format!("cannot write {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn sample_report(method: &str, n: usize, matched: bool) -> EvalReport {
        EvalReport {
            method: method.to_string(),
            sampling_number: n,
            sample_count: 5,
            seeds: BTreeMap::new(),
            config_hash: "abc".into(),
            ged: 0.3125,
            dice_soft: 0.8,
            dice_max: matched.then_some(0.9),
            dice_match: matched.then_some(0.85),
            per_rater_dice: vec![0.7, 0.75],
            dice_mean: 0.725,
        }
    }

    #[test]
    fn text_table_lists_methods_and_dashes_for_missing() {
        let reports = vec![sample_report("stage1", 50, true), sample_report("mv", 1, false)];
        let table = render_text_table(&reports);
        assert!(table.contains("stage1"));
        assert!(table.contains("mv"));
        assert!(table.contains("0.3125"));
        assert!(table.lines().nth(3).unwrap().contains('-'));
        assert!(table.lines().next().unwrap().contains("dice_a2"));
        assert_eq!(table.lines().count(), 4);
    }

    #[test]
    #[should_panic(expected = "dice_match exceeded dice_max")]
    fn inconsistent_rows_are_refused() {
        let mut bad = sample_report("stage1", 50, true);
        bad.dice_match = Some(0.95);
        render_text_table(&[bad]);
    }

    #[test]
    fn csv_table_round_trips_row_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("table.csv");
        let reports = vec![sample_report("stage1", 10, true), sample_report("rs", 1, false)];
        write_csv_table(&path, &reports).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(2).unwrap().starts_with("rs,1,"));
    }

    #[test]
    fn overlay_panel_tints_predictions_and_annotations() {
        let image = Array2::from_shape_fn((8, 8), |(y, x)| (y + x) as f64 / 14.0);
        let mut ann = Array2::from_elem((8, 8), false);
        ann[[2, 2]] = true;
        let mut pred = Array2::zeros((8, 8));
        pred[[5, 5]] = 0.9;
        let panel = overlay_panel(&image, &[ann], &[pred], 6);
        assert_eq!(panel.dimensions(), (16, 16));
        let ann_px = panel.get_pixel(8 + 2, 2);
        assert!(ann_px[1] > ann_px[0], "annotation cell should be greenish");
        let pred_px = panel.get_pixel(8 + 5, 8 + 5);
        assert!(pred_px[0] > pred_px[1], "prediction cell should be reddish");

        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.png");
        let p2 = dir.path().join("b.png");
        save_overlay(&p1, &panel).unwrap();
        save_overlay(&p2, &panel).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
