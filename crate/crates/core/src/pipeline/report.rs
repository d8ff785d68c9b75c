use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::train::RunRecord;
use crate::error::{Error, Result};
use crate::eval::{mean_std, MetricsRecord};

pub const EMPTY_MASK_NOTE: &str =
    "# convention: dice, iou, precision and recall are 1 when both prediction and reference are empty";

/// Metrics of one image on one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub task: String,
    pub metrics: MetricsRecord,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `mean(std)` with four decimals.
pub fn format_mean_std(values: &[f64]) -> String {
    let (m, s) = mean_std(values);
    format!("{m:.4}({s:.4})")
}

/// Per-image metric table followed by a `mean(std)` row per task.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(
        "id,task,dice,iou,precision,recall,lesion_area,vessel_density,avascular_area\n",
    );
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{},{:.6},{}",
            r.id,
            r.task,
            m.dice,
            m.iou,
            m.precision,
            m.recall,
            m.lesion_area_px,
            m.vessel_density,
            m.avascular_area_px
        );
    }
    let mut tasks: Vec<&str> = rows.iter().map(|r| r.task.as_str()).collect();
    tasks.dedup();
    tasks.sort();
    tasks.dedup();
    for task in tasks {
        let sel: Vec<&MetricsRecord> = rows
            .iter()
            .filter(|r| r.task == task)
            .map(|r| &r.metrics)
            .collect();
        let col = |f: fn(&MetricsRecord) -> f64| {
            format_mean_std(&sel.iter().map(|m| f(m)).collect::<Vec<_>>())
        };
        let _ = writeln!(
            out,
            "mean(std),{task},{},{},{},{},{},{},{}",
            col(|m| m.dice),
            col(|m| m.iou),
            col(|m| m.precision),
            col(|m| m.recall),
            col(|m| m.lesion_area_px as f64),
            col(|m| m.vessel_density),
            col(|m| m.avascular_area_px as f64)
        );
    }
    out.push_str(EMPTY_MASK_NOTE);
    out.push('\n');
    out
}

/// Per-variant, per-task summary: each cell `mean(std)` over runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub task: String,
    pub dice: Vec<f64>,
    pub iou: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("variant,task,dice,iou,precision,recall\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.variant,
            r.task,
            format_mean_std(&r.dice),
            format_mean_std(&r.iou),
            format_mean_std(&r.precision),
            format_mean_std(&r.recall)
        );
    }
    out.push_str(EMPTY_MASK_NOTE);
    out.push('\n');
    out
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    write_text(path, &metrics_csv(rows))
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    write_text(path, &summary_csv(rows))
}

const PALETTE: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

struct Plot {
    width: f64,
    height: f64,
    margin: f64,
    x_range: (f64, f64),
    y_range: (f64, f64),
    body: String,
}

impl Plot {
    fn new(x_range: (f64, f64), y_range: (f64, f64)) -> Self {
        let pad = |(lo, hi): (f64, f64)| {
            if hi > lo {
                (lo, hi)
            } else {
                (lo - 0.5, hi + 0.5)
            }
        };
        Self {
            width: 640.0,
            height: 360.0,
            margin: 48.0,
            x_range: pad(x_range),
            y_range: pad(y_range),
            body: String::new(),
        }
    }

    fn px(&self, x: f64, y: f64) -> (f64, f64) {
        let (x0, x1) = self.x_range;
        let (y0, y1) = self.y_range;
        let w = self.width - 2.0 * self.margin;
        let h = self.height - 2.0 * self.margin;
        (
            self.margin + (x - x0) / (x1 - x0) * w,
            self.height - self.margin - (y - y0) / (y1 - y0) * h,
        )
    }

    fn polyline(&mut self, points: &[(f64, f64)], color: &str, label: &str) {
        let pts: Vec<String> = points
            .iter()
            .map(|(x, y)| {
                let (a, b) = self.px(*x, *y);
                format!("{a:.1},{b:.1}")
            })
            .collect();
        let _ = writeln!(
            self.body,
            r#"<polyline class="series" data-label="{label}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
    }

    fn vline(&mut self, x: f64, class: &str) {
        let (a, top) = self.px(x, self.y_range.1);
        let (_, bottom) = self.px(x, self.y_range.0);
        let _ = writeln!(
            self.body,
            r##"<line class="{class}" x1="{a:.1}" y1="{top:.1}" x2="{a:.1}" y2="{bottom:.1}" stroke="#999" stroke-dasharray="4 3"/>"##
        );
    }

    fn finish(self, title: &str, labels: &[(&str, &str)]) -> String {
        let (x0, y0) = self.px(self.x_range.0, self.y_range.0);
        let (x1, y1) = self.px(self.x_range.1, self.y_range.1);
        let mut s = format!(
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="11">"#,
            self.width, self.height
        );
        s.push('\n');
        let _ = writeln!(
            s,
            r#"<text x="{}" y="20" font-size="14">{title}</text>"#,
            self.margin
        );
        let _ = writeln!(
            s,
            r#"<rect x="{x0:.1}" y="{y1:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="black"/>"#,
            x1 - x0,
            y0 - y1
        );
        let _ = writeln!(
            s,
            r#"<text x="{x0:.1}" y="{:.1}">{}</text>"#,
            y0 + 14.0,
            self.x_range.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            x1,
            y0 + 14.0,
            self.x_range.1
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{y0:.1}" text-anchor="end">{:.3}</text>"#,
            x0 - 4.0,
            self.y_range.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.3}</text>"#,
            x0 - 4.0,
            y1 + 8.0,
            self.y_range.1
        );
        for (i, (label, color)) in labels.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" fill="{color}">{label}</text>"#,
                x1 - 90.0,
                y1 + 14.0 * (i + 1) as f64
            );
        }
        s.push_str(&self.body);
        s.push_str("</svg>\n");
        s
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        })
}

/// Per-epoch total and task losses.
pub fn loss_curve_svg(record: &RunRecord) -> String {
    let epochs = &record.epochs;
    let last = epochs.last().map_or(1.0, |e| e.epoch as f64);
    let y = range(
        epochs
            .iter()
            .flat_map(|e| e.losses.iter().copied().chain([e.total])),
    );
    let mut plot = Plot::new((1.0, last), (y.0.min(0.0), y.1.max(0.0)));
    let names = ["total", "region", "boundary", "shape", "vessel"];
    for (i, name) in names.iter().enumerate() {
        let pts: Vec<(f64, f64)> = epochs
            .iter()
            .map(|e| {
                (
                    e.epoch as f64,
                    if i == 0 { e.total } else { e.losses[i - 1] },
                )
            })
            .collect();
        plot.polyline(&pts, PALETTE[i], name);
    }
    let labels: Vec<(&str, &str)> = names.iter().copied().zip(PALETTE).collect();
    plot.finish("training loss", &labels)
}

/// Task weights as step functions of the epoch, with a dashed marker at
/// every update.
pub fn lambda_curve_svg(record: &RunRecord) -> String {
    let last = record.epochs.last().map_or(1.0, |e| e.epoch as f64);
    let mut plot = Plot::new((0.0, last.max(1.0)), (0.0, 1.0));
    let names = ["region", "boundary", "shape"];
    for (i, name) in names.iter().enumerate() {
        let mut pts = Vec::new();
        let mut current = record.initial_weights.as_array()[i];
        pts.push((0.0, current));
        for u in &record.weight_updates {
            pts.push((u.epoch as f64, current));
            current = u.weights.as_array()[i];
            pts.push((u.epoch as f64, current));
        }
        pts.push((last, current));
        plot.polyline(&pts, PALETTE[i + 1], name);
    }
    for u in &record.weight_updates {
        plot.vline(u.epoch as f64, "lambda-update");
    }
    let labels: Vec<(&str, &str)> = names
        .iter()
        .copied()
        .zip(PALETTE[1..].iter().copied())
        .collect();
    plot.finish("task weights", &labels)
}

/// Validation Dice per epoch.
pub fn val_curve_svg(record: &RunRecord) -> String {
    let last = record.epochs.last().map_or(1.0, |e| e.epoch as f64);
    let mut plot = Plot::new((1.0, last), (0.0, 1.0));
    let region: Vec<(f64, f64)> = record
        .epochs
        .iter()
        .map(|e| (e.epoch as f64, e.val_region_dice))
        .collect();
    let vessel: Vec<(f64, f64)> = record
        .epochs
        .iter()
        .map(|e| (e.epoch as f64, e.val_vessel_dice))
        .collect();
    plot.polyline(&region, PALETTE[1], "region");
    plot.polyline(&vessel, PALETTE[4], "vessel");
    plot.finish(
        "validation dice",
        &[("region", PALETTE[1]), ("vessel", PALETTE[4])],
    )
}

/// Writes the loss, weight and validation curves of a run into `dir`.
pub fn write_curves(dir: &Path, record: &RunRecord) -> Result<()> {
    write_text(&dir.join("loss_curve.svg"), &loss_curve_svg(record))?;
    write_text(&dir.join("lambda_curve.svg"), &lambda_curve_svg(record))?;
    write_text(&dir.join("val_dice.svg"), &val_curve_svg(record))
}

/// Black-red-yellow-white ramp on `t` in `[0, 1]`.
fn heat(t: f32) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0);
    let r = (t * 3.0).min(1.0);
    let g = (t * 3.0 - 1.0).clamp(0.0, 1.0);
    let b = (t * 3.0 - 2.0).clamp(0.0, 1.0);
    Rgb([(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8])
}

/// Heatmap of `map` scaled by its maximum (all black when the map is 0).
pub fn heatmap(map: &Array2<f32>) -> RgbImage {
    let top = map.iter().cloned().fold(0.0f32, f32::max);
    let (h, w) = map.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = map[(y as usize, x as usize)];
        heat(if top > 0.0 { v / top } else { 0.0 })
    })
}

pub fn write_heatmap(path: &Path, map: &Array2<f32>) -> Result<()> {
    heatmap(map).save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Tiles grayscale or heatmap panels left to right with a 2 px gap.
pub fn panel(tiles: &[RgbImage]) -> RgbImage {
    let h = tiles.iter().map(|t| t.height()).max().unwrap_or(0);
    let w: u32 = tiles
        .iter()
        .map(|t| t.width() + 2)
        .sum::<u32>()
        .saturating_sub(2);
    let mut out = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let mut x0 = 0;
    for t in tiles {
        for (x, y, p) in t.enumerate_pixels() {
            out.put_pixel(x0 + x, y, *p);
        }
        x0 += t.width() + 2;
    }
    out
}

pub fn gray_tile(map: &Array2<f32>) -> RgbImage {
    let (h, w) = map.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = (map[(y as usize, x as usize)].clamp(0.0, 1.0) * 255.0) as u8;
        Rgb([v, v, v])
    })
}

pub fn mask_tile(mask: &Array2<u8>) -> RgbImage {
    gray_tile(&mask.mapv(|v| if v != 0 { 1.0 } else { 0.0 }))
}

pub fn write_panel(path: &Path, tiles: &[RgbImage]) -> Result<()> {
    panel(tiles).save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::train::{EpochRecord, WeightUpdate};
    use crate::uncertainty::LossWeights;

    fn record(epochs: usize, period: usize) -> RunRecord {
        let mut r = RunRecord::default();
        for e in 1..=epochs {
            r.epochs.push(EpochRecord {
                epoch: e,
                losses: [1.0, 0.5, 0.25, 0.8],
                total: 2.0,
                weights: LossWeights::UNIFORM,
                val_region_dice: 0.5,
                val_vessel_dice: 0.4,
                seconds: 0.1,
            });
            if e % period == 0 {
                r.weight_updates.push(WeightUpdate {
                    epoch: e,
                    variances: [0.2, 0.1, 0.1],
                    weights: LossWeights {
                        region: 0.5,
                        boundary: 0.25,
                        shape: 0.25,
                    },
                });
            }
        }
        r
    }

    #[test]
    fn lambda_plot_marks_every_update() {
        let svg = lambda_curve_svg(&record(300, 50));
        assert_eq!(svg.matches("class=\"lambda-update\"").count(), 6);
        assert_eq!(svg.matches("class=\"series\"").count(), 3);
    }

    #[test]
    fn metric_table_has_summary_and_footer() {
        let m = MetricsRecord {
            dice: 0.5,
            iou: 1.0 / 3.0,
            precision: 0.5,
            recall: 0.5,
            ..MetricsRecord::default()
        };
        let rows: Vec<MetricRow> = ["a", "b"]
            .iter()
            .flat_map(|id| {
                ["region", "vessel"].map(|task| MetricRow {
                    id: id.to_string(),
                    task: task.into(),
                    metrics: m,
                })
            })
            .collect();
        let csv = metrics_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 4 + 2 + 1);
        assert!(lines[5].starts_with("mean(std),region,0.5000(0.0000)"));
        assert!(lines.last().unwrap().starts_with("# convention"));
    }
}
