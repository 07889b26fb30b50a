//! Qualitative panels (input next to each method's probability map) and
//! sensitivity plots of the distillation hyperparameters.

use std::fmt::Write as _;
use std::path::PathBuf;

use agridistill_core::augment::{preprocess_eval, AugmentConfig};
use agridistill_core::raster::{Raster, Sample};
use candle_core::Device;

use crate::checkpoint;
use crate::config::{ExperimentConfig, SweepSection, SWEEP_BENCHMARK};
use crate::datamodel::{write_image, DatasetManifest};
use crate::error::{Error, Result};
use crate::evaluate::{aggregate, predict_probabilities, BenchmarkResult, ResultStore};
use crate::network::Model;

/// Input tile followed by one unthresholded foreground-probability tile per model.
pub fn panel_tiles(sample: &Sample, models: &[&Model], prep: &AugmentConfig) -> Result<Vec<Raster>> {
    let mut tiles = Vec::with_capacity(models.len() + 1);
    let (w, h) = models.first().map_or(prep.output_size, |m| m.config().input_size);
    tiles.push(sample.image.resize_bilinear(w, h));
    for model in models {
        let prep = AugmentConfig { output_size: model.config().input_size, ..prep.clone() };
        let prepared = preprocess_eval(sample, &prep)?;
        let probs = predict_probabilities(model, std::slice::from_ref(&prepared))?.remove(0);
        let (mw, mh) = prep.output_size;
        tiles.push(Raster::new(mw, mh, 1, probs.into_iter().map(|p| p as f32).collect())?);
    }
    Ok(tiles)
}

/// Places tiles side by side on a 3-channel canvas with a 2-pixel white gutter.
pub fn compose_panel(tiles: &[Raster]) -> Raster {
    const GUTTER: usize = 2;
    let height = tiles.iter().map(Raster::height).max().unwrap_or(0);
    let width = tiles.iter().map(Raster::width).sum::<usize>() + GUTTER * tiles.len().saturating_sub(1);
    let mut canvas = Raster::filled(width, height, 3, 1.0);
    let mut x0 = 0;
    for tile in tiles {
        for y in 0..tile.height() {
            for x in 0..tile.width() {
                let src = tile.pixel(x, y);
                let dst = canvas.pixel_mut(x0 + x, y);
                for c in 0..3 {
                    dst[c] = if src.len() == 1 { src[0] } else { src[c] };
                }
            }
        }
        x0 += tile.width() + GUTTER;
    }
    canvas
}

/// Line plot over an exactly specified set of x positions.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPlot {
    pub title: String,
    pub x_label: String,
    pub x_values: Vec<f64>,
    /// `(legend, y per x)`; `None` where no result exists.
    pub series: Vec<(String, Vec<Option<f64>>)>,
    pub log_x: bool,
}

const PLOT_W: f64 = 480.0;
const PLOT_H: f64 = 320.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn fmt_tick(v: f64) -> String {
    let s = format!("{v}");
    if s.len() > 7 {
        format!("{v:.1e}")
    } else {
        s
    }
}

impl SweepPlot {
    fn x_pos(&self, v: f64) -> f64 {
        let map = |v: f64| if self.log_x { v.log10() } else { v };
        let lo = self.x_values.iter().copied().map(map).fold(f64::INFINITY, f64::min);
        let hi = self.x_values.iter().copied().map(map).fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        MARGIN + (map(v) - lo) / span * (PLOT_W - 2.0 * MARGIN)
    }

    fn y_range(&self) -> (f64, f64) {
        let ys = self.series.iter().flat_map(|s| s.1.iter().flatten().copied());
        let (lo, hi) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), y| (l.min(y), h.max(y)));
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-9 {
            (lo - 0.05, hi + 0.05)
        } else {
            (lo - 0.05 * (hi - lo), hi + 0.05 * (hi - lo))
        }
    }

    /// The x tick labels, one per configured value.
    pub fn x_ticks(&self) -> Vec<String> {
        self.x_values.iter().map(|&v| fmt_tick(v)).collect()
    }

    pub fn to_svg(&self) -> String {
        let (y_lo, y_hi) = self.y_range();
        let y_pos = |y: f64| PLOT_H - MARGIN - (y - y_lo) / (y_hi - y_lo) * (PLOT_H - 2.0 * MARGIN);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{PLOT_W}" height="{PLOT_H}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, PLOT_W / 2.0, self.title);
        let (x0, x1, yb, yt) = (MARGIN, PLOT_W - MARGIN, PLOT_H - MARGIN, MARGIN);
        let _ = writeln!(s, r#"<path d="M{x0},{yt} L{x0},{yb} L{x1},{yb}" stroke="black" fill="none"/>"#);
        for (v, label) in self.x_values.iter().zip(self.x_ticks()) {
            let x = self.x_pos(*v);
            let _ = writeln!(
                s,
                r#"<line class="xtick" x1="{x:.2}" y1="{yb}" x2="{x:.2}" y2="{}" stroke="black"/><text x="{x:.2}" y="{}" text-anchor="middle">{label}</text>"#,
                yb + 4.0,
                yb + 16.0
            );
        }
        for i in 0..=4 {
            let y = y_lo + (y_hi - y_lo) * f64::from(i) / 4.0;
            let py = y_pos(y);
            let _ = writeln!(
                s,
                r#"<line x1="{}" y1="{py:.2}" x2="{x0}" y2="{py:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{:.1}</text>"#,
                x0 - 4.0,
                x0 - 6.0,
                py + 4.0,
                100.0 * y
            );
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, PLOT_W / 2.0, PLOT_H - 14.0, self.x_label);
        let _ = writeln!(
            s,
            r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">IoU (%)</text>"#,
            PLOT_H / 2.0,
            PLOT_H / 2.0
        );
        for (k, (legend, ys)) in self.series.iter().enumerate() {
            let color = COLORS[k % COLORS.len()];
            let points: Vec<String> = self
                .x_values
                .iter()
                .zip(ys)
                .filter_map(|(x, y)| y.map(|y| format!("{:.2},{:.2}", self.x_pos(*x), y_pos(y))))
                .collect();
            if !points.is_empty() {
                let _ = writeln!(s, r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="2"/>"#, points.join(" "));
            }
            for p in &points {
                let (px, py) = p.split_once(',').expect("formatted above");
                let _ = writeln!(s, r#"<circle cx="{px}" cy="{py}" r="3" fill="{color}"/>"#);
            }
            let ly = MARGIN + 14.0 * k as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/><text x="{}" y="{}">{legend}</text>"#,
                x1 - 90.0,
                ly - 9.0,
                x1 - 76.0,
                ly
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn log_scale(values: &[f64]) -> bool {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    lo > 0.0 && hi / lo >= 20.0
}

/// Mean IoU (over targets and seeds) of every sweep grid point, as two plots:
/// IoU against the weight (one line per temperature) and against the temperature.
pub fn sweep_plots(sweep: &SweepSection, results: &[BenchmarkResult]) -> Result<(SweepPlot, SweepPlot)> {
    let table = if results.is_empty() { None } else { Some(aggregate(results)?) };
    let value = |l: f64, t: f64| table.as_ref().and_then(|tab| tab.average.get(&SweepSection::label(l, t)).copied());
    let by_weight = SweepPlot {
        title: "Distillation weight".into(),
        x_label: "λ".into(),
        x_values: sweep.kd_weights.clone(),
        series: sweep
            .temperatures
            .iter()
            .map(|&t| (format!("τ = {t}"), sweep.kd_weights.iter().map(|&l| value(l, t)).collect()))
            .collect(),
        log_x: log_scale(&sweep.kd_weights),
    };
    let by_temperature = SweepPlot {
        title: "Temperature".into(),
        x_label: "τ".into(),
        x_values: sweep.temperatures.clone(),
        series: sweep
            .kd_weights
            .iter()
            .map(|&l| (format!("λ = {l}"), sweep.temperatures.iter().map(|&t| value(l, t)).collect()))
            .collect(),
        log_x: log_scale(&sweep.temperatures),
    };
    Ok((by_weight, by_temperature))
}

#[derive(Debug, Clone, Default)]
pub struct ReportSummary {
    pub panels: Vec<PathBuf>,
    pub missing_checkpoints: Vec<PathBuf>,
    pub plots: Vec<PathBuf>,
}

/// Writes panels for the configured benchmark and, when sweep results exist, the sweep plots.
pub fn generate_report(cfg: &ExperimentConfig, manifest: &DatasetManifest) -> Result<ReportSummary> {
    let layout = cfg.layout();
    let plan = cfg.plan()?;
    let benchmark = cfg.report.benchmark.clone().unwrap_or_else(|| cfg.benchmark.name.clone());
    let seed = cfg.report.seed.or_else(|| cfg.seeds.first().copied()).ok_or_else(|| Error::Config("no seeds".into()))?;
    let mut summary = ReportSummary::default();
    let panel_dir = layout.figures().join("panels").join(&benchmark);
    for task in plan.tasks(manifest)? {
        let target = task.target();
        let mut models = Vec::new();
        let mut labels = Vec::new();
        for method in &plan.methods {
            let path = layout.cell_checkpoint(&benchmark, &method.label, target.name(), seed);
            if !path.is_file() {
                log::warn!("missing checkpoint {}", path.display());
                summary.missing_checkpoints.push(path);
                continue;
            }
            models.push(checkpoint::load(&path, &Device::Cpu)?.0);
            labels.push(method.label.clone());
        }
        if models.is_empty() {
            continue;
        }
        let refs: Vec<&Model> = models.iter().collect();
        for i in 0..cfg.report.samples_per_target.min(target.len()) {
            let tiles = panel_tiles(&target.get(i)?, &refs, &cfg.train.augment)?;
            std::fs::create_dir_all(&panel_dir).map_err(|e| Error::io(&panel_dir, e))?;
            let path = panel_dir.join(format!("{}_{i:03}_{}.png", target.name(), labels.join("_vs_")));
            write_image(&path, &compose_panel(&tiles))?;
            summary.panels.push(path);
        }
    }
    if !cfg.sweep.is_empty() {
        let store = ResultStore::new(layout.results().join(SWEEP_BENCHMARK));
        let results: Vec<BenchmarkResult> = store.all()?.iter().filter_map(|r| r.result()).collect();
        if !results.is_empty() {
            let (a, b) = sweep_plots(&cfg.sweep, &results)?;
            let dir = layout.figures();
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (name, plot) in [("sweep_kd_weight.svg", a), ("sweep_temperature.svg", b)] {
                let path = dir.join(name);
                std::fs::write(&path, plot.to_svg()).map_err(|e| Error::io(&path, e))?;
                summary.plots.push(path);
            }
        }
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panel_layout() {
        let tiles = [Raster::filled(4, 4, 3, 0.2), Raster::filled(4, 4, 1, 0.7), Raster::filled(4, 4, 1, 0.1)];
        let p = compose_panel(&tiles);
        assert_eq!((p.width(), p.height()), (16, 4));
        assert_eq!(p.pixel(6, 0), &[0.7, 0.7, 0.7]);
        assert_eq!(p.pixel(4, 0), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn ticks_match_grid() {
        let sweep = SweepSection { kd_weights: vec![1e-3, 1e-2, 0.1, 1.0, 3.0], temperatures: vec![0.5, 1.0, 2.0] };
        let (a, b) = sweep_plots(&sweep, &[]).unwrap();
        assert_eq!(a.x_ticks(), ["0.001", "0.01", "0.1", "1", "3"]);
        assert!(a.log_x && !b.log_x);
        assert_eq!(a.to_svg().matches("class=\"xtick\"").count(), 5);
        assert_eq!(b.series.len(), 5);
    }
}
