//! Plot emission: SVG line charts for training curves and PNG heatmaps for
//! attention maps. SVG is built directly so the output is deterministic and
//! dependency-free.

use ndarray::Array2;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("nothing to plot: {0}")]
    Empty(String),
    #[error("image encode error: {0}")]
    Image(String),
}

/// What a plot rendered; tests assert on this rather than parsing pixels.
#[derive(Clone, Debug)]
pub struct PlotMeta {
    pub path: PathBuf,
    pub x_max: f64,
    pub series: usize,
}

/// A labeled group of runs (one per seed) of `(x, y)` points.
pub struct CurveGroup {
    pub label: String,
    pub runs: Vec<Vec<(f64, f64)>>,
}

const W: f64 = 860.0;
const H: f64 = 520.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

struct Frame2D {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame2D {
    fn px(&self, x: f64) -> f64 {
        MARGIN_L + (x - self.x_min) / (self.x_max - self.x_min).max(1e-12) * (W - MARGIN_L - MARGIN_R)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN_B - (y - self.y_min) / (self.y_max - self.y_min).max(1e-12) * (H - MARGIN_T - MARGIN_B)
    }
}

fn svg_open(out: &mut String, title: &str, xlabel: &str, ylabel: &str, frame: &Frame2D) {
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" font-size=\"15\" text-anchor=\"middle\" font-family=\"sans-serif\">{title}</text>\n",
        W / 2.0
    );
    // axes
    let _ = write!(
        out,
        "<line x1=\"{l}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{b}\" stroke=\"black\"/>\n",
        l = MARGIN_L,
        r = W - MARGIN_R,
        t = MARGIN_T,
        b = H - MARGIN_B
    );
    // ticks
    for i in 0..=4 {
        let fx = frame.x_min + (frame.x_max - frame.x_min) * i as f64 / 4.0;
        let fy = frame.y_min + (frame.y_max - frame.y_min) * i as f64 / 4.0;
        let _ = write!(
            out,
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\" font-family=\"sans-serif\">{}</text>\n\
             <text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"end\" font-family=\"sans-serif\">{}</text>\n",
            frame.px(fx),
            H - MARGIN_B + 18.0,
            trim_num(fx),
            MARGIN_L - 6.0,
            frame.py(fy) + 4.0,
            trim_num(fy)
        );
    }
    let _ = write!(
        out,
        "<text x=\"{}\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\" font-family=\"sans-serif\">{xlabel}</text>\n\
         <text x=\"16\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\" font-family=\"sans-serif\" transform=\"rotate(-90 16 {y})\">{ylabel}</text>\n",
        (MARGIN_L + W - MARGIN_R) / 2.0,
        H - 12.0,
        (H - MARGIN_B + MARGIN_T) / 2.0,
        y = (H - MARGIN_B + MARGIN_T) / 2.0
    );
}

fn trim_num(v: f64) -> String {
    if v.abs() >= 1000.0 {
        format!("{:.0}", v)
    } else {
        let s = format!("{:.3}", v);
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn polyline(out: &mut String, pts: &[(f64, f64)], frame: &Frame2D, color: &str, width: f64) {
    if pts.is_empty() {
        return;
    }
    let coords: Vec<String> = pts
        .iter()
        .map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
        .collect();
    let _ = write!(
        out,
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"{width}\" points=\"{}\"/>\n",
        coords.join(" ")
    );
}

fn band(out: &mut String, xs: &[f64], lo: &[f64], hi: &[f64], frame: &Frame2D, color: &str) {
    if xs.is_empty() {
        return;
    }
    let mut d = String::new();
    for (i, &x) in xs.iter().enumerate() {
        let cmd = if i == 0 { 'M' } else { 'L' };
        let _ = write!(d, "{cmd}{:.2},{:.2} ", frame.px(x), frame.py(hi[i]));
    }
    for (i, &x) in xs.iter().enumerate().rev() {
        let _ = write!(d, "L{:.2},{:.2} ", frame.px(x), frame.py(lo[i]));
    }
    d.push('Z');
    let _ = write!(
        out,
        "<path d=\"{d}\" fill=\"{color}\" fill-opacity=\"0.18\" stroke=\"none\"/>\n"
    );
}

fn legend(out: &mut String, labels: &[(String, &str)]) {
    for (i, (label, color)) in labels.iter().enumerate() {
        let y = MARGIN_T + 16.0 + i as f64 * 18.0;
        let _ = write!(
            out,
            "<rect x=\"{x}\" y=\"{}\" width=\"12\" height=\"12\" fill=\"{color}\"/>\n\
             <text x=\"{}\" y=\"{}\" font-size=\"12\" font-family=\"sans-serif\">{label}</text>\n",
            y - 10.0,
            W - MARGIN_R + 24.0,
            y,
            x = W - MARGIN_R + 8.0
        );
    }
}

/// Reward-versus-frames curves: one mean line per group plus a min/max band
/// across that group's runs. `x_max` pins the axis to the configured frame
/// budget.
pub fn plot_reward_curves(
    groups: &[CurveGroup],
    x_max: f64,
    path: &Path,
) -> Result<PlotMeta, PlotError> {
    if groups.is_empty() || groups.iter().all(|g| g.runs.iter().all(|r| r.is_empty())) {
        return Err(PlotError::Empty("no reward curves".into()));
    }
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for g in groups {
        for run in &g.runs {
            for &(_, y) in run {
                y_min = y_min.min(y);
                y_max = y_max.max(y);
            }
        }
    }
    if !y_min.is_finite() {
        return Err(PlotError::Empty("no finite points".into()));
    }
    let pad = (y_max - y_min).max(1e-9) * 0.05;
    let frame = Frame2D {
        x_min: 0.0,
        x_max,
        y_min: y_min - pad,
        y_max: y_max + pad,
    };
    let mut svg = String::new();
    svg_open(&mut svg, "episode reward vs frames", "frames", "episode reward", &frame);
    let mut labels = Vec::new();
    for (gi, g) in groups.iter().enumerate() {
        let color = PALETTE[gi % PALETTE.len()];
        labels.push((g.label.clone(), color));
        // Align runs on the x grid of the longest run.
        let grid: Vec<f64> = g
            .runs
            .iter()
            .max_by_key(|r| r.len())
            .map(|r| r.iter().map(|p| p.0).collect())
            .unwrap_or_default();
        if grid.is_empty() {
            continue;
        }
        let sampled: Vec<Vec<f64>> = g
            .runs
            .iter()
            .filter(|r| !r.is_empty())
            .map(|r| grid.iter().map(|&x| interp(r, x)).collect())
            .collect();
        let mean: Vec<f64> = (0..grid.len())
            .map(|i| sampled.iter().map(|s| s[i]).sum::<f64>() / sampled.len() as f64)
            .collect();
        if sampled.len() > 1 {
            let lo: Vec<f64> = (0..grid.len())
                .map(|i| sampled.iter().map(|s| s[i]).fold(f64::INFINITY, f64::min))
                .collect();
            let hi: Vec<f64> = (0..grid.len())
                .map(|i| sampled.iter().map(|s| s[i]).fold(f64::NEG_INFINITY, f64::max))
                .collect();
            band(&mut svg, &grid, &lo, &hi, &frame, color);
        }
        let pts: Vec<(f64, f64)> = grid.iter().cloned().zip(mean).collect();
        polyline(&mut svg, &pts, &frame, color, 2.0);
    }
    legend(&mut svg, &labels);
    svg.push_str("</svg>\n");
    write_file(path, &svg)?;
    Ok(PlotMeta {
        path: path.to_path_buf(),
        x_max,
        series: groups.len(),
    })
}

fn interp(run: &[(f64, f64)], x: f64) -> f64 {
    match run.iter().position(|&(rx, _)| rx >= x) {
        Some(0) => run[0].1,
        Some(i) => {
            let (x0, y0) = run[i - 1];
            let (x1, y1) = run[i];
            y0 + (y1 - y0) * (x - x0) / (x1 - x0).max(1e-12)
        }
        None => run.last().map(|p| p.1).unwrap_or(0.0),
    }
}

/// One line per named series over a shared x axis.
pub fn plot_series(
    title: &str,
    xlabel: &str,
    series: &[(String, Vec<(f64, f64)>)],
    path: &Path,
) -> Result<PlotMeta, PlotError> {
    if series.is_empty() || series.iter().all(|(_, p)| p.is_empty()) {
        return Err(PlotError::Empty(format!("no data for {title}")));
    }
    let mut x_max = f64::NEG_INFINITY;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for (_, pts) in series {
        for &(x, y) in pts {
            x_max = x_max.max(x);
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
    }
    let pad = (y_max - y_min).max(1e-9) * 0.05;
    let frame = Frame2D {
        x_min: 0.0,
        x_max: x_max.max(1.0),
        y_min: y_min - pad,
        y_max: y_max + pad,
    };
    let mut svg = String::new();
    svg_open(&mut svg, title, xlabel, "", &frame);
    let mut labels = Vec::new();
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        labels.push((label.clone(), color));
        polyline(&mut svg, pts, &frame, color, 1.6);
    }
    legend(&mut svg, &labels);
    svg.push_str("</svg>\n");
    write_file(path, &svg)?;
    Ok(PlotMeta {
        path: path.to_path_buf(),
        x_max: frame.x_max,
        series: series.len(),
    })
}

fn write_file(path: &Path, content: &str) -> Result<(), PlotError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, content)?;
    Ok(())
}

/// Save a heatmap as PNG, upscaled by `scale`, with a blue-to-yellow ramp.
pub fn save_heatmap_png(map: &Array2<f64>, scale: usize, path: &Path) -> Result<(), PlotError> {
    let (h, w) = map.dim();
    if h == 0 || w == 0 {
        return Err(PlotError::Empty("empty heatmap".into()));
    }
    let lo = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let mut img = image::RgbImage::new((w * scale) as u32, (h * scale) as u32);
    for (y, x, px) in img.enumerate_pixels_mut().map(|(x, y, p)| (y, x, p)) {
        let v = (map[[y as usize / scale, x as usize / scale]] - lo) / span;
        *px = image::Rgb(ramp(v));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save(path).map_err(|e| PlotError::Image(e.to_string()))?;
    Ok(())
}

fn ramp(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    [
        (36.0 + 219.0 * v) as u8,
        (27.0 + 201.0 * v) as u8,
        (96.0 + (1.0 - v) * 110.0) as u8,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_run_no_band_one_series() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.svg");
        let groups = [CurveGroup {
            label: "full".into(),
            runs: vec![vec![(0.0, 1.0), (100.0, 2.0), (200.0, 1.5)]],
        }];
        let meta = plot_reward_curves(&groups, 200.0, &path).unwrap();
        assert_eq!(meta.series, 1);
        assert_eq!(meta.x_max, 200.0);
        let svg = std::fs::read_to_string(&path).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert!(!svg.contains("<path d=")); // no band for one run
    }

    #[test]
    fn multi_seed_adds_band_and_x_axis_tracks_budget() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("band.svg");
        let groups = [CurveGroup {
            label: "full".into(),
            runs: vec![
                vec![(0.0, 0.0), (50.0, 2.0)],
                vec![(0.0, 1.0), (50.0, 3.0)],
                vec![(0.0, -1.0), (50.0, 4.0)],
            ],
        }];
        let meta = plot_reward_curves(&groups, 30_000.0, &path).unwrap();
        assert_eq!(meta.x_max, 30_000.0);
        let svg = std::fs::read_to_string(&path).unwrap();
        assert!(svg.contains("fill-opacity=\"0.18\"")); // min/max band present
        assert!(svg.contains("30000")); // axis label shows the budget
    }

    #[test]
    fn empty_logs_are_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            plot_reward_curves(&[], 1.0, &dir.path().join("x.svg")),
            Err(PlotError::Empty(_))
        ));
        assert!(matches!(
            plot_series("t", "x", &[], &dir.path().join("y.svg")),
            Err(PlotError::Empty(_))
        ));
    }

    #[test]
    fn heatmap_png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.png");
        let map = Array2::from_shape_fn((4, 4), |(r, c)| (r * 4 + c) as f64);
        save_heatmap_png(&map, 8, &path).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (32, 32));
    }
}
