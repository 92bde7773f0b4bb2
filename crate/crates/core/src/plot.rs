//! Station-error maps as PNG images.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView3, Axis};

use crate::error::{Error, Result};
use crate::grid::{DomainSpec, GRID_VARIABLES, STATION_VARIABLES, U10, V10};
use crate::train::EvalReport;

/// Screen pixels per high-resolution cell.
pub const CELL_PIXELS: usize = 8;
const MARKER_HALF: i64 = 4;

/// Dark-to-light ramp (black, purple, orange, pale yellow).
const RAMP: [[f64; 3]; 4] = [[0.0, 0.0, 0.0], [120.0, 28.0, 109.0], [237.0, 105.0, 37.0], [252.0, 255.0, 164.0]];

/// Colour for `x` in `[0, 1]`; `0` is the darkest.
pub fn ramp_color(x: f64) -> [u8; 3] {
    let x = if x.is_finite() { x.clamp(0.0, 1.0) } else { 0.0 };
    let pos = x * (RAMP.len() - 1) as f64;
    let k = (pos.floor() as usize).min(RAMP.len() - 2);
    let f = pos - k as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (RAMP[k][c] + f * (RAMP[k + 1][c] - RAMP[k][c])).round() as u8;
    }
    out
}

/// Base-layer field for a station variable: wind speed is composed from the
/// wind components, the others are read directly.
pub fn base_layer(grid: ArrayView3<'_, f64>, variable: &str) -> Result<Array2<f64>> {
    if variable == "wind_speed" {
        let u = grid.index_axis(Axis(0), U10);
        let v = grid.index_axis(Axis(0), V10);
        return Ok(ndarray::Zip::from(&u).and(&v).map_collect(|a, b| a.hypot(*b)));
    }
    let k = GRID_VARIABLES
        .iter()
        .position(|g| *g == variable)
        .ok_or_else(|| Error::Config(format!("no grid variable for `{variable}`")))?;
    Ok(grid.index_axis(Axis(0), k).to_owned())
}

/// RGB raster: a grey-blue rendering of `base` with one square marker per
/// station coloured by its error relative to the largest error.
pub fn render(base: &Array2<f64>, domain: &DomainSpec, coords: &[(f64, f64)], errors: &[f64]) -> Result<(usize, usize, Vec<u8>)> {
    if coords.len() != errors.len() {
        return Err(Error::Shape(format!("{} stations but {} errors", coords.len(), errors.len())));
    }
    let (rows, cols) = base.dim();
    let (h, w) = (rows * CELL_PIXELS, cols * CELL_PIXELS);
    let (lo, hi) = base
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let s = (base[[y / CELL_PIXELS, x / CELL_PIXELS]] - lo) / span;
            let g = 60.0 + 120.0 * s;
            let px = &mut img[(y * w + x) * 3..(y * w + x) * 3 + 3];
            px.copy_from_slice(&[(g * 0.8) as u8, (g * 0.9) as u8, g as u8]);
        }
    }
    let max_err = errors.iter().copied().filter(|e| e.is_finite()).fold(0.0, f64::max);
    for (&(lon, lat), &e) in coords.iter().zip(errors) {
        domain.check_inside(lon, lat)?;
        let cx = ((lon - domain.lon_min) / domain.width() * w as f64).floor() as i64;
        let cy = ((domain.lat_max - lat) / domain.height() * h as f64).floor() as i64;
        let fill = if max_err > 0.0 { ramp_color(e / max_err) } else { ramp_color(0.0) };
        for dy in -MARKER_HALF..=MARKER_HALF {
            for dx in -MARKER_HALF..=MARKER_HALF {
                let (x, y) = (cx + dx, cy + dy);
                if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                    continue;
                }
                let edge = dx.abs() == MARKER_HALF || dy.abs() == MARKER_HALF;
                let c = if edge { [255, 255, 255] } else { fill };
                let k = (y as usize * w + x as usize) * 3;
                img[k..k + 3].copy_from_slice(&c);
            }
        }
    }
    Ok((w, h, img))
}

pub fn encode_png<W: Write>(out: W, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let mut enc = png::Encoder::new(out, width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Schema(e.to_string()))?;
    writer.write_image_data(rgb).map_err(|e| Error::Schema(e.to_string()))?;
    writer.finish().map_err(|e| Error::Schema(e.to_string()))?;
    Ok(())
}

/// Writes `<method>_<variable>.png` for every station variable.
pub fn plot_station_errors(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let grid = report
        .grid_prediction
        .as_ref()
        .ok_or_else(|| Error::Schema(format!("report for `{}` has no grid prediction", report.method)))?;
    if report.station_errors.dim() != (STATION_VARIABLES.len(), report.station_coords.len()) {
        return Err(Error::Schema("report lacks per-station errors".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for (v, name) in STATION_VARIABLES.iter().enumerate() {
        let base = base_layer(grid.view(), name)?;
        let errors: Vec<f64> = report.station_errors.row(v).to_vec();
        let (w, h, rgb) = render(&base, &report.domain, &report.station_coords, &errors)?;
        let path = dir.join(format!("{}_{name}.png", report.method));
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        encode_png(std::io::BufWriter::new(file), w, h, &rgb)?;
        paths.push(path);
    }
    Ok(paths)
}
