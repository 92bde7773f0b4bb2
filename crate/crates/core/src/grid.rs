//! Grid, coordinate and station data model, plus the resolution-change
//! primitives (block averaging, bilinear interpolation, sub-grid sampling)
//! shared by the generator, the models and the losses.
//!
//! Grids are stored north-up: row 0 is the northernmost row of cells and
//! column 0 the westernmost. Every cell is an axis-aligned lon/lat rectangle
//! whose value is anchored at its center.

use ndarray::{Array2, Array3, ArrayView3, ArrayViewMut2, ArrayViewMut3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gridded variables in canonical order.
pub const GRID_VARIABLES: [&str; 5] = ["u10", "v10", "t2m", "sp", "tp1h"];
/// Variables observed at stations. Wind is only observed as speed.
pub const STATION_VARIABLES: [&str; 4] = ["wind_speed", "sp", "t2m", "tp1h"];

pub const U10: usize = 0;
pub const V10: usize = 1;
pub const T2M: usize = 2;
pub const SP: usize = 3;
pub const TP1H: usize = 4;

/// Index of each station variable in the grid roster, `None` for wind speed
/// which is composed from the two wind components.
pub const STATION_SOURCE: [Option<usize>; 4] = [None, Some(SP), Some(T2M), Some(TP1H)];

/// Composes `sqrt(u^2 + v^2)`.
#[inline]
pub fn wind_speed(u: f64, v: f64) -> f64 {
    (u * u + v * v).sqrt()
}

/// Maps one decoded grid-roster vector onto the station roster.
pub fn to_station_roster(values: &[f64]) -> [f64; 4] {
    [
        wind_speed(values[U10], values[V10]),
        values[SP],
        values[T2M],
        values[TP1H],
    ]
}

/// Rectangular lon/lat study region with two nested cell sizes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub lon_min: f64,
    pub lon_max: f64,
    pub lat_min: f64,
    pub lat_max: f64,
    /// Low-resolution cell size in degrees.
    pub lr_cell: f64,
    /// High-resolution cell size in degrees.
    pub hr_cell: f64,
}

impl Default for DomainSpec {
    /// 16 x 16 degree square inside the East Asia study region, 1 degree
    /// input cells and 0.25 degree labels.
    fn default() -> Self {
        DomainSpec {
            lon_min: 104.0,
            lon_max: 120.0,
            lat_min: 24.0,
            lat_max: 40.0,
            lr_cell: 1.0,
            hr_cell: 0.25,
        }
    }
}

fn integer_ratio(num: f64, den: f64) -> Option<usize> {
    let r = num / den;
    let n = r.round();
    if n >= 1.0 && (r - n).abs() <= 1e-9 * n.max(1.0) {
        Some(n as usize)
    } else {
        None
    }
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.lon_min,
            self.lon_max,
            self.lat_min,
            self.lat_max,
            self.lr_cell,
            self.hr_cell,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Domain("non-finite bound or cell size".into()));
        }
        if self.lon_min >= self.lon_max || self.lat_min >= self.lat_max {
            return Err(Error::Domain(format!(
                "empty extent lon [{}, {}] lat [{}, {}]",
                self.lon_min, self.lon_max, self.lat_min, self.lat_max
            )));
        }
        if self.lr_cell <= 0.0 || self.hr_cell <= 0.0 {
            return Err(Error::Domain("cell sizes must be positive".into()));
        }
        for (name, cell) in [("low-res", self.lr_cell), ("high-res", self.hr_cell)] {
            if integer_ratio(self.lon_max - self.lon_min, cell).is_none()
                || integer_ratio(self.lat_max - self.lat_min, cell).is_none()
            {
                return Err(Error::Domain(format!(
                    "extent is not an integer multiple of the {name} cell size {cell}"
                )));
            }
        }
        match integer_ratio(self.lr_cell, self.hr_cell) {
            Some(k) if k >= 2 => Ok(()),
            _ => Err(Error::Domain(format!(
                "high-res cell {} must divide low-res cell {} by an integer factor >= 2",
                self.hr_cell, self.lr_cell
            ))),
        }
    }

    pub fn width(&self) -> f64 {
        self.lon_max - self.lon_min
    }

    pub fn height(&self) -> f64 {
        self.lat_max - self.lat_min
    }

    /// Nesting factor between the two grids.
    pub fn factor(&self) -> usize {
        integer_ratio(self.lr_cell, self.hr_cell).unwrap_or(1)
    }

    pub fn geometry(&self, cell: f64) -> GridGeometry {
        GridGeometry {
            lon_min: self.lon_min,
            lat_max: self.lat_max,
            cell,
            rows: integer_ratio(self.height(), cell).unwrap_or(0),
            cols: integer_ratio(self.width(), cell).unwrap_or(0),
        }
    }

    pub fn lr_geometry(&self) -> GridGeometry {
        self.geometry(self.lr_cell)
    }

    pub fn hr_geometry(&self) -> GridGeometry {
        self.geometry(self.hr_cell)
    }

    pub fn contains(&self, lon: f64, lat: f64) -> bool {
        lon >= self.lon_min && lon <= self.lon_max && lat >= self.lat_min && lat <= self.lat_max
    }

    pub fn contains_strict(&self, lon: f64, lat: f64) -> bool {
        lon > self.lon_min && lon < self.lon_max && lat > self.lat_min && lat < self.lat_max
    }

    pub fn check_inside(&self, lon: f64, lat: f64) -> Result<()> {
        if self.contains(lon, lat) {
            Ok(())
        } else {
            Err(Error::OutOfDomain { lon, lat })
        }
    }

    /// Maps degrees onto `[-1, 1]` per axis (north and east positive).
    pub fn to_unit(&self, lon: f64, lat: f64) -> (f64, f64) {
        (
            2.0 * (lon - self.lon_min) / self.width() - 1.0,
            2.0 * (lat - self.lat_min) / self.height() - 1.0,
        )
    }
}

/// Axis-aligned lon/lat rectangle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub lon0: f64,
    pub lon1: f64,
    pub lat0: f64,
    pub lat1: f64,
}

impl Rect {
    pub fn contains(&self, lon: f64, lat: f64) -> bool {
        lon >= self.lon0 && lon <= self.lon1 && lat >= self.lat0 && lat <= self.lat1
    }
}

/// Cell layout of one regular grid over a domain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridGeometry {
    pub lon_min: f64,
    pub lat_max: f64,
    pub cell: f64,
    pub rows: usize,
    pub cols: usize,
}

impl GridGeometry {
    pub fn center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.lon_min + (j as f64 + 0.5) * self.cell,
            self.lat_max - (i as f64 + 0.5) * self.cell,
        )
    }

    pub fn rect(&self, i: usize, j: usize) -> Rect {
        Rect {
            lon0: self.lon_min + j as f64 * self.cell,
            lon1: self.lon_min + (j + 1) as f64 * self.cell,
            lat0: self.lat_max - (i + 1) as f64 * self.cell,
            lat1: self.lat_max - i as f64 * self.cell,
        }
    }

    /// Pixel owning a coordinate: half-open `[lo, hi)` intervals measured
    /// from the west and north edges, the last row/column closed.
    pub fn locate(&self, lon: f64, lat: f64) -> (usize, usize) {
        let fj = ((lon - self.lon_min) / self.cell).floor();
        let fi = ((self.lat_max - lat) / self.cell).floor();
        let j = (fj.max(0.0) as usize).min(self.cols - 1);
        let i = (fi.max(0.0) as usize).min(self.rows - 1);
        (i, j)
    }

    /// Continuous index space anchored at cell centers, clamped to the
    /// outermost centers.
    fn bilinear_stencil(&self, lon: f64, lat: f64) -> (usize, usize, f64, usize, usize, f64) {
        let fx = ((lon - self.lon_min) / self.cell - 0.5).clamp(0.0, (self.cols - 1) as f64);
        let fy = ((self.lat_max - lat) / self.cell - 0.5).clamp(0.0, (self.rows - 1) as f64);
        let (j0, j1, tx) = stencil_axis(fx, self.cols);
        let (i0, i1, ty) = stencil_axis(fy, self.rows);
        (i0, i1, ty, j0, j1, tx)
    }

    /// Bilinear stencil as `(flat index, weight)` pairs over row-major cells.
    pub fn interpolation_weights(&self, lon: f64, lat: f64) -> [(usize, f64); 4] {
        let (i0, i1, ty, j0, j1, tx) = self.bilinear_stencil(lon, lat);
        [
            (i0 * self.cols + j0, (1.0 - ty) * (1.0 - tx)),
            (i0 * self.cols + j1, (1.0 - ty) * tx),
            (i1 * self.cols + j0, ty * (1.0 - tx)),
            (i1 * self.cols + j1, ty * tx),
        ]
    }
}

fn stencil_axis(f: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let lo = (f.floor() as usize).min(n - 2);
    (lo, lo + 1, f - lo as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resolution {
    Low,
    High,
}

/// Per-variable normalization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariableSpec {
    pub short_name: String,
    pub unit: String,
    pub mean: f64,
    pub std: f64,
}

impl VariableSpec {
    pub fn new(short_name: &str, unit: &str, mean: f64, std: f64) -> Self {
        VariableSpec {
            short_name: short_name.to_string(),
            unit: unit.to_string(),
            mean,
            std,
        }
    }
}

/// Lookup of normalization specs by variable name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub specs: Vec<VariableSpec>,
}

impl Normalizer {
    pub fn new(specs: Vec<VariableSpec>) -> Result<Self> {
        for s in &specs {
            if !(s.std > 0.0) || !s.std.is_finite() || !s.mean.is_finite() {
                return Err(Error::Config(format!(
                    "variable `{}` needs finite mean and std > 0",
                    s.short_name
                )));
            }
        }
        Ok(Normalizer { specs })
    }

    pub fn get(&self, name: &str) -> Result<&VariableSpec> {
        self.specs
            .iter()
            .find(|s| s.short_name == name)
            .ok_or_else(|| Error::MissingSpec(name.to_string()))
    }

    fn resolve(&self, names: &[&str], leading: usize) -> Result<Vec<(f64, f64)>> {
        if names.len() != leading {
            return Err(Error::Shape(format!(
                "{} variable names for an array with {leading} variables",
                names.len()
            )));
        }
        names
            .iter()
            .map(|n| self.get(n).map(|s| (s.mean, s.std)))
            .collect()
    }

    /// `(x - mean) / std` along axis 0, in place.
    pub fn normalize<D: ndarray::RemoveAxis>(
        &self,
        values: &mut ndarray::ArrayViewMut<'_, f64, D>,
        names: &[&str],
    ) -> Result<()> {
        let stats = self.resolve(names, values.len_of(Axis(0)))?;
        for (mut lane, (mean, std)) in values.axis_iter_mut(Axis(0)).zip(stats) {
            lane.mapv_inplace(|x| (x - mean) / std);
        }
        Ok(())
    }

    pub fn denormalize<D: ndarray::RemoveAxis>(
        &self,
        values: &mut ndarray::ArrayViewMut<'_, f64, D>,
        names: &[&str],
    ) -> Result<()> {
        let stats = self.resolve(names, values.len_of(Axis(0)))?;
        for (mut lane, (mean, std)) in values.axis_iter_mut(Axis(0)).zip(stats) {
            lane.mapv_inplace(|x| x * std + mean);
        }
        Ok(())
    }
}

/// Multi-variable gridded field `(V, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldGrid {
    pub values: Array3<f64>,
    pub domain: DomainSpec,
    pub resolution: Resolution,
}

impl FieldGrid {
    pub fn new(values: Array3<f64>, domain: DomainSpec, resolution: Resolution) -> Result<Self> {
        let g = FieldGrid {
            values,
            domain,
            resolution,
        };
        let geom = g.geometry();
        let (_, h, w) = g.values.dim();
        if (h, w) != (geom.rows, geom.cols) {
            return Err(Error::Shape(format!(
                "{:?} grid expects {}x{} cells, got {h}x{w}",
                resolution, geom.rows, geom.cols
            )));
        }
        Ok(g)
    }

    pub fn geometry(&self) -> GridGeometry {
        match self.resolution {
            Resolution::Low => self.domain.lr_geometry(),
            Resolution::High => self.domain.hr_geometry(),
        }
    }

    pub fn n_vars(&self) -> usize {
        self.values.len_of(Axis(0))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> f64 {
        self.values.mean().unwrap_or(0.0)
    }

    pub fn area_downsample(&self, factor: usize) -> Result<FieldGrid> {
        if self.resolution != Resolution::High || factor != self.domain.factor() {
            return Err(Error::Shape(format!(
                "downsampling a {:?} grid by {factor} does not land on the low-res grid (factor {})",
                self.resolution,
                self.domain.factor()
            )));
        }
        Ok(FieldGrid {
            values: area_downsample(self.values.view(), factor)?,
            domain: self.domain,
            resolution: Resolution::Low,
        })
    }

    pub fn bilinear_interpolate(&self, coords: &[(f64, f64)]) -> Result<Array2<f64>> {
        for &(lon, lat) in coords {
            self.domain.check_inside(lon, lat)?;
        }
        Ok(bilinear_interpolate(self.values.view(), &self.geometry(), coords))
    }
}

/// Block mean over `factor x factor` cells, per variable.
pub fn area_downsample(values: ArrayView3<'_, f64>, factor: usize) -> Result<Array3<f64>> {
    let (v, h, w) = values.dim();
    if factor < 2 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Shape(format!(
            "cannot average {h}x{w} cells by a factor of {factor}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = Array3::zeros((v, oh, ow));
    for c in 0..v {
        for i in 0..h {
            for j in 0..w {
                out[[c, i / factor, j / factor]] += values[[c, i, j]];
            }
        }
    }
    out.mapv_inplace(|x| x * inv);
    Ok(out)
}

/// Bilinear interpolation between cell centers with boundary clamping.
/// Callers are responsible for domain checks.
pub fn bilinear_interpolate(
    values: ArrayView3<'_, f64>,
    geom: &GridGeometry,
    coords: &[(f64, f64)],
) -> Array2<f64> {
    let nv = values.len_of(Axis(0));
    let mut out = Array2::zeros((nv, coords.len()));
    for (q, &(lon, lat)) in coords.iter().enumerate() {
        let (i0, i1, ty, j0, j1, tx) = geom.bilinear_stencil(lon, lat);
        for c in 0..nv {
            let top = (1.0 - tx) * values[[c, i0, j0]] + tx * values[[c, i0, j1]];
            let bottom = (1.0 - tx) * values[[c, i1, j0]] + tx * values[[c, i1, j1]];
            out[[c, q]] = (1.0 - ty) * top + ty * bottom;
        }
    }
    out
}

/// Bilinear up-sampling onto the cell centers of a finer geometry.
pub fn bilinear_upsample(values: ArrayView3<'_, f64>, from: &GridGeometry, to: &GridGeometry) -> Array3<f64> {
    let coords: Vec<(f64, f64)> = (0..to.rows)
        .flat_map(|i| (0..to.cols).map(move |j| (i, j)))
        .map(|(i, j)| to.center(i, j))
        .collect();
    let flat = bilinear_interpolate(values, from, &coords);
    let nv = flat.len_of(Axis(0));
    flat.into_shape_with_order((nv, to.rows, to.cols))
        .expect("row-major reshape of interpolated centers")
}

/// Which part of the station network a station belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Fixed station network: coordinates and one split tag per station.
#[derive(Clone, Debug, PartialEq)]
pub struct StationLayout {
    /// `(M, 2)` rows of `(lon, lat)` in degrees.
    pub coords: Array2<f64>,
    pub splits: Vec<Split>,
}

impl StationLayout {
    pub fn new(coords: Array2<f64>, splits: Vec<Split>, domain: &DomainSpec) -> Result<Self> {
        if coords.ncols() != 2 || coords.nrows() != splits.len() {
            return Err(Error::Shape(format!(
                "station coords {:?} do not match {} split tags",
                coords.dim(),
                splits.len()
            )));
        }
        for row in coords.rows() {
            if !domain.contains_strict(row[0], row[1]) {
                return Err(Error::OutOfDomain {
                    lon: row[0],
                    lat: row[1],
                });
            }
        }
        Ok(StationLayout { coords, splits })
    }

    pub fn len(&self) -> usize {
        self.splits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splits.is_empty()
    }

    pub fn coord(&self, m: usize) -> (f64, f64) {
        (self.coords[[m, 0]], self.coords[[m, 1]])
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == split)
            .map(|(m, _)| m)
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.splits.iter().filter(|s| **s == split).count()
    }

    pub fn coords_of(&self, idx: &[usize]) -> Vec<(f64, f64)> {
        idx.iter().map(|&m| self.coord(m)).collect()
    }
}

/// Station observations at one time step.
#[derive(Clone, Debug, PartialEq)]
pub struct StationSet {
    pub coords: Array2<f64>,
    pub splits: Vec<Split>,
    /// `(V_s, M)` in station-roster order.
    pub values: Array2<f64>,
    /// `(V_s, M)`; `false` marks a missing observation.
    pub mask: Array2<bool>,
}

impl StationSet {
    pub fn len(&self) -> usize {
        self.splits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splits.is_empty()
    }

    /// Keeps only the listed stations, in the given order.
    pub fn select(&self, idx: &[usize]) -> StationSet {
        StationSet {
            coords: self.coords.select(Axis(0), idx),
            splits: idx.iter().map(|&m| self.splits[m]).collect(),
            values: self.values.select(Axis(1), idx),
            mask: self.mask.select(Axis(1), idx),
        }
    }

    pub fn coord_list(&self) -> Vec<(f64, f64)> {
        self.coords.rows().into_iter().map(|r| (r[0], r[1])).collect()
    }
}

/// Inner points of one high-resolution pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct SubgridSampleSet {
    pub pixel: (usize, usize),
    /// `(P, 2)` rows of `(lon, lat)`.
    pub points: Array2<f64>,
    /// `(V, P)` interpolated input values; empty until attached.
    pub aux: Array2<f64>,
    pub station_flags: Vec<bool>,
}

impl SubgridSampleSet {
    pub fn len(&self) -> usize {
        self.station_flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.station_flags.is_empty()
    }

    pub fn point_list(&self) -> Vec<(f64, f64)> {
        self.points.rows().into_iter().map(|r| (r[0], r[1])).collect()
    }

    /// Interpolates `grid` at every inner point.
    pub fn attach_aux(&mut self, grid: &FieldGrid) -> Result<()> {
        self.aux = grid.bilinear_interpolate(&self.point_list())?;
        Ok(())
    }
}

/// Draws `p` points inside `pixel`: the listed stations first, verbatim and
/// flagged, then uniform draws over the pixel rectangle.
pub fn sample_inner_points_with<R: Rng + ?Sized>(
    geom: &GridGeometry,
    pixel: (usize, usize),
    p: usize,
    stations_in_pixel: &[(f64, f64)],
    rng: &mut R,
) -> Result<SubgridSampleSet> {
    if p == 0 || stations_in_pixel.len() > p {
        return Err(Error::Capacity {
            stations: stations_in_pixel.len(),
            capacity: p,
        });
    }
    let rect = geom.rect(pixel.0, pixel.1);
    let mut points = Array2::zeros((p, 2));
    let mut flags = vec![false; p];
    for (k, &(lon, lat)) in stations_in_pixel.iter().enumerate() {
        if !rect.contains(lon, lat) {
            return Err(Error::Routing(format!(
                "station ({lon}, {lat}) is not inside pixel {pixel:?}"
            )));
        }
        points[[k, 0]] = lon;
        points[[k, 1]] = lat;
        flags[k] = true;
    }
    for k in stations_in_pixel.len()..p {
        let u: f64 = rng.random();
        let v: f64 = rng.random();
        points[[k, 0]] = rect.lon0 + u * (rect.lon1 - rect.lon0);
        points[[k, 1]] = rect.lat0 + v * (rect.lat1 - rect.lat0);
    }
    Ok(SubgridSampleSet {
        pixel,
        points,
        aux: Array2::zeros((0, p)),
        station_flags: flags,
    })
}

/// Seeded variant of [`sample_inner_points_with`].
pub fn sample_inner_points(
    geom: &GridGeometry,
    pixel: (usize, usize),
    p: usize,
    stations_in_pixel: &[(f64, f64)],
    seed: u64,
) -> Result<SubgridSampleSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_inner_points_with(geom, pixel, p, stations_in_pixel, &mut rng)
}

/// Normalizes a `(V, H, W)` field in place.
pub fn normalize_field(values: &mut ArrayViewMut3<'_, f64>, norm: &Normalizer, names: &[&str]) -> Result<()> {
    norm.normalize(values, names)
}

/// Normalizes a `(V_s, M)` station array in place.
pub fn normalize_stations(values: &mut ArrayViewMut2<'_, f64>, norm: &Normalizer, names: &[&str]) -> Result<()> {
    norm.normalize(values, names)
}
