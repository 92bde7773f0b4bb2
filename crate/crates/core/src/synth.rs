//! Synthetic scenarios with analytically known continuous truth.
//!
//! Every variable is a seeded sum of sinusoidal modes plus a quadratic trend
//! in model (normalized) units. Separable sinusoids have closed-form
//! rectangle means, so low- and high-resolution cells are exact area
//! averages. Precipitation is rectified and averaged by Gauss-Legendre
//! quadrature instead.

use std::f64::consts::{FRAC_PI_2, PI};

use ndarray::{s, Array1, Array2, Array3, Array4, Array5, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    area_downsample, DomainSpec, FieldGrid, GridGeometry, Normalizer, Resolution, Split, StationLayout,
    StationSet, VariableSpec, GRID_VARIABLES, STATION_VARIABLES, T2M, TP1H, U10, V10, SP,
};
use crate::io::{Dataset, DatasetManifest, Shapes, TimeSplits};

/// Number of satellite channels (two visible albedos, two brightness temperatures).
pub const N_CHANNELS: usize = 4;
pub const CHANNEL_NAMES: [&str; N_CHANNELS] = ["albedo_03", "albedo_05", "tbb_08", "tbb_15"];

/// One sinusoidal mode in degree coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mode {
    /// `A sin(kx x + ky y + omega t + phase)`
    Plane {
        amplitude: f64,
        kx: f64,
        ky: f64,
        phase: f64,
        omega: f64,
    },
    /// `A sin(kx x + px + ox t) sin(ky y + py + oy t)`
    Product {
        amplitude: f64,
        kx: f64,
        px: f64,
        ox: f64,
        ky: f64,
        py: f64,
        oy: f64,
    },
}

impl Mode {
    pub fn is_static(&self) -> bool {
        match *self {
            Mode::Plane { omega, .. } => omega == 0.0,
            Mode::Product { ox, oy, .. } => ox == 0.0 && oy == 0.0,
        }
    }
}

/// One separable factor along a single axis.
#[derive(Clone, Copy, Debug)]
enum Factor {
    /// `sin(k s + c)`
    Sin { k: f64, c: f64 },
    /// `u^power` with `u = 2 (s - lo) / span - 1`
    Mono { power: u8, lo: f64, span: f64 },
}

fn sinc(z: f64) -> f64 {
    if z.abs() < 1e-4 {
        let z2 = z * z;
        1.0 - z2 / 6.0 + z2 * z2 / 120.0
    } else {
        z.sin() / z
    }
}

impl Factor {
    fn at(&self, s: f64) -> f64 {
        match *self {
            Factor::Sin { k, c } => (k * s + c).sin(),
            Factor::Mono { power, lo, span } => {
                let u = 2.0 * (s - lo) / span - 1.0;
                match power {
                    0 => 1.0,
                    1 => u,
                    _ => u * u,
                }
            }
        }
    }

    /// Exact mean over `[a, b]`.
    fn mean(&self, a: f64, b: f64) -> f64 {
        let m = 0.5 * (a + b);
        let h = 0.5 * (b - a);
        match *self {
            Factor::Sin { k, c } => (k * m + c).sin() * sinc(k * h),
            Factor::Mono { power, lo, span } => {
                let u = 2.0 * (m - lo) / span - 1.0;
                let hu = 2.0 * h / span;
                match power {
                    0 => 1.0,
                    1 => u,
                    _ => u * u + hu * hu / 3.0,
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Term {
    a: f64,
    x: Factor,
    y: Factor,
}

/// Sampling of one axis: point values or interval means.
#[derive(Clone, Debug)]
enum AxisSampling {
    Points(Vec<f64>),
    Intervals(Vec<(f64, f64)>),
}

impl AxisSampling {
    fn len(&self) -> usize {
        match self {
            AxisSampling::Points(p) => p.len(),
            AxisSampling::Intervals(i) => i.len(),
        }
    }

    fn eval(&self, f: &Factor) -> impl Iterator<Item = f64> + '_ {
        let f = *f;
        let (pts, ivs) = match self {
            AxisSampling::Points(p) => (Some(p), None),
            AxisSampling::Intervals(i) => (None, Some(i)),
        };
        pts.into_iter()
            .flat_map(move |p| p.iter().map(move |&s| f.at(s)))
            .chain(ivs.into_iter().flat_map(move |i| i.iter().map(move |&(a, b)| f.mean(a, b))))
    }
}

/// Closed-form field for one variable, in normalized units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariableField {
    pub name: String,
    pub unit: String,
    /// Physical value = `offset + scale * normalized`.
    pub offset: f64,
    pub scale: f64,
    /// Apply `max(0, .)` to the mode sum.
    pub rectified: bool,
    /// Coefficients of `1, u, w, u^2, w^2, u w` in unit domain coordinates.
    pub trend: [f64; 6],
    pub modes: Vec<Mode>,
}

impl VariableField {
    fn terms(&self, domain: &DomainSpec, t: f64) -> Vec<Term> {
        let mono = |power: u8, lo: f64, span: f64| Factor::Mono { power, lo, span };
        let (xl, xs) = (domain.lon_min, domain.width());
        let (yl, ys) = (domain.lat_min, domain.height());
        let mut out = Vec::with_capacity(6 + 2 * self.modes.len());
        let trend_factors = [
            (mono(0, xl, xs), mono(0, yl, ys)),
            (mono(1, xl, xs), mono(0, yl, ys)),
            (mono(0, xl, xs), mono(1, yl, ys)),
            (mono(2, xl, xs), mono(0, yl, ys)),
            (mono(0, xl, xs), mono(2, yl, ys)),
            (mono(1, xl, xs), mono(1, yl, ys)),
        ];
        for (c, (x, y)) in self.trend.iter().zip(trend_factors) {
            if *c != 0.0 {
                out.push(Term { a: *c, x, y });
            }
        }
        for m in &self.modes {
            match *m {
                Mode::Plane {
                    amplitude,
                    kx,
                    ky,
                    phase,
                    omega,
                } => {
                    let c = phase + omega * t;
                    out.push(Term {
                        a: amplitude,
                        x: Factor::Sin { k: kx, c },
                        y: Factor::Sin { k: ky, c: FRAC_PI_2 },
                    });
                    out.push(Term {
                        a: amplitude,
                        x: Factor::Sin { k: kx, c: c + FRAC_PI_2 },
                        y: Factor::Sin { k: ky, c: 0.0 },
                    });
                }
                Mode::Product {
                    amplitude,
                    kx,
                    px,
                    ox,
                    ky,
                    py,
                    oy,
                } => out.push(Term {
                    a: amplitude,
                    x: Factor::Sin { k: kx, c: px + ox * t },
                    y: Factor::Sin { k: ky, c: py + oy * t },
                }),
            }
        }
        out
    }

    /// Unrectified mode sum on a separable lattice, `(ny, nx)`.
    fn raw_lattice(&self, domain: &DomainSpec, t: f64, xs: &AxisSampling, ys: &AxisSampling) -> Array2<f64> {
        let terms = self.terms(domain, t);
        let n = terms.len();
        let mut xm = Array2::zeros((n, xs.len()));
        let mut ym = Array2::zeros((n, ys.len()));
        for (r, term) in terms.iter().enumerate() {
            for (c, v) in xs.eval(&term.x).enumerate() {
                xm[[r, c]] = term.a * v;
            }
            for (c, v) in ys.eval(&term.y).enumerate() {
                ym[[r, c]] = v;
            }
        }
        ym.t().dot(&xm)
    }

    fn raw_point(&self, domain: &DomainSpec, lon: f64, lat: f64, t: f64) -> f64 {
        self.terms(domain, t)
            .iter()
            .map(|term| term.a * term.x.at(lon) * term.y.at(lat))
            .sum()
    }

    pub fn point(&self, domain: &DomainSpec, lon: f64, lat: f64, t: f64) -> f64 {
        let raw = self.raw_point(domain, lon, lat, t);
        if self.rectified {
            raw.max(0.0)
        } else {
            raw
        }
    }

    pub fn spec(&self) -> VariableSpec {
        VariableSpec::new(&self.name, &self.unit, self.offset, self.scale)
    }
}

/// Analytic truth for the whole roster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticField {
    pub domain: DomainSpec,
    pub variables: Vec<VariableField>,
    /// Gauss points per cell axis for rectified variables.
    pub quadrature_points: usize,
}

impl AnalyticField {
    /// Normalized values `(V, Q)` at arbitrary points.
    pub fn eval(&self, coords: &[(f64, f64)], t: f64) -> Result<Array2<f64>> {
        for &(lon, lat) in coords {
            self.domain.check_inside(lon, lat)?;
        }
        let mut out = Array2::zeros((self.variables.len(), coords.len()));
        for (v, var) in self.variables.iter().enumerate() {
            for (q, &(lon, lat)) in coords.iter().enumerate() {
                out[[v, q]] = var.point(&self.domain, lon, lat, t);
            }
        }
        Ok(out)
    }

    /// Normalized point values on the cell centers of `geom`, `(V, rows, cols)`.
    pub fn eval_centers(&self, geom: &GridGeometry, t: f64) -> Array3<f64> {
        let xs = AxisSampling::Points((0..geom.cols).map(|j| geom.center(0, j).0).collect());
        let ys = AxisSampling::Points((0..geom.rows).map(|i| geom.center(i, 0).1).collect());
        let mut out = Array3::zeros((self.variables.len(), geom.rows, geom.cols));
        for (v, var) in self.variables.iter().enumerate() {
            let mut raw = var.raw_lattice(&self.domain, t, &xs, &ys);
            if var.rectified {
                raw.mapv_inplace(|x| x.max(0.0));
            }
            out.index_axis_mut(Axis(0), v).assign(&raw);
        }
        out
    }

    /// Exact cell means of one variable on `geom`, `(rows, cols)`.
    fn cell_means(&self, var: &VariableField, geom: &GridGeometry, t: f64) -> Array2<f64> {
        if !var.rectified {
            let xs = AxisSampling::Intervals((0..geom.cols).map(|j| (geom.rect(0, j).lon0, geom.rect(0, j).lon1)).collect());
            let ys = AxisSampling::Intervals((0..geom.rows).map(|i| (geom.rect(i, 0).lat0, geom.rect(i, 0).lat1)).collect());
            return var.raw_lattice(&self.domain, t, &xs, &ys);
        }
        let n = self.quadrature_points;
        let (unit_x, unit_w) = crate::quadrature::gauss_legendre(n);
        let mut xs = Vec::with_capacity(geom.cols * n);
        let mut wx = Vec::with_capacity(geom.cols * n);
        for j in 0..geom.cols {
            let r = geom.rect(0, j);
            let (mid, half) = (0.5 * (r.lon0 + r.lon1), 0.5 * (r.lon1 - r.lon0));
            for (x, w) in unit_x.iter().zip(&unit_w) {
                xs.push(mid + half * x);
                wx.push(0.5 * w);
            }
        }
        let mut ys = Vec::with_capacity(geom.rows * n);
        let mut wy = Vec::with_capacity(geom.rows * n);
        for i in 0..geom.rows {
            let r = geom.rect(i, 0);
            let (mid, half) = (0.5 * (r.lat0 + r.lat1), 0.5 * (r.lat1 - r.lat0));
            for (y, w) in unit_x.iter().zip(&unit_w) {
                ys.push(mid + half * y);
                wy.push(0.5 * w);
            }
        }
        let raw = var.raw_lattice(&self.domain, t, &AxisSampling::Points(xs), &AxisSampling::Points(ys));
        let mut out = Array2::zeros((geom.rows, geom.cols));
        for (qi, row) in raw.outer_iter().enumerate() {
            let i = qi / n;
            let wyi = wy[qi];
            for (qj, &val) in row.iter().enumerate() {
                out[[i, qj / n]] += wyi * wx[qj] * val.max(0.0);
            }
        }
        out
    }

    /// High-resolution exact cell means in normalized units.
    pub fn hr_means(&self, t: f64) -> Array3<f64> {
        let geom = self.domain.hr_geometry();
        let mut out = Array3::zeros((self.variables.len(), geom.rows, geom.cols));
        for (v, var) in self.variables.iter().enumerate() {
            out.index_axis_mut(Axis(0), v).assign(&self.cell_means(var, &geom, t));
        }
        out
    }

    /// Low-resolution exact cell means; rectified variables are block means of
    /// the high-resolution quadrature so the two grids nest exactly.
    pub fn lr_means(&self, t: f64, hr: Option<&Array3<f64>>) -> Array3<f64> {
        let geom = self.domain.lr_geometry();
        let k = self.domain.factor();
        let mut out = Array3::zeros((self.variables.len(), geom.rows, geom.cols));
        let mut hr_cache = None;
        for (v, var) in self.variables.iter().enumerate() {
            if var.rectified {
                let hr = match hr {
                    Some(h) => h,
                    None => hr_cache.get_or_insert_with(|| self.hr_means(t)),
                };
                let block = hr.slice(s![v..v + 1, .., ..]);
                let lr = area_downsample(block, k).expect("domain factor divides the grid");
                out.index_axis_mut(Axis(0), v).assign(&lr.index_axis(Axis(0), 0));
            } else {
                out.index_axis_mut(Axis(0), v).assign(&self.cell_means(var, &geom, t));
            }
        }
        out
    }

    pub fn normalizer(&self) -> Normalizer {
        Normalizer {
            specs: self.variables.iter().map(|v| v.spec()).collect(),
        }
    }

    pub fn to_physical(&self, values: &mut Array3<f64>) {
        for (mut lane, var) in values.axis_iter_mut(Axis(0)).zip(&self.variables) {
            lane.mapv_inplace(|x| var.offset + var.scale * x);
        }
    }
}

/// Satellite channel maps applied to normalized truth `(u, v, t2m, sp, tp)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChannelMaps {
    /// Channel `c` is variable `c`.
    Identity,
    /// Saturating radiance-like maps; coefficients are scenario-seeded.
    Radiance { coefficients: [f64; 11] },
}

impl ChannelMaps {
    fn seeded(rng: &mut ChaCha8Rng) -> Self {
        let base = [3.0, -0.6, 0.3, -0.5, 0.5, 0.6, -0.8, 0.2, 0.5, 0.3, -1.0];
        let mut coefficients = base;
        for c in coefficients.iter_mut() {
            *c *= 1.0 + rng.random_range(-0.1..0.1);
        }
        ChannelMaps::Radiance { coefficients }
    }

    /// Normalized channel values.
    pub fn apply(&self, z: &[f64]) -> [f64; N_CHANNELS] {
        match self {
            ChannelMaps::Identity => [z[0], z[1], z[2], z[3]],
            ChannelMaps::Radiance { coefficients: k } => {
                let (u, v, t, p, r) = (z[U10], z[V10], z[T2M], z[SP], z[TP1H]);
                let cloud = 1.0 / (1.0 + (-(k[0] * r + k[1] * p + k[2] * t + k[3])).exp());
                let a03 = cloud;
                let a05 = 0.7 * cloud + 0.3 * (k[4] * t).tanh();
                let b08 = (k[5] * t + k[6] * cloud + k[7] * v).tanh();
                let b15 = (k[8] * t + k[9] * u + k[10] * cloud).tanh();
                [(a03 - 0.5) * 4.0, (a05 - 0.35) * 3.0, b08 * 2.0, b15 * 2.0]
            }
        }
    }
}

/// Smooth station bias for one observed variable, zero mean over the domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasField {
    pub modes: Vec<Mode>,
    /// Subtracted so the domain mean vanishes.
    pub mean: f64,
}

impl BiasField {
    fn carrier(&self) -> VariableField {
        VariableField {
            name: "bias".into(),
            unit: "1".into(),
            offset: 0.0,
            scale: 1.0,
            rectified: false,
            trend: [0.0; 6],
            modes: self.modes.clone(),
        }
    }

    fn new(modes: Vec<Mode>, domain: &DomainSpec) -> Self {
        let mut b = BiasField { modes, mean: 0.0 };
        b.mean = b.raw_domain_mean(domain);
        b
    }

    fn raw_domain_mean(&self, domain: &DomainSpec) -> f64 {
        let xs = AxisSampling::Intervals(vec![(domain.lon_min, domain.lon_max)]);
        let ys = AxisSampling::Intervals(vec![(domain.lat_min, domain.lat_max)]);
        self.carrier().raw_lattice(domain, 0.0, &xs, &ys)[[0, 0]]
    }

    pub fn domain_mean(&self, domain: &DomainSpec) -> f64 {
        self.raw_domain_mean(domain) - self.mean
    }

    pub fn at(&self, domain: &DomainSpec, lon: f64, lat: f64) -> f64 {
        self.carrier().raw_point(domain, lon, lat, 0.0) - self.mean
    }
}

/// How truth becomes satellite frames and station readings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationOperator {
    pub channels: ChannelMaps,
    /// One bias per station variable, in normalized units.
    pub bias: Vec<BiasField>,
    /// Station noise std in normalized units.
    pub sigma_obs: f64,
    /// Probability that a station reading is missing.
    pub missing_fraction: f64,
}

/// Generator configuration; every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    /// Overrides the station layout seed (defaults to one derived from `seed`).
    pub station_seed: Option<u64>,
    pub domain: DomainSpec,
    /// Satellite cells per high-resolution cell along each axis.
    pub satellite_factor: usize,
    /// Sinusoidal modes per variable.
    pub n_modes: usize,
    /// How many of the modes are stationary small-scale structure.
    pub n_static_modes: usize,
    pub n_train_stations: usize,
    pub n_val_stations: usize,
    pub n_test_stations: usize,
    pub train_steps: usize,
    pub val_steps: usize,
    pub test_steps: usize,
    pub sigma_obs: f64,
    /// RMS of the station bias in normalized units.
    pub bias_std: f64,
    pub missing_fraction: f64,
    pub quadrature_points: usize,
    /// Identity channel maps instead of radiance-like maps.
    pub identity_channels: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 0,
            station_seed: None,
            domain: DomainSpec::default(),
            satellite_factor: 2,
            n_modes: 12,
            n_static_modes: 4,
            n_train_stations: 120,
            n_val_stations: 20,
            n_test_stations: 40,
            train_steps: 200,
            val_steps: 20,
            test_steps: 40,
            sigma_obs: 0.05,
            bias_std: 0.1,
            missing_fraction: 0.0,
            quadrature_points: 32,
            identity_channels: false,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        if self.satellite_factor == 0 {
            return Err(Error::Config("satellite_factor must be >= 1".into()));
        }
        if self.n_static_modes > self.n_modes {
            return Err(Error::Config("n_static_modes exceeds n_modes".into()));
        }
        if self.n_train_stations == 0 || self.n_val_stations == 0 || self.n_test_stations == 0 {
            return Err(Error::Config("every station split needs at least one station".into()));
        }
        if self.train_steps == 0 || self.val_steps == 0 || self.test_steps == 0 {
            return Err(Error::Config("every time split needs at least one step".into()));
        }
        if !(self.sigma_obs >= 0.0) || !(self.bias_std >= 0.0) {
            return Err(Error::Config("sigma_obs and bias_std must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.missing_fraction) {
            return Err(Error::Config("missing_fraction must lie in [0, 1)".into()));
        }
        if self.quadrature_points < 32 {
            return Err(Error::Config("quadrature_points must be >= 32".into()));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        self.train_steps + self.val_steps + self.test_steps
    }

    pub fn time_splits(&self) -> TimeSplits {
        let a = self.train_steps;
        let b = a + self.val_steps;
        TimeSplits {
            train: (0, a),
            val: (a, b),
            test: (b, b + self.test_steps),
        }
    }

    pub fn satellite_geometry(&self) -> GridGeometry {
        self.domain.geometry(self.domain.hr_cell / self.satellite_factor as f64)
    }
}

/// Physical units and spectral budget per grid variable.
struct Climate {
    unit: &'static str,
    offset: f64,
    scale: f64,
    dynamic_rms: f64,
    static_rms: f64,
    rectified: bool,
    trend_offset: f64,
}

const CLIMATE: [Climate; 5] = [
    Climate { unit: "m/s", offset: 0.0, scale: 3.0, dynamic_rms: 0.8, static_rms: 0.6, rectified: false, trend_offset: 0.0 },
    Climate { unit: "m/s", offset: 0.0, scale: 3.0, dynamic_rms: 0.8, static_rms: 0.6, rectified: false, trend_offset: 0.0 },
    Climate { unit: "K", offset: 288.0, scale: 6.0, dynamic_rms: 0.9, static_rms: 0.35, rectified: false, trend_offset: 0.0 },
    Climate { unit: "hPa", offset: 1000.0, scale: 8.0, dynamic_rms: 0.9, static_rms: 0.4, rectified: false, trend_offset: 0.0 },
    Climate { unit: "mm", offset: 0.0, scale: 1.5, dynamic_rms: 0.9, static_rms: 0.3, rectified: true, trend_offset: -0.4 },
];

/// splitmix64 finalizer; derives independent sub-stream seeds.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_FIELD: u64 = 1;
const STREAM_STATIONS: u64 = 2;
const STREAM_BIAS: u64 = 3;
const STREAM_CHANNELS: u64 = 4;
const STREAM_NOISE: u64 = 5;
const STREAM_MISSING: u64 = 6;

fn plane_mode(rng: &mut ChaCha8Rng, domain: &DomainSpec, cycles: f64, omega: f64) -> Mode {
    let theta = rng.random_range(0.0..2.0 * PI);
    Mode::Plane {
        amplitude: 1.0,
        kx: 2.0 * PI * cycles * theta.cos() / domain.width(),
        ky: 2.0 * PI * cycles * theta.sin() / domain.height(),
        phase: rng.random_range(0.0..2.0 * PI),
        omega,
    }
}

fn set_rms(modes: &mut [Mode], weights: &[f64], rms: f64) {
    let total: f64 = weights.iter().map(|w| w * w).sum::<f64>() / 2.0;
    let norm = if total > 0.0 { rms / total.sqrt() } else { 0.0 };
    for (m, w) in modes.iter_mut().zip(weights) {
        if let Mode::Plane { amplitude, .. } = m {
            *amplitude = w * norm;
        }
    }
}

/// Scenario: analytic truth, observation operator and station layout.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScenario {
    pub config: ScenarioConfig,
    pub field: AnalyticField,
    pub obs: ObservationOperator,
    pub layout: StationLayout,
}

impl SyntheticScenario {
    pub fn new(config: ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let domain = config.domain;
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, STREAM_FIELD));
        let n_dyn = config.n_modes - config.n_static_modes;
        let variables = GRID_VARIABLES
            .iter()
            .zip(CLIMATE.iter())
            .map(|(name, c)| {
                let mut dynamic = Vec::with_capacity(n_dyn);
                let mut dyn_w = Vec::with_capacity(n_dyn);
                for _ in 0..n_dyn {
                    let cycles = rng.random_range(0.5..2.5);
                    let omega = rng.random_range(0.08..0.35) * if rng.random::<bool>() { 1.0 } else { -1.0 };
                    dynamic.push(plane_mode(&mut rng, &domain, cycles, omega));
                    dyn_w.push(1.0 / cycles);
                }
                set_rms(&mut dynamic, &dyn_w, c.dynamic_rms);
                let mut fixed = Vec::with_capacity(config.n_static_modes);
                for _ in 0..config.n_static_modes {
                    let cycles = rng.random_range(8.0..16.0);
                    fixed.push(plane_mode(&mut rng, &domain, cycles, 0.0));
                }
                set_rms(&mut fixed, &vec![1.0; config.n_static_modes], c.static_rms);
                let mut trend = [0.0; 6];
                for v in trend.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = 0.15 * z;
                }
                trend[0] += c.trend_offset;
                dynamic.extend(fixed);
                VariableField {
                    name: name.to_string(),
                    unit: c.unit.to_string(),
                    offset: c.offset,
                    scale: c.scale,
                    rectified: c.rectified,
                    trend,
                    modes: dynamic,
                }
            })
            .collect();
        let field = AnalyticField {
            domain,
            variables,
            quadrature_points: config.quadrature_points,
        };

        let mut brng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, STREAM_BIAS));
        let bias = (0..STATION_VARIABLES.len())
            .map(|_| {
                let mut modes: Vec<Mode> = (0..3)
                    .map(|_| {
                        let cycles = brng.random_range(0.5..1.5);
                        plane_mode(&mut brng, &domain, cycles, 0.0)
                    })
                    .collect();
                let w: Vec<f64> = (0..3).map(|_| brng.random_range(0.5..1.0)).collect();
                set_rms(&mut modes, &w, config.bias_std);
                BiasField::new(modes, &domain)
            })
            .collect();
        let mut crng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, STREAM_CHANNELS));
        let channels = if config.identity_channels {
            ChannelMaps::Identity
        } else {
            ChannelMaps::seeded(&mut crng)
        };
        let obs = ObservationOperator {
            channels,
            bias,
            sigma_obs: config.sigma_obs,
            missing_fraction: config.missing_fraction,
        };
        let layout = Self::station_layout(&config)?;
        Ok(SyntheticScenario {
            config,
            field,
            obs,
            layout,
        })
    }

    fn station_layout(config: &ScenarioConfig) -> Result<StationLayout> {
        let seed = config
            .station_seed
            .unwrap_or_else(|| sub_seed(config.seed, STREAM_STATIONS));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = &config.domain;
        let n = config.n_train_stations + config.n_val_stations + config.n_test_stations;
        let margin = 1e-3 * d.width().min(d.height());
        let mut coords = Array2::zeros((n, 2));
        for m in 0..n {
            // f32-representable so persisted coordinates are exact.
            let lon = rng.random_range(d.lon_min + margin..d.lon_max - margin) as f32 as f64;
            let lat = rng.random_range(d.lat_min + margin..d.lat_max - margin) as f32 as f64;
            coords[[m, 0]] = lon;
            coords[[m, 1]] = lat;
        }
        let mut splits: Vec<Split> = std::iter::repeat_n(Split::Train, config.n_train_stations)
            .chain(std::iter::repeat_n(Split::Val, config.n_val_stations))
            .chain(std::iter::repeat_n(Split::Test, config.n_test_stations))
            .collect();
        // Fisher-Yates so tags are spatially random.
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            splits.swap(i, j);
        }
        StationLayout::new(coords, splits, d)
    }

    pub fn domain(&self) -> &DomainSpec {
        &self.config.domain
    }

    /// Exact normalized truth `(V, Q)`.
    pub fn eval_true_field(&self, coords: &[(f64, f64)], t: f64) -> Result<Array2<f64>> {
        self.field.eval(coords, t)
    }

    /// Low-resolution input in physical units.
    pub fn make_lr_field(&self, t: usize) -> FieldGrid {
        let mut v = self.field.lr_means(t as f64, None);
        self.field.to_physical(&mut v);
        FieldGrid {
            values: v,
            domain: self.config.domain,
            resolution: Resolution::Low,
        }
    }

    /// High-resolution label in physical units.
    pub fn make_hr_field(&self, t: usize) -> FieldGrid {
        let mut v = self.field.hr_means(t as f64);
        self.field.to_physical(&mut v);
        FieldGrid {
            values: v,
            domain: self.config.domain,
            resolution: Resolution::High,
        }
    }

    /// Both grids from one quadrature pass, physical units.
    pub fn make_fields(&self, t: usize) -> (FieldGrid, FieldGrid) {
        let hr_norm = self.field.hr_means(t as f64);
        let mut lr = self.field.lr_means(t as f64, Some(&hr_norm));
        let mut hr = hr_norm;
        self.field.to_physical(&mut lr);
        self.field.to_physical(&mut hr);
        (
            FieldGrid {
                values: lr,
                domain: self.config.domain,
                resolution: Resolution::Low,
            },
            FieldGrid {
                values: hr,
                domain: self.config.domain,
                resolution: Resolution::High,
            },
        )
    }

    /// Channel values at satellite cell centers for a single instant,
    /// `(4, rows, cols)`.
    pub fn satellite_frame(&self, t: f64) -> Array3<f64> {
        let geom = self.config.satellite_geometry();
        let truth = self.field.eval_centers(&geom, t);
        let mut out = Array3::zeros((N_CHANNELS, geom.rows, geom.cols));
        let mut z = [0.0; 5];
        for i in 0..geom.rows {
            for j in 0..geom.cols {
                for (v, zv) in z.iter_mut().enumerate() {
                    *zv = truth[[v, i, j]];
                }
                let c = self.obs.channels.apply(&z);
                for (ch, val) in c.iter().enumerate() {
                    out[[ch, i, j]] = *val;
                }
            }
        }
        out
    }

    /// Frames at `t - 1` and `t`, `(2, 4, rows, cols)`.
    pub fn make_satellite_frames(&self, t: usize) -> Array4<f64> {
        let geom = self.config.satellite_geometry();
        let mut out = Array4::zeros((2, N_CHANNELS, geom.rows, geom.cols));
        out.index_axis_mut(Axis(0), 0).assign(&self.satellite_frame(t as f64 - 1.0));
        out.index_axis_mut(Axis(0), 1).assign(&self.satellite_frame(t as f64));
        out
    }

    /// Noise-free normalized station-roster truth plus bias, `(V_s, M)`.
    pub fn station_signal(&self, t: usize) -> Array2<f64> {
        let coords = self.layout.coords_of(&(0..self.layout.len()).collect::<Vec<_>>());
        let truth = self.field.eval(&coords, t as f64).expect("stations lie inside the domain");
        let mut out = Array2::zeros((STATION_VARIABLES.len(), coords.len()));
        for (m, &(lon, lat)) in coords.iter().enumerate() {
            let col = truth.column(m).to_vec();
            let roster = crate::grid::to_station_roster(&col);
            for (v, val) in roster.iter().enumerate() {
                out[[v, m]] = val + self.obs.bias[v].at(&self.config.domain, lon, lat);
            }
        }
        out
    }

    /// Station readings at `t` in physical units.
    pub fn make_station_obs(&self, t: usize) -> StationSet {
        let mut values = self.station_signal(t);
        let mut nrng = ChaCha8Rng::seed_from_u64(sub_seed(sub_seed(self.config.seed, STREAM_NOISE), t as u64));
        let mut mrng = ChaCha8Rng::seed_from_u64(sub_seed(sub_seed(self.config.seed, STREAM_MISSING), t as u64));
        let mut mask = Array2::from_elem(values.dim(), true);
        for m in 0..values.ncols() {
            for v in 0..values.nrows() {
                let e: f64 = StandardNormal.sample(&mut nrng);
                values[[v, m]] += self.obs.sigma_obs * e;
                if self.obs.missing_fraction > 0.0 && mrng.random::<f64>() < self.obs.missing_fraction {
                    mask[[v, m]] = false;
                }
            }
        }
        let specs = self.station_normalizer();
        specs
            .denormalize(&mut values.view_mut(), &STATION_VARIABLES)
            .expect("station roster has specs");
        for ((v, m), ok) in mask.indexed_iter() {
            if !ok {
                values[[v, m]] = 0.0;
            }
        }
        StationSet {
            coords: self.layout.coords.clone(),
            splits: self.layout.splits.clone(),
            values,
            mask,
        }
    }

    pub fn grid_normalizer(&self) -> Normalizer {
        self.field.normalizer()
    }

    /// Station roster specs; wind speed shares the wind components' scale
    /// with zero offset so speed composes in normalized units.
    pub fn station_normalizer(&self) -> Normalizer {
        let g = self.field.normalizer();
        let wind = &g.specs[U10];
        Normalizer {
            specs: vec![
                VariableSpec::new("wind_speed", &wind.unit, 0.0, wind.std),
                g.specs[SP].clone(),
                g.specs[T2M].clone(),
                g.specs[TP1H].clone(),
            ],
        }
    }

    /// Generates every time step in memory.
    pub fn generate(&self) -> Result<Dataset> {
        let c = &self.config;
        let (lh, lw) = (c.domain.lr_geometry().rows, c.domain.lr_geometry().cols);
        let (th, tw) = (c.domain.hr_geometry().rows, c.domain.hr_geometry().cols);
        let sg = c.satellite_geometry();
        let n_t = c.n_steps();
        let nv = GRID_VARIABLES.len();
        let ns = STATION_VARIABLES.len();
        let m = self.layout.len();
        let mut lr = Array4::zeros((n_t, nv, lh, lw));
        let mut hr = Array4::zeros((n_t, nv, th, tw));
        let mut sat = Array5::<f32>::zeros((n_t, 2, N_CHANNELS, sg.rows, sg.cols));
        let mut station_values = Array3::zeros((n_t, ns, m));
        let mut station_mask = Array3::from_elem((n_t, ns, m), true);
        let mut prev = self.satellite_frame(-1.0);
        for t in 0..n_t {
            let (l, h) = self.make_fields(t);
            lr.index_axis_mut(Axis(0), t).assign(&l.values);
            hr.index_axis_mut(Axis(0), t).assign(&h.values);
            let cur = self.satellite_frame(t as f64);
            sat.slice_mut(s![t, 0, .., .., ..]).assign(&prev.mapv(|x| x as f32));
            sat.slice_mut(s![t, 1, .., .., ..]).assign(&cur.mapv(|x| x as f32));
            prev = cur;
            let st = self.make_station_obs(t);
            station_values.index_axis_mut(Axis(0), t).assign(&st.values);
            station_mask.index_axis_mut(Axis(0), t).assign(&st.mask);
        }
        let manifest = DatasetManifest::new(
            c.domain,
            self.grid_normalizer().specs,
            self.station_normalizer().specs,
            Shapes {
                n_vars: nv,
                lr_h: lh,
                lr_w: lw,
                hr_h: th,
                hr_w: tw,
                sat_h: sg.rows,
                sat_w: sg.cols,
                frames: 2,
                channels: N_CHANNELS,
                n_times: n_t,
                n_stations: m,
                n_station_vars: ns,
            },
            c.time_splits(),
            [c.n_train_stations, c.n_val_stations, c.n_test_stations],
            Some(serde_json::to_value(c)?),
        );
        Dataset::new(
            manifest,
            lr,
            hr,
            sat,
            self.layout.clone(),
            station_values,
            station_mask,
            Array1::from_iter((0..n_t).map(|t| t as f64)),
        )
    }
}

/// Generates and persists a dataset.
pub fn build_dataset(scenario: &SyntheticScenario, dir: &std::path::Path, force: bool) -> Result<Dataset> {
    let ds = scenario.generate()?;
    crate::io::write_dataset(&ds, dir, force)?;
    Ok(ds)
}
