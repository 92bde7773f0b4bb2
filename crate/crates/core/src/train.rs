//! Training loop, checkpoint selection and station-level evaluation.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::ops::Range;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use ndarray::{s, Array2, Array3, ArrayView4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{interp_baseline, interpolation_tensor, SrConfig, SrNet};
use crate::error::{Error, Result};
use crate::grid::{bilinear_upsample, DomainSpec, GridGeometry, Normalizer, Split, STATION_VARIABLES};
use crate::io::{config_hash, CheckpointBundle, Dataset, MetricsRow, Shapes};
use crate::losses::{mse_mae, LossConfig};
use crate::model::{HyperDS, HyperDSConfig, ModelInputs, PixelSamples};
use crate::nn::{resample, scalar, tensor_from, tensor_from_f32, to_f64_vec, ParamStore};
use crate::synth::sub_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Time steps per batch.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub min_learning_rate: f64,
    /// Cosine restart period in epochs.
    pub restart_period: usize,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Random high-resolution pixels per sampling block and step for the
    /// grid loss; `None` uses every pixel.
    pub pixels_per_block: Option<usize>,
    /// Random low-resolution cells per sampling block and step when training
    /// without high-resolution labels; `None` uses every cell.
    pub cells_per_block: Option<usize>,
    /// Stratification blocks per axis for the random subsets.
    pub sampling_blocks: usize,
    /// Compute grid MSE against high-resolution labels during evaluation.
    pub grid_eval: bool,
    /// `f32` or `f64`.
    pub dtype: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 8,
            learning_rate: 1e-4,
            min_learning_rate: 1e-6,
            restart_period: 10,
            grad_clip: 1.0,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            pixels_per_block: None,
            cells_per_block: None,
            sampling_blocks: 4,
            grid_eval: true,
            dtype: "f32".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.restart_period == 0 || self.sampling_blocks == 0 {
            return Err(Error::Config("epochs, batch_size, restart_period and sampling_blocks must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.min_learning_rate >= 0.0) || self.min_learning_rate > self.learning_rate {
            return Err(Error::Config("need 0 <= min_learning_rate <= learning_rate, learning_rate > 0".into()));
        }
        if self.pixels_per_block == Some(0) || self.cells_per_block == Some(0) {
            return Err(Error::Config("subset sizes must be positive".into()));
        }
        self.dtype()?;
        Ok(())
    }

    pub fn dtype(&self) -> Result<DType> {
        match self.dtype.as_str() {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(Error::Config(format!("unsupported dtype `{other}`"))),
        }
    }

    /// Cosine annealing with warm restarts, stepped per iteration.
    pub fn learning_rate_at(&self, iteration: usize, iters_per_epoch: usize) -> f64 {
        let period = (self.restart_period * iters_per_epoch).max(1);
        let phase = (iteration % period) as f64 / period as f64;
        self.min_learning_rate + 0.5 * (self.learning_rate - self.min_learning_rate) * (1.0 + (PI * phase).cos())
    }
}

/// Adam over every parameter of a store, with optional global-norm clipping.
pub struct Adam {
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &ParamStore, cfg: &TrainConfig) -> Self {
        let n = params.iter().count();
        Adam {
            m: vec![None; n],
            v: vec![None; n],
            t: 0,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }

    /// Applies one update; returns the pre-clipping gradient norm.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, lr: f64, clip: f64) -> Result<f64> {
        let mut sq = 0.0;
        for (_, var) in params.iter() {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += scalar(&g.sqr()?.sum_all()?)?;
            }
        }
        let norm = sq.sqrt();
        let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (_, var)) in params.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = (g.detach() * scale)?;
            let m = match &self.m[k] {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let v = match &self.v[k] {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let denom = ((&v / c2)?.sqrt()? + self.eps)?;
            let update = ((&m / c1)? / denom)?;
            var.set(&(var.as_tensor().detach() - (update * lr)?)?)?;
            self.m[k] = Some(m.detach());
            self.v[k] = Some(v.detach());
        }
        Ok(norm)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AccessKind {
    GridInput,
    GridLabel,
    Satellite,
    StationCoords,
    StationValues,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Access {
    pub kind: AccessKind,
    pub time: Option<usize>,
    pub stations: Vec<usize>,
}

/// Normalized, access-logged view of a dataset.
pub struct DataAccess<'a> {
    pub ds: &'a Dataset,
    pub grid_norm: Normalizer,
    pub station_norm: Normalizer,
    log: RefCell<Vec<Access>>,
}

impl<'a> DataAccess<'a> {
    pub fn new(ds: &'a Dataset) -> Result<Self> {
        Ok(DataAccess {
            ds,
            grid_norm: Normalizer::new(ds.manifest.grid_variables.clone())?,
            station_norm: Normalizer::new(ds.manifest.station_variables.clone())?,
            log: RefCell::new(Vec::new()),
        })
    }

    fn record(&self, kind: AccessKind, time: Option<usize>, stations: &[usize]) {
        self.log.borrow_mut().push(Access {
            kind,
            time,
            stations: stations.to_vec(),
        });
    }

    pub fn domain(&self) -> &DomainSpec {
        &self.ds.manifest.domain
    }

    pub fn shapes(&self) -> Shapes {
        self.ds.manifest.shapes
    }

    pub fn times(&self, split: Split) -> Range<usize> {
        self.ds.manifest.time_splits.range(split)
    }

    /// Station indices of a split; reading them is not logged (no data).
    pub fn station_indices(&self, split: Split) -> Vec<usize> {
        self.ds.stations.indices(split)
    }

    fn grid_names(&self) -> Vec<&str> {
        self.grid_norm.specs.iter().map(|s| s.short_name.as_str()).collect()
    }

    pub fn lr(&self, t: usize) -> Result<Array3<f64>> {
        self.record(AccessKind::GridInput, Some(t), &[]);
        let mut a = self.ds.lr.index_axis(Axis(0), t).to_owned();
        self.grid_norm.normalize(&mut a.view_mut(), &self.grid_names())?;
        Ok(a)
    }

    pub fn hr(&self, t: usize) -> Result<Array3<f64>> {
        self.record(AccessKind::GridLabel, Some(t), &[]);
        let mut a = self.ds.hr.index_axis(Axis(0), t).to_owned();
        self.grid_norm.normalize(&mut a.view_mut(), &self.grid_names())?;
        Ok(a)
    }

    pub fn satellite(&self, t: usize) -> ArrayView4<'a, f32> {
        self.record(AccessKind::Satellite, Some(t), &[]);
        self.ds.satellite.index_axis(Axis(0), t)
    }

    pub fn station_coords(&self, idx: &[usize]) -> Vec<(f64, f64)> {
        self.record(AccessKind::StationCoords, None, idx);
        self.ds.stations.coords_of(idx)
    }

    /// Normalized station values `(4, M)` and validity mask.
    pub fn station_values(&self, t: usize, idx: &[usize]) -> Result<(Array2<f64>, Array2<bool>)> {
        self.record(AccessKind::StationValues, Some(t), idx);
        let vals = self.ds.station_values.index_axis(Axis(0), t);
        let mask = self.ds.station_mask.index_axis(Axis(0), t);
        let mut v = vals.select(Axis(1), idx);
        let m = mask.select(Axis(1), idx);
        self.station_norm.normalize(&mut v.view_mut(), &STATION_VARIABLES)?;
        Ok((v, m))
    }

    pub fn log(&self) -> Vec<Access> {
        self.log.borrow().clone()
    }

    pub fn clear_log(&self) {
        self.log.borrow_mut().clear();
    }

    /// Logged accesses touching any of `times` or `stations`.
    pub fn violations(&self, times: Range<usize>, stations: &[usize]) -> Vec<Access> {
        self.log
            .borrow()
            .iter()
            .filter(|a| a.time.is_some_and(|t| times.contains(&t)) || a.stations.iter().any(|s| stations.contains(s)))
            .cloned()
            .collect()
    }
}

/// One batch of time steps in normalized units.
pub struct Batch {
    pub times: Vec<usize>,
    pub inputs: ModelInputs,
    /// `(B, V, TH, TW)`, absent when high-resolution labels are not used.
    pub hr: Option<Tensor>,
    pub stations: Vec<(f64, f64)>,
    /// `(B, 4, M)`
    pub station_values: Tensor,
    /// `(B, 4, M)` of 0/1.
    pub station_mask: Tensor,
    pub n_valid: usize,
}

pub fn load_batch(data: &DataAccess<'_>, times: &[usize], stations: &[usize], with_hr: bool, dtype: DType) -> Result<Batch> {
    let lr = times.iter().map(|&t| data.lr(t)).collect::<Result<Vec<_>>>()?;
    let sat_views: Vec<_> = times.iter().map(|&t| data.satellite(t)).collect();
    let sat = ndarray::stack(Axis(0), &sat_views).map_err(|e| Error::Shape(e.to_string()))?;
    let inputs = ModelInputs::new(lr, tensor_from_f32(&sat, dtype)?, dtype)?;
    let hr = if with_hr {
        let hr = times.iter().map(|&t| data.hr(t)).collect::<Result<Vec<_>>>()?;
        let views: Vec<_> = hr.iter().map(|a| a.view()).collect();
        let stacked = ndarray::stack(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
        Some(tensor_from(&stacked, dtype)?)
    } else {
        None
    };
    let coords = data.station_coords(stations);
    let mut vals = Array3::zeros((times.len(), STATION_VARIABLES.len(), stations.len()));
    let mut mask = Array3::zeros(vals.dim());
    let mut n_valid = 0;
    for (b, &t) in times.iter().enumerate() {
        let (v, m) = data.station_values(t, stations)?;
        vals.index_axis_mut(Axis(0), b).assign(&v);
        for ((i, j), &ok) in m.indexed_iter() {
            if ok {
                mask[[b, i, j]] = 1.0;
                n_valid += 1;
            } else {
                vals[[b, i, j]] = 0.0;
            }
        }
    }
    Ok(Batch {
        times: times.to_vec(),
        inputs,
        hr,
        stations: coords,
        station_values: tensor_from(&vals, dtype)?,
        station_mask: tensor_from(&mask, dtype)?,
        n_valid,
    })
}

fn mse_tensor(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// Masked station MSE of `(B, 4, M)` predictions.
pub fn station_loss_tensor(pred: &Tensor, batch: &Batch) -> Result<Tensor> {
    if batch.n_valid == 0 {
        return Err(Error::DegenerateLoss("no valid station entries in batch".into()));
    }
    let d = ((pred - &batch.station_values)? * &batch.station_mask)?;
    Ok((d.sqr()?.sum_all()? / batch.n_valid as f64)?)
}

/// Stratified random subset: `per_block` distinct cells from each of
/// `blocks x blocks` equal tiles of `geom`.
pub fn stratified_cells<R: Rng + ?Sized>(geom: &GridGeometry, blocks: usize, per_block: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    if geom.rows % blocks != 0 || geom.cols % blocks != 0 {
        return Err(Error::Config(format!(
            "{blocks}x{blocks} sampling blocks do not tile a {}x{} grid",
            geom.rows, geom.cols
        )));
    }
    let (bh, bw) = (geom.rows / blocks, geom.cols / blocks);
    let n = per_block.min(bh * bw);
    let mut out = Vec::with_capacity(blocks * blocks * n);
    for bi in 0..blocks {
        for bj in 0..blocks {
            for k in rand::seq::index::sample(rng, bh * bw, n) {
                out.push((bi * bh + k / bw, bj * bw + k % bw));
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Hyperds(HyperDSConfig),
    Sr(SrConfig),
}

pub enum Model {
    HyperDS(HyperDS),
    Sr(SrNet),
}

/// Everything a checkpoint must match to be reusable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub spec: ModelSpec,
    pub domain: DomainSpec,
    pub shapes: Shapes,
}

impl Model {
    pub fn build(spec: &ModelSpec, domain: DomainSpec, shapes: Shapes, seed: u64, dtype: DType) -> Result<Self> {
        match spec {
            ModelSpec::Hyperds(cfg) => Ok(Model::HyperDS(HyperDS::new(cfg.clone(), domain, shapes, seed, dtype)?)),
            ModelSpec::Sr(cfg) => Ok(Model::Sr(SrNet::new(cfg.clone(), shapes, seed, dtype)?)),
        }
    }

    pub fn spec(&self) -> ModelSpec {
        match self {
            Model::HyperDS(m) => ModelSpec::Hyperds(m.cfg.clone()),
            Model::Sr(m) => ModelSpec::Sr(m.cfg.clone()),
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Model::HyperDS(m) => &m.params,
            Model::Sr(m) => &m.params,
        }
    }

    pub fn dtype(&self) -> DType {
        self.params().dtype()
    }

    fn shapes(&self) -> Shapes {
        match self {
            Model::HyperDS(m) => m.shapes,
            Model::Sr(m) => m.shapes,
        }
    }

    pub fn manifest(&self, domain: DomainSpec) -> ModelManifest {
        ModelManifest {
            spec: self.spec(),
            domain,
            shapes: self.shapes(),
        }
    }

    /// `(grid loss, station loss)` for one training batch.
    pub fn train_losses<R: Rng + ?Sized>(
        &self,
        batch: &Batch,
        domain: &DomainSpec,
        loss: &LossConfig,
        cfg: &TrainConfig,
        rng: &mut R,
    ) -> Result<(Tensor, Tensor)> {
        let hr_geom = domain.hr_geometry();
        let lr_geom = domain.lr_geometry();
        let k = domain.factor();
        let (th, tw) = (hr_geom.rows, hr_geom.cols);
        let b = batch.times.len();
        let v = self.shapes().n_vars;
        let dev = Device::Cpu;
        match self {
            Model::HyperDS(m) => {
                let w = m.weights(&batch.inputs)?;
                let p = m.cfg.samples_per_pixel;
                let grid = if loss.hr_supervision {
                    let label = batch
                        .hr
                        .as_ref()
                        .ok_or_else(|| Error::Config("batch lacks high-resolution labels".into()))?;
                    let pixels = match cfg.pixels_per_block {
                        Some(n) => stratified_cells(&hr_geom, cfg.sampling_blocks, n, rng)?,
                        None => PixelSamples::all_pixels(&hr_geom),
                    };
                    let samples = PixelSamples::draw(&hr_geom, &pixels, p, &batch.stations, rng)?;
                    let pred = m.forward_grid(&w, &batch.inputs, &samples)?;
                    let idx: Vec<u32> = pixels.iter().map(|&(i, j)| (i * tw + j) as u32).collect();
                    let idx = Tensor::from_vec(idx, pixels.len(), &dev)?;
                    let target = label.reshape((b, v, th * tw))?.index_select(&idx, 2)?;
                    mse_tensor(&pred, &target)?
                } else {
                    let cells = match cfg.cells_per_block {
                        Some(n) => stratified_cells(&lr_geom, cfg.sampling_blocks, n, rng)?,
                        None => PixelSamples::all_pixels(&lr_geom),
                    };
                    let pixels: Vec<(usize, usize)> = cells
                        .iter()
                        .flat_map(|&(ci, cj)| (0..k).flat_map(move |di| (0..k).map(move |dj| (ci * k + di, cj * k + dj))))
                        .collect();
                    let samples = PixelSamples::draw(&hr_geom, &pixels, p, &batch.stations, rng)?;
                    let pred = m.forward_grid(&w, &batch.inputs, &samples)?;
                    let pix: Vec<u32> = pixels.iter().map(|&(i, j)| (i * tw + j) as u32).collect();
                    let pix = Tensor::from_vec(pix, pixels.len(), &dev)?;
                    let up = resample(&batch.inputs.lr, th, tw)?.reshape((b, v, th * tw))?.index_select(&pix, 2)?;
                    let l_hr = mse_tensor(&up, &pred)?;
                    let cell_idx: Vec<u32> = cells.iter().map(|&(i, j)| (i * lr_geom.cols + j) as u32).collect();
                    let cell_idx = Tensor::from_vec(cell_idx, cells.len(), &dev)?;
                    let coarse = pred.reshape((b, v, cells.len(), k * k))?.mean(3)?;
                    let input = batch
                        .inputs
                        .lr
                        .reshape((b, v, lr_geom.rows * lr_geom.cols))?
                        .index_select(&cell_idx, 2)?;
                    (l_hr + mse_tensor(&input, &coarse)?)?
                };
                let stn = station_loss_tensor(&m.forward_stations(&w, &batch.inputs, &batch.stations)?, batch)?;
                Ok((grid, stn))
            }
            Model::Sr(net) => {
                let pred = net.forward(&batch.inputs.lr, &batch.inputs.satellite)?;
                let grid = if loss.hr_supervision {
                    let label = batch
                        .hr
                        .as_ref()
                        .ok_or_else(|| Error::Config("batch lacks high-resolution labels".into()))?;
                    mse_tensor(&pred, label)?
                } else {
                    let up = resample(&batch.inputs.lr, th, tw)?;
                    let l_hr = mse_tensor(&up, &pred)?;
                    let coarse = pred.avg_pool2d(k)?;
                    (l_hr + mse_tensor(&batch.inputs.lr, &coarse)?)?
                };
                let interp = interpolation_tensor(&hr_geom, &batch.stations, self.dtype())?;
                let stn = station_loss_tensor(&SrNet::stations_from_grid(&pred, &interp)?, batch)?;
                Ok((grid, stn))
            }
        }
    }

    /// Normalized station-roster predictions `(B, 4, M)`.
    pub fn predict_stations(&self, inputs: &ModelInputs, domain: &DomainSpec, coords: &[(f64, f64)]) -> Result<Tensor> {
        match self {
            Model::HyperDS(m) => {
                let w = m.weights(inputs)?;
                m.forward_stations(&w, inputs, coords)
            }
            Model::Sr(net) => {
                for &(lon, lat) in coords {
                    domain.check_inside(lon, lat)?;
                }
                let pred = net.forward(&inputs.lr, &inputs.satellite)?;
                let interp = interpolation_tensor(&domain.hr_geometry(), coords, self.dtype())?;
                SrNet::stations_from_grid(&pred, &interp)
            }
        }
    }

    /// Normalized full high-resolution prediction `(B, V, TH, TW)`.
    pub fn predict_grid(&self, inputs: &ModelInputs, domain: &DomainSpec, seed: u64) -> Result<Tensor> {
        match self {
            Model::HyperDS(m) => {
                let geom = domain.hr_geometry();
                let w = m.weights(inputs)?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let samples = PixelSamples::draw(&geom, &PixelSamples::all_pixels(&geom), m.cfg.samples_per_pixel, &[], &mut rng)?;
                let g = m.forward_grid(&w, inputs, &samples)?;
                Ok(g.reshape((inputs.batch(), m.shapes.n_vars, geom.rows, geom.cols))?)
            }
            Model::Sr(net) => net.forward(&inputs.lr, &inputs.satellite),
        }
    }
}

/// One row of the loss-curve CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub epoch: usize,
    pub grid_loss: f64,
    pub station_loss: f64,
    pub val_station_loss: f64,
}

pub const CURVE_HEADER: &str = "epoch,grid_loss,station_loss,val_station_loss";

pub fn format_curves_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{:e},{:e},{:e}\n",
            r.epoch, r.grid_loss, r.station_loss, r.val_station_loss
        ));
    }
    out
}

pub struct TrainOutcome {
    pub checkpoint: CheckpointBundle,
    pub curves: Vec<CurveRow>,
}

/// Mean normalized station loss of `model` over a split.
pub fn validation_station_loss(model: &Model, data: &DataAccess<'_>, split: Split, batch_size: usize) -> Result<f64> {
    let stations = data.station_indices(split);
    let times: Vec<usize> = data.times(split).collect();
    if stations.is_empty() || times.is_empty() {
        return Err(Error::EmptySplit(split.as_str().into()));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for chunk in times.chunks(batch_size) {
        let batch = load_batch(data, chunk, &stations, false, model.dtype())?;
        let pred = model.predict_stations(&batch.inputs, data.domain(), &batch.stations)?;
        let d = ((pred - &batch.station_values)? * &batch.station_mask)?;
        sum += scalar(&d.sqr()?.sum_all()?)?;
        n += batch.n_valid;
    }
    if n == 0 {
        return Err(Error::DegenerateLoss(format!("no valid {} station entries", split.as_str())));
    }
    Ok(sum / n as f64)
}

/// Trains `model` in place; returns the checkpoint of the epoch with the
/// lowest validation station loss and per-epoch curves.
pub fn train(model: &Model, data: &DataAccess<'_>, loss: &LossConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss.validate()?;
    let domain = *data.domain();
    let train_times: Vec<usize> = data.times(Split::Train).collect();
    let train_stations = data.station_indices(Split::Train);
    if train_times.is_empty() || train_stations.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    let iters = train_times.len().div_ceil(cfg.batch_size);
    let mut adam = Adam::new(model.params(), cfg);
    let manifest = model.manifest(domain);
    let hash = config_hash(&manifest)?;
    let mut best: Option<CheckpointBundle> = None;
    let mut curves = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 1000 + epoch as u64));
        let mut order = train_times.clone();
        order.shuffle(&mut rng);
        let (mut g_sum, mut s_sum) = (0.0, 0.0);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = load_batch(data, chunk, &train_stations, loss.hr_supervision, model.dtype())?;
            let (lg, ls) = model.train_losses(&batch, &domain, loss, cfg, &mut rng)?;
            let total = (&lg + (&ls * loss.beta)?)?;
            let (g, s, t) = (scalar(&lg)?, scalar(&ls)?, scalar(&total)?);
            if !t.is_finite() {
                return Err(Error::NonFinite {
                    what: "training loss".into(),
                    epoch,
                    batch: bi,
                });
            }
            let grads = total.backward()?;
            let lr = cfg.learning_rate_at(epoch * iters + bi, iters);
            let norm = adam.step(model.params(), &grads, lr, cfg.grad_clip)?;
            if !norm.is_finite() {
                return Err(Error::NonFinite {
                    what: "gradient norm".into(),
                    epoch,
                    batch: bi,
                });
            }
            g_sum += g;
            s_sum += s;
        }
        let val = validation_station_loss(model, data, Split::Val, cfg.batch_size)?;
        if !val.is_finite() {
            return Err(Error::NonFinite {
                what: "validation station loss".into(),
                epoch,
                batch: 0,
            });
        }
        log::info!(
            "epoch {epoch}: grid {:.5} station {:.5} val_station {:.5}",
            g_sum / iters as f64,
            s_sum / iters as f64,
            val
        );
        curves.push(CurveRow {
            epoch,
            grid_loss: g_sum / iters as f64,
            station_loss: s_sum / iters as f64,
            val_station_loss: val,
        });
        if best.as_ref().is_none_or(|b| val < b.val_station_loss) {
            best = Some(CheckpointBundle {
                model: serde_json::to_value(&manifest)?,
                config_hash: hash.clone(),
                epoch,
                val_station_loss: val,
                tensors: model.params().to_records()?,
            });
        }
    }
    Ok(TrainOutcome {
        checkpoint: best.expect("at least one epoch"),
        curves,
    })
}

/// Rebuilds a model from a checkpoint and checks it fits `data`.
pub fn load_model(bundle: &CheckpointBundle, data: &DataAccess<'_>, dtype: DType) -> Result<Model> {
    let manifest: ModelManifest = serde_json::from_value(bundle.model.clone())?;
    if config_hash(&manifest)? != bundle.config_hash {
        return Err(Error::Schema("checkpoint config hash does not match its model description".into()));
    }
    let shapes = data.shapes();
    let same = |a: &Shapes, b: &Shapes| {
        (a.n_vars, a.lr_h, a.lr_w, a.hr_h, a.hr_w, a.sat_h, a.sat_w, a.frames, a.channels)
            == (b.n_vars, b.lr_h, b.lr_w, b.hr_h, b.hr_w, b.sat_h, b.sat_w, b.frames, b.channels)
    };
    if !same(&manifest.shapes, &shapes) || manifest.domain != *data.domain() {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint expects {:?} over {:?}, dataset has {:?} over {:?}",
            manifest.shapes,
            manifest.domain,
            shapes,
            data.domain()
        )));
    }
    let model = Model::build(&manifest.spec, manifest.domain, manifest.shapes, 0, dtype)?;
    bundle.require(&model.params().names())?;
    model.params().load_records(&bundle.tensors)?;
    Ok(model)
}

/// Station-level scores of one method on one split.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub split: Split,
    pub domain: DomainSpec,
    /// Physical-unit MSE/MAE per station variable.
    pub rows: Vec<MetricsRow>,
    /// MSE per station variable in normalized units.
    pub normalized_mse: Vec<f64>,
    pub station_coords: Vec<(f64, f64)>,
    /// Normalized MSE per variable and station, `(4, M)`.
    pub station_errors: Array2<f64>,
    /// Normalized high-resolution grid MSE.
    pub grid_mse: Option<f64>,
    /// Physical high-resolution prediction at the split's first time step.
    pub grid_prediction: Option<Array3<f64>>,
}

impl EvalReport {
    pub fn mse(&self, variable: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.variable == variable).map(|r| r.mse)
    }

    pub fn to_json(&self) -> Result<String> {
        let stored = StoredReport {
            method: self.method.clone(),
            split: self.split.as_str().to_string(),
            domain: self.domain,
            rows: self
                .rows
                .iter()
                .map(|r| (r.variable.clone(), r.mse, r.mae, r.n_stations, r.n_times))
                .collect(),
            normalized_mse: self.normalized_mse.clone(),
            station_coords: self.station_coords.clone(),
            station_errors: self.station_errors.outer_iter().map(|r| r.to_vec()).collect(),
            grid_mse: self.grid_mse,
            grid_prediction: self.grid_prediction.as_ref().map(|g| (g.shape().to_vec(), g.iter().copied().collect())),
        };
        Ok(serde_json::to_string_pretty(&stored)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: StoredReport = serde_json::from_str(text)?;
        let m = s.station_coords.len();
        if s.station_errors.iter().any(|r| r.len() != m) || s.station_errors.len() != STATION_VARIABLES.len() {
            return Err(Error::Schema("per-station errors do not match the station list".into()));
        }
        let station_errors = Array2::from_shape_vec((s.station_errors.len(), m), s.station_errors.concat())
            .map_err(|e| Error::Schema(e.to_string()))?;
        let grid_prediction = match s.grid_prediction {
            Some((shape, data)) if shape.len() == 3 => Some(
                Array3::from_shape_vec((shape[0], shape[1], shape[2]), data).map_err(|e| Error::Schema(e.to_string()))?,
            ),
            Some(_) => return Err(Error::Schema("grid prediction must be rank 3".into())),
            None => None,
        };
        Ok(EvalReport {
            rows: s
                .rows
                .into_iter()
                .map(|(variable, mse, mae, n_stations, n_times)| MetricsRow {
                    method: s.method.clone(),
                    variable,
                    mse,
                    mae,
                    n_stations,
                    n_times,
                })
                .collect(),
            method: s.method,
            split: s.split.parse()?,
            domain: s.domain,
            normalized_mse: s.normalized_mse,
            station_coords: s.station_coords,
            station_errors,
            grid_mse: s.grid_mse,
            grid_prediction,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredReport {
    method: String,
    split: String,
    domain: DomainSpec,
    rows: Vec<(String, f64, f64, usize, usize)>,
    normalized_mse: Vec<f64>,
    station_coords: Vec<(f64, f64)>,
    station_errors: Vec<Vec<f64>>,
    grid_mse: Option<f64>,
    grid_prediction: Option<(Vec<usize>, Vec<f64>)>,
}

/// Scores physical-unit station predictions `(T, 4, M)` for `split`.
pub fn score_station_predictions(
    method: &str,
    data: &DataAccess<'_>,
    split: Split,
    pred: &Array3<f64>,
) -> Result<EvalReport> {
    let stations = data.station_indices(split);
    let times: Vec<usize> = data.times(split).collect();
    if stations.is_empty() || times.is_empty() {
        return Err(Error::EmptySplit(split.as_str().into()));
    }
    let (nt, ns, m) = (times.len(), STATION_VARIABLES.len(), stations.len());
    if pred.dim() != (nt, ns, m) {
        return Err(Error::Shape(format!("predictions {:?} do not match ({nt}, {ns}, {m})", pred.dim())));
    }
    let mut truth = Array3::zeros((nt, ns, m));
    let mut mask = Array3::from_elem((nt, ns, m), false);
    for (k, &t) in times.iter().enumerate() {
        let vals = data.ds.station_values.index_axis(Axis(0), t).select(Axis(1), &stations);
        let msk = data.ds.station_mask.index_axis(Axis(0), t).select(Axis(1), &stations);
        truth.index_axis_mut(Axis(0), k).assign(&vals);
        mask.index_axis_mut(Axis(0), k).assign(&msk);
    }
    data.record(AccessKind::StationValues, None, &stations);
    let mut rows = Vec::with_capacity(ns);
    let mut normalized_mse = Vec::with_capacity(ns);
    let mut station_errors = Array2::zeros((ns, m));
    for (v, name) in STATION_VARIABLES.iter().enumerate() {
        let p = pred.slice(s![.., v, ..]).t().to_owned();
        let y = truth.slice(s![.., v, ..]).t().to_owned();
        let mk = mask.slice(s![.., v, ..]).t().to_owned();
        let (mse, mae) = mse_mae(p.view(), y.view(), Some(mk.view()))?;
        let std = data.station_norm.get(name)?.std;
        rows.push(MetricsRow {
            method: method.to_string(),
            variable: name.to_string(),
            mse,
            mae,
            n_stations: m,
            n_times: nt,
        });
        normalized_mse.push(mse / (std * std));
        for st in 0..m {
            let (mut sum, mut n) = (0.0, 0);
            for k in 0..nt {
                if mk[[st, k]] {
                    sum += ((p[[st, k]] - y[[st, k]]) / std).powi(2);
                    n += 1;
                }
            }
            station_errors[[v, st]] = if n > 0 { sum / n as f64 } else { f64::NAN };
        }
    }
    Ok(EvalReport {
        method: method.to_string(),
        split,
        domain: *data.domain(),
        rows,
        normalized_mse,
        station_coords: data.ds.stations.coords_of(&stations),
        station_errors,
        grid_mse: None,
        grid_prediction: None,
    })
}

fn denormalize_grid(data: &DataAccess<'_>, mut a: Array3<f64>) -> Result<Array3<f64>> {
    let names: Vec<&str> = data.grid_norm.specs.iter().map(|s| s.short_name.as_str()).collect();
    data.grid_norm.denormalize(&mut a.view_mut(), &names)?;
    Ok(a)
}

/// Evaluates a trained model on `split`.
pub fn evaluate(method: &str, model: &Model, data: &DataAccess<'_>, split: Split, cfg: &TrainConfig) -> Result<EvalReport> {
    let stations = data.station_indices(split);
    let times: Vec<usize> = data.times(split).collect();
    if stations.is_empty() || times.is_empty() {
        return Err(Error::EmptySplit(split.as_str().into()));
    }
    let domain = *data.domain();
    let shapes = data.shapes();
    let mut pred = Array3::zeros((times.len(), STATION_VARIABLES.len(), stations.len()));
    let (mut grid_sum, mut grid_n) = (0.0, 0usize);
    let mut first_grid = None;
    let eval_seed = sub_seed(cfg.seed, 77);
    for (ci, chunk) in times.chunks(cfg.batch_size).enumerate() {
        let batch = load_batch(data, chunk, &stations, false, model.dtype())?;
        let p = model.predict_stations(&batch.inputs, &domain, &batch.stations)?;
        let vals = to_f64_vec(&p)?;
        let per = STATION_VARIABLES.len() * stations.len();
        for (b, _) in chunk.iter().enumerate() {
            let mut a = Array2::from_shape_vec((STATION_VARIABLES.len(), stations.len()), vals[b * per..(b + 1) * per].to_vec())
                .map_err(|e| Error::Shape(e.to_string()))?;
            data.station_norm.denormalize(&mut a.view_mut(), &STATION_VARIABLES)?;
            pred.index_axis_mut(Axis(0), ci * cfg.batch_size + b).assign(&a);
        }
        if cfg.grid_eval || ci == 0 {
            let g = model.predict_grid(&batch.inputs, &domain, eval_seed)?;
            let gv = to_f64_vec(&g)?;
            let per = shapes.n_vars * shapes.hr_h * shapes.hr_w;
            if ci == 0 {
                let a = Array3::from_shape_vec((shapes.n_vars, shapes.hr_h, shapes.hr_w), gv[..per].to_vec())
                    .map_err(|e| Error::Shape(e.to_string()))?;
                first_grid = Some(denormalize_grid(data, a)?);
            }
            if cfg.grid_eval {
                for (b, &t) in chunk.iter().enumerate() {
                    let label = data.hr(t)?;
                    for (x, y) in gv[b * per..(b + 1) * per].iter().zip(label.iter()) {
                        grid_sum += (x - y) * (x - y);
                    }
                    grid_n += per;
                }
            }
        }
    }
    let mut report = score_station_predictions(method, data, split, &pred)?;
    report.grid_mse = (grid_n > 0).then(|| grid_sum / grid_n as f64);
    report.grid_prediction = first_grid;
    Ok(report)
}

/// Bilinear interpolation of the input (`hr = false`) or of the
/// high-resolution label (`hr = true`).
pub fn evaluate_interpolation(data: &DataAccess<'_>, split: Split, hr: bool, grid_eval: bool) -> Result<EvalReport> {
    let stations = data.station_indices(split);
    let times: Vec<usize> = data.times(split).collect();
    let domain = *data.domain();
    let coords = data.station_coords(&stations);
    let geom = if hr { domain.hr_geometry() } else { domain.lr_geometry() };
    let mut pred = Array3::zeros((times.len(), STATION_VARIABLES.len(), stations.len()));
    let (mut grid_sum, mut grid_n) = (0.0, 0usize);
    let mut first = None;
    for (k, &t) in times.iter().enumerate() {
        let field = if hr {
            data.ds.hr.index_axis(Axis(0), t).to_owned()
        } else {
            data.ds.lr.index_axis(Axis(0), t).to_owned()
        };
        let p = interp_baseline(field.view(), &geom, &domain, &coords)?;
        pred.index_axis_mut(Axis(0), k).assign(&p);
        let up = if hr {
            field
        } else {
            bilinear_upsample(field.view(), &geom, &domain.hr_geometry())
        };
        if grid_eval {
            let label = data.hr(t)?;
            let mut upn = up.clone();
            let names: Vec<&str> = data.grid_norm.specs.iter().map(|s| s.short_name.as_str()).collect();
            data.grid_norm.normalize(&mut upn.view_mut(), &names)?;
            grid_sum += upn.iter().zip(label.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            grid_n += label.len();
        }
        if k == 0 {
            first = Some(up);
        }
    }
    let name = if hr { "interp_hr" } else { "interp_lr" };
    let mut report = score_station_predictions(name, data, split, &pred)?;
    report.grid_mse = (grid_n > 0).then(|| grid_sum / grid_n as f64);
    report.grid_prediction = first;
    Ok(report)
}

/// Per-variable method order by ascending MSE (ties by method name).
#[derive(Clone, Debug, PartialEq)]
pub struct Ranking {
    pub variable: String,
    pub methods: Vec<String>,
}

pub fn rank_methods(rows: &[MetricsRow]) -> Vec<Ranking> {
    STATION_VARIABLES
        .iter()
        .map(|var| {
            let mut r: Vec<&MetricsRow> = rows.iter().filter(|r| r.variable == *var).collect();
            r.sort_by(|a, b| a.mse.total_cmp(&b.mse).then_with(|| a.method.cmp(&b.method)));
            Ranking {
                variable: var.to_string(),
                methods: r.iter().map(|r| r.method.clone()).collect(),
            }
        })
        .collect()
}

/// Merges reports into one CSV row list plus rankings.
pub fn compare_methods(reports: &[EvalReport]) -> (Vec<MetricsRow>, Vec<Ranking>) {
    let rows: Vec<MetricsRow> = reports.iter().flat_map(|r| r.rows.iter().cloned()).collect();
    let ranking = rank_methods(&rows);
    (rows, ranking)
}

pub fn format_ranking(rankings: &[Ranking]) -> String {
    rankings
        .iter()
        .map(|r| format!("{}: {}\n", r.variable, r.methods.join(" < ")))
        .collect()
}
