//! Training losses and station metrics on plain arrays.
//!
//! Sums use pairwise reduction so results do not depend on array length
//! beyond rounding at the 1e-15 level.

use ndarray::{ArrayView2, ArrayView3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{area_downsample, bilinear_upsample, DomainSpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the station term.
    pub beta: f64,
    /// Supervise with high-resolution labels; otherwise use the
    /// interpolation and conservation terms.
    pub hr_supervision: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: 0.05,
            hr_supervision: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Pairwise summation.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 16 {
        return xs.iter().sum();
    }
    let (a, b) = xs.split_at(xs.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

fn check_same(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("shape {a:?} does not match {b:?}")));
    }
    Ok(())
}

/// Mean squared error over every `(v, i, j)`.
pub fn grid_loss(pred: ArrayView3<'_, f64>, label: ArrayView3<'_, f64>) -> Result<f64> {
    check_same(pred.shape(), label.shape())?;
    if pred.is_empty() {
        return Err(Error::DegenerateLoss("empty grid".into()));
    }
    let sq: Vec<f64> = pred.iter().zip(label.iter()).map(|(p, l)| (p - l) * (p - l)).collect();
    Ok(pairwise_sum(&sq) / sq.len() as f64)
}

/// Interpolation plus conservation loss for training without
/// high-resolution labels. Returns `(l_hr, l_lr)`.
pub fn grid_loss_no_hr_terms(
    pred: ArrayView3<'_, f64>,
    input: ArrayView3<'_, f64>,
    domain: &DomainSpec,
) -> Result<(f64, f64)> {
    let (v, th, tw) = pred.dim();
    let (vi, lh, lw) = input.dim();
    let lr = domain.lr_geometry();
    let hr = domain.hr_geometry();
    if v != vi || (lh, lw) != (lr.rows, lr.cols) || (th, tw) != (hr.rows, hr.cols) {
        return Err(Error::Shape(format!(
            "prediction {:?} and input {:?} do not nest for this domain",
            pred.shape(),
            input.shape()
        )));
    }
    let up = bilinear_upsample(input, &lr, &hr);
    let l_hr = grid_loss(up.view(), pred)?;
    let down = area_downsample(pred, domain.factor())?;
    let l_lr = grid_loss(input, down.view())?;
    Ok((l_hr, l_lr))
}

pub fn grid_loss_no_hr(pred: ArrayView3<'_, f64>, input: ArrayView3<'_, f64>, domain: &DomainSpec) -> Result<f64> {
    let (a, b) = grid_loss_no_hr_terms(pred, input, domain)?;
    Ok(a + b)
}

/// Masked mean squared error over `(variable, station)` entries.
pub fn station_loss(
    pred: ArrayView2<'_, f64>,
    label: ArrayView2<'_, f64>,
    mask: ArrayView2<'_, bool>,
) -> Result<f64> {
    check_same(pred.shape(), label.shape())?;
    check_same(pred.shape(), mask.shape())?;
    let mut sq = Vec::with_capacity(pred.len());
    Zip::from(&pred).and(&label).and(&mask).for_each(|p, l, &m| {
        if m {
            sq.push((p - l) * (p - l));
        }
    });
    if sq.is_empty() {
        return Err(Error::DegenerateLoss("no valid station entries".into()));
    }
    Ok(pairwise_sum(&sq) / sq.len() as f64)
}

/// `L_grid + beta * L_stn`
pub fn total_loss(l_grid: f64, l_stn: f64, cfg: &LossConfig) -> f64 {
    l_grid + cfg.beta * l_stn
}

/// Masked MSE and MAE over stations x times for one variable.
pub fn mse_mae(
    pred: ArrayView2<'_, f64>,
    truth: ArrayView2<'_, f64>,
    mask: Option<ArrayView2<'_, bool>>,
) -> Result<(f64, f64)> {
    check_same(pred.shape(), truth.shape())?;
    if let Some(m) = &mask {
        check_same(pred.shape(), m.shape())?;
    }
    let mut sq = Vec::with_capacity(pred.len());
    let mut ab = Vec::with_capacity(pred.len());
    for ((idx, p), t) in pred.indexed_iter().zip(truth.iter()) {
        if mask.as_ref().is_none_or(|m| m[idx]) {
            let e = p - t;
            sq.push(e * e);
            ab.push(e.abs());
        }
    }
    if sq.is_empty() {
        return Err(Error::DegenerateLoss("no valid entries to score".into()));
    }
    let n = sq.len() as f64;
    Ok((pairwise_sum(&sq) / n, pairwise_sum(&ab) / n))
}
