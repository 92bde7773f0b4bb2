//! Parameter storage and small differentiable building blocks.
//!
//! Parameters are initialized from a seeded ChaCha stream and kept in a
//! name-ordered map, so initialization, optimizer updates and checkpoints
//! are reproducible.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use ndarray::{Array, Dimension};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::TensorRecord;

/// Seeded, name-ordered collection of trainable tensors.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        ParamStore {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("parameter `{name}` declared twice")));
        }
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                std * z
            })
            .collect();
        self.insert(name, shape, data)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.insert(name, shape, data)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, shape, vec![value; n])
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }

    pub fn n_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Parameters as `f32` records in name order.
    pub fn to_records(&self) -> Result<Vec<TensorRecord>> {
        self.vars
            .iter()
            .map(|(name, v)| {
                let data = v.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
                TensorRecord::new(name.clone(), v.dims().to_vec(), data)
            })
            .collect()
    }

    /// Overwrites every parameter from `records`; all names must be present
    /// with matching shapes.
    pub fn load_records(&self, records: &[TensorRecord]) -> Result<()> {
        let by_name: BTreeMap<&str, &TensorRecord> = records.iter().map(|r| (r.name.as_str(), r)).collect();
        let missing: Vec<&str> = self
            .vars
            .keys()
            .map(String::as_str)
            .filter(|n| !by_name.contains_key(n))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Schema(format!("checkpoint is missing parameters: {}", missing.join(", "))));
        }
        for (name, var) in &self.vars {
            let r = by_name[name.as_str()];
            if r.shape != var.dims() {
                return Err(Error::ConfigMismatch(format!(
                    "parameter `{name}` has shape {:?} in the checkpoint but {:?} in the model",
                    r.shape,
                    var.dims()
                )));
            }
            let t = Tensor::from_vec(r.data.clone(), r.shape.as_slice(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }

    /// Copies every parameter value from `other` (same names and shapes).
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        for (name, var) in &self.vars {
            let src = other
                .get(name)
                .ok_or_else(|| Error::Schema(format!("missing parameter `{name}`")))?;
            var.set(&src.as_tensor().to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// Tensor from an `f64` array, cast to `dtype`.
pub fn tensor_from<Dm: Dimension>(a: &Array<f64, Dm>, dtype: DType) -> Result<Tensor> {
    let data: Vec<f64> = a.iter().copied().collect();
    Ok(Tensor::from_vec(data, a.shape(), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn tensor_from_f32<Dm: Dimension>(a: &Array<f32, Dm>, dtype: DType) -> Result<Tensor> {
    let data: Vec<f32> = a.iter().copied().collect();
    Ok(Tensor::from_vec(data, a.shape(), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Flattened tensor values as `f64`.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// `y = x W + b` on the last axis; `W` is `(in, out)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Ok(Linear {
            w: ps.uniform(&format!("{name}.weight"), &[fan_in, fan_out], bound)?,
            b: ps.constant(&format!("{name}.bias"), &[fan_out], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.w)?.broadcast_add(&self.b)?)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: Tensor,
    pub b: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
    ) -> Result<Self> {
        let fan_in = (c_in * kernel * kernel) as f64;
        Ok(Conv2d {
            w: ps.normal(
                &format!("{name}.weight"),
                &[c_out, c_in, kernel, kernel],
                gain * (2.0 / fan_in).sqrt(),
            )?,
            b: ps.constant(&format!("{name}.bias"), &[c_out], 0.0)?,
            stride,
            padding: kernel / 2,
        })
    }

    /// Non-overlapping `patch x patch` convolution with stride `patch`.
    pub fn patchify(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, patch: usize) -> Result<Self> {
        let mut conv = Conv2d::new(ps, name, c_in, c_out, patch, patch, 1.0)?;
        conv.padding = 0;
        Ok(conv)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (c_out, _, k, _) = self.w.dims4()?;
        let (_, _, h, w) = x.dims4()?;
        let y = if self.stride == k && self.padding == 0 && h % k == 0 && w % k == 0 {
            self.forward_patches(x)?
        } else if self.stride == 1 && 2 * self.padding + 1 == k && h * w <= IM2COL_MAX_PIXELS {
            self.forward_im2col(x)?
        } else {
            x.conv2d(&self.w, self.padding, self.stride, 1, 1)?
        };
        Ok(y.broadcast_add(&self.b.reshape((1, c_out, 1, 1))?)?)
    }

    /// Non-overlapping patches as one matrix product.
    fn forward_patches(&self, x: &Tensor) -> Result<Tensor> {
        let (c_out, c_in, p, _) = self.w.dims4()?;
        let (b, _, h, w) = x.dims4()?;
        let (ho, wo) = (h / p, w / p);
        let cols = x
            .reshape((b, c_in, ho, p, wo, p))?
            .permute((0, 1, 3, 5, 2, 4))?
            .reshape((b, c_in * p * p, ho * wo))?;
        let wm = self.w.reshape((c_out, c_in * p * p))?;
        Ok(wm.broadcast_matmul(&cols)?.reshape((b, c_out, ho, wo))?)
    }

    /// Same-size stride-1 convolution through shifted copies and a matrix
    /// product; on small grids its backward pass is much cheaper than the
    /// direct one.
    fn forward_im2col(&self, x: &Tensor) -> Result<Tensor> {
        let (c_out, c_in, k, _) = self.w.dims4()?;
        let (b, _, h, w) = x.dims4()?;
        let pad = self.padding;
        let xp = x.pad_with_zeros(2, pad, pad)?.pad_with_zeros(3, pad, pad)?;
        let mut shifted = Vec::with_capacity(k * k);
        for di in 0..k {
            for dj in 0..k {
                shifted.push(xp.narrow(2, di, h)?.narrow(3, dj, w)?);
            }
        }
        let cols = Tensor::stack(&shifted, 2)?.reshape((b, c_in * k * k, h * w))?;
        let wm = self.w.reshape((c_out, c_in * k * k))?;
        Ok(wm.broadcast_matmul(&cols)?.reshape((b, c_out, h, w))?)
    }
}

/// Largest grid routed through the matrix-product convolution.
const IM2COL_MAX_PIXELS: usize = 1024;

/// Layer normalization over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: ps.constant(&format!("{name}.gamma"), &[dim], 1.0)?,
            beta: ps.constant(&format!("{name}.beta"), &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let y = xc.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(y.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Center-aligned bilinear resampling weights `(n_out, n_in)` for one axis.
pub fn resample_axis(n_in: usize, n_out: usize) -> ndarray::Array2<f64> {
    let mut m = ndarray::Array2::zeros((n_out, n_in));
    for o in 0..n_out {
        let f = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        if n_in == 1 {
            m[[o, 0]] = 1.0;
            continue;
        }
        let lo = (f.floor() as usize).min(n_in - 2);
        let t = f - lo as f64;
        m[[o, lo]] += 1.0 - t;
        m[[o, lo + 1]] += t;
    }
    m
}

/// Bilinear resampling of `(B, C, H, W)` to `(B, C, oh, ow)`.
pub fn resample(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (oh, ow) {
        return Ok(x.clone());
    }
    let ry = tensor_from(&resample_axis(h, oh), x.dtype())?;
    let rx = tensor_from(&resample_axis(w, ow), x.dtype())?;
    // rows: (oh, h) x (b*c, h, w) -> (b*c, oh, w); then columns.
    let x = x.reshape((b * c, h, w))?;
    let y = ry.unsqueeze(0)?.broadcast_matmul(&x)?;
    let y = y.broadcast_matmul(&rx.t()?.unsqueeze(0)?)?;
    Ok(y.reshape((b, c, oh, ow))?)
}

/// Residual basic block (two 3x3 convolutions) without normalization.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl BasicBlock {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        let shortcut = if stride != 1 || c_in != c_out {
            Some(Conv2d::new(ps, &format!("{name}.shortcut"), c_in, c_out, 1, stride, 0.5)?)
        } else {
            None
        };
        Ok(BasicBlock {
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), c_in, c_out, 3, stride, 1.0)?,
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), c_out, c_out, 3, 1, 0.1)?,
            shortcut,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(x)?.relu()?;
        let h = self.conv2.forward(&h)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

/// Residual convolutional backbone truncated after `stage` stages.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub base_width: usize,
    /// Patch size of the stem convolution; `1` keeps full resolution.
    pub stem_pool: usize,
    /// Number of residual stages kept; stages after the first halve resolution.
    pub stage: usize,
    pub blocks_per_stage: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            base_width: 64,
            stem_pool: 4,
            stage: 2,
            blocks_per_stage: 2,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.stem_pool == 0 || self.stage == 0 || self.blocks_per_stage == 0 {
            return Err(Error::Config("backbone sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.base_width << (self.stage - 1)
    }

    /// Total spatial reduction factor.
    pub fn reduction(&self) -> usize {
        self.stem_pool << (self.stage - 1)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    stem: Conv2d,
    blocks: Vec<BasicBlock>,
}

impl Backbone {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let stem = if cfg.stem_pool > 1 {
            Conv2d::patchify(ps, &format!("{name}.stem"), c_in, cfg.base_width, cfg.stem_pool)?
        } else {
            Conv2d::new(ps, &format!("{name}.stem"), c_in, cfg.base_width, 3, 1, 1.0)?
        };
        let mut blocks = Vec::new();
        let mut c = cfg.base_width;
        for s in 0..cfg.stage {
            let c_out = cfg.base_width << s;
            for k in 0..cfg.blocks_per_stage {
                let stride = if s > 0 && k == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(ps, &format!("{name}.stage{}.{k}", s + 1), c, c_out, stride)?);
                c = c_out;
            }
        }
        Ok(Backbone { stem, blocks })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.stem.forward(x)?.relu()?;
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        Ok(h)
    }
}
