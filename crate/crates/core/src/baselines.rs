//! Comparison methods: bilinear interpolation of a gridded field, and
//! super-resolution networks (UNet, EDSR) fed with satellite features.

use std::str::FromStr;

use candle_core::{DType, Tensor};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{bilinear_interpolate, to_station_roster, DomainSpec, GridGeometry};
use crate::io::Shapes;
use crate::nn::{resample, tensor_from, Conv2d, ParamStore};

/// Station-roster values `(4, M)` from bilinear interpolation of a
/// `(V, H, W)` field.
pub fn interp_baseline(values: ndarray::ArrayView3<'_, f64>, geom: &GridGeometry, domain: &DomainSpec, coords: &[(f64, f64)]) -> Result<Array2<f64>> {
    for &(lon, lat) in coords {
        domain.check_inside(lon, lat)?;
    }
    let vals = bilinear_interpolate(values, geom, coords);
    let mut out = Array2::zeros((4, coords.len()));
    for (m, col) in vals.columns().into_iter().enumerate() {
        let r = to_station_roster(&col.to_vec());
        for (v, x) in r.iter().enumerate() {
            out[[v, m]] = *x;
        }
    }
    Ok(out)
}

/// Dense `(M, H*W)` bilinear interpolation matrix for station coordinates.
pub fn interpolation_matrix(geom: &GridGeometry, coords: &[(f64, f64)]) -> Array2<f64> {
    let mut m = Array2::zeros((coords.len(), geom.rows * geom.cols));
    for (q, &(lon, lat)) in coords.iter().enumerate() {
        for (idx, w) in geom.interpolation_weights(lon, lat) {
            m[[q, idx]] += w;
        }
    }
    m
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SrArch {
    Unet,
    Edsr,
}

impl SrArch {
    pub fn as_str(&self) -> &'static str {
        match self {
            SrArch::Unet => "unet",
            SrArch::Edsr => "edsr",
        }
    }
}

impl FromStr for SrArch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unet" => Ok(SrArch::Unet),
            "edsr" => Ok(SrArch::Edsr),
            other => Err(Error::Config(format!("unknown super-resolution architecture `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SrConfig {
    pub arch: SrArch,
    /// Concatenate pooled satellite features onto the input field.
    pub observation_concat: bool,
    /// Channels produced by the satellite patch convolution.
    pub satellite_features: usize,
    pub unet_levels: usize,
    pub unet_width: usize,
    pub edsr_blocks: usize,
    pub edsr_width: usize,
}

impl Default for SrConfig {
    fn default() -> Self {
        SrConfig {
            arch: SrArch::Unet,
            observation_concat: true,
            satellite_features: 8,
            unet_levels: 3,
            unet_width: 32,
            edsr_blocks: 8,
            edsr_width: 64,
        }
    }
}

impl SrConfig {
    pub fn validate(&self, shapes: &Shapes) -> Result<()> {
        if self.satellite_features == 0 || self.unet_width == 0 || self.edsr_width == 0 || self.edsr_blocks == 0 {
            return Err(Error::Config("super-resolution sizes must be positive".into()));
        }
        let div = 1usize << self.unet_levels;
        if self.arch == SrArch::Unet && (shapes.lr_h % div != 0 || shapes.lr_w % div != 0) {
            return Err(Error::Config(format!(
                "{} UNet levels need the input size to be divisible by {div}",
                self.unet_levels
            )));
        }
        if shapes.hr_h % shapes.lr_h != 0 || shapes.hr_h / shapes.lr_h != shapes.hr_w / shapes.lr_w {
            return Err(Error::Config("grids do not nest by an integer factor".into()));
        }
        if shapes.sat_h % shapes.lr_h != 0 || shapes.sat_h / shapes.lr_h != shapes.sat_w / shapes.lr_w {
            return Err(Error::Config("satellite grid does not pool onto the input grid".into()));
        }
        Ok(())
    }
}

/// `(B, C*r*r, H, W)` -> `(B, C, H*r, W*r)`
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let co = c / (r * r);
    Ok(x
        .reshape((b, co, r, r, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .contiguous()?
        .reshape((b, co, h * r, w * r))?)
}

#[derive(Clone, Debug)]
struct ConvPair {
    a: Conv2d,
    b: Conv2d,
}

impl ConvPair {
    fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(ConvPair {
            a: Conv2d::new(ps, &format!("{name}.a"), c_in, c_out, 3, 1, 1.0)?,
            b: Conv2d::new(ps, &format!("{name}.b"), c_out, c_out, 3, 1, 1.0)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.b.forward(&self.a.forward(x)?.relu()?)?.relu()?)
    }
}

#[derive(Clone, Debug)]
enum Body {
    Unet {
        down: Vec<ConvPair>,
        bottom: ConvPair,
        up: Vec<ConvPair>,
    },
    Edsr {
        head: Conv2d,
        blocks: Vec<(Conv2d, Conv2d)>,
        tail: Conv2d,
    },
}

/// Super-resolution network mapping `(V [+ S], LH, LW)` to `(V, TH, TW)`.
pub struct SrNet {
    pub cfg: SrConfig,
    pub shapes: Shapes,
    pub params: ParamStore,
    sat_conv: Option<Conv2d>,
    body: Body,
    /// Sub-pixel output: `V * r * r` channels on the input grid.
    upsampler: Conv2d,
    factor: usize,
}

impl SrNet {
    pub fn new(cfg: SrConfig, shapes: Shapes, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate(&shapes)?;
        let mut ps = ParamStore::new(seed, dtype);
        let sat_conv = if cfg.observation_concat {
            Some(Conv2d::patchify(
                &mut ps,
                "satellite_conv",
                shapes.frames * shapes.channels,
                cfg.satellite_features,
                shapes.sat_h / shapes.lr_h,
            )?)
        } else {
            None
        };
        let c_in = shapes.n_vars + if cfg.observation_concat { cfg.satellite_features } else { 0 };
        let (body, c_body) = match cfg.arch {
            SrArch::Unet => {
                let mut down = Vec::new();
                let mut c = c_in;
                for l in 0..cfg.unet_levels {
                    let co = cfg.unet_width << l;
                    down.push(ConvPair::new(&mut ps, &format!("unet.down{l}"), c, co)?);
                    c = co;
                }
                let cb = cfg.unet_width << cfg.unet_levels;
                let bottom = ConvPair::new(&mut ps, "unet.bottom", c, cb)?;
                let mut up = Vec::new();
                let mut c = cb;
                for l in (0..cfg.unet_levels).rev() {
                    let skip = cfg.unet_width << l;
                    up.push(ConvPair::new(&mut ps, &format!("unet.up{l}"), c + skip, skip)?);
                    c = skip;
                }
                (Body::Unet { down, bottom, up }, cfg.unet_width)
            }
            SrArch::Edsr => {
                let w = cfg.edsr_width;
                let head = Conv2d::new(&mut ps, "edsr.head", c_in, w, 3, 1, 1.0)?;
                let blocks = (0..cfg.edsr_blocks)
                    .map(|i| {
                        Ok((
                            Conv2d::new(&mut ps, &format!("edsr.block{i}.a"), w, w, 3, 1, 1.0)?,
                            Conv2d::new(&mut ps, &format!("edsr.block{i}.b"), w, w, 3, 1, 0.1)?,
                        ))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let tail = Conv2d::new(&mut ps, "edsr.tail", w, w, 3, 1, 1.0)?;
                (Body::Edsr { head, blocks, tail }, w)
            }
        };
        let factor = shapes.hr_h / shapes.lr_h;
        let upsampler = Conv2d::new(&mut ps, "upsampler", c_body, shapes.n_vars * factor * factor, 3, 1, 0.1)?;
        Ok(SrNet {
            cfg,
            shapes,
            params: ps,
            sat_conv,
            body,
            upsampler,
            factor,
        })
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn input_channels(&self) -> usize {
        self.shapes.n_vars + if self.cfg.observation_concat { self.cfg.satellite_features } else { 0 }
    }

    /// Network input: the field with satellite patch features appended.
    pub fn assemble_input(&self, lr: &Tensor, satellite: &Tensor) -> Result<Tensor> {
        let Some(conv) = &self.sat_conv else {
            return Ok(lr.clone());
        };
        let s = &self.shapes;
        let (b, _, _, _) = lr.dims4()?;
        let x = satellite.reshape((b, s.frames * s.channels, s.sat_h, s.sat_w))?;
        let f = conv.forward(&x)?;
        Ok(Tensor::cat(&[lr, &f], 1)?)
    }

    /// `(B, V, LH, LW)` + `(B, 2, C, SH, SW)` -> `(B, V, TH, TW)`
    pub fn forward(&self, lr: &Tensor, satellite: &Tensor) -> Result<Tensor> {
        let (_, v, lh, lw) = lr.dims4()?;
        if (v, lh, lw) != (self.shapes.n_vars, self.shapes.lr_h, self.shapes.lr_w) {
            return Err(Error::Shape(format!("super-resolution input {:?} has the wrong shape", lr.dims())));
        }
        let x = self.assemble_input(lr, satellite)?;
        let feats = match &self.body {
            Body::Unet { down, bottom, up } => {
                let mut skips = Vec::new();
                let mut h = x;
                for d in down {
                    h = d.forward(&h)?;
                    skips.push(h.clone());
                    h = h.avg_pool2d(2)?;
                }
                h = bottom.forward(&h)?;
                for u in up {
                    let skip = skips.pop().expect("one skip per level");
                    let (_, _, sh, sw) = skip.dims4()?;
                    h = h.upsample_nearest2d(sh, sw)?;
                    h = u.forward(&Tensor::cat(&[&h, &skip], 1)?)?;
                }
                h
            }
            Body::Edsr { head, blocks, tail } => {
                let h0 = head.forward(&x)?;
                let mut h = h0.clone();
                for (a, b) in blocks {
                    h = (&h + b.forward(&a.forward(&h)?.relu()?)?)?;
                }
                (tail.forward(&h)? + h0)?
            }
        };
        let residual = pixel_shuffle(&self.upsampler.forward(&feats)?, self.factor)?;
        let base = resample(lr, self.shapes.hr_h, self.shapes.hr_w)?;
        Ok((base + residual)?)
    }

    /// Station-roster values `(B, 4, M)` interpolated from a prediction.
    pub fn stations_from_grid(pred: &Tensor, interp: &Tensor) -> Result<Tensor> {
        let (b, v, h, w) = pred.dims4()?;
        let flat = pred.reshape((b, v, h * w))?;
        let vals = flat.broadcast_matmul(&interp.t()?)?;
        crate::model::station_roster(&vals)
    }
}

/// Interpolation matrix as a tensor, `(M, H*W)`.
pub fn interpolation_tensor(geom: &GridGeometry, coords: &[(f64, f64)], dtype: DType) -> Result<Tensor> {
    tensor_from(&interpolation_matrix(geom, coords), dtype)
}
