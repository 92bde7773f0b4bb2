//! HyperDS: dual-branch encoders, attention-based retrieval of satellite
//! information into the field token grid, a hypernetwork that emits MLP
//! weights, and coordinate-based decoding at arbitrary points.

use std::f64::consts::PI;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{bilinear_interpolate, sample_inner_points_with, DomainSpec, GridGeometry, SubgridSampleSet};
use crate::io::Shapes;
use crate::nn::{resample, softmax_last, tensor_from, Backbone, BackboneConfig, Conv2d, LayerNorm, Linear, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderVariant {
    /// One fully generated MLP per spatial block.
    MultiBlock,
    /// One MLP per variable; shallow layers generated, deep layers learned.
    MultiVar,
}

impl FromStr for DecoderVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi_block" => Ok(DecoderVariant::MultiBlock),
            "multi_var" => Ok(DecoderVariant::MultiVar),
            other => Err(Error::Config(format!("unknown decoder variant `{other}`"))),
        }
    }
}

/// Which token stream supplies the attention queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryStream {
    Field,
    Satellite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperDSConfig {
    pub feature_channels: usize,
    /// Token grid `(h, w)`; defaults to the low-resolution grid size.
    pub feature_size: Option<[usize; 2]>,
    pub field_backbone: BackboneConfig,
    pub satellite_backbone: BackboneConfig,
    pub self_attention_layers: usize,
    pub cross_attention_layers: usize,
    pub heads: usize,
    pub ffn_multiplier: usize,
    pub query_stream: QueryStream,
    pub variant: DecoderVariant,
    pub blocks_per_axis: usize,
    /// Linear layers per MLP.
    pub mlp_depth: usize,
    pub mlp_width: usize,
    /// Generated leading layers per variable MLP (`multi_var`).
    pub generated_layers: usize,
    pub samples_per_pixel: usize,
    pub fourier_frequencies: usize,
    /// Add the interpolated input values to the decoder output.
    pub interpolation_residual: bool,
}

impl Default for HyperDSConfig {
    fn default() -> Self {
        HyperDSConfig {
            feature_channels: 128,
            feature_size: None,
            field_backbone: BackboneConfig::default(),
            satellite_backbone: BackboneConfig::default(),
            self_attention_layers: 2,
            cross_attention_layers: 2,
            heads: 4,
            ffn_multiplier: 2,
            query_stream: QueryStream::Field,
            variant: DecoderVariant::MultiBlock,
            blocks_per_axis: 4,
            mlp_depth: 5,
            mlp_width: 64,
            generated_layers: 2,
            samples_per_pixel: 10,
            fourier_frequencies: 6,
            interpolation_residual: true,
        }
    }
}

impl HyperDSConfig {
    pub fn token_grid(&self, shapes: &Shapes) -> (usize, usize) {
        match self.feature_size {
            Some([h, w]) => (h, w),
            None => (shapes.lr_h, shapes.lr_w),
        }
    }

    pub fn validate(&self, shapes: &Shapes) -> Result<()> {
        let positive = [
            self.feature_channels,
            self.heads,
            self.ffn_multiplier,
            self.blocks_per_axis,
            self.mlp_width,
            self.samples_per_pixel,
            self.fourier_frequencies,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        self.field_backbone.validate()?;
        self.satellite_backbone.validate()?;
        if self.feature_channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "feature_channels {} is not divisible by heads {}",
                self.feature_channels, self.heads
            )));
        }
        if self.mlp_depth < 2 {
            return Err(Error::Config("mlp_depth must be at least 2".into()));
        }
        if self.variant == DecoderVariant::MultiVar
            && (self.generated_layers == 0 || self.generated_layers > self.mlp_depth)
        {
            return Err(Error::Config(format!(
                "generated_layers must lie in 1..={}",
                self.mlp_depth
            )));
        }
        let (h, w) = self.token_grid(shapes);
        if h == 0 || w == 0 {
            return Err(Error::Config("feature_size must be positive".into()));
        }
        if self.variant == DecoderVariant::MultiBlock {
            let nb = self.blocks_per_axis;
            if shapes.hr_h % nb != 0 || shapes.hr_w % nb != 0 {
                return Err(Error::Config(format!(
                    "{nb}x{nb} blocks do not tile the {}x{} grid",
                    shapes.hr_h, shapes.hr_w
                )));
            }
            if h % nb != 0 || w % nb != 0 {
                return Err(Error::Config(format!("{nb}x{nb} blocks do not tile the {h}x{w} token grid")));
            }
        }
        if shapes.lr_h < self.field_backbone.reduction() || shapes.sat_h < self.satellite_backbone.reduction() {
            return Err(Error::Config("backbone reduces the input below one pixel".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self, n_vars: usize) -> usize {
        4 * self.fourier_frequencies + n_vars
    }

    /// `(fan_in, fan_out)` per MLP layer.
    pub fn layer_dims(&self, n_vars: usize) -> Vec<(usize, usize)> {
        let out = match self.variant {
            DecoderVariant::MultiBlock => n_vars,
            DecoderVariant::MultiVar => 1,
        };
        (0..self.mlp_depth)
            .map(|l| {
                let i = if l == 0 { self.input_dim(n_vars) } else { self.mlp_width };
                let o = if l + 1 == self.mlp_depth { out } else { self.mlp_width };
                (i, o)
            })
            .collect()
    }
}

/// Fourier features of unit coordinates: `sin, cos` of `pi 2^k x` and
/// `pi 2^k y` for each octave `k`.
pub fn fourier_features(u: f64, w: f64, n_freq: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(4 * n_freq);
    for k in 0..n_freq {
        let f = PI * (1u64 << k) as f64;
        out.extend_from_slice(&[(f * u).sin(), (f * u).cos(), (f * w).sin(), (f * w).cos()]);
    }
    out
}

/// Per-batch inputs in normalized units.
#[derive(Clone, Debug)]
pub struct ModelInputs {
    /// `(B, V, LH, LW)`
    pub lr: Tensor,
    /// `(B, 2, C, SH, SW)`
    pub satellite: Tensor,
    /// Same values as `lr`, kept for auxiliary interpolation.
    pub lr_values: Vec<Array3<f64>>,
}

impl ModelInputs {
    pub fn new(lr_values: Vec<Array3<f64>>, satellite: Tensor, dtype: DType) -> Result<Self> {
        if lr_values.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let views: Vec<_> = lr_values.iter().map(|a| a.view()).collect();
        let stacked = ndarray::stack(ndarray::Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(ModelInputs {
            lr: tensor_from(&stacked, dtype)?,
            satellite: satellite.to_dtype(dtype)?,
            lr_values,
        })
    }

    pub fn batch(&self) -> usize {
        self.lr_values.len()
    }
}

/// Inner points of a list of pixels, `P` per pixel, pixel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelSamples {
    pub pixels: Vec<(usize, usize)>,
    pub p: usize,
    pub points: Vec<(f64, f64)>,
}

impl PixelSamples {
    pub fn from_sets(sets: &[SubgridSampleSet]) -> Result<Self> {
        let p = sets.first().map(|s| s.len()).unwrap_or(0);
        if sets.iter().any(|s| s.len() != p) {
            return Err(Error::Shape("every pixel needs the same sample count".into()));
        }
        Ok(PixelSamples {
            pixels: sets.iter().map(|s| s.pixel).collect(),
            p,
            points: sets.iter().flat_map(|s| s.point_list()).collect(),
        })
    }

    /// Draws samples for `pixels`; stations inside a pixel come first.
    pub fn draw<R: Rng + ?Sized>(
        geom: &GridGeometry,
        pixels: &[(usize, usize)],
        p: usize,
        stations: &[(f64, f64)],
        rng: &mut R,
    ) -> Result<Self> {
        let mut by_pixel: std::collections::BTreeMap<(usize, usize), Vec<(f64, f64)>> = Default::default();
        for &(lon, lat) in stations {
            by_pixel.entry(geom.locate(lon, lat)).or_default().push((lon, lat));
        }
        let sets = pixels
            .iter()
            .map(|px| {
                let st = by_pixel.get(px).map(Vec::as_slice).unwrap_or(&[]);
                sample_inner_points_with(geom, *px, p, st, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_sets(&sets)
    }

    pub fn all_pixels(geom: &GridGeometry) -> Vec<(usize, usize)> {
        (0..geom.rows).flat_map(|i| (0..geom.cols).map(move |j| (i, j))).collect()
    }
}

/// Multi-head attention; returns output and attention weights `(B, H, Nq, Nk)`.
#[derive(Clone, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    fn new(ps: &mut ParamStore, name: &str, c: usize, heads: usize) -> Result<Self> {
        Ok(Attention {
            q: Linear::new(ps, &format!("{name}.q"), c, c)?,
            k: Linear::new(ps, &format!("{name}.k"), c, c)?,
            v: Linear::new(ps, &format!("{name}.v"), c, c)?,
            o: Linear::new(ps, &format!("{name}.o"), c, c)?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        Ok(x.reshape((b, n, self.heads, c / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    fn forward(&self, xq: &Tensor, xkv: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, nq, c) = xq.dims3()?;
        let d = c / self.heads;
        let q = self.split(&self.q.forward(xq)?)?;
        let k = self.split(&self.k.forward(xkv)?)?;
        let v = self.split(&self.v.forward(xkv)?)?;
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (d as f64).sqrt())?;
        let attn = softmax_last(&scores)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, nq, c))?;
        Ok((self.o.forward(&out)?, attn))
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    l1: Linear,
    l2: Linear,
}

impl FeedForward {
    fn new(ps: &mut ParamStore, name: &str, c: usize, mult: usize) -> Result<Self> {
        Ok(FeedForward {
            l1: Linear::new(ps, &format!("{name}.l1"), c, c * mult)?,
            l2: Linear::new(ps, &format!("{name}.l2"), c * mult, c)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.l2.forward(&self.l1.forward(x)?.gelu_erf()?)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

impl EncoderLayer {
    fn new(ps: &mut ParamStore, name: &str, c: usize, heads: usize, mult: usize) -> Result<Self> {
        Ok(EncoderLayer {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), c)?,
            attn: Attention::new(ps, &format!("{name}.attn"), c, heads)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), c)?,
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), c, mult)?,
        })
    }

    fn forward(&self, x: &Tensor, probe: &mut Vec<Tensor>) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let (a, w) = self.attn.forward(&h, &h)?;
        probe.push(w);
        let x = (x + a)?;
        Ok((&x + self.ffn.forward(&self.ln2.forward(&x)?)?)?)
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    cross_attn: Attention,
    ln3: LayerNorm,
    ffn: FeedForward,
}

impl DecoderLayer {
    fn new(ps: &mut ParamStore, name: &str, c: usize, heads: usize, mult: usize) -> Result<Self> {
        Ok(DecoderLayer {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), c)?,
            self_attn: Attention::new(ps, &format!("{name}.self_attn"), c, heads)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), c)?,
            cross_attn: Attention::new(ps, &format!("{name}.cross_attn"), c, heads)?,
            ln3: LayerNorm::new(ps, &format!("{name}.ln3"), c)?,
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), c, mult)?,
        })
    }

    fn forward(&self, x: &Tensor, memory: &Tensor, probe: &mut Vec<Tensor>) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let (a, w) = self.self_attn.forward(&h, &h)?;
        probe.push(w);
        let x = (x + a)?;
        let (a, w) = self.cross_attn.forward(&self.ln2.forward(&x)?, memory)?;
        probe.push(w);
        let x = (x + a)?;
        Ok((&x + self.ffn.forward(&self.ln3.forward(&x)?)?)?)
    }
}

/// Fused token features `(B, h*w, C_f)` and every attention matrix.
#[derive(Clone, Debug)]
pub struct RetrievalOutput {
    pub fused: Tensor,
    pub attention: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Generated,
    Learnable,
}

/// One MLP layer for every (sample, MLP) pair.
#[derive(Clone, Debug)]
pub struct MlpLayer {
    /// `(B*K, in, out)` for blocks, `(B, V, in, out)` or `(V, in, out)` for variables.
    pub w: Tensor,
    /// Bias with a singleton point axis before `out`.
    pub b: Tensor,
    pub kind: LayerKind,
}

/// Target-network weights for one batch.
#[derive(Clone, Debug)]
pub struct DecoderWeights {
    pub variant: DecoderVariant,
    pub batch: usize,
    /// MLPs per sample: blocks for `multi_block`, variables for `multi_var`.
    pub n_mlps: usize,
    pub layers: Vec<MlpLayer>,
}

impl DecoderWeights {
    pub fn kinds(&self) -> Vec<LayerKind> {
        self.layers.iter().map(|l| l.kind).collect()
    }
}

/// Linear map from pooled features to one layer's parameters, plus a
/// per-MLP offset (one per block or variable).
#[derive(Clone, Debug)]
struct GeneratedLayer {
    map_w: Tensor,
    map_b: Tensor,
    own_w: Tensor,
    own_b: Tensor,
    fan_in: usize,
    fan_out: usize,
}

impl GeneratedLayer {
    /// `shared_map`: one map applied to per-MLP pooled features; otherwise a
    /// single global feature vector maps to every MLP's parameters.
    fn new(
        ps: &mut ParamStore,
        name: &str,
        c: usize,
        n_mlps: usize,
        shared_map: bool,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self> {
        let map_std = 0.5 / (c as f64).sqrt();
        let copies = if shared_map { 1 } else { n_mlps };
        Ok(GeneratedLayer {
            map_w: ps.normal(&format!("{name}.map_w"), &[c, copies * fan_in * fan_out], map_std)?,
            map_b: ps.normal(&format!("{name}.map_b"), &[c, copies * fan_out], 0.1 * map_std)?,
            own_w: ps.normal(&format!("{name}.own_w"), &[n_mlps, fan_in * fan_out], 1.0 / (fan_in as f64).sqrt())?,
            own_b: ps.constant(&format!("{name}.own_b"), &[n_mlps, fan_out], 0.0)?,
            fan_in,
            fan_out,
        })
    }

    /// Scale on the mapped part keeping generated activations at unit order;
    /// the learnable offsets are stored at their final scale.
    fn scale(&self) -> f64 {
        1.0 / (self.fan_in as f64).sqrt()
    }

    /// `z`: `(B, C)` shared by all MLPs, or `(B, K, C)` one row per MLP.
    fn generate(&self, z: &Tensor, n_mlps: usize) -> Result<(Tensor, Tensor)> {
        let b = z.dims()[0];
        let (fi, fo) = (self.fan_in, self.fan_out);
        let (w, bias) = if z.rank() == 2 {
            let w = z.matmul(&self.map_w)?.reshape((b, n_mlps, fi * fo))?;
            let bias = z.matmul(&self.map_b)?.reshape((b, n_mlps, fo))?;
            (w, bias)
        } else {
            (z.broadcast_matmul(&self.map_w)?, z.broadcast_matmul(&self.map_b)?)
        };
        let w = (w * self.scale())?.broadcast_add(&self.own_w)?;
        let bias = (bias * self.scale())?.broadcast_add(&self.own_b)?;
        Ok((w, bias))
    }
}

pub struct HyperDS {
    pub cfg: HyperDSConfig,
    pub domain: DomainSpec,
    pub shapes: Shapes,
    pub params: ParamStore,
    field_backbone: Backbone,
    field_proj: Conv2d,
    sat_backbone: Backbone,
    sat_proj: Conv2d,
    pos_field: Tensor,
    pos_sat: Tensor,
    encoder: Vec<EncoderLayer>,
    encoder_norm: LayerNorm,
    decoder: Vec<DecoderLayer>,
    decoder_norm: LayerNorm,
    generated: Vec<GeneratedLayer>,
    learned: Vec<(Tensor, Tensor)>,
}

impl HyperDS {
    pub fn new(cfg: HyperDSConfig, domain: DomainSpec, shapes: Shapes, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate(&shapes)?;
        domain.validate()?;
        let mut ps = ParamStore::new(seed, dtype);
        let c = cfg.feature_channels;
        let (h, w) = cfg.token_grid(&shapes);
        let field_backbone = Backbone::new(&mut ps, "field_encoder", shapes.n_vars, cfg.field_backbone)?;
        let field_proj = Conv2d::new(&mut ps, "field_encoder.proj", cfg.field_backbone.out_channels(), c, 1, 1, 1.0)?;
        let sat_backbone = Backbone::new(&mut ps, "satellite_encoder", shapes.channels, cfg.satellite_backbone)?;
        let sat_proj = Conv2d::new(
            &mut ps,
            "satellite_encoder.proj",
            shapes.frames * cfg.satellite_backbone.out_channels(),
            c,
            1,
            1,
            1.0,
        )?;
        let pos_field = ps.normal("retrieval.pos_field", &[h * w, c], 0.02)?;
        let pos_sat = ps.normal("retrieval.pos_satellite", &[h * w, c], 0.02)?;
        let encoder = (0..cfg.self_attention_layers)
            .map(|i| EncoderLayer::new(&mut ps, &format!("retrieval.encoder{i}"), c, cfg.heads, cfg.ffn_multiplier))
            .collect::<Result<Vec<_>>>()?;
        let encoder_norm = LayerNorm::new(&mut ps, "retrieval.encoder_norm", c)?;
        let decoder = (0..cfg.cross_attention_layers)
            .map(|i| DecoderLayer::new(&mut ps, &format!("retrieval.decoder{i}"), c, cfg.heads, cfg.ffn_multiplier))
            .collect::<Result<Vec<_>>>()?;
        let decoder_norm = LayerNorm::new(&mut ps, "retrieval.decoder_norm", c)?;

        let dims = cfg.layer_dims(shapes.n_vars);
        let (n_mlps, n_gen) = match cfg.variant {
            DecoderVariant::MultiBlock => (cfg.blocks_per_axis * cfg.blocks_per_axis, cfg.mlp_depth),
            DecoderVariant::MultiVar => (shapes.n_vars, cfg.generated_layers),
        };
        let generated = dims[..n_gen]
            .iter()
            .enumerate()
            .map(|(l, &(i, o))| {
                let shared = cfg.variant == DecoderVariant::MultiBlock;
                GeneratedLayer::new(&mut ps, &format!("generator.layer{l}"), c, n_mlps, shared, i, o)
            })
            .collect::<Result<Vec<_>>>()?;
        let learned = dims[n_gen..]
            .iter()
            .enumerate()
            .map(|(k, &(i, o))| {
                let l = n_gen + k;
                let bound = 1.0 / (i as f64).sqrt();
                Ok((
                    ps.uniform(&format!("decoder.layer{l}.weight"), &[n_mlps, i, o], bound)?,
                    ps.constant(&format!("decoder.layer{l}.bias"), &[n_mlps, 1, o], 0.0)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(HyperDS {
            cfg,
            domain,
            shapes,
            params: ps,
            field_backbone,
            field_proj,
            sat_backbone,
            sat_proj,
            pos_field,
            pos_sat,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            generated,
            learned,
        })
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn token_grid(&self) -> (usize, usize) {
        self.cfg.token_grid(&self.shapes)
    }

    fn n_mlps(&self) -> usize {
        match self.cfg.variant {
            DecoderVariant::MultiBlock => self.cfg.blocks_per_axis * self.cfg.blocks_per_axis,
            DecoderVariant::MultiVar => self.shapes.n_vars,
        }
    }

    /// `(B, V, LH, LW)` -> `(B, C_f, h, w)`
    pub fn encode_field(&self, lr: &Tensor) -> Result<Tensor> {
        let (_, v, lh, lw) = lr.dims4()?;
        let s = &self.shapes;
        if (v, lh, lw) != (s.n_vars, s.lr_h, s.lr_w) {
            return Err(Error::Shape(format!(
                "field input {:?} does not match ({}, {}, {})",
                lr.dims(),
                s.n_vars,
                s.lr_h,
                s.lr_w
            )));
        }
        let f = self.field_proj.forward(&self.field_backbone.forward(lr)?)?;
        let (h, w) = self.token_grid();
        resample(&f, h, w)
    }

    /// `(B, 2, C, SH, SW)` -> `(B, C_f, h, w)`; one backbone shared by both frames.
    pub fn encode_satellite(&self, frames: &Tensor) -> Result<Tensor> {
        let dims = frames.dims();
        let s = &self.shapes;
        if dims.len() != 5 || dims[1] != s.frames || dims[2] != s.channels || dims[3] != s.sat_h || dims[4] != s.sat_w {
            return Err(Error::Shape(format!(
                "satellite input {dims:?} does not match (B, {}, {}, {}, {})",
                s.frames, s.channels, s.sat_h, s.sat_w
            )));
        }
        let b = dims[0];
        let x = frames.reshape((b * s.frames, s.channels, s.sat_h, s.sat_w))?;
        let f = self.sat_backbone.forward(&x)?;
        let (_, c, fh, fw) = f.dims4()?;
        let f = f.reshape((b, s.frames * c, fh, fw))?;
        let f = self.sat_proj.forward(&f)?;
        let (h, w) = self.token_grid();
        resample(&f, h, w)
    }

    fn tokens(x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
    }

    /// Attention over satellite tokens, then field-token queries retrieving
    /// from them (or the reverse, per `query_stream`).
    pub fn implicit_retrieval(&self, f_sat: &Tensor, f_field: &Tensor) -> Result<RetrievalOutput> {
        if f_sat.dims() != f_field.dims() {
            return Err(Error::Shape(format!(
                "token grids differ: satellite {:?}, field {:?}",
                f_sat.dims(),
                f_field.dims()
            )));
        }
        let sat = Self::tokens(f_sat)?.broadcast_add(&self.pos_sat)?;
        let field = Self::tokens(f_field)?.broadcast_add(&self.pos_field)?;
        let (queries, mut memory) = match self.cfg.query_stream {
            QueryStream::Field => (field, sat),
            QueryStream::Satellite => (sat, field),
        };
        let mut attention = Vec::new();
        for layer in &self.encoder {
            memory = layer.forward(&memory, &mut attention)?;
        }
        let memory = self.encoder_norm.forward(&memory)?;
        let mut x = queries;
        for layer in &self.decoder {
            x = layer.forward(&x, &memory, &mut attention)?;
        }
        Ok(RetrievalOutput {
            fused: self.decoder_norm.forward(&x)?,
            attention,
        })
    }

    /// Pooled token features per block, `(B, K, C)`.
    fn pool_blocks(&self, fused: &Tensor) -> Result<Tensor> {
        let (b, _, c) = fused.dims3()?;
        let (h, w) = self.token_grid();
        let nb = self.cfg.blocks_per_axis;
        let x = fused.reshape((b, nb, h / nb, nb, w / nb, c))?;
        Ok(x.mean(4)?.mean(2)?.reshape((b, nb * nb, c))?)
    }

    pub fn generate_weights(&self, fused: &Tensor) -> Result<DecoderWeights> {
        let (b, _, _) = fused.dims3()?;
        let k = self.n_mlps();
        let mut layers = Vec::with_capacity(self.cfg.mlp_depth);
        match self.cfg.variant {
            DecoderVariant::MultiBlock => {
                let z = self.pool_blocks(fused)?;
                for g in &self.generated {
                    let (w, bias) = g.generate(&z, k)?;
                    layers.push(MlpLayer {
                        w: w.reshape((b * k, g.fan_in, g.fan_out))?,
                        b: bias.reshape((b * k, 1, g.fan_out))?,
                        kind: LayerKind::Generated,
                    });
                }
            }
            DecoderVariant::MultiVar => {
                let z = fused.mean(1)?;
                for g in &self.generated {
                    let (w, bias) = g.generate(&z, k)?;
                    layers.push(MlpLayer {
                        w: w.reshape((b, k, g.fan_in, g.fan_out))?,
                        b: bias.reshape((b, k, 1, g.fan_out))?,
                        kind: LayerKind::Generated,
                    });
                }
                for (w, bias) in &self.learned {
                    layers.push(MlpLayer {
                        w: w.clone(),
                        b: bias.clone(),
                        kind: LayerKind::Learnable,
                    });
                }
            }
        }
        Ok(DecoderWeights {
            variant: self.cfg.variant,
            batch: b,
            n_mlps: k,
            layers,
        })
    }

    /// Encoders, retrieval and weight generation for one batch.
    pub fn weights(&self, inputs: &ModelInputs) -> Result<DecoderWeights> {
        let f_field = self.encode_field(&inputs.lr)?;
        let f_sat = self.encode_satellite(&inputs.satellite)?;
        let fused = self.implicit_retrieval(&f_sat, &f_field)?.fused;
        self.generate_weights(&fused)
    }

    /// Decoder input rows `(B, Q, 4F + V)`: Fourier features of the unit
    /// coordinates, then the input field interpolated at each point.
    pub fn point_features(&self, inputs: &ModelInputs, coords: &[(f64, f64)]) -> Result<Tensor> {
        let nf = self.cfg.fourier_frequencies;
        let nv = self.shapes.n_vars;
        let d = self.cfg.input_dim(nv);
        let geom = self.domain.lr_geometry();
        let b = inputs.batch();
        let mut feats = ndarray::Array3::<f64>::zeros((b, coords.len(), d));
        let fourier: Vec<Vec<f64>> = coords
            .iter()
            .map(|&(lon, lat)| {
                let (u, w) = self.domain.to_unit(lon, lat);
                fourier_features(u, w, nf)
            })
            .collect();
        for (s, lr) in inputs.lr_values.iter().enumerate() {
            let aux = bilinear_interpolate(lr.view(), &geom, coords);
            for (q, f) in fourier.iter().enumerate() {
                for (k, &x) in f.iter().enumerate() {
                    feats[[s, q, k]] = x;
                }
                for v in 0..nv {
                    feats[[s, q, 4 * nf + v]] = aux[[v, q]];
                }
            }
        }
        tensor_from(&feats, self.dtype())
    }

    /// Block owning each point: half-open intervals on the high-resolution grid.
    pub fn route(&self, coords: &[(f64, f64)]) -> Result<Vec<usize>> {
        let geom = self.domain.hr_geometry();
        let nb = self.cfg.blocks_per_axis;
        let (bh, bw) = (geom.rows / nb, geom.cols / nb);
        coords
            .iter()
            .map(|&(lon, lat)| {
                if !self.domain.contains(lon, lat) {
                    return Err(Error::Routing(format!("point ({lon}, {lat}) lies outside every block")));
                }
                let (i, j) = geom.locate(lon, lat);
                Ok((i / bh) * nb + j / bw)
            })
            .collect()
    }

    /// Evaluates the target networks at `coords`, `(B, Q, V)`.
    pub fn mlp_decode(&self, weights: &DecoderWeights, inputs: &ModelInputs, coords: &[(f64, f64)]) -> Result<Tensor> {
        let x = self.point_features(inputs, coords)?;
        let y = match weights.variant {
            DecoderVariant::MultiBlock => {
                let blocks = self.route(coords)?;
                decode_routed(weights, &x, &blocks)?
            }
            DecoderVariant::MultiVar => decode_per_variable(weights, &x)?,
        };
        if self.cfg.interpolation_residual {
            let nv = self.shapes.n_vars;
            Ok((y + x.narrow(2, 4 * self.cfg.fourier_frequencies, nv)?)?)
        } else {
            Ok(y)
        }
    }

    /// Subgrid-averaged pixel means, `(B, V, n_pixels)`.
    pub fn forward_grid(&self, weights: &DecoderWeights, inputs: &ModelInputs, samples: &PixelSamples) -> Result<Tensor> {
        let y = self.mlp_decode(weights, inputs, &samples.points)?;
        pixel_mean(&y, samples.pixels.len(), samples.p)
    }

    /// Station-roster predictions `(B, 4, M)`; wind speed composed from the
    /// decoded components.
    pub fn forward_stations(&self, weights: &DecoderWeights, inputs: &ModelInputs, coords: &[(f64, f64)]) -> Result<Tensor> {
        for &(lon, lat) in coords {
            self.domain.check_inside(lon, lat)?;
        }
        let y = self.mlp_decode(weights, inputs, coords)?;
        station_roster(&y.transpose(1, 2)?.contiguous()?)
    }
}

/// `(B, V, Q)` grid-variable values -> `(B, 4, Q)` station roster.
pub fn station_roster(y: &Tensor) -> Result<Tensor> {
    use crate::grid::{SP, T2M, TP1H, U10, V10};
    let u = y.narrow(1, U10, 1)?;
    let v = y.narrow(1, V10, 1)?;
    let ws = ((u.sqr()? + v.sqr()?)? + 1e-12)?.sqrt()?;
    Ok(Tensor::cat(
        &[&ws, &y.narrow(1, SP, 1)?, &y.narrow(1, T2M, 1)?, &y.narrow(1, TP1H, 1)?],
        1,
    )?)
}

/// Averages `P` consecutive point predictions per pixel:
/// `(B, n*P, V)` -> `(B, V, n)`.
pub fn pixel_mean(y: &Tensor, n_pixels: usize, p: usize) -> Result<Tensor> {
    let (b, q, v) = y.dims3()?;
    if q != n_pixels * p {
        return Err(Error::Shape(format!("{q} points do not form {n_pixels} pixels of {p} samples")));
    }
    Ok(y.reshape((b, n_pixels, p, v))?.mean(2)?.transpose(1, 2)?.contiguous()?)
}

fn run_mlp(weights: &DecoderWeights, mut h: Tensor) -> Result<Tensor> {
    let last = weights.layers.len() - 1;
    for (l, layer) in weights.layers.iter().enumerate() {
        h = h.broadcast_matmul(&layer.w)?.broadcast_add(&layer.b)?;
        if l < last {
            h = h.gelu_erf()?;
        }
    }
    Ok(h)
}

/// Groups points by block into a padded `(B*K, N_max, D)` batch, runs each
/// block's MLP and scatters results back to input order.
fn decode_routed(weights: &DecoderWeights, x: &Tensor, blocks: &[usize]) -> Result<Tensor> {
    let (b, q, d) = x.dims3()?;
    let k = weights.n_mlps;
    if b != weights.batch {
        return Err(Error::Shape(format!("weights for {} samples, inputs for {b}", weights.batch)));
    }
    let mut counts = vec![0usize; k];
    for &blk in blocks {
        if blk >= k {
            return Err(Error::Routing(format!("block {blk} does not exist")));
        }
        counts[blk] += 1;
    }
    let n_max = counts.iter().copied().max().unwrap_or(0).max(1);
    let mut src = vec![0u32; k * n_max];
    let mut slot = vec![0u32; q];
    let mut fill = vec![0usize; k];
    for (i, &blk) in blocks.iter().enumerate() {
        let s = blk * n_max + fill[blk];
        fill[blk] += 1;
        src[s] = i as u32;
        slot[i] = s as u32;
    }
    let dev = Device::Cpu;
    let src = Tensor::from_vec(src, k * n_max, &dev)?;
    let slot = Tensor::from_vec(slot, q, &dev)?;
    let xp = x.index_select(&src, 1)?.reshape((b * k, n_max, d))?;
    let y = run_mlp(weights, xp)?;
    let v = y.dim(2)?;
    Ok(y.reshape((b, k * n_max, v))?.index_select(&slot, 1)?)
}

/// Runs every variable's MLP on every point: `(B, Q, D)` -> `(B, Q, V)`.
fn decode_per_variable(weights: &DecoderWeights, x: &Tensor) -> Result<Tensor> {
    let y = run_mlp(weights, x.unsqueeze(1)?)?;
    Ok(y.squeeze(3)?.transpose(1, 2)?.contiguous()?)
}

/// Deterministic sample sets for every pixel of `geom`.
pub fn full_grid_samples<R: Rng + ?Sized>(
    geom: &GridGeometry,
    p: usize,
    stations: &[(f64, f64)],
    rng: &mut R,
) -> Result<PixelSamples> {
    PixelSamples::draw(geom, &PixelSamples::all_pixels(geom), p, stations, rng)
}

/// Row-major `(n, 2)` array of `(lon, lat)` pairs.
pub fn coord_array(coords: &[(f64, f64)]) -> Array2<f64> {
    Array2::from_shape_fn((coords.len(), 2), |(i, c)| if c == 0 { coords[i].0 } else { coords[i].1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_f64_vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_shapes() -> Shapes {
        Shapes {
            n_vars: 5,
            lr_h: 4,
            lr_w: 4,
            hr_h: 8,
            hr_w: 8,
            sat_h: 16,
            sat_w: 16,
            frames: 2,
            channels: 4,
            n_times: 1,
            n_stations: 0,
            n_station_vars: 4,
        }
    }

    pub(crate) fn tiny_domain() -> DomainSpec {
        DomainSpec {
            lon_min: 100.0,
            lon_max: 104.0,
            lat_min: 20.0,
            lat_max: 24.0,
            lr_cell: 1.0,
            hr_cell: 0.5,
        }
    }

    pub(crate) fn tiny_config(variant: DecoderVariant) -> HyperDSConfig {
        let bb = BackboneConfig {
            base_width: 4,
            stem_pool: 1,
            stage: 2,
            blocks_per_stage: 1,
        };
        HyperDSConfig {
            feature_channels: 8,
            feature_size: Some([4, 4]),
            field_backbone: bb,
            satellite_backbone: BackboneConfig { stem_pool: 2, ..bb },
            self_attention_layers: 1,
            cross_attention_layers: 1,
            heads: 2,
            ffn_multiplier: 2,
            query_stream: QueryStream::Field,
            variant,
            blocks_per_axis: 2,
            mlp_depth: 3,
            mlp_width: 8,
            generated_layers: 1,
            samples_per_pixel: 3,
            fourier_frequencies: 2,
            interpolation_residual: false,
        }
    }

    pub(crate) fn tiny_inputs(seed: u64, b: usize, dtype: DType) -> ModelInputs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lr: Vec<Array3<f64>> = (0..b)
            .map(|_| Array3::from_shape_fn((5, 4, 4), |_| rng.random_range(-1.0..1.0)))
            .collect();
        let sat = ndarray::Array5::from_shape_fn((b, 2, 4, 16, 16), |_| rng.random_range(-1.0..1.0));
        ModelInputs::new(lr, tensor_from(&sat, dtype).unwrap(), dtype).unwrap()
    }

    fn model(variant: DecoderVariant) -> HyperDS {
        HyperDS::new(tiny_config(variant), tiny_domain(), tiny_shapes(), 7, DType::F64).unwrap()
    }

    #[test]
    fn default_encoder_shapes() {
        let shapes = Shapes {
            lr_h: 16,
            lr_w: 16,
            hr_h: 64,
            hr_w: 64,
            sat_h: 128,
            sat_w: 128,
            ..tiny_shapes()
        };
        let cfg = HyperDSConfig {
            field_backbone: BackboneConfig { base_width: 8, ..Default::default() },
            satellite_backbone: BackboneConfig { base_width: 8, ..Default::default() },
            ..Default::default()
        };
        let m = HyperDS::new(cfg, DomainSpec::default(), shapes, 0, DType::F32).unwrap();
        let lr = Tensor::ones((1, 5, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(m.encode_field(&lr).unwrap().dims(), &[1, 128, 16, 16]);
        let sat = Tensor::ones((1, 2, 4, 128, 128), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(m.encode_satellite(&sat).unwrap().dims(), &[1, 128, 16, 16]);
        let bad = Tensor::ones((1, 4, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(m.encode_field(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn encoders_are_batch_independent() {
        let m = model(DecoderVariant::MultiBlock);
        let inp = tiny_inputs(1, 2, DType::F64);
        let both = to_f64_vec(&m.encode_field(&inp.lr).unwrap()).unwrap();
        let first = to_f64_vec(&m.encode_field(&inp.lr.narrow(0, 0, 1).unwrap()).unwrap()).unwrap();
        for (a, b) in first.iter().zip(&both) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(first.iter().zip(&both[first.len()..]).any(|(a, b)| (a - b).abs() > 1e-6));
    }

    #[test]
    fn satellite_encoder_is_siamese_and_order_sensitive() {
        let m = model(DecoderVariant::MultiBlock);
        let inp = tiny_inputs(2, 1, DType::F64);
        let f0 = inp.satellite.narrow(1, 0, 1).unwrap();
        let f1 = inp.satellite.narrow(1, 1, 1).unwrap();
        let swapped = Tensor::cat(&[&f1, &f0], 1).unwrap();
        let a = to_f64_vec(&m.encode_satellite(&inp.satellite).unwrap()).unwrap();
        let b = to_f64_vec(&m.encode_satellite(&swapped).unwrap()).unwrap();
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-8));
        // identical frames: both halves of the concatenation see the same backbone output
        let dup = Tensor::cat(&[&f0, &f0], 1).unwrap();
        let feats = m.sat_backbone.forward(&f0.squeeze(1).unwrap()).unwrap();
        let manual = m
            .sat_proj
            .forward(&Tensor::cat(&[&feats, &feats], 1).unwrap())
            .unwrap();
        let manual = resample(&manual, 4, 4).unwrap();
        let got = m.encode_satellite(&dup).unwrap();
        let diff = (got - manual).unwrap().abs().unwrap().max_all().unwrap();
        assert!(crate::nn::scalar(&diff).unwrap() < 1e-12);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let m = model(DecoderVariant::MultiBlock);
        let inp = tiny_inputs(3, 2, DType::F64);
        let out = m
            .implicit_retrieval(&m.encode_satellite(&inp.satellite).unwrap(), &m.encode_field(&inp.lr).unwrap())
            .unwrap();
        assert_eq!(out.fused.dims(), &[2, 16, 8]);
        assert_eq!(out.attention.len(), 3);
        for a in &out.attention {
            for s in to_f64_vec(&a.sum(3).unwrap()).unwrap() {
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
        let zeros = Tensor::zeros((2, 8, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let z = m.implicit_retrieval(&zeros, &m.encode_field(&inp.lr).unwrap()).unwrap();
        assert!(to_f64_vec(&z.fused).unwrap().iter().all(|x| x.is_finite()));
        let small = Tensor::zeros((2, 8, 2, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(m.implicit_retrieval(&small, &zeros).is_err());
    }

    #[test]
    fn weight_counts_and_tags() {
        let mb = model(DecoderVariant::MultiBlock);
        let inp = tiny_inputs(4, 2, DType::F64);
        let w = mb.weights(&inp).unwrap();
        assert_eq!(w.n_mlps, 4);
        assert_eq!(w.layers[0].w.dims(), &[2 * 4, 13, 8]);
        assert!(w.kinds().iter().all(|k| *k == LayerKind::Generated));
        let mv = model(DecoderVariant::MultiVar);
        let w = mv.weights(&inp).unwrap();
        assert_eq!(w.n_mlps, 5);
        assert_eq!(w.kinds(), vec![LayerKind::Generated, LayerKind::Learnable, LayerKind::Learnable]);
    }

    #[test]
    fn zero_features_give_map_biases() {
        let m = model(DecoderVariant::MultiBlock);
        let zeros = Tensor::zeros((1, 16, 8), DType::F64, &Device::Cpu).unwrap();
        let w = m.generate_weights(&zeros).unwrap();
        let g = &m.generated[0];
        assert_eq!(to_f64_vec(&w.layers[0].w).unwrap(), to_f64_vec(&g.own_w).unwrap());
        assert_eq!(to_f64_vec(&w.layers[0].b).unwrap(), to_f64_vec(&g.own_b).unwrap());
    }

    #[test]
    fn routing_uses_half_open_blocks() {
        let m = model(DecoderVariant::MultiBlock);
        // blocks split lon at 102 and lat at 22
        let r = m.route(&[(102.0, 23.0), (101.9, 23.0), (101.0, 22.0), (104.0, 20.0)]).unwrap();
        assert_eq!(r, vec![1, 0, 2, 3]);
        assert!(matches!(m.route(&[(99.0, 21.0)]), Err(Error::Routing(_))));
    }

    #[test]
    fn constant_decoder_gives_constant_pixels() {
        let m = model(DecoderVariant::MultiBlock);
        let inp = tiny_inputs(5, 1, DType::F64);
        let mut w = m.weights(&inp).unwrap();
        let last = w.layers.len() - 1;
        w.layers[last].w = w.layers[last].w.zeros_like().unwrap();
        w.layers[last].b = (w.layers[last].b.ones_like().unwrap() * 1.25).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = full_grid_samples(&m.domain.hr_geometry(), 3, &[], &mut rng).unwrap();
        let g = m.forward_grid(&w, &inp, &s).unwrap();
        assert_eq!(g.dims(), &[1, 5, 64]);
        assert!(to_f64_vec(&g).unwrap().iter().all(|&x| (x - 1.25).abs() < 1e-15));
    }

    #[test]
    fn hand_built_identity_mlp_reproduces_interpolation() {
        let m = model(DecoderVariant::MultiBlock);
        let inp = tiny_inputs(6, 1, DType::F64);
        let mut w = m.weights(&inp).unwrap();
        let (d, hid, nv) = (13, 8, 5);
        let shift = 10.0;
        let k = w.n_mlps;
        let mut w0 = Array3::<f64>::zeros((k, d, hid));
        for blk in 0..k {
            for v in 0..nv {
                w0[[blk, 8 + v, v]] = 1.0;
            }
        }
        let eye = Array3::from_shape_fn((k, hid, hid), |(_, i, j)| if i == j { 1.0 } else { 0.0 });
        let mut w2 = Array3::<f64>::zeros((k, hid, nv));
        for blk in 0..k {
            for v in 0..nv {
                w2[[blk, v, v]] = 1.0;
            }
        }
        let b0 = Array3::from_elem((k, 1, hid), shift);
        let b2 = Array3::from_elem((k, 1, nv), -shift);
        let zero = Array3::<f64>::zeros((k, 1, hid));
        let set = |a: &Array3<f64>| tensor_from(a, DType::F64).unwrap();
        w.layers[0].w = set(&w0);
        w.layers[0].b = set(&b0);
        w.layers[1].w = set(&eye);
        w.layers[1].b = set(&zero);
        w.layers[2].w = set(&w2);
        w.layers[2].b = set(&b2);
        let pts = vec![(100.3, 23.1), (102.7, 20.4), (103.99, 21.5)];
        let got = m.mlp_decode(&w, &inp, &pts).unwrap();
        let want = bilinear_interpolate(inp.lr_values[0].view(), &m.domain.lr_geometry(), &pts);
        let got = to_f64_vec(&got).unwrap();
        for q in 0..3 {
            for v in 0..5 {
                assert!((got[q * 5 + v] - want[[v, q]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pixel_mean_is_permutation_invariant() {
        let m = model(DecoderVariant::MultiVar);
        let inp = tiny_inputs(7, 1, DType::F64);
        let w = m.weights(&inp).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = PixelSamples::draw(&m.domain.hr_geometry(), &[(0, 0), (3, 5)], 4, &[], &mut rng).unwrap();
        let mut perm = s.clone();
        perm.points[..4].reverse();
        perm.points[4..].rotate_left(1);
        let a = to_f64_vec(&m.forward_grid(&w, &inp, &s).unwrap()).unwrap();
        let b = to_f64_vec(&m.forward_grid(&w, &inp, &perm).unwrap()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn single_center_sample_equals_pointwise_decode() {
        let m = model(DecoderVariant::MultiBlock);
        let inp = tiny_inputs(8, 1, DType::F64);
        let w = m.weights(&inp).unwrap();
        let geom = m.domain.hr_geometry();
        let c = geom.center(2, 6);
        let s = PixelSamples {
            pixels: vec![(2, 6)],
            p: 1,
            points: vec![c],
        };
        let g = to_f64_vec(&m.forward_grid(&w, &inp, &s).unwrap()).unwrap();
        let p = to_f64_vec(&m.mlp_decode(&w, &inp, &[c]).unwrap()).unwrap();
        assert_eq!(g, p);
    }

    #[test]
    fn station_at_sample_point_matches_bitwise() {
        for variant in [DecoderVariant::MultiBlock, DecoderVariant::MultiVar] {
            let m = model(variant);
            let inp = tiny_inputs(9, 1, DType::F32);
            let m32 = HyperDS::new(tiny_config(variant), tiny_domain(), tiny_shapes(), 7, DType::F32).unwrap();
            let w = m32.weights(&inp).unwrap();
            let station = (101.37, 22.81);
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let px = m.domain.hr_geometry().locate(station.0, station.1);
            let s = PixelSamples::draw(&m.domain.hr_geometry(), &[(0, 0), px], 3, &[station], &mut rng).unwrap();
            assert_eq!(s.points[3], station);
            let all = m32.mlp_decode(&w, &inp, &s.points).unwrap();
            let one = m32.mlp_decode(&w, &inp, &[station]).unwrap();
            let a: Vec<f32> = all.narrow(1, 3, 1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let b: Vec<f32> = one.flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(a, b, "{variant:?}");
        }
    }

    #[test]
    fn wind_speed_is_composed() {
        let y = tensor_from(
            &Array3::from_shape_vec((1, 5, 1), vec![3.0, 4.0, 0.5, -0.5, 0.1]).unwrap(),
            DType::F64,
        )
        .unwrap();
        let r = to_f64_vec(&station_roster(&y).unwrap()).unwrap();
        assert!((r[0] - 5.0).abs() < 1e-12);
        assert_eq!(&r[1..], &[-0.5, 0.5, 0.1]);
    }

    #[test]
    fn stations_outside_domain_are_rejected() {
        let m = model(DecoderVariant::MultiVar);
        let inp = tiny_inputs(10, 1, DType::F64);
        let w = m.weights(&inp).unwrap();
        assert!(matches!(
            m.forward_stations(&w, &inp, &[(99.0, 21.0)]),
            Err(Error::OutOfDomain { .. })
        ));
        let out = m.forward_stations(&w, &inp, &[(101.0, 21.0), (103.0, 23.5)]).unwrap();
        assert_eq!(out.dims(), &[1, 4, 2]);
    }

    #[test]
    fn continuity_probe() {
        let m = model(DecoderVariant::MultiBlock);
        let inp = tiny_inputs(11, 1, DType::F64);
        let w = m.weights(&inp).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let p = (rng.random_range(100.1..101.8), rng.random_range(20.1..21.8));
            let a = to_f64_vec(&m.mlp_decode(&w, &inp, &[p]).unwrap()).unwrap();
            let b = to_f64_vec(&m.mlp_decode(&w, &inp, &[(p.0 + 1e-6, p.1)]).unwrap()).unwrap();
            assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-3));
        }
    }

    #[test]
    fn seeded_construction_is_deterministic() {
        let inp = tiny_inputs(12, 1, DType::F64);
        let pts = [(101.1, 21.2)];
        let run = || {
            let m = model(DecoderVariant::MultiVar);
            let w = m.weights(&inp).unwrap();
            to_f64_vec(&m.mlp_decode(&w, &inp, &pts).unwrap()).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn config_validation() {
        let s = tiny_shapes();
        let mut c = tiny_config(DecoderVariant::MultiBlock);
        c.blocks_per_axis = 3;
        assert!(c.validate(&s).is_err());
        let mut c = tiny_config(DecoderVariant::MultiVar);
        c.generated_layers = 4;
        assert!(c.validate(&s).is_err());
        let mut c = tiny_config(DecoderVariant::MultiBlock);
        c.heads = 3;
        assert!(c.validate(&s).is_err());
        assert_eq!("multi_var".parse::<DecoderVariant>().unwrap(), DecoderVariant::MultiVar);
        assert!("multi_x".parse::<DecoderVariant>().is_err());
    }
}
