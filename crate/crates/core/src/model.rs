//! The conditional VAE appearance model and per-camera color correction.
//!
//! The encoder sees the stats-normalized average texture of a frame and its
//! normalized tracked mesh and produces a diagonal Gaussian over the latent
//! code. The decoder maps a latent code and a view direction to a texture and
//! a head-local mesh. The mesh head never sees the view.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent once std is linked
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BiasMode, ParamId, ParamStore, Tape, Tensor, Var};
use crate::capture::{CameraCalibration, Headpose, Rgb, Texture, TrackedMesh};
use crate::error::{Error, Result};
use crate::geometry::view_direction;
use crate::train::Normalizer;

/// Slope of every leaky ReLU in the network.
pub const LEAKY_SLOPE: f64 = 0.2;
/// Factor applied to the encoder's mean head.
pub const MEAN_SCALE: f64 = 0.1;
/// Factor applied to the encoder's log standard deviation head.
pub const LOG_STD_SCALE: f64 = 0.01;
/// Normalized inputs larger than this are rejected by the encoder.
pub const MAX_ENCODER_INPUT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderVariant {
    Baseline,
    SpatialBias,
    SpatialBiasWarp,
    SpatialBiasResidual,
}

impl DecoderVariant {
    pub const ALL: [DecoderVariant; 4] = [
        DecoderVariant::Baseline,
        DecoderVariant::SpatialBias,
        DecoderVariant::SpatialBiasWarp,
        DecoderVariant::SpatialBiasResidual,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DecoderVariant::Baseline => "baseline",
            DecoderVariant::SpatialBias => "spatial_bias",
            DecoderVariant::SpatialBiasWarp => "spatial_bias_warp",
            DecoderVariant::SpatialBiasResidual => "spatial_bias_residual",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown decoder variant `{name}`")))
    }

    pub fn spatial_bias(self) -> bool {
        self != DecoderVariant::Baseline
    }

    pub fn warp(self) -> bool {
        self == DecoderVariant::SpatialBiasWarp
    }

    pub fn residual(self) -> bool {
        self == DecoderVariant::SpatialBiasResidual
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: DecoderVariant,
    pub latent_size: usize,
    pub texture_resolution: usize,
    pub vertex_count: usize,
    /// Output channels of each stride-2 encoder convolution; one entry per
    /// halving from the texture resolution down to 4x4.
    pub encoder_channels: Vec<usize>,
    /// Channels of the decoder feature map at 4x4 and after each upsampling
    /// stage except the last, which always produces the texture.
    pub decoder_channels: Vec<usize>,
    pub mesh_hidden: usize,
    pub view_hidden: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Number of stride-2 stages between the texture resolution and 4x4.
    pub fn stages(resolution: usize) -> usize {
        (resolution / 4).trailing_zeros() as usize
    }

    /// Channel ladder doubling from 16 up to a cap of 256 in the encoder and
    /// mirrored in the decoder.
    pub fn ladder(variant: DecoderVariant, resolution: usize, vertex_count: usize) -> Self {
        let n = Self::stages(resolution);
        let enc: Vec<usize> = (0..n).map(|i| (16usize << i).min(256)).collect();
        let dec: Vec<usize> = enc.iter().rev().copied().collect();
        Self {
            variant,
            latent_size: 256,
            texture_resolution: resolution,
            vertex_count,
            encoder_channels: enc,
            decoder_channels: dec,
            mesh_hidden: 256,
            view_hidden: 32,
            seed: 0,
        }
    }

    /// Narrow widths for desk-scale experiments.
    pub fn desk(variant: DecoderVariant, resolution: usize, vertex_count: usize) -> Self {
        let n = Self::stages(resolution);
        let enc: Vec<usize> = (0..n).map(|i| (8usize << (i / 2)).min(32)).collect();
        let dec: Vec<usize> = enc.iter().rev().copied().collect();
        Self {
            variant,
            latent_size: 256,
            texture_resolution: resolution,
            vertex_count,
            encoder_channels: enc,
            decoder_channels: dec,
            mesh_hidden: 64,
            view_hidden: 16,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let res = self.texture_resolution;
        if res < 8 || !res.is_power_of_two() {
            return Err(Error::Config(format!("texture resolution {res} is not a power of two >= 8")));
        }
        let n = Self::stages(res);
        if self.encoder_channels.len() != n || self.decoder_channels.len() != n {
            return Err(Error::Config(format!(
                "resolution {res} needs {n} encoder and decoder stages, got {} and {}",
                self.encoder_channels.len(),
                self.decoder_channels.len()
            )));
        }
        let widths = self.encoder_channels.iter().chain(&self.decoder_channels);
        if self.latent_size == 0
            || self.vertex_count < 3
            || self.mesh_hidden == 0
            || self.view_hidden == 0
            || widths.into_iter().any(|&c| c == 0)
        {
            return Err(Error::Config("all widths must be positive and vertex_count >= 3".to_string()));
        }
        Ok(())
    }

    fn output_channels(&self) -> usize {
        if self.variant.warp() {
            5
        } else {
            3
        }
    }
}

/// Unit direction from the head to the camera in head-local coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewVector([f64; 3]);

impl ViewVector {
    pub fn new(direction: [f64; 3]) -> Result<Self> {
        let n = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !((n - 1.0).abs() <= 1e-6) {
            return Err(Error::validation("view vector", format!("norm {n} is not 1")));
        }
        Ok(Self(direction))
    }

    pub fn from_camera(cal: &CameraCalibration, pose: &Headpose) -> Self {
        Self(view_direction(cal, pose))
    }

    pub fn direction(&self) -> [f64; 3] {
        self.0
    }
}

/// Diagonal Gaussian over the latent code.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDistribution {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

/// Per-channel gain and bias of one camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelAffine {
    pub gain: Rgb,
    pub bias: Rgb,
}

impl ChannelAffine {
    pub const IDENTITY: ChannelAffine = ChannelAffine { gain: [1.0; 3], bias: [0.0; 3] };

    pub fn apply(&self, c: Rgb) -> Rgb {
        [0, 1, 2].map(|k| self.gain[k] * c[k] + self.bias[k])
    }
}

/// Per-camera color correction with one camera fixed as the anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorCorrection {
    anchor: String,
    cameras: BTreeMap<String, ChannelAffine>,
}

impl ColorCorrection {
    /// Every camera starts at gain 1 and bias 0.
    pub fn new<'a>(anchor: &str, camera_ids: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let cameras: BTreeMap<String, ChannelAffine> =
            camera_ids.into_iter().map(|id| (id.to_string(), ChannelAffine::IDENTITY)).collect();
        if !cameras.contains_key(anchor) {
            return Err(Error::UnknownCamera(anchor.to_string()));
        }
        Ok(Self { anchor: anchor.to_string(), cameras })
    }

    pub fn anchor(&self) -> &str {
        &self.anchor
    }

    pub fn is_anchor(&self, camera_id: &str) -> bool {
        self.anchor == camera_id
    }

    pub fn camera_ids(&self) -> impl Iterator<Item = &str> {
        self.cameras.keys().map(String::as_str)
    }

    pub fn get(&self, camera_id: &str) -> Result<ChannelAffine> {
        self.cameras.get(camera_id).copied().ok_or_else(|| Error::UnknownCamera(camera_id.to_string()))
    }

    /// Updates a non-anchor camera. Writes to the anchor are ignored.
    pub fn set(&mut self, camera_id: &str, value: ChannelAffine) -> Result<()> {
        let slot = self.cameras.get_mut(camera_id).ok_or_else(|| Error::UnknownCamera(camera_id.to_string()))?;
        if camera_id != self.anchor {
            *slot = value;
        }
        Ok(())
    }

    pub fn apply(&self, texture: &Texture, camera_id: &str) -> Result<Texture> {
        let cc = self.get(camera_id)?;
        let texels = texture.texels().iter().map(|&c| cc.apply(c)).collect();
        Texture::from_texels(texture.resolution(), texels)
    }

    /// FNV-1a digest of the selected cameras' parameters.
    pub fn digest(&self, mut select: impl FnMut(&str) -> bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (id, cc) in &self.cameras {
            if !select(id) {
                continue;
            }
            for b in id.bytes().chain(cc.gain.iter().chain(&cc.bias).flat_map(|v| v.to_bits().to_le_bytes())) {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// Weighted least-squares `target ~ gain * source + bias` per channel.
/// Returns identity for channels without enough spread to fit.
pub fn fit_channel_affine(source: &[Rgb], target: &[Rgb], weights: &[f64]) -> ChannelAffine {
    let mut acc = [[0.0; 5]; 3];
    for ((s, t), &w) in source.iter().zip(target).zip(weights) {
        if w == 0.0 {
            continue;
        }
        for c in 0..3 {
            let a = &mut acc[c];
            a[0] += w;
            a[1] += w * s[c];
            a[2] += w * s[c] * s[c];
            a[3] += w * t[c];
            a[4] += w * s[c] * t[c];
        }
    }
    solve_affine(&acc)
}

/// Solves the per-channel normal equations from accumulated
/// `[sum w, sum w s, sum w s^2, sum w t, sum w s t]`.
pub fn solve_affine(acc: &[[f64; 5]; 3]) -> ChannelAffine {
    let mut out = ChannelAffine::IDENTITY;
    for c in 0..3 {
        let [w, s, ss, t, st] = acc[c];
        let det = w * ss - s * s;
        if w <= 0.0 || det.abs() <= 1e-12 * w * w {
            continue;
        }
        out.gain[c] = (w * st - s * t) / det;
        out.bias[c] = (ss * t - s * st) / det;
    }
    out
}

#[derive(Debug, Clone)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct UpStage {
    w: ParamId,
    b: ParamId,
    mode: BiasMode,
    residual: Option<(Conv, Conv)>,
}

#[derive(Debug, Clone)]
struct Layout {
    enc_convs: Vec<Conv>,
    enc_mesh: Vec<Dense>,
    enc_fc: Dense,
    dec_view: Vec<Dense>,
    dec_fc: Dense,
    dec_up: Vec<UpStage>,
    dec_mesh: Vec<Dense>,
}

/// Tape handles produced by [`AppearanceModel::encoder_graph`].
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub mean: Var,
    pub log_std: Var,
    /// Head outputs before the fixed scaling.
    pub raw_mean: Var,
    pub raw_log_std: Var,
}

/// Tape handles produced by [`AppearanceModel::decoder_graph`].
#[derive(Debug, Clone, Copy)]
pub struct DecoderVars {
    /// Normalized texture, planar `[3, res, res]`.
    pub texture_norm: Var,
    /// Denormalized texture, planar `[3, res, res]`.
    pub texture: Var,
    /// Normalized head-local vertices, flat `[V * 3]`.
    pub mesh_norm: Var,
    /// Denormalized head-local vertices.
    pub mesh: Var,
    /// Integrated warp grid and unwarped template for the warp variant.
    pub warp: Option<(Var, Var)>,
}

/// Prefix of every encoder parameter name.
pub const ENCODER_PREFIX: &str = "enc.";
/// Prefix of every decoder parameter name.
pub const DECODER_PREFIX: &str = "dec.";

#[derive(Debug, Clone)]
pub struct AppearanceModel {
    config: ModelConfig,
    pub params: ParamStore,
    normalizer: Normalizer,
    layout: Layout,
}

impl AppearanceModel {
    pub fn new(config: ModelConfig, normalizer: Normalizer) -> Result<Self> {
        config.validate()?;
        if normalizer.resolution() != config.texture_resolution || normalizer.vertex_count() != config.vertex_count {
            return Err(Error::Config(format!(
                "statistics are {}x{} / {} vertices, model expects {}x{} / {}",
                normalizer.resolution(),
                normalizer.resolution(),
                normalizer.vertex_count(),
                config.texture_resolution,
                config.texture_resolution,
                config.vertex_count
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ps = ParamStore::new();
        let res = config.texture_resolution;
        let stages = ModelConfig::stages(res);
        let latent = config.latent_size;
        let v3 = config.vertex_count * 3;

        let dense = |ps: &mut ParamStore, name: &str, i: usize, o: usize, rng: &mut ChaCha8Rng| -> Result<Dense> {
            Ok(Dense {
                w: ps.add_uniform(&format!("{name}.w"), &[o, i], i, rng)?,
                b: ps.add_zeros(&format!("{name}.b"), &[o])?,
            })
        };

        let mut enc_convs = Vec::new();
        let mut cin = 3;
        for (i, &c) in config.encoder_channels.iter().enumerate() {
            enc_convs.push(Conv {
                w: ps.add_uniform(&format!("enc.conv{i}.w"), &[c, cin, 4, 4], cin * 16, &mut rng)?,
                b: ps.add_zeros(&format!("enc.conv{i}.b"), &[c])?,
            });
            cin = c;
        }
        let flat = cin * 16;
        let h = config.mesh_hidden;
        let enc_mesh = vec![
            dense(&mut ps, "enc.mesh0", v3, h, &mut rng)?,
            dense(&mut ps, "enc.mesh1", h, h, &mut rng)?,
            dense(&mut ps, "enc.mesh2", h, h, &mut rng)?,
        ];
        let enc_fc = dense(&mut ps, "enc.fc", flat + h, 2 * latent, &mut rng)?;

        let vh = config.view_hidden;
        let dec_view =
            vec![dense(&mut ps, "dec.view0", 3, vh, &mut rng)?, dense(&mut ps, "dec.view1", vh, vh, &mut rng)?];
        let c0 = config.decoder_channels[0];
        let dec_fc = dense(&mut ps, "dec.fc", latent + vh, c0 * 16, &mut rng)?;
        let mut dec_up = Vec::new();
        let mut size = 4;
        for i in 0..stages {
            let cin = config.decoder_channels[i];
            let last = i + 1 == stages;
            let cout = if last { config.output_channels() } else { config.decoder_channels[i + 1] };
            size *= 2;
            let w = ps.add_uniform(&format!("dec.up{i}.w"), &[cin, cout, 4, 4], cin * 4, &mut rng)?;
            let (b, mode) = if config.variant.spatial_bias() {
                (ps.add_zeros(&format!("dec.up{i}.b"), &[cout, size, size])?, BiasMode::Spatial)
            } else {
                (ps.add_zeros(&format!("dec.up{i}.b"), &[cout])?, BiasMode::PerChannel)
            };
            let residual = if config.variant.residual() && !last {
                let mut conv = |tag: &str, rng: &mut ChaCha8Rng| -> Result<Conv> {
                    Ok(Conv {
                        w: ps.add_uniform(&format!("dec.res{i}.{tag}.w"), &[cout, cout, 3, 3], cout * 9, rng)?,
                        b: ps.add_zeros(&format!("dec.res{i}.{tag}.b"), &[cout])?,
                    })
                };
                Some((conv("a", &mut rng)?, conv("b", &mut rng)?))
            } else {
                None
            };
            dec_up.push(UpStage { w, b, mode, residual });
        }
        let dec_mesh = vec![
            dense(&mut ps, "dec.mesh0", latent, h, &mut rng)?,
            dense(&mut ps, "dec.mesh1", h, h, &mut rng)?,
            dense(&mut ps, "dec.mesh2", h, v3, &mut rng)?,
        ];
        Ok(Self {
            config,
            params: ps,
            normalizer,
            layout: Layout { enc_convs, enc_mesh, enc_fc, dec_view, dec_fc, dec_up, dec_mesh },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Digest of encoder parameters.
    pub fn encoder_digest(&self) -> u64 {
        self.params.digest(|n| n.starts_with(ENCODER_PREFIX))
    }

    /// Digest of decoder parameters.
    pub fn decoder_digest(&self) -> u64 {
        self.params.digest(|n| n.starts_with(DECODER_PREFIX))
    }

    fn dense(&self, tape: &mut Tape, d: &Dense, x: Var, act: bool) -> Result<Var> {
        let w = tape.param(&self.params, d.w);
        let b = tape.param(&self.params, d.b);
        let y = tape.linear(x, w, Some(b))?;
        Ok(if act { tape.leaky_relu(y, LEAKY_SLOPE) } else { y })
    }

    /// Records the encoder on `tape`. Inputs are the normalized planar
    /// average texture `[3, res, res]` and normalized flat vertices.
    pub fn encoder_graph(&self, tape: &mut Tape, texture_norm: Var, mesh_norm: Var) -> Result<EncoderVars> {
        let mut x = texture_norm;
        for conv in &self.layout.enc_convs {
            let w = tape.param(&self.params, conv.w);
            let b = tape.param(&self.params, conv.b);
            x = tape.conv2d(x, w, Some(b), 2, 1)?;
            x = tape.leaky_relu(x, LEAKY_SLOPE);
        }
        let mut m = mesh_norm;
        for d in &self.layout.enc_mesh {
            m = self.dense(tape, d, m, true)?;
        }
        let fused = tape.concat(&[x, m]);
        let head = self.dense(tape, &self.layout.enc_fc, fused, false)?;
        let l = self.config.latent_size;
        let raw_mean = tape.slice(head, 0, &[l])?;
        let raw_log_std = tape.slice(head, l, &[l])?;
        let mean = tape.scale(raw_mean, MEAN_SCALE);
        let log_std = tape.scale(raw_log_std, LOG_STD_SCALE);
        Ok(EncoderVars { mean, log_std, raw_mean, raw_log_std })
    }

    /// Records the decoder on `tape` for a latent code `z` of shape `[L]`.
    pub fn decoder_graph(&self, tape: &mut Tape, z: Var, view: &ViewVector) -> Result<DecoderVars> {
        let l = self.config.latent_size;
        if tape.value(z).len() != l {
            return Err(Error::shape("decoder latent", &[l], tape.value(z).shape()));
        }
        let mut v = tape.constant(Tensor::new(&[3], view.direction().to_vec())?);
        for d in &self.layout.dec_view {
            v = self.dense(tape, d, v, true)?;
        }
        let zv = tape.concat(&[z, v]);
        let c0 = self.config.decoder_channels[0];
        let mut x = self.dense(tape, &self.layout.dec_fc, zv, true)?;
        x = tape.reshape(x, &[c0, 4, 4])?;
        let stages = self.layout.dec_up.len();
        for (i, st) in self.layout.dec_up.iter().enumerate() {
            let w = tape.param(&self.params, st.w);
            let b = tape.param(&self.params, st.b);
            x = tape.conv_transpose2d(x, w, Some((b, st.mode)), 2, 1)?;
            if i + 1 < stages {
                x = tape.leaky_relu(x, LEAKY_SLOPE);
            }
            if let Some((a, bconv)) = &st.residual {
                x = self.residual_block(tape, x, a, bconv)?;
            }
        }
        let res = self.config.texture_resolution;
        let plane = res * res;
        let (texture_norm, warp) = if self.config.variant.warp() {
            let template = tape.slice(x, 0, &[3, res, res])?;
            let inc = tape.slice(x, 3 * plane, &[2, res, res])?;
            let grid = tape.integrate_warp(inc)?;
            (tape.sample_warp(template, grid)?, Some((grid, template)))
        } else {
            (x, None)
        };
        let texture =
            tape.affine_const(texture_norm, self.normalizer.texture_std.clone(), &self.normalizer.texture_mean)?;

        let mut m = z;
        let n = self.layout.dec_mesh.len();
        for (i, d) in self.layout.dec_mesh.iter().enumerate() {
            m = self.dense(tape, d, m, i + 1 < n)?;
        }
        let mesh = tape.affine_const(m, self.normalizer.vertex_std.clone(), &self.normalizer.vertex_mean)?;
        Ok(DecoderVars { texture_norm, texture, mesh_norm: m, mesh, warp })
    }

    fn residual_block(&self, tape: &mut Tape, x: Var, a: &Conv, b: &Conv) -> Result<Var> {
        residual_block(tape, &self.params, x, (a.w, a.b), (b.w, b.b))
    }

    /// Encodes normalized inputs.
    pub fn encode_normalized(&self, texture_norm: &[f64], mesh_norm: &[f64]) -> Result<LatentDistribution> {
        let res = self.config.texture_resolution;
        let worst = texture_norm.iter().chain(mesh_norm).fold(0.0f64, |m, v| m.max(v.abs()));
        if !(worst <= MAX_ENCODER_INPUT) {
            return Err(Error::validation(
                "encoder input",
                format!("magnitude {worst} suggests the input was not normalized"),
            ));
        }
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::new(&[3, res, res], texture_norm.to_vec())?);
        let m = tape.constant(Tensor::new(&[self.config.vertex_count * 3], mesh_norm.to_vec())?);
        let e = self.encoder_graph(&mut tape, t, m)?;
        Ok(LatentDistribution {
            mean: tape.value(e.mean).data().to_vec(),
            log_std: tape.value(e.log_std).data().to_vec(),
        })
    }

    /// Encodes a raw average texture and head-local mesh.
    pub fn encode(&self, average_texture: &Texture, mesh: &TrackedMesh) -> Result<LatentDistribution> {
        let t = self.normalizer.normalize_texture(average_texture)?;
        let m = self.normalizer.normalize_mesh(mesh)?;
        self.encode_normalized(&t, &m)
    }

    /// Decodes a latent code for one view into a texture and head-local mesh.
    pub fn decode(&self, z: &[f64], view: &ViewVector) -> Result<(Texture, TrackedMesh)> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent code".to_string()));
        }
        let mut tape = Tape::new();
        let zv = tape.constant(Tensor::new(&[z.len()], z.to_vec())?);
        let d = self.decoder_graph(&mut tape, zv, view)?;
        let res = self.config.texture_resolution;
        let texture = Texture::from_planar(res, tape.value(d.texture).data())?;
        let mesh = TrackedMesh::from_flat(tape.value(d.mesh).data());
        Ok((texture, mesh))
    }

    /// Replaces all parameters with values from another store with the same
    /// names and shapes.
    pub fn load_params(&mut self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model has {}",
                values.len(),
                self.params.len()
            )));
        }
        for (name, t) in values {
            self.params.set(name, t.clone())?;
        }
        Ok(())
    }
}

/// `x + conv_b(leaky(conv_a(x)))` with 3x3 stride-1 convolutions.
pub fn residual_block(
    tape: &mut Tape,
    params: &ParamStore,
    x: Var,
    a: (ParamId, ParamId),
    b: (ParamId, ParamId),
) -> Result<Var> {
    let c = tape.value(x).shape().first().copied().unwrap_or(0);
    for id in [a.0, b.0] {
        let s = params.get(id).shape();
        if s.len() != 4 || s[0] != c || s[1] != c {
            return Err(Error::shape("residual block", &[c, c, 3, 3], s));
        }
    }
    let (aw, ab) = (tape.param(params, a.0), tape.param(params, a.1));
    let (bw, bb) = (tape.param(params, b.0), tape.param(params, b.1));
    let h = tape.conv2d(x, aw, Some(ab), 1, 1)?;
    let h = tape.leaky_relu(h, LEAKY_SLOPE);
    let h = tape.conv2d(h, bw, Some(bb), 1, 1)?;
    tape.add(x, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::{compute_stats, Texture, TrackedMesh};
    use rand::RngExt;

    fn normalizer(res: usize, verts: usize) -> Normalizer {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let textures: Vec<Texture> = (0..3)
            .map(|_| {
                let t = (0..res * res)
                    .map(|_| [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)])
                    .collect();
                Texture::from_texels(res, t).unwrap()
            })
            .collect();
        let meshes: Vec<TrackedMesh> = (0..3)
            .map(|_| TrackedMesh::new((0..verts).map(|_| [rng.random_range(-50.0..50.0); 3]).collect()))
            .collect();
        Normalizer::new(&compute_stats(&textures, &meshes).unwrap())
    }

    fn tiny(variant: DecoderVariant) -> AppearanceModel {
        let mut cfg = ModelConfig::desk(variant, 16, 5);
        cfg.latent_size = 8;
        cfg.mesh_hidden = 6;
        cfg.view_hidden = 4;
        AppearanceModel::new(cfg, normalizer(16, 5)).unwrap()
    }

    #[test]
    fn default_latent_is_256() {
        let m = AppearanceModel::new(ModelConfig::desk(DecoderVariant::Baseline, 16, 5), normalizer(16, 5)).unwrap();
        let d = m.encode_normalized(&vec![0.1; 3 * 256], &[0.2; 15]).unwrap();
        assert_eq!(d.mean.len(), 256);
        assert_eq!(d.log_std.len(), 256);
    }

    #[test]
    fn studio_ladder_has_eight_stages_at_1024() {
        let cfg = ModelConfig::ladder(DecoderVariant::SpatialBias, 1024, 7306);
        assert_eq!(cfg.encoder_channels.len(), 8);
        cfg.validate().unwrap();
    }

    #[test]
    fn encode_is_deterministic_and_scaled() {
        let m = tiny(DecoderVariant::SpatialBias);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t: Vec<f64> = (0..3 * 256).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        assert_eq!(m.encode_normalized(&t, &v).unwrap(), m.encode_normalized(&t, &v).unwrap());

        let mut tape = Tape::new();
        let tv = tape.constant(Tensor::new(&[3, 16, 16], t).unwrap());
        let vv = tape.constant(Tensor::new(&[15], v).unwrap());
        let e = m.encoder_graph(&mut tape, tv, vv).unwrap();
        for (s, r) in tape.value(e.mean).data().iter().zip(tape.value(e.raw_mean).data()) {
            assert!((s * 10.0 - r).abs() <= 1e-15 * r.abs().max(1.0));
        }
        for (s, r) in tape.value(e.log_std).data().iter().zip(tape.value(e.raw_log_std).data()) {
            assert!((s * 100.0 - r).abs() <= 1e-15 * r.abs().max(1.0));
        }
    }

    #[test]
    fn unnormalized_input_is_rejected() {
        let m = tiny(DecoderVariant::Baseline);
        let mut t = vec![0.0; 3 * 256];
        t[3] = 2e6;
        assert!(matches!(m.encode_normalized(&t, &[0.0; 15]), Err(Error::Validation { .. })));
    }

    #[test]
    fn decode_shapes_and_view_independent_mesh() {
        for variant in DecoderVariant::ALL {
            let m = tiny(variant);
            let z: Vec<f64> = (0..8).map(|i| 0.3 * i as f64 - 1.0).collect();
            let a = ViewVector::new([0.0, 0.0, 1.0]).unwrap();
            let b = ViewVector::new([0.6, 0.0, 0.8]).unwrap();
            let (ta, ma) = m.decode(&z, &a).unwrap();
            let (tb, mb) = m.decode(&z, &b).unwrap();
            assert_eq!(ta.resolution(), 16);
            assert_eq!(ma.vertex_count(), 5);
            assert_eq!(ma, mb);
            assert_ne!(ta, tb, "{variant:?}");
        }
    }

    #[test]
    fn warp_with_constant_increments_returns_template() {
        let mut m = tiny(DecoderVariant::SpatialBiasWarp);
        let last = m.config.decoder_channels.len() - 1;
        // zero the increment channels' weights and give them a constant bias
        let wid = m.params.id(&format!("dec.up{last}.w")).unwrap();
        let w = m.params.get_mut(wid);
        let [cin, cout, k, _] = *w.shape() else { panic!() };
        for ci in 0..cin {
            for co in 3..cout {
                for t in 0..k * k {
                    w.data_mut()[(ci * cout + co) * k * k + t] = 0.0;
                }
            }
        }
        let bid = m.params.id(&format!("dec.up{last}.b")).unwrap();
        let plane = 16 * 16;
        m.params.get_mut(bid).data_mut()[3 * plane..].iter_mut().for_each(|v| *v = 0.37);

        let mut tape = Tape::new();
        let z = tape.constant(Tensor::new(&[8], vec![0.5; 8]).unwrap());
        let d = m.decoder_graph(&mut tape, z, &ViewVector::new([0.0, 1.0, 0.0]).unwrap()).unwrap();
        let (grid, template) = d.warp.unwrap();
        let grid = tape.value(grid).data();
        for y in 0..16 {
            for x in 0..16 {
                assert!((grid[y * 16 + x] - x as f64).abs() < 1e-9);
                assert!((grid[plane + y * 16 + x] - y as f64).abs() < 1e-9);
            }
        }
        let out = tape.value(d.texture_norm).data();
        let tpl = tape.value(template).data();
        for (a, b) in out.iter().zip(tpl) {
            assert!((a - b).abs() < 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn spatial_bias_adds_exactly_the_bias_tensors() {
        let base = tiny(DecoderVariant::Baseline);
        let sb = tiny(DecoderVariant::SpatialBias);
        let cfg = base.config();
        let mut expected = 0;
        let mut size = 4;
        let n = cfg.decoder_channels.len();
        for i in 0..n {
            size *= 2;
            let c = if i + 1 == n { 3 } else { cfg.decoder_channels[i + 1] };
            expected += size * size * c - c;
        }
        assert_eq!(sb.parameter_count() - base.parameter_count(), expected);
    }

    #[test]
    fn zero_residual_block_is_identity() {
        let mut ps = ParamStore::new();
        let a = (ps.add_zeros("a.w", &[2, 2, 3, 3]).unwrap(), ps.add_zeros("a.b", &[2]).unwrap());
        let b = (ps.add_zeros("b.w", &[2, 2, 3, 3]).unwrap(), ps.add_zeros("b.b", &[2]).unwrap());
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..2 * 5 * 5).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = tape.constant(Tensor::new(&[2, 5, 5], data.clone()).unwrap());
        let y = residual_block(&mut tape, &ps, x, a, b).unwrap();
        assert_eq!(tape.value(y).data(), data.as_slice());

        let bad = (ps.add_zeros("c.w", &[3, 3, 3, 3]).unwrap(), ps.add_zeros("c.b", &[3]).unwrap());
        assert!(matches!(residual_block(&mut tape, &ps, x, a, bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn color_correction_cases() {
        let mut cc = ColorCorrection::new("a", ["a", "b"]).unwrap();
        let gray = Texture::filled(4, [0.5; 3]);
        assert_eq!(cc.apply(&gray, "b").unwrap(), gray);
        cc.set("b", ChannelAffine { gain: [2.0, 1.0, 1.0], bias: [0.0; 3] }).unwrap();
        assert_eq!(cc.apply(&gray, "b").unwrap().get(1, 1), [1.0, 0.5, 0.5]);
        assert!(matches!(cc.apply(&gray, "zz"), Err(Error::UnknownCamera(_))));
        let before = cc.digest(|id| id == "a");
        cc.set("a", ChannelAffine { gain: [3.0; 3], bias: [1.0; 3] }).unwrap();
        assert_eq!(cc.digest(|id| id == "a"), before);
    }

    #[test]
    fn least_squares_recovers_affine_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let truth = ChannelAffine { gain: [1.1, 0.9, 1.03], bias: [-0.02, 0.04, 0.0] };
        let src: Vec<Rgb> = (0..500).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let dst: Vec<Rgb> = src.iter().map(|&c| truth.apply(c)).collect();
        let fit = fit_channel_affine(&src, &dst, &vec![1.0; 500]);
        for c in 0..3 {
            assert!((fit.gain[c] - truth.gain[c]).abs() < 1e-6);
            assert!((fit.bias[c] - truth.bias[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn residual_block_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let mut add = |name: &str, shape: &[usize], rng: &mut ChaCha8Rng| {
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
            store.add(name, Tensor::new(shape, data).unwrap()).unwrap()
        };
        let a = (add("a.w", &[3, 3, 3, 3], &mut rng), add("a.b", &[3], &mut rng));
        let b = (add("b.w", &[3, 3, 3, 3], &mut rng), add("b.b", &[3], &mut rng));
        let x: Vec<f64> = (0..3 * 6 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r: Vec<f64> = (0..3 * 6 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eval = |store: &ParamStore| {
            let mut tape = Tape::new();
            let xv = tape.input(Tensor::new(&[3, 6, 6], x.clone()).unwrap());
            let y = residual_block(&mut tape, store, xv, a, b).unwrap();
            let value: f64 = tape.value(y).data().iter().zip(&r).map(|(p, q)| p * q).sum();
            (tape, xv, y, value)
        };
        let (tape, xv, y, _) = eval(&store);
        let back = tape.backward(&[(y, &r)]).unwrap();
        let h = 1e-6;
        for id in [a.0, a.1, b.0, b.1] {
            let analytic = back.params.get(id).unwrap().to_vec();
            let mut num = vec![0.0; analytic.len()];
            for i in 0..num.len() {
                let mut s = store.clone();
                s.get_mut(id).data_mut()[i] += h;
                let plus = eval(&s).3;
                s.get_mut(id).data_mut()[i] -= 2.0 * h;
                num[i] = (plus - eval(&s).3) / (2.0 * h);
            }
            let diff: f64 = analytic.iter().zip(&num).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
            let norm: f64 = num.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(diff / norm < 1e-3, "{}: {}", store.name(id), diff / norm);
        }
        assert!(back.grad(xv).is_some());
    }
}
