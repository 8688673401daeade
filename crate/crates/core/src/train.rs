//! Normalization, the masked three-term objective and the training loop.
//!
//! One sample is a (frame, camera) pair. The decoder's texture is color
//! corrected for the camera, the decoded mesh is posed by the frame's
//! headpose, and both are rendered. The objective is
//!
//! ```text
//! w_screen * screen + w_geometry * mse(G_hat, G) + w_kl * KL
//! ```
//!
//! where the screen term is [`screen_loss`] with the rendered weight mask `M`
//! and foreground mask `F` (both gradient-stopped), and the geometry term is
//! measured on stats-normalized vertices.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent once std is linked
use num_traits::Float;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Gradients, ParamStore, Tape, Tensor};
use crate::capture::{
    CameraCalibration, Capture, DatasetStats, Headpose, Image, MeshTopology, Rgb, Texture, TrackedMesh,
};
use crate::error::{Error, Result};
use crate::geometry::apply_headpose;
use crate::model::{AppearanceModel, ChannelAffine, ColorCorrection, ViewVector};
use crate::raster::{rasterize_backward, rasterize_sized, screen_loss};
use crate::texture::{average_texture, TextureMask, UvAtlas};

/// Variance floor of the normalization.
pub const NORMALIZE_EPSILON: f64 = 1e-6;

/// `(x - mean) / sqrt(variance + eps)` elementwise.
pub fn normalize(x: &[f64], mean: &[f64], variance: &[f64]) -> Result<Vec<f64>> {
    if x.len() != mean.len() || x.len() != variance.len() {
        return Err(Error::shape("normalize", &[mean.len()], &[x.len()]));
    }
    Ok(x.iter().zip(mean).zip(variance).map(|((x, m), v)| (x - m) / (v + NORMALIZE_EPSILON).sqrt()).collect())
}

/// Inverse of [`normalize`].
pub fn denormalize(x: &[f64], mean: &[f64], variance: &[f64]) -> Result<Vec<f64>> {
    if x.len() != mean.len() || x.len() != variance.len() {
        return Err(Error::shape("denormalize", &[mean.len()], &[x.len()]));
    }
    Ok(x.iter().zip(mean).zip(variance).map(|((x, m), v)| x * (v + NORMALIZE_EPSILON).sqrt() + m).collect())
}

/// Dataset statistics in the planar / flat layouts used by the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    resolution: usize,
    pub texture_mean: Vec<f64>,
    pub texture_std: Vec<f64>,
    pub vertex_mean: Vec<f64>,
    pub vertex_std: Vec<f64>,
    /// Global intensity scale of screen residuals.
    pub screen_scale: f64,
}

impl Normalizer {
    pub fn new(stats: &DatasetStats) -> Self {
        let std = |v: Vec<f64>| v.into_iter().map(|v| (v + NORMALIZE_EPSILON).sqrt()).collect();
        Self {
            resolution: stats.texture_mean.resolution(),
            texture_mean: stats.texture_mean.to_planar(),
            texture_std: std(stats.texture_variance.to_planar()),
            vertex_mean: stats.vertex_mean.flatten(),
            vertex_std: std(stats.vertex_variance.flatten()),
            screen_scale: stats.texture_scale(),
        }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_mean.len() / 3
    }

    /// Planar normalized texture.
    pub fn normalize_texture(&self, t: &Texture) -> Result<Vec<f64>> {
        if t.resolution() != self.resolution {
            return Err(Error::shape("normalize texture", &[self.resolution; 2], &[t.resolution(); 2]));
        }
        Ok(t.to_planar().iter().zip(&self.texture_mean).zip(&self.texture_std).map(|((x, m), s)| (x - m) / s).collect())
    }

    pub fn denormalize_texture(&self, planar: &[f64]) -> Result<Texture> {
        if planar.len() != self.texture_mean.len() {
            return Err(Error::shape("denormalize texture", &[self.texture_mean.len()], &[planar.len()]));
        }
        let raw: Vec<f64> =
            planar.iter().zip(&self.texture_mean).zip(&self.texture_std).map(|((x, m), s)| x * s + m).collect();
        Texture::from_planar(self.resolution, &raw)
    }

    pub fn normalize_mesh(&self, m: &TrackedMesh) -> Result<Vec<f64>> {
        if m.vertex_count() != self.vertex_count() {
            return Err(Error::shape("normalize mesh", &[self.vertex_count(), 3], &[m.vertex_count(), 3]));
        }
        Ok(m.flatten().iter().zip(&self.vertex_mean).zip(&self.vertex_std).map(|((x, m), s)| (x - m) / s).collect())
    }

    pub fn denormalize_mesh(&self, flat: &[f64]) -> Result<TrackedMesh> {
        if flat.len() != self.vertex_mean.len() {
            return Err(Error::shape("denormalize mesh", &[self.vertex_mean.len()], &[flat.len()]));
        }
        let raw: Vec<f64> =
            flat.iter().zip(&self.vertex_mean).zip(&self.vertex_std).map(|((x, m), s)| x * s + m).collect();
        Ok(TrackedMesh::from_flat(&raw))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub screen: f64,
    pub geometry: f64,
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { screen: 1.0, geometry: 1.0, kl: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.screen, self.geometry, self.kl].iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("loss weights must be finite and non-negative".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: u64,
    pub learning_rate: f64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Cameras drawn per step for the same frame; their gradients are averaged.
    pub cameras_per_step: usize,
    /// Abort when a step's loss exceeds this multiple of the first step's.
    pub divergence_factor: f64,
    /// Call the checkpoint hook every this many iterations (0 disables).
    pub checkpoint_every: u64,
    pub schedule: LrSchedule,
    /// Decode a sample of the latent distribution instead of its mean.
    pub sample_latent: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 200_000,
            learning_rate: 1e-3,
            seed: 0,
            weights: LossWeights::default(),
            cameras_per_step: 1,
            divergence_factor: 1e3,
            checkpoint_every: 0,
            schedule: LrSchedule::Constant,
            sample_latent: true,
        }
    }
}

impl TrainConfig {
    /// Short runs on desk-scale captures: four cameras per step and a
    /// cosine decay to 5% of the base rate.
    pub fn desk(iterations: u64, seed: u64) -> Self {
        Self {
            iterations,
            seed,
            cameras_per_step: 4,
            schedule: LrSchedule::Cosine { final_fraction: 0.05 },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.learning_rate > 0.0) || self.cameras_per_step == 0 {
            return Err(Error::Config("learning rate and cameras_per_step must be positive".to_string()));
        }
        if let LrSchedule::Cosine { final_fraction } = self.schedule {
            if !(0.0..=1.0).contains(&final_fraction) {
                return Err(Error::Config(format!("final_fraction {final_fraction} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Learning-rate multiplier over the course of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from 1 down to `final_fraction` at the last iteration.
    Cosine {
        final_fraction: f64,
    },
}

impl LrSchedule {
    pub fn factor(self, iteration: u64, iterations: u64) -> f64 {
        match self {
            Self::Constant => 1.0,
            Self::Cosine { final_fraction } => {
                let t = if iterations > 1 { iteration as f64 / (iterations - 1) as f64 } else { 0.0 };
                final_fraction + (1.0 - final_fraction) * 0.5 * (1.0 + (core::f64::consts::PI * t).cos())
            }
        }
    }
}

/// The value of each term of the objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub screen: f64,
    pub geometry: f64,
    pub kl: f64,
}

impl LossTerms {
    fn check(&self) -> Result<()> {
        let terms = [("total", self.total), ("screen", self.screen), ("geometry", self.geometry), ("kl", self.kl)];
        if terms.iter().all(|(_, v)| v.is_finite()) {
            return Ok(());
        }
        let msg: Vec<String> = terms.iter().map(|(n, v)| format!("{n}={v}")).collect();
        Err(Error::NonFinite(format!("loss terms {}", msg.join(" "))))
    }

    fn add_scaled(&mut self, o: &LossTerms, k: f64) {
        self.total += k * o.total;
        self.screen += k * o.screen;
        self.geometry += k * o.geometry;
        self.kl += k * o.kl;
    }
}

/// Everything needed to evaluate the objective on one (frame, camera) pair.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    /// Normalized planar average texture fed to the encoder.
    pub texture_norm: &'a [f64],
    /// Normalized flat ground-truth mesh, encoder input and geometry target.
    pub mesh_norm: &'a [f64],
    pub topology: &'a MeshTopology,
    pub foreground: &'a TextureMask,
    pub weight_mask: &'a TextureMask,
    pub camera: &'a CameraCalibration,
    pub headpose: &'a Headpose,
    pub image: &'a Image,
}

/// Objective value and gradients for one sample.
#[derive(Debug, Clone)]
pub struct SampleLoss {
    pub terms: LossTerms,
    pub grads: Gradients,
    pub color: ChannelAffine,
}

/// Evaluates the objective on one sample and, when `backward` is set,
/// its gradients with respect to the model parameters and the camera's color
/// correction. `noise` draws the latent via the reparameterization; `None`
/// uses the mean.
pub fn sample_loss(
    model: &AppearanceModel,
    cc: ChannelAffine,
    sample: &Sample<'_>,
    weights: &LossWeights,
    noise: Option<Vec<f64>>,
    backward: bool,
) -> Result<SampleLoss> {
    let cfg = model.config();
    let res = cfg.texture_resolution;
    let mut tape = Tape::new();
    let tex_in = tape.constant(Tensor::new(&[3, res, res], sample.texture_norm.to_vec())?);
    let mesh_in = tape.constant(Tensor::new(&[cfg.vertex_count * 3], sample.mesh_norm.to_vec())?);
    let enc = model.encoder_graph(&mut tape, tex_in, mesh_in)?;
    let z = match noise {
        Some(eps) => tape.reparameterize(enc.mean, enc.log_std, eps)?,
        None => enc.mean,
    };
    let view = ViewVector::from_camera(sample.camera, sample.headpose);
    let dec = model.decoder_graph(&mut tape, z, &view)?;
    let gain = tape.input(Tensor::new(&[3], cc.gain.to_vec())?);
    let bias = tape.input(Tensor::new(&[3], cc.bias.to_vec())?);
    let texture = tape.color_correct(dec.texture, gain, bias)?;
    let pose = sample.headpose;
    let world = tape.rigid(dec.mesh, *pose.rotation(), *pose.translation())?;
    let geometry = tape.mse(dec.mesh_norm, sample.mesh_norm.to_vec())?;
    let kl = tape.kl(enc.mean, enc.log_std)?;
    let reg = tape.weighted_sum(&[(geometry, weights.geometry), (kl, weights.kl)])?;

    let tex = Texture::from_planar(res, tape.value(texture).data())?;
    let mesh_world = TrackedMesh::from_flat(tape.value(world).data());
    let size = (sample.image.width, sample.image.height);
    let out = rasterize_sized(sample.camera, &mesh_world, sample.topology, &tex, size);
    let m = out.fragments.shade_mask(sample.weight_mask);
    let f = out.fragments.shade_mask(sample.foreground);
    let screen = screen_loss(&out.color, &m, &f, sample.image, model.normalizer().screen_scale)?;

    let terms = LossTerms {
        total: weights.screen * screen.loss + tape.value(reg).item(),
        screen: screen.loss,
        geometry: tape.value(geometry).item(),
        kl: tape.value(kl).item(),
    };
    terms.check()?;
    if !backward {
        return Ok(SampleLoss {
            terms,
            grads: Gradients::new(),
            color: ChannelAffine { gain: [0.0; 3], bias: [0.0; 3] },
        });
    }

    let upstream: Vec<[f64; 3]> = screen.grad.iter().map(|g| g.map(|v| v * weights.screen)).collect();
    let rg = rasterize_backward(&out, sample.camera, sample.topology, &tex, &upstream)?;
    let plane = res * res;
    let mut g_tex = vec![0.0; 3 * plane];
    for (i, g) in rg.texture.iter().enumerate() {
        for c in 0..3 {
            g_tex[c * plane + i] = g[c];
        }
    }
    let g_world: Vec<f64> = rg.vertices.iter().flatten().copied().collect();
    let back = tape.backward(&[(texture, &g_tex), (world, &g_world), (reg, &[1.0])])?;
    let pick = |v| -> [f64; 3] {
        let g = back.grad(v).unwrap_or(&[0.0; 3]);
        [g[0], g[1], g[2]]
    };
    Ok(SampleLoss { terms, color: ChannelAffine { gain: pick(gain), bias: pick(bias) }, grads: back.params })
}

/// The model's rendering of one sample before color correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub color: Vec<Rgb>,
    /// Per-pixel weight of the screen residual, `M * F^2`.
    pub weight: Vec<f64>,
}

/// Decodes a sample at the encoder mean and renders it without color
/// correction.
pub fn predict(model: &AppearanceModel, sample: &Sample<'_>) -> Result<Prediction> {
    let latent = model.encode_normalized(sample.texture_norm, sample.mesh_norm)?;
    let view = ViewVector::from_camera(sample.camera, sample.headpose);
    let (tex, mesh) = model.decode(&latent.mean, &view)?;
    let world = apply_headpose(&mesh, sample.headpose);
    let size = (sample.image.width, sample.image.height);
    let out = rasterize_sized(sample.camera, &world, sample.topology, &tex, size);
    let m = out.fragments.shade_mask(sample.weight_mask);
    let f = out.fragments.shade_mask(sample.foreground);
    Ok(Prediction { color: out.color, weight: m.iter().zip(&f).map(|(m, f)| m * f * f).collect() })
}

/// Unwraps the images of one frame for the given cameras.
pub fn unwrap_views(
    capture: &Capture,
    atlas: &UvAtlas,
    frame: usize,
    cameras: &[usize],
) -> Vec<(Texture, TextureMask)> {
    let f = &capture.frames[frame];
    let world = apply_headpose(&f.mesh, &f.headpose);
    cameras
        .iter()
        .map(|&c| {
            let img = f.images[c].to_image();
            atlas.unwrap(&img, &world, &capture.cameras[c], &capture.topology)
        })
        .collect()
}

/// Precomputed per-frame encoder inputs and foreground masks.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameData {
    /// Index into `Capture::frames`.
    pub frame: usize,
    pub texture_norm: Vec<f64>,
    pub mesh_norm: Vec<f64>,
    /// Union of texel validity over the set's cameras.
    pub foreground: TextureMask,
}

/// The (frame, camera) pairs a model is fitted to.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    /// Indices into `Capture::cameras`.
    pub cameras: Vec<usize>,
    pub frames: Vec<FrameData>,
    pub weight_mask: TextureMask,
}

impl TrainingSet {
    /// Encoder inputs are averaged over `input_cameras`; the foreground mask
    /// is the validity union over the same cameras. Samples are drawn from
    /// `cameras`.
    pub fn build(
        capture: &Capture,
        normalizer: &Normalizer,
        cameras: &[usize],
        input_cameras: &[usize],
        frames: &[usize],
        weight_mask: Option<TextureMask>,
    ) -> Result<Self> {
        if cameras.is_empty() || input_cameras.is_empty() {
            return Err(Error::EmptyInput("cameras"));
        }
        if frames.is_empty() {
            return Err(Error::EmptyInput("frames"));
        }
        let res = normalizer.resolution();
        if let Some(m) = &weight_mask {
            if m.resolution() != res {
                return Err(Error::shape("weight mask", &[res, res], &[m.resolution(); 2]));
            }
        }
        for &c in cameras.iter().chain(input_cameras) {
            if c >= capture.cameras.len() {
                return Err(Error::UnknownCamera(format!("#{c}")));
            }
        }
        let atlas = UvAtlas::new(&capture.topology, res);
        let fallback = Texture::from_planar(res, &normalizer.texture_mean)?;
        let mut out = Vec::with_capacity(frames.len());
        for &k in frames {
            let f = capture.frames.get(k).ok_or_else(|| Error::Structure(format!("frame #{k} out of range")))?;
            let views = unwrap_views(capture, &atlas, k, input_cameras);
            let avg = average_texture(&views, &fallback)?;
            let mut fg = TextureMask::filled(res, 0.0);
            for (_, m) in &views {
                fg = fg.union(m)?;
            }
            out.push(FrameData {
                frame: k,
                texture_norm: normalizer.normalize_texture(&avg)?,
                mesh_norm: normalizer.normalize_mesh(&f.mesh)?,
                foreground: fg,
            });
        }
        Ok(Self {
            cameras: cameras.to_vec(),
            frames: out,
            weight_mask: weight_mask.unwrap_or_else(|| TextureMask::filled(res, 1.0)),
        })
    }

    pub fn sample<'a>(&'a self, capture: &'a Capture, k: usize, camera: usize, image: &'a Image) -> Sample<'a> {
        let d = &self.frames[k];
        let f = &capture.frames[d.frame];
        Sample {
            texture_norm: &d.texture_norm,
            mesh_norm: &d.mesh_norm,
            topology: &capture.topology,
            foreground: &d.foreground,
            weight_mask: &self.weight_mask,
            camera: &capture.cameras[camera],
            headpose: &f.headpose,
            image,
        }
    }

    pub fn pair_count(&self) -> usize {
        self.frames.len() * self.cameras.len()
    }
}

/// Deterministic objective (latent at the encoder mean) averaged over every
/// (frame, camera) pair of the set.
pub fn dataset_loss(
    model: &AppearanceModel,
    cc: &ColorCorrection,
    capture: &Capture,
    set: &TrainingSet,
    weights: &LossWeights,
) -> Result<LossTerms> {
    let mut acc = LossTerms::default();
    let k = 1.0 / set.pair_count() as f64;
    for fk in 0..set.frames.len() {
        for &c in &set.cameras {
            let img = capture.frames[set.frames[fk].frame].images[c].to_image();
            let s = set.sample(capture, fk, c, &img);
            let color = cc.get(capture.cameras[c].camera_id())?;
            let l = sample_loss(model, color, &s, weights, None, false)?;
            acc.add_scaled(&l.terms, k);
        }
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub terms: LossTerms,
}

/// Which parameters a fitting run may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    /// Model and non-anchor color correction.
    All,
    /// Encoder parameters only.
    Encoder,
}

/// Adam over the model and the non-anchor color corrections of the set's
/// cameras. Deterministic for a fixed seed. `hook` is called with the
/// iteration count every `checkpoint_every` steps and after the last one.
pub fn train(
    model: &mut AppearanceModel,
    cc: &mut ColorCorrection,
    capture: &Capture,
    set: &TrainingSet,
    config: &TrainConfig,
    hook: impl FnMut(u64, &AppearanceModel, &ColorCorrection) -> Result<()>,
) -> Result<Vec<LossRecord>> {
    let mut adam = Adam::new(config.learning_rate);
    fit(model, cc, capture, set, config, Trainable::All, &mut adam, hook)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn fit(
    model: &mut AppearanceModel,
    cc: &mut ColorCorrection,
    capture: &Capture,
    set: &TrainingSet,
    config: &TrainConfig,
    trainable: Trainable,
    adam: &mut Adam,
    mut hook: impl FnMut(u64, &AppearanceModel, &ColorCorrection) -> Result<()>,
) -> Result<Vec<LossRecord>> {
    config.validate()?;
    let ids: Vec<&str> = set.cameras.iter().map(|&c| capture.cameras[c].camera_id()).collect();
    for id in &ids {
        cc.get(id)?;
    }
    let mut color_store = ParamStore::new();
    let mut color_ids = Vec::new();
    for id in &ids {
        if cc.is_anchor(id) || color_store.id(&format!("{id}.gain")).is_some() {
            continue;
        }
        let a = cc.get(id)?;
        let g = color_store.add(&format!("{id}.gain"), Tensor::new(&[3], a.gain.to_vec())?)?;
        let b = color_store.add(&format!("{id}.bias"), Tensor::new(&[3], a.bias.to_vec())?)?;
        color_ids.push((id.to_string(), g, b));
    }
    let mut color_adam = Adam::new(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let latent = model.config().latent_size;
    let mut curve = Vec::with_capacity(config.iterations as usize);
    let mut initial = None;

    for it in 0..config.iterations {
        let k = rng.random_range(0..set.frames.len());
        let mut terms = LossTerms::default();
        let mut grads = Gradients::new();
        let mut color_grads = Gradients::new();
        let scale = 1.0 / config.cameras_per_step as f64;
        for _ in 0..config.cameras_per_step {
            let c = set.cameras[rng.random_range(0..set.cameras.len())];
            let noise: Vec<f64> = (0..latent).map(|_| rng.sample(StandardNormal)).collect();
            let img = capture.frames[set.frames[k].frame].images[c].to_image();
            let s = set.sample(capture, k, c, &img);
            let id = capture.cameras[c].camera_id();
            let noise = config.sample_latent.then_some(noise);
            let l = sample_loss(model, cc.get(id)?, &s, &config.weights, noise, true)?;
            terms.add_scaled(&l.terms, scale);
            for (p, g) in l.grads.iter() {
                let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
                grads.accumulate(p, &scaled);
            }
            if let Some((_, g, b)) = color_ids.iter().find(|(cid, _, _)| cid == id) {
                color_grads.accumulate(*g, &l.color.gain.map(|v| v * scale));
                color_grads.accumulate(*b, &l.color.bias.map(|v| v * scale));
            }
        }
        let first = *initial.get_or_insert(terms.total);
        let limit = config.divergence_factor * first;
        if terms.total > limit {
            return Err(Error::Diverged { loss: terms.total, limit });
        }
        curve.push(LossRecord { iteration: it, terms });
        if trainable == Trainable::Encoder {
            grads.retain(|p| model.params.name(p).starts_with(crate::model::ENCODER_PREFIX));
        }
        let lr = config.learning_rate * config.schedule.factor(it, config.iterations);
        adam.lr = lr;
        color_adam.lr = lr;
        adam.step(&mut model.params, &grads)?;
        if trainable == Trainable::All {
            color_adam.step(&mut color_store, &color_grads)?;
            for (id, g, b) in &color_ids {
                let gain = color_store.get(*g).data();
                let bias = color_store.get(*b).data();
                cc.set(id, ChannelAffine { gain: [gain[0], gain[1], gain[2]], bias: [bias[0], bias[1], bias[2]] })?;
            }
        }
        let done = it + 1;
        if (config.checkpoint_every > 0 && done % config.checkpoint_every == 0) || done == config.iterations {
            hook(done, model, cc)?;
        }
    }
    Ok(curve)
}
