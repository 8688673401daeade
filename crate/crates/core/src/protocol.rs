//! Camera splits, held-out fine-tuning and the three evaluation protocols.
//!
//! A model is trained on the training cameras of a split and the training
//! expressions. Then:
//!
//! * novel view: color corrections of the test cameras are fitted on the
//!   training expressions, and test cameras x training expressions are
//!   evaluated;
//! * novel expression: the encoder is fine-tuned on the held-out expressions
//!   seen from the training cameras, which are then evaluated;
//! * joint: both fine-tunes, test cameras x held-out expressions.
//!
//! The encoder always receives the average texture of the training cameras
//! only.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::Vector3;
#[allow(unused_imports)] // inherent once std is linked
use num_traits::Float;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::capture::{CameraCalibration, Capture, Image, Texture};
use crate::error::{Error, Result};
use crate::geometry::apply_headpose;
use crate::model::{
    solve_affine, AppearanceModel, ChannelAffine, ColorCorrection, DecoderVariant, ModelConfig, ENCODER_PREFIX,
};
use crate::raster::{rasterize_fragments, rasterize_sized, RasterOutput};
use crate::train::{dataset_loss, predict, sample_loss, train, LossWeights, Prediction, TrainConfig, TrainingSet};

/// Fraction of expression segments held out, rounded up.
pub const HOLDOUT_FRACTION: f64 = 0.1;
pub const COLOR_EPOCHS: usize = 2;
pub const ENCODER_EPOCHS: usize = 10;
/// Training-camera counts of the studio ablation, out of 40 cameras.
pub const STUDIO_SPLITS: [usize; 4] = [17, 23, 27, 37];
const STUDIO_RIG: usize = 40;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CameraSplit {
    pub name: String,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

impl CameraSplit {
    pub fn new(name: impl Into<String>, train_ids: Vec<String>, test_ids: Vec<String>) -> Result<Self> {
        let s = Self { name: name.into(), train_ids, test_ids };
        s.check()?;
        Ok(s)
    }

    /// Disjoint, duplicate-free, with at least one training camera.
    pub fn check(&self) -> Result<()> {
        if self.train_ids.is_empty() {
            return Err(Error::Protocol(format!("split `{}` has no training cameras", self.name)));
        }
        let train: BTreeSet<&str> = self.train_ids.iter().map(String::as_str).collect();
        let test: BTreeSet<&str> = self.test_ids.iter().map(String::as_str).collect();
        if train.len() != self.train_ids.len() || test.len() != self.test_ids.len() {
            return Err(Error::Protocol(format!("split `{}` lists a camera twice", self.name)));
        }
        if let Some(both) = train.intersection(&test).next() {
            return Err(Error::Protocol(format!(
                "camera `{both}` is both a training and a test camera of split `{}`",
                self.name
            )));
        }
        Ok(())
    }

    pub fn train_indices(&self, capture: &Capture) -> Result<Vec<usize>> {
        indices(capture, &self.train_ids)
    }

    pub fn test_indices(&self, capture: &Capture) -> Result<Vec<usize>> {
        indices(capture, &self.test_ids)
    }
}

fn indices(capture: &Capture, ids: &[String]) -> Result<Vec<usize>> {
    ids.iter().map(|id| capture.camera_index(id).ok_or_else(|| Error::UnknownCamera(id.clone()))).collect()
}

/// Unit optical axis of a camera in world coordinates.
pub fn viewing_direction(cal: &CameraCalibration) -> Vector3<f64> {
    cal.rotation().row(2).transpose().normalize()
}

fn angle(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.dot(b).clamp(-1.0, 1.0).acos()
}

/// Greedy farthest-point order over unit directions starting at `start`.
/// Ties go to the lower index.
pub fn farthest_point_order(dirs: &[Vector3<f64>], start: usize) -> Vec<usize> {
    let mut order = vec![start];
    let mut nearest: Vec<f64> = dirs.iter().map(|d| angle(d, &dirs[start])).collect();
    while order.len() < dirs.len() {
        let mut best = None;
        for (i, &d) in nearest.iter().enumerate() {
            if order.contains(&i) {
                continue;
            }
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let (next, _) = best.expect("unselected direction remains");
        order.push(next);
        for (i, d) in dirs.iter().enumerate() {
            nearest[i] = nearest[i].min(angle(d, &dirs[next]));
        }
    }
    order
}

/// Smallest angle between any two of the selected directions.
pub fn min_pairwise_angle(dirs: &[Vector3<f64>], subset: &[usize]) -> f64 {
    let mut best = f64::INFINITY;
    for (k, &i) in subset.iter().enumerate() {
        for &j in &subset[k + 1..] {
            best = best.min(angle(&dirs[i], &dirs[j]));
        }
    }
    best
}

/// Nested splits by farthest-point sampling of viewing directions. The seed
/// picks the first camera; each split takes a prefix of one shared order.
pub fn make_splits(rig: &[CameraCalibration], sizes: &[usize], seed: u64) -> Result<Vec<CameraSplit>> {
    let n = rig.len();
    for &s in sizes {
        if s == 0 || s >= n {
            return Err(Error::validation("split size", format!("{s} must be in 1..{n}")));
        }
    }
    let dirs: Vec<Vector3<f64>> = rig.iter().map(viewing_direction).collect();
    let start = ChaCha8Rng::seed_from_u64(seed).random_range(0..n);
    let order = farthest_point_order(&dirs, start);
    let id = |i: &usize| rig[*i].camera_id().to_string();
    sizes
        .iter()
        .map(|&s| {
            let mut test: Vec<String> = order[s..].iter().map(id).collect();
            test.sort();
            CameraSplit::new(format!("train{s}"), order[..s].iter().map(id).collect(), test)
        })
        .collect()
}

/// The studio split sizes scaled to a rig of `n` cameras.
pub fn scaled_split_sizes(n: usize) -> Vec<usize> {
    let mut sizes: Vec<usize> = STUDIO_SPLITS
        .iter()
        .map(|&s| ((s * n) as f64 / STUDIO_RIG as f64).round() as usize)
        .map(|s| s.clamp(1, n.saturating_sub(1).max(1)))
        .collect();
    sizes.dedup();
    sizes
}

/// The last `ceil(fraction * n)` segments in name order, keeping at least
/// one training segment.
pub fn hold_out_segments(segments: &[&str], fraction: f64) -> Vec<String> {
    let mut sorted: Vec<&str> = segments.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let n = sorted.len();
    if n < 2 {
        return Vec::new();
    }
    let k = ((fraction * n as f64).ceil() as usize).clamp(1, n - 1);
    sorted[n - k..].iter().map(|s| s.to_string()).collect()
}

/// Camera splits plus the held-out expression segments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub splits: Vec<CameraSplit>,
    pub held_out_segments: Vec<String>,
}

/// Frame indices of the training and held-out expressions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameSplit {
    pub train: Vec<usize>,
    pub held_out: Vec<usize>,
}

impl SplitPlan {
    /// Studio-proportioned splits and a 10% expression hold-out.
    pub fn for_capture(capture: &Capture, seed: u64) -> Result<Self> {
        let splits = make_splits(&capture.cameras, &scaled_split_sizes(capture.cameras.len()), seed)?;
        Ok(Self { splits, held_out_segments: hold_out_segments(&capture.segments(), HOLDOUT_FRACTION) })
    }

    pub fn validate(&self, capture: &Capture) -> Result<()> {
        if self.splits.is_empty() {
            return Err(Error::Protocol("split plan has no splits".into()));
        }
        for s in &self.splits {
            s.check()?;
            s.train_indices(capture)?;
            s.test_indices(capture)?;
        }
        let fs = self.frames(capture);
        if fs.train.is_empty() || fs.held_out.is_empty() {
            return Err(Error::Protocol("both training and held-out expressions are required".into()));
        }
        Ok(())
    }

    pub fn frames(&self, capture: &Capture) -> FrameSplit {
        let held: BTreeSet<&str> = self.held_out_segments.iter().map(String::as_str).collect();
        let (mut train, mut held_out) = (Vec::new(), Vec::new());
        for (k, f) in capture.frames.iter().enumerate() {
            if held.contains(f.record.segment.as_str()) {
                held_out.push(k);
            } else {
                train.push(k);
            }
        }
        FrameSplit { train, held_out }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    NovelView,
    NovelExpression,
    Joint,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::NovelView, Protocol::NovelExpression, Protocol::Joint];

    pub fn name(self) -> &'static str {
        match self {
            Self::NovelView => "novel_view",
            Self::NovelExpression => "novel_expression",
            Self::Joint => "joint",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown protocol `{name}`")))
    }

    /// Cameras and frames evaluated under this protocol.
    pub fn selection(
        self,
        capture: &Capture,
        split: &CameraSplit,
        frames: &FrameSplit,
    ) -> Result<(Vec<usize>, Vec<usize>)> {
        let (cams, fr) = match self {
            Self::NovelView => (split.test_indices(capture)?, &frames.train),
            Self::NovelExpression => (split.train_indices(capture)?, &frames.held_out),
            Self::Joint => (split.test_indices(capture)?, &frames.held_out),
        };
        if cams.is_empty() {
            return Err(Error::Protocol(format!("{} on split `{}` has no cameras", self.name(), split.name)));
        }
        if fr.is_empty() {
            return Err(Error::Protocol(format!("{} has no frames to evaluate", self.name())));
        }
        Ok((cams, fr.clone()))
    }
}

/// Source of uncorrected renderings to fit color corrections against.
pub trait Predictor {
    fn predict(&self, capture: &Capture, frame: usize, camera: usize, image: &Image) -> Result<Prediction>;
}

/// Predictions of a frozen model, encoded from the training cameras.
pub struct ModelPredictor<'a> {
    model: &'a AppearanceModel,
    set: TrainingSet,
}

impl<'a> ModelPredictor<'a> {
    pub fn new(
        model: &'a AppearanceModel,
        capture: &Capture,
        cameras: &[usize],
        input_cameras: &[usize],
        frames: &[usize],
    ) -> Result<Self> {
        let set = TrainingSet::build(capture, model.normalizer(), cameras, input_cameras, frames, None)?;
        Ok(Self { model, set })
    }
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, capture: &Capture, frame: usize, camera: usize, image: &Image) -> Result<Prediction> {
        let k = self
            .set
            .frames
            .iter()
            .position(|f| f.frame == frame)
            .ok_or_else(|| Error::Protocol(format!("frame #{frame} was not prepared")))?;
        predict(self.model, &self.set.sample(capture, k, camera, image))
    }
}

/// A known texture rendered on the tracked meshes, weighted by coverage.
pub struct TexturePredictor<'a> {
    pub texture: &'a Texture,
}

impl Predictor for TexturePredictor<'_> {
    fn predict(&self, capture: &Capture, frame: usize, camera: usize, image: &Image) -> Result<Prediction> {
        let f = &capture.frames[frame];
        let world = apply_headpose(&f.mesh, &f.headpose);
        let out = rasterize_sized(
            &capture.cameras[camera],
            &world,
            &capture.topology,
            self.texture,
            (image.width, image.height),
        );
        let weight = (0..out.color.len()).map(|i| if out.fragments.covered(i) { 1.0 } else { 0.0 }).collect();
        Ok(Prediction { color: out.color, weight })
    }
}

/// Fits the color corrections of the split's test cameras against
/// `predictor` on `frames`, in `epochs` passes. Each pass solves the weighted
/// least-squares problem of the screen term exactly per camera and channel.
/// Only test-camera entries of `cc` change; the anchor stays fixed.
pub fn finetune_color_correction(
    predictor: &impl Predictor,
    cc: &mut ColorCorrection,
    capture: &Capture,
    split: &CameraSplit,
    frames: &[usize],
    epochs: usize,
) -> Result<()> {
    split.check()?;
    if frames.is_empty() {
        return Err(Error::Protocol("color fine-tuning needs validation frames".into()));
    }
    let cams = split.test_indices(capture)?;
    if cams.is_empty() {
        return Err(Error::Protocol(format!("split `{}` has no test cameras", split.name)));
    }
    for &c in &cams {
        cc.get(capture.cameras[c].camera_id())?;
    }
    for _ in 0..epochs {
        for &c in &cams {
            let id = capture.cameras[c].camera_id();
            if cc.is_anchor(id) {
                continue;
            }
            let mut acc = [[0.0; 5]; 3];
            for &k in frames {
                let img = capture.frames[k].images[c].to_image();
                let p = predictor.predict(capture, k, c, &img)?;
                for ((s, t), &w) in p.color.iter().zip(&img.pixels).zip(&p.weight) {
                    if w == 0.0 {
                        continue;
                    }
                    for ch in 0..3 {
                        let a = &mut acc[ch];
                        a[0] += w;
                        a[1] += w * s[ch];
                        a[2] += w * s[ch] * s[ch];
                        a[3] += w * t[ch];
                        a[4] += w * s[ch] * t[ch];
                    }
                }
            }
            cc.set(id, solve_affine(&acc))?;
        }
    }
    Ok(())
}

/// Deterministic held-out loss before fine-tuning and after every epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderFinetune {
    pub losses: Vec<f64>,
}

impl EncoderFinetune {
    /// Epoch transitions whose loss did not increase.
    pub fn non_increasing(&self) -> usize {
        self.losses.windows(2).filter(|w| w[1] <= w[0]).count()
    }
}

/// Settings of the encoder fine-tune. Steps are plain gradient descent with
/// momentum on the objective at the latent mean, one step per held-out frame
/// with the gradient averaged over the cameras.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderFinetuneConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for EncoderFinetuneConfig {
    fn default() -> Self {
        Self { epochs: ENCODER_EPOCHS, learning_rate: 3e-4, momentum: 0.0, weights: LossWeights::default(), seed: 0 }
    }
}

/// Trains only the encoder on held-out expressions seen from `cameras`.
pub fn finetune_encoder(
    model: &mut AppearanceModel,
    cc: &ColorCorrection,
    capture: &Capture,
    cameras: &[usize],
    train_frames: &[usize],
    held_out_frames: &[usize],
    config: &EncoderFinetuneConfig,
) -> Result<EncoderFinetune> {
    if held_out_frames.is_empty() || cameras.is_empty() {
        return Err(Error::Protocol("encoder fine-tuning needs held-out frames and cameras".into()));
    }
    if !(config.learning_rate > 0.0 && (0.0..1.0).contains(&config.momentum)) {
        return Err(Error::Config("fine-tune needs a positive rate and momentum in [0, 1)".into()));
    }
    config.weights.validate()?;
    let seg = |k: &usize| -> Result<&str> {
        capture
            .frames
            .get(*k)
            .map(|f| f.record.segment.as_str())
            .ok_or_else(|| Error::Protocol(format!("frame #{k} out of range")))
    };
    let seen: BTreeSet<&str> = train_frames.iter().map(seg).collect::<Result<_>>()?;
    for k in held_out_frames {
        let s = seg(k)?;
        if seen.contains(s) {
            return Err(Error::Protocol(format!("expression `{s}` is also a training expression")));
        }
    }
    let set = TrainingSet::build(capture, model.normalizer(), cameras, cameras, held_out_frames, None)?;
    let colors: Vec<ChannelAffine> =
        cameras.iter().map(|&c| cc.get(capture.cameras[c].camera_id())).collect::<Result<_>>()?;
    let encoder: Vec<bool> = model.params.ids().map(|p| model.params.name(p).starts_with(ENCODER_PREFIX)).collect();
    let mut velocity: Vec<Vec<f64>> = model.params.ids().map(|p| vec![0.0; model.params.get(p).len()]).collect();
    let mut losses = vec![dataset_loss(model, cc, capture, &set, &config.weights)?.total];
    let scale = 1.0 / cameras.len() as f64;
    for e in 0..config.epochs {
        let mut order: Vec<usize> = (0..set.frames.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(e as u64));
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        for k in order {
            let frame = &capture.frames[set.frames[k].frame];
            let mut grads = Gradients::new();
            for (&c, &color) in cameras.iter().zip(&colors) {
                let img = frame.images[c].to_image();
                let l = sample_loss(model, color, &set.sample(capture, k, c, &img), &config.weights, None, true)?;
                for (p, g) in l.grads.iter() {
                    if encoder[p.index()] {
                        grads.accumulate(p, &g.iter().map(|v| v * scale).collect::<Vec<_>>());
                    }
                }
            }
            for (p, g) in grads.iter() {
                let v = &mut velocity[p.index()];
                let w = model.params.get_mut(p).data_mut();
                for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                    *v = config.momentum * *v + g;
                    *w -= config.learning_rate * *v;
                }
            }
        }
        losses.push(dataset_loss(model, cc, capture, &set, &config.weights)?.total);
    }
    Ok(EncoderFinetune { losses })
}

/// Copies of a trained model and its color correction with the fine-tunes
/// `protocol` requires applied.
#[allow(clippy::too_many_arguments)]
pub fn finetune_for(
    protocol: Protocol,
    model: &AppearanceModel,
    cc: &ColorCorrection,
    capture: &Capture,
    split: &CameraSplit,
    frames: &FrameSplit,
    color_epochs: usize,
    encoder: &EncoderFinetuneConfig,
) -> Result<(AppearanceModel, ColorCorrection, Option<EncoderFinetune>)> {
    let train_cams = split.train_indices(capture)?;
    let mut cc = cc.clone();
    if protocol != Protocol::NovelExpression {
        let test = split.test_indices(capture)?;
        let predictor = ModelPredictor::new(model, capture, &test, &train_cams, &frames.train)?;
        finetune_color_correction(&predictor, &mut cc, capture, split, &frames.train, color_epochs)?;
    }
    let mut model = model.clone();
    let mut ft = None;
    if protocol != Protocol::NovelView {
        ft = Some(finetune_encoder(&mut model, &cc, capture, &train_cams, &frames.train, &frames.held_out, encoder)?);
    }
    Ok((model, cc, ft))
}

/// Aggregated error of one evaluation, pixel intensities on a 0-255 scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub mse: f64,
    pub mae: f64,
    pub pixels: u64,
    /// Pixels covered by exactly one of the tracked and predicted meshes.
    pub silhouette_mismatch: u64,
    pub frames: Vec<usize>,
    pub cameras: Vec<String>,
}

/// Renders the model's corrected prediction for one frame and camera,
/// encoding from `input_cameras`.
pub fn render_prediction(
    model: &AppearanceModel,
    cc: &ColorCorrection,
    capture: &Capture,
    input_cameras: &[usize],
    frame: usize,
    camera: usize,
) -> Result<Image> {
    let set = TrainingSet::build(capture, model.normalizer(), &[camera], input_cameras, &[frame], None)?;
    render_from_set(model, cc, capture, &set, 0, camera)
}

fn render_from_set(
    model: &AppearanceModel,
    cc: &ColorCorrection,
    capture: &Capture,
    set: &TrainingSet,
    k: usize,
    camera: usize,
) -> Result<Image> {
    Ok(raster_from_set(model, cc, capture, set, k, camera)?.to_image())
}

fn raster_from_set(
    model: &AppearanceModel,
    cc: &ColorCorrection,
    capture: &Capture,
    set: &TrainingSet,
    k: usize,
    camera: usize,
) -> Result<RasterOutput> {
    let d = &set.frames[k];
    let f = &capture.frames[d.frame];
    let cal = &capture.cameras[camera];
    let latent = model.encode_normalized(&d.texture_norm, &d.mesh_norm)?;
    let view = crate::model::ViewVector::from_camera(cal, &f.headpose);
    let (tex, mesh) = model.decode(&latent.mean, &view)?;
    let tex = cc.apply(&tex, cal.camera_id())?;
    let world = apply_headpose(&mesh, &f.headpose);
    let (w, h) = cal.image_size();
    Ok(rasterize_sized(cal, &world, &capture.topology, &tex, (w as usize, h as usize)))
}

/// Foreground-masked error of the model on `protocol`'s cameras and frames.
/// The foreground is where both the tracked and the predicted mesh cover a
/// pixel; pixels covered by only one of them are counted separately as
/// silhouette mismatch. Pairs are visited in sorted order so the result does
/// not depend on how the selection was listed.
pub fn evaluate(
    model: &AppearanceModel,
    cc: &ColorCorrection,
    capture: &Capture,
    split: &CameraSplit,
    frames: &FrameSplit,
    protocol: Protocol,
) -> Result<EvalStats> {
    split.check()?;
    let (mut cams, mut fr) = protocol.selection(capture, split, frames)?;
    cams.sort_unstable();
    cams.dedup();
    fr.sort_unstable();
    fr.dedup();
    let inputs = split.train_indices(capture)?;
    let set = TrainingSet::build(capture, model.normalizer(), &cams, &inputs, &fr, None)?;
    let (mut sq, mut abs, mut n, mut mismatch) = (0.0, 0.0, 0u64, 0u64);
    for (k, &frame) in fr.iter().enumerate() {
        let f = &capture.frames[frame];
        let world = apply_headpose(&f.mesh, &f.headpose);
        for &c in &cams {
            let cal = &capture.cameras[c];
            let pred = raster_from_set(model, cc, capture, &set, k, c)?;
            let gt = &f.images[c];
            let mask = rasterize_fragments(cal, &world, &capture.topology, (gt.width, gt.height));
            let (mut psq, mut pabs, mut pn) = (0.0, 0.0, 0u64);
            for (i, (p, g)) in pred.color.iter().zip(&gt.pixels).enumerate() {
                match (mask.covered(i), pred.fragments.covered(i)) {
                    (true, true) => {}
                    (false, false) => continue,
                    _ => {
                        mismatch += 1;
                        continue;
                    }
                }
                for ch in 0..3 {
                    let d = p[ch] * 255.0 - g[ch] as f64;
                    psq += d * d;
                    pabs += d.abs();
                }
                pn += 3;
            }
            sq += psq;
            abs += pabs;
            n += pn;
        }
    }
    if n == 0 {
        return Err(Error::Protocol(format!("{} covered no pixels", protocol.name())));
    }
    Ok(EvalStats {
        mse: sq / n as f64,
        mae: abs / n as f64,
        pixels: n / 3,
        silhouette_mismatch: mismatch,
        frames: fr,
        cameras: cams.iter().map(|&c| capture.cameras[c].camera_id().to_string()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub variant: String,
    pub split: String,
    pub protocol: Protocol,
    pub mse: f64,
    pub mae: f64,
    pub frames: usize,
    pub cameras: usize,
    pub pixels: u64,
    pub silhouette_mismatch: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn push(&mut self, variant: DecoderVariant, split: &str, protocol: Protocol, s: &EvalStats) {
        self.rows.push(EvalRow {
            variant: variant.name().to_string(),
            split: split.to_string(),
            protocol,
            mse: s.mse,
            mae: s.mae,
            frames: s.frames.len(),
            cameras: s.cameras.len(),
            pixels: s.pixels,
            silhouette_mismatch: s.silhouette_mismatch,
        });
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::EmptyInput("report rows"));
        }
        for r in &self.rows {
            if !(r.mse.is_finite() && r.mse >= 0.0 && r.mae.is_finite() && r.mae >= 0.0) {
                return Err(Error::NonFinite(format!("{}/{}/{}", r.variant, r.split, r.protocol.name())));
            }
        }
        Ok(())
    }

    pub fn find(&self, variant: &str, split: &str, protocol: Protocol) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.variant == variant && r.split == split && r.protocol == protocol)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub variants: Vec<DecoderVariant>,
    pub train: TrainConfig,
    pub color_epochs: usize,
    pub encoder: EncoderFinetuneConfig,
    pub model_seed: u64,
}

impl AblationConfig {
    pub fn desk(iterations: u64, seed: u64) -> Self {
        Self {
            variants: DecoderVariant::ALL.to_vec(),
            train: TrainConfig::desk(iterations, seed),
            color_epochs: COLOR_EPOCHS,
            encoder: EncoderFinetuneConfig { seed, ..EncoderFinetuneConfig::default() },
            model_seed: seed,
        }
    }
}

/// Parameter digests and selections recorded while running one cell of the
/// ablation, for checking that each step touched only what it declares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    pub variant: String,
    pub split: String,
    pub model_before_color: (u64, u64),
    pub model_after_color: (u64, u64),
    /// Color digests of cameras outside the test set, before and after.
    pub others_before_color: u64,
    pub others_after_color: u64,
    pub test_before_color: u64,
    pub test_after_color: u64,
    pub encoder_before: u64,
    pub encoder_after: u64,
    pub decoder_before_encoder_ft: u64,
    pub decoder_after_encoder_ft: u64,
    pub color_before_encoder_ft: u64,
    pub color_after_encoder_ft: u64,
    pub encoder_losses: Vec<f64>,
    pub evaluated: BTreeMap<Protocol, (Vec<usize>, Vec<String>)>,
}

impl Audit {
    /// Fine-tunes changed exactly their declared parameters.
    pub fn freeze_contracts_hold(&self) -> bool {
        self.model_before_color == self.model_after_color
            && self.others_before_color == self.others_after_color
            && self.decoder_before_encoder_ft == self.decoder_after_encoder_ft
            && self.color_before_encoder_ft == self.color_after_encoder_ft
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationOutcome {
    pub report: EvalReport,
    pub audits: Vec<Audit>,
    pub loss_curves: Vec<(String, String, Vec<crate::train::LossRecord>)>,
}

/// Progress notifications of [`run_ablation`].
#[derive(Debug, Clone, Copy)]
pub enum AblationEvent<'a> {
    Trained {
        variant: DecoderVariant,
        split: &'a str,
        final_loss: f64,
    },
    Evaluated {
        variant: DecoderVariant,
        split: &'a str,
        protocol: Protocol,
        stats: &'a EvalStats,
    },
    /// All fine-tunes of a cell are done; the novel-view pair is
    /// (`trained`, `color_tuned`), novel expression (`encoder_tuned`,
    /// `color`), joint (`encoder_tuned`, `color_tuned`).
    Cell {
        variant: DecoderVariant,
        split: &'a CameraSplit,
        trained: &'a AppearanceModel,
        encoder_tuned: &'a AppearanceModel,
        color: &'a ColorCorrection,
        color_tuned: &'a ColorCorrection,
    },
}

/// Trains and evaluates every variant on every split of `plan`.
pub fn run_ablation(
    capture: &Capture,
    plan: &SplitPlan,
    config: &AblationConfig,
    mut observe: impl FnMut(AblationEvent<'_>),
) -> Result<AblationOutcome> {
    plan.validate(capture)?;
    let frames = plan.frames(capture);
    let normalizer = crate::train::Normalizer::new(&capture.stats);
    let ids: Vec<&str> = capture.cameras.iter().map(|c| c.camera_id()).collect();
    let mut out = AblationOutcome { report: EvalReport::default(), audits: Vec::new(), loss_curves: Vec::new() };
    for &variant in &config.variants {
        for split in &plan.splits {
            let train_cams = split.train_indices(capture)?;
            let mut mc = ModelConfig::desk(variant, capture.texture_resolution(), capture.topology.vertex_count());
            mc.seed = config.model_seed;
            let mut model = AppearanceModel::new(mc, normalizer.clone())?;
            let mut cc = ColorCorrection::new(&split.train_ids[0], ids.iter().copied())?;
            let set = TrainingSet::build(capture, &normalizer, &train_cams, &train_cams, &frames.train, None)?;
            let curve = train(&mut model, &mut cc, capture, &set, &config.train, |_, _, _| Ok(()))?;
            observe(AblationEvent::Trained {
                variant,
                split: &split.name,
                final_loss: curve.last().map_or(f64::NAN, |r| r.terms.total),
            });
            out.loss_curves.push((variant.name().to_string(), split.name.clone(), curve));

            let test: BTreeSet<&str> = split.test_ids.iter().map(String::as_str).collect();
            let digests = |m: &AppearanceModel, c: &ColorCorrection| {
                (
                    (m.encoder_digest(), m.decoder_digest()),
                    c.digest(|id| !test.contains(id)),
                    c.digest(|id| test.contains(id)),
                )
            };
            let mut cc_nv = cc.clone();
            let before = digests(&model, &cc_nv);
            let test_cams = split.test_indices(capture)?;
            if !test_cams.is_empty() {
                let predictor = ModelPredictor::new(&model, capture, &test_cams, &train_cams, &frames.train)?;
                finetune_color_correction(&predictor, &mut cc_nv, capture, split, &frames.train, config.color_epochs)?;
            }
            let after = digests(&model, &cc_nv);

            let mut model_ne = model.clone();
            let (enc0, dec0, col0) = (model_ne.encoder_digest(), model_ne.decoder_digest(), cc.digest(|_| true));
            let ft = finetune_encoder(
                &mut model_ne,
                &cc,
                capture,
                &train_cams,
                &frames.train,
                &frames.held_out,
                &config.encoder,
            )?;

            let mut evaluated = BTreeMap::new();
            for protocol in Protocol::ALL {
                let (m, c) = match protocol {
                    Protocol::NovelView => (&model, &cc_nv),
                    Protocol::NovelExpression => (&model_ne, &cc),
                    Protocol::Joint => (&model_ne, &cc_nv),
                };
                let stats = evaluate(m, c, capture, split, &frames, protocol)?;
                observe(AblationEvent::Evaluated { variant, split: &split.name, protocol, stats: &stats });
                out.report.push(variant, &split.name, protocol, &stats);
                evaluated.insert(protocol, (stats.frames.clone(), stats.cameras.clone()));
            }
            observe(AblationEvent::Cell {
                variant,
                split,
                trained: &model,
                encoder_tuned: &model_ne,
                color: &cc,
                color_tuned: &cc_nv,
            });
            out.audits.push(Audit {
                variant: variant.name().to_string(),
                split: split.name.clone(),
                model_before_color: before.0,
                model_after_color: after.0,
                others_before_color: before.1,
                others_after_color: after.1,
                test_before_color: before.2,
                test_after_color: after.2,
                encoder_before: enc0,
                encoder_after: model_ne.encoder_digest(),
                decoder_before_encoder_ft: dec0,
                decoder_after_encoder_ft: model_ne.decoder_digest(),
                color_before_encoder_ft: col0,
                color_after_encoder_ft: cc.digest(|_| true),
                encoder_losses: ft.losses,
                evaluated,
            });
        }
    }
    Ok(out)
}
