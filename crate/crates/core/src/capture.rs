//! Domain types of a multi-view capture and the dataset statistics.
//!
//! Conventions used throughout the crate:
//! * lengths are millimeters;
//! * a [`Headpose`] maps head-local coordinates to world coordinates;
//! * camera extrinsics map world coordinates to camera coordinates, with the
//!   camera looking down `+z`, `x` to the right and `y` down;
//! * UV coordinates address texels as `(u * res, v * res)` measured from the
//!   top-left corner, texel `(i, j)` having its center at `(i + 0.5, j + 0.5)`.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{Matrix3, Vector3};
#[allow(unused_imports)] // inherent once std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vertex count of every tracked mesh in the released captures.
pub const MULTIFACE_VERTEX_COUNT: usize = 7306;

/// Orthonormality tolerance of a headpose rotation block.
pub const HEADPOSE_TOLERANCE: f64 = 1e-6;

/// Orthonormality tolerance applied to camera extrinsics when loading a rig.
pub const CALIBRATION_TOLERANCE: f64 = 1e-4;

pub type Rgb = [f64; 3];

/// Triangulation shared by all frames of a capture, with a UV atlas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshTopology {
    triangles: Vec<[u32; 3]>,
    uv_per_corner: Vec<[[f64; 2]; 3]>,
    vertex_count: usize,
}

impl MeshTopology {
    pub fn new(triangles: Vec<[u32; 3]>, uv_per_corner: Vec<[[f64; 2]; 3]>, vertex_count: usize) -> Result<Self> {
        if triangles.len() != uv_per_corner.len() {
            return Err(Error::Structure(format!(
                "{} triangles but {} UV triples",
                triangles.len(),
                uv_per_corner.len()
            )));
        }
        for (t, tri) in triangles.iter().enumerate() {
            if let Some(&bad) = tri.iter().find(|&&i| i as usize >= vertex_count) {
                return Err(Error::Structure(format!(
                    "triangle {t} references vertex {bad} but only {vertex_count} exist"
                )));
            }
        }
        for (t, uvs) in uv_per_corner.iter().enumerate() {
            for uv in uvs {
                if !uv.iter().all(|c| (0.0..=1.0).contains(c)) {
                    return Err(Error::validation(
                        "UV coordinate",
                        format!("triangle {t} has UV {uv:?} outside [0,1]"),
                    ));
                }
            }
        }
        Ok(Self { triangles, uv_per_corner, vertex_count })
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn uv_per_corner(&self) -> &[[[f64; 2]; 3]] {
        &self.uv_per_corner
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    /// Number of distinct undirected edges.
    pub fn edge_count(&self) -> usize {
        let mut edges = BTreeSet::new();
        for tri in &self.triangles {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                edges.insert((a.min(b), a.max(b)));
            }
        }
        edges.len()
    }

    /// `V - E + F`.
    pub fn euler_characteristic(&self) -> i64 {
        self.vertex_count as i64 - self.edge_count() as i64 + self.triangles.len() as i64
    }
}

/// Per-frame vertex positions in the head-local frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackedMesh {
    pub vertices: Vec<[f64; 3]>,
}

impl TrackedMesh {
    pub fn new(vertices: Vec<[f64; 3]>) -> Self {
        Self { vertices }
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn check_topology(&self, topology: &MeshTopology) -> Result<()> {
        if self.vertices.len() != topology.vertex_count() {
            return Err(Error::Structure(format!(
                "mesh has {} vertices, topology expects {}",
                self.vertices.len(),
                topology.vertex_count()
            )));
        }
        Ok(())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.vertices.iter().flatten().copied().collect()
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        Self { vertices: flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect() }
    }
}

fn check_rotation(r: &Matrix3<f64>, tol: f64, what: &'static str) -> Result<()> {
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if !(err <= tol) {
        return Err(Error::validation(what, format!("rotation block deviates from orthonormal by {err:e}")));
    }
    let det = r.determinant();
    if !((det - 1.0).abs() <= tol.max(1e-12) * 3.0) {
        return Err(Error::validation(what, format!("rotation determinant is {det}, expected +1")));
    }
    Ok(())
}

/// Rigid head-local → world transform of a frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Headpose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Headpose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        check_rotation(&rotation, HEADPOSE_TOLERANCE, "headpose")?;
        if !translation.iter().all(|t| t.is_finite()) {
            return Err(Error::validation("headpose", "non-finite translation"));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Builds a pose from a row-major 3×4 `[R | t]` matrix.
    pub fn from_rows(m: &[f64; 12]) -> Result<Self> {
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let translation = Vector3::new(m[3], m[7], m[11]);
        Self::new(rotation, translation)
    }

    pub fn to_rows(&self) -> [f64; 12] {
        let (r, t) = (&self.rotation, &self.translation);
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t[0],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t[1],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t[2],
        ]
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }
}

/// Pinhole camera with world → camera extrinsics. No lens distortion.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraCalibration {
    camera_id: String,
    intrinsics: Matrix3<f64>,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    image_size: (u32, u32),
}

impl CameraCalibration {
    pub fn new(
        camera_id: impl Into<String>,
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        image_size: (u32, u32),
    ) -> Result<Self> {
        let camera_id = camera_id.into();
        if camera_id.is_empty() || camera_id.chars().any(char::is_whitespace) {
            return Err(Error::validation("camera id", format!("`{camera_id}` must be non-empty without whitespace")));
        }
        let (fx, fy) = (intrinsics[(0, 0)], intrinsics[(1, 1)]);
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::validation(
                "intrinsics",
                format!("camera {camera_id}: focal lengths must be positive, got ({fx}, {fy})"),
            ));
        }
        let bottom = [intrinsics[(1, 0)], intrinsics[(2, 0)], intrinsics[(2, 1)]];
        if bottom.iter().any(|&v| v != 0.0) || intrinsics[(2, 2)] != 1.0 {
            return Err(Error::validation(
                "intrinsics",
                format!("camera {camera_id}: matrix must be upper triangular with K[2][2] = 1"),
            ));
        }
        if image_size.0 == 0 || image_size.1 == 0 {
            return Err(Error::validation("image size", format!("camera {camera_id}: {image_size:?}")));
        }
        check_rotation(&rotation, CALIBRATION_TOLERANCE, "extrinsics")?;
        Ok(Self { camera_id, intrinsics, rotation, translation, image_size })
    }

    /// Camera at `center` looking at `target`, with `up` roughly towards
    /// decreasing image rows.
    pub fn look_at(
        camera_id: impl Into<String>,
        focal: (f64, f64),
        image_size: (u32, u32),
        center: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
    ) -> Result<Self> {
        let forward = (target - center).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * center);
        let intrinsics = Matrix3::new(
            focal.0,
            0.0,
            image_size.0 as f64 / 2.0,
            0.0,
            focal.1,
            image_size.1 as f64 / 2.0,
            0.0,
            0.0,
            1.0,
        );
        Self::new(camera_id, intrinsics, rotation, translation, image_size)
    }

    pub fn camera_id(&self) -> &str {
        &self.camera_id
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn image_size(&self) -> (u32, u32) {
        self.image_size
    }

    pub fn fx(&self) -> f64 {
        self.intrinsics[(0, 0)]
    }

    pub fn fy(&self) -> f64 {
        self.intrinsics[(1, 1)]
    }

    pub fn cx(&self) -> f64 {
        self.intrinsics[(0, 2)]
    }

    pub fn cy(&self) -> f64 {
        self.intrinsics[(1, 2)]
    }

    pub fn skew(&self) -> f64 {
        self.intrinsics[(0, 1)]
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Same camera rendering at a different resolution.
    pub fn rescaled(&self, image_size: (u32, u32)) -> Self {
        let sx = image_size.0 as f64 / self.image_size.0 as f64;
        let sy = image_size.1 as f64 / self.image_size.1 as f64;
        let mut k = self.intrinsics;
        for c in 0..3 {
            k[(0, c)] *= sx;
            k[(1, c)] *= sy;
        }
        Self { intrinsics: k, image_size, ..self.clone() }
    }
}

/// Square RGB appearance map in UV space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    resolution: usize,
    texels: Vec<Rgb>,
}

impl Texture {
    pub fn filled(resolution: usize, value: Rgb) -> Self {
        Self { resolution, texels: vec![value; resolution * resolution] }
    }

    pub fn from_texels(resolution: usize, texels: Vec<Rgb>) -> Result<Self> {
        if texels.len() != resolution * resolution {
            return Err(Error::shape("texture", &[resolution, resolution, 3], &[texels.len(), 3]));
        }
        if texels.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(String::from("texture")));
        }
        Ok(Self { resolution, texels })
    }

    /// Maps 8-bit texels to `[0, 1]`.
    pub fn from_bytes(resolution: usize, bytes: &[[u8; 3]]) -> Result<Self> {
        Self::from_texels(resolution, bytes.iter().map(|p| rgb_from_u8(*p)).collect())
    }

    /// Planar `[3, res, res]` layout.
    pub fn from_planar(resolution: usize, planar: &[f64]) -> Result<Self> {
        let n = resolution * resolution;
        if planar.len() != 3 * n {
            return Err(Error::shape("texture", &[3, resolution, resolution], &[planar.len()]));
        }
        Self::from_texels(resolution, (0..n).map(|i| [planar[i], planar[n + i], planar[2 * n + i]]).collect())
    }

    pub fn to_planar(&self) -> Vec<f64> {
        let n = self.texels.len();
        let mut out = vec![0.0; 3 * n];
        for (i, t) in self.texels.iter().enumerate() {
            for c in 0..3 {
                out[c * n + i] = t[c];
            }
        }
        out
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn texels(&self) -> &[Rgb] {
        &self.texels
    }

    pub fn texels_mut(&mut self) -> &mut [Rgb] {
        &mut self.texels
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.texels[y * self.resolution + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: Rgb) {
        self.texels[y * self.resolution + x] = value;
    }
}

/// Floating-point RGB image, rows top to bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Rgb>,
}

impl Image {
    pub fn filled(width: usize, height: usize, value: Rgb) -> Self {
        Self { width, height, pixels: vec![value; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.pixels[y * self.width + x]
    }

    /// Rounds to 8 bits per channel after clamping to `[0, 1]`.
    pub fn to_rgb8(&self) -> Rgb8Image {
        Rgb8Image {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|p| rgb_to_u8(*p)).collect(),
        }
    }
}

/// 8-bit RGB image as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb8Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl Rgb8Image {
    pub fn to_image(&self) -> Image {
        Image { width: self.width, height: self.height, pixels: self.pixels.iter().map(|p| rgb_from_u8(*p)).collect() }
    }
}

pub fn rgb_from_u8(p: [u8; 3]) -> Rgb {
    [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0]
}

pub fn rgb_to_u8(p: Rgb) -> [u8; 3] {
    p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

/// One line of a frame list.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FrameRecord {
    pub segment: String,
    pub frame_index: u32,
}

impl FrameRecord {
    pub fn new(segment: impl Into<String>, frame_index: u32) -> Self {
        Self { segment: segment.into(), frame_index }
    }
}

/// Per-texel and per-vertex mean and population variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub texture_mean: Texture,
    pub texture_variance: Texture,
    pub vertex_mean: TrackedMesh,
    pub vertex_variance: TrackedMesh,
}

impl DatasetStats {
    pub fn validate(&self) -> Result<()> {
        let res = self.texture_mean.resolution();
        if self.texture_variance.resolution() != res {
            return Err(Error::shape("texture statistics", &[res, res], &[self.texture_variance.resolution(); 2]));
        }
        if self.vertex_mean.vertex_count() != self.vertex_variance.vertex_count() {
            return Err(Error::shape(
                "vertex statistics",
                &[self.vertex_mean.vertex_count(), 3],
                &[self.vertex_variance.vertex_count(), 3],
            ));
        }
        let tex_neg = self.texture_variance.texels().iter().flatten().any(|&v| !(v >= 0.0));
        let vert_neg = self.vertex_variance.vertices.iter().flatten().any(|&v| !(v >= 0.0));
        if tex_neg || vert_neg {
            return Err(Error::validation("statistics", "variance must be non-negative"));
        }
        Ok(())
    }

    /// Square root of the mean texture variance, the global intensity scale
    /// used to normalize screen-space residuals.
    pub fn texture_scale(&self) -> f64 {
        let v = self.texture_variance.texels();
        let sum: f64 = v.iter().flatten().sum();
        (sum / (3 * v.len()).max(1) as f64 + 1e-6).sqrt()
    }
}

/// Streaming mean / population variance (Welford) over equally shaped samples.
struct Moments {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(len: usize) -> Self {
        Self { count: 0.0, mean: vec![0.0; len], m2: vec![0.0; len] }
    }

    fn push(&mut self, sample: impl Iterator<Item = f64>) {
        self.count += 1.0;
        for ((m, s), x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(sample) {
            let delta = x - *m;
            *m += delta / self.count;
            *s += delta * (x - *m);
        }
    }

    fn finish(self) -> (Vec<f64>, Vec<f64>) {
        let n = self.count;
        let var = self.m2.into_iter().map(|s| (s / n).max(0.0)).collect();
        (self.mean, var)
    }
}

fn triples(flat: Vec<f64>) -> Vec<[f64; 3]> {
    flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

/// Mean and population variance over all unwrapped textures (every frame and
/// camera) and all tracked meshes.
pub fn compute_stats(textures: &[Texture], meshes: &[TrackedMesh]) -> Result<DatasetStats> {
    let first_tex = textures.first().ok_or(Error::EmptyInput("texture samples"))?;
    let first_mesh = meshes.first().ok_or(Error::EmptyInput("mesh samples"))?;
    let res = first_tex.resolution();
    let vcount = first_mesh.vertex_count();

    let mut tex = Moments::new(res * res * 3);
    for t in textures {
        if t.resolution() != res {
            return Err(Error::shape("compute_stats", &[res, res], &[t.resolution(); 2]));
        }
        tex.push(t.texels().iter().flatten().copied());
    }
    let mut vert = Moments::new(vcount * 3);
    for m in meshes {
        if m.vertex_count() != vcount {
            return Err(Error::shape("compute_stats", &[vcount, 3], &[m.vertex_count(), 3]));
        }
        vert.push(m.vertices.iter().flatten().copied());
    }
    let (tm, tv) = tex.finish();
    let (vm, vv) = vert.finish();
    Ok(DatasetStats {
        texture_mean: Texture::from_texels(res, triples(tm))?,
        texture_variance: Texture::from_texels(res, triples(tv))?,
        vertex_mean: TrackedMesh::new(triples(vm)),
        vertex_variance: TrackedMesh::new(triples(vv)),
    })
}

/// Like [`compute_stats`], but each texel's statistics only use the views in
/// which that texel was valid. Texels never seen get mean and variance 0.
pub fn compute_stats_masked(
    textures: &[(Texture, crate::texture::TextureMask)],
    meshes: &[TrackedMesh],
) -> Result<DatasetStats> {
    let (first, _) = textures.first().ok_or(Error::EmptyInput("texture samples"))?;
    let res = first.resolution();
    let n = res * res;
    let mut count = vec![0.0; n];
    let mut mean = vec![[0.0; 3]; n];
    for (t, m) in textures {
        if t.resolution() != res || m.resolution() != res {
            return Err(Error::shape("compute_stats", &[res, res], &[t.resolution(); 2]));
        }
        for i in 0..n {
            if m.weights()[i] > 0.0 {
                count[i] += 1.0;
                for c in 0..3 {
                    mean[i][c] += t.texels()[i][c];
                }
            }
        }
    }
    for i in 0..n {
        if count[i] > 0.0 {
            mean[i] = mean[i].map(|v| v / count[i]);
        }
    }
    let mut var = vec![[0.0; 3]; n];
    for (t, m) in textures {
        for i in 0..n {
            if m.weights()[i] > 0.0 {
                for c in 0..3 {
                    let d = t.texels()[i][c] - mean[i][c];
                    var[i][c] += d * d / count[i];
                }
            }
        }
    }
    let geo = compute_stats(core::slice::from_ref(first), meshes)?;
    Ok(DatasetStats {
        texture_mean: Texture::from_texels(res, mean)?,
        texture_variance: Texture::from_texels(res, var)?,
        vertex_mean: geo.vertex_mean,
        vertex_variance: geo.vertex_variance,
    })
}

/// One captured frame: tracked geometry, pose, and one image per camera in
/// rig order.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptureFrame {
    pub record: FrameRecord,
    pub mesh: TrackedMesh,
    pub headpose: Headpose,
    pub images: Vec<Rgb8Image>,
}

/// A fully loaded multi-view capture.
#[derive(Debug, Clone, PartialEq)]
pub struct Capture {
    pub topology: MeshTopology,
    pub cameras: Vec<CameraCalibration>,
    pub frames: Vec<CaptureFrame>,
    pub stats: DatasetStats,
}

impl Capture {
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for cam in &self.cameras {
            if !ids.insert(cam.camera_id()) {
                return Err(Error::Duplicate(format!("camera {}", cam.camera_id())));
            }
        }
        let mut records = BTreeSet::new();
        for frame in &self.frames {
            if !records.insert(&frame.record) {
                return Err(Error::Duplicate(format!("frame {} {}", frame.record.segment, frame.record.frame_index)));
            }
            frame.mesh.check_topology(&self.topology)?;
            if frame.images.len() != self.cameras.len() {
                return Err(Error::Structure(format!(
                    "frame {} {} has {} images for {} cameras",
                    frame.record.segment,
                    frame.record.frame_index,
                    frame.images.len(),
                    self.cameras.len()
                )));
            }
            for (img, cam) in frame.images.iter().zip(&self.cameras) {
                let (w, h) = cam.image_size();
                if (img.width, img.height) != (w as usize, h as usize) {
                    return Err(Error::validation(
                        "image size",
                        format!("camera {} declares {w}x{h}, image is {}x{}", cam.camera_id(), img.width, img.height),
                    ));
                }
            }
        }
        self.stats.validate()?;
        if self.stats.vertex_mean.vertex_count() != self.topology.vertex_count() {
            return Err(Error::Structure(String::from("vertex statistics do not match the topology")));
        }
        Ok(())
    }

    pub fn camera_index(&self, camera_id: &str) -> Option<usize> {
        self.cameras.iter().position(|c| c.camera_id() == camera_id)
    }

    pub fn texture_resolution(&self) -> usize {
        self.stats.texture_mean.resolution()
    }

    /// Segment names in sorted order, without duplicates.
    pub fn segments(&self) -> Vec<&str> {
        let set: BTreeSet<&str> = self.frames.iter().map(|f| f.record.segment.as_str()).collect();
        set.into_iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_pass(samples: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
        let n = samples.len() as f64;
        let len = samples[0].len();
        let mut mean = vec![0.0; len];
        for s in samples {
            for (m, x) in mean.iter_mut().zip(s) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; len];
        for s in samples {
            for ((v, x), m) in var.iter_mut().zip(s).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        (mean, var)
    }

    fn mesh(vals: &[f64]) -> TrackedMesh {
        TrackedMesh::from_flat(vals)
    }

    #[test]
    fn single_sample_has_zero_variance() {
        let t = Texture::filled(4, [0.3, 0.5, 0.9]);
        let stats = compute_stats(core::slice::from_ref(&t), &[mesh(&[1.0, 2.0, 3.0])]).unwrap();
        assert_eq!(stats.texture_mean, t);
        assert!(stats.texture_variance.texels().iter().flatten().all(|&v| v == 0.0));
        assert!(stats.vertex_variance.vertices.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn two_constant_textures_average() {
        let (a, b) = (0.2, 0.7);
        let stats =
            compute_stats(&[Texture::filled(3, [a; 3]), Texture::filled(3, [b; 3])], &[mesh(&[0.0; 3])]).unwrap();
        for v in stats.texture_mean.texels().iter().flatten() {
            assert!((v - (a + b) / 2.0).abs() < 1e-15);
        }
        for v in stats.texture_variance.texels().iter().flatten() {
            assert!((v - 0.0625).abs() < 1e-15);
        }
    }

    #[test]
    fn stats_match_two_pass_reference() {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let res = 4;
        let textures: Vec<Texture> = (0..50)
            .map(|_| {
                Texture::from_texels(res, (0..res * res).map(|_| [rng.random(), rng.random(), rng.random()]).collect())
                    .unwrap()
            })
            .collect();
        let meshes: Vec<TrackedMesh> =
            (0..50).map(|_| mesh(&(0..9).map(|_| rng.random_range(-100.0..100.0)).collect::<Vec<_>>())).collect();
        let stats = compute_stats(&textures, &meshes).unwrap();

        let flat: Vec<Vec<f64>> = textures.iter().map(|t| t.texels().iter().flatten().copied().collect()).collect();
        let (m, v) = two_pass(&flat);
        let got_m: Vec<f64> = stats.texture_mean.texels().iter().flatten().copied().collect();
        let got_v: Vec<f64> = stats.texture_variance.texels().iter().flatten().copied().collect();
        for i in 0..m.len() {
            assert!((m[i] - got_m[i]).abs() < 1e-9);
            assert!((v[i] - got_v[i]).abs() < 1e-9);
        }
        let flat: Vec<Vec<f64>> = meshes.iter().map(|m| m.flatten()).collect();
        let (m, v) = two_pass(&flat);
        for i in 0..m.len() {
            assert!((m[i] - stats.vertex_mean.flatten()[i]).abs() < 1e-9);
            assert!((v[i] - stats.vertex_variance.flatten()[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_stats_input_is_rejected() {
        assert_eq!(compute_stats(&[], &[mesh(&[0.0; 3])]), Err(Error::EmptyInput("texture samples")));
        assert_eq!(compute_stats(&[Texture::filled(2, [0.0; 3])], &[]), Err(Error::EmptyInput("mesh samples")));
    }

    #[test]
    fn topology_rejects_out_of_range_index() {
        let err = MeshTopology::new(vec![[0, 1, 3]], vec![[[0.0; 2]; 3]], 3).unwrap_err();
        assert!(matches!(err, Error::Structure(_)));
        let err = MeshTopology::new(vec![[0, 1, 2]], vec![[[0.0, 1.5], [0.0; 2], [0.0; 2]]], 3).unwrap_err();
        assert!(matches!(err, Error::Validation { .. }));
    }

    #[test]
    fn headpose_validates_rotation() {
        let scaled = Matrix3::identity() * 2.0;
        assert!(Headpose::new(scaled, Vector3::zeros()).is_err());
        let reflection = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(Headpose::new(reflection, Vector3::zeros()).is_err());
        let rows = [1.0, 0.0, 0.0, 5.0, 0.0, 1.0, 0.0, 6.0, 0.0, 0.0, 1.0, 7.0];
        let pose = Headpose::from_rows(&rows).unwrap();
        assert_eq!(pose.to_rows(), rows);
    }

    #[test]
    fn look_at_camera_sees_target_on_axis() {
        let cam = CameraCalibration::look_at(
            "c0",
            (100.0, 100.0),
            (64, 48),
            Vector3::new(0.0, 0.0, -500.0),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
        )
        .unwrap();
        let p = cam.rotation() * Vector3::zeros() + cam.translation();
        assert!((p - Vector3::new(0.0, 0.0, 500.0)).norm() < 1e-9);
        assert!((cam.center() - Vector3::new(0.0, 0.0, -500.0)).norm() < 1e-9);
    }

    #[test]
    fn tetrahedron_euler_characteristic() {
        let topo =
            MeshTopology::new(vec![[0, 1, 2], [0, 3, 1], [1, 3, 2], [2, 3, 0]], vec![[[0.0; 2]; 3]; 4], 4).unwrap();
        assert_eq!(topo.euler_characteristic(), 2);
    }
}
