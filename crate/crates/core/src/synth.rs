//! Synthetic multi-view captures with known ground truth.
//!
//! The head is a latitude-longitude ellipsoid with poles on the `y` axis, a
//! seam at the back and the face towards `+z`. Expressions are smooth bumps
//! along the vertex normals at fixed regions. Cameras sit on a sphere around
//! the head and cover its front cap. Every non-anchor camera gets a planted
//! per-channel gain and bias that is applied to the texture before rendering.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::{Rotation3, Vector3};
#[allow(unused_imports)] // inherent once std is linked
use num_traits::Float;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::capture::{
    compute_stats_masked, CameraCalibration, Capture, CaptureFrame, FrameRecord, Headpose, MeshTopology, Rgb8Image,
    Texture, TrackedMesh,
};
use crate::error::{Error, Result};
use crate::geometry::apply_headpose;
use crate::model::ChannelAffine;
use crate::raster::rasterize;
use crate::texture::UvAtlas;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub camera_count: usize,
    pub expression_count: usize,
    pub frames_per_expression: usize,
    pub texture_resolution: usize,
    pub image_size: (u32, u32),
    /// Distance of every camera from the head center, mm.
    pub rig_radius: f64,
    /// Half-angle of the spherical cap the cameras cover, radians.
    pub rig_half_angle: f64,
    /// Semi-axes of the head ellipsoid, mm.
    pub head_radii: [f64; 3],
    pub latitude_bands: usize,
    pub longitude_segments: usize,
    /// Peak displacement of each blendshape, mm.
    pub blendshape_amplitude: f64,
    /// Maximum headpose rotation per axis, radians, and translation, mm.
    pub pose_rotation: f64,
    pub pose_translation: f64,
    /// Planted gains lie in `1 +- gain_spread`, biases in `+- bias_spread`.
    pub gain_spread: f64,
    pub bias_spread: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            camera_count: 12,
            expression_count: 16,
            frames_per_expression: 2,
            texture_resolution: 64,
            image_size: (128, 96),
            rig_radius: 1200.0,
            rig_half_angle: 70f64.to_radians(),
            head_radii: [90.0, 110.0, 100.0],
            latitude_bands: 16,
            longitude_segments: 24,
            blendshape_amplitude: 8.0,
            pose_rotation: 0.12,
            pose_translation: 15.0,
            gain_spread: 0.15,
            bias_spread: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// A tiny capture for unit tests.
    pub fn micro(camera_count: usize) -> Self {
        Self {
            camera_count,
            expression_count: 4,
            frames_per_expression: 1,
            texture_resolution: 16,
            image_size: (32, 24),
            latitude_bands: 8,
            longitude_segments: 12,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let res = self.texture_resolution;
        if self.camera_count < 2 {
            return Err(Error::Config("at least two cameras are required".into()));
        }
        if !res.is_power_of_two() || !(8..=1024).contains(&res) {
            return Err(Error::Config(format!("texture resolution {res} must be a power of two in [8, 1024]")));
        }
        let (w, h) = self.image_size;
        if w == 0 || h == 0 || w > 1024 || h > 1024 {
            return Err(Error::Config(format!("image size {w}x{h} must be within 1..=1024")));
        }
        if self.expression_count == 0 || self.frames_per_expression == 0 {
            return Err(Error::Config("need at least one expression and frame".into()));
        }
        if self.latitude_bands < 2 || self.longitude_segments < 3 {
            return Err(Error::Config("sphere tessellation too coarse".into()));
        }
        if !(self.rig_radius > self.head_radii.iter().copied().fold(0.0, f64::max)) {
            return Err(Error::Config("cameras must lie outside the head".into()));
        }
        Ok(())
    }

    /// Focal length that frames the head in the configured images.
    pub fn focal_length(&self) -> f64 {
        let h = self.image_size.1 as f64;
        let r = self.head_radii.iter().copied().fold(0.0, f64::max);
        0.8 * h / 2.0 * (self.rig_radius - r) / r
    }
}

/// Base head: topology with UV atlas, neutral head-local mesh and the
/// ground-truth texture.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub topology: MeshTopology,
    pub mesh: TrackedMesh,
    pub texture: Texture,
}

pub fn generate_head(config: &SynthConfig) -> Result<Head> {
    let (nl, nm) = (config.latitude_bands, config.longitude_segments);
    let [rx, ry, rz] = config.head_radii;
    let point = |theta: f64, phi: f64| {
        // phi = 0 at the back, pi at the front
        [-rx * theta.sin() * phi.sin(), ry * theta.cos(), -rz * theta.sin() * phi.cos()]
    };
    let mut vertices = vec![point(0.0, 0.0)];
    for i in 1..nl {
        for j in 0..nm {
            vertices.push(point(PI * i as f64 / nl as f64, 2.0 * PI * j as f64 / nm as f64));
        }
    }
    vertices.push(point(PI, 0.0));
    let south = (vertices.len() - 1) as u32;
    let ring = |i: usize, j: usize| (1 + (i - 1) * nm + j % nm) as u32;

    let mut triangles = Vec::new();
    let mut uvs = Vec::new();
    let uv = |i: usize, j: usize| [j as f64 / nm as f64, i as f64 / nl as f64];
    let mut push = |tri: [u32; 3], uv3: [[f64; 2]; 3]| {
        let p = tri.map(|k| Vector3::from(vertices[k as usize]));
        let outward = (p[1] - p[0]).cross(&(p[2] - p[0])).dot(&(p[0] + p[1] + p[2])) > 0.0;
        if outward {
            triangles.push(tri);
            uvs.push(uv3);
        } else {
            triangles.push([tri[0], tri[2], tri[1]]);
            uvs.push([uv3[0], uv3[2], uv3[1]]);
        }
    };
    for j in 0..nm {
        let pole = [(j as f64 + 0.5) / nm as f64, 0.0];
        push([0, ring(1, j), ring(1, j + 1)], [pole, uv(1, j), uv(1, j + 1)]);
    }
    for i in 1..nl - 1 {
        for j in 0..nm {
            let (a, b, c, d) = (ring(i, j), ring(i, j + 1), ring(i + 1, j), ring(i + 1, j + 1));
            push([a, c, d], [uv(i, j), uv(i + 1, j), uv(i + 1, j + 1)]);
            push([a, d, b], [uv(i, j), uv(i + 1, j + 1), uv(i, j + 1)]);
        }
    }
    for j in 0..nm {
        let pole = [(j as f64 + 0.5) / nm as f64, 1.0];
        push([ring(nl - 1, j), south, ring(nl - 1, j + 1)], [uv(nl - 1, j), pole, uv(nl - 1, j + 1)]);
    }
    let vcount = vertices.len();
    let topology = MeshTopology::new(triangles, uvs, vcount)?;
    Ok(Head {
        topology,
        mesh: TrackedMesh::new(vertices),
        texture: procedural_texture(config.texture_resolution, config.seed),
    })
}

/// Skin-like color field defined on the unit sphere and sampled through the
/// lat-long atlas, so it stays smooth across the seam and at the poles.
/// Feature sizes stay above the footprint of one image pixel and the pore
/// layer is faint.
pub fn procedural_texture(resolution: usize, seed: u64) -> Texture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e57_u64);
    let mut wave = |freq: f64, amp: f64| {
        let k = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
            .normalize()
            * freq;
        let a = [0, 1, 2].map(|_| rng.random_range(0.5..1.0) * amp);
        (k, a, rng.random_range(0.0..2.0 * PI))
    };
    let mut waves: Vec<(Vector3<f64>, [f64; 3], f64)> = (0..4).map(|_| wave(2.0, 0.05)).collect();
    // pores
    waves.extend((0..8).map(|_| wave(14.0, 0.002)));
    // eyes, mouth and nose; the face looks down +z
    let blobs = [
        (Vector3::new(0.35, 0.35, 0.87), 0.3, [-0.10, -0.07, -0.05]),
        (Vector3::new(-0.35, 0.35, 0.87), 0.3, [-0.10, -0.07, -0.05]),
        (Vector3::new(0.0, -0.4, 0.92), 0.3, [0.09, -0.03, -0.03]),
        (Vector3::new(0.0, 0.0, 1.0), 0.35, [0.04, 0.02, -0.02]),
    ];
    let base = [0.55, 0.42, 0.35];
    let texels = (0..resolution * resolution)
        .map(|i| {
            let u = ((i % resolution) as f64 + 0.5) / resolution as f64;
            let v = ((i / resolution) as f64 + 0.5) / resolution as f64;
            let (theta, phi) = (PI * v, 2.0 * PI * u);
            let d = Vector3::new(-theta.sin() * phi.sin(), theta.cos(), -theta.sin() * phi.cos());
            let mut c = base;
            for (k, amp, ph) in &waves {
                let s = (k.dot(&d) + ph).sin();
                for j in 0..3 {
                    c[j] += amp[j] * s;
                }
            }
            for (center, r, tint) in &blobs {
                let ang = d.dot(&center.normalize()).clamp(-1.0, 1.0).acos();
                let g = (-(ang * ang) / (2.0 * r * r)).exp();
                for j in 0..3 {
                    c[j] += tint[j] * g;
                }
            }
            c
        })
        .collect();
    Texture::from_texels(resolution, texels).expect("finite")
}

/// Bump deformations: unit normal displacement weights per vertex for each
/// blendshape.
pub fn blendshapes(head: &Head, config: &SynthConfig) -> Vec<Vec<f64>> {
    let [rx, ry, rz] = config.head_radii;
    // brows, mouth, left cheek, right cheek, jaw
    let centers = [
        Vector3::new(0.0, 0.45, 0.89),
        Vector3::new(0.0, -0.35, 0.94),
        Vector3::new(0.6, -0.1, 0.8),
        Vector3::new(-0.6, -0.1, 0.8),
        Vector3::new(0.0, -0.8, 0.6),
    ];
    centers
        .iter()
        .map(|c| {
            let c = c.normalize();
            head.mesh
                .vertices
                .iter()
                .map(|p| {
                    let d = Vector3::new(p[0] / rx, p[1] / ry, p[2] / rz).normalize();
                    let ang = d.dot(&c).clamp(-1.0, 1.0).acos();
                    (-(ang * ang) / (2.0 * 0.3 * 0.3)).exp()
                })
                .collect()
        })
        .collect()
}

fn deform(head: &Head, shapes: &[Vec<f64>], weights: &[f64], amplitude: f64, radii: [f64; 3]) -> TrackedMesh {
    let vertices = head
        .mesh
        .vertices
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let n =
                Vector3::new(p[0] / (radii[0] * radii[0]), p[1] / (radii[1] * radii[1]), p[2] / (radii[2] * radii[2]))
                    .normalize();
            let s: f64 = shapes.iter().zip(weights).map(|(b, w)| b[i] * w).sum();
            let q = Vector3::from(*p) + n * (amplitude * s);
            [q.x, q.y, q.z]
        })
        .collect();
    TrackedMesh::new(vertices)
}

/// Cameras on a spherical cap around `+z`, all looking at the origin.
/// Camera 0 sits at the cap center.
pub fn generate_rig(config: &SynthConfig) -> Result<Vec<CameraCalibration>> {
    let n = config.camera_count;
    let f = config.focal_length();
    let cos_max = config.rig_half_angle.cos();
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            // equal-area spiral over the cap
            let t = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
            let cz = 1.0 - t * (1.0 - cos_max);
            let r = (1.0 - cz * cz).max(0.0).sqrt();
            let a = golden * i as f64;
            let dir = Vector3::new(r * a.cos(), r * a.sin() * 0.8, cz).normalize();
            let center = dir * config.rig_radius;
            CameraCalibration::look_at(
                format!("cam{i:02}"),
                (f, f),
                config.image_size,
                center,
                Vector3::zeros(),
                Vector3::new(0.0, 1.0, 0.0),
            )
        })
        .collect()
}

/// Ground truth kept next to a generated capture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub anchor: String,
    pub color: BTreeMap<String, ChannelAffine>,
    pub texture: Texture,
    /// Blendshape weights per `(segment, frame_index)`.
    pub blendshape_weights: Vec<(FrameRecord, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCapture {
    pub capture: Capture,
    pub truth: SynthTruth,
}

/// Renders the ground-truth image of one frame and camera.
pub fn render_truth(capture: &Capture, truth: &SynthTruth, frame: usize, camera: usize) -> Result<Rgb8Image> {
    let f = &capture.frames[frame];
    let cal = &capture.cameras[camera];
    let cc = truth.color.get(cal.camera_id()).ok_or_else(|| Error::UnknownCamera(cal.camera_id().into()))?;
    let texels = truth.texture.texels().iter().map(|&c| cc.apply(c)).collect();
    let tex = Texture::from_texels(truth.texture.resolution(), texels)?;
    let world = apply_headpose(&f.mesh, &f.headpose);
    Ok(rasterize(cal, &world, &capture.topology, &tex).to_image().to_rgb8())
}

pub fn generate_capture(config: &SynthConfig) -> Result<SynthCapture> {
    config.validate()?;
    let head = generate_head(config)?;
    let shapes = blendshapes(&head, config);
    let cameras = generate_rig(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let anchor = String::from(cameras[0].camera_id());
    let mut color = BTreeMap::new();
    for (i, cam) in cameras.iter().enumerate() {
        let cc = if i == 0 {
            ChannelAffine::IDENTITY
        } else {
            ChannelAffine {
                gain: [0, 1, 2].map(|_| 1.0 + rng.random_range(-config.gain_spread..=config.gain_spread)),
                bias: [0, 1, 2].map(|_| rng.random_range(-config.bias_spread..=config.bias_spread)),
            }
        };
        color.insert(String::from(cam.camera_id()), cc);
    }
    let truth_texture = head.texture.clone();
    let mut truth = SynthTruth { anchor, color, texture: truth_texture, blendshape_weights: Vec::new() };

    let mut frames = Vec::new();
    for e in 0..config.expression_count {
        let peak: Vec<f64> = shapes.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
        let segment = format!("EXP_{e:02}");
        for k in 0..config.frames_per_expression {
            let ramp = (k + 1) as f64 / config.frames_per_expression as f64;
            let w: Vec<f64> = peak.iter().map(|p| p * ramp).collect();
            let mesh = deform(&head, &shapes, &w, config.blendshape_amplitude, config.head_radii);
            let r = config.pose_rotation;
            let rot = Rotation3::from_euler_angles(
                rng.random_range(-r..=r),
                rng.random_range(-r..=r),
                rng.random_range(-r..=r) * 0.5,
            );
            let tr = config.pose_translation;
            let t = Vector3::new(rng.random_range(-tr..=tr), rng.random_range(-tr..=tr), rng.random_range(-tr..=tr));
            let record = FrameRecord::new(segment.clone(), k as u32);
            truth.blendshape_weights.push((record.clone(), w));
            frames.push(CaptureFrame { record, mesh, headpose: Headpose::new(*rot.matrix(), t)?, images: Vec::new() });
        }
    }

    let placeholder = crate::capture::DatasetStats {
        texture_mean: head.texture.clone(),
        texture_variance: head.texture.clone(),
        vertex_mean: head.mesh.clone(),
        vertex_variance: head.mesh.clone(),
    };
    let mut capture = Capture { topology: head.topology.clone(), cameras, frames, stats: placeholder };
    for k in 0..capture.frames.len() {
        let images =
            (0..capture.cameras.len()).map(|c| render_truth(&capture, &truth, k, c)).collect::<Result<Vec<_>>>()?;
        capture.frames[k].images = images;
    }

    let atlas = UvAtlas::new(&capture.topology, config.texture_resolution);
    let all: Vec<usize> = (0..capture.cameras.len()).collect();
    let mut views = Vec::new();
    for k in 0..capture.frames.len() {
        views.extend(crate::train::unwrap_views(&capture, &atlas, k, &all));
    }
    let meshes: Vec<TrackedMesh> = capture.frames.iter().map(|f| f.mesh.clone()).collect();
    capture.stats = compute_stats_masked(&views, &meshes)?;
    capture.validate()?;
    Ok(SynthCapture { capture, truth })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::rasterize_fragments;

    #[test]
    fn head_is_deterministic_and_closed() {
        let cfg = SynthConfig::default();
        let a = generate_head(&cfg).unwrap();
        let b = generate_head(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.topology.vertex_count(), 2 + 15 * 24);
        assert_eq!(a.topology.euler_characteristic(), 2);
    }

    #[test]
    fn uv_atlas_triangles_have_area_and_do_not_overlap() {
        let cfg = SynthConfig::default();
        let head = generate_head(&cfg).unwrap();
        let mut sign = 0.0;
        for uv in head.topology.uv_per_corner() {
            let a = crate::geometry::edge(uv[0], uv[1], uv[2]);
            assert!(a.abs() > 0.0);
            if sign == 0.0 {
                sign = a.signum();
            }
            assert_eq!(a.signum(), sign);
        }
        // rasterize the atlas at high resolution and count claims per texel
        let n = 256;
        let mut claims = vec![0u8; n * n];
        for uv in head.topology.uv_per_corner() {
            let p = uv.map(|q| [q[0] * n as f64, q[1] * n as f64]);
            let area = crate::geometry::edge(p[0], p[1], p[2]);
            for y in 0..n {
                for x in 0..n {
                    let c = [x as f64 + 0.5, y as f64 + 0.5];
                    let e = [
                        crate::geometry::edge(p[1], p[2], c) / area,
                        crate::geometry::edge(p[2], p[0], c) / area,
                        crate::geometry::edge(p[0], p[1], c) / area,
                    ];
                    if e.iter().all(|&v| v > 1e-9) {
                        claims[y * n + x] += 1;
                    }
                }
            }
        }
        assert!(claims.iter().all(|&c| c <= 1));
    }

    #[test]
    fn every_camera_sees_the_head() {
        let cfg = SynthConfig::default();
        let head = generate_head(&cfg).unwrap();
        for cal in generate_rig(&cfg).unwrap() {
            let (w, h) = cal.image_size();
            let f = rasterize_fragments(&cal, &head.mesh, &head.topology, (w as usize, h as usize));
            let frac = f.covered_count() as f64 / (w * h) as f64;
            assert!(frac > 0.15 && frac < 0.8, "{} covers {frac}", cal.camera_id());
            // nothing touches the border
            for x in 0..w as usize {
                assert!(!f.covered(x) && !f.covered((h as usize - 1) * w as usize + x));
            }
        }
    }

    #[test]
    fn micro_capture_is_valid_and_anchor_is_identity() {
        let s = generate_capture(&SynthConfig::micro(3)).unwrap();
        s.capture.validate().unwrap();
        assert_eq!(s.truth.color[&s.truth.anchor], ChannelAffine::IDENTITY);
        assert_eq!(s.capture.frames.len(), 4);
        let again = render_truth(&s.capture, &s.truth, 2, 1).unwrap();
        assert_eq!(again, s.capture.frames[2].images[1]);
    }
}
