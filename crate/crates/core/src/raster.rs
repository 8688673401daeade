//! Z-buffered software rasterizer with analytic gradients.
//!
//! Triangles are culled when any vertex lies on or behind the camera plane or
//! when they face away from the camera (front faces run counter-clockwise on
//! screen with `y` down, i.e. have negative [`edge`] area). Each pixel center
//! keeps the nearest triangle by perspective-correct depth; ties go to the
//! lower triangle index. UVs are interpolated perspective-correctly and the
//! texture is sampled bilinearly. Background pixels are black.
//!
//! Gradients flow to the texture and, through the barycentric weights, the
//! perspective division and the projection, to the vertices. Visibility
//! changes (silhouettes, occlusion boundaries) contribute no gradient.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::Vector3;
#[allow(unused_imports)] // inherent once std is linked
use num_traits::Float;

use crate::capture::{CameraCalibration, Image, MeshTopology, Rgb, Texture, TrackedMesh};
use crate::error::{Error, Result};
use crate::geometry::{camera_to_screen, edge, to_camera, ScreenVertex, DEGENERATE_AREA2};
use crate::texture::{sample_uv, TextureMask};

/// Per-pixel visibility of one rendered view.
#[derive(Debug, Clone, PartialEq)]
pub struct Fragments {
    pub width: usize,
    pub height: usize,
    /// Covering triangle, `-1` for background.
    pub triangle_id: Vec<i32>,
    /// Perspective-correct barycentric weights.
    pub bary: Vec<[f64; 3]>,
    /// Screen-space barycentric weights.
    pub screen_bary: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub uv: Vec<[f64; 2]>,
    screen: Vec<ScreenVertex>,
    camera_points: Vec<Vector3<f64>>,
}

impl Fragments {
    pub fn covered(&self, pixel: usize) -> bool {
        self.triangle_id[pixel] >= 0
    }

    pub fn coverage(&self) -> Vec<bool> {
        self.triangle_id.iter().map(|&t| t >= 0).collect()
    }

    pub fn covered_count(&self) -> usize {
        self.triangle_id.iter().filter(|&&t| t >= 0).count()
    }

    pub fn screen_vertices(&self) -> &[ScreenVertex] {
        &self.screen
    }

    /// Renders a texture through the stored visibility.
    pub fn shade(&self, texture: &Texture) -> Vec<Rgb> {
        self.triangle_id
            .iter()
            .zip(&self.uv)
            .map(|(&t, &uv)| if t < 0 { [0.0; 3] } else { sample_uv(texture, uv).value })
            .collect()
    }

    /// Renders a scalar texture-space mask; background is 0.
    pub fn shade_mask(&self, mask: &TextureMask) -> Vec<f64> {
        self.shade(&mask.to_texture()).into_iter().map(|c| c[0]).collect()
    }
}

/// Output of [`rasterize`].
#[derive(Debug, Clone, PartialEq)]
pub struct RasterOutput {
    pub fragments: Fragments,
    pub color: Vec<Rgb>,
}

impl RasterOutput {
    pub fn to_image(&self) -> Image {
        Image { width: self.fragments.width, height: self.fragments.height, pixels: self.color.clone() }
    }
}

/// Visibility pass only.
pub fn rasterize_fragments(
    cal: &CameraCalibration,
    mesh_world: &TrackedMesh,
    topology: &MeshTopology,
    size: (usize, usize),
) -> Fragments {
    let (width, height) = size;
    let camera_points: Vec<Vector3<f64>> =
        mesh_world.vertices.iter().map(|v| to_camera(cal, &Vector3::from(*v))).collect();
    let screen: Vec<ScreenVertex> = camera_points.iter().map(|p| camera_to_screen(cal, p)).collect();

    let npix = width * height;
    let mut frag = Fragments {
        width,
        height,
        triangle_id: vec![-1; npix],
        bary: vec![[0.0; 3]; npix],
        screen_bary: vec![[0.0; 3]; npix],
        depth: vec![f64::INFINITY; npix],
        uv: vec![[0.0; 2]; npix],
        screen: Vec::new(),
        camera_points: Vec::new(),
    };

    for (t, tri) in topology.triangles().iter().enumerate() {
        let v = tri.map(|i| screen[i as usize]);
        if v.iter().any(|s| !s.in_front()) {
            continue;
        }
        let s = v.map(|q| q.xy);
        let area = edge(s[0], s[1], s[2]);
        if !(area < 0.0) || area * area <= DEGENERATE_AREA2 {
            continue;
        }
        let min_x = s.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
        let max_x = s.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
        let min_y = s.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
        let max_y = s.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
        let Some(xs) = pixel_span(min_x, max_x, width) else { continue };
        let Some(ys) = pixel_span(min_y, max_y, height) else { continue };
        let uvs = topology.uv_per_corner()[t];
        for py in ys.0..ys.1 {
            for px in xs.0..xs.1 {
                let p = [px as f64 + 0.5, py as f64 + 0.5];
                let Some((l, w, z)) = pixel_weights(s, [v[0].depth, v[1].depth, v[2].depth], area, p) else {
                    continue;
                };
                let i = py * width + px;
                if z < frag.depth[i] {
                    frag.depth[i] = z;
                    frag.triangle_id[i] = t as i32;
                    frag.screen_bary[i] = l;
                    frag.bary[i] = w;
                    frag.uv[i] = [
                        w[0] * uvs[0][0] + w[1] * uvs[1][0] + w[2] * uvs[2][0],
                        w[0] * uvs[0][1] + w[1] * uvs[1][1] + w[2] * uvs[2][1],
                    ];
                }
            }
        }
    }
    frag.screen = screen;
    frag.camera_points = camera_points;
    frag
}

/// Coverage test and interpolation weights of a pixel center inside a
/// front-facing triangle: screen weights, perspective-correct weights and
/// depth.
#[inline]
pub fn pixel_weights(s: [[f64; 2]; 3], z: [f64; 3], area: f64, p: [f64; 2]) -> Option<([f64; 3], [f64; 3], f64)> {
    let e0 = edge(s[1], s[2], p);
    let e1 = edge(s[2], s[0], p);
    let e2 = edge(s[0], s[1], p);
    if e0 > 0.0 || e1 > 0.0 || e2 > 0.0 {
        return None;
    }
    let l0 = e0 / area;
    let l1 = e1 / area;
    let l = [l0, l1, 1.0 - l0 - l1];
    let q = [l[0] / z[0], l[1] / z[1], l[2] / z[2]];
    let qs = q[0] + q[1] + q[2];
    Some((l, [q[0] / qs, q[1] / qs, q[2] / qs], 1.0 / qs))
}

/// Inclusive-exclusive range of pixels whose centers may fall in `[lo, hi]`.
fn pixel_span(lo: f64, hi: f64, n: usize) -> Option<(usize, usize)> {
    let start = (lo - 0.5).ceil().max(0.0);
    let end = ((hi - 0.5).floor() + 1.0).min(n as f64);
    (end > start).then_some((start as usize, end as usize))
}

/// Per-pixel depth of the nearest front-facing surface, `None` on background.
pub fn depth_pass(
    cal: &CameraCalibration,
    mesh_world: &TrackedMesh,
    topology: &MeshTopology,
    size: (usize, usize),
) -> Vec<Option<f64>> {
    let f = rasterize_fragments(cal, mesh_world, topology, size);
    f.triangle_id.iter().zip(&f.depth).map(|(&t, &d)| (t >= 0).then_some(d)).collect()
}

/// Renders a textured mesh at the camera's declared image size.
pub fn rasterize(
    cal: &CameraCalibration,
    mesh_world: &TrackedMesh,
    topology: &MeshTopology,
    texture: &Texture,
) -> RasterOutput {
    let (w, h) = cal.image_size();
    rasterize_sized(cal, mesh_world, topology, texture, (w as usize, h as usize))
}

pub fn rasterize_sized(
    cal: &CameraCalibration,
    mesh_world: &TrackedMesh,
    topology: &MeshTopology,
    texture: &Texture,
    size: (usize, usize),
) -> RasterOutput {
    let fragments = rasterize_fragments(cal, mesh_world, topology, size);
    let color = fragments.shade(texture);
    RasterOutput { fragments, color }
}

/// Gradients produced by [`rasterize_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct RasterGradients {
    pub texture: Vec<Rgb>,
    /// With respect to world-space vertex positions.
    pub vertices: Vec<[f64; 3]>,
}

/// Backpropagates `upstream` (dL/dcolor per pixel) through a forward pass.
pub fn rasterize_backward(
    out: &RasterOutput,
    cal: &CameraCalibration,
    topology: &MeshTopology,
    texture: &Texture,
    upstream: &[Rgb],
) -> Result<RasterGradients> {
    let frag = &out.fragments;
    if upstream.len() != frag.triangle_id.len() {
        return Err(Error::shape("rasterize_backward", &[frag.height, frag.width, 3], &[upstream.len(), 3]));
    }
    let res = texture.resolution();
    let n = res as f64;
    let mut g_tex = vec![[0.0; 3]; res * res];
    let mut g_cam = vec![Vector3::<f64>::zeros(); frag.screen.len()];

    for (i, g) in upstream.iter().enumerate() {
        let t = frag.triangle_id[i];
        if t < 0 || g.iter().all(|&v| v == 0.0) {
            continue;
        }
        let sample = sample_uv(texture, frag.uv[i]);
        for (&tap, &w) in sample.taps.iter().zip(&sample.weights) {
            for c in 0..3 {
                g_tex[tap][c] += g[c] * w;
            }
        }

        let tri = topology.triangles()[t as usize];
        let uvs = topology.uv_per_corner()[t as usize];
        let g_u: f64 = (0..3).map(|c| g[c] * sample.d_dx[c]).sum::<f64>() * n;
        let g_v: f64 = (0..3).map(|c| g[c] * sample.d_dy[c]).sum::<f64>() * n;
        let w = frag.bary[i];
        let l = frag.screen_bary[i];
        let sv = tri.map(|k| frag.screen[k as usize]);
        let z = sv.map(|q| q.depth);
        let qs = 1.0 / frag.depth[i];

        let g_w = [0, 1, 2].map(|k| g_u * uvs[k][0] + g_v * uvs[k][1]);
        let dot: f64 = (0..3).map(|k| g_w[k] * w[k]).sum();
        let g_q = [0, 1, 2].map(|k| (g_w[k] - dot) / qs);
        let g_l = [0, 1, 2].map(|k| g_q[k] / z[k]);
        let g_z = [0, 1, 2].map(|k| -g_q[k] * l[k] / (z[k] * z[k]));

        // l0 = e0 / A, l1 = e1 / A, l2 = 1 - l0 - l1
        let g_e0 = (g_l[0] - g_l[2]) / area_of(&sv);
        let g_e1 = (g_l[1] - g_l[2]) / area_of(&sv);
        let g_area = -(g_e0 * l[0] + g_e1 * l[1]);
        let s = sv.map(|q| q.xy);
        let p = [(i % frag.width) as f64 + 0.5, (i / frag.width) as f64 + 0.5];
        let mut g_s = [[0.0; 2]; 3];
        edge_grad(&mut g_s, 1, 2, s, p, g_e0);
        edge_grad(&mut g_s, 2, 0, s, p, g_e1);
        // A = edge(s0, s1, s2)
        edge_grad(&mut g_s, 0, 1, s, s[2], g_area);
        g_s[2][0] += -(s[1][1] - s[0][1]) * g_area;
        g_s[2][1] += (s[1][0] - s[0][0]) * g_area;

        for k in 0..3 {
            let pc = frag.camera_points[tri[k] as usize];
            let inv = 1.0 / pc.z;
            let gx = g_s[k][0];
            let gy = g_s[k][1];
            let acc = &mut g_cam[tri[k] as usize];
            acc.x += gx * cal.fx() * inv;
            acc.y += gx * cal.skew() * inv + gy * cal.fy() * inv;
            acc.z +=
                -gx * (cal.fx() * pc.x + cal.skew() * pc.y) * inv * inv - gy * cal.fy() * pc.y * inv * inv + g_z[k];
        }
    }
    let rt = cal.rotation().transpose();
    let vertices = g_cam
        .iter()
        .map(|g| {
            let w = rt * g;
            [w.x, w.y, w.z]
        })
        .collect();
    Ok(RasterGradients { texture: g_tex, vertices })
}

fn area_of(sv: &[ScreenVertex; 3]) -> f64 {
    edge(sv[0].xy, sv[1].xy, sv[2].xy)
}

/// Accumulates `g * d edge(s[a], s[b], p) / d(s[a], s[b])`.
fn edge_grad(g_s: &mut [[f64; 2]; 3], a: usize, b: usize, s: [[f64; 2]; 3], p: [f64; 2], g: f64) {
    let (sa, sb) = (s[a], s[b]);
    g_s[a][0] += g * (sb[1] - p[1]);
    g_s[a][1] += g * (p[0] - sb[0]);
    g_s[b][0] += g * (p[1] - sa[1]);
    g_s[b][1] += g * -(p[0] - sa[0]);
}

/// Stateful wrapper that remembers the last forward pass.
#[derive(Debug, Default)]
pub struct DiffRasterizer {
    state: Option<ForwardState>,
}

#[derive(Debug)]
struct ForwardState {
    out: RasterOutput,
    cal: CameraCalibration,
    topology: MeshTopology,
    texture: Texture,
}

impl DiffRasterizer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(
        &mut self,
        cal: &CameraCalibration,
        mesh_world: &TrackedMesh,
        topology: &MeshTopology,
        texture: &Texture,
    ) -> &RasterOutput {
        let out = rasterize(cal, mesh_world, topology, texture);
        &self
            .state
            .insert(ForwardState { out, cal: cal.clone(), topology: topology.clone(), texture: texture.clone() })
            .out
    }

    pub fn backward(&self, upstream: &[Rgb]) -> Result<RasterGradients> {
        let st = self.state.as_ref().ok_or(Error::Usage("rasterizer backward called before forward"))?;
        rasterize_backward(&st.out, &st.cal, &st.topology, &st.texture, upstream)
    }
}

/// Masked screen-space squared error and its gradient with respect to the
/// rendered color.
#[derive(Debug, Clone, PartialEq)]
pub struct ScreenLoss {
    pub loss: f64,
    pub grad: Vec<Rgb>,
}

/// `mean_p,c  M(p) * (F(p) * (pred - target))^2 / scale^2`, averaged over all
/// pixels and channels, where `M` and `F` are the rendered weight and
/// foreground masks.
pub fn screen_loss(pred: &[Rgb], weight: &[f64], foreground: &[f64], target: &Image, scale: f64) -> Result<ScreenLoss> {
    let n = target.pixels.len();
    if pred.len() != n || weight.len() != n || foreground.len() != n {
        return Err(Error::shape("screen_loss", &[n], &[pred.len(), weight.len(), foreground.len()]));
    }
    let norm = 1.0 / (3.0 * n as f64 * scale * scale);
    let mut loss = 0.0;
    let mut grad = vec![[0.0; 3]; n];
    for i in 0..n {
        let wf = weight[i] * foreground[i] * foreground[i];
        if wf == 0.0 {
            continue;
        }
        for c in 0..3 {
            let d = pred[i][c] - target.pixels[i][c];
            loss += wf * d * d;
            grad[i][c] = 2.0 * wf * d * norm;
        }
    }
    Ok(ScreenLoss { loss: loss * norm, grad })
}
