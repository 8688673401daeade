//! Texture-space machinery: bilinear sampling, unwrapping camera images into
//! the UV atlas, multi-view averaging, monotone warp fields and weight masks.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::Vector3;
#[allow(unused_imports)] // inherent once std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::capture::{CameraCalibration, Image, MeshTopology, Rgb, Texture, TrackedMesh};
use crate::error::{Error, Result};
use crate::geometry::{camera_to_screen, edge, to_camera};
use crate::raster::depth_pass;

/// Bilinear lookup into an interleaved RGB grid. Coordinates are in texel
/// units with texel `(i, j)` centered at `(i, j)`; lookups outside the grid
/// clamp to the border.
#[derive(Debug, Clone, Copy)]
pub struct Bilinear {
    pub value: Rgb,
    /// Texel indices of the four taps: `(x0,y0), (x1,y0), (x0,y1), (x1,y1)`.
    pub taps: [usize; 4],
    pub weights: [f64; 4],
    /// Derivatives of `value` with respect to `x` and `y`.
    pub d_dx: Rgb,
    pub d_dy: Rgb,
}

pub fn bilinear(data: &[Rgb], width: usize, height: usize, x: f64, y: f64) -> Bilinear {
    let xf = x.floor();
    let yf = y.floor();
    let (fx, fy) = (x - xf, y - yf);
    let clamp = |v: f64, n: usize| (v.max(0.0) as usize).min(n - 1);
    let (x0, x1) = (clamp(xf, width), clamp(xf + 1.0, width));
    let (y0, y1) = (clamp(yf, height), clamp(yf + 1.0, height));
    let taps = [y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1];
    let [p00, p10, p01, p11] = taps.map(|i| data[i]);
    let mut value = [0.0; 3];
    let mut d_dx = [0.0; 3];
    let mut d_dy = [0.0; 3];
    for c in 0..3 {
        // nested lerps keep constant regions exact
        let top = p00[c] + fx * (p10[c] - p00[c]);
        let bottom = p01[c] + fx * (p11[c] - p01[c]);
        value[c] = top + fy * (bottom - top);
        d_dx[c] = (1.0 - fy) * (p10[c] - p00[c]) + fy * (p11[c] - p01[c]);
        d_dy[c] = bottom - top;
    }
    Bilinear { value, taps, weights: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy], d_dx, d_dy }
}

/// Samples a texture at UV coordinates.
pub fn sample_uv(texture: &Texture, uv: [f64; 2]) -> Bilinear {
    let res = texture.resolution();
    let n = res as f64;
    bilinear(texture.texels(), res, res, uv[0] * n - 0.5, uv[1] * n - 0.5)
}

/// Per-texel non-negative weights in UV space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureMask {
    resolution: usize,
    weights: Vec<f64>,
}

impl TextureMask {
    pub fn filled(resolution: usize, value: f64) -> Self {
        Self { resolution, weights: vec![value; resolution * resolution] }
    }

    pub fn from_weights(resolution: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != resolution * resolution {
            return Err(Error::shape("texture mask", &[resolution, resolution], &[weights.len()]));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::validation("texture mask", "weights must be finite and >= 0"));
        }
        Ok(Self { resolution, weights })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.weights[y * self.resolution + x]
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().sum::<f64>() / self.weights.len() as f64
    }

    /// Elementwise maximum, used to take the union of binary masks.
    pub fn union(&self, other: &TextureMask) -> Result<TextureMask> {
        if other.resolution != self.resolution {
            return Err(Error::shape("mask union", &[self.resolution; 2], &[other.resolution; 2]));
        }
        Ok(TextureMask {
            resolution: self.resolution,
            weights: self.weights.iter().zip(&other.weights).map(|(a, b)| a.max(*b)).collect(),
        })
    }

    /// The mask as a single-channel texture replicated over RGB, for
    /// rendering through the rasterizer.
    pub fn to_texture(&self) -> Texture {
        Texture::from_texels(self.resolution, self.weights.iter().map(|&w| [w; 3]).collect())
            .expect("mask weights are finite")
    }
}

/// Which triangle covers each texel center of the UV atlas, and where.
#[derive(Debug, Clone)]
pub struct UvAtlas {
    resolution: usize,
    texels: Vec<Option<(u32, [f64; 3])>>,
}

impl UvAtlas {
    pub fn new(topology: &MeshTopology, resolution: usize) -> Self {
        let n = resolution as f64;
        let mut texels = vec![None; resolution * resolution];
        for (t, uvs) in topology.uv_per_corner().iter().enumerate() {
            let pts = uvs.map(|uv| [uv[0] * n, uv[1] * n]);
            let area = edge(pts[0], pts[1], pts[2]);
            if area == 0.0 {
                continue;
            }
            let lo = |k: usize| pts.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
            let hi = |k: usize| pts.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
            let x_range = span(lo(0), hi(0), resolution);
            let y_range = span(lo(1), hi(1), resolution);
            for y in y_range.clone() {
                for x in x_range.clone() {
                    let slot = &mut texels[y * resolution + x];
                    if slot.is_some() {
                        continue;
                    }
                    let p = [x as f64 + 0.5, y as f64 + 0.5];
                    let e = [
                        edge(pts[1], pts[2], p) / area,
                        edge(pts[2], pts[0], p) / area,
                        edge(pts[0], pts[1], p) / area,
                    ];
                    if e.iter().all(|&w| w >= 0.0) {
                        *slot = Some((t as u32, [e[0], e[1], 1.0 - e[0] - e[1]]));
                    }
                }
            }
        }
        Self { resolution, texels }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn texel(&self, x: usize, y: usize) -> Option<(u32, [f64; 3])> {
        self.texels[y * self.resolution + x]
    }

    pub fn covered(&self) -> usize {
        self.texels.iter().filter(|t| t.is_some()).count()
    }

    /// Resamples a camera image into UV space.
    ///
    /// A texel is valid when its triangle faces the camera, its projection
    /// lies inside the image with the bilinear taps and a
    /// [`SILHOUETTE_MARGIN`] ring around them on the rendered mesh, and it
    /// passes the depth test against the rendered depth buffer.
    /// Invalid texels are zero.
    pub fn unwrap(
        &self,
        image: &Image,
        mesh_world: &TrackedMesh,
        cal: &CameraCalibration,
        topology: &MeshTopology,
    ) -> (Texture, TextureMask) {
        let res = self.resolution;
        let mut texture = Texture::filled(res, [0.0; 3]);
        let mut validity = TextureMask::filled(res, 0.0);
        let (w, h) = (image.width, image.height);
        let depth = depth_pass(cal, mesh_world, topology, (w, h));

        let cam_pts: Vec<Vector3<f64>> =
            mesh_world.vertices.iter().map(|v| to_camera(cal, &Vector3::from(*v))).collect();
        let front: Vec<bool> = topology
            .triangles()
            .iter()
            .map(|tri| {
                let p = tri.map(|i| cam_pts[i as usize]);
                if p.iter().any(|q| q.z <= 0.0) {
                    return false;
                }
                let s = p.map(|q| camera_to_screen(cal, &q).xy);
                edge(s[0], s[1], s[2]) < 0.0
            })
            .collect();

        for y in 0..res {
            for x in 0..res {
                let Some((t, l)) = self.texel(x, y) else { continue };
                if !front[t as usize] {
                    continue;
                }
                let tri = topology.triangles()[t as usize];
                let pc =
                    cam_pts[tri[0] as usize] * l[0] + cam_pts[tri[1] as usize] * l[1] + cam_pts[tri[2] as usize] * l[2];
                let s = camera_to_screen(cal, &pc);
                let (px, py) = (s.xy[0] - 0.5, s.xy[1] - 0.5);
                if !(px >= 0.0 && py >= 0.0 && px <= (w - 1) as f64 && py <= (h - 1) as f64) {
                    continue;
                }
                if !interior(&depth, w, h, px, py) {
                    continue;
                }
                let sample = bilinear(&image.pixels, w, h, px, py);
                let zref: f64 =
                    sample.taps.iter().zip(&sample.weights).map(|(&tap, &wt)| wt * depth[tap].unwrap_or(0.0)).sum();
                if pc.z > zref * (1.0 + VISIBILITY_TOLERANCE) {
                    continue;
                }
                texture.set(x, y, sample.value);
                validity.weights[y * res + x] = 1.0;
            }
        }
        (texture, validity)
    }
}

/// Relative depth slack of the unwrapping visibility test.
pub const VISIBILITY_TOLERANCE: f64 = 5e-3;

/// Pixels of rendered coverage required around the bilinear footprint.
/// Right at the silhouette a single pixel spans a large stretch of surface,
/// so samples there do not resample the texture faithfully.
pub const SILHOUETTE_MARGIN: usize = 1;

fn interior(depth: &[Option<f64>], w: usize, h: usize, px: f64, py: f64) -> bool {
    let (bx, by) = (px.floor() as usize, py.floor() as usize);
    let m = SILHOUETTE_MARGIN;
    if bx < m || by < m || bx + 1 + m >= w || by + 1 + m >= h {
        return false;
    }
    (by - m..=by + 1 + m).all(|y| (bx - m..=bx + 1 + m).all(|x| depth[y * w + x].is_some()))
}

fn span(lo: f64, hi: f64, n: usize) -> core::ops::Range<usize> {
    // texel centers c + 0.5 within [lo, hi]
    let start = (lo - 0.5).ceil().max(0.0) as usize;
    let end = ((hi - 0.5).floor() + 1.0).clamp(0.0, n as f64) as usize;
    start..end.max(start)
}

/// Unwraps one camera image; see [`UvAtlas::unwrap`].
pub fn unwrap_texture(
    image: &Image,
    mesh_world: &TrackedMesh,
    cal: &CameraCalibration,
    topology: &MeshTopology,
    resolution: usize,
) -> (Texture, TextureMask) {
    UvAtlas::new(topology, resolution).unwrap(image, mesh_world, cal, topology)
}

/// Validity-weighted mean over views. Texels valid in no view take the
/// matching `fallback` texel (the dataset texture mean).
///
/// Per texel, contributions are sorted before summation so the result does not
/// depend on the order of `views`.
pub fn average_texture(views: &[(Texture, TextureMask)], fallback: &Texture) -> Result<Texture> {
    let first = views.first().ok_or(Error::EmptyInput("views to average"))?;
    let res = first.0.resolution();
    for (t, m) in views {
        if t.resolution() != res || m.resolution() != res {
            return Err(Error::shape("average_texture", &[res, res], &[t.resolution(), m.resolution()]));
        }
    }
    if fallback.resolution() != res {
        return Err(Error::shape("average_texture", &[res, res], &[fallback.resolution(); 2]));
    }
    let mut out = fallback.clone();
    let mut contrib: Vec<(f64, Rgb)> = Vec::with_capacity(views.len());
    for i in 0..res * res {
        contrib.clear();
        contrib.extend(views.iter().map(|(t, m)| (m.weights()[i], t.texels()[i])).filter(|(w, _)| *w > 0.0));
        if contrib.is_empty() {
            continue;
        }
        contrib.sort_by(|a, b| {
            a.0.total_cmp(&b.0)
                .then(a.1[0].total_cmp(&b.1[0]))
                .then(a.1[1].total_cmp(&b.1[1]))
                .then(a.1[2].total_cmp(&b.1[2]))
        });
        let wsum: f64 = contrib.iter().map(|c| c.0).sum();
        let mut acc = [0.0; 3];
        for (w, v) in &contrib {
            for c in 0..3 {
                acc[c] += w * v[c];
            }
        }
        out.texels_mut()[i] = acc.map(|a| a / wsum);
    }
    Ok(out)
}

/// Absolute sampling grid in texel units, channel-last (`[x, y]` per texel).
#[derive(Debug, Clone, PartialEq)]
pub struct WarpField {
    resolution: usize,
    grid: Vec<[f64; 2]>,
}

impl WarpField {
    pub fn identity(resolution: usize) -> Self {
        let grid = (0..resolution * resolution).map(|i| [(i % resolution) as f64, (i / resolution) as f64]).collect();
        Self { resolution, grid }
    }

    pub fn from_grid(resolution: usize, grid: Vec<[f64; 2]>) -> Result<Self> {
        if grid.len() != resolution * resolution {
            return Err(Error::shape("warp field", &[resolution, resolution, 2], &[grid.len(), 2]));
        }
        let field = Self { resolution, grid };
        let bad = field.violations();
        if bad > 0 {
            return Err(Error::validation("warp field", format!("{bad} monotonicity violations")));
        }
        Ok(field)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn grid(&self) -> &[[f64; 2]] {
        &self.grid
    }

    /// Number of places where the grid folds or leaves `[0, res - 1]`.
    pub fn violations(&self) -> usize {
        let n = self.resolution;
        let hi = (n - 1) as f64;
        let mut bad = 0;
        for y in 0..n {
            for x in 0..n {
                let p = self.grid[y * n + x];
                if !(p[0] >= 0.0 && p[0] <= hi && p[1] >= 0.0 && p[1] <= hi) {
                    bad += 1;
                }
                if x + 1 < n && !(self.grid[y * n + x + 1][0] >= p[0]) {
                    bad += 1;
                }
                if y + 1 < n && !(self.grid[(y + 1) * n + x][1] >= p[1]) {
                    bad += 1;
                }
            }
        }
        bad
    }
}

/// Floor added to every positive warp increment.
pub const WARP_EPSILON: f64 = 1e-3;

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Forward state of [`integrate_warp`], kept for the backward pass.
#[derive(Debug, Clone)]
pub struct WarpIntegration {
    pub field: WarpField,
    centered: Vec<f64>,
    cumulative: Vec<f64>,
    extrema: [(usize, usize); 2],
}

/// Turns unconstrained increments (planar `[2, res, res]`: x then y) into a
/// fold-free sampling grid.
///
/// Each channel is mean-centered, mapped through `softplus + WARP_EPSILON`,
/// summed cumulatively along its own axis, and affinely rescaled to span
/// `[0, res - 1]`. Centered increments are clamped to `+-warp_cap(res)` so
/// the running sums stay finite for any finite input.
pub fn integrate_warp(increments: &[f64], resolution: usize) -> Result<WarpIntegration> {
    let n = resolution;
    if n < 2 || increments.len() != 2 * n * n {
        return Err(Error::shape("integrate_warp", &[2, n, n], &[increments.len()]));
    }
    if let Some(bad) = increments.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("warp increment {bad}")));
    }
    let cap = warp_cap(n);
    let plane = n * n;
    let mut centered = vec![0.0; 2 * plane];
    let mut cumulative = vec![0.0; 2 * plane];
    let mut grid = vec![[0.0; 2]; plane];
    let mut extrema = [(0, 0); 2];
    let hi = (n - 1) as f64;
    for ch in 0..2 {
        let src = &increments[ch * plane..(ch + 1) * plane];
        // dividing first keeps the sum within the input's magnitude
        let mean = src.iter().map(|s| s / plane as f64).sum::<f64>();
        let cen = &mut centered[ch * plane..(ch + 1) * plane];
        for (c, s) in cen.iter_mut().zip(src) {
            *c = (s - mean).clamp(-cap, cap);
        }
        let cum = &mut cumulative[ch * plane..(ch + 1) * plane];
        for line in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                let idx = if ch == 0 { line * n + k } else { k * n + line };
                acc += softplus(cen[idx]) + WARP_EPSILON;
                cum[idx] = acc;
            }
        }
        let (mut lo, mut hi_i) = (0, 0);
        for i in 0..plane {
            if cum[i] < cum[lo] {
                lo = i;
            }
            if cum[i] > cum[hi_i] {
                hi_i = i;
            }
        }
        extrema[ch] = (lo, hi_i);
        let (m, range) = (cum[lo], cum[hi_i] - cum[lo]);
        for i in 0..plane {
            // the floor can vanish next to huge increments; fall back to the
            // uniform grid when nothing is left to rescale
            grid[i][ch] =
                if range > 0.0 { (cum[i] - m) / range * hi } else { (if ch == 0 { i % n } else { i / n }) as f64 };
        }
    }
    Ok(WarpIntegration { field: WarpField { resolution, grid }, centered, cumulative, extrema })
}

/// Bound on a centered increment: `res` of them still sum to a finite value.
fn warp_cap(resolution: usize) -> f64 {
    f64::MAX / (4 * resolution) as f64
}

impl WarpIntegration {
    /// Gradient with respect to the raw increments given the gradient with
    /// respect to the grid (planar `[2, res, res]`).
    pub fn backward(&self, grad_grid: &[f64]) -> Vec<f64> {
        let n = self.field.resolution;
        let plane = n * n;
        let hi = (n - 1) as f64;
        let cap = warp_cap(n);
        let mut grad = vec![0.0; 2 * plane];
        for ch in 0..2 {
            let cum = &self.cumulative[ch * plane..(ch + 1) * plane];
            let g_out = &grad_grid[ch * plane..(ch + 1) * plane];
            let (lo, hi_i) = self.extrema[ch];
            let (m, big_m) = (cum[lo], cum[hi_i]);
            let range = big_m - m;
            if !(range > 0.0) {
                continue;
            }
            // d/dcum of (cum - m) / range * hi, including the extrema
            let mut g_cum: Vec<f64> = g_out.iter().map(|g| g * hi / range).collect();
            let mut g_m = 0.0;
            let mut g_big_m = 0.0;
            for i in 0..plane {
                g_m += g_out[i] * hi * (cum[i] - big_m) / (range * range);
                g_big_m -= g_out[i] * hi * (cum[i] - m) / (range * range);
            }
            g_cum[lo] += g_m;
            g_cum[hi_i] += g_big_m;
            // reverse cumulative sum along the integration axis
            let cen = &self.centered[ch * plane..(ch + 1) * plane];
            let mut g_cen = vec![0.0; plane];
            for line in 0..n {
                let mut acc = 0.0;
                for k in (0..n).rev() {
                    let idx = if ch == 0 { line * n + k } else { k * n + line };
                    acc += g_cum[idx];
                    if cen[idx].abs() < cap {
                        g_cen[idx] = acc * sigmoid(cen[idx]);
                    }
                }
            }
            let mean_g = g_cen.iter().sum::<f64>() / plane as f64;
            for i in 0..plane {
                grad[ch * plane + i] = g_cen[i] - mean_g;
            }
        }
        grad
    }
}

/// `out(p) = texture(warp(p))` with bilinear lookups. Texture is planar
/// `[channels, res, res]`.
pub fn sample_warp(texture: &[f64], channels: usize, warp: &WarpField) -> Vec<f64> {
    let n = warp.resolution;
    let plane = n * n;
    let mut out = vec![0.0; channels * plane];
    for (i, p) in warp.grid.iter().enumerate() {
        let s = WarpTap::new(p[0], p[1], n);
        for c in 0..channels {
            let t = &texture[c * plane..(c + 1) * plane];
            out[c * plane + i] = s.value(t);
        }
    }
    out
}

/// Gradients of [`sample_warp`] with respect to the texture and the grid
/// (both planar).
pub fn sample_warp_backward(
    texture: &[f64],
    channels: usize,
    warp: &WarpField,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = warp.resolution;
    let plane = n * n;
    let mut g_tex = vec![0.0; channels * plane];
    let mut g_grid = vec![0.0; 2 * plane];
    for (i, p) in warp.grid.iter().enumerate() {
        let s = WarpTap::new(p[0], p[1], n);
        for c in 0..channels {
            let g = grad_out[c * plane + i];
            if g == 0.0 {
                continue;
            }
            let t = &texture[c * plane..(c + 1) * plane];
            for (tap, w) in s.taps.iter().zip(s.weights) {
                g_tex[c * plane + tap] += g * w;
            }
            let (dx, dy) = s.derivatives(t);
            g_grid[i] += g * dx;
            g_grid[plane + i] += g * dy;
        }
    }
    (g_tex, g_grid)
}

struct WarpTap {
    taps: [usize; 4],
    weights: [f64; 4],
    fx: f64,
    fy: f64,
}

impl WarpTap {
    fn new(x: f64, y: f64, n: usize) -> Self {
        let xf = x.floor();
        let yf = y.floor();
        let clamp = |v: f64| (v.max(0.0) as usize).min(n - 1);
        let (x0, x1, y0, y1) = (clamp(xf), clamp(xf + 1.0), clamp(yf), clamp(yf + 1.0));
        let (fx, fy) = (x - xf, y - yf);
        Self {
            taps: [y0 * n + x0, y0 * n + x1, y1 * n + x0, y1 * n + x1],
            weights: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
            fx,
            fy,
        }
    }

    fn value(&self, t: &[f64]) -> f64 {
        let [p00, p10, p01, p11] = self.taps.map(|i| t[i]);
        let top = p00 + self.fx * (p10 - p00);
        let bottom = p01 + self.fx * (p11 - p01);
        top + self.fy * (bottom - top)
    }

    fn derivatives(&self, t: &[f64]) -> (f64, f64) {
        let [p00, p10, p01, p11] = self.taps.map(|i| t[i]);
        let dx = (1.0 - self.fy) * (p10 - p00) + self.fy * (p11 - p01);
        let top = p00 + self.fx * (p10 - p00);
        let bottom = p01 + self.fx * (p11 - p01);
        (dx, bottom - top)
    }
}

/// A region of the UV square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum UvRegion {
    Rect { min: [f64; 2], max: [f64; 2] },
    Ellipse { center: [f64; 2], radii: [f64; 2] },
}

impl UvRegion {
    pub fn contains(&self, uv: [f64; 2]) -> bool {
        match *self {
            UvRegion::Rect { min, max } => uv[0] >= min[0] && uv[0] < max[0] && uv[1] >= min[1] && uv[1] < max[1],
            UvRegion::Ellipse { center, radii } => {
                let dx = (uv[0] - center[0]) / radii[0];
                let dy = (uv[1] - center[1]) / radii[1];
                dx * dx + dy * dy <= 1.0
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightRegion {
    pub region: UvRegion,
    pub weight: f64,
}

/// Rasterizes weighted regions at texel centers. Texels outside every region
/// weigh 1; overlapping regions take the largest weight.
pub fn make_weight_mask(regions: &[WeightRegion], resolution: usize) -> Result<TextureMask> {
    if let Some(r) = regions.iter().find(|r| !(r.weight >= 0.0) || !r.weight.is_finite()) {
        return Err(Error::validation(
            "weight mask",
            format!("region weight {} must be finite and non-negative", r.weight),
        ));
    }
    let n = resolution as f64;
    let mut weights = vec![1.0; resolution * resolution];
    for y in 0..resolution {
        for x in 0..resolution {
            let uv = [(x as f64 + 0.5) / n, (y as f64 + 0.5) / n];
            let best = regions
                .iter()
                .filter(|r| r.region.contains(uv))
                .map(|r| r.weight)
                .fold(None, |acc: Option<f64>, w| Some(acc.map_or(w, |a| a.max(w))));
            if let Some(w) = best {
                weights[y * resolution + x] = w;
            }
        }
    }
    TextureMask::from_weights(resolution, weights)
}
