//! Reverse-mode tape over [`Tensor`] values.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{Matrix3, Vector3};
#[allow(unused_imports)] // inherent once std is linked
use num_traits::Float;

use super::conv::{self, ConvGeometry};
use super::params::{Gradients, ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};
use crate::texture::{self, WarpField, WarpIntegration};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// How a transposed convolution adds its bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasMode {
    /// One scalar per output channel, shape `[C]`.
    PerChannel,
    /// One value per output element, shape `[C, H, W]`.
    Spatial,
}

#[derive(Debug)]
enum Op {
    Leaf(Option<ParamId>),
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry },
    ConvTranspose2d { input: Var, weight: Var, bias: Option<(Var, BiasMode)>, geom: ConvGeometry },
    Linear { input: Var, weight: Var, bias: Option<Var> },
    LeakyRelu { input: Var, slope: f64 },
    Add(Var, Var),
    Scale(Var, f64),
    AffineConst { input: Var, scale: Vec<f64> },
    Reshape(Var),
    Concat(Vec<Var>),
    Slice { input: Var, start: usize },
    Reparameterize { mean: Var, log_std: Var, noise: Vec<f64> },
    Kl { mean: Var, log_std: Var },
    IntegrateWarp { input: Var, state: Box<WarpIntegration> },
    SampleWarp { texture: Var, warp: Var, channels: usize, field: Box<WarpField> },
    ColorCorrect { texture: Var, gain: Var, bias: Var },
    Rigid { input: Var, rotation: Matrix3<f64> },
    Mse { input: Var, target: Vec<f64> },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records operations for one forward pass. Gradients are obtained with
/// [`Tape::backward`]; the tape itself is never mutated by the backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant with no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_grad(false), Op::Leaf(None))
    }

    /// A differentiable input that is not a parameter.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t.with_grad(true), Op::Leaf(None))
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Leaf(Some(id)))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeometry::conv(self.value(input).shape(), self.value(weight).shape(), stride, pad)?;
        if let Some(b) = bias {
            let bs = self.value(b).shape();
            if bs != [geom.out_channels] {
                return Err(Error::shape("conv2d bias", &[geom.out_channels], bs));
            }
        }
        let out = conv::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let t = Tensor::new(&[geom.out_channels, geom.out_size.0, geom.out_size.1], out)?;
        Ok(self.push(t, Op::Conv2d { input, weight, bias, geom }))
    }

    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<(Var, BiasMode)>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = ConvGeometry::transposed(self.value(input).shape(), self.value(weight).shape(), stride, pad)?;
        let (oh, ow) = geom.out_size;
        let mut out = conv::conv_transpose2d_forward(&geom, self.value(input).data(), self.value(weight).data());
        if let Some((b, mode)) = bias {
            let bv = self.value(b);
            let expect: Vec<usize> = match mode {
                BiasMode::PerChannel => vec![geom.out_channels],
                BiasMode::Spatial => vec![geom.out_channels, oh, ow],
            };
            if bv.shape() != expect.as_slice() {
                return Err(Error::shape("conv_transpose2d bias", &expect, bv.shape()));
            }
            match mode {
                BiasMode::PerChannel => {
                    for (c, plane) in out.chunks_mut(oh * ow).enumerate() {
                        plane.iter_mut().for_each(|v| *v += bv.data()[c]);
                    }
                }
                BiasMode::Spatial => out.iter_mut().zip(bv.data()).for_each(|(o, b)| *o += b),
            }
        }
        let t = Tensor::new(&[geom.out_channels, oh, ow], out)?;
        Ok(self.push(t, Op::ConvTranspose2d { input, weight, bias, geom }))
    }

    /// `y = W x + b` with `x` flattened; `W` has shape `[out, in]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let [out_dim, in_dim] = *w.shape() else {
            return Err(Error::shape("linear weight", &[0, x.len()], w.shape()));
        };
        if in_dim != x.len() {
            return Err(Error::shape("linear input", &[in_dim], x.shape()));
        }
        let mut y = vec![0.0; out_dim];
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &w.data()[o * in_dim..(o + 1) * in_dim];
            *yo = row.iter().zip(x.data()).map(|(a, b)| a * b).sum();
        }
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.shape() != [out_dim] {
                return Err(Error::shape("linear bias", &[out_dim], bv.shape()));
            }
            y.iter_mut().zip(bv.data()).for_each(|(a, b)| *a += b);
        }
        let t = Tensor::new(&[out_dim], y)?;
        Ok(self.push(t, Op::Linear { input, weight, bias }))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
        let t = Tensor::new(x.shape(), data).expect("same shape");
        self.push(t, Op::LeakyRelu { input, slope })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("add", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let t = Tensor::new(x.shape(), data)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let x = self.value(input);
        let t = Tensor::new(x.shape(), x.data().iter().map(|v| v * factor).collect()).expect("same shape");
        self.push(t, Op::Scale(input, factor))
    }

    /// Elementwise `x * scale + shift` with constant vectors.
    pub fn affine_const(&mut self, input: Var, scale: Vec<f64>, shift: &[f64]) -> Result<Var> {
        let x = self.value(input);
        if scale.len() != x.len() || shift.len() != x.len() {
            return Err(Error::shape("affine_const", x.shape(), &[scale.len(), shift.len()]));
        }
        let data = x.data().iter().zip(&scale).zip(shift).map(|((v, s), b)| v * s + b).collect();
        let t = Tensor::new(x.shape(), data)?;
        Ok(self.push(t, Op::AffineConst { input, scale }))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(input).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(input)))
    }

    /// Flattens and concatenates.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let data: Vec<f64> = parts.iter().flat_map(|p| self.value(*p).data().iter().copied()).collect();
        let n = data.len();
        let t = Tensor::new(&[n], data).expect("flat");
        self.push(t, Op::Concat(parts.to_vec()))
    }

    /// Contiguous flat range `[start, start + len)` reshaped to `shape`.
    pub fn slice(&mut self, input: Var, start: usize, shape: &[usize]) -> Result<Var> {
        let x = self.value(input);
        let len: usize = shape.iter().product();
        if start + len > x.len() {
            return Err(Error::shape("slice", &[start + len], x.shape()));
        }
        let t = Tensor::new(shape, x.data()[start..start + len].to_vec())?;
        Ok(self.push(t, Op::Slice { input, start }))
    }

    /// `z = mean + exp(log_std) * noise`.
    pub fn reparameterize(&mut self, mean: Var, log_std: Var, noise: Vec<f64>) -> Result<Var> {
        let (m, s) = (self.value(mean), self.value(log_std));
        if m.shape() != s.shape() || noise.len() != m.len() {
            return Err(Error::shape("reparameterize", m.shape(), &[s.len(), noise.len()]));
        }
        let data = m.data().iter().zip(s.data()).zip(&noise).map(|((mu, ls), e)| mu + ls.exp() * e).collect();
        let t = Tensor::new(m.shape(), data)?;
        Ok(self.push(t, Op::Reparameterize { mean, log_std, noise }))
    }

    /// `KL(N(mean, exp(log_std)^2) || N(0, I))`.
    pub fn kl(&mut self, mean: Var, log_std: Var) -> Result<Var> {
        let (m, s) = (self.value(mean), self.value(log_std));
        if m.shape() != s.shape() {
            return Err(Error::shape("kl", m.shape(), s.shape()));
        }
        let t = Tensor::scalar(kl_divergence(m.data(), s.data()));
        Ok(self.push(t, Op::Kl { mean, log_std }))
    }

    /// Input `[2, n, n]` raw increments, output `[2, n, n]` sampling grid.
    pub fn integrate_warp(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [2, n, n2] = *x.shape() else {
            return Err(Error::shape("integrate_warp", &[2, 0, 0], x.shape()));
        };
        if n != n2 {
            return Err(Error::shape("integrate_warp", &[2, n, n], x.shape()));
        }
        let state = texture::integrate_warp(x.data(), n)?;
        let plane = n * n;
        let mut grid = vec![0.0; 2 * plane];
        for (i, p) in state.field.grid().iter().enumerate() {
            grid[i] = p[0];
            grid[plane + i] = p[1];
        }
        let t = Tensor::new(&[2, n, n], grid)?;
        Ok(self.push(t, Op::IntegrateWarp { input, state: Box::new(state) }))
    }

    /// Bilinear lookup of `texture` (`[C, n, n]`) at the grid `warp`
    /// (`[2, n, n]`, texel units).
    pub fn sample_warp(&mut self, texture: Var, warp: Var) -> Result<Var> {
        let (t, w) = (self.value(texture), self.value(warp));
        let [c, n, n2] = *t.shape() else {
            return Err(Error::shape("sample_warp texture", &[0, 0, 0], t.shape()));
        };
        if n != n2 || w.shape() != [2, n, n] {
            return Err(Error::shape("sample_warp grid", &[2, n, n], w.shape()));
        }
        let plane = n * n;
        let grid: Vec<[f64; 2]> = (0..plane).map(|i| [w.data()[i], w.data()[plane + i]]).collect();
        let field = WarpField::from_grid(n, grid)?;
        let out = texture::sample_warp(t.data(), c, &field);
        let value = Tensor::new(&[c, n, n], out)?;
        Ok(self.push(value, Op::SampleWarp { texture, warp, channels: c, field: Box::new(field) }))
    }

    /// `out[c] = gain[c] * texture[c] + bias[c]` on a `[3, n, n]` texture.
    pub fn color_correct(&mut self, texture: Var, gain: Var, bias: Var) -> Result<Var> {
        let t = self.value(texture);
        let (g, b) = (self.value(gain), self.value(bias));
        if t.shape().first() != Some(&3) || t.shape().len() != 3 || g.shape() != [3] || b.shape() != [3] {
            return Err(Error::shape("color_correct", &[3], g.shape()));
        }
        let plane = t.len() / 3;
        let data = t.data().iter().enumerate().map(|(i, v)| g.data()[i / plane] * v + b.data()[i / plane]).collect();
        let value = Tensor::new(t.shape(), data)?;
        Ok(self.push(value, Op::ColorCorrect { texture, gain, bias }))
    }

    /// Applies `R v + t` to a flat `[V * 3]` vertex vector.
    pub fn rigid(&mut self, input: Var, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Var> {
        let x = self.value(input);
        if !x.len().is_multiple_of(3) {
            return Err(Error::shape("rigid", &[x.len() / 3 * 3], x.shape()));
        }
        let mut data = Vec::with_capacity(x.len());
        for c in x.data().chunks_exact(3) {
            let w = rotation * Vector3::new(c[0], c[1], c[2]) + translation;
            data.extend_from_slice(&[w.x, w.y, w.z]);
        }
        let value = Tensor::new(x.shape(), data)?;
        Ok(self.push(value, Op::Rigid { input, rotation }))
    }

    /// Mean squared difference against a constant target.
    pub fn mse(&mut self, input: Var, target: Vec<f64>) -> Result<Var> {
        let x = self.value(input);
        if target.len() != x.len() {
            return Err(Error::shape("mse", x.shape(), &[target.len()]));
        }
        let s: f64 = x.data().iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum();
        let value = Tensor::scalar(s / x.len() as f64);
        Ok(self.push(value, Op::Mse { input, target }))
    }

    /// `sum_i w_i * x_i` over scalar values.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = 0.0;
        for (v, w) in terms {
            let x = self.value(*v);
            if x.len() != 1 {
                return Err(Error::shape("weighted_sum", &[1], x.shape()));
            }
            s += w * x.item();
        }
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(terms.to_vec())))
    }

    /// Propagates the seed gradients back to every node. Parameter gradients
    /// are summed per [`ParamId`].
    pub fn backward(&self, seeds: &[(Var, &[f64])]) -> Result<Backward> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            let len = self.value(*v).len();
            if g.len() != len {
                return Err(Error::shape("backward seed", self.value(*v).shape(), &[g.len()]));
            }
            accumulate(&mut grads, *v, g);
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient {bad} at node {idx} ({})",
                    self.nodes[idx].value.describe()
                )));
            }
            grads[idx] = Some(g);
        }
        let mut params = Gradients::new();
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Op::Leaf(Some(id)), Some(g)) = (&node.op, g) {
                params.accumulate(*id, g);
            }
        }
        Ok(Backward { nodes: grads, params })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &self.nodes[idx].op {
            Op::Leaf(_) => {}
            Op::Conv2d { input, weight, bias, geom } => {
                let (gi, gw, gb) = conv::conv2d_backward(geom, val(*input), val(*weight), g);
                accumulate(grads, *input, &gi);
                accumulate(grads, *weight, &gw);
                if let Some(b) = bias {
                    accumulate(grads, *b, &gb);
                }
            }
            Op::ConvTranspose2d { input, weight, bias, geom } => {
                let (gi, gw) = conv::conv_transpose2d_backward(geom, val(*input), val(*weight), g);
                accumulate(grads, *input, &gi);
                accumulate(grads, *weight, &gw);
                match bias {
                    Some((b, BiasMode::Spatial)) => accumulate(grads, *b, g),
                    Some((b, BiasMode::PerChannel)) => {
                        let plane = geom.out_size.0 * geom.out_size.1;
                        let gb: Vec<f64> = g.chunks(plane).map(|c| c.iter().sum()).collect();
                        accumulate(grads, *b, &gb);
                    }
                    None => {}
                }
            }
            Op::Linear { input, weight, bias } => {
                let x = val(*input);
                let w = val(*weight);
                let in_dim = x.len();
                let mut gx = vec![0.0; in_dim];
                let mut gw = vec![0.0; w.len()];
                for (o, go) in g.iter().enumerate() {
                    if *go == 0.0 {
                        continue;
                    }
                    let row = &w[o * in_dim..(o + 1) * in_dim];
                    let grow = &mut gw[o * in_dim..(o + 1) * in_dim];
                    for i in 0..in_dim {
                        gx[i] += go * row[i];
                        grow[i] = go * x[i];
                    }
                }
                accumulate(grads, *input, &gx);
                accumulate(grads, *weight, &gw);
                if let Some(b) = bias {
                    accumulate(grads, *b, g);
                }
            }
            Op::LeakyRelu { input, slope } => {
                let gx: Vec<f64> =
                    val(*input).iter().zip(g).map(|(x, g)| if *x > 0.0 { *g } else { slope * g }).collect();
                accumulate(grads, *input, &gx);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g);
                accumulate(grads, *b, g);
            }
            Op::Scale(a, f) => {
                let gx: Vec<f64> = g.iter().map(|v| v * f).collect();
                accumulate(grads, *a, &gx);
            }
            Op::AffineConst { input, scale } => {
                let gx: Vec<f64> = g.iter().zip(scale).map(|(a, s)| a * s).collect();
                accumulate(grads, *input, &gx);
            }
            Op::Reshape(a) => accumulate(grads, *a, g),
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.len();
                    accumulate(grads, *p, &g[off..off + n]);
                    off += n;
                }
            }
            Op::Slice { input, start } => {
                let mut gx = vec![0.0; self.nodes[input.0].value.len()];
                gx[*start..*start + g.len()].copy_from_slice(g);
                accumulate(grads, *input, &gx);
            }
            Op::Reparameterize { mean, log_std, noise } => {
                accumulate(grads, *mean, g);
                let gs: Vec<f64> =
                    val(*log_std).iter().zip(noise).zip(g).map(|((ls, e), g)| g * ls.exp() * e).collect();
                accumulate(grads, *log_std, &gs);
            }
            Op::Kl { mean, log_std } => {
                let gm: Vec<f64> = val(*mean).iter().map(|m| g[0] * m).collect();
                let gs: Vec<f64> = val(*log_std).iter().map(|ls| g[0] * ((2.0 * ls).exp() - 1.0)).collect();
                accumulate(grads, *mean, &gm);
                accumulate(grads, *log_std, &gs);
            }
            Op::IntegrateWarp { input, state } => {
                let gx = state.backward(g);
                accumulate(grads, *input, &gx);
            }
            Op::SampleWarp { texture, warp, channels, field } => {
                let (gt, gg) = texture::sample_warp_backward(val(*texture), *channels, field, g);
                accumulate(grads, *texture, &gt);
                accumulate(grads, *warp, &gg);
            }
            Op::ColorCorrect { texture, gain, bias } => {
                let t = val(*texture);
                let gn = val(*gain);
                let plane = t.len() / 3;
                let mut gt = vec![0.0; t.len()];
                let mut gg = [0.0; 3];
                let mut gb = [0.0; 3];
                for (i, gv) in g.iter().enumerate() {
                    let c = i / plane;
                    gt[i] = gv * gn[c];
                    gg[c] += gv * t[i];
                    gb[c] += gv;
                }
                accumulate(grads, *texture, &gt);
                accumulate(grads, *gain, &gg);
                accumulate(grads, *bias, &gb);
            }
            Op::Rigid { input, rotation } => {
                let rt = rotation.transpose();
                let mut gx = Vec::with_capacity(g.len());
                for c in g.chunks_exact(3) {
                    let w = rt * Vector3::new(c[0], c[1], c[2]);
                    gx.extend_from_slice(&[w.x, w.y, w.z]);
                }
                accumulate(grads, *input, &gx);
            }
            Op::Mse { input, target } => {
                let x = val(*input);
                let k = 2.0 * g[0] / x.len() as f64;
                let gx: Vec<f64> = x.iter().zip(target).map(|(a, b)| k * (a - b)).collect();
                accumulate(grads, *input, &gx);
            }
            Op::WeightedSum(terms) => {
                for (v, w) in terms {
                    accumulate(grads, *v, &[g[0] * w]);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// `0.5 * sum(mean^2 + exp(2 log_std) - 1 - 2 log_std)`.
pub fn kl_divergence(mean: &[f64], log_std: &[f64]) -> f64 {
    0.5 * mean.iter().zip(log_std).map(|(m, ls)| m * m + (2.0 * ls).exp() - 1.0 - 2.0 * ls).sum::<f64>()
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Backward {
    nodes: Vec<Option<Vec<f64>>>,
    pub params: Gradients,
}

impl Backward {
    /// Gradient of a recorded value, `None` if nothing flowed into it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].as_deref()
    }
}
