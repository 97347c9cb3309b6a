//! Reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Tape`] records a forward pass as a flat list of nodes in topological
//! order; [`Tape::backward`] walks it in reverse, handing each node its
//! output gradient and letting it scatter into parent gradients. The op set
//! is exactly what the model needs: same-padding convolutions, the residual
//! block pieces, softmax machinery, Gaussian scoring, and the two
//! relaxation-specific ops (`soft_union`, `straight_through`).
//!
//! Batch elements run on separate tapes; parallelism lives above this module.

use crate::distributions::{log_softmax, softmax, softplus};
use crate::error::{Error, Result};
use crate::tensor::{chw, same_shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Padding {
    Zero,
    Circular,
}

type BackFn = Box<dyn Fn(&[Tensor], &Tensor, &mut [Option<Tensor>])>;

struct Node {
    value: Tensor,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients keyed by the [`Var`] they belong to.
pub struct Grads {
    by_var: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_var.get(v.0).and_then(|g| g.as_ref())
    }
}

fn accum(slot: &mut Option<Tensor>, shape: &[usize], write: impl FnOnce(&mut [f64])) {
    let g = slot.get_or_insert_with(|| Tensor::zeros(shape));
    write(g.data_mut());
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, back: Option<BackFn>) -> Var {
        self.nodes.push(Node { value, back });
        Var(self.nodes.len() - 1)
    }

    /// Record an input. Leaves have no backward rule; their accumulated
    /// gradients survive the backward pass and can be read from [`Grads`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, None)
    }

    /// dL/droot = 1; every other gradient follows by reverse traversal.
    pub fn backward(&mut self, root: Var) -> Result<Grads> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::contract("backward: root must be scalar"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        let values: Vec<Tensor> = self.nodes.iter().map(|n| n.value.clone()).collect();
        for id in (0..=root.0).rev() {
            if self.nodes[id].back.is_none() {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let back = self.nodes[id].back.as_ref().unwrap();
            back(&values, &g, &mut grads);
        }
        Ok(Grads { by_var: grads })
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b))?;
        let value = Tensor::from_vec(
            self.value(a).shape(),
            self.value(a).iter().zip(self.value(b).iter()).map(|(&x, &y)| x + y).collect(),
        )?;
        let shape = value.shape().to_vec();
        let (sa, sb) = (shape.clone(), shape.clone());
        Ok(self.push(
            value,
            Some(Box::new(move |_, g, grads| {
                accum(&mut grads[a.0], &sa, |d| {
                    for (o, &gi) in d.iter_mut().zip(g.iter()) {
                        *o += gi;
                    }
                });
                accum(&mut grads[b.0], &sb, |d| {
                    for (o, &gi) in d.iter_mut().zip(g.iter()) {
                        *o += gi;
                    }
                });
            })),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b))?;
        let value = Tensor::from_vec(
            self.value(a).shape(),
            self.value(a).iter().zip(self.value(b).iter()).map(|(&x, &y)| x * y).collect(),
        )?;
        let shape = value.shape().to_vec();
        let (sa, sb) = (shape.clone(), shape);
        Ok(self.push(
            value,
            Some(Box::new(move |vals, g, grads| {
                let (va, vb) = (&vals[a.0], &vals[b.0]);
                accum(&mut grads[a.0], &sa, |d| {
                    for ((o, &gi), &y) in d.iter_mut().zip(g.iter()).zip(vb.iter()) {
                        *o += gi * y;
                    }
                });
                accum(&mut grads[b.0], &sb, |d| {
                    for ((o, &gi), &x) in d.iter_mut().zip(g.iter()).zip(va.iter()) {
                        *o += gi * x;
                    }
                });
            })),
        ))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| c * v);
        let shape = value.shape().to_vec();
        self.push(
            value,
            Some(Box::new(move |_, g, grads| {
                accum(&mut grads[a.0], &shape, |d| {
                    for (o, &gi) in d.iter_mut().zip(g.iter()) {
                        *o += c * gi;
                    }
                });
            })),
        )
    }

    /// `x + t` for a constant tensor `t` (used for injected noise).
    pub fn add_const(&mut self, a: Var, t: &Tensor) -> Result<Var> {
        same_shape(self.value(a), t)?;
        let value = Tensor::from_vec(
            t.shape(),
            self.value(a).iter().zip(t.iter()).map(|(&x, &y)| x + y).collect(),
        )?;
        let shape = value.shape().to_vec();
        Ok(self.push(
            value,
            Some(Box::new(move |_, g, grads| {
                accum(&mut grads[a.0], &shape, |d| {
                    for (o, &gi) in d.iter_mut().zip(g.iter()) {
                        *o += gi;
                    }
                });
            })),
        ))
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| 1.0 - v);
        let shape = value.shape().to_vec();
        self.push(
            value,
            Some(Box::new(move |_, g, grads| {
                accum(&mut grads[a.0], &shape, |d| {
                    for (o, &gi) in d.iter_mut().zip(g.iter()) {
                        *o -= gi;
                    }
                });
            })),
        )
    }

    /// Scalar combination `sum_i coeff_i * term_i` over scalar vars.
    pub fn affine(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, c) in terms {
            if self.value(v).len() != 1 {
                return Err(Error::contract("affine: terms must be scalar"));
            }
            total += c * self.value(v).item();
        }
        let terms = terms.to_vec();
        Ok(self.push(
            Tensor::scalar(total),
            Some(Box::new(move |_, g, grads| {
                let gi = g.item();
                for &(v, c) in &terms {
                    accum(&mut grads[v.0], &[], |d| d[0] += c * gi);
                }
            })),
        ))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        let shape = value.shape().to_vec();
        self.push(
            value,
            Some(Box::new(move |vals, g, grads| {
                let va = &vals[a.0];
                accum(&mut grads[a.0], &shape, |d| {
                    for ((o, &gi), &x) in d.iter_mut().zip(g.iter()).zip(va.iter()) {
                        *o += gi * if x > 0.0 { 1.0 } else { slope };
                    }
                });
            })),
        )
    }

    /// `softplus(x) + floor`: the positive-scale head.
    pub fn softplus_floor(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).map(|v| softplus(v) + floor);
        let shape = value.shape().to_vec();
        self.push(
            value,
            Some(Box::new(move |vals, g, grads| {
                let va = &vals[a.0];
                accum(&mut grads[a.0], &shape, |d| {
                    for ((o, &gi), &x) in d.iter_mut().zip(g.iter()).zip(va.iter()) {
                        *o += gi / (1.0 + (-x).exp());
                    }
                });
            })),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let orig = self.value(a).shape().to_vec();
        Ok(self.push(
            value,
            Some(Box::new(move |_, g, grads| {
                accum(&mut grads[a.0], &orig, |d| {
                    for (o, &gi) in d.iter_mut().zip(g.iter()) {
                        *o += gi;
                    }
                });
            })),
        ))
    }

    // ---- structure ---------------------------------------------------------

    /// Contiguous slice along the first axis (channels of a map, or entries
    /// of a vector).
    pub fn slice_outer(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.value(a).shape().to_vec();
        if s.is_empty() || start + len > s[0] {
            return Err(Error::contract("slice_outer: range out of bounds"));
        }
        let inner: usize = s[1..].iter().product();
        let mut shape = s.clone();
        shape[0] = len;
        let data = self.value(a).data()[start * inner..(start + len) * inner].to_vec();
        let value = Tensor::from_vec(&shape, data)?;
        Ok(self.push(
            value,
            Some(Box::new(move |_, g, grads| {
                accum(&mut grads[a.0], &s, |d| {
                    for (o, &gi) in d[start * inner..(start + len) * inner].iter_mut().zip(g.iter()) {
                        *o += gi;
                    }
                });
            })),
        ))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_channels: no inputs"));
        }
        let (h, w) = {
            let s = self.value(parts[0]).shape();
            if s.len() != 3 {
                return Err(Error::contract("concat_channels: inputs must be C x H x W"));
            }
            (s[1], s[2])
        };
        let mut channels = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let s = t.shape();
            if s.len() != 3 || s[1] != h || s[2] != w {
                return Err(Error::ShapeMismatch { expected: vec![0, h, w], got: s.to_vec() });
            }
            channels.push(s[0]);
            data.extend_from_slice(t.data());
        }
        let total: usize = channels.iter().sum();
        let value = Tensor::from_vec(&[total, h, w], data)?;
        let parts = parts.to_vec();
        Ok(self.push(
            value,
            Some(Box::new(move |_, g, grads| {
                let plane = h * w;
                let mut off = 0;
                for (&p, &c) in parts.iter().zip(channels.iter()) {
                    let n = c * plane;
                    accum(&mut grads[p.0], &[c, h, w], |d| {
                        for (o, &gi) in d.iter_mut().zip(g.data()[off..off + n].iter()) {
                            *o += gi;
                        }
                    });
                    off += n;
                }
            })),
        ))
    }

    /// Copy a D-vector to every spatial position: `[D] -> [D, h, w]`.
    pub fn broadcast_spatial(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let v = self.value(a);
        if v.shape().len() != 1 {
            return Err(Error::contract("broadcast_spatial: input must be a vector"));
        }
        let d = v.shape()[0];
        let mut data = Vec::with_capacity(d * h * w);
        for &x in v.iter() {
            data.extend(std::iter::repeat(x).take(h * w));
        }
        let value = Tensor::from_vec(&[d, h, w], data)?;
        Ok(self.push(
            value,
            Some(Box::new(move |_, g, grads| {
                accum(&mut grads[a.0], &[d], |out| {
                    let plane = h * w;
                    for (c, o) in out.iter_mut().enumerate() {
                        *o += g.data()[c * plane..(c + 1) * plane].iter().sum::<f64>();
                    }
                });
            })),
        ))
    }

    /// Spatial mean per channel: `[C, H, W] -> [C]`.
    pub fn mean_pool_spatial(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 3 {
            return Err(Error::contract("mean_pool_spatial: input must be C x H x W"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let plane = h * w;
        let data: Vec<f64> = (0..c)
            .map(|ci| self.value(a).data()[ci * plane..(ci + 1) * plane].iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::from_vec(&[c], data)?;
        Ok(self.push(
            value,
            Some(Box::new(move |_, g, grads| {
                accum(&mut grads[a.0], &s, |d| {
                    for ci in 0..c {
                        let gi = g.data()[ci] / plane as f64;
                        for o in d[ci * plane..(ci + 1) * plane].iter_mut() {
                            *o += gi;
                        }
                    }
                });
            })),
        ))
    }

    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (o, i) = {
            let ws = self.value(weight).shape();
            if ws.len() != 2 {
                return Err(Error::contract("linear: weight must be O x I"));
            }
            (ws[0], ws[1])
        };
        if self.value(x).len() != i || self.value(bias).len() != o {
            return Err(Error::contract("linear: dimension mismatch"));
        }
        let xv = self.value(x).data().to_vec();
        let wv = self.value(weight).data();
        let bv = self.value(bias).data();
        let mut out = vec![0.0; o];
        for r in 0..o {
            let row = &wv[r * i..(r + 1) * i];
            out[r] = bv[r] + row.iter().zip(xv.iter()).map(|(&a, &b)| a * b).sum::<f64>();
        }
        let value = Tensor::from_vec(&[o], out)?;
        Ok(self.push(
            value,
            Some(Box::new(move |vals, g, grads| {
                let wv = vals[weight.0].data();
                let xv = vals[x.0].data();
                accum(&mut grads[x.0], &[i], |d| {
                    for r in 0..o {
                        let gi = g.data()[r];
                        for (c, o_) in d.iter_mut().enumerate() {
                            *o_ += gi * wv[r * i + c];
                        }
                    }
                });
                accum(&mut grads[weight.0], &[o, i], |d| {
                    for r in 0..o {
                        let gi = g.data()[r];
                        for c in 0..i {
                            d[r * i + c] += gi * xv[c];
                        }
                    }
                });
                accum(&mut grads[bias.0], &[o], |d| {
                    for (o_, &gi) in d.iter_mut().zip(g.iter()) {
                        *o_ += gi;
                    }
                });
            })),
        ))
    }

    // ---- convolutions ------------------------------------------------------

    /// Same-padding 2-D convolution, stride 1, odd kernel.
    /// `x: [Cin, H, W]`, `weight: [Cout, Cin, k, k]`, `bias: [Cout]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, padding: Padding) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] {
            return Err(Error::contract("conv2d: expected [Cin,H,W] x [Cout,Cin,k,k]"));
        }
        let (cin, h, w) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        if ws[3] != k || k % 2 == 0 {
            return Err(Error::contract("conv2d: kernel must be square with odd size"));
        }
        if self.value(bias).len() != cout {
            return Err(Error::contract("conv2d: bias length must equal Cout"));
        }
        let xp = pad_input(self.value(x).data(), cin, h, w, k / 2, padding);
        let mut out = vec![0.0; cout * h * w];
        conv_forward(&xp, self.value(weight).data(), self.value(bias).data(), &mut out, cin, cout, h, w, k);
        let value = Tensor::from_vec(&[cout, h, w], out)?;
        Ok(self.push(
            value,
            Some(Box::new(move |vals, g, grads| {
                let xp = pad_input(vals[x.0].data(), cin, h, w, k / 2, padding);
                let wv = vals[weight.0].data();
                let mut gxp = vec![0.0; xp.len()];
                let mut gw = vec![0.0; wv.len()];
                let mut gb = vec![0.0; cout];
                conv_backward(&xp, wv, g.data(), &mut gxp, &mut gw, &mut gb, cin, cout, h, w, k);
                accum(&mut grads[x.0], &[cin, h, w], |d| {
                    unpad_grad(&gxp, d, cin, h, w, k / 2, padding)
                });
                accum(&mut grads[weight.0], &[cout, cin, k, k], |d| {
                    for (o, &v) in d.iter_mut().zip(gw.iter()) {
                        *o += v;
                    }
                });
                accum(&mut grads[bias.0], &[cout], |d| {
                    for (o, &v) in d.iter_mut().zip(gb.iter()) {
                        *o += v;
                    }
                });
            })),
        ))
    }

    /// Depthwise same-padding convolution. `weight: [C, k, k]`, `bias: [C]`.
    pub fn depthwise_conv2d(&mut self, x: Var, weight: Var, bias: Var, padding: Padding) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        if xs.len() != 3 || ws.len() != 3 || ws[0] != xs[0] {
            return Err(Error::contract("depthwise_conv2d: expected [C,H,W] x [C,k,k]"));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let k = ws[1];
        if ws[2] != k || k % 2 == 0 {
            return Err(Error::contract("depthwise_conv2d: kernel must be square with odd size"));
        }
        let xp = pad_input(self.value(x).data(), c, h, w, k / 2, padding);
        let (hp, wp) = (h + 2 * (k / 2), w + 2 * (k / 2));
        let wv = self.value(weight).data();
        let bv = self.value(bias).data();
        let mut out = vec![0.0; c * h * w];
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let wgt = wv[(ci * k + ky) * k + kx];
                    for y in 0..h {
                        let src = &xp[(ci * hp + y + ky) * wp + kx..];
                        let dst = &mut out[(ci * h + y) * w..(ci * h + y) * w + w];
                        for (d, s) in dst.iter_mut().zip(src[..w].iter()) {
                            *d += wgt * s;
                        }
                    }
                }
            }
            let b = bv[ci];
            for v in out[ci * h * w..(ci + 1) * h * w].iter_mut() {
                *v += b;
            }
        }
        let value = Tensor::from_vec(&[c, h, w], out)?;
        Ok(self.push(
            value,
            Some(Box::new(move |vals, g, grads| {
                let xp = pad_input(vals[x.0].data(), c, h, w, k / 2, padding);
                let wv = vals[weight.0].data();
                let mut gxp = vec![0.0; xp.len()];
                let mut gw = vec![0.0; wv.len()];
                let mut gb = vec![0.0; c];
                for ci in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let wgt = wv[(ci * k + ky) * k + kx];
                            let mut acc = 0.0;
                            for y in 0..h {
                                let go = &g.data()[(ci * h + y) * w..(ci * h + y) * w + w];
                                let xrow = &xp[(ci * hp + y + ky) * wp + kx..];
                                let grow = &mut gxp[(ci * hp + y + ky) * wp + kx..];
                                for xi in 0..w {
                                    acc += go[xi] * xrow[xi];
                                    grow[xi] += wgt * go[xi];
                                }
                            }
                            gw[(ci * k + ky) * k + kx] += acc;
                        }
                    }
                    gb[ci] += g.data()[ci * h * w..(ci + 1) * h * w].iter().sum::<f64>();
                }
                accum(&mut grads[x.0], &[c, h, w], |d| unpad_grad(&gxp, d, c, h, w, k / 2, padding));
                accum(&mut grads[weight.0], &[c, k, k], |d| {
                    for (o, &v) in d.iter_mut().zip(gw.iter()) {
                        *o += v;
                    }
                });
                accum(&mut grads[bias.0], &[c], |d| {
                    for (o, &v) in d.iter_mut().zip(gb.iter()) {
                        *o += v;
                    }
                });
            })),
        ))
    }

    /// Per-channel normalisation over the spatial extent, then affine.
    pub fn spatial_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 3 {
            return Err(Error::contract("spatial_norm: input must be C x H x W"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::contract("spatial_norm: gain/bias must have C entries"));
        }
        let plane = h * w;
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let mut out = vec![0.0; c * plane];
        for ci in 0..c {
            let xs = &xv[ci * plane..(ci + 1) * plane];
            let mean = xs.iter().sum::<f64>() / plane as f64;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, &v) in out[ci * plane..(ci + 1) * plane].iter_mut().zip(xs.iter()) {
                *o = gv[ci] * (v - mean) * inv + bv[ci];
            }
        }
        let value = Tensor::from_vec(&s, out)?;
        Ok(self.push(
            value,
            Some(Box::new(move |vals, g, grads| {
                let xv = vals[x.0].data();
                let gv = vals[gain.0].data();
                accum(&mut grads[bias.0], &[c], |d| {
                    for ci in 0..c {
                        d[ci] += g.data()[ci * plane..(ci + 1) * plane].iter().sum::<f64>();
                    }
                });
                // Recompute normalised activations; cheaper than caching.
                let mut gxall = vec![0.0; c * plane];
                let mut ggain = vec![0.0; c];
                for ci in 0..c {
                    let xs = &xv[ci * plane..(ci + 1) * plane];
                    let go = &g.data()[ci * plane..(ci + 1) * plane];
                    let mean = xs.iter().sum::<f64>() / plane as f64;
                    let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let z: Vec<f64> = xs.iter().map(|&v| (v - mean) * inv).collect();
                    ggain[ci] += go.iter().zip(z.iter()).map(|(&a, &b)| a * b).sum::<f64>();
                    let dz: Vec<f64> = go.iter().map(|&v| v * gv[ci]).collect();
                    let mean_dz = dz.iter().sum::<f64>() / plane as f64;
                    let mean_dzz = dz.iter().zip(z.iter()).map(|(&a, &b)| a * b).sum::<f64>() / plane as f64;
                    for ((o, &dzi), &zi) in
                        gxall[ci * plane..(ci + 1) * plane].iter_mut().zip(dz.iter()).zip(z.iter())
                    {
                        *o = (dzi - mean_dz - zi * mean_dzz) * inv;
                    }
                }
                accum(&mut grads[x.0], &s, |d| {
                    for (o, &v) in d.iter_mut().zip(gxall.iter()) {
                        *o += v;
                    }
                });
                accum(&mut grads[gain.0], &[c], |d| {
                    for (o, &v) in d.iter_mut().zip(ggain.iter()) {
                        *o += v;
                    }
                });
            })),
        ))
    }

    // ---- probability ops ---------------------------------------------------

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::contract("softmax: empty input"));
        }
        let s = softmax(v.data());
        let shape = v.shape().to_vec();
        let value = Tensor::from_vec(&shape, s)?;
        let out_id = self.nodes.len(); // backward reads its own output
        Ok(self.push(
            value,
            Some(Box::new(move |vals, g, grads| {
                let sv = vals[out_id].data();
                let dot: f64 = g.iter().zip(sv.iter()).map(|(&x, &y)| x * y).sum();
                accum(&mut grads[a.0], &shape, |d| {
                    for ((o, &gi), &si) in d.iter_mut().zip(g.iter()).zip(sv.iter()) {
                        *o += si * (gi - dot);
                    }
                });
            })),
        ))
    }

    /// `sum_k weights_k * log_softmax(logits)_k` — the expected categorical
    /// log-probability; exact one-hot weights recover the usual score.
    pub fn log_softmax_dot(&mut self, weights: Var, logits: Var) -> Result<Var> {
        same_shape(self.value(weights), self.value(logits))?;
        let ls = log_softmax(self.value(logits).data());
        let total: f64 =
            self.value(weights).iter().zip(ls.iter()).map(|(&w, &l)| w * l).sum();
        let n = ls.len();
        Ok(self.push(
            Tensor::scalar(total),
            Some(Box::new(move |vals, g, grads| {
                let gi = g.item();
                let lv = vals[logits.0].data();
                let wv = vals[weights.0].data();
                let ls = log_softmax(lv);
                let sm = softmax(lv);
                let wsum: f64 = wv.iter().sum();
                accum(&mut grads[weights.0], &[n], |d| {
                    for (o, &l) in d.iter_mut().zip(ls.iter()) {
                        *o += gi * l;
                    }
                });
                accum(&mut grads[logits.0], &[n], |d| {
                    for ((o, &w), &s) in d.iter_mut().zip(wv.iter()).zip(sm.iter()) {
                        *o += gi * (w - wsum * s);
                    }
                });
            })),
        ))
    }

    /// Closed-form `KL[N(mean, scale^2) || N(0, I)]`, summed over dims.
    pub fn gaussian_kl_std_normal(&mut self, mean: Var, scale: Var) -> Result<Var> {
        same_shape(self.value(mean), self.value(scale))?;
        let mut total = 0.0;
        for (&mu, &s) in self.value(mean).iter().zip(self.value(scale).iter()) {
            total += 0.5 * (mu * mu + s * s - 1.0) - s.ln();
        }
        let shape = self.value(mean).shape().to_vec();
        Ok(self.push(
            Tensor::scalar(total),
            Some(Box::new(move |vals, g, grads| {
                let gi = g.item();
                let mv = vals[mean.0].data();
                let sv = vals[scale.0].data();
                accum(&mut grads[mean.0], &shape, |d| {
                    for (o, &mu) in d.iter_mut().zip(mv.iter()) {
                        *o += gi * mu;
                    }
                });
                accum(&mut grads[scale.0], &shape, |d| {
                    for (o, &s) in d.iter_mut().zip(sv.iter()) {
                        *o += gi * (s - 1.0 / s);
                    }
                });
            })),
        ))
    }

    /// Pixel-weighted diagonal-Gaussian log-likelihood of a fixed observation.
    ///
    /// `x: [C,H,W]` constant, `weight: [H,W]` (broadcast over channels),
    /// `mean`, `scale`: `[C,H,W]`. Returns the scalar
    /// `sum_{c,y,x} weight[y,x] * log N(x | mean, scale)`.
    pub fn weighted_gaussian_log_prob(
        &mut self,
        x: &Tensor,
        weight: Var,
        mean: Var,
        scale: Var,
    ) -> Result<Var> {
        same_shape(x, self.value(mean))?;
        same_shape(self.value(mean), self.value(scale))?;
        let xs = x.shape().to_vec();
        if xs.len() != 3 {
            return Err(Error::contract("weighted_gaussian_log_prob: x must be C x H x W"));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        if self.value(weight).shape() != [h, w] {
            return Err(Error::ShapeMismatch {
                expected: vec![h, w],
                got: self.value(weight).shape().to_vec(),
            });
        }
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        let plane = h * w;
        let wv = self.value(weight).data();
        let mv = self.value(mean).data();
        let sv = self.value(scale).data();
        let mut total = 0.0;
        for ci in 0..c {
            for p in 0..plane {
                let i = ci * plane + p;
                let z = (x.data()[i] - mv[i]) / sv[i];
                total += wv[p] * (-0.5 * ln_2pi - sv[i].ln() - 0.5 * z * z);
            }
        }
        let x = x.clone();
        Ok(self.push(
            Tensor::scalar(total),
            Some(Box::new(move |vals, g, grads| {
                let gi = g.item();
                let wv = vals[weight.0].data();
                let mv = vals[mean.0].data();
                let sv = vals[scale.0].data();
                accum(&mut grads[weight.0], &[h, w], |d| {
                    for p in 0..plane {
                        let mut lp = 0.0;
                        for ci in 0..c {
                            let i = ci * plane + p;
                            let z = (x.data()[i] - mv[i]) / sv[i];
                            lp += -0.5 * ln_2pi - sv[i].ln() - 0.5 * z * z;
                        }
                        d[p] += gi * lp;
                    }
                });
                accum(&mut grads[mean.0], &[c, h, w], |d| {
                    for ci in 0..c {
                        for p in 0..plane {
                            let i = ci * plane + p;
                            let diff = x.data()[i] - mv[i];
                            d[i] += gi * wv[p] * diff / (sv[i] * sv[i]);
                        }
                    }
                });
                accum(&mut grads[scale.0], &[c, h, w], |d| {
                    for ci in 0..c {
                        for p in 0..plane {
                            let i = ci * plane + p;
                            let diff = x.data()[i] - mv[i];
                            let s = sv[i];
                            d[i] += gi * wv[p] * (diff * diff / (s * s * s) - 1.0 / s);
                        }
                    }
                });
            })),
        ))
    }

    // ---- relaxation-specific ops --------------------------------------------

    /// Smooth union of per-draw pixel distributions:
    /// `u_k = 1 - prod_m (1 - s_m[k])`, reshaped to `[h, w]`.
    ///
    /// For exact one-hots this is the deduplicated binary mask; for soft
    /// samples it is differentiable everywhere, which the finite-difference
    /// suite relies on.
    pub fn soft_union(&mut self, draws: &[Var], h: usize, w: usize) -> Result<Var> {
        if draws.is_empty() {
            return Err(Error::contract("soft_union: no draws"));
        }
        let k = h * w;
        for &d in draws {
            if self.value(d).len() != k {
                return Err(Error::contract("soft_union: draw length must be h*w"));
            }
        }
        let m = draws.len();
        let mut keep = vec![1.0; k];
        for &d in draws {
            for (ki, &s) in keep.iter_mut().zip(self.value(d).iter()) {
                *ki *= 1.0 - s;
            }
        }
        let u: Vec<f64> = keep.iter().map(|&p| 1.0 - p).collect();
        let value = Tensor::from_vec(&[h, w], u)?;
        let draws = draws.to_vec();
        Ok(self.push(
            value,
            Some(Box::new(move |vals, g, grads| {
                // Exclusive products via prefix/suffix sweeps.
                let mut pre = vec![1.0; (m + 1) * k];
                for j in 0..m {
                    let sv = vals[draws[j].0].data();
                    for ki in 0..k {
                        pre[(j + 1) * k + ki] = pre[j * k + ki] * (1.0 - sv[ki]);
                    }
                }
                let mut suf = vec![1.0; k];
                for j in (0..m).rev() {
                    let sv = vals[draws[j].0].data();
                    accum(&mut grads[draws[j].0], &[k], |d| {
                        for ki in 0..k {
                            d[ki] += g.data()[ki] * pre[j * k + ki] * suf[ki];
                        }
                    });
                    for ki in 0..k {
                        suf[ki] *= 1.0 - sv[ki];
                    }
                }
            })),
        ))
    }

    /// Forward takes the given constant; backward passes gradients through to
    /// `back` unchanged. Shapes must match.
    pub fn straight_through(&mut self, forward: Tensor, back: Var) -> Result<Var> {
        same_shape(&forward, self.value(back))?;
        let shape = forward.shape().to_vec();
        Ok(self.push(
            forward,
            Some(Box::new(move |_, g, grads| {
                accum(&mut grads[back.0], &shape, |d| {
                    for (o, &gi) in d.iter_mut().zip(g.iter()) {
                        *o += gi;
                    }
                });
            })),
        ))
    }

    /// `values[c,y,x] = mask[y,x] * img[c,y,x]` with `img` constant.
    pub fn mask_lookup(&mut self, mask: Var, img: &Tensor) -> Result<Var> {
        let s = img.shape().to_vec();
        if s.len() != 3 {
            return Err(Error::contract("mask_lookup: image must be C x H x W"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if self.value(mask).shape() != [h, w] {
            return Err(Error::ShapeMismatch {
                expected: vec![h, w],
                got: self.value(mask).shape().to_vec(),
            });
        }
        let plane = h * w;
        let mut data = vec![0.0; c * plane];
        for ci in 0..c {
            for p in 0..plane {
                data[ci * plane + p] = self.value(mask).data()[p] * img.data()[ci * plane + p];
            }
        }
        let value = Tensor::from_vec(&s, data)?;
        let img = img.clone();
        Ok(self.push(
            value,
            Some(Box::new(move |_, g, grads| {
                accum(&mut grads[mask.0], &[h, w], |d| {
                    for p in 0..plane {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            acc += g.data()[ci * plane + p] * img.data()[ci * plane + p];
                        }
                        d[p] += acc;
                    }
                });
            })),
        ))
    }
}

fn pad_input(x: &[f64], c: usize, h: usize, w: usize, pad: usize, padding: Padding) -> Vec<f64> {
    if pad == 0 {
        return x.to_vec();
    }
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0; c * hp * wp];
    for ci in 0..c {
        for y in 0..hp {
            for xx in 0..wp {
                let v = match padding {
                    Padding::Zero => {
                        if y >= pad && y < h + pad && xx >= pad && xx < w + pad {
                            x[chw(ci, y - pad, xx - pad, h, w)]
                        } else {
                            0.0
                        }
                    }
                    Padding::Circular => {
                        let sy = (y + h - pad) % h;
                        let sx = (xx + w - pad) % w;
                        x[chw(ci, sy, sx, h, w)]
                    }
                };
                out[(ci * hp + y) * wp + xx] = v;
            }
        }
    }
    out
}

fn unpad_grad(gxp: &[f64], out: &mut [f64], c: usize, h: usize, w: usize, pad: usize, padding: Padding) {
    if pad == 0 {
        for (o, &v) in out.iter_mut().zip(gxp.iter()) {
            *o += v;
        }
        return;
    }
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    for ci in 0..c {
        for y in 0..hp {
            for xx in 0..wp {
                let g = gxp[(ci * hp + y) * wp + xx];
                if g == 0.0 {
                    continue;
                }
                match padding {
                    Padding::Zero => {
                        if y >= pad && y < h + pad && xx >= pad && xx < w + pad {
                            out[chw(ci, y - pad, xx - pad, h, w)] += g;
                        }
                    }
                    Padding::Circular => {
                        let sy = (y + h - pad) % h;
                        let sx = (xx + w - pad) % w;
                        out[chw(ci, sy, sx, h, w)] += g;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    xp: &[f64],
    weight: &[f64],
    bias: &[f64],
    out: &mut [f64],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
) {
    let pad = k / 2;
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    for oc in 0..cout {
        let ob = oc * h * w;
        out[ob..ob + h * w].fill(bias[oc]);
        for ic in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let wgt = weight[((oc * cin + ic) * k + ky) * k + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    for y in 0..h {
                        let src = &xp[(ic * hp + y + ky) * wp + kx..(ic * hp + y + ky) * wp + kx + w];
                        let dst = &mut out[ob + y * w..ob + y * w + w];
                        for (d, &s) in dst.iter_mut().zip(src.iter()) {
                            *d += wgt * s;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    xp: &[f64],
    weight: &[f64],
    gout: &[f64],
    gxp: &mut [f64],
    gw: &mut [f64],
    gb: &mut [f64],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
) {
    let pad = k / 2;
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    for oc in 0..cout {
        let ob = oc * h * w;
        gb[oc] += gout[ob..ob + h * w].iter().sum::<f64>();
        for ic in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let wi = ((oc * cin + ic) * k + ky) * k + kx;
                    let wgt = weight[wi];
                    let mut acc = 0.0;
                    for y in 0..h {
                        let go = &gout[ob + y * w..ob + y * w + w];
                        let base = (ic * hp + y + ky) * wp + kx;
                        let xrow = &xp[base..base + w];
                        let grow = &mut gxp[base..base + w];
                        for xi in 0..w {
                            acc += go[xi] * xrow[xi];
                            grow[xi] += wgt * go[xi];
                        }
                    }
                    gw[wi] += acc;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng;

    /// Central finite differences over every element of every input leaf.
    fn finite_diff_check(
        shapes: &[Vec<usize>],
        f: impl Fn(&mut Tape, &[Var]) -> Var,
        tol: f64,
        seed: u64,
    ) {
        let mut rng = rng_from(seed, &[]);
        let inputs: Vec<Tensor> = shapes
            .iter()
            .map(|s| {
                Tensor::from_vec(
                    s,
                    (0..s.iter().product::<usize>())
                        .map(|_| rng.random::<f64>() * 1.6 - 0.8)
                        .collect(),
                )
                .unwrap()
            })
            .collect();

        let eval = |inputs: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
            let out = f(&mut tape, &vars);
            tape.value(out).item()
        };

        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out).unwrap();

        let h = 1e-5;
        for (vi, t) in inputs.iter().enumerate() {
            let g = grads.get(vars[vi]);
            for ei in 0..t.len() {
                let mut plus = inputs.to_vec();
                plus[vi].data_mut()[ei] += h;
                let mut minus = inputs.to_vec();
                minus[vi].data_mut()[ei] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = g.map(|t| t.data()[ei]).unwrap_or(0.0);
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() / denom < tol,
                    "input {vi} elem {ei}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn fd_elementwise_chain() {
        finite_diff_check(
            &[vec![2, 3, 3], vec![2, 3, 3]],
            |t, v| {
                let a = t.mul(v[0], v[1]).unwrap();
                let b = t.leaky_relu(a, 0.01);
                let c = t.softplus_floor(b, 1e-4);
                let pooled = t.mean_pool_spatial(c).unwrap();
                let g = t.leaf(Tensor::full(&[2, 2], 1.0));
                let bsum = t.leaf(Tensor::zeros(&[2]));
                let lin = t.linear(pooled, g, bsum).unwrap();
                let s = t.softmax(lin).unwrap();
                let w = t.leaf(Tensor::from_vec(&[2], vec![0.3, 0.7]).unwrap());
                t.log_softmax_dot(w, s).unwrap()
            },
            1e-5,
            1,
        );
    }

    #[test]
    fn fd_conv_zero_and_circular() {
        for padding in [Padding::Zero, Padding::Circular] {
            finite_diff_check(
                &[vec![2, 4, 4], vec![3, 2, 3, 3], vec![3]],
                move |t, v| {
                    let c = t.conv2d(v[0], v[1], v[2], padding).unwrap();
                    let r = t.leaky_relu(c, 0.01);
                    let p = t.mean_pool_spatial(r).unwrap();
                    let w = t.leaf(Tensor::from_vec(&[3], vec![1.0, -0.5, 0.25]).unwrap());
                    let m = t.mul(p, w).unwrap();
                    let one = t.leaf(Tensor::full(&[3], 1.0));
                    let dot = t.mul(m, one).unwrap();
                    let flat = t.reshape(dot, &[3, 1, 1]).unwrap();
                    let pooled = t.mean_pool_spatial(flat).unwrap();
                    let sum_w = t.leaf(Tensor::full(&[1, 3], 1.0));
                    let sum_b = t.leaf(Tensor::zeros(&[1]));
                    t.linear(pooled, sum_w, sum_b).unwrap()
                },
                1e-5,
                2,
            );
        }
    }

    #[test]
    fn fd_depthwise_and_norm() {
        finite_diff_check(
            &[vec![2, 4, 4], vec![2, 3, 3], vec![2], vec![2], vec![2]],
            |t, v| {
                let c = t.depthwise_conv2d(v[0], v[1], v[2], Padding::Zero).unwrap();
                let n = t.spatial_norm(c, v[3], v[4], 1e-5).unwrap();
                let p = t.mean_pool_spatial(n).unwrap();
                let w = t.leaf(Tensor::full(&[1, 2], 0.5));
                let b = t.leaf(Tensor::zeros(&[1]));
                t.linear(p, w, b).unwrap()
            },
            1e-4,
            3,
        );
    }

    #[test]
    fn fd_union_and_likelihood() {
        finite_diff_check(
            &[vec![4], vec![4], vec![1, 2, 2], vec![1, 2, 2]],
            |t, v| {
                let s0 = t.softmax(v[0]).unwrap();
                let s1 = t.softmax(v[1]).unwrap();
                let u = t.soft_union(&[s0, s1], 2, 2).unwrap();
                let x = Tensor::from_vec(&[1, 2, 2], vec![0.1, 0.9, 0.4, 0.6]).unwrap();
                let scale = t.softplus_floor(v[3], 1e-4);
                let ll = t.weighted_gaussian_log_prob(&x, u, v[2], scale).unwrap();
                let comp = t.one_minus(u);
                let ll2 = t.weighted_gaussian_log_prob(&x, comp, v[2], scale).unwrap();
                t.affine(&[(ll, 1.0), (ll2, 0.5)]).unwrap()
            },
            1e-5,
            4,
        );
    }

    #[test]
    fn fd_broadcast_concat_kl() {
        finite_diff_check(
            &[vec![3], vec![3], vec![2, 2, 2]],
            |t, v| {
                let b = t.broadcast_spatial(v[0], 2, 2).unwrap();
                let cat = t.concat_channels(&[b, v[2]]).unwrap();
                let p = t.mean_pool_spatial(cat).unwrap();
                let w = t.leaf(Tensor::full(&[3, 5], 0.2));
                let bi = t.leaf(Tensor::zeros(&[3]));
                let mean = t.linear(p, w, bi).unwrap();
                let scale = t.softplus_floor(v[1], 1e-4);
                t.gaussian_kl_std_normal(mean, scale).unwrap()
            },
            1e-5,
            5,
        );
    }

    #[test]
    fn straight_through_passes_gradient() {
        let mut tape = Tape::new();
        let soft = tape.leaf(Tensor::from_vec(&[3], vec![0.2, 0.5, 0.3]).unwrap());
        let hard = tape
            .straight_through(Tensor::from_vec(&[3], vec![0.0, 1.0, 0.0]).unwrap(), soft)
            .unwrap();
        assert_eq!(tape.value(hard).data(), &[0.0, 1.0, 0.0]);
        let w = tape.leaf(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let m = tape.mul(hard, w).unwrap();
        let flat = tape.reshape(m, &[3, 1, 1]).unwrap();
        let p = tape.mean_pool_spatial(flat).unwrap();
        let sw = tape.leaf(Tensor::full(&[1, 3], 3.0));
        let sb = tape.leaf(Tensor::zeros(&[1]));
        let out = tape.linear(p, sw, sb).unwrap();
        let grads = tape.backward(out).unwrap();
        // d out / d soft = w elementwise (identity through the hard sample).
        let g = grads.get(soft).unwrap();
        assert_eq!(g.data(), &[3.0, 6.0, 9.0]);
    }

    #[test]
    fn soft_union_of_one_hots_is_dedup() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(&[4], vec![0.0, 1.0, 0.0, 0.0]).unwrap());
        let b = tape.leaf(Tensor::from_vec(&[4], vec![0.0, 1.0, 0.0, 0.0]).unwrap());
        let c = tape.leaf(Tensor::from_vec(&[4], vec![0.0, 0.0, 0.0, 1.0]).unwrap());
        let u = tape.soft_union(&[a, b, c], 2, 2).unwrap();
        assert_eq!(tape.value(u).data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn conv_circular_shift_equivariance() {
        let mut rng = rng_from(10, &[]);
        let x = Tensor::from_vec(&[2, 5, 5], (0..50).map(|_| rng.random::<f64>()).collect()).unwrap();
        let wt = Tensor::from_vec(&[3, 2, 3, 3], (0..54).map(|_| rng.random::<f64>() - 0.5).collect())
            .unwrap();
        let b = Tensor::from_vec(&[3], vec![0.1, -0.2, 0.3]).unwrap();

        let run = |input: &Tensor| {
            let mut tape = Tape::new();
            let xi = tape.leaf(input.clone());
            let wv = tape.leaf(wt.clone());
            let bv = tape.leaf(b.clone());
            let out = tape.conv2d(xi, wv, bv, Padding::Circular).unwrap();
            tape.value(out).clone()
        };

        let shift = |t: &Tensor, dy: usize, dx: usize| {
            let s = t.shape().to_vec();
            let (c, h, w) = (s[0], s[1], s[2]);
            let mut out = Tensor::zeros(&s);
            for ci in 0..c {
                for y in 0..h {
                    for x_ in 0..w {
                        out.data_mut()[chw(ci, (y + dy) % h, (x_ + dx) % w, h, w)] =
                            t.data()[chw(ci, y, x_, h, w)];
                    }
                }
            }
            out
        };

        let direct = run(&shift(&x, 2, 1));
        let shifted = shift(&run(&x), 2, 1);
        for (a, b) in direct.iter().zip(shifted.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
