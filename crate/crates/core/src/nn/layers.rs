use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};
use crate::par;

/// Examples per partial sum when accumulating weight gradients. Fixed so the
/// reduction order never depends on the thread count.
const GRAD_CHUNK: usize = 16;

/// A named tensor owned by a layer. Buffers (`trainable == false`) are saved in
/// weight files but skipped by the optimizer and by parameter counts.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub trainable: bool,
}

impl Param {
    fn new(shape: Vec<usize>, value: Vec<f32>) -> Self {
        let len = value.len();
        Self {
            name: String::new(),
            shape,
            value,
            grad: vec![0.0; len],
            trainable: true,
        }
    }

    fn buffer(shape: Vec<usize>, value: Vec<f32>) -> Self {
        Self {
            name: String::new(),
            shape,
            value,
            grad: Vec::new(),
            trainable: false,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// He-uniform bound `sqrt(6 / fan_in)`.
fn he_uniform(rng: &mut impl Rng, len: usize, fan_in: usize) -> Vec<f32> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt() as f32;
    (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub weight: Param,
    pub bias: Option<Param>,
    cache: Option<ConvCache>,
}

#[derive(Debug, Clone)]
struct ConvCache {
    in_shape: (usize, usize, usize, usize),
    /// im2col buffers, or the raw input for pointwise convolutions.
    cols: Vec<f32>,
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    cig: usize,
    cog: usize,
    kg: usize,
}

impl ConvGeom {
    fn p(&self) -> usize {
        self.ho * self.wo
    }
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rng: &mut impl Rng,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        assert!(groups >= 1 && in_channels.is_multiple_of(groups) && out_channels.is_multiple_of(groups));
        let cig = in_channels / groups;
        let fan_in = cig * kernel * kernel;
        let wlen = out_channels * fan_in;
        let weight = Param::new(vec![out_channels, cig, kernel, kernel], he_uniform(rng, wlen, fan_in));
        let bias = bias.then(|| Param::new(vec![out_channels], vec![0.0; out_channels]));
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            groups,
            weight,
            bias,
            cache: None,
        }
    }

    fn pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0 && self.groups == 1
    }

    fn geom(&self, x: &Tensor) -> Result<(usize, ConvGeom)> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::shape(format!("conv expects {} channels, got {c}", self.in_channels)));
        }
        if h + 2 * self.padding < self.kernel || w + 2 * self.padding < self.kernel {
            return Err(Error::shape(format!("conv kernel {} larger than padded input {h}x{w}", self.kernel)));
        }
        let ho = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let wo = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        let cig = self.in_channels / self.groups;
        Ok((
            n,
            ConvGeom {
                c,
                h,
                w,
                ho,
                wo,
                cig,
                cog: self.out_channels / self.groups,
                kg: cig * self.kernel * self.kernel,
            },
        ))
    }

    fn im2col(&self, g: &ConvGeom, x: &[f32], c0: usize, col: &mut [f32]) {
        let k = self.kernel;
        let (s, pad) = (self.stride as isize, self.padding as isize);
        let p = g.p();
        for ci in 0..g.cig {
            let plane = &x[(c0 + ci) * g.h * g.w..(c0 + ci + 1) * g.h * g.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[((ci * k + ky) * k + kx) * p..][..p];
                    for oy in 0..g.ho {
                        let iy = oy as isize * s - pad + ky as isize;
                        let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                        if iy < 0 || iy >= g.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = ox as isize * s - pad + kx as isize;
                            *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, g: &ConvGeom, col: &[f32], c0: usize, dx: &mut [f32]) {
        let k = self.kernel;
        let (s, pad) = (self.stride as isize, self.padding as isize);
        let p = g.p();
        for ci in 0..g.cig {
            let plane = &mut dx[(c0 + ci) * g.h * g.w..(c0 + ci + 1) * g.h * g.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &col[((ci * k + ky) * k + kx) * p..][..p];
                    for oy in 0..g.ho {
                        let iy = oy as isize * s - pad + ky as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..g.wo {
                            let ix = ox as isize * s - pad + kx as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[ix as usize] += row[oy * g.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Output for one example; `col` is scratch of `groups * kg * p` floats.
    fn forward_one(&self, g: &ConvGeom, x: &[f32], col: &mut [f32], out: &mut [f32]) {
        let p = g.p();
        let w = &self.weight.value;
        if self.pointwise() {
            gemm(g.cog, g.kg, p, w, g.kg, 1, x, p, 1, 0.0, out, p, 1);
        } else {
            for grp in 0..self.groups {
                let colg = &mut col[grp * g.kg * p..(grp + 1) * g.kg * p];
                self.im2col(g, x, grp * g.cig, colg);
                gemm(
                    g.cog,
                    g.kg,
                    p,
                    &w[grp * g.cog * g.kg..],
                    g.kg,
                    1,
                    colg,
                    p,
                    1,
                    0.0,
                    &mut out[grp * g.cog * p..],
                    p,
                    1,
                );
            }
        }
        if let Some(b) = &self.bias {
            for (co, &bv) in b.value.iter().enumerate() {
                out[co * p..(co + 1) * p].iter_mut().for_each(|v| *v += bv);
            }
        }
    }

    pub(crate) fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let (n, g) = self.geom(x)?;
        let p = g.p();
        let in_len = g.c * g.h * g.w;
        let col_len = if self.pointwise() { 0 } else { self.groups * g.kg * p };
        let mut out = vec![0f32; n * self.out_channels * p];
        let xd = x.data();
        par::for_each_chunk_mut(&mut out, self.out_channels * p, |i, o| {
            let mut col = vec![0f32; col_len];
            self.forward_one(&g, &xd[i * in_len..(i + 1) * in_len], &mut col, o);
        });
        Tensor::new(vec![n, self.out_channels, g.ho, g.wo], out)
    }

    pub(crate) fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        if self.pointwise() {
            let out = self.infer(x)?;
            self.cache = Some(ConvCache {
                in_shape: x.dims4()?,
                cols: x.data().to_vec(),
            });
            return Ok(out);
        }
        let (n, g) = self.geom(x)?;
        let p = g.p();
        let in_len = g.c * g.h * g.w;
        let col_len = self.groups * g.kg * p;
        let mut out = vec![0f32; n * self.out_channels * p];
        let mut cols = vec![0f32; n * col_len];
        let xd = x.data();
        let this = &*self;
        par::for_each_chunk_pair_mut(&mut out, self.out_channels * p, &mut cols, col_len, |i, o, col| {
            this.forward_one(&g, &xd[i * in_len..(i + 1) * in_len], col, o);
        });
        self.cache = Some(ConvCache {
            in_shape: x.dims4()?,
            cols,
        });
        Tensor::new(vec![n, self.out_channels, g.ho, g.wo], out)
    }

    pub(crate) fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let cache = self.cache.take().ok_or_else(|| Error::shape("conv backward without forward"))?;
        let (n, c, h, w) = cache.in_shape;
        let (_, g) = self.geom(&Tensor::zeros(vec![0, c, h, w]))?;
        let p = g.p();
        let col_len = if self.pointwise() { c * h * w } else { self.groups * g.kg * p };
        let gd = grad.data();
        let out_len = self.out_channels * p;
        if gd.len() != n * out_len {
            return Err(Error::shape("conv backward: gradient shape"));
        }

        // weight / bias gradients as fixed-size partial sums
        let wlen = self.weight.len();
        let chunks = n.div_ceil(GRAD_CHUNK);
        let cols = &cache.cols;
        let has_bias = self.bias.is_some();
        let partials = par::map_range(chunks, |ch| {
            let mut dw = vec![0f32; wlen];
            let mut db = vec![0f32; if has_bias { self.out_channels } else { 0 }];
            for i in ch * GRAD_CHUNK..((ch + 1) * GRAD_CHUNK).min(n) {
                let gi = &gd[i * out_len..(i + 1) * out_len];
                let ci = &cols[i * col_len..(i + 1) * col_len];
                for grp in 0..self.groups {
                    gemm(
                        g.cog,
                        p,
                        g.kg,
                        &gi[grp * g.cog * p..],
                        p,
                        1,
                        &ci[grp * g.kg * p..],
                        1,
                        p,
                        1.0,
                        &mut dw[grp * g.cog * g.kg..],
                        g.kg,
                        1,
                    );
                }
                for (co, d) in db.iter_mut().enumerate() {
                    *d += gi[co * p..(co + 1) * p].iter().sum::<f32>();
                }
            }
            (dw, db)
        });
        for (dw, db) in partials {
            self.weight.grad.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
            if let Some(b) = &mut self.bias {
                b.grad.iter_mut().zip(&db).for_each(|(a, b)| *a += b);
            }
        }

        // input gradient
        let in_len = c * h * w;
        let mut dx = vec![0f32; n * in_len];
        let wv = &self.weight.value;
        let dcol_len = if self.pointwise() { 0 } else { self.groups * g.kg * p };
        par::for_each_chunk_mut(&mut dx, in_len, |i, dxi| {
            let gi = &gd[i * out_len..(i + 1) * out_len];
            if self.pointwise() {
                gemm(g.kg, g.cog, p, wv, 1, g.kg, gi, p, 1, 0.0, dxi, p, 1);
                return;
            }
            let mut dcol = vec![0f32; dcol_len];
            for grp in 0..self.groups {
                let dcg = &mut dcol[grp * g.kg * p..(grp + 1) * g.kg * p];
                gemm(
                    g.kg,
                    g.cog,
                    p,
                    &wv[grp * g.cog * g.kg..],
                    1,
                    g.kg,
                    &gi[grp * g.cog * p..],
                    p,
                    1,
                    0.0,
                    dcg,
                    p,
                    1,
                );
                self.col2im(&g, dcg, grp * g.cig, dxi);
            }
        });
        Tensor::new(vec![n, c, h, w], dx)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param,
    pub bias: Param,
    cache: Option<Tensor>,
}

impl Linear {
    pub fn new(rng: &mut impl Rng, in_features: usize, out_features: usize) -> Self {
        Self {
            in_features,
            out_features,
            weight: Param::new(
                vec![out_features, in_features],
                he_uniform(rng, in_features * out_features, in_features),
            ),
            bias: Param::new(vec![out_features], vec![0.0; out_features]),
            cache: None,
        }
    }

    pub(crate) fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let (n, f) = x.dims2()?;
        if f != self.in_features {
            return Err(Error::shape(format!("linear expects {} features, got {f}", self.in_features)));
        }
        let o = self.out_features;
        let mut out = vec![0f32; n * o];
        for r in out.chunks_mut(o) {
            r.copy_from_slice(&self.bias.value);
        }
        gemm(n, f, o, x.data(), f, 1, &self.weight.value, 1, f, 1.0, &mut out, o, 1);
        Tensor::new(vec![n, o], out)
    }

    pub(crate) fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let out = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(out)
    }

    pub(crate) fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self.cache.take().ok_or_else(|| Error::shape("linear backward without forward"))?;
        let (n, f) = x.dims2()?;
        let o = self.out_features;
        let g = grad.data();
        gemm(o, n, f, g, 1, o, x.data(), f, 1, 1.0, &mut self.weight.grad, f, 1);
        for r in g.chunks(o) {
            self.bias.grad.iter_mut().zip(r).for_each(|(a, b)| *a += b);
        }
        let mut dx = vec![0f32; n * f];
        gemm(n, o, f, g, o, 1, &self.weight.value, f, 1, 0.0, &mut dx, f, 1);
        Tensor::new(vec![n, f], dx)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub momentum: f32,
    pub eps: f32,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f32>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(vec![channels], vec![1.0; channels]),
            beta: Param::new(vec![channels], vec![0.0; channels]),
            running_mean: Param::buffer(vec![channels], vec![0.0; channels]),
            running_var: Param::buffer(vec![channels], vec![1.0; channels]),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    fn check(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(Error::shape(format!("batchnorm expects {} channels, got {c}", self.channels)));
        }
        Ok((n, c, h * w))
    }

    fn apply(x: &Tensor, n: usize, c: usize, p: usize, scale: &[f32], shift: &[f32]) -> Tensor {
        let mut out = x.clone();
        par::for_each_chunk_mut(out.data_mut(), c * p, |_, ex| {
            for ch in 0..c {
                ex[ch * p..(ch + 1) * p].iter_mut().for_each(|v| *v = *v * scale[ch] + shift[ch]);
            }
        });
        let _ = n;
        out
    }

    pub(crate) fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, p) = self.check(x)?;
        let (scale, shift): (Vec<f32>, Vec<f32>) = (0..c)
            .map(|ch| {
                let inv = 1.0 / (self.running_var.value[ch] + self.eps).sqrt();
                let s = self.gamma.value[ch] * inv;
                (s, self.beta.value[ch] - self.running_mean.value[ch] * s)
            })
            .unzip();
        Ok(Self::apply(x, n, c, p, &scale, &shift))
    }

    pub(crate) fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let (n, c, p) = self.check(x)?;
        let d = x.data();
        let m = (n * p) as f64;
        let stats = par::map_range(c, |ch| {
            let mut sum = 0f64;
            let mut sq = 0f64;
            for i in 0..n {
                for &v in &d[(i * c + ch) * p..(i * c + ch + 1) * p] {
                    sum += v as f64;
                    sq += (v as f64) * (v as f64);
                }
            }
            let mean = sum / m;
            (mean, (sq / m - mean * mean).max(0.0))
        });
        let mut inv_std = Vec::with_capacity(c);
        let mut neg_mean_inv = Vec::with_capacity(c);
        for (ch, &(mean, var)) in stats.iter().enumerate() {
            let inv = 1.0 / (var + self.eps as f64).sqrt();
            inv_std.push(inv as f32);
            neg_mean_inv.push((-mean * inv) as f32);
            let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
            let mom = self.momentum;
            self.running_mean.value[ch] = (1.0 - mom) * self.running_mean.value[ch] + mom * mean as f32;
            self.running_var.value[ch] = (1.0 - mom) * self.running_var.value[ch] + mom * unbiased as f32;
        }
        let xhat = Self::apply(x, n, c, p, &inv_std, &neg_mean_inv);
        let out = Self::apply(&xhat, n, c, p, &self.gamma.value, &self.beta.value);
        self.cache = Some(BnCache { xhat, inv_std });
        Ok(out)
    }

    pub(crate) fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let BnCache { xhat, inv_std } = self.cache.take().ok_or_else(|| Error::shape("batchnorm backward without forward"))?;
        let (n, c, p) = self.check(grad)?;
        let g = grad.data();
        let xh = xhat.data();
        let m = (n * p) as f32;
        let sums = par::map_range(c, |ch| {
            let mut sg = 0f32;
            let mut sgx = 0f32;
            for i in 0..n {
                let r = (i * c + ch) * p..(i * c + ch + 1) * p;
                for (&gv, &xv) in g[r.clone()].iter().zip(&xh[r]) {
                    sg += gv;
                    sgx += gv * xv;
                }
            }
            (sg, sgx)
        });
        for (ch, &(sg, sgx)) in sums.iter().enumerate() {
            self.beta.grad[ch] += sg;
            self.gamma.grad[ch] += sgx;
        }
        let gamma = &self.gamma.value;
        let mut dx = vec![0f32; g.len()];
        par::for_each_chunk_mut(&mut dx, c * p, |i, ex| {
            for ch in 0..c {
                let (sg, sgx) = sums[ch];
                let k = gamma[ch] * inv_std[ch] / m;
                let base = (i * c + ch) * p;
                for j in 0..p {
                    ex[ch * p + j] = k * (m * g[base + j] - sg - xh[base + j] * sgx);
                }
            }
        });
        Tensor::new(grad.shape().to_vec(), dx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActKind {
    Relu,
    HardSwish,
    HardSigmoid,
    Silu,
    Sigmoid,
}

impl ActKind {
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            ActKind::Relu => x.max(0.0),
            ActKind::HardSwish => x * (x + 3.0).clamp(0.0, 6.0) / 6.0,
            ActKind::HardSigmoid => (x + 3.0).clamp(0.0, 6.0) / 6.0,
            ActKind::Silu => x / (1.0 + (-x).exp()),
            ActKind::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    #[inline]
    pub fn derivative(self, x: f32) -> f32 {
        match self {
            ActKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActKind::HardSwish => {
                if x <= -3.0 {
                    0.0
                } else if x >= 3.0 {
                    1.0
                } else {
                    (2.0 * x + 3.0) / 6.0
                }
            }
            ActKind::HardSigmoid => {
                if x > -3.0 && x < 3.0 {
                    1.0 / 6.0
                } else {
                    0.0
                }
            }
            ActKind::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            ActKind::Sigmoid => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 - s)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Activation {
    pub kind: ActKind,
    cache: Option<Tensor>,
}

impl Activation {
    pub fn new(kind: ActKind) -> Self {
        Self { kind, cache: None }
    }

    pub(crate) fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = x.clone();
        let k = self.kind;
        out.data_mut().iter_mut().for_each(|v| *v = k.apply(*v));
        Ok(out)
    }

    pub(crate) fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let out = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(out)
    }

    pub(crate) fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self.cache.take().ok_or_else(|| Error::shape("activation backward without forward"))?;
        let mut out = grad.clone();
        let k = self.kind;
        out.data_mut().iter_mut().zip(x.data()).for_each(|(g, &xv)| *g *= k.derivative(xv));
        Ok(out)
    }
}

/// 2x2 max pooling with stride 2 (odd trailing rows/columns are dropped).
#[derive(Debug, Clone, Default)]
pub struct MaxPool2d {
    cache: Option<(Vec<usize>, Vec<u32>)>,
}

impl MaxPool2d {
    fn compute(x: &Tensor) -> Result<(Tensor, Vec<u32>)> {
        let (n, c, h, w) = x.dims4()?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(Error::shape(format!("maxpool input {h}x{w} too small")));
        }
        let d = x.data();
        let mut out = vec![0f32; n * c * ho * wo];
        let mut arg = vec![0u32; out.len()];
        par::for_each_chunk_pair_mut(&mut out, ho * wo, &mut arg, ho * wo, |plane, o, a| {
            let src = &d[plane * h * w..(plane + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut bi = 0;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let idx = (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > best {
                            best = src[idx];
                            bi = idx;
                        }
                    }
                    o[oy * wo + ox] = best;
                    a[oy * wo + ox] = bi as u32;
                }
            }
        });
        Ok((Tensor::new(vec![n, c, ho, wo], out)?, arg))
    }

    pub(crate) fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(Self::compute(x)?.0)
    }

    pub(crate) fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let (out, arg) = Self::compute(x)?;
        self.cache = Some((x.shape().to_vec(), arg));
        Ok(out)
    }

    pub(crate) fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let (shape, arg) = self.cache.take().ok_or_else(|| Error::shape("maxpool backward without forward"))?;
        let hw = shape[2] * shape[3];
        let opl = grad.row_len() / shape[1];
        let g = grad.data();
        let mut dx = vec![0f32; shape.iter().product()];
        par::for_each_chunk_mut(&mut dx, hw, |plane, d| {
            for j in 0..opl {
                d[arg[plane * opl + j] as usize] += g[plane * opl + j];
            }
        });
        Tensor::new(shape, dx)
    }
}

/// Mean over spatial positions: `[N, C, H, W] -> [N, C, 1, 1]`.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    cache: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    pub(crate) fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let p = h * w;
        let out: Vec<f32> = x.data().chunks(p).map(|pl| pl.iter().sum::<f32>() / p as f32).collect();
        Tensor::new(vec![n, c, 1, 1], out)
    }

    pub(crate) fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.cache = Some(x.shape().to_vec());
        self.infer(x)
    }

    pub(crate) fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let shape = self.cache.take().ok_or_else(|| Error::shape("avgpool backward without forward"))?;
        let p = shape[2] * shape[3];
        let mut dx = Vec::with_capacity(shape.iter().product());
        for &g in grad.data() {
            dx.extend(std::iter::repeat_n(g / p as f32, p));
        }
        Tensor::new(shape, dx)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Flatten {
    cache: Option<Vec<usize>>,
}

impl Flatten {
    pub(crate) fn infer(&self, x: &Tensor) -> Result<Tensor> {
        x.clone().reshape(vec![x.batch(), x.row_len()])
    }

    pub(crate) fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.cache = Some(x.shape().to_vec());
        self.infer(x)
    }

    pub(crate) fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let shape = self.cache.take().ok_or_else(|| Error::shape("flatten backward without forward"))?;
        grad.clone().reshape(shape)
    }
}
