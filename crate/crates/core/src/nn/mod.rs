//! A small CPU network engine: NCHW tensors, layers with explicit backward
//! passes, and composite blocks (residual, squeeze-excite).
//!
//! Every layer has two entry points: `infer(&self)` for evaluation (no
//! caching, safe to share across threads) and `forward_train(&mut self)`
//! which caches what `backward` needs. Gradients accumulate into
//! [`Param::grad`] until [`Layer::zero_grad`].

mod layers;
mod tensor;

pub use layers::{ActKind, Activation, BatchNorm2d, Conv2d, Flatten, GlobalAvgPool, Linear, MaxPool2d, Param};
pub use tensor::Tensor;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    Linear(Linear),
    BatchNorm(BatchNorm2d),
    Act(Activation),
    MaxPool(MaxPool2d),
    AvgPool(GlobalAvgPool),
    Flatten(Flatten),
    Residual(Box<Residual>),
    SqueezeExcite(Box<SqueezeExcite>),
    Seq(Sequential),
}

impl Layer {
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv(l) => l.infer(x),
            Layer::Linear(l) => l.infer(x),
            Layer::BatchNorm(l) => l.infer(x),
            Layer::Act(l) => l.infer(x),
            Layer::MaxPool(l) => l.infer(x),
            Layer::AvgPool(l) => l.infer(x),
            Layer::Flatten(l) => l.infer(x),
            Layer::Residual(l) => l.infer(x),
            Layer::SqueezeExcite(l) => l.infer(x),
            Layer::Seq(l) => l.infer(x),
        }
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv(l) => l.forward_train(x),
            Layer::Linear(l) => l.forward_train(x),
            Layer::BatchNorm(l) => l.forward_train(x),
            Layer::Act(l) => l.forward_train(x),
            Layer::MaxPool(l) => l.forward_train(x),
            Layer::AvgPool(l) => l.forward_train(x),
            Layer::Flatten(l) => l.forward_train(x),
            Layer::Residual(l) => l.forward_train(x),
            Layer::SqueezeExcite(l) => l.forward_train(x),
            Layer::Seq(l) => l.forward_train(x),
        }
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv(l) => l.backward(grad),
            Layer::Linear(l) => l.backward(grad),
            Layer::BatchNorm(l) => l.backward(grad),
            Layer::Act(l) => l.backward(grad),
            Layer::MaxPool(l) => l.backward(grad),
            Layer::AvgPool(l) => l.backward(grad),
            Layer::Flatten(l) => l.backward(grad),
            Layer::Residual(l) => l.backward(grad),
            Layer::SqueezeExcite(l) => l.backward(grad),
            Layer::Seq(l) => l.backward(grad),
        }
    }

    /// Visits every parameter and buffer in a fixed depth-first order.
    pub fn visit(&self, f: &mut dyn FnMut(&Param)) {
        match self {
            Layer::Conv(l) => {
                f(&l.weight);
                if let Some(b) = &l.bias {
                    f(b);
                }
            }
            Layer::Linear(l) => {
                f(&l.weight);
                f(&l.bias);
            }
            Layer::BatchNorm(l) => {
                f(&l.gamma);
                f(&l.beta);
                f(&l.running_mean);
                f(&l.running_var);
            }
            Layer::Act(_) | Layer::MaxPool(_) | Layer::AvgPool(_) | Layer::Flatten(_) => {}
            Layer::Residual(r) => {
                r.body.visit(f);
                if let Some(s) = &r.shortcut {
                    s.visit(f);
                }
            }
            Layer::SqueezeExcite(s) => s.squeeze.visit(f),
            Layer::Seq(s) => s.visit(f),
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            Layer::Conv(l) => {
                f(&mut l.weight);
                if let Some(b) = &mut l.bias {
                    f(b);
                }
            }
            Layer::Linear(l) => {
                f(&mut l.weight);
                f(&mut l.bias);
            }
            Layer::BatchNorm(l) => {
                f(&mut l.gamma);
                f(&mut l.beta);
                f(&mut l.running_mean);
                f(&mut l.running_var);
            }
            Layer::Act(_) | Layer::MaxPool(_) | Layer::AvgPool(_) | Layer::Flatten(_) => {}
            Layer::Residual(r) => {
                r.body.visit_mut(f);
                if let Some(s) = &mut r.shortcut {
                    s.visit_mut(f);
                }
            }
            Layer::SqueezeExcite(s) => s.squeeze.visit_mut(f),
            Layer::Seq(s) => s.visit_mut(f),
        }
    }

    fn assign_names(&mut self, prefix: &str) {
        match self {
            Layer::Conv(l) => {
                l.weight.name = format!("{prefix}.weight");
                if let Some(b) = &mut l.bias {
                    b.name = format!("{prefix}.bias");
                }
            }
            Layer::Linear(l) => {
                l.weight.name = format!("{prefix}.weight");
                l.bias.name = format!("{prefix}.bias");
            }
            Layer::BatchNorm(l) => {
                l.gamma.name = format!("{prefix}.weight");
                l.beta.name = format!("{prefix}.bias");
                l.running_mean.name = format!("{prefix}.running_mean");
                l.running_var.name = format!("{prefix}.running_var");
            }
            Layer::Act(_) | Layer::MaxPool(_) | Layer::AvgPool(_) | Layer::Flatten(_) => {}
            Layer::Residual(r) => {
                r.body.assign_names(&format!("{prefix}.body"));
                if let Some(s) = &mut r.shortcut {
                    s.assign_names(&format!("{prefix}.shortcut"));
                }
            }
            Layer::SqueezeExcite(s) => s.squeeze.assign_names(&format!("{prefix}.se")),
            Layer::Seq(s) => s.assign_names(prefix),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn push(&mut self, layer: Layer) {
        self.layers.push(layer);
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut iter = self.layers.iter();
        let Some(first) = iter.next() else {
            return Ok(x.clone());
        };
        let mut h = first.infer(x)?;
        for l in iter {
            h = l.infer(&h)?;
        }
        Ok(h)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut iter = self.layers.iter_mut();
        let Some(first) = iter.next() else {
            return Ok(x.clone());
        };
        let mut h = first.forward_train(x)?;
        for l in iter {
            h = l.forward_train(&h)?;
        }
        Ok(h)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let mut g = grad.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g)?;
        }
        Ok(g)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.layers.iter().for_each(|l| l.visit(f));
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.layers.iter_mut().for_each(|l| l.visit_mut(f));
    }

    /// Names parameters `prefix.<index>...` (or `<index>...` at the root).
    pub fn assign_names(&mut self, prefix: &str) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = if prefix.is_empty() { i.to_string() } else { format!("{prefix}.{i}") };
            l.assign_names(&p);
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.grad.iter_mut().for_each(|g| *g = 0.0));
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| {
            if p.trainable {
                n += p.len()
            }
        });
        n
    }
}

/// `post(body(x) + shortcut(x))`, with an identity shortcut when none is given.
#[derive(Debug, Clone)]
pub struct Residual {
    pub body: Sequential,
    pub shortcut: Option<Sequential>,
    pub post: Option<Activation>,
}

impl Residual {
    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.body.infer(x)?;
        match &self.shortcut {
            Some(s) => y.add_assign(&s.infer(x)?),
            None => y.add_assign(x),
        }
        match &self.post {
            Some(a) => a.infer(&y),
            None => Ok(y),
        }
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.body.forward_train(x)?;
        let s = match &mut self.shortcut {
            Some(s) => s.forward_train(x)?,
            None => x.clone(),
        };
        if s.shape() != y.shape() {
            return Err(Error::shape(format!("residual branch {:?} vs shortcut {:?}", y.shape(), s.shape())));
        }
        y.add_assign(&s);
        match &mut self.post {
            Some(a) => a.forward_train(&y),
            None => Ok(y),
        }
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let g = match &mut self.post {
            Some(a) => a.backward(grad)?,
            None => grad.clone(),
        };
        let mut dx = self.body.backward(&g)?;
        match &mut self.shortcut {
            Some(s) => dx.add_assign(&s.backward(&g)?),
            None => dx.add_assign(&g),
        }
        Ok(dx)
    }
}

/// Channel gating: `x * squeeze(x)`, where `squeeze` maps `[N, C, H, W]` to
/// `[N, C, 1, 1]` (global pool, two pointwise convs, gate activation).
#[derive(Debug, Clone)]
pub struct SqueezeExcite {
    pub squeeze: Sequential,
    cache: Option<(Tensor, Tensor)>,
}

impl SqueezeExcite {
    pub fn new(squeeze: Sequential) -> Self {
        Self { squeeze, cache: None }
    }

    fn gate(x: &Tensor, s: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if s.shape() != [n, c, 1, 1] {
            return Err(Error::shape(format!("squeeze output {:?} for input {:?}", s.shape(), x.shape())));
        }
        let p = h * w;
        let mut out = x.clone();
        for (plane, &sv) in out.data_mut().chunks_mut(p).zip(s.data()) {
            plane.iter_mut().for_each(|v| *v *= sv);
        }
        Ok(out)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let s = self.squeeze.infer(x)?;
        Self::gate(x, &s)
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let s = self.squeeze.forward_train(x)?;
        let out = Self::gate(x, &s)?;
        self.cache = Some((x.clone(), s));
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let (x, s) = self.cache.take().ok_or_else(|| Error::shape("squeeze-excite backward without forward"))?;
        let (n, c, h, w) = x.dims4()?;
        let p = h * w;
        let gs: Vec<f32> = grad
            .data()
            .chunks(p)
            .zip(x.data().chunks(p))
            .map(|(g, xv)| g.iter().zip(xv).map(|(a, b)| a * b).sum())
            .collect();
        let mut dx = self.squeeze.backward(&Tensor::new(vec![n, c, 1, 1], gs)?)?;
        for ((d, g), &sv) in dx.data_mut().chunks_mut(p).zip(grad.data().chunks(p)).zip(s.data()) {
            d.iter_mut().zip(g).for_each(|(a, &b)| *a += b * sv);
        }
        Ok(dx)
    }
}
