//! Paper-scale backbones, built layer for layer after the torchvision
//! definitions so parameter counts match them exactly.
//!
//! CIFAR adaptation: every stem runs at stride 1; ResNet-18 uses a 3x3 stem
//! and drops the stem max-pool. Dropout and stochastic depth are omitted
//! (they carry no parameters and are identities in evaluation).

use rand::Rng;

use crate::nn::{
    ActKind, Activation, BatchNorm2d, Conv2d, Flatten, GlobalAvgPool, Layer, Linear, Residual, Sequential,
    SqueezeExcite,
};

fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut new_v = ((v + d / 2.0) as usize / divisor * divisor).max(divisor);
    if (new_v as f64) < 0.9 * v {
        new_v += divisor;
    }
    new_v
}

/// Conv (no bias) + BatchNorm + optional activation.
fn conv_bn(
    rng: &mut impl Rng,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    groups: usize,
    act: Option<ActKind>,
) -> Vec<Layer> {
    let mut v = vec![
        Layer::Conv(Conv2d::new(rng, cin, cout, k, stride, (k - 1) / 2, groups, false)),
        Layer::BatchNorm(BatchNorm2d::new(cout)),
    ];
    if let Some(a) = act {
        v.push(Layer::Act(Activation::new(a)));
    }
    v
}

fn squeeze_excite(rng: &mut impl Rng, channels: usize, squeeze: usize, act: ActKind, gate: ActKind) -> Layer {
    Layer::SqueezeExcite(Box::new(SqueezeExcite::new(Sequential::new(vec![
        Layer::AvgPool(GlobalAvgPool::default()),
        Layer::Conv(Conv2d::new(rng, channels, squeeze, 1, 1, 0, 1, true)),
        Layer::Act(Activation::new(act)),
        Layer::Conv(Conv2d::new(rng, squeeze, channels, 1, 1, 0, 1, true)),
        Layer::Act(Activation::new(gate)),
    ]))))
}

fn wrap_residual(body: Vec<Layer>, use_res: bool) -> Layer {
    let body = Sequential::new(body);
    if use_res {
        Layer::Residual(Box::new(Residual {
            body,
            shortcut: None,
            post: None,
        }))
    } else {
        Layer::Seq(body)
    }
}

fn head(rng: &mut impl Rng, features: usize, classes: usize) -> Sequential {
    Sequential::new(vec![Layer::Linear(Linear::new(rng, features, classes))])
}

pub(super) fn resnet18(rng: &mut impl Rng, classes: usize) -> (Sequential, Sequential) {
    let mut f = Sequential::new(conv_bn(rng, 3, 64, 3, 1, 1, Some(ActKind::Relu)));
    let mut cin = 64;
    for (stage, &width) in [64usize, 128, 256, 512].iter().enumerate() {
        for block in 0..2 {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let mut body = conv_bn(rng, cin, width, 3, stride, 1, Some(ActKind::Relu));
            body.extend(conv_bn(rng, width, width, 3, 1, 1, None));
            let shortcut = (stride != 1 || cin != width).then(|| Sequential::new(conv_bn(rng, cin, width, 1, stride, 1, None)));
            f.push(Layer::Residual(Box::new(Residual {
                body: Sequential::new(body),
                shortcut,
                post: Some(Activation::new(ActKind::Relu)),
            })));
            cin = width;
        }
    }
    f.push(Layer::AvgPool(GlobalAvgPool::default()));
    f.push(Layer::Flatten(Flatten::default()));
    (f, head(rng, 512, classes))
}

pub(super) fn mobilenet_v3_large(rng: &mut impl Rng, classes: usize) -> (Sequential, Sequential) {
    use ActKind::{HardSwish as HS, Relu as RE};
    // (in, kernel, expanded, out, squeeze-excite, activation, stride)
    let settings: [(usize, usize, usize, usize, bool, ActKind, usize); 15] = [
        (16, 3, 16, 16, false, RE, 1),
        (16, 3, 64, 24, false, RE, 2),
        (24, 3, 72, 24, false, RE, 1),
        (24, 5, 72, 40, true, RE, 2),
        (40, 5, 120, 40, true, RE, 1),
        (40, 5, 120, 40, true, RE, 1),
        (40, 3, 240, 80, false, HS, 2),
        (80, 3, 200, 80, false, HS, 1),
        (80, 3, 184, 80, false, HS, 1),
        (80, 3, 184, 80, false, HS, 1),
        (80, 3, 480, 112, true, HS, 1),
        (112, 3, 672, 112, true, HS, 1),
        (112, 5, 672, 160, true, HS, 2),
        (160, 5, 960, 160, true, HS, 1),
        (160, 5, 960, 160, true, HS, 1),
    ];
    let mut f = Sequential::new(conv_bn(rng, 3, 16, 3, 1, 1, Some(HS)));
    for (cin, k, exp, cout, se, act, stride) in settings {
        let mut body = Vec::new();
        if exp != cin {
            body.extend(conv_bn(rng, cin, exp, 1, 1, 1, Some(act)));
        }
        body.extend(conv_bn(rng, exp, exp, k, stride, exp, Some(act)));
        if se {
            body.push(squeeze_excite(rng, exp, make_divisible(exp as f64 / 4.0, 8), RE, ActKind::HardSigmoid));
        }
        body.extend(conv_bn(rng, exp, cout, 1, 1, 1, None));
        f.push(wrap_residual(body, stride == 1 && cin == cout));
    }
    f.layers.extend(conv_bn(rng, 160, 960, 1, 1, 1, Some(HS)));
    f.push(Layer::AvgPool(GlobalAvgPool::default()));
    f.push(Layer::Flatten(Flatten::default()));
    f.push(Layer::Linear(Linear::new(rng, 960, 1280)));
    f.push(Layer::Act(Activation::new(HS)));
    (f, head(rng, 1280, classes))
}

pub(super) fn efficientnet_b5(rng: &mut impl Rng, classes: usize) -> (Sequential, Sequential) {
    let (width, depth) = (1.6, 2.2);
    let adjust = |c: usize| make_divisible(c as f64 * width, 8);
    // (expand ratio, kernel, stride, in, out, layers)
    let stages = [
        (1usize, 3usize, 1usize, 32usize, 16usize, 1usize),
        (6, 3, 2, 16, 24, 2),
        (6, 5, 2, 24, 40, 2),
        (6, 3, 2, 40, 80, 3),
        (6, 5, 1, 80, 112, 3),
        (6, 5, 2, 112, 192, 4),
        (6, 3, 1, 192, 320, 1),
    ];
    let stem = adjust(32);
    let mut f = Sequential::new(conv_bn(rng, 3, stem, 3, 1, 1, Some(ActKind::Silu)));
    let mut last = stem;
    for (expand, k, stride, cin, cout, layers) in stages {
        let repeats = (layers as f64 * depth).ceil() as usize;
        let (cin, cout) = (adjust(cin), adjust(cout));
        for r in 0..repeats {
            let (bin, bstride) = if r == 0 { (cin, stride) } else { (cout, 1) };
            let exp = make_divisible((bin * expand) as f64, 8);
            let mut body = Vec::new();
            if exp != bin {
                body.extend(conv_bn(rng, bin, exp, 1, 1, 1, Some(ActKind::Silu)));
            }
            body.extend(conv_bn(rng, exp, exp, k, bstride, exp, Some(ActKind::Silu)));
            body.push(squeeze_excite(rng, exp, (bin / 4).max(1), ActKind::Silu, ActKind::Sigmoid));
            body.extend(conv_bn(rng, exp, cout, 1, 1, 1, None));
            f.push(wrap_residual(body, bstride == 1 && bin == cout));
        }
        last = cout;
    }
    let top = 4 * last;
    f.layers.extend(conv_bn(rng, last, top, 1, 1, 1, Some(ActKind::Silu)));
    f.push(Layer::AvgPool(GlobalAvgPool::default()));
    f.push(Layer::Flatten(Flatten::default()));
    (f, head(rng, top, classes))
}

#[cfg(test)]
mod tests {
    use super::make_divisible;

    #[test]
    fn divisible_rounding() {
        assert_eq!(make_divisible(51.2, 8), 48);
        assert_eq!(make_divisible(25.6, 8), 24);
        assert_eq!(make_divisible(960.0 / 4.0, 8), 240);
        assert_eq!(make_divisible(18.0, 8), 24);
        assert_eq!(make_divisible(3.0, 8), 8);
    }
}
