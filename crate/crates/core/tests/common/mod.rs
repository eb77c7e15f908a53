#![allow(dead_code)]

use apemkit::net::{Layer, LayerSpec, Network};
use apemkit::tensor::Tensor;
use proptest::test_runner::{Config, RngSeed};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn config(cases: u32) -> Config {
    Config {
        cases,
        rng_seed: RngSeed::Fixed(0x5eed),
        failure_persistence: None,
        ..Config::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Arch {
    /// `[1, 3, 3]` -> dense(5) -> relu -> dense(3)
    Mlp,
    /// `[2, 6, 6]` -> conv(3) relu pool -> conv(2) relu -> dense(4)
    Cnn,
}

impl Arch {
    pub fn input_shape(self) -> Vec<usize> {
        match self {
            Arch::Mlp => vec![1, 3, 3],
            Arch::Cnn => vec![2, 6, 6],
        }
    }

    pub fn specs(self) -> Vec<LayerSpec> {
        match self {
            Arch::Mlp => vec![
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    inputs: 9,
                    outputs: 5,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    inputs: 5,
                    outputs: 3,
                },
            ],
            Arch::Cnn => vec![
                LayerSpec::Conv2d {
                    in_channels: 2,
                    out_channels: 3,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool2d { size: 2, stride: 2 },
                LayerSpec::Conv2d {
                    in_channels: 3,
                    out_channels: 2,
                    kernel: 2,
                    stride: 1,
                    padding: 0,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    inputs: 8,
                    outputs: 4,
                },
            ],
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Init {
    pub bias: bool,
    pub nonneg: bool,
}

pub const SIGNED_BIASED: Init = Init {
    bias: true,
    nonneg: false,
};

/// Random parameters drawn independently of `Network::random`.
pub fn build(arch: Arch, seed: u64, init: Init) -> Network<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = arch
        .specs()
        .into_iter()
        .map(|spec| {
            let mut layer = Layer::<f64>::zeroed(spec);
            if let Some((ws, _)) = spec.param_shapes() {
                let fan_in: usize = ws[1..].iter().product();
                let a = 1.5 / (fan_in as f64).sqrt();
                for w in layer.weight_mut().data_mut() {
                    *w = if init.nonneg {
                        rng.random_range(0.0..a)
                    } else {
                        rng.random_range(-a..a)
                    };
                }
                if init.bias {
                    for b in layer.bias_mut().data_mut() {
                        *b = rng.random_range(-0.3..0.3);
                    }
                }
            }
            layer
        })
        .collect();
    Network::new(arch.input_shape(), layers).unwrap()
}

pub fn image(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    Tensor::from_fn(shape, |_| rng.random::<f64>())
}

/// `-ln softmax(logits)[label]` via log-sum-exp.
pub fn loss(net: &Network<f64>, x: &Tensor<f64>, label: usize) -> f64 {
    let z = net.logits(x).unwrap();
    let z = z.data();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - z[label]
}

pub fn central_difference(f: impl Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>, h: f64) -> Tensor<f64> {
    let mut g = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let mut hi = x.clone();
        hi.data_mut()[i] += h;
        let mut lo = x.clone();
        lo.data_mut()[i] -= h;
        g.data_mut()[i] = (f(&hi) - f(&lo)) / (2.0 * h);
    }
    g
}

/// `max |a - b| / max(max |a|, max |b|)`; 0 when both vanish.
pub fn relative_error(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = a.max_abs().max(b.max_abs());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Distance of `x` from the nearest relu or max-pool decision boundary: the
/// smallest |relu input| and the smallest gap between a pooling window's
/// maximum and runner-up.
pub fn kink_margin(net: &Network<f64>, x: &Tensor<f64>) -> f64 {
    let trace = net.trace(x).unwrap();
    let mut margin = f64::INFINITY;
    for (i, layer) in net.layers().iter().enumerate() {
        let input = &trace.values[i];
        match *layer.spec() {
            LayerSpec::Relu => {
                for v in input.data() {
                    margin = margin.min(v.abs());
                }
            }
            LayerSpec::MaxPool2d { size, stride } => {
                let s = input.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = ((h - size) / stride + 1, (w - size) / stride + 1);
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut vals: Vec<f64> = Vec::new();
                            for dy in 0..size {
                                for dx in 0..size {
                                    let (y, xx) = (oy * stride + dy, ox * stride + dx);
                                    vals.push(input.data()[(ch * h + y) * w + xx]);
                                }
                            }
                            vals.sort_by(|a, b| b.total_cmp(a));
                            margin = margin.min(vals[0] - vals[1]);
                        }
                    }
                }
            }
            _ => {}
        }
    }
    margin
}

/// The layers above `from` as a network of their own.
pub fn head(net: &Network<f64>, from: usize) -> Network<f64> {
    Network::new(net.shape_at(from).to_vec(), net.layers()[from..].to_vec()).unwrap()
}
