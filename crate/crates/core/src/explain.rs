//! Attribution methods and the three-step visualization simplification.
//!
//! Every method returns a [`RawAttribution`] shaped like the input image.
//! [`simplify`] then reduces it to a single-channel [`RelevanceMap`] in
//! `[0, 1]`: channel sum, 99th-percentile clamp, multiplication by the
//! grayscale image, each followed by an affine rescale when evaluated.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{LayerSpec, Network, ReluRule};
use crate::scalar::Scalar;
use crate::seed::derive_seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Gradient,
    #[serde(rename = "smoothgrad")]
    SmoothGrad,
    Lrp,
    GuidedBackprop,
    #[serde(rename = "gradcam")]
    GradCam,
    #[serde(rename = "guided_gradcam")]
    GuidedGradCam,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Gradient,
        Method::SmoothGrad,
        Method::Lrp,
        Method::GuidedBackprop,
        Method::GradCam,
        Method::GuidedGradCam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Gradient => "gradient",
            Method::SmoothGrad => "smoothgrad",
            Method::Lrp => "lrp",
            Method::GuidedBackprop => "guided_backprop",
            Method::GradCam => "gradcam",
            Method::GuidedGradCam => "guided_gradcam",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown method `{s}`")))
    }
}

/// Simplification step a map has been taken through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Channels summed into one.
    Summed,
    /// Summed, then clamped at the 99th percentile.
    Clamped,
    /// Clamped, then multiplied by the grayscale image.
    Multiplied,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Summed, Stage::Clamped, Stage::Multiplied];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Summed => "summed",
            Stage::Clamped => "clamped",
            Stage::Multiplied => "multiplied",
        }
    }

    pub fn index(self) -> u8 {
        self as u8 + 1
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s || st.index().to_string() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodParams {
    pub smooth_n: usize,
    pub smooth_sigma: f64,
    pub lrp_epsilon: f64,
    pub seed: u64,
}

impl Default for MethodParams {
    fn default() -> Self {
        Self {
            smooth_n: 100,
            smooth_sigma: 0.2,
            lrp_epsilon: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawAttribution<S> {
    pub values: Tensor<S>,
    pub method: Method,
    pub params: BTreeMap<String, f64>,
}

impl<S: Scalar> RawAttribution<S> {
    fn new(values: Tensor<S>, method: Method, params: &[(&str, f64)]) -> Result<Self> {
        if !values.is_finite() {
            return Err(Error::NonFinite("attribution"));
        }
        Ok(Self {
            values,
            method,
            params: params.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
        })
    }
}

/// Single-channel `[H, W]` relevance map.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap<S> {
    pub values: Tensor<S>,
    pub stage: Stage,
    /// Whether the values have been rescaled to `[0, 1]`.
    pub normalized: bool,
}

impl<S: Scalar> RelevanceMap<S> {
    /// Wraps a final-stage map, checking the `[0, 1]` range.
    pub fn normalized(values: Tensor<S>, stage: Stage) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(Error::InvalidParameter(format!(
                "relevance map must be [H, W], got {:?}",
                values.shape()
            )));
        }
        if values
            .data()
            .iter()
            .any(|v| !(*v >= S::zero() && *v <= S::one()))
        {
            return Err(Error::InvalidParameter(
                "relevance values outside [0, 1]".into(),
            ));
        }
        Ok(Self {
            values,
            stage,
            normalized: true,
        })
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }
}

/// `|dJ/dx|` for the cross-entropy loss at `class`.
pub fn gradient_map<S: Scalar>(
    net: &Network<S>,
    image: &Tensor<S>,
    class: usize,
) -> Result<RawAttribution<S>> {
    let g = net.input_gradient(image, class)?;
    RawAttribution::new(g.abs(), Method::Gradient, &[])
}

/// The `n` noisy copies of `image` SmoothGrad averages over, drawn from a
/// stream derived from `(seed, sample_id)`.
pub fn smoothgrad_inputs<S: Scalar>(
    image: &Tensor<S>,
    n: usize,
    sigma: f64,
    seed: u64,
    sample_id: u64,
) -> Result<Vec<Tensor<S>>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "sigma {sigma} must be >= 0"
        )));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[sample_id]));
    Ok((0..n)
        .map(|_| {
            let mut noisy = image.clone();
            for v in noisy.data_mut() {
                *v = *v + S::of(normal.sample(&mut rng));
            }
            noisy
        })
        .collect())
}

/// Mean of `|dJ/dx|` over `n` Gaussian-perturbed copies of the image.
pub fn smoothgrad_map<S: Scalar>(
    net: &Network<S>,
    image: &Tensor<S>,
    class: usize,
    n: usize,
    sigma: f64,
    seed: u64,
    sample_id: u64,
) -> Result<RawAttribution<S>> {
    if n == 0 {
        return Err(Error::InvalidParameter("smoothgrad needs n >= 1".into()));
    }
    let mut acc = Tensor::zeros(image.shape());
    for noisy in smoothgrad_inputs(image, n, sigma, seed, sample_id)? {
        let g = net.input_gradient(&noisy, class)?;
        for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
            *a = *a + v.abs();
        }
    }
    let scale = S::of(n as f64);
    RawAttribution::new(
        acc.map(|v| v / scale),
        Method::SmoothGrad,
        &[("n", n as f64), ("sigma", sigma)],
    )
}

/// Relevance at the input of every layer under the LRP epsilon rule.
///
/// Entry `i` is the relevance at the input of layer `i`; the last entry is the
/// output relevance, which is the predicted-class logit on that class and zero
/// elsewhere.
pub fn lrp_relevances<S: Scalar>(
    net: &Network<S>,
    image: &Tensor<S>,
    epsilon: f64,
) -> Result<Vec<Tensor<S>>> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "lrp epsilon {epsilon} must be >= 0"
        )));
    }
    let eps = S::of(epsilon);
    let trace = net.trace(image)?;
    let logits = trace.logits();
    let class = crate::net::softmax(logits).argmax();
    let mut r = Tensor::zeros(logits.shape());
    r.data_mut()[class] = logits.data()[class];

    let layers = net.layers();
    let mut out = vec![Tensor::zeros(&[0]); layers.len() + 1];
    out[layers.len()] = r.clone();
    for (i, layer) in layers.iter().enumerate().rev() {
        let input = &trace.values[i];
        r = match *layer.spec() {
            LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } => {
                let z = &trace.values[i + 1];
                let s = r.zip_map(z, |rj, zj| {
                    let stab = if zj >= S::zero() { zj + eps } else { zj - eps };
                    if stab.is_zero() {
                        S::zero()
                    } else {
                        rj / stab
                    }
                });
                let c = layer.linear_transpose(input.shape(), &s);
                input.zip_map(&c, |a, ci| a * ci)
            }
            LayerSpec::Relu => {
                input.zip_map(&r, |x, rj| if x > S::zero() { rj } else { S::zero() })
            }
            LayerSpec::MaxPool2d { size, stride } => layer.route_to_max(input, &r, size, stride),
            LayerSpec::Flatten => layer.backward(input, &r, ReluRule::Standard),
        };
        out[i] = r.clone();
    }
    if !out[0].is_finite() {
        return Err(Error::NonFinite("lrp relevance"));
    }
    Ok(out)
}

/// Signed LRP-epsilon relevance at the input pixels.
pub fn lrp_epsilon_map<S: Scalar>(
    net: &Network<S>,
    image: &Tensor<S>,
    epsilon: f64,
) -> Result<RawAttribution<S>> {
    let mut rel = lrp_relevances(net, image, epsilon)?;
    RawAttribution::new(rel.swap_remove(0), Method::Lrp, &[("epsilon", epsilon)])
}

/// `|guided dJ/dx|`.
pub fn guided_backprop_map<S: Scalar>(
    net: &Network<S>,
    image: &Tensor<S>,
    class: usize,
) -> Result<RawAttribution<S>> {
    let g = net.guided_input_gradient(image, class)?;
    RawAttribution::new(g.abs(), Method::GuidedBackprop, &[])
}

/// Grad-CAM at the feature-map resolution of the last conv layer:
/// `relu(sum_k mean(dy/dA_k) * A_k)`.
pub fn gradcam_coarse<S: Scalar>(net: &Network<S>, image: &Tensor<S>) -> Result<Tensor<S>> {
    let idx = net
        .last_conv_index()
        .ok_or_else(|| Error::MethodInapplicable {
            method: Method::GradCam.name().into(),
            reason: "network has no conv2d layer".into(),
        })?;
    let (act, grad) = net.feature_map_gradient(image, idx)?;
    let (k, h, w) = (act.shape()[0], act.shape()[1], act.shape()[2]);
    let plane = h * w;
    let denom = S::of(plane as f64);
    let weights: Vec<S> = (0..k)
        .map(|c| {
            grad.data()[c * plane..(c + 1) * plane]
                .iter()
                .copied()
                .sum::<S>()
                / denom
        })
        .collect();
    let a = act.data();
    Ok(Tensor::from_fn(&[h, w], |p| {
        let v: S = weights
            .iter()
            .enumerate()
            .map(|(c, &wc)| wc * a[c * plane + p])
            .sum();
        v.max(S::zero())
    }))
}

/// Bilinear resize of an `[h, w]` grid with half-pixel centers.
pub fn upsample_bilinear<S: Scalar>(map: &Tensor<S>, out_h: usize, out_w: usize) -> Tensor<S> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let src = |dst: usize, n_in: usize, n_out: usize| -> (usize, usize, S) {
        let pos = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        let t = if i1 == i0 { 0.0 } else { pos - i0 as f64 };
        (i0, i1, S::of(t))
    };
    let m = map.data();
    Tensor::from_fn(&[out_h, out_w], |p| {
        let (y, x) = (p / out_w, p % out_w);
        let (y0, y1, ty) = src(y, h, out_h);
        let (x0, x1, tx) = src(x, w, out_w);
        let top = m[y0 * w + x0] * (S::one() - tx) + m[y0 * w + x1] * tx;
        let bottom = m[y1 * w + x0] * (S::one() - tx) + m[y1 * w + x1] * tx;
        top * (S::one() - ty) + bottom * ty
    })
}

/// Repeats an `[H, W]` grid over the channels of `shape = [C, H, W]`.
fn broadcast_channels<S: Scalar>(map: &Tensor<S>, shape: &[usize]) -> Tensor<S> {
    let plane = map.len();
    Tensor::from_fn(shape, |i| map.data()[i % plane])
}

fn spatial<S: Scalar>(image: &Tensor<S>) -> (usize, usize) {
    let s = image.shape();
    (s[s.len() - 2], s[s.len() - 1])
}

fn require_image<S: Scalar>(image: &Tensor<S>, method: Method) -> Result<()> {
    if image.shape().len() != 3 {
        return Err(Error::MethodInapplicable {
            method: method.name().into(),
            reason: format!("needs [C, H, W] input, got {:?}", image.shape()),
        });
    }
    Ok(())
}

/// Grad-CAM upsampled to the input resolution and broadcast over channels.
pub fn gradcam_map<S: Scalar>(net: &Network<S>, image: &Tensor<S>) -> Result<RawAttribution<S>> {
    require_image(image, Method::GradCam)?;
    let coarse = gradcam_coarse(net, image)?;
    let (h, w) = spatial(image);
    let up = upsample_bilinear(&coarse, h, w);
    RawAttribution::new(broadcast_channels(&up, image.shape()), Method::GradCam, &[])
}

/// `|guided dJ/dx|` times the upsampled Grad-CAM map.
pub fn guided_gradcam_map<S: Scalar>(
    net: &Network<S>,
    image: &Tensor<S>,
    class: usize,
) -> Result<RawAttribution<S>> {
    let cam = gradcam_map(net, image)?;
    let guided = guided_backprop_map(net, image, class)?;
    RawAttribution::new(
        guided.values.zip_map(&cam.values, |g, c| g * c),
        Method::GuidedGradCam,
        &[],
    )
}

/// Runs `method` for `class`. `sample_id` keys SmoothGrad's noise stream.
pub fn explain<S: Scalar>(
    net: &Network<S>,
    image: &Tensor<S>,
    class: usize,
    method: Method,
    params: &MethodParams,
    sample_id: u64,
) -> Result<RawAttribution<S>> {
    match method {
        Method::Gradient => gradient_map(net, image, class),
        Method::SmoothGrad => smoothgrad_map(
            net,
            image,
            class,
            params.smooth_n,
            params.smooth_sigma,
            params.seed,
            sample_id,
        ),
        Method::Lrp => lrp_epsilon_map(net, image, params.lrp_epsilon),
        Method::GuidedBackprop => guided_backprop_map(net, image, class),
        Method::GradCam => gradcam_map(net, image),
        Method::GuidedGradCam => guided_gradcam_map(net, image, class),
    }
}

/// Stage 1: sum a `[C, H, W]` attribution over channels.
pub fn sum_channels<S: Scalar>(raw: &Tensor<S>) -> Result<Tensor<S>> {
    match raw.shape() {
        [c, h, w] => {
            let plane = h * w;
            let d = raw.data();
            Ok(Tensor::from_fn(&[*h, *w], |p| {
                (0..*c).map(|ch| d[ch * plane + p]).sum()
            }))
        }
        [_, _] => Ok(raw.clone()),
        other => Err(Error::InvalidParameter(format!(
            "cannot sum channels of shape {other:?}"
        ))),
    }
}

/// Nearest-rank percentile: the value at 1-based rank `ceil(p/100 * n)` of the sorted values.
pub fn percentile_nearest_rank<S: Scalar>(values: &[S], p: f64) -> Option<S> {
    if values.is_empty() || !(0.0..=100.0).contains(&p) {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite map values"));
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Stage 2: `min(v, P99)`.
pub fn clamp_percentile<S: Scalar>(map: &Tensor<S>, p: f64) -> Tensor<S> {
    match percentile_nearest_rank(map.data(), p) {
        Some(bound) => map.map(|v| v.min(bound)),
        None => map.clone(),
    }
}

/// Unweighted channel mean of a `[C, H, W]` image.
pub fn grayscale<S: Scalar>(image: &Tensor<S>) -> Result<Tensor<S>> {
    let c = S::of(image.shape()[0] as f64);
    Ok(sum_channels(image)?.map(|v| v / c))
}

/// Stage 3: multiply by the grayscale image.
pub fn multiply_grayscale<S: Scalar>(map: &Tensor<S>, image: &Tensor<S>) -> Result<Tensor<S>> {
    let gray = grayscale(image)?;
    if gray.shape() != map.shape() {
        return Err(Error::InputShape {
            expected: map.shape().to_vec(),
            actual: gray.shape().to_vec(),
        });
    }
    Ok(map.zip_map(&gray, |r, g| r * g))
}

/// Affine rescale to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize_unit_range<S: Scalar>(map: &Tensor<S>) -> Tensor<S> {
    let (lo, hi) = map
        .data()
        .iter()
        .fold((S::infinity(), S::neg_infinity()), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if map.is_empty() || hi <= lo {
        return Tensor::zeros(map.shape());
    }
    let span = hi - lo;
    map.map(|v| ((v - lo) / span).max(S::zero()).min(S::one()))
}

/// Applies the simplification steps up to and including `stage`, then
/// rescales to `[0, 1]`.
pub fn simplify<S: Scalar>(
    raw: &RawAttribution<S>,
    image: &Tensor<S>,
    stage: Stage,
) -> Result<RelevanceMap<S>> {
    if raw.values.shape() != image.shape() {
        return Err(Error::InputShape {
            expected: image.shape().to_vec(),
            actual: raw.values.shape().to_vec(),
        });
    }
    if !raw.values.is_finite() {
        return Err(Error::NonFinite("raw attribution"));
    }
    let mut map = sum_channels(&raw.values)?;
    if stage >= Stage::Clamped {
        map = clamp_percentile(&map, 99.0);
    }
    if stage >= Stage::Multiplied {
        map = multiply_grayscale(&map, image)?;
    }
    Ok(RelevanceMap {
        values: normalize_unit_range(&map),
        stage,
        normalized: true,
    })
}
