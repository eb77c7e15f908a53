//! The perturbation-gap measure.
//!
//! A relevance map `R` in `[0, 1]` is l1-normalized and pointed along the sign
//! of the loss gradient at the unperturbed image. Stepping the image along
//! that ray, `eps_minus` is the first step count at which the predicted class
//! changes. The same search along the normalized irrelevance `1 - R` gives
//! `eps_plus`. A faithful map flips the prediction quickly along its relevant
//! pixels and slowly along the rest, so `eps_plus - eps_minus` is large.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::RelevanceMap;
use crate::net::Network;
use crate::scalar::Scalar;
use crate::stats::quantile_sorted;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchStrategy {
    /// Doubling to bracket the first flip, then bisection.
    #[default]
    Bracketed,
    /// Every step from 1 to the cap.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Perturbation magnitude per step.
    pub step: f64,
    /// Largest step count tried.
    pub cap: u64,
    /// Clip perturbed pixels to `[0, 1]`.
    pub clip: bool,
    pub strategy: SearchStrategy,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            step: 1.0,
            cap: 10_000,
            clip: false,
            strategy: SearchStrategy::Bracketed,
        }
    }
}

impl SearchConfig {
    fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "step {} must be > 0",
                self.step
            )));
        }
        if self.cap == 0 {
            return Err(Error::InvalidParameter("cap must be >= 1".into()));
        }
        Ok(())
    }
}

/// `R_norm * sign(grad)`, image-shaped.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectedRelevance<S> {
    pub values: Tensor<S>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpsilonSearch {
    pub steps: u64,
    pub capped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapResult {
    pub eps_minus: u64,
    pub eps_plus: u64,
    pub gap: i64,
    pub step_size: f64,
    pub capped_minus: bool,
    pub capped_plus: bool,
}

impl GapResult {
    pub fn new(minus: EpsilonSearch, plus: EpsilonSearch, step_size: f64) -> Self {
        Self {
            eps_minus: minus.steps,
            eps_plus: plus.steps,
            gap: plus.steps as i64 - minus.steps as i64,
            step_size,
            capped_minus: minus.capped,
            capped_plus: plus.capped,
        }
    }
}

/// Divides by the l1 norm. Fails on an all-zero map.
pub fn normalize_l1<S: Scalar>(map: &Tensor<S>) -> Result<Tensor<S>> {
    if map
        .data()
        .iter()
        .any(|v| !(v.is_finite() && *v >= S::zero()))
    {
        return Err(Error::InvalidParameter(
            "l1 normalization needs finite non-negative values".into(),
        ));
    }
    let norm = map.sum();
    if norm.is_zero() {
        return Err(Error::ZeroMap { what: "relevance" });
    }
    Ok(map.map(|v| v / norm))
}

/// `1 - R`.
pub fn irrelevance<S: Scalar>(map: &RelevanceMap<S>) -> RelevanceMap<S> {
    RelevanceMap {
        values: map.values.map(|v| S::one() - v),
        stage: map.stage,
        normalized: map.normalized,
    }
}

/// Multiplies a normalized map by the sign of the gradient (`sign(0) = 0`).
///
/// `r_norm` is either image-shaped or a spatial `[H, W]` map, which is then
/// applied to every channel.
pub fn direct<S: Scalar>(r_norm: &Tensor<S>, grad: &Tensor<S>) -> Result<DirectedRelevance<S>> {
    let plane = r_norm.len();
    let spatial_match = grad.shape().len() == 3 && r_norm.shape() == &grad.shape()[1..];
    if r_norm.shape() != grad.shape() && !spatial_match {
        return Err(Error::InputShape {
            expected: grad.shape().to_vec(),
            actual: r_norm.shape().to_vec(),
        });
    }
    let r = r_norm.data();
    Ok(DirectedRelevance {
        values: Tensor::from_fn(grad.shape(), |i| r[i % plane] * grad.data()[i].sign()),
    })
}

/// `x + dir * eps`, optionally clipped to `[0, 1]`.
pub fn perturb<S: Scalar>(
    image: &Tensor<S>,
    dir: &DirectedRelevance<S>,
    eps: f64,
    clip: bool,
) -> Tensor<S> {
    let e = S::of(eps);
    image.zip_map(&dir.values, |x, d| {
        let v = x + d * e;
        if clip {
            v.max(S::zero()).min(S::one())
        } else {
            v
        }
    })
}

/// Smallest `k` in `[1, cap]` whose perturbation `k * step` changes the
/// predicted class away from `reference`; `(cap, capped)` if none does.
pub fn find_epsilon<S: Scalar>(
    net: &Network<S>,
    image: &Tensor<S>,
    reference: usize,
    dir: &DirectedRelevance<S>,
    config: &SearchConfig,
) -> Result<EpsilonSearch> {
    config.validate()?;
    if dir.values.shape() != image.shape() {
        return Err(Error::InputShape {
            expected: image.shape().to_vec(),
            actual: dir.values.shape().to_vec(),
        });
    }
    let actual = net.predict(image)?;
    if actual != reference {
        return Err(Error::ReferenceMismatch {
            expected: reference,
            actual,
        });
    }
    let flips = |k: u64| -> Result<bool> {
        let x = perturb(image, dir, k as f64 * config.step, config.clip);
        Ok(net.predict(&x)? != reference)
    };
    let cap = config.cap;
    let capped = EpsilonSearch {
        steps: cap,
        capped: true,
    };

    match config.strategy {
        SearchStrategy::Linear => {
            for k in 1..=cap {
                if flips(k)? {
                    return Ok(EpsilonSearch {
                        steps: k,
                        capped: false,
                    });
                }
            }
            Ok(capped)
        }
        SearchStrategy::Bracketed => {
            // Invariant: `lo` does not flip (0 is the unperturbed image), `hi` does.
            let mut lo = 0u64;
            let mut k = 1u64;
            let mut hi = loop {
                if k >= cap {
                    if flips(cap)? {
                        break cap;
                    }
                    return Ok(capped);
                }
                if flips(k)? {
                    break k;
                }
                lo = k;
                k = k.saturating_mul(2);
            };
            while hi - lo > 1 {
                let mid = lo + (hi - lo) / 2;
                if flips(mid)? {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            Ok(EpsilonSearch {
                steps: hi,
                capped: false,
            })
        }
    }
}

/// Gap for one image with a precomputed loss gradient at the unperturbed image.
pub fn gap_with_gradient<S: Scalar>(
    net: &Network<S>,
    image: &Tensor<S>,
    reference: usize,
    map: &RelevanceMap<S>,
    grad: &Tensor<S>,
    config: &SearchConfig,
) -> Result<GapResult> {
    let rel = normalize_l1(&map.values)?;
    let irr = normalize_l1(&irrelevance(map).values).map_err(|e| match e {
        Error::ZeroMap { .. } => Error::ZeroMap {
            what: "irrelevance",
        },
        other => other,
    })?;
    let minus = find_epsilon(net, image, reference, &direct(&rel, grad)?, config)?;
    let plus = find_epsilon(net, image, reference, &direct(&irr, grad)?, config)?;
    Ok(GapResult::new(minus, plus, config.step))
}

/// `eps_plus - eps_minus` for one image. `reference` is the class the model
/// predicts for the unperturbed image; the gradient sign is taken once, at
/// the unperturbed image.
pub fn gap<S: Scalar>(
    net: &Network<S>,
    image: &Tensor<S>,
    reference: usize,
    map: &RelevanceMap<S>,
    config: &SearchConfig,
) -> Result<GapResult> {
    let grad = net.input_gradient(image, reference)?;
    gap_with_gradient(net, image, reference, map, &grad, config)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApemSummary {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

/// Mean gap over images, with median and quartiles. Capped searches are
/// not measurements and are left out.
pub fn apem(gaps: &[GapResult]) -> Result<ApemSummary> {
    let mut v: Vec<f64> = gaps
        .iter()
        .filter(|g| !(g.capped_minus || g.capped_plus))
        .map(|g| g.gap as f64)
        .collect();
    if v.is_empty() {
        return Err(Error::InvalidParameter(
            "apem needs at least one uncapped gap".into(),
        ));
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.sort_by(f64::total_cmp);
    Ok(ApemSummary {
        n: v.len(),
        mean,
        median: quantile_sorted(&v, 0.5),
        q1: quantile_sorted(&v, 0.25),
        q3: quantile_sorted(&v, 0.75),
    })
}

/// Seeded uniform permutation of the map's pixels.
pub fn shuffle_map<S: Scalar>(map: &RelevanceMap<S>, seed: u64) -> RelevanceMap<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = map.values.clone();
    values.data_mut().shuffle(&mut rng);
    RelevanceMap {
        values,
        stage: map.stage,
        normalized: map.normalized,
    }
}
