//! Gap-preserving map cleanup: repeatedly zero the smallest nonzero
//! relevance values while the per-image gap does not drop.

use serde::{Deserialize, Serialize};

use crate::apem::{gap_with_gradient, SearchConfig};
use crate::error::{Error, Result};
use crate::explain::RelevanceMap;
use crate::net::Network;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Share of the current nonzero pixels zeroed per iteration (at least one).
    pub batch_fraction: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            batch_fraction: 0.05,
        }
    }
}

/// One zeroing step. `gap` is empty when the step left an all-zero map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterStep {
    pub iteration: usize,
    pub threshold: f64,
    pub zeroed_count: usize,
    pub gap: Option<i64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterTrace<S> {
    pub iterations: Vec<FilterStep>,
    pub final_map: RelevanceMap<S>,
    pub original_gap: i64,
    pub final_gap: i64,
    /// Whether the last step in `iterations` was undone.
    pub reverted: bool,
}

/// Zeroes the `batch_fraction` smallest nonzero values (ties at the
/// threshold included) until a step makes the gap strictly smaller than the
/// best so far; that step is undone. A step that would zero the whole map
/// has no defined gap and is undone as well.
pub fn filter_map<S: Scalar>(
    net: &Network<S>,
    image: &Tensor<S>,
    reference: usize,
    map: &RelevanceMap<S>,
    search: &SearchConfig,
    config: &FilterConfig,
) -> Result<FilterTrace<S>> {
    if !(config.batch_fraction > 0.0 && config.batch_fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "batch fraction {} must be in (0, 1]",
            config.batch_fraction
        )));
    }
    let grad = net.input_gradient(image, reference)?;
    let original_gap = match gap_with_gradient(net, image, reference, map, &grad, search) {
        Ok(g) => g.gap,
        Err(e @ Error::ZeroMap { .. }) => return Err(Error::FilterInapplicable(Box::new(e))),
        Err(e) => return Err(e),
    };

    let mut current = map.clone();
    let mut best = original_gap;
    let mut iterations = Vec::new();
    let mut reverted = false;

    loop {
        let mut nonzero: Vec<S> = current
            .values
            .data()
            .iter()
            .copied()
            .filter(|v| !v.is_zero())
            .collect();
        if nonzero.is_empty() {
            break;
        }
        nonzero.sort_by(|a, b| a.partial_cmp(b).expect("finite relevance"));
        let batch = ((config.batch_fraction * nonzero.len() as f64).floor() as usize).max(1);
        let threshold = nonzero[batch - 1];

        let mut candidate = current.clone();
        let mut zeroed = 0;
        for v in candidate.values.data_mut() {
            if !v.is_zero() && *v <= threshold {
                *v = S::zero();
                zeroed += 1;
            }
        }
        let step_gap = match gap_with_gradient(net, image, reference, &candidate, &grad, search) {
            Ok(g) => Some(g.gap),
            Err(Error::ZeroMap { .. }) => None,
            Err(e) => return Err(e),
        };
        iterations.push(FilterStep {
            iteration: iterations.len() + 1,
            threshold: threshold.as_f64(),
            zeroed_count: zeroed,
            gap: step_gap,
        });
        match step_gap {
            Some(g) if g >= best => {
                best = g;
                current = candidate;
            }
            _ => {
                reverted = true;
                break;
            }
        }
    }

    Ok(FilterTrace {
        iterations,
        final_map: current,
        original_gap,
        final_gap: best,
        reverted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explain::Stage;
    use crate::net::{Layer, LayerSpec};

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    /// Class 1 iff pixel 0 exceeds 0.5; pixels 1..4 are ignored.
    fn net() -> Network<f64> {
        Network::new(
            vec![1, 1, 4],
            vec![
                Layer::new(LayerSpec::Flatten, Tensor::zeros(&[0]), Tensor::zeros(&[0])).unwrap(),
                Layer::new(
                    LayerSpec::Dense {
                        inputs: 4,
                        outputs: 2,
                    },
                    t(&[2, 4], &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]),
                    t(&[2], &[0.0, -0.5]),
                )
                .unwrap(),
            ],
        )
        .unwrap()
    }

    fn search() -> SearchConfig {
        SearchConfig {
            step: 0.01,
            cap: 1000,
            ..SearchConfig::default()
        }
    }

    fn map(v: &[f64]) -> RelevanceMap<f64> {
        RelevanceMap::normalized(t(&[1, 4], v), Stage::Summed).unwrap()
    }

    #[test]
    fn zeroing_irrelevant_pixels_keeps_or_raises_the_gap() {
        let image = t(&[1, 1, 4], &[0.7, 0.2, 0.2, 0.2]);
        let m = map(&[0.9, 0.1, 0.2, 0.3]);
        let cfg = FilterConfig {
            batch_fraction: 0.25,
        };
        let tr = filter_map(&net(), &image, 1, &m, &search(), &cfg).unwrap();
        assert!(tr.final_gap >= tr.original_gap);
        // Only pixel 0 matters, so every distractor can go.
        assert_eq!(tr.final_map.values.data(), &[0.9, 0.0, 0.0, 0.0]);
        // The last step would empty the map.
        assert!(tr.reverted);
        assert_eq!(tr.iterations.last().unwrap().gap, None);
        let again = filter_map(&net(), &image, 1, &tr.final_map, &search(), &cfg).unwrap();
        assert!(again.iterations.len() <= 1);
    }

    #[test]
    fn ties_are_zeroed_together() {
        let image = t(&[1, 1, 4], &[0.7, 0.2, 0.2, 0.2]);
        let m = map(&[0.9, 0.1, 0.1, 0.1]);
        let tr = filter_map(&net(), &image, 1, &m, &search(), &FilterConfig::default()).unwrap();
        assert_eq!(tr.iterations[0].zeroed_count, 3);
        assert_eq!(tr.iterations[0].threshold, 0.1);
    }

    #[test]
    fn all_equal_map_stops_immediately() {
        let image = t(&[1, 1, 4], &[0.7, 0.2, 0.2, 0.2]);
        let m = map(&[0.5; 4]);
        let tr = filter_map(&net(), &image, 1, &m, &search(), &FilterConfig::default()).unwrap();
        assert_eq!(tr.iterations.len(), 1);
        assert!(tr.reverted);
        assert_eq!(tr.final_map, m);
    }

    #[test]
    fn undefined_input_gap_is_rejected() {
        let image = t(&[1, 1, 4], &[0.7, 0.2, 0.2, 0.2]);
        for v in [[0.0; 4], [1.0; 4]] {
            let err = filter_map(
                &net(),
                &image,
                1,
                &map(&v),
                &search(),
                &FilterConfig::default(),
            )
            .unwrap_err();
            assert!(matches!(err, Error::FilterInapplicable(_)), "{err}");
        }
    }

    #[test]
    fn bad_fraction_is_rejected() {
        let image = t(&[1, 1, 4], &[0.7, 0.2, 0.2, 0.2]);
        let cfg = FilterConfig {
            batch_fraction: 0.0,
        };
        assert!(filter_map(&net(), &image, 1, &map(&[0.5; 4]), &search(), &cfg).is_err());
    }
}
