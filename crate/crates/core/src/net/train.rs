use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{softmax, Network, ReluRule};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Seeds the per-epoch shuffling of the sample order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            learning_rate: 0.05,
            batch_size: 8,
            seed: 7,
        }
    }
}

/// Mini-batch SGD on cross-entropy. Works on a copy; `net` is not modified.
pub fn train<S: Scalar>(
    net: &Network<S>,
    samples: &[Sample<S>],
    config: &TrainConfig,
) -> Result<Network<S>> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.batch_size == 0 || !(config.learning_rate.is_finite() && config.learning_rate > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "batch_size {} / learning_rate {} must be positive",
            config.batch_size, config.learning_rate
        )));
    }
    for (i, s) in samples.iter().enumerate() {
        if s.label >= net.classes() {
            return Err(Error::InvalidParameter(format!(
                "sample {i}: label {} out of range for {} classes",
                s.label,
                net.classes()
            )));
        }
    }

    let mut net = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut grads: Vec<(Vec<S>, Vec<S>)> = net
        .layers()
        .iter()
        .map(|l| {
            (
                vec![S::zero(); l.weight().len()],
                vec![S::zero(); l.bias().len()],
            )
        })
        .collect();
    let lr = S::of(config.learning_rate);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            for (dw, db) in grads.iter_mut() {
                dw.iter_mut().for_each(|v| *v = S::zero());
                db.iter_mut().for_each(|v| *v = S::zero());
            }
            for &idx in batch {
                let sample = &samples[idx];
                let trace = net.trace(&sample.image)?;
                let logits = trace.logits();
                let loss = log_sum_exp(logits.data()) - logits.data()[sample.label];
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        sample: idx,
                        loss: loss.as_f64(),
                    });
                }
                let mut g = softmax(logits);
                g.data_mut()[sample.label] = g.data()[sample.label] - S::one();
                for (i, layer) in net.layers().iter().enumerate().rev() {
                    let input = &trace.values[i];
                    if layer.has_params() {
                        let (dw, db) = &mut grads[i];
                        layer.accumulate_param_grads(input, &g, dw, db);
                    }
                    if i > 0 {
                        g = layer.backward(input, &g, ReluRule::Standard);
                    }
                }
            }
            let scale = lr / S::of(batch.len() as f64);
            for (layer, (dw, db)) in net.layers_mut().iter_mut().zip(&grads) {
                for (w, &d) in layer.weight_mut().data_mut().iter_mut().zip(dw) {
                    *w = *w - scale * d;
                }
                for (b, &d) in layer.bias_mut().data_mut().iter_mut().zip(db) {
                    *b = *b - scale * d;
                }
                if !layer.weight().is_finite() || !layer.bias().is_finite() {
                    return Err(Error::NonFinite("parameter update"));
                }
            }
        }
    }
    Ok(net)
}

fn log_sum_exp<S: Scalar>(v: &[S]) -> S {
    let m = v.iter().copied().fold(S::neg_infinity(), S::max);
    m + v.iter().map(|&x| (x - m).exp()).sum::<S>().ln()
}

/// Fraction of samples whose predicted class equals the label.
pub fn accuracy<S: Scalar>(net: &Network<S>, samples: &[Sample<S>]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0usize;
    for s in samples {
        if net.predict(&s.image)? == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}
