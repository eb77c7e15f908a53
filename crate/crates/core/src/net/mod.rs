//! Feed-forward network engine: inference, cross-entropy loss, and exact
//! input gradients by backpropagation.
//!
//! Images are `[channels, height, width]` tensors. A network is an ordered
//! list of layers whose shapes are checked to compose at construction time;
//! the last layer is always dense and produces the class logits.

mod io;
mod layer;
mod train;

pub use io::{decode_model, encode_model, load_model, save_model, MODEL_FORMAT_VERSION};
pub use layer::{Layer, LayerSpec, ReluRule};
pub use train::{accuracy, train, TrainConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Two conv blocks and a dense classifier for `[1, size, size]` inputs:
/// conv3x3(4) relu pool2, conv3x3(8) relu pool2, flatten, dense(classes).
pub fn desk_cnn_specs(channels: usize, size: usize, classes: usize) -> Vec<LayerSpec> {
    let conv = |i, o| LayerSpec::Conv2d {
        in_channels: i,
        out_channels: o,
        kernel: 3,
        stride: 1,
        padding: 1,
    };
    let pool = LayerSpec::MaxPool2d { size: 2, stride: 2 };
    let side = size / 2 / 2;
    vec![
        conv(channels, 4),
        LayerSpec::Relu,
        pool,
        conv(4, 8),
        LayerSpec::Relu,
        pool,
        LayerSpec::Flatten,
        LayerSpec::Dense {
            inputs: 8 * side * side,
            outputs: classes,
        },
    ]
}

/// Output of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<S> {
    pub logits: Tensor<S>,
    pub probabilities: Tensor<S>,
    pub predicted_class: usize,
    pub confidence: S,
}

impl<S: Scalar> Prediction<S> {
    pub fn from_logits(logits: Tensor<S>) -> Self {
        let probabilities = softmax(&logits);
        let predicted_class = probabilities.argmax();
        let confidence = probabilities.data()[predicted_class];
        Self {
            logits,
            probabilities,
            predicted_class,
            confidence,
        }
    }

    pub fn classes(&self) -> usize {
        self.logits.len()
    }

    /// Cross-entropy `-ln p[label]`.
    pub fn loss(&self, label: usize) -> Result<S> {
        let p = self
            .probabilities
            .data()
            .get(label)
            .ok_or(Error::LabelOutOfRange {
                label,
                classes: self.classes(),
            })?;
        // -ln(1) is -0.0; report it as 0.
        Ok(S::zero() - p.ln())
    }
}

/// Softmax with max-subtraction.
pub fn softmax<S: Scalar>(logits: &Tensor<S>) -> Tensor<S> {
    let m = logits
        .data()
        .iter()
        .copied()
        .fold(S::neg_infinity(), S::max);
    let e = logits.map(|v| (v - m).exp());
    let total = e.sum();
    e.map(|v| v / total)
}

/// Activations recorded during a forward pass: `values[0]` is the input,
/// `values[i + 1]` the output of layer `i`.
#[derive(Debug, Clone)]
pub struct ForwardTrace<S> {
    pub values: Vec<Tensor<S>>,
}

impl<S: Scalar> ForwardTrace<S> {
    pub fn logits(&self) -> &Tensor<S> {
        self.values.last().expect("trace holds at least the input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<S> {
    input_shape: Vec<usize>,
    layers: Vec<Layer<S>>,
    /// `shapes[i]` is the input shape of layer `i`; the last entry is `[classes]`.
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Network<S> {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer<S>>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::LayerGraph(format!(
                "input shape {input_shape:?} must have positive dimensions"
            )));
        }
        match layers.last().map(|l| l.spec()) {
            Some(LayerSpec::Dense { .. }) => {}
            Some(other) => {
                return Err(Error::LayerGraph(format!(
                    "final layer must be dense, found {}",
                    other.kind_name()
                )))
            }
            None => return Err(Error::LayerGraph("network has no layers".into())),
        }
        let mut shapes = vec![input_shape.clone()];
        for (i, layer) in layers.iter().enumerate() {
            let next = layer
                .spec()
                .output_shape(shapes.last().unwrap())
                .map_err(|e| Error::LayerGraph(format!("layer {i}: {e}")))?;
            shapes.push(next);
        }
        Ok(Self {
            input_shape,
            layers,
            shapes,
        })
    }

    /// He-uniform weights and zero biases drawn from a seeded stream.
    pub fn random(input_shape: Vec<usize>, specs: &[LayerSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = specs
            .iter()
            .map(|&spec| {
                let mut layer = Layer::zeroed(spec);
                if let Some((ws, _)) = spec.param_shapes() {
                    let fan_in: usize = ws[1..].iter().product();
                    let limit = (6.0 / fan_in as f64).sqrt();
                    for w in layer.weight_mut().data_mut() {
                        *w = S::of(rng.random_range(-limit..limit));
                    }
                }
                layer
            })
            .collect();
        Self::new(input_shape, layers)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer<S>] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer<S>] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| *l.spec()).collect()
    }

    /// Input shape of layer `i` (or the logits shape for `i == layers.len()`).
    pub fn shape_at(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn classes(&self) -> usize {
        self.shapes.last().unwrap()[0]
    }

    pub fn last_conv_index(&self) -> Option<usize> {
        self.layers.iter().rposition(|l| l.spec().is_conv())
    }

    fn check_input(&self, image: &Tensor<S>) -> Result<()> {
        if image.shape() != self.input_shape.as_slice() {
            return Err(Error::InputShape {
                expected: self.input_shape.clone(),
                actual: image.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.classes() {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.classes(),
            });
        }
        Ok(())
    }

    pub fn trace(&self, image: &Tensor<S>) -> Result<ForwardTrace<S>> {
        self.check_input(image)?;
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(image.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer.forward(values.last().unwrap(), &self.shapes[i + 1]);
            values.push(next);
        }
        Ok(ForwardTrace { values })
    }

    pub fn logits(&self, image: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_input(image)?;
        let mut x = image.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x, &self.shapes[i + 1]);
        }
        Ok(x)
    }

    pub fn forward(&self, image: &Tensor<S>) -> Result<Prediction<S>> {
        Ok(Prediction::from_logits(self.logits(image)?))
    }

    pub fn predict(&self, image: &Tensor<S>) -> Result<usize> {
        Ok(self.forward(image)?.predicted_class)
    }

    /// Backpropagates `grad` from the output of layer `top - 1` down to the
    /// input of layer `bottom`.
    pub fn backward_range(
        &self,
        trace: &ForwardTrace<S>,
        mut grad: Tensor<S>,
        bottom: usize,
        top: usize,
        rule: ReluRule,
    ) -> Tensor<S> {
        for i in (bottom..top).rev() {
            grad = self.layers[i].backward(&trace.values[i], &grad, rule);
        }
        grad
    }

    /// `d(-ln p[label]) / d(logits)` for a recorded trace.
    fn loss_logit_grad(&self, trace: &ForwardTrace<S>, label: usize) -> Tensor<S> {
        let mut g = softmax(trace.logits());
        let gd = g.data_mut();
        gd[label] = gd[label] - S::one();
        g
    }

    /// Exact gradient of the cross-entropy loss with respect to the input image.
    pub fn input_gradient(&self, image: &Tensor<S>, label: usize) -> Result<Tensor<S>> {
        self.loss_gradient(image, label, ReluRule::Standard)
    }

    /// As [`input_gradient`](Self::input_gradient), with negative backward
    /// signals additionally zeroed at every relu.
    pub fn guided_input_gradient(&self, image: &Tensor<S>, label: usize) -> Result<Tensor<S>> {
        self.loss_gradient(image, label, ReluRule::Guided)
    }

    fn loss_gradient(&self, image: &Tensor<S>, label: usize, rule: ReluRule) -> Result<Tensor<S>> {
        self.check_label(label)?;
        let trace = self.trace(image)?;
        let g = self.loss_logit_grad(&trace, label);
        let grad = self.backward_range(&trace, g, 0, self.layers.len(), rule);
        if !grad.is_finite() {
            return Err(Error::NonFinite("input gradient"));
        }
        Ok(grad)
    }

    /// Activation of conv layer `layer_index` and the gradient of the
    /// predicted-class logit with respect to it.
    pub fn feature_map_gradient(
        &self,
        image: &Tensor<S>,
        layer_index: usize,
    ) -> Result<(Tensor<S>, Tensor<S>)> {
        match self.layers.get(layer_index) {
            Some(l) if l.spec().is_conv() => {}
            _ => return Err(Error::NotConvLayer { index: layer_index }),
        }
        let trace = self.trace(image)?;
        let class = softmax(trace.logits()).argmax();
        let mut seed = Tensor::zeros(trace.logits().shape());
        seed.data_mut()[class] = S::one();
        let grad = self.backward_range(
            &trace,
            seed,
            layer_index + 1,
            self.layers.len(),
            ReluRule::Standard,
        );
        let activation = trace.values[layer_index + 1].clone();
        Ok((activation, grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(w: &[f64], b: &[f64], inputs: usize, outputs: usize) -> Layer<f64> {
        Layer::new(
            LayerSpec::Dense { inputs, outputs },
            Tensor::from_f64(&[outputs, inputs], w).unwrap(),
            Tensor::from_f64(&[outputs], b).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn identity_dense_forward() {
        let net = Network::new(
            vec![2],
            vec![dense(&[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0], 2, 2)],
        )
        .unwrap();
        let x = Tensor::from_f64(&[2], &[2.0, 1.0]).unwrap();
        let p = net.forward(&x).unwrap();
        assert_eq!(p.logits.data(), &[2.0, 1.0]);
        assert_eq!(p.predicted_class, 0);
    }

    #[test]
    fn equal_logits_pick_lowest_class() {
        let p = Prediction::from_logits(Tensor::<f64>::from_f64(&[2], &[0.5, 0.5]).unwrap());
        assert_eq!(p.predicted_class, 0);
        assert_eq!(p.confidence, 0.5);
    }

    #[test]
    fn loss_values() {
        let p = Prediction::from_logits(Tensor::<f64>::from_f64(&[2], &[0.0, 0.0]).unwrap());
        assert!((p.loss(1).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(matches!(p.loss(2), Err(Error::LabelOutOfRange { .. })));
        let sure = Prediction {
            logits: Tensor::<f64>::zeros(&[2]),
            probabilities: Tensor::from_f64(&[2], &[1.0, 0.0]).unwrap(),
            predicted_class: 0,
            confidence: 1.0,
        };
        assert_eq!(sure.loss(0).unwrap(), 0.0);
        assert!(sure.loss(0).unwrap().is_sign_positive());
    }

    #[test]
    fn loss_is_neg_ln_confidence_for_predicted_label() {
        let p = Prediction::from_logits(Tensor::<f64>::from_f64(&[3], &[0.3, 2.0, -1.0]).unwrap());
        assert_eq!(p.loss(p.predicted_class).unwrap(), -p.confidence.ln());
    }

    #[test]
    fn dense_gradient_closed_form() {
        // J = -ln softmax(Wx)[label]; dJ/dx = W^T (p - onehot)
        let w = [1.0, -2.0, 0.5, 3.0];
        let net = Network::new(vec![2], vec![dense(&w, &[0.0, 0.0], 2, 2)]).unwrap();
        let x = Tensor::from_f64(&[2], &[0.2, -0.7]).unwrap();
        let p = net.forward(&x).unwrap().probabilities;
        let d = [p.data()[0], p.data()[1] - 1.0];
        let expected = [w[0] * d[0] + w[2] * d[1], w[1] * d[0] + w[3] * d[1]];
        let g = net.input_gradient(&x, 1).unwrap();
        for (a, b) in g.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let net = Network::new(vec![2], vec![dense(&[1.0; 4], &[0.0; 2], 2, 2)]).unwrap();
        let err = net.forward(&Tensor::zeros(&[3])).unwrap_err();
        assert!(matches!(err, Error::InputShape { .. }));
    }

    #[test]
    fn final_layer_must_be_dense() {
        let err = Network::<f64>::new(vec![2], vec![Layer::zeroed(LayerSpec::Relu)]).unwrap_err();
        assert!(matches!(err, Error::LayerGraph(_)));
    }

    #[test]
    fn feature_map_gradient_rejects_non_conv() {
        let net = Network::new(vec![2], vec![dense(&[1.0; 4], &[0.0; 2], 2, 2)]).unwrap();
        assert!(matches!(
            net.feature_map_gradient(&Tensor::zeros(&[2]), 0),
            Err(Error::NotConvLayer { index: 0 })
        ));
    }
}
