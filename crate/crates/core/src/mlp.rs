//! Plain multi-layer perceptron on invariant (rotation-free) inputs.

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{glorot_bound, join, uniform_init, Parameterized};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `(out, in)`
    pub weight: Array2<f64>,
    /// `(1, out)`
    pub bias: Array2<f64>,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            weight: uniform_init(outputs, inputs, glorot_bound(inputs, outputs), rng),
            bias: Array2::zeros((1, outputs)),
        }
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }
}

impl Parameterized for Dense {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Dense layers with `tanh` between them; the last layer is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to every layer (post-activation of the previous one).
    inputs: Vec<Array2<f64>>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        Self {
            layers: widths.windows(2).map(|w| Dense::new(w[0], w[1], rng)).collect(),
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("non-empty").weight.nrows()
    }

    /// Rows of `x` are independent samples.
    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, MlpCache)> {
        if x.ncols() != self.input_width() {
            return Err(Error::shape("mlp input", self.input_width(), x.ncols()));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = layer.forward(&h);
            if l < last {
                out.mapv_inplace(f64::tanh);
            }
            inputs.push(h);
            h = out;
        }
        Ok((h, MlpCache { inputs }))
    }

    pub fn backward(&self, cache: &MlpCache, grad_out: &Array2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let mut g = grad_out.to_owned();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &cache.inputs[l];
            grad.layers[l].weight += &g.t().dot(input);
            grad.layers[l].bias += &g.sum_axis(Axis(0)).insert_axis(Axis(0));
            let mut gin = g.dot(&layer.weight);
            if l > 0 {
                // input = tanh(pre) so d/dpre = 1 - input²
                gin.zip_mut_with(input, |gi, &y| *gi *= 1.0 - y * y);
            }
            g = gin;
        }
        g
    }
}

impl Parameterized for Mlp {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit_params(&join(prefix, &format!("layer{i}")), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_params_mut(&join(prefix, &format!("layer{i}")), f);
        }
    }
}
