//! Named parameter traversal shared by layers, optimizer and checkpoints.
//!
//! Every trainable tensor is an `Array2<f64>`. Gradients are stored in a
//! value of the same type as the model, so traversal order lines up.

use ndarray::Array2;
use rand::Rng;

pub trait Parameterized {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2<f64>));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<f64>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.len());
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params("", &mut |name, _| names.push(name.to_owned()));
        names
    }

    fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit_params("", &mut |_, p| out.extend(p.iter().copied()));
        out
    }

    /// Overwrites parameters from a flat vector in traversal order.
    fn assign_flat(&mut self, values: &[f64]) {
        let mut offset = 0;
        self.visit_params_mut("", &mut |_, p| {
            for v in p.iter_mut() {
                *v = values[offset];
                offset += 1;
            }
        });
        assert_eq!(offset, values.len(), "flat parameter length mismatch");
    }

    fn zero_params(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.fill(0.0));
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.zero_params();
        z
    }

    /// `self += scale · other`, parameter by parameter.
    fn add_scaled(&mut self, other: &Self, scale: f64)
    where
        Self: Sized,
    {
        let mut flat = Vec::new();
        other.visit_params("", &mut |_, p| flat.extend(p.iter().copied()));
        let mut offset = 0;
        self.visit_params_mut("", &mut |_, p| {
            for v in p.iter_mut() {
                *v += scale * flat[offset];
                offset += 1;
            }
        });
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_owned()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Zero-mean uniform init on `[-bound, bound]`.
pub(crate) fn uniform_init<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..=bound))
}

/// He-uniform bound `√(6 / fan_in)`, which keeps activation energy roughly
/// constant through rectifying layers.
pub(crate) fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in.max(1) as f64).sqrt()
}

/// Glorot-uniform bound `√(6 / (fan_in + fan_out))`, for tanh layers.
pub(crate) fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out).max(1) as f64).sqrt()
}
