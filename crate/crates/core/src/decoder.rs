//! Pointwise equivariant decoder: `C′×3` descriptor → one 3D point.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::params::{join, Parameterized};
use crate::vn::{BlockCache, VectorFeature, VnBlock, VnLinear};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub local_channels: usize,
    pub hidden: Vec<usize>,
}

impl DecoderConfig {
    pub fn full() -> Self {
        Self {
            local_channels: 64,
            hidden: vec![128, 64, 32],
        }
    }

    pub fn test() -> Self {
        Self {
            local_channels: 8,
            hidden: vec![8, 4],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.local_channels == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("decoder widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub blocks: Vec<VnBlock>,
    pub output: VnLinear,
}

#[derive(Debug, Clone)]
pub struct DecoderCache {
    inputs: Vec<VectorFeature>,
    blocks: Vec<BlockCache>,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(config: DecoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::with_capacity(config.hidden.len());
        let mut width = config.local_channels;
        for &w in &config.hidden {
            blocks.push(VnBlock::new(width, w, rng));
            width = w;
        }
        let output = VnLinear::new(width, 1, rng);
        Ok(Self { config, blocks, output })
    }

    /// Decodes descriptor `i` into output point `i`.
    pub fn decode(&self, descriptors: &VectorFeature) -> Result<Vec<Point>> {
        self.forward(descriptors).map(|(p, _)| p)
    }

    pub fn forward(&self, descriptors: &VectorFeature) -> Result<(Vec<Point>, DecoderCache)> {
        if descriptors.channels() != self.config.local_channels {
            return Err(Error::shape(
                "decoder input channels",
                self.config.local_channels,
                descriptors.channels(),
            ));
        }
        let mut inputs = vec![descriptors.clone()];
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, cache) = block.forward(inputs.last().expect("non-empty"))?;
            inputs.push(y);
            caches.push(cache);
        }
        let out = self.output.forward(inputs.last().expect("non-empty"))?;
        if !out.is_finite() {
            return Err(Error::numerical("decoder", "non-finite output point"));
        }
        Ok((out.to_points()?, DecoderCache { inputs, blocks: caches }))
    }

    /// Returns `dL/d descriptors` and accumulates parameter gradients.
    pub fn backward(&self, cache: &DecoderCache, grad_points: &[Point], grad: &mut Decoder) -> VectorFeature {
        let mut g = VectorFeature::from_points(grad_points);
        let last = cache.inputs.last().expect("non-empty");
        g = self.output.backward(last, &g, &mut grad.output);
        for (b, block) in self.blocks.iter().enumerate().rev() {
            g = block.backward(&cache.inputs[b], &cache.blocks[b], &g, &mut grad.blocks[b]);
        }
        g
    }

    pub(crate) fn all_linears_mut(&mut self) -> Vec<(String, &mut VnLinear)> {
        let mut out: Vec<(String, &mut VnLinear)> = self
            .blocks
            .iter_mut()
            .enumerate()
            .map(|(i, b)| (format!("decoder.block{i}.linear"), &mut b.linear))
            .collect();
        out.push(("decoder.output".into(), &mut self.output));
        out
    }
}

impl Parameterized for Decoder {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_params(&join(prefix, &format!("block{i}")), f);
        }
        self.output.visit_params(&join(prefix, "output"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params_mut(&join(prefix, &format!("block{i}")), f);
        }
        self.output.visit_params_mut(&join(prefix, "output"), f);
    }
}
