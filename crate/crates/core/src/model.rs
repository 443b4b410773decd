//! Encoder and decoder bundled, with self- and cross-reconstruction.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{local_descriptors, Encoder, EncoderConfig, EncoderOutput, GlobalShapeDescriptor};
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::params::{join, Parameterized};
use crate::vn::VnLinear;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn full() -> Self {
        Self {
            encoder: EncoderConfig::full(),
            decoder: DecoderConfig::full(),
        }
    }

    pub fn test() -> Self {
        Self {
            encoder: EncoderConfig::test(),
            decoder: DecoderConfig::test(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.encoder.local_channels != self.decoder.local_channels {
            return Err(Error::Config(format!(
                "encoder C′ = {} but decoder expects {}",
                self.encoder.local_channels, self.decoder.local_channels
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Model {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            encoder: Encoder::new(config.encoder.clone(), &mut rng)?,
            decoder: Decoder::new(config.decoder.clone(), &mut rng)?,
        })
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.config.clone(),
            decoder: self.decoder.config.clone(),
        }
    }

    pub fn encode(&self, points: &[Point]) -> Result<EncoderOutput> {
        self.encoder.encode(points)
    }

    pub fn self_reconstruct(&self, points: &[Point]) -> Result<Vec<Point>> {
        let enc = self.encode(points)?;
        self.reconstruct_from(&enc, &enc.z)
    }

    /// Decodes `source`'s transforms applied to `target_z`. The result has
    /// `source`'s indexing and the pose carried by `target_z`.
    pub fn reconstruct_from(&self, source: &EncoderOutput, target_z: &GlobalShapeDescriptor) -> Result<Vec<Point>> {
        self.decoder.decode(&local_descriptors(&source.transforms, target_z)?)
    }

    /// Names of every equivariant linear map, for fault injection.
    pub fn linear_layer_names(&self) -> Vec<String> {
        let mut m = self.clone();
        m.linears_mut().into_iter().map(|(n, _)| n).collect()
    }

    pub(crate) fn linears_mut(&mut self) -> Vec<(String, &mut VnLinear)> {
        let mut out = self.encoder.all_linears_mut();
        out.extend(self.decoder.all_linears_mut());
        out
    }

    /// Adds a non-equivariant bias to the named linear layer. Debug only.
    pub fn inject_bias(&mut self, layer: &str, bias: Point) -> Result<()> {
        let mut found = false;
        for (name, lin) in self.linears_mut() {
            if name == layer {
                lin.debug_bias = Some(bias);
                found = true;
            }
        }
        if found {
            Ok(())
        } else {
            Err(Error::Config(format!("no linear layer named '{layer}'")))
        }
    }
}

/// `cross_reconstruct(A's transforms, B's Z)`.
pub fn cross_reconstruct(
    model: &Model,
    source: &EncoderOutput,
    target_z: &GlobalShapeDescriptor,
) -> Result<Vec<Point>> {
    let (_, _, c) = source.transforms.dim();
    if c != target_z.channels() {
        return Err(Error::shape("cross_reconstruct", c, target_z.channels()));
    }
    model.reconstruct_from(source, target_z)
}

impl Parameterized for Model {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        self.encoder.visit_params(&join(prefix, "encoder"), f);
        self.decoder.visit_params(&join(prefix, "decoder"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        self.encoder.visit_params_mut(&join(prefix, "encoder"), f);
        self.decoder.visit_params_mut(&join(prefix, "decoder"), f);
    }
}
