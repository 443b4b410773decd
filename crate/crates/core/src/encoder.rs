//! Equivariant encoder: global shape descriptor `Z` plus per-point local
//! shape transforms `θᵢ`.
//!
//! Pipeline, for a cloud of `N` points and a fixed k-NN graph on its
//! coordinates:
//!
//! 1. lift: edge conv on raw coordinates,
//! 2. four edge conv stages,
//! 3. concatenation of the stage outputs fused by one `VnLinear`,
//! 4. `Z = W_z · mean_pool(fused)` (C channels),
//! 5. invariant features `Vⁱⁿ = (W_l · fused) · (W_f · [fused, pooled])ᵀ`,
//! 6. `vec(θᵢ) = MLP(vec(vᵢⁱⁿ))`, reshaped to `C′×C`.

use ndarray::{s, Array2, Array3, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{knn_points, Point, Rotation};
use crate::mlp::{Mlp, MlpCache};
use crate::params::{join, Parameterized};
use crate::vn::{
    invariant_product, invariant_product_backward, vn_mean_pool, vn_mean_pool_backward, Aggregation, EdgeConvCache,
    VectorFeature, VnEdgeConv, VnLinear,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// `C`: channels of the global descriptor.
    pub global_channels: usize,
    /// `C′`: channels of local shape descriptors.
    pub local_channels: usize,
    pub k: usize,
    pub lift_channels: usize,
    pub stage_widths: Vec<usize>,
    pub fused_channels: usize,
    pub mlp_hidden: Vec<usize>,
    pub aggregation: Aggregation,
}

impl EncoderConfig {
    pub fn full() -> Self {
        let local = 64;
        Self {
            global_channels: 170,
            local_channels: local,
            k: 20,
            lift_channels: 21,
            stage_widths: vec![64, 64, 128, 256],
            fused_channels: 256,
            mlp_hidden: vec![4 * local * 3; 2],
            aggregation: Aggregation::Mean,
        }
    }

    /// Desk-scale configuration used by tests and the synthetic benchmarks.
    pub fn test() -> Self {
        let local = 8;
        Self {
            global_channels: 16,
            local_channels: local,
            k: 4,
            lift_channels: 3,
            stage_widths: vec![8, 8, 16, 32],
            fused_channels: 32,
            mlp_hidden: vec![4 * local * 3; 2],
            aggregation: Aggregation::Mean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths_ok = self.global_channels > 0
            && self.local_channels > 0
            && self.k > 0
            && self.lift_channels > 0
            && self.fused_channels > 0
            && !self.stage_widths.is_empty()
            && self.stage_widths.iter().all(|&w| w > 0)
            && self.mlp_hidden.iter().all(|&w| w > 0);
        if !widths_ok {
            return Err(Error::Config("encoder widths and k must be positive".into()));
        }
        Ok(())
    }
}

/// `Z`, a `C×3` equivariant matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalShapeDescriptor(pub Array2<f64>);

impl GlobalShapeDescriptor {
    pub fn channels(&self) -> usize {
        self.0.nrows()
    }

    pub fn rotated(&self, r: &Rotation) -> Self {
        let mut m = self.0.clone();
        for mut row in m.rows_mut() {
            let v = r.apply([row[0], row[1], row[2]]);
            row[0] = v[0];
            row[1] = v[1];
            row[2] = v[2];
        }
        Self(m)
    }
}

/// `θᵢ`, a `C′×C` matrix acting on `Z` from the left.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalShapeTransform(pub Array2<f64>);

impl LocalShapeTransform {
    pub fn dims(&self) -> (usize, usize) {
        self.0.dim()
    }
}

/// `θ · Z`: the local shape descriptor, `C′×3`.
pub fn apply_transform(t: &LocalShapeTransform, z: &GlobalShapeDescriptor) -> Result<Array2<f64>> {
    if t.0.ncols() != z.channels() {
        return Err(Error::shape("apply_transform", t.0.ncols(), z.channels()));
    }
    Ok(t.0.dot(&z.0))
}

/// Descriptors `θᵢ · Z` for every point, as a `(C′, N, 3)` feature.
pub fn local_descriptors(transforms: &Array3<f64>, z: &GlobalShapeDescriptor) -> Result<VectorFeature> {
    let (n, cl, c) = transforms.dim();
    if c != z.channels() {
        return Err(Error::shape("local_descriptors", c, z.channels()));
    }
    let mut out = Array3::zeros((cl, n, 3));
    for i in 0..n {
        let d = transforms.slice(s![i, .., ..]).dot(&z.0);
        out.slice_mut(s![.., i, ..]).assign(&d);
    }
    VectorFeature::from_array(out)
}

/// Gradients of [`local_descriptors`]: `(dθ, dZ)`.
pub fn local_descriptors_backward(
    transforms: &Array3<f64>,
    z: &GlobalShapeDescriptor,
    grad_out: &VectorFeature,
) -> (Array3<f64>, Array2<f64>) {
    let (n, cl, c) = transforms.dim();
    let mut g_theta = Array3::zeros((n, cl, c));
    let mut g_z = Array2::zeros((c, 3));
    for i in 0..n {
        let g = grad_out.data().slice(s![.., i, ..]);
        g_theta.slice_mut(s![i, .., ..]).assign(&g.dot(&z.0.t()));
        g_z += &transforms.slice(s![i, .., ..]).t().dot(&g);
    }
    (g_theta, g_z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub z: GlobalShapeDescriptor,
    /// `(N, C′, C)`
    pub transforms: Array3<f64>,
    /// Fused per-point equivariant features (`V^equi`).
    pub equivariant: VectorFeature,
}

impl EncoderOutput {
    pub fn len(&self) -> usize {
        self.transforms.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn transform(&self, i: usize) -> LocalShapeTransform {
        LocalShapeTransform(self.transforms.slice(s![i, .., ..]).to_owned())
    }

    pub fn transform_view(&self, i: usize) -> ArrayView2<'_, f64> {
        self.transforms.slice(s![i, .., ..])
    }

    pub fn descriptors(&self) -> Result<VectorFeature> {
        local_descriptors(&self.transforms, &self.z)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub lift: VnEdgeConv,
    pub stages: Vec<VnEdgeConv>,
    pub fuse: VnLinear,
    pub global_head: VnLinear,
    pub local_head: VnLinear,
    pub frame_head: VnLinear,
    pub theta_mlp: Mlp,
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    neighbors: Vec<Vec<usize>>,
    /// `inputs[0]` is the coordinate feature, `inputs[s+1]` the lift/stage outputs.
    inputs: Vec<VectorFeature>,
    conv_caches: Vec<EdgeConvCache>,
    concat: VectorFeature,
    fused: VectorFeature,
    pooled: VectorFeature,
    local: VectorFeature,
    frame_in: VectorFeature,
    frame: VectorFeature,
    mlp: MlpCache,
}

fn check_finite(stage: &str, f: &VectorFeature) -> Result<()> {
    if f.is_finite() {
        Ok(())
    } else {
        Err(Error::numerical(format!("encoder {stage}"), "non-finite activation"))
    }
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let agg = config.aggregation;
        let lift = VnEdgeConv::new(1, config.lift_channels, agg, rng);
        let mut stages = Vec::with_capacity(config.stage_widths.len());
        let mut width = config.lift_channels;
        for &w in &config.stage_widths {
            stages.push(VnEdgeConv::new(width, w, agg, rng));
            width = w;
        }
        let concat: usize = config.stage_widths.iter().sum();
        let fuse = VnLinear::new(concat, config.fused_channels, rng);
        let global_head = VnLinear::new(config.fused_channels, config.global_channels, rng);
        let local_head = VnLinear::new(config.fused_channels, config.local_channels, rng);
        let frame_head = VnLinear::new(2 * config.fused_channels, 3, rng);
        let mut widths = vec![3 * config.local_channels];
        widths.extend(&config.mlp_hidden);
        widths.push(config.local_channels * config.global_channels);
        let theta_mlp = Mlp::new(&widths, rng);
        Ok(Self {
            config,
            lift,
            stages,
            fuse,
            global_head,
            local_head,
            frame_head,
            theta_mlp,
        })
    }

    pub fn encode(&self, points: &[Point]) -> Result<EncoderOutput> {
        self.forward(points).map(|(out, _)| out)
    }

    pub fn forward(&self, points: &[Point]) -> Result<(EncoderOutput, EncoderCache)> {
        let n = points.len();
        let k = self.config.k;
        if n <= k {
            return Err(Error::invalid(format!(
                "encoder needs more points than neighbours (N = {n}, k = {k})"
            )));
        }
        let neighbors = knn_points(points, k)?;

        let mut inputs = vec![VectorFeature::from_points(points)];
        let mut conv_caches = Vec::with_capacity(1 + self.stages.len());
        for (s, conv) in std::iter::once(&self.lift).chain(&self.stages).enumerate() {
            let (y, cache) = conv.forward(inputs.last().expect("non-empty"), &neighbors)?;
            check_finite(&format!("edge conv {s}"), &y)?;
            inputs.push(y);
            conv_caches.push(cache);
        }
        let stage_outputs: Vec<&VectorFeature> = inputs[2..].iter().collect();
        let concat = VectorFeature::concat_channels(&stage_outputs)?;
        let fused = self.fuse.forward(&concat)?;
        check_finite("fusion", &fused)?;
        let pooled = vn_mean_pool(&fused)?;
        let z_feat = self.global_head.forward(&pooled)?;
        let z = GlobalShapeDescriptor(
            z_feat
                .data()
                .clone()
                .into_shape_with_order((self.config.global_channels, 3))
                .expect("one point"),
        );

        let local = self.local_head.forward(&fused)?;
        let frame_in = VectorFeature::concat_channels(&[&fused, &pooled.broadcast_points(n)?])?;
        let frame = self.frame_head.forward(&frame_in)?;
        let invariant = invariant_product(&local, &frame)?;

        let cl = self.config.local_channels;
        let flat = invariant
            .data()
            .clone()
            .into_shape_with_order((n, 3 * cl))
            .expect("standard layout");
        let (theta_flat, mlp) = self.theta_mlp.forward(&flat)?;
        if theta_flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(
                "encoder transform mlp",
                "non-finite transform parameters",
            ));
        }
        let transforms = theta_flat
            .into_shape_with_order((n, cl, self.config.global_channels))
            .expect("standard layout");

        let out = EncoderOutput {
            z,
            transforms,
            equivariant: fused.clone(),
        };
        let cache = EncoderCache {
            neighbors,
            inputs,
            conv_caches,
            concat,
            fused,
            pooled,
            local,
            frame_in,
            frame,
            mlp,
        };
        Ok((out, cache))
    }

    /// Accumulates parameter gradients given `dL/dZ` and `dL/dθ`.
    pub fn backward(&self, cache: &EncoderCache, grad_z: &Array2<f64>, grad_theta: &Array3<f64>, grad: &mut Encoder) {
        let n = cache.fused.points();
        let (c, cl) = (self.config.global_channels, self.config.local_channels);
        let fc = self.config.fused_channels;

        let g_flat = grad_theta
            .to_owned()
            .into_shape_with_order((n, cl * c))
            .expect("standard layout");
        let g_inv = self
            .theta_mlp
            .backward(&cache.mlp, &g_flat, &mut grad.theta_mlp)
            .into_shape_with_order((n, cl, 3))
            .expect("standard layout");
        let (g_local, g_frame) = invariant_product_backward(&cache.local, &cache.frame, &g_inv);

        let g_frame_in = self
            .frame_head
            .backward(&cache.frame_in, &g_frame, &mut grad.frame_head);
        let parts = g_frame_in.split_channels(&[fc, fc]);
        let mut g_fused = parts[0].clone();
        let mut g_pooled = parts[1].data().sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1));

        let g_from_local = self.local_head.backward(&cache.fused, &g_local, &mut grad.local_head);
        *g_fused.data_mut() += g_from_local.data();

        let g_zfeat = VectorFeature::from_matrix(grad_z).expect("C×3 gradient");
        let g_pool_head = self
            .global_head
            .backward(&cache.pooled, &g_zfeat, &mut grad.global_head);
        g_pooled += g_pool_head.data();
        let g_pooled = VectorFeature::from_array(g_pooled).expect("3-vectors");
        *g_fused.data_mut() += vn_mean_pool_backward(n, &g_pooled).data();

        let g_concat = self.fuse.backward(&cache.concat, &g_fused, &mut grad.fuse);
        let mut stage_grads = g_concat.split_channels(&self.config.stage_widths);

        // Walk stages backwards; stage s consumes inputs[s+1] and produces inputs[s+2].
        let mut carry: Option<VectorFeature> = None;
        for s in (0..self.stages.len()).rev() {
            let mut g_out = stage_grads.pop().expect("one grad per stage");
            if let Some(c) = carry.take() {
                *g_out.data_mut() += c.data();
            }
            let g_in = self.stages[s].backward(
                &cache.inputs[s + 1],
                &cache.neighbors,
                &cache.conv_caches[s + 1],
                &g_out,
                &mut grad.stages[s],
            );
            carry = Some(g_in);
        }
        let g_lift = carry.expect("at least one stage");
        self.lift.backward(
            &cache.inputs[0],
            &cache.neighbors,
            &cache.conv_caches[0],
            &g_lift,
            &mut grad.lift,
        );
    }

    pub(crate) fn all_linears_mut(&mut self) -> Vec<(String, &mut VnLinear)> {
        let mut out: Vec<(String, &mut VnLinear)> = vec![("encoder.lift.linear".into(), &mut self.lift.block.linear)];
        for (i, s) in self.stages.iter_mut().enumerate() {
            out.push((format!("encoder.stage{i}.linear"), &mut s.block.linear));
        }
        out.push(("encoder.fuse".into(), &mut self.fuse));
        out.push(("encoder.global_head".into(), &mut self.global_head));
        out.push(("encoder.local_head".into(), &mut self.local_head));
        out.push(("encoder.frame_head".into(), &mut self.frame_head));
        out
    }
}

impl Parameterized for Encoder {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        self.lift.visit_params(&join(prefix, "lift"), f);
        for (i, s) in self.stages.iter().enumerate() {
            s.visit_params(&join(prefix, &format!("stage{i}")), f);
        }
        self.fuse.visit_params(&join(prefix, "fuse"), f);
        self.global_head.visit_params(&join(prefix, "global_head"), f);
        self.local_head.visit_params(&join(prefix, "local_head"), f);
        self.frame_head.visit_params(&join(prefix, "frame_head"), f);
        self.theta_mlp.visit_params(&join(prefix, "theta_mlp"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        self.lift.visit_params_mut(&join(prefix, "lift"), f);
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_params_mut(&join(prefix, &format!("stage{i}")), f);
        }
        self.fuse.visit_params_mut(&join(prefix, "fuse"), f);
        self.global_head.visit_params_mut(&join(prefix, "global_head"), f);
        self.local_head.visit_params_mut(&join(prefix, "local_head"), f);
        self.frame_head.visit_params_mut(&join(prefix, "frame_head"), f);
        self.theta_mlp.visit_params_mut(&join(prefix, "theta_mlp"), f);
    }
}
