//! Vector-neuron layers.
//!
//! A [`VectorFeature`] holds `C` 3-vectors for each of `N` points. Rotations
//! act on the trailing axis, channel mixing acts on the leading axis, so every
//! layer here commutes with rotation by construction. Each layer has an
//! explicit backward pass; forward passes return whatever the backward pass
//! needs.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, Rotation};
use crate::params::{he_bound, join, uniform_init, Parameterized};

/// Guard added to `‖d‖²` in the projection branch of the nonlinearity.
pub const DIRECTION_EPS: f64 = 1e-8;

/// Layout `(channels, points, 3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorFeature {
    data: Array3<f64>,
}

impl VectorFeature {
    pub fn zeros(channels: usize, points: usize) -> Self {
        Self {
            data: Array3::zeros((channels, points, 3)),
        }
    }

    pub fn from_array(data: Array3<f64>) -> Result<Self> {
        if data.shape()[2] != 3 {
            return Err(Error::shape("VectorFeature", "trailing axis 3", data.shape()[2]));
        }
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
        })
    }

    /// One channel holding the coordinates of each point.
    pub fn from_points(points: &[Point]) -> Self {
        let mut data = Array3::zeros((1, points.len(), 3));
        for (i, p) in points.iter().enumerate() {
            for a in 0..3 {
                data[[0, i, a]] = p[a];
            }
        }
        Self { data }
    }

    /// A single `C×3` matrix as a one-point feature.
    pub fn from_matrix(m: &Array2<f64>) -> Result<Self> {
        if m.ncols() != 3 {
            return Err(Error::shape("VectorFeature::from_matrix", "3 columns", m.ncols()));
        }
        let (c, _) = m.dim();
        Ok(Self {
            data: m.to_owned().into_shape_with_order((c, 1, 3)).expect("contiguous"),
        })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn points(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.data
    }

    #[inline]
    pub fn vector(&self, c: usize, i: usize) -> Point {
        [self.data[[c, i, 0]], self.data[[c, i, 1]], self.data[[c, i, 2]]]
    }

    /// `C × 3N` view used for channel mixing.
    pub fn as_matrix(&self) -> ArrayView2<'_, f64> {
        let (c, n, _) = self.data.dim();
        self.data
            .view()
            .into_shape_with_order((c, n * 3))
            .expect("standard layout")
    }

    fn from_matrix_rows(m: Array2<f64>, points: usize) -> Self {
        let c = m.nrows();
        Self {
            data: m.into_shape_with_order((c, points, 3)).expect("standard layout"),
        }
    }

    /// Point `i` as a `C×3` matrix.
    pub fn point_matrix(&self, i: usize) -> Array2<f64> {
        self.data.slice(s![.., i, ..]).to_owned()
    }

    /// Extracts the single channel as a list of points.
    pub fn to_points(&self) -> Result<Vec<Point>> {
        if self.channels() != 1 {
            return Err(Error::shape("VectorFeature::to_points", 1, self.channels()));
        }
        Ok((0..self.points()).map(|i| self.vector(0, i)).collect())
    }

    pub fn rotated(&self, r: &Rotation) -> Self {
        let mut out = self.clone();
        for mut v in out.data.lanes_mut(Axis(2)) {
            let p = r.apply([v[0], v[1], v[2]]);
            v[0] = p[0];
            v[1] = p[1];
            v[2] = p[2];
        }
        out
    }

    pub fn concat_channels(parts: &[&VectorFeature]) -> Result<Self> {
        let n = parts.first().map(|p| p.points()).unwrap_or(0);
        if let Some(bad) = parts.iter().find(|p| p.points() != n) {
            return Err(Error::shape("VectorFeature::concat_channels", n, bad.points()));
        }
        let views: Vec<_> = parts.iter().map(|p| p.data.view()).collect();
        Ok(Self {
            data: ndarray::concatenate(Axis(0), &views).expect("shapes checked"),
        })
    }

    /// Splits channels back into the given widths.
    pub fn split_channels(&self, widths: &[usize]) -> Vec<VectorFeature> {
        let mut start = 0;
        widths
            .iter()
            .map(|&w| {
                let part = self.data.slice(s![start..start + w, .., ..]).to_owned();
                start += w;
                VectorFeature { data: part }
            })
            .collect()
    }

    /// Repeats a one-point feature across `n` points.
    pub fn broadcast_points(&self, n: usize) -> Result<Self> {
        if self.points() != 1 {
            return Err(Error::shape("VectorFeature::broadcast_points", 1, self.points()));
        }
        let c = self.channels();
        Ok(Self {
            data: self.data.broadcast((c, n, 3)).expect("broadcastable").to_owned(),
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Per-point invariant matrices, layout `(points, channels, 3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InvariantFeature {
    data: Array3<f64>,
}

impl InvariantFeature {
    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn points(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    /// Row-major flattening of point `i`'s `C′×3` block.
    pub fn vectorized(&self, i: usize) -> Vec<f64> {
        self.data.slice(s![i, .., ..]).iter().copied().collect()
    }
}

/// Channel mixing `W · V`. No bias: a bias vector would not rotate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VnLinear {
    pub weight: Array2<f64>,
    /// Fault injection for the equivariance checker. Adds a fixed vector to
    /// every output, which breaks equivariance on purpose.
    #[serde(skip)]
    pub debug_bias: Option<Point>,
}

impl VnLinear {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        Self::from_weight(uniform_init(out_channels, in_channels, he_bound(in_channels), rng))
    }

    pub fn from_weight(weight: Array2<f64>) -> Self {
        Self {
            weight,
            debug_bias: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &VectorFeature) -> Result<VectorFeature> {
        if x.channels() != self.in_channels() {
            return Err(Error::shape("vn_linear", self.in_channels(), x.channels()));
        }
        let mut y = VectorFeature::from_matrix_rows(self.weight.dot(&x.as_matrix()), x.points());
        if let Some(b) = self.debug_bias {
            for mut v in y.data.lanes_mut(Axis(2)) {
                v[0] += b[0];
                v[1] += b[1];
                v[2] += b[2];
            }
        }
        Ok(y)
    }

    /// Accumulates `dL/dW` into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &VectorFeature, grad_out: &VectorFeature, grad: &mut VnLinear) -> VectorFeature {
        let gy = grad_out.as_matrix();
        grad.weight += &gy.dot(&x.as_matrix().t());
        VectorFeature::from_matrix_rows(self.weight.t().dot(&gy), x.points())
    }
}

impl Parameterized for VnLinear {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        f(&join(prefix, "weight"), &self.weight);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        f(&join(prefix, "weight"), &mut self.weight);
    }
}

/// Direction-conditional half-space nonlinearity.
///
/// For every channel a direction `d = U · V` is predicted. A vector with
/// `⟨v, d⟩ ≥ 0` passes unchanged; otherwise its component along `d` is removed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VnNonlinearity {
    pub direction: Array2<f64>,
}

/// Directions predicted in the forward pass.
#[derive(Debug, Clone)]
pub struct NonlinearityCache {
    directions: VectorFeature,
}

impl VnNonlinearity {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        Self {
            direction: uniform_init(channels, channels, he_bound(channels), rng),
        }
    }

    pub fn from_direction(direction: Array2<f64>) -> Self {
        Self { direction }
    }

    pub fn channels(&self) -> usize {
        self.direction.nrows()
    }

    pub fn forward(&self, x: &VectorFeature) -> Result<(VectorFeature, NonlinearityCache)> {
        if x.channels() != self.channels() {
            return Err(Error::shape("vn_nonlinearity", self.channels(), x.channels()));
        }
        let directions = VectorFeature::from_matrix_rows(self.direction.dot(&x.as_matrix()), x.points());
        let mut y = x.clone();
        let xs = x.data.as_slice().expect("standard layout");
        let ds = directions.data.as_slice().expect("standard layout");
        let ys = y.data.as_slice_mut().expect("standard layout");
        for ((v, d), out) in xs.chunks_exact(3).zip(ds.chunks_exact(3)).zip(ys.chunks_exact_mut(3)) {
            let vd = v[0] * d[0] + v[1] * d[1] + v[2] * d[2];
            if vd < 0.0 {
                let alpha = vd / (d[0] * d[0] + d[1] * d[1] + d[2] * d[2] + DIRECTION_EPS);
                for a in 0..3 {
                    out[a] = v[a] - alpha * d[a];
                }
            }
        }
        Ok((y, NonlinearityCache { directions }))
    }

    pub fn backward(
        &self,
        x: &VectorFeature,
        cache: &NonlinearityCache,
        grad_out: &VectorFeature,
        grad: &mut VnNonlinearity,
    ) -> VectorFeature {
        let mut gx = grad_out.clone();
        let mut gd = VectorFeature::zeros(x.channels(), x.points());
        {
            let xs = x.data.as_slice().expect("standard layout");
            let ds = cache.directions.data.as_slice().expect("standard layout");
            let gys = grad_out.data.as_slice().expect("standard layout");
            let gxs = gx.data.as_slice_mut().expect("standard layout");
            let gds = gd.data.as_slice_mut().expect("standard layout");
            for ((((v, d), g), gv), gdv) in xs
                .chunks_exact(3)
                .zip(ds.chunks_exact(3))
                .zip(gys.chunks_exact(3))
                .zip(gxs.chunks_exact_mut(3))
                .zip(gds.chunks_exact_mut(3))
            {
                let vd = v[0] * d[0] + v[1] * d[1] + v[2] * d[2];
                if vd >= 0.0 {
                    continue;
                }
                // out = v - α d with α = ⟨v,d⟩ / s, s = ‖d‖² + ε
                let s = d[0] * d[0] + d[1] * d[1] + d[2] * d[2] + DIRECTION_EPS;
                let alpha = vd / s;
                let dg = d[0] * g[0] + d[1] * g[1] + d[2] * g[2];
                for a in 0..3 {
                    gv[a] = g[a] - d[a] * dg / s;
                    gdv[a] = -alpha * g[a] - dg * (v[a] / s - 2.0 * vd * d[a] / (s * s));
                }
            }
        }
        let gdm = gd.as_matrix();
        grad.direction += &gdm.dot(&x.as_matrix().t());
        let through_direction = self.direction.t().dot(&gdm);
        let mut gxm = gx
            .data
            .into_shape_with_order((x.channels(), x.points() * 3))
            .expect("standard layout");
        gxm += &through_direction;
        VectorFeature::from_matrix_rows(gxm, x.points())
    }
}

impl Parameterized for VnNonlinearity {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        f(&join(prefix, "direction"), &self.direction);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        f(&join(prefix, "direction"), &mut self.direction);
    }
}

/// Linear map followed by the nonlinearity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VnBlock {
    pub linear: VnLinear,
    pub act: VnNonlinearity,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    pre: VectorFeature,
    act: NonlinearityCache,
}

impl VnBlock {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        Self {
            linear: VnLinear::new(in_channels, out_channels, rng),
            act: VnNonlinearity::new(out_channels, rng),
        }
    }

    pub fn forward(&self, x: &VectorFeature) -> Result<(VectorFeature, BlockCache)> {
        let pre = self.linear.forward(x)?;
        let (y, act) = self.act.forward(&pre)?;
        Ok((y, BlockCache { pre, act }))
    }

    pub fn backward(
        &self,
        x: &VectorFeature,
        cache: &BlockCache,
        grad_out: &VectorFeature,
        grad: &mut VnBlock,
    ) -> VectorFeature {
        let g_pre = self.act.backward(&cache.pre, &cache.act, grad_out, &mut grad.act);
        self.linear.backward(x, &g_pre, &mut grad.linear)
    }
}

impl Parameterized for VnBlock {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        self.linear.visit_params(&join(prefix, "linear"), f);
        self.act.visit_params(&join(prefix, "act"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        self.linear.visit_params_mut(&join(prefix, "linear"), f);
        self.act.visit_params_mut(&join(prefix, "act"), f);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    /// Per channel, the neighbour whose edge response has the largest norm.
    Max,
}

/// Edge convolution over a fixed neighbour graph.
///
/// Edge feature `concat(vᵢ, vⱼ − vᵢ)` goes through a [`VnBlock`] and is
/// aggregated over the neighbours of `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VnEdgeConv {
    pub block: VnBlock,
    pub aggregation: Aggregation,
}

#[derive(Debug, Clone)]
pub struct EdgeConvCache {
    k: usize,
    edges: VectorFeature,
    block: BlockCache,
    /// For max aggregation: chosen neighbour slot per (channel, point).
    selected: Option<Array2<usize>>,
}

impl VnEdgeConv {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        aggregation: Aggregation,
        rng: &mut R,
    ) -> Self {
        Self {
            block: VnBlock::new(2 * in_channels, out_channels, rng),
            aggregation,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.block.linear.in_channels() / 2
    }

    pub fn out_channels(&self) -> usize {
        self.block.linear.out_channels()
    }

    fn check_graph(n: usize, neighbors: &[Vec<usize>]) -> Result<usize> {
        if neighbors.len() != n {
            return Err(Error::shape("vn_edge_conv neighbour rows", n, neighbors.len()));
        }
        let k = neighbors.first().map(Vec::len).unwrap_or(0);
        if k == 0 {
            return Err(Error::invalid("vn_edge_conv needs at least one neighbour per point"));
        }
        for (i, row) in neighbors.iter().enumerate() {
            if row.len() != k {
                return Err(Error::shape("vn_edge_conv neighbour count", k, row.len()));
            }
            if let Some(&j) = row.iter().find(|&&j| j >= n) {
                return Err(Error::invalid(format!(
                    "neighbour index {j} of point {i} out of range (N = {n})"
                )));
            }
        }
        Ok(k)
    }

    pub fn forward(&self, x: &VectorFeature, neighbors: &[Vec<usize>]) -> Result<(VectorFeature, EdgeConvCache)> {
        let (c, n) = (x.channels(), x.points());
        if c != self.in_channels() {
            return Err(Error::shape("vn_edge_conv", self.in_channels(), c));
        }
        let k = Self::check_graph(n, neighbors)?;

        let mut edges = Array3::zeros((2 * c, n * k, 3));
        for (i, row) in neighbors.iter().enumerate() {
            for (slot, &j) in row.iter().enumerate() {
                let e = i * k + slot;
                for ch in 0..c {
                    for a in 0..3 {
                        let vi = x.data[[ch, i, a]];
                        edges[[ch, e, a]] = vi;
                        edges[[c + ch, e, a]] = x.data[[ch, j, a]] - vi;
                    }
                }
            }
        }
        let edges = VectorFeature { data: edges };
        let (h, block) = self.block.forward(&edges)?;

        let out_c = self.out_channels();
        let mut y = Array3::zeros((out_c, n, 3));
        let selected = match self.aggregation {
            Aggregation::Mean => {
                let inv_k = 1.0 / k as f64;
                for ch in 0..out_c {
                    for i in 0..n {
                        for slot in 0..k {
                            for a in 0..3 {
                                y[[ch, i, a]] += h.data[[ch, i * k + slot, a]] * inv_k;
                            }
                        }
                    }
                }
                None
            }
            Aggregation::Max => {
                let mut sel = Array2::zeros((out_c, n));
                for ch in 0..out_c {
                    for i in 0..n {
                        let mut best = 0;
                        let mut best_norm = f64::NEG_INFINITY;
                        for slot in 0..k {
                            let v = h.vector(ch, i * k + slot);
                            let nrm = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
                            if nrm > best_norm {
                                best_norm = nrm;
                                best = slot;
                            }
                        }
                        sel[[ch, i]] = best;
                        for a in 0..3 {
                            y[[ch, i, a]] = h.data[[ch, i * k + best, a]];
                        }
                    }
                }
                Some(sel)
            }
        };
        Ok((
            VectorFeature { data: y },
            EdgeConvCache {
                k,
                edges,
                block,
                selected,
            },
        ))
    }

    pub fn backward(
        &self,
        x: &VectorFeature,
        neighbors: &[Vec<usize>],
        cache: &EdgeConvCache,
        grad_out: &VectorFeature,
        grad: &mut VnEdgeConv,
    ) -> VectorFeature {
        let (c, n, k) = (x.channels(), x.points(), cache.k);
        let out_c = self.out_channels();
        let mut gh = Array3::zeros((out_c, n * k, 3));
        match &cache.selected {
            None => {
                let inv_k = 1.0 / k as f64;
                for ch in 0..out_c {
                    for i in 0..n {
                        for slot in 0..k {
                            for a in 0..3 {
                                gh[[ch, i * k + slot, a]] = grad_out.data[[ch, i, a]] * inv_k;
                            }
                        }
                    }
                }
            }
            Some(sel) => {
                for ch in 0..out_c {
                    for i in 0..n {
                        let slot = sel[[ch, i]];
                        for a in 0..3 {
                            gh[[ch, i * k + slot, a]] = grad_out.data[[ch, i, a]];
                        }
                    }
                }
            }
        }
        let gh = VectorFeature { data: gh };
        let ge = self.block.backward(&cache.edges, &cache.block, &gh, &mut grad.block);

        let mut gx = Array3::zeros((c, n, 3));
        for (i, row) in neighbors.iter().enumerate() {
            for (slot, &j) in row.iter().enumerate() {
                let e = i * k + slot;
                for ch in 0..c {
                    for a in 0..3 {
                        let g_self = ge.data[[ch, e, a]];
                        let g_diff = ge.data[[c + ch, e, a]];
                        gx[[ch, i, a]] += g_self - g_diff;
                        gx[[ch, j, a]] += g_diff;
                    }
                }
            }
        }
        VectorFeature { data: gx }
    }
}

impl Parameterized for VnEdgeConv {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        self.block.visit_params(prefix, f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        self.block.visit_params_mut(prefix, f);
    }
}

/// Channelwise mean over points; output has a single point.
pub fn vn_mean_pool(x: &VectorFeature) -> Result<VectorFeature> {
    if x.points() == 0 {
        return Err(Error::invalid("mean pool over zero points"));
    }
    let mean = x.data.mean_axis(Axis(1)).expect("non-empty");
    let c = x.channels();
    Ok(VectorFeature {
        data: mean.into_shape_with_order((c, 1, 3)).expect("contiguous"),
    })
}

pub fn vn_mean_pool_backward(points: usize, grad_out: &VectorFeature) -> VectorFeature {
    let mut g = grad_out.broadcast_points(points).expect("pooled feature has one point");
    g.data /= points as f64;
    g
}

/// `V · Uᵀ` per point: `(C′×3)(3×3)ᵀ`, invariant to a common rotation of both.
pub fn invariant_product(v: &VectorFeature, frame: &VectorFeature) -> Result<InvariantFeature> {
    if frame.channels() != 3 {
        return Err(Error::shape("invariant_product frame channels", 3, frame.channels()));
    }
    if frame.points() != v.points() {
        return Err(Error::shape("invariant_product points", v.points(), frame.points()));
    }
    let (c, n) = (v.channels(), v.points());
    let mut out = Array3::zeros((n, c, 3));
    for i in 0..n {
        for ch in 0..c {
            let vv = v.vector(ch, i);
            for a in 0..3 {
                let u = frame.vector(a, i);
                out[[i, ch, a]] = vv[0] * u[0] + vv[1] * u[1] + vv[2] * u[2];
            }
        }
    }
    Ok(InvariantFeature { data: out })
}

/// Gradients of [`invariant_product`] with respect to `v` and `frame`.
pub fn invariant_product_backward(
    v: &VectorFeature,
    frame: &VectorFeature,
    grad_out: &Array3<f64>,
) -> (VectorFeature, VectorFeature) {
    let (c, n) = (v.channels(), v.points());
    let mut gv = VectorFeature::zeros(c, n);
    let mut gf = VectorFeature::zeros(3, n);
    for i in 0..n {
        for ch in 0..c {
            for a in 0..3 {
                let g = grad_out[[i, ch, a]];
                for b in 0..3 {
                    gv.data[[ch, i, b]] += g * frame.data[[a, i, b]];
                    gf.data[[a, i, b]] += g * v.data[[ch, i, b]];
                }
            }
        }
    }
    (gv, gf)
}
