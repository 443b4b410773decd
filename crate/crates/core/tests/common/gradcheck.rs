//! Analytic gradients against central finite differences.

use super::*;
use ndarray::{Array2, Array3};
use rand::Rng;
use ristcorr::decoder::Decoder;
use ristcorr::encoder::{Encoder, EncoderConfig};
use ristcorr::geometry::{knn_graph, PointCloud};
use ristcorr::losses::{chamfer, emd_exact, mse_paired, LossValue};
use ristcorr::mlp::Mlp;
use ristcorr::model::{Model, ModelConfig};
use ristcorr::training::{compute_loss, loss_and_grad, LossSelection, TrainConfig};
use ristcorr::vn::{
    invariant_product, invariant_product_backward, vn_mean_pool, vn_mean_pool_backward, Aggregation, VectorFeature,
    VnBlock, VnEdgeConv, VnLinear, VnNonlinearity,
};
use ristcorr::{DecoderConfig, Parameterized};

pub const TOL: f64 = 1e-6;
/// The weighted total is O(10³), so difference quotients carry about 1e-6
/// absolute round-off; the full objective is held to a looser bound.
pub const TOTAL_TOL: f64 = 1e-3;

fn dot(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn feature_from(v: &[f64], c: usize, n: usize) -> VectorFeature {
    VectorFeature::from_array(Array3::from_shape_vec((c, n, 3), v.to_vec()).unwrap()).unwrap()
}

fn flat_feature(f: &VectorFeature) -> Vec<f64> {
    f.data().iter().copied().collect()
}

fn check_params<P: Parameterized + Clone>(model: &P, grad: &P, max: usize, seed: u64, f: impl Fn(&P) -> f64) -> f64 {
    let x = model.flatten_params();
    let g = grad.flatten_params();
    let idx = sample_indices(x.len(), max, &mut rng(seed));
    let num = fd_checked(&x, &idx, |v| {
        let mut m = model.clone();
        m.assign_flat(v);
        f(&m)
    });
    let ana: Vec<f64> = idx.iter().map(|&i| g[i]).collect();
    accept(&ana, &num)
}

fn check_input(x: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    let idx: Vec<usize> = (0..x.len()).collect();
    accept(analytic, &fd_checked(x, &idx, f))
}

/// At most one coordinate in ten (or a single one) may sit on a switching
/// boundary.
fn accept(analytic: &[f64], numeric: &[Option<f64>]) -> f64 {
    let (e, skipped) = compare(analytic, numeric);
    assert!(
        skipped <= (analytic.len() / 10).max(1),
        "{skipped} of {} coordinates on a kink",
        analytic.len()
    );
    e
}

pub fn vn_linear_gradients() {
    let mut r = rng(1);
    let lin = VnLinear::new(4, 5, &mut r);
    let x = random_feature(4, 6, &mut r);
    let g = random_feature(5, 6, &mut r);
    let mut grad = lin.zeros_like();
    let gx = lin.backward(&x, &g, &mut grad);

    let e = check_params(&lin, &grad, usize::MAX, 0, |m| {
        dot(m.forward(&x).unwrap().data(), g.data())
    });
    assert!(e < TOL, "weight {e}");
    let e = check_input(&flat_feature(&x), &flat_feature(&gx), |v| {
        dot(lin.forward(&feature_from(v, 4, 6)).unwrap().data(), g.data())
    });
    assert!(e < TOL, "input {e}");
}

pub fn vn_nonlinearity_gradients() {
    let mut r = rng(2);
    let act = VnNonlinearity::new(5, &mut r);
    let x = random_feature(5, 7, &mut r);
    let g = random_feature(5, 7, &mut r);
    let (_, cache) = act.forward(&x).unwrap();
    let mut grad = act.zeros_like();
    let gx = act.backward(&x, &cache, &g, &mut grad);

    let e = check_params(&act, &grad, usize::MAX, 0, |m| {
        dot(m.forward(&x).unwrap().0.data(), g.data())
    });
    assert!(e < TOL, "direction {e}");
    let e = check_input(&flat_feature(&x), &flat_feature(&gx), |v| {
        dot(act.forward(&feature_from(v, 5, 7)).unwrap().0.data(), g.data())
    });
    assert!(e < TOL, "input {e}");
}

pub fn vn_block_gradients() {
    let mut r = rng(3);
    let block = VnBlock::new(3, 6, &mut r);
    let x = random_feature(3, 5, &mut r);
    let g = random_feature(6, 5, &mut r);
    let (_, cache) = block.forward(&x).unwrap();
    let mut grad = block.zeros_like();
    let gx = block.backward(&x, &cache, &g, &mut grad);

    let e = check_params(&block, &grad, usize::MAX, 0, |m| {
        dot(m.forward(&x).unwrap().0.data(), g.data())
    });
    assert!(e < TOL, "params {e}");
    let e = check_input(&flat_feature(&x), &flat_feature(&gx), |v| {
        dot(block.forward(&feature_from(v, 3, 5)).unwrap().0.data(), g.data())
    });
    assert!(e < TOL, "input {e}");
}

pub fn edge_conv_case(aggregation: Aggregation, seed: u64) {
    let mut r = rng(seed);
    let n = 10;
    let cloud = PointCloud::new(random_points(n, &mut r)).unwrap();
    let neighbors = knn_graph(&cloud, 4).unwrap();
    let conv = VnEdgeConv::new(3, 4, aggregation, &mut r);
    let x = random_feature(3, n, &mut r);
    let g = random_feature(4, n, &mut r);
    let (_, cache) = conv.forward(&x, &neighbors).unwrap();
    let mut grad = conv.zeros_like();
    let gx = conv.backward(&x, &neighbors, &cache, &g, &mut grad);

    let e = check_params(&conv, &grad, usize::MAX, 0, |m| {
        dot(m.forward(&x, &neighbors).unwrap().0.data(), g.data())
    });
    assert!(e < TOL, "{aggregation:?} params {e}");
    let e = check_input(&flat_feature(&x), &flat_feature(&gx), |v| {
        dot(
            conv.forward(&feature_from(v, 3, n), &neighbors).unwrap().0.data(),
            g.data(),
        )
    });
    assert!(e < TOL, "{aggregation:?} input {e}");
}

pub fn edge_conv_mean_gradients() {
    edge_conv_case(Aggregation::Mean, 4);
}

pub fn edge_conv_max_gradients() {
    edge_conv_case(Aggregation::Max, 5);
}

pub fn mean_pool_gradients() {
    let mut r = rng(6);
    let x = random_feature(4, 6, &mut r);
    let g = random_feature(4, 1, &mut r);
    let gx = vn_mean_pool_backward(6, &g);
    let e = check_input(&flat_feature(&x), &flat_feature(&gx), |v| {
        dot(vn_mean_pool(&feature_from(v, 4, 6)).unwrap().data(), g.data())
    });
    assert!(e < TOL, "{e}");
}

pub fn invariant_product_gradients() {
    let mut r = rng(7);
    let v = random_feature(4, 5, &mut r);
    let frame = random_feature(3, 5, &mut r);
    let g = Array3::from_shape_fn((5, 4, 3), |_| r.gen_range(-1.0..1.0));
    let (gv, gf) = invariant_product_backward(&v, &frame, &g);
    let e = check_input(&flat_feature(&v), &flat_feature(&gv), |x| {
        dot(invariant_product(&feature_from(x, 4, 5), &frame).unwrap().data(), &g)
    });
    assert!(e < TOL, "v {e}");
    let e = check_input(&flat_feature(&frame), &flat_feature(&gf), |x| {
        dot(invariant_product(&v, &feature_from(x, 3, 5)).unwrap().data(), &g)
    });
    assert!(e < TOL, "frame {e}");
}

pub fn mlp_gradients() {
    let mut r = rng(8);
    let mlp = Mlp::new(&[6, 9, 7, 4], &mut r);
    let x = Array2::from_shape_fn((5, 6), |_| r.gen_range(-1.0..1.0));
    let g = Array2::from_shape_fn((5, 4), |_| r.gen_range(-1.0..1.0));
    let (_, cache) = mlp.forward(&x).unwrap();
    let mut grad = mlp.zeros_like();
    let gx = mlp.backward(&cache, &g, &mut grad);
    let obj =
        |m: &Mlp, x: &Array2<f64>| -> f64 { m.forward(x).unwrap().0.iter().zip(g.iter()).map(|(a, b)| a * b).sum() };
    let e = check_params(&mlp, &grad, usize::MAX, 0, |m| obj(m, &x));
    assert!(e < TOL, "params {e}");
    let xf: Vec<f64> = x.iter().copied().collect();
    let e = check_input(&xf, &gx.iter().copied().collect::<Vec<_>>(), |v| {
        obj(&mlp, &Array2::from_shape_vec((5, 6), v.to_vec()).unwrap())
    });
    assert!(e < TOL, "input {e}");
}

pub fn encoder_case(config: EncoderConfig, seed: u64) {
    let mut r = rng(seed);
    let enc = Encoder::new(config.clone(), &mut r).unwrap();
    let points = random_points(16, &mut r);
    let (out, cache) = enc.forward(&points).unwrap();
    let gz = Array2::from_shape_fn(out.z.0.dim(), |_| r.gen_range(-1.0..1.0));
    let gt = Array3::from_shape_fn(out.transforms.dim(), |_| r.gen_range(-1.0..1.0));
    let mut grad = enc.zeros_like();
    enc.backward(&cache, &gz, &gt, &mut grad);

    // Every tensor is checked on its own so a small one is not drowned out.
    let names = enc.param_names();
    let mut offset = 0;
    let mut sizes = Vec::new();
    enc.visit_params("", &mut |_, p| sizes.push(p.len()));
    let x = enc.flatten_params();
    let g = grad.flatten_params();
    let (mut checked, mut skipped) = (0, 0);
    for (name, &len) in names.iter().zip(&sizes) {
        let idx: Vec<usize> = sample_indices(len, 40, &mut r)
            .into_iter()
            .map(|i| i + offset)
            .collect();
        let num = fd_checked(&x, &idx, |v| {
            let mut m = enc.clone();
            m.assign_flat(v);
            let o = m.encode(&points).unwrap();
            o.z.0.iter().zip(gz.iter()).map(|(a, b)| a * b).sum::<f64>() + dot(&o.transforms, &gt)
        });
        let ana: Vec<f64> = idx.iter().map(|&i| g[i]).collect();
        let (e, s) = compare(&ana, &num);
        assert!(s < idx.len(), "{name}: every coordinate on a kink");
        assert!(e < TOL, "{name}: {e}");
        checked += idx.len();
        skipped += s;
        offset += len;
    }
    // Kinks are a property of the whole network, so they share one budget.
    assert!(skipped * 10 <= checked, "{skipped} of {checked} coordinates on a kink");
}

pub fn encoder_gradients_mean_aggregation() {
    encoder_case(EncoderConfig::test(), 9);
}

pub fn encoder_gradients_max_aggregation() {
    encoder_case(
        EncoderConfig {
            aggregation: Aggregation::Max,
            ..EncoderConfig::test()
        },
        10,
    );
}

pub fn decoder_gradients() {
    let mut r = rng(11);
    let dec = Decoder::new(DecoderConfig::test(), &mut r).unwrap();
    let cl = DecoderConfig::test().local_channels;
    let desc = random_feature(cl, 12, &mut r);
    let g = random_points(12, &mut r);
    let (_, cache) = dec.forward(&desc).unwrap();
    let mut grad = dec.zeros_like();
    let gd = dec.backward(&cache, &g, &mut grad);
    let obj = |m: &Decoder, d: &VectorFeature| -> f64 {
        flat(&m.decode(d).unwrap())
            .iter()
            .zip(flat(&g))
            .map(|(a, b)| a * b)
            .sum()
    };
    let e = check_params(&dec, &grad, usize::MAX, 0, |m| obj(m, &desc));
    assert!(e < TOL, "params {e}");
    let e = check_input(&flat_feature(&desc), &flat_feature(&gd), |v| {
        obj(&dec, &feature_from(v, cl, 12))
    });
    assert!(e < TOL, "input {e}");
}

pub fn loss_case(name: &str, f: impl Fn(&[ristcorr::Point], &[ristcorr::Point]) -> LossValue, seed: u64) {
    let mut r = rng(seed);
    let pred = random_points(16, &mut r);
    let target = random_points(16, &mut r);
    let analytic = flat(f(&pred, &target).grad.as_ref().unwrap());
    let e = check_input(&flat(&pred), &analytic, |v| f(&unflat(v), &target).value);
    assert!(e < TOL, "{name}: {e}");
}

pub fn loss_term_gradients() {
    loss_case("mse", |p, t| mse_paired(p, t).unwrap(), 12);
    loss_case("chamfer", |p, t| chamfer(p, t).unwrap(), 13);
    loss_case("emd", |p, t| emd_exact(p, t).unwrap(), 14);
}

pub fn chamfer_with_unequal_sizes() {
    let mut r = rng(15);
    let pred = random_points(9, &mut r);
    let target = random_points(14, &mut r);
    let analytic = flat(chamfer(&pred, &target).unwrap().grad.as_ref().unwrap());
    let e = check_input(&flat(&pred), &analytic, |v| chamfer(&unflat(v), &target).unwrap().value);
    assert!(e < TOL, "{e}");
}

pub fn total_loss_case(loss: LossSelection, seed: u64) -> f64 {
    let mut r = rng(seed);
    let model = Model::new(&ModelConfig::test(), seed).unwrap();
    let p1 = random_points(16, &mut r);
    let p2 = random_points(16, &mut r);
    let cfg = TrainConfig {
        loss,
        ..TrainConfig::default()
    };
    let (_, grad) = loss_and_grad(&model, &p1, &p2, &cfg).unwrap();
    check_params(&model, &grad, 400, seed, |m| {
        compute_loss(m, &p1, &p2, &cfg).unwrap().total
    })
}

pub fn total_loss_gradient_default_selection() {
    let e = total_loss_case(LossSelection::default(), 16);
    assert!(e < TOTAL_TOL, "{e}");
}

pub fn total_loss_gradient_every_ablation_row() {
    for (k, row) in LossSelection::ABLATION_ROWS.iter().enumerate() {
        let e = total_loss_case(LossSelection::ablation(*row).unwrap(), 20 + k as u64);
        assert!(e < TOTAL_TOL, "row {row}: {e}");
    }
}
