//! Acceptance criteria A1–A7. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Positional arguments select criteria by id
//! (`cargo test --test acceptance -- A4`).

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::*;
use rand::Rng;
use ristcorr::encoder::EncoderConfig;
use ristcorr::evaluation::{evaluate_pairs, iou_transfer, pck, EvalOptions, EvalPair, Protocol};
use ristcorr::geometry::{
    knn_graph, normalize_to_unit_sphere, random_family_instances, sample_uniform_rotation, Point, PointCloud,
    SyntheticFamily,
};
use ristcorr::io::{write_synthetic_dataset, Manifest};
use ristcorr::losses::{chamfer, emd_exact, mse_paired};
use ristcorr::training::{
    compute_loss, mean_self_chamfer, train, train_clouds, LossSelection, TrainConfig, TrainState, CHECKPOINT_FILE,
    METRICS_FILE,
};
use ristcorr::{correspond, correspond_lst, cross_reconstruct, Checkpoint, Model, ModelConfig};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(started: Instant, limit: Duration) -> Result<(), String> {
    let t = started.elapsed();
    ensure(t < limit, format!("took {t:.1?}, limit {limit:?}"))
}

fn rel(a: impl IntoIterator<Item = f64>, b: impl IntoIterator<Item = f64>) -> f64 {
    let a: Vec<f64> = a.into_iter().collect();
    let b: Vec<f64> = b.into_iter().collect();
    rel_err(&a, &b)
}

fn rotate_points(points: &[Point], r: &ristcorr::Rotation) -> Vec<Point> {
    points.iter().map(|&p| r.apply(p)).collect()
}

fn a1_equivariance() -> Outcome {
    let started = Instant::now();
    let config = ModelConfig::test();
    ensure(
        config.encoder.global_channels == 16 && config.encoder.local_channels == 8,
        "test config is not C=16, C′=8",
    )?;
    let model = Model::new(&config, 1).map_err(|e| e.to_string())?;
    let mut r = rng(100);
    let p = random_cloud(128, &mut r);
    let q = random_cloud(128, &mut r);
    let ep = model.encode(p.points()).unwrap();
    let eq = model.encode(q.points()).unwrap();
    let desc = ep.descriptors().unwrap();
    let decoded = model.decoder.decode(&desc).unwrap();
    let cross = cross_reconstruct(&model, &ep, &eq.z).unwrap();

    let mut worst = [0.0f64; 6];
    for _ in 0..100 {
        let rot = sample_uniform_rotation(&mut r);
        let er = model.encode(p.rotated(&rot).points()).unwrap();
        let qr = model.encode(q.rotated(&rot).points()).unwrap();
        let errs = [
            rel(er.z.0.iter().copied(), ep.z.rotated(&rot).0.iter().copied()),
            rel(er.transforms.iter().copied(), ep.transforms.iter().copied()),
            rel(
                er.descriptors().unwrap().data().iter().copied(),
                desc.rotated(&rot).data().iter().copied(),
            ),
            rel_err_points(
                &model.decoder.decode(&desc.rotated(&rot)).unwrap(),
                &rotate_points(&decoded, &rot),
            ),
            rel_err_points(&cross_reconstruct(&model, &er, &eq.z).unwrap(), &cross),
            rel_err_points(
                &cross_reconstruct(&model, &ep, &qr.z).unwrap(),
                &rotate_points(&cross, &rot),
            ),
        ];
        for (w, e) in worst.iter_mut().zip(errs) {
            *w = w.max(e);
        }
    }
    let names = ["Z", "θ", "local", "decoder", "cross/source", "cross/target"];
    let limits = [1e-8, 1e-4, 1e-4, 1e-4, 1e-4, 1e-4];
    for ((n, w), l) in names.iter().zip(worst).zip(limits) {
        ensure(w < l, format!("{n} error {w:.2e} ≥ {l:.0e}"))?;
    }
    within(started, Duration::from_secs(120))?;
    let summary: Vec<String> = names.iter().zip(worst).map(|(n, w)| format!("{n} {w:.1e}")).collect();
    Ok(format!("100 rotations, max rel. error: {}", summary.join(", ")))
}

fn a2_gradients() -> Outcome {
    let started = Instant::now();
    let cases: [(&str, fn()); 13] = [
        ("vn linear", gradcheck::vn_linear_gradients),
        ("vn nonlinearity", gradcheck::vn_nonlinearity_gradients),
        ("vn block", gradcheck::vn_block_gradients),
        ("edge conv (mean)", gradcheck::edge_conv_mean_gradients),
        ("edge conv (max)", gradcheck::edge_conv_max_gradients),
        ("mean pool", gradcheck::mean_pool_gradients),
        ("invariant product", gradcheck::invariant_product_gradients),
        ("mlp", gradcheck::mlp_gradients),
        ("encoder (mean)", gradcheck::encoder_gradients_mean_aggregation),
        ("encoder (max)", gradcheck::encoder_gradients_max_aggregation),
        ("decoder", gradcheck::decoder_gradients),
        ("loss terms", gradcheck::loss_term_gradients),
        ("chamfer N≠M", gradcheck::chamfer_with_unequal_sizes),
    ];
    for (name, case) in cases {
        catch_unwind(case).map_err(|e| format!("{name}: {}", panic_text(&e)))?;
    }
    within(started, Duration::from_secs(300))?;
    Ok(format!(
        "{} gradient checks at rel. error < {:.0e}",
        cases.len(),
        gradcheck::TOL
    ))
}

fn a3_oracles() -> Outcome {
    let mut r = rng(300);
    let mut worst_emd: f64 = 0.0;
    for n in 1..=7 {
        for _ in 0..3 {
            let p = random_points(n, &mut r);
            let t = random_points(n, &mut r);
            worst_emd = worst_emd.max((emd_exact(&p, &t).unwrap().value - oracle::emd(&p, &t)).abs());
        }
    }
    ensure(worst_emd <= 1e-12, format!("emd off by {worst_emd:.2e}"))?;

    for (n, m) in [(8, 8), (8, 8), (5, 11), (13, 3)] {
        let p = random_points(n, &mut r);
        let t = random_points(m, &mut r);
        ensure(
            chamfer(&p, &t).unwrap().value == oracle::chamfer(&p, &t),
            format!("chamfer {n}×{m}"),
        )?;
    }

    for (n, k) in [(32, 4), (16, 15), (64, 20), (2, 1)] {
        let c = PointCloud::new(random_points(n, &mut r)).unwrap();
        ensure(
            knn_graph(&c, k).unwrap() == oracle::knn(c.points(), k),
            format!("knn N={n} k={k}"),
        )?;
    }
    let mut dup = random_points(10, &mut r);
    dup[7] = dup[2];
    dup[9] = dup[2];
    let c = PointCloud::new(dup).unwrap();
    ensure(
        knn_graph(&c, 3).unwrap() == oracle::knn(c.points(), 3),
        "knn with duplicates",
    )?;

    let model = Model::new(&ModelConfig::test(), 3).unwrap();
    for n in [16, 32] {
        let p = random_cloud(n, &mut r);
        let q = random_cloud(n, &mut r);
        let expect = oracle::lst_matches(
            &model.encode(p.points()).unwrap().transforms,
            &model.encode(q.points()).unwrap().transforms,
        );
        ensure(
            correspond_lst(&p, &q, &model).unwrap().targets() == expect,
            format!("lst N={n}"),
        )?;
    }

    ensure(
        iou_transfer(&[0, 1, 1, 0], &[0, 1, 1, 0], &[0, 1]).unwrap() == 1.0,
        "iou identity",
    )?;
    ensure(
        iou_transfer(&[0, 0, 0, 0], &[0, 0, 1, 1], &[0, 1]).unwrap() == 0.25,
        "iou half/half",
    )?;
    for _ in 0..20 {
        let pred: Vec<u32> = (0..16).map(|_| r.gen_range(0..3)).collect();
        let gt: Vec<u32> = (0..16).map(|_| r.gen_range(0..3)).collect();
        let universe = [0, 1, 2];
        ensure(
            iou_transfer(&pred, &gt, &universe).unwrap() == oracle::iou(&pred, &gt, &universe),
            "iou vs set arithmetic",
        )?;
    }

    let gt = vec![(0, [0.0, 0.0, 0.0]), (1, [1.0, 0.0, 0.0])];
    ensure(pck(&gt, &gt, 0.0).unwrap() == 1.0, "pck identity")?;
    let moved = vec![(0, [0.05, 0.0, 0.0]), (1, [1.0, 0.2, 0.0])];
    ensure(pck(&moved, &gt, 0.1).unwrap() == 0.5, "pck 0.05/0.2 at τ=0.1")?;
    let boundary = vec![(0, [0.5, 0.0, 0.0]), (1, [1.0, 0.0, 0.25])];
    ensure(pck(&boundary, &gt, 0.5).unwrap() == 1.0, "pck distance exactly τ")?;

    Ok(format!(
        "emd (N ≤ 7, max gap {worst_emd:.1e}), chamfer, knn, lst matching, IoU and PCK match their oracles"
    ))
}

const A4_INSTANCES_PER_FAMILY: usize = 30;
const A4_HELD_OUT_PAIRS_PER_FAMILY: usize = 10;
const A4_FAMILIES: [SyntheticFamily; 2] = [SyntheticFamily::Dumbbell, SyntheticFamily::Ellipsoid2Part];

/// Recipe: 30 dumbbells and 30 two-part ellipsoids of 128 points, test-size
/// model, default losses and Adam settings, 8 epochs of 250 steps of 4 pairs.
fn a4_synthetic_overfit() -> Outcome {
    let started = Instant::now();
    let mut clouds = Vec::new();
    for (k, f) in A4_FAMILIES.iter().enumerate() {
        clouds.extend(random_family_instances(*f, A4_INSTANCES_PER_FAMILY, 128, 100 + k as u64).unwrap());
    }
    let shapes: Vec<Vec<Point>> = clouds
        .iter()
        .map(|c| normalize_to_unit_sphere(c).points().to_vec())
        .collect();
    let cfg = TrainConfig {
        epochs: 8,
        iters_per_epoch: 250,
        seed: 7,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(&ModelConfig::test(), &cfg).unwrap();
    let cd0 = mean_self_chamfer(&state.model, &shapes).unwrap();
    train_clouds(&clouds, &mut state, 1, |_, _| Ok(())).map_err(|e| e.to_string())?;
    let iterations = cfg.epochs * cfg.iters_per_epoch;
    let model = &state.model;
    let cd = mean_self_chamfer(model, &shapes).unwrap();

    let mut held_out = Vec::new();
    for (k, f) in A4_FAMILIES.iter().enumerate() {
        let c = random_family_instances(*f, 2 * A4_HELD_OUT_PAIRS_PER_FAMILY, 128, 900 + k as u64).unwrap();
        for (i, pair) in c.chunks_exact(2).enumerate() {
            held_out.push(EvalPair {
                source_name: format!("{}-{i}a", f.name()),
                target_name: format!("{}-{i}b", f.name()),
                source: pair[0].clone(),
                target: pair[1].clone(),
            });
        }
    }
    let opts = |protocol| EvalOptions {
        protocol,
        taus: vec![],
        seed: 11,
        ..EvalOptions::default()
    };
    let aligned = evaluate_pairs(model, "synthetic", &held_out, &opts(Protocol::Aligned)).unwrap();
    let rotated = evaluate_pairs(model, "synthetic", &held_out, &opts(Protocol::Rotated)).unwrap();
    let iou = aligned.mean_iou.unwrap();
    let majority = aligned.mean_majority_iou.unwrap();
    let iou_rot = rotated.mean_iou.unwrap();

    let mut r = rng(400);
    let (mut same, mut total) = (0.0, 0.0);
    for pair in &held_out {
        let p = normalize_to_unit_sphere(&pair.source);
        let q = normalize_to_unit_sphere(&pair.target);
        let base = correspond(&p, &q, model).unwrap();
        let moved = correspond(
            &p.rotated(&sample_uniform_rotation(&mut r)),
            &q.rotated(&sample_uniform_rotation(&mut r)),
            model,
        )
        .unwrap();
        same += base.agreement(&moved) * base.len() as f64;
        total += base.len() as f64;
    }
    let agreement = same / total;

    let summary = format!(
        "{} shapes, {iterations} steps, {:.0?}; CD {cd:.4}/{cd0:.4} = {:.3}; IoU {iou:.3} vs majority {majority:.3}; \
         rotated IoU {iou_rot:.3}; rotated agreement {:.2}%",
        clouds.len(),
        started.elapsed(),
        cd / cd0,
        100.0 * agreement
    );
    ensure(iterations <= 2000, format!("{iterations} steps exceed 2000"))?;
    ensure(cd < 0.2 * cd0, format!("(a) CD ratio {:.3} ≥ 0.2; {summary}", cd / cd0))?;
    ensure(held_out.len() >= 20, "fewer than 20 held-out pairs")?;
    ensure(
        iou - majority >= 0.15,
        format!("(b) IoU margin {:.3} < 0.15; {summary}", iou - majority),
    )?;
    ensure(
        (iou - iou_rot).abs() < 0.02,
        format!("(c) rotation drop {:.3}; {summary}", iou - iou_rot),
    )?;
    ensure(
        agreement >= 0.99,
        format!("(d) agreement {agreement:.4} < 0.99; {summary}"),
    )?;
    within(started, Duration::from_secs(15 * 60))?;
    Ok(summary)
}

fn a5_rotation_sampling() -> Outcome {
    let mut r = rng(500);
    let mut angles = Vec::with_capacity(10_000);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let rot = sample_uniform_rotation(&mut r);
        worst = worst
            .max(rot.orthonormality_error())
            .max((rot.determinant() - 1.0).abs());
        angles.push(rot.angle());
    }
    ensure(worst <= 1e-6, format!("SO(3) membership error {worst:.2e}"))?;
    let (d, p) = oracle::ks_test(&angles, oracle::haar_angle_cdf);
    ensure(p > 0.01, format!("KS D = {d:.4}, p = {p:.4}"))?;
    Ok(format!(
        "10000 samples, KS D = {d:.4}, p = {p:.3}, membership error {worst:.1e}"
    ))
}

fn a6_loss_ablation() -> Outcome {
    let model = Model::new(&ModelConfig::test(), 6).unwrap();
    let mut r = rng(600);
    let p1 = random_cloud(48, &mut r);
    let p2 = random_cloud(48, &mut r);
    let (a, b) = (p1.points(), p2.points());

    let e1 = model.encode(a).unwrap();
    let e2 = model.encode(b).unwrap();
    let s1 = model.reconstruct_from(&e1, &e1.z).unwrap();
    let s2 = model.reconstruct_from(&e2, &e2.z).unwrap();
    let c21 = model.reconstruct_from(&e2, &e1.z).unwrap();
    let c12 = model.reconstruct_from(&e1, &e2.z).unwrap();
    let mean2 = |x: f64, y: f64| 0.5 * x + 0.5 * y;
    let mse = mean2(mse_paired(&s1, a).unwrap().value, mse_paired(&s2, b).unwrap().value);
    let emd = mean2(emd_exact(&s1, a).unwrap().value, emd_exact(&s2, b).unwrap().value);
    let sr_cd = mean2(chamfer(&s1, a).unwrap().value, chamfer(&s2, b).unwrap().value);
    let cr_cd = mean2(chamfer(&c21, a).unwrap().value, chamfer(&c12, b).unwrap().value);

    let mut seen = Vec::new();
    for row in LossSelection::ABLATION_ROWS {
        let loss = LossSelection::ablation(row).ok_or(format!("row {row} not expressible"))?;
        ensure(!seen.contains(&loss), format!("row {row} duplicates another row"))?;
        seen.push(loss);
        let cfg = TrainConfig {
            loss,
            ..TrainConfig::default()
        };
        let got = compute_loss(&model, a, b, &cfg).unwrap();
        let mut expected = 0.0;
        if loss.sr_mse {
            expected += cfg.lambda_mse * mse;
        }
        if loss.sr_emd {
            expected += cfg.lambda_emd * emd;
        }
        if loss.sr_cd {
            expected += cfg.lambda_cd * sr_cd;
        }
        if loss.cr_cd {
            expected += cfg.lambda_cd * cr_cd;
        }
        ensure(
            got.total == expected,
            format!("row {row}: total {} ≠ {expected}", got.total),
        )?;
        let off = [
            (loss.sr_mse, got.sr_mse),
            (loss.sr_emd, got.sr_emd),
            (loss.sr_cd, got.sr_cd),
            (loss.cr_cd, got.cr_cd),
        ];
        ensure(
            off.iter().all(|&(on, v)| on || v == 0.0),
            format!("row {row}: disabled term contributes"),
        )?;
    }
    ensure(
        LossSelection::default() == LossSelection::ablation('b').unwrap(),
        "default is not row (b)",
    )?;
    Ok("rows (a)–(g) distinct; each total equals the sum of its enabled weighted terms exactly".into())
}

fn a7_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    write_synthetic_dataset(&data, SyntheticFamily::Dumbbell, 3, 64, 0, 5).unwrap();
    let manifest = Manifest::load(&data.join("manifest.json")).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        iters_per_epoch: 5,
        batch_pairs: 2,
        n_points: 64,
        rotation_augmentation: true,
        seed: 3,
        ..TrainConfig::default()
    };
    let config = ModelConfig {
        encoder: EncoderConfig {
            k: 8,
            ..EncoderConfig::test()
        },
        ..ModelConfig::test()
    };
    let mut outputs = Vec::new();
    for run in ["one", "two"] {
        let out = dir.path().join(run);
        train(std::slice::from_ref(&manifest), &config, &cfg, Some(&out), 1).map_err(|e| e.to_string())?;
        let csv = std::fs::read(out.join(METRICS_FILE)).unwrap();
        let ckpt = std::fs::read(out.join(CHECKPOINT_FILE)).unwrap();
        outputs.push((csv, ckpt));
    }
    ensure(outputs[0].0 == outputs[1].0, "metric CSVs differ")?;
    ensure(outputs[0].1 == outputs[1].1, "checkpoints differ")?;

    let path = dir.path().join("one").join(CHECKPOINT_FILE);
    let loaded = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    let resaved = dir.path().join("resaved.bin");
    loaded.save(&resaved).unwrap();
    let reloaded = Checkpoint::load(&resaved).unwrap().model;
    let original = {
        let mut state = TrainState::new(&config, &cfg).unwrap();
        let clouds = manifest.load_clouds().unwrap();
        train_clouds(&clouds, &mut state, 1, |_, _| Ok(())).unwrap();
        state.model
    };
    let probe = normalize_to_unit_sphere(&manifest.load_clouds().unwrap()[0]);
    for m in [&loaded.model, &reloaded] {
        let (a, b) = (
            original.encode(probe.points()).unwrap(),
            m.encode(probe.points()).unwrap(),
        );
        ensure(a == b, "encoder outputs differ after checkpoint round trip")?;
        ensure(
            original.self_reconstruct(probe.points()).unwrap() == m.self_reconstruct(probe.points()).unwrap(),
            "decoder outputs differ after checkpoint round trip",
        )?;
    }
    let lines = String::from_utf8_lossy(&outputs[0].0).lines().count();
    Ok(format!(
        "two seeded runs give identical CSVs ({lines} lines) and checkpoints; round trip is bitwise"
    ))
}

fn panic_text(e: &Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panic".into())
}

type Criterion = (&'static str, &'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 7] = [
        ("A1", "equivariance", a1_equivariance),
        ("A2", "gradients", a2_gradients),
        ("A3", "oracles", a3_oracles),
        ("A4", "synthetic overfit and rotation robustness", a4_synthetic_overfit),
        ("A5", "rotation sampling", a5_rotation_sampling),
        ("A6", "loss ablation plumbing", a6_loss_ablation),
        ("A7", "determinism", a7_determinism),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| f.eq_ignore_ascii_case(id)) {
            continue;
        }
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| Err(panic_text(&e)));
        let t = started.elapsed();
        match outcome {
            Ok(detail) => println!("{id} PASS {name} [{t:.1?}]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("{id} FAIL {name} [{t:.1?}]: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
