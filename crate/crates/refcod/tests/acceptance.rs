//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its measured numbers. Run with `cargo test --test acceptance` (or as part
//! of `cargo test --workspace`).

mod common;

use common::oracles;
use ndarray::{Array2, Array4, ArrayD, Ix4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use refcod::autodiff::Tape;
use refcod::config::RunConfig;
use refcod::dataset::toy::{generate_toy_dataset, ToySpec};
use refcod::dataset::{load_index, Split};
use refcod::evaluation::evaluate_dataset;
use refcod::imageio::load_mask;
use refcod::metrics;
use refcod::model::{R2CNet, ReferenceInput};
use refcod::reference::ForegroundProvider;
use refcod::train::Trainer;

fn toy_cfg(c_d: usize, size: usize, k: usize, root: &str) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.c_d = c_d;
    cfg.data.image_size = size;
    cfg.data.k = k;
    cfg.data.root = root.to_string();
    cfg
}

/// Criterion 1: each metric matches its independent definition-level oracle
/// on 100 random pairs (16x16 - 64x64) within 1e-7 (MAE) / 1e-5 (others).
#[test]
fn criterion_1_metric_oracle_suite() {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20240811);
    let mut worst = [0.0f64; 4];
    for trial in 0..100 {
        let h = rng.random_range(16..=64);
        let w = rng.random_range(16..=64);
        let p = common::random_map(&mut rng, h, w);
        let g = common::random_mask(&mut rng, h, w);

        let d_mae = (metrics::mae(&p.view(), &g.view()).unwrap() - oracles::mae(&p, &g)).abs();
        let d_sm =
            (metrics::s_measure(&p.view(), &g.view()).unwrap() - oracles::s_measure(&p, &g)).abs();
        let d_ae = (metrics::e_measure_adaptive(&p.view(), &g.view()).unwrap()
            - oracles::e_measure_adaptive(&p, &g))
        .abs();
        let impl_wf = metrics::weighted_f_measure(&p.view(), &g.view()).unwrap();
        let oracle_wf = oracles::weighted_f(&p, &g).expect("mask has foreground");
        let d_wf = (impl_wf - oracle_wf).abs();

        assert!(d_mae < 1e-7, "trial {trial}: mae diff {d_mae}");
        assert!(d_sm < 1e-5, "trial {trial}: s-measure diff {d_sm}");
        assert!(d_ae < 1e-5, "trial {trial}: e-measure diff {d_ae}");
        assert!(d_wf < 1e-5, "trial {trial}: weighted-f diff {d_wf}");
        for (slot, d) in [d_mae, d_sm, d_ae, d_wf].into_iter().enumerate() {
            worst[slot] = worst[slot].max(d);
        }
    }
    println!(
        "ACCEPTANCE 1 metric-oracles: PASS (100 pairs; worst diffs mae {:.2e}, sm {:.2e}, ae {:.2e}, wf {:.2e}; {:.1?})",
        worst[0], worst[1], worst[2], worst[3], start.elapsed()
    );
}

/// Criterion 2: ground truth fed as prediction scores perfectly on 20 toy
/// masks (within 1e-9).
#[test]
fn criterion_2_perfect_prediction_fixture() {
    let start = std::time::Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("toy");
    let index = generate_toy_dataset(
        &root,
        &ToySpec {
            n_categories: 2,
            n_camo_per_cat: 10,
            n_ref_per_cat: 2,
            image_size: 64,
            rng_seed: 21,
        },
    )
    .unwrap();
    assert_eq!(index.camo_records.len(), 20);
    for rec in &index.camo_records {
        let m3 = load_mask(&rec.mask_path).unwrap();
        let (_, h, w) = m3.dim();
        let g: Array2<f64> = m3.into_shape_with_order((h, w)).unwrap();
        let sm = metrics::s_measure(&g.view(), &g.view()).unwrap();
        let ae = metrics::e_measure_adaptive(&g.view(), &g.view()).unwrap();
        let wf = metrics::weighted_f_measure(&g.view(), &g.view()).unwrap();
        let mae = metrics::mae(&g.view(), &g.view()).unwrap();
        assert!((sm - 1.0).abs() < 1e-9, "sm {sm}");
        assert!((ae - 1.0).abs() < 1e-9, "ae {ae}");
        assert!((wf - 1.0).abs() < 1e-9, "wf {wf}");
        assert!(mae.abs() < 1e-9, "mae {mae}");
    }
    println!(
        "ACCEPTANCE 2 perfect-prediction: PASS (20 masks exact within 1e-9; {:.1?})",
        start.elapsed()
    );
}

/// Criterion 3: masked average pooling and target matching match brute-force
/// per-pixel loops on 50 random instances each, to 1e-6.
#[test]
fn criterion_3_pooling_and_matching_oracles() {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(33);

    // Masked average pooling (pre-projection) against the loop oracle.
    for trial in 0..50 {
        let c = rng.random_range(1..=8);
        let h = rng.random_range(2..=6);
        let w = rng.random_range(2..=6);
        let feats = Array4::from_shape_fn((1, c, h, w), |_| rng.random_range(-2.0..2.0));
        // Half the trials need downsampling by an integer factor.
        let factor = if trial % 2 == 0 { 1 } else { rng.random_range(2..=4) };
        let map_big = loop {
            let m = Array2::from_shape_fn((h * factor, w * factor), |_| {
                if rng.random_range(0.0..1.0) < 0.4 {
                    rng.random_range(0.1..1.0)
                } else {
                    0.0
                }
            });
            if m.sum() > 0.05 {
                break m;
            }
        };
        let map_small = oracles::block_mean(&map_big, h, w);
        let expect = oracles::masked_pool(&feats, &map_small);

        let mut t = Tape::new();
        let fv = t.input(feats.clone());
        let mv = t.constant(
            map_big
                .clone()
                .into_shape_with_order((1, 1, h * factor, w * factor))
                .unwrap(),
        );
        let pooled = refcod::reference::masked_pool_raw(&mut t, fv, mv).unwrap();
        let got = t.value(pooled);
        for ci in 0..c {
            let d = (got[[0, ci]] - expect[[0, ci]]).abs();
            assert!(d < 1e-6, "pool trial {trial} channel {ci}: diff {d}");
        }
    }

    // Target matching against the per-position dot-product loop.
    let mut store = refcod::nn::ParamStore::new();
    let rmg = refcod::rmg::Rmg::new(&mut store, 7, 8, 3, refcod::rmg::KernelMode::Identity);
    for trial in 0..50 {
        let h = rng.random_range(2..=6);
        let w = rng.random_range(2..=6);
        let fused = Array4::from_shape_fn((1, 8, h, w), |_| rng.random_range(-1.5..1.5));
        let e = Array2::from_shape_fn((1, 8), |_| rng.random_range(-1.0..1.0));
        let mut t = Tape::new();
        let fv = t.constant(fused.clone());
        let ev = t.constant(e.clone());
        let heat = rmg.target_match(&mut t, &store, fv, ev);
        for i in 0..h {
            for j in 0..w {
                let mut dot = 0.0;
                for cch in 0..8 {
                    dot += e[[0, cch]] * fused[[0, cch, i, j]];
                }
                let got = t.value(heat)[[0, 0, i, j]];
                assert!(
                    (got - dot).abs() < 1e-6,
                    "match trial {trial} at ({i},{j}): {got} vs {dot}"
                );
            }
        }
    }
    println!(
        "ACCEPTANCE 3 pooling/matching oracles: PASS (50 + 50 instances within 1e-6; {:.1?})",
        start.elapsed()
    );
}

/// Criterion 4: finite-difference gradient checks (relative error < 1e-4,
/// double precision, c_d <= 8) for the modulation, the ConvLSTM cell, the
/// enrichment block, the decoder, and the full referring-mask pass.
#[test]
fn criterion_4_gradient_suite() {
    let start = std::time::Instant::now();
    let tol = 1e-4;
    let mut worst = 0.0f64;

    // Shared tiny modules (c_d = 4).
    let mut store = refcod::nn::ParamStore::new();
    let rmg = refcod::rmg::Rmg::new(&mut store, 11, 4, 3, refcod::rmg::KernelMode::Linear);
    let rfe = refcod::rfe::Rfe::new(&mut store, 11, 4, true);
    let decoder = refcod::head::DecodeHead::new(&mut store, 11, 4);

    let mix_loss = |t: &mut Tape, v: refcod::autodiff::Var, seed: u64| {
        // Project the output through a fixed random map so the scalar loss is
        // sensitive to every coordinate.
        let shape = t.shape(v).to_vec();
        let mut prng = ChaCha8Rng::seed_from_u64(seed);
        let weights = ArrayD::from_shape_fn(ndarray::IxDyn(&shape), |_| {
            prng.random_range(-1.0..1.0)
        });
        let wv = t.constant(weights);
        let prod = t.mul(v, wv);
        t.sum_all(prod)
    };

    // affine_modulate w.r.t. features and representation.
    let x = ArrayD::from_shape_fn(ndarray::IxDyn(&[1, 12, 3, 3]), |_| 0.0);
    let mut prng = ChaCha8Rng::seed_from_u64(41);
    let x = x.mapv(|_| prng.random_range(-1.0..1.0));
    let e = ArrayD::from_shape_fn(ndarray::IxDyn(&[1, 4]), |_| prng.random_range(-1.0..1.0));
    worst = worst.max(common::check_gradients(
        &|t: &mut Tape, vars: &[refcod::autodiff::Var]| {
            let y = rmg.affine_modulate(t, &store, vars[0], vars[1], 0);
            mix_loss(t, y, 1)
        },
        &[x, e.clone()],
        20,
        tol,
        101,
    ));

    // convlstm_cell on a 1x4x2x2 instance, w.r.t. input and both states.
    let mk = |seed: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(ndarray::IxDyn(&[1, 4, 2, 2]), |_| r.random_range(-1.0..1.0))
    };
    worst = worst.max(common::check_gradients(
        &|t: &mut Tape, vars: &[refcod::autodiff::Var]| {
            let (h, c) = rmg.cell.forward(t, &store, vars[0], vars[1], vars[2]);
            let lh = mix_loss(t, h, 2);
            let lc = mix_loss(t, c, 3);
            t.add(lh, lc)
        },
        &[mk(51), mk(52), mk(53)],
        16,
        tol,
        102,
    ));

    // enrich_at_scale (finest block) w.r.t. fused features and heatmap.
    let mut r = ChaCha8Rng::seed_from_u64(61);
    let fused = ArrayD::from_shape_fn(ndarray::IxDyn(&[1, 4, 4, 4]), |_| r.random_range(-1.0..1.0));
    let heat = ArrayD::from_shape_fn(ndarray::IxDyn(&[1, 1, 4, 4]), |_| r.random_range(-2.0..2.0));
    worst = worst.max(common::check_gradients(
        &|t: &mut Tape, vars: &[refcod::autodiff::Var]| {
            let sig = t.sigmoid(vars[1]);
            let s2 = rfe.enrich_at_scale(t, &store, vars[0], sig, 0, (4, 4), None);
            mix_loss(t, s2, 4)
        },
        &[fused.clone(), heat.clone()],
        20,
        tol,
        103,
    ));

    // decode_segmentation on an 8x8 enriched map.
    let mut r = ChaCha8Rng::seed_from_u64(71);
    let enriched =
        ArrayD::from_shape_fn(ndarray::IxDyn(&[1, 4, 8, 8]), |_| r.random_range(-1.0..1.0));
    worst = worst.max(common::check_gradients(
        &|t: &mut Tape, vars: &[refcod::autodiff::Var]| {
            let m = decoder.forward(t, &store, vars[0], (64, 64));
            mix_loss(t, m, 5)
        },
        &[enriched],
        20,
        tol,
        104,
    ));

    // Full rmg_forward w.r.t. all pyramid levels and the representation.
    let mut r = ChaCha8Rng::seed_from_u64(81);
    let f2 = ArrayD::from_shape_fn(ndarray::IxDyn(&[1, 4, 4, 4]), |_| r.random_range(-1.0..1.0));
    let f3 = ArrayD::from_shape_fn(ndarray::IxDyn(&[1, 4, 2, 2]), |_| r.random_range(-1.0..1.0));
    let f4 = ArrayD::from_shape_fn(ndarray::IxDyn(&[1, 4, 1, 1]), |_| r.random_range(-1.0..1.0));
    worst = worst.max(common::check_gradients(
        &|t: &mut Tape, vars: &[refcod::autodiff::Var]| {
            let pyramid = refcod::backbone::FeaturePyramid {
                f2: vars[0],
                f3: vars[1],
                f4: vars[2],
            };
            let (fused, heat) = rmg.forward(t, &store, &pyramid, vars[3]);
            let lf = mix_loss(t, fused, 6);
            let lh = mix_loss(t, heat, 7);
            t.add(lf, lh)
        },
        &[f2, f3, f4, e],
        12,
        tol,
        105,
    ));

    println!(
        "ACCEPTANCE 4 gradient-suite: PASS (worst relative error {worst:.3e} < 1e-4; {:.1?})",
        start.elapsed()
    );
}

/// Criterion 5: the full forward pass at 352x352 with c_d = 64 produces the
/// documented shapes end to end.
#[test]
fn criterion_5_shape_suite() {
    let start = std::time::Instant::now();
    let cfg = toy_cfg(64, 352, 5, "unused");
    let model = R2CNet::new(&cfg, 0).unwrap();
    let mut t = Tape::new();
    let camo = Array4::from_elem((1, 3, 352, 352), 0.25);
    let out = model
        .forward(&mut t, &camo, &ReferenceInput::Baseline)
        .unwrap();
    assert_eq!(t.shape(out.pyramid.f2), &[1, 64, 44, 44]);
    assert_eq!(t.shape(out.pyramid.f3), &[1, 64, 22, 22]);
    assert_eq!(t.shape(out.pyramid.f4), &[1, 64, 11, 11]);
    assert_eq!(t.shape(out.fused), &[1, 64, 44, 44]);
    assert_eq!(t.shape(out.heatmap), &[1, 1, 44, 44]);
    assert_eq!(t.shape(out.enriched), &[1, 64, 44, 44]);
    for m in out.predictions() {
        assert_eq!(t.shape(m), &[1, 1, 352, 352]);
        let v = t.value(m);
        assert!(v.iter().all(|&x| x > 0.0 && x < 1.0));
    }
    println!(
        "ACCEPTANCE 5 shape-suite: PASS (pyramid 64x{{44,22,11}}^2, fused 64x44x44, heatmap 1x44x44, enriched 64x44x44, 4 maps 1x352x352; {:.1?})",
        start.elapsed()
    );
}

/// Criterion 6: 50 optimizer steps on one fixed toy batch cut the structure
/// loss to below half its initial value.
#[test]
fn criterion_6_overfit_one_batch() {
    let start = std::time::Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("toy");
    generate_toy_dataset(
        &root,
        &ToySpec {
            n_categories: 2,
            n_camo_per_cat: 4,
            n_ref_per_cat: 4,
            image_size: 64,
            rng_seed: 5,
        },
    )
    .unwrap();
    let mut cfg = toy_cfg(16, 64, 2, root.to_str().unwrap());
    cfg.train.steps = 50;
    cfg.train.batch_size = 4;
    let mut trainer = Trainer::new(&cfg).unwrap();
    let batch = trainer.next_batch().unwrap();
    let initial = trainer.step(&batch).unwrap().total;
    let mut last = initial;
    for _ in 1..50 {
        last = trainer.step(&batch).unwrap().total;
    }
    assert!(
        last < 0.5 * initial,
        "loss {initial:.4} -> {last:.4} did not halve in 50 steps"
    );
    println!(
        "ACCEPTANCE 6 overfit-convergence: PASS (loss {initial:.4} -> {last:.4} in 50 steps; {:.1?})",
        start.elapsed()
    );
}

/// Criterion 7: on the two-object toy dataset the reference-conditioned
/// model beats the reference-free baseline by at least +0.10 weighted
/// F-measure, under identical configs and seeds.
#[test]
fn criterion_7_reference_discrimination() {
    let start = std::time::Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("toy");
    generate_toy_dataset(
        &root,
        &ToySpec {
            n_categories: 2,
            n_camo_per_cat: 310,
            n_ref_per_cat: 25,
            image_size: 64,
            rng_seed: 7,
        },
    )
    .unwrap();
    let root_str = root.to_str().unwrap();
    let test_index = load_index(&root, Split::Test).unwrap();

    let train_and_eval = |k: usize| {
        let mut cfg = toy_cfg(16, 64, k, root_str);
        cfg.train.steps = 1500;
        cfg.train.batch_size = 8;
        cfg.train.seed = 0;
        let mut trainer = Trainer::new(&cfg).unwrap();
        trainer.run(|_| {}).unwrap();
        let outcome = evaluate_dataset(
            &trainer.model,
            &trainer.provider,
            &test_index,
            k,
            64,
            refcod::nn::splitmix64(cfg.train.seed ^ 0xEA11),
        )
        .unwrap();
        outcome.report.overall
    };

    let referenced = train_and_eval(3);
    let baseline = train_and_eval(0);
    assert!(
        referenced.wf >= baseline.wf + 0.10,
        "referenced wf {:.4} vs baseline wf {:.4}: margin below +0.10",
        referenced.wf,
        baseline.wf
    );
    println!(
        "ACCEPTANCE 7 reference-discrimination: PASS (wf {:.4} referenced vs {:.4} baseline, margin {:.4}; sm {:.4} vs {:.4}; {:.1?})",
        referenced.wf,
        baseline.wf,
        referenced.wf - baseline.wf,
        referenced.sm,
        baseline.sm,
        start.elapsed()
    );
}

/// Criterion 8: the K-sweep and channel sweep run end to end, emit
/// well-formed reports, and parameter counts grow strictly with c_d.
#[test]
fn criterion_8_ablation_plumbing() {
    let start = std::time::Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("toy");
    generate_toy_dataset(
        &root,
        &ToySpec {
            n_categories: 2,
            n_camo_per_cat: 6,
            n_ref_per_cat: 25,
            image_size: 64,
            rng_seed: 9,
        },
    )
    .unwrap();
    let root_str = root.to_str().unwrap();
    let test_index = load_index(&root, Split::Test).unwrap();

    // K sweep on one trained model.
    let mut cfg = toy_cfg(16, 64, 2, root_str);
    cfg.train.steps = 30;
    cfg.train.batch_size = 4;
    let mut trainer = Trainer::new(&cfg).unwrap();
    trainer.run(|_| {}).unwrap();
    for k in 0..=5usize {
        let outcome =
            evaluate_dataset(&trainer.model, &trainer.provider, &test_index, k, 64, 1).unwrap();
        let json: serde_json::Value = serde_json::from_str(&outcome.report.to_json()).unwrap();
        for key in ["sm", "ae", "wf", "mae", "n", "splits"] {
            assert!(json.get(key).is_some(), "k={k}: report missing '{key}'");
        }
        assert_eq!(json["n"].as_u64().unwrap() as usize, test_index.camo_records.len());
    }

    // Channel sweep: strict parameter growth and an end-to-end step + eval.
    let mut last_params = 0usize;
    for c_d in [32usize, 64, 128, 256] {
        let mut cfg = toy_cfg(c_d, 64, 1, root_str);
        cfg.train.steps = 2;
        cfg.train.batch_size = 2;
        let mut trainer = Trainer::new(&cfg).unwrap();
        let params = trainer.model.param_count();
        assert!(
            params > last_params,
            "c_d={c_d}: params {params} not above {last_params}"
        );
        last_params = params;
        trainer.run(|_| {}).unwrap();
        let outcome =
            evaluate_dataset(&trainer.model, &trainer.provider, &test_index, 1, 64, 1).unwrap();
        assert!(outcome.report.overall.n > 0);
    }
    println!(
        "ACCEPTANCE 8 ablation-plumbing: PASS (k=0..5 reports well-formed; params strictly increasing over c_d sweep; {:.1?})",
        start.elapsed()
    );
}
