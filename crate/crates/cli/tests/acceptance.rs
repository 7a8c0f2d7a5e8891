//! End-to-end acceptance checks, one test per criterion. Each test prints
//! a single `criterion N (...): pass|fail` line.
//!
//! The heavyweight checks (6, 7, 9) train real models on synthetic data
//! and enforce wall-clock budgets, so this target is the slow one in the
//! workspace; everything else finishes in seconds.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::{Array3, Array4};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use illumap_cli::cmd_ablate;
use illumap_core::dataset::{
    compose_scene, generate_dataset, generate_mix_map, generate_mondrian_reflectance,
    generate_sample, load_split, read_sample, sample_illuminants, write_sample,
    GenerateConfig, SceneSample,
};
use illumap_core::estimators::{gray_world, shades_of_gray, tile_global_estimate, white_patch};
use illumap_core::image::apply_correction;
use illumap_core::metrics::{angular_error, mean_angular_error, summarize_errors};
use illumap_core::nn::model::{images_to_nchw, maps_to_nchw, model_graph};
use illumap_core::nn::{init_params, load_checkpoint, save_checkpoint, IemConfig, ModelConfig};
use illumap_core::train::{adamw_step, fit, lr_at_epoch, validate, AdamState, TrainConfig};
use illumap_core::{Error, ImageTensor};

fn criterion(n: usize, what: &str, body: impl FnOnce()) {
    let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(body));
    match outcome {
        Ok(()) => println!("criterion {n} ({what}): pass"),
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            println!("criterion {n} ({what}): fail");
            panic!("criterion {n} ({what}): {msg}");
        }
    }
}

fn tiny_model(input_size: usize) -> ModelConfig {
    ModelConfig::uniform(
        input_size,
        IemConfig {
            encoder_depth: 2,
            width_multiplier: 0.25,
            ..IemConfig::default()
        },
    )
}

#[test]
fn c01_metric_correctness() {
    criterion(1, "metric correctness", || {
        let cases: [([f64; 3], [f64; 3], f64); 3] = [
            ([1.0, 0.0, 0.0], [2.0, 0.0, 0.0], 0.0),
            ([1.0, 0.0, 0.0], [0.0, 1.0, 0.0], 90.0),
            ([1.0, 0.0, 0.0], [1.0, 1.0, 0.0], 45.0),
        ];
        for (u, v, expect) in cases {
            let got = angular_error(u, v).unwrap();
            assert!(
                (got - expect).abs() < 1e-9,
                "angular_error({u:?}, {v:?}) = {got}, expected {expect}"
            );
        }
        let stats = summarize_errors(&[1.0f64, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert!((stats.mean - 3.0).abs() < 1e-12);
        assert!((stats.sd - 2.0f64.sqrt()).abs() < 1e-12);
        assert!((stats.median - 3.0).abs() < 1e-12);
        assert!((stats.trimean - 3.0).abs() < 1e-12);
    });
}

#[test]
fn c02_correction_round_trip() {
    criterion(2, "correction round trip", || {
        let mut worst = 0.0f64;
        for i in 0..50u64 {
            let refl = generate_mondrian_reflectance::<f64>(32, 32, 8, i);
            let illums = sample_illuminants::<f64>(2, 5.0, i ^ 0xabcd).unwrap();
            let mix = generate_mix_map::<f64>(32, 32, 2, i ^ 0x1234);
            let sample = compose_scene(&refl, &illums, &mix, "s", i).unwrap();
            let corrected = apply_correction(&sample.image, &sample.gt).unwrap();
            // the corrected image is the reflectance times one global
            // exposure factor; estimate it from the first texel
            let scale = corrected.data()[[0, 0, 0]] / refl.data()[[0, 0, 0]];
            for (c, r) in corrected.data().iter().zip(refl.data().iter()) {
                let rel = (c / r - scale).abs() / scale;
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-6, "max relative error {worst}");
    });
}

#[test]
fn c03_estimator_equivalences() {
    criterion(3, "estimator equivalences", || {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let mut gaps = vec![0.0f64; 4];
        for _ in 0..20 {
            let img = ImageTensor::<f64>::new(Array3::from_shape_fn((24, 24, 3), |_| {
                rng.random_range(0.05..1.0)
            }))
            .unwrap();
            let gw = gray_world(&img, None).unwrap();
            let sog1 = shades_of_gray(&img, 1.0, None).unwrap();
            assert_eq!(
                gw.map(f64::to_bits),
                sog1.map(f64::to_bits),
                "SoG(p=1) differs from Gray World"
            );
            let wp = white_patch(&img, None).unwrap();
            for (gi, p) in [1.0, 4.0, 20.0, 100.0].into_iter().enumerate() {
                let est = shades_of_gray(&img, p, None).unwrap();
                gaps[gi] += angular_error(est, wp).unwrap() / 20.0;
            }
        }
        for w in gaps.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-9,
                "SoG-to-WP gap not non-increasing: {gaps:?}"
            );
        }
        assert!(gaps[3] < 0.5, "final SoG(100)-to-WP gap {} deg", gaps[3]);
    });
}

#[test]
fn c04_fusion_invariants() {
    criterion(4, "fusion invariants", || {
        let mc = tiny_model(16);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for pass in 0..100u64 {
            let mut store = init_params::<f32>(&mc, pass).unwrap();
            let images = Array4::from_shape_fn((1, 3, 16, 16), |_| rng.random_range(0.05..1.0f32));
            let g = model_graph(images, &mut store, &mc, false).unwrap();
            let wts = g.tape.value(g.weights.expect("aifm weights"));
            let ups: Vec<&Array4<f32>> =
                g.branches.iter().map(|&(_, _, up)| g.tape.value(up)).collect();
            let fused = g.tape.value(g.fused);
            for y in 0..16 {
                for x in 0..16 {
                    let sum: f32 = (0..3).map(|k| wts[[0, k, y, x]]).sum();
                    assert!((sum - 1.0).abs() < 1e-5, "weight sum {sum} at ({y},{x})");
                    for c in 0..2 {
                        let vals: Vec<f32> = ups.iter().map(|u| u[[0, c, y, x]]).collect();
                        let lo = vals.iter().cloned().fold(f32::INFINITY, f32::min);
                        let hi = vals.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                        let f = fused[[0, c, y, x]];
                        assert!(
                            f >= lo - 1e-6 && f <= hi + 1e-6,
                            "fused {f} outside [{lo}, {hi}] at ({c},{y},{x})"
                        );
                    }
                }
            }
        }
    });
}

#[test]
fn c05_gradient_check() {
    criterion(5, "gradient check", || {
        let started = Instant::now();
        let mc = tiny_model(16);
        let mut store = init_params::<f64>(&mc, 50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let images = Array4::from_shape_fn((2, 3, 16, 16), |_| rng.random_range(0.05..1.0));
        let gt = Array4::from_shape_fn((2, 2, 16, 16), |_| rng.random_range(0.6..1.6));

        let run = |store: &mut illumap_core::nn::ParamStore<f64>| {
            let mut g = model_graph(images.clone(), store, &mc, true).unwrap();
            let loss = g.tape.angular_loss(g.fused, gt.clone(), None).unwrap();
            let grads = g.tape.backward(loss);
            (g.tape.scalar_value(loss), grads)
        };
        let (_, grads) = run(&mut store);
        assert!(!grads.is_empty());

        // 50 coordinates sampled across the trainable tensors; h is small
        // so that the probe interval rarely straddles a relu or pool kink
        let h = 1e-6;
        for probe in 0..50 {
            let (pi, ref ga) = grads[probe % grads.len()];
            let n_elems = ga.len();
            let e = rng.random_range(0..n_elems);
            let analytic = ga.as_slice().unwrap()[e];
            let orig = store.value(pi).as_slice().unwrap()[e];
            store.value_mut(pi).as_slice_mut().unwrap()[e] = orig + h;
            let (fp, _) = run(&mut store);
            store.value_mut(pi).as_slice_mut().unwrap()[e] = orig - h;
            let (fm, _) = run(&mut store);
            store.value_mut(pi).as_slice_mut().unwrap()[e] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            // the floor keeps near-zero gradients from comparing rounding
            // noise of the loss difference against itself
            let denom = analytic.abs().max(numeric.abs()).max(1e-4);
            let rel = ((analytic - numeric) / denom).abs();
            assert!(
                rel < 1e-3,
                "probe {probe}: param {} elem {e}: analytic {analytic} vs numeric {numeric} \
                 (rel {rel})",
                store.name(pi)
            );
        }
        assert!(
            started.elapsed() < Duration::from_secs(120),
            "gradient check took {:?}",
            started.elapsed()
        );
    });
}

#[test]
fn c06_trainability_oracle() {
    criterion(6, "trainability oracle", || {
        let started = Instant::now();
        let gen = GenerateConfig {
            count: 4,
            size: 64,
            seed: 60,
            ..GenerateConfig::default()
        };
        let samples: Vec<SceneSample<f32>> =
            (0..4).map(|i| generate_sample(&gen, i).unwrap()).collect();
        let images = images_to_nchw(&samples.iter().map(|s| &s.image).collect::<Vec<_>>());
        let gts = maps_to_nchw(&samples.iter().map(|s| &s.gt).collect::<Vec<_>>());

        let mc = ModelConfig::desk();
        let mut store = init_params::<f32>(&mc, 60).unwrap();
        let mut state = AdamState::new(&store);
        let tc = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut first = None;
        let mut last = 0.0f64;
        for _ in 0..200 {
            let mut g = model_graph(images.clone(), &mut store, &mc, true).unwrap();
            let loss = g.tape.angular_loss(g.fused, gts.clone(), None).unwrap();
            last = g.tape.scalar_value(loss) as f64;
            first.get_or_insert(last);
            let grads = g.tape.backward(loss);
            adamw_step(&mut store, &grads, &mut state, tc.base_lr, &tc).unwrap();
        }
        let first = first.unwrap();
        assert!(
            last < 0.1 * first,
            "loss went {first:.4} -> {last:.4}, needed < {:.4}",
            0.1 * first
        );
        assert!(
            started.elapsed() < Duration::from_secs(300),
            "overfit run took {:?}",
            started.elapsed()
        );
    });
}

#[test]
fn c07_desk_scale_end_to_end() {
    criterion(7, "desk-scale end to end", || {
        let started = Instant::now();
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let gen = GenerateConfig {
            count: 512,
            size: 64,
            illuminants: 2,
            min_separation_deg: 5.0,
            seed: 7,
            ..GenerateConfig::default()
        };
        let manifest = generate_dataset::<f32>(&data, &gen).unwrap();
        let train = load_split::<f32>(&data, &manifest, "train").unwrap();
        let val = load_split::<f32>(&data, &manifest, "val").unwrap();
        let test = load_split::<f32>(&data, &manifest, "test").unwrap();
        println!(
            "  dataset: {} train / {} val / {} test ({:.1?})",
            train.len(),
            val.len(),
            test.len(),
            started.elapsed()
        );

        let tc = TrainConfig::default();
        let mc = ModelConfig::desk();
        let mut result = fit(&tc, &mc, &train, &val, &dir.path().join("run")).unwrap();
        println!(
            "  trained {} epochs, best val mean AE {:.3} deg ({:.1?})",
            tc.epochs,
            result.best.val_mean_ae,
            started.elapsed()
        );

        let stats = validate(&mut result.store, &mc, &test, tc.batch_size).unwrap();
        let mut gw_errors = Vec::with_capacity(test.len());
        for s in &test {
            let est = gray_world(&s.image, Some(&s.mask)).unwrap();
            let map = tile_global_estimate(est, s.image.height(), s.image.width()).unwrap();
            gw_errors.push(mean_angular_error(&map, &s.gt, Some(&s.mask)).unwrap());
        }
        let gw = summarize_errors(&gw_errors).unwrap();
        println!(
            "  test mean AE: network {:.3} deg vs gray world {:.3} deg",
            stats.mean, gw.mean
        );
        assert!(stats.mean < 5.0, "network test mean AE {} deg", stats.mean);
        assert!(
            stats.mean < gw.mean,
            "network {} deg did not beat gray world {} deg",
            stats.mean,
            gw.mean
        );
        assert!(
            started.elapsed() < Duration::from_secs(30 * 60),
            "end-to-end run took {:?}",
            started.elapsed()
        );
    });
}

#[test]
fn c08_schedule_and_optimizer() {
    criterion(8, "schedule and optimizer", || {
        let tc = TrainConfig::paper();
        let expect = [
            (0, 1e-3),
            (300, (600.0 - 300.0) / 600.0 * 1e-3),
            (400, (600.0 - 400.0) / 600.0 * 1e-3),
            (450, (600.0 - 400.0) / 600.0 * 1e-3),
        ];
        for (epoch, lr) in expect {
            assert_eq!(lr_at_epoch(epoch, &tc), lr, "lr at epoch {epoch}");
        }

        // zero gradients and zero decay leave every parameter untouched
        let mc = tiny_model(16);
        let mut store = init_params::<f32>(&mc, 80).unwrap();
        let before: Vec<Vec<u32>> = (0..store.len())
            .map(|i| store.value(i).iter().map(|v| v.to_bits()).collect())
            .collect();
        let zero_grads: Vec<(usize, Array4<f32>)> = (0..store.len())
            .map(|i| (i, Array4::zeros(store.value(i).dim())))
            .collect();
        let mut state = AdamState::new(&store);
        let tc = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        adamw_step(&mut store, &zero_grads, &mut state, tc.base_lr, &tc).unwrap();
        for (i, bits) in before.iter().enumerate() {
            let after: Vec<u32> = store.value(i).iter().map(|v| v.to_bits()).collect();
            assert_eq!(*bits, after, "parameter {} changed", store.name(i));
        }
    });
}

#[test]
fn c09_ablation_harness() {
    criterion(9, "ablation harness", || {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let gen = GenerateConfig {
            count: 64,
            size: 32,
            illuminants: 2,
            seed: 9,
            ..GenerateConfig::default()
        };
        generate_dataset::<f32>(&data, &gen).unwrap();
        let cfg_path = dir.path().join("cfg.json");
        fs::write(
            &cfg_path,
            r#"{"epochs": 10, "freeze_epoch": 8, "batch_size": 8, "seed": 9,
                "input_size": 32, "encoder_depth": 2, "width_multiplier": 0.25}"#,
        )
        .unwrap();
        let out = dir.path().join("ablation");
        let rows = cmd_ablate(&data, Some(&cfg_path), &out, None).unwrap();
        assert_eq!(rows.len(), 5);
        let names: Vec<&str> = rows.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(
            names,
            ["drop_scale_1", "drop_scale_1_2", "drop_scale_1_4", "no_aifm", "full"]
        );
        let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
        assert_eq!(csv.lines().count(), 6, "header plus exactly 5 rows");

        let drop_mean: f32 = rows[..3].iter().map(|r| r.stats.mean).sum::<f32>() / 3.0;
        let full = rows[4].stats.mean;
        println!(
            "  ablation test mean AE: full {:.3} deg, drop-branch mean {:.3} deg",
            full, drop_mean
        );
        assert!(
            full <= drop_mean + 0.5,
            "full {} deg vs drop-branch mean {} deg + 0.5",
            full,
            drop_mean
        );
    });
}

#[test]
fn c10_format_round_trips() {
    criterion(10, "format round trips", || {
        let dir = tempfile::tempdir().unwrap();

        // dataset sample: write -> read -> write is byte-identical
        let gen = GenerateConfig {
            count: 1,
            size: 16,
            seed: 100,
            ..GenerateConfig::default()
        };
        let sample = generate_sample::<f32>(&gen, 0).unwrap();
        let d1 = dir.path().join("s1");
        let d2 = dir.path().join("s2");
        write_sample(&sample, &d1).unwrap();
        let back: SceneSample<f32> = read_sample(&d1).unwrap();
        write_sample(&back, &d2).unwrap();
        for entry in fs::read_dir(&d1).unwrap() {
            let name = entry.unwrap().file_name();
            assert_eq!(
                fs::read(d1.join(&name)).unwrap(),
                fs::read(d2.join(&name)).unwrap(),
                "{name:?} not byte-identical after a read/write cycle"
            );
        }

        // checkpoint: save -> load -> save is byte-identical
        let mc = tiny_model(16);
        let store = init_params::<f32>(&mc, 100).unwrap();
        let c1 = dir.path().join("c1");
        let c2 = dir.path().join("c2");
        save_checkpoint(&c1, &mc, &store, &[], None).unwrap();
        let cp = load_checkpoint::<f32>(&c1).unwrap();
        save_checkpoint(&c2, &cp.config, &cp.store, &cp.optim, cp.meta).unwrap();
        for entry in fs::read_dir(&c1).unwrap() {
            let name = entry.unwrap().file_name();
            assert_eq!(
                fs::read(c1.join(&name)).unwrap(),
                fs::read(c2.join(&name)).unwrap(),
                "{name:?} not byte-identical after a load/save cycle"
            );
        }

        // corruption is reported as FormatError, never read through
        let expect_format_error = |r: Result<(), Error>, what: &str| {
            match r {
                Err(Error::FormatError { .. }) => {}
                other => panic!("{what}: expected FormatError, got {other:?}"),
            }
        };
        let truncate = |p: &Path| {
            let b = fs::read(p).unwrap();
            fs::write(p, &b[..b.len() - 4]).unwrap();
        };

        let d3 = dir.path().join("s3");
        write_sample(&sample, &d3).unwrap();
        truncate(&d3.join("image.bin"));
        expect_format_error(read_sample::<f32>(&d3).map(|_| ()), "truncated image.bin");

        let d4 = dir.path().join("s4");
        write_sample(&sample, &d4).unwrap();
        fs::write(d4.join("meta.json"), "{not json").unwrap();
        expect_format_error(read_sample::<f32>(&d4).map(|_| ()), "mangled meta.json");

        let c3 = dir.path().join("c3");
        save_checkpoint(&c3, &mc, &store, &[], None).unwrap();
        truncate(&c3.join("t0000.bin"));
        expect_format_error(load_checkpoint::<f32>(&c3).map(|_| ()), "truncated tensor");

        let c4 = dir.path().join("c4");
        save_checkpoint(&c4, &mc, &store, &[], None).unwrap();
        let nan = f32::NAN.to_le_bytes().repeat(4);
        let path = c4.join("t0001.bin");
        let mut bytes = fs::read(&path).unwrap();
        bytes[..16].copy_from_slice(&nan);
        fs::write(&path, bytes).unwrap();
        expect_format_error(load_checkpoint::<f32>(&c4).map(|_| ()), "non-finite tensor");
    });
}
