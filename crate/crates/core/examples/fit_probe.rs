//! Scratch probe: CPU cost of the desk end-to-end run, extrapolated.

use illumap_core::dataset::{generate_dataset, load_split, GenerateConfig};
use illumap_core::nn::ModelConfig;
use illumap_core::train::TrainConfig;

fn cpu_seconds() -> f64 {
    let stat = std::fs::read_to_string("/proc/self/stat").unwrap();
    let fields: Vec<&str> = stat.split_whitespace().collect();
    let utime: u64 = fields[13].parse().unwrap();
    let stime: u64 = fields[14].parse().unwrap();
    (utime + stime) as f64 / 100.0
}

fn main() {
    let t0 = std::time::Instant::now();
    let c0 = cpu_seconds();
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
    println!(
        "generate+load: {:.1}s cpu {:.1}s wall",
        cpu_seconds() - c0,
        t0.elapsed().as_secs_f64()
    );

    let epochs = 3;
    let cfg = TrainConfig {
        epochs,
        freeze_epoch: 2,
        ..TrainConfig::default()
    };
    let mc = ModelConfig::desk();
    let mut store = illumap_core::nn::init_params::<f32>(&mc, cfg.seed).unwrap();
    let mut state = illumap_core::train::AdamState::new(&store);
    for epoch in 0..epochs {
        let c1 = cpu_seconds();
        let t1 = std::time::Instant::now();
        let loss =
            illumap_core::train::train_epoch(&mut store, &mc, &train, &cfg, &mut state, epoch)
                .unwrap();
        let tc = cpu_seconds() - c1;
        let tw = t1.elapsed().as_secs_f64();
        let c2 = cpu_seconds();
        let stats = illumap_core::train::validate(&mut store, &mc, &val, cfg.batch_size).unwrap();
        let vc = cpu_seconds() - c2;
        println!(
            "epoch {epoch}: train {tc:.1}s cpu ({tw:.1}s wall, {:.2}s/step) val {vc:.1}s cpu | loss {loss:.3} val mean {:.3}",
            tc / 45.0,
            stats.mean
        );
    }
}
