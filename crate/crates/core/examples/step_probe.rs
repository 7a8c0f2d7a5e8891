//! Phase breakdown of one desk-scale training step.

use std::time::Instant;

use illumap_core::dataset::{generate_sample, GenerateConfig};
use illumap_core::nn::model::{images_to_nchw, maps_to_nchw, model_graph};
use illumap_core::nn::{init_params, ModelConfig};
use illumap_core::train::{adamw_step, AdamState, TrainConfig};

fn cpu_seconds() -> f64 {
    let stat = std::fs::read_to_string("/proc/self/stat").unwrap();
    let fields: Vec<&str> = stat.split_whitespace().collect();
    let utime: u64 = fields[13].parse().unwrap();
    let stime: u64 = fields[14].parse().unwrap();
    (utime + stime) as f64 / 100.0
}

fn main() {
    let gen = GenerateConfig { count: 8, size: 64, ..GenerateConfig::default() };
    let samples: Vec<_> = (0..8).map(|i| generate_sample::<f32>(&gen, i).unwrap()).collect();
    let mc = ModelConfig::desk();
    let mut store = init_params::<f32>(&mc, 0).unwrap();
    let mut state = AdamState::new(&store);
    let cfg = TrainConfig::default();
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let batch = images_to_nchw(&images);
    let gts: Vec<_> = samples.iter().map(|s| &s.gt).collect();
    let gtb = maps_to_nchw(&gts);

    use illumap_core::nn::graph::timing;
    use std::sync::atomic::Ordering;
    let mut best = f64::INFINITY;
    let mut op_min = [u64::MAX; 11];
    let mut sub_min = [u64::MAX; 8];
    for round in 0..16 {
        let c0 = cpu_seconds();
        let t = Instant::now();
        let mut g = model_graph(batch.clone(), &mut store, &mc, true).unwrap();
        let loss = g.tape.angular_loss(g.fused, gtb.clone(), None).unwrap();
        let fwd = t.elapsed();
        let t = Instant::now();
        let grads = g.tape.backward(loss);
        let bwd = t.elapsed();
        let t = Instant::now();
        adamw_step(&mut store, &grads, &mut state, 1e-3, &cfg).unwrap();
        let opt = t.elapsed();
        let cpu = cpu_seconds() - c0;
        best = best.min(cpu);
        for (m, v) in op_min.iter_mut().zip(timing::NS.iter()) {
            *m = (*m).min(v.swap(0, Ordering::Relaxed));
        }
        for (m, v) in sub_min.iter_mut().zip(timing::SUB.iter()) {
            *m = (*m).min(v.swap(0, Ordering::Relaxed));
        }
        println!("round {round}: cpu {cpu:.2}s | fwd {fwd:?} bwd {bwd:?} opt {opt:?}");
    }
    println!("best step cpu: {best:.2}s");
    let fmt = |names: &[&str], mins: &[u64]| {
        names
            .iter()
            .zip(mins)
            .map(|(k, v)| format!("{k} {:.0}", *v as f64 / 1e6))
            .collect::<Vec<_>>()
            .join(" ")
    };
    println!("op mins:  {}", fmt(&timing::KINDS, &op_min));
    println!("sub mins: {}", fmt(&timing::SUB_KINDS, &sub_min));

    let c0 = cpu_seconds();
    for _ in 0..3 {
        let g = model_graph(batch.clone(), &mut store, &mc, false).unwrap();
        std::hint::black_box(g.tape.value(g.fused));
    }
    println!("fwd eval batch8: {:.0} ms cpu", (cpu_seconds() - c0) / 3.0 * 1e3);
}
