//! Training: the differentiable angular loss, linear-decay learning-rate
//! schedule, AdamW with decoupled weight decay, the epoch loop with
//! per-epoch validation and best-checkpoint selection, and the
//! ablation / parameter-grid harnesses.

use std::path::Path;

use ndarray::{Array3, Array4};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::SceneSample;
use crate::error::{Error, Result};
use crate::image::{IlluminantMap, ValidityMask};
use crate::metrics::{mean_angular_error, summarize_errors, ErrorStats};
use crate::nn::{
    images_to_nchw, maps_to_nchw, model_graph, nchw_to_map, save_checkpoint, CheckpointMeta,
    ModelConfig, ParamStore, Tape,
};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// The learning rate stops decaying after this epoch.
    pub freeze_epoch: usize,
    pub base_lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub betas: (f64, f64),
    pub adam_epsilon: f64,
}

impl Default for TrainConfig {
    /// Desk-scale defaults: 60 epochs, freeze at 40, batch 8.
    fn default() -> Self {
        Self {
            epochs: 60,
            freeze_epoch: 40,
            base_lr: 1e-3,
            batch_size: 8,
            weight_decay: 0.01,
            seed: 0,
            betas: (0.9, 0.999),
            adam_epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    /// Full-scale settings: 600 epochs, decay frozen at 400, batch 16.
    pub fn paper() -> Self {
        Self {
            epochs: 600,
            freeze_epoch: 400,
            batch_size: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.freeze_epoch == 0 || self.freeze_epoch > self.epochs {
            return Err(Error::ConfigError(
                "freeze_epoch must satisfy 0 < freeze_epoch <= epochs".into(),
            ));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::ConfigError("base_lr must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::ConfigError("batch_size must be > 0".into()));
        }
        Ok(())
    }
}

/// Linear decay (epochs - epoch)/epochs * base_lr up to the freeze epoch,
/// then constant at the freeze-epoch value.
pub fn lr_at_epoch(epoch: usize, config: &TrainConfig) -> f64 {
    let e = epoch.min(config.freeze_epoch);
    (config.epochs - e) as f64 / config.epochs as f64 * config.base_lr
}

/// Differentiable mean angular error over a batch of maps, in degrees.
/// Matches the metric path within the cosine-clamp residual.
pub fn angular_loss<T: Scalar>(
    pred: &[&IlluminantMap<T>],
    gt: &[&IlluminantMap<T>],
    masks: Option<&[&ValidityMask]>,
) -> Result<T> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "angular_loss over {} predictions vs {} ground truths",
            pred.len(),
            gt.len()
        )));
    }
    let mut tape = Tape::new();
    let pn = tape.leaf(maps_to_nchw(pred));
    let mask = masks.map(mask_batch);
    let loss = tape.angular_loss(pn, maps_to_nchw(gt), mask)?;
    Ok(tape.scalar_value(loss))
}

fn mask_batch(masks: &[&ValidityMask]) -> Array3<u8> {
    let (h, w) = (masks[0].height(), masks[0].width());
    Array3::from_shape_fn((masks.len(), h, w), |(n, y, x)| masks[n].data()[[y, x]])
}

/// First/second Adam moments per trainable tensor, plus the step counter.
pub struct AdamState<T: Scalar> {
    /// (store index, first moment, second moment)
    pub moments: Vec<(usize, Array4<T>, Array4<T>)>,
    pub step: usize,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let moments = store
            .trainable_indices()
            .into_iter()
            .map(|i| {
                let dim = store.value(i).dim();
                (i, Array4::zeros(dim), Array4::zeros(dim))
            })
            .collect();
        Self { moments, step: 0 }
    }

    /// Flattens the moments into checkpoint tensors.
    pub fn to_named_tensors(&self, store: &ParamStore<T>) -> Vec<(String, Array4<T>)> {
        let mut out = Vec::with_capacity(self.moments.len() * 2);
        for (i, m, v) in &self.moments {
            out.push((format!("optim.m.{}", store.name(*i)), m.clone()));
            out.push((format!("optim.v.{}", store.name(*i)), v.clone()));
        }
        out
    }

    /// Rebuilds moments from checkpoint tensors; missing entries stay zero.
    pub fn from_named_tensors(
        store: &ParamStore<T>,
        tensors: &[(String, Array4<T>)],
        step: usize,
    ) -> Self {
        let mut state = Self::new(store);
        state.step = step;
        for (i, m, v) in &mut state.moments {
            let name = store.name(*i);
            for (tname, value) in tensors {
                if tname == &format!("optim.m.{name}") {
                    *m = value.clone();
                } else if tname == &format!("optim.v.{name}") {
                    *v = value.clone();
                }
            }
        }
        state
    }
}

/// One AdamW update: bias-corrected moment step plus decoupled decay
/// `p <- p - lr*wd*p`. Gradients are keyed by store index; trainable
/// tensors without a gradient are only decayed.
pub fn adamw_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &[(usize, Array4<T>)],
    state: &mut AdamState<T>,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    for (i, g) in grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::TrainingDiverged(format!(
                "non-finite gradient for {}",
                store.name(*i)
            )));
        }
    }
    state.step += 1;
    let (b1, b2) = config.betas;
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    let b1t = T::from_f64_c(b1);
    let b2t = T::from_f64_c(b2);
    let one = T::one();
    let lrt = T::from_f64_c(lr);
    let inv_bc1 = T::from_f64_c(1.0 / bc1);
    let inv_bc2 = T::from_f64_c(1.0 / bc2);
    let eps = T::from_f64_c(config.adam_epsilon);
    let decay = T::from_f64_c(lr * config.weight_decay);
    for (i, m, v) in &mut state.moments {
        let grad = grads.iter().find(|(gi, _)| gi == i).map(|(_, g)| g);
        if let Some(g) = grad {
            let p = store.value_mut(*i);
            let ps = p.as_slice_mut().unwrap();
            let ms = m.as_slice_mut().unwrap();
            let vs = v.as_slice_mut().unwrap();
            let gs = g.as_slice().expect("gradients are standard layout");
            for j in 0..ps.len() {
                let gv = gs[j];
                let mv = b1t * ms[j] + (one - b1t) * gv;
                let vv = b2t * vs[j] + (one - b2t) * gv * gv;
                ms[j] = mv;
                vs[j] = vv;
                let mhat = mv * inv_bc1;
                let vhat = vv * inv_bc2;
                ps[j] = ps[j] - lrt * (mhat / (vhat.sqrt() + eps)) - decay * ps[j];
            }
        } else if config.weight_decay != 0.0 {
            store.value_mut(*i).mapv_inplace(|p| p - decay * p);
        }
    }
    Ok(())
}

fn batch_tensors<T: Scalar>(
    samples: &[SceneSample<T>],
    idx: &[usize],
) -> (Array4<T>, Array4<T>, Option<Array3<u8>>) {
    let images: Vec<_> = idx.iter().map(|&i| &samples[i].image).collect();
    let gts: Vec<_> = idx.iter().map(|&i| &samples[i].gt).collect();
    let any_masked = idx.iter().any(|&i| samples[i].mask.count_valid()
        != samples[i].mask.height() * samples[i].mask.width());
    let mask = if any_masked {
        let masks: Vec<_> = idx.iter().map(|&i| &samples[i].mask).collect();
        Some(mask_batch(&masks))
    } else {
        None
    };
    (images_to_nchw(&images), maps_to_nchw(&gts), mask)
}

/// One full pass over the training split: deterministic per-(seed, epoch)
/// shuffle, batched forward/backward, AdamW updates. Returns the
/// sample-weighted mean loss.
pub fn train_epoch<T: Scalar>(
    store: &mut ParamStore<T>,
    model_config: &ModelConfig,
    samples: &[SceneSample<T>],
    config: &TrainConfig,
    state: &mut AdamState<T>,
    epoch: usize,
) -> Result<T> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("train_epoch on empty split".into()));
    }
    config.validate()?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let shuffle_seed = config
        .seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(epoch as u64);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    let lr = lr_at_epoch(epoch, config);
    let mut loss_sum = T::zero();
    for batch in order.chunks(config.batch_size) {
        let (images, gts, mask) = batch_tensors(samples, batch);
        let mut g = model_graph(images, store, model_config, true)?;
        let loss = g.tape.angular_loss(g.fused, gts, mask)?;
        let value = g.tape.scalar_value(loss);
        if !value.is_finite() {
            return Err(Error::TrainingDiverged(format!(
                "loss became non-finite at epoch {epoch}"
            )));
        }
        let grads = g.tape.backward(loss);
        adamw_step(store, &grads, state, lr, config)?;
        loss_sum = loss_sum + value * T::from_usize(batch.len()).unwrap();
    }
    Ok(loss_sum / T::from_usize(samples.len()).unwrap())
}

/// Eval-mode forward over a split; per-image mean angular error with masks
/// applied, then summary statistics over images.
pub fn validate<T: Scalar>(
    store: &mut ParamStore<T>,
    model_config: &ModelConfig,
    samples: &[SceneSample<T>],
    batch_size: usize,
) -> Result<ErrorStats<T>> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("validate on empty split".into()));
    }
    let mut errors = Vec::with_capacity(samples.len());
    let idx: Vec<usize> = (0..samples.len()).collect();
    for batch in idx.chunks(batch_size.max(1)) {
        let images: Vec<_> = batch.iter().map(|&i| &samples[i].image).collect();
        let g = model_graph(images_to_nchw(&images), store, model_config, false)?;
        for (n, &i) in batch.iter().enumerate() {
            let pred = nchw_to_map(g.tape.value(g.fused), n)?;
            errors.push(mean_angular_error(
                &pred,
                &samples[i].gt,
                Some(&samples[i].mask),
            )?);
        }
    }
    summarize_errors(&errors)
}

/// One line of the training log CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_mean: f64,
    pub val_sd: f64,
    pub val_median: f64,
    pub val_trimean: f64,
}

pub struct FitResult<T: Scalar> {
    pub store: ParamStore<T>,
    /// Metadata of the checkpoint with the lowest validation mean AE.
    pub best: CheckpointMeta,
    pub log: Vec<EpochLog>,
}

/// Renders the log in the fixed CSV schema.
pub fn training_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,lr,train_loss,val_mean,val_sd,val_median,val_trimean\n");
    for row in log {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.epoch, row.lr, row.train_loss, row.val_mean, row.val_sd, row.val_median,
            row.val_trimean
        ));
    }
    out
}

/// Full training run: fresh parameters, per-epoch validation, checkpoint
/// of the best-validation epoch written under `out_dir/best`. Returns the
/// best parameters reloaded from that checkpoint.
pub fn fit<T: Scalar>(
    config: &TrainConfig,
    model_config: &ModelConfig,
    train: &[SceneSample<T>],
    val: &[SceneSample<T>],
    out_dir: &Path,
) -> Result<FitResult<T>> {
    config.validate()?;
    model_config.validate()?;
    let mut store = crate::nn::init_params::<T>(model_config, config.seed)?;
    let mut state = AdamState::new(&store);
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<CheckpointMeta> = None;
    let best_dir = out_dir.join("best");
    for epoch in 0..config.epochs {
        let train_loss = train_epoch(&mut store, model_config, train, config, &mut state, epoch)?;
        let stats = validate(&mut store, model_config, val, config.batch_size)?;
        let val_mean = stats.mean.to_f64().unwrap();
        log.push(EpochLog {
            epoch,
            lr: lr_at_epoch(epoch, config),
            train_loss: train_loss.to_f64().unwrap(),
            val_mean,
            val_sd: stats.sd.to_f64().unwrap(),
            val_median: stats.median.to_f64().unwrap(),
            val_trimean: stats.trimean.to_f64().unwrap(),
        });
        if best.map_or(true, |b| val_mean < b.val_mean_ae) {
            let meta = CheckpointMeta {
                epoch,
                step: state.step,
                val_mean_ae: val_mean,
            };
            best = Some(meta);
            save_checkpoint(
                &best_dir,
                model_config,
                &store,
                &state.to_named_tensors(&store),
                Some(meta),
            )?;
        }
    }
    let best = best.expect("epochs >= 1 guarantees a best checkpoint");
    let reloaded = crate::nn::load_checkpoint::<T>(&best_dir)?;
    Ok(FitResult {
        store: reloaded.store,
        best,
        log,
    })
}

/// One row of the (depth, width) parameter grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridRow<T: Scalar> {
    pub encoder_depth: usize,
    pub width_multiplier: f64,
    pub stats: ErrorStats<T>,
}

/// Trains one model per (D, theta) pair and evaluates each on `eval`.
pub fn run_parameter_grid<T: Scalar>(
    config: &TrainConfig,
    base: &ModelConfig,
    pairs: &[(usize, f64)],
    train: &[SceneSample<T>],
    val: &[SceneSample<T>],
    eval: &[SceneSample<T>],
    out_dir: &Path,
) -> Result<Vec<GridRow<T>>> {
    let mut rows = Vec::with_capacity(pairs.len());
    for &(depth, theta) in pairs {
        let mut mc = *base;
        for b in &mut mc.branches {
            b.encoder_depth = depth;
            b.width_multiplier = theta;
        }
        let dir = out_dir.join(format!("grid_d{depth}_t{theta}"));
        let mut result = fit(config, &mc, train, val, &dir)?;
        let stats = validate(&mut result.store, &mc, eval, config.batch_size)?;
        rows.push(GridRow {
            encoder_depth: depth,
            width_multiplier: theta,
            stats,
        });
    }
    Ok(rows)
}

/// The five ablation variants: drop one branch at a time, drop the fusion
/// module, and the full model.
pub fn ablation_variants(base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    let mut variants = Vec::new();
    let labels = ["drop_scale_1", "drop_scale_1_2", "drop_scale_1_4"];
    for (bi, label) in labels.iter().enumerate() {
        let mut mc = *base;
        mc.branch_enabled[bi] = false;
        variants.push((label.to_string(), mc));
    }
    let mut no_aifm = *base;
    no_aifm.aifm_enabled = false;
    variants.push(("no_aifm".to_string(), no_aifm));
    variants.push(("full".to_string(), *base));
    variants
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow<T: Scalar> {
    pub name: String,
    pub stats: ErrorStats<T>,
}

/// Trains and evaluates every ablation variant with a shared seed and a
/// shared split assignment.
pub fn run_ablation<T: Scalar>(
    config: &TrainConfig,
    base: &ModelConfig,
    train: &[SceneSample<T>],
    val: &[SceneSample<T>],
    eval: &[SceneSample<T>],
    out_dir: &Path,
) -> Result<Vec<AblationRow<T>>> {
    let mut rows = Vec::new();
    for (name, mc) in ablation_variants(base) {
        let dir = out_dir.join(&name);
        let mut result = fit(config, &mc, train, val, &dir)?;
        let stats = validate(&mut result.store, &mc, eval, config.batch_size)?;
        rows.push(AblationRow { name, stats });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_sample, GenerateConfig};
    use crate::nn::{init_params, IemConfig};
    use ndarray::Array3;

    fn paper_schedule() -> TrainConfig {
        TrainConfig::paper()
    }

    #[test]
    fn lr_schedule_matches_closed_form() {
        let cfg = paper_schedule();
        assert_eq!(lr_at_epoch(0, &cfg), 0.001);
        assert_eq!(lr_at_epoch(300, &cfg), 0.0005);
        let at_freeze = (600.0 - 400.0) / 600.0 * 0.001;
        assert_eq!(lr_at_epoch(400, &cfg), at_freeze);
        assert_eq!(lr_at_epoch(450, &cfg), at_freeze);
        for e in 1..cfg.epochs {
            assert!(lr_at_epoch(e, &cfg) <= lr_at_epoch(e - 1, &cfg));
        }
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig::uniform(
            16,
            IemConfig {
                encoder_depth: 2,
                width_multiplier: 0.25,
                ..IemConfig::default()
            },
        )
    }

    #[test]
    fn adamw_zero_grad_identities() {
        let mc = tiny_model();
        let store0 = init_params::<f64>(&mc, 5).unwrap();
        // zero gradient, zero decay: bitwise identity
        let mut store = init_params::<f64>(&mc, 5).unwrap();
        let mut state = AdamState::new(&store);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let zero_grads: Vec<(usize, Array4<f64>)> = store
            .trainable_indices()
            .into_iter()
            .map(|i| (i, Array4::zeros(store.value(i).dim())))
            .collect();
        adamw_step(&mut store, &zero_grads, &mut state, 0.1, &cfg).unwrap();
        for i in 0..store.len() {
            assert_eq!(store.value(i), store0.value(i));
        }
        // zero gradient, wd 0.1, lr 0.1: every trainable param scaled by 0.99
        let mut store = init_params::<f64>(&mc, 5).unwrap();
        let mut state = AdamState::new(&store);
        let cfg = TrainConfig {
            weight_decay: 0.1,
            ..TrainConfig::default()
        };
        adamw_step(&mut store, &zero_grads, &mut state, 0.1, &cfg).unwrap();
        for i in store0.trainable_indices() {
            for (a, b) in store.value(i).iter().zip(store0.value(i).iter()) {
                assert!((a - b * 0.99).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn adamw_single_step_matches_hand_formula() {
        let mut store = ParamStore::<f64>::new();
        let i = store.add("p", ndarray::ArrayD::from_elem(vec![1, 1, 1, 1], 0.5), true);
        let mut state = AdamState::new(&store);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let grads = vec![(i, Array4::from_elem((1, 1, 1, 1), 1.0))];
        adamw_step(&mut store, &grads, &mut state, 0.1, &cfg).unwrap();
        let expected = 0.5 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((store.value(i)[[0, 0, 0, 0]] - expected).abs() < 1e-12);
    }

    #[test]
    fn adamw_rejects_non_finite_gradient() {
        let mut store = ParamStore::<f64>::new();
        let i = store.add("p", ndarray::ArrayD::zeros(vec![1, 1, 1, 1]), true);
        let mut state = AdamState::new(&store);
        let grads = vec![(i, Array4::from_elem((1, 1, 1, 1), f64::NAN))];
        assert!(matches!(
            adamw_step(&mut store, &grads, &mut state, 0.1, &TrainConfig::default()),
            Err(Error::TrainingDiverged(_))
        ));
    }

    #[test]
    fn angular_loss_agrees_with_metric_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for _ in 0..3 {
            preds.push(
                IlluminantMap::<f64>::new(Array3::from_shape_fn((5, 5, 2), |_| {
                    rng.random_range(0.6..1.6)
                }))
                .unwrap(),
            );
            gts.push(
                IlluminantMap::<f64>::new(Array3::from_shape_fn((5, 5, 2), |_| {
                    rng.random_range(0.6..1.6)
                }))
                .unwrap(),
            );
        }
        let pr: Vec<_> = preds.iter().collect();
        let gr: Vec<_> = gts.iter().collect();
        let loss = angular_loss(&pr, &gr, None).unwrap();
        let metric: f64 = preds
            .iter()
            .zip(&gts)
            .map(|(p, g)| mean_angular_error(p, g, None).unwrap())
            .sum::<f64>()
            / 3.0;
        assert!((loss - metric).abs() < 0.03);
        assert!(loss >= 0.0);
    }

    #[test]
    fn angular_loss_identical_maps_within_clamp_residual() {
        let m = IlluminantMap::<f64>::new(Array3::from_elem((4, 4, 2), 1.0)).unwrap();
        let loss = angular_loss(&[&m], &[&m], None).unwrap();
        assert!(loss < 0.03);
    }

    fn desk_samples(count: usize, size: usize) -> Vec<SceneSample<f32>> {
        let cfg = GenerateConfig {
            count,
            size,
            ..GenerateConfig::default()
        };
        (0..count).map(|i| generate_sample(&cfg, i).unwrap()).collect()
    }

    #[test]
    fn train_epoch_is_deterministic() {
        let samples = desk_samples(6, 16);
        let mc = tiny_model();
        let cfg = TrainConfig {
            batch_size: 2,
            ..TrainConfig::default()
        };
        let run = || {
            let mut store = init_params::<f32>(&mc, 1).unwrap();
            let mut state = AdamState::new(&store);
            train_epoch(&mut store, &mc, &samples, &cfg, &mut state, 0).unwrap()
        };
        let a = run();
        let b = run();
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn validate_matches_manual_loop() {
        let samples = desk_samples(5, 16);
        let mc = tiny_model();
        let mut store = init_params::<f32>(&mc, 2).unwrap();
        let stats = validate(&mut store, &mc, &samples, 2).unwrap();
        let mut errors = Vec::new();
        for s in &samples {
            let (pred, _) = crate::nn::model_forward(&s.image, &mut store, &mc, false).unwrap();
            errors.push(mean_angular_error(&pred, &s.gt, Some(&s.mask)).unwrap());
        }
        let manual = summarize_errors(&errors).unwrap();
        assert_eq!(stats, manual);
    }

    #[test]
    fn fit_one_epoch_writes_best_checkpoint() {
        let samples = desk_samples(8, 16);
        let mc = tiny_model();
        let cfg = TrainConfig {
            epochs: 1,
            freeze_epoch: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let result = fit(&cfg, &mc, &samples[..6], &samples[6..], dir.path()).unwrap();
        assert_eq!(result.log.len(), 1);
        assert_eq!(result.best.epoch, 0);
        // recorded val AE matches re-running validate on the stored params
        let mut store = result.store;
        let stats = validate(&mut store, &mc, &samples[6..], 4).unwrap();
        assert!((stats.mean as f64 - result.best.val_mean_ae).abs() < 1e-6);
        assert!(dir.path().join("best/manifest.json").exists());
    }

    #[test]
    fn training_log_csv_schema() {
        let log = vec![EpochLog {
            epoch: 0,
            lr: 0.001,
            train_loss: 5.0,
            val_mean: 4.0,
            val_sd: 1.0,
            val_median: 3.5,
            val_trimean: 3.6,
        }];
        let csv = training_log_csv(&log);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,lr,train_loss,val_mean,val_sd,val_median,val_trimean"
        );
        assert_eq!(lines.next().unwrap(), "0,0.001,5,4,1,3.5,3.6");
    }

    #[test]
    fn ablation_variants_cover_five_rows() {
        let base = tiny_model();
        let variants = ablation_variants(&base);
        assert_eq!(variants.len(), 5);
        assert_eq!(variants[4].1, base);
        assert!(!variants[3].1.aifm_enabled);
        for (bi, v) in variants[..3].iter().enumerate() {
            assert!(!v.1.branch_enabled[bi]);
            assert_eq!(v.1.enabled_branches().len(), 2);
        }
    }
}
