//! The tri-branch illuminant estimation network: DCB/UCB building blocks,
//! the U-Net-style IEM branch, the attentional fusion module, and the full
//! multi-scale forward pass.

use ndarray::{Array2, Array3, Array4, ArrayD};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{IlluminantMap, ImageTensor};
use crate::scalar::Scalar;

use super::graph::{NodeId, Tape};
use super::params::ParamStore;

/// Spatial downscale factor of each branch input relative to full resolution.
pub const BRANCH_DIVISORS: [usize; 3] = [1, 2, 4];

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

/// One encoder-decoder branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IemConfig {
    /// Number of encoder DCBs (D).
    pub encoder_depth: usize,
    /// Width multiplier theta applied to the base channel count.
    pub width_multiplier: f64,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for IemConfig {
    fn default() -> Self {
        Self {
            encoder_depth: 4,
            width_multiplier: 1.0,
            base_channels: 64,
            in_channels: 3,
            out_channels: 2,
        }
    }
}

impl IemConfig {
    /// Channel count at encoder level `l`: round(C0 * theta) * 2^l, floored at 4.
    pub fn channels(&self, level: usize) -> usize {
        let base = (self.base_channels as f64 * self.width_multiplier).round() as usize;
        (base.max(1) << level).max(4)
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_depth < 2 {
            return Err(Error::ConfigError("encoder_depth must be >= 2".into()));
        }
        if !(self.width_multiplier > 0.0) {
            return Err(Error::ConfigError("width_multiplier must be > 0".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::ConfigError("base_channels must be > 0".into()));
        }
        Ok(())
    }

    /// Spatial divisibility the encoder needs: 2^(D-1) from the interleaved pools.
    pub fn pool_factor(&self) -> usize {
        1 << (self.encoder_depth - 1)
    }
}

/// Full tri-branch model configuration; branch scales are fixed at 1, 1/2, 1/4.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_size: usize,
    pub branches: [IemConfig; 3],
    pub branch_enabled: [bool; 3],
    pub aifm_enabled: bool,
}

impl ModelConfig {
    /// Uniform config: the same IEM at all three scales, AIFM on.
    pub fn uniform(input_size: usize, iem: IemConfig) -> Self {
        Self {
            input_size,
            branches: [iem; 3],
            branch_enabled: [true; 3],
            aifm_enabled: true,
        }
    }

    /// Desk-scale default: S=64, theta=1/4, D=4.
    pub fn desk() -> Self {
        Self::uniform(
            64,
            IemConfig {
                width_multiplier: 0.25,
                ..IemConfig::default()
            },
        )
    }

    pub fn enabled_branches(&self) -> Vec<usize> {
        (0..3).filter(|&i| self.branch_enabled[i]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let enabled = self.enabled_branches();
        if enabled.is_empty() {
            return Err(Error::ConfigError("no branch enabled".into()));
        }
        if self.aifm_enabled && enabled.len() < 2 {
            return Err(Error::ConfigError(
                "aifm requires at least 2 enabled branches".into(),
            ));
        }
        for &bi in &enabled {
            let cfg = &self.branches[bi];
            cfg.validate()?;
            let div = BRANCH_DIVISORS[bi] * cfg.pool_factor();
            if self.input_size % div != 0 {
                return Err(Error::ShapeMismatch(format!(
                    "input size {} not divisible by {} (branch {}, depth {})",
                    self.input_size, div, bi, cfg.encoder_depth
                )));
            }
        }
        Ok(())
    }
}

/// Per-branch intermediates from a forward pass.
pub struct BranchOutput<T: Scalar> {
    pub branch: usize,
    /// Estimate at the branch's own resolution.
    pub map: IlluminantMap<T>,
    /// Fusion weight per pixel at full resolution; None without AIFM.
    pub weights: Option<Array2<T>>,
}

/// Name, shape, trainable flag for every tensor the config implies.
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

fn push_conv(specs: &mut Vec<ParamSpec>, prefix: &str, c_out: usize, c_in: usize, k: usize) {
    specs.push(ParamSpec {
        name: format!("{prefix}.w"),
        shape: vec![c_out, c_in, k, k],
        trainable: true,
    });
    specs.push(ParamSpec {
        name: format!("{prefix}.b"),
        shape: vec![1, c_out, 1, 1],
        trainable: true,
    });
}

fn push_bn(specs: &mut Vec<ParamSpec>, prefix: &str, c: usize) {
    for (suffix, trainable) in [("gamma", true), ("beta", true), ("rmean", false), ("rvar", false)]
    {
        specs.push(ParamSpec {
            name: format!("{prefix}.{suffix}"),
            shape: vec![1, c, 1, 1],
            trainable,
        });
    }
}

fn push_dcb(specs: &mut Vec<ParamSpec>, prefix: &str, c_in: usize, c_out: usize) {
    push_conv(specs, &format!("{prefix}.conv1"), c_out, c_in, 3);
    push_bn(specs, &format!("{prefix}.bn1"), c_out);
    push_conv(specs, &format!("{prefix}.conv2"), c_out, c_out, 3);
    push_bn(specs, &format!("{prefix}.bn2"), c_out);
}

/// The full, ordered shape table for a config. Initialization, checkpoint
/// loading, and the optimizer all iterate this same list.
pub fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    for &bi in &config.enabled_branches() {
        let cfg = &config.branches[bi];
        let p = format!("b{bi}");
        let d = cfg.encoder_depth;
        for l in 0..d {
            let c_in = if l == 0 { cfg.in_channels } else { cfg.channels(l - 1) };
            push_dcb(&mut specs, &format!("{p}.enc{l}"), c_in, cfg.channels(l));
        }
        for l in (0..d - 1).rev() {
            let c = cfg.channels(l);
            push_conv(&mut specs, &format!("{p}.dec{l}.up"), c, cfg.channels(l + 1), 3);
            push_dcb(&mut specs, &format!("{p}.dec{l}"), 2 * c, c);
        }
        specs.push(ParamSpec {
            name: format!("{p}.head.w"),
            shape: vec![cfg.out_channels, cfg.channels(0), 1, 1],
            trainable: true,
        });
        specs.push(ParamSpec {
            name: format!("{p}.head.b"),
            shape: vec![1, cfg.out_channels, 1, 1],
            trainable: true,
        });
    }
    if config.aifm_enabled {
        let k = config.enabled_branches().len();
        let c = config.branches[config.enabled_branches()[0]].out_channels;
        push_conv(&mut specs, "aifm", k, k * c, 3);
    }
    specs
}

/// Fresh parameters: fan-in-scaled uniform kernels, zero biases, identity
/// batch norm. Deterministic per seed.
pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in param_specs(config) {
        let value = if spec.name.ends_with(".w") {
            let fan_in = spec.shape[1] * spec.shape[2] * spec.shape[3];
            let bound = (6.0 / fan_in as f64).sqrt();
            ArrayD::from_shape_fn(spec.shape.clone(), |_| {
                T::from_f64_c(rng.random_range(-bound..bound))
            })
        } else if spec.name.ends_with(".gamma") || spec.name.ends_with(".rvar") {
            ArrayD::from_elem(spec.shape.clone(), T::one())
        } else {
            ArrayD::zeros(spec.shape.clone())
        };
        store.add(&spec.name, value, spec.trainable);
    }
    Ok(store)
}

fn named<T: Scalar>(store: &ParamStore<T>, name: &str) -> Result<usize> {
    store
        .index_of(name)
        .ok_or_else(|| Error::ConfigError(format!("missing parameter {name}")))
}

fn conv_layer<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: NodeId,
    prefix: &str,
    pad: usize,
) -> Result<NodeId> {
    let w = tape.param(store, named(store, &format!("{prefix}.w"))?);
    let b = tape.param(store, named(store, &format!("{prefix}.b"))?);
    Ok(tape.conv2d(x, w, b, pad))
}

fn bn_layer<T: Scalar>(
    tape: &mut Tape<T>,
    store: &mut ParamStore<T>,
    x: NodeId,
    prefix: &str,
    training: bool,
) -> Result<NodeId> {
    let gamma = tape.param(store, named(store, &format!("{prefix}.gamma"))?);
    let beta = tape.param(store, named(store, &format!("{prefix}.beta"))?);
    let rmean = named(store, &format!("{prefix}.rmean"))?;
    let rvar = named(store, &format!("{prefix}.rvar"))?;
    Ok(tape.batch_norm(x, gamma, beta, store, rmean, rvar, training, BN_MOMENTUM, BN_EPSILON))
}

/// Double-convolution block on the tape: (conv 3x3 -> bn -> relu) twice.
pub fn dcb_graph<T: Scalar>(
    tape: &mut Tape<T>,
    store: &mut ParamStore<T>,
    x: NodeId,
    prefix: &str,
    training: bool,
) -> Result<NodeId> {
    let mut cur = x;
    for i in 1..=2 {
        cur = conv_layer(tape, store, cur, &format!("{prefix}.conv{i}"), 1)?;
        cur = bn_layer(tape, store, cur, &format!("{prefix}.bn{i}"), training)?;
        cur = tape.relu(cur);
    }
    Ok(cur)
}

/// Upsampling-convolution block: bilinear 2x upsample then conv 3x3.
pub fn ucb_graph<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: NodeId,
    prefix: &str,
) -> Result<NodeId> {
    let (_, _, h, w) = tape.value(x).dim();
    let up = tape.resize(x, h * 2, w * 2);
    conv_layer(tape, store, up, prefix, 1)
}

/// One IEM branch on the tape: D-deep encoder with interleaved pools,
/// D-1 decoder stages with skip concatenation, 1x1 head to 2 channels.
pub fn iem_graph<T: Scalar>(
    tape: &mut Tape<T>,
    store: &mut ParamStore<T>,
    x: NodeId,
    prefix: &str,
    cfg: &IemConfig,
    training: bool,
) -> Result<NodeId> {
    let (_, _, h, w) = tape.value(x).dim();
    let f = cfg.pool_factor();
    if h % f != 0 || w % f != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{h}x{w} input not divisible by {f} for depth {}",
            cfg.encoder_depth
        )));
    }
    let d = cfg.encoder_depth;
    let mut skips = Vec::with_capacity(d);
    let mut cur = x;
    for l in 0..d {
        if l > 0 {
            cur = tape.max_pool2(cur);
        }
        cur = dcb_graph(tape, store, cur, &format!("{prefix}.enc{l}"), training)?;
        skips.push(cur);
    }
    for l in (0..d - 1).rev() {
        let up = ucb_graph(tape, store, cur, &format!("{prefix}.dec{l}.up"))?;
        let cat = tape.concat_channels(&[up, skips[l]]);
        cur = dcb_graph(tape, store, cat, &format!("{prefix}.dec{l}"), training)?;
    }
    conv_layer(tape, store, cur, &format!("{prefix}.head"), 0)
}

/// Whole-model forward on the tape, batched NCHW in, fused map node out.
pub struct ModelGraph<T: Scalar> {
    pub tape: Tape<T>,
    /// Fused full-resolution (N, 2, S, S) map node.
    pub fused: NodeId,
    /// (branch index, node at branch resolution, node upsampled to S).
    pub branches: Vec<(usize, NodeId, NodeId)>,
    /// AIFM softmax weights node (N, K, S, S), when AIFM runs.
    pub weights: Option<NodeId>,
}

pub fn model_graph<T: Scalar>(
    images: Array4<T>,
    store: &mut ParamStore<T>,
    config: &ModelConfig,
    training: bool,
) -> Result<ModelGraph<T>> {
    config.validate()?;
    let s = config.input_size;
    let (_, c, h, w) = images.dim();
    if c != 3 || h != s || w != s {
        return Err(Error::ShapeMismatch(format!(
            "model input {c}x{h}x{w}, expected 3x{s}x{s}"
        )));
    }
    let mut tape = Tape::new();
    let input = tape.leaf(images);
    let mut branches = Vec::new();
    for &bi in &config.enabled_branches() {
        let div = BRANCH_DIVISORS[bi];
        let x = if div == 1 {
            input
        } else {
            tape.resize(input, s / div, s / div)
        };
        let m = iem_graph(
            &mut tape,
            store,
            x,
            &format!("b{bi}"),
            &config.branches[bi],
            training,
        )?;
        let up = if div == 1 { m } else { tape.resize(m, s, s) };
        branches.push((bi, m, up));
    }
    let ups: Vec<NodeId> = branches.iter().map(|&(_, _, up)| up).collect();
    let (fused, weights) = if ups.len() == 1 {
        (ups[0], None)
    } else if config.aifm_enabled {
        let cat = tape.concat_channels(&ups);
        let logits = conv_layer(&mut tape, store, cat, "aifm", 1)?;
        let wts = tape.softmax_channels(logits);
        (tape.weighted_sum(&ups, wts), Some(wts))
    } else {
        (tape.average(&ups), None)
    };
    Ok(ModelGraph {
        tape,
        fused,
        branches,
        weights,
    })
}

/// HWC image batch to the network's NCHW layout.
pub fn images_to_nchw<T: Scalar>(images: &[&ImageTensor<T>]) -> Array4<T> {
    let (h, w) = (images[0].height(), images[0].width());
    Array4::from_shape_fn((images.len(), 3, h, w), |(n, c, y, x)| {
        images[n].data()[[y, x, c]]
    })
}

/// HW2 map batch to NCHW.
pub fn maps_to_nchw<T: Scalar>(maps: &[&IlluminantMap<T>]) -> Array4<T> {
    let (h, w) = (maps[0].height(), maps[0].width());
    Array4::from_shape_fn((maps.len(), 2, h, w), |(n, c, y, x)| {
        maps[n].data()[[y, x, c]]
    })
}

/// One NCHW batch entry back to an HW2 map.
pub fn nchw_to_map<T: Scalar>(batch: &Array4<T>, n: usize) -> Result<IlluminantMap<T>> {
    let (_, c, h, w) = batch.dim();
    if c != 2 {
        return Err(Error::ShapeMismatch(format!("expected 2 channels, got {c}")));
    }
    IlluminantMap::new(Array3::from_shape_fn((h, w, 2), |(y, x, ci)| {
        batch[[n, ci, y, x]]
    }))
}

/// DCB as a standalone op on one HWC-agnostic NCHW tensor.
pub fn dcb_forward<T: Scalar>(
    x: &Array4<T>,
    store: &mut ParamStore<T>,
    prefix: &str,
    training: bool,
) -> Result<Array4<T>> {
    let mut tape = Tape::new();
    let xn = tape.leaf(x.clone());
    let out = dcb_graph(&mut tape, store, xn, prefix, training)?;
    Ok(tape.value(out).clone())
}

/// UCB as a standalone op.
pub fn ucb_forward<T: Scalar>(
    x: &Array4<T>,
    store: &ParamStore<T>,
    prefix: &str,
) -> Result<Array4<T>> {
    let mut tape = Tape::new();
    let xn = tape.leaf(x.clone());
    let out = ucb_graph(&mut tape, store, xn, prefix)?;
    Ok(tape.value(out).clone())
}

/// One branch end to end on a single image.
pub fn iem_forward<T: Scalar>(
    img: &ImageTensor<T>,
    store: &mut ParamStore<T>,
    cfg: &IemConfig,
    prefix: &str,
    training: bool,
) -> Result<IlluminantMap<T>> {
    let mut tape = Tape::new();
    let xn = tape.leaf(images_to_nchw(&[img]));
    let out = iem_graph(&mut tape, store, xn, prefix, cfg, training)?;
    nchw_to_map(tape.value(out), 0)
}

/// Attentional fusion of K full-resolution maps using the store's AIFM
/// convolution: concat, conv 3x3, per-pixel softmax, convex combination.
pub fn aifm_fuse<T: Scalar>(
    maps: &[&IlluminantMap<T>],
    store: &ParamStore<T>,
) -> Result<(IlluminantMap<T>, Vec<Array2<T>>)> {
    let k = maps.len();
    if !(2..=3).contains(&k) {
        return Err(Error::ConfigError(format!("aifm expects 2 or 3 maps, got {k}")));
    }
    let (h, w) = (maps[0].height(), maps[0].width());
    if maps.iter().any(|m| m.height() != h || m.width() != w) {
        return Err(Error::ShapeMismatch("aifm maps must share dims".into()));
    }
    let wname = named(store, "aifm.w")?;
    if store.value(wname).dim() != (k, 2 * k, 3, 3) {
        return Err(Error::ShapeMismatch(format!(
            "aifm kernel {:?} does not fit {k} maps",
            store.value(wname).dim()
        )));
    }
    let mut tape = Tape::new();
    let nodes: Vec<NodeId> = maps.iter().map(|m| tape.leaf(maps_to_nchw(&[m]))).collect();
    let cat = tape.concat_channels(&nodes);
    let logits = conv_layer(&mut tape, store, cat, "aifm", 1)?;
    let wts = tape.softmax_channels(logits);
    let fused = tape.weighted_sum(&nodes, wts);
    let weight_planes = (0..k)
        .map(|ki| {
            Array2::from_shape_fn((h, w), |(y, x)| tape.value(wts)[[0, ki, y, x]])
        })
        .collect();
    Ok((nchw_to_map(tape.value(fused), 0)?, weight_planes))
}

/// Full multi-scale forward on a single image.
pub fn model_forward<T: Scalar>(
    img: &ImageTensor<T>,
    store: &mut ParamStore<T>,
    config: &ModelConfig,
    training: bool,
) -> Result<(IlluminantMap<T>, Vec<BranchOutput<T>>)> {
    let g = model_graph(images_to_nchw(&[img]), store, config, training)?;
    let final_map = nchw_to_map(g.tape.value(g.fused), 0)?;
    let k = g.branches.len();
    let mut outputs = Vec::with_capacity(k);
    for (ki, &(bi, m, _)) in g.branches.iter().enumerate() {
        let weights = g.weights.map(|wn| {
            let wv = g.tape.value(wn);
            Array2::from_shape_fn((config.input_size, config.input_size), |(y, x)| {
                wv[[0, ki, y, x]]
            })
        });
        outputs.push(BranchOutput {
            branch: bi,
            map: nchw_to_map(g.tape.value(m), 0)?,
            weights,
        });
    }
    Ok((final_map, outputs))
}
