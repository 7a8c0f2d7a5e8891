//! Tape-based reverse-mode differentiation over the primitives the
//! network needs: convolution, batch normalization, ReLU, 2x2 max-pool,
//! bilinear resize, channel concatenation, channel softmax, convex map
//! fusion, and the arccos angular loss.
//!
//! All node values are `(N, C, H, W)` tensors. Convolutions run through a
//! batched im2col + matrix multiply so the hot path stays inside the
//! ndarray GEMM.

use ndarray::{Array2, Array3, Array4, Axis};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::params::ParamStore;

pub type NodeId = usize;

/// Cosine ceiling inside the angular loss; keeps the arccos derivative finite.
const COS_CLAMP_MARGIN: f64 = 1e-7;

/// Column block width for the conv tap GEMMs; one block of the padded
/// input fits in L2 and is reused across every kernel tap.
const GEMM_COL_CHUNK: usize = 2048;

/// Near-equal block width no larger than [`GEMM_COL_CHUNK`], so the last
/// block is never a sliver.
fn gemm_chunk(lc: usize) -> usize {
    let blocks = lc.div_ceil(GEMM_COL_CHUNK);
    lc.div_ceil(blocks)
}

enum Op<T: Scalar> {
    Leaf,
    Param(usize),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        pad: usize,
        // zero-padded channel-major input, kept for the backward pass
        xp: Array2<T>,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        // per-channel statistics used by this pass (batch stats in training,
        // running stats in eval)
        mean: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    Relu {
        x: NodeId,
    },
    MaxPool2 {
        x: NodeId,
        argmax: Vec<u32>,
    },
    Resize {
        x: NodeId,
    },
    Concat {
        xs: Vec<NodeId>,
    },
    SoftmaxChannels {
        x: NodeId,
    },
    /// out[n,c] = sum_k weights[n,k] * maps[k][n,c]
    WeightedSum {
        maps: Vec<NodeId>,
        weights: NodeId,
    },
    Average {
        xs: Vec<NodeId>,
    },
    AngularLoss {
        pred: NodeId,
        gt: Array4<T>,
        mask: Option<Array3<u8>>,
    },
}

struct Node<T: Scalar> {
    value: Array4<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    last_push: Option<std::time::Instant>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            last_push: None,
        }
    }

    pub fn value(&self, id: NodeId) -> &Array4<T> {
        &self.nodes[id].value
    }

    pub fn scalar_value(&self, id: NodeId) -> T {
        self.nodes[id].value[[0, 0, 0, 0]]
    }

    fn push(&mut self, value: Array4<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        if let Some(t0) = self.last_push {
            timing::add(op_kind(&op), t0);
        }
        self.last_push = Some(std::time::Instant::now());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Constant input; no gradient flows into it.
    pub fn leaf(&mut self, value: Array4<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Parameter tensor copied out of the store; its gradient is reported
    /// by [`Tape::backward`] under the store index.
    pub fn param(&mut self, store: &ParamStore<T>, index: usize) -> NodeId {
        let value = store.value(index).clone();
        self.push(value, Op::Param(index), true)
    }

    /// Convolution via one shifted GEMM per kernel tap over a zero-padded
    /// channel-major copy of the input; no im2col buffer is materialized.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, pad: usize) -> NodeId {
        let (n, c_in, h, wd) = self.nodes[x].value.dim();
        let (c_out, c_in_w, kh, kw) = self.nodes[w].value.dim();
        assert_eq!(c_in, c_in_w, "conv input channels mismatch");
        let h_out = h + 2 * pad + 1 - kh;
        let w_out = wd + 2 * pad + 1 - kw;
        let (hp, wp) = (h + 2 * pad, wd + 2 * pad);
        let l = n * hp * wp;
        // column count shared by every tap; the trailing columns of later
        // taps wrap into padding and are never read back
        let lc = l - (kh - 1) * wp - (kw - 1);

        let _ts = std::time::Instant::now();
        let xp = pad_channel_major(&self.nodes[x].value, pad);
        timing::sub_add(0, _ts);
        let _ts = std::time::Instant::now();
        let xs = xp.as_slice().unwrap();
        let wv = &self.nodes[w].value;
        let mut c2 = Array2::<T>::zeros((c_out, lc));
        {
            let cs = c2.as_slice_mut().unwrap();
            let mut ak = vec![T::zero(); kh * kw * c_out * c_in];
            for ky in 0..kh {
                for kx in 0..kw {
                    let base = (ky * kw + kx) * c_out * c_in;
                    for co in 0..c_out {
                        for ci in 0..c_in {
                            ak[base + co * c_in + ci] = wv[[co, ci, ky, kx]];
                        }
                    }
                }
            }
            // column chunks outer, taps inner: the input block stays in
            // cache across all kh*kw passes
            let mut j0 = 0;
            while j0 < lc {
                let nb = (lc - j0).min(gemm_chunk(lc));
                for ky in 0..kh {
                    for kx in 0..kw {
                        let off = ky * wp + kx + j0;
                        T::gemm(
                            c_out,
                            c_in,
                            nb,
                            &ak[(ky * kw + kx) * c_out * c_in..],
                            c_in,
                            1,
                            &xs[off..off + (c_in - 1) * l + nb],
                            l,
                            1,
                            &mut cs[j0..j0 + (c_out - 1) * lc + nb],
                            lc,
                            ky + kx > 0,
                        );
                    }
                }
                j0 += nb;
            }
        }
        timing::sub_add(1, _ts);
        let _ts = std::time::Instant::now();
        let out = compact_output(&c2, &self.nodes[b].value, n, c_out, h_out, w_out, hp, wp);
        timing::sub_add(2, _ts);
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(out, Op::Conv2d { x, w, b, pad, xp }, needs)
    }

    /// Batch normalization. In training mode the batch statistics are used
    /// and the running statistics at `rmean_idx` / `rvar_idx` in the store
    /// are updated in place; eval mode reads the running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        store: &mut ParamStore<T>,
        rmean_idx: usize,
        rvar_idx: usize,
        training: bool,
        momentum: f64,
        eps: f64,
    ) -> NodeId {
        let (n, c, h, w) = self.nodes[x].value.dim();
        let hw = h * w;
        let m = T::from_usize(n * h * w).unwrap();
        let epst = T::from_f64_c(eps);
        let x_std = self.nodes[x].value.as_standard_layout();
        let xs = x_std.as_slice().unwrap();
        let (mean, var): (Vec<T>, Vec<T>) = if training {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ci in 0..c {
                let mut sum = T::zero();
                for ni in 0..n {
                    let base = (ni * c + ci) * hw;
                    sum = sum + xs[base..base + hw].iter().copied().sum::<T>();
                }
                let mu = sum / m;
                let mut sq = T::zero();
                for ni in 0..n {
                    let base = (ni * c + ci) * hw;
                    sq = sq
                        + xs[base..base + hw]
                            .iter()
                            .map(|&xv| (xv - mu) * (xv - mu))
                            .sum::<T>();
                }
                mean[ci] = mu;
                var[ci] = sq / m;
            }
            let mom = T::from_f64_c(momentum);
            let keep = T::one() - mom;
            {
                let rm = store.value_mut(rmean_idx);
                for ci in 0..c {
                    rm[[0, ci, 0, 0]] = keep * rm[[0, ci, 0, 0]] + mom * mean[ci];
                }
            }
            {
                let rv = store.value_mut(rvar_idx);
                for ci in 0..c {
                    rv[[0, ci, 0, 0]] = keep * rv[[0, ci, 0, 0]] + mom * var[ci];
                }
            }
            (mean, var)
        } else {
            let rm = store.value(rmean_idx);
            let rv = store.value(rvar_idx);
            (
                (0..c).map(|ci| rm[[0, ci, 0, 0]]).collect(),
                (0..c).map(|ci| rv[[0, ci, 0, 0]]).collect(),
            )
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + epst).sqrt()).collect();
        let g = &self.nodes[gamma].value;
        let b = &self.nodes[beta].value;
        let mut out = Array4::zeros((n, c, h, w));
        let os = out.as_slice_mut().unwrap();
        for ni in 0..n {
            for ci in 0..c {
                let (mu, is) = (mean[ci], inv_std[ci]);
                let (gv, bv) = (g[[0, ci, 0, 0]], b[[0, ci, 0, 0]]);
                // fold the affine into scale and shift so the inner loop is
                // one fused multiply-add per element
                let (sc, sh) = (gv * is, bv - gv * mu * is);
                let base = (ni * c + ci) * hw;
                for (o, &xv) in os[base..base + hw].iter_mut().zip(&xs[base..base + hw]) {
                    *o = sc * xv + sh;
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                training,
            },
            needs,
        )
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x].value.mapv(|v| v.max(T::zero()));
        let needs = self.needs(x);
        self.push(out, Op::Relu { x }, needs)
    }

    pub fn max_pool2(&mut self, x: NodeId) -> NodeId {
        let (n, c, h, w) = self.nodes[x].value.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even dims");
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Array4::zeros((n, c, ho, wo));
        let mut argmax = vec![0u32; n * c * ho * wo];
        let x_std = self.nodes[x].value.as_standard_layout();
        let xs = x_std.as_slice().unwrap();
        let os = out.as_slice_mut().unwrap();
        let mut k = 0usize;
        for plane in 0..n * c {
            let pbase = plane * h * w;
            for oy in 0..ho {
                let r0 = pbase + oy * 2 * w;
                let r1 = r0 + w;
                for ox in 0..wo {
                    let x0 = ox * 2;
                    let mut best = xs[r0 + x0];
                    let mut bi = r0 + x0;
                    for cand in [r0 + x0 + 1, r1 + x0, r1 + x0 + 1] {
                        if xs[cand] > best {
                            best = xs[cand];
                            bi = cand;
                        }
                    }
                    os[k] = best;
                    argmax[k] = (bi - pbase) as u32;
                    k += 1;
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::MaxPool2 { x, argmax }, needs)
    }

    /// Bilinear resize with half-pixel centers to `(th, tw)`.
    pub fn resize(&mut self, x: NodeId, th: usize, tw: usize) -> NodeId {
        let (n, c, h, w) = self.nodes[x].value.dim();
        let (ty, tx) = (resize_taps::<T>(h, th), resize_taps::<T>(w, tw));
        let x_std = self.nodes[x].value.as_standard_layout();
        let src = x_std.as_slice().unwrap();
        let mut out = Array4::zeros((n, c, th, tw));
        let os = out.as_slice_mut().unwrap();
        let one = T::one();
        for plane in 0..n * c {
            let ibase = plane * h * w;
            let obase = plane * th * tw;
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let r0 = &src[ibase + y0 * w..ibase + y0 * w + w];
                let r1 = &src[ibase + y1 * w..ibase + y1 * w + w];
                let orow = &mut os[obase + oy * tw..obase + oy * tw + tw];
                for (o, &(x0, x1, fx)) in orow.iter_mut().zip(&tx) {
                    let top = r0[x0] * (one - fx) + r0[x1] * fx;
                    let bot = r1[x0] * (one - fx) + r1[x1] * fx;
                    *o = top * (one - fy) + bot * fy;
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::Resize { x }, needs)
    }

    pub fn concat_channels(&mut self, xs: &[NodeId]) -> NodeId {
        let views: Vec<_> = xs.iter().map(|&id| self.nodes[id].value.view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat shape mismatch");
        let needs = xs.iter().any(|&id| self.needs(id));
        self.push(out, Op::Concat { xs: xs.to_vec() }, needs)
    }

    pub fn softmax_channels(&mut self, x: NodeId) -> NodeId {
        let (n, c, h, w) = self.nodes[x].value.dim();
        let xv = &self.nodes[x].value;
        let mut out = Array4::zeros((n, c, h, w));
        for ni in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let mut mx = xv[[ni, 0, y, xx]];
                    for ci in 1..c {
                        mx = mx.max(xv[[ni, ci, y, xx]]);
                    }
                    let mut z = T::zero();
                    for ci in 0..c {
                        let e = (xv[[ni, ci, y, xx]] - mx).exp();
                        out[[ni, ci, y, xx]] = e;
                        z = z + e;
                    }
                    for ci in 0..c {
                        out[[ni, ci, y, xx]] = out[[ni, ci, y, xx]] / z;
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::SoftmaxChannels { x }, needs)
    }

    /// Convex fusion per Eq-style weighting: `out = sum_k weights[:,k] * maps[k]`.
    pub fn weighted_sum(&mut self, maps: &[NodeId], weights: NodeId) -> NodeId {
        let (n, c, h, w) = self.nodes[maps[0]].value.dim();
        let k = maps.len();
        assert_eq!(self.nodes[weights].value.dim(), (n, k, h, w));
        let mut out = Array4::zeros((n, c, h, w));
        for (ki, &mid) in maps.iter().enumerate() {
            let mv = &self.nodes[mid].value;
            let wv = &self.nodes[weights].value;
            for ni in 0..n {
                for ci in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            out[[ni, ci, y, xx]] =
                                out[[ni, ci, y, xx]] + wv[[ni, ki, y, xx]] * mv[[ni, ci, y, xx]];
                        }
                    }
                }
            }
        }
        let needs = maps.iter().any(|&id| self.needs(id)) || self.needs(weights);
        self.push(
            out,
            Op::WeightedSum {
                maps: maps.to_vec(),
                weights,
            },
            needs,
        )
    }

    pub fn average(&mut self, xs: &[NodeId]) -> NodeId {
        let inv = T::one() / T::from_usize(xs.len()).unwrap();
        let mut out = self.nodes[xs[0]].value.clone();
        for &id in &xs[1..] {
            out = out + &self.nodes[id].value;
        }
        out.mapv_inplace(|v| v * inv);
        let needs = xs.iter().any(|&id| self.needs(id));
        self.push(out, Op::Average { xs: xs.to_vec() }, needs)
    }

    /// Mean angular error in degrees between a predicted (r, b) map batch
    /// and ground truth, over valid pixels. Predictions and ground truth
    /// are clamped to the chromaticity floor; the cosine is clamped one
    /// margin inside [-1, 1].
    pub fn angular_loss(
        &mut self,
        pred: NodeId,
        gt: Array4<T>,
        mask: Option<Array3<u8>>,
    ) -> Result<NodeId> {
        let (n, c, h, w) = self.nodes[pred].value.dim();
        if c != 2 || gt.dim() != (n, 2, h, w) {
            return Err(Error::ShapeMismatch(format!(
                "angular loss pred {:?} vs gt {:?}",
                self.nodes[pred].value.dim(),
                gt.dim()
            )));
        }
        if let Some(m) = &mask {
            if m.dim() != (n, h, w) {
                return Err(Error::ShapeMismatch("loss mask dims differ".into()));
            }
        }
        let (sum, count) = angular_loss_forward(&self.nodes[pred].value, &gt, mask.as_ref());
        if count == 0 {
            return Err(Error::EmptyMask);
        }
        let loss = sum / T::from_usize(count).unwrap();
        let value = Array4::from_elem((1, 1, 1, 1), loss);
        let needs = self.needs(pred);
        Ok(self.push(value, Op::AngularLoss { pred, gt, mask }, needs))
    }

    /// Reverse pass from `root` (typically the scalar loss). Returns the
    /// gradient for every parameter node, keyed by store index.
    pub fn backward(&mut self, root: NodeId) -> Vec<(usize, Array4<T>)> {
        let mut grads: Vec<Option<Array4<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Array4::from_elem(self.nodes[root].value.dim(), T::one()));
        let mut param_grads: Vec<(usize, Array4<T>)> = Vec::new();
        for id in (0..=root).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let grad = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let _t0 = std::time::Instant::now();
            let _kind = op_kind(&self.nodes[id].op);
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Param(index) => param_grads.push((*index, grad)),
                Op::Conv2d { x, w, b, pad, xp } => {
                    let (x, w, b, pad) = (*x, *w, *b, *pad);
                    let (n, c_in, h, wd) = self.nodes[x].value.dim();
                    let (c_out, _, kh, kw) = self.nodes[w].value.dim();
                    let (hp, wp) = (h + 2 * pad, wd + 2 * pad);
                    let l = n * hp * wp;
                    let lc = l - (kh - 1) * wp - (kw - 1);
                    // output gradient in padded-flat layout; zeros at the
                    // padding and wrap columns keep the tap sums exact
                    let _ts = std::time::Instant::now();
                    let d = spread_grad(&grad, hp, wp, lc);
                    timing::sub_add(3, _ts);
                    let ds = d.as_slice().unwrap();
                    let xs = xp.as_slice().unwrap();
                    if self.needs(w) {
                        let _ts = std::time::Instant::now();
                        let mut dw = Array4::zeros((c_out, c_in, kh, kw));
                        let mut buf = vec![T::zero(); kh * kw * c_out * c_in];
                        let mut j0 = 0;
                        while j0 < lc {
                            let nb = (lc - j0).min(gemm_chunk(lc));
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let off = ky * wp + kx + j0;
                                    let base = (ky * kw + kx) * c_out * c_in;
                                    T::gemm(
                                        c_out,
                                        nb,
                                        c_in,
                                        &ds[j0..j0 + (c_out - 1) * lc + nb],
                                        lc,
                                        1,
                                        &xs[off..off + (c_in - 1) * l + nb],
                                        1,
                                        l,
                                        &mut buf[base..base + c_out * c_in],
                                        c_in,
                                        j0 > 0,
                                    );
                                }
                            }
                            j0 += nb;
                        }
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let base = (ky * kw + kx) * c_out * c_in;
                                for co in 0..c_out {
                                    for ci in 0..c_in {
                                        dw[[co, ci, ky, kx]] = buf[base + co * c_in + ci];
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads, w, dw);
                        timing::sub_add(4, _ts);
                    }
                    if self.needs(b) {
                        let mut db = Array4::zeros((1, c_out, 1, 1));
                        for co in 0..c_out {
                            db[[0, co, 0, 0]] = d.row(co).iter().copied().sum::<T>();
                        }
                        accumulate(&mut grads, b, db);
                    }
                    if self.needs(x) {
                        let _ts = std::time::Instant::now();
                        let wv = &self.nodes[w].value;
                        let mut dxp = Array2::<T>::zeros((c_in, l));
                        timing::sub_add(7, _ts);
                        let _ts = std::time::Instant::now();
                        {
                            let dxs = dxp.as_slice_mut().unwrap();
                            let mut akt = vec![T::zero(); kh * kw * c_in * c_out];
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let base = (ky * kw + kx) * c_in * c_out;
                                    for ci in 0..c_in {
                                        for co in 0..c_out {
                                            akt[base + ci * c_out + co] = wv[[co, ci, ky, kx]];
                                        }
                                    }
                                }
                            }
                            let mut j0 = 0;
                            while j0 < lc {
                                let nb = (lc - j0).min(gemm_chunk(lc));
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let off = ky * wp + kx + j0;
                                        T::gemm(
                                            c_in,
                                            c_out,
                                            nb,
                                            &akt[(ky * kw + kx) * c_in * c_out..],
                                            c_out,
                                            1,
                                            &ds[j0..j0 + (c_out - 1) * lc + nb],
                                            lc,
                                            1,
                                            &mut dxs[off..off + (c_in - 1) * l + nb],
                                            l,
                                            true,
                                        );
                                    }
                                }
                                j0 += nb;
                            }
                        }
                        timing::sub_add(5, _ts);
                        let _ts = std::time::Instant::now();
                        let dx = unpad_channel_major(&dxp, (n, c_in, h, wd), pad);
                        accumulate(&mut grads, x, dx);
                        timing::sub_add(6, _ts);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                    training,
                } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let training = *training;
                    let (n, c, h, w) = self.nodes[x].value.dim();
                    let hw = h * w;
                    let m = T::from_usize(n * h * w).unwrap();
                    let mean = mean.clone();
                    let inv_std = inv_std.clone();
                    let g = self.nodes[gamma].value.clone();
                    let x_std = self.nodes[x].value.as_standard_layout();
                    let xs = x_std.as_slice().unwrap();
                    let gs = grad.as_slice().expect("standard layout");
                    let mut dgamma = Array4::zeros((1, c, 1, 1));
                    let mut dbeta = Array4::zeros((1, c, 1, 1));
                    let mut dx = Array4::zeros((n, c, h, w));
                    let dxs = dx.as_slice_mut().unwrap();
                    for ci in 0..c {
                        let (mu, is) = (mean[ci], inv_std[ci]);
                        let gv = g[[0, ci, 0, 0]];
                        let mut sum_dy = T::zero();
                        let mut sum_dy_xhat = T::zero();
                        for ni in 0..n {
                            let base = (ni * c + ci) * hw;
                            for (&dy, &xv) in
                                gs[base..base + hw].iter().zip(&xs[base..base + hw])
                            {
                                sum_dy = sum_dy + dy;
                                sum_dy_xhat = sum_dy_xhat + dy * (xv - mu) * is;
                            }
                        }
                        dgamma[[0, ci, 0, 0]] = sum_dy_xhat;
                        dbeta[[0, ci, 0, 0]] = sum_dy;
                        if self.needs(x) {
                            let mean_dy = sum_dy / m;
                            let mean_dy_xhat = sum_dy_xhat / m;
                            let gvis = gv * is;
                            for ni in 0..n {
                                let base = (ni * c + ci) * hw;
                                let dyr = &gs[base..base + hw];
                                let dxr = &mut dxs[base..base + hw];
                                if training {
                                    for ((dx, &dy), &xv) in
                                        dxr.iter_mut().zip(dyr).zip(&xs[base..base + hw])
                                    {
                                        let xhat = (xv - mu) * is;
                                        *dx = gvis * (dy - mean_dy - xhat * mean_dy_xhat);
                                    }
                                } else {
                                    for (dx, &dy) in dxr.iter_mut().zip(dyr) {
                                        *dx = gvis * dy;
                                    }
                                }
                            }
                        }
                    }
                    if self.needs(gamma) {
                        accumulate(&mut grads, gamma, dgamma);
                    }
                    if self.needs(beta) {
                        accumulate(&mut grads, beta, dbeta);
                    }
                    if self.needs(x) {
                        accumulate(&mut grads, x, dx);
                    }
                }
                Op::Relu { x } => {
                    let x = *x;
                    let mut dx = grad;
                    ndarray::Zip::from(&mut dx)
                        .and(&self.nodes[x].value)
                        .for_each(|d, &v| {
                            if v <= T::zero() {
                                *d = T::zero();
                            }
                        });
                    accumulate(&mut grads, x, dx);
                }
                Op::MaxPool2 { x, argmax } => {
                    let x = *x;
                    let (n, c, h, w) = self.nodes[x].value.dim();
                    let (_, _, ho, wo) = grad.dim();
                    let mut dx = Array4::zeros((n, c, h, w));
                    {
                        let dxs = dx.as_slice_mut().unwrap();
                        let gs = grad.as_slice().expect("standard layout");
                        for (plane, chunk) in gs.chunks_exact(ho * wo).enumerate() {
                            let pbase = plane * h * w;
                            let abase = plane * ho * wo;
                            for (k, &g) in chunk.iter().enumerate() {
                                let flat = pbase + argmax[abase + k] as usize;
                                dxs[flat] = dxs[flat] + g;
                            }
                        }
                    }
                    accumulate(&mut grads, x, dx);
                }
                Op::Resize { x } => {
                    let x = *x;
                    let (n, c, h, w) = self.nodes[x].value.dim();
                    let (_, _, th, tw) = grad.dim();
                    let (ty, tx) = (resize_taps::<T>(h, th), resize_taps::<T>(w, tw));
                    let mut dx = Array4::zeros((n, c, h, w));
                    {
                        let dxs = dx.as_slice_mut().unwrap();
                        let gs = grad.as_slice().expect("standard layout");
                        let one = T::one();
                        for plane in 0..n * c {
                            let ibase = plane * h * w;
                            let obase = plane * th * tw;
                            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                                let b0 = ibase + y0 * w;
                                let b1 = ibase + y1 * w;
                                let grow = &gs[obase + oy * tw..obase + oy * tw + tw];
                                for (&d, &(x0, x1, fx)) in grow.iter().zip(&tx) {
                                    dxs[b0 + x0] = dxs[b0 + x0] + d * (one - fy) * (one - fx);
                                    dxs[b0 + x1] = dxs[b0 + x1] + d * (one - fy) * fx;
                                    dxs[b1 + x0] = dxs[b1 + x0] + d * fy * (one - fx);
                                    dxs[b1 + x1] = dxs[b1 + x1] + d * fy * fx;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, x, dx);
                }
                Op::Concat { xs } => {
                    let xs = xs.clone();
                    let mut offset = 0usize;
                    for xid in xs {
                        let c = self.nodes[xid].value.dim().1;
                        let slice = grad
                            .slice_axis(Axis(1), ndarray::Slice::from(offset..offset + c))
                            .to_owned();
                        offset += c;
                        if self.needs(xid) {
                            accumulate(&mut grads, xid, slice);
                        }
                    }
                }
                Op::SoftmaxChannels { x } => {
                    let x = *x;
                    let y = self.nodes[id].value.clone();
                    let (n, c, h, w) = y.dim();
                    let mut dx = Array4::zeros((n, c, h, w));
                    for ni in 0..n {
                        for yy in 0..h {
                            for xx in 0..w {
                                let mut dot = T::zero();
                                for ci in 0..c {
                                    dot = dot + grad[[ni, ci, yy, xx]] * y[[ni, ci, yy, xx]];
                                }
                                for ci in 0..c {
                                    dx[[ni, ci, yy, xx]] =
                                        y[[ni, ci, yy, xx]] * (grad[[ni, ci, yy, xx]] - dot);
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, x, dx);
                }
                Op::WeightedSum { maps, weights } => {
                    let maps = maps.clone();
                    let weights = *weights;
                    let (n, c, h, w) = grad.dim();
                    let k = maps.len();
                    let wv = self.nodes[weights].value.clone();
                    if self.needs(weights) {
                        let mut dw = Array4::zeros((n, k, h, w));
                        for (ki, &mid) in maps.iter().enumerate() {
                            let mv = &self.nodes[mid].value;
                            for ni in 0..n {
                                for y in 0..h {
                                    for xx in 0..w {
                                        let mut acc = T::zero();
                                        for ci in 0..c {
                                            acc = acc
                                                + grad[[ni, ci, y, xx]] * mv[[ni, ci, y, xx]];
                                        }
                                        dw[[ni, ki, y, xx]] = acc;
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads, weights, dw);
                    }
                    for (ki, &mid) in maps.iter().enumerate() {
                        if !self.needs(mid) {
                            continue;
                        }
                        let mut dm = Array4::zeros((n, c, h, w));
                        for ni in 0..n {
                            for ci in 0..c {
                                for y in 0..h {
                                    for xx in 0..w {
                                        dm[[ni, ci, y, xx]] =
                                            grad[[ni, ci, y, xx]] * wv[[ni, ki, y, xx]];
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads, mid, dm);
                    }
                }
                Op::Average { xs } => {
                    let xs = xs.clone();
                    let inv = T::one() / T::from_usize(xs.len()).unwrap();
                    for xid in xs {
                        if self.needs(xid) {
                            accumulate(&mut grads, xid, grad.mapv(|v| v * inv));
                        }
                    }
                }
                Op::AngularLoss { pred, gt, mask } => {
                    let pred = *pred;
                    let scale = grad[[0, 0, 0, 0]];
                    let dpred =
                        angular_loss_backward(&self.nodes[pred].value, gt, mask.as_ref(), scale);
                    accumulate(&mut grads, pred, dpred);
                }
            }
            timing::add(_kind, _t0);
        }
        param_grads
    }
}

fn op_kind<T: Scalar>(op: &Op<T>) -> usize {
    match op {
        Op::Conv2d { .. } => 0,
        Op::BatchNorm { .. } => 1,
        Op::Relu { .. } => 2,
        Op::MaxPool2 { .. } => 3,
        Op::Resize { .. } => 4,
        Op::Concat { .. } => 5,
        Op::SoftmaxChannels { .. } => 6,
        Op::WeightedSum { .. } => 7,
        Op::Average { .. } => 8,
        Op::AngularLoss { .. } => 9,
        _ => 10,
    }
}

#[doc(hidden)]
pub mod timing {
    use std::sync::atomic::{AtomicU64, Ordering};
    pub const KINDS: [&str; 11] = [
        "conv", "bn", "relu", "pool", "resize", "concat", "softmax", "wsum", "avg", "loss",
        "other",
    ];
    pub static NS: [AtomicU64; 11] = [const { AtomicU64::new(0) }; 11];
    pub fn add(kind: usize, t0: std::time::Instant) {
        NS[kind].fetch_add(t0.elapsed().as_nanos() as u64, Ordering::Relaxed);
    }
    pub fn report() -> String {
        KINDS
            .iter()
            .zip(NS.iter())
            .map(|(k, v)| format!("{k} {:.0}", v.swap(0, Ordering::Relaxed) as f64 / 1e6))
            .collect::<Vec<_>>()
            .join(" ")
    }
    pub const SUB_KINDS: [&str; 8] = [
        "pad", "fgemm", "compact", "spread", "wgemm", "xgemm", "unpad", "zeros",
    ];
    pub static SUB: [AtomicU64; 8] = [const { AtomicU64::new(0) }; 8];
    pub fn sub_add(kind: usize, t0: std::time::Instant) {
        SUB[kind].fetch_add(t0.elapsed().as_nanos() as u64, Ordering::Relaxed);
    }
    pub fn sub_report() -> String {
        SUB_KINDS
            .iter()
            .zip(SUB.iter())
            .map(|(k, v)| format!("{k} {:.0}", v.swap(0, Ordering::Relaxed) as f64 / 1e6))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Array4<T>>], id: NodeId, g: Array4<T>) {
    match &mut grads[id] {
        Some(existing) => existing.zip_mut_with(&g, |a, &b| *a = *a + b),
        slot => *slot = Some(g),
    }
}

/// (src0, src1, frac) taps for half-pixel-center bilinear resampling.
fn resize_taps<T: Scalar>(src: usize, dst: usize) -> Vec<(usize, usize, T)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = s.floor() as usize;
            (lo, (lo + 1).min(src - 1), T::from_f64_c(s - lo as f64))
        })
        .collect()
}

/// Zero-padded channel-major copy of `(N, C, H, W)` as `(C, N*Hp*Wp)`
/// where `Hp = H + 2 pad`, `Wp = W + 2 pad`.
fn pad_channel_major<T: Scalar>(x: &Array4<T>, pad: usize) -> Array2<T> {
    let (n, c, h, w) = x.dim();
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = Array2::zeros((c, n * hp * wp));
    // concat and permute can leave inputs in a non-contiguous layout
    let x_std = x.as_standard_layout();
    let xs = x_std.as_slice().unwrap();
    let os = out.as_slice_mut().unwrap();
    for ci in 0..c {
        for ni in 0..n {
            let src = (ni * c + ci) * h * w;
            let dst = (ci * n + ni) * hp * wp + pad * wp + pad;
            for y in 0..h {
                os[dst + y * wp..dst + y * wp + w]
                    .copy_from_slice(&xs[src + y * w..src + y * w + w]);
            }
        }
    }
    out
}

/// Output gradient `(N, C, Ho, Wo)` scattered into padded-flat layout
/// `(C, Lc)`; positions that fall outside the real output stay zero.
fn spread_grad<T: Scalar>(g: &Array4<T>, hp: usize, wp: usize, lc: usize) -> Array2<T> {
    let (n, c, ho, wo) = g.dim();
    let mut out = Array2::zeros((c, lc));
    let g_std = g.as_standard_layout();
    let gs = g_std.as_slice().unwrap();
    let os = out.as_slice_mut().unwrap();
    for ci in 0..c {
        for ni in 0..n {
            let src = (ni * c + ci) * ho * wo;
            let dst = ci * lc + ni * hp * wp;
            for y in 0..ho {
                os[dst + y * wp..dst + y * wp + wo]
                    .copy_from_slice(&gs[src + y * wo..src + y * wo + wo]);
            }
        }
    }
    out
}

/// Gathers the tap-sum matrix `(Cout, Lc)` into `(N, Cout, Ho, Wo)` and
/// adds the per-channel bias.
#[allow(clippy::too_many_arguments)]
fn compact_output<T: Scalar>(
    c2: &Array2<T>,
    bias: &Array4<T>,
    n: usize,
    c_out: usize,
    ho: usize,
    wo: usize,
    hp: usize,
    wp: usize,
) -> Array4<T> {
    let mut out = Array4::zeros((n, c_out, ho, wo));
    let cs = c2.as_slice().unwrap();
    let os = out.as_slice_mut().unwrap();
    let lc = c2.dim().1;
    for ni in 0..n {
        for co in 0..c_out {
            let bv = bias[[0, co, 0, 0]];
            let src = co * lc + ni * hp * wp;
            let dst = (ni * c_out + co) * ho * wo;
            for y in 0..ho {
                for (o, &v) in os[dst + y * wo..dst + y * wo + wo]
                    .iter_mut()
                    .zip(&cs[src + y * wp..src + y * wp + wo])
                {
                    *o = v + bv;
                }
            }
        }
    }
    out
}

/// Drops the padding ring from a channel-major `(C, N*Hp*Wp)` gradient.
fn unpad_channel_major<T: Scalar>(
    dxp: &Array2<T>,
    x_dim: (usize, usize, usize, usize),
    pad: usize,
) -> Array4<T> {
    let (n, c, h, w) = x_dim;
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut dx = Array4::zeros((n, c, h, w));
    let ps = dxp.as_slice().unwrap();
    let os = dx.as_slice_mut().unwrap();
    for ni in 0..n {
        for ci in 0..c {
            let src = (ci * n + ni) * hp * wp + pad * wp + pad;
            let dst = (ni * c + ci) * h * w;
            for y in 0..h {
                os[dst + y * w..dst + y * w + w]
                    .copy_from_slice(&ps[src + y * wp..src + y * wp + w]);
            }
        }
    }
    dx
}

fn clamp_chroma<T: Scalar>(v: T) -> T {
    v.max(T::epsilon_chroma())
}

/// Sum of per-pixel angular errors in degrees plus the valid-pixel count.
fn angular_loss_forward<T: Scalar>(
    pred: &Array4<T>,
    gt: &Array4<T>,
    mask: Option<&Array3<u8>>,
) -> (T, usize) {
    let (n, _, h, w) = pred.dim();
    let cmax = T::one() - T::from_f64_c(COS_CLAMP_MARGIN);
    let mut sum = T::zero();
    let mut count = 0usize;
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                if let Some(m) = mask {
                    if m[[ni, y, x]] == 0 {
                        continue;
                    }
                }
                let ur = clamp_chroma(pred[[ni, 0, y, x]]);
                let ub = clamp_chroma(pred[[ni, 1, y, x]]);
                let vr = clamp_chroma(gt[[ni, 0, y, x]]);
                let vb = clamp_chroma(gt[[ni, 1, y, x]]);
                let uu = ur * ur + T::one() + ub * ub;
                let vv = vr * vr + T::one() + vb * vb;
                let uv = ur * vr + T::one() + ub * vb;
                let cos = (uv / (uu.sqrt() * vv.sqrt())).min(cmax).max(-cmax);
                sum = sum + cos.acos() * T::rad_to_deg();
                count += 1;
            }
        }
    }
    (sum, count)
}

fn angular_loss_backward<T: Scalar>(
    pred: &Array4<T>,
    gt: &Array4<T>,
    mask: Option<&Array3<u8>>,
    upstream: T,
) -> Array4<T> {
    let (n, _, h, w) = pred.dim();
    let cmax = T::one() - T::from_f64_c(COS_CLAMP_MARGIN);
    let count = match mask {
        Some(m) => m.iter().filter(|&&v| v != 0).count(),
        None => n * h * w,
    };
    let scale = upstream * T::rad_to_deg() / T::from_usize(count).unwrap();
    let eps = T::epsilon_chroma();
    let mut dpred = Array4::zeros(pred.dim());
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                if let Some(m) = mask {
                    if m[[ni, y, x]] == 0 {
                        continue;
                    }
                }
                let pr = pred[[ni, 0, y, x]];
                let pb = pred[[ni, 1, y, x]];
                let ur = clamp_chroma(pr);
                let ub = clamp_chroma(pb);
                let vr = clamp_chroma(gt[[ni, 0, y, x]]);
                let vb = clamp_chroma(gt[[ni, 1, y, x]]);
                let nu2 = ur * ur + T::one() + ub * ub;
                let nv2 = vr * vr + T::one() + vb * vb;
                let nu = nu2.sqrt();
                let nv = nv2.sqrt();
                let uv = ur * vr + T::one() + ub * vb;
                let cos = uv / (nu * nv);
                if cos >= cmax || cos <= -cmax {
                    continue; // clamped: flat region
                }
                // d acos(cos)/d u = -1/sqrt(1-cos^2) * (v/(|u||v|) - cos u/|u|^2)
                let dacos = -T::one() / (T::one() - cos * cos).sqrt();
                let dcos_dur = vr / (nu * nv) - cos * ur / nu2;
                let dcos_dub = vb / (nu * nv) - cos * ub / nu2;
                // chroma clamp gate
                if pr > eps {
                    dpred[[ni, 0, y, x]] = scale * dacos * dcos_dur;
                }
                if pb > eps {
                    dpred[[ni, 1, y, x]] = scale * dacos * dcos_dub;
                }
            }
        }
    }
    dpred
}
