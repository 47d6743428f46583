//! Layer-granular reverse-mode differentiation.
//!
//! Every forward op appends a node holding its output and whatever it needs
//! for the backward pass. [`TapeCache::backward`] walks the nodes in reverse
//! once; a second call is a usage error.

use crate::error::{HcwError, Result};
use crate::linalg::{Matrix, SymEig};
use crate::net::kernels::{self, KERNEL};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Gradients aligned index-for-index with a parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub grads: Vec<Tensor>,
}

#[derive(Debug)]
enum Op {
    Input,
    Conv {
        input: NodeId,
        weight_id: usize,
        bias_id: usize,
        weight: Tensor,
        cols: Vec<Vec<f64>>,
    },
    Relu {
        input: NodeId,
    },
    MaxPool {
        input: NodeId,
        argmax: Vec<usize>,
    },
    /// `out = M (z − μ)` at each spatial location; `M` and `μ` are constants.
    ChannelAffine {
        input: NodeId,
        map: Matrix,
    },
    /// `out = Qᵀ W(Z) (z − μ(Z))` with the batch statistics differentiated.
    BatchWhiten {
        input: NodeId,
        q: Matrix,
        w: Matrix,
        mean: Vec<f64>,
        /// Eigenvectors of the batch covariance (columns).
        vectors: Matrix,
        /// Eigenvalues plus the regularizer.
        shifted: Vec<f64>,
    },
    SpatialMean {
        input: NodeId,
    },
    Linear {
        input: NodeId,
        weight_id: usize,
        bias_id: usize,
        weight: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded forward pass.
#[derive(Debug)]
pub struct TapeCache {
    nodes: Vec<Node>,
    param_shapes: Vec<Vec<usize>>,
    consumed: bool,
}

impl TapeCache {
    /// `param_shapes` fixes the layout of the gradients returned by `backward`.
    pub fn new(param_shapes: Vec<Vec<usize>>) -> Self {
        Self {
            nodes: Vec::new(),
            param_shapes,
            consumed: false,
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input)
    }

    /// 3×3 stride-1 same-padded convolution.
    pub fn conv3x3(
        &mut self,
        input: NodeId,
        weight_id: usize,
        weight: &Tensor,
        bias_id: usize,
        bias: &Tensor,
    ) -> Result<NodeId> {
        let (n, cin, h, w) = self.value(input).dims4()?;
        let (cout, wcin, kh, kw) = weight.dims4()?;
        if wcin != cin || kh != KERNEL || kw != KERNEL || bias.shape() != [cout] {
            return Err(HcwError::validation(format!(
                "conv weight {:?} / bias {:?} incompatible with input channels {cin}",
                weight.shape(),
                bias.shape()
            )));
        }
        let hw = h * w;
        let krows = cin * KERNEL * KERNEL;
        let mut out = Tensor::zeros(&[n, cout, h, w]);
        let mut all_cols = Vec::with_capacity(n);
        {
            let src = self.value(input);
            let dst = out.data_mut();
            for i in 0..n {
                let mut cols = vec![0.0; krows * hw];
                kernels::im2col(src.outer(i), cin, h, w, &mut cols);
                let out_img = &mut dst[i * cout * hw..(i + 1) * cout * hw];
                for (co, plane) in out_img.chunks_mut(hw).enumerate() {
                    plane.iter_mut().for_each(|v| *v = bias.data()[co]);
                }
                kernels::gemm_nn(cout, krows, hw, weight.data(), &cols, out_img);
                all_cols.push(cols);
            }
        }
        Ok(self.push(
            out,
            Op::Conv {
                input,
                weight_id,
                bias_id,
                weight: weight.clone(),
                cols: all_cols,
            },
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let mut out = self.value(input).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(out, Op::Relu { input })
    }

    /// Non-overlapping `window×window` max pooling (partial edge windows dropped).
    pub fn max_pool(&mut self, input: NodeId, window: usize) -> Result<NodeId> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if window == 0 || window > h || window > w {
            return Err(HcwError::validation(format!(
                "pool window {window} does not fit a {h}x{w} map"
            )));
        }
        let (oh, ow) = (h / window, w / window);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let src = self.value(input).data();
        for plane_idx in 0..n * c {
            let plane = &src[plane_idx * h * w..(plane_idx + 1) * h * w];
            let (vals, idx) = kernels::max_pool_plane(plane, h, w, window);
            out.extend(vals);
            argmax.extend(idx.into_iter().map(|i| plane_idx * h * w + i));
        }
        let out = Tensor::from_vec(&[n, c, oh, ow], out)?;
        Ok(self.push(out, Op::MaxPool { input, argmax }))
    }

    /// Applies the constant affine map `M (z − μ)` along the channel axis.
    pub fn channel_affine(&mut self, input: NodeId, map: &Matrix, mean: &[f64]) -> Result<NodeId> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if map.rows() != c || map.cols() != c || mean.len() != c {
            return Err(HcwError::validation(format!(
                "channel map {}x{} / mean {} incompatible with {c} channels",
                map.rows(),
                map.cols(),
                mean.len()
            )));
        }
        let out = apply_channel_affine(self.value(input), map, mean, n, c, h * w);
        let out = Tensor::from_vec(&[n, c, h, w], out)?;
        Ok(self.push(
            out,
            Op::ChannelAffine {
                input,
                map: map.clone(),
            },
        ))
    }

    /// Batch whitening whose backward pass also differentiates the batch mean
    /// and `W = (Σ + eps·I)^(-1/2)`. `w` and `eig` must come from the input's
    /// own covariance.
    pub fn batch_whiten(
        &mut self,
        input: NodeId,
        q: &Matrix,
        mean: &[f64],
        w: &Matrix,
        eig: &SymEig,
        eps: f64,
    ) -> Result<NodeId> {
        let (n, c, h, wd) = self.value(input).dims4()?;
        if q.rows() != c || w.rows() != c || mean.len() != c || eig.values.len() != c {
            return Err(HcwError::validation(format!(
                "whitening operands do not match {c} channels"
            )));
        }
        let map = q.transpose().matmul(w)?;
        let out = apply_channel_affine(self.value(input), &map, mean, n, c, h * wd);
        let out = Tensor::from_vec(&[n, c, h, wd], out)?;
        Ok(self.push(
            out,
            Op::BatchWhiten {
                input,
                q: q.clone(),
                w: w.clone(),
                mean: mean.to_vec(),
                vectors: eig.vectors.clone(),
                shifted: eig.values.iter().map(|l| l + eps).collect(),
            },
        ))
    }

    /// `[n, c, h, w] → [n, c]` by averaging over spatial positions.
    pub fn spatial_mean(&mut self, input: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let hw = (h * w) as f64;
        let src = self.value(input);
        let data = src
            .data()
            .chunks(h * w)
            .map(|plane| plane.iter().sum::<f64>() / hw)
            .collect();
        let out = Tensor::from_vec(&[n, c], data)?;
        Ok(self.push(out, Op::SpatialMean { input }))
    }

    /// `out = x Wᵀ + b` with `W: [out, in]`.
    pub fn linear(
        &mut self,
        input: NodeId,
        weight_id: usize,
        weight: &Tensor,
        bias_id: usize,
        bias: &Tensor,
    ) -> Result<NodeId> {
        let (n, fin) = self.value(input).dims2()?;
        let (fout, wfin) = weight.dims2()?;
        if wfin != fin || bias.shape() != [fout] {
            return Err(HcwError::validation(format!(
                "linear weight {:?} / bias {:?} incompatible with {fin} input features",
                weight.shape(),
                bias.shape()
            )));
        }
        let mut out = vec![0.0; n * fout];
        for row in out.chunks_mut(fout) {
            row.copy_from_slice(bias.data());
        }
        kernels::gemm_nt(
            n,
            fin,
            fout,
            self.value(input).data(),
            weight.data(),
            &mut out,
        );
        let out = Tensor::from_vec(&[n, fout], out)?;
        Ok(self.push(
            out,
            Op::Linear {
                input,
                weight_id,
                bias_id,
                weight: weight.clone(),
            },
        ))
    }

    /// Back-propagates `upstream` (gradients of the scalar objective with respect
    /// to the listed nodes) and returns parameter gradients.
    pub fn backward(&mut self, upstream: Vec<(NodeId, Tensor)>) -> Result<ParamGrads> {
        if self.consumed {
            return Err(HcwError::Usage(
                "tape cache already consumed by an earlier backward pass".into(),
            ));
        }
        self.consumed = true;

        let mut node_grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (id, g) in upstream {
            if g.shape() != self.value(id).shape() {
                return Err(HcwError::validation(format!(
                    "upstream gradient shape {:?} does not match node shape {:?}",
                    g.shape(),
                    self.value(id).shape()
                )));
            }
            accumulate(&mut node_grads[id.0], g);
        }
        let mut grads = ParamGrads {
            grads: self.param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        };

        for idx in (0..self.nodes.len()).rev() {
            let Some(g_out) = node_grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Relu { input } => {
                    let mut g = g_out;
                    for (gv, &ov) in g.data_mut().iter_mut().zip(node.value.data()) {
                        if ov <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    accumulate(&mut node_grads[input.0], g);
                }
                Op::MaxPool { input, argmax } => {
                    let mut g = Tensor::zeros(self.nodes[input.0].value.shape());
                    let gd = g.data_mut();
                    for (&src, &gv) in argmax.iter().zip(g_out.data()) {
                        gd[src] += gv;
                    }
                    accumulate(&mut node_grads[input.0], g);
                }
                Op::ChannelAffine { input, map } => {
                    let (n, c, h, w) = g_out.dims4()?;
                    let hw = h * w;
                    let mut g = Tensor::zeros(&[n, c, h, w]);
                    for i in 0..n {
                        let go = &g_out.data()[i * c * hw..(i + 1) * c * hw];
                        let gi = &mut g.data_mut()[i * c * hw..(i + 1) * c * hw];
                        kernels::gemm_tn(c, c, hw, map.data(), go, gi);
                    }
                    accumulate(&mut node_grads[input.0], g);
                }
                Op::BatchWhiten {
                    input,
                    q,
                    w,
                    mean,
                    vectors,
                    shifted,
                } => {
                    let g = whiten_backward(
                        &self.nodes[input.0].value,
                        &g_out,
                        q,
                        w,
                        mean,
                        vectors,
                        shifted,
                    )?;
                    accumulate(&mut node_grads[input.0], g);
                }
                Op::SpatialMean { input } => {
                    let shape = self.nodes[input.0].value.shape().to_vec();
                    let hw = shape[2] * shape[3];
                    let mut g = Tensor::zeros(&shape);
                    for (plane, &gv) in g.data_mut().chunks_mut(hw).zip(g_out.data()) {
                        let share = gv / hw as f64;
                        plane.iter_mut().for_each(|v| *v = share);
                    }
                    accumulate(&mut node_grads[input.0], g);
                }
                Op::Linear {
                    input,
                    weight_id,
                    bias_id,
                    weight,
                } => {
                    let x = &self.nodes[input.0].value;
                    let (n, fin) = x.dims2()?;
                    let fout = weight.shape()[0];
                    // dW = gᵀ x ; db = Σ g ; dx = g W
                    kernels::gemm_tn(
                        fout,
                        n,
                        fin,
                        g_out.data(),
                        x.data(),
                        grads.grads[*weight_id].data_mut(),
                    );
                    let gb = grads.grads[*bias_id].data_mut();
                    for row in g_out.data().chunks(fout) {
                        for (b, &v) in gb.iter_mut().zip(row) {
                            *b += v;
                        }
                    }
                    let mut gx = Tensor::zeros(&[n, fin]);
                    kernels::gemm_nn(n, fout, fin, g_out.data(), weight.data(), gx.data_mut());
                    accumulate(&mut node_grads[input.0], gx);
                }
                Op::Conv {
                    input,
                    weight_id,
                    bias_id,
                    weight,
                    cols,
                } => {
                    let (n, cin, h, w) = self.nodes[input.0].value.dims4()?;
                    let cout = weight.shape()[0];
                    let hw = h * w;
                    let krows = cin * KERNEL * KERNEL;
                    let mut gx = Tensor::zeros(&[n, cin, h, w]);
                    let mut gcols = vec![0.0; krows * hw];
                    for i in 0..n {
                        let go = &g_out.data()[i * cout * hw..(i + 1) * cout * hw];
                        kernels::gemm_nt(
                            cout,
                            hw,
                            krows,
                            go,
                            &cols[i],
                            grads.grads[*weight_id].data_mut(),
                        );
                        let gb = grads.grads[*bias_id].data_mut();
                        for (co, plane) in go.chunks(hw).enumerate() {
                            gb[co] += plane.iter().sum::<f64>();
                        }
                        gcols.iter_mut().for_each(|v| *v = 0.0);
                        kernels::gemm_tn(krows, cout, hw, weight.data(), go, &mut gcols);
                        let gxi = &mut gx.data_mut()[i * cin * hw..(i + 1) * cin * hw];
                        kernels::col2im(&gcols, cin, h, w, gxi);
                    }
                    accumulate(&mut node_grads[input.0], gx);
                }
            }
        }
        Ok(grads)
    }
}

/// Gradient of `Qᵀ W (Z − μ)` with respect to `Z` when `μ` and
/// `W = (Σ + eps·I)^(-1/2)` are functions of `Z`.
///
/// With `Y = W Xc` and upstream `G = Q·G_out`: `∂L/∂W = G Xcᵀ`; the
/// Daleckii–Krein formula gives `∂L/∂Σ = V ((Vᵀ sym(∂L/∂W) V) ∘ K) Vᵀ` with
/// `K_ij = −1 / (√a_i √a_j (√a_i + √a_j))`, the divided difference of
/// `a^(-1/2)` (exact on the diagonal too). Then
/// `∂L/∂Xc = W G + (2/m) ∂L/∂Σ Xc` and centering subtracts the channel mean.
fn whiten_backward(
    x: &Tensor,
    g_out: &Tensor,
    q: &Matrix,
    w: &Matrix,
    mean: &[f64],
    vectors: &Matrix,
    shifted: &[f64],
) -> Result<Tensor> {
    let (n, c, h, wd) = x.dims4()?;
    let hw = h * wd;
    let m = (n * hw) as f64;
    let mut xc = vec![0.0; n * c * hw];
    for (i, chunk) in xc.chunks_mut(c * hw).enumerate() {
        let src = x.outer(i);
        for ch in 0..c {
            for p in 0..hw {
                chunk[ch * hw + p] = src[ch * hw + p] - mean[ch];
            }
        }
    }
    let mut gy = vec![0.0; n * c * hw];
    let mut dw = vec![0.0; c * c];
    for i in 0..n {
        let go = &g_out.data()[i * c * hw..(i + 1) * c * hw];
        let gyi = &mut gy[i * c * hw..(i + 1) * c * hw];
        kernels::gemm_nn(c, c, hw, q.data(), go, gyi);
        kernels::gemm_nt(c, hw, c, gyi, &xc[i * c * hw..(i + 1) * c * hw], &mut dw);
    }
    let dw = Matrix::new(c, c, dw)?;
    let sym = dw.add(&dw.transpose())?.scale(0.5);
    let mut t = vectors.transpose().matmul(&sym)?.matmul(vectors)?;
    let roots: Vec<f64> = shifted.iter().map(|a| a.sqrt()).collect();
    for r in 0..c {
        for k in 0..c {
            t[(r, k)] *= -1.0 / (roots[r] * roots[k] * (roots[r] + roots[k]));
        }
    }
    let dsigma = vectors
        .matmul(&t)?
        .matmul(&vectors.transpose())?
        .scale(2.0 / m);
    let mut gx = vec![0.0; n * c * hw];
    for i in 0..n {
        let range = i * c * hw..(i + 1) * c * hw;
        kernels::gemm_nn(
            c,
            c,
            hw,
            w.data(),
            &gy[range.clone()],
            &mut gx[range.clone()],
        );
        kernels::gemm_nn(c, c, hw, dsigma.data(), &xc[range.clone()], &mut gx[range]);
    }
    let mut channel_mean = vec![0.0; c];
    for chunk in gx.chunks(c * hw) {
        for (ch, cm) in channel_mean.iter_mut().enumerate() {
            *cm += chunk[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
        }
    }
    channel_mean.iter_mut().for_each(|v| *v /= m);
    for chunk in gx.chunks_mut(c * hw) {
        for (ch, cm) in channel_mean.iter().enumerate() {
            chunk[ch * hw..(ch + 1) * hw]
                .iter_mut()
                .for_each(|v| *v -= cm);
        }
    }
    Tensor::from_vec(&[n, c, h, wd], gx)
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// `M (z − μ)` per spatial location of every image in an `[n, c, hw]` buffer.
pub(crate) fn apply_channel_affine(
    z: &Tensor,
    map: &Matrix,
    mean: &[f64],
    n: usize,
    c: usize,
    hw: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; n * c * hw];
    let mut centered = vec![0.0; c * hw];
    for i in 0..n {
        let src = z.outer(i);
        for ch in 0..c {
            let mu = mean[ch];
            for p in 0..hw {
                centered[ch * hw + p] = src[ch * hw + p] - mu;
            }
        }
        kernels::gemm_nn(
            c,
            c,
            hw,
            map.data(),
            &centered,
            &mut out[i * c * hw..(i + 1) * c * hw],
        );
    }
    out
}
