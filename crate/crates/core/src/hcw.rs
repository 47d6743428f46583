//! The hierarchical concept whitening layer.
//!
//! Features `Z` of shape `[n, d, h, w]` are treated as `n·h·w` samples of a
//! `d`-dimensional distribution. Train mode whitens with the batch's own mean
//! and ZCA matrix; eval mode uses the running (EMA) estimates. The output is
//! `Qᵀ W (z − μ)` at every spatial location.

use crate::error::{HcwError, Result};
use crate::linalg::{psd_inverse_sqrt, psd_inverse_sqrt_eig, Matrix};
use crate::net::tape::{apply_channel_affine, NodeId, TapeCache};
use crate::tensor::Tensor;

pub const DEFAULT_EMA_DECAY: f64 = 0.9;
pub const DEFAULT_POOL_WINDOW: usize = 2;
const ORTHO_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running whitening statistics used at evaluation time.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningState {
    pub mu: Vec<f64>,
    /// Running covariance; `w` is kept equal to `(cov + eps·I)^(-1/2)`.
    pub cov: Matrix,
    pub w: Matrix,
    pub decay: f64,
    pub eps: f64,
}

impl WhiteningState {
    /// Starts at `μ = 0`, `Σ = I`, `W = I`.
    pub fn new(dim: usize, decay: f64, eps: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(HcwError::validation(format!(
                "EMA decay must lie in [0, 1], got {decay}"
            )));
        }
        if !(eps >= 0.0) {
            return Err(HcwError::validation(format!("eps must be >= 0, got {eps}")));
        }
        Ok(Self {
            mu: vec![0.0; dim],
            cov: Matrix::identity(dim),
            w: Matrix::identity(dim),
            decay,
            eps,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Per-batch mean, covariance and ZCA whitening matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mu: Vec<f64>,
    pub cov: Matrix,
    pub w: Matrix,
}

/// Orthogonal matrix whose columns are the concept axes.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationMatrix {
    q: Matrix,
}

impl RotationMatrix {
    pub fn identity(dim: usize) -> Self {
        Self {
            q: Matrix::identity(dim),
        }
    }

    pub fn new(q: Matrix) -> Result<Self> {
        if !q.is_square() {
            return Err(HcwError::validation("rotation matrix must be square"));
        }
        let res = q.orthogonality_residual();
        if !(res <= ORTHO_TOL) {
            return Err(HcwError::numeric(format!(
                "rotation matrix is not orthogonal: ‖QᵀQ − I‖ = {res:e}"
            )));
        }
        Ok(Self { q })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.q
    }

    pub fn dim(&self) -> usize {
        self.q.rows()
    }

    pub fn residual(&self) -> f64 {
        self.q.orthogonality_residual()
    }
}

/// Sample mean and `(Σ + eps·I)^(-1/2)` over all `n·h·w` positions.
///
/// Covariance uses the `1/m` normalization so the whitened output has unit
/// covariance under the same estimator.
pub fn batch_statistics(z: &Tensor, eps: f64) -> Result<BatchStats> {
    let (mu, cov) = batch_moments(z)?;
    let w = psd_inverse_sqrt(&cov, eps)?;
    Ok(BatchStats { mu, cov, w })
}

/// Mean and `1/m` covariance over the `n·h·w` channel vectors.
fn batch_moments(z: &Tensor) -> Result<(Vec<f64>, Matrix)> {
    let (n, d, h, w) = z.dims4()?;
    let hw = h * w;
    let m = n * hw;
    if m < 2 {
        return Err(HcwError::validation(format!(
            "whitening needs at least 2 samples, batch has {m}"
        )));
    }
    let mut mu = vec![0.0; d];
    for i in 0..n {
        let img = z.outer(i);
        for (c, mu_c) in mu.iter_mut().enumerate() {
            *mu_c += img[c * hw..(c + 1) * hw].iter().sum::<f64>();
        }
    }
    mu.iter_mut().for_each(|v| *v /= m as f64);

    let mut cov = Matrix::zeros(d, d);
    let mut centered = vec![0.0; d * hw];
    for i in 0..n {
        let img = z.outer(i);
        for c in 0..d {
            for p in 0..hw {
                centered[c * hw + p] = img[c * hw + p] - mu[c];
            }
        }
        for a in 0..d {
            let ra = &centered[a * hw..(a + 1) * hw];
            for b in a..d {
                let rb = &centered[b * hw..(b + 1) * hw];
                cov[(a, b)] += ra.iter().zip(rb).map(|(x, y)| x * y).sum::<f64>();
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[(a, b)] / m as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    if !cov.is_finite() {
        return Err(HcwError::numeric("feature covariance is not finite"));
    }
    Ok((mu, cov))
}

fn check_dims(z: &Tensor, state: &WhiteningState, q: &RotationMatrix) -> Result<usize> {
    let (_, d, _, _) = z.dims4()?;
    if d != state.dim() || d != q.dim() {
        return Err(HcwError::validation(format!(
            "features have {d} channels, layer is {}-dimensional (Q is {})",
            state.dim(),
            q.dim()
        )));
    }
    Ok(d)
}

fn select_stats(
    z: &Tensor,
    state: &WhiteningState,
    mode: Mode,
) -> Result<(Vec<f64>, Matrix, Option<BatchStats>)> {
    Ok(match mode {
        Mode::Train => {
            let stats = batch_statistics(z, state.eps)?;
            (stats.mu.clone(), stats.w.clone(), Some(stats))
        }
        Mode::Eval => (state.mu.clone(), state.w.clone(), None),
    })
}

/// `Qᵀ W (z − μ)` as a plain function (no tape). Train mode also returns the
/// batch statistics for the caller's EMA update.
pub fn hcw_forward(
    z: &Tensor,
    state: &WhiteningState,
    q: &RotationMatrix,
    mode: Mode,
) -> Result<(Tensor, Option<BatchStats>)> {
    let d = check_dims(z, state, q)?;
    let (mu, w, stats) = select_stats(z, state, mode)?;
    let map = q.matrix().transpose().matmul(&w)?;
    let (n, _, h, wd) = z.dims4()?;
    let out = apply_channel_affine(z, &map, &mu, n, d, h * wd);
    Ok((Tensor::from_vec(z.shape(), out)?, stats))
}

/// Whitening only, `W (z − μ)`, with the running statistics.
pub fn whiten_eval(z: &Tensor, state: &WhiteningState) -> Result<Tensor> {
    let (n, d, h, w) = z.dims4()?;
    if d != state.dim() {
        return Err(HcwError::validation(format!(
            "features have {d} channels, whitening state is {}",
            state.dim()
        )));
    }
    let out = apply_channel_affine(z, &state.w, &state.mu, n, d, h * w);
    Tensor::from_vec(z.shape(), out)
}

/// How train-mode gradients treat the batch statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsGradient {
    /// `μ` and `W` are constants; gradients pass through the fixed map `QᵀW`.
    Stop,
    /// Differentiate through `μ(Z)` and `W(Z) = Σ(Z)^(-1/2)` as well.
    Through,
}

/// Same as [`hcw_forward`] but recorded on a tape. `μ`, `W` and `Q` never
/// receive gradients; `grad` decides whether backbone gradients also flow
/// through the batch statistics (train mode only, eval statistics are always
/// constant).
pub fn hcw_forward_tape(
    tape: &mut TapeCache,
    features: NodeId,
    state: &WhiteningState,
    q: &RotationMatrix,
    mode: Mode,
    grad: StatsGradient,
) -> Result<(NodeId, Option<BatchStats>)> {
    check_dims(tape.value(features), state, q)?;
    if mode == Mode::Train && grad == StatsGradient::Through {
        let (mu, cov) = batch_moments(tape.value(features))?;
        let (w, eig) = psd_inverse_sqrt_eig(&cov, state.eps)?;
        let out = tape.batch_whiten(features, q.matrix(), &mu, &w, &eig, state.eps)?;
        return Ok((out, Some(BatchStats { mu, cov, w })));
    }
    let (mu, w, stats) = select_stats(tape.value(features), state, mode)?;
    let map = q.matrix().transpose().matmul(&w)?;
    let out = tape.channel_affine(features, &map, &mu)?;
    Ok((out, stats))
}

/// `new = decay·old + (1 − decay)·batch` for `μ` and `Σ`, then
/// `W = (Σ + eps·I)^(-1/2)` from the running covariance. With `decay = 1`
/// the state is left untouched.
pub fn ema_update(state: &mut WhiteningState, batch: &BatchStats) -> Result<()> {
    let d = state.dim();
    if batch.mu.len() != d || batch.cov.rows() != d || !batch.cov.is_square() {
        return Err(HcwError::validation(
            "batch statistics do not match the layer dimension",
        ));
    }
    let a = state.decay;
    if a == 1.0 {
        return Ok(());
    }
    let b = 1.0 - a;
    for (old, &new) in state.mu.iter_mut().zip(&batch.mu) {
        *old = a * *old + b * new;
    }
    for (old, &new) in state.cov.data_mut().iter_mut().zip(batch.cov.data()) {
        *old = a * *old + b * new;
    }
    state.w = psd_inverse_sqrt(&state.cov, state.eps)?;
    Ok(())
}

fn check_window(h: usize, w: usize, window: usize) -> Result<()> {
    if window == 0 || window > h || window > w {
        return Err(HcwError::validation(format!(
            "pool window {window} larger than the {h}x{w} feature map"
        )));
    }
    Ok(())
}

/// Concept activation per channel: `window×window` max-pool (stride = window)
/// then the mean of the pooled map. Returns `[n, d]`.
pub fn reduce_activation(features: &Tensor, window: usize) -> Result<Tensor> {
    let (n, d, h, w) = features.dims4()?;
    check_window(h, w, window)?;
    let mut out = Vec::with_capacity(n * d);
    for plane in features.data().chunks(h * w) {
        let (vals, _) = crate::net::kernels::max_pool_plane(plane, h, w, window);
        out.push(vals.iter().sum::<f64>() / vals.len() as f64);
    }
    Tensor::from_vec(&[n, d], out)
}

/// Tape version of [`reduce_activation`].
pub fn reduce_activation_tape(
    tape: &mut TapeCache,
    features: NodeId,
    window: usize,
) -> Result<NodeId> {
    let (_, _, h, w) = tape.value(features).dims4()?;
    check_window(h, w, window)?;
    let pooled = tape.max_pool(features, window)?;
    tape.spatial_mean(pooled)
}

/// Per-image mean over spatial positions, `[n, d, h, w] → [n, d]`.
pub fn spatial_mean(features: &Tensor) -> Result<Tensor> {
    let (n, d, h, w) = features.dims4()?;
    let hw = (h * w) as f64;
    let data = features
        .data()
        .chunks(h * w)
        .map(|p| p.iter().sum::<f64>() / hw)
        .collect();
    Tensor::from_vec(&[n, d], data)
}

/// Covariance (`1/m`) of the `n·h·w` channel vectors of a feature tensor.
pub fn channel_covariance(z: &Tensor) -> Result<Matrix> {
    let (n, d, h, w) = z.dims4()?;
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (c, mc) in mean.iter_mut().enumerate() {
            *mc += z.outer(i)[c * hw..(c + 1) * hw].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut cov = Matrix::zeros(d, d);
    for i in 0..n {
        let img = z.outer(i);
        for a in 0..d {
            for b in 0..d {
                let mut acc = 0.0;
                for p in 0..hw {
                    acc += (img[a * hw + p] - mean[a]) * (img[b * hw + p] - mean[b]);
                }
                cov[(a, b)] += acc;
            }
        }
    }
    Ok(cov.scale(1.0 / m))
}
