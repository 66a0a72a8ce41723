//! The split network `p(x) = softmax(g(f(x) ⊙ A))`.
//!
//! The feature extractor `f` is `affine → ReLU → affine → ReLU → BN → affine`
//! and the classifier `g` is a single affine layer. Weights are stored in
//! `out × in` orientation, so `W_fl` is `d × h` (row `j` feeds feature
//! channel `j`) and `W_g` is `C × d` (column `j` reads feature channel `j`).
//!
//! Batch normalization here is per-channel standardization with an affine
//! `γ`/`β`. Training mode normalizes with the batch's biased variance and
//! folds it into the running statistics with momentum 0.1; eval mode uses
//! the running statistics.

use crate::error::{Error, Result};
use crate::numerics::{matmul_at, matmul_bt, sgd_step, softmax_rows, Matrix, Rng, SgdState};
use serde::{Deserialize, Serialize};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkDims {
    pub input_dim: usize,
    pub hidden: usize,
    pub feature_dim: usize,
    pub classes: usize,
}

impl NetworkDims {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.feature_dim == 0 {
            return Err(Error::config("network dimensions must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        Ok(())
    }
}

/// Learnable tensors. BN running statistics are buffers, not parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    W1,
    B1,
    W2,
    B2,
    BnGamma,
    BnBeta,
    Wfl,
    Bfl,
    Wg,
    Bg,
}

impl ParamId {
    pub const ALL: [ParamId; 10] = [
        ParamId::W1,
        ParamId::B1,
        ParamId::W2,
        ParamId::B2,
        ParamId::BnGamma,
        ParamId::BnBeta,
        ParamId::Wfl,
        ParamId::Bfl,
        ParamId::Wg,
        ParamId::Bg,
    ];

    /// Parameters updated during target adaptation.
    pub const ADAPTABLE: [ParamId; 5] = [
        ParamId::BnGamma,
        ParamId::BnBeta,
        ParamId::Wfl,
        ParamId::Bfl,
        ParamId::Wg,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamId::W1 => "w1",
            ParamId::B1 => "b1",
            ParamId::W2 => "w2",
            ParamId::B2 => "b2",
            ParamId::BnGamma => "bn_gamma",
            ParamId::BnBeta => "bn_beta",
            ParamId::Wfl => "w_fl",
            ParamId::Bfl => "b_fl",
            ParamId::Wg => "w_g",
            ParamId::Bg => "b_g",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub dims: NetworkDims,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub bn_gamma: Matrix,
    pub bn_beta: Matrix,
    pub bn_mean: Matrix,
    pub bn_var: Matrix,
    pub w_fl: Matrix,
    pub b_fl: Matrix,
    pub w_g: Matrix,
    pub b_g: Matrix,
    pub trainable: [bool; 10],
}

fn glorot(fan_out: usize, fan_in: usize, rng: &mut Rng) -> Matrix {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::uniform(fan_out, fan_in, bound, rng)
}

impl NetworkParams {
    /// Glorot-uniform weights, zero biases, identity BN.
    pub fn init(dims: NetworkDims, rng: &mut Rng) -> Result<Self> {
        dims.validate()?;
        let NetworkDims {
            input_dim,
            hidden: h,
            feature_dim: d,
            classes: c,
        } = dims;
        Ok(Self {
            dims,
            w1: glorot(h, input_dim, rng),
            b1: Matrix::zeros(1, h),
            w2: glorot(h, h, rng),
            b2: Matrix::zeros(1, h),
            bn_gamma: Matrix::filled(1, h, 1.0),
            bn_beta: Matrix::zeros(1, h),
            bn_mean: Matrix::zeros(1, h),
            bn_var: Matrix::filled(1, h, 1.0),
            w_fl: glorot(d, h, rng),
            b_fl: Matrix::zeros(1, d),
            w_g: glorot(c, d, rng),
            b_g: Matrix::zeros(1, c),
            trainable: [true; 10],
        })
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        match id {
            ParamId::W1 => &self.w1,
            ParamId::B1 => &self.b1,
            ParamId::W2 => &self.w2,
            ParamId::B2 => &self.b2,
            ParamId::BnGamma => &self.bn_gamma,
            ParamId::BnBeta => &self.bn_beta,
            ParamId::Wfl => &self.w_fl,
            ParamId::Bfl => &self.b_fl,
            ParamId::Wg => &self.w_g,
            ParamId::Bg => &self.b_g,
        }
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        match id {
            ParamId::W1 => &mut self.w1,
            ParamId::B1 => &mut self.b1,
            ParamId::W2 => &mut self.w2,
            ParamId::B2 => &mut self.b2,
            ParamId::BnGamma => &mut self.bn_gamma,
            ParamId::BnBeta => &mut self.bn_beta,
            ParamId::Wfl => &mut self.w_fl,
            ParamId::Bfl => &mut self.b_fl,
            ParamId::Wg => &mut self.w_g,
            ParamId::Bg => &mut self.b_g,
        }
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.index()]
    }

    pub fn set_all_trainable(&mut self) {
        self.trainable = [true; 10];
    }

    /// Only BN affine, `W_fl`, `b_fl` and `W_g` stay trainable. `b_g` is
    /// shared by every domain and no mask can protect it, so it is frozen.
    pub fn freeze_for_adaptation(&mut self) {
        self.trainable = [false; 10];
        for id in ParamId::ADAPTABLE {
            self.trainable[id.index()] = true;
        }
    }

    fn check_mask(&self, mask: Option<&[f64]>) -> Result<()> {
        match mask {
            Some(m) if m.len() != self.dims.feature_dim => Err(Error::shape(format!(
                "mask of length {} for feature dimension {}",
                m.len(),
                self.dims.feature_dim
            ))),
            _ => Ok(()),
        }
    }

    pub fn all_finite(&self) -> bool {
        ParamId::ALL.iter().all(|&id| self.get(id).is_finite())
            && self.bn_mean.is_finite()
            && self.bn_var.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Activations of `f` for one batch.
#[derive(Debug, Clone)]
pub struct TrunkCache {
    pub mode: Mode,
    pub x: Matrix,
    z1: Matrix,
    a1: Matrix,
    z2: Matrix,
    a2: Matrix,
    xhat: Matrix,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
    bn_out: Matrix,
    /// `f(x)`, n × d.
    pub features: Matrix,
}

impl TrunkCache {
    pub fn batch_size(&self) -> usize {
        self.x.rows()
    }
}

/// Classifier pass for one mask.
#[derive(Debug, Clone)]
pub struct HeadCache {
    pub mask: Option<Vec<f64>>,
    /// `f(x) ⊙ A`, n × d.
    pub masked: Matrix,
    pub logits: Matrix,
    /// softmax(logits), n × C.
    pub probs: Matrix,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub trunk: TrunkCache,
    pub head: HeadCache,
}

impl ForwardCache {
    pub fn features(&self) -> &Matrix {
        &self.trunk.features
    }

    pub fn masked_features(&self) -> &Matrix {
        &self.head.masked
    }

    pub fn probs(&self) -> &Matrix {
        &self.head.probs
    }

    pub fn logits(&self) -> &Matrix {
        &self.head.logits
    }

    pub fn batch_size(&self) -> usize {
        self.trunk.batch_size()
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.head
            .probs
            .row_iter()
            .map(crate::numerics::argmax)
            .collect()
    }
}

fn affine(x: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut z = matmul_bt(x, w)?;
    z.add_row(b.data())?;
    Ok(z)
}

fn relu(z: &Matrix) -> Matrix {
    z.map(|v| v.max(0.0))
}

/// Hidden activations feeding BN, without touching any statistics.
fn hidden(params: &NetworkParams, x: &Matrix) -> Result<(Matrix, Matrix, Matrix, Matrix)> {
    if x.cols() != params.dims.input_dim {
        return Err(Error::shape(format!(
            "input has {} columns, network expects {}",
            x.cols(),
            params.dims.input_dim
        )));
    }
    let z1 = affine(x, &params.w1, &params.b1)?;
    let a1 = relu(&z1);
    let z2 = affine(&a1, &params.w2, &params.b2)?;
    let a2 = relu(&z2);
    Ok((z1, a1, z2, a2))
}

fn mean_and_var(m: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let mean = m.column_means();
    let n = m.rows().max(1) as f64;
    let mut var = vec![0.0; m.cols()];
    for r in m.row_iter() {
        for ((v, x), mu) in var.iter_mut().zip(r).zip(&mean) {
            *v += (x - mu) * (x - mu);
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

/// Computes `f(x)` without mutating `params`. Statistics of a training-mode
/// batch are kept in the cache; see [`commit_bn_stats`].
pub fn forward_trunk(params: &NetworkParams, x: &Matrix, mode: Mode) -> Result<TrunkCache> {
    let (z1, a1, z2, a2) = hidden(params, x)?;
    let n = x.rows();
    let (mean, var) = match mode {
        Mode::Train => {
            if n < 2 {
                return Err(Error::config(format!(
                    "batch norm in training mode needs at least 2 samples, got {n}"
                )));
            }
            mean_and_var(&a2)
        }
        Mode::Eval => (
            params.bn_mean.data().to_vec(),
            params.bn_var.data().to_vec(),
        ),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = a2.clone();
    for r in 0..n {
        for (j, x) in xhat.row_mut(r).iter_mut().enumerate() {
            *x = (*x - mean[j]) * inv_std[j];
        }
    }
    let mut bn_out = xhat.clone();
    bn_out.mul_row(params.bn_gamma.data())?;
    bn_out.add_row(params.bn_beta.data())?;
    let features = affine(&bn_out, &params.w_fl, &params.b_fl)?;
    Ok(TrunkCache {
        mode,
        x: x.clone(),
        z1,
        a1,
        z2,
        a2,
        xhat,
        inv_std,
        batch_mean: mean,
        batch_var: var,
        bn_out,
        features,
    })
}

/// Folds a training-mode batch into the running statistics.
pub fn commit_bn_stats(params: &mut NetworkParams, trunk: &TrunkCache) {
    if trunk.mode != Mode::Train {
        return;
    }
    let keep = 1.0 - BN_MOMENTUM;
    for (rm, m) in params.bn_mean.data_mut().iter_mut().zip(&trunk.batch_mean) {
        *rm = keep * *rm + BN_MOMENTUM * m;
    }
    for (rv, v) in params.bn_var.data_mut().iter_mut().zip(&trunk.batch_var) {
        *rv = keep * *rv + BN_MOMENTUM * v;
    }
}

/// Classifier on `f(x) ⊙ mask`.
pub fn forward_head(
    params: &NetworkParams,
    trunk: &TrunkCache,
    mask: Option<&[f64]>,
) -> Result<HeadCache> {
    params.check_mask(mask)?;
    let mut masked = trunk.features.clone();
    if let Some(m) = mask {
        masked.mul_row(m)?;
    }
    let logits = affine(&masked, &params.w_g, &params.b_g)?;
    let probs = softmax_rows(&logits);
    Ok(HeadCache {
        mask: mask.map(<[f64]>::to_vec),
        masked,
        logits,
        probs,
    })
}

/// Full forward pass. Training mode also updates the BN running statistics.
pub fn forward(
    params: &mut NetworkParams,
    x: &Matrix,
    mask: Option<&[f64]>,
    mode: Mode,
) -> Result<ForwardCache> {
    params.check_mask(mask)?;
    let trunk = forward_trunk(params, x, mode)?;
    let head = forward_head(params, &trunk, mask)?;
    commit_bn_stats(params, &trunk);
    Ok(ForwardCache { trunk, head })
}

/// Eval-mode forward pass on a shared reference.
pub fn predict(params: &NetworkParams, x: &Matrix, mask: Option<&[f64]>) -> Result<ForwardCache> {
    params.check_mask(mask)?;
    let trunk = forward_trunk(params, x, Mode::Eval)?;
    let head = forward_head(params, &trunk, mask)?;
    Ok(ForwardCache { trunk, head })
}

/// Gradients for every learnable tensor, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    tensors: Vec<Matrix>,
}

impl Gradients {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        Self {
            tensors: ParamId::ALL
                .iter()
                .map(|&id| {
                    let (r, c) = params.get(id).shape();
                    Matrix::zeros(r, c)
                })
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.tensors[id.index()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.tensors[id.index()]
    }

    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.axpy(1.0, b)?;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }
}

/// Gradients produced by the classifier for one head.
#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub w_g: Matrix,
    pub b_g: Matrix,
    /// ∂L/∂f(x), n × d.
    pub dfeatures: Matrix,
    /// ∂L/∂A summed over the batch, length d. Zero-length when unmasked.
    pub dmask: Vec<f64>,
}

/// Mean cross-entropy and its gradient at the logits.
pub fn cross_entropy(probs: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (n, c) = probs.shape();
    if labels.len() != n {
        return Err(Error::usage(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::usage(format!("label {bad} outside [0, {c})")));
    }
    let mut dlogits = probs.clone();
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for (i, &y) in labels.iter().enumerate() {
        loss -= probs[(i, y)].max(1e-300).ln();
        dlogits[(i, y)] -= 1.0;
    }
    dlogits.scale(inv_n);
    Ok((loss * inv_n, dlogits))
}

pub fn backward_head(
    params: &NetworkParams,
    trunk: &TrunkCache,
    head: &HeadCache,
    dlogits: &Matrix,
) -> Result<HeadGrads> {
    if dlogits.shape() != head.logits.shape() {
        return Err(Error::usage(format!(
            "upstream gradient {:?} does not match logits {:?}",
            dlogits.shape(),
            head.logits.shape()
        )));
    }
    let w_g = matmul_at(dlogits, &head.masked)?;
    let b_g = Matrix::row_vector(dlogits.column_sums());
    let dmasked = crate::numerics::matmul(dlogits, &params.w_g)?;
    let (dfeatures, dmask) = match &head.mask {
        Some(m) => {
            let mut df = dmasked.clone();
            df.mul_row(m)?;
            let mut dm = vec![0.0; m.len()];
            for (fr, gr) in trunk.features.row_iter().zip(dmasked.row_iter()) {
                for ((s, f), g) in dm.iter_mut().zip(fr).zip(gr) {
                    *s += f * g;
                }
            }
            (df, dm)
        }
        None => (dmasked, Vec::new()),
    };
    Ok(HeadGrads {
        w_g,
        b_g,
        dfeatures,
        dmask,
    })
}

/// Backpropagates ∂L/∂f(x) through the extractor, adding into `grads`.
pub fn backward_trunk(
    params: &NetworkParams,
    trunk: &TrunkCache,
    dfeatures: &Matrix,
    grads: &mut Gradients,
) -> Result<()> {
    if dfeatures.shape() != trunk.features.shape() {
        return Err(Error::usage("feature gradient does not match cached batch"));
    }
    let n = trunk.batch_size() as f64;
    grads
        .get_mut(ParamId::Wfl)
        .axpy(1.0, &matmul_at(dfeatures, &trunk.bn_out)?)?;
    grads
        .get_mut(ParamId::Bfl)
        .axpy(1.0, &Matrix::row_vector(dfeatures.column_sums()))?;
    let dbn = crate::numerics::matmul(dfeatures, &params.w_fl)?;

    let mut dgamma = vec![0.0; dbn.cols()];
    for (gr, xr) in dbn.row_iter().zip(trunk.xhat.row_iter()) {
        for ((s, g), x) in dgamma.iter_mut().zip(gr).zip(xr) {
            *s += g * x;
        }
    }
    grads
        .get_mut(ParamId::BnGamma)
        .axpy(1.0, &Matrix::row_vector(dgamma))?;
    let dbeta = dbn.column_sums();
    grads
        .get_mut(ParamId::BnBeta)
        .axpy(1.0, &Matrix::row_vector(dbeta))?;

    let mut dxhat = dbn;
    dxhat.mul_row(params.bn_gamma.data())?;
    let mut da2 = dxhat.clone();
    match trunk.mode {
        Mode::Eval => da2.mul_row(&trunk.inv_std)?,
        Mode::Train => {
            let sum_dxhat = dxhat.column_sums();
            let mut sum_dxhat_xhat = vec![0.0; dxhat.cols()];
            for (gr, xr) in dxhat.row_iter().zip(trunk.xhat.row_iter()) {
                for ((s, g), x) in sum_dxhat_xhat.iter_mut().zip(gr).zip(xr) {
                    *s += g * x;
                }
            }
            for r in 0..da2.rows() {
                let xr = trunk.xhat.row(r).to_vec();
                for (j, g) in da2.row_mut(r).iter_mut().enumerate() {
                    *g = trunk.inv_std[j] / n * (n * *g - sum_dxhat[j] - xr[j] * sum_dxhat_xhat[j]);
                }
            }
        }
    }

    let relu_back = |da: &mut Matrix, z: &Matrix| {
        for (g, &zv) in da.data_mut().iter_mut().zip(z.data()) {
            if zv <= 0.0 {
                *g = 0.0;
            }
        }
    };
    let mut dz2 = da2;
    relu_back(&mut dz2, &trunk.z2);
    grads
        .get_mut(ParamId::W2)
        .axpy(1.0, &matmul_at(&dz2, &trunk.a1)?)?;
    grads
        .get_mut(ParamId::B2)
        .axpy(1.0, &Matrix::row_vector(dz2.column_sums()))?;
    let mut dz1 = crate::numerics::matmul(&dz2, &params.w2)?;
    relu_back(&mut dz1, &trunk.z1);
    grads
        .get_mut(ParamId::W1)
        .axpy(1.0, &matmul_at(&dz1, &trunk.x)?)?;
    grads
        .get_mut(ParamId::B1)
        .axpy(1.0, &Matrix::row_vector(dz1.column_sums()))?;
    Ok(())
}

fn check_cache_mask(cache: &ForwardCache, mask: Option<&[f64]>) -> Result<()> {
    let same = match (&cache.head.mask, mask) {
        (None, None) => true,
        (Some(a), Some(b)) => a.as_slice() == b,
        _ => false,
    };
    if !same {
        return Err(Error::usage(
            "mask differs from the one used in the forward pass",
        ));
    }
    Ok(())
}

/// Gradients of an arbitrary loss given ∂L/∂logits.
pub fn backward_from_dlogits(
    params: &NetworkParams,
    cache: &ForwardCache,
    dlogits: &Matrix,
    mask: Option<&[f64]>,
) -> Result<Gradients> {
    check_cache_mask(cache, mask)?;
    if cache.trunk.features.cols() != params.dims.feature_dim
        || cache.trunk.a2.cols() != params.dims.hidden
    {
        return Err(Error::usage("cache was produced by a different network"));
    }
    let head = backward_head(params, &cache.trunk, &cache.head, dlogits)?;
    let mut grads = Gradients::zeros_like(params);
    *grads.get_mut(ParamId::Wg) = head.w_g;
    *grads.get_mut(ParamId::Bg) = head.b_g;
    backward_trunk(params, &cache.trunk, &head.dfeatures, &mut grads)?;
    Ok(grads)
}

/// Gradients of mean cross-entropy; also returns the loss.
pub fn backward_ce(
    params: &NetworkParams,
    cache: &ForwardCache,
    labels: &[usize],
    mask: Option<&[f64]>,
) -> Result<(f64, Gradients)> {
    if labels.len() != cache.batch_size() {
        return Err(Error::usage(format!(
            "{} labels for a cached batch of {}",
            labels.len(),
            cache.batch_size()
        )));
    }
    let (loss, dlogits) = cross_entropy(&cache.head.probs, labels)?;
    let grads = backward_from_dlogits(params, cache, &dlogits, mask)?;
    Ok((loss, grads))
}

/// One momentum buffer per learnable tensor.
#[derive(Debug, Clone)]
pub struct Sgd {
    states: Vec<SgdState>,
}

impl Sgd {
    pub fn new(params: &NetworkParams, learning_rate: f64, momentum: f64) -> Self {
        Self {
            states: ParamId::ALL
                .iter()
                .map(|&id| {
                    let (r, c) = params.get(id).shape();
                    SgdState::new(learning_rate, momentum, r, c)
                })
                .collect(),
        }
    }

    pub fn state(&self, id: ParamId) -> &SgdState {
        &self.states[id.index()]
    }
}

/// Scales the gradients of `W_fl`, `b_fl` and `W_g` by `1 − A` along the
/// feature axis, then takes an SGD step on every trainable tensor.
pub fn apply_masked_update(
    params: &mut NetworkParams,
    grads: &Gradients,
    sgd: &mut Sgd,
    protect: Option<&[f64]>,
) -> Result<()> {
    let d = params.dims.feature_dim;
    if let Some(p) = protect {
        if p.len() != d {
            return Err(Error::shape(format!(
                "protect mask of length {} for feature dimension {d}",
                p.len()
            )));
        }
    }
    for id in ParamId::ALL {
        if !params.is_trainable(id) {
            continue;
        }
        let grad = grads.get(id);
        let scaled;
        let grad = match (protect, id) {
            (Some(a), ParamId::Wfl) => {
                let mut g = grad.clone();
                for (j, aj) in a.iter().enumerate() {
                    let keep = 1.0 - aj;
                    g.row_mut(j).iter_mut().for_each(|x| *x *= keep);
                }
                scaled = g;
                &scaled
            }
            (Some(a), ParamId::Bfl | ParamId::Wg) => {
                let keep: Vec<f64> = a.iter().map(|aj| 1.0 - aj).collect();
                let mut g = grad.clone();
                g.mul_row(&keep)?;
                scaled = g;
                &scaled
            }
            _ => grad,
        };
        sgd_step(params.get_mut(id), grad, &mut sgd.states[id.index()])?;
    }
    Ok(())
}

/// Sets the BN running statistics to the exact mean and biased variance of
/// the pre-BN activations over `data`. Weights are untouched. The mask does
/// not reach BN and is accepted only for call-site symmetry.
pub fn refresh_bn_stats(
    params: &mut NetworkParams,
    data: &Matrix,
    mask: Option<&[f64]>,
) -> Result<()> {
    params.check_mask(mask)?;
    if data.rows() == 0 {
        return Err(Error::config(
            "cannot refresh BN statistics from empty data",
        ));
    }
    let (_, _, _, a2) = hidden(params, data)?;
    let (mean, var) = mean_and_var(&a2);
    params.bn_mean = Matrix::row_vector(mean);
    params.bn_var = Matrix::row_vector(var);
    Ok(())
}
