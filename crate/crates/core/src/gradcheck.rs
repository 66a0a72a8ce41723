//! Analytic-versus-finite-difference gradient suites over randomized small
//! instances. An entry passes when `|analytic − numeric|` is within
//! `max(1e-4·max(|analytic|, |numeric|), 1e-6)`, i.e. its
//! [`relative_error`](crate::numerics::relative_error) is below `1e-4`.

use crate::error::Result;
use crate::lsc::{knn, lsc_loss_and_dlogits, lsc_objective, Banks, LscConfig};
use crate::nn::{
    apply_masked_update, backward_ce, backward_from_dlogits, cross_entropy, forward_head,
    forward_trunk, ForwardCache, Mode, NetworkDims, NetworkParams, ParamId, Sgd,
};
use crate::numerics::{finite_diff_grad, max_relative_error, softmax_rows, Matrix, Rng};
use crate::sda::{compensate_embedding_grad, sparsity_penalty, DomainAttention};

pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_TRIALS: usize = 20;
const EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub trials: usize,
    /// Largest relative error over every checked entry of every trial.
    pub max_error: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.max_error < TOLERANCE
    }
}

type Suite = fn(&mut Rng) -> Result<f64>;

/// Every registered suite, in reporting order.
pub const SUITES: [(&str, Suite); 5] = [
    ("cross_entropy", cross_entropy_trial),
    ("lsc_loss", lsc_trial),
    ("sparsity_penalty", sparsity_trial),
    ("embedding_compensation", compensation_trial),
    ("masked_update", masked_update_trial),
];

pub fn run_suite(
    name: &'static str,
    suite: Suite,
    trials: usize,
    seed: u64,
) -> Result<SuiteReport> {
    let mut rng = Rng::with_stream(seed, name.len() as u64 * 7919 + name.as_bytes()[0] as u64);
    let mut max_error: f64 = 0.0;
    for _ in 0..trials {
        max_error = max_error.max(suite(&mut rng)?);
    }
    Ok(SuiteReport {
        name,
        trials,
        max_error,
    })
}

pub fn run_all(trials: usize, seed: u64) -> Result<Vec<SuiteReport>> {
    SUITES
        .iter()
        .map(|&(name, suite)| run_suite(name, suite, trials, seed))
        .collect()
}

fn random_net(rng: &mut Rng) -> NetworkParams {
    let dims = NetworkDims {
        input_dim: 2 + rng.below(3),
        hidden: 3 + rng.below(4),
        feature_dim: 2 + rng.below(4),
        classes: 2 + rng.below(3),
    };
    let mut p = NetworkParams::init(dims, rng).expect("valid dims");
    let h = dims.hidden;
    p.b1 = Matrix::uniform(1, h, 0.5, rng);
    p.b2 = Matrix::uniform(1, h, 0.5, rng);
    p.bn_gamma = Matrix::uniform(1, h, 0.5, rng).map(|v| v + 1.0);
    p.bn_beta = Matrix::uniform(1, h, 0.5, rng);
    p.bn_mean = Matrix::uniform(1, h, 0.3, rng);
    p.bn_var = Matrix::uniform(1, h, 0.3, rng).map(|v| v + 0.6);
    p.b_fl = Matrix::uniform(1, dims.feature_dim, 0.5, rng);
    p.b_g = Matrix::uniform(1, dims.classes, 0.5, rng);
    p
}

fn random_mask(d: usize, rng: &mut Rng) -> Vec<f64> {
    (0..d).map(|_| rng.uniform_range(0.05, 1.0)).collect()
}

fn random_mode(rng: &mut Rng) -> Mode {
    if rng.below(2) == 0 {
        Mode::Train
    } else {
        Mode::Eval
    }
}

fn cache_for(p: &NetworkParams, x: &Matrix, mask: &[f64], mode: Mode) -> Result<ForwardCache> {
    let trunk = forward_trunk(p, x, mode)?;
    let head = forward_head(p, &trunk, Some(mask))?;
    Ok(ForwardCache { trunk, head })
}

/// Max error of `analytic` against central differences of `loss` for every
/// parameter tensor.
fn check_all_params(
    p: &NetworkParams,
    analytic: impl Fn(ParamId) -> Matrix,
    loss: impl Fn(&NetworkParams) -> f64,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for id in ParamId::ALL {
        let num = finite_diff_grad(
            |m| {
                let mut q = p.clone();
                *q.get_mut(id) = m.clone();
                loss(&q)
            },
            p.get(id),
            EPS,
        )?;
        worst = worst.max(max_relative_error(&analytic(id), &num)?);
    }
    Ok(worst)
}

fn cross_entropy_trial(rng: &mut Rng) -> Result<f64> {
    let p = random_net(rng);
    let n = 3 + rng.below(4);
    let x = Matrix::uniform(n, p.dims.input_dim, 2.0, rng);
    let y: Vec<usize> = (0..n).map(|_| rng.below(p.dims.classes)).collect();
    let mask = random_mask(p.dims.feature_dim, rng);
    let mode = random_mode(rng);
    let cache = cache_for(&p, &x, &mask, mode)?;
    let (_, grads) = backward_ce(&p, &cache, &y, Some(&mask))?;
    check_all_params(
        &p,
        |id| grads.get(id).clone(),
        |q| {
            let c = cache_for(q, &x, &mask, mode).expect("same shapes");
            cross_entropy(c.probs(), &y).expect("valid labels").0
        },
    )
}

fn lsc_trial(rng: &mut Rng) -> Result<f64> {
    let p = random_net(rng);
    let (d, c) = (p.dims.feature_dim, p.dims.classes);
    let n_bank = 8 + rng.below(8);
    let feats = Matrix::uniform(n_bank, d, 1.0, rng);
    let scores = softmax_rows(&Matrix::uniform(n_bank, c, 2.0, rng));
    let banks = Banks::new(feats, scores)?;
    let n = 3 + rng.below(3);
    let ids = rng.sample_indices(n_bank, n);
    let x = Matrix::uniform(n, p.dims.input_dim, 2.0, rng);
    let mask = random_mask(d, rng);
    let mode = random_mode(rng);
    let cfg = LscConfig {
        k: 1 + rng.below(4),
        balance_weight: rng.uniform_range(0.5, 2.0),
    };
    let cache = cache_for(&p, &x, &mask, mode)?;
    let neighbors = knn(&banks, cache.masked_features(), Some(&ids), cfg.k)?;
    let (_, dlogits) = lsc_loss_and_dlogits(&cache, &banks, &neighbors, &cfg)?;
    let grads = backward_from_dlogits(&p, &cache, &dlogits, Some(&mask))?;
    check_all_params(
        &p,
        |id| grads.get(id).clone(),
        |q| {
            let c = cache_for(q, &x, &mask, mode).expect("same shapes");
            lsc_objective(c.probs(), &banks, &neighbors, cfg.balance_weight)
                .expect("valid neighbors")
                .0
        },
    )
}

fn random_attention(d: usize, rng: &mut Rng) -> DomainAttention {
    // keep σ(100·e) away from saturation so the derivative is measurable
    DomainAttention::new(1, (0..d).map(|_| rng.uniform_range(-0.03, 0.03)).collect())
}

fn random_priors(d: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..rng.below(3))
        .map(|_| (0..d).map(|_| rng.uniform()).collect())
        .collect()
}

fn sparsity_trial(rng: &mut Rng) -> Result<f64> {
    let d = 2 + rng.below(8);
    let att = random_attention(d, rng);
    let priors = random_priors(d, rng);
    let (_, grad) = sparsity_penalty(&att, &priors)?;
    let num = finite_diff_grad(
        |e| {
            let a = DomainAttention::new(1, e.data().to_vec());
            sparsity_penalty(&a, &priors).expect("same length").0
        },
        &Matrix::row_vector(att.embedding.clone()),
        1e-7,
    )?;
    max_relative_error(&Matrix::row_vector(grad), &num)
}

/// Compensating the scaled penalty gradient must equal the gradient of the
/// same penalty evaluated with an unscaled sigmoid.
fn compensation_trial(rng: &mut Rng) -> Result<f64> {
    let d = 2 + rng.below(8);
    let att = random_attention(d, rng);
    let priors = random_priors(d, rng);
    let (_, grad) = sparsity_penalty(&att, &priors)?;
    let compensated = compensate_embedding_grad(&att, &grad);
    let num = finite_diff_grad(
        |e| {
            let mut a = DomainAttention::new(1, e.data().to_vec());
            a.scale = 1.0;
            sparsity_penalty(&a, &priors).expect("same length").0
        },
        &Matrix::row_vector(att.embedding.clone()),
        EPS,
    )?;
    max_relative_error(&Matrix::row_vector(compensated), &num)
}

/// One plain step (lr 1, momentum 0) must move `W_fl`, `b_fl` and `W_g` by
/// exactly the gradient of the loss with respect to a perturbation that is
/// pre-scaled by `1 − A` along the feature axis.
fn masked_update_trial(rng: &mut Rng) -> Result<f64> {
    let mut p = random_net(rng);
    p.freeze_for_adaptation();
    let n = 3 + rng.below(4);
    let x = Matrix::uniform(n, p.dims.input_dim, 2.0, rng);
    let y: Vec<usize> = (0..n).map(|_| rng.below(p.dims.classes)).collect();
    let mask = random_mask(p.dims.feature_dim, rng);
    let protect: Vec<f64> = (0..p.dims.feature_dim).map(|_| rng.uniform()).collect();
    let mode = random_mode(rng);
    let cache = cache_for(&p, &x, &mask, mode)?;
    let (_, grads) = backward_ce(&p, &cache, &y, Some(&mask))?;
    let mut stepped = p.clone();
    let mut sgd = Sgd::new(&p, 1.0, 0.0);
    apply_masked_update(&mut stepped, &grads, &mut sgd, Some(&protect))?;

    let keep: Vec<f64> = protect.iter().map(|a| 1.0 - a).collect();
    let mut worst: f64 = 0.0;
    for id in [ParamId::Wfl, ParamId::Bfl, ParamId::Wg] {
        let base = p.get(id).clone();
        let scale_at = |r: usize, c: usize| match id {
            ParamId::Wg => keep[c],
            ParamId::Wfl => keep[r],
            _ => keep[c],
        };
        let zero = Matrix::zeros(base.rows(), base.cols());
        let num = finite_diff_grad(
            |theta| {
                let mut q = p.clone();
                let w = q.get_mut(id);
                for r in 0..base.rows() {
                    for c in 0..base.cols() {
                        w.data_mut()[r * base.cols() + c] =
                            base[(r, c)] + scale_at(r, c) * theta[(r, c)];
                    }
                }
                let c = cache_for(&q, &x, &mask, mode).expect("same shapes");
                cross_entropy(c.probs(), &y).expect("valid labels").0
            },
            &zero,
            EPS,
        )?;
        let mut moved = base.clone();
        moved.axpy(-1.0, stepped.get(id))?;
        worst = worst.max(max_relative_error(&moved, &num)?);
    }
    Ok(worst)
}
