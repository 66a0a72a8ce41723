//! Training and evaluation phases: source pretraining with every domain
//! attention, source-free target adaptation, continual adaptation over a
//! sequence of targets, the domain-ID classifier and evaluation.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::lsc::{init_banks, knn, lsc_loss_and_dlogits, update_banks, Banks, LscConfig};
use crate::metrics::{accuracy, harmonic_mean, EvalMode};
use crate::nn::{
    apply_masked_update, backward_from_dlogits, backward_head, backward_trunk, commit_bn_stats,
    cross_entropy, forward, forward_head, forward_trunk, predict, refresh_bn_stats, Gradients,
    Mode, NetworkDims, NetworkParams, ParamId, Sgd,
};
use crate::numerics::{
    argmax, matmul_at, matmul_bt, sgd_step, softmax_rows, Matrix, Rng, SgdState,
};
use crate::sda::{compensate_embedding_grad, merge_masks, sparsity_penalty, MaskSet};

/// RNG stream ids; each phase draws from its own stream of the run seed.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const SOURCE_SHUFFLE: u64 = 2;
    pub const DATA_SPLIT: u64 = 3;
    pub const EXEMPLARS: u64 = 4;
    pub const DOMAIN_CLASSIFIER: u64 = 5;
    /// Plus the target's domain id.
    pub const ADAPT: u64 = 100;
}

/// Which masks count as already claimed when regularizing a domain's
/// attention for sparsity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsityPrior {
    /// Every attention is penalized for its own mean activation.
    Independent,
    /// Target attentions are penalized for channels outside the union of
    /// the masks before them; the source attention is not regularized.
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dims: NetworkDims,
    pub epochs_source: usize,
    pub epochs_target: usize,
    pub batch_size: usize,
    pub lr_source: f64,
    /// Step size for the attention embeddings. The compensated embedding
    /// gradient is about `σ'(e)·∂L/∂A`, so embeddings need a far larger
    /// step than the weights to reach near-binary masks.
    pub lr_embedding: f64,
    pub lr_target: f64,
    pub momentum: f64,
    pub k: usize,
    pub balance_weight: f64,
    pub lambda_sparsity: f64,
    pub sparsity_prior: SparsityPrior,
    pub n_targets: usize,
    pub exemplars_per_domain: usize,
    pub dc_epochs: usize,
    pub lr_dc: f64,
    pub seed: u64,
}

impl RunConfig {
    pub fn new(dims: NetworkDims) -> Self {
        Self {
            dims,
            epochs_source: 200,
            epochs_target: 100,
            batch_size: 64,
            lr_source: 0.01,
            lr_embedding: 0.1,
            lr_target: 0.001,
            momentum: 0.9,
            k: 5,
            balance_weight: 1.0,
            lambda_sparsity: 0.1,
            sparsity_prior: SparsityPrior::Independent,
            n_targets: 1,
            exemplars_per_domain: 64,
            dc_epochs: 200,
            lr_dc: 0.05,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.batch_size < 2 {
            return Err(Error::config("batch size must be at least 2"));
        }
        for (name, v) in [
            ("lr_source", self.lr_source),
            ("lr_embedding", self.lr_embedding),
            ("lr_target", self.lr_target),
            ("lr_dc", self.lr_dc),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if self.k == 0 {
            return Err(Error::config("K must be positive"));
        }
        if [self.balance_weight, self.lambda_sparsity]
            .iter()
            .any(|w| w.is_nan() || *w < 0.0)
        {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if self.n_targets == 0 {
            return Err(Error::config("at least one target domain is required"));
        }
        if self.exemplars_per_domain == 0 {
            return Err(Error::config("exemplars_per_domain must be positive"));
        }
        Ok(())
    }

    pub fn lsc(&self) -> LscConfig {
        LscConfig {
            k: self.k,
            balance_weight: self.balance_weight,
        }
    }
}

/// Per-epoch numbers reported by the training loops.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub loss: f64,
    /// Source training accuracy under the source mask; pretraining only.
    pub train_accuracy: Option<f64>,
}

/// BN running statistics captured at the end of source pretraining.
#[derive(Debug, Clone, PartialEq)]
pub struct BnSnapshot {
    pub mean: Matrix,
    pub var: Matrix,
}

impl BnSnapshot {
    pub fn of(params: &NetworkParams) -> Self {
        Self {
            mean: params.bn_mean.clone(),
            var: params.bn_var.clone(),
        }
    }

    pub fn apply_to(&self, params: &mut NetworkParams) {
        params.bn_mean = self.mean.clone();
        params.bn_var = self.var.clone();
    }
}

fn batches(order: &[usize], batch_size: usize) -> impl Iterator<Item = &[usize]> {
    // a trailing single sample cannot be batch-normalized in training mode
    order.chunks(batch_size).filter(|b| b.len() >= 2)
}

fn check_finite(loss: f64, phase: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Training(format!("non-finite loss during {phase}")))
    }
}

/// Freshly initialized network and attentions for `cfg`.
pub fn init_model(cfg: &RunConfig) -> Result<(NetworkParams, MaskSet)> {
    let mut rng = Rng::with_stream(cfg.seed, streams::INIT);
    let params = NetworkParams::init(cfg.dims, &mut rng)?;
    let masks = MaskSet::random(cfg.n_targets + 1, cfg.dims.feature_dim, &mut rng);
    Ok((params, masks))
}

/// Trains on labeled source data with every domain attention and returns
/// the network and frozen attentions.
pub fn pretrain_source(
    cfg: &RunConfig,
    source_train: &Dataset,
) -> Result<(NetworkParams, MaskSet)> {
    let (params, masks) = init_model(cfg)?;
    pretrain_from(cfg, source_train, params, masks, &mut |_, _, _| Ok(()))
}

/// Observer called after each pretraining epoch.
pub type PretrainObserver<'o> =
    dyn FnMut(&EpochSummary, &NetworkParams, &MaskSet) -> Result<()> + 'o;

fn sparsity_priors(cfg: &RunConfig, masks: &[Vec<f64>], domain: usize) -> Option<Vec<Vec<f64>>> {
    match cfg.sparsity_prior {
        SparsityPrior::Independent => Some(Vec::new()),
        SparsityPrior::Sequential if domain == 0 => None,
        SparsityPrior::Sequential => Some(masks[..domain].to_vec()),
    }
}

/// Source pretraining from given initial weights and attentions. Minimizes
/// the sum of the cross-entropies under each attention plus the weighted
/// sparsity penalties; embedding gradients are compensated before the step.
pub fn pretrain_from(
    cfg: &RunConfig,
    source_train: &Dataset,
    mut params: NetworkParams,
    mut masks: MaskSet,
    on_epoch: &mut PretrainObserver<'_>,
) -> Result<(NetworkParams, MaskSet)> {
    cfg.validate()?;
    masks.validate()?;
    if masks.is_frozen() {
        return Err(Error::usage("attentions are already frozen"));
    }
    let labels = source_train.labels()?;
    source_train.check_classes(cfg.dims.classes)?;
    if source_train.len() < 2 {
        return Err(Error::config(
            "source training set needs at least 2 samples",
        ));
    }
    params.set_all_trainable();
    let mut sgd = Sgd::new(&params, cfg.lr_source, cfg.momentum);
    let d = cfg.dims.feature_dim;
    let mut emb_sgd: Vec<SgdState> = (0..masks.n_domains())
        .map(|_| SgdState::new(cfg.lr_embedding, cfg.momentum, 1, d))
        .collect();
    let mut rng = Rng::with_stream(cfg.seed, streams::SOURCE_SHUFFLE);
    let mut order: Vec<usize> = (0..source_train.len()).collect();

    for epoch in 1..=cfg.epochs_source {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for batch in batches(&order, cfg.batch_size) {
            let x = source_train.features.select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let trunk = forward_trunk(&params, &x, Mode::Train)?;
            commit_bn_stats(&mut params, &trunk);

            let current = masks.masks();
            let mut grads = Gradients::zeros_like(&params);
            let mut dfeatures = Matrix::zeros(x.rows(), d);
            let mut batch_loss = 0.0;
            let mut emb_grads = Vec::with_capacity(masks.n_domains());
            for (dom, mask) in current.iter().enumerate() {
                let head = forward_head(&params, &trunk, Some(mask))?;
                let (loss, dlogits) = cross_entropy(&head.probs, &y)?;
                batch_loss += loss;
                if dom == 0 {
                    for (r, &t) in head.probs.row_iter().zip(&y) {
                        correct += usize::from(argmax(r) == t);
                    }
                    seen += y.len();
                }
                let hg = backward_head(&params, &trunk, &head, &dlogits)?;
                grads.get_mut(ParamId::Wg).axpy(1.0, &hg.w_g)?;
                grads.get_mut(ParamId::Bg).axpy(1.0, &hg.b_g)?;
                dfeatures.axpy(1.0, &hg.dfeatures)?;

                let att = &masks.attentions[dom];
                let mut g_e: Vec<f64> = att
                    .embedding
                    .iter()
                    .zip(&hg.dmask)
                    .map(|(&e, &da)| {
                        let z = att.scale * e;
                        da * att.scale * crate::numerics::sigmoid(z) * crate::numerics::sigmoid(-z)
                    })
                    .collect();
                if cfg.lambda_sparsity > 0.0 {
                    if let Some(priors) = sparsity_priors(cfg, &current, dom) {
                        let (pen, g_pen) = sparsity_penalty(att, &priors)?;
                        batch_loss += cfg.lambda_sparsity * pen;
                        for (g, p) in g_e.iter_mut().zip(g_pen) {
                            *g += cfg.lambda_sparsity * p;
                        }
                    }
                }
                emb_grads.push(compensate_embedding_grad(att, &g_e));
            }
            backward_trunk(&params, &trunk, &dfeatures, &mut grads)?;
            check_finite(batch_loss, "source pretraining")?;
            if !grads.all_finite() {
                return Err(Error::Training(
                    "non-finite gradient during source pretraining".into(),
                ));
            }
            apply_masked_update(&mut params, &grads, &mut sgd, None)?;
            for ((att, g), st) in masks.attentions.iter_mut().zip(emb_grads).zip(&mut emb_sgd) {
                let mut e = Matrix::row_vector(std::mem::take(&mut att.embedding));
                sgd_step(&mut e, &Matrix::row_vector(g), st)?;
                att.embedding = e.into_data();
            }
            loss_sum += batch_loss;
            n_batches += 1;
        }
        let summary = EpochSummary {
            epoch,
            loss: loss_sum / n_batches.max(1) as f64,
            train_accuracy: (seen > 0).then(|| 100.0 * correct as f64 / seen as f64),
        };
        on_epoch(&summary, &params, &masks)?;
    }
    if !params.all_finite() {
        return Err(Error::Training("parameters diverged".into()));
    }
    masks.freeze();
    Ok((params, masks))
}

/// Target-adaptation state: network, optimizer and banks for one target.
pub struct TargetAdapter<'a> {
    cfg: &'a RunConfig,
    pub params: NetworkParams,
    target: &'a Matrix,
    target_mask: Vec<f64>,
    protect: Vec<f64>,
    sgd: Sgd,
    banks: Option<Banks>,
    rng: Rng,
    epoch: usize,
}

impl<'a> TargetAdapter<'a> {
    pub fn new(
        cfg: &'a RunConfig,
        mut params: NetworkParams,
        masks: &MaskSet,
        target_domain: usize,
        target: &'a Matrix,
        protect: &[f64],
    ) -> Result<Self> {
        cfg.validate()?;
        if !masks.is_frozen() {
            return Err(Error::usage("attentions must be pretrained and frozen"));
        }
        if target_domain == 0 || target_domain >= masks.n_domains() {
            return Err(Error::usage(format!("no target domain {target_domain}")));
        }
        if protect.len() != cfg.dims.feature_dim {
            return Err(Error::shape(
                "protect mask length differs from feature dimension",
            ));
        }
        if target.rows() == 0 {
            return Err(Error::config("target set is empty"));
        }
        cfg.lsc().validate(target.rows())?;
        params.freeze_for_adaptation();
        let sgd = Sgd::new(&params, cfg.lr_target, cfg.momentum);
        Ok(Self {
            cfg,
            params,
            target,
            target_mask: masks.mask(target_domain)?,
            protect: protect.to_vec(),
            sgd,
            banks: None,
            rng: Rng::with_stream(cfg.seed, streams::ADAPT + target_domain as u64),
            epoch: 0,
        })
    }

    /// One eval-mode pass over the target set fills both banks.
    pub fn init_banks(&mut self) -> Result<()> {
        self.banks = Some(init_banks(&self.params, self.target, &self.target_mask)?);
        Ok(())
    }

    pub fn banks(&self) -> Option<&Banks> {
        self.banks.as_ref()
    }

    pub fn target_mask(&self) -> &[f64] {
        &self.target_mask
    }

    /// One pass over the shuffled target set; returns the mean batch loss.
    pub fn run_epoch(&mut self) -> Result<EpochSummary> {
        let Some(banks) = self.banks.as_mut() else {
            return Err(Error::usage("banks must be initialized before adaptation"));
        };
        let lsc_cfg = self.cfg.lsc();
        let mut order: Vec<usize> = (0..self.target.rows()).collect();
        self.rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for ids in batches(&order, self.cfg.batch_size) {
            let x = self.target.select_rows(ids);
            let cache = forward(&mut self.params, &x, Some(&self.target_mask), Mode::Train)?;
            update_banks(banks, ids, cache.masked_features(), cache.probs())?;
            let neighbors = knn(banks, cache.masked_features(), Some(ids), lsc_cfg.k)?;
            let (loss, dlogits) = lsc_loss_and_dlogits(&cache, banks, &neighbors, &lsc_cfg)?;
            check_finite(loss, "target adaptation")?;
            let grads =
                backward_from_dlogits(&self.params, &cache, &dlogits, Some(&self.target_mask))?;
            if !grads.all_finite() {
                return Err(Error::Training(
                    "non-finite gradient during adaptation".into(),
                ));
            }
            apply_masked_update(&mut self.params, &grads, &mut self.sgd, Some(&self.protect))?;
            loss_sum += loss;
            n_batches += 1;
        }
        self.epoch += 1;
        Ok(EpochSummary {
            epoch: self.epoch,
            loss: loss_sum / n_batches.max(1) as f64,
            train_accuracy: None,
        })
    }

    pub fn into_params(self) -> NetworkParams {
        self.params
    }
}

/// Observer called after each adaptation epoch.
pub type AdaptObserver<'o> = dyn FnMut(&EpochSummary, &NetworkParams, &Banks) -> Result<()> + 'o;

/// Source-free adaptation to `target_domain` with the neighborhood
/// clustering loss and gradients scaled by `1 − protect`.
pub fn adapt_target(
    cfg: &RunConfig,
    params: NetworkParams,
    masks: &MaskSet,
    target_domain: usize,
    target_unlabeled: &Matrix,
    protect: &[f64],
) -> Result<NetworkParams> {
    adapt_target_observed(
        cfg,
        params,
        masks,
        target_domain,
        target_unlabeled,
        protect,
        &mut |_, _, _| Ok(()),
    )
}

pub fn adapt_target_observed(
    cfg: &RunConfig,
    params: NetworkParams,
    masks: &MaskSet,
    target_domain: usize,
    target_unlabeled: &Matrix,
    protect: &[f64],
    observer: &mut AdaptObserver<'_>,
) -> Result<NetworkParams> {
    let mut adapter =
        TargetAdapter::new(cfg, params, masks, target_domain, target_unlabeled, protect)?;
    adapter.init_banks()?;
    for _ in 0..cfg.epochs_target {
        let summary = adapter.run_epoch()?;
        let banks = adapter.banks.as_ref().expect("banks initialized above");
        observer(&summary, &adapter.params, banks)?;
    }
    Ok(adapter.into_params())
}

#[derive(Debug, Clone)]
pub struct ContinualOutcome {
    pub params: NetworkParams,
    /// Row 0 is before any adaptation, row `j` after adapting to target `j`;
    /// column 0 is the source, column `j` target `j`. Domain-aware.
    pub accuracy_matrix: Vec<Vec<f64>>,
}

/// Adapts to `targets[0]`, `targets[1]`, ... in order, protecting every
/// other domain's attention at each step. `targets[j]` is domain `j + 1`;
/// its labels are read only to fill the accuracy matrix.
pub fn adapt_continual(
    cfg: &RunConfig,
    params: NetworkParams,
    masks: &MaskSet,
    source_test: &Dataset,
    targets: &[Dataset],
) -> Result<ContinualOutcome> {
    adapt_continual_observed(
        cfg,
        params,
        masks,
        source_test,
        targets,
        &mut |_, _, _, _| Ok(()),
    )
}

/// Observer for continual runs; the first argument is the target domain id.
pub type ContinualObserver<'o> =
    dyn FnMut(usize, &EpochSummary, &NetworkParams, &Banks) -> Result<()> + 'o;

pub fn adapt_continual_observed(
    cfg: &RunConfig,
    params: NetworkParams,
    masks: &MaskSet,
    source_test: &Dataset,
    targets: &[Dataset],
    observer: &mut ContinualObserver<'_>,
) -> Result<ContinualOutcome> {
    if targets.len() != masks.n_targets() {
        return Err(Error::config(format!(
            "{} target datasets for {} target attentions",
            targets.len(),
            masks.n_targets()
        )));
    }
    let mut eval_sets = vec![source_test.clone()];
    eval_sets.extend(targets.iter().cloned());
    let mut matrix =
        vec![evaluate(&params, masks, &eval_sets, EvalMode::Aware, None)?.per_domain_accuracy];
    let mut params = params;
    for (j, target) in targets.iter().enumerate() {
        let domain = j + 1;
        let protect = merge_masks(masks, domain)?;
        params = adapt_target_observed(
            cfg,
            params,
            masks,
            domain,
            &target.features,
            &protect,
            &mut |summary, p, banks| observer(domain, summary, p, banks),
        )?;
        matrix
            .push(evaluate(&params, masks, &eval_sets, EvalMode::Aware, None)?.per_domain_accuracy);
    }
    Ok(ContinualOutcome {
        params,
        accuracy_matrix: matrix,
    })
}

/// Picks a domain per sample.
pub trait DomainRouter {
    fn route(&self, x: &Matrix) -> Result<Vec<usize>>;
}

/// Two-layer MLP (`d → 32 → domains`) over the unmasked feature `f(x)` of a
/// frozen copy of the extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainClassifier {
    pub extractor: NetworkParams,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

pub const DC_HIDDEN: usize = 32;

impl DomainClassifier {
    pub fn n_domains(&self) -> usize {
        self.w2.rows()
    }

    fn logits(&self, feats: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
        let mut z1 = matmul_bt(feats, &self.w1)?;
        z1.add_row(self.b1.data())?;
        let a1 = z1.map(|v| v.max(0.0));
        let mut z2 = matmul_bt(&a1, &self.w2)?;
        z2.add_row(self.b2.data())?;
        Ok((z1, a1, z2))
    }

    pub fn features(&self, x: &Matrix) -> Result<Matrix> {
        Ok(predict(&self.extractor, x, None)?.trunk.features)
    }

    pub fn predict_proba(&self, x: &Matrix) -> Result<Matrix> {
        let f = self.features(x)?;
        Ok(softmax_rows(&self.logits(&f)?.2))
    }
}

impl DomainRouter for DomainClassifier {
    fn route(&self, x: &Matrix) -> Result<Vec<usize>> {
        Ok(self.predict_proba(x)?.row_iter().map(argmax).collect())
    }
}

/// `exemplars_per_domain` seeded draws from each dataset (fewer when a
/// dataset is smaller).
pub fn sample_exemplars(cfg: &RunConfig, domains: &[&Dataset]) -> Vec<Matrix> {
    let mut rng = Rng::with_stream(cfg.seed, streams::EXEMPLARS);
    domains
        .iter()
        .map(|ds| {
            let idx = rng.sample_indices(ds.len(), cfg.exemplars_per_domain);
            ds.features.select_rows(&idx)
        })
        .collect()
}

/// Trains the domain-ID classifier on `exemplars[i]` (domain `i`). Features
/// come from `params` in eval mode, with BN statistics replaced by
/// `source_bn` when given.
pub fn train_domain_classifier(
    cfg: &RunConfig,
    params: &NetworkParams,
    source_bn: Option<&BnSnapshot>,
    exemplars: &[Matrix],
) -> Result<DomainClassifier> {
    if exemplars.is_empty() {
        return Err(Error::config("no domains to classify"));
    }
    if let Some(i) = exemplars.iter().position(|m| m.rows() == 0) {
        return Err(Error::config(format!("domain {i} has no exemplars")));
    }
    let mut extractor = params.clone();
    if let Some(bn) = source_bn {
        bn.apply_to(&mut extractor);
    }
    let n_domains = exemplars.len();
    let d = cfg.dims.feature_dim;
    let mut rng = Rng::with_stream(cfg.seed, streams::DOMAIN_CLASSIFIER);
    let bound1 = (6.0 / (d + DC_HIDDEN) as f64).sqrt();
    let bound2 = (6.0 / (DC_HIDDEN + n_domains) as f64).sqrt();
    let mut dc = DomainClassifier {
        w1: Matrix::uniform(DC_HIDDEN, d, bound1, &mut rng),
        b1: Matrix::zeros(1, DC_HIDDEN),
        w2: Matrix::uniform(n_domains, DC_HIDDEN, bound2, &mut rng),
        b2: Matrix::zeros(1, n_domains),
        extractor,
    };
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (dom, ex) in exemplars.iter().enumerate() {
        let f = dc.features(ex)?;
        for r in f.row_iter() {
            rows.push(r.to_vec());
            labels.push(dom);
        }
    }
    let feats = Matrix::from_rows(&rows)?;
    let shapes = [dc.w1.shape(), dc.b1.shape(), dc.w2.shape(), dc.b2.shape()];
    let mut states: Vec<SgdState> = shapes
        .iter()
        .map(|&(r, c)| SgdState::new(cfg.lr_dc, cfg.momentum, r, c))
        .collect();
    let mut order: Vec<usize> = (0..feats.rows()).collect();
    for _ in 0..cfg.dc_epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let xb = feats.select_rows(batch);
            let yb: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (z1, a1, z2) = dc.logits(&xb)?;
            let (loss, dz2) = cross_entropy(&softmax_rows(&z2), &yb)?;
            check_finite(loss, "domain classifier training")?;
            let gw2 = matmul_at(&dz2, &a1)?;
            let gb2 = Matrix::row_vector(dz2.column_sums());
            let mut dz1 = crate::numerics::matmul(&dz2, &dc.w2)?;
            for (g, &z) in dz1.data_mut().iter_mut().zip(z1.data()) {
                if z <= 0.0 {
                    *g = 0.0;
                }
            }
            let gw1 = matmul_at(&dz1, &xb)?;
            let gb1 = Matrix::row_vector(dz1.column_sums());
            sgd_step(&mut dc.w1, &gw1, &mut states[0])?;
            sgd_step(&mut dc.b1, &gb1, &mut states[1])?;
            sgd_step(&mut dc.w2, &gw2, &mut states[2])?;
            sgd_step(&mut dc.b2, &gb2, &mut states[3])?;
        }
    }
    Ok(dc)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub mode: EvalMode,
    /// Index = domain id.
    pub per_domain_accuracy: Vec<f64>,
    pub acc_s: f64,
    /// Mean over target domains.
    pub acc_t: f64,
    pub h: f64,
    /// Routing accuracy of the domain classifier, agnostic mode only.
    pub domain_id_accuracy: Option<f64>,
}

/// Class predictions for `x` when every sample is routed to `domains[i]`.
fn predict_routed(
    params: &NetworkParams,
    masks: &MaskSet,
    x: &Matrix,
    domains: &[usize],
) -> Result<Vec<usize>> {
    let mut out = vec![0; x.rows()];
    for dom in 0..masks.n_domains() {
        let idx: Vec<usize> = (0..x.rows()).filter(|&i| domains[i] == dom).collect();
        if idx.is_empty() {
            continue;
        }
        let mask = masks.mask(dom)?;
        let cache = predict(params, &x.select_rows(&idx), Some(&mask))?;
        for (&i, p) in idx.iter().zip(cache.predictions()) {
            out[i] = p;
        }
    }
    if let Some(&bad) = domains.iter().find(|&&d| d >= masks.n_domains()) {
        return Err(Error::usage(format!("router chose unknown domain {bad}")));
    }
    Ok(out)
}

/// Accuracy per domain (`datasets[i]` is domain `i`, all labeled) with the
/// true domain's attention (aware) or the router's choice (agnostic).
pub fn evaluate(
    params: &NetworkParams,
    masks: &MaskSet,
    datasets: &[Dataset],
    mode: EvalMode,
    router: Option<&dyn DomainRouter>,
) -> Result<Evaluation> {
    evaluate_with(params, masks, datasets, mode, router, false)
}

/// [`evaluate`], optionally re-estimating the BN statistics on each
/// domain's evaluation data first (on a copy; `params` is untouched).
pub fn evaluate_with(
    params: &NetworkParams,
    masks: &MaskSet,
    datasets: &[Dataset],
    mode: EvalMode,
    router: Option<&dyn DomainRouter>,
    refresh_bn: bool,
) -> Result<Evaluation> {
    if datasets.len() < 2 {
        return Err(Error::usage(
            "evaluation needs the source and at least one target",
        ));
    }
    if datasets.len() > masks.n_domains() {
        return Err(Error::usage(format!(
            "{} datasets for {} attentions",
            datasets.len(),
            masks.n_domains()
        )));
    }
    let router = match (mode, router) {
        (EvalMode::Agnostic, None) => {
            return Err(Error::usage(
                "domain-agnostic evaluation needs a domain classifier",
            ))
        }
        (EvalMode::Agnostic, Some(r)) => Some(r),
        (EvalMode::Aware, _) => None,
    };
    let mut per_domain = Vec::with_capacity(datasets.len());
    let (mut routed_ok, mut routed_n) = (0usize, 0usize);
    for (dom, ds) in datasets.iter().enumerate() {
        let labels = ds.labels()?;
        let domains = match router {
            Some(r) => {
                let chosen = r.route(&ds.features)?;
                routed_ok += chosen.iter().filter(|&&c| c == dom).count();
                routed_n += chosen.len();
                chosen
            }
            None => vec![dom; ds.len()],
        };
        let pred = if refresh_bn {
            let mut fresh = params.clone();
            refresh_bn_stats(&mut fresh, &ds.features, None)?;
            predict_routed(&fresh, masks, &ds.features, &domains)?
        } else {
            predict_routed(params, masks, &ds.features, &domains)?
        };
        per_domain.push(accuracy(&pred, labels)?);
    }
    let acc_s = per_domain[0];
    let acc_t = per_domain[1..].iter().sum::<f64>() / (per_domain.len() - 1) as f64;
    Ok(Evaluation {
        mode,
        acc_s,
        acc_t,
        h: harmonic_mean(acc_s, acc_t),
        per_domain_accuracy: per_domain,
        domain_id_accuracy: router.map(|_| 100.0 * routed_ok as f64 / routed_n.max(1) as f64),
    })
}

/// Accuracy of `params` on one labeled dataset under `mask`.
pub fn masked_accuracy(params: &NetworkParams, ds: &Dataset, mask: &[f64]) -> Result<f64> {
    let pred = predict(params, &ds.features, Some(mask))?.predictions();
    accuracy(&pred, ds.labels()?)
}

/// `(Acc_n, Acc_np)` of the banks' current predictions, `k` neighbors.
pub fn bank_purity(banks: &Banks, truth: &[usize], k: usize) -> Result<(f64, f64)> {
    crate::metrics::neighbor_purity(banks, &banks.predictions(), truth, k)
}
