//! Local structure clustering: feature/score banks over the target set,
//! cosine k-NN retrieval and the neighbor-consistency objective with a
//! class-balance term.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{predict, ForwardCache, NetworkParams};
use crate::numerics::{cosine_with_norms, norm, Matrix};
use serde::{Deserialize, Serialize};

/// Lower clamp on `p(x_i)·s(N_k)` before the log.
pub const DOT_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LscConfig {
    pub k: usize,
    pub balance_weight: f64,
}

impl Default for LscConfig {
    fn default() -> Self {
        Self {
            k: 5,
            balance_weight: 1.0,
        }
    }
}

impl LscConfig {
    pub fn validate(&self, n_target: usize) -> Result<()> {
        if self.k == 0 || self.k >= n_target {
            return Err(Error::config(format!(
                "K = {} must satisfy 1 <= K < {n_target}",
                self.k
            )));
        }
        if self.balance_weight.is_nan() || self.balance_weight < 0.0 {
            return Err(Error::config("balance weight must be non-negative"));
        }
        Ok(())
    }
}

/// Masked features and softmax scores of every target sample; row `i`
/// belongs to sample id `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Banks {
    features: Matrix,
    scores: Matrix,
    norms: Vec<f64>,
}

impl Banks {
    pub fn new(features: Matrix, scores: Matrix) -> Result<Self> {
        if features.rows() != scores.rows() {
            return Err(Error::shape(format!(
                "{} feature rows against {} score rows",
                features.rows(),
                scores.rows()
            )));
        }
        let norms = features.row_iter().map(norm).collect();
        Ok(Self {
            features,
            scores,
            norms,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn scores(&self) -> &Matrix {
        &self.scores
    }

    /// Predicted class per bank row.
    pub fn predictions(&self) -> Vec<usize> {
        self.scores
            .row_iter()
            .map(crate::numerics::argmax)
            .collect()
    }

    /// Writes `id,f0..,s0..` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let d = self.features.cols();
        let c = self.scores.cols();
        let mut header = vec!["id".to_string()];
        header.extend((0..d).map(|j| format!("f{j}")));
        header.extend((0..c).map(|j| format!("s{j}")));
        writeln!(out, "{}", header.join(","))?;
        for i in 0..self.len() {
            let mut row = vec![i.to_string()];
            row.extend(self.features.row(i).iter().map(|v| format!("{v:.16e}")));
            row.extend(self.scores.row(i).iter().map(|v| format!("{v:.16e}")));
            writeln!(out, "{}", row.join(","))?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Fills both banks with one eval-mode pass over the target set, features
/// masked by the target attention.
pub fn init_banks(params: &NetworkParams, target: &Matrix, target_mask: &[f64]) -> Result<Banks> {
    if target.rows() == 0 {
        return Err(Error::config("target set is empty"));
    }
    let cache = predict(params, target, Some(target_mask))?;
    Banks::new(cache.head.masked, cache.head.probs)
}

/// Replaces exactly the rows named by `ids`.
pub fn update_banks(
    banks: &mut Banks,
    ids: &[usize],
    new_features: &Matrix,
    new_scores: &Matrix,
) -> Result<()> {
    if new_features.rows() != ids.len() || new_scores.rows() != ids.len() {
        return Err(Error::usage(format!(
            "{} ids for {} feature rows and {} score rows",
            ids.len(),
            new_features.rows(),
            new_scores.rows()
        )));
    }
    if new_features.cols() != banks.features.cols() || new_scores.cols() != banks.scores.cols() {
        return Err(Error::shape("bank row width mismatch"));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id >= banks.len()) {
        return Err(Error::usage(format!(
            "sample id {bad} outside a bank of {}",
            banks.len()
        )));
    }
    for (r, &id) in ids.iter().enumerate() {
        banks
            .features
            .row_mut(id)
            .copy_from_slice(new_features.row(r));
        banks.scores.row_mut(id).copy_from_slice(new_scores.row(r));
        banks.norms[id] = norm(new_features.row(r));
    }
    Ok(())
}

/// Orders candidates by similarity descending, then id ascending.
fn ranks_before(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// Top-`k` bank rows by cosine similarity to each query row. When
/// `exclude_ids` is given, query `i` never retrieves bank row
/// `exclude_ids[i]`. Ties go to the lower id.
pub fn knn(
    banks: &Banks,
    queries: &Matrix,
    exclude_ids: Option<&[usize]>,
    k: usize,
) -> Result<Vec<Vec<usize>>> {
    if queries.cols() != banks.features.cols() {
        return Err(Error::shape(format!(
            "queries of width {} against bank of width {}",
            queries.cols(),
            banks.features.cols()
        )));
    }
    if let Some(ex) = exclude_ids {
        if ex.len() != queries.rows() {
            return Err(Error::usage("one exclusion id per query is required"));
        }
    }
    if k == 0 || k >= banks.len() {
        return Err(Error::config(format!(
            "K = {k} must satisfy 1 <= K < {}",
            banks.len()
        )));
    }
    let mut out = Vec::with_capacity(queries.rows());
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for (qi, q) in queries.row_iter().enumerate() {
        let qn = norm(q);
        let skip = exclude_ids.map(|ex| ex[qi]);
        best.clear();
        for j in 0..banks.len() {
            if Some(j) == skip {
                continue;
            }
            let cand = (
                cosine_with_norms(q, banks.features.row(j), qn, banks.norms[j]),
                j,
            );
            if best.len() == k && !ranks_before(cand, best[k - 1]) {
                continue;
            }
            let pos = best
                .iter()
                .position(|&b| ranks_before(cand, b))
                .unwrap_or(best.len());
            best.insert(pos, cand);
            best.truncate(k);
        }
        out.push(best.iter().map(|&(_, j)| j).collect());
    }
    Ok(out)
}

/// Clustering objective on softmax outputs `probs` (n × C):
///
/// `−(1/n) Σ_i Σ_k log max(p_i·s_{N_ik}, 1e-8) + w · Σ_c p̄_c log(p̄_c·C)`
///
/// with `p̄` the batch-mean prediction. Returns the loss and `∂L/∂probs`.
/// Bank scores are constants.
pub fn lsc_objective(
    probs: &Matrix,
    banks: &Banks,
    neighbors: &[Vec<usize>],
    balance_weight: f64,
) -> Result<(f64, Matrix)> {
    let (n, c) = probs.shape();
    if neighbors.len() != n {
        return Err(Error::usage(format!(
            "{} neighbor lists for a batch of {n}",
            neighbors.len()
        )));
    }
    if c != banks.scores.cols() {
        return Err(Error::shape(
            "class count differs between batch and score bank",
        ));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut dprobs = Matrix::zeros(n, c);
    for (i, nbrs) in neighbors.iter().enumerate() {
        if nbrs.is_empty() {
            return Err(Error::usage(format!("sample {i} has no neighbors")));
        }
        let p = probs.row(i);
        for &j in nbrs {
            let s = banks
                .scores
                .get_row(j)
                .ok_or_else(|| Error::usage(format!("neighbor id {j} outside the bank")))?;
            let dot = crate::numerics::dot(p, s);
            if dot > DOT_FLOOR {
                loss -= dot.ln() * inv_n;
                for (g, &sv) in dprobs.row_mut(i).iter_mut().zip(s) {
                    *g -= sv / dot * inv_n;
                }
            } else {
                loss -= DOT_FLOOR.ln() * inv_n;
            }
        }
    }
    if balance_weight != 0.0 {
        let mean = probs.column_means();
        let classes = c as f64;
        let mut kl = 0.0;
        let mut dmean = vec![0.0; c];
        for (pc, dm) in mean.iter().zip(dmean.iter_mut()) {
            let pc = pc.max(1e-300);
            kl += pc * (pc * classes).ln();
            *dm = balance_weight * ((pc * classes).ln() + 1.0) * inv_n;
        }
        loss += balance_weight * kl;
        for i in 0..n {
            for (g, dm) in dprobs.row_mut(i).iter_mut().zip(&dmean) {
                *g += dm;
            }
        }
    }
    Ok((loss, dprobs))
}

/// Pulls `∂L/∂p` back through a row-wise softmax.
pub fn softmax_backward(probs: &Matrix, dprobs: &Matrix) -> Matrix {
    let mut out = dprobs.clone();
    for i in 0..probs.rows() {
        let p = probs.row(i);
        let inner = crate::numerics::dot(p, dprobs.row(i));
        for (g, &pv) in out.row_mut(i).iter_mut().zip(p) {
            *g = pv * (*g - inner);
        }
    }
    out
}

/// Loss and its exact gradient at the logits of `cache`.
pub fn lsc_loss_and_dlogits(
    cache: &ForwardCache,
    banks: &Banks,
    neighbors: &[Vec<usize>],
    cfg: &LscConfig,
) -> Result<(f64, Matrix)> {
    let (loss, dprobs) = lsc_objective(cache.probs(), banks, neighbors, cfg.balance_weight)?;
    Ok((loss, softmax_backward(cache.probs(), &dprobs)))
}

trait GetRow {
    fn get_row(&self, i: usize) -> Option<&[f64]>;
}

impl GetRow for Matrix {
    fn get_row(&self, i: usize) -> Option<&[f64]> {
        (i < self.rows()).then(|| self.row(i))
    }
}
