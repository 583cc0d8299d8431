//! Query handling and the training losses: pairwise semantic consistency,
//! open-vocabulary guidance over relevance masks, and query-space prototype
//! regularization. Each loss yields gradients with respect to the class
//! distributions `D`; the total loss chains them through the softmax/cosine
//! Jacobian down to the projected features. Prototypes receive no gradient.

use crate::fieldset::{ClassCatalog, SampleBatch};
use crate::math::{self, Matrix};
use crate::prototypes::{AssignmentBatch, PrototypeBank};
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use std::path::Path;

/// A user query: an embedding in query-feature space, a relevance threshold,
/// and the relevant-prototype indices this query owns.
#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub embedding: Vec<f64>,
    /// Relevance threshold in (-1, 1).
    pub tau: f64,
    /// Indices into the relevant block `0..n_rel`; non-empty. Blocks of
    /// different queries may overlap (nested/overlapping queries).
    pub relevant_indices: Vec<usize>,
}

impl Query {
    pub fn validate(&self, n_rel: usize) -> Result<()> {
        if self.tau <= -1.0 || self.tau >= 1.0 || self.tau.is_nan() {
            return Err(Error::Validation(format!("tau {} must lie in (-1, 1)", self.tau)));
        }
        if self.relevant_indices.is_empty() {
            return Err(Error::Validation("query owns no relevant prototypes".into()));
        }
        if let Some(&bad) = self.relevant_indices.iter().find(|&&i| i >= n_rel) {
            return Err(Error::Validation(format!(
                "query relevant index {bad} outside the relevant block 0..{n_rel}"
            )));
        }
        Ok(())
    }

    /// 0/1 vector over all `n` prototypes with ones exactly on this query's
    /// relevant indices.
    pub fn h_vector(&self, n: usize) -> Vec<f64> {
        let mut h = vec![0.0; n];
        for &i in &self.relevant_indices {
            if i < n {
                h[i] = 1.0;
            }
        }
        h
    }
}

/// Zero or more queries. Empty means pure unsupervised segmentation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QuerySet {
    pub queries: Vec<Query>,
}

impl QuerySet {
    pub fn empty() -> Self {
        QuerySet::default()
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn validate(&self, n_rel: usize) -> Result<()> {
        for q in &self.queries {
            q.validate(n_rel)?;
        }
        Ok(())
    }

    /// Smallest relevant-block size able to hold every query's indices.
    pub fn required_n_rel(&self) -> usize {
        self.queries
            .iter()
            .flat_map(|q| q.relevant_indices.iter())
            .map(|&i| i + 1)
            .max()
            .unwrap_or(0)
    }
}

/// Per-sample booleans: `cos(q, f_query) >= tau`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceMask {
    pub mask: Vec<bool>,
}

impl RelevanceMask {
    pub fn relevant_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Threshold the cosine similarity between the query embedding and the
/// batch's query features. Zero-norm features yield cosine 0.
pub fn relevance_mask(query: &Query, batch: &SampleBatch) -> Result<RelevanceMask> {
    if batch.query.cols() != query.embedding.len() {
        return Err(Error::Validation(format!(
            "query embedding dimension {} does not match batch d_q {}",
            query.embedding.len(),
            batch.query.cols()
        )));
    }
    let mask = (0..batch.len())
        .map(|k| math::cosine(&query.embedding, batch.query.row(k)) >= query.tau)
        .collect();
    Ok(RelevanceMask { mask })
}

/// One pairing of batch rows with the cosine of their raw seg features.
#[derive(Clone, Copy, Debug)]
pub struct SamplePair {
    pub a: usize,
    pub b: usize,
    pub cos_ab: f64,
}

/// Pair each batch element with a partner drawn from a seeded permutation of
/// the batch (linear cost). Cosines use the raw, pre-projection features.
pub fn make_pairs(seg: &Matrix, rng: &mut ChaCha8Rng) -> Vec<SamplePair> {
    let b = seg.rows();
    let mut perm: Vec<usize> = (0..b).collect();
    for i in (1..b).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    (0..b)
        .map(|k| SamplePair {
            a: k,
            b: perm[k],
            cos_ab: math::cosine(seg.row(k), seg.row(perm[k])),
        })
        .collect()
}

/// Pairwise consistency loss: mean over pairs of
/// `(cos(f_a, f_b) - b) * (1 - D_a . D_b)`. Returns the loss and its
/// gradient with respect to every distribution row.
pub fn loss_proj(pairs: &[SamplePair], dist: &Matrix, threshold_b: f64) -> (f64, Matrix) {
    let mut grad = Matrix::zeros(dist.rows(), dist.cols());
    if pairs.is_empty() {
        return (0.0, grad);
    }
    let scale = 1.0 / pairs.len() as f64;
    let mut loss = 0.0;
    for p in pairs {
        let da = dist.row(p.a);
        let db = dist.row(p.b);
        let coeff = p.cos_ab - threshold_b;
        loss += coeff * (1.0 - math::dot(da, db));
        // d/dD_a = -coeff * D_b and symmetrically; a == b accumulates both.
        let db_copy: Vec<f64> = db.to_vec();
        let da_copy: Vec<f64> = da.to_vec();
        for (g, &v) in grad.row_mut(p.a).iter_mut().zip(&db_copy) {
            *g -= scale * coeff * v;
        }
        for (g, &v) in grad.row_mut(p.b).iter_mut().zip(&da_copy) {
            *g -= scale * coeff * v;
        }
    }
    (loss * scale, grad)
}

/// Open-vocabulary guidance for one query: push mass off the query's block
/// for irrelevant samples and onto it for relevant ones. Either side being
/// empty contributes 0 (guarded mean).
pub fn loss_irr(h: &[f64], mask: &RelevanceMask, dist: &Matrix) -> (f64, Matrix) {
    let mut grad = Matrix::zeros(dist.rows(), dist.cols());
    let n_rel_samples = mask.relevant_count();
    let n_irr_samples = mask.mask.len() - n_rel_samples;
    let mut loss = 0.0;
    for (k, &is_relevant) in mask.mask.iter().enumerate() {
        let dh = math::dot(dist.row(k), h);
        if is_relevant {
            let scale = 1.0 / n_rel_samples as f64;
            loss += scale * (1.0 - dh);
            for (g, &hv) in grad.row_mut(k).iter_mut().zip(h) {
                *g -= scale * hv;
            }
        } else if n_irr_samples > 0 {
            let scale = 1.0 / n_irr_samples as f64;
            loss += scale * dh;
            for (g, &hv) in grad.row_mut(k).iter_mut().zip(h) {
                *g += scale * hv;
            }
        }
    }
    (loss, grad)
}

/// Query-space regularization: drive each sample's distribution toward the
/// prototype whose query-space embedding is most similar to the sample's.
/// Returns 0 with no gradient while all query-space prototypes are zero.
pub fn loss_proto(dist: &Matrix, query_feats: &Matrix, clip_protos: &Matrix) -> (f64, Matrix) {
    let mut grad = Matrix::zeros(dist.rows(), dist.cols());
    let all_zero = (0..clip_protos.rows()).all(|i| math::norm(clip_protos.row(i)) < math::NORM_EPS);
    if all_zero || dist.rows() == 0 {
        return (0.0, grad);
    }
    let scale = 1.0 / dist.rows() as f64;
    let mut loss = 0.0;
    for k in 0..dist.rows() {
        let c = query_feats.row(k);
        let sims: Vec<f64> = (0..clip_protos.rows())
            .map(|i| math::cosine(c, clip_protos.row(i)))
            .collect();
        let target = math::argmax(&sims);
        loss += scale * (1.0 - dist.get(k, target));
        let g = grad.row_mut(k);
        g[target] -= scale;
    }
    (loss, grad)
}

/// Loss components (unweighted) plus the weighted total.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossBreakdown {
    pub proj: f64,
    pub irr: f64,
    pub proto: f64,
    pub total: f64,
}

/// Combined loss weights. `b` is the pair-cosine threshold of the
/// consistency loss.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_proj: f64,
    pub w_irr: f64,
    pub w_proto: f64,
    pub b: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_proj: 20.0,
            w_irr: 1.0,
            w_proto: 0.5,
            b: 0.5,
        }
    }
}

/// Weighted total loss and its gradient with respect to the projected
/// features, assembled by chaining every component's `dL/dD` through the
/// softmax/cosine Jacobian of the assignment. The prototype bank is treated
/// as constant throughout.
pub fn total_loss(
    batch: &SampleBatch,
    f_proj: &Matrix,
    assignment: &AssignmentBatch,
    queryset: &QuerySet,
    bank: &PrototypeBank,
    weights: &LossWeights,
    pairs: &[SamplePair],
) -> Result<(LossBreakdown, Matrix)> {
    let b_len = batch.len();
    if f_proj.rows() != b_len || assignment.len() != b_len {
        return Err(Error::Usage("batch, projections and assignment disagree in length".into()));
    }
    queryset.validate(bank.n_rel)?;
    let n = bank.n();

    let mut grad_d = Matrix::zeros(b_len, n);
    let mut breakdown = LossBreakdown::default();

    if weights.w_proj != 0.0 {
        let (l, g) = loss_proj(pairs, &assignment.dist, weights.b);
        if !l.is_finite() {
            return Err(Error::Numeric("pairwise consistency loss is not finite".into()));
        }
        breakdown.proj = l;
        accumulate(&mut grad_d, &g, weights.w_proj);
    }

    if weights.w_irr != 0.0 && !queryset.is_empty() {
        let mut total = 0.0;
        for (qi, query) in queryset.queries.iter().enumerate() {
            let mask = relevance_mask(query, batch)?;
            let h = query.h_vector(n);
            let (l, g) = loss_irr(&h, &mask, &assignment.dist);
            if !l.is_finite() {
                return Err(Error::Numeric(format!("guidance loss for query {qi} is not finite")));
            }
            total += l;
            accumulate(&mut grad_d, &g, weights.w_irr);
        }
        breakdown.irr = total;
    }

    if weights.w_proto != 0.0 {
        let (l, g) = loss_proto(&assignment.dist, &batch.query, &bank.clip_protos);
        if !l.is_finite() {
            return Err(Error::Numeric("prototype regularization loss is not finite".into()));
        }
        breakdown.proto = l;
        accumulate(&mut grad_d, &g, weights.w_proto);
    }

    breakdown.total =
        weights.w_proj * breakdown.proj + weights.w_irr * breakdown.irr + weights.w_proto * breakdown.proto;
    if !breakdown.total.is_finite() {
        return Err(Error::Numeric("total loss is not finite".into()));
    }

    let grad_f = chain_through_assignment(&grad_d, assignment, bank, f_proj);
    Ok((breakdown, grad_f))
}

fn accumulate(acc: &mut Matrix, g: &Matrix, w: f64) {
    for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += w * v;
    }
}

/// Chain `dL/dD` through `D = softmax(cos(f, P_i) / beta)` to `dL/df`.
/// Zero-norm features or prototypes contribute no gradient, matching their
/// constant-zero cosine in the forward pass.
fn chain_through_assignment(
    grad_d: &Matrix,
    assignment: &AssignmentBatch,
    bank: &PrototypeBank,
    f_proj: &Matrix,
) -> Matrix {
    let n = bank.n();
    let d = f_proj.cols();
    let mut grad_f = Matrix::zeros(f_proj.rows(), d);
    let proto_norms: Vec<f64> = (0..n).map(|i| math::norm(bank.protos.row(i))).collect();

    for k in 0..f_proj.rows() {
        let f = f_proj.row(k);
        let nf = math::norm(f);
        if nf < math::NORM_EPS {
            continue;
        }
        let dist = assignment.dist.row(k);
        let sims = assignment.sims.row(k);
        let gd = grad_d.row(k);
        let inner = math::dot(gd, dist);
        let out = grad_f.row_mut(k);
        for i in 0..n {
            if proto_norms[i] < math::NORM_EPS {
                continue;
            }
            let g_logit = dist[i] * (gd[i] - inner);
            if g_logit == 0.0 {
                continue;
            }
            let scale = g_logit / (bank.beta * nf);
            let proto = bank.protos.row(i);
            let cos_over_nf = sims[i] / nf;
            for j in 0..d {
                out[j] += scale * (proto[j] / proto_norms[i] - cos_over_nf * f[j]);
            }
        }
    }
    grad_f
}

/// One entry of a query file: exactly one of `embedding`, `class` (catalog
/// id or name) or `centroid_of` (mean of catalog centroids), plus an
/// optional threshold and relevant-block size.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawQuery {
    embedding: Option<Vec<f64>>,
    class: Option<serde_json::Value>,
    centroid_of: Option<Vec<u32>>,
    tau: Option<f64>,
    block: Option<usize>,
}

/// Load a JSON query file, resolving catalog references to embeddings.
/// Relevant-prototype blocks are assigned consecutively in file order.
pub fn load_query_file(path: &Path, catalog: &ClassCatalog, default_tau: f64) -> Result<QuerySet> {
    let text = std::fs::read_to_string(path)?;
    parse_query_json(&text, catalog, default_tau)
}

pub fn parse_query_json(text: &str, catalog: &ClassCatalog, default_tau: f64) -> Result<QuerySet> {
    let raw: Vec<RawQuery> =
        serde_json::from_str(text).map_err(|e| Error::Format {
            offset: 0,
            message: format!("query file: {e}"),
        })?;
    let mut queries = Vec::with_capacity(raw.len());
    let mut next_block = 0usize;
    for (i, rq) in raw.iter().enumerate() {
        let sources = usize::from(rq.embedding.is_some())
            + usize::from(rq.class.is_some())
            + usize::from(rq.centroid_of.is_some());
        if sources != 1 {
            return Err(Error::Validation(format!(
                "query {i}: give exactly one of embedding, class or centroid_of"
            )));
        }
        let embedding: Vec<f64> = if let Some(e) = &rq.embedding {
            e.clone()
        } else if let Some(class) = &rq.class {
            let key = match class {
                serde_json::Value::String(s) => s.clone(),
                serde_json::Value::Number(n) => n.to_string(),
                other => {
                    return Err(Error::Validation(format!(
                        "query {i}: class reference must be an id or name, got {other}"
                    )))
                }
            };
            let c = catalog
                .find(&key)
                .ok_or_else(|| Error::Validation(format!("query {i}: class {key:?} not in catalog")))?;
            c.query_centroid.iter().map(|&v| f64::from(v)).collect()
        } else {
            let ids = rq.centroid_of.as_ref().unwrap();
            if ids.is_empty() {
                return Err(Error::Validation(format!("query {i}: centroid_of lists no classes")));
            }
            let mut acc: Option<Vec<f64>> = None;
            for &id in ids {
                let c = catalog
                    .classes
                    .get(id as usize)
                    .ok_or_else(|| Error::Validation(format!("query {i}: class id {id} not in catalog")))?;
                let v: Vec<f64> = c.query_centroid.iter().map(|&x| f64::from(x)).collect();
                acc = Some(match acc {
                    None => v,
                    Some(mut a) => {
                        for (ai, vi) in a.iter_mut().zip(&v) {
                            *ai += vi;
                        }
                        a
                    }
                });
            }
            let mut mean = acc.unwrap();
            for v in &mut mean {
                *v /= ids.len() as f64;
            }
            mean
        };
        let block = rq.block.unwrap_or(1);
        if block == 0 {
            return Err(Error::Validation(format!("query {i}: block size must be positive")));
        }
        queries.push(Query {
            embedding,
            tau: rq.tau.unwrap_or(default_tau),
            relevant_indices: (next_block..next_block + block).collect(),
        });
        next_block += block;
    }
    Ok(QuerySet { queries })
}
