//! Prototype bank: sharpness-controlled softmax assignment, two-fold
//! weighted EMA updates with uncertain-sample filtering, and paired
//! query-space prototypes for semantic recovery.

use crate::fieldset::{ClassCatalog, SampleBatch};
use crate::math::{self, Matrix};
use crate::{Error, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use std::io::{Read, Write};

/// Default filtering floors: samples with confidence or density weight
/// below 0.2 do not contribute to prototype updates.
pub const DEFAULT_CONF_FLOOR: f64 = 0.2;
pub const DEFAULT_WEIGHT_FLOOR: f64 = 0.2;

/// `n_rel` relevant prototypes followed by `n_irr` irrelevant ones, plus a
/// paired query-space prototype per slot. Prototypes are plain data: the
/// only mutation path is [`ema_update`], so no gradient ever reaches them.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    /// N x d_out prototype matrix.
    pub protos: Matrix,
    /// N x d_q query-space prototypes; zero until first update.
    pub clip_protos: Matrix,
    pub n_rel: usize,
    pub n_irr: usize,
    /// EMA decay in [0, 1].
    pub alpha: f64,
    /// Current softmax sharpness, > 0.
    pub beta: f64,
}

impl PrototypeBank {
    pub fn new(n_rel: usize, n_irr: usize, d_out: usize, d_q: usize, alpha: f64, beta: f64) -> Result<Self> {
        let n = n_rel + n_irr;
        if n == 0 {
            return Err(Error::Validation("prototype bank needs at least one prototype".into()));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Validation("alpha must lie in [0, 1]".into()));
        }
        if beta <= 0.0 {
            return Err(Error::Validation("beta must be positive".into()));
        }
        Ok(PrototypeBank {
            protos: Matrix::zeros(n, d_out),
            clip_protos: Matrix::zeros(n, d_q),
            n_rel,
            n_irr,
            alpha,
            beta,
        })
    }

    pub fn n(&self) -> usize {
        self.n_rel + self.n_irr
    }

    pub fn d_out(&self) -> usize {
        self.protos.cols()
    }

    pub fn d_q(&self) -> usize {
        self.clip_protos.cols()
    }

    pub fn is_relevant(&self, index: usize) -> bool {
        index < self.n_rel
    }

    /// True when a query-space prototype has never received an update.
    pub fn clip_proto_is_zero(&self, index: usize) -> bool {
        math::norm(self.clip_protos.row(index)) < math::NORM_EPS
    }

    /// Serialize counts, decay, sharpness and both prototype matrices
    /// (f32 rows) as a length-prefixed blob.
    pub fn write_blob(&self, w: &mut impl Write) -> Result<()> {
        let count = self.protos.data().len() + self.clip_protos.data().len();
        let payload = 4 * 4 + 8 * 2 + 4 * count as u64;
        w.write_u64::<LittleEndian>(payload)?;
        w.write_u32::<LittleEndian>(self.n_rel as u32)?;
        w.write_u32::<LittleEndian>(self.n_irr as u32)?;
        w.write_u32::<LittleEndian>(self.d_out() as u32)?;
        w.write_u32::<LittleEndian>(self.d_q() as u32)?;
        w.write_f64::<LittleEndian>(self.alpha)?;
        w.write_f64::<LittleEndian>(self.beta)?;
        for &v in self.protos.data().iter().chain(self.clip_protos.data()) {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
        Ok(())
    }

    pub fn read_blob(r: &mut impl Read) -> Result<Self> {
        let trunc = || Error::format(0, "truncated prototype-bank blob");
        let payload = r.read_u64::<LittleEndian>().map_err(|_| trunc())?;
        let n_rel = r.read_u32::<LittleEndian>().map_err(|_| trunc())? as usize;
        let n_irr = r.read_u32::<LittleEndian>().map_err(|_| trunc())? as usize;
        let d_out = r.read_u32::<LittleEndian>().map_err(|_| trunc())? as usize;
        let d_q = r.read_u32::<LittleEndian>().map_err(|_| trunc())? as usize;
        let alpha = r.read_f64::<LittleEndian>().map_err(|_| trunc())?;
        let beta = r.read_f64::<LittleEndian>().map_err(|_| trunc())?;
        let mut bank = PrototypeBank::new(n_rel, n_irr, d_out, d_q, alpha, beta)?;
        let count = bank.protos.data().len() + bank.clip_protos.data().len();
        if payload != 4 * 4 + 8 * 2 + 4 * count as u64 {
            return Err(Error::format(0, "prototype-bank blob length mismatch"));
        }
        for v in bank
            .protos
            .data_mut()
            .iter_mut()
            .chain(bank.clip_protos.data_mut().iter_mut())
        {
            *v = f64::from(r.read_f32::<LittleEndian>().map_err(|_| trunc())?);
        }
        Ok(bank)
    }
}

/// Per-sample class distributions from one assignment pass.
#[derive(Clone, Debug)]
pub struct AssignmentBatch {
    /// B x N row-stochastic distribution matrix `D`.
    pub dist: Matrix,
    /// B x N raw cosine similarities behind `dist` (kept for the softmax
    /// Jacobian in the loss chain).
    pub sims: Matrix,
    /// Per-sample max of `D`.
    pub confidence: Vec<f64>,
    /// Per-sample argmax of `D`; ties break to the lowest index.
    pub hard_labels: Vec<usize>,
}

impl AssignmentBatch {
    pub fn len(&self) -> usize {
        self.hard_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hard_labels.is_empty()
    }
}

/// `D_k = softmax(cos(f_proj_k, P_i) / beta)`. Zero-norm features or
/// prototypes contribute cosine 0.
pub fn assign(bank: &PrototypeBank, f_proj: &Matrix) -> Result<AssignmentBatch> {
    if f_proj.cols() != bank.d_out() {
        return Err(Error::Validation(format!(
            "projected feature dimension {} does not match prototypes ({})",
            f_proj.cols(),
            bank.d_out()
        )));
    }
    let n = bank.n();
    let batch = f_proj.rows();
    let mut dist = Matrix::zeros(batch, n);
    let mut sims = Matrix::zeros(batch, n);

    dist.par_rows_mut()
        .zip(sims.par_rows_mut())
        .enumerate()
        .with_min_len(256)
        .for_each(|(k, (d_row, s_row))| {
            let f = f_proj.row(k);
            for i in 0..n {
                s_row[i] = math::cosine(f, bank.protos.row(i));
                d_row[i] = s_row[i] / bank.beta;
            }
            math::softmax_inplace(d_row);
        });

    let mut confidence = Vec::with_capacity(batch);
    let mut hard_labels = Vec::with_capacity(batch);
    for k in 0..batch {
        let row = dist.row(k);
        let best = math::argmax(row);
        hard_labels.push(best);
        confidence.push(row[best]);
    }
    Ok(AssignmentBatch {
        dist,
        sims,
        confidence,
        hard_labels,
    })
}

/// Two-fold weighted EMA prototype update with uncertain-sample filtering.
///
/// For each class `i`, contributors are the samples hard-labeled `i` with
/// `D_{k,i} >= conf_floor` and `w_k >= weight_floor`. With at least one
/// contributor the prototype moves to
/// `alpha * P_i + (1 - alpha) * sum(w D f_proj) / sum(w D)`; otherwise the
/// class is left untouched. Query-space prototypes update identically with
/// the raw query features in place of the projected ones.
pub fn ema_update(
    bank: &mut PrototypeBank,
    batch: &SampleBatch,
    f_proj: &Matrix,
    assignment: &AssignmentBatch,
    conf_floor: f64,
    weight_floor: f64,
) -> Result<()> {
    let b = batch.len();
    if f_proj.rows() != b || assignment.len() != b {
        return Err(Error::Usage(
            "assignment was not computed from this projected batch".into(),
        ));
    }
    if f_proj.cols() != bank.d_out() || batch.query.cols() != bank.d_q() {
        return Err(Error::Validation("feature dimensions do not match the bank".into()));
    }
    let n = bank.n();
    let mut num = Matrix::zeros(n, bank.d_out());
    let mut num_clip = Matrix::zeros(n, bank.d_q());
    let mut denom = vec![0.0f64; n];

    for k in 0..b {
        let class = assignment.hard_labels[k];
        let conf = assignment.dist.get(k, class);
        let w = batch.weights[k];
        if conf < conf_floor || w < weight_floor {
            continue;
        }
        let coeff = w * conf;
        denom[class] += coeff;
        for (acc, &v) in num.row_mut(class).iter_mut().zip(f_proj.row(k)) {
            *acc += coeff * v;
        }
        for (acc, &v) in num_clip.row_mut(class).iter_mut().zip(batch.query.row(k)) {
            *acc += coeff * v;
        }
    }

    let alpha = bank.alpha;
    for i in 0..n {
        if denom[i] <= 0.0 {
            continue;
        }
        for (p, &acc) in bank.protos.row_mut(i).iter_mut().zip(num.row(i)) {
            *p = alpha * *p + (1.0 - alpha) * (acc / denom[i]);
        }
        for (p, &acc) in bank.clip_protos.row_mut(i).iter_mut().zip(num_clip.row(i)) {
            *p = alpha * *p + (1.0 - alpha) * (acc / denom[i]);
        }
    }
    Ok(())
}

/// Linear sharpness decay: epoch 0 yields `beta_start`, epoch `total_epochs`
/// yields `beta_end`.
pub fn schedule_beta(epoch: u64, total_epochs: u64, beta_start: f64, beta_end: f64) -> Result<f64> {
    if total_epochs == 0 {
        return Err(Error::Validation("total_epochs must be at least 1".into()));
    }
    if beta_start <= 0.0 || beta_end <= 0.0 {
        return Err(Error::Validation("beta schedule endpoints must be positive".into()));
    }
    let t = (epoch.min(total_epochs) as f64) / total_epochs as f64;
    Ok(beta_start + (beta_end - beta_start) * t)
}

/// Semantic identity of one relevant prototype after catalog matching.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeMatch {
    pub prototype: usize,
    /// `None` flags an unused prototype (zero query-space embedding).
    pub class_id: Option<u32>,
    /// softmax(100 x cosine) over catalog classes; empty for unused rows.
    pub distribution: Vec<f64>,
}

/// Match each relevant prototype to the catalog class with the highest
/// cosine similarity between its query-space prototype and the class
/// centroid. Unused prototypes (all-zero embedding) are flagged and skipped.
pub fn match_prototypes_to_catalog(bank: &PrototypeBank, catalog: &ClassCatalog) -> Result<Vec<PrototypeMatch>> {
    if catalog.is_empty() {
        return Err(Error::Usage("cannot match against an empty catalog".into()));
    }
    let centroids: Vec<Vec<f64>> = catalog
        .classes
        .iter()
        .map(|c| c.query_centroid.iter().map(|&v| f64::from(v)).collect())
        .collect();
    if centroids.iter().any(|c| c.len() != bank.d_q()) {
        return Err(Error::Validation(
            "catalog centroid dimension does not match query-space prototypes".into(),
        ));
    }
    let mut out = Vec::with_capacity(bank.n_rel);
    for p in 0..bank.n_rel {
        if bank.clip_proto_is_zero(p) {
            out.push(PrototypeMatch {
                prototype: p,
                class_id: None,
                distribution: Vec::new(),
            });
            continue;
        }
        let row = bank.clip_protos.row(p);
        let sims: Vec<f64> = centroids.iter().map(|c| math::cosine(row, c)).collect();
        let best = math::argmax(&sims);
        let mut distribution: Vec<f64> = sims.iter().map(|&s| 100.0 * s).collect();
        math::softmax_inplace(&mut distribution);
        out.push(PrototypeMatch {
            prototype: p,
            class_id: Some(catalog.classes[best].id),
            distribution,
        });
    }
    Ok(out)
}
