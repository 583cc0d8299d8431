//! The epoch loop: batch sampling, projector forward/backward, Adam step,
//! sharpness scheduling and epoch-boundary EMA prototype updates, plus run
//! checkpoints and training telemetry.

use crate::fieldset::{compute_density_weights, sigma_proxy_weight, FieldSet, SampleBatch};
use crate::guidance::{make_pairs, total_loss, LossWeights, QuerySet};
use crate::math::Matrix;
use crate::projector::{adam_step, backward, project, OptimizerState, ProjectorParams};
use crate::prototypes::{assign, ema_update, schedule_beta, PrototypeBank};
use crate::{Error, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

/// Run configuration with the stock hyperparameters baked in as defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub epochs: u64,
    pub batch_size: usize,
    /// Relevant prototypes (the full budget in query-free runs).
    pub n_rel: usize,
    /// Irrelevant prototypes backing the guidance loss.
    pub n_irr: usize,
    /// EMA decay of the prototype update.
    pub alpha: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weights: LossWeights,
    pub conf_floor: f64,
    pub weight_floor: f64,
    pub dropout_p: f64,
    /// Default relevance threshold for queries that do not set their own.
    pub tau_default: f64,
    pub seed: u64,
    /// Feed the training-mode projections to the EMA update (the in-epoch
    /// forward); disable to recompute them in eval mode first.
    pub ema_uses_training_projection: bool,
    /// Share of batch points below which a prototype counts as unused in
    /// telemetry.
    pub used_min_share: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            epochs: 200,
            batch_size: 4096,
            n_rel: 7,
            n_irr: 3,
            alpha: 0.998,
            beta_start: 0.5,
            beta_end: 0.1,
            lr_start: 1e-2,
            lr_end: 1e-4,
            weights: LossWeights::default(),
            conf_floor: 0.2,
            weight_floor: 0.2,
            dropout_p: 0.2,
            tau_default: 0.5,
            seed: 0,
            ema_uses_training_projection: true,
            used_min_share: 0.005,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Validation("batch_size must be at least 2 (pairing needs it)".into()));
        }
        if self.n_rel + self.n_irr == 0 {
            return Err(Error::Validation("at least one prototype is required".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Validation("alpha must lie in [0, 1]".into()));
        }
        if self.beta_start <= 0.0 || self.beta_end <= 0.0 {
            return Err(Error::Validation("beta endpoints must be positive".into()));
        }
        if self.lr_start <= 0.0 || self.lr_end <= 0.0 {
            return Err(Error::Validation("learning-rate endpoints must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.conf_floor) || !(0.0..=1.0).contains(&self.weight_floor) {
            return Err(Error::Validation("filter floors must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Validation("dropout_p must lie in [0, 1)".into()));
        }
        if self.tau_default <= -1.0 || self.tau_default >= 1.0 || self.tau_default.is_nan() {
            return Err(Error::Validation("tau_default must lie in (-1, 1)".into()));
        }
        if self.weights.w_proj < 0.0 || self.weights.w_irr < 0.0 || self.weights.w_proto < 0.0 {
            return Err(Error::Validation("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)
            .map_err(|e| Error::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("RunConfig serializes")
    }
}

/// One telemetry record per completed epoch. Loss components are unweighted;
/// `total` is the weighted sum that was optimized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TelemetryRow {
    pub epoch: u32,
    pub l_proj: f64,
    pub l_irr: f64,
    pub l_proto: f64,
    pub total: f64,
    pub beta: f64,
    pub lr: f64,
    pub used_prototypes: u32,
    /// Wall time of the epoch. Not part of checkpoint bytes.
    pub ms: f64,
}

/// Trained artifacts of one run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub params: ProjectorParams,
    pub bank: PrototypeBank,
    pub telemetry: Vec<TelemetryRow>,
    pub config: RunConfig,
}

/// Draw a training batch. Ray-bearing fieldsets sample whole rays and pool
/// their samples with freshly computed density weights; ray-free fieldsets
/// draw samples uniformly with the sigma-derived proxy weight.
pub fn sample_batch(fieldset: &FieldSet, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<SampleBatch> {
    if fieldset.samples.is_empty() {
        return Err(Error::Validation("cannot sample from an empty fieldset".into()));
    }
    let mut picks: Vec<(usize, f64)> = Vec::with_capacity(batch_size);
    if fieldset.rays.is_empty() {
        for _ in 0..batch_size {
            let i = rng.random_range(0..fieldset.samples.len());
            picks.push((i, sigma_proxy_weight(fieldset.samples[i].sigma)));
        }
    } else {
        while picks.len() < batch_size {
            let r = rng.random_range(0..fieldset.rays.len());
            let ray = &fieldset.rays[r];
            let weights = compute_density_weights(ray, &fieldset.samples)?;
            for (&s, &w) in ray.samples.iter().zip(&weights) {
                picks.push((s as usize, w));
            }
        }
        picks.truncate(batch_size);
    }
    Ok(SampleBatch::gather(fieldset, &picks))
}

/// Pick prototype seeds: projected features of randomly chosen high-density
/// samples (proxy weight >= 0.5 when enough exist, otherwise the densest).
///
/// Draws are spread kmeans++-style, each pick favoring samples far in
/// projected cosine from those already chosen; uniform draws routinely leave
/// a class without a nearby prototype. With queries present, relevant-slot
/// seeds come from query-relevant samples and irrelevant-slot seeds from the
/// remainder, so the block structure starts where its samples live.
fn initial_prototypes(
    fieldset: &FieldSet,
    params: &ProjectorParams,
    n_rel: usize,
    n_irr: usize,
    queryset: &QuerySet,
    rng: &mut ChaCha8Rng,
) -> Result<Matrix> {
    let n = n_rel + n_irr;
    if fieldset.samples.len() < n {
        return Err(Error::Validation(format!(
            "fieldset has {} samples but {n} prototypes were requested",
            fieldset.samples.len()
        )));
    }
    let mut candidates: Vec<usize> = (0..fieldset.samples.len())
        .filter(|&i| sigma_proxy_weight(fieldset.samples[i].sigma) >= 0.5)
        .collect();
    if candidates.len() < n {
        let mut by_weight: Vec<usize> = (0..fieldset.samples.len()).collect();
        by_weight.sort_by(|&a, &b| {
            fieldset.samples[b]
                .sigma
                .total_cmp(&fieldset.samples[a].sigma)
                .then(a.cmp(&b))
        });
        candidates = by_weight.into_iter().take(n.max(candidates.len())).collect();
    }
    // Cap the candidate pool before projecting everything.
    const MAX_POOL: usize = 20_000;
    if candidates.len() > MAX_POOL {
        for i in 0..MAX_POOL {
            let j = rng.random_range(i..candidates.len());
            candidates.swap(i, j);
        }
        candidates.truncate(MAX_POOL);
    }
    let picks: Vec<(usize, f64)> = candidates.iter().map(|&i| (i, 1.0)).collect();
    let batch = SampleBatch::gather(fieldset, &picks);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(0);
    let (projected, _) = project(params, &batch.seg, false, &mut eval_rng)?;

    // Candidate rows eligible per block: with queries, split by the union
    // relevance mask; otherwise everything is eligible everywhere.
    let relevant: Vec<bool> = if queryset.is_empty() {
        vec![true; candidates.len()]
    } else {
        let mut mask = vec![false; candidates.len()];
        for query in &queryset.queries {
            let m = crate::guidance::relevance_mask(query, &batch)?;
            for (flag, &hit) in mask.iter_mut().zip(&m.mask) {
                *flag = *flag || hit;
            }
        }
        mask
    };
    let pool_for = |block_relevant: bool| -> Vec<usize> {
        if queryset.is_empty() {
            return (0..candidates.len()).collect();
        }
        let pool: Vec<usize> = (0..candidates.len())
            .filter(|&i| relevant[i] == block_relevant)
            .collect();
        if pool.is_empty() {
            (0..candidates.len()).collect()
        } else {
            pool
        }
    };

    let mut chosen: Vec<usize> = Vec::with_capacity(n);
    // min_dist[i] = 1 - max cosine to any chosen seed so far.
    let mut min_dist: Vec<f64> = vec![2.0; candidates.len()];
    let pick_from = |pool: &[usize], chosen: &mut Vec<usize>, min_dist: &mut Vec<f64>, rng: &mut ChaCha8Rng| {
        let total: f64 = pool.iter().map(|&i| min_dist[i]).sum();
        let pick = if chosen.is_empty() || total <= 0.0 {
            pool[rng.random_range(0..pool.len())]
        } else {
            let mut target = rng.random_range(0.0..total);
            let mut idx = pool[pool.len() - 1];
            for &i in pool {
                if target < min_dist[i] {
                    idx = i;
                    break;
                }
                target -= min_dist[i];
            }
            idx
        };
        chosen.push(pick);
        for (i, md) in min_dist.iter_mut().enumerate() {
            let d = 1.0 - crate::math::cosine(projected.row(i), projected.row(pick));
            if d < *md {
                *md = d;
            }
        }
    };
    let rel_pool = pool_for(true);
    for _ in 0..n_rel {
        pick_from(&rel_pool, &mut chosen, &mut min_dist, rng);
    }
    let irr_pool = pool_for(false);
    for _ in 0..n_irr {
        pick_from(&irr_pool, &mut chosen, &mut min_dist, rng);
    }

    let mut protos = Matrix::zeros(n, projected.cols());
    for (row, &c) in chosen.iter().enumerate() {
        protos.row_mut(row).copy_from_slice(projected.row(c));
    }
    Ok(protos)
}

fn count_used_in_batch(hard_labels: &[usize], n_rel: usize, min_share: f64) -> u32 {
    let mut counts = vec![0usize; n_rel];
    for &l in hard_labels {
        if l < n_rel {
            counts[l] += 1;
        }
    }
    let total = hard_labels.len().max(1) as f64;
    counts.iter().filter(|&&c| c as f64 / total >= min_share).count() as u32
}

/// Count relevant prototypes that hold at least `min_share` of a result's
/// classified points.
pub fn count_used_prototypes(
    bank: &PrototypeBank,
    result: &crate::eval::SegmentationResult,
    min_share: f64,
) -> usize {
    let shares = result.prototype_shares();
    (0..bank.n_rel).filter(|&p| shares[p] >= min_share).count()
}

/// Train a projector and prototype bank on a fieldset.
///
/// Per epoch: update the sharpness, draw one batch, project in training
/// mode, assign, compute the weighted loss, backpropagate, take one Adam
/// step, then update both prototype sets by EMA. The result is bit-for-bit
/// reproducible under a fixed seed.
pub fn run(fieldset: &FieldSet, queryset: &QuerySet, config: &RunConfig) -> Result<RunOutput> {
    run_with_progress(fieldset, queryset, config, |_| {})
}

/// [`run`] with a per-epoch callback receiving each telemetry row as it is
/// produced.
pub fn run_with_progress(
    fieldset: &FieldSet,
    queryset: &QuerySet,
    config: &RunConfig,
    mut on_epoch: impl FnMut(&TelemetryRow),
) -> Result<RunOutput> {
    config.validate()?;
    fieldset.validate()?;
    queryset.validate(config.n_rel)?;
    if !queryset.is_empty() {
        for q in &queryset.queries {
            if q.embedding.len() != fieldset.d_q {
                return Err(Error::Validation(format!(
                    "query embedding dimension {} does not match fieldset d_q {}",
                    q.embedding.len(),
                    fieldset.d_q
                )));
            }
        }
    }

    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    let mut init_rng = ChaCha8Rng::seed_from_u64(master.random());
    let mut proto_rng = ChaCha8Rng::seed_from_u64(master.random());
    let mut batch_rng = ChaCha8Rng::seed_from_u64(master.random());
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(master.random());
    let mut pair_rng = ChaCha8Rng::seed_from_u64(master.random());

    let mut params = ProjectorParams::init(fieldset.d_seg, config.dropout_p, &mut init_rng);
    let mut bank = PrototypeBank::new(
        config.n_rel,
        config.n_irr,
        fieldset.d_seg,
        fieldset.d_q,
        config.alpha,
        config.beta_start,
    )?;
    bank.protos = initial_prototypes(fieldset, &params, config.n_rel, config.n_irr, queryset, &mut proto_rng)?;

    let mut state = OptimizerState::new(&params, config.lr_start, config.lr_end, config.epochs.max(1))?;
    let mut telemetry = Vec::with_capacity(config.epochs as usize);

    for epoch in 0..config.epochs {
        let t0 = Instant::now();
        bank.beta = schedule_beta(epoch, config.epochs, config.beta_start, config.beta_end)?;
        let lr = state.lr_at(epoch);

        let batch = sample_batch(fieldset, config.batch_size, &mut batch_rng)?;
        let (f_proj, cache) = project(&params, &batch.seg, true, &mut dropout_rng)?;
        let assignment = assign(&bank, &f_proj)?;
        let pairs = make_pairs(&batch.seg, &mut pair_rng);

        let (breakdown, grad_f) =
            total_loss(&batch, &f_proj, &assignment, queryset, &bank, &config.weights, &pairs).map_err(|e| {
                match e {
                    Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch}: {msg}")),
                    other => other,
                }
            })?;
        if !breakdown.total.is_finite() {
            return Err(Error::Numeric(format!(
                "epoch {epoch}: non-finite loss (proj {} irr {} proto {})",
                breakdown.proj, breakdown.irr, breakdown.proto
            )));
        }

        let (grads, _) = backward(&params, &cache, &grad_f)?;
        adam_step(&mut params, &grads, &mut state).map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!(
                "epoch {epoch}: {msg} (loss proj {} irr {} proto {})",
                breakdown.proj, breakdown.irr, breakdown.proto
            )),
            other => other,
        })?;

        if config.ema_uses_training_projection {
            ema_update(&mut bank, &batch, &f_proj, &assignment, config.conf_floor, config.weight_floor)?;
        } else {
            let mut eval_rng = ChaCha8Rng::seed_from_u64(0);
            let (f_eval, _) = project(&params, &batch.seg, false, &mut eval_rng)?;
            let eval_assignment = assign(&bank, &f_eval)?;
            ema_update(&mut bank, &batch, &f_eval, &eval_assignment, config.conf_floor, config.weight_floor)?;
        }

        let row = TelemetryRow {
            epoch: epoch as u32,
            l_proj: breakdown.proj,
            l_irr: breakdown.irr,
            l_proto: breakdown.proto,
            total: breakdown.total,
            beta: bank.beta,
            lr,
            used_prototypes: count_used_in_batch(&assignment.hard_labels, config.n_rel, config.used_min_share),
            ms: t0.elapsed().as_secs_f64() * 1e3,
        };
        on_epoch(&row);
        telemetry.push(row);
        log::debug!(
            "epoch {epoch}: total {:.6} (proj {:.6} irr {:.6} proto {:.6}) beta {:.3} lr {:.2e}",
            breakdown.total,
            breakdown.proj,
            breakdown.irr,
            breakdown.proto,
            bank.beta,
            lr
        );
    }

    Ok(RunOutput {
        params,
        bank,
        telemetry,
        config: config.clone(),
    })
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Write a run checkpoint: magic, version, projector blob, bank blob, a
/// TOML echo of the config, and the telemetry table. Epoch wall times are
/// deliberately left out so identical seeds give byte-identical files.
pub fn save_checkpoint(output: &RunOutput, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    output.params.write_blob(&mut w)?;
    output.bank.write_blob(&mut w)?;
    let config_text = output.config.to_toml_string();
    w.write_u64::<LittleEndian>(config_text.len() as u64)?;
    w.write_all(config_text.as_bytes())?;
    w.write_u64::<LittleEndian>(output.telemetry.len() as u64)?;
    for row in &output.telemetry {
        w.write_u32::<LittleEndian>(row.epoch)?;
        w.write_f64::<LittleEndian>(row.l_proj)?;
        w.write_f64::<LittleEndian>(row.l_irr)?;
        w.write_f64::<LittleEndian>(row.l_proto)?;
        w.write_f64::<LittleEndian>(row.total)?;
        w.write_f64::<LittleEndian>(row.beta)?;
        w.write_f64::<LittleEndian>(row.lr)?;
        w.write_u32::<LittleEndian>(row.used_prototypes)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a checkpoint back. Wall-time fields come back as zero.
pub fn load_checkpoint(path: &Path) -> Result<RunOutput> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format(0, "truncated checkpoint"))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(0, format!("bad checkpoint magic {magic:?}")));
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::format(4, "truncated checkpoint"))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let params = ProjectorParams::read_blob(&mut r)?;
    let bank = PrototypeBank::read_blob(&mut r)?;
    let trunc = || Error::format(0, "truncated checkpoint");
    let config_len = r.read_u64::<LittleEndian>().map_err(|_| trunc())? as usize;
    let mut config_bytes = vec![0u8; config_len];
    r.read_exact(&mut config_bytes).map_err(|_| trunc())?;
    let config_text =
        String::from_utf8(config_bytes).map_err(|_| Error::format(0, "config echo is not UTF-8"))?;
    let config = RunConfig::from_toml_str(&config_text)?;
    let rows = r.read_u64::<LittleEndian>().map_err(|_| trunc())?;
    let mut telemetry = Vec::with_capacity(rows.min(1 << 20) as usize);
    for _ in 0..rows {
        telemetry.push(TelemetryRow {
            epoch: r.read_u32::<LittleEndian>().map_err(|_| trunc())?,
            l_proj: r.read_f64::<LittleEndian>().map_err(|_| trunc())?,
            l_irr: r.read_f64::<LittleEndian>().map_err(|_| trunc())?,
            l_proto: r.read_f64::<LittleEndian>().map_err(|_| trunc())?,
            total: r.read_f64::<LittleEndian>().map_err(|_| trunc())?,
            beta: r.read_f64::<LittleEndian>().map_err(|_| trunc())?,
            lr: r.read_f64::<LittleEndian>().map_err(|_| trunc())?,
            used_prototypes: r.read_u32::<LittleEndian>().map_err(|_| trunc())?,
            ms: 0.0,
        });
    }
    Ok(RunOutput {
        params,
        bank,
        telemetry,
        config,
    })
}

/// Telemetry CSV: epoch,l_proj,l_irr,l_proto,total,beta,lr,used_prototypes,ms
pub fn write_telemetry_csv(rows: &[TelemetryRow], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "epoch,l_proj,l_irr,l_proto,total,beta,lr,used_prototypes,ms")?;
    for row in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            row.epoch, row.l_proj, row.l_irr, row.l_proto, row.total, row.beta, row.lr, row.used_prototypes, row.ms
        )?;
    }
    w.flush()?;
    Ok(())
}
