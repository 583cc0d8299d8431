//! Point-cloud evaluation: distribution rendering / direct classification,
//! Hungarian and embedding-based matching of discovered classes to ground
//! truth, panoptic quality with its SQ/RQ decomposition, mIoU/mAcc, and
//! confidence export.

use crate::fieldset::{compute_density_weights, ClassCatalog, FieldSet, SampleBatch};
use crate::hungarian::max_profit_assignment;
use crate::math::{self, Matrix};
use crate::projector::{project, ProjectorParams};
use crate::prototypes::{assign, PrototypeBank};
use crate::{Error, Result};
use rand::SeedableRng;
use serde::Serialize;
use std::io::Write;
use std::path::Path;

/// Predicted masks below this share of classified points are treated as
/// unused: excluded from matching and not counted as false positives.
pub const DEFAULT_MIN_SHARE: f64 = 0.005;

/// How per-point distributions are obtained.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ClassifyMode {
    /// Evaluate the field directly at each point's sample.
    Direct,
    /// Render per-ray distributions and back-project them: per viewpoint,
    /// each evaluated point reads the pixel of the ray passing closest to
    /// it, if that ray comes within `match_radius`.
    Render { match_radius: f64 },
}

/// Per-point classification output.
#[derive(Clone, Debug)]
pub struct SegmentationResult {
    /// Indices of the evaluated points in the fieldset.
    pub point_indices: Vec<usize>,
    pub positions: Vec<[f32; 3]>,
    /// Aggregated class distribution per point; rows of labeled points sum
    /// to 1, unlabeled rows are zero.
    pub dist: Matrix,
    /// Argmax prototype per point; `None` when no aggregate mass reached it.
    pub labels: Vec<Option<usize>>,
    /// Max of the aggregated distribution (0 for unlabeled points).
    pub confidence: Vec<f64>,
    /// Relevant-block size of the bank that produced this result.
    pub n_rel: usize,
    /// Per-prototype semantic identity, filled in by a matching pass.
    pub matched_ids: Vec<Option<u32>>,
}

impl SegmentationResult {
    pub fn n_points(&self) -> usize {
        self.point_indices.len()
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }

    /// Fraction of classified points carried by each prototype.
    pub fn prototype_shares(&self) -> Vec<f64> {
        let n = self.dist.cols();
        let mut counts = vec![0usize; n];
        for l in self.labels.iter().flatten() {
            counts[*l] += 1;
        }
        let total = self.labeled_count().max(1) as f64;
        counts.iter().map(|&c| c as f64 / total).collect()
    }

    /// Predicted labels mapped into ground-truth class space through
    /// `matched_ids`; points on unmatched or irrelevant prototypes map to
    /// `None` (background).
    pub fn gt_space_labels(&self) -> Vec<Option<u32>> {
        self.labels
            .iter()
            .map(|l| l.and_then(|p| self.matched_ids.get(p).copied().flatten()))
            .collect()
    }
}

/// Classify the given fieldset samples with a trained projector and bank.
pub fn classify_points(
    fieldset: &FieldSet,
    points: &[usize],
    params: &ProjectorParams,
    bank: &PrototypeBank,
    mode: ClassifyMode,
) -> Result<SegmentationResult> {
    if let Some(&bad) = points.iter().find(|&&i| i >= fieldset.samples.len()) {
        return Err(Error::Validation(format!("point index {bad} out of range")));
    }
    let positions: Vec<[f32; 3]> = points.iter().map(|&i| fieldset.samples[i].position).collect();
    let n = bank.n();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);

    let dist = match mode {
        ClassifyMode::Direct => {
            let picks: Vec<(usize, f64)> = points.iter().map(|&i| (i, 1.0)).collect();
            let batch = SampleBatch::gather(fieldset, &picks);
            let (f_proj, _) = project(params, &batch.seg, false, &mut rng)?;
            assign(bank, &f_proj)?.dist
        }
        ClassifyMode::Render { match_radius } => {
            if fieldset.rays.is_empty() {
                return Err(Error::Usage("render mode requires a fieldset with rays".into()));
            }
            if match_radius <= 0.0 {
                return Err(Error::Validation("match_radius must be positive".into()));
            }
            render_distributions(fieldset, points, &positions, params, bank, match_radius, &mut rng)?
        }
    };

    let mut labels = Vec::with_capacity(points.len());
    let mut confidence = Vec::with_capacity(points.len());
    for k in 0..points.len() {
        let row = dist.row(k);
        let mass: f64 = row.iter().sum();
        if mass <= math::NORM_EPS {
            labels.push(None);
            confidence.push(0.0);
        } else {
            let best = math::argmax(row);
            labels.push(Some(best));
            confidence.push(row[best]);
        }
    }
    Ok(SegmentationResult {
        point_indices: points.to_vec(),
        positions,
        dist,
        labels,
        confidence,
        n_rel: bank.n_rel,
        matched_ids: vec![None; n],
    })
}

/// Render per-ray class distributions (density-weighted sums of sample
/// distributions), then back-project: for each viewpoint, every evaluated
/// point reads the pixel of the ray line passing closest to it (within
/// `match_radius`, in front of the origin). Per-point distributions average
/// over the contributing viewpoints. Fieldsets without viewpoint structure
/// treat all rays as a single view.
fn render_distributions(
    fieldset: &FieldSet,
    points: &[usize],
    positions: &[[f32; 3]],
    params: &ProjectorParams,
    bank: &PrototypeBank,
    match_radius: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Matrix> {
    // Project every sample referenced by a ray, once.
    let mut row_of = vec![u32::MAX; fieldset.samples.len()];
    let mut referenced: Vec<usize> = Vec::new();
    for ray in &fieldset.rays {
        for &s in &ray.samples {
            if row_of[s as usize] == u32::MAX {
                row_of[s as usize] = referenced.len() as u32;
                referenced.push(s as usize);
            }
        }
    }
    let picks: Vec<(usize, f64)> = referenced.iter().map(|&i| (i, 1.0)).collect();
    let batch = SampleBatch::gather(fieldset, &picks);
    let (f_proj, _) = project(params, &batch.seg, false, rng)?;
    let sample_dist = assign(bank, &f_proj)?.dist;

    let n = bank.n();
    let mut pixels = Matrix::zeros(fieldset.rays.len(), n);
    for (ri, ray) in fieldset.rays.iter().enumerate() {
        let weights = compute_density_weights(ray, &fieldset.samples)?;
        let pixel = pixels.row_mut(ri);
        for (&s, &w) in ray.samples.iter().zip(&weights) {
            let row = sample_dist.row(row_of[s as usize] as usize);
            for (p, &d) in pixel.iter_mut().zip(row) {
                *p += w * d;
            }
        }
    }

    let views: Vec<(usize, usize)> = if fieldset.viewpoints.is_empty() {
        vec![(0, fieldset.rays.len())]
    } else {
        fieldset
            .viewpoints
            .iter()
            .map(|vp| (vp.ray_start as usize, (vp.ray_start + vp.ray_count) as usize))
            .collect()
    };

    let mut acc = Matrix::zeros(points.len(), n);
    let mut hits = vec![0usize; points.len()];
    let r2 = match_radius * match_radius;
    for &(start, end) in &views {
        for (pi, pos) in positions.iter().enumerate() {
            let p = pos.map(f64::from);
            // Ray line passing closest to the point, ties to the lowest
            // ray index.
            let mut best: Option<(f64, usize)> = None;
            for ri in start..end {
                let ray = &fieldset.rays[ri];
                let o = ray.origin.map(f64::from);
                let dir = ray.direction.map(f64::from);
                let v = [p[0] - o[0], p[1] - o[1], p[2] - o[2]];
                let t = v[0] * dir[0] + v[1] * dir[1] + v[2] * dir[2];
                if t < 0.0 {
                    continue;
                }
                let d2 = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] - t * t).max(0.0);
                if d2 <= r2 && best.map_or(true, |(bd, _)| d2 < bd) {
                    best = Some((d2, ri));
                }
            }
            if let Some((_, ri)) = best {
                let mass: f64 = pixels.row(ri).iter().sum();
                if mass > math::NORM_EPS {
                    for (a, &v) in acc.row_mut(pi).iter_mut().zip(pixels.row(ri)) {
                        *a += v;
                    }
                    hits[pi] += 1;
                }
            }
        }
    }

    for (pi, &h) in hits.iter().enumerate() {
        if h == 0 {
            continue;
        }
        let row = acc.row_mut(pi);
        let mass: f64 = row.iter().sum();
        if mass > math::NORM_EPS {
            for v in row.iter_mut() {
                *v /= mass;
            }
        }
    }
    Ok(acc)
}

/// Optimal one-to-one matching between relevant-prototype masks and ground
/// truth masks, maximizing total IoU. Prototypes below `min_share` of the
/// classified points are excluded. Returns the per-prototype matched class.
pub fn match_hungarian(
    result: &SegmentationResult,
    gt_labels: &[Option<u32>],
    n_gt: usize,
    min_share: f64,
) -> Result<Vec<Option<u32>>> {
    if gt_labels.len() != result.n_points() {
        return Err(Error::Usage("ground-truth labels do not align with the result".into()));
    }
    let shares = result.prototype_shares();
    let eligible: Vec<usize> = (0..result.n_rel).filter(|&p| shares[p] >= min_share).collect();
    let mut matched = vec![None; result.dist.cols()];
    if eligible.is_empty() || n_gt == 0 {
        return Ok(matched);
    }

    let mut profit = Matrix::zeros(eligible.len(), n_gt);
    for (row, &p) in eligible.iter().enumerate() {
        for g in 0..n_gt {
            let mut inter = 0usize;
            let mut union = 0usize;
            for (l, gt) in result.labels.iter().zip(gt_labels) {
                let in_pred = *l == Some(p);
                let in_gt = *gt == Some(g as u32);
                inter += usize::from(in_pred && in_gt);
                union += usize::from(in_pred || in_gt);
            }
            if union > 0 {
                profit.set(row, g, inter as f64 / union as f64);
            }
        }
    }
    let assignment = max_profit_assignment(&profit);
    for (row, &p) in eligible.iter().enumerate() {
        matched[p] = assignment[row].map(|g| g as u32);
    }
    Ok(matched)
}

/// Nearest-catalog-class matching by cosine between query-space prototypes
/// and catalog centroids. Many-to-one is allowed; masks of prototypes mapped
/// to the same class are merged downstream. Prototypes with zero query-space
/// embeddings or below `min_share` are excluded.
pub fn match_clip(
    result: &SegmentationResult,
    bank: &PrototypeBank,
    catalog: &ClassCatalog,
    min_share: f64,
) -> Result<Vec<Option<u32>>> {
    if catalog.is_empty() {
        return Err(Error::Usage("cannot match against an empty catalog".into()));
    }
    let centroids: Vec<Vec<f64>> = catalog
        .classes
        .iter()
        .map(|c| c.query_centroid.iter().map(|&v| f64::from(v)).collect())
        .collect();
    let shares = result.prototype_shares();
    let mut matched = vec![None; result.dist.cols()];
    for p in 0..result.n_rel {
        if shares[p] < min_share || bank.clip_proto_is_zero(p) {
            continue;
        }
        let row = bank.clip_protos.row(p);
        let sims: Vec<f64> = centroids.iter().map(|c| math::cosine(row, c)).collect();
        matched[p] = Some(catalog.classes[math::argmax(&sims)].id);
    }
    Ok(matched)
}

/// Panoptic-quality accounting over matched masks.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct PqReport {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// PQ over predicted masks (each tagged with its matched ground-truth class,
/// or `None`) and ground-truth masks. A matched pair is a true positive when
/// its IoU exceeds 0.5; `PQ = SQ * RQ` with `SQ` the mean TP IoU and
/// `RQ = |TP| / (|TP| + 0.5 |FP| + 0.5 |FN|)`.
pub fn panoptic_quality(pred_masks: &[(Option<u32>, Vec<bool>)], gt_masks: &[(u32, Vec<bool>)]) -> PqReport {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut iou_sum = 0.0f64;
    let mut gt_hit = vec![false; gt_masks.len()];

    for (matched, mask) in pred_masks {
        let hit = matched.and_then(|g| gt_masks.iter().position(|(gid, _)| *gid == g));
        match hit {
            Some(gi) => {
                let iou = mask_iou(mask, &gt_masks[gi].1);
                if iou > 0.5 && !gt_hit[gi] {
                    gt_hit[gi] = true;
                    tp += 1;
                    iou_sum += iou;
                } else {
                    fp += 1;
                }
            }
            None => fp += 1,
        }
    }
    let fn_ = gt_hit.iter().filter(|&&h| !h).count();

    if tp == 0 {
        return PqReport {
            pq: 0.0,
            sq: 0.0,
            rq: 0.0,
            tp,
            fp,
            fn_,
        };
    }
    let sq = iou_sum / tp as f64;
    let rq = tp as f64 / (tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64);
    PqReport {
        pq: sq * rq,
        sq,
        rq,
        tp,
        fp,
        fn_,
    }
}

/// Post-matching masks: predicted masks merged per matched class, surviving
/// unmatched masks kept as false-positive candidates, plus the non-empty
/// ground-truth masks.
pub fn build_eval_masks(
    result: &SegmentationResult,
    gt_labels: &[Option<u32>],
    n_gt: usize,
    min_share: f64,
) -> (Vec<(Option<u32>, Vec<bool>)>, Vec<(u32, Vec<bool>)>) {
    let shares = result.prototype_shares();

    let mut merged: Vec<(Option<u32>, Vec<bool>)> = Vec::new();
    for p in 0..result.n_rel {
        if shares[p] < min_share {
            continue;
        }
        let mask: Vec<bool> = result.labels.iter().map(|l| *l == Some(p)).collect();
        let target = result.matched_ids[p];
        if let Some(t) = target {
            if let Some(existing) = merged.iter_mut().find(|(m, _)| *m == Some(t)) {
                for (a, b) in existing.1.iter_mut().zip(&mask) {
                    *a = *a || *b;
                }
                continue;
            }
        }
        merged.push((target, mask));
    }

    let mut gt = Vec::new();
    for g in 0..n_gt as u32 {
        let mask: Vec<bool> = gt_labels.iter().map(|l| *l == Some(g)).collect();
        if mask.iter().any(|&m| m) {
            gt.push((g, mask));
        }
    }
    (merged, gt)
}

/// Per-class IoU/accuracy table entry.
#[derive(Clone, Debug, Serialize)]
pub struct ClassMetrics {
    pub class: String,
    pub iou: f64,
    pub acc: f64,
    pub support: usize,
}

/// Class-averaged IoU and accuracy over ground-truth classes present in the
/// point set. `include_irrelevant` adds the background (unlabeled) class as
/// one extra class.
pub fn segmentation_metrics(
    pred: &[Option<u32>],
    gt: &[Option<u32>],
    include_irrelevant: bool,
) -> (f64, f64, Vec<ClassMetrics>) {
    assert_eq!(pred.len(), gt.len(), "prediction/ground-truth length mismatch");
    let mut classes: Vec<u32> = gt.iter().flatten().copied().collect();
    classes.sort_unstable();
    classes.dedup();

    let mut table = Vec::new();
    for &c in &classes {
        let mut inter = 0usize;
        let mut union = 0usize;
        let mut support = 0usize;
        for (p, g) in pred.iter().zip(gt) {
            let in_p = *p == Some(c);
            let in_g = *g == Some(c);
            inter += usize::from(in_p && in_g);
            union += usize::from(in_p || in_g);
            support += usize::from(in_g);
        }
        table.push(ClassMetrics {
            class: c.to_string(),
            iou: if union > 0 { inter as f64 / union as f64 } else { 0.0 },
            acc: inter as f64 / support as f64,
            support,
        });
    }
    if include_irrelevant {
        let support = gt.iter().filter(|g| g.is_none()).count();
        if support > 0 {
            let mut inter = 0usize;
            let mut union = 0usize;
            for (p, g) in pred.iter().zip(gt) {
                let in_p = p.is_none();
                let in_g = g.is_none();
                inter += usize::from(in_p && in_g);
                union += usize::from(in_p || in_g);
            }
            table.push(ClassMetrics {
                class: "irrelevant".into(),
                iou: if union > 0 { inter as f64 / union as f64 } else { 0.0 },
                acc: inter as f64 / support as f64,
                support,
            });
        }
    }
    if table.is_empty() {
        return (0.0, 0.0, table);
    }
    let miou = table.iter().map(|c| c.iou).sum::<f64>() / table.len() as f64;
    let macc = table.iter().map(|c| c.acc).sum::<f64>() / table.len() as f64;
    (miou, macc, table)
}

/// Full metric report for one evaluation.
#[derive(Clone, Debug, Serialize)]
pub struct MetricReport {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub miou_rel: f64,
    pub macc_rel: f64,
    pub miou_all: f64,
    pub macc_all: f64,
    pub per_class: Vec<ClassMetrics>,
}

/// Compute PQ and segmentation metrics for a matched result.
pub fn evaluate(
    result: &SegmentationResult,
    gt_labels: &[Option<u32>],
    n_gt: usize,
    min_share: f64,
) -> Result<MetricReport> {
    if gt_labels.len() != result.n_points() {
        return Err(Error::Usage("ground-truth labels do not align with the result".into()));
    }
    let (pred_masks, gt_masks) = build_eval_masks(result, gt_labels, n_gt, min_share);
    let pq = panoptic_quality(&pred_masks, &gt_masks);
    let mapped = result.gt_space_labels();
    let (miou_rel, macc_rel, per_class) = segmentation_metrics(&mapped, gt_labels, false);
    let (miou_all, macc_all, _) = segmentation_metrics(&mapped, gt_labels, true);
    Ok(MetricReport {
        pq: pq.pq,
        sq: pq.sq,
        rq: pq.rq,
        tp: pq.tp,
        fp: pq.fp,
        fn_: pq.fn_,
        miou_rel,
        macc_rel,
        miou_all,
        macc_all,
        per_class,
    })
}

/// Confidence export formats.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ExportFormat {
    Csv,
    Ply,
}

/// Write per-point `(position, label, confidence)` records. CSV columns are
/// `x,y,z,label,confidence` (label -1 for unlabeled points); PLY is binary
/// little-endian with per-vertex scalar properties.
pub fn export_confidence(result: &SegmentationResult, path: &Path, format: ExportFormat) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    match format {
        ExportFormat::Csv => {
            writeln!(w, "x,y,z,label,confidence")?;
            for k in 0..result.n_points() {
                let p = result.positions[k];
                let label = result.labels[k].map_or(-1i64, |l| l as i64);
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    p[0], p[1], p[2], label, result.confidence[k] as f32
                )?;
            }
        }
        ExportFormat::Ply => {
            write!(
                w,
                "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
                 property float x\nproperty float y\nproperty float z\n\
                 property int label\nproperty float confidence\nend_header\n",
                result.n_points()
            )?;
            for k in 0..result.n_points() {
                let p = result.positions[k];
                for &c in &p {
                    w.write_all(&c.to_le_bytes())?;
                }
                let label: i32 = result.labels[k].map_or(-1, |l| l as i32);
                w.write_all(&label.to_le_bytes())?;
                w.write_all(&(result.confidence[k] as f32).to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fieldset::{FieldSample, Ray, Viewpoint};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Projector that passes features through unchanged.
    fn identity_projector(d: usize) -> ProjectorParams {
        let mut p = ProjectorParams::zeros(d, d, d, 0.0);
        for i in 0..d {
            p.res_w.set(i, i, 1.0);
        }
        p
    }

    fn bank_2d(beta: f64) -> PrototypeBank {
        let mut bank = PrototypeBank::new(2, 0, 2, 2, 0.5, beta).unwrap();
        bank.protos = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        bank
    }

    fn sample(pos: [f32; 3], sigma: f32, seg: Vec<f32>, gt: Option<u32>) -> FieldSample {
        FieldSample {
            position: pos,
            sigma,
            seg_feature: seg,
            query_feature: vec![0.0, 0.0],
            gt_label: gt,
        }
    }

    fn micro_fieldset(samples: Vec<FieldSample>, rays: Vec<Ray>, viewpoints: Vec<Viewpoint>) -> FieldSet {
        FieldSet {
            d_seg: 2,
            d_q: 2,
            samples,
            rays,
            viewpoints,
            seed: None,
            catalog: Default::default(),
        }
    }

    #[test]
    fn direct_mode_prototype_coincidence() {
        let fs = micro_fieldset(vec![sample([0.0; 3], 1.0, vec![1.0, 0.0], Some(0))], vec![], vec![]);
        let result = classify_points(&fs, &[0], &identity_projector(2), &bank_2d(0.05), ClassifyMode::Direct).unwrap();
        assert_eq!(result.labels[0], Some(0));
        assert!(result.confidence[0] > 0.99);
    }

    /// Feature on the unit circle whose distribution under beta and the
    /// axis-aligned prototypes is exactly [p, 1-p].
    fn feature_for(p: f64, beta: f64) -> Vec<f32> {
        // cos(theta) - sin(theta) = beta * ln(p / (1 - p)).
        let c = beta * (p / (1.0 - p)).ln();
        let theta = (c / 2f64.sqrt()).acos() - std::f64::consts::FRAC_PI_4;
        vec![theta.cos() as f32, theta.sin() as f32]
    }

    #[test]
    fn degenerate_ray_pixel_equals_sample_distribution() {
        let beta = 0.1;
        let fs = micro_fieldset(
            vec![sample([0.0, 0.0, 1.0], 1e9, feature_for(0.8, beta), Some(0))],
            vec![Ray {
                origin: [0.0; 3],
                direction: [0.0, 0.0, 1.0],
                samples: vec![0],
                deltas: vec![1.0],
            }],
            vec![Viewpoint {
                id: 0,
                position: [0.0; 3],
                forward: [0.0, 0.0, 1.0],
                ray_start: 0,
                ray_count: 1,
            }],
        );
        let direct =
            classify_points(&fs, &[0], &identity_projector(2), &bank_2d(beta), ClassifyMode::Direct).unwrap();
        let rendered = classify_points(
            &fs,
            &[0],
            &identity_projector(2),
            &bank_2d(beta),
            ClassifyMode::Render { match_radius: 0.5 },
        )
        .unwrap();
        for j in 0..2 {
            assert!((rendered.dist.get(0, j) - direct.dist.get(0, j)).abs() < 1e-12);
        }
        // The stored feature is f32, so the engineered 0.8 holds to ~1e-6.
        assert!((rendered.dist.get(0, 0) - 0.8).abs() < 1e-5);
    }

    /// Distribution a stored (f32) feature produces under the axis-aligned
    /// 2D bank, recomputed with independent arithmetic.
    fn oracle_dist(seg: &[f32], beta: f64) -> [f64; 2] {
        let f = [f64::from(seg[0]), f64::from(seg[1])];
        let n = (f[0] * f[0] + f[1] * f[1]).sqrt();
        let l0 = (f[0] / n / beta).exp();
        let l1 = (f[1] / n / beta).exp();
        [l0 / (l0 + l1), l1 / (l0 + l1)]
    }

    #[test]
    fn two_viewpoints_average_their_distributions() {
        let beta = 0.1;
        // Two opaque samples at the same location, seen by one ray each,
        // with per-pixel distributions [0.8, 0.2] and [0.6, 0.4].
        let fs = micro_fieldset(
            vec![
                sample([0.0, 0.0, 1.0], 1e9, feature_for(0.8, beta), Some(0)),
                sample([0.0, 0.0, 1.0], 1e9, feature_for(0.6, beta), Some(0)),
            ],
            vec![
                Ray {
                    origin: [0.0; 3],
                    direction: [0.0, 0.0, 1.0],
                    samples: vec![0],
                    deltas: vec![1.0],
                },
                Ray {
                    origin: [0.0, 0.0, 2.0],
                    direction: [0.0, 0.0, -1.0],
                    samples: vec![1],
                    deltas: vec![1.0],
                },
            ],
            vec![
                Viewpoint {
                    id: 0,
                    position: [0.0; 3],
                    forward: [0.0, 0.0, 1.0],
                    ray_start: 0,
                    ray_count: 1,
                },
                Viewpoint {
                    id: 1,
                    position: [0.0, 0.0, 2.0],
                    forward: [0.0, 0.0, -1.0],
                    ray_start: 1,
                    ray_count: 1,
                },
            ],
        );
        let result = classify_points(
            &fs,
            &[0],
            &identity_projector(2),
            &bank_2d(beta),
            ClassifyMode::Render { match_radius: 0.5 },
        )
        .unwrap();
        // Direct averaging of the two per-viewpoint pixel distributions.
        let d0 = oracle_dist(&fs.samples[0].seg_feature, beta);
        let d1 = oracle_dist(&fs.samples[1].seg_feature, beta);
        for j in 0..2 {
            let expect = 0.5 * (d0[j] + d1[j]);
            assert!((result.dist.get(0, j) - expect).abs() < 1e-12);
        }
        assert!((result.dist.get(0, 0) - 0.7).abs() < 1e-5);
        assert!((result.dist.get(0, 1) - 0.3).abs() < 1e-5);
    }

    #[test]
    fn uncovered_point_is_unlabeled_in_render_mode() {
        let beta = 0.1;
        let fs = micro_fieldset(
            vec![
                sample([0.0, 0.0, 1.0], 1e9, feature_for(0.8, beta), Some(0)),
                sample([50.0, 50.0, 50.0], 1e9, feature_for(0.6, beta), Some(1)),
            ],
            vec![Ray {
                origin: [0.0; 3],
                direction: [0.0, 0.0, 1.0],
                samples: vec![0],
                deltas: vec![1.0],
            }],
            vec![],
        );
        let result = classify_points(
            &fs,
            &[0, 1],
            &identity_projector(2),
            &bank_2d(beta),
            ClassifyMode::Render { match_radius: 0.5 },
        )
        .unwrap();
        assert!(result.labels[0].is_some());
        assert_eq!(result.labels[1], None);
        assert_eq!(result.confidence[1], 0.0);
    }

    fn result_from_labels(labels: &[Option<usize>], n_protos: usize, n_rel: usize) -> SegmentationResult {
        let n = labels.len();
        let mut dist = Matrix::zeros(n, n_protos);
        for (k, l) in labels.iter().enumerate() {
            if let Some(p) = l {
                dist.set(k, *p, 1.0);
            }
        }
        SegmentationResult {
            point_indices: (0..n).collect(),
            positions: vec![[0.0; 3]; n],
            dist,
            labels: labels.to_vec(),
            confidence: labels.iter().map(|l| if l.is_some() { 1.0 } else { 0.0 }).collect(),
            n_rel,
            matched_ids: vec![None; n_protos],
        }
    }

    #[test]
    fn hungarian_matching_identity_case() {
        let labels: Vec<Option<usize>> = vec![Some(0), Some(0), Some(1), Some(1), Some(2)];
        let gt: Vec<Option<u32>> = vec![Some(0), Some(0), Some(1), Some(1), Some(2)];
        let result = result_from_labels(&labels, 3, 3);
        let matched = match_hungarian(&result, &gt, 3, 0.0).unwrap();
        assert_eq!(matched, vec![Some(0), Some(1), Some(2)]);
    }

    #[test]
    fn clip_matching_merges_prototypes_on_one_class() {
        let labels: Vec<Option<usize>> = vec![Some(0), Some(1), Some(1), Some(2)];
        let mut result = result_from_labels(&labels, 3, 3);
        let mut bank = PrototypeBank::new(3, 0, 2, 2, 0.5, 0.5).unwrap();
        bank.clip_protos = Matrix::from_rows(&[
            vec![1.0, 0.1],  // nearest class 0
            vec![1.0, -0.1], // also nearest class 0
            vec![0.0, 1.0],  // nearest class 1
        ]);
        let catalog = ClassCatalog {
            classes: vec![
                crate::fieldset::CatalogClass {
                    id: 0,
                    name: "a".into(),
                    query_centroid: vec![1.0, 0.0],
                },
                crate::fieldset::CatalogClass {
                    id: 1,
                    name: "b".into(),
                    query_centroid: vec![0.0, 1.0],
                },
            ],
        };
        let matched = match_clip(&result, &bank, &catalog, 0.0).unwrap();
        assert_eq!(matched, vec![Some(0), Some(0), Some(1)]);
        result.matched_ids = matched;
        let gt: Vec<Option<u32>> = vec![Some(0), Some(0), Some(0), Some(1)];
        let (pred_masks, gt_masks) = build_eval_masks(&result, &gt, 2, 0.0);
        // Prototypes 0 and 1 merge into one mask for class 0.
        assert_eq!(pred_masks.len(), 2);
        let pq = panoptic_quality(&pred_masks, &gt_masks);
        assert!((pq.pq - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_clip_prototype_is_excluded_from_clip_matching() {
        let labels: Vec<Option<usize>> = vec![Some(0), Some(1)];
        let result = result_from_labels(&labels, 2, 2);
        let mut bank = PrototypeBank::new(2, 0, 2, 2, 0.5, 0.5).unwrap();
        bank.clip_protos = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let catalog = ClassCatalog {
            classes: vec![crate::fieldset::CatalogClass {
                id: 0,
                name: "a".into(),
                query_centroid: vec![1.0, 0.0],
            }],
        };
        let matched = match_clip(&result, &bank, &catalog, 0.0).unwrap();
        assert_eq!(matched, vec![Some(0), None]);
    }

    #[test]
    fn perfect_segmentation_has_unit_pq() {
        let pred = vec![
            (Some(0), vec![true, true, false, false]),
            (Some(1), vec![false, false, true, true]),
        ];
        let gt = vec![
            (0u32, vec![true, true, false, false]),
            (1u32, vec![false, false, true, true]),
        ];
        let r = panoptic_quality(&pred, &gt);
        assert_eq!((r.pq, r.sq, r.rq), (1.0, 1.0, 1.0));
        assert_eq!((r.tp, r.fp, r.fn_), (2, 0, 0));
    }

    #[test]
    fn no_overlap_above_half_gives_zero_pq() {
        let pred = vec![(Some(0), vec![true, false, false, false])];
        let gt = vec![(0u32, vec![false, true, true, true])];
        let r = panoptic_quality(&pred, &gt);
        assert_eq!(r.pq, 0.0);
        assert_eq!(r.tp, 0);
        assert_eq!(r.fp, 1);
        assert_eq!(r.fn_, 1);
    }

    #[test]
    fn pq_formula_case_with_extra_false_positive() {
        // Matched IoUs {0.8, 0.6}, one extra FP: SQ = 0.7, RQ = 2/2.5 = 0.8,
        // PQ = 0.56. Build masks over 20 points with exact IoUs: |gt| = 10,
        // |pred| = 10, overlap 8 -> IoU 8/12 ... instead use disjoint classes
        // where iou values are exact by construction.
        // Class 0: gt points 0..10, pred points 0..8 plus 2 outside -> inter 8,
        // union 12 -> 2/3. That is not 0.8, so craft directly:
        // IoU 0.8: inter 8, union 10 (pred 8..10 subset? pred=8 of gt=10 ->
        // inter 8, union 10 -> 0.8 with pred strictly inside gt).
        let mut gt0 = vec![false; 30];
        let mut pred0 = vec![false; 30];
        for i in 0..10 {
            gt0[i] = true;
        }
        for i in 0..8 {
            pred0[i] = true;
        }
        // IoU 0.6: inter 6, union 10.
        let mut gt1 = vec![false; 30];
        let mut pred1 = vec![false; 30];
        for i in 10..20 {
            gt1[i] = true;
        }
        for i in 10..16 {
            pred1[i] = true;
        }
        let mut fp_mask = vec![false; 30];
        fp_mask[25] = true;
        let pred = vec![(Some(0), pred0), (Some(1), pred1), (None, fp_mask)];
        let gt = vec![(0u32, gt0), (1u32, gt1)];
        let r = panoptic_quality(&pred, &gt);
        assert!((r.sq - 0.7).abs() < 1e-12);
        assert!((r.rq - 0.8).abs() < 1e-12);
        assert!((r.pq - 0.56).abs() < 1e-12);
        assert!((r.pq - r.sq * r.rq).abs() < 1e-15);
    }

    #[test]
    fn perfect_prediction_has_unit_metrics() {
        let pred: Vec<Option<u32>> = vec![Some(0), Some(0), Some(1), None];
        let gt = pred.clone();
        let (miou, macc, _) = segmentation_metrics(&pred, &gt, false);
        assert_eq!((miou, macc), (1.0, 1.0));
        let (miou_all, macc_all, table) = segmentation_metrics(&pred, &gt, true);
        assert_eq!((miou_all, macc_all), (1.0, 1.0));
        assert_eq!(table.len(), 3);
    }

    #[test]
    fn constant_predictor_on_balanced_classes() {
        let pred: Vec<Option<u32>> = vec![Some(0); 10];
        let mut gt: Vec<Option<u32>> = vec![Some(0); 5];
        gt.extend(vec![Some(1); 5]);
        let (miou, macc, _) = segmentation_metrics(&pred, &gt, false);
        assert!((macc - 0.5).abs() < 1e-12);
        assert!((miou - 0.25).abs() < 1e-12);
    }

    #[test]
    fn metrics_match_set_arithmetic_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        for _ in 0..50 {
            let n = rng.random_range(5..60);
            let c = rng.random_range(1..5u32);
            let pred: Vec<Option<u32>> = (0..n)
                .map(|_| {
                    if rng.random::<f64>() < 0.2 {
                        None
                    } else {
                        Some(rng.random_range(0..c))
                    }
                })
                .collect();
            let gt: Vec<Option<u32>> = (0..n)
                .map(|_| {
                    if rng.random::<f64>() < 0.2 {
                        None
                    } else {
                        Some(rng.random_range(0..c))
                    }
                })
                .collect();
            let (miou, macc, _) = segmentation_metrics(&pred, &gt, false);

            // Independent set-arithmetic recomputation.
            use std::collections::BTreeSet;
            let classes: BTreeSet<u32> = gt.iter().flatten().copied().collect();
            if classes.is_empty() {
                continue;
            }
            let mut iou_sum = 0.0;
            let mut acc_sum = 0.0;
            for &cl in &classes {
                let p_set: BTreeSet<usize> =
                    pred.iter().enumerate().filter(|(_, v)| **v == Some(cl)).map(|(i, _)| i).collect();
                let g_set: BTreeSet<usize> =
                    gt.iter().enumerate().filter(|(_, v)| **v == Some(cl)).map(|(i, _)| i).collect();
                let inter = p_set.intersection(&g_set).count() as f64;
                let union = p_set.union(&g_set).count() as f64;
                iou_sum += if union > 0.0 { inter / union } else { 0.0 };
                acc_sum += inter / g_set.len() as f64;
            }
            assert!((miou - iou_sum / classes.len() as f64).abs() < 1e-12);
            assert!((macc - acc_sum / classes.len() as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn relabeling_prototypes_leaves_hungarian_metrics_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let n = 80;
        let gt: Vec<Option<u32>> = (0..n).map(|_| Some(rng.random_range(0..3))).collect();
        let labels: Vec<Option<usize>> = gt
            .iter()
            .map(|g| {
                // Noisy copy of gt as prototype labels.
                let base = g.unwrap() as usize;
                if rng.random::<f64>() < 0.15 {
                    Some(rng.random_range(0..3))
                } else {
                    Some(base)
                }
            })
            .collect();
        let mut r1 = result_from_labels(&labels, 3, 3);
        r1.matched_ids = match_hungarian(&r1, &gt, 3, 0.0).unwrap();
        let report1 = evaluate(&r1, &gt, 3, 0.0).unwrap();

        // Permute prototype identities (0 -> 2, 1 -> 0, 2 -> 1).
        let perm = [2usize, 0, 1];
        let permuted: Vec<Option<usize>> = labels.iter().map(|l| l.map(|p| perm[p])).collect();
        let mut r2 = result_from_labels(&permuted, 3, 3);
        r2.matched_ids = match_hungarian(&r2, &gt, 3, 0.0).unwrap();
        let report2 = evaluate(&r2, &gt, 3, 0.0).unwrap();

        assert!((report1.pq - report2.pq).abs() < 1e-12);
        assert!((report1.miou_rel - report2.miou_rel).abs() < 1e-12);
        assert!((report1.macc_rel - report2.macc_rel).abs() < 1e-12);
    }

    #[test]
    fn csv_export_round_trips_at_f32() {
        let dir = tempfile::tempdir().unwrap();
        let labels: Vec<Option<usize>> = vec![Some(0), None, Some(1)];
        let mut result = result_from_labels(&labels, 2, 2);
        result.positions = vec![[1.25, -3.5, 0.1], [0.0, 0.0, 0.0], [9.75, 2.5, -1.0]];
        result.confidence = vec![0.987654321, 0.0, 0.5];
        let path = dir.path().join("conf.csv");
        export_confidence(&result, &path, ExportFormat::Csv).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "x,y,z,label,confidence");
        for (k, line) in lines.enumerate() {
            let parts: Vec<&str> = line.split(',').collect();
            for (j, part) in parts[..3].iter().enumerate() {
                assert_eq!(part.parse::<f32>().unwrap(), result.positions[k][j]);
            }
            assert_eq!(parts[3].parse::<i64>().unwrap(), result.labels[k].map_or(-1, |l| l as i64));
            assert_eq!(parts[4].parse::<f32>().unwrap(), result.confidence[k] as f32);
        }
    }

    #[test]
    fn uniform_distribution_confidence_is_one_over_n() {
        let fs = micro_fieldset(vec![sample([0.0; 3], 1.0, vec![0.0, 0.0], Some(0))], vec![], vec![]);
        // Zero feature -> cosines 0 -> uniform over 2 prototypes.
        let result =
            classify_points(&fs, &[0], &identity_projector(2), &bank_2d(0.5), ClassifyMode::Direct).unwrap();
        assert!((result.confidence[0] - 0.5).abs() < 1e-12);
    }
}
