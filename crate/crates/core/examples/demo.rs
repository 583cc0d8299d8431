//! Minimal library walkthrough: generate a synthetic scene, train a guided
//! run whose query covers two classes, and print the evaluation report.
//!
//! Run with: cargo run -p disco3d --example demo --release

use disco3d::eval::{classify_points, evaluate, match_hungarian, ClassifyMode, DEFAULT_MIN_SHARE};
use disco3d::fieldset::{generate_synthetic_scene, GeneratorSpec};
use disco3d::guidance::Query;
use disco3d::trainer::{run, RunConfig};
use disco3d::QuerySet;

fn main() -> disco3d::Result<()> {
    let fieldset = generate_synthetic_scene(&GeneratorSpec {
        classes: 5,
        samples_per_class: 400,
        free_space_samples: 300,
        noise: 0.05,
        seed: 7,
        ..Default::default()
    })?;
    println!(
        "scene: {} samples, {} classes",
        fieldset.samples.len(),
        fieldset.catalog.len()
    );

    // Query for classes 0 and 1 via the mean of their catalog centroids,
    // asking for up to three sub-concepts.
    let mut embedding = vec![0.0f64; fieldset.d_q];
    for class in [0usize, 1] {
        for (e, &c) in embedding.iter_mut().zip(&fieldset.catalog.classes[class].query_centroid) {
            *e += f64::from(c) / 2.0;
        }
    }
    let queryset = QuerySet {
        queries: vec![Query {
            embedding,
            tau: 0.45,
            relevant_indices: vec![0, 1, 2],
        }],
    };

    let config = RunConfig {
        n_rel: 3,
        n_irr: 3,
        seed: 7,
        ..Default::default()
    };
    let output = run(&fieldset, &queryset, &config)?;
    let last = output.telemetry.last().unwrap();
    println!(
        "trained {} epochs, final loss {:.4} ({} relevant prototypes in use)",
        output.telemetry.len(),
        last.total,
        last.used_prototypes
    );

    // Evaluate the two queried classes against ground truth.
    let points: Vec<usize> = (0..fieldset.samples.len())
        .filter(|&i| fieldset.samples[i].gt_label.is_some())
        .collect();
    let gt: Vec<Option<u32>> = points
        .iter()
        .map(|&i| fieldset.samples[i].gt_label.filter(|&c| c < 2))
        .collect();
    let mut result = classify_points(&fieldset, &points, &output.params, &output.bank, ClassifyMode::Direct)?;
    result.matched_ids = match_hungarian(&result, &gt, 2, DEFAULT_MIN_SHARE)?;
    let report = evaluate(&result, &gt, 2, DEFAULT_MIN_SHARE)?;
    println!(
        "PQ {:.3} (SQ {:.3} x RQ {:.3}), mIoU {:.3}, mAcc {:.3}",
        report.pq, report.sq, report.rq, report.miou_rel, report.macc_rel
    );
    Ok(())
}
