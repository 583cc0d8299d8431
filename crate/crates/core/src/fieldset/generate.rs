//! Synthetic scene generator: class blobs with separated feature centroids,
//! free-space clutter, and optional ray/viewpoint structure. Used as the
//! ground-truth oracle for the end-to-end tests.

use super::{CatalogClass, ClassCatalog, FieldSample, FieldSet, Ray, Viewpoint};
use crate::math::{self, normalize};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Declarative description of a synthetic scene.
///
/// Centroids may be given explicitly (they are then validated against
/// `margin`) or omitted, in which case unit vectors are drawn until every
/// pair satisfies the separation requirement `1 - cos >= margin`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub classes: usize,
    pub d_seg: usize,
    pub d_q: usize,
    pub samples_per_class: usize,
    pub free_space_samples: usize,
    /// Std-dev of the Gaussian perturbation added to centroids before
    /// re-normalization.
    pub noise: f64,
    /// Minimum pairwise cosine separation `1 - cos` between class centroids.
    pub margin: f64,
    pub blob_radius: f64,
    pub scene_extent: f64,
    pub in_blob_sigma: f64,
    pub free_sigma: f64,
    /// Number of posed viewpoints; 0 disables ray generation.
    pub viewpoints: usize,
    pub samples_per_ray: usize,
    pub seed: u64,
    pub seg_centroids: Option<Vec<Vec<f64>>>,
    pub query_centroids: Option<Vec<Vec<f64>>>,
    pub class_names: Option<Vec<String>>,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            classes: 6,
            d_seg: 32,
            d_q: 32,
            samples_per_class: 400,
            free_space_samples: 400,
            noise: 0.05,
            margin: 0.5,
            blob_radius: 1.0,
            scene_extent: 10.0,
            in_blob_sigma: 5.0,
            free_sigma: 0.01,
            viewpoints: 0,
            samples_per_ray: 8,
            seed: 0,
            seg_centroids: None,
            query_centroids: None,
            class_names: None,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::Validation("generator needs at least one class".into()));
        }
        if self.d_seg == 0 || self.d_q == 0 {
            return Err(Error::Validation("feature dimensions must be positive".into()));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Validation("samples_per_class must be positive".into()));
        }
        if !(0.0..=2.0).contains(&self.margin) {
            return Err(Error::Validation("margin must lie in [0, 2]".into()));
        }
        if self.noise < 0.0 {
            return Err(Error::Validation("noise must be non-negative".into()));
        }
        if self.blob_radius <= 0.0 || self.scene_extent <= 0.0 {
            return Err(Error::Validation("blob_radius and scene_extent must be positive".into()));
        }
        if self.in_blob_sigma <= 0.0 || self.free_sigma < 0.0 {
            return Err(Error::Validation("sigma levels must be non-negative".into()));
        }
        if self.viewpoints > 0 && self.samples_per_ray == 0 {
            return Err(Error::Validation("samples_per_ray must be positive".into()));
        }
        for (name, c) in [("seg", &self.seg_centroids), ("query", &self.query_centroids)] {
            if let Some(c) = c {
                let dim = if name == "seg" { self.d_seg } else { self.d_q };
                if c.len() != self.classes {
                    return Err(Error::Validation(format!(
                        "{name}_centroids must list one centroid per class"
                    )));
                }
                if c.iter().any(|v| v.len() != dim) {
                    return Err(Error::Validation(format!(
                        "{name}_centroids entries must have dimension {dim}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Standard normal draw via Box-Muller.
pub(crate) fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn gaussian_vec(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim).map(|_| standard_normal(rng)).collect()
}

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v = gaussian_vec(dim, rng);
    normalize(&mut v);
    v
}

fn check_separation(centroids: &[Vec<f64>], margin: f64) -> Result<()> {
    for i in 0..centroids.len() {
        for j in (i + 1)..centroids.len() {
            let sep = 1.0 - math::cosine(&centroids[i], &centroids[j]);
            if sep < margin {
                return Err(Error::Validation(format!(
                    "centroids {i} and {j} have cosine separation {sep:.4} below margin {margin}"
                )));
            }
        }
    }
    Ok(())
}

/// Draw unit centroids until all pairs satisfy the margin.
fn draw_centroids(count: usize, dim: usize, margin: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    'attempt: for _ in 0..1000 {
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
        for _ in 0..count {
            let mut tries = 0;
            loop {
                let c = random_unit(dim, rng);
                if out.iter().all(|o| 1.0 - math::cosine(o, &c) >= margin) {
                    out.push(c);
                    break;
                }
                tries += 1;
                if tries > 200 {
                    continue 'attempt;
                }
            }
        }
        return Ok(out);
    }
    Err(Error::Validation(format!(
        "could not draw {count} centroids of dimension {dim} with separation margin {margin}"
    )))
}

fn unit_f64(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    normalize(&mut u);
    u
}

/// Seeded set of mutually orthonormal unit vectors (Gram-Schmidt over
/// Gaussian draws). Panics if `count > dim`.
pub fn orthonormal_centroids(count: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    assert!(count <= dim, "cannot fit {count} orthonormal vectors in dimension {dim}");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian_vec(dim, &mut rng);
        for b in &basis {
            let proj = math::dot(&v, b);
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= proj * bi;
            }
        }
        if math::norm(&v) < 1e-6 {
            continue;
        }
        normalize(&mut v);
        basis.push(v);
    }
    basis
}

/// Seeded unit centroids with pairwise cosine exactly `rho`: a shared
/// component plus per-class orthonormal remainders. Useful for scenes that
/// imitate dense-encoder statistics, where cross-class cosines sit near the
/// pairing threshold instead of near zero.
pub fn equicorrelated_centroids(count: usize, dim: usize, rho: f64, seed: u64) -> Vec<Vec<f64>> {
    assert!((0.0..1.0).contains(&rho), "rho must lie in [0, 1)");
    assert!(count < dim, "need dimension > count for the construction");
    let basis = orthonormal_centroids(count + 1, dim, seed);
    let shared = &basis[0];
    let (s, r) = (rho.sqrt(), (1.0 - rho).sqrt());
    basis[1..]
        .iter()
        .map(|e| shared.iter().zip(e).map(|(&u, &ei)| s * u + r * ei).collect())
        .collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn noisy_feature(centroid: &[f64], noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if noise == 0.0 {
        return centroid.to_vec();
    }
    let mut v: Vec<f64> = centroid
        .iter()
        .map(|&c| c + noise * standard_normal(rng))
        .collect();
    normalize(&mut v);
    v
}

fn uniform_in_ball(radius: f64, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let mut dir = gaussian_vec(3, rng);
    normalize(&mut dir);
    let r = radius * rng.random_range(0.0..1.0f64).cbrt();
    [dir[0] * r, dir[1] * r, dir[2] * r]
}

/// Place blob centers inside the scene box with pairwise distance
/// of at least three radii.
fn place_blob_centers(spec: &GeneratorSpec, rng: &mut ChaCha8Rng) -> Result<Vec<[f64; 3]>> {
    let lo = 0.15 * spec.scene_extent;
    let hi = 0.85 * spec.scene_extent;
    let min_dist = 3.0 * spec.blob_radius;
    let mut centers: Vec<[f64; 3]> = Vec::with_capacity(spec.classes);
    let mut tries = 0;
    while centers.len() < spec.classes {
        let c = [
            rng.random_range(lo..hi),
            rng.random_range(lo..hi),
            rng.random_range(lo..hi),
        ];
        let ok = centers.iter().all(|o| {
            let d2 = (o[0] - c[0]).powi(2) + (o[1] - c[1]).powi(2) + (o[2] - c[2]).powi(2);
            d2 >= min_dist * min_dist
        });
        if ok {
            centers.push(c);
        }
        tries += 1;
        if tries > 100_000 {
            return Err(Error::Validation(
                "scene too small to place class blobs; increase scene_extent or shrink blob_radius".into(),
            ));
        }
    }
    Ok(centers)
}

/// Build a deterministic synthetic [`FieldSet`] from a [`GeneratorSpec`].
///
/// Samples are laid out class by class, free-space clutter last. In-blob
/// samples carry `gt_label`, high sigma and unit-normalized
/// `centroid + noise` features; free-space samples carry random features and
/// near-zero sigma.
pub fn generate_synthetic_scene(spec: &GeneratorSpec) -> Result<FieldSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let seg_centroids: Vec<Vec<f64>> = match &spec.seg_centroids {
        Some(c) => {
            let c: Vec<Vec<f64>> = c.iter().map(|v| unit_f64(v)).collect();
            check_separation(&c, spec.margin)?;
            c
        }
        None => draw_centroids(spec.classes, spec.d_seg, spec.margin, &mut rng)?,
    };
    let query_centroids: Vec<Vec<f64>> = match &spec.query_centroids {
        Some(c) => {
            let c: Vec<Vec<f64>> = c.iter().map(|v| unit_f64(v)).collect();
            check_separation(&c, spec.margin)?;
            c
        }
        None => draw_centroids(spec.classes, spec.d_q, spec.margin, &mut rng)?,
    };

    let centers = place_blob_centers(spec, &mut rng)?;

    let mut samples = Vec::with_capacity(spec.classes * spec.samples_per_class + spec.free_space_samples);
    for class in 0..spec.classes {
        for _ in 0..spec.samples_per_class {
            let offset = uniform_in_ball(spec.blob_radius, &mut rng);
            let c = centers[class];
            let seg = noisy_feature(&seg_centroids[class], spec.noise, &mut rng);
            let query = noisy_feature(&query_centroids[class], spec.noise, &mut rng);
            samples.push(FieldSample {
                position: [
                    (c[0] + offset[0]) as f32,
                    (c[1] + offset[1]) as f32,
                    (c[2] + offset[2]) as f32,
                ],
                sigma: spec.in_blob_sigma as f32,
                seg_feature: to_f32(&seg),
                query_feature: to_f32(&query),
                gt_label: Some(class as u32),
            });
        }
    }
    for _ in 0..spec.free_space_samples {
        // Keep clutter out of the blobs; give up after a few rejections.
        let mut pos = [0.0f64; 3];
        for _ in 0..20 {
            pos = [
                rng.random_range(0.0..spec.scene_extent),
                rng.random_range(0.0..spec.scene_extent),
                rng.random_range(0.0..spec.scene_extent),
            ];
            let clear = centers.iter().all(|c| {
                let d2 = (c[0] - pos[0]).powi(2) + (c[1] - pos[1]).powi(2) + (c[2] - pos[2]).powi(2);
                d2 > spec.blob_radius * spec.blob_radius
            });
            if clear {
                break;
            }
        }
        samples.push(FieldSample {
            position: [pos[0] as f32, pos[1] as f32, pos[2] as f32],
            sigma: spec.free_sigma as f32,
            seg_feature: to_f32(&random_unit(spec.d_seg, &mut rng)),
            query_feature: to_f32(&random_unit(spec.d_q, &mut rng)),
            gt_label: None,
        });
    }

    let (rays, viewpoints) = if spec.viewpoints > 0 {
        build_rays(spec, &centers, &samples, &mut rng)
    } else {
        (Vec::new(), Vec::new())
    };

    let catalog = ClassCatalog {
        classes: (0..spec.classes)
            .map(|c| CatalogClass {
                id: c as u32,
                name: spec
                    .class_names
                    .as_ref()
                    .and_then(|n| n.get(c).cloned())
                    .unwrap_or_else(|| format!("class_{c}")),
                query_centroid: to_f32(&query_centroids[c]),
            })
            .collect(),
    };

    let fieldset = FieldSet {
        d_seg: spec.d_seg,
        d_q: spec.d_q,
        samples,
        rays,
        viewpoints,
        seed: Some(spec.seed),
        catalog,
    };
    fieldset.validate()?;
    Ok(fieldset)
}

/// Group blob samples into depth-ordered rays from each viewpoint. Each
/// viewpoint sees every blob; a free-space sample is prepended to each ray
/// (when available) so transmittance paths start in empty space.
fn build_rays(
    spec: &GeneratorSpec,
    centers: &[[f64; 3]],
    samples: &[FieldSample],
    rng: &mut ChaCha8Rng,
) -> (Vec<Ray>, Vec<Viewpoint>) {
    let scene_mid = spec.scene_extent * 0.5;
    let cam_radius = spec.scene_extent * 1.5;
    let n_blob = spec.classes * spec.samples_per_class;
    let free_range = n_blob..samples.len();

    let mut rays = Vec::new();
    let mut viewpoints = Vec::new();
    let mut free_cursor = free_range.start;

    for vp_id in 0..spec.viewpoints {
        let dir = random_unit(3, rng);
        let origin = [
            scene_mid + cam_radius * dir[0],
            scene_mid + cam_radius * dir[1],
            scene_mid + cam_radius * dir[2],
        ];
        let mut fwd = [scene_mid - origin[0], scene_mid - origin[1], scene_mid - origin[2]];
        normalize(&mut fwd);
        let ray_start = rays.len() as u64;

        for (class, _center) in centers.iter().enumerate() {
            let class_start = class * spec.samples_per_class;
            let mut order: Vec<u32> = (class_start..class_start + spec.samples_per_class)
                .map(|i| i as u32)
                .collect();
            // Shuffle so rays from different viewpoints group samples differently.
            for i in (1..order.len()).rev() {
                let j = rng.random_range(0..=i);
                order.swap(i, j);
            }
            for chunk in order.chunks(spec.samples_per_ray) {
                let mut members: Vec<u32> = chunk.to_vec();
                if free_range.len() > 0 {
                    members.push(free_cursor as u32);
                    free_cursor = free_range.start + (free_cursor + 1 - free_range.start) % free_range.len();
                }
                // Aim at the chunk's first member so ray lines fan across
                // the blob the way camera pixels would.
                let aim = samples[chunk[0] as usize].position.map(f64::from);
                let mut rdir = [aim[0] - origin[0], aim[1] - origin[1], aim[2] - origin[2]];
                normalize(&mut rdir);
                // Depth-sort along the ray direction and drop near-duplicates.
                let mut with_depth: Vec<(f64, u32)> = members
                    .iter()
                    .map(|&i| {
                        let p = samples[i as usize].position.map(f64::from);
                        let t = (p[0] - origin[0]) * rdir[0]
                            + (p[1] - origin[1]) * rdir[1]
                            + (p[2] - origin[2]) * rdir[2];
                        (t, i)
                    })
                    .collect();
                with_depth.sort_by(|a, b| a.0.total_cmp(&b.0));
                let mut kept: Vec<(f64, u32)> = Vec::with_capacity(with_depth.len());
                for (t, i) in with_depth {
                    if kept.last().map_or(true, |&(lt, _)| t - lt > 1e-4) {
                        kept.push((t, i));
                    }
                }
                if kept.is_empty() {
                    continue;
                }
                let mut deltas = Vec::with_capacity(kept.len());
                for w in kept.windows(2) {
                    deltas.push((w[1].0 - w[0].0) as f32);
                }
                let trailing = deltas.last().copied().unwrap_or(spec.blob_radius as f32);
                deltas.push(trailing);
                rays.push(Ray {
                    origin: [origin[0] as f32, origin[1] as f32, origin[2] as f32],
                    direction: [rdir[0] as f32, rdir[1] as f32, rdir[2] as f32],
                    samples: kept.into_iter().map(|(_, i)| i).collect(),
                    deltas,
                });
            }
        }
        viewpoints.push(Viewpoint {
            id: vp_id as u32,
            position: [origin[0] as f32, origin[1] as f32, origin[2] as f32],
            forward: [fwd[0] as f32, fwd[1] as f32, fwd[2] as f32],
            ray_start,
            ray_count: rays.len() as u64 - ray_start,
        });
    }
    (rays, viewpoints)
}
