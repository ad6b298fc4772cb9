//! Independent oracles shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use metalora::augment::Rect;
use metalora::metatrain::Stage1Trace;
use metalora::numerics::Matrix;

/// Central finite differences of a scalar function with respect to every entry of `at`.
pub fn fd_gradient(at: &Matrix, h: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let mut g = Matrix::zeros(at.rows(), at.cols());
    let mut probe = at.clone();
    for i in 0..at.rows() {
        for j in 0..at.cols() {
            let v = at.get(i, j);
            probe.set(i, j, v + h);
            let up = f(&probe);
            probe.set(i, j, v - h);
            let down = f(&probe);
            probe.set(i, j, v);
            g.set(i, j, (up - down) / (2.0 * h));
        }
    }
    g
}

/// ‖a − b‖ / max(‖a‖, ‖b‖), zero when both vanish.
pub fn rel_error(a: &Matrix, b: &Matrix) -> f64 {
    let num: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den = a.frobenius().max(b.frobenius());
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Σ g ⊙ h: a scalar whose gradient with respect to `h` is `g`.
pub fn contract(g: &Matrix, h: &Matrix) -> f64 {
    g.data().iter().zip(h.data()).map(|(a, b)| a * b).sum()
}

/// Numerical rank from an SVD with the usual `max(m, n) · ε · σ_max` cutoff.
pub fn numerical_rank(m: &Matrix) -> usize {
    let dm = nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.data());
    let sv = dm.singular_values();
    let smax = sv.iter().copied().fold(0.0f64, f64::max);
    if smax == 0.0 {
        return 0;
    }
    let tol = m.rows().max(m.cols()) as f64 * f64::EPSILON * smax;
    sv.iter().filter(|s| **s > tol).count()
}

pub const ASPECTS: [(u32, u32); 5] = [(16, 9), (4, 3), (1, 1), (3, 4), (9, 16)];
pub const MULTIPLIERS: [f64; 5] = [1.5, 2.0, 2.5, 3.5, 4.5];

/// Crop plan by exhaustive search: every short side and every placement is tried.
pub fn brute_force_plan(width: u32, height: u32, face: Rect) -> Vec<((u32, u32), f64, Rect)> {
    let f_long = face.w.max(face.h);
    let dims = |(aw, ah): (u32, u32), s: u32| -> (u32, u32) {
        if aw >= ah {
            ((s as f64 * aw as f64 / ah as f64).round() as u32, s)
        } else {
            (s, (s as f64 * ah as f64 / aw as f64).round() as u32)
        }
    };
    let best_offset = |face_start: u32, face_len: u32, len: u32, extent: u32| -> u32 {
        let target = 2 * face_start as i64 + face_len as i64;
        (0..=extent - len)
            .min_by_key(|x| ((2 * *x as i64 + len as i64 - target).abs(), *x))
            .expect("non-empty range")
    };
    let mut out: Vec<((u32, u32), f64, Rect)> = Vec::new();
    for aspect in ASPECTS {
        for m in MULTIPLIERS {
            let requested = (m * f_long as f64).round() as u32;
            let feasible: Vec<u32> = (1..=width.max(height))
                .filter(|s| {
                    let (w, h) = dims(aspect, *s);
                    w >= 1 && h >= 1 && w <= width && h <= height
                })
                .collect();
            let chosen = feasible
                .iter()
                .copied()
                .filter(|s| *s <= requested)
                .max()
                .or_else(|| feasible.iter().copied().filter(|s| *s > requested).min());
            let Some(s) = chosen else { continue };
            let (w, h) = dims(aspect, s);
            let rect = Rect {
                x: best_offset(face.x, face.w, w, width),
                y: best_offset(face.y, face.h, h, height),
                w,
                h,
            };
            if !out.iter().any(|(_, _, r)| *r == rect) {
                out.push((aspect, m, rect));
            }
        }
    }
    out
}

/// Nested-loop similarity score: identities and prompts in sorted order, tests in
/// listed order with the reference dropped.
pub struct FaceSimFixture {
    pub vectors: BTreeMap<String, Vec<f64>>,
    /// identity -> (reference key, test keys)
    pub identities: BTreeMap<String, (String, Vec<String>)>,
    pub prompts: Vec<String>,
}

pub fn brute_cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for k in 0..a.len() {
        dot += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
    }
    dot / (na * nb).sqrt()
}

pub fn brute_force_facesim(fx: &FaceSimFixture, robust: bool) -> f64 {
    let mut prompts = fx.prompts.clone();
    prompts.sort();
    let mut total = 0.0;
    let mut count = 0usize;
    for (id, (reference, tests)) in &fx.identities {
        for p in &prompts {
            let g = &fx.vectors[&format!("gen/{id}/{p}")];
            let targets: Vec<&String> = if robust {
                tests.iter().filter(|t| *t != reference).collect()
            } else {
                vec![reference]
            };
            let mut s = 0.0;
            for t in &targets {
                s += brute_cosine(g, &fx.vectors[*t]);
            }
            total += s / targets.len() as f64;
            count += 1;
        }
    }
    100.0 * total / count as f64
}

/// Re-checks the stage-1 contracts straight from the trace records, without the
/// library's own audit:
/// - meta-down checksums equal their entry value for every step before warm-up ends,
/// - they differ from it at least once afterwards,
/// - identities absent from a batch keep their factor checksums across that step,
/// - each identity's factors at re-entry match their values at its last step.
pub fn check_stage1_trace(trace: &Stage1Trace) -> Vec<String> {
    let mut problems = Vec::new();
    let mut prev = trace.initial_identity_checksums.clone();
    for e in &trace.entries {
        let recs: Vec<_> = trace.records.iter().filter(|r| r.entry == e.entry).collect();
        let mut changed_after = false;
        for r in &recs {
            if r.iter_in_bucket < e.warm_up {
                if r.meta_down_checksum != e.meta_down_checksum_at_entry {
                    problems.push(format!(
                        "entry {} step {}: meta-down moved during warm-up",
                        e.entry, r.iter_in_bucket
                    ));
                }
                if r.mask.meta_down {
                    problems.push(format!("entry {} step {}: gate open during warm-up", e.entry, r.iter_in_bucket));
                }
            } else if r.meta_down_checksum != e.meta_down_checksum_at_entry {
                changed_after = true;
            }
            let present: BTreeSet<_> = r.batch_identities.iter().collect();
            for (id, c) in &r.identity_checksums {
                if !present.contains(id) && prev.get(id) != Some(c) {
                    problems.push(format!("iteration {}: absent identity {id} changed", r.iteration));
                }
            }
            if !r.identity_checksums.is_empty() {
                prev = r.identity_checksums.clone();
            }
        }
        if e.warm_up < recs.len() && !changed_after {
            problems.push(format!("entry {}: meta-down never moved after warm-up", e.entry));
        }
    }
    if trace.executed_iterations < trace.q_total {
        problems.push(format!("ran {} of {} iterations", trace.executed_iterations, trace.q_total));
    }
    let max_bucket = trace.buckets.iter().map(|b| b.schedule.q_bucket).max().unwrap_or(0);
    if trace.executed_iterations >= trace.q_total + max_bucket {
        problems.push(format!("overshoot of {} iterations", trace.executed_iterations - trace.q_total));
    }
    problems
}

pub struct DeskRun {
    pub model: metalora::toymodel::ToyDenoiser,
    pub dataset: metalora::toymodel::ToyIdentityDataset,
    pub train: metalora::toymodel::ToyIdentityDataset,
    pub heldout: Vec<metalora::toymodel::IdentityId>,
}

/// Desk-scale dataset, 16/4 split and pretrained frozen base for one seed.
pub fn desk_base(seed: u64) -> DeskRun {
    use metalora::experiment::split_identities;
    use metalora::numerics::Rng;
    use metalora::toymodel::*;
    let dataset = ToyIdentityDataset::generate(DatasetConfig { seed, ..DatasetConfig::default() }).unwrap();
    let (train_ids, heldout) = split_identities(&dataset, 4, &mut Rng::new(seed)).unwrap();
    let train = dataset.subset(&train_ids);
    let pre = pretrain_base(
        &train,
        ModelDims::default(),
        DiffusionSchedule::default(),
        &PretrainConfig { seed, ..PretrainConfig::default() },
    )
    .unwrap();
    DeskRun { model: pre.model, dataset, train, heldout }
}
