mod common;

use std::collections::BTreeMap;

use common::{brute_force_facesim, FaceSimFixture};
use metalora::eval::*;
use proptest::prelude::*;

/// Integer vectors of norm 5 so every cosine is an exact multiple of 1/25.
const NORM5: [[f64; 3]; 8] = [
    [5., 0., 0.],
    [0., 5., 0.],
    [0., 0., 5.],
    [3., 4., 0.],
    [4., 0., 3.],
    [0., 3., 4.],
    [-3., 0., 4.],
    [0., -4., 3.],
];

fn build(picks: &[usize], tests_per_id: usize, prompts: usize) -> (FaceSimFixture, EvalManifest) {
    let mut it = picks.iter().cycle();
    let mut next = || NORM5[*it.next().unwrap() % NORM5.len()].to_vec();
    let mut vectors = BTreeMap::new();
    let mut identities = BTreeMap::new();
    let prompt_names: Vec<String> = (0..prompts).map(|p| format!("p{}", prompts - p)).collect();
    let mut manifest = EvalManifest { identities: Vec::new(), prompts: prompt_names.clone() };
    for id in ["zed", "amy", "kim"] {
        let reference = format!("{id}/ref");
        vectors.insert(reference.clone(), next());
        let mut tests = Vec::new();
        for t in 0..tests_per_id {
            let k = format!("{id}/t{t}");
            vectors.insert(k.clone(), next());
            tests.push(k);
        }
        // the reference also appears in the listed tests and must be skipped
        tests.insert(tests_per_id / 2, reference.clone());
        for p in &prompt_names {
            vectors.insert(generated_key(id, p), next());
        }
        identities.insert(id.to_string(), (reference.clone(), tests.clone()));
        manifest.identities.push(ManifestIdentity { id: id.into(), reference, tests });
    }
    (FaceSimFixture { vectors, identities, prompts: prompt_names }, manifest)
}

fn embedder(fx: &FaceSimFixture) -> PrecomputedEmbedder {
    PrecomputedEmbedder { provider: "fixture".into(), table: fx.vectors.clone() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scores_match_nested_loops(picks in prop::collection::vec(0usize..8, 1..40), tests in 1usize..5, prompts in 1usize..4) {
        let (fx, manifest) = build(&picks, tests, prompts);
        let emb = embedder(&fx);
        let mut gen = PrecomputedGenerator { available: emb.keys() };
        let report = evaluate(&manifest, &mut gen, &emb, None).unwrap();
        prop_assert_eq!(report.r_facesim.score, brute_force_facesim(&fx, true));
        prop_assert_eq!(report.facesim.score, brute_force_facesim(&fx, false));
        prop_assert!((-100.0..=100.0).contains(&report.r_facesim.score));
        prop_assert_eq!(report.r_facesim.evaluated, 3 * prompts);
    }
}

#[test]
fn reference_never_counts_towards_robust_score() {
    let (fx, manifest) = build(&[0, 3, 4, 5, 1, 2, 6, 7], 2, 2);
    let emb = embedder(&fx);
    let gen = PrecomputedGenerator { available: emb.keys() };
    let base = r_facesim(&manifest, &mut gen.clone(), &emb).unwrap().score;
    for id in ["zed", "amy", "kim"] {
        let key = format!("{id}/ref");
        let mut moved = emb.clone();
        let flipped: Vec<f64> = emb.table[&key].iter().map(|v| -v).collect();
        moved.table.insert(key, flipped);
        assert_eq!(r_facesim(&manifest, &mut gen.clone(), &moved).unwrap().score, base);
        // the conventional score reads the reference, so those cells change sign
        let before = facesim_conventional(&manifest, &mut gen.clone(), &emb).unwrap();
        let after = facesim_conventional(&manifest, &mut gen.clone(), &moved).unwrap();
        for (p, v) in &before.table[id] {
            assert_eq!(after.table[id][p], -v);
        }
    }
}

#[test]
fn copying_the_reference_inflates_only_conventional_facesim() {
    let (fx, manifest) = build(&[0, 3, 4, 5, 1], 3, 2);
    let emb = embedder(&fx);
    let report = evaluate(&manifest, &mut CopyReferenceGenerator, &emb, None).unwrap();
    assert_eq!(report.facesim.score, 100.0);
    assert!(report.r_facesim.score < 100.0);
    assert!(report.discrepancy_pct.unwrap() < 0.0);
}

#[test]
fn identity_with_only_its_reference_is_rejected() {
    let m = EvalManifest {
        identities: vec![ManifestIdentity { id: "a".into(), reference: "a/r".into(), tests: vec!["a/r".into()] }],
        prompts: vec!["p".into()],
    };
    assert!(m.validate().is_err());
}

#[test]
fn discrepancy_rows() {
    assert_eq!(discrepancy_report(80.17, 71.33).unwrap(), -11.0);
    assert_eq!(discrepancy_report(84.76, 75.72).unwrap(), -10.7);
    assert!(discrepancy_report(0.0, 50.0).is_err());
}

#[test]
fn manifest_and_embeddings_load_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let (fx, manifest) = build(&[0, 3, 4, 5], 2, 1);
    let mpath = dir.path().join("manifest.json");
    std::fs::write(&mpath, serde_json::to_vec(&manifest).unwrap()).unwrap();
    let epath = dir.path().join("emb.jsonl");
    let lines: String = fx
        .vectors
        .iter()
        .map(|(k, v)| format!("{}\n", serde_json::json!({"id": k, "vector": v})))
        .collect();
    std::fs::write(&epath, lines).unwrap();
    let m = EvalManifest::load(&mpath).unwrap();
    let e = PrecomputedEmbedder::load(&epath, "fixture").unwrap();
    assert_eq!(m, manifest);
    assert_eq!(e.table, fx.vectors);
}
