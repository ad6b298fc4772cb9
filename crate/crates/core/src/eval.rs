//! Identity-similarity and prompt-adherence metrics over pluggable embedding providers.
//!
//! Generators and embedders talk in item keys: a generator turns (identity, prompt) into
//! the key of a produced artifact, and an embedder maps any key (reference, test or
//! generated) to a vector. This keeps real providers swappable via files of vectors.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::adapter::AdapterFactors;
use crate::numerics::{gaussian, Matrix, Rng};
use crate::toymodel::{sample_latent, BoundDenoiser, IdentityId, ToyDenoiser};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub id: String,
    #[serde(default)]
    pub provider: String,
    pub vector: Vec<f64>,
}

impl Embedding {
    pub fn new(id: impl Into<String>, provider: impl Into<String>, vector: Vec<f64>) -> Result<Self> {
        let id = id.into();
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("embedding {id:?}"),
            });
        }
        Ok(Embedding {
            id,
            provider: provider.into(),
            vector,
        })
    }
}

/// Cosine similarity, clamped into [-1, 1] against rounding.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Eval(format!(
            "embedding dimensions differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na2: f64 = a.iter().map(|x| x * x).sum();
    let nb2: f64 = b.iter().map(|x| x * x).sum();
    if na2 == 0.0 || nb2 == 0.0 {
        return Err(Error::Eval("cosine of a zero-norm embedding".into()));
    }
    // one square root keeps identical inputs at exactly 1
    Ok((dot / (na2 * nb2).sqrt()).clamp(-1.0, 1.0))
}

/// 100 × cosine between a prompt embedding and an image embedding from one joint space.
pub fn prompt_adherence(prompt: &Embedding, image: &Embedding) -> Result<f64> {
    if prompt.provider != image.provider {
        return Err(Error::Eval(format!(
            "prompt and image embeddings come from different providers ({:?} vs {:?})",
            prompt.provider, image.provider
        )));
    }
    Ok(100.0 * cosine(&prompt.vector, &image.vector)?)
}

/// Relative difference in percent, rounded to one decimal.
pub fn discrepancy_report(facesim: f64, r_facesim: f64) -> Result<f64> {
    if !(facesim > 0.0) || !r_facesim.is_finite() {
        return Err(Error::Eval(format!(
            "discrepancy needs a positive FaceSim, got {facesim}"
        )));
    }
    let pct = 100.0 * (r_facesim - facesim) / facesim;
    Ok((pct * 10.0).round() / 10.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestIdentity {
    pub id: String,
    pub reference: String,
    pub tests: Vec<String>,
}

impl ManifestIdentity {
    /// Test items with the reference removed.
    pub fn test_set(&self) -> Vec<&str> {
        self.tests
            .iter()
            .filter(|t| **t != self.reference)
            .map(String::as_str)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalManifest {
    pub identities: Vec<ManifestIdentity>,
    pub prompts: Vec<String>,
}

impl EvalManifest {
    pub fn validate(&self) -> Result<()> {
        if self.identities.is_empty() {
            return Err(Error::Eval("manifest lists no identities".into()));
        }
        if self.prompts.is_empty() {
            return Err(Error::Eval("manifest lists no prompts".into()));
        }
        let mut seen = BTreeSet::new();
        for i in &self.identities {
            if !seen.insert(&i.id) {
                return Err(Error::Eval(format!("identity {:?} listed twice", i.id)));
            }
            if i.test_set().is_empty() {
                return Err(Error::Eval(format!(
                    "identity {:?} has no test items once the reference is excluded",
                    i.id
                )));
            }
        }
        if self.prompts.iter().collect::<BTreeSet<_>>().len() != self.prompts.len() {
            return Err(Error::Eval("duplicate prompt".into()));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m: EvalManifest = serde_json::from_slice(&std::fs::read(path)?)?;
        m.validate()?;
        Ok(m)
    }
}

pub trait Generator {
    /// Produces an artifact for `identity` under `prompt` and returns its key.
    fn generate(&mut self, identity: &ManifestIdentity, prompt: &str) -> std::result::Result<String, String>;
}

pub trait Embedder {
    fn embed(&self, item: &str) -> Result<Embedding>;
}

/// Generator whose outputs already exist under `gen/<identity>/<prompt>` keys.
#[derive(Debug, Clone, Default)]
pub struct PrecomputedGenerator {
    pub available: BTreeSet<String>,
}

pub fn generated_key(identity: &str, prompt: &str) -> String {
    format!("gen/{identity}/{prompt}")
}

impl Generator for PrecomputedGenerator {
    fn generate(&mut self, identity: &ManifestIdentity, prompt: &str) -> std::result::Result<String, String> {
        let key = generated_key(&identity.id, prompt);
        if self.available.contains(&key) {
            Ok(key)
        } else {
            Err(format!("no generated item {key:?}"))
        }
    }
}

/// Returns the reference itself for every prompt: the pose-copying failure mode.
#[derive(Debug, Clone, Copy, Default)]
pub struct CopyReferenceGenerator;

impl Generator for CopyReferenceGenerator {
    fn generate(&mut self, identity: &ManifestIdentity, _prompt: &str) -> std::result::Result<String, String> {
        Ok(identity.reference.clone())
    }
}

/// Embeddings read from a JSON-lines exchange file, one `{"id", "vector"}` per line.
#[derive(Debug, Clone, Default)]
pub struct PrecomputedEmbedder {
    pub provider: String,
    pub table: BTreeMap<String, Vec<f64>>,
}

impl PrecomputedEmbedder {
    pub fn from_jsonl(reader: impl BufRead, provider: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Line {
            id: String,
            vector: Vec<f64>,
        }
        let mut table = BTreeMap::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let l: Line = serde_json::from_str(&line)
                .map_err(|e| Error::Eval(format!("embedding line {}: {e}", n + 1)))?;
            if table.insert(l.id.clone(), l.vector).is_some() {
                return Err(Error::Eval(format!("embedding line {}: duplicate id {:?}", n + 1, l.id)));
            }
        }
        Ok(PrecomputedEmbedder {
            provider: provider.into(),
            table,
        })
    }

    pub fn load(path: impl AsRef<Path>, provider: &str) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::from_jsonl(std::io::BufReader::new(f), provider)
    }

    pub fn keys(&self) -> BTreeSet<String> {
        self.table.keys().cloned().collect()
    }
}

impl Embedder for PrecomputedEmbedder {
    fn embed(&self, item: &str) -> Result<Embedding> {
        let v = self
            .table
            .get(item)
            .ok_or_else(|| Error::Eval(format!("no embedding for {item:?}")))?;
        Embedding::new(item, self.provider.clone(), v.clone())
    }
}

/// Deterministic random projection of toy latents stored by key.
#[derive(Debug, Clone)]
pub struct ToyEmbedder {
    projection: Matrix,
    latents: BTreeMap<String, Vec<f64>>,
}

impl ToyEmbedder {
    pub const PROVIDER: &'static str = "toy-projection";

    pub fn new(latent_dim: usize, embed_dim: usize, seed: u64) -> Self {
        let projection = gaussian(&mut Rng::new(seed), embed_dim, latent_dim, 1.0 / (latent_dim as f64).sqrt());
        ToyEmbedder {
            projection,
            latents: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, key: impl Into<String>, latent: Vec<f64>) {
        self.latents.insert(key.into(), latent);
    }

    pub fn project(&self, latent: &[f64]) -> Result<Vec<f64>> {
        Ok(self.projection.matmul(&Matrix::column(latent))?.into_data())
    }
}

impl Embedder for ToyEmbedder {
    fn embed(&self, item: &str) -> Result<Embedding> {
        let latent = self
            .latents
            .get(item)
            .ok_or_else(|| Error::Eval(format!("no toy latent for {item:?}")))?;
        Embedding::new(item, Self::PROVIDER, self.project(latent)?)
    }
}

/// Samples one latent per (identity, prompt) from a personalized toy model, stores it in
/// `embedder` under [`generated_key`], and returns a generator over those keys.
pub fn sample_toy_generations(
    model: &ToyDenoiser,
    adapters: &BTreeMap<String, [AdapterFactors; 2]>,
    prompts: &BTreeMap<String, usize>,
    seed: u64,
    embedder: &mut ToyEmbedder,
) -> Result<PrecomputedGenerator> {
    let mut rng = Rng::new(seed);
    let mut available = BTreeSet::new();
    for (id, factors) in adapters {
        let refs = [factors[0].as_refs(), factors[1].as_refs()];
        let bound = BoundDenoiser {
            model,
            adapters: Some(refs),
        };
        for (prompt, &code) in prompts {
            let x = sample_latent(
                &bound,
                model.schedule(),
                model.dims().latent_dim,
                IdentityId(0),
                code,
                &mut rng,
            )?;
            let key = generated_key(id, prompt);
            embedder.insert(key.clone(), x.into_data());
            available.insert(key);
        }
    }
    Ok(PrecomputedGenerator { available })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationFailure {
    pub identity: String,
    pub prompt: String,
    pub reason: String,
}

/// Outcome of generating every (identity, prompt) cell once.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Generations {
    pub items: BTreeMap<(String, String), Embedding>,
    pub failures: Vec<GenerationFailure>,
}

pub fn collect_generations(
    manifest: &EvalManifest,
    generator: &mut dyn Generator,
    embedder: &dyn Embedder,
) -> Result<Generations> {
    manifest.validate()?;
    let mut out = Generations::default();
    for identity in &manifest.identities {
        for prompt in &manifest.prompts {
            let embedded = generator
                .generate(identity, prompt)
                .and_then(|key| embedder.embed(&key).map_err(|e| e.to_string()));
            match embedded {
                Ok(e) => {
                    out.items.insert((identity.id.clone(), prompt.clone()), e);
                }
                Err(reason) => {
                    log::warn!("generation failed for {}/{}: {reason}", identity.id, prompt);
                    out.failures.push(GenerationFailure {
                        identity: identity.id.clone(),
                        prompt: prompt.clone(),
                        reason,
                    });
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaceSimMode {
    /// Mean similarity against the identity's test items, reference excluded.
    Robust,
    /// Similarity against the reference itself.
    Conventional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceSimReport {
    pub mode: FaceSimMode,
    /// Mean of the table, ×100.
    pub score: f64,
    /// Per-(identity, prompt) similarity, ×1.
    pub table: BTreeMap<String, BTreeMap<String, f64>>,
    pub evaluated: usize,
    pub failures: usize,
}

pub fn score_facesim(
    manifest: &EvalManifest,
    generations: &Generations,
    embedder: &dyn Embedder,
    mode: FaceSimMode,
) -> Result<FaceSimReport> {
    manifest.validate()?;
    let mut targets: BTreeMap<&str, Vec<Embedding>> = BTreeMap::new();
    for i in &manifest.identities {
        let keys = match mode {
            FaceSimMode::Robust => i.test_set(),
            FaceSimMode::Conventional => vec![i.reference.as_str()],
        };
        let embs = keys.iter().map(|k| embedder.embed(k)).collect::<Result<Vec<_>>>()?;
        targets.insert(&i.id, embs);
    }
    let mut table: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for ((identity, prompt), generated) in &generations.items {
        let against = targets
            .get(identity.as_str())
            .ok_or_else(|| Error::Eval(format!("generation for unknown identity {identity:?}")))?;
        let mut sum = 0.0;
        for t in against {
            sum += cosine(&generated.vector, &t.vector)?;
        }
        table
            .entry(identity.clone())
            .or_default()
            .insert(prompt.clone(), sum / against.len() as f64);
    }
    let values: Vec<f64> = table.values().flat_map(|row| row.values().copied()).collect();
    if values.is_empty() {
        return Err(Error::Eval(format!(
            "no successful generations ({} failed)",
            generations.failures.len()
        )));
    }
    let score = 100.0 * values.iter().sum::<f64>() / values.len() as f64;
    Ok(FaceSimReport {
        mode,
        score,
        table,
        evaluated: values.len(),
        failures: generations.failures.len(),
    })
}

pub fn r_facesim(manifest: &EvalManifest, generator: &mut dyn Generator, embedder: &dyn Embedder) -> Result<FaceSimReport> {
    let g = collect_generations(manifest, generator, embedder)?;
    score_facesim(manifest, &g, embedder, FaceSimMode::Robust)
}

pub fn facesim_conventional(
    manifest: &EvalManifest,
    generator: &mut dyn Generator,
    embedder: &dyn Embedder,
) -> Result<FaceSimReport> {
    let g = collect_generations(manifest, generator, embedder)?;
    score_facesim(manifest, &g, embedder, FaceSimMode::Conventional)
}

/// Joint text/image embedding space for prompt adherence.
pub trait JointEmbedder {
    fn embed_prompt(&self, prompt: &str) -> Result<Embedding>;
    fn embed_image(&self, item: &Embedding) -> Result<Embedding>;
}

/// Joint embeddings from an exchange file: prompts under `prompt/<prompt>`, generated
/// items under their own keys.
#[derive(Debug, Clone)]
pub struct PrecomputedJoint(pub PrecomputedEmbedder);

impl JointEmbedder for PrecomputedJoint {
    fn embed_prompt(&self, prompt: &str) -> Result<Embedding> {
        self.0.embed(&format!("prompt/{prompt}"))
    }

    fn embed_image(&self, item: &Embedding) -> Result<Embedding> {
        self.0.embed(&item.id)
    }
}

/// Mean prompt adherence over all successful generations, ×100.
pub fn mean_prompt_adherence(generations: &Generations, joint: &dyn JointEmbedder) -> Result<f64> {
    if generations.items.is_empty() {
        return Err(Error::Eval("no generations to score".into()));
    }
    let mut prompts = BTreeMap::new();
    let mut sum = 0.0;
    for ((_, prompt), g) in &generations.items {
        if !prompts.contains_key(prompt) {
            prompts.insert(prompt.clone(), joint.embed_prompt(prompt)?);
        }
        sum += prompt_adherence(&prompts[prompt], &joint.embed_image(g)?)?;
    }
    Ok(sum / generations.items.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub r_facesim: FaceSimReport,
    pub facesim: FaceSimReport,
    pub discrepancy_pct: Option<f64>,
    pub prompt_adherence: Option<f64>,
}

/// Generates once, then scores both similarity variants on the same outputs.
pub fn evaluate(
    manifest: &EvalManifest,
    generator: &mut dyn Generator,
    embedder: &dyn Embedder,
    joint: Option<&dyn JointEmbedder>,
) -> Result<EvalReport> {
    let g = collect_generations(manifest, generator, embedder)?;
    let r = score_facesim(manifest, &g, embedder, FaceSimMode::Robust)?;
    let f = score_facesim(manifest, &g, embedder, FaceSimMode::Conventional)?;
    let discrepancy_pct = discrepancy_report(f.score, r.score).ok();
    let prompt_adherence = joint.map(|j| mean_prompt_adherence(&g, j)).transpose()?;
    Ok(EvalReport {
        r_facesim: r,
        facesim: f,
        discrepancy_pct,
        prompt_adherence,
    })
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:<24} {:>10} {:>10}", "identity", "prompt", "R-FaceSim", "FaceSim");
        for (id, row) in &self.r_facesim.table {
            for (prompt, r) in row {
                let f = self
                    .facesim
                    .table
                    .get(id)
                    .and_then(|r| r.get(prompt))
                    .map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v));
                let _ = writeln!(s, "{:<24} {:<24} {:>10.2} {:>10}", id, prompt, 100.0 * r, f);
            }
        }
        let _ = writeln!(s, "{:<49} {:>10.2} {:>10.2}", "mean", self.r_facesim.score, self.facesim.score);
        if let Some(d) = self.discrepancy_pct {
            let _ = writeln!(s, "relative difference: {d:+.1}%");
        }
        if let Some(p) = self.prompt_adherence {
            let _ = writeln!(s, "prompt adherence: {p:.2}");
        }
        if self.r_facesim.failures > 0 {
            let _ = writeln!(s, "failed generations excluded: {}", self.r_facesim.failures);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_basics() {
        assert_eq!(cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert_eq!(cosine(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), -1.0);
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn discrepancy_rows() {
        assert_eq!(discrepancy_report(80.17, 71.33).unwrap(), -11.0);
        assert_eq!(discrepancy_report(84.76, 75.72).unwrap(), -10.7);
        assert_eq!(discrepancy_report(50.0, 50.0).unwrap(), 0.0);
        assert!(discrepancy_report(0.0, 1.0).is_err());
    }

    #[test]
    fn prompt_adherence_bounds() {
        let a = Embedding::new("p", "j", vec![1.0, 0.0]).unwrap();
        let b = Embedding::new("i", "j", vec![0.0, 1.0]).unwrap();
        assert_eq!(prompt_adherence(&a, &a).unwrap(), 100.0);
        assert_eq!(prompt_adherence(&a, &b).unwrap(), 0.0);
        let c = Embedding::new("i", "other", vec![0.0, 1.0]).unwrap();
        assert!(prompt_adherence(&a, &c).is_err());
    }

    fn one_identity() -> (EvalManifest, PrecomputedEmbedder) {
        let manifest = EvalManifest {
            identities: vec![ManifestIdentity {
                id: "a".into(),
                reference: "a/ref".into(),
                tests: vec!["a/ref".into(), "a/t1".into(), "a/t2".into()],
            }],
            prompts: vec!["p".into()],
        };
        // generated vector (1, 0); test cosines 0.8 and 0.6
        let table = [
            ("a/ref", vec![1.0, 0.0]),
            ("a/t1", vec![0.8, 0.6]),
            ("a/t2", vec![0.6, 0.8]),
            ("gen/a/p", vec![1.0, 0.0]),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        (
            manifest,
            PrecomputedEmbedder {
                provider: "fixture".into(),
                table,
            },
        )
    }

    #[test]
    fn robust_score_averages_tests_only() {
        let (m, e) = one_identity();
        let mut g = PrecomputedGenerator { available: e.keys() };
        let r = r_facesim(&m, &mut g, &e).unwrap();
        assert!((r.score - 70.0).abs() < 1e-12, "{}", r.score);
        let c = facesim_conventional(&m, &mut CopyReferenceGenerator, &e).unwrap();
        assert_eq!(c.score, 100.0);
        let rc = r_facesim(&m, &mut CopyReferenceGenerator, &e).unwrap();
        assert!(rc.score < 100.0);
    }

    #[test]
    fn failures_are_counted_not_scored() {
        let (mut m, e) = one_identity();
        m.prompts.push("missing".into());
        let mut g = PrecomputedGenerator { available: e.keys() };
        let r = r_facesim(&m, &mut g, &e).unwrap();
        assert_eq!((r.evaluated, r.failures), (1, 1));
        assert!((r.score - 70.0).abs() < 1e-12);
    }

    #[test]
    fn empty_prompts_error() {
        let (mut m, e) = one_identity();
        m.prompts.clear();
        assert!(facesim_conventional(&m, &mut CopyReferenceGenerator, &e).is_err());
    }

    #[test]
    fn manifest_requires_tests_after_exclusion() {
        let m = EvalManifest {
            identities: vec![ManifestIdentity {
                id: "a".into(),
                reference: "r".into(),
                tests: vec!["r".into()],
            }],
            prompts: vec!["p".into()],
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn jsonl_roundtrip() {
        let text = "{\"id\":\"x\",\"vector\":[1,2]}\n\n{\"id\":\"y\",\"vector\":[3,4]}\n";
        let e = PrecomputedEmbedder::from_jsonl(text.as_bytes(), "p").unwrap();
        assert_eq!(e.embed("y").unwrap().vector, vec![3.0, 4.0]);
        assert!(PrecomputedEmbedder::from_jsonl("{\"id\":\"x\",\"vector\":[1]}\n{\"id\":\"x\",\"vector\":[1]}".as_bytes(), "p").is_err());
    }
}
