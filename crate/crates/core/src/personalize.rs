//! Stage-2 personalization: frozen meta-down factors, fresh mid/up factors fit to
//! augmented views of one (or a few) reference examples, then merged into a plain
//! two-factor LoRA.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{init_meta_down, merge, AdapterFactors, MergedLoRA};
use crate::augment::{plan_crops, sample_view, CropSpec, FaceBox, Rect, View};
use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::error::{Error, Result};
use crate::metatrain::{adapter_refs, IdentityFactors};
use crate::numerics::{combined_checksum, gaussian, AdamWConfig, Checksum, Matrix, Parameter, Rng};
use crate::toymodel::{diffusion_loss_value, BoundDenoiser, IdentityId, NoisedItem, Sample, ToyDenoiser};

pub const LAYER_NAMES: [&str; 2] = ["layer1", "layer2"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalizeConfig {
    pub q_st2: usize,
    pub r2: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Std of the deterministic per-view latent offset standing in for pixel resampling.
    pub view_std: f64,
}

impl Default for PersonalizeConfig {
    fn default() -> Self {
        PersonalizeConfig {
            q_st2: 375,
            r2: 1,
            batch_size: 1,
            optimizer: AdamWConfig::default(),
            seed: 0,
            view_std: 0.05,
        }
    }
}

impl PersonalizeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.q_st2 == 0 || self.r2 == 0 || self.batch_size == 0 {
            return Err(Error::Config("q_st2, r2 and batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Meta-down factors installed read-only.
#[derive(Debug, Clone)]
pub struct FrozenMetaDown {
    layers: [Parameter; 2],
    r1: usize,
}

impl FrozenMetaDown {
    pub fn new(meta_down: [Matrix; 2]) -> Result<Self> {
        let r1 = meta_down[0].rows();
        if meta_down[1].rows() != r1 {
            return Err(Error::Rank(format!(
                "meta-down ranks differ between layers: {} vs {}",
                r1,
                meta_down[1].rows()
            )));
        }
        let [a, b] = meta_down;
        let mut layers = [
            Parameter::new("layer1.meta_down", a, AdamWConfig::default()),
            Parameter::new("layer2.meta_down", b, AdamWConfig::default()),
        ];
        layers.iter_mut().for_each(Parameter::freeze);
        Ok(FrozenMetaDown { layers, r1 })
    }

    /// Freshly drawn meta-down factors, for the random-projection baseline.
    pub fn random(model: &ToyDenoiser, r1: usize, rng: &mut Rng) -> Result<Self> {
        let [(i1, _), (i2, _)] = model.dims().layer_shapes();
        Self::new([init_meta_down(rng, i1, r1), init_meta_down(rng, i2, r1)])
    }

    pub fn r1(&self) -> usize {
        self.r1
    }

    pub fn matrices(&self) -> [&Matrix; 2] {
        [self.layers[0].value(), self.layers[1].value()]
    }

    pub fn checksum(&self) -> Checksum {
        combined_checksum(self.layers.iter().map(Parameter::value))
    }

    /// Always fails: the factors are frozen.
    pub fn try_update(&mut self, layer: usize, grad: &Matrix) -> Result<()> {
        self.layers[layer].step(grad)
    }
}

/// Reads the shared factors out of a stage-1 checkpoint and checks `r1`.
pub fn load_stage1(checkpoint: &Checkpoint, expected_r1: usize) -> Result<FrozenMetaDown> {
    checkpoint.expect_kind(CheckpointKind::Stage1)?;
    let tensors = LAYER_NAMES.map(|l| checkpoint.tensor(&format!("{l}.meta_down")).cloned());
    let [a, b] = tensors;
    let (a, b) = (a?, b?);
    let found = checkpoint.header.r1.unwrap_or(a.rows());
    if found != expected_r1 || a.rows() != expected_r1 || b.rows() != expected_r1 {
        return Err(Error::RankMismatch {
            expected: expected_r1,
            found,
        });
    }
    FrozenMetaDown::new([a, b])
}

/// A reference example: its toy latent plus the geometry of the photo it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceExample {
    pub sample: Sample,
    pub image_width: u32,
    pub image_height: u32,
    pub face: FaceBox,
}

/// Geometry used when toy references need a photo frame.
pub const TOY_IMAGE: (u32, u32) = (1200, 1600);
pub const TOY_FACE: Rect = Rect {
    x: 450,
    y: 520,
    w: 300,
    h: 380,
};

impl ReferenceExample {
    pub fn toy(sample: Sample) -> Self {
        ReferenceExample {
            sample,
            image_width: TOY_IMAGE.0,
            image_height: TOY_IMAGE.1,
            face: TOY_FACE,
        }
    }
}

/// Latent of one augmented view: the reference latent plus a fixed offset keyed by
/// the crop rectangle and flip flag.
pub fn view_latent(x0: &Matrix, view: &View, std: f64) -> Matrix {
    let mut h = Sha256::new();
    for v in [view.rect.x, view.rect.y, view.rect.w, view.rect.h] {
        h.update(v.to_le_bytes());
    }
    h.update([view.flip as u8]);
    let digest = h.finalize();
    let seed = u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"));
    let offset = gaussian(&mut Rng::new(seed), x0.rows(), x0.cols(), std);
    x0.add(&offset).expect("same shape")
}

#[derive(Debug, Clone)]
pub struct AugmentedExample {
    pub reference: ReferenceExample,
    pub spec: CropSpec,
}

pub fn augmented_dataset(references: &[ReferenceExample]) -> Result<Vec<AugmentedExample>> {
    let mut out = Vec::new();
    for r in references {
        for spec in plan_crops(r.image_width, r.image_height, &r.face)? {
            out.push(AugmentedExample {
                reference: r.clone(),
                spec,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Stage2Output {
    pub identity: IdentityId,
    pub factors: [AdapterFactors; 2],
    pub merged: [MergedLoRA; 2],
    pub train_losses: Vec<f64>,
    /// Held-out loss before any update (index 0) and after each update.
    pub eval_losses: Option<Vec<f64>>,
    pub meta_down_checksum_before: Checksum,
    pub meta_down_checksum_after: Checksum,
    pub augmented_views: usize,
}

impl Stage2Output {
    /// Lowest training loss seen up to (and including) each requested iteration.
    pub fn best_so_far_at(&self, grid: &[usize]) -> Vec<f64> {
        grid.iter()
            .map(|&g| {
                self.train_losses[..g.min(self.train_losses.len())]
                    .iter()
                    .copied()
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }
}

pub fn run_stage2(
    model: &ToyDenoiser,
    meta_down: &FrozenMetaDown,
    references: &[ReferenceExample],
    config: &PersonalizeConfig,
    eval_items: Option<&[NoisedItem]>,
) -> Result<Stage2Output> {
    config.validate()?;
    let identity = references
        .first()
        .ok_or_else(|| Error::Invalid("need at least one reference example".into()))?
        .sample
        .identity;
    let dataset = augmented_dataset(references)?;
    if dataset.is_empty() {
        return Err(Error::Invalid("augmentation plan is empty".into()));
    }
    let r1 = meta_down.r1();
    let before = meta_down.checksum();
    let mut rng = Rng::new(config.seed);
    let mut factors = IdentityFactors::fresh(&mut rng.fork(), model.dims(), r1, config.r2, config.optimizer, identity);
    let schedule = model.schedule().clone();

    let eval = |f: &IdentityFactors| -> Result<f64> {
        let adapters = adapter_refs(meta_down.matrices(), f.mids(), f.ups());
        diffusion_loss_value(
            &BoundDenoiser {
                model,
                adapters: Some(adapters),
            },
            eval_items.unwrap_or_default(),
        )
    };
    let mut eval_losses = eval_items.map(|_| Vec::with_capacity(config.q_st2 + 1));
    if let Some(curve) = eval_losses.as_mut() {
        curve.push(eval(&factors)?);
    }

    let mut train_losses = Vec::with_capacity(config.q_st2);
    let mut cursor = 0;
    for iteration in 0..config.q_st2 {
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let ex = &dataset[cursor % dataset.len()];
            cursor += 1;
            let view = sample_view(&ex.spec, &mut rng);
            let latent = view_latent(&ex.reference.sample.latent(), &view, config.view_std);
            batch.push(NoisedItem::new(&schedule, identity, ex.reference.sample.prompt, &latent, &mut rng)?);
        }
        let lg = model
            .loss_and_grads(&batch, |_| Some(adapter_refs(meta_down.matrices(), factors.mids(), factors.ups())))
            .map_err(|e| divergence(iteration, e))?;
        let grads = lg
            .identities
            .get(&identity)
            .ok_or_else(|| Error::Invalid("no gradient for the personalized identity".into()))?;
        for l in 0..2 {
            factors.mid[l].step(&grads[l].mid).map_err(|e| divergence(iteration, e))?;
            factors.up[l].step(&grads[l].up).map_err(|e| divergence(iteration, e))?;
        }
        train_losses.push(lg.loss);
        if let Some(curve) = eval_losses.as_mut() {
            curve.push(eval(&factors).map_err(|e| divergence(iteration, e))?);
        }
    }

    let after = meta_down.checksum();
    if before != after {
        return Err(Error::Frozen("meta_down".into()));
    }
    let md = meta_down.matrices();
    let three = [0, 1].map(|l| {
        AdapterFactors::new(md[l].clone(), factors.mid[l].value().clone(), factors.up[l].value().clone())
    });
    let [a, b] = three;
    let factors = [a?, b?];
    let merged = [merge(&factors[0]), merge(&factors[1])];
    Ok(Stage2Output {
        identity,
        factors,
        merged,
        train_losses,
        eval_losses,
        meta_down_checksum_before: before,
        meta_down_checksum_after: after,
        augmented_views: dataset.len(),
    })
}

fn divergence(iteration: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } | Error::NonFiniteLoss { .. } => Error::Divergence {
            iteration,
            message: e.to_string(),
        },
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    Meta,
    RandomLomd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedConfig {
    /// Threshold as a fraction of the initial held-out loss.
    pub tau_fraction: f64,
    /// Trailing moving-average window applied to the loss curve.
    pub smoothing_window: usize,
    pub eval_items: usize,
}

impl Default for SpeedConfig {
    fn default() -> Self {
        SpeedConfig {
            tau_fraction: 0.5,
            smoothing_window: 5,
            eval_items: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdHit {
    /// First iteration whose smoothed loss is at or below τ, or the budget if never.
    pub iterations: usize,
    pub reached: bool,
}

pub fn smooth(curve: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..curve.len())
        .map(|k| {
            let lo = (k + 1).saturating_sub(w);
            curve[lo..=k].iter().sum::<f64>() / (k + 1 - lo) as f64
        })
        .collect()
}

/// `curve[0]` is the loss before adaptation; τ = `tau_fraction · curve[0]`.
pub fn iterations_to_threshold(curve: &[f64], tau_fraction: f64, window: usize) -> ThresholdHit {
    let Some(first) = curve.first() else {
        return ThresholdHit {
            iterations: 0,
            reached: false,
        };
    };
    let tau = tau_fraction * first;
    match smooth(curve, window).iter().position(|v| *v <= tau) {
        Some(k) => ThresholdHit {
            iterations: k,
            reached: true,
        },
        None => ThresholdHit {
            iterations: curve.len() - 1,
            reached: false,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpeed {
    pub identity: IdentityId,
    pub baseline: Baseline,
    pub hit: ThresholdHit,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub curve: Vec<f64>,
}

/// Personalizes each held-out identity from its reference sample and reports how many
/// iterations the held-out loss needs to fall to τ.
pub fn adaptation_speed_experiment(
    model: &ToyDenoiser,
    heldout: &[(ReferenceExample, Vec<NoisedItem>)],
    meta_down: &FrozenMetaDown,
    baseline: Baseline,
    config: &PersonalizeConfig,
    speed: &SpeedConfig,
) -> Result<Vec<IdentitySpeed>> {
    heldout
        .iter()
        .map(|(reference, eval)| {
            let out = run_stage2(model, meta_down, std::slice::from_ref(reference), config, Some(eval))?;
            let curve = out.eval_losses.expect("eval items supplied");
            Ok(IdentitySpeed {
                identity: reference.sample.identity,
                baseline,
                hit: iterations_to_threshold(&curve, speed.tau_fraction, speed.smoothing_window),
                initial_loss: curve[0],
                final_loss: *curve.last().expect("non-empty curve"),
                curve,
            })
        })
        .collect()
}
