//! Conversions between pipeline outputs and checkpoints.

use std::collections::BTreeMap;

use serde_json::json;

use crate::adapter::{AdaptedLayer, AdapterFactors, MergedLoRA};
use crate::checkpoint::{Checkpoint, CheckpointHeader, CheckpointKind};
use crate::error::{Error, Result};
use crate::numerics::{gaussian, Checksum, Matrix, Rng};
use crate::personalize::{Stage2Output, LAYER_NAMES};
use crate::toymodel::{DiffusionSchedule, IdentityId, ModelDims, ToyDenoiser};

/// Seed and config hash stamped into every checkpoint header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
}

fn header(kind: CheckpointKind, r1: Option<usize>, r2: Option<usize>, prov: &Provenance) -> CheckpointHeader {
    CheckpointHeader {
        kind,
        r1,
        r2,
        layers: LAYER_NAMES.iter().map(|s| s.to_string()).collect(),
        seed: prov.seed,
        config_hash: prov.config_hash.clone(),
        extra: BTreeMap::new(),
    }
}

fn extra<T: serde::de::DeserializeOwned>(ckpt: &Checkpoint, key: &str) -> Result<T> {
    let v = ckpt
        .header
        .extra
        .get(key)
        .ok_or_else(|| Error::Invalid(format!("checkpoint header lacks {key:?}")))?;
    Ok(serde_json::from_value(v.clone())?)
}

pub fn base_checkpoint(model: &ToyDenoiser, prov: &Provenance) -> Result<Checkpoint> {
    let mut c = Checkpoint::new(header(CheckpointKind::Base, None, None, prov));
    c.header.extra.insert("dims".into(), serde_json::to_value(model.dims())?);
    c.header
        .extra
        .insert("alpha_bar".into(), json!(model.schedule().values()));
    c.header
        .extra
        .insert("base_checksum".into(), serde_json::to_value(model.base_checksum())?);
    for (l, name) in LAYER_NAMES.iter().enumerate() {
        c.insert(format!("{name}.w0"), model.base_weight(l).clone())?;
    }
    Ok(c)
}

/// Rebuilds the frozen base model.
pub fn load_base(ckpt: &Checkpoint) -> Result<ToyDenoiser> {
    ckpt.expect_kind(CheckpointKind::Base)?;
    let dims: ModelDims = extra(ckpt, "dims")?;
    let schedule = DiffusionSchedule::from_alpha_bar(extra(ckpt, "alpha_bar")?)?;
    let model = ToyDenoiser::from_weights(
        dims,
        schedule,
        ckpt.tensor("layer1.w0")?.clone(),
        ckpt.tensor("layer2.w0")?.clone(),
        true,
    )?;
    let recorded: Checksum = extra(ckpt, "base_checksum")?;
    if recorded != model.base_checksum() {
        return Err(Error::Invalid(format!(
            "base weights checksum {} does not match header {recorded}",
            model.base_checksum()
        )));
    }
    Ok(model)
}

pub fn stage1_checkpoint(
    meta_down: [&Matrix; 2],
    r2: usize,
    base_checksum: Checksum,
    prov: &Provenance,
) -> Result<Checkpoint> {
    let r1 = meta_down[0].rows();
    let mut c = Checkpoint::new(header(CheckpointKind::Stage1, Some(r1), Some(r2), prov));
    c.header
        .extra
        .insert("base_checksum".into(), serde_json::to_value(base_checksum)?);
    for (l, name) in LAYER_NAMES.iter().enumerate() {
        c.insert(format!("{name}.meta_down"), meta_down[l].clone())?;
    }
    Ok(c)
}

pub fn personalized_checkpoint(out: &Stage2Output, prov: &Provenance) -> Result<Checkpoint> {
    let f = &out.factors;
    let mut c = Checkpoint::new(header(
        CheckpointKind::Personalized,
        Some(f[0].r1()),
        Some(f[0].r2()),
        prov,
    ));
    c.header.extra.insert("identity".into(), json!(out.identity));
    for (l, name) in LAYER_NAMES.iter().enumerate() {
        c.insert(format!("{name}.meta_down"), f[l].l_meta_down.clone())?;
        c.insert(format!("{name}.mid"), f[l].l_mid.clone())?;
        c.insert(format!("{name}.up"), f[l].l_up.clone())?;
    }
    Ok(c)
}

pub fn load_personalized(ckpt: &Checkpoint) -> Result<(IdentityId, [AdapterFactors; 2])> {
    ckpt.expect_kind(CheckpointKind::Personalized)?;
    let identity: IdentityId = extra(ckpt, "identity")?;
    let layer = |name: &str| -> Result<AdapterFactors> {
        AdapterFactors::new(
            ckpt.tensor(&format!("{name}.meta_down"))?.clone(),
            ckpt.tensor(&format!("{name}.mid"))?.clone(),
            ckpt.tensor(&format!("{name}.up"))?.clone(),
        )
    };
    Ok((identity, [layer(LAYER_NAMES[0])?, layer(LAYER_NAMES[1])?]))
}

pub fn merged_checkpoint(merged: &[MergedLoRA; 2], identity: IdentityId, prov: &Provenance) -> Result<Checkpoint> {
    let mut c = Checkpoint::new(header(
        CheckpointKind::Merged,
        None,
        Some(merged[0].rank_bound()),
        prov,
    ));
    c.header.extra.insert("identity".into(), json!(identity));
    for (l, name) in LAYER_NAMES.iter().enumerate() {
        c.insert(format!("{name}.down"), merged[l].down.clone())?;
        c.insert(format!("{name}.up"), merged[l].up.clone())?;
    }
    Ok(c)
}

pub fn load_merged(ckpt: &Checkpoint) -> Result<[MergedLoRA; 2]> {
    ckpt.expect_kind(CheckpointKind::Merged)?;
    let layer = |name: &str| -> Result<MergedLoRA> {
        Ok(MergedLoRA {
            down: ckpt.tensor(&format!("{name}.down"))?.clone(),
            up: ckpt.tensor(&format!("{name}.up"))?.clone(),
        })
    };
    Ok([layer(LAYER_NAMES[0])?, layer(LAYER_NAMES[1])?])
}

/// Largest ∞-norm gap between the three-factor and merged forward passes of one layer
/// over `inputs` random standard-normal inputs.
pub fn merge_gap(
    w0: &Matrix,
    factors: &AdapterFactors,
    merged: &MergedLoRA,
    scale: f64,
    inputs: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let mut layer = AdaptedLayer::new(w0.clone(), factors.clone())?.with_scale(scale);
    let mut worst = 0.0f64;
    for _ in 0..inputs {
        let x = gaussian(rng, w0.cols(), 1, 1.0);
        let a = layer.forward(&x)?;
        let b = merged.forward(w0, scale, &x)?;
        worst = worst.max(a.sub(&b)?.max_abs());
    }
    Ok(worst)
}
