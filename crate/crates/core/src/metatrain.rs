//! Stage-1 meta-training.
//!
//! Identities are split into buckets. Each bucket entry runs `q_bucket` iterations;
//! during the first `q_warm_up` of them only the mid/up factors of the identities in
//! the batch move, afterwards the shared meta-down factors are updated too. At the
//! end all identity factors are dropped and only the meta-down factors survive.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::adapter::{check_ranks, init_identity_factors, init_meta_down, FactorRefs};
use crate::error::{Error, Result};
use crate::numerics::{combined_checksum, AdamWConfig, Checksum, Matrix, Parameter, Rng};
use crate::toymodel::{AdapterRefs, IdentityId, ModelDims, NoisedItem, ToyDenoiser, ToyIdentityDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub q_total: usize,
    /// Fixed per-bucket budget; `None` derives it from `uses_per_example`.
    pub q_bucket: Option<usize>,
    /// Fixed warm-up length; `None` derives it from `warm_up_fraction`.
    pub q_warm_up: Option<usize>,
    pub warm_up_fraction: f64,
    pub uses_per_example: usize,
    pub batch_size: usize,
    pub identities_per_bucket: usize,
    pub r1: usize,
    pub r2: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Re-run warm-up every time a bucket is entered, not only on its first visit.
    pub warm_up_on_revisit: bool,
    pub reset_identity_optimizer_on_entry: bool,
    /// Record every identity's factor checksum after every step.
    pub trace_identity_checksums: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            q_total: 2000,
            q_bucket: None,
            q_warm_up: None,
            warm_up_fraction: 0.4,
            uses_per_example: 10,
            batch_size: 4,
            identities_per_bucket: 4,
            r1: 16,
            r2: 1,
            optimizer: AdamWConfig::default(),
            seed: 0,
            warm_up_on_revisit: true,
            reset_identity_optimizer_on_entry: false,
            trace_identity_checksums: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.identities_per_bucket == 0 || self.uses_per_example == 0 {
            return Err(Error::Config(
                "batch_size, identities_per_bucket and uses_per_example must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.warm_up_fraction) {
            return Err(Error::Config(format!(
                "warm_up_fraction {} outside [0, 1]",
                self.warm_up_fraction
            )));
        }
        if let (Some(b), Some(w)) = (self.q_bucket, self.q_warm_up) {
            if w > b {
                return Err(Error::Config(format!("q_warm_up {w} exceeds q_bucket {b}")));
            }
        }
        if self.q_bucket == Some(0) {
            return Err(Error::Config("q_bucket must be positive".into()));
        }
        Ok(())
    }

    pub fn schedule_for(&self, example_count: usize) -> BucketSchedule {
        let q_bucket = self
            .q_bucket
            .unwrap_or_else(|| bucket_budget(example_count, self.batch_size, self.uses_per_example));
        let q_warm_up = self
            .q_warm_up
            .unwrap_or_else(|| warm_up_iterations(q_bucket, self.warm_up_fraction));
        BucketSchedule { q_bucket, q_warm_up }
    }
}

/// `ceil(uses · examples / batch_size)`.
pub fn bucket_budget(example_count: usize, batch_size: usize, uses_per_example: usize) -> usize {
    (uses_per_example * example_count).div_ceil(batch_size)
}

/// `round(fraction · q_bucket)`.
pub fn warm_up_iterations(q_bucket: usize, fraction: f64) -> usize {
    (fraction * q_bucket as f64).round() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketSchedule {
    pub q_bucket: usize,
    pub q_warm_up: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateMask {
    pub meta_down: bool,
    pub mid_up: bool,
}

pub fn warm_up_gate(iter_in_bucket: usize, schedule: &BucketSchedule) -> UpdateMask {
    UpdateMask {
        meta_down: iter_in_bucket >= schedule.q_warm_up,
        mid_up: true,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub id: usize,
    pub identities: BTreeSet<IdentityId>,
    /// Indices into the dataset's sample list.
    pub examples: Vec<usize>,
    pub schedule: BucketSchedule,
}

/// Seeded shuffle of the identity order, then consecutive chunks.
pub fn partition_buckets(dataset: &ToyIdentityDataset, config: &TrainConfig) -> Result<Vec<Bucket>> {
    config.validate()?;
    let mut ids = dataset.identity_ids();
    if ids.is_empty() || dataset.samples.is_empty() {
        return Err(Error::Invalid("cannot partition an empty dataset".into()));
    }
    Rng::new(config.seed ^ 0xB0C4_E7).shuffle(&mut ids);
    let buckets = ids
        .chunks(config.identities_per_bucket)
        .enumerate()
        .map(|(id, chunk)| {
            let identities: BTreeSet<IdentityId> = chunk.iter().copied().collect();
            let examples: Vec<usize> = dataset
                .samples
                .iter()
                .enumerate()
                .filter(|(_, s)| identities.contains(&s.identity))
                .map(|(i, _)| i)
                .collect();
            let schedule = config.schedule_for(examples.len());
            Bucket {
                id,
                identities,
                examples,
                schedule,
            }
        })
        .collect();
    Ok(buckets)
}

#[derive(Debug, Clone)]
pub struct IdentityFactors {
    pub mid: [Parameter; 2],
    pub up: [Parameter; 2],
}

impl IdentityFactors {
    pub fn fresh(rng: &mut Rng, dims: ModelDims, r1: usize, r2: usize, hyper: AdamWConfig, id: IdentityId) -> Self {
        let [(_, o1), (_, o2)] = dims.layer_shapes();
        let (m1, u1) = init_identity_factors(rng, o1, r1, r2);
        let (m2, u2) = init_identity_factors(rng, o2, r1, r2);
        IdentityFactors {
            mid: [
                Parameter::new(format!("identity{id}.layer1.mid"), m1, hyper),
                Parameter::new(format!("identity{id}.layer2.mid"), m2, hyper),
            ],
            up: [
                Parameter::new(format!("identity{id}.layer1.up"), u1, hyper),
                Parameter::new(format!("identity{id}.layer2.up"), u2, hyper),
            ],
        }
    }

    pub fn checksum(&self) -> Checksum {
        combined_checksum(self.mid.iter().chain(&self.up).map(Parameter::value))
    }

    pub fn reset_optimizers(&mut self) {
        self.mid.iter_mut().chain(self.up.iter_mut()).for_each(Parameter::reset_optimizer);
    }

    pub fn mids(&self) -> [&Matrix; 2] {
        [self.mid[0].value(), self.mid[1].value()]
    }

    pub fn ups(&self) -> [&Matrix; 2] {
        [self.up[0].value(), self.up[1].value()]
    }
}

/// One shared meta-down factor per layer plus per-identity mid/up factors.
#[derive(Debug, Clone)]
pub struct IdentityBank {
    meta_down: [Parameter; 2],
    identities: BTreeMap<IdentityId, IdentityFactors>,
}

pub fn meta_down_refs(p: &[Parameter; 2]) -> [&Matrix; 2] {
    [p[0].value(), p[1].value()]
}

pub fn adapter_refs<'a>(meta_down: [&'a Matrix; 2], mid: [&'a Matrix; 2], up: [&'a Matrix; 2]) -> AdapterRefs<'a> {
    [0, 1].map(|l| FactorRefs {
        meta_down: meta_down[l],
        mid: mid[l],
        up: up[l],
    })
}

impl IdentityBank {
    pub fn new(dims: ModelDims, r1: usize, r2: usize, ids: &[IdentityId], rng: &mut Rng, hyper: AdamWConfig) -> Result<Self> {
        for (d_in, d_out) in dims.layer_shapes() {
            check_ranks(d_in, d_out, r1, r2)?;
        }
        let [(i1, _), (i2, _)] = dims.layer_shapes();
        let meta_down = [
            Parameter::new("layer1.meta_down", init_meta_down(rng, i1, r1), hyper),
            Parameter::new("layer2.meta_down", init_meta_down(rng, i2, r1), hyper),
        ];
        let identities = ids
            .iter()
            .map(|id| (*id, IdentityFactors::fresh(rng, dims, r1, r2, hyper, *id)))
            .collect();
        Ok(IdentityBank { meta_down, identities })
    }

    pub fn meta_down(&self) -> [&Matrix; 2] {
        meta_down_refs(&self.meta_down)
    }

    pub fn meta_down_checksum(&self) -> Checksum {
        combined_checksum(self.meta_down.iter().map(Parameter::value))
    }

    pub fn identity(&self, id: IdentityId) -> Option<&IdentityFactors> {
        self.identities.get(&id)
    }

    pub fn identity_checksums(&self) -> BTreeMap<IdentityId, Checksum> {
        self.identities.iter().map(|(id, f)| (*id, f.checksum())).collect()
    }

    pub fn adapters(&self, id: IdentityId) -> Option<AdapterRefs<'_>> {
        let f = self.identities.get(&id)?;
        Some(adapter_refs(self.meta_down(), f.mids(), f.ups()))
    }

    pub fn into_meta_down(self) -> [Matrix; 2] {
        self.meta_down.map(Parameter::into_value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub bucket: usize,
    pub entry: usize,
    pub iter_in_bucket: usize,
    pub loss: f64,
    pub mask: UpdateMask,
    pub batch_identities: Vec<IdentityId>,
    /// Meta-down checksum after this step.
    pub meta_down_checksum: Checksum,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub identity_checksums: BTreeMap<IdentityId, Checksum>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryRecord {
    pub entry: usize,
    pub bucket: usize,
    pub start_iteration: usize,
    pub iterations: usize,
    pub warm_up: usize,
    pub meta_down_checksum_at_entry: Checksum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Trace {
    pub q_total: usize,
    pub executed_iterations: usize,
    pub buckets: Vec<Bucket>,
    pub entries: Vec<EntryRecord>,
    pub initial_identity_checksums: BTreeMap<IdentityId, Checksum>,
    pub records: Vec<TraceRecord>,
}

#[derive(Debug, Clone)]
pub struct Stage1Output {
    pub meta_down: [Matrix; 2],
    pub r1: usize,
    pub trace: Stage1Trace,
}

pub struct MetaTrainer<'a> {
    model: &'a ToyDenoiser,
    dataset: &'a ToyIdentityDataset,
    config: TrainConfig,
    buckets: Vec<Bucket>,
    bank: IdentityBank,
    rng: Rng,
    iteration: usize,
    entries: Vec<EntryRecord>,
    records: Vec<TraceRecord>,
    initial_identity_checksums: BTreeMap<IdentityId, Checksum>,
    visited: BTreeSet<usize>,
}

impl<'a> MetaTrainer<'a> {
    pub fn new(model: &'a ToyDenoiser, dataset: &'a ToyIdentityDataset, config: TrainConfig) -> Result<Self> {
        if !model.is_frozen() {
            return Err(Error::Invalid("meta-training needs a frozen pretrained base".into()));
        }
        let buckets = partition_buckets(dataset, &config)?;
        let mut rng = Rng::new(config.seed);
        let bank = IdentityBank::new(
            model.dims(),
            config.r1,
            config.r2,
            &dataset.identity_ids(),
            &mut rng.fork(),
            config.optimizer,
        )?;
        let initial_identity_checksums = bank.identity_checksums();
        Ok(MetaTrainer {
            model,
            dataset,
            config,
            buckets,
            bank,
            rng,
            iteration: 0,
            entries: Vec::new(),
            records: Vec::new(),
            initial_identity_checksums,
            visited: BTreeSet::new(),
        })
    }

    pub fn bank(&self) -> &IdentityBank {
        &self.bank
    }

    pub fn buckets(&self) -> &[Bucket] {
        &self.buckets
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    /// One optimizer step on an explicit batch.
    pub fn step(&mut self, batch: &[NoisedItem], mask: UpdateMask) -> Result<f64> {
        let lg = self
            .model
            .loss_and_grads(batch, |id| self.bank.adapters(id))
            .map_err(|e| match e {
                Error::NonFiniteLoss { .. } | Error::NonFinite { .. } => Error::Divergence {
                    iteration: self.iteration,
                    message: e.to_string(),
                },
                other => other,
            })?;
        let iteration = self.iteration;
        let shared = if mask.meta_down { lg.meta_down_total() } else { None };
        if mask.mid_up {
            for (id, grads) in &lg.identities {
                let f = self
                    .bank
                    .identities
                    .get_mut(id)
                    .ok_or_else(|| Error::Invalid(format!("identity {id} not in bank")))?;
                for l in 0..2 {
                    f.mid[l].step(&grads[l].mid).map_err(|e| Self::wrap(iteration, e))?;
                    f.up[l].step(&grads[l].up).map_err(|e| Self::wrap(iteration, e))?;
                }
            }
        }
        if let Some(total) = shared {
            for (p, g) in self.bank.meta_down.iter_mut().zip(&total) {
                p.step(g).map_err(|e| Self::wrap(iteration, e))?;
            }
        }
        Ok(lg.loss)
    }

    fn wrap(iteration: usize, e: Error) -> Error {
        match e {
            Error::NonFinite { context } => Error::Divergence {
                iteration,
                message: context,
            },
            other => other,
        }
    }

    /// Runs one full visit of bucket `index`.
    pub fn run_bucket_entry(&mut self, index: usize) -> Result<usize> {
        let bucket = self.buckets[index].clone();
        let first_visit = self.visited.insert(index);
        let mut schedule = bucket.schedule;
        if !first_visit && !self.config.warm_up_on_revisit {
            schedule.q_warm_up = 0;
        }
        if self.config.reset_identity_optimizer_on_entry {
            for id in &bucket.identities {
                if let Some(f) = self.bank.identities.get_mut(id) {
                    f.reset_optimizers();
                }
            }
        }
        let entry = self.entries.len();
        self.entries.push(EntryRecord {
            entry,
            bucket: bucket.id,
            start_iteration: self.iteration,
            iterations: schedule.q_bucket,
            warm_up: schedule.q_warm_up,
            meta_down_checksum_at_entry: self.bank.meta_down_checksum(),
        });
        let schedule_ref = self.model.schedule().clone();
        for iter_in_bucket in 0..schedule.q_bucket {
            let mask = warm_up_gate(iter_in_bucket, &schedule);
            let mut batch = Vec::with_capacity(self.config.batch_size);
            for _ in 0..self.config.batch_size {
                let s = &self.dataset.samples[bucket.examples[self.rng.below(bucket.examples.len())]];
                batch.push(NoisedItem::new(&schedule_ref, s.identity, s.prompt, &s.latent(), &mut self.rng)?);
            }
            let loss = self.step(&batch, mask)?;
            let batch_identities: BTreeSet<IdentityId> = batch.iter().map(|b| b.identity).collect();
            self.records.push(TraceRecord {
                iteration: self.iteration,
                bucket: bucket.id,
                entry,
                iter_in_bucket,
                loss,
                mask,
                batch_identities: batch_identities.into_iter().collect(),
                meta_down_checksum: self.bank.meta_down_checksum(),
                identity_checksums: if self.config.trace_identity_checksums {
                    self.bank.identity_checksums()
                } else {
                    BTreeMap::new()
                },
            });
            self.iteration += 1;
        }
        Ok(schedule.q_bucket)
    }

    /// Round-robin over buckets until the budget is spent. The budget is checked at
    /// every bucket entry, so the overshoot is below one bucket.
    pub fn run_to_budget(&mut self) -> Result<()> {
        let n = self.buckets.len();
        let mut next = self.entries.len() % n;
        while self.iteration < self.config.q_total {
            self.run_bucket_entry(next)?;
            next = (next + 1) % n;
        }
        Ok(())
    }

    pub fn run(mut self) -> Result<Stage1Output> {
        self.run_to_budget()?;
        let trace = Stage1Trace {
            q_total: self.config.q_total,
            executed_iterations: self.iteration,
            buckets: self.buckets,
            entries: self.entries,
            initial_identity_checksums: self.initial_identity_checksums,
            records: self.records,
        };
        Ok(Stage1Output {
            meta_down: self.bank.into_meta_down(),
            r1: self.config.r1,
            trace,
        })
    }
}

pub fn run_stage1(model: &ToyDenoiser, dataset: &ToyIdentityDataset, config: TrainConfig) -> Result<Stage1Output> {
    MetaTrainer::new(model, dataset, config)?.run()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceAudit {
    pub entries: usize,
    pub warm_up_steps_checked: usize,
    /// Entries whose meta-down factors moved after warm-up.
    pub entries_with_post_warm_up_change: usize,
    pub entries_with_post_warm_up_steps: usize,
    pub isolation_checks: usize,
    pub violations: Vec<String>,
}

impl TraceAudit {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Re-derives the warm-up and isolation contracts from a recorded trace.
pub fn audit_trace(trace: &Stage1Trace) -> TraceAudit {
    let mut audit = TraceAudit {
        entries: trace.entries.len(),
        ..Default::default()
    };
    let mut previous = trace.initial_identity_checksums.clone();
    for entry in &trace.entries {
        let records: Vec<&TraceRecord> = trace.records.iter().filter(|r| r.entry == entry.entry).collect();
        if records.len() != entry.iterations {
            audit.violations.push(format!(
                "entry {} recorded {} steps, expected {}",
                entry.entry,
                records.len(),
                entry.iterations
            ));
        }
        let mut changed = false;
        for r in &records {
            if r.iter_in_bucket < entry.warm_up {
                audit.warm_up_steps_checked += 1;
                if r.mask.meta_down {
                    audit.violations.push(format!("iteration {}: meta-down unmasked during warm-up", r.iteration));
                }
                if r.meta_down_checksum != entry.meta_down_checksum_at_entry {
                    audit
                        .violations
                        .push(format!("iteration {}: meta-down changed during warm-up", r.iteration));
                }
            } else if r.meta_down_checksum != entry.meta_down_checksum_at_entry {
                changed = true;
            }
        }
        if entry.iterations > entry.warm_up {
            audit.entries_with_post_warm_up_steps += 1;
            if changed {
                audit.entries_with_post_warm_up_change += 1;
            } else {
                audit
                    .violations
                    .push(format!("entry {}: meta-down never changed after warm-up", entry.entry));
            }
        }
        for r in &records {
            if r.identity_checksums.is_empty() {
                continue;
            }
            for (id, sum) in &r.identity_checksums {
                if r.batch_identities.contains(id) {
                    continue;
                }
                audit.isolation_checks += 1;
                if previous.get(id) != Some(sum) {
                    audit.violations.push(format!(
                        "iteration {}: identity {id} changed without being in the batch",
                        r.iteration
                    ));
                }
            }
            previous = r.identity_checksums.clone();
        }
    }
    if trace.executed_iterations < trace.q_total {
        audit.violations.push(format!(
            "executed {} iterations, budget {}",
            trace.executed_iterations, trace.q_total
        ));
    }
    if let Some(max_bucket) = trace.buckets.iter().map(|b| b.schedule.q_bucket).max() {
        if trace.executed_iterations >= trace.q_total + max_bucket {
            audit.violations.push(format!(
                "overshot budget {} by a full bucket ({} executed)",
                trace.q_total, trace.executed_iterations
            ));
        }
    }
    audit
}
