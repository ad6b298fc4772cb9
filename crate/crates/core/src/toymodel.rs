//! Toy stand-in for a latent diffusion backbone.
//!
//! Latents are d-vectors, the forward process is the usual
//! `x_t = √ᾱ_t·x0 + √(1-ᾱ_t)·ε`, and the denoiser is a two-layer tanh network
//! `ε̂ = L2(tanh(L1([x_t; time features; prompt one-hot])))` whose two linear maps
//! carry three-factor adapters. No bias terms anywhere; identity only ever enters
//! through adapter factors.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::adapter::{backward_with, forward_with, FactorGrads, FactorRefs, ForwardCache, LayerGrads};
use crate::error::{Error, Result};
use crate::numerics::{combined_checksum, gaussian, AdamWConfig, Checksum, Matrix, Parameter, Rng};

pub const TIME_EMBED_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IdentityId(pub u32);

impl fmt::Display for IdentityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub prompt_vocab: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            latent_dim: 32,
            hidden_dim: 64,
            prompt_vocab: 4,
        }
    }
}

impl ModelDims {
    pub fn input_dim(&self) -> usize {
        self.latent_dim + TIME_EMBED_DIM + self.prompt_vocab
    }

    /// `(d_in, d_out)` of each adapted layer.
    pub fn layer_shapes(&self) -> [(usize, usize); 2] {
        [
            (self.input_dim(), self.hidden_dim),
            (self.hidden_dim, self.latent_dim),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    /// ᾱ linearly spaced from `start` to `end` over `steps` values.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Invalid("schedule needs at least two steps".into()));
        }
        let alpha_bar = (0..steps)
            .map(|t| start + (end - start) * t as f64 / (steps - 1) as f64)
            .collect();
        Self::from_alpha_bar(alpha_bar)
    }

    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() {
            return Err(Error::Invalid("empty schedule".into()));
        }
        if alpha_bar.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(Error::Invalid("ᾱ values must lie in (0, 1]".into()));
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Invalid("ᾱ must be strictly decreasing".into()));
        }
        Ok(DiffusionSchedule { alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn values(&self) -> &[f64] {
        &self.alpha_bar
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        DiffusionSchedule::linear(50, 0.999, 0.01).expect("valid default schedule")
    }
}

/// Returns `(x_t, ε)`.
pub fn noisify(schedule: &DiffusionSchedule, x0: &Matrix, t: usize, rng: &mut Rng) -> Result<(Matrix, Matrix)> {
    if t >= schedule.steps() {
        return Err(Error::Invalid(format!(
            "timestep {t} out of range 0..{}",
            schedule.steps()
        )));
    }
    let eps = gaussian(rng, x0.rows(), x0.cols(), 1.0);
    let a = schedule.alpha_bar(t);
    let xt = x0.scale(a.sqrt()).add(&eps.scale((1.0 - a).sqrt()))?;
    Ok((xt, eps))
}

/// Sinusoidal features of `t / steps` at four octaves.
pub fn time_embedding(t: usize, steps: usize) -> Matrix {
    let s = t as f64 / steps as f64;
    let mut v = Vec::with_capacity(TIME_EMBED_DIM);
    for k in 0..TIME_EMBED_DIM / 2 {
        let w = std::f64::consts::PI * (1u32 << k) as f64 * s;
        v.push(w.sin());
        v.push(w.cos());
    }
    Matrix::column(&v)
}

pub fn prompt_one_hot(prompt: usize, vocab: usize) -> Matrix {
    let mut m = Matrix::zeros(vocab, 1);
    m.set(prompt, 0, 1.0);
    m
}

/// One training example after the forward process.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedItem {
    pub identity: IdentityId,
    pub prompt: usize,
    pub t: usize,
    pub x_t: Matrix,
    pub eps: Matrix,
}

impl NoisedItem {
    pub fn new(
        schedule: &DiffusionSchedule,
        identity: IdentityId,
        prompt: usize,
        x0: &Matrix,
        rng: &mut Rng,
    ) -> Result<Self> {
        let t = rng.below(schedule.steps());
        let (x_t, eps) = noisify(schedule, x0, t, rng)?;
        Ok(NoisedItem {
            identity,
            prompt,
            t,
            x_t,
            eps,
        })
    }
}

pub trait NoisePredictor {
    fn predict_noise(&self, item: &NoisedItem) -> Result<Matrix>;
}

/// Mean over the batch of the per-item mean squared error.
pub fn diffusion_loss_value<P: NoisePredictor + ?Sized>(predictor: &P, batch: &[NoisedItem]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let mut total = 0.0;
    for (index, item) in batch.iter().enumerate() {
        let pred = predictor.predict_noise(item)?;
        let diff = pred.sub(&item.eps)?;
        let l = diff.sum_squares() / diff.data().len() as f64;
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss { index });
        }
        total += l;
    }
    Ok(total / batch.len() as f64)
}

/// Ancestral sampling from pure noise down to `t = 0`.
pub fn sample_latent<P: NoisePredictor + ?Sized>(
    predictor: &P,
    schedule: &DiffusionSchedule,
    latent_dim: usize,
    identity: IdentityId,
    prompt: usize,
    rng: &mut Rng,
) -> Result<Matrix> {
    let mut x = gaussian(rng, latent_dim, 1, 1.0);
    for t in (0..schedule.steps()).rev() {
        let ab = schedule.alpha_bar(t);
        let ab_prev = if t == 0 { 1.0 } else { schedule.alpha_bar(t - 1) };
        let alpha = ab / ab_prev;
        let beta = 1.0 - alpha;
        let item = NoisedItem {
            identity,
            prompt,
            t,
            x_t: x.clone(),
            eps: Matrix::zeros(latent_dim, 1),
        };
        let eps = predictor.predict_noise(&item)?;
        let coef = beta / (1.0 - ab).sqrt();
        let mut mean = x.sub(&eps.scale(coef))?.scale(1.0 / alpha.sqrt());
        if t > 0 {
            let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
            mean.add_assign(&gaussian(rng, latent_dim, 1, sigma))?;
        }
        x = mean;
    }
    x.ensure_finite("sampled latent")?;
    Ok(x)
}

pub type AdapterRefs<'a> = [FactorRefs<'a>; 2];

#[derive(Debug, Clone)]
pub struct DenoiserCache {
    layer1: ForwardCache,
    activation: Matrix,
    layer2: ForwardCache,
}

#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    dims: ModelDims,
    schedule: DiffusionSchedule,
    base: [Parameter; 2],
    pub scale: f64,
}

impl ToyDenoiser {
    pub fn new(dims: ModelDims, schedule: DiffusionSchedule, rng: &mut Rng, hyper: AdamWConfig) -> Self {
        let [(i1, o1), (i2, o2)] = dims.layer_shapes();
        let w1 = gaussian(rng, o1, i1, 1.0 / (i1 as f64).sqrt());
        let w2 = gaussian(rng, o2, i2, 1.0 / (i2 as f64).sqrt());
        ToyDenoiser {
            dims,
            schedule,
            base: [Parameter::new("layer1.w0", w1, hyper), Parameter::new("layer2.w0", w2, hyper)],
            scale: 1.0,
        }
    }

    pub fn from_weights(dims: ModelDims, schedule: DiffusionSchedule, w1: Matrix, w2: Matrix, frozen: bool) -> Result<Self> {
        let [(i1, o1), (i2, o2)] = dims.layer_shapes();
        if w1.shape() != (o1, i1) {
            return Err(Error::dim("layer1.w0", w1.shape(), (o1, i1)));
        }
        if w2.shape() != (o2, i2) {
            return Err(Error::dim("layer2.w0", w2.shape(), (o2, i2)));
        }
        let hyper = AdamWConfig::default();
        let mut base = [Parameter::new("layer1.w0", w1, hyper), Parameter::new("layer2.w0", w2, hyper)];
        if frozen {
            base.iter_mut().for_each(Parameter::freeze);
        }
        Ok(ToyDenoiser {
            dims,
            schedule,
            base,
            scale: 1.0,
        })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    pub fn base_weight(&self, layer: usize) -> &Matrix {
        self.base[layer].value()
    }

    pub fn is_frozen(&self) -> bool {
        self.base.iter().all(Parameter::is_frozen)
    }

    pub fn freeze(&mut self) {
        self.base.iter_mut().for_each(Parameter::freeze);
    }

    /// Combined checksum of both base weights.
    pub fn base_checksum(&self) -> Checksum {
        combined_checksum(self.base.iter().map(Parameter::value))
    }

    pub fn apply_base_grads(&mut self, grads: &[Matrix; 2]) -> Result<()> {
        for (p, g) in self.base.iter_mut().zip(grads) {
            p.step(g)?;
        }
        Ok(())
    }

    pub fn input_features(&self, x_t: &Matrix, t: usize, prompt: usize) -> Result<Matrix> {
        if prompt >= self.dims.prompt_vocab {
            return Err(Error::Invalid(format!(
                "prompt code {prompt} outside vocabulary of {}",
                self.dims.prompt_vocab
            )));
        }
        if x_t.shape() != (self.dims.latent_dim, 1) {
            return Err(Error::dim("input_features", x_t.shape(), (self.dims.latent_dim, 1)));
        }
        Matrix::vstack(&[
            x_t,
            &time_embedding(t, self.schedule.steps()),
            &prompt_one_hot(prompt, self.dims.prompt_vocab),
        ])
    }

    pub fn forward(&self, input: &Matrix, adapters: Option<&AdapterRefs<'_>>) -> Result<(Matrix, DenoiserCache)> {
        let (pre, layer1) = forward_with(self.base[0].value(), adapters.map(|a| a[0]), self.scale, input)?;
        let activation = pre.map(f64::tanh);
        let (out, layer2) = forward_with(self.base[1].value(), adapters.map(|a| a[1]), self.scale, &activation)?;
        Ok((
            out,
            DenoiserCache {
                layer1,
                activation,
                layer2,
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &DenoiserCache,
        adapters: Option<&AdapterRefs<'_>>,
        grad_out: &Matrix,
    ) -> Result<[LayerGrads; 2]> {
        let g2 = backward_with(self.base[1].value(), adapters.map(|a| a[1]), self.scale, &cache.layer2, grad_out)?;
        let dtanh = cache.activation.map(|a| 1.0 - a * a);
        let g_pre = g2.input.hadamard(&dtanh)?;
        let g1 = backward_with(self.base[0].value(), adapters.map(|a| a[0]), self.scale, &cache.layer1, &g_pre)?;
        Ok([g1, g2])
    }

    pub fn predict(&self, item: &NoisedItem, adapters: Option<&AdapterRefs<'_>>) -> Result<Matrix> {
        let input = self.input_features(&item.x_t, item.t, item.prompt)?;
        Ok(self.forward(&input, adapters)?.0)
    }

    /// Loss over `batch` with adapters looked up per item identity, plus gradients
    /// for the base weights and for every identity present.
    pub fn loss_and_grads<'a, F>(&self, batch: &[NoisedItem], adapters_for: F) -> Result<LossGrads>
    where
        F: Fn(IdentityId) -> Option<AdapterRefs<'a>>,
    {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let n = batch.len() as f64;
        let d = self.dims.latent_dim as f64;
        let [(i1, o1), (i2, o2)] = self.dims.layer_shapes();
        let mut out = LossGrads {
            loss: 0.0,
            base: [Matrix::zeros(o1, i1), Matrix::zeros(o2, i2)],
            identities: BTreeMap::new(),
        };
        for (index, item) in batch.iter().enumerate() {
            let adapters = adapters_for(item.identity);
            let input = self.input_features(&item.x_t, item.t, item.prompt)?;
            let (pred, cache) = self.forward(&input, adapters.as_ref())?;
            let diff = pred.sub(&item.eps)?;
            let l = diff.sum_squares() / d;
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss { index });
            }
            out.loss += l / n;
            let grad_out = diff.scale(2.0 / (d * n));
            let [g1, g2] = self.backward(&cache, adapters.as_ref(), &grad_out)?;
            out.base[0].add_assign(&g1.w0)?;
            out.base[1].add_assign(&g2.w0)?;
            if let (Some(f1), Some(f2)) = (g1.factors, g2.factors) {
                match out.identities.get_mut(&item.identity) {
                    Some([a1, a2]) => {
                        accumulate(a1, &f1)?;
                        accumulate(a2, &f2)?;
                    }
                    None => {
                        out.identities.insert(item.identity, [f1, f2]);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(into: &mut FactorGrads, from: &FactorGrads) -> Result<()> {
    into.meta_down.add_assign(&from.meta_down)?;
    into.mid.add_assign(&from.mid)?;
    into.up.add_assign(&from.up)
}

#[derive(Debug, Clone)]
pub struct LossGrads {
    pub loss: f64,
    pub base: [Matrix; 2],
    /// Per identity, per layer. `meta_down` entries are that identity's share of the
    /// shared factor's gradient.
    pub identities: BTreeMap<IdentityId, [FactorGrads; 2]>,
}

impl LossGrads {
    /// Sum of the shared meta-down gradient over all identities in the batch.
    pub fn meta_down_total(&self) -> Option<[Matrix; 2]> {
        let mut it = self.identities.values();
        let first = it.next()?;
        let mut total = [first[0].meta_down.clone(), first[1].meta_down.clone()];
        for g in it {
            total[0].add_assign(&g[0].meta_down).ok()?;
            total[1].add_assign(&g[1].meta_down).ok()?;
        }
        Some(total)
    }
}

/// A denoiser bound to one adapter set, usable wherever a [`NoisePredictor`] is expected.
pub struct BoundDenoiser<'m, 'a> {
    pub model: &'m ToyDenoiser,
    pub adapters: Option<AdapterRefs<'a>>,
}

impl NoisePredictor for BoundDenoiser<'_, '_> {
    fn predict_noise(&self, item: &NoisedItem) -> Result<Matrix> {
        self.model.predict(item, self.adapters.as_ref())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Reference,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub identity: IdentityId,
    pub index: usize,
    pub prompt: usize,
    pub split: Split,
    pub x0: Vec<f64>,
}

impl Sample {
    pub fn latent(&self) -> Matrix {
        Matrix::column(&self.x0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub latent_dim: usize,
    pub prompt_vocab: usize,
    pub identities: usize,
    pub samples_per_identity: usize,
    pub prototype_norm: f64,
    /// Prototypes live in a random subspace of this dimension (the shared structure
    /// a meta-learned projection can pick up).
    pub subspace_dim: usize,
    /// Perturbation RMS norm as a fraction of the prototype norm.
    pub perturbation_ratio: f64,
    pub prompt_offset_norm: f64,
    /// Degenerate control: every identity shares one prototype.
    pub single_prototype: bool,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            latent_dim: 32,
            prompt_vocab: 4,
            identities: 20,
            samples_per_identity: 20,
            prototype_norm: 8.0,
            subspace_dim: 16,
            perturbation_ratio: 0.1,
            prompt_offset_norm: 1.0,
            single_prototype: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyIdentityDataset {
    pub config: DatasetConfig,
    pub perturbation_std: f64,
    pub prototypes: BTreeMap<IdentityId, Vec<f64>>,
    pub prompt_offsets: Vec<Vec<f64>>,
    pub samples: Vec<Sample>,
}

const MAX_PROTOTYPE_ATTEMPTS: usize = 10_000;

impl ToyIdentityDataset {
    pub fn generate(config: DatasetConfig) -> Result<Self> {
        let d = config.latent_dim;
        if config.identities == 0 || config.samples_per_identity == 0 || d == 0 || config.prompt_vocab == 0 {
            return Err(Error::Invalid("dataset dimensions must be positive".into()));
        }
        if config.subspace_dim == 0 || config.subspace_dim > d {
            return Err(Error::Invalid(format!(
                "subspace_dim {} outside 1..={d}",
                config.subspace_dim
            )));
        }
        let mut rng = Rng::new(config.seed);
        let basis = gaussian(&mut rng, d, config.subspace_dim, 1.0);
        let perturbation_norm = config.perturbation_ratio * config.prototype_norm;
        let min_sep = 4.0 * perturbation_norm;

        let mut prototypes: BTreeMap<IdentityId, Vec<f64>> = BTreeMap::new();
        let draw = |rng: &mut Rng| -> Vec<f64> {
            let z = gaussian(rng, config.subspace_dim, 1, 1.0);
            let p = basis.matmul(&z).expect("basis shape");
            let norm = p.frobenius();
            p.scale(config.prototype_norm / norm).into_data()
        };
        let shared = draw(&mut rng);
        for i in 0..config.identities {
            let id = IdentityId(i as u32);
            if config.single_prototype {
                prototypes.insert(id, shared.clone());
                continue;
            }
            let mut attempts = 0;
            loop {
                let cand = draw(&mut rng);
                let ok = prototypes.values().all(|p| distance(p, &cand) >= min_sep);
                if ok {
                    prototypes.insert(id, cand);
                    break;
                }
                attempts += 1;
                if attempts >= MAX_PROTOTYPE_ATTEMPTS {
                    return Err(Error::Invalid(format!(
                        "could not place prototype {i} at separation {min_sep:.3}"
                    )));
                }
            }
        }

        let prompt_offsets: Vec<Vec<f64>> = (0..config.prompt_vocab)
            .map(|_| {
                let v = gaussian(&mut rng, d, 1, 1.0);
                let n = v.frobenius();
                v.scale(config.prompt_offset_norm / n).into_data()
            })
            .collect();

        let perturbation_std = perturbation_norm / (d as f64).sqrt();
        let mut samples = Vec::with_capacity(config.identities * config.samples_per_identity);
        for (id, proto) in &prototypes {
            for index in 0..config.samples_per_identity {
                let prompt = rng.below(config.prompt_vocab);
                let noise = gaussian(&mut rng, d, 1, perturbation_std);
                let x0 = proto
                    .iter()
                    .zip(&prompt_offsets[prompt])
                    .zip(noise.data())
                    .map(|((p, o), n)| p + o + n)
                    .collect();
                samples.push(Sample {
                    identity: *id,
                    index,
                    prompt,
                    split: if index == 0 { Split::Reference } else { Split::Test },
                    x0,
                });
            }
        }
        Ok(ToyIdentityDataset {
            config,
            perturbation_std,
            prototypes,
            prompt_offsets,
            samples,
        })
    }

    pub fn identity_ids(&self) -> Vec<IdentityId> {
        self.prototypes.keys().copied().collect()
    }

    pub fn samples_of(&self, id: IdentityId) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.identity == id)
    }

    pub fn reference_of(&self, id: IdentityId) -> Option<&Sample> {
        self.samples_of(id).find(|s| s.split == Split::Reference)
    }

    /// Restricts to the given identities, keeping sample order.
    pub fn subset(&self, ids: &[IdentityId]) -> ToyIdentityDataset {
        let keep = |id: &IdentityId| ids.contains(id);
        ToyIdentityDataset {
            config: self.config,
            perturbation_std: self.perturbation_std,
            prototypes: self
                .prototypes
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (*k, v.clone()))
                .collect(),
            prompt_offsets: self.prompt_offsets.clone(),
            samples: self.samples.iter().filter(|s| keep(&s.identity)).cloned().collect(),
        }
    }

    /// Smallest pairwise prototype distance, `None` with fewer than two prototypes.
    pub fn min_separation(&self) -> Option<f64> {
        let protos: Vec<&Vec<f64>> = self.prototypes.values().collect();
        let mut best: Option<f64> = None;
        for i in 0..protos.len() {
            for j in i + 1..protos.len() {
                let dist = distance(protos[i], protos[j]);
                best = Some(best.map_or(dist, |b| b.min(dist)));
            }
        }
        best
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Pass when the held-in evaluation loss ends at or below this fraction of its initial value.
    pub target_ratio: f64,
    pub eval_items: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            iterations: 3000,
            batch_size: 16,
            lr: 3e-3,
            target_ratio: 0.8,
            eval_items: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub model: ToyDenoiser,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub losses: Vec<f64>,
    pub checksum: Checksum,
}

/// Fixed evaluation items drawn once from `samples`.
pub fn draw_eval_items(
    schedule: &DiffusionSchedule,
    samples: &[&Sample],
    count: usize,
    rng: &mut Rng,
) -> Result<Vec<NoisedItem>> {
    if samples.is_empty() {
        return Err(Error::Invalid("no samples to draw evaluation items from".into()));
    }
    (0..count)
        .map(|_| {
            let s = samples[rng.below(samples.len())];
            NoisedItem::new(schedule, s.identity, s.prompt, &s.latent(), rng)
        })
        .collect()
}

/// Trains both base weights on the pooled samples (identity labels unused), then freezes them.
pub fn pretrain_base(
    dataset: &ToyIdentityDataset,
    dims: ModelDims,
    schedule: DiffusionSchedule,
    config: &PretrainConfig,
) -> Result<PretrainOutput> {
    if dataset.samples.is_empty() {
        return Err(Error::Invalid("empty dataset".into()));
    }
    let mut rng = Rng::new(config.seed);
    let mut model = ToyDenoiser::new(dims, schedule, &mut rng.fork(), AdamWConfig::with_lr(config.lr));
    let pooled: Vec<&Sample> = dataset.samples.iter().collect();
    let eval = draw_eval_items(&model.schedule, &pooled, config.eval_items, &mut rng.fork())?;
    let base_loss = |m: &ToyDenoiser| diffusion_loss_value(&BoundDenoiser { model: m, adapters: None }, &eval);
    let initial_loss = base_loss(&model)?;
    let mut losses = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let batch = draw_eval_items(&model.schedule, &pooled, config.batch_size, &mut rng)?;
        let lg = model.loss_and_grads(&batch, |_| None).map_err(|e| match e {
            Error::NonFiniteLoss { .. } | Error::NonFinite { .. } => Error::Divergence {
                iteration: it,
                message: e.to_string(),
            },
            other => other,
        })?;
        losses.push(lg.loss);
        model.apply_base_grads(&lg.base)?;
    }
    let final_loss = base_loss(&model)?;
    let threshold = config.target_ratio * initial_loss;
    if !(final_loss <= threshold) {
        return Err(Error::NotConverged {
            iterations: config.iterations,
            final_loss,
            threshold,
        });
    }
    model.freeze();
    let checksum = model.base_checksum();
    Ok(PretrainOutput {
        model,
        initial_loss,
        final_loss,
        losses,
        checksum,
    })
}
