//! End-to-end adaptation-speed comparison on the toy task: pretrain a base, meta-train
//! the shared down factors on training identities, then personalize held-out identities
//! with the meta-trained factors and with random ones.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metatrain::{run_stage1, TrainConfig};
use crate::numerics::{AdamWConfig, Checksum, Rng};
use crate::personalize::{
    adaptation_speed_experiment, Baseline, FrozenMetaDown, IdentitySpeed, PersonalizeConfig, ReferenceExample,
    SpeedConfig,
};
use crate::toymodel::{
    draw_eval_items, pretrain_base, DatasetConfig, DiffusionSchedule, IdentityId, ModelDims, PretrainConfig, Sample,
    Split, ToyIdentityDataset,
};

/// Stage-2 learning rate for desk runs: 375 batch-1 steps at the full-scale rate barely
/// move the toy adapter.
pub const DESK_STAGE2_LR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub heldout_identities: usize,
    pub dims: ModelDims,
    pub pretrain: PretrainConfig,
    pub stage1: TrainConfig,
    pub stage2: PersonalizeConfig,
    pub speed: SpeedConfig,
    pub seeds: Vec<u64>,
    /// Worker threads across seeds; 0 uses the rayon default. Results do not depend on it.
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            heldout_identities: 4,
            dims: ModelDims::default(),
            pretrain: PretrainConfig::default(),
            stage1: TrainConfig::default(),
            stage2: PersonalizeConfig {
                optimizer: AdamWConfig::with_lr(DESK_STAGE2_LR),
                ..PersonalizeConfig::default()
            },
            speed: SpeedConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub heldout: Vec<IdentityId>,
    pub pretrain_initial_loss: f64,
    pub pretrain_final_loss: f64,
    pub stage1_iterations: usize,
    pub meta_down_checksum: Checksum,
    pub meta: Vec<IdentitySpeed>,
    pub random: Vec<IdentitySpeed>,
    pub median_meta: f64,
    pub median_random: f64,
}

impl SeedResult {
    pub fn meta_wins(&self) -> bool {
        self.median_meta < self.median_random
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seeds: Vec<SeedResult>,
    pub median_meta: f64,
    pub median_random: f64,
    pub meta_wins: usize,
    pub random_wins: usize,
    pub ties: usize,
    /// Two-sided exact sign test over per-seed medians (ties dropped).
    pub sign_test_p: f64,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Two-sided exact binomial sign test with p = 1/2.
pub fn sign_test(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let k = wins.min(losses);
    let mut coeff = 1.0f64;
    let mut tail = 0.0;
    for i in 0..=k {
        if i > 0 {
            coeff *= (n - i + 1) as f64 / i as f64;
        }
        tail += coeff;
    }
    (2.0 * tail / 2f64.powi(n as i32)).min(1.0)
}

/// Splits identities into training and held-out sets with a seeded shuffle.
pub fn split_identities(dataset: &ToyIdentityDataset, heldout: usize, rng: &mut Rng) -> Result<(Vec<IdentityId>, Vec<IdentityId>)> {
    let mut ids = dataset.identity_ids();
    if heldout == 0 || heldout >= ids.len() {
        return Err(Error::Config(format!(
            "held-out count {heldout} must be in 1..{}",
            ids.len()
        )));
    }
    rng.shuffle(&mut ids);
    let train = ids.split_off(heldout);
    let mut held = ids;
    held.sort();
    let mut train = train;
    train.sort();
    Ok((train, held))
}

pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedResult> {
    let mut rng = Rng::new(seed);
    let dataset = ToyIdentityDataset::generate(DatasetConfig {
        seed: rng.next_u64(),
        ..config.dataset
    })?;
    let (train_ids, held_ids) = split_identities(&dataset, config.heldout_identities, &mut rng)?;
    let train = dataset.subset(&train_ids);
    let schedule = DiffusionSchedule::default();

    let pre = pretrain_base(
        &train,
        config.dims,
        schedule.clone(),
        &PretrainConfig {
            seed: rng.next_u64(),
            ..config.pretrain
        },
    )?;
    let model = pre.model;
    let stage1 = run_stage1(
        &model,
        &train,
        TrainConfig {
            seed: rng.next_u64(),
            trace_identity_checksums: false,
            ..config.stage1.clone()
        },
    )?;
    let meta = FrozenMetaDown::new(stage1.meta_down)?;
    let random = FrozenMetaDown::random(&model, config.stage1.r1, &mut rng.fork())?;

    let mut eval_rng = rng.fork();
    let heldout = held_ids
        .iter()
        .map(|&id| {
            let reference = dataset
                .reference_of(id)
                .ok_or_else(|| Error::Invalid(format!("identity {id} has no reference sample")))?;
            let tests: Vec<&Sample> = dataset.samples_of(id).filter(|s| s.split == Split::Test).collect();
            let items = draw_eval_items(&schedule, &tests, config.speed.eval_items, &mut eval_rng)?;
            Ok((ReferenceExample::toy(reference.clone()), items))
        })
        .collect::<Result<Vec<_>>>()?;

    let stage2 = PersonalizeConfig {
        seed: rng.next_u64(),
        ..config.stage2.clone()
    };
    let meta_speed = adaptation_speed_experiment(&model, &heldout, &meta, Baseline::Meta, &stage2, &config.speed)?;
    let random_speed =
        adaptation_speed_experiment(&model, &heldout, &random, Baseline::RandomLomd, &stage2, &config.speed)?;
    let iters = |v: &[IdentitySpeed]| v.iter().map(|s| s.hit.iterations as f64).collect::<Vec<_>>();
    Ok(SeedResult {
        seed,
        heldout: held_ids,
        pretrain_initial_loss: pre.initial_loss,
        pretrain_final_loss: pre.final_loss,
        stage1_iterations: stage1.trace.executed_iterations,
        meta_down_checksum: meta.checksum(),
        median_meta: median(&iters(&meta_speed)),
        median_random: median(&iters(&random_speed)),
        meta: meta_speed,
        random: random_speed,
    })
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let run = || -> Result<Vec<SeedResult>> { config.seeds.par_iter().map(|&s| run_seed(config, s)).collect() };
    let seeds = if config.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run)?
    } else {
        run()?
    };
    let meta_wins = seeds.iter().filter(|s| s.median_meta < s.median_random).count();
    let random_wins = seeds.iter().filter(|s| s.median_meta > s.median_random).count();
    let all = |f: fn(&SeedResult) -> &Vec<IdentitySpeed>| {
        seeds
            .iter()
            .flat_map(|s| f(s).iter().map(|x| x.hit.iterations as f64))
            .collect::<Vec<_>>()
    };
    Ok(ExperimentReport {
        median_meta: median(&all(|s| &s.meta)),
        median_random: median(&all(|s| &s.random)),
        meta_wins,
        random_wins,
        ties: seeds.len() - meta_wins - random_wins,
        sign_test_p: sign_test(meta_wins, random_wins),
        seeds,
    })
}

/// Per-iteration held-out loss curves as CSV: `seed,baseline,identity,iteration,loss`.
pub fn curves_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("seed,baseline,identity,iteration,loss\n");
    for s in &report.seeds {
        for run in s.meta.iter().chain(&s.random) {
            let b = match run.baseline {
                Baseline::Meta => "meta",
                Baseline::RandomLomd => "random-lomd",
            };
            for (k, v) in run.curve.iter().enumerate() {
                out.push_str(&format!("{},{},{},{},{:.9e}\n", s.seed, b, run.identity, k, v));
            }
        }
    }
    out
}

/// Mean relative loss curve (loss / initial loss) per baseline, drawn as a small SVG.
pub fn curves_svg(report: &ExperimentReport, tau_fraction: f64) -> String {
    let mean_curve = |pick: fn(&SeedResult) -> &Vec<IdentitySpeed>| -> Vec<f64> {
        let runs: Vec<&IdentitySpeed> = report.seeds.iter().flat_map(|s| pick(s).iter()).collect();
        let len = runs.iter().map(|r| r.curve.len()).min().unwrap_or(0);
        (0..len)
            .map(|k| runs.iter().map(|r| r.curve[k] / r.initial_loss).sum::<f64>() / runs.len() as f64)
            .collect()
    };
    let curves = [
        ("meta", "#1f77b4", mean_curve(|s| &s.meta)),
        ("random-lomd", "#d62728", mean_curve(|s| &s.random)),
    ];
    let (w, h, pad) = (640.0, 400.0, 40.0);
    let n = curves.iter().map(|c| c.2.len()).max().unwrap_or(1).max(2);
    let ymax = curves
        .iter()
        .flat_map(|c| c.2.iter().copied())
        .fold(1.0f64, f64::max);
    let px = |k: usize| pad + (w - 2.0 * pad) * k as f64 / (n - 1) as f64;
    let py = |v: f64| h - pad - (h - 2.0 * pad) * (v / ymax).clamp(0.0, 1.0);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{t:.2}\" x2=\"{r}\" y2=\"{t:.2}\" stroke=\"gray\" stroke-dasharray=\"4 4\"/>\n",
        b = h - pad,
        r = w - pad,
        t = py(tau_fraction),
    );
    for (i, (name, color, c)) in curves.iter().enumerate() {
        let pts: Vec<String> = c.iter().enumerate().map(|(k, v)| format!("{:.2},{:.2}", px(k), py(*v))).collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\" font-size=\"12\">{name}</text>\n",
            w - pad - 90.0,
            pad + 16.0 * i as f64
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{pad}\" y=\"{}\" font-size=\"12\">iteration (0..{})</text>\n</svg>\n",
        h - 10.0,
        n - 1
    ));
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn sign_test_values() {
        assert_eq!(sign_test(0, 0), 1.0);
        // 5-0: 2 / 32
        assert!((sign_test(5, 0) - 0.0625).abs() < 1e-15);
        // 4-1: 2 * 6 / 32
        assert!((sign_test(4, 1) - 0.375).abs() < 1e-15);
        assert_eq!(sign_test(2, 2), 1.0);
    }
}
