use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use metalora::adapter::merge;
use metalora::artifacts::{
    base_checkpoint, load_base, load_personalized, merge_gap, merged_checkpoint, personalized_checkpoint,
    stage1_checkpoint, Provenance,
};
use metalora::augment::{plan_crops, sample_view, Rect};
use metalora::checkpoint::Checkpoint;
use metalora::config::RunConfig;
use metalora::eval::{
    evaluate, CopyReferenceGenerator, EvalManifest, Generator, JointEmbedder, PrecomputedEmbedder,
    PrecomputedGenerator, PrecomputedJoint,
};
use metalora::experiment::{curves_csv, curves_svg, run_experiment, split_identities};
use metalora::metatrain::{audit_trace, run_stage1};
use metalora::numerics::{Checksum, Rng};
use metalora::personalize::{load_stage1, run_stage2, ReferenceExample};
use metalora::toymodel::{
    draw_eval_items, pretrain_base, DiffusionSchedule, IdentityId, Sample, Split, ToyIdentityDataset,
};
use metalora::{Error, Result};

use crate::{Command, Common};

/// Inputs per layer used by `merge --verify`.
const VERIFY_INPUTS: usize = 100;
const VERIFY_TOLERANCE: f64 = 1e-12;
/// Best-so-far checkpoints reported after personalization.
const LOSS_GRID: [usize; 5] = [250, 375, 500, 625, 750];

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Invalid(_) | Error::Rank(_) | Error::RankMismatch { .. } => 2,
        Error::Io(_) | Error::Parse { .. } | Error::Json(_) => 3,
        e if e.is_numeric() => 4,
        _ => 1,
    }
}

pub fn error_record(e: &Error, code: u8) -> Value {
    let kind = match e {
        Error::Config(_) => "config",
        Error::Invalid(_) => "invalid-argument",
        Error::Rank(_) | Error::RankMismatch { .. } => "rank",
        Error::Io(_) => "io",
        Error::Parse { .. } => "parse",
        Error::Json(_) => "json",
        Error::Eval(_) => "evaluation",
        e if e.is_numeric() => "numeric",
        _ => "internal",
    };
    let mut rec = json!({ "error": kind, "message": e.to_string(), "exit_code": code });
    match e {
        Error::Parse { offset, .. } => rec["offset"] = json!(offset),
        Error::Divergence { iteration, .. } => rec["iteration"] = json!(iteration),
        _ => {}
    }
    rec
}

/// JSON-lines run trace; the first line always carries the full config echo and hash.
struct Trace {
    out: BufWriter<File>,
}

impl Trace {
    fn open(primary: &Path, command: &str, cfg: &RunConfig) -> Result<Self> {
        let mut name = primary.as_os_str().to_owned();
        name.push(".trace.jsonl");
        let mut t = Trace {
            out: BufWriter::new(File::create(PathBuf::from(name))?),
        };
        t.event(&json!({
            "event": "run",
            "command": command,
            "config_hash": cfg.hash(),
            "config": cfg.echo(),
        }))?;
        Ok(t)
    }

    fn event(&mut self, v: &impl Serialize) -> Result<()> {
        serde_json::to_writer(&mut self.out, v)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn provenance(cfg: &RunConfig) -> Provenance {
    Provenance {
        seed: cfg.seed,
        config_hash: cfg.hash(),
    }
}

fn out_path(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn load_dataset(cfg: &RunConfig, data: Option<&Path>) -> Result<ToyIdentityDataset> {
    match data {
        Some(p) => Ok(serde_json::from_slice(&std::fs::read(p)?)?),
        None => ToyIdentityDataset::generate(cfg.dataset_config()),
    }
}

/// Training / held-out identity split shared by every command for a given seed.
fn split(cfg: &RunConfig, dataset: &ToyIdentityDataset) -> Result<(Vec<IdentityId>, Vec<IdentityId>)> {
    split_identities(dataset, cfg.heldout_identities, &mut Rng::new(cfg.seed).fork())
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, v)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { common } => gen_data(&common),
        Command::Pretrain { common, data } => pretrain(&common, data.as_deref()),
        Command::Metatrain {
            common,
            checkpoint,
            data,
        } => metatrain(&common, &checkpoint, data.as_deref()),
        Command::Personalize {
            common,
            checkpoint,
            base,
            data,
            identity,
        } => personalize(&common, &checkpoint, &base, data.as_deref(), identity),
        Command::Merge {
            common,
            checkpoint,
            verify,
            base,
        } => merge_cmd(&common, &checkpoint, verify, base.as_deref()),
        Command::Evaluate {
            common,
            manifest,
            embeddings,
            joint,
            copy_reference,
        } => evaluate_cmd(&common, &manifest, &embeddings, joint.as_deref(), copy_reference),
        Command::AugmentPlan {
            common,
            width,
            height,
            face,
            draws,
        } => augment_plan(&common, width, height, &face, draws),
        Command::SpeedExperiment { common } => speed_experiment(&common),
    }
}

fn gen_data(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let out = out_path(common, "dataset.json");
    let mut trace = Trace::open(&out, "gen-data", &cfg)?;
    let dataset = ToyIdentityDataset::generate(cfg.dataset_config())?;
    write_json(&out, &dataset)?;
    trace.event(&json!({
        "event": "dataset",
        "identities": dataset.identity_ids().len(),
        "samples": dataset.samples.len(),
        "min_separation": dataset.min_separation(),
        "perturbation_std": dataset.perturbation_std,
    }))
}

fn pretrain(common: &Common, data: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let out = out_path(common, "base.ckpt");
    let mut trace = Trace::open(&out, "pretrain", &cfg)?;
    let dataset = load_dataset(&cfg, data)?;
    let (train_ids, heldout) = split(&cfg, &dataset)?;
    let result = pretrain_base(
        &dataset.subset(&train_ids),
        cfg.dims(),
        DiffusionSchedule::default(),
        &cfg.pretrain_config(),
    )?;
    base_checkpoint(&result.model, &provenance(&cfg))?.save(&out)?;
    for (iteration, loss) in result.losses.iter().enumerate() {
        trace.event(&json!({ "event": "step", "iteration": iteration, "loss": loss }))?;
    }
    trace.event(&json!({
        "event": "done",
        "train_identities": train_ids,
        "heldout_identities": heldout,
        "initial_loss": result.initial_loss,
        "final_loss": result.final_loss,
        "base_checksum": result.checksum,
    }))?;
    println!(
        "base trained: eval loss {:.4} -> {:.4}, checksum {}",
        result.initial_loss, result.final_loss, result.checksum
    );
    Ok(())
}

fn metatrain(common: &Common, base: &Path, data: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let out = out_path(common, "stage1.ckpt");
    let mut trace = Trace::open(&out, "metatrain", &cfg)?;
    let model = load_base(&Checkpoint::load(base)?)?;
    let dataset = load_dataset(&cfg, data)?;
    let (train_ids, _) = split(&cfg, &dataset)?;
    let result = run_stage1(&model, &dataset.subset(&train_ids), cfg.train_config())?;
    let audit = audit_trace(&result.trace);
    stage1_checkpoint(
        [&result.meta_down[0], &result.meta_down[1]],
        cfg.r2,
        model.base_checksum(),
        &provenance(&cfg),
    )?
    .save(&out)?;
    for e in &result.trace.entries {
        trace.event(&json!({ "event": "bucket_entry", "entry": e }))?;
    }
    for r in &result.trace.records {
        trace.event(&json!({
            "event": "step",
            "iteration": r.iteration,
            "bucket": r.bucket,
            "loss": r.loss,
            "mask": r.mask,
            "meta_down_checksum": r.meta_down_checksum,
        }))?;
    }
    trace.event(&json!({
        "event": "done",
        "executed_iterations": result.trace.executed_iterations,
        "buckets": result.trace.buckets,
        "audit": audit,
    }))?;
    println!(
        "stage 1: {} iterations over {} buckets, warm-up audit {}",
        result.trace.executed_iterations,
        result.trace.buckets.len(),
        if audit.passed() { "passed" } else { "FAILED" }
    );
    if !audit.passed() {
        return Err(Error::Verification(audit.violations.join("; ")));
    }
    Ok(())
}

fn personalize(
    common: &Common,
    stage1: &Path,
    base: &Path,
    data: Option<&Path>,
    identity: Option<u32>,
) -> Result<()> {
    let cfg = load_config(common)?;
    let out = out_path(common, "personalized.ckpt");
    let mut trace = Trace::open(&out, "personalize", &cfg)?;
    let model = load_base(&Checkpoint::load(base)?)?;
    let s1 = Checkpoint::load(stage1)?;
    let meta_down = load_stage1(&s1, cfg.r1)?;
    if let Some(v) = s1.header.extra.get("base_checksum") {
        let recorded: Checksum = serde_json::from_value(v.clone())?;
        if recorded != model.base_checksum() {
            return Err(Error::Invalid(format!(
                "stage-1 checkpoint was trained on base {recorded}, got base {}",
                model.base_checksum()
            )));
        }
    }
    let dataset = load_dataset(&cfg, data)?;
    let id = match identity {
        Some(i) => IdentityId(i),
        None => split(&cfg, &dataset)?.1[0],
    };
    let reference = dataset
        .reference_of(id)
        .ok_or_else(|| Error::Invalid(format!("identity {id} not in dataset")))?;
    let tests: Vec<&Sample> = dataset.samples_of(id).filter(|s| s.split == Split::Test).collect();
    let eval = draw_eval_items(
        model.schedule(),
        &tests,
        cfg.speed_eval_items,
        &mut Rng::new(cfg.seed).fork(),
    )?;
    let result = run_stage2(
        &model,
        &meta_down,
        &[ReferenceExample::toy(reference.clone())],
        &cfg.personalize_config(),
        Some(&eval),
    )?;
    personalized_checkpoint(&result, &provenance(&cfg))?.save(&out)?;
    let eval_curve = result.eval_losses.clone().unwrap_or_default();
    for (k, loss) in result.train_losses.iter().enumerate() {
        trace.event(&json!({
            "event": "step",
            "iteration": k,
            "loss": loss,
            "heldout_loss": eval_curve.get(k + 1),
        }))?;
    }
    let grid: Vec<usize> = LOSS_GRID.iter().copied().filter(|g| *g <= cfg.q_st2).collect();
    trace.event(&json!({
        "event": "done",
        "identity": id,
        "augmented_views": result.augmented_views,
        "heldout_loss_initial": eval_curve.first(),
        "heldout_loss_final": eval_curve.last(),
        "best_so_far": grid.iter().zip(result.best_so_far_at(&grid)).collect::<Vec<_>>(),
        "meta_down_checksum": result.meta_down_checksum_after,
    }))?;
    println!(
        "identity {id}: held-out loss {:.4} -> {:.4} over {} iterations ({} augmented views)",
        eval_curve.first().copied().unwrap_or(f64::NAN),
        eval_curve.last().copied().unwrap_or(f64::NAN),
        cfg.q_st2,
        result.augmented_views
    );
    Ok(())
}

fn merge_cmd(common: &Common, personalized: &Path, verify: bool, base: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let out = out_path(common, "merged.ckpt");
    let mut trace = Trace::open(&out, "merge", &cfg)?;
    let (identity, factors) = load_personalized(&Checkpoint::load(personalized)?)?;
    let merged = [merge(&factors[0]), merge(&factors[1])];
    merged_checkpoint(&merged, identity, &provenance(&cfg))?.save(&out)?;
    let mut report = json!({ "event": "done", "identity": identity, "rank": merged[0].rank_bound() });
    if verify {
        let base = base.ok_or_else(|| Error::Config("--verify needs --base".into()))?;
        let model = load_base(&Checkpoint::load(base)?)?;
        let mut rng = Rng::new(cfg.seed);
        let gaps = (0..2)
            .map(|l| merge_gap(model.base_weight(l), &factors[l], &merged[l], model.scale, VERIFY_INPUTS, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        report["verify_max_abs_gap"] = json!(gaps);
        trace.event(&report)?;
        let worst = gaps.iter().copied().fold(0.0, f64::max);
        println!("merge verify: max |three-factor - merged| = {worst:.3e}");
        if !(worst <= VERIFY_TOLERANCE) {
            return Err(Error::Verification(format!(
                "merged forward differs by {worst:e} (tolerance {VERIFY_TOLERANCE:e})"
            )));
        }
        return Ok(());
    }
    trace.event(&report)
}

fn evaluate_cmd(
    common: &Common,
    manifest: &Path,
    embeddings: &Path,
    joint: Option<&Path>,
    copy_reference: bool,
) -> Result<()> {
    let cfg = load_config(common)?;
    let out = out_path(common, "report.json");
    let mut trace = Trace::open(&out, "evaluate", &cfg)?;
    let manifest = EvalManifest::load(manifest)?;
    let embedder = PrecomputedEmbedder::load(embeddings, "face")?;
    let joint = joint.map(|p| PrecomputedEmbedder::load(p, "joint").map(PrecomputedJoint)).transpose()?;
    let mut precomputed = PrecomputedGenerator {
        available: embedder.keys(),
    };
    let generator: &mut dyn Generator = if copy_reference {
        &mut CopyReferenceGenerator
    } else {
        &mut precomputed
    };
    let report = evaluate(&manifest, generator, &embedder, joint.as_ref().map(|j| j as &dyn JointEmbedder))?;
    write_json(&out, &report)?;
    trace.event(&json!({
        "event": "done",
        "r_facesim": report.r_facesim.score,
        "facesim": report.facesim.score,
        "discrepancy_pct": report.discrepancy_pct,
        "failures": report.r_facesim.failures,
    }))?;
    print!("{}", report.to_table());
    Ok(())
}

fn parse_face(s: &str) -> Result<Rect> {
    let parts: Vec<u32> = s
        .split(',')
        .map(|p| p.trim().parse::<u32>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config(format!("--face {s:?}: {e}")))?;
    match parts[..] {
        [x, y, w, h] => Ok(Rect { x, y, w, h }),
        _ => Err(Error::Config(format!("--face expects x,y,w,h, got {s:?}"))),
    }
}

fn augment_plan(common: &Common, width: u32, height: u32, face: &str, draws: usize) -> Result<()> {
    let cfg = load_config(common)?;
    let out = out_path(common, "plan.jsonl");
    let mut trace = Trace::open(&out, "augment-plan", &cfg)?;
    let face = parse_face(face)?;
    let plan = plan_crops(width, height, &face)?;
    let mut f = BufWriter::new(File::create(&out)?);
    for spec in &plan {
        serde_json::to_writer(&mut f, spec)?;
        f.write_all(b"\n")?;
    }
    let mut rng = Rng::new(cfg.seed);
    let mut flips = 0;
    for k in 0..draws {
        let view = sample_view(&plan[k % plan.len()], &mut rng);
        flips += view.flip as usize;
        serde_json::to_writer(&mut f, &json!({ "draw": k, "rect": view.rect, "flip": view.flip }))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    trace.event(&json!({
        "event": "done",
        "image": [width, height],
        "face": face,
        "specs": plan.len(),
        "draws": draws,
        "flips": flips,
    }))?;
    println!("{} crop specs written to {}", plan.len(), out.display());
    Ok(())
}

fn speed_experiment(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let out = out_path(common, "speed.json");
    let mut trace = Trace::open(&out, "speed-experiment", &cfg)?;
    let exp = cfg.experiment_config();
    let report = run_experiment(&exp)?;
    write_json(&out, &report)?;
    std::fs::write(out.with_extension("csv"), curves_csv(&report))?;
    std::fs::write(out.with_extension("svg"), curves_svg(&report, exp.speed.tau_fraction))?;
    for s in &report.seeds {
        let its = |v: &[metalora::personalize::IdentitySpeed]| v.iter().map(|x| x.hit.iterations).collect::<Vec<_>>();
        trace.event(&json!({
            "event": "seed",
            "seed": s.seed,
            "heldout": s.heldout,
            "meta_iterations": its(&s.meta),
            "random_iterations": its(&s.random),
            "median_meta": s.median_meta,
            "median_random": s.median_random,
        }))?;
        println!(
            "seed {:>3}: median iterations to tau  meta {:>6.1}  random {:>6.1}",
            s.seed, s.median_meta, s.median_random
        );
    }
    trace.event(&json!({
        "event": "done",
        "median_meta": report.median_meta,
        "median_random": report.median_random,
        "meta_wins": report.meta_wins,
        "random_wins": report.random_wins,
        "sign_test_p": report.sign_test_p,
    }))?;
    println!(
        "overall median: meta {:.1}, random {:.1}; meta faster in {}/{} seeds (sign test p = {:.3})",
        report.median_meta,
        report.median_random,
        report.meta_wins,
        report.seeds.len(),
        report.sign_test_p
    );
    Ok(())
}
