mod common;

use std::sync::OnceLock;

use common::{desk_base, DeskRun};
use metalora::artifacts::{load_merged, load_personalized, merge_gap, merged_checkpoint, personalized_checkpoint, Provenance};
use metalora::checkpoint::Checkpoint;
use metalora::experiment::DESK_STAGE2_LR;
use metalora::metatrain::{run_stage1, TrainConfig};
use metalora::numerics::{AdamWConfig, Matrix, Rng};
use metalora::personalize::*;
use metalora::toymodel::{draw_eval_items, BoundDenoiser, NoisedItem, Sample, Split};
use metalora::Error;

struct Setup {
    run: DeskRun,
    meta: FrozenMetaDown,
}

fn setup() -> &'static Setup {
    static S: OnceLock<Setup> = OnceLock::new();
    S.get_or_init(|| {
        let run = desk_base(1);
        let out = run_stage1(&run.model, &run.train, TrainConfig { seed: 1, ..TrainConfig::default() }).unwrap();
        let meta = FrozenMetaDown::new(out.meta_down).unwrap();
        Setup { run, meta }
    })
}

fn heldout_eval(s: &Setup, n: usize) -> (ReferenceExample, Vec<NoisedItem>) {
    let id = s.run.heldout[0];
    let reference = ReferenceExample::toy(s.run.dataset.reference_of(id).unwrap().clone());
    let tests: Vec<&Sample> = s.run.dataset.samples_of(id).filter(|x| x.split == Split::Test).collect();
    let items = draw_eval_items(s.run.model.schedule(), &tests, n, &mut Rng::new(3)).unwrap();
    (reference, items)
}

#[test]
fn heldout_loss_falls_within_the_default_budget() {
    let s = setup();
    let (reference, items) = heldout_eval(s, 64);
    let cfg = PersonalizeConfig { optimizer: AdamWConfig::with_lr(DESK_STAGE2_LR), ..PersonalizeConfig::default() };
    assert_eq!(cfg.q_st2, 375);
    let out = run_stage2(&s.run.model, &s.meta, &[reference], &cfg, Some(&items)).unwrap();
    let curve = out.eval_losses.unwrap();
    assert_eq!(curve.len(), 376);
    assert!(curve[375] < curve[0], "held-out loss {} -> {}", curve[0], curve[375]);
    assert_eq!(out.train_losses.len(), 375);
    assert_eq!(out.augmented_views, 16);
}

#[test]
fn meta_down_stays_frozen() {
    let s = setup();
    let (reference, _) = heldout_eval(s, 1);
    let cfg = PersonalizeConfig { q_st2: 30, ..PersonalizeConfig::default() };
    let out = run_stage2(&s.run.model, &s.meta, &[reference], &cfg, None).unwrap();
    assert_eq!(out.meta_down_checksum_before, out.meta_down_checksum_after);
    assert_eq!(out.factors[0].l_meta_down, *s.meta.matrices()[0]);
    let mut m = s.meta.clone();
    let g = Matrix::zeros(m.matrices()[0].rows(), m.matrices()[0].cols());
    assert!(matches!(m.try_update(0, &g), Err(Error::Frozen(_))));
    assert_eq!(m.checksum(), s.meta.checksum());
}

#[test]
fn untrained_adapter_reproduces_the_base_model() {
    let s = setup();
    let (reference, items) = heldout_eval(s, 8);
    // a zero learning rate leaves the fresh factors (zero up-projection) in place
    let cfg = PersonalizeConfig { q_st2: 3, optimizer: AdamWConfig::with_lr(0.0), ..PersonalizeConfig::default() };
    let out = run_stage2(&s.run.model, &s.meta, &[reference], &cfg, None).unwrap();
    let adapters = [0, 1].map(|l| out.factors[l].as_refs());
    for item in &items {
        let adapted = BoundDenoiser { model: &s.run.model, adapters: Some(adapters) };
        let a = s.run.model.predict(item, adapted.adapters.as_ref()).unwrap();
        let b = s.run.model.predict(item, None).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn merged_export_matches_three_factor_model() {
    let s = setup();
    let (reference, items) = heldout_eval(s, 16);
    let cfg = PersonalizeConfig { q_st2: 60, optimizer: AdamWConfig::with_lr(1e-3), ..PersonalizeConfig::default() };
    let out = run_stage2(&s.run.model, &s.meta, &[reference], &cfg, None).unwrap();

    let prov = Provenance { seed: 0, config_hash: "t".into() };
    let p = Checkpoint::from_bytes(&personalized_checkpoint(&out, &prov).unwrap().to_bytes().unwrap()).unwrap();
    let (id, factors) = load_personalized(&p).unwrap();
    assert_eq!(id, out.identity);
    assert_eq!(factors, out.factors);
    let m = Checkpoint::from_bytes(&merged_checkpoint(&out.merged, id, &prov).unwrap().to_bytes().unwrap()).unwrap();
    let merged = load_merged(&m).unwrap();

    let mut rng = Rng::new(8);
    for l in 0..2 {
        let gap = merge_gap(s.run.model.base_weight(l), &factors[l], &merged[l], s.run.model.scale, 100, &mut rng).unwrap();
        assert!(gap <= 1e-12, "layer {l} gap {gap}");
    }
    // whole-model predictions agree too
    for item in &items {
        let three = s.run.model.predict(item, Some(&[0, 1].map(|l| factors[l].as_refs()))).unwrap();
        let w1 = s.run.model.base_weight(0).add(&merged[0].delta_w()).unwrap();
        let w2 = s.run.model.base_weight(1).add(&merged[1].delta_w()).unwrap();
        let folded = metalora::toymodel::ToyDenoiser::from_weights(
            s.run.model.dims(),
            s.run.model.schedule().clone(),
            w1,
            w2,
            true,
        )
        .unwrap();
        let two = folded.predict(item, None).unwrap();
        assert!(three.sub(&two).unwrap().max_abs() <= 1e-12);
    }
}

#[test]
fn several_references_feed_one_adapter() {
    let s = setup();
    let id = s.run.heldout[1];
    let refs: Vec<ReferenceExample> = s.run.dataset.samples_of(id).take(2).cloned().map(ReferenceExample::toy).collect();
    let cfg = PersonalizeConfig { q_st2: 40, ..PersonalizeConfig::default() };
    let out = run_stage2(&s.run.model, &s.meta, &refs, &cfg, None).unwrap();
    assert_eq!(out.identity, id);
    assert_eq!(out.augmented_views, 32);
    assert!(run_stage2(&s.run.model, &s.meta, &[], &cfg, None).is_err());
}

#[test]
fn stage1_checkpoint_rank_is_checked() {
    use metalora::artifacts::stage1_checkpoint;
    let s = setup();
    let prov = Provenance { seed: 1, config_hash: "t".into() };
    let md = s.meta.matrices();
    let ckpt = stage1_checkpoint(md, 1, s.run.model.base_checksum(), &prov).unwrap();
    assert!(load_stage1(&ckpt, 16).is_ok());
    assert!(matches!(load_stage1(&ckpt, 4), Err(Error::RankMismatch { expected: 4, found: 16 })));
}

#[test]
fn stage2_is_deterministic() {
    let s = setup();
    let (reference, _) = heldout_eval(s, 1);
    let cfg = PersonalizeConfig { q_st2: 25, seed: 4, ..PersonalizeConfig::default() };
    let a = run_stage2(&s.run.model, &s.meta, std::slice::from_ref(&reference), &cfg, None).unwrap();
    let b = run_stage2(&s.run.model, &s.meta, &[reference], &cfg, None).unwrap();
    assert_eq!(a.factors, b.factors);
    assert_eq!(a.train_losses, b.train_losses);
}
