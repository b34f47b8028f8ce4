use viewsplat::train::{
    begin_finetune, begin_stage2, run_steps, train_step, Phase, SceneViews, TrainConfig, TrainState,
};
use viewsplat::workbench::checkpoint::{train_state_checkpoint, train_state_from_checkpoint, Checkpoint};
use viewsplat::workbench::scene::{gen_scene, render_views, PoseConfig, SceneSpec};

fn dataset(n: usize) -> Vec<SceneViews> {
    let poses = PoseConfig {
        azimuths: 8,
        elevations: vec![6.0, 18.0],
        image_size: 16,
        ..PoseConfig::default()
    };
    (0..n)
        .map(|i| SceneViews {
            name: format!("s{i}"),
            views: render_views(&gen_scene(&SceneSpec::family(i, 120, 7)).unwrap(), &poses).unwrap(),
        })
        .collect()
}

fn cfg() -> TrainConfig {
    let mut cfg = TrainConfig::tiny();
    cfg.data.batch_scenes = 2;
    cfg.data.targets_per_step = 2;
    cfg.optim.warmup_steps = 2;
    cfg.steps.stage1 = 6;
    cfg.steps.stage2 = 6;
    cfg.steps.finetune = 6;
    cfg.sim.max_rendered = 6;
    cfg
}

fn run(state: &mut TrainState, ds: &[SceneViews], cfg: &TrainConfig, steps: u64) -> Vec<String> {
    let mut log = Vec::new();
    run_steps(state, ds, cfg, steps, &mut |r| log.push(r.log_line())).unwrap();
    log
}

#[test]
fn fixed_seed_runs_repeat_exactly() {
    let ds = dataset(2);
    let cfg = cfg();
    let go = || {
        let mut s = TrainState::new(&cfg).unwrap();
        let mut log = run(&mut s, &ds, &cfg, 6);
        let mut s2 = begin_stage2(&s, &cfg, true).unwrap();
        log.extend(run(&mut s2, &ds, &cfg, 6));
        let mut s3 = begin_finetune(&s2);
        log.extend(run(&mut s3, &ds, &cfg, 6));
        (log, s3)
    };
    let (a, sa) = go();
    let (b, sb) = go();
    assert_eq!(a.len(), 18);
    assert_eq!(a, b);
    assert_eq!(sa, sb);
    assert!(a.iter().all(|l| !l.contains("NaN")));
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let ds = dataset(2);
    let cfg = cfg();
    for phase in [Phase::Stage1, Phase::Stage2, Phase::Finetune] {
        let mut start = TrainState::new(&cfg).unwrap();
        if phase != Phase::Stage1 {
            start = begin_stage2(&start, &cfg, true).unwrap();
        }
        if phase == Phase::Finetune {
            start = begin_finetune(&start);
        }
        let mut straight = start.clone();
        let full = run(&mut straight, &ds, &cfg, 5);

        let mut first = start.clone();
        let mut log = run(&mut first, &ds, &cfg, 2);
        let bytes = train_state_checkpoint(&first, &cfg).unwrap().to_bytes().unwrap();
        let (mut resumed, cfg2) = train_state_from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(resumed, first);
        log.extend(run(&mut resumed, &ds, &cfg2, 3));
        assert_eq!(log, full, "{phase:?}");
        assert_eq!(resumed, straight, "{phase:?}");
    }
}

#[test]
fn phase_budget_is_respected() {
    let ds = dataset(1);
    let mut cfg = cfg();
    cfg.data.batch_scenes = 1;
    let mut s = TrainState::new(&cfg).unwrap();
    let log = run(&mut s, &ds, &cfg, 100);
    assert_eq!(log.len(), 6);
    assert_eq!(s.step, 6);
}

#[test]
fn too_few_views_are_rejected() {
    let mut ds = dataset(1);
    ds[0].views.truncate(10);
    let cfg = cfg();
    let mut s = TrainState::new(&cfg).unwrap();
    assert!(train_step(&mut s, &ds, &cfg).is_err());
}

#[test]
fn fresh_decoder_differs_from_transfer() {
    let cfg = cfg();
    let s = TrainState::new(&cfg).unwrap();
    let t = begin_stage2(&s, &cfg, true).unwrap();
    let f = begin_stage2(&s, &cfg, false).unwrap();
    assert_eq!(t.model.encoder, f.model.encoder);
    assert_eq!(t.model.decoder.trunk, s.model.decoder.trunk);
    assert_eq!(t.model.decoder.color, s.model.decoder.color);
    assert_ne!(f.model.decoder.trunk, s.model.decoder.trunk);
}
