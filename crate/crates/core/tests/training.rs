//! Trainer contracts and the tracking protocol on small models.

use evtrack::backbone::ModelConfig;
use evtrack::eval::track_sequence;
use evtrack::fusion::event_graph;
use evtrack::model::{Sample, Tracker, TrackerKind};
use evtrack::nn::Checkpoint;
use evtrack::pipeline::{prepare_all, Prepared};
use evtrack::synthgen::{generate_dataset, DatasetSpec};
use evtrack::trainer::{train_stage1, train_stage2, Stage, TrainConfig, Trainer};
use evtrack::Error;

fn small_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 16,
        template_size: 32,
        search_size: 64,
        depth_slow: 4,
        depth_fast: 2,
        heads: 2,
        ..ModelConfig::desk()
    }
}

fn data(cfg: &ModelConfig, count: usize, windows: usize) -> Vec<Prepared> {
    let spec = DatasetSpec {
        windows,
        ..DatasetSpec::desk()
    };
    prepare_all(generate_dataset(&spec, count, 5).unwrap(), cfg).unwrap()
}

fn train_config(stage: Stage, epochs: usize) -> TrainConfig {
    let mut c = TrainConfig::desk(stage);
    c.epochs = epochs;
    c.batch_size = 4;
    c.sampler.pairs_per_sequence = 4;
    c.probe_size = 4;
    c
}

fn model(kind: TrackerKind, seed: u64) -> Tracker<f32> {
    Tracker::new(kind, &small_config(), seed).unwrap()
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let d = data(&small_config(), 2, 6);
    let mut cfg = train_config(Stage::Slow, 1);
    cfg.lr_backbone = 0.0;
    cfg.lr_gcn = 0.0;
    cfg.weight_decay = 0.0;
    let m = model(TrackerKind::Slow, 1);
    let before = m.ps.digest();
    let (m, log) = train_stage1(&cfg, m, &d, |_, _| Ok(false)).unwrap();
    assert_eq!(log.len(), 1);
    assert!(log[0].loss.total > 0.0);
    assert_eq!(m.ps.digest(), before);
}

#[test]
fn training_is_deterministic_and_seeded() {
    let d = data(&small_config(), 2, 6);
    let run = |seed| {
        let mut cfg = train_config(Stage::Slow, 2);
        cfg.seed = seed;
        train_stage1(&cfg, model(TrackerKind::Slow, 1), &d, |_, _| Ok(false)).unwrap()
    };
    let (a, la) = run(3);
    let (b, lb) = run(3);
    let (c, _) = run(4);
    assert_eq!(a.ps.digest(), b.ps.digest());
    assert_eq!(la, lb);
    assert_ne!(a.ps.digest(), c.ps.digest());
}

#[test]
fn resume_reproduces_uninterrupted_training() {
    let d = data(&small_config(), 2, 6);
    let cfg = train_config(Stage::Fast, 3);
    let (straight, _) = train_stage1(&cfg, model(TrackerKind::Fast, 2), &d, |_, _| Ok(false)).unwrap();

    let mut first = Trainer::new(cfg.clone(), model(TrackerKind::Fast, 2), None).unwrap();
    first.run_epoch(&d).unwrap();
    let bytes = first.to_checkpoint().to_bytes().unwrap();
    drop(first);

    // a fresh model with different initial weights, restored from the state
    let mut second = Trainer::new(cfg, model(TrackerKind::Fast, 99), None).unwrap();
    second.resume(&Checkpoint::parse(&bytes).unwrap()).unwrap();
    assert_eq!((second.epoch, second.steps()), (1, 2));
    let log = second.train(&d, |_, _| Ok(false)).unwrap();
    assert_eq!(log.len(), 2);
    assert_eq!(second.model.ps.digest(), straight.ps.digest());
}

#[test]
fn resume_rejects_other_stage() {
    let t = Trainer::new(train_config(Stage::Slow, 1), model(TrackerKind::Slow, 1), None).unwrap();
    let ck = t.to_checkpoint();
    let mut other = Trainer::new(train_config(Stage::Fast, 1), model(TrackerKind::Fast, 1), None).unwrap();
    assert!(matches!(other.resume(&ck), Err(Error::Checkpoint(_))));
}

#[test]
fn early_stop_callback_ends_training() {
    let d = data(&small_config(), 2, 6);
    let (_, log) = train_stage1(&train_config(Stage::Slow, 5), model(TrackerKind::Slow, 1), &d, |t, e| {
        e.mean_iou = Some(0.9);
        Ok(t.epoch >= 2)
    })
    .unwrap();
    assert_eq!(log.len(), 2);
    assert_eq!(log[1].mean_iou, Some(0.9));
}

#[test]
fn stage_one_never_distils() {
    for stage in [Stage::Slow, Stage::Fast] {
        assert_eq!(train_config(stage, 1).effective_weights().kd, 0.0);
    }
    assert_eq!(train_config(Stage::Finetune, 1).effective_weights().kd, 0.1);
}

#[test]
fn trainer_checks_stage_and_teacher() {
    let cfg = train_config(Stage::Slow, 1);
    assert!(matches!(Trainer::new(cfg, model(TrackerKind::Fast, 1), None), Err(Error::Config(_))));
    let ft = train_config(Stage::Finetune, 1);
    assert!(matches!(Trainer::new(ft.clone(), model(TrackerKind::Fast, 1), None), Err(Error::Config(_))));
    let wide = Tracker::new(
        TrackerKind::Slow,
        &ModelConfig {
            embed_dim: 32,
            ..small_config()
        },
        1,
    )
    .unwrap();
    assert!(matches!(Trainer::new(ft, model(TrackerKind::Fast, 1), Some(wide)), Err(Error::Config(_))));
}

#[test]
fn fine_tuning_keeps_the_teacher_frozen() {
    let d = data(&small_config(), 2, 6);
    let slow = model(TrackerKind::Slow, 1);
    let digest = slow.ps.digest();
    let fast = Tracker::fast_from_slow(&slow, 2).unwrap();
    let fast_digest = fast.ps.digest();
    let (slow, fast, log) = train_stage2(&train_config(Stage::Finetune, 2), slow, fast, &d, |t, _| {
        assert_eq!(t.teacher().unwrap().digest(), digest);
        Ok(false)
    })
    .unwrap();
    assert_eq!(slow.ps.digest(), digest);
    assert_ne!(fast.ps.digest(), fast_digest);
    assert_eq!(log.len(), 3);
    assert!(log.iter().all(|e| e.kd_probe.is_some()));
    assert!(log[2].loss.kd > 0.0);
}

#[test]
fn non_finite_loss_names_the_sample() {
    let d = data(&small_config(), 2, 6);
    let mut m = model(TrackerKind::Slow, 1);
    let id = m.ps.id("head.score.conv3.weight").or_else(|| m.ps.iter().find(|(_, p)| p.name.starts_with("head.")).map(|(id, _)| id));
    m.ps.get_mut(id.unwrap()).fill(f32::NAN);
    let mut t = Trainer::new(train_config(Stage::Slow, 1), m, None).unwrap();
    match t.run_epoch(&d) {
        Err(Error::NonFinite(msg)) => {
            assert!(msg.contains("sequence seq_"), "{msg}");
            assert!(msg.contains("template window") && msg.contains("search window"), "{msg}");
            assert!(msg.contains("epoch 0, batch 0"), "{msg}");
        }
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn single_accumulation_step_equals_fast_forward() {
    let cfg = small_config();
    let d = data(&cfg, 1, 6);
    let seq = &d[0];
    let m = model(TrackerKind::Fast, 3);
    for i in 0..seq.num_windows() {
        let template = seq.template(&cfg, 0).unwrap();
        let (search, _) = seq.search(&cfg, i, &seq.gt(i)).unwrap();
        let window = seq.record.window_events(i);
        let sample = Sample {
            template: template.clone(),
            search: search.clone(),
            graph: event_graph(&window, cfg.max_points, cfg.knn_k).unwrap(),
        };
        let (fwd, _) = m.forward(&sample).unwrap();
        let cached = m.encode_visual(&template, &search, &m.zero_vectors()).unwrap();
        let out = m.accumulate_and_track(&cached, &window, 1).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0], fwd.decoded, "window {i}");
    }
}

#[test]
fn accumulation_rejects_zero_outputs() {
    let cfg = small_config();
    let d = data(&cfg, 1, 3);
    let m = model(TrackerKind::Fast, 3);
    let t = d[0].template(&cfg, 0).unwrap();
    let (s, _) = d[0].search(&cfg, 1, &d[0].gt(1)).unwrap();
    let cached = m.encode_visual(&t, &s, &m.zero_vectors()).unwrap();
    assert!(matches!(m.accumulate_and_track(&cached, &d[0].record.window_events(1), 0), Err(Error::Argument(_))));
}

#[test]
fn tracking_protocol_outputs() {
    let cfg = small_config();
    let d = data(&cfg, 1, 10);
    let seq = &d[0];
    let dt = seq.record.delta_t;

    let slow = track_sequence(&model(TrackerKind::Slow, 1), seq, 1).unwrap();
    assert_eq!(slow.boxes.len(), 10);
    assert_eq!(slow.boxes[0], seq.gt(0));
    assert!(slow.latencies.iter().all(|&l| l > 0.0));
    assert_eq!(slow.t_out_us, (0..10).map(|i| i * dt + dt).collect::<Vec<_>>());
    assert!(track_sequence(&model(TrackerKind::Slow, 1), seq, 3).is_err());

    let fast = track_sequence(&model(TrackerKind::Fast, 1), seq, 3).unwrap();
    assert_eq!(fast.boxes.len(), 30);
    let want: Vec<u64> = (0..10u64).flat_map(|i| (1..=3u64).map(move |j| i * dt + j * dt / 3)).collect();
    assert_eq!(fast.t_out_us, want);
    assert!(fast.boxes[..3].iter().all(|b| *b == seq.gt(0)));
    let sensor = seq.record.stream.sensor;
    for b in &fast.boxes {
        let (cx, cy) = b.center();
        assert!(b.w >= 1.0 && b.h >= 1.0);
        assert!((0.0..=sensor.width as f64).contains(&cx) && (0.0..=sensor.height as f64).contains(&cy));
    }
    assert_eq!(fast.window_boxes().len(), 10);
}

#[test]
fn checkpoint_file_reproduces_tracking() {
    let cfg = small_config();
    let d = data(&cfg, 1, 5);
    let m = model(TrackerKind::Slow, 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("slow.ckpt");
    m.save(&path).unwrap();
    let mut loaded = model(TrackerKind::Slow, 77);
    loaded.load_params(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(track_sequence(&loaded, &d[0], 1).unwrap().boxes, track_sequence(&m, &d[0], 1).unwrap().boxes);
    let mut fast = model(TrackerKind::Fast, 1);
    assert!(matches!(fast.load_params(&Checkpoint::load(&path).unwrap()), Err(Error::Checkpoint(_))));
}
