use fddlab::diffusion::{NoiseSchedule, ScheduleKind};
use fddlab::models::{Component, Model, ModelConfig};
use fddlab::rng::Stream;
use fddlab::teachers::{pretrain_backbone, train_edit_adapter, train_video_adapter, TrainConfig};
use fddlab::train::LossLog;
use fddlab::worldgen::{build_datasets, DatasetPlan, Datasets};

fn small_model(seed: u64) -> Model {
    let cfg = ModelConfig {
        c1: 8,
        c2: 16,
        emb: 16,
        groups: 4,
        ..Default::default()
    };
    Model::new(cfg, &Stream::new(seed)).unwrap()
}

fn data(n: usize) -> Datasets {
    let mut p = DatasetPlan::uniform(n, 31);
    p.height = 8;
    p.width = 8;
    p.frames = 2;
    build_datasets(&p).unwrap()
}

fn sched() -> NoiseSchedule {
    NoiseSchedule::new(64, ScheduleKind::Linear, true).unwrap()
}

fn heldout(log: &LossLog) -> (f64, f64) {
    let h = log.split("heldout");
    (h.first().unwrap().1, h.last().unwrap().1)
}

#[test]
fn backbone_overfits_a_single_frame() {
    let d = data(4);
    let one = vec![d.backbone[0].clone()];
    let mut m = small_model(1);
    let cfg = TrainConfig {
        iters: 3000,
        batch: 8,
        lr: 3e-3,
        eval_every: 3000,
        heldout: 0,
        ..Default::default()
    };
    let log = pretrain_backbone(&mut m, &one, &sched(), &cfg, &Stream::new(2)).unwrap();
    let train = log.split("train");
    let tail: f64 = train[train.len() - 50..].iter().map(|r| r.1).sum::<f64>() / 50.0;
    assert!(tail < 1e-2, "tail train loss {tail}");
}

#[test]
fn backbone_heldout_loss_halves() {
    let d = data(96);
    let mut m = small_model(3);
    let cfg = TrainConfig {
        iters: 300,
        batch: 16,
        lr: 3e-3,
        eval_every: 300,
        heldout: 16,
        ..Default::default()
    };
    let log = pretrain_backbone(&mut m, &d.backbone, &sched(), &cfg, &Stream::new(4)).unwrap();
    let (first, last) = heldout(&log);
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn adapters_reduce_heldout_loss_with_backbone_frozen() {
    let d = data(256);
    let mut m = small_model(5);
    let s = sched();
    let base = TrainConfig {
        iters: 200,
        batch: 16,
        lr: 3e-3,
        eval_every: 200,
        heldout: 16,
        ..Default::default()
    };
    pretrain_backbone(&mut m, &d.backbone, &s, &base, &Stream::new(6)).unwrap();
    let theta = m.params.checksum(Component::Theta);

    let rng = Stream::new(7);
    m.attach_edit(&rng).unwrap();
    m.attach_video(&rng).unwrap();
    let cfg = TrainConfig { iters: 400, heldout: 32, ..base };
    let edit = train_edit_adapter(&mut m, &d.edit, &s, &cfg, &rng.split("edit")).unwrap();
    let video = train_video_adapter(&mut m, &d.video, &s, &cfg, &rng.split("video")).unwrap();
    for (name, log) in [("edit", &edit), ("video", &video)] {
        let (first, last) = heldout(log);
        assert!(last < first, "{name}: {first} -> {last}");
    }
    assert_eq!(m.params.checksum(Component::Theta), theta);
}
