mod common;

use devscaffold::dataset;
use devscaffold::training::{Checkpoint, GradientRule, ModelKind, System, SystemConfig, TrainConfig, Trainer};
use devscaffold::Error;

fn small(kind: ModelKind) -> SystemConfig {
    let mut cfg = SystemConfig::for_kind(kind, 16);
    cfg.siren.width = 16;
    cfg.nca.hidden_units = 32;
    cfg.nca.steps_min = 6;
    cfg.nca.steps_max = 10;
    cfg
}

fn targets() -> Vec<devscaffold::gridcore::Tensor> {
    let suite = dataset::default_suite(16).unwrap();
    dataset::render_suite(&suite[..2]).unwrap().into_iter().map(|(_, t)| t).collect()
}

fn train_config(cfg: &SystemConfig, steps: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.1,
        steps,
        fire_rate: 0.5,
        seed: 4,
        gradient_rule: GradientRule::ClipRms { max_rms: 0.003 },
        ..TrainConfig::for_system(cfg)
    }
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let ts = targets();
    for kind in [ModelKind::Prepattern, ModelKind::GoalNca, ModelKind::Direct] {
        let cfg = small(kind);
        let tc = train_config(&cfg, 8);
        let mut whole = Trainer::new(System::init(cfg.clone(), 4).unwrap(), tc.clone(), &ts).unwrap();
        whole.run().unwrap();

        let mut first = Trainer::new(System::init(cfg.clone(), 4).unwrap(), tc.clone(), &ts).unwrap();
        for _ in 0..3 {
            first.step().unwrap();
        }
        let bytes = first.checkpoint().to_bytes().unwrap();
        let mut second = Trainer::resume(Checkpoint::from_bytes(&bytes).unwrap(), &ts).unwrap();
        second.run().unwrap();

        let bits = |l: &[f64]| l.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(whole.losses()), bits(second.losses()), "{kind:?}");
        assert_eq!(whole.checkpoint(), second.checkpoint(), "{kind:?}");
    }
}

#[test]
fn checkpoints_round_trip_through_disk() {
    let ts = targets();
    let cfg = small(ModelKind::Prepattern);
    let mut t = Trainer::new(System::init(cfg.clone(), 1).unwrap(), train_config(&cfg, 2), &ts).unwrap();
    t.run().unwrap();
    let ck = t.checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/run.mscf");
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);

    let mut bytes = ck.to_bytes().unwrap();
    bytes.truncate(bytes.len() - 3);
    assert!(Checkpoint::from_bytes(&bytes).is_err());
}

#[test]
fn divergence_is_reported_with_a_checkpoint() {
    let ts = targets();
    let cfg = small(ModelKind::GoalNca);
    let tc = TrainConfig {
        learning_rate: 1e4,
        gradient_rule: GradientRule::Plain,
        fire_rate: 1.0,
        divergence_threshold: 10.0,
        ..train_config(&cfg, 50)
    };
    let mut t = Trainer::new(System::init(cfg, 0).unwrap(), tc, &ts).unwrap();
    match t.run() {
        Err(Error::Diverged { step, checkpoint, .. }) => {
            assert!(step > 0);
            assert_eq!(checkpoint.unwrap().step, step);
        }
        Err(Error::NonFiniteGradient(_)) => {}
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn short_training_reduces_the_loss() {
    let ts = targets();
    for kind in [ModelKind::Prepattern, ModelKind::GoalNca, ModelKind::Direct] {
        let cfg = small(kind);
        let tc = TrainConfig {
            fire_rate: 1.0,
            ..train_config(&cfg, 60)
        };
        let mut t = Trainer::new(System::init(cfg, 2).unwrap(), tc, &ts).unwrap();
        t.run().unwrap();
        let l = t.losses();
        let head: f64 = l[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = l[l.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(tail < 0.8 * head, "{kind:?}: {head} -> {tail}");
    }
}

#[test]
fn gradient_rules_serialize_by_name() {
    let rule = GradientRule::ClipRms { max_rms: 0.01 };
    let text = serde_json::to_string(&rule).unwrap();
    assert_eq!(text, r#"{"rule":"clip_rms","max_rms":0.01}"#);
    assert_eq!(serde_json::from_str::<GradientRule>(&text).unwrap(), rule);
}
