use dropclass::head::{LossKind, LossSpec};
use dropclass::reference::ReferenceTask;
use dropclass::schedule::{DropConfig, DropMode};
use dropclass::trainer::{adapt, ema, train, TrainConfig};
use dropclass::Error;

#[test]
fn default_run_halves_the_loss() {
    let task = ReferenceTask::new(0, 0.0).unwrap();
    let out = train(
        &task.train_config(0),
        task.init_model(0).unwrap(),
        &task.split.train,
        &[],
        None,
    )
    .unwrap();
    assert!(out.aborted.is_none());
    let smooth = ema(&out.log.losses(), 100);
    assert!(
        smooth[smooth.len() - 1] <= 0.5 * smooth[0],
        "{} -> {}",
        smooth[0],
        smooth[smooth.len() - 1]
    );
    assert_eq!(out.model.iterations, 2000);
    assert_eq!(out.model.lr, 0.2 / 16.0);
}

#[test]
fn every_loss_kind_trains_without_numeric_failure() {
    let task = ReferenceTask::new(1, 0.0).unwrap();
    let n = task.n_train_classes();
    for kind in LossKind::ALL {
        let config = TrainConfig {
            loss: LossSpec::default_for(kind, n),
            drop: DropConfig {
                mode: DropMode::DropClass,
                period: 25,
                count: 20,
            },
            ..task.train_config(1)
        };
        let out = train(&config, task.init_model(1).unwrap(), &task.split.train, &[], None).unwrap();
        assert!(out.aborted.is_none(), "{kind}: {:?}", out.aborted);
        let smooth = ema(&out.log.losses(), 100);
        assert!(
            smooth[smooth.len() - 1] < smooth[0],
            "{kind}: {} -> {}",
            smooth[0],
            smooth[smooth.len() - 1]
        );
    }
}

#[test]
fn modes_are_routed_to_their_phase() {
    let task = ReferenceTask::new(0, 0.0).unwrap();
    let mut config = task.train_config(0);
    config.drop = DropConfig {
        mode: DropMode::DropAdapt,
        period: 10,
        count: 4,
    };
    let err = train(
        &config,
        task.init_model(0).unwrap(),
        &task.split.train,
        &task.enrol(),
        None,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Validation { .. }));
    config.drop.mode = DropMode::DropClass;
    let err = adapt(
        &config,
        task.init_model(0).unwrap(),
        &task.split.train,
        &task.enrol(),
        None,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Validation { .. }));
}

#[test]
fn adaptation_continues_from_the_checkpoint_state() {
    let task = ReferenceTask::new(2, 0.8).unwrap();
    let short = TrainConfig {
        iterations: 200,
        lr_halving: vec![100],
        ..task.train_config(2)
    };
    let base = train(&short, task.init_model(2).unwrap(), &task.split.train, &[], None)
        .unwrap()
        .model;
    assert_eq!(base.lr, 0.1);
    let config = TrainConfig {
        iterations: 60,
        lr_halving: vec![],
        drop: DropConfig {
            mode: DropMode::DropAdaptCombine,
            period: 20,
            count: 5,
        },
        ..task.train_config(2)
    };
    let out = adapt(&config, base, &task.split.train, &task.enrol(), None).unwrap();
    assert_eq!(out.log.rows[0].lr, 0.1);
    assert_eq!(out.model.iterations, 260);
    assert_eq!(out.model.active.len(), 40 - 15);
    assert_eq!(out.model.head_rows().len(), 40 - 15 + 1);
    assert_eq!(
        out.log.refreshes.iter().map(|e| e.iteration).collect::<Vec<_>>(),
        vec![0, 20, 40]
    );
}
