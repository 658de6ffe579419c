//! Trains on a skewed corpus, then adapts with DropAdapt (combine variant)
//! and prints how the enrolment KL-to-uniform falls at each refresh.

use dropclass::reference::ReferenceTask;
use dropclass::schedule::{DropConfig, DropMode};
use dropclass::trainer::{adapt, train, TrainConfig};

fn main() -> dropclass::Result<()> {
    let task = ReferenceTask::new(0, 0.8)?;
    let base = train(&task.train_config(0), task.init_model(0)?, &task.split.train, &[], None)?;
    let config = TrainConfig {
        iterations: 500,
        lr_halving: vec![],
        drop: DropConfig {
            mode: DropMode::DropAdaptCombine,
            period: 100,
            count: 4,
        },
        ..task.train_config(0)
    };
    let out = adapt(&config, base.model, &task.split.train, &task.enrol(), None)?;
    for ev in &out.log.refreshes {
        println!(
            "iter {:>3}: KL active {:.3}  all rows {:.3}  |R| -> {}  dropped {:?}",
            ev.iteration,
            ev.kl_active.unwrap_or(f64::NAN),
            ev.kl_full.unwrap_or(f64::NAN),
            ev.active,
            ev.dropped
        );
    }
    println!(
        "final: KL active {:.3}, all rows {:.3}, head rows {}",
        out.final_kl_active.unwrap_or(f64::NAN),
        out.final_kl_full.unwrap_or(f64::NAN),
        out.model.head_rows().len()
    );
    Ok(())
}
