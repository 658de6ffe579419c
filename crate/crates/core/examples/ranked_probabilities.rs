//! Ranked average class probabilities with bootstrap bands, on training
//! and held-out data of a briefly trained model.

use dropclass::eval::{bootstrap_ranked_probabilities, kl_to_uniform};
use dropclass::reference::ReferenceTask;
use dropclass::schedule::ProbabilityLogits;
use dropclass::trainer::{default_halvings, train, TrainConfig};

fn main() -> dropclass::Result<()> {
    let task = ReferenceTask::new(0, 0.8)?;
    let config = TrainConfig {
        iterations: 500,
        lr_halving: default_halvings(500),
        ..task.train_config(0)
    };
    let model = train(&config, task.init_model(0)?, &task.split.train, &[], None)?.model;
    for (name, data) in [("train", &task.split.train), ("enrol", &task.split.enrol)] {
        let report = bootstrap_ranked_probabilities(
            &model.embedder,
            model.head.weight.view(),
            data,
            100,
            0,
            ProbabilityLogits::Raw,
        )?;
        println!("{name}: KL-to-uniform {:.4}", kl_to_uniform(&report.point));
        for row in report.rows.iter().take(5) {
            println!(
                "  rank {:>2}: {:.4} [{:.4}, {:.4}]",
                row.rank, row.p_median, row.p_low, row.p_high
            );
        }
    }
    Ok(())
}
