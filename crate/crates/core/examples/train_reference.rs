//! Trains the reference extractor with and without DropClass and reports
//! loss and test EER. Pass an iteration count to shorten the run.

use dropclass::eval::{eer, extract_all, score_trials};
use dropclass::reference::ReferenceTask;
use dropclass::schedule::{DropConfig, DropMode};
use dropclass::trainer::{default_halvings, ema, train, TrainConfig};

fn main() -> dropclass::Result<()> {
    let iterations = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(2000);
    let task = ReferenceTask::new(0, 0.0)?;
    let base = TrainConfig {
        iterations,
        lr_halving: default_halvings(iterations),
        ..task.train_config(0)
    };
    let dropclass = TrainConfig {
        drop: DropConfig {
            mode: DropMode::DropClass,
            period: 25,
            count: 20,
        },
        ..base.clone()
    };
    let test: Vec<_> = task.split.test.utterances.iter().collect();
    for (name, config) in [("baseline", base), ("dropclass", dropclass)] {
        let out = train(&config, task.init_model(0)?, &task.split.train, &[], None)?;
        let smooth = ema(&out.log.losses(), 100);
        let scored = score_trials(&extract_all(&out.model.embedder, &test)?, &task.trials)?;
        println!(
            "{name:>9}: smoothed loss {:.3} -> {:.4}, {} refreshes, final lr {}, test EER {:.4}",
            smooth[0],
            smooth[smooth.len() - 1],
            out.log.refreshes.len(),
            out.model.lr,
            eer(&scored)?.eer
        );
    }
    Ok(())
}
