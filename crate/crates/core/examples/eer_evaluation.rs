//! Scores the reference trials with an untrained extractor and reports the
//! EER, then shows the computation on a hand-made score list.

use dropclass::eval::{eer, extract_all, score_trials, EerReport, ScoredTrials};
use dropclass::reference::ReferenceTask;

fn main() -> dropclass::Result<()> {
    let toy = ScoredTrials::new(
        vec![0.9, 0.8, 0.3, 0.2, 0.1, 0.7],
        vec![true, true, true, false, false, false],
    )?;
    let r = eer(&toy)?;
    println!("toy scores: EER {:.4} at threshold {:.3}", r.eer, r.threshold);

    let task = ReferenceTask::new(0, 0.0)?;
    let model = task.init_model(0)?;
    let test: Vec<_> = task.split.test.utterances.iter().collect();
    let scored = score_trials(&extract_all(&model.embedder, &test)?, &task.trials)?;
    let report = EerReport::new(&eer(&scored)?, &scored);
    println!(
        "untrained extractor: {}",
        serde_json::to_string(&report).expect("serializable")
    );
    Ok(())
}
