//! Traces the active class set of every drop mode over a short schedule.

use dropclass::head::HeadMatrix;
use dropclass::reference::ReferenceTask;
use dropclass::rng::stream_rng;
use dropclass::schedule::{ClassHead, DropConfig, DropMode, DropState, ProbabilityLogits};

fn main() -> dropclass::Result<()> {
    let task = ReferenceTask::new(0, 0.0)?;
    let model = task.init_model(0)?;
    let enrol = task.enrol();
    let m = model.n_classes();
    for mode in DropMode::ALL {
        let config = DropConfig {
            mode,
            period: 10,
            count: 8,
        };
        let mut head = ClassHead::new(HeadMatrix::<f32>::init(m, model.embedder.embed_dim(), 0)?.weight);
        let mut state = DropState::new(config, m, ProbabilityLogits::Raw, stream_rng(0, 1))?;
        let mut trace = Vec::new();
        for it in 0..40 {
            if state.refresh_due() {
                let ev = state.refresh(it, &model.embedder, &mut head, &enrol)?;
                trace.push(format!("it {it}: |R|={} rows={}", ev.active, state.head_rows().len()));
            }
            state.tick();
        }
        println!(
            "{mode:>18}: {}",
            if trace.is_empty() {
                "no refreshes".into()
            } else {
                trace.join(", ")
            }
        );
    }
    Ok(())
}
