//! Compares analytic gradients with central differences for every loss kind,
//! at the head and through the whole extractor.

use dropclass::embedder::{EmbedderConfig, EmbedderParams, GradCheckOptions};
use dropclass::gradcheck::{head_check, model_check};
use dropclass::head::{HeadMatrix, LossKind, LossSpec};
use dropclass::reference::ReferenceTask;

fn main() -> dropclass::Result<()> {
    let task = ReferenceTask::new(0, 0.0)?;
    let utt = &task.split.train.utterances[0];
    let features = utt.features.slice(ndarray::s![0..20, ..]).mapv(f64::from);
    let embedder = EmbedderParams::<f64>::init(
        EmbedderConfig {
            feat_dim: task.spec.feat_dim,
            ..EmbedderConfig::default()
        },
        1,
    )?;
    let head = HeadMatrix::<f64>::init(task.n_train_classes(), embedder.embed_dim(), 1)?;
    let (h, _) = embedder.forward(features.view())?;

    for kind in LossKind::ALL {
        let spec = LossSpec::default_for(kind, head.n_classes());
        let at_head = head_check(h.view(), head.weight.view(), utt.class_id, &spec, 1e-5)?;
        let options = GradCheckOptions {
            coords: 50,
            ..GradCheckOptions::default()
        };
        let full = model_check(
            &embedder,
            head.weight.view(),
            features.view(),
            utt.class_id,
            &spec,
            &options,
        )?;
        println!(
            "{kind:>10}: head {} coords max rel err {:.1e}; extractor {} coords max rel err {:.1e}",
            at_head.checked, at_head.max_relative_error, full.checked, full.max_relative_error
        );
    }
    Ok(())
}
