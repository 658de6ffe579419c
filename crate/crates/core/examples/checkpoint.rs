//! Writes a model checkpoint, reads it back and checks it is bit-identical.

use dropclass::model::Model;
use dropclass::reference::ReferenceTask;

fn main() -> dropclass::Result<()> {
    let task = ReferenceTask::new(0, 0.0)?;
    let model = task.init_model(0)?;
    let path = std::env::temp_dir().join("dropclass-example.dckm");
    model.write(&path)?;
    let back = Model::read(&path)?;
    assert_eq!(back.encode()?, model.encode()?);
    println!(
        "{}: {} bytes, {} classes, embedding dim {}, lr {}",
        path.display(),
        std::fs::metadata(&path)
            .map_err(|e| dropclass::Error::io(&path, e))?
            .len(),
        back.n_classes(),
        back.embedder.embed_dim(),
        back.lr
    );
    Ok(())
}
