//! Generates the reference corpus, splits it and writes the binary file and
//! manifest to a temporary directory.

use dropclass::corpus::{format_manifest, read_corpus, write_corpus};
use dropclass::reference::ReferenceTask;

fn main() -> dropclass::Result<()> {
    let task = ReferenceTask::new(0, 0.8)?;
    let split = &task.split;
    println!(
        "train {} utts / {} classes, enrol {} utts, test {} utts, {} target + {} nontarget trials",
        split.train.len(),
        split.train.class_ids().len(),
        split.enrol.len(),
        split.test.len(),
        task.trials.n_target(),
        task.trials.n_nontarget()
    );

    let dir = std::env::temp_dir().join("dropclass-generate-corpus");
    std::fs::create_dir_all(&dir).map_err(|e| dropclass::Error::io(&dir, e))?;
    let path = dir.join("train.dck");
    write_corpus(&split.train, &path)?;
    let back = read_corpus(&path)?;
    assert_eq!(back.utterances, split.train.utterances);
    let manifest = format_manifest(&[&split.train])?;
    println!("wrote {} ({} manifest lines)", path.display(), manifest.lines().count());
    Ok(())
}
