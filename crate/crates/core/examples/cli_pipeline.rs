//! Drives the command-line pipeline in-process: gen-data, train, adapt,
//! evaluate and diagnose into a temporary directory, with short budgets.

use dropclass::cli;

fn run(args: &[&str]) {
    let code = cli::run(std::iter::once("dropclass").chain(args.iter().copied()));
    assert_eq!(code, 0, "{args:?} exited {code}");
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let root = std::env::temp_dir().join("dropclass-cli-pipeline");
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let (data, base, adapted) = (p("data"), p("base"), p("adapted"));
    let (base_ckpt, adapted_ckpt) = (p("base/model.dckm"), p("adapted/model.dckm"));
    run(&["gen-data", "--out", &data, "--corpus.skew_factor", "0.8"]);
    run(&["train", "--data", &data, "--out", &base, "--train.iterations", "500"]);
    run(&[
        "adapt",
        "--checkpoint",
        &base_ckpt,
        "--data",
        &data,
        "--out",
        &adapted,
        "--drop.mode",
        "dropadapt_combine",
        "--train.adapt_iterations",
        "200",
        "--drop.P",
        "50",
        "--drop.D",
        "4",
    ]);
    run(&[
        "evaluate",
        "--checkpoint",
        &adapted_ckpt,
        "--data",
        &data,
        "--out",
        &p("eval"),
    ]);
    run(&[
        "diagnose",
        "--checkpoint",
        &adapted_ckpt,
        "--data",
        &data,
        "--out",
        &p("diag"),
        "--n-bootstrap",
        "50",
    ]);
    for file in ["eval/eer.json", "diag/kl.json"] {
        let text = std::fs::read_to_string(root.join(file)).expect("output written");
        println!("{file}: {}", text.trim());
    }
}
