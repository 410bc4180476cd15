//! The `espt` command line driven in-process: generate data, train, evaluate.
//!
//!     cargo run --release --example cli_pipeline -- [work_dir]

use std::fs;
use std::path::PathBuf;

use espt::cli::run_cli;

fn main() {
    let work: PathBuf = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("espt-cli"), Into::into);
    let data = work.join("data");
    let config = work.join("run.toml");
    let template = include_str!("configs/run.toml")
        .replace("episodes_per_epoch = 200", "episodes_per_epoch = 30")
        .replace("tasks = 1000", "tasks = 200");
    fs::create_dir_all(&work).expect("work dir");
    fs::write(&config, template).expect("config");

    let (data, config) = (data.to_str().expect("utf-8 path"), config.to_str().expect("utf-8 path"));
    let steps: [&[&str]; 3] = [
        &["espt", "gendata", "--classes", "8", "--samples", "40", "--split", "4,0,4", "--out", data],
        &["espt", "train", "--config", config],
        &["espt", "eval", "--config", config, "--checkpoint", &format!("{}/runs/espt/best", work.display())],
    ];
    for argv in steps {
        println!("$ {}", argv.join(" "));
        let code = run_cli(argv.iter().copied());
        if code != 0 {
            std::process::exit(code);
        }
    }
}
