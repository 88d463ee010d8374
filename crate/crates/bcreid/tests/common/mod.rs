#![allow(dead_code)]

use std::path::Path;

use bcreid::config::RunConfig;

/// Two small tasks and a one-epoch schedule: a full run takes well under a
/// second.
pub fn tiny_config() -> RunConfig {
    RunConfig::parse(
        r#"
seeds = [7]
[benchmark]
seed = 3
tasks = 2
ids_per_domain_train = 6
ids_per_domain_eval = 5
images_per_id = 4
[train]
epochs_per_task = 1
p = 3
k = 2
replay_batch = 4
replay_ids_per_task = 3
"#,
    )
    .unwrap()
}

pub fn with_tasks(mut cfg: RunConfig, tasks: usize) -> RunConfig {
    cfg.benchmark.tasks = tasks;
    cfg
}

pub fn gen(cfg: &RunConfig, dir: &Path) {
    bcreid::pipeline::gen_data(cfg, dir).unwrap();
}

pub fn file_bytes(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
