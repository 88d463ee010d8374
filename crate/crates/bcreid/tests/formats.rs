mod common;

use bcreid::checkpoint;
use bcreid::config::RunConfig;
use bcreid::dataset_io::{benchmark_digest, load_benchmark, load_dataset, save_dataset};
use bcreid::Error;
use bcreid_core::model::{Consolidation, ModelParams};
use bcreid_core::synth::{gen_benchmark, BenchmarkConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn dataset_round_trip_is_bit_exact() {
    let cfg = BenchmarkConfig { tasks: 2, ids_per_domain_train: 3, ids_per_domain_eval: 5, images_per_id: 4, ..Default::default() };
    let ds = gen_benchmark(&cfg, 5).unwrap().remove(0);
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), ds);
}

#[test]
fn truncated_blob_and_missing_file_are_format_errors() {
    let cfg = BenchmarkConfig { tasks: 2, ids_per_domain_train: 3, ids_per_domain_eval: 5, images_per_id: 4, ..Default::default() };
    let ds = gen_benchmark(&cfg, 5).unwrap().remove(0);
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let q = dir.path().join("query.f64");
    let bytes = std::fs::read(&q).unwrap();
    std::fs::write(&q, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Format { .. })));
    std::fs::remove_file(&q).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Format { .. })));
}

#[test]
fn regenerating_data_gives_identical_bytes() {
    let cfg = common::tiny_config();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    common::gen(&cfg, a.path());
    common::gen(&cfg, b.path());
    assert_eq!(benchmark_digest(a.path()).unwrap(), benchmark_digest(b.path()).unwrap());
    let loaded = load_benchmark(a.path()).unwrap();
    assert_eq!(loaded.suite, gen_benchmark(&cfg.benchmark.config(), cfg.benchmark.seed).unwrap());
    let mut other = cfg.clone();
    other.benchmark.seed += 1;
    common::gen(&other, b.path());
    assert_ne!(benchmark_digest(a.path()).unwrap(), benchmark_digest(b.path()).unwrap());
}

#[test]
fn checkpoint_saves_are_byte_stable_and_truncation_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = ModelParams::init(4, Some(Consolidation::Multiply), &mut rng).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    checkpoint::save(&a, &p, None).unwrap();
    checkpoint::save(&b, &p, None).unwrap();
    assert_eq!(checkpoint::file_hash(&a).unwrap(), checkpoint::file_hash(&b).unwrap());
    let bytes = std::fs::read(&a).unwrap();
    std::fs::write(&b, &bytes[..bytes.len() / 2]).unwrap();
    assert!(checkpoint::load(&b).is_err());
    let (q, frozen) = checkpoint::load(&a).unwrap();
    assert_eq!(q, p);
    assert!(frozen.is_none());
}

#[test]
fn shipped_default_config_matches_the_built_in_defaults() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.toml");
    assert_eq!(RunConfig::load(std::path::Path::new(path)).unwrap(), RunConfig::default());
    let smoke = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.toml");
    RunConfig::load(std::path::Path::new(smoke)).unwrap();
}
