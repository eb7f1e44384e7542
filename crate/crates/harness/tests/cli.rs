mod common;

use std::fs;

use common::{count_lines, run, run_pipeline, write_config, TINY_CONFIG};
use distransfer_harness::rows::read_jsonl;

#[test]
fn help_exits_zero_and_unknown_subcommand_exits_two() {
    let ok = std::process::Command::new(common::binary()).arg("--help").output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
    let bad = std::process::Command::new(common::binary()).arg("nope").output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn unknown_config_field_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{TINY_CONFIG}\nbogus = 1\n"));
    let out = run(&cfg, "gen-data", &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn missing_seed_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY_CONFIG.replace("seed = 5", ""));
    assert_eq!(run(&cfg, "gen-data", &[]).status.code(), Some(2));
    assert_eq!(run(&cfg, "gen-data", &["--seed", "5"]).status.code(), Some(0));
}

#[test]
fn missing_checkpoint_exits_two_and_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY_CONFIG);
    let out = run(&cfg, "eval-defense", &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("classifier.json"));
}

#[test]
fn t_star_beyond_schedule_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY_CONFIG.replace("t_star = [0, 1, 2]", "t_star = [0, 11]"));
    assert_eq!(run(&cfg, "gen-data", &[]).status.code(), Some(2));
}

#[test]
fn pipeline_row_counts_and_check_mode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY_CONFIG);
    run_pipeline(&cfg);
    let out = dir.path().join("out");

    // (attacks + clean) x (undefended, defended)
    assert_eq!(count_lines(&out.join("eval-defense/rows.jsonl")), 6);
    // 5 families x 5 severities x 2 defenses
    assert_eq!(count_lines(&out.join("eval-ood/rows.jsonl")), 50);
    // 3 t* values x (clean, adversarial)
    assert_eq!(count_lines(&out.join("sweep-tstar/rows.jsonl")), 6);
    // 2 norms x 2 epsilons x 2 defenses
    assert_eq!(count_lines(&out.join("sweep-eps/rows.jsonl")), 8);
    assert_eq!(count_lines(&out.join("certify/certificates.jsonl")), 2);

    let rows = read_jsonl(&out.join("eval-adaptive/rows.jsonl")).unwrap();
    assert!(rows.iter().any(|r| r.adaptive && r.defense));
    assert!(out.join("eval-quality/grid.png").exists());
    for table in ["defense", "adaptive", "corruption", "sweep_eps_linf", "sweep_eps_l2", "sweep_tstar"] {
        assert!(out.join(format!("report/{table}.csv")).exists(), "{table}");
    }

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("eval-defense/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "eval-defense");
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 4);

    // an untrained tiny model cannot meet the defense thresholds
    let checked = run(&cfg, "eval-defense", &["--check"]);
    assert_eq!(checked.status.code(), Some(4));
}

#[test]
fn out_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY_CONFIG);
    let other = dir.path().join("elsewhere");
    let out = run(&cfg, "gen-data", &["--out", other.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(other.join("gen-data/manifest.json").exists());
    assert!(!dir.path().join("out").exists());
}

#[test]
fn shipped_configs_load() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["shapes.toml", "points.toml"] {
        let cfg = distransfer_harness::ExperimentConfig::load(&dir.join(name)).unwrap();
        assert_eq!(cfg.seed, Some(1), "{name}");
    }
}
